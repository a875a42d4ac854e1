//! Randomized, loop-free relay path construction.
//!
//! A path always starts at one of the client's own flagged relays (the
//! dedicated next-hop), continues through `k` relays drawn uniformly
//! without replacement from the remaining pool regardless of their flag,
//! and ends at a target resolver. `k` itself is drawn uniformly from the
//! configured `[min_relays, max_relays]` range, so the hop count, the
//! relay selection, and their order are all randomized per query.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::NodeAddr;

/// One relay in a client's list. The flag marks the client's own
/// dedicated next-hop candidates; other clients list the same relay
/// without the flag and may pick it as a subsequent hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayEntry {
    pub addr: NodeAddr,
    pub is_nexthop_candidate: bool,
    pub operator_tag: Option<String>,
}

impl RelayEntry {
    pub fn new(addr: NodeAddr, is_nexthop_candidate: bool) -> Self {
        RelayEntry { addr, is_nexthop_candidate, operator_tag: None }
    }
}

/// A concrete route: the datagram is sent to `nexthop`, whose header then
/// lists `subsequent` relays followed by `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayPath {
    pub nexthop: NodeAddr,
    pub subsequent: Vec<NodeAddr>,
    pub target: NodeAddr,
}

/// Selection parameters, typically loaded from the client config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathPolicy {
    pub relays: Vec<RelayEntry>,
    pub targets: Vec<NodeAddr>,
    /// Bounds on the number of relays after the next-hop.
    pub min_relays: usize,
    pub max_relays: usize,
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("need {needed} subsequent relays but only {available} are eligible")]
    InsufficientRelays { needed: usize, available: usize },
    #[error("no relay carries the next-hop flag")]
    NoFlaggedRelay,
    #[error("no target resolver listed")]
    NoTarget,
    #[error("min_relays {min} exceeds max_relays {max}")]
    RangeInvalid { min: usize, max: usize },
    #[error("relay {0} listed twice")]
    DuplicateRelay(NodeAddr),
}

/// Invariant violations reported as data, for gating externally supplied
/// paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathViolation {
    DuplicateHop,
    UnflaggedNexthop,
    LengthOutOfRange,
}

impl PathPolicy {
    pub fn validate(&self) -> Result<(), PathError> {
        if self.min_relays > self.max_relays {
            return Err(PathError::RangeInvalid { min: self.min_relays, max: self.max_relays });
        }
        let mut seen = std::collections::HashSet::new();
        for entry in &self.relays {
            if !seen.insert(entry.addr) {
                return Err(PathError::DuplicateRelay(entry.addr));
            }
        }
        if !self.relays.iter().any(|r| r.is_nexthop_candidate) {
            return Err(PathError::NoFlaggedRelay);
        }
        if self.targets.is_empty() {
            return Err(PathError::NoTarget);
        }
        // Whatever next-hop gets picked, at least min_relays others must remain.
        let available = self.relays.len().saturating_sub(1);
        if available < self.min_relays {
            return Err(PathError::InsufficientRelays {
                needed: self.min_relays,
                available,
            });
        }
        Ok(())
    }
}

/// Draws a fresh path: next-hop uniform over flagged entries, target
/// uniform over targets, hop count uniform over `[min, max]` (capped at
/// the pool size), and subsequent relays uniform without replacement from
/// every listed relay except the chosen next-hop and target. Duplicate
/// selection is impossible by construction, so paths are loop-free.
pub fn select_path(policy: &PathPolicy, rng: &mut impl Rng) -> Result<RelayPath, PathError> {
    policy.validate()?;
    let flagged: Vec<NodeAddr> = policy
        .relays
        .iter()
        .filter(|r| r.is_nexthop_candidate)
        .map(|r| r.addr)
        .collect();
    let nexthop = flagged[rng.gen_range(0..flagged.len())];
    let target = policy.targets[rng.gen_range(0..policy.targets.len())];

    let mut pool: Vec<NodeAddr> = policy
        .relays
        .iter()
        .map(|r| r.addr)
        .filter(|a| *a != nexthop && *a != target)
        .collect();
    if pool.len() < policy.min_relays {
        return Err(PathError::InsufficientRelays {
            needed: policy.min_relays,
            available: pool.len(),
        });
    }
    let max = policy.max_relays.min(pool.len());
    let k = rng.gen_range(policy.min_relays..=max);

    // Partial Fisher-Yates: the first k slots end up a uniform ordered
    // sample without replacement.
    let mut subsequent = Vec::with_capacity(k);
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        subsequent.push(pool[i]);
    }
    Ok(RelayPath { nexthop, subsequent, target })
}

/// The ordered node list carried in the envelope header: subsequent
/// relays then the target, `k + 1` entries. The next-hop itself is the
/// datagram's destination and never appears in the header.
pub fn to_hop_list(path: &RelayPath) -> Vec<NodeAddr> {
    let mut hops = Vec::with_capacity(path.subsequent.len() + 1);
    hops.extend_from_slice(&path.subsequent);
    hops.push(path.target);
    hops
}

/// Checks the path invariants against a policy; used to gate externally
/// supplied paths before encoding them.
pub fn validate_path(policy: &PathPolicy, path: &RelayPath) -> Result<(), PathViolation> {
    let mut seen = std::collections::HashSet::new();
    for addr in std::iter::once(path.nexthop)
        .chain(path.subsequent.iter().copied())
        .chain(std::iter::once(path.target))
    {
        if !seen.insert(addr) {
            return Err(PathViolation::DuplicateHop);
        }
    }
    let flagged = policy
        .relays
        .iter()
        .any(|r| r.is_nexthop_candidate && r.addr == path.nexthop);
    if !flagged {
        return Err(PathViolation::UnflaggedNexthop);
    }
    if path.subsequent.len() < policy.min_relays || path.subsequent.len() > policy.max_relays {
        return Err(PathViolation::LengthOutOfRange);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use std::collections::HashMap;

    fn addr(i: u8) -> NodeAddr {
        format!("10.0.0.{i}:8443").parse().unwrap()
    }

    fn policy(flagged: &[u8], pool: &[u8], min: usize, max: usize) -> PathPolicy {
        let mut relays: Vec<RelayEntry> =
            flagged.iter().map(|i| RelayEntry::new(addr(*i), true)).collect();
        relays.extend(pool.iter().map(|i| RelayEntry::new(addr(*i), false)));
        PathPolicy {
            relays,
            targets: vec!["10.0.1.1:5353".parse().unwrap()],
            min_relays: min,
            max_relays: max,
            rng_seed: None,
        }
    }

    #[test]
    fn zero_relay_paths_go_straight_to_the_target() {
        let mut rng = StdRng::seed_from_u64(1);
        let p = policy(&[1], &[2, 3], 0, 0);
        let path = select_path(&p, &mut rng).unwrap();
        assert_eq!(path.nexthop, addr(1));
        assert!(path.subsequent.is_empty());
        assert_eq!(to_hop_list(&path), vec![path.target]);
    }

    #[test]
    fn forced_choice_always_picks_the_only_relay() {
        let mut rng = StdRng::seed_from_u64(2);
        let p = policy(&[1], &[2], 1, 1);
        for _ in 0..50 {
            let path = select_path(&p, &mut rng).unwrap();
            assert_eq!(path.subsequent, vec![addr(2)]);
        }
    }

    #[test]
    fn hop_list_counts_subsequent_plus_target() {
        let path = RelayPath {
            nexthop: addr(1),
            subsequent: vec![addr(2), addr(3)],
            target: "10.0.1.1:5353".parse().unwrap(),
        };
        let hops = to_hop_list(&path);
        assert_eq!(hops.len(), 3);
        assert_eq!(hops[2], path.target);
    }

    #[test]
    fn insufficient_pool_is_an_error() {
        let mut rng = StdRng::seed_from_u64(3);
        let p = policy(&[1], &[2], 2, 3);
        assert_eq!(
            select_path(&p, &mut rng),
            Err(PathError::InsufficientRelays { needed: 2, available: 1 })
        );
    }

    #[test]
    fn duplicate_relay_addresses_are_rejected() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut p = policy(&[1], &[2, 3], 0, 1);
        p.relays.push(RelayEntry::new(addr(2), false));
        assert_eq!(select_path(&p, &mut rng), Err(PathError::DuplicateRelay(addr(2))));
    }

    #[test]
    fn invalid_range_is_an_error() {
        let mut rng = StdRng::seed_from_u64(3);
        let p = policy(&[1], &[2, 3, 4], 2, 1);
        assert_eq!(select_path(&p, &mut rng), Err(PathError::RangeInvalid { min: 2, max: 1 }));
    }

    #[test]
    fn validate_path_reports_each_violation() {
        let p = policy(&[1], &[2, 3, 4], 0, 2);
        let target: NodeAddr = "10.0.1.1:5353".parse().unwrap();

        let dup = RelayPath { nexthop: addr(1), subsequent: vec![addr(2), addr(2)], target };
        assert_eq!(validate_path(&p, &dup), Err(PathViolation::DuplicateHop));

        let unflagged = RelayPath { nexthop: addr(2), subsequent: vec![], target };
        assert_eq!(validate_path(&p, &unflagged), Err(PathViolation::UnflaggedNexthop));

        let long =
            RelayPath { nexthop: addr(1), subsequent: vec![addr(2), addr(3), addr(4)], target };
        assert_eq!(validate_path(&p, &long), Err(PathViolation::LengthOutOfRange));
    }

    /// Exact selection model: k uniform over [min, max], then each of the
    /// pool!/(pool-k)! ordered k-selections equally likely.
    #[test]
    fn draws_match_the_selection_model_within_3_sigma() {
        let p = policy(&[1], &[2, 3, 4], 1, 2);
        let mut rng = StdRng::seed_from_u64(0xfeed);
        let trials = 100_000usize;
        let mut counts: HashMap<Vec<NodeAddr>, usize> = HashMap::new();
        for _ in 0..trials {
            let path = select_path(&p, &mut rng).unwrap();
            *counts.entry(path.subsequent).or_default() += 1;
        }
        assert_eq!(counts.len(), 3 + 6);
        for (sel, count) in counts {
            let prob = match sel.len() {
                1 => 0.5 / 3.0,
                2 => 0.5 / 6.0,
                _ => unreachable!(),
            };
            let expected = trials as f64 * prob;
            let sigma = (trials as f64 * prob * (1.0 - prob)).sqrt();
            let dev = (count as f64 - expected).abs();
            assert!(dev < 3.0 * sigma, "{sel:?}: {count} vs {expected:.1} (3σ={:.1})", 3.0 * sigma);
        }
    }

    #[test]
    fn each_pool_relay_appears_equally_often() {
        let p = policy(&[1], &[2, 3, 4, 5], 0, 3);
        let mut rng = StdRng::seed_from_u64(0xbead);
        let trials = 40_000usize;
        let mut appearances: HashMap<NodeAddr, usize> = HashMap::new();
        let mut total = 0usize;
        for _ in 0..trials {
            let path = select_path(&p, &mut rng).unwrap();
            for a in path.subsequent {
                *appearances.entry(a).or_default() += 1;
                total += 1;
            }
        }
        let expected = total as f64 / 4.0;
        for (a, count) in appearances {
            assert!(
                (count as f64 - expected).abs() / expected < 0.05,
                "{a}: {count} vs {expected}"
            );
        }
    }

    proptest! {
        /// Generator/validator agreement over random policies.
        #[test]
        fn selected_paths_always_validate(
            seed in any::<u64>(),
            n_flagged in 1usize..4,
            n_pool in 0usize..6,
            min in 0usize..3,
            span in 0usize..3,
        ) {
            let flagged: Vec<u8> = (1..=n_flagged as u8).collect();
            let pool: Vec<u8> = (10..10 + n_pool as u8).collect();
            let p = policy(&flagged, &pool, min, min + span);
            let mut rng = StdRng::seed_from_u64(seed);
            match select_path(&p, &mut rng) {
                Ok(path) => {
                    prop_assert_eq!(validate_path(&p, &path), Ok(()));
                    // Flagged-first guarantee.
                    prop_assert!(p.relays.iter().any(|r| r.is_nexthop_candidate && r.addr == path.nexthop));
                }
                Err(PathError::InsufficientRelays { .. }) => {
                    prop_assert!(p.relays.len().saturating_sub(1) < min
                        || n_flagged + n_pool - 1 < min);
                }
                Err(e) => return Err(TestCaseError::fail(format!("unexpected {e:?}"))),
            }
        }
    }
}
