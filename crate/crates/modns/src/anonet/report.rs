//! Result tables: mean RTT per relay setting plus identification
//! probabilities per collusion scenario, as text or CSV.

use std::time::Duration;

use super::collusion::McEstimate;

#[derive(Debug, Clone, PartialEq)]
pub struct RttRow {
    pub setting: String,
    pub queries: usize,
    pub mean_rtt_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnonRow {
    pub scenario: String,
    pub client: String,
    pub exact: Option<f64>,
    pub mc: Option<McEstimate>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rtt: Vec<RttRow>,
    pub anon: Vec<AnonRow>,
}

impl Report {
    pub fn push_rtt(&mut self, setting: String, queries: usize, mean: Duration) {
        self.rtt.push(RttRow {
            setting,
            queries,
            mean_rtt_ms: mean.as_secs_f64() * 1000.0,
        });
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.rtt.is_empty() {
            out.push_str(&format!("{:<28} {:>8} {:>14}\n", "Relays", "queries", "avg RTT (ms)"));
            for row in &self.rtt {
                out.push_str(&format!(
                    "{:<28} {:>8} {:>14.3}\n",
                    row.setting, row.queries, row.mean_rtt_ms
                ));
            }
        }
        if !self.anon.is_empty() {
            out.push_str(&format!(
                "\n{:<24} {:<8} {:>8} {:>22}\n",
                "Scenario", "client", "exact", "mc (95% interval)"
            ));
            for row in &self.anon {
                let exact = row.exact.map_or("-".to_string(), |p| format!("{p:.4}"));
                let mc = row.mc.map_or("-".to_string(), |m| {
                    format!("{:.4} [{:.4}, {:.4}]", m.p, m.lo, m.hi)
                });
                out.push_str(&format!(
                    "{:<24} {:<8} {:>8} {:>22}\n",
                    row.scenario, row.client, exact, mc
                ));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,label,client,queries,mean_rtt_ms,exact,mc_p,mc_lo,mc_hi,mc_trials\n");
        for row in &self.rtt {
            out.push_str(&format!(
                "rtt,{},,{},{},,,,,\n",
                row.setting, row.queries, row.mean_rtt_ms
            ));
        }
        for row in &self.anon {
            let exact = row.exact.map_or(String::new(), |p| p.to_string());
            let (p, lo, hi, trials) = row.mc.map_or(Default::default(), |m| {
                (m.p.to_string(), m.lo.to_string(), m.hi.to_string(), m.trials.to_string())
            });
            out.push_str(&format!(
                "anon,{},{},,,{},{},{},{},{}\n",
                row.scenario, row.client, exact, p, lo, hi, trials
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, String> {
        let mut report = Report::default();
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty input")?;
        if !header.starts_with("kind,") {
            return Err(format!("unexpected header {header:?}"));
        }
        for (idx, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 10 {
                return Err(format!("line {}: expected 10 fields, got {}", idx + 2, fields.len()));
            }
            let parse_f64 = |s: &str| -> Result<Option<f64>, String> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| format!("line {}: {e}", idx + 2))
                }
            };
            match fields[0] {
                "rtt" => report.rtt.push(RttRow {
                    setting: fields[1].to_string(),
                    queries: fields[3].parse().map_err(|e| format!("line {}: {e}", idx + 2))?,
                    mean_rtt_ms: parse_f64(fields[4])?.ok_or("missing mean_rtt_ms")?,
                }),
                "anon" => {
                    let mc = match (
                        parse_f64(fields[6])?,
                        parse_f64(fields[7])?,
                        parse_f64(fields[8])?,
                    ) {
                        (Some(p), Some(lo), Some(hi)) => Some(McEstimate {
                            p,
                            lo,
                            hi,
                            trials: fields[9]
                                .parse()
                                .map_err(|e| format!("line {}: {e}", idx + 2))?,
                        }),
                        _ => None,
                    };
                    report.anon.push(AnonRow {
                        scenario: fields[1].to_string(),
                        client: fields[2].to_string(),
                        exact: parse_f64(fields[5])?,
                        mc,
                    });
                }
                other => return Err(format!("line {}: unknown kind {other:?}", idx + 2)),
            }
        }
        Ok(report)
    }
}
