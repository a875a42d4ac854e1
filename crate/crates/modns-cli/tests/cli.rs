//! End-to-end checks of the binary: exit codes, the envelope debug tools,
//! and the simulate/analyze pipeline.

use std::process::Command;

fn modns() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modns"))
}

#[test]
fn help_exits_zero_with_usage() {
    let out = modns().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("run-client"));
    assert!(text.contains("simulate"));
}

#[test]
fn subcommand_help_exits_zero() {
    for sub in ["run-client", "run-relay", "run-target", "simulate", "analyze", "encode", "decode"]
    {
        let out = modns().args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub} --help");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = modns().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = modns().args(["decode", "--nonsense", "ff"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = modns().args(["run-client", "--config", "/nonexistent/x.conf"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_contents_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "listen = not-an-address\n").unwrap();
    let out = modns().args(["run-client", "--config", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn encode_matches_the_published_layout() {
    let out = modns()
        .args([
            "encode",
            "--hop",
            "192.168.1.1:8443",
            "--hop",
            "192.168.128.32:8443",
            "--payload-hex",
            "50",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "ffffffffffffffee00000200000000000000000000ffffc0a8010120fb00000000000000000000ffffc0a8802020fb50"
    );
}

#[test]
fn decode_pretty_prints_each_kind() {
    let out = modns()
        .args([
            "decode",
            "ffffffffffffffee00000200000000000000000000ffffc0a8010120fb00000000000000000000ffffc0a8802020fb50",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("kind: modns"));
    assert!(text.contains("n=2"));
    assert!(text.contains("192.168.128.32:8443 (target resolver)"));

    let out = modns()
        .args(["decode", "ffffffffffffffff000000000000000000000000ffffc0a8010120fb50"])
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("kind: adns"));

    let out = modns().args(["decode", "abcd0100"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("kind: bare"));

    // Truncated header surfaces the wire error as a runtime failure.
    let out = modns().args(["decode", "ffffffffffffffee000003aaaa"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn keygen_writes_a_loadable_secret() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("secret.key");
    let out = modns().args(["keygen", "--out", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let public = String::from_utf8_lossy(&out.stdout).trim().to_string();
    assert_eq!(public.len(), 64);
    let secret = std::fs::read_to_string(&path).unwrap();
    assert_eq!(secret.trim().len(), 64);
}

#[test]
fn simulate_then_analyze_round_trips_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let topo = dir.path().join("net.topo");
    std::fs::write(
        &topo,
        "transport inmem latency_ms=5\n\
         target X 10.9.0.1:5353\n\
         zone *.example.com A 10.53.0.99\n\
         relay R1 10.0.1.1:8443\n\
         relay R2 10.0.2.1:8443\n\
         relay R3 10.0.3.1:8443\n\
         client A 10.100.1.1:53 nexthops=R1 min=0 max=2 timeout_ms=2000\n\
         client B 10.100.2.1:53 nexthops=R2 min=0 max=2 timeout_ms=2000\n",
    )
    .unwrap();
    let trace = dir.path().join("trace.jsonl");
    let csv = dir.path().join("rtt.csv");
    let out = modns()
        .args([
            "simulate",
            "--topo",
            topo.to_str().unwrap(),
            "--queries",
            "25",
            "--seed",
            "7",
            "--relays",
            "1",
            "--out",
            trace.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("1 relay"));
    assert!(text.contains("answered OK: 50/50"));
    // 1 subsequent relay -> 3 links each way at 5 ms.
    assert!(text.contains("30.000"));
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("kind,"));

    let out = modns()
        .args([
            "analyze",
            "--trace",
            trace.to_str().unwrap(),
            "--colluded",
            "R3",
            "--exact",
            "--mc-trials",
            "5000",
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("identified: 0"));
    assert!(text.contains("exact"));

    // A malformed trace is a config-stage failure.
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"event\":\"nope\"}\n").unwrap();
    let out = modns()
        .args(["analyze", "--trace", bad.to_str().unwrap(), "--colluded", "R1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
