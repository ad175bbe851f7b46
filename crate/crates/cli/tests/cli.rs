use std::path::Path;
use std::process::{Command, Output};

use flowcorr_core::model::{EngineConfig, Variant};

fn flowcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcorr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let out = dir.path().join("out");
    let g = flowcorr(&["generate", "--out", p(&work), "--scenario", "scenario1"]);
    assert!(g.status.success(), "{g:?}");
    let r = flowcorr(&[
        "run",
        "--dns",
        p(&work.join("dns.tsv")),
        "--flows",
        p(&work.join("flows.tsv")),
        "--out",
        p(&out),
    ]);
    assert!(r.status.success(), "{r:?}");
    let text = stdout(&r);
    assert_eq!(value(&text, "conserved"), Some("true"));
    assert_eq!(value(&text, "correlation_rate"), Some("1.000000"));
    assert!(std::fs::read_dir(&out)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().starts_with("correlated-")));
    let e = flowcorr(&["eval", "--output", p(&out), "--truth", p(&work.join("truth.tsv"))]);
    assert!(e.status.success(), "{e:?}");
    assert_eq!(value(&stdout(&e), "accuracy"), Some("1.000000"));
}

#[test]
fn run_without_sources_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = flowcorr(&["run", "--out", p(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--dns"));
    let r = flowcorr(&["run", "--dns", "x", "--flows", "y", "--out", "o", "--no-such-flag"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_input_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let r = flowcorr(&[
        "run",
        "--dns",
        p(&dir.path().join("absent.tsv")),
        "--flows",
        p(&dir.path().join("absent2.tsv")),
        "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("absent.tsv"));
}

#[test]
fn variant_flag_selects_rotation_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let dns = dir.path().join("d.tsv");
    let flows = dir.path().join("f.tsv");
    // One answer at 0, a filler answer at 3600 that rotates the maps, then a
    // flow at 3601: found in the inactive tier unless rotation is disabled.
    std::fs::write(&dns, "0\tA\tsvc.example.com\t60\t10.0.0.1\n3600\tA\tfiller.example.org\t60\t10.9.0.1\n").unwrap();
    std::fs::write(&flows, "3601\t10.0.0.1\t192.0.2.1\t6\t443\t50000\t1\t100\n").unwrap();
    let rate = |variant: &str| {
        let out = dir.path().join(variant);
        let r = flowcorr(&[
            "run", "--dns", p(&dns), "--flows", p(&flows), "--out", p(&out), "--variant", variant,
        ]);
        assert!(r.status.success(), "{r:?}");
        value(&stdout(&r), "correlation_rate").unwrap().to_string()
    };
    assert_eq!(rate("main"), "1.000000");
    assert_eq!(rate("no-rotation"), "0.000000");
}

#[test]
fn print_config_reflects_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("engine.toml");
    std::fs::write(&cfg_path, "num_split = 4\nvariant = \"no-long-maps\"\n").unwrap();
    let r = flowcorr(&["run", "--print-config", "--config", p(&cfg_path), "--chain-limit", "3"]);
    assert!(r.status.success(), "{r:?}");
    let cfg = EngineConfig::from_toml(&stdout(&r)).unwrap();
    assert_eq!(cfg.num_split, 4);
    assert_eq!(cfg.chain_limit, 3);
    assert_eq!(cfg.variant, Variant::NoLongMaps);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_field = 1\n").unwrap();
    let r = flowcorr(&["run", "--print-config", "--config", p(&bad)]);
    assert!(!r.status.success());
}

#[test]
fn help_lists_engine_flags() {
    let r = flowcorr(&["run", "--help"]);
    let help = stdout(&r);
    for flag in [
        "--dns", "--flows", "--out", "--variant", "--num-split", "--a-interval", "--c-interval",
        "--chain-limit", "--queue-cap", "--fill-workers", "--lookup-workers", "--write-workers",
        "--use-dst-ip", "--blocklist", "--resolvers", "--lenient",
    ] {
        assert!(help.contains(flag), "{flag} missing");
    }
}

#[test]
fn validate_reports_violations() {
    let r = flowcorr(&["validate", "www.example.com", "foo_bar.example.com", "3com.example"]);
    assert!(r.status.success());
    let text = stdout(&r);
    assert!(text.contains("www.example.com\tok"));
    assert!(text.contains("foo_bar.example.com\tBadLabelChars"));
    assert!(text.contains("3com.example\tBadLabelChars"));
    let r = flowcorr(&["validate", "--lenient", "3com.example"]);
    assert!(stdout(&r).contains("3com.example\tok"));
}

#[test]
fn analysis_commands_over_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(
        out.join("correlated-0.tsv"),
        "1\t198.51.100.1\t10.0.0.1\t900\t9\tbad_name.evil.net\tbad_name.evil.net\n\
         2\t10.0.0.1\t198.51.100.1\t50\t1\t\t\n\
         3\t203.0.113.1\t10.0.0.2\t50\t1\tok.example.com\tedge.cdn.net;ok.example.com\n",
    )
    .unwrap();
    let bl = dir.path().join("bl.tsv");
    std::fs::write(&bl, "evil.net\tmalware\n").unwrap();
    let csv = dir.path().join("cdf.csv");
    let a = flowcorr(&["aggregate", "--output", p(&out), "--blocklist", p(&bl), "--csv", p(&csv)]);
    assert!(a.status.success(), "{a:?}");
    let text = stdout(&a);
    assert_eq!(value(&text, "category.malware.bytes"), Some("900"));
    assert_eq!(value(&text, "category.uncorrelated.bytes"), Some("50"));
    assert_eq!(value(&text, "total_bytes"), Some("1000"));
    assert!(std::fs::read_to_string(&csv).unwrap().contains("malware,1,bad_name.evil.net,900,1.000000"));

    let b = flowcorr(&["bidir", "--output", p(&out)]);
    assert!(b.status.success(), "{b:?}");
    assert_eq!(value(&stdout(&b), "client_fraction"), Some("1.000000"));
}

#[test]
fn coverage_command() {
    let dir = tempfile::tempdir().unwrap();
    let flows = dir.path().join("f.tsv");
    let mut lines = String::new();
    for i in 0..19 {
        lines.push_str(&format!("{i}\t100.64.0.1\t10.53.0.1\t17\t40000\t53\t1\t80\n"));
    }
    lines.push_str("19\t100.64.0.1\t8.8.8.8\t17\t40000\t853\t1\t80\n");
    std::fs::write(&flows, lines).unwrap();
    let res = dir.path().join("r.txt");
    std::fs::write(&res, "8.8.8.8\n").unwrap();
    let r = flowcorr(&["coverage", "--flows", p(&flows), "--resolvers", p(&res)]);
    assert!(r.status.success(), "{r:?}");
    assert_eq!(value(&stdout(&r), "coverage"), Some("0.950000"));
    std::fs::write(&flows, "1\t100.64.0.1\t10.0.0.1\t6\t40000\t443\t1\t80\n").unwrap();
    let r = flowcorr(&["coverage", "--flows", p(&flows), "--resolvers", p(&res)]);
    assert!(!r.status.success());
}

#[test]
fn bench_and_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    let g = flowcorr(&["generate", "--out", p(&work), "--duration", "120", "--seed", "4"]);
    assert!(g.status.success(), "{g:?}");
    let b = flowcorr(&["bench", "--workload", p(&work), "--variants", "main,no-split"]);
    assert!(b.status.success(), "{b:?}");
    for v in ["main", "no-split"] {
        let m = std::fs::read_to_string(work.join(format!("metrics-{v}.txt"))).unwrap();
        assert_eq!(value(&m, "variant"), Some(v));
        assert_eq!(value(&m, "drops"), Some("0"));
        assert!(value(&m, "peak_entries").is_some());
    }
    let d = dir.path().join("dist");
    let r = flowcorr(&["distributions", "--dns", p(&work.join("dns.tsv")), "--out", p(&d)]);
    assert!(r.status.success(), "{r:?}");
    for f in ["chain_hops.csv", "ttl_cdf.csv", "names_per_ip.csv"] {
        assert!(std::fs::read_to_string(d.join(f)).unwrap().lines().count() > 1);
    }
}
