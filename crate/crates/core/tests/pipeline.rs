use std::path::Path;

use flowcorr_core::engine::{Engine, RunReport};
use flowcorr_core::harness::{
    evaluate_accuracy, generate_workload, DiscardSink, WorkloadFiles, WorkloadSpec,
};
use flowcorr_core::io::{output_files, read_output_dir, DirSink, RecordSink, SourceSpec};
use flowcorr_core::model::{EngineConfig, Variant};

fn replay(cfg: EngineConfig, files: &WorkloadFiles, sink: Box<dyn RecordSink>) -> RunReport {
    Engine::new(cfg)
        .unwrap()
        .run(
            &[SourceSpec::File(files.dns.clone())],
            &[SourceSpec::File(files.flows.clone())],
            sink,
        )
        .unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    output_files(dir)
        .unwrap()
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn single_worker_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let files = generate_workload(&WorkloadSpec {
        duration: 7200,
        dns_rate: 2.0,
        flow_rate: 20.0,
        ..WorkloadSpec::default()
    })
    .write_to(&dir.path().join("w"))
    .unwrap();
    for variant in Variant::ALL {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{variant}-{run}"));
            let cfg = EngineConfig::with_variant(variant).single_threaded();
            let sink = DirSink::create(&out, cfg.roll_interval).unwrap();
            replay(cfg, &files, Box::new(sink));
            outputs.push(dir_bytes(&out));
        }
        assert!(outputs[0].len() >= 2, "{variant}: expected rolled files");
        assert_eq!(outputs[0], outputs[1], "{variant}: replay differs");
    }
}

#[test]
fn million_record_write_delay_stays_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let files = generate_workload(&WorkloadSpec {
        duration: 3600,
        dns_rate: 10.0,
        flow_rate: 280.0,
        seed: 8,
        ..WorkloadSpec::default()
    })
    .write_to(dir.path())
    .unwrap();
    let report = replay(EngineConfig::default(), &files, Box::new(DiscardSink));
    assert!(report.writer.records >= 1_000_000, "{}", report.writer.records);
    assert!(report.writer.max_write_delay <= 45, "{}", report.writer.max_write_delay);
    assert!(report.is_conserved());
}

#[test]
fn fresh_workload_is_fully_and_correctly_attributed() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate_workload(&WorkloadSpec::fresh(20_000, 17));
    let files = w.write_to(&dir.path().join("w")).unwrap();
    let out = dir.path().join("out");
    let report = replay(
        EngineConfig::default(),
        &files,
        Box::new(DirSink::create(&out, 3600).unwrap()),
    );
    assert_eq!(report.correlation_rate(), Some(1.0));
    let records = read_output_dir(&out).unwrap();
    let acc = evaluate_accuracy(&records, &w.truth).unwrap();
    assert_eq!(acc.accuracy(), 1.0);
    assert_eq!(acc.missing, 0);
}

#[test]
fn several_streams_of_each_kind() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate_workload(&WorkloadSpec::fresh(9_000, 3));
    // Deal records round-robin into three DNS and three flow files.
    let mut dns = Vec::new();
    let mut flows = Vec::new();
    for k in 0..3 {
        let d: Vec<String> = w.dns.iter().skip(k).step_by(3).map(|r| r.to_string()).collect();
        let f: Vec<String> = w.flows.iter().skip(k).step_by(3).map(|r| r.to_string()).collect();
        let dp = dir.path().join(format!("d{k}.tsv"));
        let fp = dir.path().join(format!("f{k}.tsv"));
        std::fs::write(&dp, d.join("\n") + "\n").unwrap();
        std::fs::write(&fp, f.join("\n") + "\n").unwrap();
        dns.push(SourceSpec::File(dp));
        flows.push(SourceSpec::File(fp));
    }
    let report = Engine::new(EngineConfig::default())
        .unwrap()
        .run(&dns, &flows, Box::new(DiscardSink))
        .unwrap();
    assert_eq!(report.dns.len(), 3);
    assert_eq!(report.flows.len(), 3);
    assert!(report.is_conserved());
    assert_eq!(report.writer.records, w.flows.len() as u64);
    assert_eq!(report.correlation_rate(), Some(1.0));
}
