use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::{bail, Context, Result};
use flowcorr_core::analysis::{
    aggregate_traffic, bidirectional_report, parse_resolvers, resolver_coverage, validate_domain,
    Blocklist,
};
use flowcorr_core::engine::Engine;
use flowcorr_core::harness::{
    distribution_metrics, evaluate_accuracy, generate_workload, read_dns_file, read_flow_file,
    run_benchmark, GroundTruth, IpSharing, TtlDistribution, WorkloadFiles, WorkloadSpec,
};
use flowcorr_core::io::{read_output_dir, DirSink, SourceSpec};
use flowcorr_core::model::{EngineConfig, Variant};

use crate::args::*;

pub fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run(a) => run(a),
        Command::Generate(a) => generate(a),
        Command::Bench(a) => bench(a),
        Command::Eval(a) => eval(a),
        Command::Validate(a) => validate(a),
        Command::Aggregate(a) => aggregate(a),
        Command::Coverage(a) => coverage(a),
        Command::Bidir(a) => bidir(a),
        Command::Distributions(a) => distributions(a),
    }
}

/// Resolves engine settings; prints them instead when asked to.
fn engine_config(args: &EngineArgs) -> Result<Option<EngineConfig>> {
    let cfg = args.resolve()?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let Some(cfg) = engine_config(&a.engine)? else {
        return Ok(ExitCode::SUCCESS);
    };
    let out = a.out.as_deref().context("--out is required")?;
    let blocklist = a.blocklist.as_deref().map(Blocklist::load).transpose()?;
    let resolvers = match &a.resolvers {
        Some(p) => Some(parse_resolvers(&fs::read_to_string(p).with_context(|| p.display().to_string())?)?),
        None => None,
    };
    let roll = cfg.roll_interval;
    let engine = Engine::new(cfg)?;
    let shutdown = engine.shutdown_handle();
    // A second handler cannot be installed; only the first run in a process needs one.
    let _ = ctrlc::set_handler(move || shutdown.store(true, Ordering::Relaxed));
    let sink = DirSink::create(out, roll).with_context(|| out.display().to_string())?;
    let report = engine.run(&a.dns, &a.flows, Box::new(sink))?;
    let summary = report.summary();
    print!("{summary}");
    if let Some(path) = &a.report {
        fs::write(path, &summary).with_context(|| path.display().to_string())?;
    }
    if let Some(bl) = blocklist {
        let records = read_output_dir(out)?;
        let traffic = aggregate_traffic(&records, &bl, a.lenient);
        fs::write(out.join("traffic.txt"), traffic.summary())?;
        fs::write(out.join("traffic_cdf.csv"), traffic.cdf_csv())?;
        print!("{}", traffic.summary());
    }
    if let Some(resolvers) = resolvers {
        let mut flows = Vec::new();
        for spec in &a.flows {
            if let SourceSpec::File(p) = spec {
                flows.extend(read_flow_file(p)?);
            }
        }
        match resolver_coverage(&flows, &resolvers) {
            Ok(c) => println!("resolver_fraction={:.6}\nresolver_coverage={:.6}", c.fraction, c.coverage),
            Err(e) => println!("resolver_coverage=undefined ({e})"),
        }
    }
    if let Some(e) = report.write_error {
        bail!("writing output failed: {e}");
    }
    Ok(ExitCode::SUCCESS)
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let mut spec = match a.scenario {
        Scenario::Default => WorkloadSpec {
            seed: a.seed,
            ..WorkloadSpec::default()
        },
        Scenario::Scenario1 => WorkloadSpec::scenario1(a.seed),
        Scenario::Scenario2 => WorkloadSpec::scenario2(a.seed),
        Scenario::Fresh => WorkloadSpec::fresh(a.fresh_flows, a.seed),
        Scenario::RotationGap => WorkloadSpec::rotation_gap(a.gap_interval, a.seed),
    };
    if let Some(v) = a.start {
        spec.start = v;
    }
    if let Some(v) = a.duration {
        spec.duration = v;
    }
    if let Some(v) = a.dns_rate {
        spec.dns_rate = v;
    }
    if let Some(v) = a.flow_rate {
        spec.flow_rate = v;
    }
    if let Some(v) = a.services {
        spec.num_services = v;
    }
    if a.shared_ip {
        spec.ip_sharing = IpSharing::SharedIp;
    }
    if let Some(v) = a.ttl {
        spec.ttl = TtlDistribution::fixed(v);
    }
    if let Some(v) = a.delay_min {
        spec.flow_delay.0 = v;
    }
    if let Some(v) = a.delay_max {
        spec.flow_delay.1 = v;
    }
    if spec.dns_rate < 0.0 || spec.flow_rate < 0.0 {
        bail!("rates must not be negative");
    }
    if spec.flow_delay.0 > spec.flow_delay.1 {
        bail!("--delay-min must not exceed --delay-max");
    }
    let w = generate_workload(&spec);
    let files = w.write_to(&a.out)?;
    println!("dns_records={}", w.dns.len());
    println!("flows={}", w.flows.len());
    println!("dns={}", files.dns.display());
    println!("flows_file={}", files.flows.display());
    println!("truth={}", files.truth.display());
    Ok(ExitCode::SUCCESS)
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let Some(base) = engine_config(&a.engine)? else {
        return Ok(ExitCode::SUCCESS);
    };
    let files = WorkloadFiles::in_dir(&a.workload);
    let variants = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    let report_dir = a.report_dir.as_deref().unwrap_or(&a.workload);
    fs::create_dir_all(report_dir)?;
    for v in variants {
        let cfg = EngineConfig {
            variant: v,
            ..base.clone()
        };
        let metrics = run_benchmark(&cfg, &files, None)?;
        let kv = metrics.to_kv();
        fs::write(report_dir.join(format!("metrics-{v}.txt")), &kv)?;
        print!("{kv}");
        println!();
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let records = read_output_dir(&a.output)?;
    let truth = GroundTruth::load(&a.truth)?;
    let report = evaluate_accuracy(&records, &truth)?;
    print!("{}", report.summary());
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs) -> Result<ExitCode> {
    let mut names = a.names.clone();
    if let Some(p) = &a.file {
        let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
        names.extend(text.lines().filter(|l| !l.is_empty()).map(str::to_string));
    }
    if names.is_empty() {
        bail!("no names given");
    }
    let mut invalid = 0;
    for name in &names {
        let r = validate_domain(name, a.lenient);
        if r.is_valid() {
            println!("{name}\tok");
        } else {
            invalid += 1;
            let v: Vec<String> = r.violations.iter().map(|v| format!("{v:?}")).collect();
            println!("{name}\t{}", v.join(","));
        }
    }
    eprintln!("{invalid} of {} names invalid", names.len());
    Ok(ExitCode::SUCCESS)
}

fn load_blocklist(path: Option<&Path>) -> Result<Blocklist> {
    Ok(match path {
        Some(p) => Blocklist::load(p).with_context(|| p.display().to_string())?,
        None => Blocklist::new(),
    })
}

fn aggregate(a: AggregateArgs) -> Result<ExitCode> {
    let records = read_output_dir(&a.output)?;
    let bl = load_blocklist(a.blocklist.as_deref())?;
    let report = aggregate_traffic(&records, &bl, a.lenient);
    print!("{}", report.summary());
    if let Some(csv) = &a.csv {
        fs::write(csv, report.cdf_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn coverage(a: CoverageArgs) -> Result<ExitCode> {
    let resolvers = parse_resolvers(
        &fs::read_to_string(&a.resolvers).with_context(|| a.resolvers.display().to_string())?,
    )?;
    let mut flows = Vec::new();
    for p in &a.flows {
        flows.extend(read_flow_file(p)?);
    }
    let c = resolver_coverage(&flows, &resolvers)?;
    println!("dns_flows={}", c.dns_flows);
    println!("to_listed_resolvers={}", c.to_listed);
    println!("fraction={:.6}", c.fraction);
    println!("coverage={:.6}", c.coverage);
    Ok(ExitCode::SUCCESS)
}

fn bidir(a: BidirArgs) -> Result<ExitCode> {
    let records = read_output_dir(&a.output)?;
    let lenient = a.lenient;
    let report = bidirectional_report(&records, |d| !validate_domain(d, lenient).is_valid());
    print!("{}", report.summary());
    Ok(ExitCode::SUCCESS)
}

fn distributions(a: DistributionsArgs) -> Result<ExitCode> {
    let dns = read_dns_file(&a.dns)?;
    let d = distribution_metrics(&dns, a.window);
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("chain_hops.csv"), d.chain_hops_csv())?;
            fs::write(dir.join("ttl_cdf.csv"), d.ttl_cdf_csv())?;
            fs::write(dir.join("names_per_ip.csv"), d.names_per_ip_csv())?;
        }
        None => {
            print!("{}", d.chain_hops_csv());
            println!();
            print!("{}", d.ttl_cdf_csv());
            println!();
            print!("{}", d.names_per_ip_csv());
        }
    }
    Ok(ExitCode::SUCCESS)
}
