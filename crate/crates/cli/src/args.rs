use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowcorr_core::io::SourceSpec;
use flowcorr_core::model::{EngineConfig, Variant};

#[derive(Debug, Parser)]
#[command(name = "flowcorr", version, about = "Correlate passive DNS answers with flow records")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Correlate DNS and flow streams and write correlated records.
    Run(RunArgs),
    /// Generate a synthetic workload with ground truth.
    Generate(GenerateArgs),
    /// Run the engine over a generated workload under one or more variants.
    Bench(BenchArgs),
    /// Score correlated output against ground truth.
    Eval(EvalArgs),
    /// Check domain names against the preferred name syntax.
    Validate(ValidateArgs),
    /// Per-domain and per-category traffic totals over correlated output.
    Aggregate(AggregateArgs),
    /// Share of DNS-port flows that bypass the local resolvers.
    Coverage(CoverageArgs),
    /// Return traffic towards malformed-domain remotes.
    Bidir(BidirArgs),
    /// Chain length, TTL and names-per-address distributions of a DNS feed.
    Distributions(DistributionsArgs),
}

/// Engine settings. Flags override values read from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    /// TOML file with engine settings.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the effective settings as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Rotation interval of the IP→NAME maps, in seconds (a_clear_up_interval).
    #[arg(long, value_name = "S")]
    pub a_interval: Option<u64>,
    /// Rotation interval of the NAME→CNAME maps, in seconds (c_clear_up_interval).
    #[arg(long, value_name = "S")]
    pub c_interval: Option<u64>,
    /// Shards per map (num_split).
    #[arg(long, value_name = "N")]
    pub num_split: Option<usize>,
    /// Maximum CNAME hops per lookup (chain_limit).
    #[arg(long, value_name = "N")]
    pub chain_limit: Option<usize>,
    /// Clear the long maps this often, in seconds; never by default (long_clear_up_interval).
    #[arg(long, value_name = "S")]
    pub long_interval: Option<u64>,
    /// Engine variant (variant).
    #[arg(long, value_name = "NAME", value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Capacity of every queue and stream buffer (queue_capacity).
    #[arg(long, value_name = "N")]
    pub queue_cap: Option<usize>,
    /// FillUp workers per DNS stream (fill_workers).
    #[arg(long, value_name = "N")]
    pub fill_workers: Option<usize>,
    /// LookUp workers per flow stream (lookup_workers).
    #[arg(long, value_name = "N")]
    pub lookup_workers: Option<usize>,
    /// Write workers (write_workers).
    #[arg(long, value_name = "N")]
    pub write_workers: Option<usize>,
    /// Key lookups on the flow's destination address (use_dst_ip).
    #[arg(long)]
    pub use_dst_ip: bool,
    /// Flush output after this many records (flush_batch).
    #[arg(long, value_name = "N")]
    pub flush_batch: Option<usize>,
    /// Flush output once the oldest pending record is this many seconds old (flush_interval).
    #[arg(long, value_name = "S")]
    pub flush_interval: Option<u64>,
    /// Seconds of record time per output file (roll_interval).
    #[arg(long, value_name = "S")]
    pub roll_interval: Option<u64>,
    /// Map size sampling period in seconds (sample_interval).
    #[arg(long, value_name = "S")]
    pub sample_interval: Option<u64>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: flowcorr_core::model::ModelError| {
        let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
        format!("{e} (expected one of: {})", names.join(", "))
    })
}

impl EngineArgs {
    /// Starts from the config file, if any, and applies every given flag.
    pub fn resolve(&self) -> anyhow::Result<EngineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
                EngineConfig::from_toml(&text)
                    .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?
            }
            None => EngineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(
            a_interval => a_clear_up_interval,
            c_interval => c_clear_up_interval,
            num_split => num_split,
            chain_limit => chain_limit,
            variant => variant,
            queue_cap => queue_capacity,
            fill_workers => fill_workers,
            lookup_workers => lookup_workers,
            write_workers => write_workers,
            flush_batch => flush_batch,
            flush_interval => flush_interval,
            roll_interval => roll_interval,
            sample_interval => sample_interval,
        );
        if self.long_interval.is_some() {
            cfg.long_clear_up_interval = self.long_interval;
        }
        if self.use_dst_ip {
            cfg.use_dst_ip = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// DNS source: a file, `-` for stdin, or `tcp:PORT`. Repeatable.
    #[arg(long, value_name = "SRC", required_unless_present = "print_config")]
    pub dns: Vec<SourceSpec>,
    /// Flow source: a file, `-` for stdin, or `tcp:PORT`. Repeatable.
    #[arg(long, value_name = "SRC", required_unless_present = "print_config")]
    pub flows: Vec<SourceSpec>,
    /// Directory for `correlated-<epoch>.tsv` files.
    #[arg(long, value_name = "DIR", required_unless_present = "print_config")]
    pub out: Option<PathBuf>,
    /// Write the run counters here as key=value lines.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// After the run, write traffic totals by blocklist category into the output directory.
    #[arg(long, value_name = "FILE")]
    pub blocklist: Option<PathBuf>,
    /// After the run, report resolver coverage over the flow files.
    #[arg(long, value_name = "FILE")]
    pub resolvers: Option<PathBuf>,
    /// Let labels start with a digit when judging domain validity.
    #[arg(long)]
    pub lenient: bool,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scenario {
    /// General workload.
    Default,
    /// Two services on two addresses.
    Scenario1,
    /// Two services sharing one address.
    Scenario2,
    /// Every flow within its answer's first rotation window.
    Fresh,
    /// Flows trailing their answers by one to two rotation intervals.
    RotationGap,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory for dns.tsv, flows.tsv and truth.tsv.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "default")]
    pub scenario: Scenario,
    /// Flow count for the fresh scenario.
    #[arg(long, default_value_t = 100_000)]
    pub fresh_flows: u64,
    /// Rotation interval the rotation-gap scenario is built around.
    #[arg(long, default_value_t = 3600)]
    pub gap_interval: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub start: Option<u64>,
    /// Seconds of announcements.
    #[arg(long)]
    pub duration: Option<u64>,
    /// Announcements per second.
    #[arg(long)]
    pub dns_rate: Option<f64>,
    /// Flows per second.
    #[arg(long)]
    pub flow_rate: Option<f64>,
    #[arg(long)]
    pub services: Option<usize>,
    /// All services answer from one address.
    #[arg(long)]
    pub shared_ip: bool,
    /// Use this TTL for every record.
    #[arg(long)]
    pub ttl: Option<u32>,
    /// Smallest gap between an answer and its flows, in seconds.
    #[arg(long)]
    pub delay_min: Option<u64>,
    /// Largest gap between an answer and its flows, in seconds.
    #[arg(long)]
    pub delay_max: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory holding dns.tsv and flows.tsv.
    #[arg(long, value_name = "DIR")]
    pub workload: PathBuf,
    /// Variants to run, comma separated; all of them by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Vec<Variant>,
    /// Directory for metrics-<variant>.txt; defaults to the workload directory.
    #[arg(long, value_name = "DIR")]
    pub report_dir: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of correlated output files.
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Names to check.
    pub names: Vec<String>,
    /// Read names from this file, one per line.
    #[arg(long, value_name = "FILE")]
    pub file: Option<PathBuf>,
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub blocklist: Option<PathBuf>,
    #[arg(long)]
    pub lenient: bool,
    /// Write the per-category CDF rows here.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    /// Flow file(s) to scan.
    #[arg(long, value_name = "FILE", required = true)]
    pub flows: Vec<PathBuf>,
    /// Public resolver addresses, one per line.
    #[arg(long, value_name = "FILE")]
    pub resolvers: PathBuf,
}

#[derive(Debug, Args)]
pub struct BidirArgs {
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct DistributionsArgs {
    #[arg(long, value_name = "FILE")]
    pub dns: PathBuf,
    /// Window for names per address, in seconds.
    #[arg(long, default_value_t = 300)]
    pub window: u64,
    /// Directory for chain_hops.csv, ttl_cdf.csv and names_per_ip.csv.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

/// Config fields paired with the flag that sets each of them.
const CONFIG_FLAGS: [(&str, &str); 15] = [
    ("a_clear_up_interval", "--a-interval"),
    ("c_clear_up_interval", "--c-interval"),
    ("num_split", "--num-split"),
    ("chain_limit", "--chain-limit"),
    ("long_clear_up_interval", "--long-interval"),
    ("variant", "--variant"),
    ("queue_capacity", "--queue-cap"),
    ("fill_workers", "--fill-workers"),
    ("lookup_workers", "--lookup-workers"),
    ("write_workers", "--write-workers"),
    ("use_dst_ip", "--use-dst-ip"),
    ("flush_batch", "--flush-batch"),
    ("flush_interval", "--flush-interval"),
    ("roll_interval", "--roll-interval"),
    ("sample_interval", "--sample-interval"),
];

    fn toml_keys(cfg: &EngineConfig) -> Vec<String> {
        cfg.to_toml()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, _)| k.to_string()))
            .collect()
    }

    #[test]
    fn every_config_field_has_a_flag_in_help() {
        let cfg = EngineConfig {
            long_clear_up_interval: Some(1),
            ..EngineConfig::default()
        };
        let mut keys = toml_keys(&cfg);
        keys.sort();
        let mut fields: Vec<String> = CONFIG_FLAGS.iter().map(|f| f.0.to_string()).collect();
        fields.sort();
        assert_eq!(keys, fields);
        let mut cmd = Cli::command();
        let help = cmd
            .find_subcommand_mut("run")
            .unwrap()
            .render_long_help()
            .to_string();
        for (field, flag) in CONFIG_FLAGS {
            assert!(help.contains(flag), "{flag} missing from help");
            assert!(help.contains(field), "{field} missing from help");
        }
    }

    #[test]
    fn flags_round_trip_through_toml() {
        let argv = [
            "flowcorr", "run", "--print-config",
            "--a-interval", "11", "--c-interval", "12", "--num-split", "3", "--chain-limit", "4",
            "--long-interval", "99", "--variant", "exact-ttl", "--queue-cap", "7",
            "--fill-workers", "5", "--lookup-workers", "6", "--write-workers", "3",
            "--use-dst-ip", "--flush-batch", "8", "--flush-interval", "9",
            "--roll-interval", "10", "--sample-interval", "13",
        ];
        let Command::Run(run) = Cli::try_parse_from(argv).unwrap().command else {
            panic!("expected run");
        };
        let cfg = run.engine.resolve().unwrap();
        let defaults = EngineConfig::default();
        assert_ne!(cfg.a_clear_up_interval, defaults.a_clear_up_interval);
        let changed = toml_keys(&cfg)
            .into_iter()
            .filter(|k| {
                let line = |c: &EngineConfig| c.to_toml().lines().find(|l| l.starts_with(&format!("{k} ="))).map(str::to_string);
                line(&cfg) != line(&defaults)
            })
            .count();
        assert_eq!(changed, CONFIG_FLAGS.len());
        assert_eq!(EngineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("engine.toml");
        std::fs::write(&path, "num_split = 4\nchain_limit = 3\n").unwrap();
        let argv = ["flowcorr", "run", "--print-config", "--config", path.to_str().unwrap(), "--num-split", "2"];
        let Command::Run(run) = Cli::try_parse_from(argv).unwrap().command else {
            panic!("expected run");
        };
        let cfg = run.engine.resolve().unwrap();
        assert_eq!((cfg.num_split, cfg.chain_limit), (2, 3));
    }

    #[test]
    fn unknown_flags_and_missing_sources_are_rejected() {
        assert!(Cli::try_parse_from(["flowcorr", "run", "--dns", "d", "--flows", "f", "--out", "o", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["flowcorr", "run", "--out", "o"]).is_err());
        assert!(Cli::try_parse_from(["flowcorr", "run", "--dns", "d", "--flows", "f", "--out", "o", "--variant", "nope"]).is_err());
    }
}
