//! Synthetic workloads with ground truth, accuracy scoring, benchmark runs
//! and the distribution metrics used to characterise a DNS feed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dns_pipeline::{filter_valid_response, parse_dns_line};
use crate::engine::{Engine, EngineError, RunReport};
use crate::flow_pipeline::parse_flow_line;
use crate::io::{DirSink, ParseError, RecordSink, SourceSpec, TrafficView};
use crate::model::{CorrelatedRecord, DnsRecord, EngineConfig, FlowRecord, RecordType};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("output flow {ts} {src} -> {dst} has no ground-truth entry")]
    UnknownFlow { ts: u64, src: IpAddr, dst: IpAddr },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("{path}: line {line}: {msg}")]
    Truth { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpSharing {
    /// Every service has its own address.
    Disjoint,
    /// All services answer from one address.
    SharedIp,
}

/// Weighted TTL ranges, `(weight, low, high)` with both bounds inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct TtlDistribution(pub Vec<(f64, u32, u32)>);

impl TtlDistribution {
    pub fn fixed(ttl: u32) -> Self {
        TtlDistribution(vec![(1.0, ttl, ttl)])
    }

    fn sample(&self, rng: &mut impl Rng, index: &WeightedIndex<f64>) -> u32 {
        let (_, lo, hi) = self.0[index.sample(rng)];
        rng.gen_range(lo..=hi)
    }
}

impl Default for TtlDistribution {
    /// Mostly short TTLs: 70% up to five minutes, 99% up to an hour.
    fn default() -> Self {
        TtlDistribution(vec![(0.70, 20, 300), (0.29, 301, 3600), (0.01, 3601, 86_400)])
    }
}

/// Parameters of a generated workload.
///
/// Time runs in whole logical seconds from `start`. Every second emits
/// `dns_rate` announcements on average; an announcement publishes one
/// service's full CNAME chain plus its address record, and is followed by
/// `flow_rate / dns_rate` flows from that service, each delayed by a uniform
/// draw from `flow_delay`. The first `num_services` announcements cover the
/// services in order; later ones pick a service at random.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub start: u64,
    pub duration: u64,
    pub dns_rate: f64,
    pub flow_rate: f64,
    pub num_services: usize,
    /// Weight of each CNAME depth, index 0 meaning no CNAME.
    pub cname_depth: Vec<f64>,
    pub ttl: TtlDistribution,
    pub ip_sharing: IpSharing,
    /// Inclusive bounds on the gap between an announcement and its flows.
    pub flow_delay: (u64, u64),
    pub num_clients: u32,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            start: 1_700_000_000,
            duration: 3600,
            dns_rate: 10.0,
            flow_rate: 100.0,
            num_services: 500,
            cname_depth: vec![0.30, 0.35, 0.20, 0.10, 0.04, 0.01],
            ttl: TtlDistribution::default(),
            ip_sharing: IpSharing::Disjoint,
            flow_delay: (0, 120),
            num_clients: 5000,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    fn two_services(sharing: IpSharing, seed: u64) -> Self {
        WorkloadSpec {
            duration: 2,
            dns_rate: 1.0,
            flow_rate: 50.0,
            num_services: 2,
            cname_depth: vec![0.0, 1.0],
            ttl: TtlDistribution::fixed(300),
            ip_sharing: sharing,
            flow_delay: (5, 60),
            num_clients: 4,
            seed,
            ..WorkloadSpec::default()
        }
    }

    /// Two services on two addresses, browsed alternately.
    pub fn scenario1(seed: u64) -> Self {
        Self::two_services(IpSharing::Disjoint, seed)
    }

    /// Two services behind one address; the second service's DNS answer
    /// arrives one second after the first and before any flow.
    pub fn scenario2(seed: u64) -> Self {
        Self::two_services(IpSharing::SharedIp, seed)
    }

    /// Every flow lands well inside its answer's first rotation window and
    /// all TTLs stay below the rotation interval.
    pub fn fresh(flows: u64, seed: u64) -> Self {
        let duration = 600;
        WorkloadSpec {
            duration,
            dns_rate: 20.0,
            flow_rate: flows as f64 / duration as f64,
            num_services: 1000,
            ttl: TtlDistribution(vec![(0.7, 20, 300), (0.3, 301, 1800)]),
            flow_delay: (0, 300),
            seed,
            ..WorkloadSpec::default()
        }
    }

    /// Flows trail their answers by more than one rotation interval but less
    /// than two, over many sparsely re-announced services.
    pub fn rotation_gap(interval: u64, seed: u64) -> Self {
        WorkloadSpec {
            duration: 6 * interval,
            dns_rate: 2.0,
            flow_rate: 6.0,
            num_services: 5000,
            ttl: TtlDistribution::fixed((interval / 2).max(1) as u32),
            flow_delay: (interval + 1, 2 * interval - 1),
            seed,
            ..WorkloadSpec::default()
        }
    }
}

/// Identity of a flow as seen in correlated output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub ts: u64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthEntry {
    pub ts: u64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub domain: String,
}

impl TruthEntry {
    fn key(&self) -> FlowKey {
        FlowKey {
            ts: self.ts,
            src_ip: self.src_ip,
            dst_ip: self.dst_ip,
        }
    }
}

/// The service domain behind every generated flow, in flow-file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub entries: Vec<TruthEntry>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `ts \t src \t dst \t sport \t dport \t domain` lines.
    pub fn write(&self, w: &mut impl Write) -> io::Result<()> {
        for e in &self.entries {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.ts, e.src_ip, e.dst_ip, e.src_port, e.dst_port, e.domain
            )?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| HarnessError::Truth {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            entries.push(TruthEntry {
                ts: f[0].parse().map_err(|_| bad("bad ts"))?,
                src_ip: f[1].parse().map_err(|_| bad("bad src"))?,
                dst_ip: f[2].parse().map_err(|_| bad("bad dst"))?,
                src_port: f[3].parse().map_err(|_| bad("bad sport"))?,
                dst_port: f[4].parse().map_err(|_| bad("bad dport"))?,
                domain: f[5].to_string(),
            });
        }
        Ok(GroundTruth { entries })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Workload {
    pub dns: Vec<DnsRecord>,
    pub flows: Vec<FlowRecord>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadFiles {
    pub dns: PathBuf,
    pub flows: PathBuf,
    pub truth: PathBuf,
}

impl WorkloadFiles {
    pub fn in_dir(dir: &Path) -> Self {
        WorkloadFiles {
            dns: dir.join("dns.tsv"),
            flows: dir.join("flows.tsv"),
            truth: dir.join("truth.tsv"),
        }
    }
}

fn write_lines<T: std::fmt::Display>(path: &Path, items: &[T]) -> io::Result<()> {
    let mut w = BufWriter::with_capacity(1 << 16, File::create(path)?);
    for item in items {
        writeln!(w, "{item}")?;
    }
    w.flush()
}

impl Workload {
    /// Writes `dns.tsv`, `flows.tsv` and `truth.tsv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> io::Result<WorkloadFiles> {
        std::fs::create_dir_all(dir)?;
        let files = WorkloadFiles::in_dir(dir);
        write_lines(&files.dns, &self.dns)?;
        write_lines(&files.flows, &self.flows)?;
        let mut w = BufWriter::new(File::create(&files.truth)?);
        self.truth.write(&mut w)?;
        w.flush()?;
        Ok(files)
    }
}

struct Service {
    domain: String,
    /// Names from the service domain down to the address record's name.
    chain: Vec<String>,
    ip: IpAddr,
}

fn service_ip(i: usize, sharing: IpSharing) -> IpAddr {
    match sharing {
        IpSharing::SharedIp => IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1)),
        IpSharing::Disjoint if i % 4 == 3 => {
            IpAddr::V6(Ipv6Addr::new(0x2001, 0xdb8, 0, 0, 0, 0, (i >> 16) as u16, i as u16))
        }
        IpSharing::Disjoint => IpAddr::V4(Ipv4Addr::from(0x0a00_0000 + i as u32 + 1)),
    }
}

fn build_services(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Vec<Service> {
    let depth_index = WeightedIndex::new(&spec.cname_depth).ok();
    (0..spec.num_services)
        .map(|i| {
            let depth = depth_index.as_ref().map_or(0, |d| d.sample(rng));
            let domain = format!("www.service{i}.com");
            let mut chain = vec![domain.clone()];
            for hop in 1..=depth {
                if hop == depth {
                    chain.push(format!("edge{i}.cdn{}.net", i % 7));
                } else {
                    chain.push(format!("c{hop}.service{i}.cdn{}.net", i % 7));
                }
            }
            Service {
                domain,
                chain,
                ip: service_ip(i, spec.ip_sharing),
            }
        })
        .collect()
}

/// Absorbs rounding in the fractional rate accumulators.
const RATE_EPSILON: f64 = 1e-9;

/// Builds a workload; the same spec always yields the same records.
pub fn generate_workload(spec: &WorkloadSpec) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let services = build_services(spec, &mut rng);
    let ttl_index = WeightedIndex::new(spec.ttl.0.iter().map(|t| t.0)).expect("ttl weights");
    let per_announcement = if spec.dns_rate > 0.0 {
        spec.flow_rate.max(0.0) / spec.dns_rate
    } else {
        0.0
    };
    let (dmin, dmax) = (spec.flow_delay.0, spec.flow_delay.1.max(spec.flow_delay.0));
    let mut dns = Vec::new();
    let mut flows: Vec<(FlowRecord, String)> = Vec::new();
    let (mut dns_acc, mut flow_acc) = (0.0f64, 0.0f64);
    let mut announced = 0usize;
    for t in spec.start..spec.start + spec.duration {
        dns_acc += spec.dns_rate.max(0.0);
        while dns_acc >= 1.0 - RATE_EPSILON && !services.is_empty() {
            dns_acc -= 1.0;
            let idx = if announced < services.len() {
                announced
            } else {
                rng.gen_range(0..services.len())
            };
            announced += 1;
            let svc = &services[idx];
            for pair in svc.chain.windows(2) {
                let ttl = spec.ttl.sample(&mut rng, &ttl_index);
                dns.push(DnsRecord::cname(t, &pair[0], ttl, &pair[1]).expect("generated CNAME"));
            }
            let rtype = if svc.ip.is_ipv4() { RecordType::A } else { RecordType::Aaaa };
            let ttl = spec.ttl.sample(&mut rng, &ttl_index);
            let last = svc.chain.last().expect("chain is never empty");
            dns.push(DnsRecord::new(t, rtype, last, ttl, &svc.ip.to_string()).expect("generated address record"));

            flow_acc += per_announcement;
            while flow_acc >= 1.0 - RATE_EPSILON {
                flow_acc -= 1.0;
                let client = Ipv4Addr::from(0x6440_0000 + rng.gen_range(0..spec.num_clients.max(1)));
                let packets = rng.gen_range(1..=50u64);
                let flow = FlowRecord::new(
                    t + rng.gen_range(dmin..=dmax),
                    svc.ip,
                    IpAddr::V4(client),
                    6,
                    443,
                    rng.gen_range(1024..=65535),
                    packets,
                    packets * rng.gen_range(60..=1500u64),
                )
                .expect("generated flow");
                flows.push((flow, svc.domain.clone()));
            }
        }
    }
    flows.sort_by_key(|(f, _)| f.ts);
    let truth = GroundTruth {
        entries: flows
            .iter()
            .map(|(f, d)| TruthEntry {
                ts: f.ts,
                src_ip: f.src_ip,
                dst_ip: f.dst_ip,
                src_port: f.src_port,
                dst_port: f.dst_port,
                domain: d.clone(),
            })
            .collect(),
    };
    Workload {
        dns,
        flows: flows.into_iter().map(|(f, _)| f).collect(),
        truth,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AccuracyReport {
    /// Flows present in the output.
    pub flows: u64,
    /// Output flows whose result is their true service.
    pub correct: u64,
    /// Output flows whose chain contains their true service anywhere.
    pub in_chain: u64,
    pub uncorrelated: u64,
    /// Ground-truth flows that never reached the output.
    pub missing: u64,
}

impl AccuracyReport {
    /// `correct / flows`; an empty output scores 1.
    pub fn accuracy(&self) -> f64 {
        if self.flows == 0 {
            1.0
        } else {
            self.correct as f64 / self.flows as f64
        }
    }

    pub fn chain_accuracy(&self) -> f64 {
        if self.flows == 0 {
            1.0
        } else {
            self.in_chain as f64 / self.flows as f64
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "flows={}\ncorrect={}\nin_chain={}\nuncorrelated={}\nmissing={}\naccuracy={:.6}\nchain_accuracy={:.6}\n",
            self.flows,
            self.correct,
            self.in_chain,
            self.uncorrelated,
            self.missing,
            self.accuracy(),
            self.chain_accuracy()
        )
    }
}

/// Scores output records against ground truth. The output carries no ports,
/// so flows are matched on `(ts, src, dst)`; among several candidates the
/// one agreeing with the record's result is preferred.
pub fn evaluate_accuracy<'a, R, I>(output: I, truth: &GroundTruth) -> Result<AccuracyReport, HarnessError>
where
    R: TrafficView + 'a,
    I: IntoIterator<Item = &'a R>,
{
    let mut pending: HashMap<FlowKey, Vec<&str>> = HashMap::new();
    for e in &truth.entries {
        pending.entry(e.key()).or_default().push(&e.domain);
    }
    let mut report = AccuracyReport::default();
    for rec in output {
        let key = FlowKey {
            ts: rec.ts(),
            src_ip: rec.src_ip(),
            dst_ip: rec.dst_ip(),
        };
        let unknown = || HarnessError::UnknownFlow {
            ts: key.ts,
            src: key.src_ip,
            dst: key.dst_ip,
        };
        let candidates = pending.get_mut(&key).ok_or_else(unknown)?;
        if candidates.is_empty() {
            return Err(unknown());
        }
        let pick = rec
            .result()
            .and_then(|r| candidates.iter().position(|d| *d == r))
            .unwrap_or(0);
        let domain = candidates.swap_remove(pick);
        report.flows += 1;
        match rec.result() {
            None => report.uncorrelated += 1,
            Some(r) if r == domain => report.correct += 1,
            Some(_) => {}
        }
        if rec.chain().iter().any(|c| c == domain) {
            report.in_chain += 1;
        }
    }
    report.missing = pending.values().map(|v| v.len() as u64).sum();
    Ok(report)
}

/// Sink that keeps nothing; the shared writer still counts records and bytes.
#[derive(Debug, Default)]
pub struct DiscardSink;

impl RecordSink for DiscardSink {
    fn write(&mut self, _rec: &CorrelatedRecord) -> io::Result<()> {
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub config: EngineConfig,
    pub run: RunReport,
}

impl MetricsReport {
    pub fn flows_per_sec(&self) -> f64 {
        let secs = self.run.elapsed.as_secs_f64();
        if secs > 0.0 {
            self.run.flows_parsed() as f64 / secs
        } else {
            0.0
        }
    }

    /// Flat `key=value` text.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.config.variant);
        let _ = writeln!(s, "num_split={}", self.config.effective_num_split());
        let _ = writeln!(s, "flows_per_sec={:.1}", self.flows_per_sec());
        s.push_str(&self.run.summary());
        s
    }
}

/// Runs the whole pipeline over a workload's files. Output goes to `out`
/// when given and is discarded otherwise.
pub fn run_benchmark(
    cfg: &EngineConfig,
    files: &WorkloadFiles,
    out: Option<&Path>,
) -> Result<MetricsReport, HarnessError> {
    let engine = Engine::new(cfg.clone())?;
    let sink: Box<dyn RecordSink> = match out {
        Some(dir) => Box::new(DirSink::create(dir, cfg.roll_interval)?),
        None => Box::new(DiscardSink),
    };
    let run = engine.run(
        &[SourceSpec::File(files.dns.clone())],
        &[SourceSpec::File(files.flows.clone())],
        sink,
    )?;
    Ok(MetricsReport {
        config: cfg.clone(),
        run,
    })
}

pub fn read_dns_file(path: &Path) -> Result<Vec<DnsRecord>, HarnessError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = parse_dns_line(&line, i as u64 + 1).map_err(|source| HarnessError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if filter_valid_response(&rec) {
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn read_flow_file(path: &Path) -> Result<Vec<FlowRecord>, HarnessError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_flow_line(&line, i as u64 + 1).map_err(|source| HarnessError::Parse {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(out)
}

/// Longest chain walked when measuring chain lengths.
pub const MAX_MEASURED_CHAIN: usize = 64;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Distributions {
    /// CNAME hops needed to reach the queried name from each address record.
    pub chain_hops: BTreeMap<usize, u64>,
    /// `(ttl, cumulative fraction)` over address records.
    pub ttl_cdf: Vec<(u32, f64)>,
    /// `(names, addresses, cumulative fraction)`: how many addresses carried
    /// exactly that many distinct names within one window.
    pub names_per_ip_cdf: Vec<(usize, u64, f64)>,
}

fn cdf<K: Ord + Copy>(counts: &BTreeMap<K, u64>) -> Vec<(K, u64, f64)> {
    let total: u64 = counts.values().sum();
    let mut cum = 0;
    counts
        .iter()
        .map(|(&k, &n)| {
            cum += n;
            (k, n, cum as f64 / total as f64)
        })
        .collect()
}

impl Distributions {
    pub fn chain_hops_csv(&self) -> String {
        let total: u64 = self.chain_hops.values().sum();
        let mut s = String::from("hops,records,fraction\n");
        for (h, n) in &self.chain_hops {
            let _ = writeln!(s, "{h},{n},{:.6}", *n as f64 / total as f64);
        }
        s
    }

    pub fn ttl_cdf_csv(&self) -> String {
        let mut s = String::from("ttl,cumulative_fraction\n");
        for (t, f) in &self.ttl_cdf {
            let _ = writeln!(s, "{t},{f:.6}");
        }
        s
    }

    pub fn names_per_ip_csv(&self) -> String {
        let mut s = String::from("names,addresses,cumulative_fraction\n");
        for (k, n, f) in &self.names_per_ip_cdf {
            let _ = writeln!(s, "{k},{n},{f:.6}");
        }
        s
    }
}

/// Chain lengths, TTL spread and names per address over a DNS feed.
///
/// Chain lengths walk the feed's final alias graph (latest answer wins) from
/// each address record's name, stopping at a name with no alias, a repeated
/// name, or [`MAX_MEASURED_CHAIN`] hops. Names per address are counted in
/// consecutive windows of `window` seconds.
pub fn distribution_metrics(dns: &[DnsRecord], window: u64) -> Distributions {
    let mut alias_of: HashMap<&str, &str> = HashMap::new();
    for r in dns.iter().filter(|r| r.rtype == RecordType::Cname) {
        alias_of.insert(&r.answer, &r.qname);
    }
    let window = window.max(1);
    let mut chain_hops = BTreeMap::new();
    let mut ttls: BTreeMap<u32, u64> = BTreeMap::new();
    let mut names: HashMap<(u64, &str), HashSet<&str>> = HashMap::new();
    for r in dns.iter().filter(|r| r.rtype.is_address()) {
        let mut seen = HashSet::new();
        let mut current = r.qname.as_str();
        let mut hops = 0;
        seen.insert(current);
        while hops < MAX_MEASURED_CHAIN {
            match alias_of.get(current) {
                Some(next) if seen.insert(next) => {
                    hops += 1;
                    current = next;
                }
                _ => break,
            }
        }
        *chain_hops.entry(hops).or_insert(0) += 1;
        *ttls.entry(r.ttl).or_insert(0) += 1;
        names
            .entry((r.ts / window, r.answer.as_str()))
            .or_default()
            .insert(&r.qname);
    }
    let mut per_ip: BTreeMap<usize, u64> = BTreeMap::new();
    for set in names.values() {
        *per_ip.entry(set.len()).or_insert(0) += 1;
    }
    Distributions {
        chain_hops,
        ttl_cdf: cdf(&ttls).into_iter().map(|(k, _, f)| (k, f)).collect(),
        names_per_ip_cdf: cdf(&per_ip),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::OutputRecord;

    #[test]
    fn scenario1_shape() {
        let w = generate_workload(&WorkloadSpec::scenario1(3));
        let domains: HashSet<_> = w.truth.entries.iter().map(|e| e.domain.as_str()).collect();
        let ips: HashSet<_> = w.flows.iter().map(|f| f.src_ip).collect();
        assert_eq!(domains.len(), 2);
        assert_eq!(ips.len(), 2);
        let first = w.truth.entries.iter().filter(|e| e.domain == "www.service0.com").count();
        assert_eq!(first * 2, w.flows.len());
    }

    #[test]
    fn scenario2_shape() {
        let w = generate_workload(&WorkloadSpec::scenario2(3));
        let ips: HashSet<_> = w.flows.iter().map(|f| f.src_ip).collect();
        assert_eq!(ips.len(), 1);
        let ts_of = |name: &str| w.dns.iter().find(|r| r.qname == name).unwrap().ts;
        assert!(ts_of("www.service1.com") > ts_of("www.service0.com"));
        let last_dns = w.dns.iter().map(|r| r.ts).max().unwrap();
        assert!(w.flows.iter().all(|f| f.ts > last_dns));
    }

    #[test]
    fn zero_flow_rate_gives_only_dns() {
        let spec = WorkloadSpec {
            flow_rate: 0.0,
            duration: 10,
            ..WorkloadSpec::default()
        };
        let w = generate_workload(&spec);
        assert!(w.flows.is_empty() && w.truth.is_empty());
        assert!(!w.dns.is_empty());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = WorkloadSpec {
            duration: 60,
            ..WorkloadSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = generate_workload(&spec).write_to(&dir.path().join("a")).unwrap();
        let b = generate_workload(&spec).write_to(&dir.path().join("b")).unwrap();
        for (x, y) in [(&a.dns, &b.dns), (&a.flows, &b.flows), (&a.truth, &b.truth)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let other = generate_workload(&WorkloadSpec { seed: 2, ..spec });
        assert_ne!(other, generate_workload(&WorkloadSpec { duration: 60, ..WorkloadSpec::default() }));
    }

    #[test]
    fn every_flow_follows_its_chain() {
        let spec = WorkloadSpec {
            duration: 120,
            ..WorkloadSpec::default()
        };
        let w = generate_workload(&spec);
        let first_answer: HashMap<IpAddr, u64> = w.dns.iter().filter(|r| r.rtype.is_address()).fold(
            HashMap::new(),
            |mut m, r| {
                m.entry(r.answer.parse().unwrap()).or_insert(r.ts);
                m
            },
        );
        for f in &w.flows {
            assert!(first_answer[&f.src_ip] <= f.ts);
        }
        let hist = distribution_metrics(&w.dns, 300).chain_hops;
        assert!(hist.keys().all(|&h| h <= 5));
    }

    #[test]
    fn truth_file_round_trips() {
        let w = generate_workload(&WorkloadSpec::scenario1(9));
        let dir = tempfile::tempdir().unwrap();
        let files = w.write_to(dir.path()).unwrap();
        assert_eq!(GroundTruth::load(&files.truth).unwrap(), w.truth);
        assert_eq!(read_flow_file(&files.flows).unwrap(), w.flows);
        assert_eq!(read_dns_file(&files.dns).unwrap(), w.dns);
    }

    fn out(ts: u64, src: &str, dst: &str, chain: &[&str]) -> OutputRecord {
        OutputRecord {
            ts,
            src_ip: src.parse().unwrap(),
            dst_ip: dst.parse().unwrap(),
            bytes: 1,
            packets: 1,
            chain: chain.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn truth(rows: &[(u64, &str, &str, &str)]) -> GroundTruth {
        GroundTruth {
            entries: rows
                .iter()
                .map(|&(ts, s, d, dom)| TruthEntry {
                    ts,
                    src_ip: s.parse().unwrap(),
                    dst_ip: d.parse().unwrap(),
                    src_port: 443,
                    dst_port: 5000,
                    domain: dom.into(),
                })
                .collect(),
        }
    }

    #[test]
    fn accuracy_scoring() {
        let t = truth(&[
            (1, "10.0.0.1", "10.9.0.1", "a.com"),
            (1, "10.0.0.1", "10.9.0.1", "b.com"),
            (2, "10.0.0.2", "10.9.0.1", "c.com"),
        ]);
        let recs = vec![
            out(1, "10.0.0.1", "10.9.0.1", &["edge", "b.com"]),
            out(1, "10.0.0.1", "10.9.0.1", &["edge", "b.com"]),
            out(2, "10.0.0.2", "10.9.0.1", &[]),
        ];
        let r = evaluate_accuracy(&recs, &t).unwrap();
        assert_eq!((r.flows, r.correct, r.uncorrelated, r.missing), (3, 1, 1, 0));
        assert!((r.accuracy() - 1.0 / 3.0).abs() < 1e-12);

        let stray = vec![out(9, "10.0.0.9", "10.9.0.1", &[])];
        assert!(matches!(evaluate_accuracy(&stray, &t), Err(HarnessError::UnknownFlow { .. })));
        let empty: Vec<OutputRecord> = Vec::new();
        assert_eq!(evaluate_accuracy(&empty, &GroundTruth::default()).unwrap().accuracy(), 1.0);
    }

    fn a(ts: u64, name: &str, ttl: u32, ip: &str) -> DnsRecord {
        DnsRecord::a(ts, name, ttl, ip).unwrap()
    }

    #[test]
    fn distribution_examples() {
        let dns = vec![
            DnsRecord::cname(0, "www.x.com", 60, "edge.x.net").unwrap(),
            a(0, "edge.x.net", 60, "10.0.0.1"),
            DnsRecord::cname(0, "www.y.com", 60, "edge.y.net").unwrap(),
            a(10, "edge.y.net", 60, "10.0.0.1"),
        ];
        let d = distribution_metrics(&dns, 300);
        assert_eq!(d.chain_hops, BTreeMap::from([(1, 2)]));
        assert_eq!(d.ttl_cdf, vec![(60, 1.0)]);
        assert_eq!(d.names_per_ip_cdf, vec![(2, 1, 1.0)]);
        // Outside the window the two names are counted separately.
        let d = distribution_metrics(&[a(0, "p.net", 60, "10.0.0.1"), a(400, "q.net", 60, "10.0.0.1")], 300);
        assert_eq!(d.names_per_ip_cdf, vec![(1, 2, 1.0)]);
        assert_eq!(d.chain_hops, BTreeMap::from([(0, 2)]));
    }

    #[test]
    fn cyclic_alias_graph_is_bounded() {
        let dns = vec![
            DnsRecord::cname(0, "a.net", 60, "b.net").unwrap(),
            DnsRecord::cname(0, "b.net", 60, "a.net").unwrap(),
            a(0, "a.net", 60, "10.0.0.1"),
        ];
        assert_eq!(distribution_metrics(&dns, 300).chain_hops, BTreeMap::from([(1, 1)]));
    }

    #[test]
    fn default_ttls_are_mostly_short() {
        let spec = WorkloadSpec {
            duration: 600,
            ..WorkloadSpec::default()
        };
        let d = distribution_metrics(&generate_workload(&spec).dns, 300);
        let at = |limit: u32| d.ttl_cdf.iter().take_while(|(t, _)| *t <= limit).last().unwrap().1;
        assert!((0.6..0.8).contains(&at(300)), "{}", at(300));
        assert!(at(3600) >= 0.97);
    }
}
