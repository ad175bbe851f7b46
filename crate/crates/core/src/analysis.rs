//! Domain hygiene and coverage analyses over names and correlated output.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::net::IpAddr;
use std::path::Path;

use thiserror::Error;

use crate::io::TrafficView;
use crate::model::{normalize_name, FlowRecord};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no flows to DNS ports 53 or 853; ratio is undefined")]
    UndefinedRatio,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Violation {
    TooLong255,
    LabelTooLong63,
    BadLabelChars,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityReport {
    pub name: String,
    pub violations: BTreeSet<Violation>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn label_chars_ok(label: &[u8], lenient: bool) -> bool {
    let (Some(&first), Some(&last)) = (label.first(), label.last()) else {
        return false;
    };
    let first_ok = first.is_ascii_alphabetic() || (lenient && first.is_ascii_digit());
    first_ok
        && last.is_ascii_alphanumeric()
        && label.iter().all(|&b| b.is_ascii_alphanumeric() || b == b'-')
}

/// Checks the three preferred-syntax rules: at most 255 bytes in total, at
/// most 63 bytes per label, and labels of letters, digits and hyphens that
/// start with a letter and end with a letter or digit. `lenient` also lets a
/// label start with a digit. Lengths are UTF-8 byte counts; a single
/// trailing root dot is ignored.
pub fn validate_domain(name: &str, lenient: bool) -> ValidityReport {
    let mut violations = BTreeSet::new();
    let body = name.strip_suffix('.').unwrap_or(name);
    if body.is_empty() {
        violations.insert(Violation::BadLabelChars);
    } else {
        if body.len() > 255 {
            violations.insert(Violation::TooLong255);
        }
        for label in body.split('.') {
            if label.len() > 63 {
                violations.insert(Violation::LabelTooLong63);
            }
            if !label_chars_ok(label.as_bytes(), lenient) {
                violations.insert(Violation::BadLabelChars);
            }
        }
    }
    ValidityReport {
        name: name.to_string(),
        violations,
    }
}

/// Domain → category entries, matched on label-aligned suffixes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blocklist {
    entries: HashMap<String, String>,
}

impl Blocklist {
    pub fn new() -> Self {
        Blocklist::default()
    }

    pub fn insert(&mut self, domain: &str, category: &str) {
        self.entries.insert(normalize_name(domain), category.to_string());
    }

    /// Parses `domain \t category` lines; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self, AnalysisError> {
        let mut bl = Blocklist::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(d), Some(c), None) if !d.is_empty() && !c.is_empty() => bl.insert(d, c),
                _ => {
                    return Err(AnalysisError::Parse {
                        line: i + 1,
                        msg: "expected `domain<TAB>category`".into(),
                    })
                }
            }
        }
        Ok(bl)
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Category of the longest listed suffix of `name`, if any.
    pub fn match_name(&self, name: &str) -> Option<&str> {
        let name = normalize_name(name);
        let mut rest = name.as_str();
        loop {
            if let Some(c) = self.entries.get(rest) {
                return Some(c);
            }
            rest = &rest[rest.find('.')? + 1..];
        }
    }
}

pub const UNCORRELATED: &str = "uncorrelated";
pub const INVALID: &str = "invalid";
pub const OK: &str = "ok";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryTotals {
    pub bytes: u64,
    /// Per-domain bytes, largest first, ties by name.
    pub domains: Vec<(String, u64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficReport {
    pub total_bytes: u64,
    pub correlated_bytes: u64,
    pub domain_bytes: BTreeMap<String, u64>,
    pub categories: BTreeMap<String, CategoryTotals>,
}

impl TrafficReport {
    pub fn correlation_rate(&self) -> Option<f64> {
        (self.total_bytes > 0).then(|| self.correlated_bytes as f64 / self.total_bytes as f64)
    }

    /// `category,rank,domain,bytes,cumulative_fraction` rows, one per domain
    /// of every category, ranked by bytes.
    pub fn cdf_csv(&self) -> String {
        let mut out = String::from("category,rank,domain,bytes,cumulative_fraction\n");
        for (cat, totals) in &self.categories {
            let mut cum = 0u64;
            for (rank, (domain, bytes)) in totals.domains.iter().enumerate() {
                cum += bytes;
                let frac = cum as f64 / totals.bytes as f64;
                let _ = writeln!(out, "{cat},{},{domain},{bytes},{frac:.6}", rank + 1);
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total_bytes={}", self.total_bytes);
        let _ = writeln!(s, "correlated_bytes={}", self.correlated_bytes);
        match self.correlation_rate() {
            Some(r) => writeln!(s, "correlation_rate={r:.6}"),
            None => writeln!(s, "correlation_rate=undefined"),
        }
        .ok();
        let _ = writeln!(s, "domains={}", self.domain_bytes.len());
        for (cat, t) in &self.categories {
            let _ = writeln!(s, "category.{cat}.bytes={}", t.bytes);
            let _ = writeln!(s, "category.{cat}.domains={}", t.domains.len());
        }
        s
    }
}

/// Category of a resolved domain: a blocklist category when listed,
/// otherwise `invalid` or `ok`.
pub fn classify(domain: &str, bl: &Blocklist, lenient: bool) -> String {
    match bl.match_name(domain) {
        Some(c) => c.to_string(),
        None if !validate_domain(domain, lenient).is_valid() => INVALID.to_string(),
        None => OK.to_string(),
    }
}

/// Sums bytes per result domain and per category. Uncorrelated records land
/// in their own category with no domains.
pub fn aggregate_traffic<'a, R, I>(records: I, bl: &Blocklist, lenient: bool) -> TrafficReport
where
    R: TrafficView + 'a,
    I: IntoIterator<Item = &'a R>,
{
    let mut report = TrafficReport::default();
    let mut per_cat: BTreeMap<String, (u64, HashMap<String, u64>)> = BTreeMap::new();
    let mut class_cache: HashMap<String, String> = HashMap::new();
    for rec in records {
        let bytes = rec.bytes();
        report.total_bytes += bytes;
        match rec.result() {
            None => per_cat.entry(UNCORRELATED.into()).or_default().0 += bytes,
            Some(domain) => {
                report.correlated_bytes += bytes;
                *report.domain_bytes.entry(domain.to_string()).or_default() += bytes;
                let cat = class_cache
                    .entry(domain.to_string())
                    .or_insert_with(|| classify(domain, bl, lenient))
                    .clone();
                let slot = per_cat.entry(cat).or_default();
                slot.0 += bytes;
                *slot.1.entry(domain.to_string()).or_default() += bytes;
            }
        }
    }
    for (cat, (bytes, domains)) in per_cat {
        let mut domains: Vec<_> = domains.into_iter().collect();
        domains.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        report.categories.insert(cat, CategoryTotals { bytes, domains });
    }
    report
}

/// One address per line; blank lines and `#` comments are skipped.
pub fn parse_resolvers(text: &str) -> Result<HashSet<IpAddr>, AnalysisError> {
    let mut set = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ip = line.parse().map_err(|_| AnalysisError::Parse {
            line: i + 1,
            msg: format!("not an IP address: {line}"),
        })?;
        set.insert(ip);
    }
    Ok(set)
}

pub const DNS_PORTS: [u16; 2] = [53, 853];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub dns_flows: u64,
    pub to_listed: u64,
    /// Share of DNS-port flows sent to a listed resolver.
    pub fraction: f64,
    /// `1 - fraction`.
    pub coverage: f64,
}

pub fn resolver_coverage<'a, I>(flows: I, resolvers: &HashSet<IpAddr>) -> Result<Coverage, AnalysisError>
where
    I: IntoIterator<Item = &'a FlowRecord>,
{
    let (mut dns_flows, mut to_listed) = (0u64, 0u64);
    for f in flows {
        if DNS_PORTS.contains(&f.dst_port) {
            dns_flows += 1;
            to_listed += u64::from(resolvers.contains(&f.dst_ip));
        }
    }
    if dns_flows == 0 {
        return Err(AnalysisError::UndefinedRatio);
    }
    let fraction = to_listed as f64 / dns_flows as f64;
    Ok(Coverage {
        dns_flows,
        to_listed,
        fraction,
        coverage: 1.0 - fraction,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BidirReport {
    /// Clients that received traffic from a malformed-domain remote.
    pub clients: usize,
    pub replying_clients: usize,
    pub remotes: usize,
    pub answered_remotes: usize,
    /// Packets in both directions over every malformed `(remote, client)` pair.
    pub pair_packets: u64,
    /// Of `pair_packets`, those on pairs with traffic in both directions.
    pub bidirectional_packets: u64,
}

fn ratio(n: impl Into<f64>, d: impl Into<f64>) -> f64 {
    let d = d.into();
    if d == 0.0 {
        0.0
    } else {
        n.into() / d
    }
}

impl BidirReport {
    pub fn client_fraction(&self) -> f64 {
        ratio(self.replying_clients as f64, self.clients as f64)
    }

    pub fn remote_fraction(&self) -> f64 {
        ratio(self.answered_remotes as f64, self.remotes as f64)
    }

    pub fn packet_share(&self) -> f64 {
        ratio(self.bidirectional_packets as f64, self.pair_packets as f64)
    }

    pub fn summary(&self) -> String {
        format!(
            "clients={}\nreplying_clients={}\nclient_fraction={:.6}\nremotes={}\nanswered_remotes={}\nremote_fraction={:.6}\npair_packets={}\nbidirectional_packets={}\npacket_share={:.6}\n",
            self.clients,
            self.replying_clients,
            self.client_fraction(),
            self.remotes,
            self.answered_remotes,
            self.remote_fraction(),
            self.pair_packets,
            self.bidirectional_packets,
            self.packet_share(),
        )
    }
}

/// Looks for return traffic towards malformed-domain remotes. An inbound
/// flow has the remote as source (the address its result was resolved
/// from) and the client as destination; a reply is any flow from that client
/// back to the same remote.
pub fn bidirectional_report<'a, R, I, F>(records: I, is_malformed: F) -> BidirReport
where
    R: TrafficView + 'a,
    I: IntoIterator<Item = &'a R>,
    F: Fn(&str) -> bool,
{
    let mut inbound: HashMap<(IpAddr, IpAddr), u64> = HashMap::new();
    let mut all: HashMap<(IpAddr, IpAddr), u64> = HashMap::new();
    let mut verdicts: HashMap<String, bool> = HashMap::new();
    for rec in records {
        let pair = (rec.src_ip(), rec.dst_ip());
        *all.entry(pair).or_default() += rec.packets();
        if let Some(result) = rec.result() {
            let bad = *verdicts
                .entry(result.to_string())
                .or_insert_with(|| is_malformed(result));
            if bad {
                *inbound.entry(pair).or_default() += rec.packets();
            }
        }
    }
    let mut clients: HashMap<IpAddr, bool> = HashMap::new();
    let mut remotes: HashMap<IpAddr, bool> = HashMap::new();
    let mut report = BidirReport::default();
    for (&(remote, client), &packets) in &inbound {
        let back = all.get(&(client, remote)).copied().unwrap_or(0);
        let replied = back > 0;
        *clients.entry(client).or_default() |= replied;
        *remotes.entry(remote).or_default() |= replied;
        report.pair_packets += packets + back;
        if replied {
            report.bidirectional_packets += packets + back;
        }
    }
    report.clients = clients.len();
    report.replying_clients = clients.values().filter(|&&r| r).count();
    report.remotes = remotes.len();
    report.answered_remotes = remotes.values().filter(|&&r| r).count();
    report
}
