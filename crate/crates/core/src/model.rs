//! Record and configuration types shared by every stage of the engine.

use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rejection raised when a value would violate a type invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{rtype} answer {answer:?} is not a matching IP address")]
    AnswerFamily { rtype: RecordType, answer: String },
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("result must be null iff the chain is empty and equal its last element")]
    ResultMismatch,
    #[error("chain of {len} names exceeds 1 + chain limit {limit}")]
    ChainTooLong { len: usize, limit: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
}

/// DNS resource record type as carried on the feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordType {
    A,
    Aaaa,
    Cname,
    Other,
}

impl RecordType {
    pub fn is_address(self) -> bool {
        matches!(self, RecordType::A | RecordType::Aaaa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecordType::A => "A",
            RecordType::Aaaa => "AAAA",
            RecordType::Cname => "CNAME",
            RecordType::Other => "OTHER",
        }
    }
}

impl fmt::Display for RecordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses a type mnemonic. Any other well-formed mnemonic (MX, TXT, TYPE65, ...)
/// maps to [`RecordType::Other`]; only malformed tokens are rejected.
impl FromStr for RecordType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return Err(());
        }
        Ok(match s.to_ascii_uppercase().as_str() {
            "A" => RecordType::A,
            "AAAA" => RecordType::Aaaa,
            "CNAME" => RecordType::Cname,
            _ => RecordType::Other,
        })
    }
}

/// Lowercases a domain name and strips one trailing root dot.
pub fn normalize_name(name: &str) -> String {
    let trimmed = name.strip_suffix('.').unwrap_or(name);
    trimmed.to_lowercase()
}

/// Normalizes an answer field: IP addresses are rewritten in canonical text
/// form so the fill side and the lookup side agree on keys; names are folded.
pub fn normalize_answer(rtype: RecordType, answer: &str) -> String {
    if rtype.is_address() {
        match answer.parse::<IpAddr>() {
            Ok(ip) => ip.to_string(),
            Err(_) => answer.to_string(),
        }
    } else {
        normalize_name(answer)
    }
}

/// One DNS answer, pre-expanded so a record carries exactly one answer.
///
/// The fields are public because the parser produces shape-valid records that
/// may still fail [`DnsRecord::validate`]; the response filter is what drops
/// those. Use [`DnsRecord::new`] to build a record that is known to be valid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DnsRecord {
    pub ts: u64,
    pub rtype: RecordType,
    pub qname: String,
    pub ttl: u32,
    pub answer: String,
}

impl DnsRecord {
    pub fn new(
        ts: u64,
        rtype: RecordType,
        qname: &str,
        ttl: u32,
        answer: &str,
    ) -> Result<Self, ModelError> {
        let rec = DnsRecord {
            ts,
            rtype,
            qname: normalize_name(qname),
            ttl,
            answer: normalize_answer(rtype, answer),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn a(ts: u64, qname: &str, ttl: u32, ip: &str) -> Result<Self, ModelError> {
        Self::new(ts, RecordType::A, qname, ttl, ip)
    }

    pub fn cname(ts: u64, qname: &str, ttl: u32, target: &str) -> Result<Self, ModelError> {
        Self::new(ts, RecordType::Cname, qname, ttl, target)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.qname.is_empty() {
            return Err(ModelError::Empty("qname"));
        }
        if self.answer.is_empty() {
            return Err(ModelError::Empty("answer"));
        }
        let family_ok = match self.rtype {
            RecordType::A => matches!(self.answer.parse::<IpAddr>(), Ok(IpAddr::V4(_))),
            RecordType::Aaaa => matches!(self.answer.parse::<IpAddr>(), Ok(IpAddr::V6(_))),
            RecordType::Cname | RecordType::Other => true,
        };
        if !family_ok {
            return Err(ModelError::AnswerFamily {
                rtype: self.rtype,
                answer: self.answer.clone(),
            });
        }
        Ok(())
    }
}

/// Wire form: `ts \t rtype \t qname \t ttl \t answer`.
impl fmt::Display for DnsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.ts, self.rtype, self.qname, self.ttl, self.answer
        )
    }
}

/// One flow observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowRecord {
    pub ts: u64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub proto: u8,
    pub src_port: u16,
    pub dst_port: u16,
    pub packets: u64,
    pub bytes: u64,
}

impl FlowRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ts: u64,
        src_ip: IpAddr,
        dst_ip: IpAddr,
        proto: u8,
        src_port: u16,
        dst_port: u16,
        packets: u64,
        bytes: u64,
    ) -> Result<Self, ModelError> {
        if packets == 0 {
            return Err(ModelError::ZeroCount("packets"));
        }
        if bytes == 0 {
            return Err(ModelError::ZeroCount("bytes"));
        }
        Ok(FlowRecord {
            ts,
            src_ip,
            dst_ip,
            proto,
            src_port,
            dst_port,
            packets,
            bytes,
        })
    }

    /// The address used as the lookup key.
    pub fn key_ip(&self, use_dst_ip: bool) -> IpAddr {
        if use_dst_ip {
            self.dst_ip
        } else {
            self.src_ip
        }
    }
}

/// Wire form: `ts \t srcIP \t dstIP \t proto \t srcPort \t dstPort \t packets \t bytes`.
impl fmt::Display for FlowRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.ts,
            self.src_ip,
            self.dst_ip,
            self.proto,
            self.src_port,
            self.dst_port,
            self.packets,
            self.bytes
        )
    }
}

/// A flow joined with the name chain its key address resolved to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CorrelatedRecord {
    flow: FlowRecord,
    chain: Vec<String>,
}

impl CorrelatedRecord {
    /// Builds a record whose result is the last element of `chain`.
    pub fn from_chain(flow: FlowRecord, chain: Vec<String>) -> Self {
        CorrelatedRecord { flow, chain }
    }

    pub fn uncorrelated(flow: FlowRecord) -> Self {
        CorrelatedRecord {
            flow,
            chain: Vec::new(),
        }
    }

    /// Builds a record from an explicit result, checking it against the chain.
    pub fn new(
        flow: FlowRecord,
        chain: Vec<String>,
        result: Option<String>,
        chain_limit: usize,
    ) -> Result<Self, ModelError> {
        if chain.last() != result.as_ref() {
            return Err(ModelError::ResultMismatch);
        }
        if chain.len() > chain_limit + 1 {
            return Err(ModelError::ChainTooLong {
                len: chain.len(),
                limit: chain_limit,
            });
        }
        Ok(CorrelatedRecord { flow, chain })
    }

    pub fn flow(&self) -> &FlowRecord {
        &self.flow
    }

    pub fn chain(&self) -> &[String] {
        &self.chain
    }

    pub fn result(&self) -> Option<&str> {
        self.chain.last().map(String::as_str)
    }

    pub fn is_correlated(&self) -> bool {
        !self.chain.is_empty()
    }
}

/// Source of "now" for rotation and expiry decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    /// Replay: logical time is the timestamp carried by each record.
    #[default]
    RecordTime,
    /// Live streams: logical time is the arrival wall-clock second.
    WallClock,
}

impl Clock {
    pub fn now(self, record_ts: u64) -> u64 {
        match self {
            Clock::RecordTime => record_ts,
            Clock::WallClock => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

/// Feature set of the engine. Everything except `Main` removes or replaces
/// one mechanism so its contribution can be measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Main,
    /// One shard per map family.
    NoSplit,
    /// Maps are never cleared.
    NoClearUp,
    /// Active maps are cleared without keeping an inactive snapshot.
    NoRotation,
    /// Every record goes to the active tier regardless of TTL.
    NoLongMaps,
    /// Per-entry expiry at `ts + ttl` instead of bulk rotation.
    ExactTtl,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Main,
        Variant::NoSplit,
        Variant::NoClearUp,
        Variant::NoRotation,
        Variant::NoLongMaps,
        Variant::ExactTtl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Main => "main",
            Variant::NoSplit => "no-split",
            Variant::NoClearUp => "no-clear-up",
            Variant::NoRotation => "no-rotation",
            Variant::NoLongMaps => "no-long-maps",
            Variant::ExactTtl => "exact-ttl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded = s.to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == folded)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

/// All engine tunables. Intervals are logical seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Rotation interval of the IP→NAME maps.
    pub a_clear_up_interval: u64,
    /// Rotation interval of the NAME→CNAME maps.
    pub c_clear_up_interval: u64,
    pub num_split: usize,
    /// Maximum number of CNAME hops followed per lookup.
    pub chain_limit: usize,
    /// Clear the long tier this often; `None` keeps it forever.
    pub long_clear_up_interval: Option<u64>,
    pub variant: Variant,
    /// Capacity of every bounded queue and stream buffer.
    pub queue_capacity: usize,
    /// FillUp workers per DNS stream.
    pub fill_workers: usize,
    /// LookUp workers per flow stream.
    pub lookup_workers: usize,
    pub write_workers: usize,
    /// Key lookups on the destination address instead of the source.
    pub use_dst_ip: bool,
    /// Writers flush after this many records...
    pub flush_batch: usize,
    /// ...or once this many logical seconds have passed since the oldest
    /// unflushed record.
    pub flush_interval: u64,
    /// Output files cover this many logical seconds each.
    pub roll_interval: u64,
    /// Map sizes are sampled every this many logical seconds during replay.
    pub sample_interval: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            a_clear_up_interval: 3600,
            c_clear_up_interval: 7200,
            num_split: 10,
            chain_limit: 6,
            long_clear_up_interval: None,
            variant: Variant::Main,
            queue_capacity: 65_536,
            fill_workers: 2,
            lookup_workers: 4,
            write_workers: 2,
            use_dst_ip: false,
            flush_batch: 1000,
            flush_interval: 1,
            roll_interval: 3600,
            sample_interval: 60,
        }
    }
}

impl EngineConfig {
    pub fn with_variant(variant: Variant) -> Self {
        EngineConfig {
            variant,
            ..EngineConfig::default()
        }
    }

    /// Single worker in every pool; replays are then fully deterministic.
    pub fn single_threaded(mut self) -> Self {
        self.fill_workers = 1;
        self.lookup_workers = 1;
        self.write_workers = 1;
        self
    }

    /// Shard count actually used: `NoSplit` pins it to one.
    pub fn effective_num_split(&self) -> usize {
        if self.variant == Variant::NoSplit {
            1
        } else {
            self.num_split
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive: [(&str, u64); 13] = [
            ("a_clear_up_interval", self.a_clear_up_interval),
            ("c_clear_up_interval", self.c_clear_up_interval),
            ("num_split", self.num_split as u64),
            ("chain_limit", self.chain_limit as u64),
            ("long_clear_up_interval", self.long_clear_up_interval.unwrap_or(1)),
            ("queue_capacity", self.queue_capacity as u64),
            ("fill_workers", self.fill_workers as u64),
            ("lookup_workers", self.lookup_workers as u64),
            ("write_workers", self.write_workers as u64),
            ("flush_batch", self.flush_batch as u64),
            ("flush_interval", self.flush_interval),
            ("roll_interval", self.roll_interval),
            ("sample_interval", self.sample_interval),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: EngineConfig =
            toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
