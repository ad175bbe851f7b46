//! Flow side: parse flow lines and attribute each flow to a name chain.

use std::sync::Arc;

use crate::io::{parse_field, split_fields, ParseError};
use crate::model::{Clock, CorrelatedRecord, EngineConfig, FlowRecord};
use crate::queue::{Consumer, Producer};
use crate::store::MapStore;

/// Parses `ts \t srcIP \t dstIP \t proto \t srcPort \t dstPort \t packets \t bytes`.
pub fn parse_flow_line(line: &str, line_no: u64) -> Result<FlowRecord, ParseError> {
    let f = split_fields(line, 8, line_no)?;
    FlowRecord::new(
        parse_field(f[0], "ts", line_no)?,
        parse_field(f[1], "srcIP", line_no)?,
        parse_field(f[2], "dstIP", line_no)?,
        parse_field(f[3], "proto", line_no)?,
        parse_field(f[4], "srcPort", line_no)?,
        parse_field(f[5], "dstPort", line_no)?,
        parse_field(f[6], "packets", line_no)?,
        parse_field(f[7], "bytes", line_no)?,
    )
    .map_err(|e| ParseError::new(line_no, e))
}

/// How a single resolution went.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResolveTrace {
    /// Successful NAME→CNAME lookups.
    pub hops: usize,
    /// NAME→CNAME lookups issued, including the final miss.
    pub cname_lookups: usize,
    /// The walk ended on a memoized entry.
    pub memo_hit: bool,
    /// This resolution wrote a memoized entry.
    pub memoized: bool,
}

/// Resolves `flow` against `store` using the flow's own timestamp as now.
pub fn resolve(store: &MapStore, flow: FlowRecord, cfg: &EngineConfig) -> CorrelatedRecord {
    let now = flow.ts;
    resolve_traced(store, flow, cfg, now).0
}

/// Looks the flow's key address up in IP→NAME, then follows NAME→CNAME for
/// at most `chain_limit` hops. The walk stops early on a miss, on a
/// self-referencing entry, or on a memoized entry (which already points at
/// a final result). Walks of two or more hops are memoized as
/// `first name → result`.
pub fn resolve_traced(
    store: &MapStore,
    flow: FlowRecord,
    cfg: &EngineConfig,
    now: u64,
) -> (CorrelatedRecord, ResolveTrace) {
    let mut trace = ResolveTrace::default();
    let key = flow.key_ip(cfg.use_dst_ip).to_string();
    let Some(first) = store.ip_name().deep_lookup(&key, now) else {
        return (CorrelatedRecord::uncorrelated(flow), trace);
    };
    let mut chain = vec![first.value.to_string()];
    let mut current = first.value;
    let mut expires: Option<u64> = None;
    while trace.hops < cfg.chain_limit {
        trace.cname_lookups += 1;
        let Some(next) = store.name_cname().deep_lookup(&current, now) else {
            break;
        };
        trace.hops += 1;
        chain.push(next.value.to_string());
        if let Some(exp) = next.expires {
            expires = Some(expires.map_or(exp, |e| e.min(exp)));
        }
        if next.memo {
            trace.memo_hit = true;
            break;
        }
        if next.value == current {
            break;
        }
        current = next.value;
    }
    if trace.hops >= 2 {
        let result = chain.last().expect("chain has at least two names");
        store.memoize_chain(&chain[0], result, expires);
        trace.memoized = true;
    }
    (CorrelatedRecord::from_chain(flow, chain), trace)
}

/// Resolves flows from `queue` and hands every result, correlated or not, to
/// the write queue.
pub fn look_up_worker(
    queue: Consumer<FlowRecord>,
    store: Arc<MapStore>,
    cfg: Arc<EngineConfig>,
    clock: Clock,
    out: Producer<CorrelatedRecord>,
) {
    while let Some(flow) = queue.recv() {
        let now = clock.now(flow.ts);
        let (rec, _) = resolve_traced(&store, flow, &cfg, now);
        // The writer never drops; a send only fails once the writers are
        // gone, and then there is nowhere left to put the record.
        let _ = out.push(rec);
        queue.complete(1);
    }
}
