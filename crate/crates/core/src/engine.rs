//! Wires sources, parsers, worker pools, the map store and the writers into
//! one run.
//!
//! Replay runs (files and stdin only) are sequenced: parsed records from all
//! streams are merged by timestamp, DNS before flows on ties, and the
//! sequencer waits for the other kind's workers to go idle whenever it
//! switches between DNS and flows. That makes a replay reproduce the same
//! store state for every flow regardless of thread scheduling. Live runs
//! (any TCP source) skip the sequencer, push straight into the worker queues
//! and use the wall clock.

use std::fmt::{self, Write as _};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::channel;
use thiserror::Error;

use crate::dns_pipeline::{fill_up_worker, filter_valid_response, parse_dns_line};
use crate::flow_pipeline::{look_up_worker, parse_flow_line};
use crate::io::{
    write_worker, RawLine, RecordSink, SharedSink, SourceSpec, StreamCounts, StreamSource,
    StreamStats, WriterCounts,
};
use crate::model::{Clock, DnsRecord, EngineConfig, FlowRecord, ModelError};
use crate::queue::{self, wait_idle, Consumer, Producer, QueueStats};
use crate::store::{MapStore, StoreCounters};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ModelError),
    #[error("at least one DNS source and one flow source are required")]
    MissingSources,
    #[error("cannot open {spec}: {source}")]
    Source {
        spec: SourceSpec,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Replay,
    Live,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Replay => "replay",
            Mode::Live => "live",
        })
    }
}

/// Counters gathered over one run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub mode: Mode,
    pub dns: Vec<StreamCounts>,
    pub flows: Vec<StreamCounts>,
    pub writer: WriterCounts,
    pub write_error: Option<String>,
    pub store: StoreCounters,
    /// `(logical time, map entries)` taken every `sample_interval` and once
    /// at the end.
    pub entry_samples: Vec<(u64, usize)>,
    pub peak_entries: usize,
    pub peak_rss_bytes: Option<u64>,
    pub elapsed: Duration,
}

impl RunReport {
    pub fn total_bytes(&self) -> u64 {
        self.writer.total_bytes
    }

    pub fn correlated_bytes(&self) -> u64 {
        self.writer.correlated_bytes
    }

    /// Correlated bytes over total bytes; `None` when no traffic was written.
    pub fn correlation_rate(&self) -> Option<f64> {
        (self.writer.total_bytes > 0)
            .then(|| self.writer.correlated_bytes as f64 / self.writer.total_bytes as f64)
    }

    /// Buffer and queue drops over every stream.
    pub fn drops(&self) -> u64 {
        self.dns
            .iter()
            .chain(&self.flows)
            .map(|s| s.buffer_drops + s.queue_drops)
            .sum()
    }

    /// Flows that made it past parsing.
    pub fn flows_parsed(&self) -> u64 {
        self.flows
            .iter()
            .map(|s| s.lines_read - s.parse_errors)
            .sum()
    }

    /// Correlated records handed to the writers, written or discarded.
    pub fn records_emitted(&self) -> u64 {
        self.writer.records + self.writer.discarded
    }

    pub fn flow_queue_drops(&self) -> u64 {
        self.flows.iter().map(|s| s.queue_drops).sum()
    }

    /// Every line and every parsed flow is accounted for exactly once.
    pub fn is_conserved(&self) -> bool {
        self.dns.iter().chain(&self.flows).all(StreamCounts::is_conserved)
            && self.flows_parsed() == self.records_emitted() + self.flow_queue_drops()
    }

    /// Flat `key=value` lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", self.mode);
        for st in self.dns.iter().chain(&self.flows) {
            let _ = writeln!(
                s,
                "stream.{}=received:{} buffer_drops:{} parse_errors:{} filtered:{} queue_drops:{} processed:{}{}",
                st.label,
                st.received,
                st.buffer_drops,
                st.parse_errors,
                st.filtered,
                st.queue_drops,
                st.processed,
                st.error.as_ref().map(|e| format!(" error:{e}")).unwrap_or_default(),
            );
        }
        let _ = writeln!(s, "records_out={}", self.writer.records);
        let _ = writeln!(s, "records_discarded={}", self.writer.discarded);
        let _ = writeln!(s, "total_bytes={}", self.writer.total_bytes);
        let _ = writeln!(s, "correlated_bytes={}", self.writer.correlated_bytes);
        match self.correlation_rate() {
            Some(r) => writeln!(s, "correlation_rate={r:.6}"),
            None => writeln!(s, "correlation_rate=undefined"),
        }
        .ok();
        let _ = writeln!(s, "drops={}", self.drops());
        let _ = writeln!(s, "conserved={}", self.is_conserved());
        let _ = writeln!(s, "flushes={}", self.writer.flushes);
        let _ = writeln!(s, "max_write_delay={}", self.writer.max_write_delay);
        let st = &self.store;
        let _ = writeln!(s, "rotations={}", st.ip_name.rotations + st.name_cname.rotations);
        let _ = writeln!(s, "long_clears={}", st.ip_name.long_clears + st.name_cname.long_clears);
        let _ = writeln!(s, "memoizations={}", st.memoizations);
        let _ = writeln!(s, "memo_hits={}", st.name_cname.memo_hits);
        let _ = writeln!(s, "ip_lookups={}", st.ip_name.lookups);
        let _ = writeln!(s, "ip_hits={}", st.ip_name.hits());
        let _ = writeln!(s, "cname_lookups={}", st.name_cname.lookups);
        let _ = writeln!(s, "dns_ignored={}", st.ignored);
        let _ = writeln!(s, "peak_entries={}", self.peak_entries);
        if let Some(rss) = self.peak_rss_bytes {
            let _ = writeln!(s, "peak_rss_bytes={rss}");
        }
        let _ = writeln!(s, "elapsed_secs={:.3}", self.elapsed.as_secs_f64());
        s
    }
}

/// Resident set size from `/proc/self/statm`, where available.
pub fn current_rss_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}

enum Parsed {
    Dns(DnsRecord),
    Flow(FlowRecord),
}

impl Parsed {
    fn key(&self) -> (u64, u8) {
        match self {
            Parsed::Dns(r) => (r.ts, 0),
            Parsed::Flow(f) => (f.ts, 1),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Dns,
    Flow,
}

/// Where a parser sends its records.
enum Outlet {
    Sequencer(channel::Sender<Parsed>),
    DnsQueue(Producer<DnsRecord>),
    FlowQueue(Producer<FlowRecord>),
}

struct Stream {
    kind: Kind,
    stats: Arc<StreamStats>,
    records_stats: Arc<QueueStats>,
}

pub struct Engine {
    cfg: Arc<EngineConfig>,
    store: Arc<MapStore>,
    shutdown: Arc<AtomicBool>,
}

const SEQUENCER_CHANNEL: usize = 4096;

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let store = Arc::new(MapStore::new(&cfg));
        Ok(Engine {
            cfg: Arc::new(cfg),
            store,
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<MapStore> {
        &self.store
    }

    /// Setting the flag ends live sources; replay sources run to the end.
    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.shutdown)
    }

    /// Opens every source, runs until all of them end and every queue has
    /// drained, then returns the counters.
    pub fn run(
        &self,
        dns: &[SourceSpec],
        flows: &[SourceSpec],
        sink: Box<dyn RecordSink>,
    ) -> Result<RunReport, EngineError> {
        if dns.is_empty() || flows.is_empty() {
            return Err(EngineError::MissingSources);
        }
        let open = |spec: &SourceSpec| {
            StreamSource::open(spec).map_err(|source| EngineError::Source {
                spec: spec.clone(),
                source,
            })
        };
        let dns_sources = dns.iter().map(open).collect::<Result<Vec<_>, _>>()?;
        let flow_sources = flows.iter().map(open).collect::<Result<Vec<_>, _>>()?;
        let mode = if dns_sources.iter().chain(&flow_sources).any(StreamSource::is_live) {
            Mode::Live
        } else {
            Mode::Replay
        };
        let clock = match mode {
            Mode::Replay => Clock::RecordTime,
            Mode::Live => Clock::WallClock,
        };
        let cfg = &self.cfg;
        let started = Instant::now();
        let mut handles: Vec<JoinHandle<()>> = Vec::new();

        let shared = Arc::new(SharedSink::new(sink, cfg));
        let (write_tx, write_rx) = queue::bounded(cfg.queue_capacity);
        let mut writers = Vec::new();
        for _ in 0..cfg.write_workers {
            let (rx, shared) = (write_rx.clone(), Arc::clone(&shared));
            writers.push(thread::spawn(move || write_worker(rx, shared)));
        }
        drop(write_rx);

        let mut streams = Vec::new();
        let mut dns_producers = Vec::new();
        let mut flow_producers = Vec::new();
        for _ in &dns_sources {
            let (tx, rx) = queue::bounded::<DnsRecord>(cfg.queue_capacity);
            for _ in 0..cfg.fill_workers {
                let (rx, store) = (rx.clone(), Arc::clone(&self.store));
                handles.push(thread::spawn(move || fill_up_worker(rx, store, clock)));
            }
            dns_producers.push(tx);
        }
        for _ in &flow_sources {
            let (tx, rx) = queue::bounded::<FlowRecord>(cfg.queue_capacity);
            for _ in 0..cfg.lookup_workers {
                let (rx, store, cfg, out) =
                    (rx.clone(), Arc::clone(&self.store), Arc::clone(cfg), write_tx.clone());
                handles.push(thread::spawn(move || look_up_worker(rx, store, cfg, clock, out)));
            }
            flow_producers.push(tx);
        }
        drop(write_tx);

        let mut seq_inputs = Vec::new();
        let sources = dns_sources
            .into_iter()
            .map(|s| (Kind::Dns, s))
            .chain(flow_sources.into_iter().map(|s| (Kind::Flow, s)));
        let (mut di, mut fi) = (0, 0);
        let mut parsers = Vec::new();
        for (kind, source) in sources {
            let (records_stats, outlet) = match kind {
                Kind::Dns => {
                    let p = &dns_producers[di];
                    di += 1;
                    (Arc::clone(p.stats()), Outlet::DnsQueue(p.clone()))
                }
                Kind::Flow => {
                    let p = &flow_producers[fi];
                    fi += 1;
                    (Arc::clone(p.stats()), Outlet::FlowQueue(p.clone()))
                }
            };
            let outlet = match mode {
                Mode::Live => outlet,
                Mode::Replay => {
                    let (tx, rx) = channel::bounded(SEQUENCER_CHANNEL);
                    seq_inputs.push(rx);
                    Outlet::Sequencer(tx)
                }
            };
            let (buf_tx, buf_rx) = queue::bounded::<RawLine>(cfg.queue_capacity);
            let prefix = match kind {
                Kind::Dns => "dns",
                Kind::Flow => "flows",
            };
            let stats = Arc::new(StreamStats::new(
                format!("{prefix}:{}", source.spec()),
                Arc::clone(buf_tx.stats()),
                Arc::clone(&records_stats),
            ));
            let (rstats, shutdown) = (Arc::clone(&stats), Arc::clone(&self.shutdown));
            handles.push(thread::spawn(move || {
                if let Err(e) = source.run(&buf_tx, &rstats, &shutdown) {
                    rstats.set_error(e.to_string());
                }
            }));
            let pstats = Arc::clone(&stats);
            parsers.push(thread::spawn(move || parse_stream(kind, buf_rx, &pstats, outlet)));
            streams.push(Stream {
                kind,
                stats,
                records_stats,
            });
        }

        let mut sampler = Sampler::new(cfg.sample_interval);
        match mode {
            Mode::Replay => {
                let fill_stats: Vec<_> = dns_producers.iter().map(|p| Arc::clone(p.stats())).collect();
                let look_stats: Vec<_> = flow_producers.iter().map(|p| Arc::clone(p.stats())).collect();
                sequence(
                    seq_inputs,
                    &dns_producers,
                    &flow_producers,
                    &fill_stats,
                    &look_stats,
                    &self.store,
                    &mut sampler,
                );
                drop(dns_producers);
                drop(flow_producers);
                join_all(parsers);
            }
            Mode::Live => {
                drop(dns_producers);
                drop(flow_producers);
                let done = Arc::new(AtomicBool::new(false));
                let live_sampler = {
                    let (done, store, every) =
                        (Arc::clone(&done), Arc::clone(&self.store), cfg.sample_interval);
                    thread::spawn(move || {
                        let mut s = Sampler::new(every);
                        while !sleep_unless(&done, Duration::from_secs(every)) {
                            s.take(Clock::WallClock.now(0), &store);
                        }
                        s
                    })
                };
                join_all(parsers);
                done.store(true, Ordering::Relaxed);
                sampler = live_sampler.join().expect("sampler thread panicked");
            }
        }
        join_all(handles);
        join_all(writers);
        let end = match mode {
            Mode::Replay => sampler.last_time,
            Mode::Live => Clock::WallClock.now(0),
        };
        sampler.take(end, &self.store);

        let mut report = RunReport {
            mode,
            dns: Vec::new(),
            flows: Vec::new(),
            writer: shared.counts(),
            write_error: shared.error(),
            store: self.store.counters(),
            peak_entries: sampler.samples.iter().map(|s| s.1).max().unwrap_or(0),
            entry_samples: sampler.samples,
            peak_rss_bytes: sampler.peak_rss,
            elapsed: started.elapsed(),
        };
        for s in streams {
            debug_assert!(s.records_stats.is_idle());
            match s.kind {
                Kind::Dns => report.dns.push(s.stats.counts()),
                Kind::Flow => report.flows.push(s.stats.counts()),
            }
        }
        Ok(report)
    }
}

fn join_all<T>(handles: Vec<JoinHandle<T>>) {
    for h in handles {
        if let Err(panic) = h.join() {
            std::panic::resume_unwind(panic);
        }
    }
}

/// Sleeps for `total` in short steps; returns true as soon as `flag` is set.
fn sleep_unless(flag: &AtomicBool, total: Duration) -> bool {
    let step = Duration::from_millis(50);
    let deadline = Instant::now() + total;
    while Instant::now() < deadline {
        if flag.load(Ordering::Relaxed) {
            return true;
        }
        thread::sleep(step.min(deadline.saturating_duration_since(Instant::now())));
    }
    flag.load(Ordering::Relaxed)
}

struct Sampler {
    every: u64,
    next: Option<u64>,
    last_time: u64,
    samples: Vec<(u64, usize)>,
    peak_rss: Option<u64>,
}

impl Sampler {
    fn new(every: u64) -> Self {
        Sampler {
            every: every.max(1),
            next: None,
            last_time: 0,
            samples: Vec::new(),
            peak_rss: None,
        }
    }

    /// True when `ts` crosses the next sampling boundary.
    fn due(&mut self, ts: u64) -> bool {
        self.last_time = self.last_time.max(ts);
        match self.next {
            None => {
                self.next = Some((ts / self.every + 1) * self.every);
                false
            }
            Some(n) if ts >= n => {
                self.next = Some((ts / self.every + 1) * self.every);
                true
            }
            Some(_) => false,
        }
    }

    fn take(&mut self, at: u64, store: &MapStore) {
        self.samples.push((at, store.entry_count()));
        if let Some(rss) = current_rss_bytes() {
            self.peak_rss = Some(self.peak_rss.map_or(rss, |p| p.max(rss)));
        }
    }
}

fn parse_stream(kind: Kind, lines: Consumer<RawLine>, stats: &StreamStats, outlet: Outlet) {
    while let Some((line_no, line)) = lines.recv() {
        let parsed = match kind {
            Kind::Dns => match parse_dns_line(&line, line_no) {
                Ok(rec) if filter_valid_response(&rec) => Some(Parsed::Dns(rec)),
                Ok(_) => {
                    stats.add_filtered();
                    None
                }
                Err(_) => {
                    stats.add_parse_error();
                    None
                }
            },
            Kind::Flow => match parse_flow_line(&line, line_no) {
                Ok(f) => Some(Parsed::Flow(f)),
                Err(_) => {
                    stats.add_parse_error();
                    None
                }
            },
        };
        if let Some(p) = parsed {
            match (&outlet, p) {
                (Outlet::Sequencer(tx), p) => {
                    if tx.send(p).is_err() {
                        lines.complete(1);
                        return;
                    }
                }
                (Outlet::DnsQueue(q), Parsed::Dns(r)) => {
                    q.try_push(r);
                }
                (Outlet::FlowQueue(q), Parsed::Flow(f)) => {
                    q.try_push(f);
                }
                _ => unreachable!("parser outlet does not match its stream kind"),
            }
        }
        lines.complete(1);
    }
}

/// Merges parsed records from every replay stream in timestamp order and
/// feeds the worker queues. Input `i` maps to DNS queue `i` for the first
/// `dns.len()` inputs and to flow queue `i - dns.len()` after that.
fn sequence(
    inputs: Vec<channel::Receiver<Parsed>>,
    dns: &[Producer<DnsRecord>],
    flows: &[Producer<FlowRecord>],
    fill_stats: &[Arc<QueueStats>],
    look_stats: &[Arc<QueueStats>],
    store: &MapStore,
    sampler: &mut Sampler,
) {
    let mut heads: Vec<Option<Parsed>> = inputs.iter().map(|rx| rx.recv().ok()).collect();
    let mut last_kind: Option<Kind> = None;
    while let Some(i) = heads
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.as_ref().map(|p| (p.key(), i)))
        .min()
        .map(|(_, i)| i)
    {
        let item = heads[i].take().expect("selected head is present");
        heads[i] = inputs[i].recv().ok();
        let (ts, _) = item.key();
        if sampler.due(ts) {
            wait_idle(fill_stats.iter().chain(look_stats));
            sampler.take(ts, store);
        }
        let kind = match item {
            Parsed::Dns(_) => Kind::Dns,
            Parsed::Flow(_) => Kind::Flow,
        };
        if last_kind != Some(kind) {
            match kind {
                Kind::Dns => wait_idle(look_stats),
                Kind::Flow => wait_idle(fill_stats),
            }
            last_kind = Some(kind);
        }
        match item {
            Parsed::Dns(r) => {
                dns[i].try_push(r);
            }
            Parsed::Flow(f) => {
                flows[i - dns.len()].try_push(f);
            }
        }
    }
}
