//! Stream sources, line formats and the correlated-output writers.
//!
//! Line formats (tab-separated, LF-terminated, UTF-8):
//!
//! ```text
//! dns:    ts  rtype  qname  ttl  answer
//! flow:   ts  srcIP  dstIP  proto  srcPort  dstPort  packets  bytes
//! output: ts  srcIP  dstIP  bytes  packets  result  chain
//! ```
//!
//! In output lines `chain` is `;`-joined and `result` is empty for
//! uncorrelated flows.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::net::{IpAddr, SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam::channel::RecvTimeoutError;
use parking_lot::Mutex;
use thiserror::Error;

use crate::model::{CorrelatedRecord, EngineConfig, ModelError};
use crate::queue::{Consumer, Producer, QueueStats};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("invalid {field}: {value:?}")]
    InvalidField { field: &'static str, value: String },
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: u64,
    pub kind: ParseErrorKind,
}

impl ParseError {
    pub fn new(line: u64, kind: impl Into<ParseErrorKind>) -> Self {
        ParseError {
            line,
            kind: kind.into(),
        }
    }
}

/// Splits a line into exactly `expected` tab-separated fields.
pub fn split_fields(line: &str, expected: usize, line_no: u64) -> Result<Vec<&str>, ParseError> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != expected {
        return Err(ParseError::new(
            line_no,
            ParseErrorKind::FieldCount {
                expected,
                found: fields.len(),
            },
        ));
    }
    Ok(fields)
}

/// Parses one numeric or address field, naming it in the error.
pub fn parse_field<T: FromStr>(value: &str, field: &'static str, line: u64) -> Result<T, ParseError> {
    value.trim().parse().map_err(|_| {
        ParseError::new(
            line,
            ParseErrorKind::InvalidField {
                field,
                value: value.to_string(),
            },
        )
    })
}

/// Where a stream's lines come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceSpec {
    File(PathBuf),
    Stdin,
    /// Listen on this TCP port (0 picks a free one).
    Tcp(u16),
}

impl FromStr for SourceSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "-" {
            return Ok(SourceSpec::Stdin);
        }
        if let Some(port) = s.strip_prefix("tcp:") {
            return port
                .parse()
                .map(SourceSpec::Tcp)
                .map_err(|_| format!("invalid TCP port in {s:?}"));
        }
        if s.is_empty() {
            return Err("empty source path".into());
        }
        Ok(SourceSpec::File(PathBuf::from(s)))
    }
}

impl fmt::Display for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceSpec::File(p) => write!(f, "{}", p.display()),
            SourceSpec::Stdin => f.write_str("-"),
            SourceSpec::Tcp(port) => write!(f, "tcp:{port}"),
        }
    }
}

/// A raw line and its 1-based position in the stream.
pub type RawLine = (u64, String);

/// Per-stream accounting, shared by the reader, the parser and the queue.
#[derive(Debug)]
pub struct StreamStats {
    label: String,
    received: AtomicU64,
    parse_errors: AtomicU64,
    filtered: AtomicU64,
    buffer: Arc<QueueStats>,
    records: Arc<QueueStats>,
    error: Mutex<Option<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StreamCounts {
    pub label: String,
    /// Lines that arrived at the source.
    pub received: u64,
    /// Lines lost because the internal buffer was full.
    pub buffer_drops: u64,
    /// Lines accepted into the internal buffer.
    pub lines_read: u64,
    pub parse_errors: u64,
    /// Parsed records rejected by the response filter.
    pub filtered: u64,
    /// Records lost because the worker queue was full.
    pub queue_drops: u64,
    /// Records accepted by the worker queue.
    pub enqueued: u64,
    /// Records fully processed by workers.
    pub processed: u64,
    pub error: Option<String>,
}

impl StreamCounts {
    /// Every received line is accounted for exactly once.
    pub fn is_conserved(&self) -> bool {
        self.received
            == self.buffer_drops + self.parse_errors + self.filtered + self.queue_drops + self.enqueued
    }
}

impl StreamStats {
    pub fn new(label: impl Into<String>, buffer: Arc<QueueStats>, records: Arc<QueueStats>) -> Self {
        StreamStats {
            label: label.into(),
            received: AtomicU64::new(0),
            parse_errors: AtomicU64::new(0),
            filtered: AtomicU64::new(0),
            buffer,
            records,
            error: Mutex::new(None),
        }
    }

    pub fn add_received(&self) {
        self.received.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_parse_error(&self) {
        self.parse_errors.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_filtered(&self) {
        self.filtered.fetch_add(1, Ordering::Relaxed);
    }

    pub fn set_error(&self, msg: String) {
        self.error.lock().get_or_insert(msg);
    }

    pub fn counts(&self) -> StreamCounts {
        let buffer = self.buffer.counts();
        let records = self.records.counts();
        StreamCounts {
            label: self.label.clone(),
            received: self.received.load(Ordering::Relaxed),
            buffer_drops: buffer.dropped,
            lines_read: buffer.enqueued,
            parse_errors: self.parse_errors.load(Ordering::Relaxed),
            filtered: self.filtered.load(Ordering::Relaxed),
            queue_drops: records.dropped,
            enqueued: records.enqueued,
            processed: records.completed,
            error: self.error.lock().clone(),
        }
    }
}

enum Origin {
    Reader(Box<dyn BufRead + Send>),
    Listener(TcpListener),
}

/// An opened stream. Files and stdin are replayed at the pace of the
/// consumer; TCP lines arrive on their own schedule and are dropped when the
/// internal buffer is full.
pub struct StreamSource {
    spec: SourceSpec,
    origin: Origin,
}

impl StreamSource {
    pub fn open(spec: &SourceSpec) -> io::Result<Self> {
        let origin = match spec {
            SourceSpec::File(path) => {
                let file = File::open(path).map_err(|e| {
                    io::Error::new(e.kind(), format!("{}: {e}", path.display()))
                })?;
                Origin::Reader(Box::new(BufReader::with_capacity(1 << 16, file)))
            }
            SourceSpec::Stdin => Origin::Reader(Box::new(BufReader::new(io::stdin()))),
            SourceSpec::Tcp(port) => {
                let listener = TcpListener::bind(("0.0.0.0", *port))?;
                listener.set_nonblocking(true)?;
                Origin::Listener(listener)
            }
        };
        Ok(StreamSource {
            spec: spec.clone(),
            origin,
        })
    }

    pub fn spec(&self) -> &SourceSpec {
        &self.spec
    }

    pub fn is_live(&self) -> bool {
        matches!(self.origin, Origin::Listener(_))
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        match &self.origin {
            Origin::Listener(l) => l.local_addr().ok(),
            Origin::Reader(_) => None,
        }
    }

    /// Reads lines into `buffer` until end of stream or `shutdown`. Empty
    /// lines are skipped without being counted.
    pub fn run(
        self,
        buffer: &Producer<RawLine>,
        stats: &StreamStats,
        shutdown: &AtomicBool,
    ) -> io::Result<()> {
        match self.origin {
            Origin::Reader(reader) => read_replay(reader, buffer, stats),
            Origin::Listener(listener) => read_live(listener, buffer, stats, shutdown),
        }
    }
}

fn trim_line(bytes: &[u8]) -> &[u8] {
    let bytes = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    bytes.strip_suffix(b"\r").unwrap_or(bytes)
}

fn read_replay(
    mut reader: Box<dyn BufRead + Send>,
    buffer: &Producer<RawLine>,
    stats: &StreamStats,
) -> io::Result<()> {
    let mut line_no = 0u64;
    let mut buf = Vec::with_capacity(256);
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            return Ok(());
        }
        line_no += 1;
        let line = trim_line(&buf);
        if line.is_empty() {
            continue;
        }
        stats.add_received();
        let text = String::from_utf8_lossy(line).into_owned();
        if buffer.push((line_no, text)).is_err() {
            return Ok(());
        }
    }
}

fn read_live(
    listener: TcpListener,
    buffer: &Producer<RawLine>,
    stats: &StreamStats,
    shutdown: &AtomicBool,
) -> io::Result<()> {
    let stream = loop {
        if shutdown.load(Ordering::Relaxed) {
            return Ok(());
        }
        match listener.accept() {
            Ok((stream, _)) => break stream,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10))
            }
            Err(e) => return Err(e),
        }
    };
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_millis(100)))?;
    let mut reader = BufReader::with_capacity(1 << 16, stream);
    let mut line_no = 0u64;
    let mut buf = Vec::with_capacity(256);
    loop {
        match reader.read_until(b'\n', &mut buf) {
            Ok(n) => {
                let eof = n == 0;
                if !buf.is_empty() && (eof || buf.ends_with(b"\n")) {
                    line_no += 1;
                    let line = trim_line(&buf);
                    if !line.is_empty() {
                        stats.add_received();
                        buffer.try_push((line_no, String::from_utf8_lossy(line).into_owned()));
                    }
                    buf.clear();
                }
                if eof {
                    return Ok(());
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if shutdown.load(Ordering::Relaxed) {
                    return Ok(());
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}

/// Read access shared by in-memory correlated records and parsed output lines.
pub trait TrafficView {
    fn ts(&self) -> u64;
    fn src_ip(&self) -> IpAddr;
    fn dst_ip(&self) -> IpAddr;
    fn bytes(&self) -> u64;
    fn packets(&self) -> u64;
    fn result(&self) -> Option<&str>;
    fn chain(&self) -> &[String];
}

impl TrafficView for CorrelatedRecord {
    fn ts(&self) -> u64 {
        self.flow().ts
    }
    fn src_ip(&self) -> IpAddr {
        self.flow().src_ip
    }
    fn dst_ip(&self) -> IpAddr {
        self.flow().dst_ip
    }
    fn bytes(&self) -> u64 {
        self.flow().bytes
    }
    fn packets(&self) -> u64 {
        self.flow().packets
    }
    fn result(&self) -> Option<&str> {
        CorrelatedRecord::result(self)
    }
    fn chain(&self) -> &[String] {
        CorrelatedRecord::chain(self)
    }
}

/// One line of a correlated output file.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OutputRecord {
    pub ts: u64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub bytes: u64,
    pub packets: u64,
    pub chain: Vec<String>,
}

impl From<&CorrelatedRecord> for OutputRecord {
    fn from(rec: &CorrelatedRecord) -> Self {
        let flow = rec.flow();
        OutputRecord {
            ts: flow.ts,
            src_ip: flow.src_ip,
            dst_ip: flow.dst_ip,
            bytes: flow.bytes,
            packets: flow.packets,
            chain: rec.chain().to_vec(),
        }
    }
}

impl TrafficView for OutputRecord {
    fn ts(&self) -> u64 {
        self.ts
    }
    fn src_ip(&self) -> IpAddr {
        self.src_ip
    }
    fn dst_ip(&self) -> IpAddr {
        self.dst_ip
    }
    fn bytes(&self) -> u64 {
        self.bytes
    }
    fn packets(&self) -> u64 {
        self.packets
    }
    fn result(&self) -> Option<&str> {
        self.chain.last().map(String::as_str)
    }
    fn chain(&self) -> &[String] {
        &self.chain
    }
}

/// Appends the output line for `rec` (with trailing LF) to `out`.
pub fn format_output_line(rec: &CorrelatedRecord, out: &mut String) {
    let flow = rec.flow();
    let _ = write!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}\t",
        flow.ts,
        flow.src_ip,
        flow.dst_ip,
        flow.bytes,
        flow.packets,
        rec.result().unwrap_or("")
    );
    for (i, name) in rec.chain().iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        out.push_str(name);
    }
    out.push('\n');
}

pub fn parse_output_line(line: &str, line_no: u64) -> Result<OutputRecord, ParseError> {
    let f = split_fields(line, 7, line_no)?;
    let chain: Vec<String> = if f[6].is_empty() {
        Vec::new()
    } else {
        f[6].split(';').map(str::to_string).collect()
    };
    let result = (!f[5].is_empty()).then_some(f[5]);
    if chain.last().map(String::as_str) != result {
        return Err(ParseError::new(line_no, ModelError::ResultMismatch));
    }
    Ok(OutputRecord {
        ts: parse_field(f[0], "ts", line_no)?,
        src_ip: parse_field(f[1], "srcIP", line_no)?,
        dst_ip: parse_field(f[2], "dstIP", line_no)?,
        bytes: parse_field(f[3], "bytes", line_no)?,
        packets: parse_field(f[4], "packets", line_no)?,
        chain,
    })
}

pub fn output_file_name(epoch: u64) -> String {
    format!("correlated-{epoch}.tsv")
}

fn output_file_epoch(path: &Path) -> Option<u64> {
    path.file_name()?
        .to_str()?
        .strip_prefix("correlated-")?
        .strip_suffix(".tsv")?
        .parse()
        .ok()
}

/// Output files in `dir`, ordered by epoch.
pub fn output_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| output_file_epoch(&p).map(|epoch| (epoch, p)))
        .collect();
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

pub fn read_output_file(path: &Path) -> io::Result<Vec<OutputRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = parse_output_line(&line, i as u64 + 1).map_err(|e| {
            io::Error::new(ErrorKind::InvalidData, format!("{}: {e}", path.display()))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Every record from every output file in `dir`, files in epoch order.
pub fn read_output_dir(dir: &Path) -> io::Result<Vec<OutputRecord>> {
    let mut out = Vec::new();
    for path in output_files(dir)? {
        out.extend(read_output_file(&path)?);
    }
    Ok(out)
}

/// Destination of correlated records. Writes may be buffered until `flush`.
pub trait RecordSink: Send {
    fn write(&mut self, rec: &CorrelatedRecord) -> io::Result<()>;
    fn flush(&mut self) -> io::Result<()>;
}

/// Appends records to `correlated-<epoch>.tsv` files in a directory, one
/// file per `roll_interval` seconds of record time.
pub struct DirSink {
    dir: PathBuf,
    roll_interval: u64,
    current: Option<(u64, BufWriter<File>)>,
    files: BTreeSet<PathBuf>,
    line: String,
}

impl DirSink {
    pub fn create(dir: impl Into<PathBuf>, roll_interval: u64) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(DirSink {
            dir,
            roll_interval: roll_interval.max(1),
            current: None,
            files: BTreeSet::new(),
            line: String::with_capacity(256),
        })
    }

    pub fn files(&self) -> &BTreeSet<PathBuf> {
        &self.files
    }

    fn writer_for(&mut self, epoch: u64) -> io::Result<&mut BufWriter<File>> {
        if self.current.as_ref().map(|(e, _)| *e) != Some(epoch) {
            if let Some((_, mut w)) = self.current.take() {
                w.flush()?;
            }
            let path = self.dir.join(output_file_name(epoch));
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            self.files.insert(path);
            self.current = Some((epoch, BufWriter::with_capacity(1 << 16, file)));
        }
        Ok(&mut self.current.as_mut().expect("writer just opened").1)
    }
}

impl RecordSink for DirSink {
    fn write(&mut self, rec: &CorrelatedRecord) -> io::Result<()> {
        let ts = rec.flow().ts;
        let epoch = ts - ts % self.roll_interval;
        let mut line = std::mem::take(&mut self.line);
        line.clear();
        format_output_line(rec, &mut line);
        let res = self.writer_for(epoch).and_then(|w| w.write_all(line.as_bytes()));
        self.line = line;
        res
    }

    fn flush(&mut self) -> io::Result<()> {
        match &mut self.current {
            Some((_, w)) => w.flush(),
            None => Ok(()),
        }
    }
}

/// Collects records in memory; clone the handle before handing the sink to
/// the engine to read them back afterwards.
#[derive(Clone, Default)]
pub struct MemorySink {
    records: Arc<Mutex<Vec<CorrelatedRecord>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<CorrelatedRecord> {
        self.records.lock().clone()
    }

    pub fn take(&self) -> Vec<CorrelatedRecord> {
        std::mem::take(&mut self.records.lock())
    }
}

impl RecordSink for MemorySink {
    fn write(&mut self, rec: &CorrelatedRecord) -> io::Result<()> {
        self.records.lock().push(rec.clone());
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriterCounts {
    pub records: u64,
    pub total_bytes: u64,
    pub correlated_bytes: u64,
    pub flushes: u64,
    /// Largest gap, in logical seconds, between a record's timestamp and the
    /// writer clock when the record was flushed.
    pub max_write_delay: u64,
    /// Records thrown away after a fatal sink error.
    pub discarded: u64,
}

struct SinkState {
    sink: Box<dyn RecordSink>,
    batch: usize,
    interval: u64,
    pending: usize,
    oldest_pending: u64,
    clock: u64,
    failed: bool,
    counts: WriterCounts,
}

impl SinkState {
    fn accept(&mut self, rec: &CorrelatedRecord) -> io::Result<()> {
        let ts = rec.flow().ts;
        if self.pending > 0 && ts >= self.oldest_pending.saturating_add(self.interval) {
            self.flush()?;
        }
        self.sink.write(rec)?;
        if self.pending == 0 || ts < self.oldest_pending {
            self.oldest_pending = ts;
        }
        self.pending += 1;
        self.clock = self.clock.max(ts);
        self.counts.records += 1;
        self.counts.total_bytes += rec.flow().bytes;
        if rec.is_correlated() {
            self.counts.correlated_bytes += rec.flow().bytes;
        }
        if self.pending >= self.batch {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        if self.pending == 0 {
            return Ok(());
        }
        self.sink.flush()?;
        let delay = self.clock.saturating_sub(self.oldest_pending);
        self.counts.max_write_delay = self.counts.max_write_delay.max(delay);
        self.counts.flushes += 1;
        self.pending = 0;
        Ok(())
    }
}

/// A sink shared by the write-worker pool. Workers take turns: the one
/// holding the sink dequeues and writes a run of records, so lines within a
/// file are in dequeue order.
pub struct SharedSink {
    state: Mutex<SinkState>,
    error: Mutex<Option<String>>,
}

impl SharedSink {
    pub fn new(sink: Box<dyn RecordSink>, cfg: &EngineConfig) -> Self {
        SharedSink {
            state: Mutex::new(SinkState {
                sink,
                batch: cfg.flush_batch.max(1),
                interval: cfg.flush_interval,
                pending: 0,
                oldest_pending: 0,
                clock: 0,
                failed: false,
                counts: WriterCounts::default(),
            }),
            error: Mutex::new(None),
        }
    }

    pub fn counts(&self) -> WriterCounts {
        self.state.lock().counts
    }

    pub fn error(&self) -> Option<String> {
        self.error.lock().clone()
    }

    fn fail(&self, state: &mut SinkState, err: io::Error) {
        state.failed = true;
        self.error.lock().get_or_insert(err.to_string());
    }
}

const WRITER_IDLE: Duration = Duration::from_millis(200);
const WRITER_RUN: usize = 256;

/// Drains `queue` into `shared` until every producer is gone.
pub fn write_worker(queue: Consumer<CorrelatedRecord>, shared: Arc<SharedSink>) {
    loop {
        let mut state = shared.state.lock();
        match queue.recv_timeout(WRITER_IDLE) {
            Ok(first) => {
                let mut taken = 1u64;
                let mut next = Some(first);
                while let Some(rec) = next.take() {
                    if state.failed {
                        state.counts.discarded += 1;
                    } else if let Err(e) = state.accept(&rec) {
                        shared.fail(&mut state, e);
                    }
                    if (taken as usize) < WRITER_RUN {
                        next = queue.try_recv();
                        taken += next.is_some() as u64;
                    }
                }
                queue.complete(taken);
            }
            Err(RecvTimeoutError::Timeout) => {
                if !state.failed {
                    if let Err(e) = state.flush() {
                        shared.fail(&mut state, e);
                    }
                }
            }
            Err(RecvTimeoutError::Disconnected) => {
                if !state.failed {
                    if let Err(e) = state.flush() {
                        shared.fail(&mut state, e);
                    }
                }
                return;
            }
        }
    }
}
