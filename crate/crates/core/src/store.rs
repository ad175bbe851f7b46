//! Sharded IP→NAME and NAME→CNAME maps with active/inactive/long tiers.
//!
//! Both families expire entries in bulk: every `interval` logical seconds the
//! active tier of each shard becomes the inactive tier and a fresh active tier
//! starts. An entry therefore survives between one and two intervals. Records
//! whose TTL exceeds the interval skip rotation and live in the long tier.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::model::{DnsRecord, EngineConfig, RecordType, Variant};

/// Shard index for `key` in `[0, num_split)`. FNV-1a over the key bytes.
pub fn label(key: &str, num_split: usize) -> usize {
    debug_assert!(num_split > 0);
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    (hash % num_split as u64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Active,
    Inactive,
    Long,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Active => "active",
            Tier::Inactive => "inactive",
            Tier::Long => "long",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FamilyKind {
    IpName,
    NameCname,
}

#[derive(Debug, Clone)]
struct Entry {
    value: Arc<str>,
    expires: Option<u64>,
    memo: bool,
}

impl Entry {
    fn expired(&self, now: u64) -> bool {
        self.expires.is_some_and(|exp| exp < now)
    }
}

type Map = HashMap<Box<str>, Entry>;

#[derive(Default)]
struct Tiers {
    active: Map,
    inactive: Map,
    long: Map,
}

impl Tiers {
    fn len(&self) -> usize {
        self.active.len() + self.inactive.len() + self.long.len()
    }

    fn maps_mut(&mut self) -> [&mut Map; 3] {
        [&mut self.active, &mut self.inactive, &mut self.long]
    }
}

/// A successful lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hit {
    pub value: Arc<str>,
    pub tier: Tier,
    /// The entry was written by chain memoization rather than a DNS record.
    pub memo: bool,
    /// Absolute expiry, only tracked by the exact-TTL variant.
    pub expires: Option<u64>,
}

#[derive(Debug, Default)]
struct ClearUpClock {
    last_clear_up: Option<u64>,
    last_long_clear: Option<u64>,
    last_sweep: Option<u64>,
}

#[derive(Debug, Default)]
struct FamilyCounters {
    inserts_active: AtomicU64,
    inserts_long: AtomicU64,
    lookups: AtomicU64,
    hits_active: AtomicU64,
    hits_inactive: AtomicU64,
    hits_long: AtomicU64,
    memo_hits: AtomicU64,
    rotations: AtomicU64,
    long_clears: AtomicU64,
    sweeps: AtomicU64,
    evictions: AtomicU64,
}

/// Point-in-time copy of one family's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FamilyCounts {
    pub inserts_active: u64,
    pub inserts_long: u64,
    pub lookups: u64,
    pub hits_active: u64,
    pub hits_inactive: u64,
    pub hits_long: u64,
    pub memo_hits: u64,
    pub rotations: u64,
    pub long_clears: u64,
    pub sweeps: u64,
    pub evictions: u64,
}

impl FamilyCounts {
    pub fn hits(&self) -> u64 {
        self.hits_active + self.hits_inactive + self.hits_long
    }
}

/// One map family: `num_split` shards, each holding the three tiers.
pub struct MapFamily {
    kind: FamilyKind,
    variant: Variant,
    interval: u64,
    long_interval: Option<u64>,
    sweep_interval: u64,
    shards: Box<[RwLock<Tiers>]>,
    clock: RwLock<ClearUpClock>,
    counters: FamilyCounters,
}

impl MapFamily {
    pub fn new(kind: FamilyKind, interval: u64, cfg: &EngineConfig) -> Self {
        let shards = (0..cfg.effective_num_split())
            .map(|_| RwLock::new(Tiers::default()))
            .collect();
        MapFamily {
            kind,
            variant: cfg.variant,
            interval,
            long_interval: cfg.long_clear_up_interval,
            sweep_interval: (cfg.a_clear_up_interval / 10).max(1),
            shards,
            clock: RwLock::new(ClearUpClock::default()),
            counters: FamilyCounters::default(),
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn num_split(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_of(&self, key: &str) -> usize {
        label(key, self.shards.len())
    }

    pub fn last_clear_up(&self) -> Option<u64> {
        self.clock.read().last_clear_up
    }

    fn rotates(&self) -> bool {
        !matches!(self.variant, Variant::NoClearUp | Variant::ExactTtl)
    }

    fn elapsed(since: Option<u64>, now: u64, interval: u64) -> bool {
        since.is_some_and(|last| now >= last && now - last >= interval)
    }

    fn maintenance_due(&self, clock: &ClearUpClock, now: u64) -> bool {
        if clock.last_clear_up.is_none() {
            return true;
        }
        match self.variant {
            Variant::NoClearUp => false,
            Variant::ExactTtl => Self::elapsed(clock.last_sweep, now, self.sweep_interval),
            _ => {
                Self::elapsed(clock.last_clear_up, now, self.interval)
                    || self
                        .long_interval
                        .is_some_and(|li| Self::elapsed(clock.last_long_clear, now, li))
            }
        }
    }

    /// Runs every clear-up that is due at `now`. The caller holds the clock
    /// write lock, so each interval boundary is handled exactly once.
    fn maintain(&self, clock: &mut ClearUpClock, now: u64) {
        if clock.last_clear_up.is_none() {
            clock.last_clear_up = Some(now);
            clock.last_long_clear = Some(now);
            clock.last_sweep = Some(now);
            return;
        }
        match self.variant {
            Variant::NoClearUp => {}
            Variant::ExactTtl => {
                if Self::elapsed(clock.last_sweep, now, self.sweep_interval) {
                    self.sweep(now);
                    clock.last_sweep = Some(now);
                }
            }
            _ => {
                if Self::elapsed(clock.last_clear_up, now, self.interval) {
                    self.rotate_shards();
                    clock.last_clear_up = Some(now);
                }
                if let Some(li) = self.long_interval {
                    if Self::elapsed(clock.last_long_clear, now, li) {
                        self.clear_long();
                        clock.last_long_clear = Some(now);
                    }
                }
            }
        }
    }

    /// Performs the variant's rotation at `now` regardless of whether the
    /// interval has elapsed, and restarts the interval.
    pub fn rotate(&self, now: u64) {
        let mut clock = self.clock.write();
        if self.rotates() {
            self.rotate_shards();
        }
        clock.last_clear_up = Some(now);
    }

    fn rotate_shards(&self) {
        for shard in self.shards.iter() {
            let discarded = {
                let mut tiers = shard.write();
                if self.variant == Variant::NoRotation {
                    std::mem::take(&mut tiers.active)
                } else {
                    let snapshot = std::mem::take(&mut tiers.active);
                    std::mem::replace(&mut tiers.inactive, snapshot)
                }
            };
            drop(discarded);
        }
        self.counters.rotations.fetch_add(1, Ordering::Relaxed);
    }

    fn clear_long(&self) {
        for shard in self.shards.iter() {
            let discarded = std::mem::take(&mut shard.write().long);
            drop(discarded);
        }
        self.counters.long_clears.fetch_add(1, Ordering::Relaxed);
    }

    fn sweep(&self, now: u64) {
        let mut evicted = 0u64;
        for shard in self.shards.iter() {
            let mut tiers = shard.write();
            for map in tiers.maps_mut() {
                let before = map.len();
                map.retain(|_, e| !e.expired(now));
                evicted += (before - map.len()) as u64;
            }
        }
        self.counters.sweeps.fetch_add(1, Ordering::Relaxed);
        self.counters.evictions.fetch_add(evicted, Ordering::Relaxed);
    }

    fn destination(&self, ttl: u32) -> Tier {
        match self.variant {
            Variant::NoLongMaps | Variant::ExactTtl => Tier::Active,
            _ if u64::from(ttl) > self.interval => Tier::Long,
            _ => Tier::Active,
        }
    }

    /// Inserts `key → value` observed at logical time `now`, running any
    /// due clear-up first. Returns the tier written.
    pub fn insert(&self, key: &str, value: &str, ttl: u32, now: u64) -> Tier {
        {
            let clock = self.clock.read();
            if !self.maintenance_due(&clock, now) {
                return self.put(key, value, ttl, now);
            }
        }
        let mut clock = self.clock.write();
        if self.maintenance_due(&clock, now) {
            self.maintain(&mut clock, now);
        }
        self.put(key, value, ttl, now)
    }

    fn put(&self, key: &str, value: &str, ttl: u32, now: u64) -> Tier {
        let tier = self.destination(ttl);
        let entry = Entry {
            value: Arc::from(value),
            expires: (self.variant == Variant::ExactTtl).then(|| now + u64::from(ttl)),
            memo: false,
        };
        let mut tiers = self.shards[self.shard_of(key)].write();
        match tier {
            Tier::Long => {
                // Older short-lived values would otherwise shadow this one.
                tiers.active.remove(key);
                tiers.inactive.remove(key);
                tiers.long.insert(key.into(), entry);
                self.counters.inserts_long.fetch_add(1, Ordering::Relaxed);
            }
            _ => {
                tiers.active.insert(key.into(), entry);
                self.counters.inserts_active.fetch_add(1, Ordering::Relaxed);
            }
        }
        tier
    }

    fn put_memo(&self, key: &str, value: &str, expires: Option<u64>) {
        let entry = Entry {
            value: Arc::from(value),
            expires,
            memo: true,
        };
        self.shards[self.shard_of(key)]
            .write()
            .active
            .insert(key.into(), entry);
    }

    /// First hit in tier order active → inactive → long. Under the exact-TTL
    /// variant an entry that expired before `now` counts as absent and is
    /// removed.
    pub fn deep_lookup(&self, key: &str, now: u64) -> Option<Hit> {
        self.counters.lookups.fetch_add(1, Ordering::Relaxed);
        let shard = &self.shards[self.shard_of(key)];
        let mut stale = false;
        {
            let tiers = shard.read();
            let tiered = [
                (Tier::Active, &tiers.active),
                (Tier::Inactive, &tiers.inactive),
                (Tier::Long, &tiers.long),
            ];
            for (tier, map) in tiered {
                let Some(entry) = map.get(key) else { continue };
                if entry.expired(now) {
                    stale = true;
                    continue;
                }
                let counter = match tier {
                    Tier::Active => &self.counters.hits_active,
                    Tier::Inactive => &self.counters.hits_inactive,
                    Tier::Long => &self.counters.hits_long,
                };
                counter.fetch_add(1, Ordering::Relaxed);
                if entry.memo {
                    self.counters.memo_hits.fetch_add(1, Ordering::Relaxed);
                }
                return Some(Hit {
                    value: entry.value.clone(),
                    tier,
                    memo: entry.memo,
                    expires: entry.expires,
                });
            }
        }
        if stale {
            let mut tiers = shard.write();
            let mut evicted = 0;
            for map in tiers.maps_mut() {
                if map.get(key).is_some_and(|e| e.expired(now)) {
                    map.remove(key);
                    evicted += 1;
                }
            }
            self.counters.evictions.fetch_add(evicted, Ordering::Relaxed);
        }
        None
    }

    /// Total entries across all shards and tiers.
    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.read().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries of one tier of one shard, sorted by key.
    pub fn tier_entries(&self, shard: usize, tier: Tier) -> Vec<(String, String)> {
        let tiers = self.shards[shard].read();
        let map = match tier {
            Tier::Active => &tiers.active,
            Tier::Inactive => &tiers.inactive,
            Tier::Long => &tiers.long,
        };
        let mut out: Vec<_> = map
            .iter()
            .map(|(k, e)| (k.to_string(), e.value.to_string()))
            .collect();
        out.sort();
        out
    }

    /// Every `(tier, key, value)` triple, sorted. Shard placement is omitted
    /// so layouts with different shard counts compare equal.
    pub fn snapshot(&self) -> Vec<(Tier, String, String)> {
        let mut out = Vec::new();
        for shard in 0..self.shards.len() {
            for tier in [Tier::Active, Tier::Inactive, Tier::Long] {
                out.extend(
                    self.tier_entries(shard, tier)
                        .into_iter()
                        .map(|(k, v)| (tier, k, v)),
                );
            }
        }
        out.sort();
        out
    }

    pub fn counts(&self) -> FamilyCounts {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        FamilyCounts {
            inserts_active: get(&c.inserts_active),
            inserts_long: get(&c.inserts_long),
            lookups: get(&c.lookups),
            hits_active: get(&c.hits_active),
            hits_inactive: get(&c.hits_inactive),
            hits_long: get(&c.hits_long),
            memo_hits: get(&c.memo_hits),
            rotations: get(&c.rotations),
            long_clears: get(&c.long_clears),
            sweeps: get(&c.sweeps),
            evictions: get(&c.evictions),
        }
    }
}

/// Counter snapshot for the whole store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreCounters {
    pub ip_name: FamilyCounts,
    pub name_cname: FamilyCounts,
    pub memoizations: u64,
    pub ignored: u64,
}

/// Both map families plus store-wide counters.
pub struct MapStore {
    ip_name: MapFamily,
    name_cname: MapFamily,
    variant: Variant,
    memoizations: AtomicU64,
    ignored: AtomicU64,
}

impl MapStore {
    pub fn new(cfg: &EngineConfig) -> Self {
        MapStore {
            ip_name: MapFamily::new(FamilyKind::IpName, cfg.a_clear_up_interval, cfg),
            name_cname: MapFamily::new(FamilyKind::NameCname, cfg.c_clear_up_interval, cfg),
            variant: cfg.variant,
            memoizations: AtomicU64::new(0),
            ignored: AtomicU64::new(0),
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn ip_name(&self) -> &MapFamily {
        &self.ip_name
    }

    pub fn name_cname(&self) -> &MapFamily {
        &self.name_cname
    }

    pub fn family(&self, kind: FamilyKind) -> &MapFamily {
        match kind {
            FamilyKind::IpName => &self.ip_name,
            FamilyKind::NameCname => &self.name_cname,
        }
    }

    /// Fills the store with `rec`, using the record's own timestamp as the
    /// logical clock.
    pub fn fill(&self, rec: &DnsRecord) -> Option<Tier> {
        self.fill_at(rec, rec.ts)
    }

    /// Fills the store with `rec` at logical time `now`. Keys are answers,
    /// values are query names. Records of other types are counted and
    /// ignored.
    pub fn fill_at(&self, rec: &DnsRecord, now: u64) -> Option<Tier> {
        let family = match rec.rtype {
            RecordType::A | RecordType::Aaaa => &self.ip_name,
            RecordType::Cname => &self.name_cname,
            RecordType::Other => {
                self.ignored.fetch_add(1, Ordering::Relaxed);
                return None;
            }
        };
        Some(family.insert(&rec.answer, &rec.qname, rec.ttl, now))
    }

    /// Records a multi-hop resolution `first → result` as a single NAME→CNAME
    /// entry in the active tier.
    pub fn memoize_chain(&self, first: &str, result: &str, expires: Option<u64>) {
        self.name_cname.put_memo(first, result, expires);
        self.memoizations.fetch_add(1, Ordering::Relaxed);
    }

    pub fn entry_count(&self) -> usize {
        self.ip_name.len() + self.name_cname.len()
    }

    pub fn counters(&self) -> StoreCounters {
        StoreCounters {
            ip_name: self.ip_name.counts(),
            name_cname: self.name_cname.counts(),
            memoizations: self.memoizations.load(Ordering::Relaxed),
            ignored: self.ignored.load(Ordering::Relaxed),
        }
    }
}
