//! Bounded MPMC queues with drop and completion accounting.
//!
//! `try_push` discards the item when the queue is full and counts the drop;
//! `push` blocks instead. Consumers call [`Consumer::complete`] once an item
//! has been fully processed so producers can wait for the queue to go idle.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam::channel::{self, Receiver, RecvTimeoutError, Sender, TrySendError};
use crossbeam::utils::Backoff;

use crate::model::{CorrelatedRecord, DnsRecord, FlowRecord};

#[derive(Debug, Default)]
pub struct QueueStats {
    capacity: usize,
    enqueued: AtomicU64,
    dropped: AtomicU64,
    completed: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueCounts {
    pub capacity: usize,
    pub enqueued: u64,
    pub dropped: u64,
    pub completed: u64,
}

impl QueueStats {
    pub fn counts(&self) -> QueueCounts {
        QueueCounts {
            capacity: self.capacity,
            enqueued: self.enqueued.load(Ordering::Acquire),
            dropped: self.dropped.load(Ordering::Relaxed),
            completed: self.completed.load(Ordering::Acquire),
        }
    }

    /// Every enqueued item has been completed.
    pub fn is_idle(&self) -> bool {
        self.completed.load(Ordering::Acquire) == self.enqueued.load(Ordering::Acquire)
    }
}

/// Spins, then yields, until every queue in `queues` is idle.
pub fn wait_idle<'a>(queues: impl IntoIterator<Item = &'a Arc<QueueStats>> + Clone) {
    let backoff = Backoff::new();
    while !queues.clone().into_iter().all(|q| q.is_idle()) {
        if backoff.is_completed() {
            std::thread::yield_now();
        } else {
            backoff.snooze();
        }
    }
}

pub struct Producer<T> {
    tx: Sender<T>,
    stats: Arc<QueueStats>,
}

impl<T> Clone for Producer<T> {
    fn clone(&self) -> Self {
        Producer {
            tx: self.tx.clone(),
            stats: Arc::clone(&self.stats),
        }
    }
}

pub struct Consumer<T> {
    rx: Receiver<T>,
    stats: Arc<QueueStats>,
}

impl<T> Clone for Consumer<T> {
    fn clone(&self) -> Self {
        Consumer {
            rx: self.rx.clone(),
            stats: Arc::clone(&self.stats),
        }
    }
}

/// Creates a queue holding at most `capacity` items.
pub fn bounded<T>(capacity: usize) -> (Producer<T>, Consumer<T>) {
    let (tx, rx) = channel::bounded(capacity);
    let stats = Arc::new(QueueStats {
        capacity,
        ..QueueStats::default()
    });
    (
        Producer {
            tx,
            stats: Arc::clone(&stats),
        },
        Consumer { rx, stats },
    )
}

impl<T> Producer<T> {
    /// Enqueues without blocking. A full queue drops `item` and counts it;
    /// returns whether the item was accepted.
    pub fn try_push(&self, item: T) -> bool {
        // Count before the send so a fast consumer never completes an item
        // that is not yet counted as enqueued.
        self.stats.enqueued.fetch_add(1, Ordering::AcqRel);
        match self.tx.try_send(item) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                self.stats.enqueued.fetch_sub(1, Ordering::AcqRel);
                self.stats.dropped.fetch_add(1, Ordering::Relaxed);
                false
            }
        }
    }

    /// Enqueues, waiting for space. Fails only when every consumer is gone.
    pub fn push(&self, item: T) -> Result<(), T> {
        self.stats.enqueued.fetch_add(1, Ordering::AcqRel);
        self.tx.send(item).map_err(|e| {
            self.stats.enqueued.fetch_sub(1, Ordering::AcqRel);
            e.into_inner()
        })
    }

    pub fn stats(&self) -> &Arc<QueueStats> {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx.is_empty()
    }
}

impl<T> Consumer<T> {
    /// Blocks for the next item; `None` once all producers are gone and the
    /// queue is drained.
    pub fn recv(&self) -> Option<T> {
        self.rx.recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<T, RecvTimeoutError> {
        self.rx.recv_timeout(timeout)
    }

    pub fn try_recv(&self) -> Option<T> {
        self.rx.try_recv().ok()
    }

    /// Marks `n` previously received items as fully processed.
    pub fn complete(&self, n: u64) {
        self.stats.completed.fetch_add(n, Ordering::AcqRel);
    }

    pub fn stats(&self) -> &Arc<QueueStats> {
        &self.stats
    }
}

pub type FillUpQueue = (Producer<DnsRecord>, Consumer<DnsRecord>);
pub type LookUpQueue = (Producer<FlowRecord>, Consumer<FlowRecord>);
pub type WriteQueue = (Producer<CorrelatedRecord>, Consumer<CorrelatedRecord>);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burst_into_full_queue_counts_drops() {
        let (tx, _rx) = bounded::<u32>(10);
        let accepted = (0..1000).filter(|&i| tx.try_push(i)).count();
        let c = tx.stats().counts();
        assert_eq!(accepted, 10);
        assert_eq!(c.dropped, 990);
        assert_eq!(c.enqueued, 10);
    }

    #[test]
    fn fifo_per_producer_and_idle_tracking() {
        let (tx, rx) = bounded::<u32>(8);
        for i in 0..5 {
            assert!(tx.try_push(i));
        }
        assert!(!tx.stats().is_idle());
        let got: Vec<_> = (0..5).map(|_| rx.recv().unwrap()).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
        rx.complete(5);
        assert!(tx.stats().is_idle());
        drop(tx);
        assert_eq!(rx.recv(), None);
    }

    #[test]
    fn push_blocks_until_space() {
        let (tx, rx) = bounded::<u32>(1);
        tx.push(1).unwrap();
        let h = std::thread::spawn(move || tx.push(2));
        assert_eq!(rx.recv(), Some(1));
        assert_eq!(rx.recv(), Some(2));
        h.join().unwrap().unwrap();
        assert_eq!(rx.stats().counts().dropped, 0);
    }
}
