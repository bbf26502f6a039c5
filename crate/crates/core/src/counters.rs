//! Operation counters for the complexity model.
//!
//! Every network forward pass, every vector-Jacobian product and every
//! retained activation tape is charged here. Counters are atomics so that
//! segment evaluations running on different threads can share one instance.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Debug, Default)]
pub struct OpCounters {
    forward: AtomicU64,
    vjp: AtomicU64,
    live_tapes: AtomicU64,
    peak_live_tapes: AtomicU64,
}

/// A point-in-time copy of [`OpCounters`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub n_forward: u64,
    pub n_vjp: u64,
    pub peak_live_tapes: u64,
}

impl OpCounters {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn charge_forward(&self) {
        self.forward.fetch_add(1, Ordering::Relaxed);
    }

    pub fn charge_vjp(&self) {
        self.vjp.fetch_add(1, Ordering::Relaxed);
    }

    pub fn n_forward(&self) -> u64 {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn n_vjp(&self) -> u64 {
        self.vjp.load(Ordering::Relaxed)
    }

    pub fn live_tapes(&self) -> u64 {
        self.live_tapes.load(Ordering::Acquire)
    }

    pub fn peak_live_tapes(&self) -> u64 {
        self.peak_live_tapes.load(Ordering::Acquire)
    }

    /// Restart peak tracking from the number of tapes alive right now.
    pub fn reset_peak(&self) {
        self.peak_live_tapes
            .store(self.live_tapes(), Ordering::Release);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            n_forward: self.n_forward(),
            n_vjp: self.n_vjp(),
            peak_live_tapes: self.peak_live_tapes(),
        }
    }

    fn tape_created(&self) {
        let live = self.live_tapes.fetch_add(1, Ordering::AcqRel) + 1;
        self.peak_live_tapes.fetch_max(live, Ordering::AcqRel);
    }

    fn tape_dropped(&self) {
        self.live_tapes.fetch_sub(1, Ordering::AcqRel);
    }
}

impl CounterSnapshot {
    /// Forward and VJP counts accumulated since `earlier`; the peak is taken
    /// from `self` as-is.
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            n_forward: self.n_forward - earlier.n_forward,
            n_vjp: self.n_vjp - earlier.n_vjp,
            peak_live_tapes: self.peak_live_tapes,
        }
    }
}

/// Keeps one activation set registered as live until dropped.
#[derive(Debug)]
pub(crate) struct LiveTape {
    counters: Arc<OpCounters>,
}

impl LiveTape {
    pub(crate) fn register(counters: &Arc<OpCounters>) -> Self {
        counters.tape_created();
        Self {
            counters: Arc::clone(counters),
        }
    }

    pub(crate) fn owner(&self) -> &Arc<OpCounters> {
        &self.counters
    }
}

impl Drop for LiveTape {
    fn drop(&mut self) {
        self.counters.tape_dropped();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_maximum_simultaneous_tapes() {
        let c = OpCounters::new();
        {
            let _a = LiveTape::register(&c);
            let _b = LiveTape::register(&c);
            assert_eq!(c.live_tapes(), 2);
        }
        let _c = LiveTape::register(&c);
        assert_eq!(c.live_tapes(), 1);
        assert_eq!(c.peak_live_tapes(), 2);
        c.reset_peak();
        assert_eq!(c.peak_live_tapes(), 1);
    }

    #[test]
    fn concurrent_charges_accumulate() {
        let c = OpCounters::new();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..1000 {
                        c.charge_forward();
                        c.charge_vjp();
                    }
                });
            }
        });
        assert_eq!(c.n_forward(), 8000);
        assert_eq!(c.n_vjp(), 8000);
    }
}
