//! Per-thread call counters for the training-only transforms.
//!
//! Evaluation code snapshots these before and after scoring a set of bags;
//! any difference means sampling or augmentation ran on the inference path.

use std::cell::Cell;

thread_local! {
    static SAMPLING_CALLS: Cell<u64> = const { Cell::new(0) };
    static AUGMENT_CALLS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub sampling: u64,
    pub augmentation: u64,
}

impl Counters {
    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            sampling: self.sampling - earlier.sampling,
            augmentation: self.augmentation - earlier.augmentation,
        }
    }

    pub fn is_zero(self) -> bool {
        self.sampling == 0 && self.augmentation == 0
    }
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, rhs: Counters) {
        self.sampling += rhs.sampling;
        self.augmentation += rhs.augmentation;
    }
}

pub fn snapshot() -> Counters {
    Counters {
        sampling: SAMPLING_CALLS.with(Cell::get),
        augmentation: AUGMENT_CALLS.with(Cell::get),
    }
}

pub(crate) fn record_sampling() {
    SAMPLING_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_augmentation() {
    AUGMENT_CALLS.with(|c| c.set(c.get() + 1));
}
