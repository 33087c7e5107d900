//! Per-thread counters of the pair-dependent pipeline stages.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub coattend: u64,
    pub erase: u64,
    pub center_updates: u64,
    pub classify: u64,
    pub pair_epochs: u64,
}

thread_local! {
    static COUNTERS: Cell<Counters> = Cell::new(Counters::default());
}

pub(crate) fn bump(f: impl FnOnce(&mut Counters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub fn snapshot() -> Counters {
    COUNTERS.with(Cell::get)
}

pub fn reset() {
    COUNTERS.with(|c| c.set(Counters::default()));
}

impl Counters {
    /// Counts accumulated since `earlier`.
    pub fn since(self, earlier: Counters) -> Counters {
        Counters {
            coattend: self.coattend - earlier.coattend,
            erase: self.erase - earlier.erase,
            center_updates: self.center_updates - earlier.center_updates,
            classify: self.classify - earlier.classify,
            pair_epochs: self.pair_epochs - earlier.pair_epochs,
        }
    }
}
