//! Scalar-operation accounting.
//!
//! The client/server cost model is expressed in scalar multiplications (SM)
//! and scalar additions (SA). Matrix products count one SM per
//! multiply-accumulate; elementwise matrix addition and subtraction count one
//! SA per entry. Accumulation inside a dot product is folded into its SM.
//!
//! Counters are thread-local, so a server session thread never pollutes a
//! client's tally and vice versa.

use std::cell::Cell;
use std::ops::{Add, AddAssign};

/// A snapshot (or delta) of the scalar-operation counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCounts {
    /// Scalar multiplications.
    pub sm: u64,
    /// Scalar additions.
    pub sa: u64,
}

impl OpCounts {
    pub const ZERO: OpCounts = OpCounts { sm: 0, sa: 0 };

    pub fn is_zero(&self) -> bool {
        self.sm == 0 && self.sa == 0
    }
}

impl Add for OpCounts {
    type Output = OpCounts;

    fn add(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            sm: self.sm + rhs.sm,
            sa: self.sa + rhs.sa,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: OpCounts) {
        self.sm += rhs.sm;
        self.sa += rhs.sa;
    }
}

thread_local! {
    static SM: Cell<u64> = const { Cell::new(0) };
    static SA: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add_sm(n: u64) {
    SM.with(|c| c.set(c.get().wrapping_add(n)));
}

pub(crate) fn add_sa(n: u64) {
    SA.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Current cumulative counter values for this thread.
pub fn snapshot() -> OpCounts {
    OpCounts {
        sm: SM.with(Cell::get),
        sa: SA.with(Cell::get),
    }
}

/// Runs `f` and returns its result together with the scalar operations it
/// performed on this thread.
pub fn tally<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let before = snapshot();
    let out = f();
    let after = snapshot();
    (
        out,
        OpCounts {
            sm: after.sm.wrapping_sub(before.sm),
            sa: after.sa.wrapping_sub(before.sa),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tally_is_a_delta() {
        add_sm(5);
        let (_, counts) = tally(|| {
            add_sm(3);
            add_sa(7);
        });
        assert_eq!(counts, OpCounts { sm: 3, sa: 7 });
    }

    #[test]
    fn nested_tallies_see_inner_ops() {
        let (_, outer) = tally(|| {
            let (_, inner) = tally(|| add_sm(2));
            assert_eq!(inner.sm, 2);
            add_sa(1);
        });
        assert_eq!(outer, OpCounts { sm: 2, sa: 1 });
    }
}
