//! Optional FLOP accounting hooked into the matmul kernel.
//!
//! Counting is off unless a closure runs under [`instrument`]. Each matmul of
//! an `m x k` by `k x n` operand adds `2mkn` to the component currently
//! selected with [`with_component`].

use std::cell::{Cell, RefCell};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    AttentionScores,
    AttentionValues,
    Projections,
    FeedForward,
    LmHead,
    Other,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::AttentionScores,
        Component::AttentionValues,
        Component::Projections,
        Component::FeedForward,
        Component::LmHead,
        Component::Other,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-component totals collected by [`instrument`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts([u64; 6]);

impl Counts {
    pub fn get(&self, c: Component) -> u64 {
        self.0[c.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

thread_local! {
    static COUNTS: RefCell<Option<Counts>> = const { RefCell::new(None) };
    static CURRENT: Cell<Component> = const { Cell::new(Component::Other) };
}

/// Runs `f` with counting enabled on this thread and returns the totals.
pub fn instrument<R>(f: impl FnOnce() -> R) -> (R, Counts) {
    let previous = COUNTS.with(|c| c.replace(Some(Counts::default())));
    let out = f();
    let counts = COUNTS.with(|c| c.replace(previous)).unwrap_or_default();
    (out, counts)
}

/// Attributes matmuls issued inside `f` to `component`.
pub fn with_component<R>(component: Component, f: impl FnOnce() -> R) -> R {
    let previous = CURRENT.with(|c| c.replace(component));
    let out = f();
    CURRENT.with(|c| c.set(previous));
    out
}

pub(crate) fn record_matmul(m: usize, k: usize, n: usize) {
    COUNTS.with(|c| {
        if let Some(counts) = c.borrow_mut().as_mut() {
            let comp = CURRENT.with(Cell::get);
            counts.0[comp.index()] += 2 * (m * k * n) as u64;
        }
    });
}
