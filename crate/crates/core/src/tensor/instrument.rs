//! Thread-local operation counters and buffer-allocation audits.
//!
//! Both are off by default; the hot paths only pay a `Cell<bool>` load. Counts are
//! tagged with the innermost active [`scope`] label so that callers can separate,
//! e.g., attention arithmetic from MLP arithmetic inside one block.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

/// Arithmetic class of a counted operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpClass {
    /// Weight-times-activation convolution / projection MACs.
    Conv,
    /// Activation-times-activation matrix products (token mixing).
    MatMul,
    /// Element-wise products, sums, reductions (one op per element touched).
    Elementwise,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    counts: BTreeMap<(String, OpClass), u64>,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn class(&self, class: OpClass) -> u64 {
        self.counts
            .iter()
            .filter(|((_, c), _)| *c == class)
            .map(|(_, n)| n)
            .sum()
    }

    /// Sum over every scope whose label starts with `prefix`.
    pub fn scope(&self, prefix: &str) -> u64 {
        self.counts
            .iter()
            .filter(|((s, _), _)| s.starts_with(prefix))
            .map(|(_, n)| n)
            .sum()
    }

    pub fn scope_class(&self, prefix: &str, class: OpClass) -> u64 {
        self.counts
            .iter()
            .filter(|((s, c), _)| s.starts_with(prefix) && *c == class)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, OpClass, u64)> {
        self.counts.iter().map(|((s, c), n)| (s.as_str(), *c, *n))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AllocReport {
    pub buffers: u64,
    pub total_bytes: u64,
    pub largest_bytes: u64,
    /// Largest single buffer per scope label.
    pub largest_by_scope: BTreeMap<String, u64>,
}

impl AllocReport {
    pub fn largest_in(&self, prefix: &str) -> u64 {
        self.largest_by_scope
            .iter()
            .filter(|(s, _)| s.starts_with(prefix))
            .map(|(_, b)| *b)
            .max()
            .unwrap_or(0)
    }
}

thread_local! {
    static COUNTING: Cell<bool> = const { Cell::new(false) };
    static AUDITING: Cell<bool> = const { Cell::new(false) };
    static SCOPES: RefCell<Vec<&'static str>> = const { RefCell::new(Vec::new()) };
    static COUNTS: RefCell<OpCounts> = RefCell::new(OpCounts::default());
    static ALLOCS: RefCell<AllocReport> = RefCell::new(AllocReport::default());
}

fn scope_label() -> String {
    SCOPES.with(|s| {
        let s = s.borrow();
        if s.is_empty() {
            "-".to_string()
        } else {
            s.join(".")
        }
    })
}

#[inline]
pub(crate) fn record_ops(class: OpClass, n: u64) {
    if !COUNTING.with(Cell::get) || n == 0 {
        return;
    }
    let label = scope_label();
    COUNTS.with(|c| *c.borrow_mut().counts.entry((label, class)).or_insert(0) += n);
}

#[inline]
pub(crate) fn record_alloc(bytes: u64) {
    if !AUDITING.with(Cell::get) {
        return;
    }
    let label = scope_label();
    ALLOCS.with(|a| {
        let mut a = a.borrow_mut();
        a.buffers += 1;
        a.total_bytes += bytes;
        a.largest_bytes = a.largest_bytes.max(bytes);
        let e = a.largest_by_scope.entry(label).or_insert(0);
        *e = (*e).max(bytes);
    });
}

/// Run `f` with `label` pushed on the scope stack.
pub fn scope<R>(label: &'static str, f: impl FnOnce() -> R) -> R {
    SCOPES.with(|s| s.borrow_mut().push(label));
    struct Pop;
    impl Drop for Pop {
        fn drop(&mut self) {
            SCOPES.with(|s| {
                s.borrow_mut().pop();
            });
        }
    }
    let _pop = Pop;
    f()
}

/// Run `f` with operation counting enabled and return what it counted.
/// Nested calls are not supported; the inner call wins.
pub fn count_ops<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    COUNTS.with(|c| *c.borrow_mut() = OpCounts::default());
    COUNTING.with(|c| c.set(true));
    let r = f();
    COUNTING.with(|c| c.set(false));
    let counts = COUNTS.with(|c| std::mem::take(&mut *c.borrow_mut()));
    (r, counts)
}

/// Run `f` with the buffer-allocation audit enabled.
pub fn audit_allocs<R>(f: impl FnOnce() -> R) -> (R, AllocReport) {
    ALLOCS.with(|a| *a.borrow_mut() = AllocReport::default());
    AUDITING.with(|a| a.set(true));
    let r = f();
    AUDITING.with(|a| a.set(false));
    let report = ALLOCS.with(|a| std::mem::take(&mut *a.borrow_mut()));
    (r, report)
}
