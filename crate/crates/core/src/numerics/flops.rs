//! Instrumented floating-point operation counter.
//!
//! Kernels report the multiply-adds they actually perform (derived from the
//! realized row lengths, not from configured widths). One multiply-add counts
//! as two FLOPs. The counter is thread-local to the caller of the kernel, so
//! concurrently running tests do not see each other's work.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub fn record(flops: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(flops)));
}

pub fn current() -> u64 {
    COUNTER.with(Cell::get)
}

/// Runs `f` and returns its result together with the FLOPs it recorded.
/// Nested calls are accounted to every enclosing measurement.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = current();
    let out = f();
    (out, current().wrapping_sub(before))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_measurements_accumulate() {
        let ((_, inner), outer) = measure(|| {
            record(10);
            measure(|| record(5))
        });
        assert_eq!(inner, 5);
        assert_eq!(outer, 15);
    }
}
