//! Batch-level work distribution.
//!
//! Every kernel in the crate that loops over batch items goes through the two
//! helpers here. With the `parallel` feature the items are spread over the rayon
//! pool; without it (or after [`set_sequential`]) they run in order on the calling
//! thread.
//!
//! Reductions across items (weight gradients, statistics) come in two flavours:
//!
//! - **deterministic**: items are grouped into fixed chunks of [`REDUCE_CHUNK`]
//!   items, each chunk accumulates into its own buffer in item order, and the
//!   chunk buffers are summed in chunk order. The result is bit-identical no
//!   matter how many threads run or whether rayon is compiled in at all.
//! - **fast**: a single accumulator when sequential, rayon `fold`/`reduce` when
//!   parallel. Summation order then depends on work stealing.
//!
//! Deterministic mode costs one extra buffer per chunk plus the final sum.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items per partial accumulator in deterministic reductions.
pub const REDUCE_CHUNK: usize = 8;

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);
static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}

/// Forces the sequential path even when rayon is compiled in.
pub fn set_sequential(on: bool) {
    SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::SeqCst)
}

/// Calls `f(item, slot)` for every `item_len`-sized slot of `out`.
pub fn for_each_item<F>(out: &mut [f32], item_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    assert!(item_len > 0 && out.len() % item_len == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        out.par_chunks_mut(item_len)
            .enumerate()
            .for_each(|(i, slot)| f(i, slot));
        return;
    }
    for (i, slot) in out.chunks_mut(item_len).enumerate() {
        f(i, slot);
    }
}

/// Runs `f(item, out_slot, acc)` for `n` items, where `out_slot` is the item's
/// private `out_len`-sized slice of `out` and `acc` is a shared accumulator of
/// length `acc_len`. Returns the summed accumulator.
///
/// `out_len` may be zero, in which case `out` must be empty and every slot is
/// an empty slice.
pub fn map_reduce<F>(n: usize, out: &mut [f32], out_len: usize, acc_len: usize, f: F) -> Vec<f32>
where
    F: Fn(usize, &mut [f32], &mut [f32]) + Sync + Send,
{
    assert_eq!(out.len(), n * out_len, "output buffer does not match item count");
    if n == 0 {
        return vec![0.0; acc_len];
    }
    let n_chunks = n.div_ceil(REDUCE_CHUNK);
    let chunks: Vec<(usize, &mut [f32])> = if out_len == 0 {
        (0..n_chunks).map(|c| (c, &mut [][..])).collect()
    } else {
        out.chunks_mut(REDUCE_CHUNK * out_len).enumerate().collect()
    };
    let run = |c: usize, slots: &mut [f32], acc: &mut [f32]| {
        let start = c * REDUCE_CHUNK;
        let end = (start + REDUCE_CHUNK).min(n);
        for (local, item) in (start..end).enumerate() {
            let slot = if out_len == 0 {
                &mut [][..]
            } else {
                &mut slots[local * out_len..(local + 1) * out_len]
            };
            f(item, slot, acc);
        }
    };

    if deterministic() {
        let partial = |(c, slots): (usize, &mut [f32])| {
            let mut acc = vec![0.0f32; acc_len];
            run(c, slots, &mut acc);
            acc
        };
        #[cfg(feature = "parallel")]
        let partials: Vec<Vec<f32>> = if parallel_enabled() {
            chunks.into_par_iter().map(partial).collect()
        } else {
            chunks.into_iter().map(partial).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let partials: Vec<Vec<f32>> = chunks.into_iter().map(partial).collect();

        let mut total = vec![0.0f32; acc_len];
        for p in &partials {
            add_into(&mut total, p);
        }
        return total;
    }

    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return chunks
            .into_par_iter()
            .fold(
                || vec![0.0f32; acc_len],
                |mut acc, (c, slots)| {
                    run(c, slots, &mut acc);
                    acc
                },
            )
            .reduce(
                || vec![0.0f32; acc_len],
                |mut a, b| {
                    add_into(&mut a, &b);
                    a
                },
            );
    }

    let mut acc = vec![0.0f32; acc_len];
    for (c, slots) in chunks {
        run(c, slots, &mut acc);
    }
    acc
}

#[inline]
pub(crate) fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_reduce_sums_and_fills_slots() {
        let n = 19;
        let mut out = vec![0.0; n * 2];
        let acc = map_reduce(n, &mut out, 2, 3, |i, slot, acc| {
            slot[0] = i as f32;
            slot[1] = -(i as f32);
            acc[0] += 1.0;
            acc[1] += i as f32;
            acc[2] += 0.5;
        });
        assert_eq!(acc, vec![19.0, 171.0, 9.5]);
        assert_eq!(out[2 * 7], 7.0);
        assert_eq!(out[2 * 7 + 1], -7.0);
    }

    #[test]
    fn map_reduce_without_outputs() {
        let acc = map_reduce(5, &mut [], 0, 1, |i, slot, acc| {
            assert!(slot.is_empty());
            acc[0] += i as f32;
        });
        assert_eq!(acc, vec![10.0]);
    }
}
