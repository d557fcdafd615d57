//! Two-pass streaming step.

use std::thread;
use std::time::Instant;

use super::mlp::LoptWeights;
use super::{Engine, ExecPath, ScratchArena, UpdateReport};
use crate::error::{Error, Result};
use crate::features::{FeatureContext, FeatureSetSpec, FeatureStats, NormScales, Tile, LANES, MAX_FEATURES};
use crate::state::OptState;
use crate::tensors::ParamTensor;

/// Activation widths up to this size live on the worker's stack.
const STACK_WIDTH: usize = 256;

/// Splits `len` elements into `parts` contiguous ranges whose sizes differ by at most one.
pub(crate) fn even_ranges(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / parts;
    let rem = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < rem);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// In-place pairwise reduction of `parts` rows of width `width`: at stride `s`,
/// row `i` absorbs row `i + s` for every `i` divisible by `2s`. The result is in row 0.
fn tree_reduce_rows(buf: &mut [f64], width: usize) {
    let parts = buf.len() / width;
    let mut stride = 1;
    while stride < parts {
        let mut i = 0;
        while i + stride < parts {
            let (lo, hi) = buf.split_at_mut((i + stride) * width);
            for (a, b) in lo[i * width..(i + 1) * width].iter_mut().zip(&hi[..width]) {
                *a += b;
            }
            i += 2 * stride;
        }
        stride *= 2;
    }
}

/// Merges partial statistics with the same fixed binary tree as the fused stats pass.
pub fn tree_reduce(parts: &[FeatureStats]) -> Result<FeatureStats> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidConfig("no partial statistics to reduce".into()))?;
    let width = first.sumsq.len();
    let mut buf = Vec::with_capacity(width * parts.len());
    for p in parts {
        if p.sumsq.len() != width {
            return Err(Error::DimMismatch {
                expected: width,
                got: p.sumsq.len(),
            });
        }
        buf.extend_from_slice(&p.sumsq);
    }
    tree_reduce_rows(&mut buf, width);
    Ok(FeatureStats {
        sumsq: buf[..width].to_vec(),
        count: parts.iter().map(|p| p.count).sum(),
    })
}

/// Pass one: squared-feature sums over the context's elements. Each worker owns
/// a `d_feat` accumulator; partials are merged with a fixed binary tree.
pub fn stats_pass(ctx: &FeatureContext<'_>, w: &[f32], workers: usize, arena: &ScratchArena) -> Result<FeatureStats> {
    let d = ctx.spec().d_feat;
    if w.len() != ctx.len() {
        return Err(Error::DimMismatch {
            expected: ctx.len(),
            got: w.len(),
        });
    }
    let ranges = even_ranges(w.len(), workers);
    let mut partials = arena.alloc::<f64>(workers * d)?;

    // Each lane keeps its own sums; lanes are added in order at the end.
    let work = |range: std::ops::Range<usize>, acc: &mut [f64]| {
        let mut tile = [Tile::ZERO; MAX_FEATURES];
        let mut lanes = [[0.0f64; LANES]; MAX_FEATURES];
        let mut k = range.start;
        while k < range.end {
            let n = LANES.min(range.end - k);
            ctx.features_tile(k, &w[k..k + n], &mut tile);
            for (sums, row) in lanes.iter_mut().zip(&tile[..d]) {
                if n == LANES {
                    row.add_squares_to(sums);
                } else {
                    for l in 0..n {
                        let f = row[l] as f64;
                        sums[l] += f * f;
                    }
                }
            }
            k += n;
        }
        for (s, sums) in acc.iter_mut().zip(&lanes) {
            *s = sums.iter().sum();
        }
    };
    thread::scope(|scope| {
        let mut chunks = partials.chunks_exact_mut(d).zip(ranges.iter().cloned());
        let (first_acc, first_range) = chunks.next().expect("at least one worker");
        for (acc, range) in chunks {
            scope.spawn(move || work(range, acc));
        }
        work(first_range, first_acc);
    });

    tree_reduce_rows(&mut partials, d);
    Ok(FeatureStats {
        sumsq: partials[..d].to_vec(),
        count: w.len() as u64,
    })
}

/// Pass two: recompute, normalize, run the MLP and update `w` in place.
/// Returns the largest `|lr * delta|` applied.
#[allow(clippy::too_many_arguments)]
pub fn apply_pass(
    ctx: &FeatureContext<'_>,
    w: &mut [f32],
    scales: &NormScales,
    weights: &LoptWeights,
    lr: f32,
    workers: usize,
    arena: &ScratchArena,
) -> Result<f32> {
    let d = ctx.spec().d_feat;
    if w.len() != ctx.len() {
        return Err(Error::DimMismatch {
            expected: ctx.len(),
            got: w.len(),
        });
    }
    let width = weights.max_width();
    let (alpha, beta_out, sign) = (weights.alpha, weights.beta_out, weights.update_sign);
    let ranges = even_ranges(w.len(), workers);
    let mut heap_acts = if width > STACK_WIDTH {
        Some(arena.alloc::<Tile>(workers * 2 * width)?)
    } else {
        None
    };

    let work = |start: usize, chunk: &mut [f32], acts: Option<&mut [Tile]>| -> Result<f32> {
        let mut tile = [Tile::ZERO; MAX_FEATURES];
        let mut stack_a = [Tile::ZERO; STACK_WIDTH];
        let mut stack_b = [Tile::ZERO; STACK_WIDTH];
        let (a, b): (&mut [Tile], &mut [Tile]) = match acts {
            Some(buf) => buf.split_at_mut(width),
            None => (&mut stack_a, &mut stack_b),
        };
        let mut max_delta = 0.0f32;
        for (ti, params) in chunk.chunks_mut(LANES).enumerate() {
            let base = start + ti * LANES;
            let n = params.len();
            ctx.features_tile(base, params, &mut tile);
            for (row, &s) in tile.iter_mut().zip(&scales.0) {
                for x in row.iter_mut() {
                    *x *= s;
                }
            }
            let (direction, magnitude) = weights.forward_tile(&tile[..d], a, b);
            let mut growth = [0.0f32; LANES];
            for l in 0..LANES {
                growth[l] = (magnitude[l] * alpha).exp();
            }
            if let Some(l) = growth[..n].iter().position(|x| !x.is_finite()) {
                return Err(Error::UpdateOverflow {
                    index: ctx.offset() + base + l,
                    exponent: magnitude[l] * alpha,
                });
            }
            for (l, p) in params.iter_mut().enumerate() {
                let delta = direction[l] * growth[l] * beta_out * lr;
                *p = sign.apply(*p, delta);
                max_delta = max_delta.max(delta.abs());
            }
        }
        Ok(max_delta)
    };

    let results: Vec<Result<f32>> = thread::scope(|scope| {
        let mut rest: &mut [f32] = w;
        let mut act_chunks = heap_acts.as_deref_mut().map(|buf| buf.chunks_exact_mut(2 * width));
        let mut handles = Vec::with_capacity(workers);
        let mut local = None;
        for (i, range) in ranges.iter().enumerate() {
            let (chunk, tail) = std::mem::take(&mut rest).split_at_mut(range.len());
            rest = tail;
            let acts = act_chunks.as_mut().and_then(Iterator::next);
            let start = range.start;
            if i == 0 {
                local = Some((start, chunk, acts));
            } else {
                handles.push(scope.spawn(move || work(start, chunk, acts)));
            }
        }
        let (start, chunk, acts) = local.expect("at least one worker");
        let mut out = vec![work(start, chunk, acts)];
        out.extend(handles.into_iter().map(|h| h.join().expect("worker panicked")));
        out
    });

    let mut max_delta = 0.0f32;
    for r in results {
        max_delta = max_delta.max(r?);
    }
    Ok(max_delta)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn step(
    engine: &Engine,
    name: &str,
    w: &mut ParamTensor,
    g: &ParamTensor,
    state: &OptState,
    weights: &LoptWeights,
    spec: &FeatureSetSpec,
    lr: f32,
) -> Result<UpdateReport> {
    let arena = engine.arena();
    arena.reset_peak();
    let workers = engine.config().workers;
    let ctx = FeatureContext::new(g, state, spec)?;

    let t0 = Instant::now();
    let stats = stats_pass(&ctx, w.as_slice(), workers, arena)?;
    let t1 = Instant::now();
    let scales = stats.scales(spec.eps_norm)?;
    let max_abs_delta = apply_pass(&ctx, w.as_mut_slice(), &scales, weights, lr, workers, arena)?;
    let t2 = Instant::now();

    Ok(UpdateReport {
        tensor: name.to_string(),
        path: ExecPath::Fused,
        elements: w.len(),
        max_abs_delta,
        stats_time: t1 - t0,
        apply_time: t2 - t1,
        kernel_equivalents: 2,
        scratch_peak_bytes: arena.peak(),
        loss: None,
    })
}
