//! Materializing step: every elementwise operation is its own bulk pass with a
//! freshly allocated output, the way an eager tensor framework executes it.

use std::time::Instant;

use super::mlp::LoptWeights;
use super::{Engine, ExecPath, ScratchArena, ScratchBuf, UpdateReport};
use crate::error::{Error, Result};
use crate::features::{FeatureContext, FeatureSetId, FeatureSetSpec, FeatureStats, Tile, LANES};
use crate::state::OptState;
use crate::tensors::ParamTensor;

/// `mag * alpha`, `exp`, `* direction`, `* beta_out`, `* lr`, `theta -/+ delta`.
pub(crate) const APPLY_PASSES: usize = 6;

/// Eager elementwise executor over tensors of `len` elements; counts passes.
struct Eager<'a> {
    arena: &'a ScratchArena,
    len: usize,
    passes: usize,
}

impl<'a> Eager<'a> {
    fn alloc(&self) -> Result<ScratchBuf<'a, f32>> {
        self.arena.alloc(self.len)
    }

    fn map(&mut self, a: &[f32], f: impl Fn(f32) -> f32) -> Result<ScratchBuf<'a, f32>> {
        let mut out = self.alloc()?;
        self.map_into(&mut out, a, f);
        Ok(out)
    }

    fn zip(&mut self, a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Result<ScratchBuf<'a, f32>> {
        let mut out = self.alloc()?;
        self.zip_into(&mut out, a, b, f);
        Ok(out)
    }

    fn map_into(&mut self, dst: &mut [f32], a: &[f32], f: impl Fn(f32) -> f32) {
        for (d, &x) in dst.iter_mut().zip(a) {
            *d = f(x);
        }
        self.passes += 1;
    }

    fn zip_into(&mut self, dst: &mut [f32], a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) {
        for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
            *d = f(x, y);
        }
        self.passes += 1;
    }

    fn fill_into(&mut self, dst: &mut [f32], value: f32) {
        dst.fill(value);
        self.passes += 1;
    }

    /// `dst[i, j] = v[i]` for a tensor with `cols` columns.
    fn row_broadcast_into(&mut self, dst: &mut [f32], v: &[f32], cols: usize) {
        for (row, &x) in dst.chunks_exact_mut(cols).zip(v) {
            row.fill(x);
        }
        self.passes += 1;
    }

    /// `dst[i, j] = v[j]`.
    fn col_broadcast_into(&mut self, dst: &mut [f32], v: &[f32], cols: usize) {
        for row in dst.chunks_exact_mut(cols) {
            row.copy_from_slice(v);
        }
        self.passes += 1;
    }

    /// `out[i, j] = r[i] * c[j]`.
    fn outer(&mut self, r: &[f32], c: &[f32]) -> Result<ScratchBuf<'a, f32>> {
        let mut out = self.alloc()?;
        for (row, &ri) in out.chunks_exact_mut(c.len()).zip(r) {
            for (o, &cj) in row.iter_mut().zip(c) {
                *o = ri * cj;
            }
        }
        self.passes += 1;
        Ok(out)
    }
}

/// Builds the column-major `d_feat x mn` feature matrix.
fn build_features(
    eager: &mut Eager<'_>,
    cols_out: &mut [&mut [f32]],
    ctx: &FeatureContext<'_>,
    w: &[f32],
    spec: &FeatureSetSpec,
) -> Result<()> {
    let eps = spec.eps_recip;
    let n = ctx.cols();
    let m = ctx.momentum();
    let v = ctx.second_moment();
    let g = ctx.g();
    let r = ctx.row_factors();
    let c = ctx.col_factors();
    let mean_r = ctx.mean_r();

    for j in 0..3 {
        eager.map_into(cols_out[j], m[j], |x| x);
    }
    eager.map_into(cols_out[3], v, |x| x);
    for i in 0..3 {
        eager.row_broadcast_into(cols_out[4 + i], r[i], n);
    }
    for i in 0..3 {
        eager.col_broadcast_into(cols_out[7 + i], c[i], n);
    }

    let v_eps = eager.map(v, |x| x + eps)?;
    let sqrt_v = eager.map(&v_eps, f32::sqrt)?;
    drop(v_eps);
    for j in 0..3 {
        eager.zip_into(cols_out[10 + j], m[j], &sqrt_v, |a, b| a / b);
    }
    eager.map_into(cols_out[13], &sqrt_v, |s| 1.0 / s);
    drop(sqrt_v);

    // Reciprocals are computed on the small factor vectors, then broadcast.
    for i in 0..3 {
        let rr: Vec<f32> = r[i].iter().map(|&x| 1.0 / (x + eps).sqrt()).collect();
        eager.row_broadcast_into(cols_out[14 + i], &rr, n);
    }
    for i in 0..3 {
        let cr: Vec<f32> = c[i].iter().map(|&x| 1.0 / (x + eps).sqrt()).collect();
        eager.col_broadcast_into(cols_out[17 + i], &cr, n);
    }

    for i in 0..3 {
        let rc = eager.outer(r[i], c[i])?;
        let denom = eager.map(&rc, |x| x + eps)?;
        drop(rc);
        let ratio = eager.map(&denom, |x| mean_r[i] / x)?;
        drop(denom);
        let scale = eager.map(&ratio, f32::sqrt)?;
        drop(ratio);
        eager.zip_into(cols_out[20 + i], g, &scale, |a, b| a * b);
        eager.zip_into(cols_out[23 + i], m[i], &scale, |a, b| a * b);
    }

    match spec.id {
        FeatureSetId::SmallFcLopt => {
            for (j, &t) in ctx.time_values().iter().enumerate() {
                eager.fill_into(cols_out[26 + j], t);
            }
            eager.map_into(cols_out[37], w, |x| x);
            eager.map_into(cols_out[38], g, |x| x);
        }
        FeatureSetId::VeloMlp => {
            let clip = spec.clip_bound;
            eager.map_into(cols_out[26], w, |x| x);
            eager.map_into(cols_out[27], g, |x| x);
            eager.map_into(cols_out[28], g, |x| x.clamp(-clip, clip));
        }
    }
    Ok(())
}

/// Runs the MLP over row blocks of the normalized feature matrix, producing
/// full-length direction and magnitude tensors. Each layer is one bulk pass
/// over the block.
fn run_mlp<'a>(
    eager: &mut Eager<'a>,
    cols: &[&mut [f32]],
    weights: &LoptWeights,
    block_rows: usize,
) -> Result<(ScratchBuf<'a, f32>, ScratchBuf<'a, f32>)> {
    let len = eager.len;
    let d = cols.len();
    let width = weights.max_width();
    let block = block_rows.clamp(1, len.max(1)).div_ceil(LANES) * LANES;
    let tiles = block / LANES;
    let mut x = eager.arena.alloc::<Tile>(tiles * d)?;
    let mut act_a = eager.arena.alloc::<Tile>(tiles * width)?;
    let mut act_b = eager.arena.alloc::<Tile>(tiles * width)?;
    let mut direction = eager.alloc()?;
    let mut magnitude = eager.alloc()?;
    let layers = weights.layers();
    let last = layers.len() - 1;

    let mut start = 0;
    while start < len {
        let rows = block.min(len - start);
        let used = rows.div_ceil(LANES);
        for t in 0..used {
            let base = start + t * LANES;
            let n = LANES.min(start + rows - base);
            for (k, col) in cols.iter().enumerate() {
                let mut tile = Tile::ZERO;
                tile[..n].copy_from_slice(&col[base..base + n]);
                x[t * d + k] = tile;
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            let (src, stride): (&[Tile], usize) = if l == 0 { (&x, d) } else { (&act_a, width) };
            for t in 0..used {
                let input = &src[t * stride..t * stride + layer.input_dim()];
                let out = &mut act_b[t * width..t * width + layer.output_dim()];
                layer.forward_tile(input, out, l != last);
            }
            std::mem::swap(&mut act_a, &mut act_b);
        }
        for t in 0..used {
            let base = start + t * LANES;
            let n = LANES.min(start + rows - base);
            direction[base..base + n].copy_from_slice(&act_a[t * width][..n]);
            magnitude[base..base + n].copy_from_slice(&act_a[t * width + 1][..n]);
        }
        start += rows;
    }
    eager.passes += 2 * layers.len() - 1;
    Ok((direction, magnitude))
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
    let len = w.len();
    let d = spec.d_feat;
    let ctx = FeatureContext::new(g, state, spec)?;
    let mut eager = Eager {
        arena,
        len,
        passes: 0,
    };

    let t0 = Instant::now();
    let matrix_len = len.checked_mul(d).ok_or(Error::OutOfMemory {
        requested: usize::MAX,
        in_use: arena.in_use(),
        cap: arena.cap().unwrap_or(usize::MAX),
    })?;
    let mut matrix = arena.alloc::<f32>(matrix_len)?;
    let mut cols: Vec<&mut [f32]> = matrix.chunks_exact_mut(len).collect();
    build_features(&mut eager, &mut cols, &ctx, w.as_slice(), spec)?;

    let mut stats = FeatureStats::zeros(d);
    stats.count = len as u64;
    for (s, col) in stats.sumsq.iter_mut().zip(&cols) {
        let mut lanes = [0.0f64; LANES];
        let chunks = col.chunks_exact(LANES);
        let tail = chunks.remainder();
        for chunk in chunks {
            for (acc, &x) in lanes.iter_mut().zip(chunk) {
                let x = x as f64;
                *acc += x * x;
            }
        }
        for (acc, &x) in lanes.iter_mut().zip(tail) {
            let x = x as f64;
            *acc += x * x;
        }
        *s = lanes.iter().sum();
        eager.passes += 1;
    }
    let t1 = Instant::now();

    let scales = stats.scales(spec.eps_norm)?;
    for (col, &s) in cols.iter_mut().zip(&scales.0) {
        for x in col.iter_mut() {
            *x *= s;
        }
        eager.passes += 1;
    }

    let (direction, magnitude) = run_mlp(&mut eager, &cols, weights, engine.config().naive_block_rows)?;
    drop(cols);
    drop(matrix);

    let (alpha, beta_out, sign) = (weights.alpha, weights.beta_out, weights.update_sign);
    let exponent = eager.map(&magnitude, |x| x * alpha)?;
    let growth = eager.map(&exponent, f32::exp)?;
    if let Some(index) = growth.iter().position(|x| !x.is_finite()) {
        return Err(Error::UpdateOverflow {
            index,
            exponent: exponent[index],
        });
    }
    drop(exponent);
    let raw = eager.zip(&direction, &growth, |d, e| d * e)?;
    drop(growth);
    let scaled = eager.map(&raw, |x| x * beta_out)?;
    drop(raw);
    let delta = eager.map(&scaled, |x| x * lr)?;
    drop(scaled);
    let max_abs_delta = delta.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    let params = w.as_mut_slice();
    for (p, &dlt) in params.iter_mut().zip(delta.iter()) {
        *p = sign.apply(*p, dlt);
    }
    eager.passes += 1;
    let t2 = Instant::now();

    Ok(UpdateReport {
        tensor: name.to_string(),
        path: ExecPath::Naive,
        elements: len,
        max_abs_delta,
        stats_time: t1 - t0,
        apply_time: t2 - t1,
        kernel_equivalents: eager.passes,
        scratch_peak_bytes: arena.peak(),
        loss: None,
    })
}
