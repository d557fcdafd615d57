//! Per-element input features for the optimizer MLP, their squared-average
//! statistics, and normalization.
//!
//! Column layout (`small_fc_lopt`, 39 columns):
//!
//! | columns | feature |
//! |---------|---------|
//! | 0..3    | momenta `M_1..M_3` |
//! | 3       | second moment `V` |
//! | 4..7    | row factors `r_5..r_7` (broadcast along the row) |
//! | 7..10   | column factors `c_5..c_7` (broadcast along the column) |
//! | 10..13  | `M_j / sqrt(V)` |
//! | 13      | `1 / sqrt(V)` |
//! | 14..17  | `1 / sqrt(r_i)` |
//! | 17..20  | `1 / sqrt(c_i)` |
//! | 20..23  | `g * s_i` with `s_i = sqrt(mean(r_i) / (r_i c_i^T))` |
//! | 23..26  | `M_j * s_i` for `(i, j)` in `(5,1), (6,2), (7,3)` |
//! | 26..37  | `tanh(t / x)` for the eleven horizons `x` |
//! | 37      | parameter `W` |
//! | 38      | gradient `g` |
//!
//! The VeLO MLP set (29 columns) shares columns 0..26, then has `W`, `g` and
//! `clip(g, -0.1, 0.1)`.
//!
//! Every square root in a denominator is guarded by `eps_recip`, so a fresh
//! all-zero state yields finite features: normalized momenta are `0`, the
//! reciprocals are `1 / sqrt(eps_recip)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::OptState;
use crate::tensors::ParamTensor;

/// Upper bound on `d_feat` across supported feature sets.
pub const MAX_FEATURES: usize = 39;

/// Elements processed together by the tiled kernels.
pub(crate) const LANES: usize = 32;

/// `f32` values per 512-bit register.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
pub(crate) const REG: usize = 16;

/// One value per lane; a `[Tile]` slice holds one row per feature or unit.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[repr(C, align(64))]
pub(crate) struct Tile(pub [f32; LANES]);

impl Tile {
    pub(crate) const ZERO: Tile = Tile([0.0; LANES]);

    pub(crate) fn splat(v: f32) -> Self {
        Tile([v; LANES])
    }
}

/// Lane-wise IEEE arithmetic, rounding exactly like the scalar operators.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
macro_rules! lanewise {
    ($a:expr, $b:expr, $op:ident, $scalar:tt) => {{
        use std::arch::x86_64::*;
        // SAFETY: avx512f is enabled for this build and `Tile` is 64-byte aligned.
        unsafe {
            let mut out = Tile::ZERO;
            for h in (0..LANES).step_by(REG) {
                let v = $op(_mm512_load_ps($a.0.as_ptr().add(h)), _mm512_load_ps($b.0.as_ptr().add(h)));
                _mm512_store_ps(out.0.as_mut_ptr().add(h), v);
            }
            out
        }
    }};
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
macro_rules! lanewise {
    ($a:expr, $b:expr, $op:ident, $scalar:tt) => {{
        let mut out = Tile::ZERO;
        for l in 0..LANES {
            out[l] = $a[l] $scalar $b[l];
        }
        out
    }};
}

impl Tile {
    #[inline(always)]
    pub(crate) fn add(self, o: Tile) -> Tile {
        lanewise!(self, o, _mm512_add_ps, +)
    }

    #[inline(always)]
    pub(crate) fn mul(self, o: Tile) -> Tile {
        lanewise!(self, o, _mm512_mul_ps, *)
    }

    #[inline(always)]
    pub(crate) fn div(self, o: Tile) -> Tile {
        lanewise!(self, o, _mm512_div_ps, /)
    }

    #[inline(always)]
    pub(crate) fn sqrt(self) -> Tile {
        #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
        // SAFETY: avx512f is enabled for this build and `Tile` is 64-byte aligned.
        unsafe {
            use std::arch::x86_64::*;
            let mut out = Tile::ZERO;
            for h in (0..LANES).step_by(REG) {
                _mm512_store_ps(out.0.as_mut_ptr().add(h), _mm512_sqrt_ps(_mm512_load_ps(self.0.as_ptr().add(h))));
            }
            out
        }
        #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
        {
            let mut out = self;
            for x in out.iter_mut() {
                *x = x.sqrt();
            }
            out
        }
    }
}

impl Tile {
    /// `sums[l] += self[l]^2` in `f64`.
    #[inline(always)]
    pub(crate) fn add_squares_to(&self, sums: &mut [f64; LANES]) {
        #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
        // SAFETY: avx512f is enabled for this build; every load and store stays
        // within the 32-lane `self` and `sums`.
        unsafe {
            use std::arch::x86_64::*;
            for h in (0..LANES).step_by(8) {
                let x = _mm512_cvtps_pd(_mm256_loadu_ps(self.0.as_ptr().add(h)));
                let s = _mm512_loadu_pd(sums.as_ptr().add(h));
                _mm512_storeu_pd(sums.as_mut_ptr().add(h), _mm512_add_pd(s, _mm512_mul_pd(x, x)));
            }
        }
        #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
        for (s, &x) in sums.iter_mut().zip(&self.0) {
            let x = x as f64;
            *s += x * x;
        }
    }
}

impl std::ops::Deref for Tile {
    type Target = [f32; LANES];

    #[inline(always)]
    fn deref(&self) -> &[f32; LANES] {
        &self.0
    }
}

impl std::ops::DerefMut for Tile {
    #[inline(always)]
    fn deref_mut(&mut self) -> &mut [f32; LANES] {
        &mut self.0
    }
}

pub const TIME_HORIZONS: [f32; 11] = [
    1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0, 1e4, 3e4, 1e5,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSetId {
    #[serde(rename = "small_fc_lopt")]
    SmallFcLopt,
    #[serde(rename = "velo_mlp")]
    VeloMlp,
}

impl FeatureSetId {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSetId::SmallFcLopt => "small_fc_lopt",
            FeatureSetId::VeloMlp => "velo_mlp",
        }
    }

    pub fn d_feat(self) -> usize {
        match self {
            FeatureSetId::SmallFcLopt => 39,
            FeatureSetId::VeloMlp => 29,
        }
    }
}

impl fmt::Display for FeatureSetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_fc_lopt" => Ok(FeatureSetId::SmallFcLopt),
            "velo_mlp" | "velo" => Ok(FeatureSetId::VeloMlp),
            other => Err(Error::InvalidConfig(format!("unknown feature set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSetSpec {
    pub id: FeatureSetId,
    pub d_feat: usize,
    /// Horizons for the `tanh(t / x)` time features; empty for VeLO.
    pub time_xs: Vec<f32>,
    /// Clip bound for the clipped-gradient column (VeLO only).
    pub clip_bound: f32,
    pub eps_recip: f32,
    pub eps_norm: f64,
}

impl FeatureSetSpec {
    pub fn small_fc_lopt() -> Self {
        Self {
            id: FeatureSetId::SmallFcLopt,
            d_feat: 39,
            time_xs: TIME_HORIZONS.to_vec(),
            clip_bound: 0.1,
            eps_recip: 1e-12,
            eps_norm: 1e-5,
        }
    }

    pub fn velo_mlp() -> Self {
        Self {
            id: FeatureSetId::VeloMlp,
            d_feat: 29,
            time_xs: Vec::new(),
            clip_bound: 0.1,
            eps_recip: 1e-12,
            eps_norm: 1e-5,
        }
    }

    pub fn for_id(id: FeatureSetId) -> Self {
        match id {
            FeatureSetId::SmallFcLopt => Self::small_fc_lopt(),
            FeatureSetId::VeloMlp => Self::velo_mlp(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let time = match self.id {
            FeatureSetId::SmallFcLopt => 11,
            FeatureSetId::VeloMlp => 0,
        };
        if self.d_feat != self.id.d_feat() || self.time_xs.len() != time {
            return Err(Error::InvalidConfig(format!(
                "feature set {} must have {} columns and {} time horizons",
                self.id,
                self.id.d_feat(),
                time
            )));
        }
        if self.time_xs.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::InvalidConfig("time horizons must be positive".into()));
        }
        if !(self.eps_recip > 0.0) || !(self.eps_norm > 0.0) || !(self.clip_bound >= 0.0) {
            return Err(Error::InvalidConfig("epsilons must be positive".into()));
        }
        Ok(())
    }

    /// JSON form stored under the `feature_set` metadata key.
    pub fn to_metadata(&self) -> String {
        serde_json::to_string(self).expect("feature spec serializes")
    }

    /// Accepts either the JSON form or a bare identifier.
    pub fn from_metadata(value: &str) -> Result<Self> {
        let spec = match serde_json::from_str::<FeatureSetSpec>(value) {
            Ok(spec) => spec,
            Err(_) => Self::for_id(value.trim().parse()?),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::with_capacity(self.d_feat);
        names.extend((1..=3).map(|j| format!("M{j}")));
        names.push("V".into());
        names.extend((5..=7).map(|i| format!("r{i}")));
        names.extend((5..=7).map(|i| format!("c{i}")));
        names.extend((1..=3).map(|j| format!("M{j}/sqrt(V)")));
        names.push("1/sqrt(V)".into());
        names.extend((5..=7).map(|i| format!("1/sqrt(r{i})")));
        names.extend((5..=7).map(|i| format!("1/sqrt(c{i})")));
        names.extend((5..=7).map(|i| format!("g*s{i}")));
        names.extend((5..=7).zip(1..=3).map(|(i, j)| format!("M{j}*s{i}")));
        match self.id {
            FeatureSetId::SmallFcLopt => {
                names.extend(self.time_xs.iter().map(|x| format!("tanh(t/{x})")));
                names.push("W".into());
                names.push("g".into());
            }
            FeatureSetId::VeloMlp => {
                names.push("W".into());
                names.push("g".into());
                names.push("clip(g)".into());
            }
        }
        names
    }
}

/// `tanh(t / x)` evaluated in `f32`.
#[inline]
pub fn time_feature(step: u64, horizon: f32) -> f32 {
    (step as f32 / horizon).tanh()
}

#[inline]
pub(crate) fn adafactor_scale_at(mean_r: f32, r: f32, c: f32, eps: f32) -> f32 {
    (mean_r / (r * c + eps)).sqrt()
}

/// `S[a, b] = sqrt(mean(r) / (r[a] c[b] + eps))`.
pub fn adafactor_scale(r: &[f32], c: &[f32], eps: f32) -> Result<ParamTensor> {
    if r.is_empty() {
        return Err(Error::EmptyTensor { rows: 0, cols: c.len() });
    }
    let mean_r = mean_f32(r);
    let data = r
        .iter()
        .flat_map(|&ra| c.iter().map(move |&cb| adafactor_scale_at(mean_r, ra, cb, eps)))
        .collect();
    ParamTensor::from_vec(r.len(), c.len(), data)
}

pub(crate) fn mean_f32(v: &[f32]) -> f32 {
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32
}

/// Read-only view of one tensor's accumulators over a contiguous element range
/// `[offset, offset + len)`. Row and column factors always cover the whole tensor.
///
/// The parameter value is passed per element so the apply pass can update the
/// parameter slice in place.
#[derive(Clone)]
pub struct FeatureContext<'a> {
    spec: &'a FeatureSetSpec,
    cols: usize,
    offset: usize,
    g: &'a [f32],
    momentum: [&'a [f32]; 3],
    second_moment: &'a [f32],
    row_factors: [&'a [f32]; 3],
    col_factors: [&'a [f32]; 3],
    mean_r: [f32; 3],
    time: Vec<f32>,
    step: u64,
}

impl<'a> FeatureContext<'a> {
    /// Context over a whole tensor.
    pub fn new(g: &'a ParamTensor, state: &'a OptState, spec: &'a FeatureSetSpec) -> Result<Self> {
        g.ensure_shape(state.shape())?;
        Self::for_range(
            spec,
            state.shape(),
            0,
            g.as_slice(),
            [&state.momentum[0], &state.momentum[1], &state.momentum[2]],
            &state.second_moment,
            [&state.row_factors[0], &state.row_factors[1], &state.row_factors[2]],
            [&state.col_factors[0], &state.col_factors[1], &state.col_factors[2]],
            state.step,
        )
    }

    /// Context over a shard: `g`, `momentum` and `second_moment` hold elements
    /// `[offset, offset + g.len())` of a `shape` tensor.
    #[allow(clippy::too_many_arguments)]
    pub fn for_range(
        spec: &'a FeatureSetSpec,
        shape: (usize, usize),
        offset: usize,
        g: &'a [f32],
        momentum: [&'a [f32]; 3],
        second_moment: &'a [f32],
        row_factors: [&'a [f32]; 3],
        col_factors: [&'a [f32]; 3],
        step: u64,
    ) -> Result<Self> {
        let (rows, cols) = shape;
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyTensor { rows, cols });
        }
        let len = g.len();
        let total = rows * cols;
        if offset + len > total {
            return Err(Error::DimMismatch {
                expected: total,
                got: offset + len,
            });
        }
        for s in momentum.iter().chain(std::iter::once(&second_moment)) {
            if s.len() != len {
                return Err(Error::DimMismatch {
                    expected: len,
                    got: s.len(),
                });
            }
        }
        for r in &row_factors {
            if r.len() != rows {
                return Err(Error::DimMismatch {
                    expected: rows,
                    got: r.len(),
                });
            }
        }
        for c in &col_factors {
            if c.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    got: c.len(),
                });
            }
        }
        let mean_r = [
            mean_f32(row_factors[0]),
            mean_f32(row_factors[1]),
            mean_f32(row_factors[2]),
        ];
        let time = spec.time_xs.iter().map(|&x| time_feature(step, x)).collect();
        Ok(Self {
            spec,
            cols,
            offset,
            g,
            momentum,
            second_moment,
            row_factors,
            col_factors,
            mean_r,
            time,
            step,
        })
    }

    pub fn spec(&self) -> &FeatureSetSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn g(&self) -> &'a [f32] {
        self.g
    }

    pub(crate) fn momentum(&self) -> [&'a [f32]; 3] {
        self.momentum
    }

    pub(crate) fn second_moment(&self) -> &'a [f32] {
        self.second_moment
    }

    pub(crate) fn row_factors(&self) -> [&'a [f32]; 3] {
        self.row_factors
    }

    pub(crate) fn col_factors(&self) -> [&'a [f32]; 3] {
        self.col_factors
    }

    pub(crate) fn mean_r(&self) -> [f32; 3] {
        self.mean_r
    }

    pub(crate) fn time_values(&self) -> &[f32] {
        &self.time
    }

    /// Writes the `d_feat` features of local element `k` (parameter value `w`) into `out`.
    #[inline]
    pub fn features_into(&self, k: usize, w: f32, out: &mut [f32]) {
        let eps = self.spec.eps_recip;
        let idx = self.offset + k;
        let (row, col) = (idx / self.cols, idx % self.cols);
        let g = self.g[k];
        let m = [self.momentum[0][k], self.momentum[1][k], self.momentum[2][k]];
        let v = self.second_moment[k];
        let r = [self.row_factors[0][row], self.row_factors[1][row], self.row_factors[2][row]];
        let c = [self.col_factors[0][col], self.col_factors[1][col], self.col_factors[2][col]];

        out[0..3].copy_from_slice(&m);
        out[3] = v;
        out[4..7].copy_from_slice(&r);
        out[7..10].copy_from_slice(&c);

        let sqrt_v = (v + eps).sqrt();
        for j in 0..3 {
            out[10 + j] = m[j] / sqrt_v;
        }
        out[13] = 1.0 / sqrt_v;
        for i in 0..3 {
            out[14 + i] = 1.0 / (r[i] + eps).sqrt();
            out[17 + i] = 1.0 / (c[i] + eps).sqrt();
        }
        for i in 0..3 {
            let s = adafactor_scale_at(self.mean_r[i], r[i], c[i], eps);
            out[20 + i] = g * s;
            out[23 + i] = m[i] * s;
        }
        match self.spec.id {
            FeatureSetId::SmallFcLopt => {
                out[26..37].copy_from_slice(&self.time);
                out[37] = w;
                out[38] = g;
            }
            FeatureSetId::VeloMlp => {
                out[26] = w;
                out[27] = g;
                out[28] = g.clamp(-self.spec.clip_bound, self.spec.clip_bound);
            }
        }
        debug_assert!(out[..self.spec.d_feat].iter().all(|x| x.is_finite()));
    }

    /// Row and column factors for lanes that cross a row boundary.
    fn gather_factors(&self, n: usize, mut row: usize, mut col: usize, r: &mut [Tile; 3], c: &mut [Tile; 3]) {
        for l in 0..n {
            for i in 0..3 {
                r[i][l] = self.row_factors[i][row];
                c[i][l] = self.col_factors[i][col];
            }
            col += 1;
            if col == self.cols {
                col = 0;
                row += 1;
            }
        }
    }

    /// [`Self::features_into`] for local elements `k0..k0 + w.len()` at once:
    /// `out[f][l]` is feature `f` of element `k0 + l`. Lanes past `w.len()`
    /// hold finite filler.
    #[inline]
    pub(crate) fn features_tile(&self, k0: usize, w: &[f32], out: &mut [Tile]) {
        let n = w.len();
        debug_assert!(n <= LANES);
        let eps = self.spec.eps_recip;
        let mut g = Tile::ZERO;
        let mut m = [Tile::ZERO; 3];
        let mut v = Tile::ZERO;
        let mut r = [Tile::ZERO; 3];
        let mut c = [Tile::ZERO; 3];
        let mut wt = Tile::ZERO;
        let span = k0..k0 + n;
        g[..n].copy_from_slice(&self.g[span.clone()]);
        v[..n].copy_from_slice(&self.second_moment[span.clone()]);
        wt[..n].copy_from_slice(w);
        for j in 0..3 {
            m[j][..n].copy_from_slice(&self.momentum[j][span.clone()]);
        }
        let idx = self.offset + k0;
        let (row, col) = (idx / self.cols, idx % self.cols);
        if col + n <= self.cols {
            for i in 0..3 {
                r[i] = Tile::splat(self.row_factors[i][row]);
                c[i][..n].copy_from_slice(&self.col_factors[i][col..col + n]);
            }
        } else {
            self.gather_factors(n, row, col, &mut r, &mut c);
        }

        out[0..3].copy_from_slice(&m);
        out[3] = v;
        out[4..7].copy_from_slice(&r);
        out[7..10].copy_from_slice(&c);
        let eps = Tile::splat(eps);
        let one = Tile::splat(1.0);
        let sqrt_v = v.add(eps).sqrt();
        for j in 0..3 {
            out[10 + j] = m[j].div(sqrt_v);
        }
        out[13] = one.div(sqrt_v);
        for i in 0..3 {
            out[14 + i] = one.div(r[i].add(eps).sqrt());
            out[17 + i] = one.div(c[i].add(eps).sqrt());
        }
        for i in 0..3 {
            // Tile form of `adafactor_scale_at`.
            let s = Tile::splat(self.mean_r[i]).div(r[i].mul(c[i]).add(eps)).sqrt();
            out[20 + i] = g.mul(s);
            out[23 + i] = m[i].mul(s);
        }
        match self.spec.id {
            FeatureSetId::SmallFcLopt => {
                for (row, &t) in out[26..37].iter_mut().zip(&self.time) {
                    *row = Tile::splat(t);
                }
                out[37] = wt;
                out[38] = g;
            }
            FeatureSetId::VeloMlp => {
                let clip = self.spec.clip_bound;
                out[26] = wt;
                out[27] = g;
                for l in 0..LANES {
                    out[28][l] = g[l].clamp(-clip, clip);
                }
            }
        }
    }
}

/// Features of element `idx` of a whole tensor.
pub fn construct_features_at(
    idx: usize,
    w: &ParamTensor,
    g: &ParamTensor,
    state: &OptState,
    spec: &FeatureSetSpec,
) -> Result<Vec<f32>> {
    w.ensure_shape(state.shape())?;
    if idx >= w.len() {
        return Err(Error::DimMismatch {
            expected: w.len(),
            got: idx,
        });
    }
    let ctx = FeatureContext::new(g, state, spec)?;
    let mut out = vec![0.0; spec.d_feat];
    ctx.features_into(idx, w.as_slice()[idx], &mut out);
    debug_assert_eq!(out.len(), spec.id.d_feat());
    if let Some(k) = out.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index: k });
    }
    Ok(out)
}

/// Column-wise sums of squared features over `count` elements.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub sumsq: Vec<f64>,
    pub count: u64,
}

impl FeatureStats {
    pub fn zeros(d_feat: usize) -> Self {
        Self {
            sumsq: vec![0.0; d_feat],
            count: 0,
        }
    }

    #[inline]
    pub fn accumulate(&mut self, feat: &[f32]) {
        for (s, &f) in self.sumsq.iter_mut().zip(feat) {
            let f = f as f64;
            *s += f * f;
        }
        self.count += 1;
    }

    /// Adds the statistics of a disjoint element range.
    pub fn merge(&mut self, other: &FeatureStats) -> Result<()> {
        if self.sumsq.len() != other.sumsq.len() {
            return Err(Error::DimMismatch {
                expected: self.sumsq.len(),
                got: other.sumsq.len(),
            });
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    /// Mean of squares per column.
    pub fn mean_square(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.sumsq.iter().map(|s| s / n).collect()
    }

    /// Per-column factors `1 / sqrt(sumsq / count + eps_norm)`, rounded
    /// toward zero so a normalized column's mean square stays at or below one.
    pub fn scales(&self, eps_norm: f64) -> Result<NormScales> {
        if self.count == 0 {
            return Err(Error::EmptyTensor { rows: 0, cols: 0 });
        }
        Ok(NormScales(
            self.mean_square()
                .into_iter()
                .map(|ms| {
                    let exact = 1.0 / (ms + eps_norm).sqrt();
                    let s = exact as f32;
                    if s as f64 > exact {
                        s.next_down()
                    } else {
                        s
                    }
                })
                .collect(),
        ))
    }
}

/// Normalization multipliers broadcast to every element.
#[derive(Debug, Clone, PartialEq)]
pub struct NormScales(pub Vec<f32>);

impl NormScales {
    #[inline]
    pub fn apply(&self, feat: &mut [f32]) {
        for (f, &s) in feat.iter_mut().zip(&self.0) {
            *f *= s;
        }
    }
}

/// `E[feature^2]` statistics of a whole tensor, accumulated sequentially.
pub fn compute_squared_average(
    w: &ParamTensor,
    g: &ParamTensor,
    state: &OptState,
    spec: &FeatureSetSpec,
) -> Result<FeatureStats> {
    w.ensure_shape(state.shape())?;
    let ctx = FeatureContext::new(g, state, spec)?;
    let mut stats = FeatureStats::zeros(spec.d_feat);
    let mut buf = [0.0f32; MAX_FEATURES];
    for (k, &wv) in w.as_slice().iter().enumerate() {
        ctx.features_into(k, wv, &mut buf);
        stats.accumulate(&buf[..spec.d_feat]);
    }
    Ok(stats)
}

/// `feat[k] / sqrt(sumsq[k] / count + eps_norm)`.
pub fn normalize_features(feat: &[f32], stats: &FeatureStats, spec: &FeatureSetSpec) -> Result<Vec<f32>> {
    if feat.len() != stats.sumsq.len() {
        return Err(Error::DimMismatch {
            expected: stats.sumsq.len(),
            got: feat.len(),
        });
    }
    let mut out = feat.to_vec();
    stats.scales(spec.eps_norm)?.apply(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::BetaConfig;
    use crate::synth::random_case;
    use proptest::prelude::*;

    #[test]
    fn column_counts() {
        assert_eq!(FeatureSetSpec::small_fc_lopt().column_names().len(), 39);
        assert_eq!(FeatureSetSpec::velo_mlp().column_names().len(), 29);
        FeatureSetSpec::small_fc_lopt().validate().unwrap();
        FeatureSetSpec::velo_mlp().validate().unwrap();
    }

    #[test]
    fn fresh_state_features() {
        let spec = FeatureSetSpec::small_fc_lopt();
        let w = ParamTensor::zeros(2, 2).unwrap();
        let g = ParamTensor::zeros(2, 2).unwrap();
        let state = OptState::new(2, 2).unwrap();
        let f = construct_features_at(3, &w, &g, &state, &spec).unwrap();
        let recip = 1.0 / (1e-12f32).sqrt();
        for (k, &x) in f.iter().enumerate() {
            let expected = if k == 13 || (14..20).contains(&k) { recip } else { 0.0 };
            assert_eq!(x, expected, "column {k}");
        }
        assert!((recip - 1e6).abs() < 1.0);
    }

    #[test]
    fn time_feature_value() {
        assert!((time_feature(100, 100.0) - 0.761_594_2).abs() < 1e-6);
        let spec = FeatureSetSpec::small_fc_lopt();
        let w = ParamTensor::zeros(1, 1).unwrap();
        let g = ParamTensor::zeros(1, 1).unwrap();
        let mut state = OptState::new(1, 1).unwrap();
        state.step = 100;
        let f = construct_features_at(0, &w, &g, &state, &spec).unwrap();
        // horizon 100 is the fifth time column
        assert!((f[26 + 4] - 0.761_594_2).abs() < 1e-6);
    }

    #[test]
    fn tile_matches_per_element() {
        for spec in [FeatureSetSpec::small_fc_lopt(), FeatureSetSpec::velo_mlp()] {
            let case = random_case(5, 7, 11, &BetaConfig::default());
            let ctx = FeatureContext::new(&case.g, &case.state, &spec).unwrap();
            let w = case.w.as_slice();
            let mut tile = [Tile::ZERO; MAX_FEATURES];
            let mut feat = [0.0f32; MAX_FEATURES];
            for k0 in [0, 3, 30] {
                let n = LANES.min(w.len() - k0);
                ctx.features_tile(k0, &w[k0..k0 + n], &mut tile);
                for l in 0..n {
                    ctx.features_into(k0 + l, w[k0 + l], &mut feat);
                    for f in 0..spec.d_feat {
                        assert_eq!(tile[f][l].to_bits(), feat[f].to_bits(), "k {} f {f}", k0 + l);
                    }
                }
                assert!(tile[..spec.d_feat].iter().flat_map(|t| t.0).all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn velo_clipped_gradient() {
        let spec = FeatureSetSpec::velo_mlp();
        let w = ParamTensor::zeros(1, 2).unwrap();
        let g = ParamTensor::from_vec(1, 2, vec![0.5, -0.05]).unwrap();
        let state = OptState::new(1, 2).unwrap();
        let a = construct_features_at(0, &w, &g, &state, &spec).unwrap();
        let b = construct_features_at(1, &w, &g, &state, &spec).unwrap();
        assert_eq!(a.len(), 29);
        assert_eq!((a[27], a[28]), (0.5, 0.1));
        assert_eq!((b[27], b[28]), (-0.05, -0.05));
    }

    #[test]
    fn adafactor_scale_cases() {
        let s = adafactor_scale(&[1.0, 1.0], &[1.0, 1.0, 1.0], 0.0).unwrap();
        assert!(s.as_slice().iter().all(|&x| x == 1.0));
        let s = adafactor_scale(&[4.0], &[1.0], 0.0).unwrap();
        assert_eq!(s.as_slice(), &[1.0]);
        let s = adafactor_scale(&[1.0, 3.0], &[2.0], 0.0).unwrap();
        assert_eq!(s.shape(), (2, 1));
        assert!((s.as_slice()[0] - 1.0).abs() < 1e-7);
        assert!((s.as_slice()[1] - 0.577_350_3).abs() < 1e-6);
    }

    #[test]
    fn constant_column_stats_and_normalization() {
        let mut stats = FeatureStats::zeros(2);
        for _ in 0..10 {
            stats.accumulate(&[2.0, 0.0]);
        }
        assert_eq!(stats.sumsq, vec![40.0, 0.0]);
        let spec = FeatureSetSpec::small_fc_lopt();
        let out = normalize_features(&[2.0, 0.0], &stats, &spec).unwrap();
        let expected = 2.0 / (4.0f64 + 1e-5).sqrt();
        assert!((out[0] as f64 - expected).abs() < 1e-6);
        assert!((out[0] - 1.0).abs() < 1e-5);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn zero_state_squared_average() {
        let spec = FeatureSetSpec::small_fc_lopt();
        let w = ParamTensor::zeros(3, 4).unwrap();
        let g = ParamTensor::zeros(3, 4).unwrap();
        let state = OptState::new(3, 4).unwrap();
        let stats = compute_squared_average(&w, &g, &state, &spec).unwrap();
        assert_eq!(stats.count, 12);
        // Oracle: plug the guards into the definition.
        let recip = (1.0 / (1e-12f32).sqrt()) as f64;
        for (k, &s) in stats.sumsq.iter().enumerate() {
            let expected = if k == 13 || (14..20).contains(&k) { 12.0 * recip * recip } else { 0.0 };
            assert!((s - expected).abs() <= 1e-9 * expected.max(1.0), "column {k}");
        }
        assert!(compute_squared_average(
            &ParamTensor::zeros(0, 3).unwrap(),
            &ParamTensor::zeros(0, 3).unwrap(),
            &OptState::new(0, 3).unwrap(),
            &spec
        )
        .is_err());
    }

    #[test]
    fn shard_contexts_match_whole_tensor() {
        let spec = FeatureSetSpec::small_fc_lopt();
        let case = random_case(5, 7, 11, &BetaConfig::default());
        let whole = FeatureContext::new(&case.g, &case.state, &spec).unwrap();
        let off = 13;
        let s = &case.state;
        let shard = FeatureContext::for_range(
            &spec,
            (5, 7),
            off,
            &case.g.as_slice()[off..],
            [&s.momentum[0][off..], &s.momentum[1][off..], &s.momentum[2][off..]],
            &s.second_moment[off..],
            [&s.row_factors[0], &s.row_factors[1], &s.row_factors[2]],
            [&s.col_factors[0], &s.col_factors[1], &s.col_factors[2]],
            s.step,
        )
        .unwrap();
        let mut a = [0.0; MAX_FEATURES];
        let mut b = [0.0; MAX_FEATURES];
        for k in 0..shard.len() {
            let w = case.w.as_slice()[off + k];
            whole.features_into(off + k, w, &mut a);
            shard.features_into(k, w, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn metadata_round_trip() {
        let spec = FeatureSetSpec::velo_mlp();
        assert_eq!(FeatureSetSpec::from_metadata(&spec.to_metadata()).unwrap(), spec);
        assert_eq!(FeatureSetSpec::from_metadata("small_fc_lopt").unwrap(), FeatureSetSpec::small_fc_lopt());
        assert!(FeatureSetSpec::from_metadata("adam").is_err());
    }

    proptest! {
        #[test]
        fn row_derived_features_broadcast(seed in any::<u64>(), row in 0usize..4) {
            let spec = FeatureSetSpec::small_fc_lopt();
            let case = random_case(4, 6, seed, &BetaConfig::default());
            let ctx = FeatureContext::new(&case.g, &case.state, &spec).unwrap();
            let mut first = [0.0; MAX_FEATURES];
            let mut other = [0.0; MAX_FEATURES];
            ctx.features_into(row * 6, case.w.as_slice()[row * 6], &mut first);
            for col in 1..6 {
                let k = row * 6 + col;
                ctx.features_into(k, case.w.as_slice()[k], &mut other);
                // r values and 1/sqrt(r)
                prop_assert_eq!(&first[4..7], &other[4..7]);
                prop_assert_eq!(&first[14..17], &other[14..17]);
            }
        }

        #[test]
        fn time_features_monotone(t in 0u64..200_000, dt in 0u64..1000, xi in 0usize..11) {
            let x = TIME_HORIZONS[xi];
            let a = time_feature(t, x);
            let b = time_feature(t + dt, x);
            prop_assert!(a <= b);
            prop_assert!(b <= 1.0);
        }

        #[test]
        fn features_are_finite_and_sized(seed in any::<u64>(), velo in any::<bool>()) {
            let spec = if velo { FeatureSetSpec::velo_mlp() } else { FeatureSetSpec::small_fc_lopt() };
            let case = random_case(3, 5, seed, &BetaConfig::default());
            for idx in 0..15 {
                let f = construct_features_at(idx, &case.w, &case.g, &case.state, &spec).unwrap();
                prop_assert_eq!(f.len(), spec.id.d_feat());
                prop_assert!(f.iter().all(|x| x.is_finite()));
            }
        }
    }
}
