//! The optimizer MLP: dense layers with ReLU between them and an identity
//! output producing `(direction, magnitude)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSetId, FeatureSetSpec, Tile};
use crate::state::BetaConfig;
use crate::synth;
use crate::tensors::{NamedTensorFile, ParamTensor, TensorEntry};

/// Default exponent scale and output scale of the update rule.
pub const DEFAULT_ALPHA: f32 = 0.01;
pub const DEFAULT_BETA_OUT: f32 = 0.01;
pub const DEFAULT_HIDDEN: [usize; 2] = [32, 32];

/// Whether the update is subtracted from (`Descent`) or added to the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateSign {
    #[default]
    Descent,
    Ascent,
}

impl UpdateSign {
    #[inline]
    pub fn apply(self, theta: f32, delta: f32) -> f32 {
        match self {
            UpdateSign::Descent => theta - delta,
            UpdateSign::Ascent => theta + delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`, row-major.
    weight: ParamTensor,
    bias: Vec<f32>,
}

impl DenseLayer {
    /// `weight` is `out x in`.
    pub fn new(weight: ParamTensor, bias: Vec<f32>) -> Result<Self> {
        let out = weight.rows();
        if bias.len() != out {
            return Err(Error::DimMismatch {
                expected: out,
                got: bias.len(),
            });
        }
        if let Some(index) = bias.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &ParamTensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.weight.as_slice().chunks_exact(self.input_dim())
    }

    /// `out = x W^T + b` for one element. Each output accumulates its inputs in
    /// index order starting from zero, then adds the bias.
    pub(crate) fn forward_into(&self, x: &[f32], out: &mut [f32], relu: bool) {
        for ((o, wrow), &b) in out.iter_mut().zip(self.rows()).zip(&self.bias) {
            let mut acc = 0.0f32;
            for (&xk, &w) in x.iter().zip(wrow) {
                acc = xk.mul_add(w, acc);
            }
            acc += b;
            *o = if relu { acc.max(0.0) } else { acc };
        }
    }

    /// Same arithmetic as [`Self::forward_into`] for `LANES` elements at once;
    /// `x[k]` holds input `k` of every lane.
    #[inline]
    pub(crate) fn forward_tile(&self, x: &[Tile], out: &mut [Tile], relu: bool) {
        if relu {
            self.forward_tile_impl::<true>(x, out);
        } else {
            self.forward_tile_impl::<false>(x, out);
        }
    }

    #[inline]
    fn forward_tile_impl<const RELU: bool>(&self, x: &[Tile], out: &mut [Tile]) {
        let n_in = self.input_dim();
        let x = &x[..n_in];
        let rows = self.weight.as_slice().chunks_exact(OUT_BLOCK * n_in);
        let biases = self.bias.chunks_exact(OUT_BLOCK);
        let (w_rest, b_rest) = (rows.remainder(), biases.remainder());
        let mut outs = out[..self.output_dim()].chunks_exact_mut(OUT_BLOCK);
        for ((o, w), b) in (&mut outs).zip(rows).zip(biases) {
            tile_block::<OUT_BLOCK, RELU>(x, w, b, o.try_into().expect("exact chunk"));
        }
        let tail = outs.into_remainder();
        match tail.len() {
            0 => {}
            1 => tile_block::<1, RELU>(x, w_rest, b_rest, tail.try_into().expect("len")),
            2 => tile_block::<2, RELU>(x, w_rest, b_rest, tail.try_into().expect("len")),
            3 => tile_block::<3, RELU>(x, w_rest, b_rest, tail.try_into().expect("len")),
            4 => tile_block::<4, RELU>(x, w_rest, b_rest, tail.try_into().expect("len")),
            5 => tile_block::<5, RELU>(x, w_rest, b_rest, tail.try_into().expect("len")),
            6 => tile_block::<6, RELU>(x, w_rest, b_rest, tail.try_into().expect("len")),
            _ => tile_block::<7, RELU>(x, w_rest, b_rest, tail.try_into().expect("len")),
        }
    }
}

/// Output rows computed together; independent accumulators hide add latency.
const OUT_BLOCK: usize = 8;

/// `J` consecutive outputs with weight rows `w` (`J x in`) and biases `b`.
#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
#[inline(always)]
fn tile_block<const J: usize, const RELU: bool>(x: &[Tile], w: &[f32], b: &[f32], out: &mut [Tile; J]) {
    use crate::features::LANES;
    let n_in = x.len();
    assert!(w.len() >= J * n_in && b.len() >= J);
    let mut acc = [Tile::ZERO; J];
    for (k, xk) in x.iter().enumerate() {
        for (jj, a) in acc.iter_mut().enumerate() {
            let wk = w[jj * n_in + k];
            for l in 0..LANES {
                a[l] = xk[l].mul_add(wk, a[l]);
            }
        }
    }
    for ((o, a), &bias) in out.iter_mut().zip(acc).zip(b) {
        for l in 0..LANES {
            let v = a[l] + bias;
            o[l] = if RELU { v.max(0.0) } else { v };
        }
    }
}

/// `J` consecutive outputs with weight rows `w` (`J x in`) and biases `b`.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
#[inline(always)]
fn tile_block<const J: usize, const RELU: bool>(x: &[Tile], w: &[f32], b: &[f32], out: &mut [Tile; J]) {
    use crate::features::{LANES, REG};
    use std::arch::x86_64::*;
    let n_in = x.len();
    assert!(w.len() >= J * n_in && b.len() >= J);
    // SAFETY: avx512f is enabled for this build, `Tile` is 64-byte aligned as the
    // aligned loads and stores require, and the weight indices are bounded by the assert.
    unsafe {
        const H: usize = LANES / REG;
        let mut acc = [[_mm512_setzero_ps(); H]; J];
        let rows: [*const f32; J] = std::array::from_fn(|jj| w.as_ptr().add(jj * n_in));
        for (k, xk) in x.iter().enumerate() {
            let xv: [__m512; H] = std::array::from_fn(|h| _mm512_load_ps(xk.0.as_ptr().add(h * REG)));
            for (a, row) in acc.iter_mut().zip(rows) {
                let wk = _mm512_set1_ps(*row.add(k));
                for h in 0..H {
                    a[h] = _mm512_fmadd_ps(xv[h], wk, a[h]);
                }
            }
        }
        for ((o, a), &bias) in out.iter_mut().zip(acc).zip(b) {
            let bias = _mm512_set1_ps(bias);
            for h in 0..H {
                let mut v = _mm512_add_ps(a[h], bias);
                if RELU {
                    v = _mm512_max_ps(v, _mm512_setzero_ps());
                }
                _mm512_store_ps(o.0.as_mut_ptr().add(h * REG), v);
            }
        }
    }
}

/// Learned-optimizer parameters: the MLP plus update-rule constants and the
/// accumulator decay coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LoptWeights {
    feature_set: FeatureSetId,
    layers: Vec<DenseLayer>,
    pub alpha: f32,
    pub beta_out: f32,
    pub betas: BetaConfig,
    pub update_sign: UpdateSign,
}

impl LoptWeights {
    pub fn new(feature_set: FeatureSetId, layers: Vec<DenseLayer>) -> Result<Self> {
        let w = Self {
            feature_set,
            layers,
            alpha: DEFAULT_ALPHA,
            beta_out: DEFAULT_BETA_OUT,
            betas: BetaConfig::default(),
            update_sign: UpdateSign::Descent,
        };
        w.validate()?;
        Ok(w)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidConfig("MLP needs at least one layer".into()))?;
        if first.input_dim() != self.feature_set.d_feat() {
            return Err(Error::DimMismatch {
                expected: self.feature_set.d_feat(),
                got: first.input_dim(),
            });
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimMismatch {
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        let last = self.layers.last().expect("non-empty");
        if last.output_dim() != 2 {
            return Err(Error::DimMismatch {
                expected: 2,
                got: last.output_dim(),
            });
        }
        self.betas.validate()
    }

    fn dims(feature_set: FeatureSetId, hidden: &[usize]) -> Vec<usize> {
        let mut dims = vec![feature_set.d_feat()];
        dims.extend_from_slice(hidden);
        dims.push(2);
        dims
    }

    /// All weights and biases zero.
    pub fn zeros(feature_set: FeatureSetId, hidden: &[usize]) -> Result<Self> {
        let dims = Self::dims(feature_set, hidden);
        let layers = dims
            .windows(2)
            .map(|d| DenseLayer::new(ParamTensor::zeros(d[1], d[0])?, vec![0.0; d[1]]))
            .collect::<Result<_>>()?;
        Self::new(feature_set, layers)
    }

    /// Seeded uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn random(feature_set: FeatureSetId, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut rng = synth::rng(seed);
        let dims = Self::dims(feature_set, hidden);
        let layers = dims
            .windows(2)
            .map(|d| {
                let bound = 1.0 / (d[0] as f32).sqrt();
                let w = synth::uniform_tensor(d[1], d[0], bound, &mut rng);
                let b = (0..d[1]).map(|_| rng.gen_range(-bound..bound)).collect();
                DenseLayer::new(w, b)
            })
            .collect::<Result<_>>()?;
        Self::new(feature_set, layers)
    }

    /// Copy with the output layer's weights and bias set to zero.
    pub fn with_zero_output(&self) -> Self {
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("validated");
        let (o, i) = last.weight.shape();
        *last = DenseLayer::new(ParamTensor::zeros(o, i).expect("small"), vec![0.0; o]).expect("valid");
        out
    }

    pub fn feature_set(&self) -> FeatureSetId {
        self.feature_set
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Widest layer output, the activation buffer size needed by `forward`.
    pub fn max_width(&self) -> usize {
        self.layers.iter().map(DenseLayer::output_dim).max().unwrap_or(0)
    }

    /// Layer sizes, e.g. `[39, 32, 32, 2]`.
    pub fn topology(&self) -> Vec<usize> {
        let mut t = vec![self.input_dim()];
        t.extend(self.layers.iter().map(DenseLayer::output_dim));
        t
    }

    /// Forward pass for one element using buffers of at least `max_width()`.
    pub(crate) fn forward_with(&self, feat: &[f32], a: &mut [f32], b: &mut [f32]) -> (f32, f32) {
        let last = self.layers.len() - 1;
        let (mut src, mut dst) = (a, b);
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { feat } else { &src[..layer.input_dim()] };
            layer.forward_into(input, dst, l != last);
            std::mem::swap(&mut src, &mut dst);
        }
        (src[0], src[1])
    }

    /// Forward pass for a tile of `LANES` elements. Returns `(direction, magnitude)` rows.
    #[inline]
    pub(crate) fn forward_tile(&self, feat: &[Tile], a: &mut [Tile], b: &mut [Tile]) -> (Tile, Tile) {
        let last = self.layers.len() - 1;
        let (mut src, mut dst) = (a, b);
        for (l, layer) in self.layers.iter().enumerate() {
            let out = &mut dst[..layer.output_dim()];
            if l == 0 {
                layer.forward_tile(feat, out, l != last);
            } else {
                layer.forward_tile(&src[..layer.input_dim()], out, l != last);
            }
            std::mem::swap(&mut src, &mut dst);
        }
        (src[0], src[1])
    }

    pub fn to_file(&self) -> NamedTensorFile {
        let mut file = NamedTensorFile::new();
        self.write_to("lopt", &mut file);
        file.set_meta("kind", "weights");
        file.set_meta("feature_set", FeatureSetSpec::for_id(self.feature_set).to_metadata());
        file
    }

    /// Writes layers as `<prefix>/layer{i}/{weight,bias}` and constants as
    /// `<prefix>/...` metadata.
    pub fn write_to(&self, prefix: &str, file: &mut NamedTensorFile) {
        for (i, layer) in self.layers.iter().enumerate() {
            file.insert(format!("{prefix}/layer{i}/weight"), layer.weight.to_entry())
                .expect("unique layer names");
            file.insert(
                format!("{prefix}/layer{i}/bias"),
                TensorEntry::from_f32(vec![layer.bias.len()], &layer.bias),
            )
            .expect("unique layer names");
        }
        file.set_meta(format!("{prefix}/feature_set"), self.feature_set.as_str());
        file.set_meta(format!("{prefix}/alpha"), self.alpha.to_string());
        file.set_meta(format!("{prefix}/beta_out"), self.beta_out.to_string());
        file.set_meta(
            format!("{prefix}/update_sign"),
            serde_json::to_string(&self.update_sign).expect("serializes"),
        );
        file.set_meta(
            format!("{prefix}/betas"),
            serde_json::to_string(&self.betas).expect("serializes"),
        );
    }

    pub fn from_file(file: &NamedTensorFile) -> Result<Self> {
        Self::read_from("lopt", file)
    }

    pub fn read_from(prefix: &str, file: &NamedTensorFile) -> Result<Self> {
        let meta = |key: &str| file.meta(&format!("{prefix}/{key}"));
        let feature_set: FeatureSetId = match meta("feature_set") {
            Some(id) => id.parse()?,
            None => FeatureSetSpec::from_metadata(file.meta("feature_set").ok_or_else(|| {
                Error::InvalidConfig("weights file has no feature_set".into())
            })?)?
            .id,
        };
        let mut layers = Vec::new();
        for i in 0.. {
            let Some(w) = file.get(&format!("{prefix}/layer{i}/weight")) else {
                break;
            };
            let weight = ParamTensor::from_entry(w)?;
            let bias = file.require(&format!("{prefix}/layer{i}/bias"))?.to_f32()?;
            layers.push(DenseLayer::new(weight, bias)?);
        }
        let mut weights = Self::new(feature_set, layers)?;
        let parse_f32 = |key: &str, default: f32| -> Result<f32> {
            match meta(key) {
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad `{key}` value `{s}`"))),
                None => Ok(default),
            }
        };
        weights.alpha = parse_f32("alpha", DEFAULT_ALPHA)?;
        weights.beta_out = parse_f32("beta_out", DEFAULT_BETA_OUT)?;
        if let Some(s) = meta("update_sign") {
            weights.update_sign =
                serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        if let Some(s) = meta("betas") {
            weights.betas = serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        weights.validate()?;
        Ok(weights)
    }
}

/// Runs the MLP on one feature vector, returning `(direction, magnitude)`.
pub fn mlp_forward(feat: &[f32], weights: &LoptWeights) -> Result<(f32, f32)> {
    if feat.len() != weights.input_dim() {
        return Err(Error::DimMismatch {
            expected: weights.input_dim(),
            got: feat.len(),
        });
    }
    let width = weights.max_width();
    let mut a = vec![0.0; width];
    let mut b = vec![0.0; width];
    Ok(weights.forward_with(feat, &mut a, &mut b))
}

/// `direction * exp(magnitude * alpha) * beta_out`.
#[inline]
pub fn update_delta(direction: f32, magnitude: f32, alpha: f32, beta_out: f32) -> f32 {
    direction * (magnitude * alpha).exp() * beta_out
}

/// `theta - direction * exp(magnitude * alpha) * beta_out`.
pub fn apply_update(theta: f32, direction: f32, magnitude: f32, alpha: f32, beta_out: f32) -> Result<f32> {
    let exponent = magnitude * alpha;
    if !exponent.exp().is_finite() {
        return Err(Error::UpdateOverflow { index: 0, exponent });
    }
    Ok(UpdateSign::Descent.apply(theta, update_delta(direction, magnitude, alpha, beta_out)))
}
