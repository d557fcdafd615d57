//! Per-tensor accumulators: three momenta, a second moment and three pairs of
//! Adafactor row/column factors.
//!
//! Every accumulator is an exponential moving average `beta * prev + (1 - beta) * x`
//! evaluated in `f32`, without bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{FormatError, NamedTensorFile, ParamTensor, TensorEntry};

/// Decay coefficients for the ten accumulators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaConfig {
    pub momentum: [f32; 3],
    pub second_moment: f32,
    pub adafactor: [f32; 3],
}

impl Default for BetaConfig {
    /// Placeholder coefficients used when a weights file carries none.
    fn default() -> Self {
        Self {
            momentum: [0.1, 0.5, 0.9],
            second_moment: 0.999,
            adafactor: [0.9, 0.99, 0.999],
        }
    }
}

impl BetaConfig {
    pub fn uniform(beta: f32) -> Self {
        Self {
            momentum: [beta; 3],
            second_moment: beta,
            adafactor: [beta; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .momentum
            .iter()
            .chain(std::iter::once(&self.second_moment))
            .chain(self.adafactor.iter());
        for &b in all {
            check_beta(b)?;
        }
        Ok(())
    }
}

fn check_beta(beta: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("beta {beta} outside [0, 1]")));
    }
    Ok(())
}

#[inline]
pub(crate) fn ema(prev: f32, x: f32, beta: f32) -> f32 {
    beta * prev + (1.0 - beta) * x
}

/// `beta * m_prev + (1 - beta) * g`, elementwise.
pub fn update_momentum(m_prev: &ParamTensor, g: &ParamTensor, beta: f32) -> Result<ParamTensor> {
    check_beta(beta)?;
    g.ensure_shape(m_prev.shape())?;
    let data = m_prev
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(&m, &g)| ema(m, g, beta))
        .collect();
    ParamTensor::from_vec(m_prev.rows(), m_prev.cols(), data)
}

/// `beta * v_prev + (1 - beta) * g^2`, elementwise.
pub fn update_second_moment(v_prev: &ParamTensor, g: &ParamTensor, beta: f32) -> Result<ParamTensor> {
    check_beta(beta)?;
    g.ensure_shape(v_prev.shape())?;
    let data = v_prev
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(&v, &g)| ema(v, g * g, beta))
        .collect();
    ParamTensor::from_vec(v_prev.rows(), v_prev.cols(), data)
}

/// Row and column sums of `g^2` for a contiguous range of a `rows x cols`
/// tensor, in `f64`. Partial sums from disjoint ranges add up to the sums of
/// the whole tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareSums {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
}

impl SquareSums {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            row: vec![0.0; rows],
            col: vec![0.0; cols],
        }
    }

    /// Accumulates `g[offset..offset + g.len()]` of a tensor with `cols` columns.
    pub fn accumulate(&mut self, cols: usize, offset: usize, g: &[f32]) {
        for (k, &x) in g.iter().enumerate() {
            let idx = offset + k;
            let sq = (x * x) as f64;
            self.row[idx / cols] += sq;
            self.col[idx % cols] += sq;
        }
    }

    pub fn of(g: &ParamTensor) -> Self {
        let mut s = Self::zeros(g.rows(), g.cols());
        s.accumulate(g.cols(), 0, g.as_slice());
        s
    }

    /// Adds `other` into `self` (disjoint ranges of the same tensor).
    pub fn merge(&mut self, other: &SquareSums) {
        for (a, b) in self.row.iter_mut().zip(&other.row) {
            *a += b;
        }
        for (a, b) in self.col.iter_mut().zip(&other.col) {
            *a += b;
        }
    }

    /// Per-row mean over `cols` columns and per-column mean over `rows` rows.
    pub fn means(&self) -> (Vec<f32>, Vec<f32>) {
        let (rows, cols) = (self.row.len() as f64, self.col.len() as f64);
        (
            self.row.iter().map(|s| (s / cols) as f32).collect(),
            self.col.iter().map(|s| (s / rows) as f32).collect(),
        )
    }
}

fn ema_vector(prev: &mut [f32], mean: &[f32], beta: f32) {
    for (p, &x) in prev.iter_mut().zip(mean) {
        *p = ema(*p, x, beta);
    }
}

/// Adafactor factor update: `r` tracks row means of `g^2`, `c` column means.
pub fn update_adafactor(
    r_prev: &[f32],
    c_prev: &[f32],
    g: &ParamTensor,
    beta: f32,
) -> Result<(Vec<f32>, Vec<f32>)> {
    check_beta(beta)?;
    let (m, n) = g.shape();
    if m == 0 || n == 0 {
        return Err(Error::EmptyTensor { rows: m, cols: n });
    }
    if r_prev.len() != m {
        return Err(Error::DimMismatch {
            expected: m,
            got: r_prev.len(),
        });
    }
    if c_prev.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: c_prev.len(),
        });
    }
    let (row_mean, col_mean) = SquareSums::of(g).means();
    let mut r = r_prev.to_vec();
    let mut c = c_prev.to_vec();
    ema_vector(&mut r, &row_mean, beta);
    ema_vector(&mut c, &col_mean, beta);
    Ok((r, c))
}

/// Updates the elementwise accumulators over one contiguous slice.
pub(crate) fn update_elementwise(
    momentum: [&mut [f32]; 3],
    second_moment: &mut [f32],
    g: &[f32],
    betas: &BetaConfig,
) {
    for (m, beta) in momentum.into_iter().zip(betas.momentum) {
        for (m, &g) in m.iter_mut().zip(g) {
            *m = ema(*m, g, beta);
        }
    }
    let b4 = betas.second_moment;
    for (v, &g) in second_moment.iter_mut().zip(g) {
        *v = ema(*v, g * g, b4);
    }
}

/// Updates the three row/column factor pairs from (possibly merged) square sums.
pub(crate) fn update_factors(
    rows: &mut [Vec<f32>; 3],
    cols: &mut [Vec<f32>; 3],
    sums: &SquareSums,
    betas: &BetaConfig,
) {
    let (row_mean, col_mean) = sums.means();
    for i in 0..3 {
        ema_vector(&mut rows[i], &row_mean, betas.adafactor[i]);
        ema_vector(&mut cols[i], &col_mean, betas.adafactor[i]);
    }
}

pub(crate) fn first_non_finite(g: &[f32]) -> Option<usize> {
    g.iter().position(|x| !x.is_finite())
}

/// Accumulator bundle for one `rows x cols` parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    rows: usize,
    cols: usize,
    pub momentum: [Vec<f32>; 3],
    pub second_moment: Vec<f32>,
    /// Row factors, length `rows`.
    pub row_factors: [Vec<f32>; 3],
    /// Column factors, length `cols`.
    pub col_factors: [Vec<f32>; 3],
    /// Number of completed steps.
    pub step: u64,
}

impl OptState {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        let len = rows
            .checked_mul(cols)
            .ok_or(Error::SizeOverflow { rows, cols })?;
        let full = || vec![0.0f32; len];
        Ok(Self {
            rows,
            cols,
            momentum: [full(), full(), full()],
            second_moment: full(),
            row_factors: std::array::from_fn(|_| vec![0.0; rows]),
            col_factors: std::array::from_fn(|_| vec![0.0; cols]),
            step: 0,
        })
    }

    pub fn for_tensor(w: &ParamTensor) -> Result<Self> {
        Self::new(w.rows(), w.cols())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes of accumulator storage held by this state.
    pub fn size_bytes(&self) -> usize {
        let elementwise = 4 * self.len();
        let factors = 3 * (self.rows + self.cols);
        (elementwise + factors) * std::mem::size_of::<f32>() + std::mem::size_of::<u64>()
    }

    /// Advances all ten accumulators with gradient `g` and increments the step.
    /// Nothing is modified if `g` has the wrong shape or contains NaN/Inf.
    pub fn step(&mut self, g: &ParamTensor, betas: &BetaConfig) -> Result<()> {
        betas.validate()?;
        g.ensure_shape(self.shape())?;
        if self.is_empty() {
            return Err(Error::EmptyTensor {
                rows: self.rows,
                cols: self.cols,
            });
        }
        if let Some(index) = first_non_finite(g.as_slice()) {
            return Err(Error::NonFinite { index });
        }
        let [m0, m1, m2] = &mut self.momentum;
        update_elementwise([m0, m1, m2], &mut self.second_moment, g.as_slice(), betas);
        update_factors(
            &mut self.row_factors,
            &mut self.col_factors,
            &SquareSums::of(g),
            betas,
        );
        self.step += 1;
        Ok(())
    }

    /// Writes this state under `state/<tensor>/...` in `file`.
    pub fn write_to(&self, tensor: &str, file: &mut NamedTensorFile) -> Result<(), FormatError> {
        let shape = vec![self.rows, self.cols];
        for (i, m) in self.momentum.iter().enumerate() {
            file.insert(format!("state/{tensor}/M{i}"), TensorEntry::from_f32(shape.clone(), m))?;
        }
        file.insert(
            format!("state/{tensor}/V"),
            TensorEntry::from_f32(shape, &self.second_moment),
        )?;
        for (i, r) in self.row_factors.iter().enumerate() {
            file.insert(format!("state/{tensor}/r{i}"), TensorEntry::from_f32(vec![self.rows], r))?;
        }
        for (i, c) in self.col_factors.iter().enumerate() {
            file.insert(format!("state/{tensor}/c{i}"), TensorEntry::from_f32(vec![self.cols], c))?;
        }
        file.insert(format!("state/{tensor}/t"), TensorEntry::from_u64(vec![1], &[self.step]))
    }

    pub fn read_from(tensor: &str, rows: usize, cols: usize, file: &NamedTensorFile) -> Result<Self> {
        let read = |name: String, len: usize| -> Result<Vec<f32>> {
            let v = file.require(&name)?.to_f32()?;
            if v.len() != len {
                return Err(Error::DimMismatch {
                    expected: len,
                    got: v.len(),
                });
            }
            Ok(v)
        };
        let len = rows * cols;
        let momentum = [
            read(format!("state/{tensor}/M0"), len)?,
            read(format!("state/{tensor}/M1"), len)?,
            read(format!("state/{tensor}/M2"), len)?,
        ];
        let second_moment = read(format!("state/{tensor}/V"), len)?;
        let row_factors = [
            read(format!("state/{tensor}/r0"), rows)?,
            read(format!("state/{tensor}/r1"), rows)?,
            read(format!("state/{tensor}/r2"), rows)?,
        ];
        let col_factors = [
            read(format!("state/{tensor}/c0"), cols)?,
            read(format!("state/{tensor}/c1"), cols)?,
            read(format!("state/{tensor}/c2"), cols)?,
        ];
        let step = file.require(&format!("state/{tensor}/t"))?.to_u64()?;
        let step = *step.first().ok_or(Error::DimMismatch { expected: 1, got: 0 })?;
        Ok(Self {
            rows,
            cols,
            momentum,
            second_moment,
            row_factors,
            col_factors,
            step,
        })
    }
}

/// Functional form of [`OptState::step`].
pub fn state_step(state: &OptState, g: &ParamTensor, betas: &BetaConfig) -> Result<OptState> {
    let mut next = state.clone();
    next.step(g, betas)?;
    Ok(next)
}
