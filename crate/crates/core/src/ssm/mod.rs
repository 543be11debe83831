//! Selective state-space recurrence.
//!
//! Per channel `d` and state `n`, with `A = -exp(a_log)`:
//!
//! ```text
//! Ā_t = exp(Δ_t·A)        B̄_t = Δ_t·B_t
//! h_t = Ā_t ⊙ h_{t-1} + B̄_t·x_t
//! y_t = Σ_n C_t[n]·h_t[n] + D·x_t
//! ```
//!
//! `Δ`, `B`, and `C` are projections of the input token, which is what makes
//! the scan selective. [`scan_sequential`] is the plain reference;
//! [`scan_blocked`] is the kernel the model runs and must agree with it.

pub mod kernel;

use rand::Rng;

use crate::error::{Result, VimError};
use crate::tensor::ops::{self, Unary};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Initial Δ after softplus.
pub const DELTA_INIT: f64 = 0.05;

/// Learned parameters of one selective SSM with `D` channels and `N` states.
#[derive(Clone, Debug)]
pub struct SsmParams<T: Float = f32> {
    /// `[D, N]`, stores `log(-A)`.
    pub a_log: Tensor<T>,
    /// `[D]` direct feed-through.
    pub d_skip: Tensor<T>,
    /// `[D, 1]` rank-1 down-projection for Δ.
    pub w_delta: Tensor<T>,
    /// `[1, D]` up-projection back to one Δ per channel.
    pub dt_proj: Tensor<T>,
    /// `[D]` pre-softplus Δ bias.
    pub dt_bias: Tensor<T>,
    /// `[D, N]`
    pub w_b: Tensor<T>,
    /// `[D, N]`
    pub w_c: Tensor<T>,
}

impl<T: Float> SsmParams<T> {
    /// `A[d, n] = -(n + 1)`, `D = 1`, Δ bias so that softplus gives [`DELTA_INIT`],
    /// projections uniform in `±1/sqrt(fan_in)`.
    pub fn init(d: usize, n: usize, rng: &mut impl Rng) -> Self {
        let a_log = (0..d)
            .flat_map(|_| (0..n).map(|j| T::of(((j + 1) as f64).ln())))
            .collect();
        let dt_bias = T::of(DELTA_INIT.exp_m1().ln());
        SsmParams {
            a_log: Tensor::from_parts(vec![d, n], a_log),
            d_skip: Tensor::full(vec![d], T::one()),
            w_delta: uniform(vec![d, 1], d, rng),
            dt_proj: uniform(vec![1, d], 1, rng),
            dt_bias: Tensor::full(vec![d], dt_bias),
            w_b: uniform(vec![d, n], d, rng),
            w_c: uniform(vec![d, n], d, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(a_log)`
    pub fn a(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.a_log.shape().to_vec(),
            self.a_log.data().iter().map(|v| -v.exp()).collect(),
        )
    }
}

pub(crate) fn uniform<T: Float>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_parts(shape, data)
}

/// Per-token discretization inputs of one sequence.
#[derive(Clone, Debug)]
pub struct ScanInstance<T: Float = f32> {
    /// `[L, D]`
    pub x: Tensor<T>,
    /// `[L, D]`, nonnegative
    pub delta: Tensor<T>,
    /// `[L, N]`
    pub b: Tensor<T>,
    /// `[L, N]`
    pub c: Tensor<T>,
    /// `[D, N]`
    pub h0: Tensor<T>,
}

impl<T: Float> ScanInstance<T> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn validate(&self, p: &SsmParams<T>) -> Result<()> {
        let (d, n) = (p.channels(), p.state_dim());
        let l = self.x.shape()[0];
        let mismatch = |t: &Tensor<T>| VimError::Shape {
            op: "scan",
            lhs: self.x.shape().to_vec(),
            rhs: t.shape().to_vec(),
        };
        if self.x.shape() != [l, d] {
            return Err(mismatch(&p.a_log));
        }
        if self.delta.shape() != [l, d] {
            return Err(mismatch(&self.delta));
        }
        if self.b.shape() != [l, n] {
            return Err(mismatch(&self.b));
        }
        if self.c.shape() != [l, n] {
            return Err(mismatch(&self.c));
        }
        if self.h0.shape() != [d, n] {
            return Err(mismatch(&self.h0));
        }
        if self.delta.data().iter().any(|&v| v < T::zero()) {
            return Err(VimError::invalid("delta must be nonnegative"));
        }
        Ok(())
    }
}

/// Projects `x[L, D]` into the scan inputs: `Δ = softplus(x·w_delta·dt_proj + dt_bias)`,
/// `B = x·w_b`, `C = x·w_c`.
pub fn selectivize<T: Float>(x: &Tensor<T>, p: &SsmParams<T>) -> Result<ScanInstance<T>> {
    if x.rank() != 2 || x.shape()[1] != p.channels() {
        return Err(VimError::Shape {
            op: "selectivize",
            lhs: x.shape().to_vec(),
            rhs: p.w_b.shape().to_vec(),
        });
    }
    let low = ops::matmul(x, &p.w_delta)?;
    let mut pre = ops::matmul(&low, &p.dt_proj)?;
    let d = p.channels();
    for row in pre.data_mut().chunks_mut(d) {
        row.iter_mut()
            .zip(p.dt_bias.data())
            .for_each(|(v, &b)| *v += b);
    }
    Ok(ScanInstance {
        x: x.clone(),
        delta: ops::apply_unary(&pre, Unary::Softplus)?,
        b: ops::matmul(x, &p.w_b)?,
        c: ops::matmul(x, &p.w_c)?,
        h0: Tensor::zeros(vec![d, p.state_dim()]),
    })
}

/// Zero-order hold for `A`, Euler for `B`: returns `(Ā, B̄)`, each `[L, D, N]`.
pub fn discretize<T: Float>(
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (l, d) = (delta.shape()[0], delta.shape()[1]);
    let n = a_log.shape()[1];
    if delta.rank() != 2 || a_log.shape() != [d, n] || b.shape() != [l, n] {
        return Err(VimError::Shape {
            op: "discretize",
            lhs: delta.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut a_bar = Vec::with_capacity(l * d * n);
    let mut b_bar = Vec::with_capacity(l * d * n);
    for t in 0..l {
        for i in 0..d {
            let dl = delta.data()[t * d + i];
            for j in 0..n {
                let a = -a_log.data()[i * n + j].exp();
                a_bar.push((dl * a).exp());
                b_bar.push(dl * b.data()[t * n + j]);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![l, d, n], a_bar),
        Tensor::from_parts(vec![l, d, n], b_bar),
    ))
}

/// Reference scan: one recurrence step per `(t, d, n)`.
pub fn scan_sequential<T: Float>(inst: &ScanInstance<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    scan_sequential_counted(inst, p).map(|(y, _)| y)
}

/// [`scan_sequential`] plus the number of scalar recurrence steps executed.
pub fn scan_sequential_counted<T: Float>(
    inst: &ScanInstance<T>,
    p: &SsmParams<T>,
) -> Result<(Tensor<T>, u64)> {
    inst.validate(p)?;
    let (l, d, n) = (inst.len(), p.channels(), p.state_dim());
    let (a_bar, b_bar) = discretize(&inst.delta, &p.a_log, &inst.b)?;
    let (a_bar, b_bar) = (a_bar.data(), b_bar.data());
    let (x, c) = (inst.x.data(), inst.c.data());
    let mut h = inst.h0.data().to_vec();
    let mut y = vec![T::zero(); l * d];
    let mut steps = 0u64;
    for t in 0..l {
        for i in 0..d {
            let mut acc = T::zero();
            for j in 0..n {
                let k = (t * d + i) * n + j;
                h[i * n + j] = a_bar[k] * h[i * n + j] + b_bar[k] * x[t * d + i];
                acc += c[t * n + j] * h[i * n + j];
                steps += 1;
            }
            y[t * d + i] = acc + p.d_skip.data()[i] * x[t * d + i];
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(VimError::NonFinite {
                op: "scan_sequential",
                tensor: "hidden state".into(),
                step: Some(t),
            });
        }
    }
    Ok((Tensor::from_parts(vec![l, d], y), steps))
}

/// Same math as [`scan_sequential`], discretizing `block` tokens at a time.
pub fn scan_blocked<T: Float>(
    inst: &ScanInstance<T>,
    p: &SsmParams<T>,
    block: usize,
) -> Result<Tensor<T>> {
    if block == 0 {
        return Err(VimError::invalid("block must be positive"));
    }
    inst.validate(p)?;
    let (l, d, n) = (inst.len(), p.channels(), p.state_dim());
    let (y, _) = kernel::forward_seq(
        inst.x.data(),
        inst.delta.data(),
        p.a().data(),
        inst.b.data(),
        inst.c.data(),
        p.d_skip.data(),
        Some(inst.h0.data()),
        (l, d, n),
        block,
        false,
    )?;
    Ok(Tensor::from_parts(vec![l, d], y))
}

/// Tape handles for the tensors of one [`SsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d_skip: Var,
    pub w_delta: Var,
    pub dt_proj: Var,
    pub dt_bias: Var,
    pub w_b: Var,
    pub w_c: Var,
}

impl SsmVars {
    pub fn bind<T: Float>(tape: &mut Tape<T>, p: &SsmParams<T>) -> Self {
        SsmVars {
            a_log: tape.leaf(&p.a_log),
            d_skip: tape.leaf(&p.d_skip),
            w_delta: tape.leaf(&p.w_delta),
            dt_proj: tape.leaf(&p.dt_proj),
            dt_bias: tape.leaf(&p.dt_bias),
            w_b: tape.leaf(&p.w_b),
            w_c: tape.leaf(&p.w_c),
        }
    }
}

/// Differentiable selectivize + scan over `x[..., L, D]`.
pub fn ssm_forward<T: Float>(tape: &mut Tape<T>, x: Var, p: SsmVars) -> Result<Var> {
    let low = tape.matmul(x, p.w_delta)?;
    let up = tape.matmul(low, p.dt_proj)?;
    let pre = tape.add_broadcast(up, p.dt_bias)?;
    let delta = tape.unary(pre, Unary::Softplus)?;
    let b = tape.matmul(x, p.w_b)?;
    let c = tape.matmul(x, p.w_c)?;
    tape.selective_scan(x, delta, p.a_log, b, c, p.d_skip)
}
