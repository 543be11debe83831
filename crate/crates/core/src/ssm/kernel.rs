//! Blocked selective-scan kernel and its analytic reverse recurrence.
//!
//! Layout per sequence: `x`, `delta` are `[L, D]`; `b`, `c` are `[L, N]`;
//! `a_log` is `[D, N]`; saved states are `[L, D, N]` (state after step t).

use rayon::prelude::*;

use crate::error::{Result, VimError};
use crate::tensor::Float;

pub const DEFAULT_BLOCK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub seqs: usize,
    pub len: usize,
    pub d: usize,
    pub n: usize,
}

impl ScanDims {
    pub fn infer(
        x: &[usize],
        delta: &[usize],
        a_log: &[usize],
        b: &[usize],
        c: &[usize],
        d_skip: &[usize],
    ) -> Result<Self> {
        let bad = |what: &[usize]| VimError::Shape {
            op: "selective_scan",
            lhs: x.to_vec(),
            rhs: what.to_vec(),
        };
        if x.len() < 2 {
            return Err(bad(x));
        }
        let r = x.len();
        let (len, d) = (x[r - 2], x[r - 1]);
        if delta != x {
            return Err(bad(delta));
        }
        if a_log.len() != 2 || a_log[0] != d {
            return Err(bad(a_log));
        }
        let n = a_log[1];
        let mut bc = x[..r - 1].to_vec();
        bc.push(n);
        if b != bc.as_slice() {
            return Err(bad(b));
        }
        if c != bc.as_slice() {
            return Err(bad(c));
        }
        if d_skip != [d] {
            return Err(bad(d_skip));
        }
        Ok(ScanDims {
            seqs: x[..r - 2].iter().product(),
            len,
            d,
            n,
        })
    }
}

/// Runs every sequence, returning `y` and (when `keep_states`) all hidden states.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Float>(
    x: &[T],
    delta: &[T],
    a_log: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    dims: ScanDims,
    block: usize,
    keep_states: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let ScanDims { seqs, len, d, n } = dims;
    let a: Vec<T> = a_log.iter().map(|v| -v.exp()).collect();
    let per_seq = |s: usize| {
        let xo = s * len * d;
        let bo = s * len * n;
        forward_seq(
            &x[xo..xo + len * d],
            &delta[xo..xo + len * d],
            &a,
            &b[bo..bo + len * n],
            &c[bo..bo + len * n],
            d_skip,
            None,
            (len, d, n),
            block,
            keep_states,
        )
    };
    let parts: Vec<(Vec<T>, Vec<T>)> = if seqs > 1 {
        (0..seqs)
            .into_par_iter()
            .map(per_seq)
            .collect::<Result<_>>()?
    } else {
        (0..seqs).map(per_seq).collect::<Result<_>>()?
    };
    let mut y = Vec::with_capacity(seqs * len * d);
    let mut states = Vec::with_capacity(if keep_states { seqs * len * d * n } else { 0 });
    for (ys, hs) in parts {
        y.extend_from_slice(&ys);
        states.extend_from_slice(&hs);
    }
    Ok((y, states))
}

/// One sequence. `a` is the already-negated state matrix `-exp(a_log)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_seq<T: Float>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    h0: Option<&[T]>,
    (len, d, n): (usize, usize, usize),
    block: usize,
    keep_states: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let block = block.clamp(1, len.max(1));
    let mut h = match h0 {
        Some(h0) => h0.to_vec(),
        None => vec![T::zero(); d * n],
    };
    let mut y = vec![T::zero(); len * d];
    let mut states = if keep_states {
        vec![T::zero(); len * d * n]
    } else {
        Vec::new()
    };
    let mut a_bar = vec![T::zero(); block * d * n];
    let mut bx = vec![T::zero(); block * d * n];

    for t0 in (0..len).step_by(block) {
        let t1 = (t0 + block).min(len);
        // discretize the whole block up front
        for t in t0..t1 {
            let base = (t - t0) * d * n;
            let b_row = &b[t * n..(t + 1) * n];
            for i in 0..d {
                let dl = delta[t * d + i];
                let xv = x[t * d + i];
                let a_row = &a[i * n..(i + 1) * n];
                let ab = &mut a_bar[base + i * n..base + (i + 1) * n];
                let bb = &mut bx[base + i * n..base + (i + 1) * n];
                for j in 0..n {
                    ab[j] = (dl * a_row[j]).exp();
                    bb[j] = dl * b_row[j] * xv;
                }
            }
        }
        for t in t0..t1 {
            let base = (t - t0) * d * n;
            let c_row = &c[t * n..(t + 1) * n];
            for i in 0..d {
                let hr = &mut h[i * n..(i + 1) * n];
                let ab = &a_bar[base + i * n..base + (i + 1) * n];
                let bb = &bx[base + i * n..base + (i + 1) * n];
                let mut acc = T::zero();
                for j in 0..n {
                    hr[j] = ab[j] * hr[j] + bb[j];
                    acc += c_row[j] * hr[j];
                }
                if !hr.iter().all(|v| v.is_finite()) {
                    return Err(VimError::NonFinite {
                        op: "selective_scan",
                        tensor: "hidden state".into(),
                        step: Some(t),
                    });
                }
                y[t * d + i] = acc + d_skip[i] * x[t * d + i];
            }
            if keep_states {
                states[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
            }
        }
    }
    Ok((y, states))
}

pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a_log: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d_skip: Vec<T>,
}

/// Reverse recurrence: `gh_t = gy_t·C_t + gh_{t+1}·Ā_{t+1}`, swept from the last token.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Float>(
    gy: &[T],
    x: &[T],
    delta: &[T],
    a_log: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    states: &[T],
    dims: ScanDims,
) -> ScanGrads<T> {
    let ScanDims { seqs, len, d, n } = dims;
    let a: Vec<T> = a_log.iter().map(|v| -v.exp()).collect();

    let per_seq = |s: usize| {
        let xo = s * len * d;
        let bo = s * len * n;
        let so = s * len * d * n;
        backward_seq(
            &gy[xo..xo + len * d],
            &x[xo..xo + len * d],
            &delta[xo..xo + len * d],
            &a,
            &b[bo..bo + len * n],
            &c[bo..bo + len * n],
            d_skip,
            &states[so..so + len * d * n],
            (len, d, n),
        )
    };
    let parts: Vec<ScanGrads<T>> = if seqs > 1 {
        (0..seqs).into_par_iter().map(per_seq).collect()
    } else {
        (0..seqs).map(per_seq).collect()
    };

    let mut out = ScanGrads {
        x: Vec::with_capacity(seqs * len * d),
        delta: Vec::with_capacity(seqs * len * d),
        a_log: vec![T::zero(); d * n],
        b: Vec::with_capacity(seqs * len * n),
        c: Vec::with_capacity(seqs * len * n),
        d_skip: vec![T::zero(); d],
    };
    // fixed reduction order keeps results independent of the thread count
    for p in parts {
        out.x.extend_from_slice(&p.x);
        out.delta.extend_from_slice(&p.delta);
        out.b.extend_from_slice(&p.b);
        out.c.extend_from_slice(&p.c);
        out.a_log
            .iter_mut()
            .zip(&p.a_log)
            .for_each(|(s, &v)| *s += v);
        out.d_skip
            .iter_mut()
            .zip(&p.d_skip)
            .for_each(|(s, &v)| *s += v);
    }
    // dA/da_log = -exp(a_log) = A
    out.a_log.iter_mut().zip(&a).for_each(|(g, &av)| *g *= av);
    out
}

#[allow(clippy::too_many_arguments)]
fn backward_seq<T: Float>(
    gy: &[T],
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    states: &[T],
    (len, d, n): (usize, usize, usize),
) -> ScanGrads<T> {
    let mut gx = vec![T::zero(); len * d];
    let mut gdelta = vec![T::zero(); len * d];
    let mut g_a = vec![T::zero(); d * n];
    let mut gb = vec![T::zero(); len * n];
    let mut gc = vec![T::zero(); len * n];
    let mut gd = vec![T::zero(); d];

    for i in 0..d {
        for t in 0..len {
            let g = gy[t * d + i];
            gx[t * d + i] += g * d_skip[i];
            gd[i] += g * x[t * d + i];
        }
        for j in 0..n {
            let av = a[i * n + j];
            let mut carry = T::zero();
            for t in (0..len).rev() {
                let g = gy[t * d + i];
                let h_t = states[(t * d + i) * n + j];
                gc[t * n + j] += g * h_t;
                let gh = g * c[t * n + j] + carry;
                let dl = delta[t * d + i];
                let xv = x[t * d + i];
                let bv = b[t * n + j];
                let a_bar = (dl * av).exp();
                let h_prev = if t == 0 {
                    T::zero()
                } else {
                    states[((t - 1) * d + i) * n + j]
                };
                let g_abar = gh * h_prev * a_bar;
                gdelta[t * d + i] += g_abar * av + gh * bv * xv;
                g_a[i * n + j] += g_abar * dl;
                gb[t * n + j] += gh * dl * xv;
                gx[t * d + i] += gh * dl * bv;
                carry = gh * a_bar;
            }
        }
    }
    ScanGrads {
        x: gx,
        delta: gdelta,
        a_log: g_a,
        b: gb,
        c: gc,
        d_skip: gd,
    }
}
