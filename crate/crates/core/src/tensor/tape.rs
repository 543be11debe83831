use super::ops::{self, Unary};
use super::{check_finite, Float, Tensor};
use crate::error::{Result, VimError};
use crate::ssm::kernel::{self, ScanDims};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Second operand's shape is a suffix of the first's.
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gamma: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        beta: Var,
    },
    Softmax(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    ReverseTime(Var),
    InsertToken {
        x: Var,
        token: Var,
        pos: usize,
    },
    SelectToken {
        x: Var,
        pos: usize,
    },
    Scan {
        inputs: ScanInputs,
        dims: ScanDims,
        states: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

#[derive(Clone, Copy)]
struct ScanInputs {
    x: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d_skip: Var,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of the operations of one forward pass.
///
/// Inputs of every node precede it, so a single reverse sweep in index order
/// visits each op once after all of its consumers.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    scan_block: usize,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scan_block: kernel::DEFAULT_BLOCK,
        }
    }

    /// Token block size used by recorded selective scans.
    pub fn with_scan_block(mut self, block: usize) -> Self {
        self.scan_block = block.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Snapshots `t` onto the tape.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Var {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        inputs: &[Var],
        op: Op<T>,
    ) -> Result<Var> {
        check_finite(name, "output", &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(shape, value, rg, op))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(VimError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, shape) = ops::matmul_dims(self.shape(a), self.shape(b))?;
        let out = ops::matmul_raw(self.value(a), self.value(b), m, k, n);
        self.record("matmul", shape, out, &[a, b], Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("add", shape, out, &[a, b], Op::Add(a, b))
    }

    /// `a + b` where `b` is broadcast over the leading axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(VimError::Shape {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let shape = sa.to_vec();
        self.record("add_broadcast", shape, out, &[a, b], Op::AddBroadcast(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.record("mul", shape, out, &[a, b], Op::Mul(a, b))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f.value(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(f.name(), shape, out, &[x], Op::Unary(x, f))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        ops::check_norm_dims(self.shape(x), self.shape(gamma), self.shape(beta), eps)?;
        let d = self.shape(gamma)[0];
        let (out, xhat, rstd) = ops::layer_norm_raw(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            d,
            T::of(eps),
        );
        let shape = self.shape(x).to_vec();
        self.record(
            "layer_norm",
            shape,
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = *self.shape(x).last().unwrap();
        let out = ops::softmax_raw(self.value(x), k);
        let shape = self.shape(x).to_vec();
        self.record("softmax", shape, out, &[x], Op::Softmax(x))
    }

    pub fn conv1d_causal_depthwise(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (seqs, len, d, k) =
            ops::conv_dims(self.shape(x), self.shape(kernel), self.shape(bias))?;
        let out = ops::conv1d_raw(
            self.value(x),
            self.value(kernel),
            self.value(bias),
            seqs,
            len,
            d,
            k,
        );
        let shape = self.shape(x).to_vec();
        self.record(
            "conv1d_causal_depthwise",
            shape,
            out,
            &[x, kernel, bias],
            Op::Conv1d { x, kernel, bias },
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if len == 0 || start + len > cols {
            return Err(VimError::invalid(format!(
                "slice {start}..{} out of range for last extent {cols}",
                start + len
            )));
        }
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        self.record("slice_last", shape, out, &[x], Op::SliceLast { x, start })
    }

    /// Reverses the second-to-last (time) axis of `[..., L, D]`.
    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(VimError::invalid("reverse_time needs rank >= 2"));
        }
        let out = reverse_time_raw(self.value(x), &shape);
        self.record("reverse_time", shape, out, &[x], Op::ReverseTime(x))
    }

    /// Inserts `token[D]` at time index `pos` of every `[L, D]` sequence.
    pub fn insert_token(&mut self, x: Var, token: Var, pos: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || self.shape(token) != [shape[r - 1]] || pos > shape[r - 2] {
            return Err(VimError::Shape {
                op: "insert_token",
                lhs: shape,
                rhs: self.shape(token).to_vec(),
            });
        }
        let (len, d) = (shape[r - 2], shape[r - 1]);
        let tok = self.value(token);
        let mut out =
            Vec::with_capacity(self.value(x).len() + tok.len() * (self.value(x).len() / (len * d)));
        for seq in self.value(x).chunks(len * d) {
            out.extend_from_slice(&seq[..pos * d]);
            out.extend_from_slice(tok);
            out.extend_from_slice(&seq[pos * d..]);
        }
        let mut new_shape = shape;
        new_shape[r - 2] += 1;
        self.record(
            "insert_token",
            new_shape,
            out,
            &[x, token],
            Op::InsertToken { x, token, pos },
        )
    }

    /// Row `pos` of every `[T, D]` sequence: `[..., T, D]` → `[..., D]`.
    pub fn select_token(&mut self, x: Var, pos: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || pos >= shape[r - 2] {
            return Err(VimError::invalid(format!(
                "token {pos} out of range for shape {shape:?}"
            )));
        }
        let (len, d) = (shape[r - 2], shape[r - 1]);
        let out = self
            .value(x)
            .chunks(len * d)
            .flat_map(|seq| seq[pos * d..(pos + 1) * d].iter().copied())
            .collect();
        let mut new_shape = shape[..r - 2].to_vec();
        new_shape.push(d);
        self.record(
            "select_token",
            new_shape,
            out,
            &[x],
            Op::SelectToken { x, pos },
        )
    }

    /// Selective scan over `[..., L, D]` sequences. Memory is `O(L·D·N)` per
    /// sequence: only the hidden states are kept for the reverse recurrence.
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Var,
    ) -> Result<Var> {
        let dims = ScanDims::infer(
            self.shape(x),
            self.shape(delta),
            self.shape(a_log),
            self.shape(b),
            self.shape(c),
            self.shape(d_skip),
        )?;
        let (y, states) = kernel::forward(
            self.value(x),
            self.value(delta),
            self.value(a_log),
            self.value(b),
            self.value(c),
            self.value(d_skip),
            dims,
            self.scan_block,
            true,
        )?;
        let shape = self.shape(x).to_vec();
        let inputs = ScanInputs {
            x,
            delta,
            a_log,
            b,
            c,
            d_skip,
        };
        self.record(
            "selective_scan",
            shape,
            y,
            &[x, delta, a_log, b, c, d_skip],
            Op::Scan {
                inputs,
                dims,
                states,
            },
        )
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits[B, K]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(VimError::Shape {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(VimError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let z = self.value(logits);
        let mut loss = T::zero();
        for (row, &l) in z.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[l];
        }
        let loss = loss / T::of(labels.len() as f64);
        let probs = ops::softmax_raw(z, k);
        self.record(
            "cross_entropy",
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.record("sum", vec![1], vec![s], &[x], Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(VimError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Vec<T>| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(cur) => cur.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                    slot => *slot = Some(delta),
                }
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k, n, _) = ops::matmul_dims(self.shape(a), self.shape(b))?;
                if rg(a) {
                    acc(a, ops::matmul_a_bt(g, self.value(b), m, k, n));
                }
                if rg(b) {
                    acc(b, ops::matmul_at_b(self.value(a), g, m, k, n));
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::AddBroadcast(a, b) => {
                acc(a, g.to_vec());
                if rg(b) {
                    let nb = self.value(b).len();
                    let mut gb = vec![T::zero(); nb];
                    for row in g.chunks(nb) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    acc(b, gb);
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    acc(
                        a,
                        g.iter().zip(self.value(b)).map(|(&u, &v)| u * v).collect(),
                    );
                }
                if rg(b) {
                    acc(
                        b,
                        g.iter().zip(self.value(a)).map(|(&u, &v)| u * v).collect(),
                    );
                }
            }
            &Op::Unary(x, f) => {
                let gx = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(&u, &v)| u * f.derivative(v))
                    .collect();
                acc(x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = xhat.len() / rstd.len();
                let gam = self.value(*gamma);
                if rg(*x) {
                    let dn = T::of(d as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..d {
                            let gh = gr[c] * gam[c];
                            s1 += gh;
                            s2 += gh * hr[c];
                        }
                        for c in 0..d {
                            let gh = gr[c] * gam[c];
                            gx[r * d + c] = rs * (gh - s1 / dn - hr[c] * s2 / dn);
                        }
                    }
                    acc(*x, gx);
                }
                if rg(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    acc(*gamma, gg);
                }
                if rg(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(s, &v)| *s += v);
                    }
                    acc(*beta, gb);
                }
            }
            &Op::Softmax(x) => {
                let k = *node.shape.last().unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(k).zip(node.value.chunks(k)).zip(gx.chunks_mut(k)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..k {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(x, gx);
            }
            &Op::Conv1d { x, kernel, bias } => {
                let (seqs, len, d, k) =
                    ops::conv_dims(self.shape(x), self.shape(kernel), self.shape(bias))?;
                let xv = self.value(x);
                let kv = self.value(kernel);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gb = vec![T::zero(); d];
                for s in 0..seqs {
                    let off = s * len * d;
                    for t in 0..len {
                        let gr = &g[off + t * d..off + (t + 1) * d];
                        gb.iter_mut().zip(gr).for_each(|(a, &v)| *a += v);
                        for j in 0..k {
                            let Some(src) = (t + 1 + j).checked_sub(k) else {
                                continue;
                            };
                            for c in 0..d {
                                gk[j * d + c] += gr[c] * xv[off + src * d + c];
                                gx[off + src * d + c] += gr[c] * kv[j * d + c];
                            }
                        }
                    }
                }
                acc(x, gx);
                acc(kernel, gk);
                acc(bias, gb);
            }
            &Op::SliceLast { x, start } => {
                let cols = *self.shape(x).last().unwrap();
                let len = *node.shape.last().unwrap();
                let mut gx = vec![T::zero(); self.value(x).len()];
                for (dst, src) in gx.chunks_mut(cols).zip(g.chunks(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                acc(x, gx);
            }
            &Op::ReverseTime(x) => acc(x, reverse_time_raw(g, &node.shape)),
            &Op::InsertToken { x, token, pos } => {
                let r = node.shape.len();
                let (len1, d) = (node.shape[r - 2], node.shape[r - 1]);
                let mut gx = Vec::with_capacity(self.value(x).len());
                let mut gt = vec![T::zero(); d];
                for seq in g.chunks(len1 * d) {
                    gx.extend_from_slice(&seq[..pos * d]);
                    gt.iter_mut()
                        .zip(&seq[pos * d..(pos + 1) * d])
                        .for_each(|(a, &v)| *a += v);
                    gx.extend_from_slice(&seq[(pos + 1) * d..]);
                }
                acc(x, gx);
                acc(token, gt);
            }
            &Op::SelectToken { x, pos } => {
                let s = self.shape(x);
                let (len, d) = (s[s.len() - 2], s[s.len() - 1]);
                let mut gx = vec![T::zero(); self.value(x).len()];
                for (seq, gr) in gx.chunks_mut(len * d).zip(g.chunks(d)) {
                    seq[pos * d..(pos + 1) * d].copy_from_slice(gr);
                }
                acc(x, gx);
            }
            Op::Scan {
                inputs,
                dims,
                states,
            } => {
                let gr = kernel::backward(
                    g,
                    self.value(inputs.x),
                    self.value(inputs.delta),
                    self.value(inputs.a_log),
                    self.value(inputs.b),
                    self.value(inputs.c),
                    self.value(inputs.d_skip),
                    states,
                    *dims,
                );
                acc(inputs.x, gr.x);
                acc(inputs.delta, gr.delta);
                acc(inputs.a_log, gr.a_log);
                acc(inputs.b, gr.b);
                acc(inputs.c, gr.c);
                acc(inputs.d_skip, gr.d_skip);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                let mut gz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gz[i * k + l] -= scale;
                }
                acc(*logits, gz);
            }
            &Op::Sum(x) => acc(x, vec![g[0]; self.value(x).len()]),
        }
        Ok(())
    }
}

fn reverse_time_raw<T: Float>(x: &[T], shape: &[usize]) -> Vec<T> {
    let r = shape.len();
    let (len, d) = (shape[r - 2], shape[r - 1]);
    let mut out = Vec::with_capacity(x.len());
    for seq in x.chunks(len * d) {
        for t in (0..len).rev() {
            out.extend_from_slice(&seq[t * d..(t + 1) * d]);
        }
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t`'s accumulator; unreachable leaves receive zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![T::zero(); t.numel()]),
        }
    }
}

/// Runs the reverse sweep and accumulates into every `(var, leaf)` pair that requires grad.
pub fn backward<T: Float>(
    loss: Var,
    tape: &Tape<T>,
    leaves: &mut [(Var, &mut Tensor<T>)],
) -> Result<()> {
    let grads = tape.backward(loss)?;
    for (v, t) in leaves.iter_mut() {
        if t.requires_grad {
            grads.accumulate_into(*v, t)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let mut x = Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.])
            .unwrap()
            .with_grad();
        let v = tape.leaf(&x);
        let s = tape.sum(v).unwrap();
        backward(s, &tape, &mut [(v, &mut x)]).unwrap();
        assert_eq!(x.grad().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn silu_grad_at_one() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_f64(vec![1], &[1.0]).unwrap().with_grad();
        let v = tape.leaf(&x);
        let y = tape.unary(v, Unary::Silu).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!((g.get(v).unwrap()[0] - 0.9277).abs() < 1e-4);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let v = tape.leaf(&Tensor::zeros(vec![3]).with_grad());
        assert!(matches!(tape.backward(v), Err(VimError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_and_grads_add() {
        let mut tape = Tape::<f64>::new();
        let mut a = Tensor::from_f64(vec![2], &[1., 2.]).unwrap().with_grad();
        let mut b = Tensor::from_f64(vec![2], &[3., 4.]).unwrap().with_grad();
        let va = tape.leaf(&a);
        let vb = tape.leaf(&b);
        let s = tape.sum(va).unwrap();
        backward(s, &tape, &mut [(va, &mut a), (vb, &mut b)]).unwrap();
        backward(s, &tape, &mut [(va, &mut a), (vb, &mut b)]).unwrap();
        assert_eq!(a.grad().unwrap(), &[2.0, 2.0]);
        assert_eq!(b.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_leaf_accumulates_over_uses() {
        // y = x * x, dy/dx = 2x
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap().with_grad();
        let v = tape.leaf(&x);
        let y = tape.mul(v, v).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &[6.0]);
    }

    #[test]
    fn insert_and_select_token_round_trip() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(vec![1, 2, 2], vec![1., 2., 3., 4.]);
        let t = tape.constant(vec![2], vec![9., 9.]);
        let y = tape.insert_token(x, t, 1).unwrap();
        assert_eq!(tape.value(y), &[1., 2., 9., 9., 3., 4.]);
        let s = tape.select_token(y, 1).unwrap();
        assert_eq!(tape.value(s), &[9., 9.]);
        assert_eq!(tape.shape(s), &[1, 2]);
        let r = tape.reverse_time(y).unwrap();
        assert_eq!(tape.value(r), &[3., 4., 9., 9., 1., 2.]);
    }
}
