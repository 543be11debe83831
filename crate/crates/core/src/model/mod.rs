//! The Vision Mamba classifier.
//!
//! Images are cut into non-overlapping patches, projected to `embed_dim`
//! tokens, a learned class token is inserted and positional embeddings are
//! added. A stack of bidirectional Vim blocks follows; the final normalized
//! class-token row goes through the classification head.
//!
//! Parameters live in one flat list whose order is the checkpoint manifest
//! order. That order also defines "the last N layers" for partial fine-tuning.

pub mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, load_into, save_checkpoint};
pub use config::{ClassTokenPosition, VimConfig};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VimError};
use crate::ssm::{self, SsmVars};
use crate::tensor::{ops, Float, Tape, Tensor, Unary, Var};

pub const LN_EPS: f64 = 1e-5;

/// Which parameters receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Scratch,
    HeadOnly,
    /// The last `n` non-head manifest entries plus the head.
    LastN(usize),
    Full,
}

impl Strategy {
    pub fn needs_checkpoint(self) -> bool {
        !matches!(self, Strategy::Scratch)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Scratch => f.write_str("scratch"),
            Strategy::HeadOnly => f.write_str("head-only"),
            Strategy::LastN(n) => write!(f, "last-n={n}"),
            Strategy::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Strategy {
    type Err = VimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Strategy::Scratch),
            "head-only" => Ok(Strategy::HeadOnly),
            "full" => Ok(Strategy::Full),
            _ => s
                .strip_prefix("last-n=")
                .and_then(|n| n.parse().ok())
                .map(Strategy::LastN)
                .ok_or_else(|| VimError::invalid(format!("unknown strategy `{s}`"))),
        }
    }
}

/// Manifest indices of one direction's conv + SSM parameters.
#[derive(Clone, Copy, Debug)]
pub struct DirectionParams {
    pub conv_weight: usize,
    pub conv_bias: usize,
    pub a_log: usize,
    pub d_skip: usize,
    pub w_delta: usize,
    pub dt_proj: usize,
    pub dt_bias: usize,
    pub w_b: usize,
    pub w_c: usize,
}

/// Manifest indices of one bidirectional block.
#[derive(Clone, Copy, Debug)]
pub struct VimBlock {
    pub norm_gamma: usize,
    pub norm_beta: usize,
    pub in_proj: usize,
    pub forward: DirectionParams,
    pub backward: DirectionParams,
    pub out_proj: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_weight: usize,
    patch_bias: usize,
    pos_embed: usize,
    cls_token: usize,
    blocks: Vec<VimBlock>,
    norm_gamma: usize,
    norm_beta: usize,
    head_weight: usize,
    head_bias: usize,
}

/// Entry in the canonical parameter order.
#[derive(Clone, Debug)]
pub struct NamedParam<T: Float> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct VimModel<T: Float = f32> {
    cfg: VimConfig,
    class_names: Vec<String>,
    params: Vec<NamedParam<T>>,
    layout: Layout,
}

struct Builder<'a, T: Float> {
    params: Vec<NamedParam<T>>,
    rng: &'a mut ChaCha8Rng,
}

enum Init {
    Zeros,
    Ones,
    Uniform(usize),
    Normal(f64),
}

impl<T: Float> Builder<'_, T> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Uniform(fan_in) => ssm::uniform(shape, fan_in, self.rng),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                let data = (0..n).map(|_| T::of(dist.sample(self.rng))).collect();
                Tensor::from_parts(shape, data)
            }
        };
        self.params.push(NamedParam {
            name,
            tensor: tensor.with_grad(),
        });
        self.params.len() - 1
    }

    fn push_tensor(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(NamedParam {
            name,
            tensor: tensor.with_grad(),
        });
        self.params.len() - 1
    }

    fn direction(&mut self, prefix: &str, cfg: &VimConfig) -> DirectionParams {
        let (di, n, k) = (cfg.inner_dim(), cfg.state_dim, cfg.conv_kernel);
        let conv_weight = self.push(
            format!("{prefix}.conv.weight"),
            vec![k, di],
            Init::Uniform(k),
        );
        let conv_bias = self.push(format!("{prefix}.conv.bias"), vec![di], Init::Zeros);
        let s = ssm::SsmParams::<T>::init(di, n, self.rng);
        DirectionParams {
            conv_weight,
            conv_bias,
            a_log: self.push_tensor(format!("{prefix}.ssm.a_log"), s.a_log),
            d_skip: self.push_tensor(format!("{prefix}.ssm.d_skip"), s.d_skip),
            w_delta: self.push_tensor(format!("{prefix}.ssm.w_delta"), s.w_delta),
            dt_proj: self.push_tensor(format!("{prefix}.ssm.dt_proj"), s.dt_proj),
            dt_bias: self.push_tensor(format!("{prefix}.ssm.dt_bias"), s.dt_bias),
            w_b: self.push_tensor(format!("{prefix}.ssm.w_b"), s.w_b),
            w_c: self.push_tensor(format!("{prefix}.ssm.w_c"), s.w_c),
        }
    }
}

impl<T: Float> VimModel<T> {
    /// Freshly initialized model; the head starts at zero so initial logits are zero.
    pub fn new(cfg: VimConfig, class_names: Vec<String>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if class_names.len() != cfg.num_classes {
            return Err(VimError::invalid(format!(
                "{} class names for {} classes",
                class_names.len(),
                cfg.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::<T> {
            params: Vec::new(),
            rng: &mut rng,
        };
        let (d, di) = (cfg.embed_dim, cfg.inner_dim());
        let patch_weight = b.push(
            "patch_embed.weight".into(),
            vec![cfg.patch_dim(), d],
            Init::Uniform(cfg.patch_dim()),
        );
        let patch_bias = b.push("patch_embed.bias".into(), vec![d], Init::Zeros);
        let pos_embed = b.push(
            "pos_embed".into(),
            vec![cfg.seq_len(), d],
            Init::Normal(0.02),
        );
        let cls_token = b.push("cls_token".into(), vec![d], Init::Normal(0.02));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("blocks.{i}");
            let norm_gamma = b.push(format!("{p}.norm.gamma"), vec![d], Init::Ones);
            let norm_beta = b.push(format!("{p}.norm.beta"), vec![d], Init::Zeros);
            let in_proj = b.push(
                format!("{p}.in_proj.weight"),
                vec![d, 2 * di],
                Init::Uniform(d),
            );
            let forward = b.direction(&format!("{p}.fwd"), &cfg);
            let backward = b.direction(&format!("{p}.bwd"), &cfg);
            let out_proj = b.push(
                format!("{p}.out_proj.weight"),
                vec![di, d],
                Init::Uniform(di),
            );
            blocks.push(VimBlock {
                norm_gamma,
                norm_beta,
                in_proj,
                forward,
                backward,
                out_proj,
            });
        }
        let norm_gamma = b.push("norm_f.gamma".into(), vec![d], Init::Ones);
        let norm_beta = b.push("norm_f.beta".into(), vec![d], Init::Zeros);
        let head_weight = b.push("head.weight".into(), vec![d, cfg.num_classes], Init::Zeros);
        let head_bias = b.push("head.bias".into(), vec![cfg.num_classes], Init::Zeros);
        let params = b.params;
        Ok(VimModel {
            cfg,
            class_names,
            params,
            layout: Layout {
                patch_weight,
                patch_bias,
                pos_embed,
                cls_token,
                blocks,
                norm_gamma,
                norm_beta,
                head_weight,
                head_bias,
            },
        })
    }

    pub fn config(&self) -> &VimConfig {
        &self.cfg
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.cfg.num_classes {
            return Err(VimError::invalid(
                "class name count does not match num_classes",
            ));
        }
        self.class_names = names;
        Ok(())
    }

    /// Parameters in canonical manifest order.
    pub fn params(&self) -> &[NamedParam<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    pub fn blocks(&self) -> &[VimBlock] {
        &self.layout.blocks
    }

    pub fn is_head(&self, index: usize) -> bool {
        index == self.layout.head_weight || index == self.layout.head_bias
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Resets the head to zeros.
    pub fn reset_head(&mut self) {
        for i in [self.layout.head_weight, self.layout.head_bias] {
            let t = &mut self.params[i].tensor;
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            t.zero_grad();
        }
    }

    /// Applies a freezing policy. Returns the number of trainable tensors.
    pub fn set_trainable(&mut self, strategy: Strategy) -> usize {
        let body = self.params.len() - 2;
        let first_trainable = match strategy {
            Strategy::Scratch | Strategy::Full => 0,
            Strategy::HeadOnly => body,
            Strategy::LastN(n) => {
                if n > body {
                    log::warn!("last-n={n} exceeds the {body} non-head layers; training all");
                }
                body - n.min(body)
            }
        };
        for (i, p) in self.params.iter_mut().enumerate() {
            p.tensor.requires_grad = i >= first_trainable;
        }
        // head tensors are the final two manifest entries
        debug_assert!(self.is_head(body) && self.is_head(body + 1));
        self.params.len() - first_trainable
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records every parameter on `tape`, in manifest order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.tensor)).collect()
    }

    /// Adds each bound parameter's gradient into its accumulator.
    pub fn accumulate_grads(
        &mut self,
        grads: &crate::tensor::Gradients<T>,
        vars: &[Var],
    ) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if p.tensor.requires_grad {
                grads.accumulate_into(v, &mut p.tensor)?;
            }
        }
        Ok(())
    }

    fn image_batch_dims(&self, images: &Tensor<T>) -> Result<usize> {
        let c = &self.cfg;
        let s = images.shape();
        let ok =
            s.len() == 4 && s[1] == c.in_channels && s[2] == c.image_size && s[3] == c.image_size;
        if !ok {
            return Err(VimError::Shape {
                op: "forward",
                lhs: s.to_vec(),
                rhs: vec![0, c.in_channels, c.image_size, c.image_size],
            });
        }
        Ok(s[0])
    }

    /// Patch projection, class token, positional embedding: `[B, L+1, D]`.
    pub fn embed(&self, tape: &mut Tape<T>, vars: &[Var], images: &Tensor<T>) -> Result<Var> {
        let b = self.image_batch_dims(images)?;
        let c = &self.cfg;
        let patches = patchify_raw(images.data(), b, c);
        let patches = tape.constant(vec![b, c.num_patches(), c.patch_dim()], patches);
        self.embed_patches(tape, vars, patches)
    }

    /// [`embed`](Self::embed) starting from already patchified `[B, L, C·P²]` input.
    pub fn embed_patches(&self, tape: &mut Tape<T>, vars: &[Var], patches: Var) -> Result<Var> {
        let l = &self.layout;
        let x = tape.matmul(patches, vars[l.patch_weight])?;
        let x = tape.add_broadcast(x, vars[l.patch_bias])?;
        let x = tape.insert_token(x, vars[l.cls_token], self.cfg.class_token_index())?;
        if tape.shape(x)[1] != self.cfg.seq_len() {
            return Err(VimError::Shape {
                op: "embed",
                lhs: tape.shape(x).to_vec(),
                rhs: tape.shape(vars[l.pos_embed]).to_vec(),
            });
        }
        tape.add_broadcast(x, vars[l.pos_embed])
    }

    /// One bidirectional block with residual: `seq + w_out((y_fwd + y_bwd) ⊙ silu(z))`.
    pub fn block_forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        seq: Var,
        block: usize,
    ) -> Result<Var> {
        let out = self.block_mixer(tape, vars, seq, block)?;
        tape.add(seq, out)
    }

    /// Block output before the residual add.
    pub fn block_mixer(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        seq: Var,
        block: usize,
    ) -> Result<Var> {
        let blk = self.layout.blocks[block];
        let di = self.cfg.inner_dim();
        let u = tape.layer_norm(seq, vars[blk.norm_gamma], vars[blk.norm_beta], LN_EPS)?;
        let xz = tape.matmul(u, vars[blk.in_proj])?;
        let x = tape.slice_last(xz, 0, di)?;
        let z = tape.slice_last(xz, di, di)?;

        let y_fwd = direction_forward(tape, vars, x, &blk.forward)?;
        let x_rev = tape.reverse_time(x)?;
        let y_rev = direction_forward(tape, vars, x_rev, &blk.backward)?;
        let y_bwd = tape.reverse_time(y_rev)?;

        let combined = tape.add(y_fwd, y_bwd)?;
        let gate = tape.unary(z, Unary::Silu)?;
        let gated = tape.mul(combined, gate)?;
        tape.matmul(gated, vars[blk.out_proj])
    }

    /// Embedding followed by every block: `[B, L+1, D]`, before the final norm.
    pub fn encode(&self, tape: &mut Tape<T>, vars: &[Var], images: &Tensor<T>) -> Result<Var> {
        let mut x = self.embed(tape, vars, images)?;
        for i in 0..self.cfg.depth {
            x = self.block_forward(tape, vars, x, i)?;
        }
        Ok(x)
    }

    /// Logits `[B, K]` for a `[B, C, H, W]` batch.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        images: &Tensor<T>,
    ) -> Result<Var> {
        let l = &self.layout;
        let x = self.encode(tape, vars, images)?;
        let x = tape.layer_norm(x, vars[l.norm_gamma], vars[l.norm_beta], LN_EPS)?;
        let cls = tape.select_token(x, self.cfg.class_token_index())?;
        let logits = tape.matmul(cls, vars[l.head_weight])?;
        tape.add_broadcast(logits, vars[l.head_bias])
    }

    /// Logits for a single `[C, H, W]` image.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(shape)?;
        let logits = self.logits(&batch)?;
        logits.reshape(vec![self.cfg.num_classes])
    }

    /// Inference-only logits `[B, K]`.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward_batch(&mut tape, &vars, images)?;
        Ok(tape.tensor(out))
    }

    /// Softmax class probabilities `[B, K]`.
    pub fn predict_proba(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax(&self.logits(images)?)
    }
}

fn direction_forward<T: Float>(
    tape: &mut Tape<T>,
    vars: &[Var],
    x: Var,
    p: &DirectionParams,
) -> Result<Var> {
    let conv = tape.conv1d_causal_depthwise(x, vars[p.conv_weight], vars[p.conv_bias])?;
    let act = tape.unary(conv, Unary::Silu)?;
    let s = SsmVars {
        a_log: vars[p.a_log],
        d_skip: vars[p.d_skip],
        w_delta: vars[p.w_delta],
        dt_proj: vars[p.dt_proj],
        dt_bias: vars[p.dt_bias],
        w_b: vars[p.w_b],
        w_c: vars[p.w_c],
    };
    ssm::ssm_forward(tape, act, s)
}

/// `[C, H, W]` image → `[L, C·P²]`, patches in row-major order, each flattened channel-major.
pub fn patchify<T: Float>(image: &Tensor<T>, cfg: &VimConfig) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != cfg.in_channels || s[1] != s[2] {
        return Err(VimError::Shape {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![cfg.in_channels, cfg.image_size, cfg.image_size],
        });
    }
    if !s[1].is_multiple_of(cfg.patch_size) {
        return Err(VimError::invalid(format!(
            "image size {} is not divisible by patch size {}",
            s[1], cfg.patch_size
        )));
    }
    if s[1] != cfg.image_size {
        return Err(VimError::Shape {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![cfg.in_channels, cfg.image_size, cfg.image_size],
        });
    }
    let data = patchify_raw(image.data(), 1, cfg);
    Ok(Tensor::from_parts(
        vec![cfg.num_patches(), cfg.patch_dim()],
        data,
    ))
}

pub(crate) fn patchify_raw<T: Float>(images: &[T], batch: usize, cfg: &VimConfig) -> Vec<T> {
    let (c, s, p) = (cfg.in_channels, cfg.image_size, cfg.patch_size);
    let side = s / p;
    let mut out = Vec::with_capacity(images.len());
    for img in images.chunks(c * s * s).take(batch) {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for y in 0..p {
                        let row = (ch * s + py * p + y) * s + px * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    out
}

/// Draws a plausible random `[B, C, S, S]` batch, mostly for tests and benches.
pub fn random_images<T: Float>(cfg: &VimConfig, batch: usize, rng: &mut impl Rng) -> Tensor<T> {
    let n = batch * cfg.in_channels * cfg.image_size * cfg.image_size;
    Tensor::from_parts(
        vec![batch, cfg.in_channels, cfg.image_size, cfg.image_size],
        (0..n).map(|_| T::of(rng.random_range(0.0..1.0))).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn small_cfg() -> VimConfig {
        VimConfig {
            image_size: 16,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 8,
            depth: 2,
            state_dim: 2,
            expand_ratio: 2,
            conv_kernel: 3,
            num_classes: 6,
            class_token: ClassTokenPosition::Middle,
        }
    }

    #[test]
    fn patchify_shapes() {
        let mut cfg = VimConfig::toy();
        cfg.patch_size = 16;
        let img = Tensor::<f32>::zeros(vec![3, 32, 32]);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 768]);

        cfg.patch_size = 32;
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 3072]);

        let img = Tensor::<f32>::full(vec![3, 32, 32], 0.25);
        cfg.patch_size = 8;
        let p = patchify(&img, &cfg).unwrap();
        let first = &p.data()[..cfg.patch_dim()];
        assert!(p.data().chunks(cfg.patch_dim()).all(|t| t == first));

        cfg.patch_size = 5;
        assert!(patchify(&img, &cfg).is_err());
    }

    #[test]
    fn patchify_order_is_row_major_channel_major() {
        let cfg = VimConfig {
            image_size: 4,
            patch_size: 2,
            in_channels: 2,
            ..small_cfg()
        };
        let img = Tensor::<f32>::new(vec![2, 4, 4], (0..32).map(|v| v as f32).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        // patch (0,1): channel 0 rows [2,3],[6,7]; channel 1 rows [18,19],[22,23]
        assert_eq!(&p.data()[8..16], &[2., 3., 6., 7., 18., 19., 22., 23.]);
    }

    #[test]
    fn class_token_positions() {
        let mut cfg = small_cfg();
        cfg.image_size = 16;
        cfg.patch_size = 8; // L = 4
        let model = VimModel::<f64>::new(cfg.clone(), names(6), 0).unwrap();
        assert_eq!(cfg.class_token_index(), 2);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = model
            .embed(&mut tape, &vars, &Tensor::zeros(vec![1, 3, 16, 16]))
            .unwrap();
        assert_eq!(tape.shape(x), &[1, 5, 8]);

        cfg.class_token = ClassTokenPosition::Head;
        assert_eq!(cfg.class_token_index(), 0);
    }

    #[test]
    fn zero_projection_zero_pos_gives_zero_patch_tokens() {
        let mut model = VimModel::<f64>::new(small_cfg(), names(6), 1).unwrap();
        for name in ["patch_embed.weight", "pos_embed"] {
            let t = model.param_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs = random_images(model.config(), 1, &mut rng);
        let x = model.embed(&mut tape, &vars, &imgs).unwrap();
        let cls = model.config().class_token_index();
        for (t, row) in tape.value(x).chunks(8).enumerate() {
            if t != cls {
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(row, model.param("cls_token").unwrap().data());
            }
        }
    }

    #[test]
    fn logits_have_num_classes_and_start_uniform() {
        let model = VimModel::<f32>::new(VimConfig::toy(), names(6), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_images::<f32>(model.config(), 1, &mut rng)
            .reshape(vec![3, 32, 32])
            .unwrap();
        let logits = model.forward(&img).unwrap();
        assert_eq!(logits.shape(), &[6]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = ops::softmax(&logits).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-7));

        assert!(model.forward(&Tensor::zeros(vec![3, 16, 16])).is_err());
    }

    #[test]
    fn zero_blocks_are_identity() {
        let mut model = VimModel::<f64>::new(small_cfg(), names(6), 5).unwrap();
        for blk in model.blocks().to_vec() {
            let t = &mut model.params_mut()[blk.out_proj].tensor;
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let imgs = random_images(model.config(), 2, &mut rng);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let e = model.embed(&mut tape, &vars, &imgs).unwrap();
        let out = model.encode(&mut tape, &vars, &imgs).unwrap();
        assert_eq!(tape.value(e), tape.value(out));
    }

    #[test]
    fn all_block_weights_zero_gives_residual_identity() {
        let mut model = VimModel::<f64>::new(small_cfg(), names(6), 5).unwrap();
        let blk = model.blocks()[0];
        let n = model.params().len();
        for i in blk.norm_gamma..=blk.out_proj {
            assert!(i < n);
            let t = &mut model.params_mut()[i].tensor;
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let seq = tape.constant(vec![1, 5, 8], (0..40).map(|v| v as f64 * 0.1).collect());
        let out = model.block_forward(&mut tape, &vars, seq, 0).unwrap();
        assert_eq!(tape.value(out), tape.value(seq));
    }

    #[test]
    fn strategies_freeze_expected_tensors() {
        let mut model = VimModel::<f32>::new(small_cfg(), names(6), 7).unwrap();
        let n = model.params().len();

        model.set_trainable(Strategy::HeadOnly);
        for (i, p) in model.params().iter().enumerate() {
            assert_eq!(p.tensor.requires_grad, model.is_head(i), "{}", p.name);
        }

        let count = model.set_trainable(Strategy::LastN(20));
        assert_eq!(count, 22);
        for (i, p) in model.params().iter().enumerate() {
            assert_eq!(p.tensor.requires_grad, i >= n - 22, "{}", p.name);
        }

        assert_eq!(model.set_trainable(Strategy::LastN(10_000)), n);
        assert_eq!(model.set_trainable(Strategy::Full), n);
        assert!(model.params().iter().all(|p| p.tensor.requires_grad));
    }

    #[test]
    fn strategy_parsing() {
        for s in ["scratch", "head-only", "full", "last-n=20"] {
            assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
        }
        assert!("last-n=x".parse::<Strategy>().is_err());
    }

    #[test]
    fn manifest_order_is_canonical() {
        let model = VimModel::<f32>::new(small_cfg(), names(6), 0).unwrap();
        let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            &names[..4],
            &[
                "patch_embed.weight",
                "patch_embed.bias",
                "pos_embed",
                "cls_token"
            ]
        );
        assert_eq!(names[4], "blocks.0.norm.gamma");
        assert_eq!(names[6], "blocks.0.in_proj.weight");
        assert_eq!(names[7], "blocks.0.fwd.conv.weight");
        assert_eq!(names[16], "blocks.0.bwd.conv.weight");
        assert_eq!(names[25], "blocks.0.out_proj.weight");
        assert_eq!(
            &names[names.len() - 4..],
            &["norm_f.gamma", "norm_f.beta", "head.weight", "head.bias"]
        );
    }
}
