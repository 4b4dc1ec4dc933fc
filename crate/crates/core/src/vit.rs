//! Vision Transformer binary classifier.
//!
//! A square RGB patch is cut into a grid of `token_patch_size` tiles. Each
//! tile is flattened and linearly projected into an embedding; a learned
//! class token is prepended and learned positional embeddings are added.
//! The sequence then passes through `n_blocks` pre-norm encoder blocks
//! (layer norm, multi-head self-attention, residual; layer norm, GELU MLP,
//! residual), and the classification head reads the final class-token row.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, validation_err, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::seed;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub token_patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 100,
            token_patch_size: 10,
            channels: 3,
            embed_dim: 64,
            n_heads: 4,
            n_blocks: 4,
            mlp_ratio: 4,
            n_classes: 2,
            dropout_rate: 0.1,
        }
    }
}

impl ViTConfig {
    /// The smallest configuration worth differentiating numerically.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            token_patch_size: 4,
            channels: 3,
            embed_dim: 8,
            n_heads: 2,
            n_blocks: 1,
            mlp_ratio: 4,
            n_classes: 2,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_patch_size == 0 || self.image_size % self.token_patch_size != 0 {
            return Err(validation_err!(
                "image size {} is not divisible by token patch size {}",
                self.image_size,
                self.token_patch_size
            ));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(validation_err!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim,
                self.n_heads
            ));
        }
        if self.n_classes < 2 {
            return Err(validation_err!("need at least two classes"));
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.n_blocks == 0 {
            return Err(validation_err!("channels, mlp_ratio and n_blocks must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(validation_err!("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        let g = self.image_size / self.token_patch_size;
        g * g
    }

    pub fn token_dim(&self) -> usize {
        self.token_patch_size * self.token_patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Number of learnable scalars, in closed form.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let embed = self.token_dim() * d + d + d + (self.n_tokens() + 1) * d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        let head = 2 * d + d * self.n_classes + self.n_classes;
        embed + self.n_blocks * block + head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub w_q: P,
    pub b_q: P,
    pub w_k: P,
    pub b_k: P,
    pub w_v: P,
    pub b_v: P,
    pub w_o: P,
    pub b_o: P,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub w_mlp1: P,
    pub b_mlp1: P,
    pub w_mlp2: P,
    pub b_mlp2: P,
}

impl<P> BlockParams<P> {
    fn refs(&self) -> [&P; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_mlp1,
            &self.b_mlp1,
            &self.w_mlp2,
            &self.b_mlp2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut P; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_mlp1,
            &mut self.b_mlp1,
            &mut self.w_mlp2,
            &mut self.b_mlp2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = P>) -> Option<Self> {
        Some(Self {
            ln1_gamma: it.next()?,
            ln1_beta: it.next()?,
            w_q: it.next()?,
            b_q: it.next()?,
            w_k: it.next()?,
            b_k: it.next()?,
            w_v: it.next()?,
            b_v: it.next()?,
            w_o: it.next()?,
            b_o: it.next()?,
            ln2_gamma: it.next()?,
            ln2_beta: it.next()?,
            w_mlp1: it.next()?,
            b_mlp1: it.next()?,
            w_mlp2: it.next()?,
            b_mlp2: it.next()?,
        })
    }
}

/// Every learnable tensor of the model, generic over what is stored per
/// slot: tensors, tape handles, or shapes.
///
/// [`Params::iter`] defines the canonical order used by the optimizer and
/// the checkpoint payload: patch projection (weight, bias), class token,
/// positional table, then per block the 16 tensors of [`BlockParams`] in
/// declaration order, then the final norm (gamma, beta) and the head
/// (weight, bias).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub cls_token: P,
    pub pos_embed: P,
    pub blocks: Vec<BlockParams<P>>,
    pub norm_gamma: P,
    pub norm_beta: P,
    pub head_w: P,
    pub head_b: P,
}

pub type ModelParams<T> = Params<Tensor<T>>;

impl<P> Params<P> {
    pub fn iter(&self) -> impl Iterator<Item = &P> {
        [&self.patch_w, &self.patch_b, &self.cls_token, &self.pos_embed]
            .into_iter()
            .chain(self.blocks.iter().flat_map(|b| b.refs()))
            .chain([&self.norm_gamma, &self.norm_beta, &self.head_w, &self.head_b])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut P> {
        [
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ]
        .into_iter()
        .chain(self.blocks.iter_mut().flat_map(|b| b.refs_mut()))
        .chain([
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.head_w,
            &mut self.head_b,
        ])
    }

    pub fn len(&self) -> usize {
        8 + 16 * self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rebuilds from slots in canonical order.
    pub fn from_slots(n_blocks: usize, slots: impl IntoIterator<Item = P>) -> Option<Self> {
        let mut it = slots.into_iter();
        let patch_w = it.next()?;
        let patch_b = it.next()?;
        let cls_token = it.next()?;
        let pos_embed = it.next()?;
        let blocks = (0..n_blocks)
            .map(|_| BlockParams::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        let out = Self {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            norm_gamma: it.next()?,
            norm_beta: it.next()?,
            head_w: it.next()?,
            head_b: it.next()?,
        };
        it.next().is_none().then_some(out)
    }

    pub fn map<'s, Q>(&'s self, mut f: impl FnMut(&'s P) -> Q) -> Params<Q> {
        let n_blocks = self.blocks.len();
        let slots: Vec<Q> = self.iter().map(&mut f).collect();
        Params::from_slots(n_blocks, slots).expect("slot count is preserved by map")
    }
}

/// Shape of every parameter slot.
pub fn param_shapes(cfg: &ViTConfig) -> Params<Vec<usize>> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let block = BlockParams {
        ln1_gamma: vec![d],
        ln1_beta: vec![d],
        w_q: vec![d, d],
        b_q: vec![d],
        w_k: vec![d, d],
        b_k: vec![d],
        w_v: vec![d, d],
        b_v: vec![d],
        w_o: vec![d, d],
        b_o: vec![d],
        ln2_gamma: vec![d],
        ln2_beta: vec![d],
        w_mlp1: vec![d, h],
        b_mlp1: vec![h],
        w_mlp2: vec![h, d],
        b_mlp2: vec![d],
    };
    Params {
        patch_w: vec![cfg.token_dim(), d],
        patch_b: vec![d],
        cls_token: vec![1, d],
        pos_embed: vec![cfg.n_tokens() + 1, d],
        blocks: vec![block; cfg.n_blocks],
        norm_gamma: vec![d],
        norm_beta: vec![d],
        head_w: vec![d, cfg.n_classes],
        head_b: vec![cfg.n_classes],
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Weights, class token and positional table ~ N(0, 0.02); biases zero;
    /// layer-norm gains one.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let shapes = param_shapes(cfg);
        let mut draw = |shape: &Vec<usize>| -> Tensor<T> {
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("shape matches draw")
        };
        let zeros = |shape: &Vec<usize>| Tensor::<T>::zeros(shape);
        let ones = |shape: &Vec<usize>| Tensor::<T>::full(shape, T::ONE);

        let patch_w = draw(&shapes.patch_w);
        let cls_token = draw(&shapes.cls_token);
        let pos_embed = draw(&shapes.pos_embed);
        let blocks = shapes
            .blocks
            .iter()
            .map(|s| BlockParams {
                ln1_gamma: ones(&s.ln1_gamma),
                ln1_beta: zeros(&s.ln1_beta),
                w_q: draw(&s.w_q),
                b_q: zeros(&s.b_q),
                w_k: draw(&s.w_k),
                b_k: zeros(&s.b_k),
                w_v: draw(&s.w_v),
                b_v: zeros(&s.b_v),
                w_o: draw(&s.w_o),
                b_o: zeros(&s.b_o),
                ln2_gamma: ones(&s.ln2_gamma),
                ln2_beta: zeros(&s.ln2_beta),
                w_mlp1: draw(&s.w_mlp1),
                b_mlp1: zeros(&s.b_mlp1),
                w_mlp2: draw(&s.w_mlp2),
                b_mlp2: zeros(&s.b_mlp2),
            })
            .collect();
        let head_w = draw(&shapes.head_w);
        Ok(Params {
            patch_w,
            patch_b: zeros(&shapes.patch_b),
            cls_token,
            pos_embed,
            blocks,
            norm_gamma: ones(&shapes.norm_gamma),
            norm_beta: zeros(&shapes.norm_beta),
            head_w,
            head_b: zeros(&shapes.head_b),
        })
    }

    pub fn numel(&self) -> usize {
        self.iter().map(Tensor::numel).sum()
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ViTConfig) -> Result<()> {
        let expected = param_shapes(cfg);
        if expected.blocks.len() != self.blocks.len() {
            return Err(shape_err!(
                "expected {} blocks, found {}",
                expected.blocks.len(),
                self.blocks.len()
            ));
        }
        for (i, (t, s)) in self.iter().zip(expected.iter()).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(shape_err!(
                    "parameter slot {i} has shape {:?}, expected {:?}",
                    t.shape(),
                    s
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        self.map(|t| t.cast())
    }

    /// Puts every parameter on `tape` by reference.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a, T>) -> Params<Var> {
        self.map(|t| tape.param(t))
    }
}

/// Splits an `H x W x C` interleaved image into row-major `p x p` tiles,
/// each flattened in (row, column, channel) order. Bytes are mapped from
/// `[0, 255]` to `[-1, 1]`.
pub fn patchify<T: Scalar>(
    pixels: &[u8],
    height: usize,
    width: usize,
    channels: usize,
    p: usize,
) -> Result<Tensor<T>> {
    if pixels.len() != height * width * channels {
        return Err(shape_err!(
            "{} bytes for a {height}x{width}x{channels} image",
            pixels.len()
        ));
    }
    if height != width {
        return Err(shape_err!("image must be square, got {height}x{width}"));
    }
    if p == 0 || height % p != 0 {
        return Err(shape_err!("token patch size {p} does not divide {height}"));
    }
    let grid = height / p;
    let token_dim = p * p * channels;
    let mut data = Vec::with_capacity(grid * grid * token_dim);
    let scale = 2.0 / 255.0;
    for gy in 0..grid {
        for gx in 0..grid {
            for y in gy * p..(gy + 1) * p {
                let start = (y * width + gx * p) * channels;
                data.extend(
                    pixels[start..start + p * channels]
                        .iter()
                        .map(|&v| T::from_f64(v as f64 * scale - 1.0)),
                );
            }
        }
    }
    Tensor::new(&[grid * grid, token_dim], data)
}

/// Outputs of one forward pass on a tape.
pub struct Forward {
    pub logits: Var,
    /// Attention matrices per block, per head.
    pub attention: Vec<Vec<Var>>,
}

/// Inverted dropout; a no-op when `rng` is `None` or `rate` is zero.
fn dropout<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::ZERO } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, mask)
}

/// Class token followed by projected tokens, plus positional embeddings.
pub fn embed<T: Scalar>(tape: &mut Tape<'_, T>, params: &Params<Var>, tokens: Var) -> Result<Var> {
    let (_, width) = tape.value(tokens).dims2()?;
    let (expected, _) = tape.value(params.patch_w).dims2()?;
    if width != expected {
        return Err(shape_err!("token width {width}, projection expects {expected}"));
    }
    let proj = tape.matmul(tokens, params.patch_w)?;
    let proj = tape.add_bias(proj, params.patch_b)?;
    let seq = tape.concat_rows(&[params.cls_token, proj])?;
    tape.add(seq, params.pos_embed)
}

/// Multi-head scaled dot-product self-attention followed by the output
/// projection. Returns the projected sequence and each head's attention
/// matrix.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    seq: Var,
    block: &BlockParams<Var>,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (_, d) = tape.value(seq).dims2()?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(shape_err!("embed dim {d} not divisible by {n_heads} heads"));
    }
    let dh = d / n_heads;
    let q = tape.matmul(seq, block.w_q)?;
    let q = tape.add_bias(q, block.b_q)?;
    let k = tape.matmul(seq, block.w_k)?;
    let k = tape.add_bias(k, block.b_k)?;
    let v = tape.matmul(seq, block.w_v)?;
    let v = tape.add_bias(v, block.b_v)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let mut heads = Vec::with_capacity(n_heads);
    let mut attention = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores)?;
        heads.push(tape.matmul(attn, vh)?);
        attention.push(attn);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, block.w_o)?;
    Ok((tape.add_bias(out, block.b_o)?, attention))
}

/// Full forward pass from token matrix to logits. Dropout is active only
/// when `rng` is given.
pub fn forward_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &Params<Var>,
    tokens: Var,
    cfg: &ViTConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward> {
    let eps = T::from_f64(LN_EPS);
    let mut seq = embed(tape, params, tokens)?;
    seq = dropout(tape, seq, cfg.dropout_rate, rng.as_deref_mut())?;
    let mut attention = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let h = tape.layer_norm(seq, block.ln1_gamma, block.ln1_beta, eps)?;
        let (a, maps) = multi_head_attention(tape, h, block, cfg.n_heads)?;
        attention.push(maps);
        seq = tape.add(seq, a)?;

        let h = tape.layer_norm(seq, block.ln2_gamma, block.ln2_beta, eps)?;
        let h = tape.matmul(h, block.w_mlp1)?;
        let h = tape.add_bias(h, block.b_mlp1)?;
        let h = tape.gelu(h);
        let h = dropout(tape, h, cfg.dropout_rate, rng.as_deref_mut())?;
        let h = tape.matmul(h, block.w_mlp2)?;
        let h = tape.add_bias(h, block.b_mlp2)?;
        seq = tape.add(seq, h)?;
    }
    let cls = tape.slice_rows(seq, 0, 1)?;
    let cls = tape.layer_norm(cls, params.norm_gamma, params.norm_beta, eps)?;
    let logits = tape.matmul(cls, params.head_w)?;
    let logits = tape.add_bias(logits, params.head_b)?;
    let logits = tape.reshape(logits, &[cfg.n_classes])?;
    Ok(Forward { logits, attention })
}

/// Class logits for one `image_size x image_size x channels` image.
/// Dropout is applied only when `train_rng` is given.
pub fn forward_logits<T: Scalar>(
    pixels: &[u8],
    params: &ModelParams<T>,
    cfg: &ViTConfig,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<T>> {
    let tokens = patchify(
        pixels,
        cfg.image_size,
        cfg.image_size,
        cfg.channels,
        cfg.token_patch_size,
    )?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let tokens = tape.constant(tokens);
    let out = forward_tape(&mut tape, &vars, tokens, cfg, train_rng)?;
    Ok(tape.value(out.logits).clone())
}
