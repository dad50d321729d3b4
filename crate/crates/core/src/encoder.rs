//! ViT-style bidirectional encoder.
//!
//! The image is cut into non-overlapping `P x P` patches in raster order,
//! linearly embedded, prefixed with a learned class token and offset by learned
//! positions. `L` pre-norm transformer blocks follow:
//!
//! ```text
//! z'  = z  + MHSA(LN(z))
//! z'' = z' + MLP(LN(z'))
//! ```
//!
//! The final state of the class token is the global context vector. The patch
//! tokens, nearest-neighbour upsampled back to pixel resolution and summed
//! with a per-pixel linear embedding of the image, form the dense feature map
//! the mask head convolves.
//!
//! Blocks optionally run *gated*: only the listed token rows are updated,
//! while every row still serves as a key/value.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            channels: 3,
            patch_size: 8,
            hidden_dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 || self.image_height == 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::Config("layers, mlp_ratio and channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.hidden_dim;
        let n = self.num_patches();
        store.normal("encoder.patch_embed", &[self.patch_dim(), d], rng);
        // Fan-in scale: the per-pixel path must be comparable to normalized tokens from step 0.
        let pixel_std = 1.0 / (self.channels as f64).sqrt();
        store.insert(
            "encoder.pixel_embed",
            Tensor::randn(&[self.channels, d], pixel_std, rng),
        );
        store.normal("encoder.cls_token", &[1, d], rng);
        store.zeros("encoder.pos_embed", &[n + 1, d]);
        for l in 0..self.layers {
            init_block(store, &format!("encoder.block{l}"), d, self.mlp_ratio, rng);
        }
        store.ones("encoder.ln_final.gain", &[d]);
        store.zeros("encoder.ln_final.bias", &[d]);
    }
}

pub(crate) fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.normal(&format!("{prefix}.{w}"), &[d, d], rng);
    }
    store.zeros(&format!("{prefix}.bo"), &[1, d]);
}

pub(crate) fn init_mlp<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, ratio: usize, rng: &mut R) {
    store.normal(&format!("{prefix}.w1"), &[d, d * ratio], rng);
    store.zeros(&format!("{prefix}.b1"), &[1, d * ratio]);
    store.normal(&format!("{prefix}.w2"), &[d * ratio, d], rng);
    store.zeros(&format!("{prefix}.b2"), &[1, d]);
}

pub(crate) fn init_layernorm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.ones(&format!("{prefix}.gain"), &[d]);
    store.zeros(&format!("{prefix}.bias"), &[d]);
}

fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, ratio: usize, rng: &mut R) {
    init_layernorm(store, &format!("{prefix}.ln1"), d);
    init_attention(store, &format!("{prefix}.attn"), d, rng);
    init_layernorm(store, &format!("{prefix}.ln2"), d);
    init_mlp(store, &format!("{prefix}.mlp"), d, ratio, rng);
}

/// Splits an `H x W x C` image into `n = HW/P^2` raster-ordered patch vectors of length `P*P*C`.
pub fn patchify(image: &[f64], h: usize, w: usize, c: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible into {p}x{p} patches"
        )));
    }
    if image.len() != h * w * c {
        return Err(Error::shape("patchify", &[image.len()], &[h, w, c]));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(image.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * w + gx * p) * c;
                data.extend_from_slice(&image[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * c], data)
}

pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, p: usize) -> Result<Vec<f64>> {
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, p * p * c] {
        return Err(Error::shape("unpatchify", patches.shape(), &[gh * gw, p * p * c]));
    }
    let mut image = vec![0.0; h * w * c];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row_slice(gy * gw + gx);
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * w + gx * p) * c;
                image[start..start + p * c].copy_from_slice(&row[py * p * c..(py + 1) * p * c]);
            }
        }
    }
    Ok(image)
}

/// Row-wise concatenation, built from transposes and column concatenation.
pub fn concat_rows(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let ts = xs.iter().map(|&x| tape.transpose(x)).collect::<Result<Vec<_>>>()?;
    let cat = tape.concat_cols(&ts)?;
    tape.transpose(cat)
}

/// `z_0 = [cls; patches * E] + E_pos`, shape `(n+1) x d`.
pub fn embed(tape: &mut Tape, patches: Var, e: Var, pos: Var, cls: Var) -> Result<Var> {
    let tokens = tape.matmul(patches, e)?;
    let seq = concat_rows(tape, &[cls, tokens])?;
    if tape.shape(seq) != tape.shape(pos) {
        return Err(Error::shape("embed", tape.shape(seq), tape.shape(pos)));
    }
    tape.add(seq, pos)
}

/// `softmax(Q K^T / sqrt(d_k)) V`; also returns the attention weights.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (_, dq) = tape.value(q).dims2()?;
    let (nk, dk) = tape.value(k).dims2()?;
    let (nv, _) = tape.value(v).dims2()?;
    if dq != dk {
        return Err(Error::shape("attention", tape.shape(q), tape.shape(k)));
    }
    if nk != nv {
        return Err(Error::shape("attention", tape.shape(k), tape.shape(v)));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax(scaled, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention of `queries` over `keys` (also the values), with output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    queries: Var,
    keys: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let wq = params.get(&format!("{prefix}.wq"))?;
    let wk = params.get(&format!("{prefix}.wk"))?;
    let wv = params.get(&format!("{prefix}.wv"))?;
    let wo = params.get(&format!("{prefix}.wo"))?;
    let bo = params.get(&format!("{prefix}.bo"))?;
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(keys, wk)?;
    let v = tape.matmul(keys, wv)?;
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * dh, dh)?;
        let kh = tape.slice_cols(k, hd * dh, dh)?;
        let vh = tape.slice_cols(v, hd * dh, dh)?;
        let (o, w) = attention(tape, qh, kh, vh)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = tape.concat_cols(&outs)?;
    let proj = tape.matmul(cat, wo)?;
    Ok((tape.add(proj, bo)?, weights))
}

pub fn layernorm(tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = params.get(&format!("{prefix}.gain"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    tape.layernorm(x, g, b)
}

pub fn mlp(tape: &mut Tape, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w1 = params.get(&format!("{prefix}.w1"))?;
    let b1 = params.get(&format!("{prefix}.b1"))?;
    let w2 = params.get(&format!("{prefix}.w2"))?;
    let b2 = params.get(&format!("{prefix}.b2"))?;
    let hidden = tape.matmul(x, w1)?;
    let hidden = tape.add(hidden, b1)?;
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, w2)?;
    tape.add(out, b2)
}

/// One pre-norm block. With `active`, only those rows are updated; the rest pass through.
pub fn transformer_block(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    z: Var,
    heads: usize,
    active: Option<&[usize]>,
) -> Result<Var> {
    let normed = layernorm(tape, params, &format!("{prefix}.ln1"), z)?;
    let (queries, residual) = match active {
        Some(rows) => (tape.gather_rows(normed, rows)?, tape.gather_rows(z, rows)?),
        None => (normed, z),
    };
    let (attn, _) = multi_head_attention(tape, params, &format!("{prefix}.attn"), queries, normed, heads)?;
    let z1 = tape.add(residual, attn)?;
    let n2 = layernorm(tape, params, &format!("{prefix}.ln2"), z1)?;
    let m = mlp(tape, params, &format!("{prefix}.mlp"), n2)?;
    let z2 = tape.add(z1, m)?;
    match active {
        Some(rows) => tape.scatter_rows(z, z2, rows),
        None => Ok(z2),
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final-normalized token states, `(n+1) x d`; row 0 is the class token.
    pub tokens: Var,
    /// `1 x d` final class-token state.
    pub global_context: Var,
    /// Dense features `H x W x d`.
    pub feature_map: Var,
    /// Raw block outputs, one `(n+1) x d` state per layer.
    pub layer_states: Vec<Var>,
    /// Token rows actively updated, summed over layers.
    pub compute_proxy: usize,
}

/// Token row indices whose patches intersect `focus`; the class token is always active.
pub fn active_tokens(config: &EncoderConfig, focus: &[(usize, usize)]) -> Vec<usize> {
    let (_, gw) = config.grid();
    let p = config.patch_size;
    let mut hit = vec![false; config.num_patches()];
    for &(y, x) in focus {
        if y < config.image_height && x < config.image_width {
            hit[(y / p) * gw + x / p] = true;
        }
    }
    std::iter::once(0)
        .chain(hit.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i + 1))
        .collect()
}

/// Encodes one `H x W x C` image. `active` restricts which token rows the blocks update.
pub fn encode(
    tape: &mut Tape,
    config: &EncoderConfig,
    params: &Bound,
    image: &[f64],
    active: Option<&[usize]>,
) -> Result<EncoderOutput> {
    config.validate()?;
    let (h, w, c, p) = (
        config.image_height,
        config.image_width,
        config.channels,
        config.patch_size,
    );
    let patches = patchify(image, h, w, c, p)?;
    let patches = tape.constant(patches);
    let mut z = embed(
        tape,
        patches,
        params.get("encoder.patch_embed")?,
        params.get("encoder.pos_embed")?,
        params.get("encoder.cls_token")?,
    )?;
    let n_tokens = config.num_patches() + 1;
    let mut layer_states = Vec::with_capacity(config.layers);
    let mut compute_proxy = 0;
    for l in 0..config.layers {
        z = transformer_block(tape, params, &format!("encoder.block{l}"), z, config.heads, active)?;
        compute_proxy += active.map_or(n_tokens, <[usize]>::len);
        layer_states.push(z);
    }
    let tokens = layernorm(tape, params, "encoder.ln_final", z)?;
    let global_context = tape.gather_rows(tokens, &[0])?;

    let (_, gw) = config.grid();
    let pixel_to_token: Vec<usize> = (0..h * w).map(|i| 1 + (i / w / p) * gw + (i % w) / p).collect();
    let upsampled = tape.gather_rows(tokens, &pixel_to_token)?;
    let pixels = tape.constant(Tensor::new(vec![h * w, c], image.to_vec())?);
    let pixel_feats = tape.matmul(pixels, params.get("encoder.pixel_embed")?)?;
    let dense = tape.add(upsampled, pixel_feats)?;
    let feature_map = tape.reshape(dense, &[h, w, config.hidden_dim])?;

    Ok(EncoderOutput {
        tokens,
        global_context,
        feature_map,
        layer_states,
        compute_proxy,
    })
}
