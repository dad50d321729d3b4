//! Query-based instance heads.
//!
//! Each of `N_q` learned queries cross-attends once to the encoder tokens and
//! passes an MLP. The updated query then drives:
//! - a dynamic `K x K x d -> 1` filter convolved over the dense feature map,
//!   giving the soft mask `sigmoid(F_i * F)`;
//! - a Gaussian prior centered at the mask's soft-argmax with a learned width,
//!   multiplied into the mask;
//! - damage (softmax), fake (sigmoid, multi-label) and part (softmax) logits;
//! - a 4-way domain head `{damage, fake, part, none}`; `none` is the target of
//!   queries left unmatched during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_slice, Tape, Var};
use crate::encoder::{init_attention, init_layernorm, init_mlp, layernorm, mlp, multi_head_attention};
use crate::error::{Error, Result};
use crate::labels::Domain;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const SIGMA_FLOOR: f64 = 0.5;
/// Added to the soft-argmax numerator (times the midpoint) and denominator so an all-zero mask centers at the midpoint.
pub const CENTER_EPS: f64 = 1e-9;
/// Domain head slots, in logit order; slot 3 is "no object".
pub const DOMAIN_SLOTS: [Option<Domain>; 4] = [Some(Domain::Damage), Some(Domain::Fake), Some(Domain::Part), None];
pub const NONE_SLOT: usize = 3;

pub fn domain_slot(domain: Domain) -> usize {
    match domain {
        Domain::Damage => 0,
        Domain::Fake => 1,
        Domain::Part => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    pub num_queries: usize,
    pub kernel_size: usize,
    /// Token refinement strength.
    pub alpha: f64,
    pub mlp_ratio: usize,
    pub gaussian_refine: bool,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            num_queries: 16,
            kernel_size: 3,
            alpha: 1.0,
            mlp_ratio: 2,
            gaussian_refine: true,
        }
    }
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_size {} must be odd so the filter has a center",
                self.kernel_size
            )));
        }
        if !(self.alpha >= 0.0) || self.mlp_ratio == 0 {
            return Err(Error::Config("alpha must be >= 0 and mlp_ratio >= 1".into()));
        }
        Ok(())
    }

    pub fn filter_len(&self, d: usize) -> usize {
        self.kernel_size * self.kernel_size * d + 1
    }

    /// `sizes` = (|D|, |F|, |P|); `image_side` sets the initial Gaussian width.
    pub fn init_params<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        d: usize,
        sizes: (usize, usize, usize),
        image_side: usize,
        rng: &mut R,
    ) {
        store.normal("heads.queries", &[self.num_queries, d], rng);
        init_layernorm(store, "heads.ln_q", d);
        init_layernorm(store, "heads.ln_kv", d);
        init_attention(store, "heads.cross", d, rng);
        init_layernorm(store, "heads.ln_mlp", d);
        init_mlp(store, "heads.mlp", d, self.mlp_ratio, rng);
        init_layernorm(store, "heads.ln_out", d);
        store.normal("heads.filter.w", &[d, self.filter_len(d)], rng);
        store.zeros("heads.filter.b", &[1, self.filter_len(d)]);
        store.zeros("heads.sigma.w", &[d, 1]);
        // softplus(b) ~= b for large b: start with a nearly flat prior.
        store.insert(
            "heads.sigma.b",
            Tensor::scalar(image_side as f64 / 2.0)
                .reshape(&[1, 1])
                .expect("1 elem"),
        );
        let pool_std = 1.0 / (d as f64).sqrt();
        store.insert("heads.pool.w", Tensor::randn(&[d, d], pool_std, rng));
        init_layernorm(store, "heads.ln_cls", d);
        let (nd, nf, np) = sizes;
        for (name, n) in [
            ("damage", nd),
            ("fake", nf),
            ("part", np),
            ("domain", DOMAIN_SLOTS.len()),
        ] {
            store.normal(&format!("heads.cls_{name}.w"), &[d, n], rng);
            store.zeros(&format!("heads.cls_{name}.b"), &[1, n]);
        }
    }
}

/// Query states after one cross-attention + MLP stage, `N_q x d`.
pub fn update_queries(tape: &mut Tape, params: &Bound, tokens: Var, heads: usize) -> Result<Var> {
    let q = params.get("heads.queries")?;
    let qn = layernorm(tape, params, "heads.ln_q", q)?;
    let kv = layernorm(tape, params, "heads.ln_kv", tokens)?;
    let (attn, _) = multi_head_attention(tape, params, "heads.cross", qn, kv, heads)?;
    let q1 = tape.add(q, attn)?;
    let n1 = layernorm(tape, params, "heads.ln_mlp", q1)?;
    let m = mlp(tape, params, "heads.mlp", n1)?;
    let q2 = tape.add(q1, m)?;
    layernorm(tape, params, "heads.ln_out", q2)
}

/// Dynamic filters for every query: `(filters [N_q, K, K, d], bias [N_q])`.
pub fn gen_dynamic_filter(tape: &mut Tape, params: &Bound, queries: Var, k: usize) -> Result<(Var, Var)> {
    let (nq, d) = tape.value(queries).dims2()?;
    let w = params.get("heads.filter.w")?;
    let b = params.get("heads.filter.b")?;
    let raw = tape.matmul(queries, w)?;
    let raw = tape.add(raw, b)?;
    let kkd = k * k * d;
    if tape.shape(raw)[1] != kkd + 1 {
        return Err(Error::shape("gen_dynamic_filter", tape.shape(raw), &[nq, kkd + 1]));
    }
    let weights = tape.slice_cols(raw, 0, kkd)?;
    let filters = tape.reshape(weights, &[nq, k, k, d])?;
    let bias = tape.slice_cols(raw, kkd, 1)?;
    let bias = tape.reshape(bias, &[nq])?;
    Ok((filters, bias))
}

/// `sigmoid(filter * F)` per query, flattened to `N_q x HW`.
pub fn predict_mask(tape: &mut Tape, filters: Var, bias: Var, features: Var) -> Result<Var> {
    let conv = tape.conv2d(features, filters, bias)?;
    let shape = tape.shape(conv).to_vec();
    let flat = tape.reshape(conv, &[shape[0], shape[1] * shape[2]])?;
    Ok(tape.sigmoid(flat))
}

/// Constant `HW x 2` pixel coordinates `(row, col)`.
fn coordinate_table(h: usize, w: usize) -> Tensor {
    let data = (0..h * w).flat_map(|i| [(i / w) as f64, (i % w) as f64]).collect();
    Tensor::new(vec![h * w, 2], data).expect("h*w*2")
}

pub fn midpoint(h: usize, w: usize) -> (f64, f64) {
    ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
}

/// Soft-argmax centers `N_q x 2` and floored widths `N_q x 1`.
pub fn predict_center_sigma(
    tape: &mut Tape,
    params: &Bound,
    queries: Var,
    masks: Var,
    h: usize,
    w: usize,
) -> Result<(Var, Var)> {
    let coords = tape.constant(coordinate_table(h, w));
    let weighted = tape.matmul(masks, coords)?;
    let (my, mx) = midpoint(h, w);
    let bias = tape.constant(Tensor::row(&[CENTER_EPS * my, CENTER_EPS * mx]));
    let num = tape.add(weighted, bias)?;
    let mass = tape.sum_axis(masks, 1)?;
    let den = tape.add_scalar(mass, CENTER_EPS);
    let center = tape.div(num, den)?;

    let sw = params.get("heads.sigma.w")?;
    let sb = params.get("heads.sigma.b")?;
    let s = tape.matmul(queries, sw)?;
    let s = tape.add(s, sb)?;
    let s = tape.softplus(s);
    let sigma = tape.clamp(s, SIGMA_FLOOR, f64::INFINITY);
    Ok((center, sigma))
}

/// Multiplies each mask row by its Gaussian bump.
pub fn gaussian_refine_var(tape: &mut Tape, masks: Var, center: Var, sigma: Var, h: usize, w: usize) -> Result<Var> {
    let ys = tape.constant(Tensor::row(&(0..h * w).map(|i| (i / w) as f64).collect::<Vec<_>>()));
    let xs = tape.constant(Tensor::row(&(0..h * w).map(|i| (i % w) as f64).collect::<Vec<_>>()));
    let cy = tape.slice_cols(center, 0, 1)?;
    let cx = tape.slice_cols(center, 1, 1)?;
    let dy = tape.sub(ys, cy)?;
    let dx = tape.sub(xs, cx)?;
    let dy2 = tape.square(dy);
    let dx2 = tape.square(dx);
    let d2 = tape.add(dy2, dx2)?;
    let s2 = tape.square(sigma);
    let two_s2 = tape.scale(s2, 2.0);
    let ratio = tape.div(d2, two_s2)?;
    let neg = tape.neg(ratio);
    let bump = tape.exp(neg);
    tape.mul(masks, bump)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub center: (f64, f64),
    pub sigma: f64,
}

/// Value-level refinement of one `h x w` mask.
pub fn gaussian_refine(mask: &[f64], h: usize, w: usize, prior: GaussianPrior) -> Result<Vec<f64>> {
    if !(prior.sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be > 0, got {}", prior.sigma)));
    }
    let (cy, cx) = prior.center;
    if !(cy >= 0.0 && cx >= 0.0 && cy <= (h - 1) as f64 && cx <= (w - 1) as f64) {
        return Err(Error::Domain(format!("center ({cy}, {cx}) outside {h}x{w} image")));
    }
    if mask.len() != h * w {
        return Err(Error::shape("gaussian_refine", &[mask.len()], &[h, w]));
    }
    let two_s2 = 2.0 * prior.sigma * prior.sigma;
    Ok(mask
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let dy = (i / w) as f64 - cy;
            let dx = (i % w) as f64 - cx;
            m * (-(dy * dy + dx * dx) / two_s2).exp()
        })
        .collect())
}

/// Soft-argmax center of one mask; the midpoint for an all-zero mask.
pub fn soft_argmax(mask: &[f64], h: usize, w: usize) -> (f64, f64) {
    let (my, mx) = midpoint(h, w);
    let (mut sy, mut sx, mut total) = (CENTER_EPS * my, CENTER_EPS * mx, CENTER_EPS);
    for (i, &m) in mask.iter().enumerate() {
        sy += m * (i / w) as f64;
        sx += m * (i % w) as f64;
        total += m;
    }
    (sy / total, sx / total)
}

#[derive(Clone, Debug)]
pub struct HeadLogits {
    pub damage: Var,
    pub fake: Var,
    pub part: Var,
    pub domain: Var,
}

/// Linear classifiers on the query states; each output is `N_q x classes`.
/// Classifier input: `LN(q + pool(M, F) W)`, where `pool` is the mask-weighted mean feature.
pub fn class_state(tape: &mut Tape, params: &Bound, queries: Var, masks: Var, feature_map: Var) -> Result<Var> {
    let fm = tape.shape(feature_map).to_vec();
    let d = *fm.last().ok_or_else(|| Error::shape("class_state", &fm, &[]))?;
    let flat = tape.reshape(feature_map, &[fm.iter().product::<usize>() / d, d])?;
    let weighted = tape.matmul(masks, flat)?;
    let mass = tape.sum_axis(masks, 1)?;
    let mass = tape.add_scalar(mass, CENTER_EPS);
    let pooled = tape.div(weighted, mass)?;
    let projected = tape.matmul(pooled, params.get("heads.pool.w")?)?;
    let x = tape.add(queries, projected)?;
    layernorm(tape, params, "heads.ln_cls", x)
}

/// Per-head logits from the classifier input of [`class_state`].
pub fn classify(tape: &mut Tape, params: &Bound, queries: Var) -> Result<HeadLogits> {
    let mut head = |name: &str| -> Result<Var> {
        let w = params.get(&format!("heads.cls_{name}.w"))?;
        let b = params.get(&format!("heads.cls_{name}.b"))?;
        let z = tape.matmul(queries, w)?;
        tape.add(z, b)
    };
    Ok(HeadLogits {
        damage: head("damage")?,
        fake: head("fake")?,
        part: head("part")?,
        domain: head("domain")?,
    })
}

/// `z_d + alpha * mean(M over R_p)`; `z_d` unchanged for an empty region.
pub fn token_refine(z_d: f64, mask: &[f64], region: &[bool], alpha: f64) -> f64 {
    let n = region.iter().filter(|&&r| r).count();
    if n == 0 {
        return z_d;
    }
    let s: f64 = mask.iter().zip(region).filter(|(_, &r)| r).map(|(m, _)| m).sum();
    z_d + alpha * s / n as f64
}

/// Tape version of [`token_refine`] on column `class` of a `1 x |D|` logit row; `mask` is `1 x HW`.
pub fn token_refine_var(
    tape: &mut Tape,
    logits: Var,
    class: usize,
    mask: Var,
    region: &[bool],
    alpha: f64,
) -> Result<Var> {
    let n = region.iter().filter(|&&r| r).count();
    if n == 0 || alpha == 0.0 {
        return Ok(logits);
    }
    let width = tape.shape(logits)[1];
    if class >= width {
        return Err(Error::OutOfRange(format!("damage class {class} of {width}")));
    }
    let weights: Vec<f64> = region.iter().map(|&r| if r { alpha / n as f64 } else { 0.0 }).collect();
    let r = tape.constant(Tensor::new(vec![region.len(), 1], weights)?);
    let boost = tape.matmul(mask, r)?;
    let mut one_hot = vec![0.0; width];
    one_hot[class] = 1.0;
    let one_hot = tape.constant(Tensor::row(&one_hot));
    let spread = tape.mul(one_hot, boost)?;
    tape.add(logits, spread)
}

/// One query's decoded output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query: usize,
    /// Refined soft mask, `H*W`, values in `[0, 1]`.
    pub mask: Vec<f64>,
    pub damage_logits: Vec<f64>,
    pub fake_logits: Vec<f64>,
    pub part_logits: Vec<f64>,
    pub domain_logits: Vec<f64>,
    pub prior: GaussianPrior,
}

impl Prediction {
    /// Argmax of the domain head; `None` means "no object".
    pub fn domain(&self) -> Option<Domain> {
        DOMAIN_SLOTS[argmax(&self.domain_logits)]
    }

    pub fn damage_probs(&self) -> Vec<f64> {
        softmax_slice(&self.damage_logits)
    }

    pub fn part_probs(&self) -> Vec<f64> {
        softmax_slice(&self.part_logits)
    }

    pub fn fake_probs(&self) -> Vec<f64> {
        self.fake_logits.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Predicted class within the assigned domain.
    pub fn class_id(&self) -> Option<usize> {
        self.domain().map(|d| match d {
            Domain::Damage => argmax(&self.damage_logits),
            Domain::Fake => argmax(&self.fake_logits),
            Domain::Part => argmax(&self.part_logits),
        })
    }

    /// Max class probability within the assigned domain; 0 for "no object".
    pub fn confidence(&self) -> f64 {
        match self.domain() {
            None => 0.0,
            Some(Domain::Damage) => max(&self.damage_probs()),
            Some(Domain::Fake) => max(&self.fake_probs()),
            Some(Domain::Part) => max(&self.part_probs()),
        }
    }

    pub fn binary_mask(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m >= 0.5).collect()
    }
}

/// First index of the maximum; 0 for an empty slice.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, grad_check_many};
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bound_with(tape: &mut Tape, entries: &[(&str, Tensor)]) -> Bound {
        let mut b = Bound::default();
        for (n, t) in entries {
            let v = tape.constant(t.clone());
            b.insert(*n, v);
        }
        b
    }

    #[test]
    fn filter_is_deterministic_and_zero_for_zero_map() {
        let (d, k) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[d, k * k * d + 1], 1.0, &mut rng);
        let q = Tensor::randn(&[2, d], 1.0, &mut rng);
        let run = |w: &Tensor| {
            let mut tape = Tape::new();
            let p = bound_with(
                &mut tape,
                &[
                    ("heads.filter.w", w.clone()),
                    ("heads.filter.b", Tensor::zeros(&[1, k * k * d + 1])),
                ],
            );
            let qv = tape.constant(q.clone());
            let (f, b) = gen_dynamic_filter(&mut tape, &p, qv, k).unwrap();
            assert_eq!(tape.shape(f), &[2, k, k, d]);
            (tape.value(f).clone(), tape.value(b).clone())
        };
        assert_eq!(run(&w), run(&w));
        let (f, b) = run(&Tensor::zeros(&[d, k * k * d + 1]));
        assert!(f.data().iter().chain(b.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn filter_gradient_wrt_query() {
        let (d, k) = (3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[d, k * k * d + 1], 1.0, &mut rng);
        let probe = Tensor::randn(&[1, k * k * d + 1], 1.0, &mut rng);
        let q = Tensor::randn(&[1, d], 1.0, &mut rng);
        let err = grad_check(
            |t, q| {
                let p = bound_with(
                    t,
                    &[
                        ("heads.filter.w", w.clone()),
                        ("heads.filter.b", Tensor::zeros(&[1, k * k * d + 1])),
                    ],
                );
                let (f, b) = gen_dynamic_filter(t, &p, q, k)?;
                let f = t.reshape(f, &[1, k * k * d])?;
                let b = t.reshape(b, &[1, 1])?;
                let all = t.concat_cols(&[f, b])?;
                let pv = t.constant(probe.clone());
                let prod = t.mul(all, pv)?;
                let sq = t.square(prod);
                Ok(t.sum(sq))
            },
            &q,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn mask_of(filters: Tensor, bias: Tensor, features: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let f = tape.constant(filters);
        let b = tape.constant(bias);
        let x = tape.constant(features);
        let m = predict_mask(&mut tape, f, b, x).unwrap();
        tape.value(m).clone()
    }

    #[test]
    fn mask_from_zero_and_biased_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = Tensor::randn(&[6, 5, 4], 1.0, &mut rng);
        let m = mask_of(Tensor::zeros(&[1, 3, 3, 4]), Tensor::zeros(&[1]), feats.clone());
        assert!(m.data().iter().all(|&v| v == 0.5));
        let m = mask_of(Tensor::zeros(&[1, 3, 3, 4]), Tensor::full(&[1], 10.0), feats.clone());
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!(m.data().iter().all(|&v| (v - expected).abs() < 1e-15));
        assert!((expected - 0.99995).abs() < 1e-5);
        for k in [1, 3, 5] {
            let m = mask_of(
                Tensor::randn(&[2, k, k, 4], 1.0, &mut rng),
                Tensor::zeros(&[2]),
                feats.clone(),
            );
            assert_eq!(m.shape(), &[2, 30]);
        }
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 2, 2, 4]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let x = tape.constant(feats);
        assert!(matches!(predict_mask(&mut tape, f, b, x), Err(Error::Config(_))));
    }

    #[test]
    fn gaussian_refine_values() {
        let (h, w) = (9, 9);
        let mask = vec![0.8; h * w];
        let prior = GaussianPrior {
            center: (4.0, 4.0),
            sigma: 2.0,
        };
        let r = gaussian_refine(&mask, h, w, prior).unwrap();
        assert_eq!(r[4 * w + 4], 0.8);
        // (6, 6) lies sigma*sqrt(2) from the center.
        assert!((r[6 * w + 6] / 0.8 - (-1.0f64).exp()).abs() < 1e-12);
        assert!(r.iter().zip(&mask).all(|(a, b)| a <= b));
        let wide = gaussian_refine(
            &mask,
            h,
            w,
            GaussianPrior {
                center: (4.0, 4.0),
                sigma: 1e9,
            },
        )
        .unwrap();
        assert!(wide.iter().zip(&mask).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(gaussian_refine(
            &mask,
            h,
            w,
            GaussianPrior {
                center: (4.0, 4.0),
                sigma: 0.0
            }
        )
        .is_err());
        assert!(gaussian_refine(
            &mask,
            h,
            w,
            GaussianPrior {
                center: (9.5, 4.0),
                sigma: 1.0
            }
        )
        .is_err());
    }

    #[test]
    fn tape_refine_matches_value_refine() {
        let (h, w) = (5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let masks: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![2, h * w], masks.clone()).unwrap());
        let c = tape.constant(Tensor::from_rows(&[&[1.0, 2.5], &[3.0, 0.0]]).unwrap());
        let s = tape.constant(Tensor::new(vec![2, 1], vec![1.5, 4.0]).unwrap());
        let r = gaussian_refine_var(&mut tape, m, c, s, h, w).unwrap();
        let want0 = gaussian_refine(
            &masks[..h * w],
            h,
            w,
            GaussianPrior {
                center: (1.0, 2.5),
                sigma: 1.5,
            },
        )
        .unwrap();
        let want1 = gaussian_refine(
            &masks[h * w..],
            h,
            w,
            GaussianPrior {
                center: (3.0, 0.0),
                sigma: 4.0,
            },
        )
        .unwrap();
        let got = tape.value(r).data();
        for (g, e) in got.iter().zip(want0.iter().chain(&want1)) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    fn center_sigma(mask: Vec<f64>, h: usize, w: usize, sigma_b: f64) -> (Vec<f64>, f64) {
        let mut tape = Tape::new();
        let p = bound_with(
            &mut tape,
            &[
                ("heads.sigma.w", Tensor::zeros(&[2, 1])),
                ("heads.sigma.b", Tensor::full(&[1, 1], sigma_b)),
            ],
        );
        let q = tape.constant(Tensor::row(&[0.3, -0.2]));
        let m = tape.constant(Tensor::new(vec![1, h * w], mask).unwrap());
        let (c, s) = predict_center_sigma(&mut tape, &p, q, m, h, w).unwrap();
        (tape.value(c).data().to_vec(), tape.value(s).item())
    }

    #[test]
    fn centers_and_sigma_floor() {
        let (h, w) = (10, 12);
        let mut hot = vec![1e-9; h * w];
        hot[5 * w + 7] = 1.0;
        let (c, _) = center_sigma(hot.clone(), h, w, 0.0);
        assert!((c[0] - 5.0).abs() < 1e-6 && (c[1] - 7.0).abs() < 1e-6, "{c:?}");
        let (c, _) = center_sigma(vec![0.3; h * w], h, w, 0.0);
        assert!((c[0] - 4.5).abs() < 1e-12 && (c[1] - 5.5).abs() < 1e-12);
        let (c, _) = center_sigma(vec![0.0; h * w], h, w, 0.0);
        assert!((c[0] - 4.5).abs() < 1e-12 && (c[1] - 5.5).abs() < 1e-12);
        assert_eq!(soft_argmax(&vec![0.0; h * w], h, w), (4.5, 5.5));
        for b in [-50.0, -1.0, 0.0, 3.0] {
            let (_, s) = center_sigma(hot.clone(), h, w, b);
            assert!(s >= SIGMA_FLOOR);
        }
    }

    #[test]
    fn center_sigma_refine_gradient() {
        let (h, w) = (4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let masks = Tensor::new(
            vec![2, h * w],
            (0..2 * h * w).map(|_| rng.random_range(0.05..0.95)).collect(),
        )
        .unwrap();
        let q = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let sw = Tensor::randn(&[3, 1], 1.0, &mut rng);
        let sb = Tensor::full(&[1, 1], 1.5);
        let probe = Tensor::randn(&[2, h * w], 1.0, &mut rng);
        let err = grad_check_many(
            |t, v| {
                let mut p = Bound::default();
                p.insert("heads.sigma.w", v[2]);
                p.insert("heads.sigma.b", v[3]);
                let (c, s) = predict_center_sigma(t, &p, v[1], v[0], h, w)?;
                let r = gaussian_refine_var(t, v[0], c, s, h, w)?;
                let pv = t.constant(probe.clone());
                let prod = t.mul(r, pv)?;
                Ok(t.sum(prod))
            },
            &[masks, q, sw, sb],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn classify_zero_weights() {
        let d = 4;
        let mut tape = Tape::new();
        let mut entries = Vec::new();
        for (name, n) in [("damage", 26), ("fake", 7), ("part", 61), ("domain", 4)] {
            entries.push((format!("heads.cls_{name}.w"), Tensor::zeros(&[d, n])));
            entries.push((format!("heads.cls_{name}.b"), Tensor::zeros(&[1, n])));
        }
        let refs: Vec<(&str, Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        let p = bound_with(&mut tape, &refs);
        let q = tape.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0]));
        let logits = classify(&mut tape, &p, q).unwrap();
        let pred = Prediction {
            query: 0,
            mask: vec![],
            damage_logits: tape.value(logits.damage).data().to_vec(),
            fake_logits: tape.value(logits.fake).data().to_vec(),
            part_logits: tape.value(logits.part).data().to_vec(),
            domain_logits: vec![1.0, 0.0, 0.0, 0.0],
            prior: GaussianPrior {
                center: (0.0, 0.0),
                sigma: 1.0,
            },
        };
        assert!(pred.damage_probs().iter().all(|&p| (p - 1.0 / 26.0).abs() < 1e-15));
        assert!(pred.fake_probs().iter().all(|&p| p == 0.5));
        assert!((pred.confidence() - 1.0 / 26.0).abs() < 1e-15);
    }

    fn pred(domain: usize, damage: Vec<f64>, part: Vec<f64>) -> Prediction {
        let mut domain_logits = vec![0.0; 4];
        domain_logits[domain] = 5.0;
        Prediction {
            query: 0,
            mask: vec![],
            damage_logits: damage,
            fake_logits: vec![0.0; 7],
            part_logits: part,
            domain_logits,
            prior: GaussianPrior {
                center: (0.0, 0.0),
                sigma: 1.0,
            },
        }
    }

    #[test]
    fn confidence_by_domain() {
        let mut part = vec![-800.0; 61];
        part[4] = 800.0;
        let p = pred(2, vec![0.0; 26], part);
        assert_eq!(p.confidence(), 1.0);
        assert_eq!(p.domain(), Some(Domain::Part));
        assert_eq!(p.class_id(), Some(4));
        let none = pred(NONE_SLOT, vec![0.0; 26], vec![0.0; 61]);
        assert_eq!(none.confidence(), 0.0);
        assert_eq!(none.class_id(), None);
    }

    #[test]
    fn token_refine_examples() {
        let region = vec![true; 8];
        assert_eq!(token_refine(1.25, &[0.3; 8], &region, 0.0), 1.25);
        assert_eq!(token_refine(1.25, &[1.0; 8], &region, 0.7), 1.25 + 0.7);
        let mut m = vec![0.0; 8];
        m[..4].fill(0.5);
        assert!((token_refine(-1.0, &m, &region, 2.0) - (-0.5)).abs() < 1e-12);
        assert_eq!(token_refine(3.0, &m, &[false; 8], 2.0), 3.0);
    }

    #[test]
    fn token_refine_var_matches_value_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let region: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
        let mask = Tensor::new(vec![1, 12], (0..12).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let logits = Tensor::randn(&[1, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let m = tape.constant(mask.clone());
        let out = token_refine_var(&mut tape, l, 2, m, &region, 1.5).unwrap();
        let out = tape.value(out).data().to_vec();
        for j in 0..5 {
            let want = if j == 2 {
                token_refine(logits.data()[2], mask.data(), &region, 1.5)
            } else {
                logits.data()[j]
            };
            assert!((out[j] - want).abs() < 1e-12);
        }
        let err = grad_check_many(
            |t, v| {
                let r = token_refine_var(t, v[0], 2, v[1], &region, 1.5)?;
                let p = t.softmax(r, 1)?;
                let lp = t.log(p);
                Ok(t.sum(lp))
            },
            &[logits, mask],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn refine_never_increases(
            mask in proptest::collection::vec(0.0f64..1.0, 30),
            cy in 0.0f64..4.0, cx in 0.0f64..5.0, sigma in 0.1f64..50.0,
        ) {
            let r = gaussian_refine(&mask, 5, 6, GaussianPrior { center: (cy, cx), sigma }).unwrap();
            prop_assert!(r.iter().zip(&mask).all(|(a, b)| a <= b));
        }

        #[test]
        fn probability_contracts(logits in proptest::collection::vec(-30.0f64..30.0, 26), boost in 0.0f64..5.0) {
            let p = softmax_slice(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let z = logits.iter().map(|v| v.exp()).sum::<f64>();
            prop_assert!((p[3] - logits[3].exp() / z).abs() < 1e-12);
            // Boosting one logit keeps the relative order of the others and never lowers its probability.
            let mut boosted = logits.clone();
            boosted[0] += boost;
            let q = softmax_slice(&boosted);
            prop_assert!(q[0] >= p[0] - 1e-15);
            for i in 1..26 {
                for j in 1..26 {
                    prop_assert_eq!(logits[i] < logits[j], boosted[i] < boosted[j]);
                }
            }
            let pr = pred(0, boosted, vec![0.0; 61]);
            prop_assert!(pr.confidence() >= max(&p) - 1e-12 || argmax(&logits) != 0);
        }
    }
}
