//! Teacher-to-student distillation, focus-region gating and retention benchmarking.
//!
//! Student objective per sample:
//! `hard * L_sup(gt) + soft * KL_heads(teacher || student) + feature * L_feat`, where
//! `L_sup` is the supervised training objective against ground truth, the KL runs
//! over student queries matched to the teacher's post-NMS predictions, and
//! `L_feat` is the mean per-token squared distance between paired encoder layers.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{HeadLogits, HeadsConfig, Prediction};
use crate::labels::Domain;
use crate::losses::{ClsTarget, PROB_CLAMP};
use crate::metrics::{evaluate, nms, GtInstance, NmsConfig, Tally};
use crate::model::{decode, refine_damage_logits, Model, ModelConfig};
use crate::params::Bound;
use crate::synthdata::{Dataset, Sample};
use crate::tensor::Tensor;
use crate::training::{
    adamw_step, batch_gradients, check_dataset, clip_global_norm, epoch_order, hungarian, layer_lr, matching_cost,
    prepare, schedule, supervised_loss, AdamState, GtTarget, LossParts, PreparedSample, TrainConfig,
};

const PROJ_PREFIX: &str = "distill.proj";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the hard ground-truth objective.
    pub hard: f64,
    /// Weight of the per-head KL to the teacher.
    pub soft: f64,
    /// Weight of the feature-matching term.
    pub feature: f64,
    /// `(teacher_layer, student_layer)` pairs, 1-based; empty means `round(s * L_T / L_S)` for every student layer.
    pub pairing: Vec<(usize, usize)>,
    /// Focus threshold on the prior map; pixels strictly above it are processed.
    pub focus_threshold: f64,
    pub student: StudentConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            hard: 1.0,
            soft: 1.0,
            feature: 1.0,
            pairing: Vec::new(),
            focus_threshold: 0.5,
            student: StudentConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if [self.hard, self.soft, self.feature]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config("distillation weights must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.focus_threshold) {
            return Err(Error::Config(format!(
                "focus_threshold {} outside [0, 1]",
                self.focus_threshold
            )));
        }
        Ok(())
    }

    /// Teacher/student layer pairs after defaulting, validated against both depths.
    pub fn layer_pairs(&self, teacher_layers: usize, student_layers: usize) -> Result<Vec<(usize, usize)>> {
        let pairs = if self.pairing.is_empty() {
            default_pairing(teacher_layers, student_layers)
        } else {
            self.pairing.clone()
        };
        for &(t, s) in &pairs {
            if t == 0 || t > teacher_layers || s == 0 || s > student_layers {
                return Err(Error::Config(format!(
                    "layer pair ({t}, {s}) outside teacher 1..={teacher_layers} / student 1..={student_layers}"
                )));
            }
        }
        Ok(pairs)
    }
}

/// Student layer `s` paired with teacher layer `round(s * L_T / L_S)`, clamped to at least 1.
pub fn default_pairing(teacher_layers: usize, student_layers: usize) -> Vec<(usize, usize)> {
    (1..=student_layers)
        .map(|s| {
            let t = (s as f64 * teacher_layers as f64 / student_layers as f64).round() as usize;
            (t.clamp(1, teacher_layers.max(1)), s)
        })
        .collect()
}

/// Student shape overrides; unset fields default to half the teacher's depth and width.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
}

impl StudentConfig {
    pub fn resolve(&self, teacher: &ModelConfig) -> Result<ModelConfig> {
        let t = &teacher.encoder;
        let config = ModelConfig {
            encoder: EncoderConfig {
                layers: self.layers.unwrap_or((t.layers / 2).max(1)),
                hidden_dim: self.hidden_dim.unwrap_or((t.hidden_dim / 2).max(1)),
                heads: self.heads.unwrap_or(t.heads),
                mlp_ratio: self.mlp_ratio.unwrap_or(t.mlp_ratio),
                ..t.clone()
            },
            heads: HeadsConfig {
                ..teacher.heads.clone()
            },
        };
        config.validate()?;
        Ok(config)
    }
}

/// Fresh student sharing the teacher's label space, input size and query count.
pub fn init_student(teacher: &Model, cfg: &StudentConfig, seed: u64) -> Result<Model> {
    Model::new(cfg.resolve(&teacher.config)?, teacher.label_space.clone(), seed)
}

/// `sum_rows KL(softmax(t / tau) || softmax(s / tau))` for `k x n` logits.
pub fn softmax_kl(tape: &mut Tape, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
    if tape.shape(student) != teacher.shape() {
        return Err(Error::shape("softmax_kl", tape.shape(student), teacher.shape()));
    }
    let axis = teacher.shape().len() - 1;
    let log_probs = |tape: &mut Tape, z: Var| -> Result<(Var, Var)> {
        let scaled = tape.scale(z, 1.0 / temperature);
        let p = tape.softmax(scaled, axis)?;
        let clamped = tape.clamp(p, PROB_CLAMP, 1.0);
        Ok((p, tape.log(clamped)))
    };
    let t = tape.constant(teacher.clone());
    let (p_t, log_t) = log_probs(tape, t)?;
    let (_, log_s) = log_probs(tape, student)?;
    let diff = tape.sub(log_t, log_s)?;
    let terms = tape.mul(p_t, diff)?;
    Ok(tape.sum(terms))
}

/// Per-logit Bernoulli KL `sum KL(sigmoid(t / tau) || sigmoid(s / tau))`.
pub fn bernoulli_kl(tape: &mut Tape, student: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
    if tape.shape(student) != teacher.shape() {
        return Err(Error::shape("bernoulli_kl", tape.shape(student), teacher.shape()));
    }
    let parts = |tape: &mut Tape, z: Var| -> (Var, Var, Var, Var) {
        let scaled = tape.scale(z, 1.0 / temperature);
        let p = tape.sigmoid(scaled);
        let np = tape.neg(p);
        let q = tape.add_scalar(np, 1.0);
        let pc = tape.clamp(p, PROB_CLAMP, 1.0);
        let qc = tape.clamp(q, PROB_CLAMP, 1.0);
        (p, q, tape.log(pc), tape.log(qc))
    };
    let t = tape.constant(teacher.clone());
    let (p_t, q_t, lp_t, lq_t) = parts(tape, t);
    let (_, _, lp_s, lq_s) = parts(tape, student);
    let dp = tape.sub(lp_t, lp_s)?;
    let dq = tape.sub(lq_t, lq_s)?;
    let a = tape.mul(p_t, dp)?;
    let b = tape.mul(q_t, dq)?;
    let both = tape.add(a, b)?;
    Ok(tape.sum(both))
}

/// Mean over rows of `||f_T - f_S P||^2`; `projection` is `None` when widths already agree.
pub fn feature_loss(tape: &mut Tape, student: Var, teacher: &Tensor, projection: Option<Var>) -> Result<Var> {
    let projected = match projection {
        Some(p) => tape.matmul(student, p)?,
        None => student,
    };
    if tape.shape(projected) != teacher.shape() {
        return Err(Error::shape("feature_loss", tape.shape(projected), teacher.shape()));
    }
    let rows = teacher.shape()[0].max(1);
    let t = tape.constant(teacher.clone());
    let diff = tape.sub(t, projected)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// Teacher logits of the matched queries, one row per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLogits {
    pub damage: Tensor,
    pub fake: Tensor,
    pub part: Tensor,
    pub domain: Tensor,
}

impl TeacherLogits {
    pub fn from_predictions(preds: &[&Prediction]) -> Result<Self> {
        let stack = |f: fn(&Prediction) -> &Vec<f64>| -> Result<Tensor> {
            let n = preds.first().map_or(0, |p| f(p).len());
            Tensor::new(
                vec![preds.len(), n],
                preds.iter().flat_map(|p| f(p).iter().copied()).collect(),
            )
        };
        Ok(Self {
            damage: stack(|p| &p.damage_logits)?,
            fake: stack(|p| &p.fake_logits)?,
            part: stack(|p| &p.part_logits)?,
            domain: stack(|p| &p.domain_logits)?,
        })
    }
}

/// Paired encoder features: student var, teacher value, optional projection var.
pub struct FeaturePair {
    pub student: Var,
    pub teacher: Tensor,
    pub projection: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdParts {
    pub total: f64,
    pub hard: f64,
    pub soft: f64,
    pub feature: f64,
}

impl KdParts {
    fn add_scaled(&mut self, o: &KdParts, s: f64) {
        self.total += s * o.total;
        self.hard += s * o.hard;
        self.soft += s * o.soft;
        self.feature += s * o.feature;
    }
}

/// Weighted distillation objective.
///
/// `hard` is the already-computed ground-truth loss. The KL is summed over heads
/// (softmax for damage, part and domain; Bernoulli for fake) and averaged over pairs;
/// feature terms are summed over layer pairs.
pub fn kd_loss(
    tape: &mut Tape,
    hard: Var,
    student: &HeadLogits,
    teacher: &TeacherLogits,
    features: &[FeaturePair],
    cfg: &DistillConfig,
) -> Result<(Var, KdParts)> {
    cfg.validate()?;
    let tau = cfg.temperature;
    let pairs = teacher.domain.shape()[0];
    let mut soft = tape.constant(Tensor::scalar(0.0));
    if pairs > 0 {
        for term in [
            softmax_kl(tape, student.damage, &teacher.damage, tau)?,
            softmax_kl(tape, student.part, &teacher.part, tau)?,
            softmax_kl(tape, student.domain, &teacher.domain, tau)?,
            bernoulli_kl(tape, student.fake, &teacher.fake, tau)?,
        ] {
            soft = tape.add(soft, term)?;
        }
        soft = tape.scale(soft, 1.0 / pairs as f64);
    }
    let mut feature = tape.constant(Tensor::scalar(0.0));
    for f in features {
        let term = feature_loss(tape, f.student, &f.teacher, f.projection)?;
        feature = tape.add(feature, term)?;
    }
    let h = tape.scale(hard, cfg.hard);
    let s = tape.scale(soft, cfg.soft);
    let f = tape.scale(feature, cfg.feature);
    let hs = tape.add(h, s)?;
    let total = tape.add(hs, f)?;
    let parts = KdParts {
        total: tape.value(total).item(),
        hard: tape.value(hard).item(),
        soft: tape.value(soft).item(),
        feature: tape.value(feature).item(),
    };
    Ok((total, parts))
}

/// Pixels of an `h x w` prior strictly above `threshold`, in raster order.
pub fn focus_mask(prior: &[f64], h: usize, w: usize, threshold: f64) -> Result<Vec<(usize, usize)>> {
    if prior.len() != h * w {
        return Err(Error::shape("focus_mask", &[prior.len()], &[h, w]));
    }
    Ok(prior
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(i, _)| (i / w, i % w))
        .collect())
}

/// Pixelwise maximum of soft masks; all zeros when there are none.
pub fn prior_map(predictions: &[Prediction], len: usize) -> Vec<f64> {
    let mut prior = vec![0.0; len];
    for p in predictions {
        for (v, &m) in prior.iter_mut().zip(&p.mask) {
            *v = f64::max(*v, m);
        }
    }
    prior
}

pub fn retention_rate(student_miou: f64, teacher_miou: f64) -> Result<f64> {
    if !(teacher_miou > 0.0) {
        return Err(Error::Domain(format!(
            "retention rate undefined for teacher mIoU {teacher_miou}"
        )));
    }
    Ok(student_miou / teacher_miou)
}

/// What the frozen teacher says about one sample.
struct TeacherView {
    kept: Vec<Prediction>,
    features: Vec<Tensor>,
}

fn teacher_view(teacher: &Model, image: &[f64], nms_cfg: &NmsConfig) -> Result<TeacherView> {
    let mut tape = Tape::new();
    let bound = teacher.params.bind(&mut tape, false);
    let fwd = teacher.forward(&mut tape, &bound, image, None)?;
    let mut preds = decode(&tape, &fwd)?;
    refine_damage_logits(&mut preds, teacher.config.heads.alpha);
    Ok(TeacherView {
        kept: nms(&preds, nms_cfg),
        features: fwd
            .encoder
            .layer_states
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
    })
}

/// Matching targets built from teacher predictions; only domain, class and mask are used.
fn teacher_targets(kept: &[Prediction], labels_fake: usize) -> Result<Vec<GtTarget>> {
    kept.iter()
        .filter_map(|p| p.domain().zip(p.class_id()).map(|(d, c)| (p, d, c)))
        .map(|(p, domain, class_id)| {
            let mask: Vec<f64> = p.binary_mask().iter().map(|&b| f64::from(b)).collect();
            Ok(GtTarget {
                domain,
                class_id,
                mask: Tensor::row(&mask),
                cls: ClsTarget {
                    damage: (domain == Domain::Damage).then_some(class_id),
                    part: (domain == Domain::Part).then_some(class_id),
                    fake: Tensor::zeros(&[1, labels_fake]),
                },
                refine_region: None,
            })
        })
        .collect()
}

/// One distillation epoch's summary, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub hard: f64,
    pub soft: f64,
    pub feature: f64,
    pub grad_norm: f64,
}

fn projection_name(student_layer: usize) -> String {
    format!("{PROJ_PREFIX}{student_layer}.w")
}

/// Trains `student` against the frozen `teacher` for `train.epochs` epochs.
///
/// Projection weights live in the student's store only while training. With all
/// three weights zero the objective is constant and no update is applied.
pub fn distill(
    teacher: &Model,
    student: &mut Model,
    data: &Dataset,
    cfg: &DistillConfig,
    train: &TrainConfig,
    nms_cfg: &NmsConfig,
    on_epoch: &mut dyn FnMut(&DistillLog) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    train.validate()?;
    nms_cfg.validate()?;
    check_dataset(teacher, data)?;
    check_dataset(student, data)?;
    if teacher.config.heads.num_queries != student.config.heads.num_queries {
        return Err(Error::Config(
            "teacher and student must have the same number of queries".into(),
        ));
    }
    let (lt, ls) = (teacher.config.encoder.layers, student.config.encoder.layers);
    let (dt, ds) = (teacher.config.encoder.hidden_dim, student.config.encoder.hidden_dim);
    let pairs = cfg.layer_pairs(lt, ls)?;

    let prepared = data
        .samples
        .iter()
        .map(|s| prepare(s, &student.label_space))
        .collect::<Result<Vec<_>>>()?;
    let nf = student.label_space.size(Domain::Fake);
    let mut views = Vec::with_capacity(prepared.len());
    let mut soft_targets = Vec::with_capacity(prepared.len());
    for s in &prepared {
        let view = teacher_view(teacher, &s.image, nms_cfg)?;
        soft_targets.push(teacher_targets(&view.kept, nf)?);
        views.push(view);
    }

    if dt != ds {
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        for &(_, s) in &pairs {
            let name = projection_name(s);
            if student.params.get(&name).is_err() {
                let std = 1.0 / (ds as f64).sqrt();
                student.params.insert(name, Tensor::randn(&[ds, dt], std, &mut rng));
            }
        }
    }
    let result = distill_loop(student, &prepared, &views, &soft_targets, &pairs, cfg, train, on_epoch);
    let names: Vec<String> = student
        .params
        .names()
        .filter(|n| n.starts_with(PROJ_PREFIX))
        .cloned()
        .collect();
    for n in names {
        student.params.remove(&n);
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn distill_loop(
    student: &mut Model,
    prepared: &[PreparedSample],
    views: &[TeacherView],
    soft_targets: &[Vec<GtTarget>],
    pairs: &[(usize, usize)],
    cfg: &DistillConfig,
    train: &TrainConfig,
    on_epoch: &mut dyn FnMut(&DistillLog) -> Result<()>,
) -> Result<()> {
    let active = cfg.hard > 0.0 || cfg.soft > 0.0 || cfg.feature > 0.0;
    let per_epoch = train.steps_per_epoch(prepared.len());
    let total = train.epochs * per_epoch;
    let warmup = (total as f64 * train.warmup_fraction).round() as usize;
    let adam = train.adamw();
    let alpha = student.config.heads.alpha;
    let mut state = AdamState::default();
    for epoch in 0..train.epochs {
        let order = epoch_order(train.seed, epoch, prepared.len());
        let mut epoch_parts = KdParts::default();
        let (mut norm, mut lr) = (0.0, 0.0);
        for batch in order.chunks(train.batch_size) {
            let mut kd_parts = BTreeMap::new();
            let (mut grads, _) = batch_gradients(student, batch, |tape, bound, i| {
                let (loss, p) = sample_objective(
                    student,
                    tape,
                    bound,
                    &prepared[i],
                    &views[i],
                    &soft_targets[i],
                    pairs,
                    cfg,
                    train,
                    alpha,
                )?;
                kd_parts.insert(i, p);
                Ok((
                    loss,
                    LossParts {
                        total: p.total,
                        ..LossParts::default()
                    },
                ))
            })?;
            let mut batch_parts = KdParts::default();
            for p in kd_parts.values() {
                batch_parts.add_scaled(p, 1.0 / batch.len() as f64);
            }
            if !batch_parts.total.is_finite() {
                return Err(Error::NonFinite {
                    op: "distillation loss".into(),
                });
            }
            norm = clip_global_norm(&mut grads, train.grad_clip);
            lr = train.lr * schedule(state.step as usize, total, warmup);
            if active {
                let total_layers = student.config.total_layers();
                let config = student.config.clone();
                adamw_step(&mut student.params, &grads, &mut state, &adam, |name| {
                    layer_lr(lr, train.layer_decay, config.layer_index(name), total_layers)
                })?;
            }
            epoch_parts.add_scaled(&batch_parts, batch.len() as f64 / prepared.len() as f64);
        }
        let log = DistillLog {
            epoch: epoch + 1,
            step: state.step,
            lr,
            loss: epoch_parts.total,
            hard: epoch_parts.hard,
            soft: epoch_parts.soft,
            feature: epoch_parts.feature,
            grad_norm: norm,
        };
        log::info!(
            "distill epoch {} loss {:.5} (hard {:.4} soft {:.4} feature {:.4})",
            log.epoch,
            log.loss,
            log.hard,
            log.soft,
            log.feature
        );
        on_epoch(&log)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample_objective(
    student: &Model,
    tape: &mut Tape,
    bound: &Bound,
    sample: &PreparedSample,
    view: &TeacherView,
    soft_targets: &[GtTarget],
    pairs: &[(usize, usize)],
    cfg: &DistillConfig,
    train: &TrainConfig,
    alpha: f64,
) -> Result<(Var, KdParts)> {
    let fwd = student.forward(tape, bound, &sample.image, None)?;
    let (hard, _, _) = supervised_loss(tape, &fwd, &sample.targets, &train.loss, &train.matching, alpha)?;

    let cost = matching_cost(tape, &fwd, soft_targets, &train.matching)?;
    let assignment = if soft_targets.is_empty() {
        Vec::new()
    } else {
        hungarian(&cost)?
    };
    let kept: Vec<&Prediction> = view.kept.iter().filter(|p| p.domain().is_some()).collect();
    let teacher = TeacherLogits::from_predictions(&kept)?;
    let rows = |tape: &mut Tape, v: Var| tape.gather_rows(v, &assignment);
    let matched = HeadLogits {
        damage: rows(tape, fwd.logits.damage)?,
        fake: rows(tape, fwd.logits.fake)?,
        part: rows(tape, fwd.logits.part)?,
        domain: rows(tape, fwd.logits.domain)?,
    };

    let mut features = Vec::with_capacity(pairs.len());
    for &(t, s) in pairs {
        let projection = bound.get(&projection_name(s)).ok();
        features.push(FeaturePair {
            student: fwd.encoder.layer_states[s - 1],
            teacher: view.features[t - 1].clone(),
            projection,
        });
    }
    kd_loss(tape, hard, &matched, &teacher, &features, cfg)
}

/// Retention benchmark written by the distill command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub teacher_miou: f64,
    pub student_miou: f64,
    pub retention: f64,
    /// Gated over ungated student compute proxy, focus taken from teacher masks.
    pub compute_proxy_ratio: f64,
    /// Student mIoU when run gated on that focus.
    pub gated_student_miou: f64,
}

/// Scores teacher and student on `samples`, then measures gated student compute.
pub fn retention_report(
    teacher: &Model,
    student: &Model,
    samples: &[Sample],
    nms_cfg: &NmsConfig,
    focus_threshold: f64,
) -> Result<RetentionReport> {
    let teacher_miou = evaluate(teacher, samples, nms_cfg)?.miou;
    let student_miou = evaluate(student, samples, nms_cfg)?.miou;
    let retention = retention_rate(student_miou, teacher_miou)?;
    let e = &student.config.encoder;
    let full = (e.num_patches() + 1) * e.layers;
    let (mut gated, mut ungated) = (0usize, 0usize);
    let mut tally = Tally::default();
    for s in samples {
        let image = s.image_f64();
        let kept = nms(&teacher.predict(&image)?, nms_cfg);
        let prior = prior_map(&kept, s.height * s.width);
        let focus = focus_mask(&prior, s.height, s.width, focus_threshold)?;
        let out = student.predict_gated(&image, &focus)?;
        gated += out.compute_proxy;
        ungated += full;
        let gt: Vec<GtInstance> = s
            .instances
            .iter()
            .map(|i| GtInstance {
                domain: i.label.domain,
                class_id: i.label.class_id,
                mask: &i.mask,
            })
            .collect();
        tally.add(&nms(&out.predictions, nms_cfg), &gt);
    }
    Ok(RetentionReport {
        teacher_miou,
        student_miou,
        retention,
        compute_proxy_ratio: gated as f64 / ungated as f64,
        gated_student_miou: tally.report(&student.label_space)?.miou,
    })
}
