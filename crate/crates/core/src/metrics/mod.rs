//! Post-processing and evaluation.
//!
//! Predictions are filtered by confidence and de-duplicated by class-agnostic
//! greedy mask NMS. Evaluation then matches kept predictions to ground truth
//! greedily in score order at mask IoU >= 0.5, per instance:
//! - a matched pair counts as a true positive of the gt class when domain and
//!   class agree, otherwise as a false negative of the gt class and a false
//!   positive of the predicted class;
//! - unmatched gt are false negatives, unmatched predictions false positives.
//!
//! Precision and recall are macro-averaged over the classes present in the
//! ground truth; F1 is the harmonic mean of those two averages.

pub mod render;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Prediction;
use crate::labels::{Domain, LabelSpace};
use crate::model::Model;
use crate::synthdata::Sample;

/// Minimum mask IoU for a prediction to count as detecting a gt instance.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    /// Minimum confidence kept.
    pub score_threshold: f64,
    /// Suppress when mask IoU with a kept prediction reaches this.
    pub iou_threshold: f64,
    pub top_k: Option<usize>,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            iou_threshold: 0.5,
            top_k: None,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config("NMS thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `|a and b| / |a or b|`; 0 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn binarize(mask: &[f64]) -> Vec<bool> {
    mask.iter().map(|&m| m >= 0.5).collect()
}

/// Indices in descending score order, ties by lower index.
pub fn priority_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy NMS; returns kept indices in priority order.
pub fn nms_indices(scores: &[f64], masks: &[Vec<bool>], cfg: &NmsConfig) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in priority_order(scores) {
        if scores[i] < cfg.score_threshold {
            continue;
        }
        if kept.iter().all(|&k| mask_iou(&masks[i], &masks[k]) < cfg.iou_threshold) {
            kept.push(i);
        }
    }
    if let Some(k) = cfg.top_k {
        kept.truncate(k);
    }
    kept
}

pub fn nms(predictions: &[Prediction], cfg: &NmsConfig) -> Vec<Prediction> {
    let scores: Vec<f64> = predictions.iter().map(Prediction::confidence).collect();
    let masks: Vec<Vec<bool>> = predictions.iter().map(Prediction::binary_mask).collect();
    nms_indices(&scores, &masks, cfg)
        .into_iter()
        .map(|i| predictions[i].clone())
        .collect()
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Ground-truth instances of the class.
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub num_gt: usize,
    pub correct: usize,
    /// Keyed by class name; only classes with any count appear.
    pub counts: BTreeMap<String, ClassCounts>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub num_predictions: usize,
    pub num_matched: usize,
    pub miou: f64,
    /// Correct labels over all damage and part gt instances.
    pub damage_part_accuracy: f64,
    pub damage: TaskMetrics,
    pub fake: TaskMetrics,
    pub part: TaskMetrics,
}

/// Accumulates per-instance outcomes across samples.
#[derive(Clone, Debug, Default)]
pub struct Tally {
    counts: BTreeMap<(Domain, usize), ClassCounts>,
    ious: Vec<f64>,
    correct: BTreeMap<Domain, usize>,
    gt: BTreeMap<Domain, usize>,
    samples: usize,
    predictions: usize,
}

/// Gt instance as seen by the evaluator.
#[derive(Clone, Debug)]
pub struct GtInstance<'a> {
    pub domain: Domain,
    pub class_id: usize,
    pub mask: &'a [bool],
}

impl Tally {
    /// Scores one image. `kept` must be in descending confidence order (as [`nms`] returns it).
    pub fn add(&mut self, kept: &[Prediction], gt: &[GtInstance]) {
        self.samples += 1;
        self.predictions += kept.len();
        let mut gt_used = vec![false; gt.len()];
        for pred in kept {
            let mask = pred.binary_mask();
            let mut best: Option<(usize, f64)> = None;
            for (g, inst) in gt.iter().enumerate() {
                if gt_used[g] {
                    continue;
                }
                let iou = mask_iou(&mask, inst.mask);
                if iou >= MATCH_IOU && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            let predicted = pred.domain().zip(pred.class_id());
            match best {
                Some((g, iou)) => {
                    gt_used[g] = true;
                    self.ious.push(iou);
                    let truth = (gt[g].domain, gt[g].class_id);
                    if predicted == Some(truth) {
                        self.counts.entry(truth).or_default().tp += 1;
                        *self.correct.entry(truth.0).or_default() += 1;
                    } else {
                        self.counts.entry(truth).or_default().fn_ += 1;
                        if let Some(p) = predicted {
                            self.counts.entry(p).or_default().fp += 1;
                        }
                    }
                }
                None => {
                    if let Some(p) = predicted {
                        self.counts.entry(p).or_default().fp += 1;
                    }
                }
            }
        }
        for (g, inst) in gt.iter().enumerate() {
            let key = (inst.domain, inst.class_id);
            self.counts.entry(key).or_default().support += 1;
            *self.gt.entry(inst.domain).or_default() += 1;
            if !gt_used[g] {
                self.counts.entry(key).or_default().fn_ += 1;
            }
        }
    }

    pub fn report(&self, labels: &LabelSpace) -> Result<EvalReport> {
        if self.samples == 0 {
            return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
        }
        let task = |domain: Domain| -> Result<TaskMetrics> {
            let mut m = TaskMetrics {
                num_gt: self.gt.get(&domain).copied().unwrap_or(0),
                correct: self.correct.get(&domain).copied().unwrap_or(0),
                ..TaskMetrics::default()
            };
            let (mut ps, mut rs, mut n) = (0.0, 0.0, 0usize);
            for (&(d, c), counts) in self.counts.range((domain, 0)..=(domain, usize::MAX)) {
                debug_assert_eq!(d, domain);
                m.counts.insert(labels.name(domain, c)?.to_string(), *counts);
                if counts.support > 0 {
                    let p_den = counts.tp + counts.fp;
                    ps += if p_den == 0 {
                        0.0
                    } else {
                        counts.tp as f64 / p_den as f64
                    };
                    rs += counts.tp as f64 / (counts.tp + counts.fn_) as f64;
                    n += 1;
                }
            }
            if n > 0 {
                m.precision = ps / n as f64;
                m.recall = rs / n as f64;
                m.f1 = f1(m.precision, m.recall);
            }
            if m.num_gt > 0 {
                m.accuracy = m.correct as f64 / m.num_gt as f64;
            }
            Ok(m)
        };
        let damage = task(Domain::Damage)?;
        let part = task(Domain::Part)?;
        let dp_gt = damage.num_gt + part.num_gt;
        let mut ious = self.ious.clone();
        ious.sort_by(f64::total_cmp);
        Ok(EvalReport {
            num_samples: self.samples,
            num_predictions: self.predictions,
            num_matched: ious.len(),
            miou: if ious.is_empty() {
                0.0
            } else {
                ious.iter().sum::<f64>() / ious.len() as f64
            },
            damage_part_accuracy: if dp_gt == 0 {
                0.0
            } else {
                (damage.correct + part.correct) as f64 / dp_gt as f64
            },
            fake: task(Domain::Fake)?,
            damage,
            part,
        })
    }
}

/// Runs the model over every sample and scores NMS-filtered predictions.
pub fn evaluate(model: &Model, samples: &[Sample], cfg: &NmsConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let mut tally = Tally::default();
    for s in samples {
        let preds = model.predict(&s.image_f64())?;
        let kept = nms(&preds, cfg);
        let gt: Vec<GtInstance> = s
            .instances
            .iter()
            .map(|i| GtInstance {
                domain: i.label.domain,
                class_id: i.label.class_id,
                mask: &i.mask,
            })
            .collect();
        tally.add(&kept, &gt);
    }
    tally.report(&model.label_space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::GaussianPrior;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_examples() {
        let a = [true, true, false, false];
        assert_eq!(mask_iou(&a, &a), 1.0);
        assert_eq!(mask_iou(&a, &[false, false, true, true]), 0.0);
        assert_eq!(mask_iou(&a, &[true, false, false, false]), 0.5);
        assert_eq!(mask_iou(&[false; 4], &[false; 4]), 0.0);
    }

    #[test]
    fn nms_examples() {
        let cfg = NmsConfig::default();
        assert!(nms_indices(&[], &[], &cfg).is_empty());
        let m = vec![true, true, false];
        assert_eq!(nms_indices(&[0.8, 0.9], &[m.clone(), m.clone()], &cfg), vec![1]);
        assert_eq!(
            nms_indices(&[0.4, 0.9], &[m.clone(), vec![false, false, true]], &cfg),
            vec![1]
        );
        let capped = NmsConfig {
            top_k: Some(1),
            score_threshold: 0.0,
            ..cfg
        };
        assert_eq!(
            nms_indices(&[0.7, 0.9], &[m.clone(), vec![false, false, true]], &capped),
            vec![1]
        );
    }

    /// The unique self-consistent kept set, found by checking all subsets.
    fn brute_force_nms(scores: &[f64], masks: &[Vec<bool>], cfg: &NmsConfig) -> Vec<usize> {
        let n = scores.len();
        let before = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
        let mut found = Vec::new();
        for subset in 0u32..(1 << n) {
            let inside = |i: usize| subset & (1 << i) != 0;
            let consistent = (0..n).all(|i| {
                let should = scores[i] >= cfg.score_threshold
                    && (0..n)
                        .all(|j| !(inside(j) && before(j, i)) || mask_iou(&masks[i], &masks[j]) < cfg.iou_threshold);
                should == inside(i)
            });
            if consistent {
                found.push(subset);
            }
        }
        assert_eq!(found.len(), 1);
        let mut kept: Vec<usize> = (0..n).filter(|&i| found[0] & (1 << i) != 0).collect();
        kept.sort_by(|&a, &b| {
            if before(a, b) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        kept
    }

    #[test]
    fn nms_matches_brute_force_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.random_range(0..=8);
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10u8)) / 10.0).collect();
            let masks: Vec<Vec<bool>> = (0..n)
                .map(|_| (0..12).map(|_| rng.random_bool(0.5)).collect())
                .collect();
            let cfg = NmsConfig::default();
            let kept = nms_indices(&scores, &masks, &cfg);
            assert_eq!(kept, brute_force_nms(&scores, &masks, &cfg));
            for (a, &i) in kept.iter().enumerate() {
                for &j in &kept[a + 1..] {
                    assert!(mask_iou(&masks[i], &masks[j]) < cfg.iou_threshold);
                }
            }
        }
    }

    fn pred(domain: usize, class: usize, mask: Vec<bool>) -> Prediction {
        let mut domain_logits = vec![0.0; 4];
        domain_logits[domain] = 20.0;
        let mut damage = vec![0.0; 26];
        let mut part = vec![0.0; 61];
        let mut fake = vec![-20.0; 7];
        match domain {
            0 => damage[class] = 30.0,
            1 => fake[class] = 20.0,
            _ => part[class] = 30.0,
        }
        Prediction {
            query: 0,
            mask: mask.iter().map(|&b| f64::from(b)).collect(),
            damage_logits: damage,
            fake_logits: fake,
            part_logits: part,
            domain_logits,
            prior: GaussianPrior {
                center: (0.0, 0.0),
                sigma: 1.0,
            },
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m1 = vec![true, true, false, false, false, false];
        let m2 = vec![false, false, true, true, false, false];
        let m3 = vec![false, false, false, false, true, true];
        let gt = [
            GtInstance {
                domain: Domain::Damage,
                class_id: 3,
                mask: &m1,
            },
            GtInstance {
                domain: Domain::Part,
                class_id: 17,
                mask: &m2,
            },
            GtInstance {
                domain: Domain::Fake,
                class_id: 1,
                mask: &m3,
            },
        ];
        let kept = vec![pred(0, 3, m1.clone()), pred(2, 17, m2.clone()), pred(1, 1, m3.clone())];
        let mut t = Tally::default();
        t.add(&kept, &gt);
        let r = t.report(&LabelSpace::default()).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.damage_part_accuracy, 1.0);
        for task in [&r.damage, &r.part, &r.fake] {
            assert_eq!(
                (task.accuracy, task.precision, task.recall, task.f1),
                (1.0, 1.0, 1.0, 1.0)
            );
        }
    }

    #[test]
    fn mislabel_and_miss_counts() {
        let m1 = vec![true, true, false, false];
        let m2 = vec![false, false, true, true];
        let gt = [
            GtInstance {
                domain: Domain::Damage,
                class_id: 0,
                mask: &m1,
            },
            GtInstance {
                domain: Domain::Damage,
                class_id: 1,
                mask: &m2,
            },
        ];
        // Correct mask, wrong class for the first; the second is missed.
        let mut t = Tally::default();
        t.add(&[pred(0, 2, m1.clone())], &gt);
        let r = t.report(&LabelSpace::default()).unwrap();
        assert_eq!(r.damage.accuracy, 0.0);
        assert_eq!(
            r.damage.counts["scrape"],
            ClassCounts {
                tp: 0,
                fp: 0,
                fn_: 1,
                support: 1
            }
        );
        assert_eq!(r.damage.counts["brokenlight"].fp, 1);
        assert_eq!(r.num_matched, 1);
        assert!(Tally::default().report(&LabelSpace::default()).is_err());
    }

    #[test]
    fn table_f1_consistency() {
        assert!((f1(0.8868, 0.8989) - 0.8926).abs() < 1e-3);
        assert!((f1(0.9704, 0.9311) - 0.9506).abs() < 1e-3);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }
}
