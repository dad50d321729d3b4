//! The full instance-segmentation model: encoder plus query heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{active_tokens, encode, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::heads::{
    class_state, classify, gaussian_refine_var, gen_dynamic_filter, predict_center_sigma, predict_mask, token_refine,
    update_queries, GaussianPrior, HeadLogits, HeadsConfig, Prediction,
};
use crate::labels::{Domain, LabelSpace};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads.validate()
    }

    /// Number of layer-wise learning-rate groups below the heads: embeddings plus blocks.
    pub fn total_layers(&self) -> usize {
        self.encoder.layers + 1
    }

    /// Layer index of a parameter: 0 for embeddings, `l + 1` for block `l`, `total_layers` for heads.
    pub fn layer_index(&self, name: &str) -> usize {
        if let Some(rest) = name.strip_prefix("encoder.block") {
            let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
            if let Ok(l) = digits.parse::<usize>() {
                return l + 1;
            }
        }
        if name.starts_with("encoder.") && name != "encoder.ln_final.gain" && name != "encoder.ln_final.bias" {
            return 0;
        }
        self.total_layers()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub label_space: LabelSpace,
    pub params: ParamStore,
}

/// Tape handles for one forward pass over one image.
#[derive(Clone, Debug)]
pub struct Forward {
    pub encoder: EncoderOutput,
    pub queries: Var,
    /// Unrefined masks, `N_q x HW`.
    pub raw_masks: Var,
    /// Gaussian-refined masks, `N_q x HW`.
    pub masks: Var,
    pub centers: Var,
    pub sigmas: Var,
    pub logits: HeadLogits,
}

/// Predictions of a (possibly gated) forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub predictions: Vec<Prediction>,
    pub compute_proxy: usize,
    /// Set when an empty focus set fell back to the ungated pass.
    pub gate_fallback: bool,
}

impl Model {
    pub fn new(config: ModelConfig, label_space: LabelSpace, seed: u64) -> Result<Self> {
        config.validate()?;
        label_space.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.encoder.init_params(&mut params, &mut rng);
        let sizes = (
            label_space.size(Domain::Damage),
            label_space.size(Domain::Fake),
            label_space.size(Domain::Part),
        );
        let side = config.encoder.image_height.max(config.encoder.image_width);
        config
            .heads
            .init_params(&mut params, config.encoder.hidden_dim, sizes, side, &mut rng);
        Ok(Self {
            config,
            label_space,
            params,
        })
    }

    pub fn image_len(&self) -> usize {
        let e = &self.config.encoder;
        e.image_height * e.image_width * e.channels
    }

    fn check_image(&self, image: &[f64]) -> Result<()> {
        if image.len() != self.image_len() {
            let e = &self.config.encoder;
            return Err(Error::shape(
                "model input",
                &[image.len()],
                &[e.image_height, e.image_width, e.channels],
            ));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: &[f64], active: Option<&[usize]>) -> Result<Forward> {
        self.check_image(image)?;
        let ec = &self.config.encoder;
        let hc = &self.config.heads;
        let (h, w) = (ec.image_height, ec.image_width);
        let encoder = encode(tape, ec, params, image, active)?;
        let queries = update_queries(tape, params, encoder.tokens, ec.heads)?;
        let (filters, bias) = gen_dynamic_filter(tape, params, queries, hc.kernel_size)?;
        let raw_masks = predict_mask(tape, filters, bias, encoder.feature_map)?;
        let (centers, sigmas) = predict_center_sigma(tape, params, queries, raw_masks, h, w)?;
        let masks = if hc.gaussian_refine {
            gaussian_refine_var(tape, raw_masks, centers, sigmas, h, w)?
        } else {
            raw_masks
        };
        let state = class_state(tape, params, queries, masks, encoder.feature_map)?;
        let logits = classify(tape, params, state)?;
        Ok(Forward {
            encoder,
            queries,
            raw_masks,
            masks,
            centers,
            sigmas,
            logits,
        })
    }

    /// Decodes every query, applying token refinement to damage predictions.
    pub fn predict(&self, image: &[f64]) -> Result<Vec<Prediction>> {
        Ok(self.run(image, None)?.predictions)
    }

    /// Forward pass updating only tokens whose patches touch `focus`; an empty focus runs ungated.
    pub fn predict_gated(&self, image: &[f64], focus: &[(usize, usize)]) -> Result<Inference> {
        let ec = &self.config.encoder;
        if let Some(&(y, x)) = focus
            .iter()
            .find(|&&(y, x)| y >= ec.image_height || x >= ec.image_width)
        {
            return Err(Error::OutOfRange(format!(
                "focus pixel ({y}, {x}) outside {}x{} image",
                ec.image_height, ec.image_width
            )));
        }
        if focus.is_empty() {
            let mut out = self.run(image, None)?;
            out.gate_fallback = true;
            return Ok(out);
        }
        let active = active_tokens(ec, focus);
        self.run(image, Some(&active))
    }

    fn run(&self, image: &[f64], active: Option<&[usize]>) -> Result<Inference> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &params, image, active)?;
        if let Some((_, op)) = tape.first_non_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let mut predictions = decode(&tape, &fwd)?;
        refine_damage_logits(&mut predictions, self.config.heads.alpha);
        Ok(Inference {
            predictions,
            compute_proxy: fwd.encoder.compute_proxy,
            gate_fallback: false,
        })
    }
}

/// Copies per-query values off the tape.
pub fn decode(tape: &Tape, fwd: &Forward) -> Result<Vec<Prediction>> {
    let masks = tape.value(fwd.masks);
    let (nq, _) = masks.dims2()?;
    let centers = tape.value(fwd.centers);
    let sigmas = tape.value(fwd.sigmas);
    let row = |v: Var, q: usize| tape.value(v).row_slice(q).to_vec();
    Ok((0..nq)
        .map(|q| Prediction {
            query: q,
            mask: masks.row_slice(q).to_vec(),
            damage_logits: row(fwd.logits.damage, q),
            fake_logits: row(fwd.logits.fake, q),
            part_logits: row(fwd.logits.part, q),
            domain_logits: row(fwd.logits.domain, q),
            prior: GaussianPrior {
                center: (centers.at2(q, 0), centers.at2(q, 1)),
                sigma: sigmas.data()[q],
            },
        })
        .collect())
}

/// Boosts each damage prediction's argmax logit by its mean mask inside the most-overlapping part prediction.
pub fn refine_damage_logits(predictions: &mut [Prediction], alpha: f64) {
    if alpha == 0.0 {
        return;
    }
    let parts: Vec<Vec<bool>> = predictions
        .iter()
        .filter(|p| p.domain() == Some(Domain::Part))
        .map(Prediction::binary_mask)
        .collect();
    for pred in predictions.iter_mut().filter(|p| p.domain() == Some(Domain::Damage)) {
        let own = pred.binary_mask();
        let best = parts
            .iter()
            .map(|r| r.iter().zip(&own).filter(|(a, b)| **a && **b).count())
            .enumerate()
            .filter(|&(_, overlap)| overlap > 0)
            .max_by_key(|&(i, overlap)| (overlap, std::cmp::Reverse(i)));
        if let Some((i, _)) = best {
            let class = crate::heads::argmax(&pred.damage_logits);
            pred.damage_logits[class] = token_refine(pred.damage_logits[class], &pred.mask, &parts[i], alpha);
        }
    }
}
