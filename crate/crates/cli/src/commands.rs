use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use albert_core::distill::{distill, init_student, retention_report};
use albert_core::heads::Prediction;
use albert_core::metrics::render::{render_overlay, render_trends};
use albert_core::metrics::{evaluate, nms, NmsConfig};
use albert_core::model::Model;
use albert_core::synthdata::{generate, load_dataset, rle_encode, save_dataset, Dataset};
use albert_core::training::checkpoint::Checkpoint;
use albert_core::training::{train, TrainState};
use albert_core::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot::load_points;

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const STUDENT: &str = "student.ckpt";
pub const DISTILL_LOG: &str = "distill_log.jsonl";
pub const RETENTION: &str = "retention.json";

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.display().to_string(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(file_err(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(file_err(path))
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(file_err(&path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value)?;
        writeln!(self.out, "{line}")
            .and_then(|()| self.out.flush())
            .map_err(file_err(&self.path))
    }
}

fn log_config(command: &str, config: &RunConfig) {
    log::info!("{command}: resolved config {}", config.to_json());
}

pub fn gen_data(config: &RunConfig, out: &Path, n: usize) -> Result<()> {
    log_config("gen-data", config);
    let labels = config.label_space()?;
    let dataset = Dataset {
        samples: generate(&config.data, &labels, n)?,
        label_space: labels,
        height: config.data.height,
        width: config.data.width,
    };
    save_dataset(&dataset, out)?;
    log::info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn checkpoint(config: &RunConfig, model: &Model, state: &TrainState) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        train: Some(config.train.clone()),
        optimizer: state.optimizer.clone(),
        epoch: state.epoch,
    }
}

/// Trains from scratch or from `resume`; writes the final checkpoint, the epoch log and
/// optional `epoch_<k>.ckpt` snapshots.
pub fn train_cmd(
    config: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    checkpoint_every: Option<usize>,
) -> Result<()> {
    log_config("train", config);
    let dataset = load_dataset(data)?;
    let (mut model, mut state) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model.config != config.model {
                return Err(Error::Config("resumed checkpoint has a different model config".into()));
            }
            let state = TrainState {
                optimizer: ckpt.optimizer,
                epoch: ckpt.epoch,
            };
            (ckpt.model, state)
        }
        None => (
            Model::new(config.model.clone(), config.label_space()?, config.train.seed)?,
            TrainState::default(),
        ),
    };
    create_dir(out)?;
    let mut log = JsonLines::create(out.join(TRAIN_LOG))?;
    let every = checkpoint_every.filter(|&k| k > 0);
    train(
        &mut model,
        &mut state,
        &dataset,
        &config.train,
        &mut |entry, model, state| {
            log.push(entry)?;
            if every.is_some_and(|k| entry.epoch % k == 0) {
                checkpoint(config, model, state).save(&out.join(format!("epoch_{}.ckpt", entry.epoch)))?;
            }
            Ok(())
        },
    )?;
    let path = out.join(CHECKPOINT);
    checkpoint(config, &model, &state).save(&path)?;
    log::info!("saved {}", path.display());
    Ok(())
}

pub fn eval_cmd(ckpt: &Path, data: &Path, report: &Path, nms_cfg: &NmsConfig) -> Result<()> {
    log::info!("eval: nms {}", serde_json::to_string(nms_cfg)?);
    let model = Checkpoint::load(ckpt)?.model;
    let dataset = load_dataset(data)?;
    albert_core::training::check_dataset(&model, &dataset)?;
    let r = evaluate(&model, &dataset.samples, nms_cfg)?;
    log::info!(
        "mIoU {:.4}, damage+part accuracy {:.4}, matched {}",
        r.miou,
        r.damage_part_accuracy,
        r.num_matched
    );
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(report, &r)
}

#[derive(Serialize)]
struct MaskRle {
    starts_with: u8,
    runs: Vec<usize>,
}

#[derive(Serialize)]
struct PredictionRecord {
    query: usize,
    domain: String,
    class_id: usize,
    label: String,
    confidence: f64,
    center: (f64, f64),
    sigma: f64,
    mask: MaskRle,
}

#[derive(Serialize)]
struct ImageRecord {
    image: String,
    predictions: Vec<PredictionRecord>,
}

fn records(model: &Model, kept: &[Prediction]) -> Result<Vec<PredictionRecord>> {
    kept.iter()
        .filter_map(|p| p.domain().zip(p.class_id()).map(|dc| (p, dc)))
        .map(|(p, (domain, class_id))| {
            let (starts_with, runs) = rle_encode(&p.binary_mask());
            Ok(PredictionRecord {
                query: p.query,
                domain: domain.as_str().to_string(),
                class_id,
                label: model.label_space.name(domain, class_id)?.to_string(),
                confidence: p.confidence(),
                center: p.prior.center,
                sigma: p.prior.sigma,
                mask: MaskRle { starts_with, runs },
            })
        })
        .collect()
}

/// Reads an RGB PNG sized to the model input as `H*W*3` values in `[0, 1]`.
fn read_png(path: &Path, model: &Model) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::File {
                path: path.display().to_string(),
                source: io,
            },
            other => Error::Image(format!("{}: {other}", path.display())),
        })?
        .to_rgb8();
    let e = &model.config.encoder;
    if (img.height() as usize, img.width() as usize) != (e.image_height, e.image_width) {
        return Err(Error::Config(format!(
            "{} is {}x{}, model expects {}x{}",
            path.display(),
            img.height(),
            img.width(),
            e.image_height,
            e.image_width
        )));
    }
    Ok(img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect())
}

pub fn infer_cmd(
    ckpt: &Path,
    image: Option<&Path>,
    data: Option<&Path>,
    overlay_dir: Option<&Path>,
    json_out: Option<&Path>,
    nms_cfg: &NmsConfig,
) -> Result<()> {
    let model = Checkpoint::load(ckpt)?.model;
    let e = &model.config.encoder;
    let (h, w) = (e.image_height, e.image_width);
    let inputs: Vec<(String, Vec<f64>)> = match (image, data) {
        (Some(p), None) => {
            let id = p
                .file_stem()
                .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            vec![(id, read_png(p, &model)?)]
        }
        (None, Some(d)) => {
            let dataset = load_dataset(d)?;
            albert_core::training::check_dataset(&model, &dataset)?;
            dataset
                .samples
                .iter()
                .map(|s| (s.sample_id.clone(), s.image_f64()))
                .collect()
        }
        _ => return Err(Error::Config("infer needs exactly one of --image or --data".into())),
    };
    if let Some(dir) = overlay_dir {
        create_dir(dir)?;
    }
    let mut out = Vec::with_capacity(inputs.len());
    for (id, pixels) in &inputs {
        let kept = nms(&model.predict(pixels)?, nms_cfg);
        if let Some(dir) = overlay_dir {
            render_overlay(pixels, h, w, &kept, &model.label_space, &dir.join(format!("{id}.png")))?;
        }
        log::info!("{id}: {} predictions", kept.len());
        out.push(ImageRecord {
            image: id.clone(),
            predictions: records(&model, &kept)?,
        });
    }
    match json_out {
        Some(path) => write_json(path, &out),
        None => {
            println!("{}", serde_json::to_string(&out)?);
            Ok(())
        }
    }
}

pub fn distill_cmd(config: &RunConfig, teacher_path: &Path, data: &Path, out: &Path) -> Result<()> {
    log_config("distill", config);
    let teacher = Checkpoint::load(teacher_path)?.model;
    let dataset = load_dataset(data)?;
    let mut student = init_student(&teacher, &config.distill.student, config.train.seed)?;
    create_dir(out)?;
    let mut log = JsonLines::create(out.join(DISTILL_LOG))?;
    distill(
        &teacher,
        &mut student,
        &dataset,
        &config.distill,
        &config.train,
        &config.nms,
        &mut |entry| log.push(entry),
    )?;
    Checkpoint::inference_only(student.clone()).save(&out.join(STUDENT))?;
    let report = retention_report(
        &teacher,
        &student,
        &dataset.samples,
        &config.nms,
        config.distill.focus_threshold,
    )?;
    log::info!(
        "retention {:.4} (teacher mIoU {:.4}, student mIoU {:.4}), compute ratio {:.3}",
        report.retention,
        report.teacher_miou,
        report.student_miou,
        report.compute_proxy_ratio
    );
    write_json(&out.join(RETENTION), &report)
}

pub fn plot_cmd(logs: &[PathBuf], out: &Path) -> Result<()> {
    let mut points = Vec::new();
    for p in logs {
        points.extend(load_points(p)?);
    }
    render_trends(&points, out)?;
    log::info!("wrote {} checkpoints to {}", points.len(), out.display());
    Ok(())
}
