//! Dataset loaders, JSON experiment configuration, teacher pre-training and
//! the magnitude sweep with its CSV, gain table and SVG outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::KdConfig;
use crate::error::{Error, Result};
use crate::imageops::{AugmentSpace, Image};
use crate::policy::{mix_seed, PolicySpec};
use crate::smallnet::{init_params, load_params, save_params, InputShape, ModelParams};
use crate::trainer::{evaluate, train, Dataset, Split, TrainConfig, TrainHistory};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 1024;
const DIGIT_CLASSES: usize = 10;
const SUBSET_TAG: u64 = 0x5355_4253;
const INIT_TAG: u64 = 0x494E_4954;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Dataset(format!("{what}: truncated header")))
}

/// Parses an IDX image file (`0x00000803`, count, rows, cols, pixels) and its
/// label file (`0x00000801`, count, labels). All header words are big-endian.
pub fn load_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!("images: bad magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!("labels: bad magic {magic:#010x}")));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let label_count = be_u32(labels, 4, "labels")? as usize;
    if count != label_count {
        return Err(Error::Dataset(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let px = rows * cols;
    let body = &images[16..];
    if body.len() != count * px {
        return Err(Error::Dataset(format!(
            "images: expected {} pixel bytes, found {}",
            count * px,
            body.len()
        )));
    }
    let lbody = &labels[8..];
    if lbody.len() != count {
        return Err(Error::Dataset(format!(
            "labels: expected {count} bytes, found {}",
            lbody.len()
        )));
    }
    let imgs = body
        .chunks_exact(px.max(1))
        .take(count)
        .map(|c| Image::new(cols, rows, 1, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(imgs, lbody.iter().map(|&l| l as usize).collect(), DIGIT_CLASSES, split)
}

/// Inverse of [`load_idx`] for single-channel datasets.
pub fn write_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = data
        .input_shape()
        .ok_or_else(|| Error::Dataset("cannot write an empty dataset".into()))?;
    if shape.channels != 1 {
        return Err(Error::Dataset("IDX images must be single-channel".into()));
    }
    let mut images = Vec::with_capacity(16 + data.len() * shape.height * shape.width);
    for w in [IDX_IMAGES_MAGIC, data.len() as u32, shape.height as u32, shape.width as u32] {
        images.extend_from_slice(&w.to_be_bytes());
    }
    for img in data.images() {
        images.extend_from_slice(img.data());
    }
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    labels.extend(data.labels().iter().map(|l| l.class_index as u8));
    Ok((images, labels))
}

/// Parses CIFAR-10 binary batches: 3073-byte records of one label byte and
/// three 32x32 channel planes, converted to interleaved RGB.
pub fn load_cifar_binary(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= DIGIT_CLASSES {
            return Err(Error::Dataset(format!("record {r}: label {label} >= 10")));
        }
        let planes = &rec[1..];
        let mut data = vec![0u8; 3 * 1024];
        for (i, px) in data.chunks_exact_mut(3).enumerate() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = planes[c * 1024 + i];
            }
        }
        images.push(Image::new(32, 32, 3, data)?);
        labels.push(label);
    }
    Dataset::new(images, labels, DIGIT_CLASSES, split)
}

/// Inverse of [`load_cifar_binary`].
pub fn write_cifar_binary(data: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (img, label) in data.images().iter().zip(data.labels()) {
        if (img.width(), img.height(), img.channels()) != (32, 32, 3) {
            return Err(Error::Dataset("CIFAR records hold 32x32x3 images".into()));
        }
        out.push(label.class_index as u8);
        for c in 0..3 {
            out.extend(img.data().chunks_exact(3).map(|px| px[c]));
        }
    }
    Ok(out)
}

/// Picks `size` samples keeping class proportions. Within each class the
/// samples are drawn by a seeded shuffle; the result keeps dataset order.
pub fn stratified_subset(data: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    if size >= data.len() {
        return Ok(data.clone());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes()];
    for (i, l) in data.labels().iter().enumerate() {
        by_class[l.class_index].push(i);
    }
    // largest-remainder apportionment of `size` over the class counts
    let n = data.len();
    let mut quota: Vec<usize> = by_class.iter().map(|v| v.len() * size / n).collect();
    let mut rest: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(c, v)| ((v.len() * size) % n, c))
        .collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = size - quota.iter().sum::<usize>();
    for &(_, c) in rest.iter().take(short) {
        quota[c] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SUBSET_TAG]));
    let mut picked = Vec::with_capacity(size);
    for (members, q) in by_class.iter_mut().zip(quota) {
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..q]);
    }
    picked.sort_unstable();
    data.select(&picked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
}

fn read(base: &Path, p: &Path) -> Result<Vec<u8>> {
    let path = base.join(p);
    fs::read(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

impl DataSource {
    /// Loads `(train, test)`, resolving relative paths against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        match self {
            Self::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((
                load_idx(&read(base, train_images)?, &read(base, train_labels)?, Split::Train)?,
                load_idx(&read(base, test_images)?, &read(base, test_labels)?, Split::Test)?,
            )),
            Self::Cifar10 { train, test } => {
                let mut bytes = Vec::new();
                for p in train {
                    bytes.extend(read(base, p)?);
                }
                Ok((
                    load_cifar_binary(&bytes, Split::Train)?,
                    load_cifar_binary(&read(base, test)?, Split::Test)?,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "RA")]
    Ra,
    #[serde(rename = "RA+KD")]
    RaKd,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Self::Ra => "RA",
            Self::RaKd => "RA+KD",
        }
    }
}

fn default_ops() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    /// Where `pretrain-teacher` writes and the sweep reads the teacher.
    pub path: PathBuf,
    /// Training recipe for the teacher; defaults to the experiment's `train`
    /// with distillation off.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Train the teacher on the whole training split instead of the subset.
    #[serde(default)]
    pub full_train_set: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub magnitudes: Vec<u32>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// Transforms applied per image.
    #[serde(default = "default_ops")]
    pub ops: u32,
    pub space: AugmentSpace,
    /// Writes measured seconds into the CSV instead of zeros.
    #[serde(default)]
    pub record_wall_time: bool,
}

/// The JSON document read by every CLI verb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Stratified cap on training samples.
    #[serde(default)]
    pub subset_size: Option<usize>,
    #[serde(default)]
    pub test_subset_size: Option<usize>,
    pub train: TrainConfig,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Loads both splits and applies the stratified caps.
    pub fn datasets(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        let (mut train_set, mut test_set) = self.data.load(base)?;
        if let Some(n) = self.subset_size {
            train_set = stratified_subset(&train_set, n, self.train.seed)?;
        }
        if let Some(n) = self.test_subset_size {
            test_set = stratified_subset(&test_set, n, self.train.seed)?;
        }
        Ok((train_set, test_set))
    }

    /// Datasets for teacher pre-training.
    pub fn teacher_datasets(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        if self.teacher.as_ref().is_some_and(|t| t.full_train_set) {
            let plain = ExperimentConfig {
                subset_size: None,
                ..self.clone()
            };
            plain.datasets(base)
        } else {
            self.datasets(base)
        }
    }

    pub fn teacher_train_config(&self) -> TrainConfig {
        match self.teacher.as_ref().and_then(|t| t.train.clone()) {
            Some(cfg) => cfg,
            None => TrainConfig {
                kd: KdConfig::disabled(),
                kd_during_finetune: false,
                ..self.train.clone()
            },
        }
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let spec = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("no `sweep` section".into()))?;
        Ok(SweepConfig {
            magnitudes: spec.magnitudes.clone(),
            modes: spec.modes.clone(),
            seeds: spec.seeds.clone(),
            ops: spec.ops,
            space: spec.space,
            base: self.train.clone(),
            teacher_path: self.teacher.as_ref().map(|t| t.path.clone()),
            record_wall_time: spec.record_wall_time,
        })
    }
}

/// Deterministic He initialisation for a run seed.
pub fn init_for_seed(input: InputShape, classes: usize, seed: u64) -> Result<ModelParams> {
    init_params(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, INIT_TAG])), input, classes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherReport {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub test_error: f64,
}

/// Trains a teacher without distillation and writes it to `out`.
pub fn pretrain_teacher(
    data: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<TeacherReport> {
    if cfg.uses_teacher() || cfg.kd_during_finetune {
        return Err(Error::Config(
            "teacher pre-training cannot itself distill; set kd.lambda to 0".into(),
        ));
    }
    let shape = data
        .input_shape()
        .ok_or_else(|| Error::Dataset("empty training set".into()))?;
    let init = init_for_seed(shape, data.classes(), cfg.seed)?;
    let (params, history) = train(None, &init, data, test, cfg)?;
    let test_error = evaluate(&params, test)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, save_params(&params)?)?;
    log::info!("teacher written to {}; test error {test_error:.6}", out.display());
    Ok(TeacherReport {
        params,
        history,
        test_error,
    })
}

pub fn load_params_file(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    load_params(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub magnitudes: Vec<u32>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub ops: u32,
    pub space: AugmentSpace,
    /// Template for every cell; policy, seed and distillation are overridden.
    pub base: TrainConfig,
    pub teacher_path: Option<PathBuf>,
    pub record_wall_time: bool,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.magnitudes.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("magnitudes, modes and seeds must be non-empty".into()));
        }
        if let Some(&m) = self.magnitudes.iter().find(|&&m| m > self.space.max_level()) {
            return Err(Error::MagnitudeOutOfRange {
                level: m,
                max: self.space.max_level(),
            });
        }
        if self.modes.contains(&Mode::RaKd) && self.base.kd.lambda <= 0.0 {
            return Err(Error::Config("RA+KD needs kd.lambda > 0 in the base config".into()));
        }
        for list in [&self.magnitudes.iter().map(|&m| m as u64).collect::<Vec<_>>(), &self.seeds] {
            let mut v = list.clone();
            v.sort_unstable();
            v.dedup();
            if v.len() != list.len() {
                return Err(Error::Config("duplicate magnitude or seed".into()));
            }
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return Err(Error::Config("duplicate mode".into()));
        }
        Ok(())
    }

    /// Training config for one cell.
    pub fn cell_config(&self, magnitude: u32, mode: Mode, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.base.clone();
        cfg.policy = PolicySpec::rand_augment(self.ops, magnitude, self.space)?;
        cfg.seed = seed;
        if mode == Mode::Ra {
            cfg.kd = KdConfig::disabled();
            cfg.kd_during_finetune = false;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub magnitude: u32,
    pub mode: Mode,
    pub seed: u64,
    pub final_error: f64,
    pub mean_final_loss: f64,
    pub wall_seconds: f64,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Sorted by `(magnitude, mode, seed)`.
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainRow {
    pub magnitude: u32,
    pub ra_mean: f64,
    pub ra_kd_mean: f64,
    /// `ra_mean - ra_kd_mean`; positive when distillation helps.
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub magnitude: u32,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl SweepResult {
    pub fn rows_for(&self, magnitude: u32, mode: Mode) -> impl Iterator<Item = &SweepRow> {
        self.rows
            .iter()
            .filter(move |r| r.magnitude == magnitude && r.mode == mode)
    }

    /// Seed statistics of the final error per magnitude for one mode.
    pub fn series(&self, mode: Mode) -> Vec<SeriesPoint> {
        let mut by_m: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.mode == mode) {
            by_m.entry(r.magnitude).or_default().push(r.final_error);
        }
        by_m.into_iter()
            .map(|(magnitude, v)| SeriesPoint {
                magnitude,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect()
    }

    pub fn mean_error(&self, magnitude: u32, mode: Mode) -> Option<f64> {
        let v: Vec<f64> = self.rows_for(magnitude, mode).map(|r| r.final_error).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Magnitudes where both modes were run.
    pub fn gain_table(&self) -> Vec<GainRow> {
        let ra = self.series(Mode::Ra);
        let kd: BTreeMap<u32, f64> = self
            .series(Mode::RaKd)
            .into_iter()
            .map(|p| (p.magnitude, p.mean))
            .collect();
        ra.into_iter()
            .filter_map(|p| {
                kd.get(&p.magnitude).map(|&k| GainRow {
                    magnitude: p.magnitude,
                    ra_mean: p.mean,
                    ra_kd_mean: k,
                    gain: p.mean - k,
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("magnitude,mode,seed,final_error,mean_final_loss,wall_seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.magnitude,
                r.mode.label(),
                r.seed,
                r.final_error,
                r.mean_final_loss,
                r.wall_seconds
            );
        }
        out
    }

    pub fn gain_csv(&self) -> String {
        let mut out = String::from("magnitude,ra_mean_error,ra_kd_mean_error,gain\n");
        for g in self.gain_table() {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                g.magnitude, g.ra_mean, g.ra_kd_mean, g.gain
            );
        }
        out
    }
}

/// Trains every `(magnitude, mode, seed)` cell. Cells sharing a seed start
/// from the same initial student, so the two modes are paired.
pub fn run_sweep(cfg: &SweepConfig, data: &Dataset, test: &Dataset) -> Result<SweepResult> {
    cfg.validate()?;
    let teacher = if cfg.modes.contains(&Mode::RaKd) {
        let path = cfg
            .teacher_path
            .as_ref()
            .ok_or_else(|| Error::Config("RA+KD requested but no teacher path given".into()))?;
        if !path.exists() {
            return Err(Error::Config(format!("teacher file {} not found", path.display())));
        }
        Some(load_params_file(path)?)
    } else {
        None
    };
    run_sweep_with_teacher(cfg, teacher.as_ref(), data, test)
}

/// [`run_sweep`] with an in-memory teacher.
pub fn run_sweep_with_teacher(
    cfg: &SweepConfig,
    teacher: Option<&ModelParams>,
    data: &Dataset,
    test: &Dataset,
) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.modes.contains(&Mode::RaKd) && teacher.is_none() {
        return Err(Error::Config("RA+KD requested but no teacher given".into()));
    }
    let shape = data
        .input_shape()
        .ok_or_else(|| Error::Dataset("empty training set".into()))?;
    let mut cells = Vec::new();
    for &m in &cfg.magnitudes {
        for &mode in &cfg.modes {
            for &seed in &cfg.seeds {
                cells.push((m, mode, seed));
            }
        }
    }
    let mut rows = cells
        .into_par_iter()
        .map(|(magnitude, mode, seed)| {
            let tcfg = cfg.cell_config(magnitude, mode, seed)?;
            let init = init_for_seed(shape, data.classes(), seed)?;
            let t = if mode == Mode::RaKd { teacher } else { None };
            let start = Instant::now();
            let (_, history) = train(t, &init, data, test, &tcfg)?;
            let secs = start.elapsed().as_secs_f64();
            let last = *history.last().expect("at least one epoch");
            log::info!(
                "M={magnitude} {} seed {seed}: error {:.4}",
                mode.label(),
                last.test_error
            );
            Ok(SweepRow {
                magnitude,
                mode,
                seed,
                final_error: last.test_error,
                mean_final_loss: last.mean_loss,
                wall_seconds: if cfg.record_wall_time { secs } else { 0.0 },
                history,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.magnitude, r.mode, r.seed));
    Ok(SweepResult { rows })
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

/// Error-versus-magnitude curves, one polyline per mode through the seed
/// means, with min/max whiskers at each magnitude.
pub fn emit_plot(result: &SweepResult) -> Result<String> {
    if result.rows.is_empty() {
        return Err(Error::Config("cannot plot an empty sweep".into()));
    }
    let modes: Vec<Mode> = {
        let mut m: Vec<Mode> = result.rows.iter().map(|r| r.mode).collect();
        m.sort();
        m.dedup();
        m
    };
    let m_lo = result.rows.iter().map(|r| r.magnitude).min().unwrap_or(0) as f64;
    let m_hi = result.rows.iter().map(|r| r.magnitude).max().unwrap_or(0) as f64;
    let e_lo = result.rows.iter().map(|r| r.final_error).fold(f64::INFINITY, f64::min);
    let e_hi = result.rows.iter().map(|r| r.final_error).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((e_hi - e_lo) * 0.1).max(1e-3);
    let (y0, y1) = ((e_lo - pad).max(0.0), (e_hi + pad).min(1.0));
    let x = |m: f64| {
        if m_hi > m_lo {
            MARGIN + (m - m_lo) / (m_hi - m_lo) * (PLOT_W - 2.0 * MARGIN)
        } else {
            PLOT_W / 2.0
        }
    };
    let y = |e: f64| PLOT_H - MARGIN - (e - y0) / (y1 - y0) * (PLOT_H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (left, right, bottom, top) = (MARGIN, PLOT_W - MARGIN, PLOT_H - MARGIN, MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" stroke="black" fill="none"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">distortion magnitude M</text>"#,
        PLOT_W / 2.0,
        PLOT_H - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{:.1}" font-size="14" transform="rotate(-90 15 {:.1})" text-anchor="middle">test error</text>"#,
        PLOT_H / 2.0,
        PLOT_H / 2.0
    );
    for tick in [y0, (y0 + y1) / 2.0, y1] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{tick:.3}</text>"#,
            left - 6.0,
            y(tick) + 4.0
        );
    }
    let mut mags: Vec<u32> = result.rows.iter().map(|r| r.magnitude).collect();
    mags.sort_unstable();
    mags.dedup();
    for m in mags {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{m}</text>"#,
            x(m as f64),
            bottom + 16.0
        );
    }

    for (i, mode) in modes.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts = result.series(*mode);
        let coords: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.magnitude as f64), y(p.mean)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-mode="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            mode.label(),
            coords.join(" ")
        );
        for p in &pts {
            let px = x(p.magnitude as f64);
            let _ = writeln!(
                svg,
                r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="{color}"/>"#,
                y(p.min),
                y(p.max)
            );
            let _ = writeln!(
                svg,
                r#"<circle cx="{px:.2}" cy="{:.2}" r="3" fill="{color}" data-mean="{:.6}"/>"#,
                y(p.mean),
                p.mean
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" fill="{color}">{}</text>"#,
            right - 60.0,
            top + 16.0 * (i as f64 + 1.0),
            mode.label()
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes `sweep.csv`, `gain.csv` and `sweep.svg` into `dir`.
pub fn write_sweep_outputs(result: &SweepResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("sweep.csv"), result.to_csv())?;
    fs::write(dir.join("gain.csv"), result.gain_csv())?;
    fs::write(dir.join("sweep.svg"), emit_plot(result)?)?;
    Ok(())
}
