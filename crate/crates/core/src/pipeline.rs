//! Self-labelling training loop around an external segmenter.
//!
//! A dataset directory holds `images/<id>.ppm` and, where known,
//! `graphs/<id>.graph` reference graphs. Each iteration turns the current
//! segmented training fields into label masks (ridge graphs thickened to
//! road width), hands images and labels to the segmenter, and collects new
//! fields for the training and test images. Test fields are reconstructed
//! and scored against the references.
//!
//! The state directory keeps one `iter_NNNN` directory per finished
//! iteration, written under a temporary name and renamed into place, so an
//! interrupted run resumes from the last complete iteration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::enhance::{compose, detect_tips, tip_layer, TipParams, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::metrics::{avg_hausdorff, apls, AplsOptions, DEFAULT_MAX, DEFAULT_SAMPLE_STEP};
use crate::morse::reconstruct;
use crate::netgraph::{filter_arcs, rasterize, read_graph, write_graph, BinaryMask, GeoGraph};
use crate::raster::{load_density, load_rgb, preprocess, save_f32_grid, save_ppm, DensityField};
use crate::synth::{rng, Sample};

/// Road half-width in pixels for 4 m roads at 1300 px per 400 m.
pub const DEFAULT_HALF_WIDTH: f64 = 6.5;
pub const DEFAULT_EPSILON: f64 = 0.005;
pub const DEFAULT_SIGMA: f64 = 2.0;

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub delta: f64,
    pub tau_high: f64,
    pub tau_low: f64,
    pub low_fraction: f64,
}

pub const PRESETS: [Preset; 4] = [
    Preset { name: "aoi2", delta: 0.12, tau_high: 0.4, tau_low: 0.4, low_fraction: 0.0 },
    Preset { name: "aoi3", delta: 0.1, tau_high: 0.4, tau_low: 0.3, low_fraction: 0.3 },
    Preset { name: "aoi4", delta: 0.1, tau_high: 0.4, tau_low: 0.3, low_fraction: 0.4 },
    Preset { name: "aoi5", delta: 0.07, tau_high: 0.3, tau_low: 0.3, low_fraction: 0.0 },
];

/// Printed whenever a preset is used.
pub const PRESET_WARNING: &str = "presets are keyed by area label only: the source tables \
disagree on which city is AOI_3 and AOI_4 and on their low-tau fractions (30% vs 40%); \
the per-row table values are used";

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
            Error::param(format!("unknown preset {name:?}, expected one of {}", names.join(", ")))
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Ground-truth labels for every training image.
    Semi,
    /// Labels only from reconstructions.
    LabelFree,
    /// A fixed subset of training images keeps ground-truth labels.
    Partial,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" => Ok(Mode::Semi),
            "label-free" => Ok(Mode::LabelFree),
            "partial" => Ok(Mode::Partial),
            _ => Err(Error::param(format!(
                "unknown mode {s:?}, expected semi, label-free or partial"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TipSettings {
    pub params: TipParams,
    pub radius: f64,
    /// First iteration whose training labels use tip enhancement.
    pub from_iteration: usize,
}

impl Default for TipSettings {
    fn default() -> Self {
        TipSettings {
            params: TipParams::default(),
            radius: DEFAULT_RADIUS,
            from_iteration: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SegmenterKind {
    /// Gaussian blur of the grayscale input; ignores labels.
    Blur { sigma: f64 },
    /// `<program> <args..> train|predict --workdir <dir>`.
    Command {
        program: PathBuf,
        args: Vec<String>,
        timeout: Duration,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub delta: f64,
    /// `(iteration, delta)`: from that iteration on, use that delta.
    pub delta_schedule: Vec<(usize, f64)>,
    pub tau_high: f64,
    pub tau_low: f64,
    pub low_fraction: f64,
    pub mask_half_width: f64,
    pub iterations: usize,
    pub mode: Mode,
    pub labeled_fraction: f64,
    pub tips: TipSettings,
    /// First iteration whose training labels are arc-filtered.
    pub arc_filter_from: usize,
    /// Train, validation, test.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub segmenter: SegmenterKind,
    /// Blur applied when turning raw images into initial fields.
    pub preprocess_sigma: f64,
    pub epsilon: f64,
    pub jobs: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let p = PRESETS[0];
        PipelineConfig {
            delta: p.delta,
            delta_schedule: Vec::new(),
            tau_high: p.tau_high,
            tau_low: p.tau_low,
            low_fraction: p.low_fraction,
            mask_half_width: DEFAULT_HALF_WIDTH,
            iterations: 3,
            mode: Mode::LabelFree,
            labeled_fraction: 0.1,
            tips: TipSettings::default(),
            arc_filter_from: 3,
            ratios: [4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0],
            seed: 0,
            segmenter: SegmenterKind::Blur { sigma: DEFAULT_SIGMA },
            preprocess_sigma: DEFAULT_SIGMA,
            epsilon: DEFAULT_EPSILON,
            jobs: None,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::param(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl PipelineConfig {
    pub fn apply_preset(&mut self, p: &Preset) {
        self.delta = p.delta;
        self.tau_high = p.tau_high;
        self.tau_low = p.tau_low;
        self.low_fraction = p.low_fraction;
    }

    pub fn validate(&self) -> Result<()> {
        unit("delta", self.delta)?;
        for &(_, d) in &self.delta_schedule {
            unit("scheduled delta", d)?;
        }
        unit("tauHigh", self.tau_high)?;
        unit("tauLow", self.tau_low)?;
        unit("lowFraction", self.low_fraction)?;
        unit("labeledFraction", self.labeled_fraction)?;
        check_ratios(&self.ratios)?;
        if !(self.mask_half_width >= 0.0) {
            return Err(Error::param("mask half width must be >= 0"));
        }
        if !(self.preprocess_sigma >= 0.0) {
            return Err(Error::param("preprocess sigma must be >= 0"));
        }
        if self.iterations == 0 {
            return Err(Error::param("at least one iteration is required"));
        }
        if self.jobs == Some(0) {
            return Err(Error::param("jobs must be >= 1"));
        }
        if let SegmenterKind::Blur { sigma } = self.segmenter {
            if !(sigma >= 0.0) {
                return Err(Error::param("segmenter sigma must be >= 0"));
            }
        }
        Ok(())
    }

    /// Delta in effect at `iteration`.
    pub fn delta_at(&self, iteration: usize) -> f64 {
        self.delta_schedule
            .iter()
            .filter(|(from, _)| *from <= iteration)
            .max_by_key(|(from, _)| *from)
            .map_or(self.delta, |&(_, d)| d)
    }
}

fn check_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("split ratios must be >= 0 and sum to 1, got {r:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset splitting and tau selection

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then validation and test sizes rounded to nearest; the
/// training set takes the rest.
pub fn split_dataset(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<Split> {
    check_ratios(&ratios)?;
    let n = ids.len();
    if n < 3 {
        return Err(Error::param(format!("need at least 3 images to split, got {n}")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng(seed));
    let nv = (n as f64 * ratios[1]).round() as usize;
    let nt = (n as f64 * ratios[2]).round() as usize;
    if nv + nt > n {
        return Err(Error::param("split ratios leave no room for training images"));
    }
    let test = shuffled.split_off(n - nt);
    let validation = shuffled.split_off(n - nt - nv);
    Ok(Split {
        train: shuffled,
        validation,
        test,
    })
}

/// Per-image tau: the `floor(low_fraction * n)` images with the smallest
/// total intensity (ties by position) get `tau_low`, the rest `tau_high`.
pub fn select_tau(totals: &[f64], low_fraction: f64, tau_low: f64, tau_high: f64) -> Result<Vec<f64>> {
    unit("lowFraction", low_fraction)?;
    let n = totals.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| totals[a].total_cmp(&totals[b]).then(a.cmp(&b)));
    let k = (low_fraction * n as f64).floor() as usize;
    let mut out = vec![tau_high; n];
    for &i in &idx[..k] {
        out[i] = tau_low;
    }
    Ok(out)
}

pub fn select_tau_for(fields: &[&DensityField], low_fraction: f64, tau_low: f64, tau_high: f64) -> Result<Vec<f64>> {
    let totals: Vec<f64> = fields.iter().map(|f| f.total_intensity()).collect();
    select_tau(&totals, low_fraction, tau_low, tau_high)
}

// ---------------------------------------------------------------------------
// Labels

/// Ridge graph of `field` after optional tip enhancement and arc filtering.
pub fn label_graph(
    field: &DensityField,
    delta: f64,
    tau: Option<f64>,
    tips: Option<&TipSettings>,
) -> Result<GeoGraph> {
    let enhanced;
    let f = match tips {
        Some(t) => {
            let found = detect_tips(field, t.params)?;
            enhanced = compose(field, &[tip_layer(field, &found, t.radius)?])?;
            &enhanced
        }
        None => field,
    };
    let g = reconstruct(f, delta)?.graph;
    match tau {
        Some(tau) => filter_arcs(&g, f, tau),
        None => Ok(g),
    }
}

/// Label mask: the arc-filtered ridge graph thickened to road width.
pub fn make_labels(field: &DensityField, delta: f64, tau: f64, half_width: f64) -> Result<BinaryMask> {
    let g = label_graph(field, delta, Some(tau), None)?;
    rasterize(&g, half_width, field.width(), field.height())
}

/// True when the training fields barely moved or the budget is spent.
pub fn stop_check(previous: &[&DensityField], current: &[&DensityField], epsilon: f64, budget_left: usize) -> Result<bool> {
    if budget_left == 0 {
        return Ok(true);
    }
    Ok(mean_change(previous, current)? < epsilon)
}

/// Mean per-pixel absolute difference over a set of fields.
pub fn mean_change(previous: &[&DensityField], current: &[&DensityField]) -> Result<f64> {
    if previous.len() != current.len() {
        return Err(Error::param("field sets differ in size"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in previous.iter().zip(current) {
        sum += a.mean_abs_diff(b)? * a.len() as f64;
        n += a.len();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    images: BTreeMap<String, PathBuf>,
    references: BTreeMap<String, GeoGraph>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut images = BTreeMap::new();
        let dir = root.join("images");
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !matches!(ext, "ppm" | "pgm" | "pnm" | "f32grid") {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(Error::format(format!("bad image name {}", path.display())));
            }
            if images.insert(id.clone(), path).is_some() {
                return Err(Error::format(format!("image id {id} appears twice")));
            }
        }
        if images.is_empty() {
            return Err(Error::format(format!("no images in {}", dir.display())));
        }
        let mut references = BTreeMap::new();
        let gdir = root.join("graphs");
        if gdir.is_dir() {
            for id in images.keys() {
                let p = gdir.join(format!("{id}.graph"));
                if p.is_file() {
                    references.insert(id.clone(), read_graph(&p)?);
                }
            }
        }
        Ok(Dataset {
            root,
            images,
            references,
        })
    }

    /// Writes samples in dataset layout.
    pub fn write(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
        let root = root.as_ref();
        for sub in ["images", "graphs"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for s in samples {
            save_ppm(&s.image, root.join("images").join(format!("{}.ppm", s.id)))?;
            write_graph(&s.graph, root.join("graphs").join(format!("{}.graph", s.id)))?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.keys().cloned().collect()
    }

    pub fn image_path(&self, id: &str) -> &Path {
        &self.images[id]
    }

    pub fn reference(&self, id: &str) -> Option<&GeoGraph> {
        self.references.get(id)
    }
}

// ---------------------------------------------------------------------------
// Segmenters

pub trait Segmenter: Send + Sync {
    /// Reads `images/` and `labels/` inside `workdir`.
    fn train(&self, workdir: &Path) -> Result<()>;
    /// Writes `segmented/<id>.f32grid` for every image in `workdir/images`.
    fn predict(&self, workdir: &Path) -> Result<()>;
}

/// Blurred grayscale of each image; labels are ignored.
#[derive(Clone, Copy, Debug)]
pub struct BlurSegmenter {
    pub sigma: f64,
}

fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(id) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((id.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

impl Segmenter for BlurSegmenter {
    fn train(&self, workdir: &Path) -> Result<()> {
        let labels = workdir.join("labels");
        if !labels.is_dir() {
            return Err(Error::Segmenter {
                stage: "train".into(),
                message: format!("{} is missing", labels.display()),
            });
        }
        Ok(())
    }

    fn predict(&self, workdir: &Path) -> Result<()> {
        let out = workdir.join("segmented");
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        image_files(&workdir.join("images"))?
            .par_iter()
            .try_for_each(|(id, path)| {
                let f = preprocess(&load_rgb(path)?, self.sigma)?;
                save_f32_grid(&f, out.join(format!("{id}.f32grid")))
            })
    }
}

/// Runs an external program under the workdir protocol.
#[derive(Clone, Debug)]
pub struct CommandSegmenter {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl CommandSegmenter {
    fn run(&self, stage: &str, workdir: &Path) -> Result<()> {
        let seg_err = |message: String| Error::Segmenter {
            stage: stage.to_string(),
            message,
        };
        let log_path = workdir.join(format!("{stage}.log"));
        let log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let log2 = log.try_clone().map_err(|e| Error::io(&log_path, e))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(stage)
            .arg("--workdir")
            .arg(workdir)
            .stdin(Stdio::null())
            .stdout(Stdio::from(log))
            .stderr(Stdio::from(log2))
            .spawn()
            .map_err(|e| seg_err(format!("cannot start {}: {e}", self.program.display())))?;
        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(s)) => break s,
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(seg_err(format!(
                        "timed out after {:?}; log: {}",
                        self.timeout,
                        tail(&log_path)
                    )));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(20)),
                Err(e) => return Err(seg_err(format!("wait failed: {e}"))),
            }
        };
        if !status.success() {
            return Err(seg_err(format!("exited with {status}; log: {}", tail(&log_path))));
        }
        Ok(())
    }
}

fn tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(20)..].join("\n")
}

impl Segmenter for CommandSegmenter {
    fn train(&self, workdir: &Path) -> Result<()> {
        self.run("train", workdir)
    }

    fn predict(&self, workdir: &Path) -> Result<()> {
        self.run("predict", workdir)
    }
}

pub fn segmenter_from_kind(kind: &SegmenterKind) -> Box<dyn Segmenter> {
    match kind {
        SegmenterKind::Blur { sigma } => Box::new(BlurSegmenter { sigma: *sigma }),
        SegmenterKind::Command {
            program,
            args,
            timeout,
        } => Box::new(CommandSegmenter {
            program: program.clone(),
            args: args.clone(),
            timeout: *timeout,
        }),
    }
}

// ---------------------------------------------------------------------------
// State

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    GroundTruth,
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub apls: f64,
    pub avg_hausdorff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineState {
    pub iteration: usize,
    /// Current segmented training fields.
    pub train: BTreeMap<String, DensityField>,
    pub test: BTreeMap<String, DensityField>,
    /// Masks the segmenter was trained on to produce these fields.
    pub masks: BTreeMap<String, (BinaryMask, LabelSource)>,
    /// Test reconstructions.
    pub graphs: BTreeMap<String, GeoGraph>,
    pub scores: BTreeMap<String, ImageScore>,
    /// Mean absolute change of the training fields in this iteration.
    pub change: Option<f64>,
}

impl PipelineState {
    /// Mean APLS over scored test images.
    pub fn mean_apls(&self) -> Option<f64> {
        mean(self.scores.values().map(|s| s.apls))
    }

    pub fn mean_hausdorff(&self) -> Option<f64> {
        mean(self.scores.values().map(|s| s.avg_hausdorff))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn iter_name(i: usize) -> String {
    format!("iter_{i:04}")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

// ---------------------------------------------------------------------------
// Driver

pub struct Pipeline {
    config: PipelineConfig,
    dataset: Dataset,
    state_dir: PathBuf,
    segmenter: Box<dyn Segmenter>,
    split: Split,
    /// Training images that keep ground-truth labels.
    labeled: BTreeSet<String>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        dataset: Dataset,
        state_dir: impl AsRef<Path>,
        segmenter: Box<dyn Segmenter>,
    ) -> Result<Self> {
        config.validate()?;
        let split = split_dataset(&dataset.ids(), config.ratios, config.seed)?;
        let labeled: BTreeSet<String> = match config.mode {
            Mode::LabelFree => BTreeSet::new(),
            Mode::Semi => split.train.iter().cloned().collect(),
            Mode::Partial => {
                let k = (config.labeled_fraction * split.train.len() as f64).round() as usize;
                let mut ids = split.train.clone();
                ids.shuffle(&mut rng(config.seed ^ 0x9e37_79b9_7f4a_7c15));
                ids.truncate(k);
                ids.into_iter().collect()
            }
        };
        if let Some(id) = labeled.iter().find(|id| dataset.reference(id).is_none()) {
            return Err(Error::param(format!("image {id} needs a reference graph for its labels")));
        }
        Ok(Pipeline {
            config,
            dataset,
            state_dir: state_dir.as_ref().to_path_buf(),
            segmenter,
            split,
            labeled,
        })
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn labeled(&self) -> &BTreeSet<String> {
        &self.labeled
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.config.jobs {
            b = b.num_threads(j);
        }
        b.build().map_err(|e| Error::param(format!("thread pool: {e}")))
    }

    fn fingerprint(&self) -> String {
        let mut s = format!("{:#?}\n", self.config);
        for (set, ids) in [("train", &self.split.train), ("validation", &self.split.validation), ("test", &self.split.test)] {
            for id in ids {
                let _ = writeln!(s, "{id}\t{set}\t{}", self.labeled.contains(id) as u8);
            }
        }
        s
    }

    /// Latest complete state, creating iteration 0 on first use.
    pub fn init(&self) -> Result<PipelineState> {
        mkdir(&self.state_dir)?;
        let fp_path = self.state_dir.join("run.txt");
        let fp = self.fingerprint();
        if fp_path.exists() {
            if read_text(&fp_path)? != fp {
                return Err(Error::param(format!(
                    "{} belongs to a run with a different configuration or dataset",
                    self.state_dir.display()
                )));
            }
        } else {
            write_text(&fp_path, &fp)?;
        }
        // leftovers of interrupted iterations
        for entry in fs::read_dir(&self.state_dir).map_err(|e| Error::io(&self.state_dir, e))? {
            let p = entry.map_err(|e| Error::io(&self.state_dir, e))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with(".tmp_") || name == "work" {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        if let Some(i) = self.latest_iteration()? {
            return self.load(i);
        }
        let pool = self.pool()?;
        let sigma = self.config.preprocess_sigma;
        let load = |ids: &[String]| -> Result<BTreeMap<String, DensityField>> {
            pool.install(|| {
                ids.par_iter()
                    .map(|id| Ok((id.clone(), preprocess(&load_rgb(self.dataset.image_path(id))?, sigma)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .map(|v| v.into_iter().collect())
        };
        let state = PipelineState {
            iteration: 0,
            train: load(&self.split.train)?,
            test: load(&self.split.test)?,
            masks: BTreeMap::new(),
            graphs: BTreeMap::new(),
            scores: BTreeMap::new(),
            change: None,
        };
        self.persist(&state)?;
        Ok(state)
    }

    pub fn latest_iteration(&self) -> Result<Option<usize>> {
        let mut best = None;
        if !self.state_dir.is_dir() {
            return Ok(None);
        }
        for entry in fs::read_dir(&self.state_dir).map_err(|e| Error::io(&self.state_dir, e))? {
            let p = entry.map_err(|e| Error::io(&self.state_dir, e))?.path();
            if let Some(i) = p
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("iter_"))
                .and_then(|n| n.parse::<usize>().ok())
            {
                best = best.max(Some(i));
            }
        }
        Ok(best)
    }

    pub fn iteration_dir(&self, i: usize) -> PathBuf {
        self.state_dir.join(iter_name(i))
    }

    /// Iterates from the latest complete state until the stop rule fires.
    pub fn run(&self) -> Result<PipelineState> {
        self.run_with(|_| {})
    }

    /// Like [`Pipeline::run`], calling `report` with the starting state and
    /// after every finished iteration.
    pub fn run_with(&self, mut report: impl FnMut(&PipelineState)) -> Result<PipelineState> {
        let mut state = self.init()?;
        report(&state);
        while state.iteration < self.config.iterations {
            let next = self.run_iteration(&state)?;
            let left = self.config.iterations - next.iteration;
            let prev: Vec<&DensityField> = state.train.values().collect();
            let cur: Vec<&DensityField> = next.train.values().collect();
            let stop = stop_check(&prev, &cur, self.config.epsilon, left)?;
            state = next;
            report(&state);
            if stop {
                break;
            }
        }
        Ok(state)
    }

    fn labels_for(&self, state: &PipelineState) -> Result<BTreeMap<String, (BinaryMask, LabelSource)>> {
        let i = state.iteration;
        let cfg = &self.config;
        let delta = cfg.delta_at(i);
        let arcs = i >= cfg.arc_filter_from;
        let tips = (i >= cfg.tips.from_iteration).then_some(&cfg.tips);
        let ids: Vec<&String> = state.train.keys().collect();
        let fields: Vec<&DensityField> = state.train.values().collect();
        let taus = select_tau_for(&fields, cfg.low_fraction, cfg.tau_low, cfg.tau_high)?;
        let first_partial = cfg.mode == Mode::Partial && i == 0;
        let out: Vec<Option<(String, (BinaryMask, LabelSource))>> = ids
            .par_iter()
            .zip(taus.par_iter())
            .map(|(id, &tau)| {
                let field = &state.train[*id];
                let (w, h) = (field.width(), field.height());
                if self.labeled.contains(*id) {
                    let g = self.dataset.reference(id).expect("checked in new");
                    let m = rasterize(g, cfg.mask_half_width, w, h)?;
                    return Ok(Some(((*id).clone(), (m, LabelSource::GroundTruth))));
                }
                if first_partial {
                    return Ok(None);
                }
                let g = label_graph(field, delta, arcs.then_some(tau), tips)?;
                let m = rasterize(&g, cfg.mask_half_width, w, h)?;
                Ok(Some(((*id).clone(), (m, LabelSource::Reconstruction))))
            })
            .collect::<Result<_>>()?;
        Ok(out.into_iter().flatten().collect())
    }

    fn prepare_workdir(&self, work: &Path, masks: &BTreeMap<String, (BinaryMask, LabelSource)>) -> Result<()> {
        if work.exists() {
            fs::remove_dir_all(work).map_err(|e| Error::io(work, e))?;
        }
        let (images, labels) = (work.join("images"), work.join("labels"));
        mkdir(&images)?;
        mkdir(&labels)?;
        for id in self.split.train.iter().chain(&self.split.test) {
            let src = self.dataset.image_path(id);
            let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("ppm");
            let dst = images.join(format!("{id}.{ext}"));
            fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
        }
        for (id, (m, _)) in masks {
            m.save(labels.join(format!("{id}.mask.pgm")))?;
        }
        Ok(())
    }

    fn collect_predictions(&self, work: &Path, state: &PipelineState) -> Result<(BTreeMap<String, DensityField>, BTreeMap<String, DensityField>)> {
        let seg = work.join("segmented");
        let read = |ids: &[String], old: &BTreeMap<String, DensityField>| -> Result<BTreeMap<String, DensityField>> {
            ids.par_iter()
                .map(|id| {
                    let p = seg.join(format!("{id}.f32grid"));
                    if !p.is_file() {
                        return Err(Error::Segmenter {
                            stage: "predict".into(),
                            message: format!("no output for image {id}"),
                        });
                    }
                    let f = load_density(&p).map_err(|e| Error::Segmenter {
                        stage: "predict".into(),
                        message: format!("unreadable output for {id}: {e}"),
                    })?;
                    if !f.same_dims(&old[id]) {
                        return Err(Error::Segmenter {
                            stage: "predict".into(),
                            message: format!("output for {id} has the wrong size"),
                        });
                    }
                    Ok((id.clone(), f))
                })
                .collect::<Result<Vec<_>>>()
                .map(|v| v.into_iter().collect())
        };
        Ok((read(&self.split.train, &state.train)?, read(&self.split.test, &state.test)?))
    }

    /// Reconstructs the test fields (always with tips and arc filtering)
    /// and scores them where references exist.
    pub fn evaluate(
        &self,
        test: &BTreeMap<String, DensityField>,
        iteration: usize,
    ) -> Result<(BTreeMap<String, GeoGraph>, BTreeMap<String, ImageScore>)> {
        let cfg = &self.config;
        let delta = cfg.delta_at(iteration);
        let fields: Vec<&DensityField> = test.values().collect();
        let taus = select_tau_for(&fields, cfg.low_fraction, cfg.tau_low, cfg.tau_high)?;
        let ids: Vec<&String> = test.keys().collect();
        let out: Vec<(String, GeoGraph, Option<ImageScore>)> = ids
            .par_iter()
            .zip(taus.par_iter())
            .map(|(id, &tau)| {
                let g = label_graph(&test[*id], delta, Some(tau), Some(&cfg.tips))?;
                let score = match self.dataset.reference(id) {
                    Some(r) => Some(ImageScore {
                        apls: apls(r, &g, &AplsOptions::default())?.apls,
                        avg_hausdorff: avg_hausdorff(r, &g, DEFAULT_SAMPLE_STEP, DEFAULT_MAX)?,
                    }),
                    None => None,
                };
                Ok(((*id).clone(), g, score))
            })
            .collect::<Result<_>>()?;
        let mut graphs = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for (id, g, s) in out {
            if let Some(s) = s {
                scores.insert(id.clone(), s);
            }
            graphs.insert(id, g);
        }
        Ok((graphs, scores))
    }

    /// One round: labels from the current fields, train, predict, score,
    /// persist. Failures leave the state directory untouched apart from the
    /// scratch workdir.
    pub fn run_iteration(&self, state: &PipelineState) -> Result<PipelineState> {
        let pool = self.pool()?;
        pool.install(|| {
            let masks = self.labels_for(state)?;
            let work = self.state_dir.join("work");
            self.prepare_workdir(&work, &masks)?;
            self.segmenter.train(&work)?;
            self.segmenter.predict(&work)?;
            let (train, test) = self.collect_predictions(&work, state)?;
            let (graphs, scores) = self.evaluate(&test, state.iteration + 1)?;
            let prev: Vec<&DensityField> = state.train.values().collect();
            let cur: Vec<&DensityField> = train.values().collect();
            let change = Some(mean_change(&prev, &cur)?);
            let next = PipelineState {
                iteration: state.iteration + 1,
                train,
                test,
                masks,
                graphs,
                scores,
                change,
            };
            self.persist(&next)?;
            fs::remove_dir_all(&work).map_err(|e| Error::io(&work, e))?;
            Ok(next)
        })
    }

    fn persist(&self, s: &PipelineState) -> Result<()> {
        let name = iter_name(s.iteration);
        let tmp = self.state_dir.join(format!(".tmp_{name}"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        for sub in ["train", "test", "masks", "graphs"] {
            mkdir(&tmp.join(sub))?;
        }
        for (id, f) in &s.train {
            save_f32_grid(f, tmp.join("train").join(format!("{id}.f32grid")))?;
        }
        for (id, f) in &s.test {
            save_f32_grid(f, tmp.join("test").join(format!("{id}.f32grid")))?;
        }
        let mut manifest = String::from("id\tset\tlabel\tvertices\tedges\n");
        for (id, (m, src)) in &s.masks {
            m.save(tmp.join("masks").join(format!("{id}.mask.pgm")))?;
            let src = match src {
                LabelSource::GroundTruth => "truth",
                LabelSource::Reconstruction => "morse",
            };
            let _ = writeln!(manifest, "{id}\ttrain\t{src}\t-\t-");
        }
        for (id, g) in &s.graphs {
            write_graph(g, tmp.join("graphs").join(format!("{id}.graph")))?;
            let _ = writeln!(manifest, "{id}\ttest\t-\t{}\t{}", g.vertex_count(), g.edge_count());
        }
        write_text(&tmp.join("manifest.tsv"), &manifest)?;
        let mut scores = String::from("id\tapls\tsh\n");
        for (id, sc) in &s.scores {
            let _ = writeln!(scores, "{id}\t{:?}\t{:?}", sc.apls, sc.avg_hausdorff);
        }
        if let (Some(a), Some(h)) = (s.mean_apls(), s.mean_hausdorff()) {
            let _ = writeln!(scores, "mean\t{a:?}\t{h:?}");
        }
        if let Some(c) = s.change {
            let _ = writeln!(scores, "change\t{c:?}\t-");
        }
        write_text(&tmp.join("scores.tsv"), &scores)?;
        let dst = self.iteration_dir(s.iteration);
        fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }

    /// Reads a persisted iteration back.
    pub fn load(&self, i: usize) -> Result<PipelineState> {
        let dir = self.iteration_dir(i);
        let fields = |sub: &str, ids: &[String]| -> Result<BTreeMap<String, DensityField>> {
            ids.iter()
                .map(|id| Ok((id.clone(), load_density(dir.join(sub).join(format!("{id}.f32grid")))?)))
                .collect()
        };
        let train = fields("train", &self.split.train)?;
        let test = fields("test", &self.split.test)?;
        let mut masks = BTreeMap::new();
        let mut graphs = BTreeMap::new();
        let mut scores = BTreeMap::new();
        let mut change = None;
        for line in read_text(&dir.join("manifest.tsv"))?.lines().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                [id, "train", src, ..] => {
                    let m = BinaryMask::load(dir.join("masks").join(format!("{id}.mask.pgm")))?;
                    let src = if *src == "truth" { LabelSource::GroundTruth } else { LabelSource::Reconstruction };
                    masks.insert(id.to_string(), (m, src));
                }
                [id, "test", ..] => {
                    graphs.insert(id.to_string(), read_graph(dir.join("graphs").join(format!("{id}.graph")))?);
                }
                _ => return Err(Error::format(format!("bad manifest line {line:?}"))),
            }
        }
        for line in read_text(&dir.join("scores.tsv"))?.lines().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(format!("bad score line {line:?}")));
            match cols.as_slice() {
                ["mean", ..] => {}
                ["change", c, _] => change = Some(num(c)?),
                [id, a, h] => {
                    scores.insert(id.to_string(), ImageScore { apls: num(a)?, avg_hausdorff: num(h)? });
                }
                _ => return Err(Error::format(format!("bad score line {line:?}"))),
            }
        }
        Ok(PipelineState {
            iteration: i,
            train,
            test,
            masks,
            graphs,
            scores,
            change,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("im{i}")).collect()
    }

    const R: [f64; 3] = [4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];

    #[test]
    fn split_sizes() {
        let s = split_dataset(&ids(989), R, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (659, 165, 165));
        let s = split_dataset(&ids(6), R, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (4, 1, 1));
        assert_eq!(split_dataset(&ids(50), R, 7).unwrap(), split_dataset(&ids(50), R, 7).unwrap());
        assert_ne!(split_dataset(&ids(50), R, 7).unwrap(), split_dataset(&ids(50), R, 8).unwrap());
        assert!(split_dataset(&ids(2), R, 1).is_err());
        assert!(split_dataset(&ids(9), [0.5, 0.5, 0.5], 1).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let s = split_dataset(&ids(31), R, 3).unwrap();
        let mut all: Vec<String> = s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect();
        all.sort();
        let mut expected = ids(31);
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn tau_selection() {
        let totals: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64).collect();
        let t = select_tau(&totals, 0.4, 0.3, 0.4).unwrap();
        assert_eq!(t.iter().filter(|&&x| x == 0.3).count(), 4);
        for (i, &x) in t.iter().enumerate() {
            assert_eq!(x == 0.3, totals[i] < 4.0);
        }
        assert!(select_tau(&totals, 0.0, 0.3, 0.4).unwrap().iter().all(|&x| x == 0.4));
        let t = select_tau(&totals, 0.2, 0.3, 0.4).unwrap();
        assert_eq!(t.iter().filter(|&&x| x == 0.3).count(), 2);
        // ties go to the earlier image
        let t = select_tau(&[1.0, 1.0, 1.0], 0.34, 0.1, 0.9).unwrap();
        assert_eq!(t, vec![0.1, 0.9, 0.9]);
        assert!(select_tau(&totals, 1.5, 0.3, 0.4).is_err());
    }

    #[test]
    fn label_examples() {
        let zero = DensityField::filled(40, 40, 0.0);
        assert_eq!(make_labels(&zero, 0.1, 0.3, 6.5).unwrap().count(), 0);
        // a bright ring is reconstructed and thickened
        let ring = DensityField::from_fn(60, 60, |x, y| {
            let on = (x == 15 || x == 45 || y == 15 || y == 45) && (15..=45).contains(&x) && (15..=45).contains(&y);
            if on { 0.9 } else { 0.0 }
        });
        let m = make_labels(&ring, 0.3, 0.3, 2.0).unwrap();
        assert!(m.get(30, 15) && m.get(30, 13) && !m.get(30, 12) && !m.get(30, 30));
        assert_eq!(make_labels(&ring, 1.0, 0.3, 2.0).unwrap().count(), 0);
    }

    #[test]
    fn stop_rule() {
        let a = DensityField::filled(4, 4, 0.3);
        let b = DensityField::from_fn(4, 4, |x, y| ((x * 5 + y * 11) % 7) as f32 / 7.0);
        assert!(stop_check(&[&a], &[&a], DEFAULT_EPSILON, 5).unwrap());
        assert!(!stop_check(&[&a], &[&b], DEFAULT_EPSILON, 5).unwrap());
        assert!(stop_check(&[&a], &[&b], DEFAULT_EPSILON, 0).unwrap());
    }

    #[test]
    fn independent_uniform_fields_keep_going() {
        use rand::Rng;
        let mut r = rng(11);
        let mut f = || DensityField::from_fn(64, 64, |_, _| r.gen::<f32>());
        let (a, b) = (f(), f());
        let c = mean_change(&[&a], &[&b]).unwrap();
        assert!((c - 1.0 / 3.0).abs() < 0.02);
        assert!(!stop_check(&[&a], &[&b], DEFAULT_EPSILON, 3).unwrap());
    }

    #[test]
    fn presets_and_schedule() {
        assert_eq!(preset("aoi2").unwrap().delta, 0.12);
        assert_eq!(preset("AOI4").unwrap().low_fraction, 0.4);
        assert_eq!(preset("aoi5").unwrap().tau_high, 0.3);
        assert!(preset("vegas").is_err());
        let mut c = PipelineConfig::default();
        c.delta_schedule = vec![(8, 0.05)];
        assert_eq!(c.delta_at(7), 0.12);
        assert_eq!(c.delta_at(8), 0.05);
        assert!("partial".parse::<Mode>().is_ok() && "x".parse::<Mode>().is_err());
    }
}
