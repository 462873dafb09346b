use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dmroad::enhance::{detect_tips, enhance_tips, TipParams, DEFAULT_RADIUS, DEFAULT_T_HIGH, DEFAULT_T_LOW, DEFAULT_WINDOW};
use dmroad::metrics::{apls, avg_hausdorff, AplsOptions, Directional};
use dmroad::netgraph::{decompose_arcs, rasterize, read_graph, simplify_chains, write_graph};
use dmroad::pipeline::{
    self, label_graph, preset, BlurSegmenter, Dataset, Mode, Pipeline, PipelineConfig, SegmenterKind, Segmenter,
    TipSettings, PRESET_WARNING,
};
use dmroad::raster::{gaussian_blur, load_density, save_density};
use dmroad::render::{save_svg, RenderOptions};
use dmroad::synth::corpus;
use dmroad::topology::compute_persistence;
use dmroad::{DensityField, Error, GeoGraph};

/// Road-network graphs from density rasters.
#[derive(Parser, Debug)]
#[command(name = "dmroad", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Extract the ridge graph of a density raster.
    Reconstruct(ReconstructArgs),
    /// Compare a proposed graph with a reference graph.
    Score(ScoreArgs),
    /// Thicken a graph into a binary mask.
    Rasterize(RasterizeArgs),
    /// Detect dead-end tips and brighten them.
    Enhance(EnhanceArgs),
    /// Run the iterative self-labelling loop.
    Pipeline(PipelineArgs),
    /// Draw graphs over a raster as SVG.
    Render(RenderArgs),
    /// Built-in blur segmenter speaking the workdir protocol.
    SegmentBaseline(BaselineArgs),
    /// Write a synthetic dataset of street-lattice images with reference graphs.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TipArgs {
    /// Tip detection window side in pixels (odd).
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Minimum density of a tip pixel.
    #[arg(long, default_value_t = DEFAULT_T_HIGH)]
    t_high: f32,
    /// Minimum density of a window-border pixel counted as a road crossing.
    #[arg(long, default_value_t = DEFAULT_T_LOW)]
    t_low: f32,
    /// Radius of the brightened disc around each tip.
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    radius: f64,
}

impl TipArgs {
    fn params(&self) -> TipParams {
        TipParams {
            window: self.window,
            t_high: self.t_high,
            t_low: self.t_low,
        }
    }
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// Density raster (PGM, PPM or .f32grid).
    input: PathBuf,
    /// Persistence threshold, in [0, 1] [default: 0.12].
    #[arg(long)]
    delta: Option<f64>,
    /// Drop arcs whose mean density is below this [default: no filtering].
    #[arg(long)]
    tau: Option<f64>,
    /// Parameter preset (aoi2, aoi3, aoi4, aoi5); explicit flags override it [default: none].
    #[arg(long)]
    preset: Option<String>,
    /// Enhance dead-end tips before reconstruction [default: off].
    #[arg(long, default_value_t = false)]
    tips: bool,
    #[command(flatten)]
    tip: TipArgs,
    /// Gaussian blur applied to the input first (0 = none).
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Douglas-Peucker tolerance for simplifying the output (0 = none).
    #[arg(long, default_value_t = 0.0)]
    simplify: f64,
    /// Also write the persistence diagram here [default: none].
    #[arg(long)]
    diagram: Option<PathBuf>,
    /// Output graph file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Reference graph.
    gt: PathBuf,
    /// Proposed graph.
    pred: PathBuf,
    /// Hausdorff value for unmatched points.
    #[arg(long, default_value_t = dmroad::metrics::DEFAULT_MAX)]
    max: f64,
    /// Distance between Hausdorff sample points along edges.
    #[arg(long, default_value_t = dmroad::metrics::DEFAULT_SAMPLE_STEP)]
    sample_step: f64,
    /// Insert APLS control nodes this far apart [default: none].
    #[arg(long)]
    densify: Option<f64>,
    /// Snaps farther than this count as missing paths [default: unlimited].
    #[arg(long)]
    max_snap: Option<f64>,
    /// Also print every APLS node pair [default: off].
    #[arg(long, default_value_t = false)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct RasterizeArgs {
    graph: PathBuf,
    /// Mask width in pixels.
    #[arg(long)]
    width: usize,
    /// Mask height in pixels.
    #[arg(long)]
    height: usize,
    /// Pixels within this distance of an edge are set.
    #[arg(long, default_value_t = pipeline::DEFAULT_HALF_WIDTH)]
    half_width: f64,
    /// Output PGM mask.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    input: PathBuf,
    #[command(flatten)]
    tip: TipArgs,
    /// Enhanced field (.f32grid or 8-bit PGM by extension).
    #[arg(long)]
    out: PathBuf,
    /// Also write the tip list, one "x y" line per tip [default: none].
    #[arg(long)]
    tips_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Semi,
    LabelFree,
    Partial,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Dataset with images/<id>.ppm and optional graphs/<id>.graph.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding one subdirectory per finished iteration; reruns resume.
    #[arg(long)]
    state: PathBuf,
    /// Where training labels come from.
    #[arg(long, value_enum, default_value_t = ModeArg::LabelFree)]
    mode: ModeArg,
    /// Iteration budget.
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    /// Parameter preset (aoi2, aoi3, aoi4, aoi5); explicit flags override it [default: none].
    #[arg(long)]
    preset: Option<String>,
    /// Persistence threshold [default: 0.12].
    #[arg(long)]
    delta: Option<f64>,
    /// Later deltas as ITER:DELTA, e.g. 8:0.05 (repeatable) [default: none].
    #[arg(long = "delta-from", value_parser = parse_schedule)]
    delta_schedule: Vec<(usize, f64)>,
    /// Arc threshold for most images [default: 0.4].
    #[arg(long)]
    tau_high: Option<f64>,
    /// Arc threshold for the dimmest images [default: 0.4].
    #[arg(long)]
    tau_low: Option<f64>,
    /// Share of images, by total intensity, that get tau-low [default: 0].
    #[arg(long)]
    low_fraction: Option<f64>,
    /// Share of training images with ground-truth labels in partial mode.
    #[arg(long, default_value_t = 0.1)]
    labeled_fraction: f64,
    /// Label mask half width in pixels.
    #[arg(long, default_value_t = pipeline::DEFAULT_HALF_WIDTH)]
    half_width: f64,
    /// First iteration whose labels use tip enhancement.
    #[arg(long, default_value_t = 4)]
    tips_from: usize,
    /// First iteration whose labels are arc-filtered.
    #[arg(long, default_value_t = 3)]
    arcs_from: usize,
    #[command(flatten)]
    tip: TipArgs,
    /// Train:validation:test ratio.
    #[arg(long, default_value = "4:1:1", value_parser = parse_ratios)]
    ratios: [f64; 3],
    /// Stop once the mean change of the training fields drops below this.
    #[arg(long, default_value_t = pipeline::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Blur turning raw images into the initial fields.
    #[arg(long, default_value_t = pipeline::DEFAULT_SIGMA)]
    preprocess_sigma: f64,
    /// External segmenter program [default: built-in blur baseline].
    #[arg(long)]
    segmenter: Option<PathBuf>,
    /// Extra argument placed before the mode (repeatable) [default: none].
    #[arg(long = "segmenter-arg", allow_hyphen_values = true)]
    segmenter_args: Vec<String>,
    /// Seconds allowed per segmenter call.
    #[arg(long, default_value_t = 86400)]
    timeout: u64,
    /// Blur of the built-in segmenter.
    #[arg(long, default_value_t = pipeline::DEFAULT_SIGMA)]
    sigma: f64,
    /// Seed for the dataset split and the labeled subset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Background raster.
    raster: PathBuf,
    /// Graphs to overlay, drawn in this order.
    graphs: Vec<PathBuf>,
    /// Line width in pixels.
    #[arg(long, default_value_t = 1.5)]
    stroke_width: f64,
    /// Output SVG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    Train,
    Predict,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(value_enum)]
    stage: Stage,
    /// Directory with images/ (and labels/ when training).
    #[arg(long)]
    workdir: PathBuf,
    /// Blur applied to each image.
    #[arg(long, default_value_t = pipeline::DEFAULT_SIGMA)]
    sigma: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of images.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
}

fn parse_schedule(s: &str) -> Result<(usize, f64), String> {
    let (i, d) = s.split_once(':').ok_or("expected ITER:DELTA")?;
    Ok((
        i.parse().map_err(|e| format!("bad iteration: {e}"))?,
        d.parse().map_err(|e| format!("bad delta: {e}"))?,
    ))
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let [a, b, c]: [f64; 3] = parts.try_into().map_err(|_| "expected TRAIN:VAL:TEST")?;
    let sum = a + b + c;
    if !(sum > 0.0) {
        return Err("ratios must have a positive sum".into());
    }
    Ok([a / sum, b / sum, c / sum])
}

fn warn_preset(name: &str) -> dmroad::Result<pipeline::Preset> {
    let p = preset(name)?;
    eprintln!("warning: {PRESET_WARNING}");
    Ok(p)
}

fn reconstruct(a: ReconstructArgs) -> dmroad::Result<()> {
    let (mut delta, mut tau) = (PipelineConfig::default().delta, None);
    if let Some(name) = &a.preset {
        let p = warn_preset(name)?;
        delta = p.delta;
        tau = Some(p.tau_high);
    }
    let delta = a.delta.unwrap_or(delta);
    let tau = a.tau.or(tau);
    let mut field = load_density(&a.input)?;
    if a.sigma > 0.0 {
        field = gaussian_blur(&field, a.sigma)?;
    }
    let tips = a.tips.then(|| TipSettings {
        params: a.tip.params(),
        radius: a.tip.radius,
        from_iteration: 0,
    });
    let mut g = label_graph(&field, delta, tau, tips.as_ref())?;
    if let Some(p) = &a.diagram {
        std::fs::write(p, compute_persistence(&field).diagram_lines()).map_err(|e| io_err(p, e))?;
    }
    let arcs = decompose_arcs(&g, &field)?.len();
    if a.simplify > 0.0 {
        g = simplify_chains(&g, a.simplify)?;
    }
    write_graph(&g, &a.out)?;
    println!("vertices\t{}\tedges\t{}\tarcs\t{}", g.vertex_count(), g.edge_count(), arcs);
    Ok(())
}

fn io_err(p: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn dump_pairs(label: &str, d: &Directional) {
    for p in &d.costs {
        let snapped = p.snapped_length.map_or("-".to_string(), |l| format!("{l:?}"));
        println!("pair\t{label}\t{}\t{}\t{:?}\t{snapped}\t{:?}", p.a, p.b, p.length, p.cost);
    }
}

fn score(a: ScoreArgs) -> dmroad::Result<()> {
    let gt = read_graph(&a.gt)?;
    let pred = read_graph(&a.pred)?;
    let opts = AplsOptions {
        densify_step: a.densify,
        max_snap: a.max_snap.unwrap_or(f64::INFINITY),
        keep_pairs: a.verbose,
    };
    let r = apls(&gt, &pred, &opts)?;
    let sh = avg_hausdorff(&gt, &pred, a.sample_step, a.max)?;
    println!("APLS\t{:?}\tSH\t{sh:?}", r.apls);
    if a.verbose {
        println!("direction\tC\tpairs\tmeanSnap\tmaxSnap");
        for (label, d) in [("forward", &r.forward), ("backward", &r.backward)] {
            println!(
                "{label}\t{:?}\t{}\t{:?}\t{:?}",
                d.c, d.pairs, d.mean_snap_distance, d.max_snap_distance
            );
        }
        dump_pairs("forward", &r.forward);
        dump_pairs("backward", &r.backward);
    }
    Ok(())
}

fn rasterize_cmd(a: RasterizeArgs) -> dmroad::Result<()> {
    let g = read_graph(&a.graph)?;
    let m = rasterize(&g, a.half_width, a.width, a.height)?;
    m.save(&a.out)?;
    println!("pixels\t{}", m.count());
    Ok(())
}

fn enhance(a: EnhanceArgs) -> dmroad::Result<()> {
    let field = load_density(&a.input)?;
    let tips = detect_tips(&field, a.tip.params())?;
    let out = enhance_tips(&field, &tips, a.tip.radius)?;
    save_density(&out, &a.out)?;
    if let Some(p) = &a.tips_out {
        std::fs::write(p, tips.to_lines()).map_err(|e| io_err(p, e))?;
    }
    println!("tips\t{}", tips.len());
    Ok(())
}

fn run_pipeline(a: PipelineArgs) -> dmroad::Result<()> {
    let mut cfg = PipelineConfig::default();
    if let Some(name) = &a.preset {
        cfg.apply_preset(&warn_preset(name)?);
    }
    cfg.delta = a.delta.unwrap_or(cfg.delta);
    cfg.tau_high = a.tau_high.unwrap_or(cfg.tau_high);
    cfg.tau_low = a.tau_low.unwrap_or(cfg.tau_low);
    cfg.low_fraction = a.low_fraction.unwrap_or(cfg.low_fraction);
    cfg.delta_schedule = a.delta_schedule;
    cfg.mode = match a.mode {
        ModeArg::Semi => Mode::Semi,
        ModeArg::LabelFree => Mode::LabelFree,
        ModeArg::Partial => Mode::Partial,
    };
    cfg.iterations = a.iterations;
    cfg.labeled_fraction = a.labeled_fraction;
    cfg.mask_half_width = a.half_width;
    cfg.tips = TipSettings {
        params: a.tip.params(),
        radius: a.tip.radius,
        from_iteration: a.tips_from,
    };
    cfg.arc_filter_from = a.arcs_from;
    cfg.ratios = a.ratios;
    cfg.epsilon = a.epsilon;
    cfg.preprocess_sigma = a.preprocess_sigma;
    cfg.seed = a.seed;
    cfg.jobs = a.jobs;
    cfg.segmenter = match a.segmenter {
        Some(program) => SegmenterKind::Command {
            program,
            args: a.segmenter_args,
            timeout: Duration::from_secs(a.timeout),
        },
        None => SegmenterKind::Blur { sigma: a.sigma },
    };
    let seg = pipeline::segmenter_from_kind(&cfg.segmenter);
    let p = Pipeline::new(cfg, Dataset::open(&a.dataset)?, &a.state, seg)?;
    let num = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:?}"));
    println!("iteration\tapls\tsh\tchange");
    p.run_with(|s| {
        println!(
            "{}\t{}\t{}\t{}",
            s.iteration,
            num(s.mean_apls()),
            num(s.mean_hausdorff()),
            num(s.change)
        );
    })?;
    Ok(())
}

fn render(a: RenderArgs) -> dmroad::Result<()> {
    let field: DensityField = load_density(&a.raster)?;
    let graphs: Vec<GeoGraph> = a.graphs.iter().map(read_graph).collect::<dmroad::Result<_>>()?;
    let refs: Vec<&GeoGraph> = graphs.iter().collect();
    let opts = RenderOptions {
        stroke_width: a.stroke_width,
        ..RenderOptions::default()
    };
    save_svg(&field, &refs, &opts, &a.out)
}

fn baseline(a: BaselineArgs) -> dmroad::Result<()> {
    let s = BlurSegmenter { sigma: a.sigma };
    match a.stage {
        Stage::Train => s.train(&a.workdir),
        Stage::Predict => s.predict(&a.workdir),
    }
}

fn synth(a: SynthArgs) -> dmroad::Result<()> {
    let samples = corpus(a.count, a.size, a.seed)?;
    Dataset::write(&a.out, &samples)?;
    println!("images\t{}", samples.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Cmd::Reconstruct(a) => reconstruct(a),
        Cmd::Score(a) => score(a),
        Cmd::Rasterize(a) => rasterize_cmd(a),
        Cmd::Enhance(a) => enhance(a),
        Cmd::Pipeline(a) => run_pipeline(a),
        Cmd::Render(a) => render(a),
        Cmd::SegmentBaseline(a) => baseline(a),
        Cmd::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Invariant(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
