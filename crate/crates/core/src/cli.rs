//! `fcdd` command-line entry points.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::datapipe::{
    crop_frame, generate_synthetic, open_manifest, resize_frame, sample_imbalanced, sample_scaled, split_manifest, CropAnchor,
    DatasetManifest, ImageSequence, ImbalanceDesign, Label, ManifestItem, ScaleDesign, Split,
};
use crate::datapipe::subsample_frames;
use crate::eval::{metrics_for, run_ablation, run_experiment, score_split, AblationAxis, AblationBase, ExperimentSetup};
use crate::heatmap::{batch_with_model, global_bounds, render, Bounds, RenderSpec};
use crate::losses::TrainOptions;
use crate::model::{Model, ModelWeights};
use crate::scoring::{read_score_log, score_histogram, write_score_log, ScoreKind, ScoredFrame, Threshold};
use crate::store::{prognostic_compare, RunRecord, RunWriter, Store};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fcdd", version, about = "One-class deterioration detection for railway track imagery")]
pub struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for sampling, splitting and initialisation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract, crop and resize frames into a split manifest.
    Prepare(PrepareArgs),
    /// Generate a synthetic sleeper dataset with defect masks.
    Synth(SynthArgs),
    /// Train, calibrate a threshold and evaluate on the test split.
    Train(TrainArgs),
    /// Evaluate trained weights on a test split.
    Evaluate(ModelArgs),
    /// Train one model per setting along an ablation axis.
    Ablate(AblateArgs),
    /// Render deterioration heatmaps.
    Heatmap(HeatmapArgs),
    /// Write risk-weighted scores and a histogram.
    Score(ScoreArgs),
    /// Compare the latest score of each position bucket with its history.
    Prognose(PrognoseArgs),
    /// Record a scored run in the inspection history.
    History(HistoryArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Directory of extracted normal frames (repeatable).
    #[arg(long)]
    pub normal: Vec<PathBuf>,
    /// Directory of extracted anomalous frames (repeatable).
    #[arg(long)]
    pub anomalous: Vec<PathBuf>,
    /// Keep every n-th frame.
    #[arg(long, default_value_t = 1)]
    pub step: usize,
    /// Crop `ROWSxCOLS` anchored at the bottom centre before resizing.
    #[arg(long)]
    pub crop: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub bottom_margin: u32,
    /// Track positions `START:END` in metres spanned by each sequence.
    #[arg(long)]
    pub positions: Option<String>,
    /// Sample `k×unit` normals against all anomalies.
    #[arg(long, conflicts_with = "scale")]
    pub imbalance: Option<u32>,
    /// Sample `s×unit` normals and `s×unit` anomalies.
    #[arg(long)]
    pub scale: Option<u32>,
    #[arg(long, default_value_t = 800)]
    pub normal_unit: usize,
    #[arg(long, default_value_t = 1000)]
    pub anomalous_unit: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Target directory; defaults to the run directory.
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub normal: Option<usize>,
    #[arg(long)]
    pub anomalous: Option<usize>,
    #[arg(long)]
    pub side: Option<u32>,
    /// Assign track positions this many metres apart.
    #[arg(long)]
    pub spacing: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Split manifest; overrides `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    pub progress: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// A finished training run providing weights, threshold and manifest.
    #[arg(long)]
    pub run: Option<String>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub axis: String,
    /// Comma-separated settings, e.g. `1:1,2:1` or `CNN27,VGG16`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub settings: Vec<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    pub normal_unit: usize,
    /// Fixed anomaly count for the imbalance axis; all anomalies when absent.
    #[arg(long)]
    pub anomalous_count: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub scale_normal_unit: usize,
    #[arg(long, default_value_t = 1000)]
    pub scale_anomalous_unit: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Calibration,
    Test,
    All,
}

impl SplitArg {
    fn select(self, m: &DatasetManifest) -> DatasetManifest {
        let keep = |i: &ManifestItem| match self {
            SplitArg::All => true,
            SplitArg::Train => i.split == Some(Split::Train),
            SplitArg::Calibration => i.split == Some(Split::Calibration),
            SplitArg::Test => i.split == Some(Split::Test),
        };
        DatasetManifest {
            items: m
                .items
                .iter()
                .filter(|i| keep(i))
                .cloned()
                .map(|mut i| {
                    i.split = Some(Split::Test);
                    i
                })
                .collect(),
            ..m.clone()
        }
    }
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Share one display range across all frames of the run.
    #[arg(long)]
    pub global_range: bool,
    /// Also dump raw f32 grids.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Args, Debug)]
pub struct PrognoseArgs {
    /// Report one bucket; every bucket with two or more entries otherwise.
    #[arg(long, allow_hyphen_values = true)]
    pub bucket: Option<i64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub factor: Option<f64>,
}

#[derive(Args, Debug)]
pub struct HistoryArgs {
    /// A finished run holding `scores.csv`.
    #[arg(long)]
    pub run: String,
    /// Inspection date, `YYYY-MM-DD`.
    #[arg(long)]
    pub date: NaiveDate,
}

/// Parse arguments, dispatch, and report errors as one JSON line on stderr.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(record) => {
            println!("{}", record.run_id);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            let _ = writeln!(std::io::stderr(), "{msg}");
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    config: Config,
    store: Store,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = cli.seed {
            config.seed = Some(s);
            config.synth.seed = s;
        }
        if let Some(o) = &cli.out {
            config.out_dir = o.clone();
        }
        config.train = config.effective_train();
        config.seed = None;
        config.validate()?;
        let store = Store::open(&config.out_dir)?;
        Ok(Self { config, store })
    }

    fn begin(&self, command: &str, manifest: Option<&DatasetManifest>, extra: &[u8]) -> Result<RunWriter> {
        let mut c = self.config.clone();
        c.out_dir = PathBuf::from(".");
        let text = c.to_toml()?;
        self.store.begin_run(command, &text, manifest.map(DatasetManifest::digest), extra)
    }

    fn manifest(&self, flag: Option<&PathBuf>) -> Result<DatasetManifest> {
        let p = flag.or(self.config.data.manifest.as_ref()).ok_or_else(|| Error::ConfigField {
            field: "data.manifest".into(),
            reason: "no manifest given; pass --manifest or set data.manifest".into(),
        })?;
        open_manifest(p)
    }
}

fn absolute(p: &std::path::Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::Io { path: p.into(), source: e })
}

/// Manifest bytes with every item path made absolute.
fn pinned_manifest(m: &DatasetManifest) -> Result<Vec<u8>> {
    let mut m = m.clone();
    for i in &mut m.items {
        i.path = absolute(&i.path)?;
        if let Some(mp) = &i.mask_path {
            i.mask_path = Some(absolute(mp)?);
        }
    }
    Ok(m.to_bytes())
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

fn score_log_bytes(scored: &[ScoredFrame]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_score_log(&mut buf, scored)?;
    Ok(buf)
}

pub fn dispatch(cli: &Cli) -> Result<RunRecord> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Prepare(a) => prepare(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Heatmap(a) => heatmap(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::Prognose(a) => prognose(&ctx, a),
        Command::History(a) => history(&ctx, a),
    }
}

fn parse_pair<T: std::str::FromStr>(s: &str, sep: char, what: &str) -> Result<(T, T)> {
    let bad = || Error::ConfigField {
        field: what.into(),
        reason: format!("`{s}` is not of the form A{sep}B"),
    };
    let (a, b) = s.split_once(sep).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn prepare(ctx: &Ctx, a: &PrepareArgs) -> Result<RunRecord> {
    if a.normal.is_empty() || a.anomalous.is_empty() {
        return Err(Error::Precondition("prepare needs at least one --normal and one --anomalous directory".into()));
    }
    let crop = a.crop.as_deref().map(|c| parse_pair::<u32>(c, 'x', "crop")).transpose()?;
    let positions = a.positions.as_deref().map(|p| parse_pair::<f64>(p, ':', "positions")).transpose()?;
    let side = ctx.config.backbone.input_side as u32;
    let mut w = ctx.begin("prepare", None, format!("{a:?}").as_bytes())?;
    let frames_dir = w.dir().join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::Io { path: frames_dir.clone(), source: e })?;
    let mut items = Vec::new();
    for (dirs, label) in [(&a.normal, Label::Normal), (&a.anomalous, Label::Anomalous)] {
        for dir in dirs {
            let seq = ImageSequence::open(dir)?;
            for f in subsample_frames(&seq, a.step, positions)? {
                let f = match crop {
                    Some((r, c)) => crop_frame(&f, r, c, CropAnchor { x_offset: 0, bottom_margin: a.bottom_margin })?,
                    None => f,
                };
                let f = resize_frame(&f, side)?;
                let path = frames_dir.join(format!("{}.png", f.frame_id));
                f.pixels.save(&path)?;
                let mut item = ManifestItem::new(f.frame_id.clone(), path, label);
                item.position_m = f.track_position;
                item.provenance = dir.display().to_string();
                items.push(item);
            }
        }
    }
    let seed = ctx.config.train.seed;
    let (normal, anomalous): (Vec<_>, Vec<_>) = items.into_iter().partition(|i| i.label == Label::Normal);
    let manifest = if let Some(k) = a.imbalance {
        let design = ImbalanceDesign {
            normal_unit: a.normal_unit,
            anomalous_count: None,
        };
        sample_imbalanced(&normal, &anomalous, k, design, seed)?
    } else if let Some(s) = a.scale {
        let design = ScaleDesign {
            normal_unit: a.normal_unit,
            anomalous_unit: a.anomalous_unit,
        };
        sample_scaled(&normal, &anomalous, s, design, seed)?
    } else {
        DatasetManifest {
            items: normal.into_iter().chain(anomalous).collect(),
            sampling_plan: Default::default(),
            seed: Some(seed),
            provenance: vec!["prepare".into()],
        }
    };
    let manifest = split_manifest(&manifest, ctx.config.train.split_ratio, seed)?;
    w.write("manifest", "manifest.jsonl", &pinned_manifest(&manifest)?)?;
    let (n, an) = manifest.counts();
    w.note(format!("{n} normal, {an} anomalous frames"));
    w.finish()
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<RunRecord> {
    let mut spec = ctx.config.synth.clone();
    if let Some(n) = a.normal {
        spec.normal_count = n;
    }
    if let Some(n) = a.anomalous {
        spec.anomalous_count = n;
    }
    if let Some(s) = a.side {
        spec.width = s;
        spec.height = s;
    }
    if a.spacing.is_some() {
        spec.frame_spacing_m = a.spacing;
    }
    spec.validate()?;
    let mut w = ctx.begin("synth", None, &serde_json::to_vec(&spec)?)?;
    let (dir, base) = match &a.dir {
        Some(d) => (d.clone(), absolute(d)?),
        None => (w.dir().join("data"), PathBuf::from("data")),
    };
    let mut m = generate_synthetic(&spec, &dir)?;
    m.resolve_paths(&base);
    w.write("manifest", "manifest.jsonl", &m.to_bytes())?;
    w.note(format!("dataset written to {}", dir.display()));
    w.finish()
}

fn train_options(ctx: &Ctx, progress: bool) -> TrainOptions {
    let _ = ctx;
    TrainOptions {
        progress,
        ..TrainOptions::default()
    }
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<RunRecord> {
    let mut manifest = ctx.manifest(a.manifest.as_ref())?;
    if manifest.items.iter().any(|i| i.split.is_none()) {
        manifest = split_manifest(&manifest, ctx.config.train.split_ratio, ctx.config.train.seed)?;
    }
    let mut tc = ctx.config.train.clone();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let mut w = ctx.begin("train", Some(&manifest), &serde_json::to_vec(&tc)?)?;
    let key = w.run_key().to_string();
    let table = ctx.config.risk_weights()?;
    let mut opts = train_options(ctx, a.progress);
    opts.log_path = Some(w.dir().join("training_log.partial.jsonl"));
    let setup = ExperimentSetup {
        spec: &ctx.config.backbone,
        train: &tc,
        options: &opts,
        table: &table,
        score_kind: ctx.config.score_kind,
        run_id: &key,
    };
    let exp = run_experiment(&manifest, &setup)?;
    let _ = std::fs::remove_file(w.dir().join("training_log.partial.jsonl"));
    w.write("manifest", "manifest.jsonl", &pinned_manifest(&manifest)?)?;
    w.write("weights", "weights.bin", &exp.model.to_weights().to_bytes()?)?;
    w.write("training_log", "training_log.jsonl", exp.log.to_jsonl()?.as_bytes())?;
    w.write("threshold", "threshold.json", &json_bytes(&exp.threshold)?)?;
    w.write("calibration_scores", "calibration_scores.csv", &score_log_bytes(&exp.calibration)?)?;
    w.write("scores", "scores.csv", &score_log_bytes(&exp.test)?)?;
    w.write("metrics", "metrics.json", exp.report.to_json()?.as_bytes())?;
    let hist = score_histogram(&exp.test, 20, ctx.config.score_kind)?;
    w.write("histogram", "tables/histogram.csv", hist.to_csv()?.as_bytes())?;
    w.write("histogram_plot", "tables/histogram.png", &hist.render_png()?)?;
    w.note(format!("test AUC {:.4}, F1 {:.4}", exp.report.auc, exp.report.f1));
    w.finish()
}

struct Loaded {
    model: Model,
    threshold: Option<Threshold>,
    manifest: Option<DatasetManifest>,
}

fn load_model(ctx: &Ctx, a: &ModelArgs) -> Result<Loaded> {
    let (weights_path, threshold_path, manifest_path) = match &a.run {
        Some(id) => {
            let rec = ctx.store.record(id)?;
            ctx.store.verify(&rec)?;
            (
                ctx.store.artifact_path(&rec, "weights")?,
                Some(ctx.store.artifact_path(&rec, "threshold")?),
                ctx.store.artifact_path(&rec, "manifest").ok(),
            )
        }
        None => (
            a.weights.clone().ok_or_else(|| Error::Precondition("pass --run or --weights".into()))?,
            None,
            None,
        ),
    };
    let model = Model::from_weights(&ModelWeights::load(&weights_path)?)?;
    let threshold_path = a.threshold.clone().or(threshold_path);
    let threshold = match threshold_path {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?)?),
        None => None,
    };
    let manifest = match a.manifest.as_ref().or(ctx.config.data.manifest.as_ref()) {
        Some(p) => Some(open_manifest(p)?),
        None => manifest_path.map(|p| DatasetManifest::load(&p)).transpose()?,
    };
    Ok(Loaded { model, threshold, manifest })
}

fn evaluate(ctx: &Ctx, a: &ModelArgs) -> Result<RunRecord> {
    let l = load_model(ctx, a)?;
    let manifest = l.manifest.ok_or_else(|| Error::Precondition("no manifest to evaluate".into()))?;
    let threshold = l.threshold.ok_or_else(|| Error::Precondition("evaluate needs a threshold (--run or --threshold)".into()))?;
    let mut w = ctx.begin("evaluate", Some(&manifest), l.model.to_weights().digest().as_bytes())?;
    let key = w.run_key().to_string();
    let (report, scored) = crate::eval::evaluate(&l.model, &manifest, &threshold, &key, &ctx.config.risk_weights()?)?;
    w.write("scores", "scores.csv", &score_log_bytes(&scored)?)?;
    w.write("metrics", "metrics.json", report.to_json()?.as_bytes())?;
    w.note(format!("test AUC {:.4}, F1 {:.4}", report.auc, report.f1));
    w.finish()
}

fn pool_items(m: &DatasetManifest, label: Label) -> Vec<ManifestItem> {
    m.items.iter().filter(|i| i.label == label).cloned().map(|mut i| {
        i.split = None;
        i
    }).collect()
}

fn ablate(ctx: &Ctx, a: &AblateArgs) -> Result<RunRecord> {
    let axis: AblationAxis = a.axis.parse()?;
    let c = &ctx.config;
    let dataset = match a.manifest.as_ref().or(c.data.manifest.as_ref()) {
        Some(p) => Some(open_manifest(p)?),
        None => None,
    };
    let from_pool = |p: &Option<PathBuf>, label| -> Result<Vec<ManifestItem>> {
        match (p, &dataset) {
            (Some(p), _) => Ok(pool_items(&open_manifest(p)?, label)),
            (None, Some(d)) => Ok(pool_items(d, label)),
            (None, None) => Ok(Vec::new()),
        }
    };
    let mut tc = c.train.clone();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let base = AblationBase {
        normal_pool: from_pool(&c.data.normal_pool, Label::Normal)?,
        anomalous_pool: from_pool(&c.data.anomalous_pool, Label::Anomalous)?,
        imbalance: ImbalanceDesign {
            normal_unit: a.normal_unit,
            anomalous_count: a.anomalous_count,
        },
        scale: ScaleDesign {
            normal_unit: a.scale_normal_unit,
            anomalous_unit: a.scale_anomalous_unit,
        },
        dataset: dataset.clone(),
        spec: c.backbone.clone(),
        train: tc,
        options: train_options(ctx, false),
        table: c.risk_weights()?,
        score_kind: c.score_kind,
        run_id: String::new(),
    };
    let mut w = ctx.begin("ablate", dataset.as_ref(), format!("{a:?}").as_bytes())?;
    let base = AblationBase {
        run_id: w.run_key().to_string(),
        ..base
    };
    let grid = run_ablation(axis, &a.settings, &base)?;
    w.write("table", "tables/ablation.txt", grid.to_text().as_bytes())?;
    w.write("table_csv", "tables/ablation.csv", grid.to_csv()?.as_bytes())?;
    w.write("grid", "tables/grid.json", &json_bytes(&grid)?)?;
    if let Some(best) = &grid.best_by_f1 {
        w.note(format!("best by F1: {best}"));
    }
    w.finish()
}

fn heatmap(ctx: &Ctx, a: &HeatmapArgs) -> Result<RunRecord> {
    let l = load_model(ctx, &a.model)?;
    let manifest = a.split.select(&l.manifest.ok_or_else(|| Error::Precondition("no manifest for heatmaps".into()))?);
    let side = l.model.spec().input_side as u32;
    let items: Vec<&ManifestItem> = manifest.items.iter().take(a.limit.unwrap_or(usize::MAX)).collect();
    let mut frames = Vec::new();
    let mut failures = Vec::new();
    for i in &items {
        match crate::datapipe::load_item(i, side) {
            Ok(f) => frames.push(f),
            Err(e) => failures.push((i.frame_id.clone(), e.to_string())),
        }
    }
    let kernel = ctx.config.kernel_spec()?;
    let spec = ctx.config.render;
    let mut w = ctx.begin("heatmap", Some(&manifest), l.model.to_weights().digest().as_bytes())?;
    let (mut outputs, report) = batch_with_model(&l.model, &frames, &kernel, &spec)?;
    failures.extend(report.failures);
    if a.global_range {
        if let Some((min, max)) = global_bounds(outputs.iter().map(|o| &o.heatmap)) {
            let g = RenderSpec {
                bounds: Bounds::Global { min, max },
                ..spec
            };
            for o in &mut outputs {
                o.rendered = render(&o.heatmap, &g)?;
            }
        }
    }
    for o in &outputs {
        let id = &o.heatmap.frame_id;
        w.write("heatmap", &format!("heatmaps/{id}.png"), &o.rendered.png)?;
        w.write("heatmap_meta", &format!("heatmaps/{id}.png.json"), &json_bytes(&o.rendered.meta)?)?;
        if a.raw {
            let mut buf = Vec::new();
            o.heatmap.write_raw(&mut buf).map_err(|e| Error::Store(e.to_string()))?;
            w.write("heatmap_raw", &format!("heatmaps/{id}.f32"), &buf)?;
        }
    }
    w.write("failures", "heatmaps/failures.json", &json_bytes(&failures)?)?;
    w.note(format!("{} heatmaps, {} failures", outputs.len(), failures.len()));
    w.finish()
}

fn score(ctx: &Ctx, a: &ScoreArgs) -> Result<RunRecord> {
    let l = load_model(ctx, &a.model)?;
    let manifest = a.split.select(&l.manifest.ok_or_else(|| Error::Precondition("no manifest to score".into()))?);
    let mut w = ctx.begin("score", Some(&manifest), l.model.to_weights().digest().as_bytes())?;
    let key = w.run_key().to_string();
    let scored = score_split(&l.model, &manifest, Split::Test, &key, &ctx.config.risk_weights()?)?;
    w.write("scores", "scores.csv", &score_log_bytes(&scored)?)?;
    for kind in [ScoreKind::Raw, ScoreKind::RiskWeighted] {
        let h = score_histogram(&scored, a.bins, kind)?;
        let name = match kind {
            ScoreKind::Raw => "raw",
            ScoreKind::RiskWeighted => "risk_weighted",
        };
        w.write("histogram", &format!("tables/histogram_{name}.csv"), h.to_csv()?.as_bytes())?;
        w.write("histogram_plot", &format!("tables/histogram_{name}.png"), &h.render_png()?)?;
    }
    if let Some(t) = &l.threshold {
        if scored.iter().all(|s| s.label.is_some()) {
            if let Ok(r) = metrics_for(&scored, t, &key, &manifest.digest()) {
                w.write("metrics", "metrics.json", r.to_json()?.as_bytes())?;
            }
        }
    }
    let defaulted = scored.iter().filter(|s| s.default_weight_used).count();
    w.note(format!("{} frames scored, {defaulted} with the default risk weight", scored.len()));
    w.finish()
}

fn history(ctx: &Ctx, a: &HistoryArgs) -> Result<RunRecord> {
    let rec = ctx.store.record(&a.run)?;
    let path = ctx.store.artifact_path(&rec, "scores")?;
    let file = std::fs::File::open(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let scored = read_score_log(file)?;
    let (hist, outcome) = ctx.store.record_inspection(&a.run, &scored, a.date, ctx.config.history.bucket_width_m)?;
    let mut w = ctx.begin("history", None, format!("{}|{}", a.run, a.date).as_bytes())?;
    w.write("outcome", "history_outcome.json", &json_bytes(&outcome)?)?;
    w.note(format!(
        "{} buckets appended, {} unchanged, {} buckets in history",
        outcome.appended.len(),
        outcome.unchanged.len(),
        hist.buckets.len()
    ));
    w.finish()
}

fn prognose(ctx: &Ctx, a: &PrognoseArgs) -> Result<RunRecord> {
    let h = &ctx.config.history;
    let hist = ctx.store.history(h.bucket_width_m)?;
    let window = a.window.unwrap_or(h.trend_window);
    let factor = a.factor.unwrap_or(h.trend_factor);
    let reports = match a.bucket {
        Some(b) => vec![prognostic_compare(&hist, b, window, factor)?],
        None => hist
            .buckets
            .iter()
            .filter(|(_, e)| e.len() >= 2)
            .map(|(&b, _)| prognostic_compare(&hist, b, window, factor))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut w = ctx.begin("prognose", None, &serde_json::to_vec(&reports)?)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["bucket", "start_m", "latest", "prior_mean", "prior_max", "abs_change", "rel_change", "flagged"])?;
    for r in &reports {
        csv.write_record([
            r.bucket.to_string(),
            (r.bucket as f64 * hist.bucket_width).to_string(),
            r.latest.to_string(),
            r.prior_mean.to_string(),
            r.prior_max.to_string(),
            r.abs_change.to_string(),
            r.rel_change.map_or(String::new(), |v| v.to_string()),
            r.flagged.to_string(),
        ])?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::Store(e.to_string()))?;
    w.write("trend", "tables/trend.csv", &bytes)?;
    w.write("trend_json", "trend.json", &json_bytes(&reports)?)?;
    w.note(format!("{} buckets compared, {} flagged", reports.len(), reports.iter().filter(|r| r.flagged).count()));
    w.finish()
}
