//! Argument parsing and command dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use regenforge_core::eval::Scoring;
use regenforge_core::mix::{MixConfig, MixStrategy};
use regenforge_core::pair::{Corner, SeamParams, WatermarkPolicy, WatermarkSpec};
use regenforge_core::prompt::DEFAULT_BATCH_BOUNDS;
use regenforge_core::pseudo::{PadPolicy, StubClassifier, WindowSpec};
use regenforge_core::review::{Decision, DecisionInput, QueueEntry, DEFAULT_LEASE_MS};
use regenforge_core::stats::Connectivity;
use regenforge_core::{DefectTag, Source};

use crate::batch::{self, ClassifierHandle, ExtractOptions, PseudoOptions, QaRecord};
use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::plugin::{self, StubFault};
use crate::report;
use crate::run_manifest::{location_for, RunRecorder};
use crate::service::{self, ReviewService, SystemClock, DEFAULT_REVIEWER};
use crate::io;

pub const DEFAULT_BANDWIDTH: f64 = 10.0;

#[derive(Parser, Debug)]
#[command(name = "regenforge", version, about = "Curate synthetic and pseudo-labelled segmentation datasets")]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for extract, stats and pseudolabel.
    #[arg(short = 'j', long = "jobs", global = true)]
    pub jobs: Option<usize>,
    /// Default configuration file.
    #[arg(long, global = true, env = crate::config::CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Plan generation prompts or build zero-shot prompts.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Split side-by-side canvases into photo and mask with automated QA.
    Extract(ExtractArgs),
    /// Class distribution and mask complexity of a manifest.
    Stats(StatsArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// FID and CMMD between embedding sets.
    Distance(DistanceArgs),
    /// Geographically separated cross-validation folds.
    Folds(FoldsArgs),
    /// Batch plans mixing synthetic and labelled images.
    Mix(MixArgs),
    /// Sliding-window pseudo-labels for unlabelled images.
    Pseudolabel(PseudoArgs),
    /// Human review queue.
    #[command(subcommand)]
    Review(ReviewCmd),
    /// Stub classifier speaking the plugin protocol on stdin and stdout.
    #[command(hide = true)]
    PluginStub(PluginStubArgs),
}

#[derive(Subcommand, Debug)]
pub enum PromptCmd {
    /// Write one generation prompt per planned image.
    Plan(PromptPlanArgs),
    /// Print a zero-shot segmentation prompt.
    Zeroshot(ZeroshotArgs),
}

#[derive(Args, Debug)]
pub struct PromptPlanArgs {
    /// Species quotas: JSON object or TOML table of class name to image count.
    #[arg(long)]
    pub quotas: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generation taxonomy file.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Attribute space file.
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    /// Smallest batch size.
    #[arg(long, default_value_t = DEFAULT_BATCH_BOUNDS.0)]
    pub batch_min: usize,
    /// Largest batch size.
    #[arg(long, default_value_t = DEFAULT_BATCH_BOUNDS.1)]
    pub batch_max: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum ClassSet {
    Full,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("which").required(true).args(["classes", "from_mask"])))]
pub struct ZeroshotArgs {
    /// Prompt for every class of the taxonomy.
    #[arg(long, value_enum)]
    pub classes: Option<ClassSet>,
    /// Prompt for the classes present in this pseudo-label mask.
    #[arg(long)]
    pub from_mask: Option<PathBuf>,
    /// Taxonomy file.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Write the prompt here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Directory of side-by-side canvases.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generation taxonomy file.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// QA threshold file.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Known watermark box, e.g. bottom-right:24x12.
    #[arg(long, value_parser = parse_watermark)]
    pub watermark: Option<WatermarkSpec>,
    /// Crop the watermark box from every pair, not only where detected.
    #[arg(long, requires = "watermark")]
    pub always_crop_watermark: bool,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Restrict to one source.
    #[arg(long, value_parser = parse_source)]
    pub source: Option<Source>,
    /// Only records accepted in review.
    #[arg(long)]
    pub accepted_only: bool,
    /// Use 4-connectivity for instances instead of 8.
    #[arg(long)]
    pub four_connected: bool,
    /// Taxonomy file.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth masks with matching file names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Taxonomy file.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Fold map; folds are scored separately and pooled.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Score every class, counting absent ones as 0.
    #[arg(long)]
    pub all_classes: bool,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DistanceArgs {
    /// Reference embeddings.
    #[arg(long)]
    pub a: PathBuf,
    /// Embeddings compared with the reference.
    #[arg(long)]
    pub b: PathBuf,
    /// Embeddings the comparison is expressed relative to.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Gaussian kernel bandwidth for CMMD.
    #[arg(long, default_value_t = DEFAULT_BANDWIDTH)]
    pub bandwidth: f64,
    /// Report file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FoldsArgs {
    /// Site table with columns site_id, lat, lon.
    #[arg(long)]
    pub sites: PathBuf,
    /// Manifest whose records name their site in site_name.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Minimum distance between sites of different folds.
    #[arg(long, default_value_t = 20.0)]
    pub separation_km: f64,
    /// Also list pseudo-label records at least the separation away from
    /// the sites of these folds.
    #[arg(long, value_delimiter = ',')]
    pub exclude_near: Option<Vec<usize>>,
    /// Taxonomy file.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Output directory for the report and fold map.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
pub struct MixArgs {
    #[command(subcommand)]
    pub report: Option<MixCmd>,
    #[command(flatten)]
    pub common: MixCommon,
    /// Number of batch plans to write.
    #[arg(long, required = true)]
    pub emit: Option<usize>,
    /// Fold map used with --exclude-folds.
    #[arg(long, requires = "exclude_folds")]
    pub fold_map: Option<PathBuf>,
    /// Folds held out from training.
    #[arg(long, value_delimiter = ',', requires = "fold_map")]
    pub exclude_folds: Option<Vec<usize>>,
    /// Batch plan file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum MixCmd {
    /// Analytic and empirical class proportions seen in training.
    Report(MixReportArgs),
}

#[derive(Args, Debug)]
pub struct MixReportArgs {
    #[command(flatten)]
    pub common: MixCommon,
    /// Batches to simulate for the empirical column.
    #[arg(long, default_value_t = 1000)]
    pub batches: u64,
    /// Taxonomy file.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MixCommon {
    /// Dataset manifest.
    #[arg(long, required = true)]
    pub manifest: Option<PathBuf>,
    /// Synthetic share of each batch.
    #[arg(long, default_value_t = regenforge_core::mix::DEFAULT_RATIO)]
    pub ratio: f64,
    /// homogeneous, balanced or weighted_random.
    #[arg(long, default_value = "weighted_random", value_parser = parse_strategy)]
    pub strategy: MixStrategy,
    /// Images per batch.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Draw every slot independently instead of per-source epochs.
    #[arg(long)]
    pub with_replacement: bool,
}

#[derive(Args, Debug)]
pub struct PseudoArgs {
    /// Manifest with unlabelled records.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Classifier plugin command, run under sh -c.
    #[arg(long)]
    pub classifier_cmd: Option<String>,
    /// In-process stub classifier rule instead of a plugin.
    #[arg(long, conflicts_with = "classifier_cmd")]
    pub stub_rule: Option<String>,
    /// Window size in pixels.
    #[arg(long)]
    pub window: Option<usize>,
    /// Window stride in pixels.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Reflect the image at the border instead of clamping the last window.
    #[arg(long)]
    pub reflect: bool,
    /// Plugin response timeout in seconds.
    #[arg(long, default_value_t = plugin::DEFAULT_TIMEOUT.as_secs())]
    pub timeout_s: u64,
    /// Taxonomy file.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Updated manifest; the input manifest is rewritten when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum ReviewCmd {
    /// Serve the review HTTP API.
    Serve(ReviewServeArgs),
    /// Record one decision without the browser.
    Decide(ReviewDecideArgs),
    /// Write the accepted manifest.
    Export(ReviewExportArgs),
    /// Print queue statistics.
    Stats(ReviewLogArgs),
}

#[derive(Args, Debug)]
pub struct ReviewLogArgs {
    /// Event log file.
    #[arg(long)]
    pub log: PathBuf,
    /// Extraction QA file whose items are enqueued first.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Taxonomy file.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Lease duration in milliseconds.
    #[arg(long)]
    pub lease_ms: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ReviewServeArgs {
    #[command(flatten)]
    pub log: ReviewLogArgs,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Export target used by POST /api/export.
    #[arg(long)]
    pub export: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum VerdictArg {
    Accept,
    Reject,
}

#[derive(Args, Debug)]
pub struct ReviewDecideArgs {
    #[command(flatten)]
    pub log: ReviewLogArgs,
    /// Item id.
    #[arg(long)]
    pub id: String,
    #[arg(long, value_enum)]
    pub verdict: VerdictArg,
    /// Defect tags, comma separated; required for a reject.
    #[arg(long, value_delimiter = ',', value_parser = parse_tag)]
    pub tags: Vec<DefectTag>,
    #[arg(long, default_value = "")]
    pub note: String,
    #[arg(long, default_value = DEFAULT_REVIEWER)]
    pub reviewer: String,
}

#[derive(Args, Debug)]
pub struct ReviewExportArgs {
    #[command(flatten)]
    pub log: ReviewLogArgs,
    /// Accepted manifest file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PluginStubArgs {
    #[arg(long)]
    pub classes: usize,
    /// constant:C or mean:THRESHOLD:BELOW:ABOVE.
    #[arg(long)]
    pub rule: String,
    #[arg(long, value_enum, default_value_t = StubFault::None)]
    pub fault: StubFault,
}

fn parse_source(text: &str) -> std::result::Result<Source, String> {
    Source::parse(text).ok_or_else(|| format!("unknown source '{text}'"))
}

fn parse_strategy(text: &str) -> std::result::Result<MixStrategy, String> {
    MixStrategy::parse(text).ok_or_else(|| format!("unknown strategy '{text}'"))
}

fn parse_tag(text: &str) -> std::result::Result<DefectTag, String> {
    DefectTag::parse(text).ok_or_else(|| {
        let all: Vec<&str> = DefectTag::ALL.iter().map(|t| t.as_str()).collect();
        format!("unknown tag '{text}', expected one of {}", all.join(", "))
    })
}

fn parse_watermark(text: &str) -> std::result::Result<WatermarkSpec, String> {
    let bad = || format!("expected CORNER:WxH such as bottom-right:24x12, got '{text}'");
    let (corner, dims) = text.split_once(':').ok_or_else(bad)?;
    let corner = match corner {
        "top-left" => Corner::TopLeft,
        "top-right" => Corner::TopRight,
        "bottom-left" => Corner::BottomLeft,
        "bottom-right" => Corner::BottomRight,
        _ => return Err(bad()),
    };
    let (w, h) = dims.split_once('x').ok_or_else(bad)?;
    Ok(WatermarkSpec {
        corner,
        width: w.parse().map_err(|_| bad())?,
        height: h.parse().map_err(|_| bad())?,
    })
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run(argv: impl IntoIterator<Item = OsString>) -> i32 {
    let argv: Vec<OsString> = argv.into_iter().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    config: AppConfig,
    seed: u64,
    jobs: usize,
    args: Vec<String>,
}

impl Ctx {
    fn recorder(&self, command: &str) -> RunRecorder {
        RunRecorder::start(command, self.args.clone(), self.seed)
    }
}

fn dispatch(cli: Cli, args: Vec<String>) -> Result<()> {
    let config = match &cli.config {
        Some(p) if !p.as_os_str().is_empty() => AppConfig::load(p)?,
        _ => AppConfig::default(),
    };
    let ctx = Ctx {
        config,
        seed: cli.seed,
        jobs: cli
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
        args,
    };
    match cli.command {
        Command::Prompt(PromptCmd::Plan(a)) => prompt_plan(&ctx, a),
        Command::Prompt(PromptCmd::Zeroshot(a)) => prompt_zeroshot(&ctx, a),
        Command::Extract(a) => extract(&ctx, a),
        Command::Stats(a) => stats(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Distance(a) => distance(&ctx, a),
        Command::Folds(a) => folds(&ctx, a),
        Command::Mix(a) => mix(&ctx, a),
        Command::Pseudolabel(a) => pseudolabel(&ctx, a),
        Command::Review(c) => review(&ctx, c),
        Command::PluginStub(a) => {
            let rule = plugin::parse_stub_rule(&a.rule)?;
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            plugin::run_stub_plugin(a.classes, rule, a.fault, stdin, stdout)
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).expect("report serialises");
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

fn prompt_plan(ctx: &Ctx, a: PromptPlanArgs) -> Result<()> {
    let taxonomy = ctx.config.generation_taxonomy(a.taxonomy.as_deref())?;
    let space = ctx.config.attributes(a.attributes.as_deref())?;
    let quotas = report::read_quotas(&a.quotas)?;
    let mut rec = ctx.recorder("prompt plan");
    rec.config(&(&quotas, taxonomy.schema_digest(), &space, a.batch_min, a.batch_max));
    rec.input_file(&a.quotas)?;
    let index = report::write_prompt_plan(&a.out, &quotas, &taxonomy, &space, (a.batch_min, a.batch_max), ctx.seed)?;
    log::info!("wrote {} prompts to {}", index.len(), a.out.display());
    rec.finish(
        &location_for(&a.out, true),
        vec![a.out.join("prompts").display().to_string(), a.out.join("plan.jsonl").display().to_string()],
    )?;
    Ok(())
}

fn prompt_zeroshot(ctx: &Ctx, a: ZeroshotArgs) -> Result<()> {
    let taxonomy = ctx.config.taxonomy(a.taxonomy.as_deref())?;
    let prompt = report::zero_shot(&taxonomy, a.from_mask.as_deref())?;
    if prompt.attach_pseudo_label {
        log::info!("attach the pseudo-label mask to this prompt");
    }
    match a.out {
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(prompt.text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
        Some(path) => {
            let mut rec = ctx.recorder("prompt zeroshot");
            rec.config(&taxonomy.schema_digest());
            if let Some(m) = &a.from_mask {
                rec.input_file(m)?;
            }
            io::create_parent(&path)?;
            std::fs::write(&path, &prompt.text).map_err(|e| Error::io(&path, e))?;
            rec.finish(&location_for(&path, false), vec![path.display().to_string()])?;
            Ok(())
        }
    }
}

fn extract(ctx: &Ctx, a: ExtractArgs) -> Result<()> {
    let taxonomy = ctx.config.generation_taxonomy(a.taxonomy.as_deref())?;
    let thresholds = ctx.config.thresholds(a.thresholds.as_deref())?;
    let watermark = match (a.watermark, a.always_crop_watermark) {
        (None, _) => WatermarkPolicy::Off,
        (Some(spec), false) => WatermarkPolicy::Detect(spec),
        (Some(spec), true) => WatermarkPolicy::Always(spec),
    };
    let opts = ExtractOptions {
        taxonomy,
        thresholds,
        seam: SeamParams::default(),
        watermark,
        jobs: ctx.jobs,
    };
    let mut rec = ctx.recorder("extract");
    rec.config(&(
        opts.taxonomy.palette_entries(),
        &opts.thresholds,
        &opts.seam,
        &opts.watermark,
    ));
    rec.input_files(&io::list_images(&a.input)?)?;
    let (summary, _) = batch::extract_dir(&a.input, &a.out, &opts)?;
    print_json(&summary)?;
    rec.finish(
        &location_for(&a.out, true),
        vec![
            a.out.join(batch::QA_FILE).display().to_string(),
            a.out.join(batch::MANIFEST_FILE).display().to_string(),
            a.out.join("photos").display().to_string(),
            a.out.join("masks").display().to_string(),
        ],
    )?;
    Ok(())
}

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("missing required flag {flag}")))
}

fn stats(ctx: &Ctx, a: StatsArgs) -> Result<()> {
    let manifest_path = required(&a.manifest, "--manifest")?;
    let taxonomy = ctx.config.taxonomy(a.taxonomy.as_deref())?;
    let manifest = io::read_manifest(manifest_path)?;
    manifest.check_taxonomy(&taxonomy)?;
    let connectivity = if a.four_connected {
        Connectivity::Four
    } else {
        Connectivity::Eight
    };
    let mut rec = ctx.recorder("stats");
    rec.config(&(taxonomy.schema_digest(), a.source, a.accepted_only, connectivity));
    rec.input_file(manifest_path)?;
    let r = report::dataset_stats(manifest_path, &manifest, &taxonomy, a.source, a.accepted_only, connectivity, ctx.jobs)?;
    {
        let mut out = std::io::stdout().lock();
        for line in &r.table {
            writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    if let Some(path) = &a.out {
        io::write_json(path, &r)?;
        rec.finish(&location_for(path, false), vec![path.display().to_string()])?;
    }
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let taxonomy = ctx.config.taxonomy(a.taxonomy.as_deref())?;
    let scoring = if a.all_classes {
        Scoring::AllClasses
    } else {
        Scoring::PresentInGtOrPred
    };
    let folds = a.pool.as_deref().map(report::read_fold_map).transpose()?;
    let mut rec = ctx.recorder("eval");
    rec.config(&(taxonomy.schema_digest(), scoring));
    rec.input_files(&io::list_images(&a.pred)?)?;
    rec.input_files(&io::list_images(&a.gt)?)?;
    if let Some(p) = &a.pool {
        rec.input_file(p)?;
    }
    let r = report::eval_dirs(&a.pred, &a.gt, &taxonomy, scoring, folds.as_ref())?;
    println!(
        "pairs {}  macro F1 {:.2}  mIoU {:.2}  pixel accuracy {:.2}",
        r.n_pairs, r.metrics.macro_f1, r.metrics.miou, r.metrics.pixel_accuracy
    );
    io::write_json(&a.out, &r)?;
    rec.finish(&location_for(&a.out, false), vec![a.out.display().to_string()])?;
    Ok(())
}

fn distance(ctx: &Ctx, a: DistanceArgs) -> Result<()> {
    let mut rec = ctx.recorder("distance");
    rec.config(&a.bandwidth);
    rec.input_file(&a.a)?;
    rec.input_file(&a.b)?;
    if let Some(b) = &a.baseline {
        rec.input_file(b)?;
    }
    let r = report::distance_report(&a.a, &a.b, a.baseline.as_deref(), a.bandwidth)?;
    match &a.out {
        None => print_json(&r),
        Some(path) => {
            io::write_json(path, &r)?;
            rec.finish(&location_for(path, false), vec![path.display().to_string()])?;
            Ok(())
        }
    }
}

fn folds(ctx: &Ctx, a: FoldsArgs) -> Result<()> {
    let taxonomy = ctx.config.taxonomy(a.taxonomy.as_deref())?;
    let sites = io::read_sites_csv(&a.sites)?;
    let manifest = io::read_manifest(&a.manifest)?;
    manifest.check_taxonomy(&taxonomy)?;
    let mut rec = ctx.recorder("folds");
    rec.config(&(a.k, a.separation_km, &a.exclude_near));
    rec.input_file(&a.sites)?;
    rec.input_file(&a.manifest)?;
    let r = report::build_folds(
        &sites,
        &a.manifest,
        &manifest,
        &taxonomy,
        a.k,
        a.separation_km,
        a.exclude_near.as_deref(),
        ctx.jobs,
    )?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let report_path = a.out.join("folds.json");
    let map_path = a.out.join("fold_map.jsonl");
    io::write_json(&report_path, &r)?;
    io::write_jsonl(&map_path, &r.fold_map)?;
    let mut outputs = vec![report_path.display().to_string(), map_path.display().to_string()];
    if let Some(kept) = &r.pretrain_kept {
        let kept_path = a.out.join("pretrain_kept.txt");
        let mut text = kept.join("\n");
        text.push('\n');
        std::fs::write(&kept_path, text).map_err(|e| Error::io(&kept_path, e))?;
        outputs.push(kept_path.display().to_string());
    }
    println!(
        "{} sites in {} clusters, {} folds; min cross-fold distance {}; {}",
        sites.len(),
        r.clusters.len(),
        r.k,
        r.verify
            .min_cross_fold_km
            .map_or_else(|| "n/a".to_string(), |d| format!("{d:.2} km")),
        if r.verify.passed { "separation holds" } else { "SEPARATION VIOLATED" }
    );
    rec.finish(&location_for(&a.out, true), outputs)?;
    if !r.verify.passed {
        return Err(Error::Usage(format!(
            "{} site pairs in different folds are closer than {} km",
            r.verify.violations.len(),
            a.separation_km
        )));
    }
    Ok(())
}

fn mix_config(ctx: &Ctx, c: &MixCommon) -> MixConfig {
    MixConfig {
        ratio_synthetic: c.ratio,
        strategy: c.strategy,
        batch_size: c.batch,
        seed: ctx.seed,
        with_replacement: c.with_replacement,
    }
}

fn mix(ctx: &Ctx, a: MixArgs) -> Result<()> {
    if let Some(MixCmd::Report(r)) = a.report {
        return mix_report(ctx, r);
    }
    let manifest_path = required(&a.common.manifest, "--manifest")?;
    let n = *required(&a.emit, "--emit")?;
    let config = mix_config(ctx, &a.common);
    let mut manifest = io::read_manifest(manifest_path)?;
    let mut rec = ctx.recorder("mix");
    rec.config(&(config, &a.exclude_folds));
    rec.input_file(manifest_path)?;
    if let (Some(map_path), Some(exclude)) = (&a.fold_map, &a.exclude_folds) {
        rec.input_file(map_path)?;
        let map = report::read_fold_map(map_path)?;
        manifest = report::without_folds(&manifest, &map, exclude);
    }
    let plans = report::mix_batches(&manifest, config, n)?;
    match &a.out {
        None => {
            let mut out = std::io::stdout().lock();
            for p in &plans {
                let line = serde_json::to_string(p).expect("plan serialises");
                writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(())
        }
        Some(path) => {
            io::write_jsonl(path, &plans)?;
            rec.finish(&location_for(path, false), vec![path.display().to_string()])?;
            Ok(())
        }
    }
}

fn mix_report(ctx: &Ctx, a: MixReportArgs) -> Result<()> {
    let manifest_path = required(&a.common.manifest, "--manifest")?;
    let taxonomy = ctx.config.taxonomy(a.taxonomy.as_deref())?;
    let manifest = io::read_manifest(manifest_path)?;
    manifest.check_taxonomy(&taxonomy)?;
    let config = mix_config(ctx, &a.common);
    let mut rec = ctx.recorder("mix report");
    rec.config(&(config, a.batches));
    rec.input_file(manifest_path)?;
    let r = report::mix_report(manifest_path, &manifest, &taxonomy, config, a.batches, ctx.jobs)?;
    {
        let mut out = std::io::stdout().lock();
        let w = |e| Error::io("<stdout>", e);
        writeln!(out, "{:<24} {:>12} {:>12}", "class", "analytic %", "empirical %").map_err(w)?;
        for row in &r.rows {
            writeln!(
                out,
                "{:<24} {:>12.2} {:>12.2}",
                row.name, row.analytic_percent, row.empirical_percent
            )
            .map_err(w)?;
        }
    }
    io::write_json(&a.out, &r)?;
    rec.finish(&location_for(&a.out, false), vec![a.out.display().to_string()])?;
    Ok(())
}

/// Rewrites relative paths so they stay valid from a new manifest location.
fn rebase(manifest: &mut regenforge_core::DatasetManifest, from: &Path, to: &Path) {
    let from_dir = from.parent().unwrap_or(Path::new("."));
    let to_dir = to.parent().unwrap_or(Path::new("."));
    if from_dir == to_dir {
        return;
    }
    let fix = |p: &mut String| {
        if Path::new(p.as_str()).is_relative() {
            let abs = std::path::absolute(from_dir.join(&*p)).unwrap_or_else(|_| from_dir.join(&*p));
            *p = abs.display().to_string();
        }
    };
    for r in &mut manifest.records {
        fix(&mut r.image_path);
        if let Some(m) = &mut r.mask_path {
            fix(m);
        }
    }
}

fn pseudolabel(ctx: &Ctx, a: PseudoArgs) -> Result<()> {
    let taxonomy = ctx.config.taxonomy(a.taxonomy.as_deref())?;
    let base = ctx.config.window.unwrap_or_default();
    let spec = WindowSpec {
        size: a.window.unwrap_or(base.size),
        stride: a.stride.unwrap_or(base.stride),
        pad_policy: if a.reflect { PadPolicy::Reflect } else { base.pad_policy },
    };
    spec.validate()?;
    let class_ids: Vec<_> = taxonomy.classes().iter().map(|c| c.id).collect();
    let handle = match (&a.stub_rule, a.classifier_cmd.as_ref().or(ctx.config.classifier_cmd.as_ref())) {
        (Some(rule), _) => ClassifierHandle::Stub(StubClassifier::new(class_ids.len(), plugin::parse_stub_rule(rule)?)),
        (None, Some(cmd)) => ClassifierHandle::Plugin {
            cmd: cmd.clone(),
            timeout: Duration::from_secs(a.timeout_s),
        },
        (None, None) => return Err(Error::Usage("missing required flag --classifier-cmd".into())),
    };
    let out_manifest = a.out.clone().unwrap_or_else(|| a.manifest.clone());
    let mut manifest = io::read_manifest(&a.manifest)?;
    manifest.check_taxonomy(&taxonomy)?;
    let mut rec = ctx.recorder("pseudolabel");
    let classifier = match &handle {
        ClassifierHandle::Plugin { cmd, .. } => format!("plugin:{cmd}"),
        ClassifierHandle::Stub(_) => format!("stub:{}", a.stub_rule.as_deref().unwrap_or_default()),
    };
    rec.config(&(spec, &classifier, taxonomy.schema_digest()));
    rec.input_file(&a.manifest)?;
    for r in manifest.by_source(Source::Unlabelled) {
        rec.input_file(&io::resolve(&a.manifest, &r.image_path))?;
    }
    rebase(&mut manifest, &a.manifest, &out_manifest);
    let out_dir = out_manifest.parent().unwrap_or(Path::new(".")).join("pseudo_masks");
    let opts = PseudoOptions {
        spec,
        jobs: ctx.jobs,
        class_ids,
        ignore_index: taxonomy.ignore_index(),
        out_dir: out_dir.clone(),
    };
    let summary = batch::batch_run(&mut manifest, &out_manifest, &handle, &opts)?;
    io::write_manifest(&out_manifest, &manifest)?;
    print_json(&summary)?;
    rec.finish(
        &location_for(&out_dir, true),
        vec![out_manifest.display().to_string(), out_dir.display().to_string()],
    )?;
    Ok(())
}

fn open_service(ctx: &Ctx, a: &ReviewLogArgs, export: PathBuf) -> Result<ReviewService> {
    let taxonomy = ctx.config.taxonomy(a.taxonomy.as_deref())?;
    let lease = a.lease_ms.or(ctx.config.lease_ms).unwrap_or(DEFAULT_LEASE_MS);
    let svc = ReviewService::open(&a.log, lease, taxonomy, export, Arc::new(SystemClock))?;
    if let Some(qa_path) = &a.manifest {
        let rows: Vec<QaRecord> = io::read_jsonl(qa_path)?;
        let base = qa_path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        let entries: Vec<QueueEntry> = rows.iter().map(|r| r.queue_entry(&base)).collect();
        let out = svc.enqueue(entries)?;
        if out.enqueued > 0 || out.auto_rejected > 0 {
            log::info!("enqueued {} items, {} auto-rejected", out.enqueued, out.auto_rejected);
        }
    }
    Ok(svc)
}

fn default_export(log: &Path) -> PathBuf {
    log.with_file_name("accepted.jsonl")
}

fn review(ctx: &Ctx, cmd: ReviewCmd) -> Result<()> {
    match cmd {
        ReviewCmd::Serve(a) => {
            let export = a.export.clone().unwrap_or_else(|| default_export(&a.log.log));
            let svc = open_service(ctx, &a.log, export)?;
            service::serve(Arc::new(svc), &a.addr)
        }
        ReviewCmd::Decide(a) => {
            let svc = open_service(ctx, &a.log, default_export(&a.log.log))?;
            let decision = match a.verdict {
                VerdictArg::Accept => Decision::Accept,
                VerdictArg::Reject => Decision::Reject,
            };
            let item = svc.decide(
                &a.id,
                &a.reviewer,
                decision,
                DecisionInput {
                    tags: a.tags,
                    note: a.note,
                    duration_ms: None,
                },
            )?;
            print_json(&item)
        }
        ReviewCmd::Export(a) => {
            let svc = open_service(ctx, &a.log, a.out.clone())?;
            let mut rec = ctx.recorder("review export");
            rec.input_file(&a.log.log)?;
            let r = svc.export(None)?;
            print_json(&r)?;
            rec.finish(&location_for(&a.out, false), vec![a.out.display().to_string()])?;
            Ok(())
        }
        ReviewCmd::Stats(a) => {
            let svc = open_service(ctx, &a, default_export(&a.log))?;
            print_json(&svc.stats())
        }
    }
}
