//! `countforge` command-line front-end.
//!
//! Exit codes: 0 success, 1 demo ordering not reproduced, 2 invalid input,
//! 3 zero ground-truth count, 4 numerical failure or non-convergence.

mod output;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use countforge::demo::{run_ablation, DemoConfig};
use countforge::density::{render_gaussian_density, total_count, DEFAULT_SIGMA};
use countforge::gl::{gl_loss, GlConfig, DEFAULT_EPSILON, DEFAULT_MAX_ITERS, DEFAULT_TAU, DEFAULT_TOL};
use countforge::metrics::{self, bin_distribution, compute_metrics, exclusion_report, CountRecord};
use countforge::mosaic::{generate_fsc_mosaic, generate_training_mosaics, MosaicConfig};
use countforge::transport::{cost_matrix, grid_coords, DEFAULT_ETA};
use countforge::ttn::{plan_query, TtnConfig, DEFAULT_AREA_THRESHOLD, DEFAULT_TILES_PER_SIDE};
use countforge::types::DEFAULT_STRIDE;
use countforge::{AnnotatedImage, DensityGrid, ErrorFamily, Manifest};
use serde_json::json;

use output::{emit, read_text, write_atomic, Failure};

const DEFAULTS: &str = "Defaults: --epsilon 0.01, --tau 0.5, --eta 0.6, --tiles-M 8, --threshold-T 0.0002, --stride 4.";

#[derive(Parser)]
#[command(name = "countforge", version, about = "Class-agnostic counting toolkit", after_help = DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize mosaic collages (evaluation pairs or training samples).
    #[command(after_help = DEFAULTS)]
    GenMosaic(GenMosaicArgs),
    /// Score predicted counts against ground truth.
    #[command(after_help = DEFAULTS)]
    EvalMetrics(EvalMetricsArgs),
    /// Generalized loss of a density map against an image's points.
    #[command(after_help = DEFAULTS)]
    GlLoss(GlLossArgs),
    /// Test-time normalization plan for a query image.
    #[command(after_help = DEFAULTS)]
    TtnPlan(TtnPlanArgs),
    /// Render an image's points as a Gaussian density map.
    #[command(after_help = DEFAULTS)]
    RenderDensity(RenderArgs),
    /// Run the four-setting recipe ablation on synthetic blob scenes.
    #[command(after_help = DEFAULTS)]
    DemoRecipe(DemoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Train,
    Eval,
}

#[derive(Args)]
struct GenMosaicArgs {
    /// Annotation manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Number of collages to build.
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    /// `eval`: 384 px tiles, four distinct classes, four pairs per collage.
    /// `train`: 192 px tiles, one random target per collage.
    #[arg(long, value_enum, default_value = "eval")]
    mode: Mode,
    /// Override the tile size in pixels.
    #[arg(long)]
    tile_size: Option<u32>,
    #[arg(long)]
    seed: u64,
    /// Output manifest (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Companion `pair_id,target_class,gt_count` table (eval mode).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Bins of the count histogram in the printed summary.
    #[arg(long, default_value_t = 10)]
    bins: usize,
}

#[derive(Args)]
struct EvalMetricsArgs {
    /// Predictions CSV with `id` and `pred` columns.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth CSV (`id,gt` or a mosaic pair table). Without --gt or
    /// --manifest the predictions file must itself hold `id,gt,pred` rows.
    #[arg(long, conflicts_with = "manifest")]
    gt: Option<PathBuf>,
    /// Annotation manifest; ground truth is each image's point count.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Also report metrics without the k largest-count images.
    #[arg(long)]
    exclude_top: Option<usize>,
    /// Also report the ground-truth count distribution in n equal-width bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Write the distribution as CSV here (requires --bins).
    #[arg(long, requires = "bins")]
    hist_out: Option<PathBuf>,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GlArgs {
    /// Entropic regularization.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Marginal penalty weight.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Cost bandwidth.
    #[arg(long, default_value_t = DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args)]
struct GlLossArgs {
    /// Density map JSON `{"height", "width", "stride", "values"}`.
    #[arg(long)]
    density: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Image whose points the density is compared with.
    #[arg(long)]
    image: String,
    /// Pixels per density cell; must agree with the density file [default: 4].
    #[arg(long)]
    stride: Option<u32>,
    #[command(flatten)]
    gl: GlArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TtnPlanArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    image: String,
    /// Tiles per side.
    #[arg(long = "tiles-M", default_value_t = DEFAULT_TILES_PER_SIDE)]
    tiles_m: u32,
    /// Mean box-to-query area ratio below which the query is tiled.
    #[arg(long = "threshold-T", default_value_t = DEFAULT_AREA_THRESHOLD)]
    threshold_t: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    image: String,
    /// Pixels per density cell.
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    stride: u32,
    /// Gaussian kernel width in cells.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Demo configuration JSON [default: the built-in configuration].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run, comma separated [default: the configuration's seeds].
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Ablation table CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch loss traces CSV.
    #[arg(long)]
    traces: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenMosaic(a) => gen_mosaic(a),
        Command::EvalMetrics(a) => eval_metrics(a),
        Command::GlLoss(a) => gl_loss_cmd(a),
        Command::TtnPlan(a) => ttn_plan(a),
        Command::RenderDensity(a) => render_density(a),
        Command::DemoRecipe(a) => demo_recipe(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `COUNTFORGE_THREADS` caps the worker pool.
fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("COUNTFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::invalid(format!("COUNTFORGE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::invalid(format!("cannot configure {n} threads: {e}")))
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    Manifest::from_json(&read_text(path)?).map_err(|e| Failure::from(e).context(path))
}

fn find_image<'a>(manifest: &'a Manifest, id: &str) -> Result<&'a AnnotatedImage, Failure> {
    manifest
        .get(id)
        .ok_or_else(|| Failure::invalid(format!("image `{id}` is not in the manifest")))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::invalid(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn gen_mosaic(args: GenMosaicArgs) -> Result<(), Failure> {
    let manifest = load_manifest(&args.manifest)?;
    let mut config = match args.mode {
        Mode::Eval => MosaicConfig::evaluation(),
        Mode::Train => MosaicConfig::training(),
    };
    if let Some(t) = args.tile_size {
        config.tile_size = t;
    }
    let (json, csv, counts, classes) = match args.mode {
        Mode::Eval => {
            let set = generate_fsc_mosaic(&manifest, args.queries, &config, args.seed)?;
            let mut csv = Vec::new();
            set.write_csv(&mut csv)?;
            let counts: Vec<u64> = set.pairs.iter().map(|p| p.gt_count).collect();
            let classes: Vec<&str> = set.pairs.iter().map(|p| p.target_class.as_str()).collect();
            (to_json(&set)?, Some(csv), counts, distinct(&classes))
        }
        Mode::Train => {
            if args.csv.is_some() {
                return Err(Failure::invalid("--csv is only produced in eval mode"));
            }
            let set = generate_training_mosaics(&manifest, args.queries, &config, args.seed)?;
            let counts: Vec<u64> = set.samples.iter().map(|s| s.gt_count).collect();
            let classes: Vec<&str> = set.samples.iter().map(|s| s.target_class.as_str()).collect();
            (to_json(&set)?, None, counts, distinct(&classes))
        }
    };
    write_atomic(&args.out, json.as_bytes())?;
    if let (Some(path), Some(csv)) = (&args.csv, csv) {
        write_atomic(path, &csv)?;
    }

    println!("{}: {}", if matches!(args.mode, Mode::Eval) { "pairs" } else { "samples" }, counts.len());
    println!("classes: {classes}");
    if !counts.is_empty() {
        let records: Vec<CountRecord> = counts.iter().map(|&c| CountRecord::new("", c, 0.0)).collect();
        println!("count histogram:");
        for b in bin_distribution(&records, args.bins)? {
            println!("  [{:.1}, {:.1}]: {}", b.low, b.high, b.count);
        }
    }
    Ok(())
}

fn distinct(labels: &[&str]) -> usize {
    labels.iter().collect::<std::collections::BTreeSet<_>>().len()
}

fn eval_metrics(args: EvalMetricsArgs) -> Result<(), Failure> {
    let pred_text = read_text(&args.pred)?;
    let truth: HashMap<String, u64> = match (&args.gt, &args.manifest) {
        (Some(path), _) => {
            metrics::read_ground_truth_csv(read_text(path)?.as_bytes()).map_err(|e| Failure::from(e).context(path))?
        }
        (None, Some(path)) => load_manifest(path)?
            .images
            .iter()
            .map(|img| (img.id.clone(), img.gt_count() as u64))
            .collect(),
        (None, None) => HashMap::new(),
    };
    let records = if args.gt.is_none() && args.manifest.is_none() {
        // Self-contained `id,gt,pred` table.
        metrics::read_records_csv(pred_text.as_bytes()).map_err(|e| Failure::from(e).context(&args.pred))?
    } else {
        let predictions =
            metrics::read_predictions_csv(pred_text.as_bytes()).map_err(|e| Failure::from(e).context(&args.pred))?;
        let records = metrics::join_records(&predictions, &truth)?;
        let mut seen = std::collections::HashSet::new();
        if let Some((id, _)) = predictions.iter().find(|(id, _)| !seen.insert(id.as_str())) {
            return Err(Failure::invalid(format!("duplicate prediction id `{id}`")));
        }
        if let Some(id) = truth.keys().filter(|id| !seen.contains(id.as_str())).min() {
            return Err(Failure::invalid(format!("ground-truth id `{id}` has no prediction")));
        }
        records
    };
    let mut report = serde_json::Map::new();
    report.insert("metrics".into(), json!(compute_metrics(&records)?));
    if let Some(k) = args.exclude_top {
        report.insert("exclusion".into(), json!(exclusion_report(&records, k)?));
    }
    if let Some(n) = args.bins {
        let bins = bin_distribution(&records, n)?;
        if let Some(path) = &args.hist_out {
            let mut csv = Vec::new();
            metrics::write_histogram_csv(&bins, &mut csv)?;
            write_atomic(path, &csv)?;
        }
        report.insert("distribution".into(), json!(bins));
    }
    emit(args.out.as_deref(), &to_json(&report)?)
}

fn grid_size(extent: u32, stride: u32) -> usize {
    extent.div_ceil(stride) as usize
}

fn gl_loss_cmd(args: GlLossArgs) -> Result<(), Failure> {
    let density: DensityGrid = serde_json::from_str(&read_text(&args.density)?)
        .map_err(|e| Failure::invalid(format!("{}: {e}", args.density.display())))?;
    let manifest = load_manifest(&args.manifest)?;
    let image = find_image(&manifest, &args.image)?;
    let stride = args.stride.unwrap_or(density.stride());
    if stride != density.stride() {
        return Err(Failure::invalid(format!(
            "--stride {stride} disagrees with the density file's stride {}",
            density.stride()
        )));
    }
    let (h, w) = (grid_size(image.height, stride), grid_size(image.width, stride));
    if (density.height(), density.width()) != (h, w) {
        return Err(Failure::invalid(format!(
            "dimension mismatch: image `{}` ({}x{} px, stride {stride}) needs a {h}x{w} grid, got {}x{}",
            image.id,
            image.width,
            image.height,
            density.height(),
            density.width()
        )));
    }
    let config = GlConfig {
        epsilon: args.gl.epsilon,
        tau: args.gl.tau,
        eta: args.gl.eta,
        max_iters: args.gl.max_iters,
        tol: args.gl.tol,
    };
    config.validate()?;
    let cells = grid_coords(h, w)?;
    let points = cells.normalize_points(&countforge::density::points_to_grid_frame(&image.points, stride)?)?;
    let cost = cost_matrix(&cells, &points, config.eta)?;
    let res = gl_loss(&density, &cost, &config)?;
    let report = json!({
        "loss": res.loss,
        "count": total_count(&density),
        "grad_norm": res.grad_a.iter().map(|g| g * g).sum::<f64>().sqrt(),
        "iterations": res.iterations,
        "converged": res.converged,
    });
    emit(args.out.as_deref(), &to_json(&report)?)?;
    if !res.converged {
        return Err(Failure::new(
            4,
            format!("solver did not converge within {} iterations; the report is partial", config.max_iters),
        ));
    }
    Ok(())
}

fn ttn_plan(args: TtnPlanArgs) -> Result<(), Failure> {
    let manifest = load_manifest(&args.manifest)?;
    let image = find_image(&manifest, &args.image)?;
    let config = TtnConfig {
        tiles_per_side: args.tiles_m,
        area_threshold: args.threshold_t,
    };
    let plan = plan_query(&image.boxes, image.width, image.height, &config)?;
    emit(args.out.as_deref(), &to_json(&plan)?)
}

fn render_density(args: RenderArgs) -> Result<(), Failure> {
    let manifest = load_manifest(&args.manifest)?;
    let image = find_image(&manifest, &args.image)?;
    if args.stride == 0 {
        return Err(Failure::invalid("--stride must be positive"));
    }
    let grid = render_gaussian_density(
        &image.points,
        grid_size(image.height, args.stride),
        grid_size(image.width, args.stride),
        args.stride,
        args.sigma,
    )?;
    emit(args.out.as_deref(), &to_json(&grid)?)
}

fn demo_recipe(args: DemoArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => serde_json::from_str::<DemoConfig>(&read_text(path)?)
            .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?,
        None => DemoConfig::checked_in(),
    };
    if !args.seed.is_empty() {
        config.seeds = args.seed.clone();
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    let ablation = run_ablation(&config)?;

    let nae = |label: &str| ablation.row(label).map_or(f64::NAN, |r| r.report.nae);
    let holds = nae("S4") < nae("S1").min(nae("S2")).min(nae("S3"));
    let flag = match (config.train.epochs, holds) {
        (0, _) => "ordering-not-asserted",
        (_, true) => "ordering-holds",
        (_, false) => "ordering-violated",
    };

    let mut rows = vec![["seed", "setting", "MAE", "RMSE", "NAE", "SRE", "flag"].map(String::from).to_vec()];
    let fmt = |m: &countforge::metrics::MetricReport| {
        [m.mae, m.rmse, m.nae, m.sre].map(|v| format!("{v:.6}")).to_vec()
    };
    for seed in &config.seeds {
        for run in ablation.runs.iter().filter(|r| r.seed == *seed) {
            let mut row = vec![seed.to_string(), run.setting.label().to_string()];
            row.extend(fmt(&run.eval.report));
            row.push(String::new());
            rows.push(row);
        }
    }
    for r in &ablation.rows {
        let mut row = vec!["all".to_string(), r.setting.label().to_string()];
        row.extend(fmt(&r.report));
        row.push(flag.to_string());
        rows.push(row);
    }
    let table: String = rows.iter().map(|r| r.join(",") + "\n").collect();

    let mut traces = Vec::new();
    ablation.write_traces_csv(&mut traces)?;
    if let Some(path) = &args.traces {
        write_atomic(path, &traces)?;
    }
    emit(args.out.as_deref(), &table)?;

    match flag {
        "ordering-violated" => Err(Failure::new(
            1,
            format!(
                "S4 is not the best setting: NAE S1 {:.4}, S2 {:.4}, S3 {:.4}, S4 {:.4}",
                nae("S1"),
                nae("S2"),
                nae("S3"),
                nae("S4")
            ),
        )),
        "ordering-not-asserted" => {
            eprintln!("warning: zero training epochs, ablation ordering not asserted");
            Ok(())
        }
        _ => Ok(()),
    }
}

impl From<countforge::Error> for Failure {
    fn from(e: countforge::Error) -> Self {
        let code = match e.family() {
            ErrorFamily::Validation | ErrorFamily::Io => 2,
            ErrorFamily::ZeroCount => 3,
            ErrorFamily::Numerical => 4,
        };
        Failure::new(code, e.to_string())
    }
}
