//! Desk-scale recipe demonstration: a matched-filter counter trained on blob
//! scenes under the four {mosaic, GL} ablation settings, then scored on
//! two-class scenes where only the reference class should be counted.

mod model;
mod scene;

pub use model::{predict, Prediction, Query, ToyModelParams, WINDOW_FLOOR};
pub use scene::{synth_scene, synth_scene_with_counts, BlobScene, BlobSceneSpec, PLACEMENT_RETRIES};

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::render_gaussian_density;
use crate::error::{Error, Result};
use crate::gl::{l2_values, solve, solve_warm, GlConfig};
use crate::metrics::{compute_metrics, CountRecord, MetricReport};
use crate::mosaic::child_rng;
use crate::transport::{cost_matrix, grid_coords, CostMatrix};

/// The configuration shipped with the crate.
pub const CHECKED_IN_CONFIG: &str = include_str!("../../data/demo_config.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationSetting {
    pub use_ma: bool,
    pub use_gl: bool,
}

impl AblationSetting {
    /// S1..S4: neither, mosaic only, GL only, both.
    pub const ALL: [AblationSetting; 4] = [
        AblationSetting { use_ma: false, use_gl: false },
        AblationSetting { use_ma: true, use_gl: false },
        AblationSetting { use_ma: false, use_gl: true },
        AblationSetting { use_ma: true, use_gl: true },
    ];

    pub fn label(&self) -> &'static str {
        match (self.use_ma, self.use_gl) {
            (false, false) => "S1",
            (true, false) => "S2",
            (false, true) => "S3",
            (true, true) => "S4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Adam step size.
    pub step_size: f64,
    /// Ground-truth kernel width for the L2 target, in cells.
    pub sigma: f64,
    pub gl: GlConfig,
    pub init: ToyModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ToyModelParams,
    /// Mean loss per epoch.
    pub trace: Vec<f64>,
}

/// Per-scene, per-class training targets.
enum Target {
    Dense(Vec<f64>),
    Transport(CostMatrix),
}

fn targets(scene: &BlobScene, use_gl: bool, config: &TrainConfig) -> Result<[Target; 2]> {
    let make = |class: usize| -> Result<Target> {
        let points = &scene.points[class];
        if use_gl {
            let cells = grid_coords(scene.height, scene.width)?;
            let pts = cells.normalize_points(points)?;
            Ok(Target::Transport(cost_matrix(&cells, &pts, config.gl.eta)?))
        } else {
            let grid = render_gaussian_density(points, scene.height, scene.width, 1, config.sigma)?;
            Ok(Target::Dense(grid.into_values()))
        }
    };
    Ok([make(0)?, make(1)?])
}

/// Adam on `(gain, bias, ln bandwidth)`.
struct Adam {
    m: [f64; 3],
    v: [f64; 3],
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, theta: &mut [f64; 3], grad: [f64; 3], lr: f64) {
        self.t += 1;
        for k in 0..3 {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * grad[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * grad[k] * grad[k];
            let mh = self.m[k] / (1.0 - Self::B1.powi(self.t));
            let vh = self.v[k] / (1.0 - Self::B2.powi(self.t));
            theta[k] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Trains the counter with one step per scene per epoch.
///
/// With mosaic augmentation every step picks a random class of the
/// (multi-class) scene as reference; without it the scene's own reference is
/// used. The loss is L2 against Gaussian ground truth, or GL with its
/// gradient chained through the model.
pub fn train_toy<R: Rng + ?Sized>(
    setting: AblationSetting,
    spec: &BlobSceneSpec,
    scenes: &[BlobScene],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    config.init.validate()?;
    config.gl.validate()?;
    if !(config.step_size > 0.0 && config.step_size.is_finite()) {
        return Err(Error::param("step_size", "must be positive"));
    }
    if config.epochs == 0 {
        return Ok(TrainOutcome { params: config.init, trace: Vec::new() });
    }
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no training scenes".into()));
    }
    let templates = [spec.template(0), spec.template(1)];
    let prepared = scenes
        .iter()
        .map(|s| Ok((Query::from_scene(s, spec.template_radius)?, targets(s, setting.use_gl, config)?)))
        .collect::<Result<Vec<_>>>()?;

    let init = config.init;
    let mut theta = [init.gain, init.bias, init.bandwidth.ln()];
    let mut adam = Adam { m: [0.0; 3], v: [0.0; 3], t: 0 };
    // GL dual potentials from the previous visit of each (scene, class).
    let mut warm: Vec<[Option<Vec<f64>>; 2]> = vec![[None, None]; scenes.len()];
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for ((scene, (query, target)), warm) in scenes.iter().zip(&prepared).zip(&mut warm) {
            let class = if setting.use_ma {
                let present: Vec<usize> = (0..2).filter(|&c| !scene.points[c].is_empty()).collect();
                if present.is_empty() { scene.reference } else { present[rng.gen_range(0..present.len())] }
            } else {
                scene.reference
            };
            let params = ToyModelParams { gain: theta[0], bias: theta[1], bandwidth: theta[2].exp() };
            let pred = predict(&params, query, &templates[class])?;
            let (loss, grad) = match &target[class] {
                Target::Dense(y) => l2_values(pred.values(), y),
                Target::Transport(cost) => {
                    let res = match &warm[class] {
                        Some(f) => solve_warm(pred.values(), cost, &config.gl, f)?,
                        None => solve(pred.values(), cost, &config.gl)?,
                    };
                    warm[class] = Some(res.row_potential);
                    (res.loss, res.grad_a)
                }
            };
            if !loss.is_finite() {
                trace.push(loss);
                return Err(Error::Numerical(format!(
                    "{} diverged at epoch {epoch}; loss trace {trace:?}",
                    setting.label()
                )));
            }
            total += loss;
            let g = pred.vjp(&grad);
            adam.step(&mut theta, [g[0], g[1], g[2] * params.bandwidth], config.step_size);
        }
        trace.push(total / scenes.len() as f64);
    }
    let params = ToyModelParams { gain: theta[0], bias: theta[1], bandwidth: theta[2].exp() };
    params.validate()?;
    Ok(TrainOutcome { params, trace })
}

/// Evaluation detail beyond the standard metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub records: Vec<CountRecord>,
    pub report: MetricReport,
    pub mean_pred: f64,
    pub mean_gt: f64,
    /// Share of predicted mass within `radius` cells of a reference-class point.
    pub localization: f64,
}

/// Counts every scene's reference class and scores the counts.
pub fn evaluate_toy(params: &ToyModelParams, spec: &BlobSceneSpec, scenes: &[BlobScene]) -> Result<MetricReport> {
    Ok(evaluate_detailed(params, spec, scenes, 2.0)?.report)
}

pub fn evaluate_detailed(
    params: &ToyModelParams,
    spec: &BlobSceneSpec,
    scenes: &[BlobScene],
    radius: f64,
) -> Result<EvalSummary> {
    let templates = [spec.template(0), spec.template(1)];
    let mut records = Vec::with_capacity(scenes.len());
    let (mut near, mut mass) = (0.0, 0.0);
    for (k, scene) in scenes.iter().enumerate() {
        let query = Query::from_scene(scene, spec.template_radius)?;
        let pred = predict(params, &query, &templates[scene.reference])?;
        records.push(CountRecord::new(format!("scene{k:04}-c{}", scene.reference), scene.gt_count() as u64, pred.count()));
        let targets = &scene.points[scene.reference];
        for (i, d) in pred.values().iter().enumerate() {
            let centre = crate::Point::new((i % scene.width) as f64 + 0.5, (i / scene.width) as f64 + 0.5);
            if targets.iter().any(|p| p.distance(&centre) <= radius) {
                near += d;
            }
            mass += d;
        }
    }
    let report = compute_metrics(&records)?;
    let n = records.len() as f64;
    Ok(EvalSummary {
        mean_pred: records.iter().map(|r| r.pred).sum::<f64>() / n,
        mean_gt: records.iter().map(|r| r.gt as f64).sum::<f64>() / n,
        localization: if mass > 0.0 { near / mass } else { 0.0 },
        records,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub scene: BlobSceneSpec,
    pub train_scenes: usize,
    /// Two-class evaluation scenes per seed; each is scored once per class.
    pub eval_scenes: usize,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub localization_radius: f64,
}

impl DemoConfig {
    pub fn checked_in() -> Self {
        serde_json::from_str(CHECKED_IN_CONFIG).expect("checked-in demo config parses")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::param("train_scenes/eval_scenes", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("seeds", "at least one seed is required"));
        }
        if self.scene.counts.iter().any(|(lo, _)| *lo == 0) {
            return Err(Error::param("counts", "evaluation needs at least one blob per class"));
        }
        Ok(())
    }
}

// Stream ids for the per-seed generators.
const SINGLE_STREAM: u64 = 0;
const MULTI_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;

fn scenes(spec: &BlobSceneSpec, n: usize, multi: bool, seed: u64, stream: u64) -> Result<Vec<BlobScene>> {
    let mut rng = child_rng(seed, stream);
    (0..n).map(|_| synth_scene(spec, multi, &mut rng)).collect()
}

/// Two-class evaluation scenes, each listed once per reference class.
pub fn eval_scenes(config: &DemoConfig, seed: u64) -> Result<Vec<BlobScene>> {
    Ok(scenes(&config.scene, config.eval_scenes, true, seed, EVAL_STREAM)?
        .iter()
        .flat_map(|s| [s.with_reference(0), s.with_reference(1)])
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub setting: AblationSetting,
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub eval: EvalSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: AblationSetting,
    /// Metrics over the pooled evaluation records of every seed.
    pub report: MetricReport,
    pub mean_pred: f64,
    pub mean_gt: f64,
    pub localization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting.label() == label)
    }

    /// `setting,MAE,RMSE,NAE,SRE`.
    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["setting", "MAE", "RMSE", "NAE", "SRE"])?;
        for r in &self.rows {
            let m = &r.report;
            w.write_record([
                r.setting.label().to_string(),
                format!("{:.6}", m.mae),
                format!("{:.6}", m.rmse),
                format!("{:.6}", m.nae),
                format!("{:.6}", m.sre),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `setting,seed,epoch,loss`.
    pub fn write_traces_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["setting", "seed", "epoch", "loss"])?;
        for run in &self.runs {
            for (epoch, loss) in run.outcome.trace.iter().enumerate() {
                w.write_record([
                    run.setting.label().to_string(),
                    run.seed.to_string(),
                    epoch.to_string(),
                    format!("{loss:e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains and evaluates all four settings for every seed. Runs are
/// independent and execute in parallel; results do not depend on scheduling.
pub fn run_ablation(config: &DemoConfig) -> Result<AblationReport> {
    config.validate()?;
    let jobs: Vec<(u64, AblationSetting)> = config
        .seeds
        .iter()
        .flat_map(|&s| AblationSetting::ALL.iter().map(move |&a| (s, a)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, setting)| {
            let (multi, stream) = if setting.use_ma { (true, MULTI_STREAM) } else { (false, SINGLE_STREAM) };
            let train = scenes(&config.scene, config.train_scenes, multi, seed, stream)?;
            let mut rng = child_rng(seed, TRAIN_STREAM);
            let outcome = train_toy(setting, &config.scene, &train, &config.train, &mut rng)?;
            let eval = evaluate_detailed(
                &outcome.params,
                &config.scene,
                &eval_scenes(config, seed)?,
                config.localization_radius,
            )?;
            Ok(AblationRun { setting, seed, outcome, eval })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = AblationSetting::ALL
        .iter()
        .map(|&setting| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.setting == setting).collect();
            let records: Vec<CountRecord> = mine.iter().flat_map(|r| r.eval.records.clone()).collect();
            let k = mine.len() as f64;
            Ok(AblationRow {
                setting,
                report: compute_metrics(&records)?,
                mean_pred: mine.iter().map(|r| r.eval.mean_pred).sum::<f64>() / k,
                mean_gt: mine.iter().map(|r| r.eval.mean_gt).sum::<f64>() / k,
                localization: mine.iter().map(|r| r.eval.localization).sum::<f64>() / k,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows, runs })
}
