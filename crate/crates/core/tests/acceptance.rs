//! Acceptance suite. Each test checks one exit criterion and prints a
//! single `[PASS]`/`[FAIL]` line. Lines go straight to the stderr handle,
//! bypassing the harness's output capture, so they show on every run.

use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use countforge::demo::{run_ablation, DemoConfig};
use countforge::gl::{brute_force_gl, finite_diff_grad, solve, GlConfig};
use countforge::metrics::{compute_metrics, exclusion_report, CountRecord};
use countforge::mosaic::{generate_fsc_mosaic, recount_pair, synthetic_manifest, MosaicConfig};
use countforge::transport::{cost_matrix, grid_coords, CostMatrix};
use countforge::ttn::{plan_tiles, should_normalize, TtnConfig};
use countforge::{BoundingBox, Point, PointSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria run one at a time so the runtime budgets measure only themselves.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, ok: bool, detail: String) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {id}: {name} ({detail})");
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

/// Random GL instance on a 1 x n grid with m points in the unit square.
fn random_instance(rng: &mut ChaCha8Rng, m_max: usize) -> (Vec<f64>, CostMatrix) {
    let n = rng.gen_range(1..=6);
    let m = rng.gen_range(0..=m_max);
    let (h, w) = if rng.gen_bool(0.5) { (1, n) } else { (n, 1) };
    let cells = grid_coords(h, w).unwrap();
    let points = PointSet::new(
        (0..m)
            .map(|_| Point::new(rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)))
            .collect(),
    )
    .unwrap();
    let a = (0..n).map(|_| rng.gen_range(0.0..=2.0)).collect();
    (a, cost_matrix(&cells, &points, 0.6).unwrap())
}

#[test]
fn c1_gl_matches_brute_force_oracle() {
    let _guard = exclusive();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c_0001);
    let config = GlConfig::default();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for _ in 0..240 {
        let (a, cost) = random_instance(&mut rng, 4);
        let fast = solve(&a, &cost, &config).unwrap();
        let reference = brute_force_gl(&a, &cost, &config).unwrap();
        let gap = (fast.loss - reference).abs() / fast.loss.abs().max(1.0);
        worst = worst.max(gap);
        count += 1;
    }
    let elapsed = start.elapsed();
    report(
        1,
        "GL oracle equivalence",
        count >= 200 && worst <= 1e-3 && elapsed < Duration::from_secs(60),
        format!("{count} instances, worst relative gap {worst:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn c2_gl_gradient_matches_finite_differences() {
    let _guard = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c_0002);
    let config = GlConfig { tol: 1e-10, ..GlConfig::default() };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 60 {
        let (a, cost) = random_instance(&mut rng, 4);
        if cost.cols() == 0 {
            continue;
        }
        let analytic = solve(&a, &cost, &config).unwrap().grad_a;
        let numeric = finite_diff_grad(&a, &cost, &config, 1e-5).unwrap();
        let diff = analytic.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|x| x * x).sum::<f64>().sqrt()
            .max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
        checked += 1;
    }

    // No points: the loss is tau * |a|^2 and the gradient 2 * tau * a, exactly.
    let a = [0.3, 0.0, 1.7, 0.25];
    let empty = CostMatrix::from_values(4, 0, vec![]).unwrap();
    let closed = solve(&a, &empty, &config).unwrap();
    let exact = closed.grad_a.iter().zip(&a).all(|(g, x)| *g == 2.0 * config.tau * x);

    report(
        2,
        "GL gradient vs central differences",
        worst <= 1e-3 && exact,
        format!("{checked} instances, worst relative error {worst:.2e}, m=0 exact: {exact}"),
    );
}

#[test]
fn c3_gl_loss_non_decreasing_in_distance() {
    let _guard = exclusive();
    // One unit of mass in the top-left cell of an 8x8 grid; the point walks
    // away along the diagonal.
    let cells = grid_coords(8, 8).unwrap();
    let mut a = vec![0.0; 64];
    a[0] = 1.0;
    let origin = cells.coords()[0];
    let config = GlConfig { tol: 1e-12, ..GlConfig::default() };
    let mut losses = Vec::new();
    for step in 0..20 {
        let d = step as f64 * 0.045;
        let p = Point::new(origin.x + d, origin.y + d);
        let pts = PointSet::new(vec![p]).unwrap();
        let cost = cost_matrix(&cells, &pts, config.eta).unwrap();
        losses.push(solve(&a, &cost, &config).unwrap().loss);
    }
    let violations = losses.windows(2).filter(|w| w[1] < w[0]).count();
    report(
        3,
        "GL distance monotonicity",
        violations == 0,
        format!(
            "20 distances, loss {:.6} -> {:.6}, {violations} decreases",
            losses[0],
            losses[19]
        ),
    );
}

#[test]
fn c4_metrics_fixtures_and_skew() {
    let _guard = exclusive();
    let hand = compute_metrics(&[CountRecord::new("a", 10, 12.0), CountRecord::new("b", 20, 24.0)]).unwrap();
    let fixtures_ok = (hand.mae - 3.0).abs() <= 1e-9
        && (hand.rmse - 10f64.sqrt()).abs() <= 1e-9
        && (hand.nae - 0.2).abs() <= 1e-9
        && (hand.sre - 0.6f64.sqrt()).abs() <= 1e-9;

    // 998 ordinary images off by 10%, two huge ones off by 30%.
    let mut records: Vec<CountRecord> = (0..998)
        .map(|i| {
            let gt = 1 + (i % 100) as u64;
            CountRecord::new(format!("small{i:03}"), gt, gt as f64 * 1.1)
        })
        .collect();
    records.push(CountRecord::new("huge0", 2000, 1400.0));
    records.push(CountRecord::new("huge1", 3000, 2100.0));
    let ex = exclusion_report(&records, 2).unwrap();
    let rmse_change = (ex.full.rmse - ex.excluded.rmse).abs() / ex.full.rmse;
    let nae_change = (ex.full.nae - ex.excluded.nae).abs() / ex.full.nae;
    report(
        4,
        "metrics fixtures and skew sensitivity",
        fixtures_ok && rmse_change > 0.5 && nae_change < 0.05,
        format!(
            "MAE {} RMSE {:.12} NAE {} SRE {:.12}; top-2 exclusion changes RMSE by {:.1}% and NAE by {:.2}%",
            hand.mae,
            hand.rmse,
            hand.nae,
            hand.sre,
            100.0 * rmse_change,
            100.0 * nae_change
        ),
    );
}

#[test]
fn c5_mosaic_integrity() {
    let _guard = exclusive();
    let manifest = synthetic_manifest(200, 20, 400, 0x5eed).unwrap();
    let config = MosaicConfig::evaluation();
    let start = Instant::now();
    let first = generate_fsc_mosaic(&manifest, 1000, &config, 2024).unwrap();
    let first_json = first.to_json().unwrap();
    let elapsed = start.elapsed();
    let second_json = generate_fsc_mosaic(&manifest, 1000, &config, 2024).unwrap().to_json().unwrap();

    let mut conserved = true;
    for mosaic in first.pairs.chunks(4) {
        let emitted: u64 = mosaic.iter().map(|p| p.gt_count).sum();
        let retained: u64 = mosaic[0]
            .tiles
            .iter()
            .map(|rect| {
                let img = manifest.get(&rect.source_id).unwrap();
                img.points.iter().filter(|p| rect.contains_point(p)).count() as u64
            })
            .sum();
        conserved &= emitted == retained && mosaic.iter().all(|p| p.mosaic_id == mosaic[0].mosaic_id);
    }
    let recount_mismatches = first
        .pairs
        .iter()
        .filter(|p| recount_pair(&manifest, p).unwrap() != p.gt_count)
        .count();
    let identical = first_json == second_json;
    report(
        5,
        "mosaic integrity",
        first.pairs.len() == 4000 && conserved && identical && recount_mismatches == 0 && elapsed < Duration::from_secs(30),
        format!(
            "{} pairs, mass conserved: {conserved}, byte-identical: {identical}, recount mismatches: {recount_mismatches}, {elapsed:.2?}",
            first.pairs.len()
        ),
    );
}

#[test]
fn c6_test_time_normalization() {
    let _guard = exclusive();
    let config = TtnConfig::default();
    let plan = plan_tiles(768, 768, &config).unwrap();
    let area: u64 = plan.tiles.iter().map(|t| t.area()).sum();
    let disjoint = plan
        .tiles
        .iter()
        .enumerate()
        .all(|(i, a)| plan.tiles[i + 1..].iter().all(|b| !a.intersects(b)));
    let grid_ok = plan.tiles.len() == 64 && area == 768 * 768 && disjoint;

    let square = |s: f64| BoundingBox::new(0.0, 0.0, s, s).unwrap();
    let thresholds_ok = should_normalize(&[square(10.0); 3], 768, 768, &config).unwrap()
        && !should_normalize(&[square(100.0)], 768, 768, &config).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0x77_0006);
    let mut partition_failures = 0;
    for _ in 0..1000 {
        let m = rng.gen_range(1..=16);
        let (w, h) = (rng.gen_range(m..=2000), rng.gen_range(m..=2000));
        let cfg = TtnConfig { tiles_per_side: m, ..config };
        let p = plan_tiles(w, h, &cfg).unwrap();
        let covered: u64 = p.tiles.iter().map(|t| t.area()).sum();
        let ok = p.tiles.len() as u32 == m * m
            && covered == u64::from(w) * u64::from(h)
            && p.tiles.iter().all(|t| t.x + t.w <= w && t.y + t.h <= h)
            && p.tiles.iter().enumerate().all(|(i, a)| p.tiles[i + 1..].iter().all(|b| !a.intersects(b)));
        partition_failures += usize::from(!ok);
    }
    report(
        6,
        "test-time normalization",
        grid_ok && thresholds_ok && partition_failures == 0,
        format!(
            "768x768 M=8: {} tiles, covering: {}, disjoint: {disjoint}; threshold fixtures: {thresholds_ok}; \
             {partition_failures}/1000 random partitions failed",
            plan.tiles.len(),
            area == 768 * 768
        ),
    );
}

#[test]
fn c7_recipe_demonstration() {
    let _guard = exclusive();
    let config = DemoConfig::checked_in();
    let start = Instant::now();
    let ablation = run_ablation(&config).unwrap();
    let elapsed = start.elapsed();
    let nae = |label: &str| ablation.row(label).unwrap().report.nae;
    let s1 = ablation.row("S1").unwrap();
    let s4 = nae("S4");
    let ordering = s4 < nae("S1").min(nae("S2")).min(nae("S3"));
    let over_counts = s1.mean_pred > s1.mean_gt;
    for row in &ablation.rows {
        println!(
            "  {}: NAE {:.4}, MAE {:.3}, mean pred {:.2} vs gt {:.2}, localization {:.3}",
            row.setting.label(),
            row.report.nae,
            row.report.mae,
            row.mean_pred,
            row.mean_gt,
            row.localization
        );
    }
    report(
        7,
        "recipe demonstration",
        ordering && over_counts && elapsed < Duration::from_secs(180),
        format!(
            "{} seeds; NAE S1 {:.3} S2 {:.3} S3 {:.3} S4 {:.3}; S1 mean pred {:.2} vs gt {:.2}; {elapsed:.1?}",
            config.seeds.len(),
            nae("S1"),
            nae("S2"),
            nae("S3"),
            s4,
            s1.mean_pred,
            s1.mean_gt
        ),
    );
}

#[test]
fn c8_determinism() {
    let _guard = exclusive();
    let manifest = synthetic_manifest(60, 8, 400, 8).unwrap();
    let mosaic = || {
        let out = generate_fsc_mosaic(&manifest, 100, &MosaicConfig::evaluation(), 88).unwrap();
        let mut csv = Vec::new();
        out.write_csv(&mut csv).unwrap();
        (out.to_json().unwrap().into_bytes(), csv)
    };
    let mosaic_same = mosaic() == mosaic();

    // The full checked-in demo, restricted to one seed to bound the runtime.
    let mut config = DemoConfig::checked_in();
    config.seeds.truncate(1);
    let demo = || {
        let ablation = run_ablation(&config).unwrap();
        let (mut table, mut traces) = (Vec::new(), Vec::new());
        ablation.write_table_csv(&mut table).unwrap();
        ablation.write_traces_csv(&mut traces).unwrap();
        let params: Vec<String> = ablation.runs.iter().map(|r| format!("{:?}", r.outcome.params)).collect();
        (table, traces, params)
    };
    let demo_same = demo() == demo();
    report(
        8,
        "determinism",
        mosaic_same && demo_same,
        format!("mosaic JSON+CSV identical: {mosaic_same}; demo table, traces and params identical: {demo_same}"),
    );
}
