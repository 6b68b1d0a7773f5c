//! End-to-end acceptance run: one line per criterion, non-zero exit when any
//! criterion fails. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use domainpore::dataprep::*;
use domainpore::detector::*;
use domainpore::evalkit::*;
use domainpore::porenet::*;
use domainpore::trainer::*;
use domainpore::Plane;
use ndgrad::gradcheck::{check_gradients, GradCheckReport};
use ndgrad::{BnMode, Grid4, ParamGroup, ParamVars, RunningStats, Shape4, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn random_grid(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64, hi: f64) -> Grid4<f64> {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Grid4::from_vec(shape, data).unwrap()
}

/// Linear functional of `v` with fixed random weights, so every element
/// receives its own upstream gradient.
fn project(t: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = t.value(v).shape();
    let w = random_grid(&mut ChaCha8Rng::seed_from_u64(seed), shape, -1.0, 1.0);
    let wv = t.constant(w);
    let zero = t.constant(Grid4::zeros(shape));
    let neg_w = t.scale(wv, -1.0);
    let a = t.mse_loss(v, neg_w).unwrap();
    let b = t.mse_loss(v, zero).unwrap();
    let nb = t.scale(b, -1.0);
    t.residual_add(a, nb).unwrap()
}

// ------------------------------------------------------------------ 1

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
    let all = usize::MAX;

    for k in [1usize, 3, 7] {
        let x = random_grid(&mut rng, Shape4::new(2, 2, 6, 5), -1.0, 1.0);
        let w = random_grid(&mut rng, Shape4::new(3, 2, k, k), -1.0, 1.0);
        let b = random_grid(&mut rng, Shape4::new(3, 1, 1, 1), -1.0, 1.0);
        let r = check_gradients(&[x, w, b], FD_STEP, all, |t, v| {
            let y = t.conv2d_same(v[0], v[1], Some(v[2]))?;
            Ok(project(t, y, 1))
        });
        reports.push((format!("conv2d k={k}"), r.map_err(|e| e.to_string())?));
    }
    for (name, mode) in [("batch_norm train", BnMode::train()), ("batch_norm eval", BnMode::Eval)] {
        let x = random_grid(&mut rng, Shape4::new(3, 2, 3, 3), -2.0, 2.0);
        let g = random_grid(&mut rng, Shape4::new(2, 1, 1, 1), 0.5, 1.5);
        let b = random_grid(&mut rng, Shape4::new(2, 1, 1, 1), -0.5, 0.5);
        let r = check_gradients(&[x, g, b], FD_STEP, all, |t, v| {
            let mut s = RunningStats { mean: vec![0.3, -0.2], var: vec![1.4, 0.7] };
            let y = t.batch_norm(v[0], v[1], v[2], &mut s, mode)?;
            Ok(project(t, y, 2))
        });
        reports.push((name.into(), r.map_err(|e| e.to_string())?));
    }
    {
        // Inputs kept away from the ReLU kink.
        let x = random_grid(&mut rng, Shape4::new(2, 3, 2, 2), 0.1, 1.0)
            .map(|v| if (v * 1e4) as i64 % 2 == 0 { v } else { -v });
        let y = random_grid(&mut rng, Shape4::new(2, 3, 2, 2), -1.0, 1.0);
        let r = check_gradients(&[x, y], FD_STEP, all, |t, v| {
            let a = t.relu(v[0]);
            let s = t.residual_add(a, v[1])?;
            let f = t.flatten(s);
            let sum = t.sum(f);
            let p = project(t, f, 3);
            let q = t.scale(sum, 0.1);
            t.residual_add(p, q)
        });
        reports.push(("relu/add/flatten/sum/scale".into(), r.map_err(|e| e.to_string())?));
    }
    {
        let x = random_grid(&mut rng, Shape4::new(3, 5, 1, 1), -1.0, 1.0);
        let w = random_grid(&mut rng, Shape4::new(4, 5, 1, 1), -1.0, 1.0);
        let b = random_grid(&mut rng, Shape4::new(4, 1, 1, 1), -1.0, 1.0);
        let r = check_gradients(&[x, w, b], FD_STEP, all, |t, v| {
            let h = t.linear(v[0], v[1], v[2])?;
            let p = t.softmax_rows(h);
            t.cross_entropy(p, &[0, 3, 1])
        });
        reports.push(("linear/softmax/cross_entropy".into(), r.map_err(|e| e.to_string())?));
    }
    {
        let a = random_grid(&mut rng, Shape4::new(2, 1, 3, 3), -1.0, 1.0);
        let b = random_grid(&mut rng, Shape4::new(2, 1, 3, 3), -1.0, 1.0);
        let r = check_gradients(&[a, b], FD_STEP, all, |t, v| t.mse_loss(v[0], v[1]));
        reports.push(("mse".into(), r.map_err(|e| e.to_string())?));
    }
    {
        // With lambda = -1 the reversed gradient is the true derivative.
        let x = random_grid(&mut rng, Shape4::new(2, 3, 1, 1), -1.0, 1.0);
        let r = check_gradients(&[x], FD_STEP, all, |t, v| {
            let y = t.gradient_reversal(v[0], -1.0);
            Ok(project(t, y, 4))
        });
        reports.push(("gradient_reversal(-1)".into(), r.map_err(|e| e.to_string())?));
    }

    // Two residual blocks (one identity, one projection) at 1/8 width, with
    // the domain head attached without reversal so the objective is a plain
    // function of every parameter.
    let pore = ResPoreConfig {
        input_size: 16,
        stage_channels: vec![64, 64, 128],
        blocks_per_stage: 1,
        width_multiplier: WidthMultiplier::new(1, 8).unwrap(),
        ..ResPoreConfig::default()
    };
    let head = DomainHeadConfig { hidden_dims: vec![6], ..DomainHeadConfig::for_map(&pore) };
    let arch = Architecture::new(pore, head).map_err(|e| e.to_string())?;
    ensure!(arch.pore.residual_blocks() == 2, "expected two residual blocks");
    let params = arch.init_params::<f64>(5).map_err(|e| e.to_string())?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let values: Vec<Grid4<f64>> = names.iter().map(|n| params.get(n).unwrap().value.clone()).collect();
    let x = random_grid(&mut rng, Shape4::new(2, 1, 16, 16), 0.0, 1.0);
    let y = random_grid(&mut rng, Shape4::new(2, 1, 16, 16), 0.0, 1.0);
    let bn0 = arch.init_bn();
    let r = check_gradients(&values, FD_STEP, 200, |t, v| {
        let vars: ParamVars = names.iter().cloned().zip(v.iter().copied()).collect();
        let mut bn = bn0.clone();
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let yhat = arch.forward_pore(t, &vars, &mut BnUse::Train(&mut bn), xv).map_err(nd)?;
        let l_pore = t.mse_loss(yhat, yv)?;
        let p = arch.forward_domain(t, &vars, yhat, None).map_err(nd)?;
        let l_d = t.cross_entropy(p, &[0, 1])?;
        t.residual_add(l_pore, l_d)
    })
    .map_err(|e| e.to_string())?;
    reports.push((format!("network ({} tensors)", names.len()), r));

    let elapsed = start.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap();
    for (name, r) in &reports {
        ensure!(r.checked > 0 && r.passes(FD_TOL), "{name}: rel error {:.2e} at {:?}", r.max_rel_error, r.worst);
    }
    ensure!(elapsed <= 60.0, "took {elapsed:.1}s");
    let checked: usize = reports.iter().map(|r| r.1.checked).sum();
    Ok(format!(
        "{} checks, {checked} entries, worst rel error {:.2e} ({}), {elapsed:.1}s",
        reports.len(),
        worst.1.max_rel_error,
        worst.0
    ))
}

fn nd(e: domainpore::Error) -> ndgrad::NdError {
    match e {
        domainpore::Error::Nd(inner) => inner,
        other => panic!("unexpected error inside gradient check: {other}"),
    }
}

// ------------------------------------------------------------------ 2

fn eighth(blocks: usize) -> ResPoreConfig {
    ResPoreConfig { blocks_per_stage: blocks, ..ResPoreConfig::scaled(1, 8).unwrap() }
}

fn grl_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let x = random_grid(&mut rng, Shape4::new(3, 4, 5, 5), -3.0, 3.0);
    let target = random_grid(&mut rng, Shape4::new(3, 4, 5, 5), -1.0, 1.0);
    for lambda in [0.0, 0.005, 0.37, 1.0, 12.5] {
        let run = |reverse: bool| {
            let mut t = Tape::<f64>::new();
            let xv = t.param(x.clone());
            let y = if reverse { t.gradient_reversal(xv, lambda) } else { xv };
            t.retain_grad(y);
            let tv = t.constant(target.clone());
            let l = t.mse_loss(y, tv).unwrap();
            t.backward(l).unwrap();
            (t.value(y).clone(), t.grad(y).unwrap().clone(), t.grad(xv).unwrap().clone())
        };
        let (fwd, upstream, gx) = run(true);
        let (plain, _, _) = run(false);
        let bits = |g: &Grid4<f64>| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&fwd) == bits(&plain) && bits(&fwd) == bits(&x), "forward altered at lambda {lambda}");
        let expected = upstream.map(|g| -lambda * g);
        ensure!(bits(&gx) == bits(&expected), "backward is not exactly -lambda * upstream at lambda {lambda}");
    }

    let (src, tgt) = small_batches(201, 4);
    let cfg = TrainConfig { lambda: 0.0, learning_rate: 1e-3, ..Default::default() };
    let mut a = PoreNet::<f32>::with_default_head(eighth(1), 3).unwrap();
    let mut b = a.clone();
    let (mut oa, mut ob) = (OptimizerState::adam(), OptimizerState::adam());
    let mut worst = 0f64;
    for i in 0..2 {
        train_step(&mut a, &mut oa, &refs(&src), &refs(&tgt), &cfg, i).map_err(|e| e.to_string())?;
        pore_only_step(&mut b, &mut ob, &refs(&src), &cfg, i).map_err(|e| e.to_string())?;
    }
    for (name, p) in a.params.iter() {
        if p.group == ParamGroup::Pore {
            let q = b.params.get(name).unwrap();
            for (x, y) in p.value.data().iter().zip(q.value.data()) {
                worst = worst.max((*x as f64 - *y as f64).abs());
            }
        }
    }
    ensure!(worst <= 1e-6, "lambda=0 step differs from the domain-free step by {worst:e}");
    Ok(format!("forward bit-identical, backward exact for 5 lambdas; lambda=0 step max diff {worst:.1e}"))
}

fn small_batches(seed: u64, n: usize) -> (Vec<DomainSample>, Vec<DomainSample>) {
    let mut s = SynthConfig::source();
    let mut t = SynthConfig::target();
    s.count = 1;
    t.count = 1;
    let (si, ti) = synth_domain_pair(&s, &t, seed).unwrap();
    let src = domain_samples(&si[0].pixels, Some(&si[0].pores), 80, 40).unwrap();
    let tgt = domain_samples(&ti[0].pixels, None, 80, 40).unwrap();
    (src.into_iter().take(n).collect(), tgt.into_iter().take(n).collect())
}

fn refs(v: &[DomainSample]) -> Vec<&DomainSample> {
    v.iter().collect()
}

// ------------------------------------------------------------------ 3

fn geometry() -> Outcome {
    let big = extract_patches_overlapping(&Plane::filled(480, 640, 0u8), 80, 10).map_err(|e| e.to_string())?;
    let source_total = 90 * big.len();
    let small = extract_patches_nonoverlapping(&Plane::filled(240, 320, 0u8), 80).map_err(|e| e.to_string())?;
    let target_total = 780 * 8 * small.tiles.len();
    let iters = iterations_per_epoch(target_total, 8);
    let val = extract_patches_overlapping(&Plane::filled(240, 320, 0u8), 80, 10).map_err(|e| e.to_string())?;
    let val_total = 5 * val.len();
    let got = (source_total, target_total, iters, val_total);
    ensure!(got == (210_330, 74_880, 9_360, 2_125), "got {got:?}");
    Ok(format!("{source_total} / {target_total} / {iters} / {val_total}"))
}

// ------------------------------------------------------------------ 4

fn label_rule() -> Outcome {
    let pore = (20usize, 20usize);
    let img = pore_label_image(&[pore], 41, 41).map_err(|e| e.to_string())?;
    let mut cases = 0;
    for dr in 0..5usize {
        for dc in 0..10usize {
            let (r, c) = (pore.0 + dr, pore.1 + dc);
            let d = ((dr * dr + dc * dc) as f64).sqrt();
            let expected = if d >= 5.0 { 0.0 } else { 1.0 - d / 5.0 };
            let v = img.get(r, c);
            ensure!((v - expected).abs() <= 1e-9, "offset ({dr},{dc}): {v} vs {expected}");
            if d == 0.0 {
                ensure!(v == 1.0, "pore pixel is {v}");
            }
            if d >= 5.0 {
                ensure!(v == 0.0, "pixel at distance {d} is {v}");
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} cases"))
}

// ------------------------------------------------------------------ 5

fn match_oracle(det: &[Pore], gt: &[Pore]) -> Vec<usize> {
    let d = |a: Pore, b: Pore| ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt();
    let mut t = Vec::new();
    for i in 0..det.len() {
        if gt.is_empty() {
            continue;
        }
        let j = (0..gt.len()).fold(0, |b, j| if d(det[i], gt[j]) < d(det[i], gt[b]) { j } else { b });
        let k = (0..det.len()).fold(0, |b, k| if d(det[k], gt[j]) < d(det[b], gt[j]) { k } else { b });
        if k == i {
            t.push(i);
        }
    }
    t
}

fn maxima_oracle(map: &Plane<f32>, th: f32) -> Vec<Pore> {
    let (rows, cols) = map.dims();
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = map.get(r, c);
            let mut top = true;
            for rr in r.saturating_sub(2)..(r + 3).min(rows) {
                for cc in c.saturating_sub(2)..(c + 3).min(cols) {
                    top &= map.get(rr, cc) <= v;
                }
            }
            if top && v > th {
                out.push((r, c));
            }
        }
    }
    out
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let pts = |rng: &mut ChaCha8Rng, n: usize, e: usize| -> Vec<Pore> {
        (0..n).map(|_| (rng.gen_range(0..e), rng.gen_range(0..e))).collect()
    };
    for trial in 0..100 {
        let extent = if trial % 3 == 0 { 8 } else { 64 };
        let (n, m) = (rng.gen_range(0..=30), rng.gen_range(0..=30));
        let det = pts(&mut rng, n, extent);
        let gt = pts(&mut rng, m, extent);
        let got = match_pores(&det, &gt);
        ensure!(got.true_detections == match_oracle(&det, &gt), "matching differs on instance {trial}");
    }
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let coarse = trial % 2 == 1;
        let map = Plane::from_fn(40, 40, |_, _| {
            let v: f32 = rng.gen();
            if coarse { (v * 4.0).floor() / 4.0 } else { v }
        });
        let th = rng.gen_range(0.0..0.8);
        let got = coordinates(&local_maxima(&map, th, MaximaOptions::default()).map_err(|e| e.to_string())?);
        ensure!(got == maxima_oracle(&map, th), "local maxima differ on map {trial}");
    }
    Ok("100 matching instances, 100 maxima maps".into())
}

// ------------------------------------------------------------------ 6

fn check_rates(r: &Rates, c: Option<&Counts>) -> Result<(), String> {
    ensure!(r.r_t == r.recall, "R_T != recall");
    ensure!((r.r_f - (1.0 - r.precision)).abs() <= 1e-12, "R_F != 1 - precision");
    for v in [r.r_t, r.r_f, r.precision, r.recall, r.f_score] {
        ensure!((0.0..=1.0).contains(&v), "rate {v} outside [0, 1]");
    }
    // Macro rates average per-image values, so only the micro report pins
    // F and the rates to pooled counts.
    if let Some(c) = c {
        let f = if r.precision + r.recall == 0.0 { 0.0 } else { 2.0 * r.precision * r.recall / (r.precision + r.recall) };
        ensure!((r.f_score - f).abs() <= 1e-12, "F != harmonic mean");
        if c.total_gt > 0 {
            ensure!((r.recall - c.true_detections as f64 / c.total_gt as f64).abs() <= 1e-12, "recall != counts");
        }
        if c.total_detections() > 0 {
            ensure!(
                (r.r_f - c.false_detections as f64 / c.total_detections() as f64).abs() <= 1e-12,
                "R_F != counts"
            );
        }
    }
    Ok(())
}

fn check_curve(curve: &RocCurve) -> Result<(), String> {
    ensure!(curve.points.len() == 99, "{} points", curve.points.len());
    for w in curve.points.windows(2) {
        ensure!(w[1].th_p > w[0].th_p, "thresholds not increasing");
        let (a, b) = (&w[0].counts, &w[1].counts);
        // Dropping a detection can promote another to a mutual match, so
        // only the detection total is monotone, not its split.
        ensure!(
            b.total_detections() <= a.total_detections() && b.total_gt == a.total_gt,
            "counts grow from th {} to {}: {a:?} -> {b:?}",
            w[0].th_p,
            w[1].th_p
        );
    }
    for p in &curve.points {
        check_rates(&p.micro, Some(&p.counts))?;
        check_rates(&p.macro_, None)?;
    }
    Ok(())
}

/// Every curve produced by the domain-adaptation runs, plus per-image reports.
fn metric_identities(curves: &[RocCurve], per_image: &[Counts]) -> Outcome {
    ensure!(!curves.is_empty(), "no curves were produced");
    for c in curves {
        check_curve(c)?;
    }
    for c in per_image {
        check_rates(&Rates::from_counts(*c), Some(c))?;
    }
    let points: usize = curves.iter().map(|c| c.points.len()).sum();
    Ok(format!("{} curves ({points} reports) and {} per-image reports", curves.len(), per_image.len()))
}

// ------------------------------------------------------------------ 7

const OVERFIT_BUDGET_S: f64 = 570.0;

fn overfit() -> Outcome {
    let start = Instant::now();
    let mut cfg = SynthConfig::source();
    cfg.count = 3;
    let images = synth_domain(&cfg, 11, 0).map_err(|e| e.to_string())?;
    let mut samples = Vec::new();
    let mut truth = Vec::new();
    for im in &images {
        let label = pore_label_image(&im.pores, cfg.rows, cfg.cols).map_err(|e| e.to_string())?.map(|v| v as f32);
        for p in extract_patches_overlapping(&im.pixels, 80, 80).map_err(|e| e.to_string())? {
            let inside: Vec<Pore> = im
                .pores
                .iter()
                .filter(|&&(r, c)| r >= p.row && r < p.row + 80 && c >= p.col && c < p.col + 80)
                .map(|&(r, c)| (r - p.row, c - p.col))
                .collect();
            samples.push(DomainSample::source(normalize(&p.data), label.crop(p.row, p.col, 80, 80)));
            truth.push(inside);
        }
    }
    samples.truncate(10);
    truth.truncate(10);
    let planted: usize = truth.iter().map(Vec::len).sum();

    let mut net = PoreNet::<f32>::with_default_head(eighth(2), 1).unwrap();
    let mut opt = OptimizerState::adam();
    let tc = TrainConfig { lambda: 0.0, learning_rate: 3e-3, ..Default::default() };
    let batch = refs(&samples);
    let mut mse = f64::INFINITY;
    let mut step = 0;
    while start.elapsed().as_secs_f64() < OVERFIT_BUDGET_S {
        pore_only_step(&mut net, &mut opt, &batch, &tc, step).map_err(|e| e.to_string())?;
        step += 1;
        if step % 10 == 0 {
            mse = evaluate_mse(&net, &samples, 10).map_err(|e| e.to_string())?;
            if mse < 1e-3 {
                break;
            }
        }
    }
    let mut found = 0;
    for (s, gt) in samples.iter().zip(&truth) {
        let map = infer_tiles(&net, &[Patch { row: 0, col: 0, data: s.patch().clone() }])
            .map_err(|e| e.to_string())?
            .remove(0)
            .data;
        let det = coordinates(&local_maxima(&map, 0.5, MaximaOptions::default()).map_err(|e| e.to_string())?);
        found += match_pores(&det, gt).true_detections.len();
    }
    let elapsed = start.elapsed().as_secs_f64();
    let recovered = found as f64 / planted as f64;
    let detail = format!("{step} steps, MSE {mse:.2e}, recovered {found}/{planted} ({:.1}%), {elapsed:.0}s", 100.0 * recovered);
    ensure!(mse < 1e-3 && recovered >= 0.95 && elapsed <= 600.0, "{detail}");
    Ok(detail)
}

// ------------------------------------------------------------------ 8

/// Desk-scale domain-adaptation experiment.
struct DaSetup {
    source_images: usize,
    target_images: usize,
    val_images: usize,
    test_images: usize,
    epochs: usize,
    learning_rate: f64,
    blocks: usize,
}

const DA: DaSetup = DaSetup {
    source_images: 6,
    target_images: 7,
    val_images: 6,
    test_images: 10,
    epochs: 2,
    learning_rate: 1e-3,
    blocks: 1,
};
const DA_SEEDS: [u64; 3] = [0, 1, 2];
const DA_LAMBDA: f64 = 0.005;
const DA_TARGET_RF: f64 = 0.19;

fn score_set(net: &PoreNet<f32>, images: &[SynthImage]) -> Result<(RocCurve, Vec<Vec<Detection>>), String> {
    let planes: Vec<&Plane<u8>> = images.iter().map(|i| &i.pixels).collect();
    let cands = score_images(net, &planes, MaximaOptions::default()).map_err(|e| e.to_string())?;
    let views: Vec<ScoredImage> = cands.iter().zip(images).map(|(c, i)| ScoredImage { candidates: c, gt: &i.pores }).collect();
    let curve = roc_sweep(&views, &default_grid()).map_err(|e| e.to_string())?;
    Ok((curve, cands))
}

struct DaRun {
    f_test: f64,
    th: f64,
    /// Test F at the validation best-F threshold, reported alongside.
    f_test_best: f64,
    curves: Vec<RocCurve>,
    per_image: Vec<Counts>,
}

fn da_run(seed: u64, lambda: f64) -> Result<DaRun, String> {
    let mut sc = SynthConfig::source();
    sc.count = DA.source_images;
    let mut tc = SynthConfig::target();
    tc.count = DA.target_images + DA.val_images + DA.test_images;
    let (s, t) = synth_domain_pair(&sc, &tc, seed).map_err(|e| e.to_string())?;
    let mut src = Vec::new();
    for im in &s {
        src.extend(domain_samples(&im.pixels, Some(&im.pores), 80, 10).map_err(|e| e.to_string())?);
    }
    let mut tgt = Vec::new();
    for im in &t[..DA.target_images] {
        tgt.extend(domain_samples(&im.pixels, None, 80, 10).map_err(|e| e.to_string())?);
    }
    ensure!(tgt.len() >= 500, "only {} target patches", tgt.len());
    let val = &t[DA.target_images..DA.target_images + DA.val_images];
    let test = &t[DA.target_images + DA.val_images..];

    let net = PoreNet::<f32>::with_default_head(eighth(DA.blocks), seed).unwrap();
    let cfg = TrainConfig { lambda, learning_rate: DA.learning_rate, epochs: DA.epochs, seed, ..Default::default() };
    let out = train(net, &src, &tgt, &cfg, None, |_| {}).map_err(|e| e.to_string())?;
    let net = out.checkpoint.net;
    let (val_curve, _) = score_set(&net, val)?;
    let op = operating_point(&val_curve, DA_TARGET_RF).map_err(|e| e.to_string())?;
    let (test_curve, cands) = score_set(&net, test)?;
    let per_image = cands
        .iter()
        .zip(test)
        .map(|(c, im)| counts_at(&ScoredImage { candidates: c, gt: &im.pores }, op.th_p))
        .collect::<Vec<_>>();
    let report = DetectionReport::from_image_counts(&per_image, Some(op.th_p));
    let best = best_f_point(&val_curve).map_err(|e| e.to_string())?;
    let f_test_best = test_curve
        .points
        .iter()
        .find(|p| p.th_p == best.th_p)
        .map_or(0.0, |p| p.micro.f_score);
    Ok(DaRun {
        f_test: report.micro.f_score,
        th: op.th_p,
        f_test_best,
        curves: vec![val_curve, test_curve],
        per_image,
    })
}

fn domain_adaptation(curves: &mut Vec<RocCurve>, per_image: &mut Vec<Counts>) -> Outcome {
    let start = Instant::now();
    let mut gains = Vec::new();
    let mut best_gains = Vec::new();
    let mut rows = Vec::new();
    for &seed in &DA_SEEDS {
        let base = da_run(seed, 0.0)?;
        let adapted = da_run(seed, DA_LAMBDA)?;
        gains.push(adapted.f_test - base.f_test);
        best_gains.push(adapted.f_test_best - base.f_test_best);
        rows.push(format!(
            "seed {seed}: F {:.1} (th {:.2}) -> {:.1} (th {:.2})",
            100.0 * base.f_test,
            base.th,
            100.0 * adapted.f_test,
            adapted.th
        ));
        for run in [base, adapted] {
            curves.extend(run.curves);
            per_image.extend(run.per_image);
        }
    }
    let mean = |g: &[f64]| 100.0 * g.iter().sum::<f64>() / g.len() as f64;
    let mean_gain = mean(&gains);
    let elapsed = start.elapsed().as_secs_f64();
    let detail = format!(
        "mean gain {mean_gain:+.2} points at the R_F={DA_TARGET_RF} point ({:+.2} at the best-F point); {}; {elapsed:.0}s",
        mean(&best_gains),
        rows.join("; ")
    );
    ensure!(mean_gain >= 3.0 && elapsed <= 45.0 * 60.0, "{detail}");
    Ok(detail)
}

// ------------------------------------------------------------------ 9

fn porecli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_porecli"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "porecli {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();

    let mut net = PoreNet::<f32>::with_default_head(eighth(2), 9).unwrap();
    net.bn.values_mut().next().unwrap().mean[0] = 0.1;
    let ckpt = Checkpoint::new(net, TrainingMeta::default());
    save_checkpoint(&ckpt, &d.join("m.ckpt")).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&d.join("m.ckpt")).map_err(|e| e.to_string())?;
    for ((na, a), (nb, b)) in ckpt.net.params.iter().zip(back.net.params.iter()) {
        let bits = |g: &Grid4<f32>| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(na == nb && bits(&a.value) == bits(&b.value), "tensor {na} changed");
    }
    ensure!(back.net.bn == ckpt.net.bn && back.meta == ckpt.meta, "state changed");
    ensure!(back.to_bytes().unwrap() == ckpt.to_bytes().unwrap(), "re-serialization differs");

    let pores = vec![(0, 0), (5, 9), (159, 158)];
    write_pores(&pores, &d.join("p.pores")).map_err(|e| e.to_string())?;
    ensure!(load_ground_truth_for(&d.join("p.pores"), 160, 160).map_err(|e| e.to_string())? == pores, ".pores differs");
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let img = Plane::from_fn(61, 83, |_, _| rng.gen::<u8>());
    for name in ["i.png", "i.pgm"] {
        save_image(&img, &d.join(name)).map_err(|e| e.to_string())?;
        ensure!(load_image(&d.join(name)).map_err(|e| e.to_string())?.pixels == img, "{name} differs");
    }

    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let root = d.join(run);
        let data = s(&root.join("data"));
        let manifest = s(&root.join("data/manifest.json"));
        let model = s(&root.join("model"));
        let ckpt = s(&root.join("model/model.ckpt"));
        porecli(&["synth", "--seed", "7", "--count", "1", "--out", &data])?;
        porecli(&[
            "train", "--manifest", &manifest, "--width", "1/8", "--blocks", "1", "--epochs", "1", "--step", "40",
            "--seed", "3", "--out", &model,
        ])?;
        porecli(&["detect", "--checkpoint", &ckpt, "--manifest", &manifest, "--th", "0.1", "--out", &s(&root.join("detect"))])?;
        porecli(&["eval", "--checkpoint", &ckpt, "--manifest", &manifest, "--out", &s(&root.join("eval"))])?;
        porecli(&["roc", "--checkpoint", &ckpt, "--manifest", &manifest, "--out", &s(&root.join("roc"))])?;
        let mut files = tree(&root);
        // The training log's last column is wall-clock time.
        let log = files.get_mut(Path::new("model/train_log.csv")).ok_or("no training log")?;
        let text = String::from_utf8(log.clone()).unwrap();
        *log = text.lines().map(|l| l.rsplit_once(',').unwrap().0).collect::<Vec<_>>().join("\n").into_bytes();
        trees.push(files);
    }
    ensure!(trees[0] == trees[1], "same-seed CLI runs differ");
    Ok(format!("checkpoint, .pores, PNG, PGM lossless; {} CLI output files identical", trees[0].len()))
}

// ------------------------------------------------------------------

fn run(number: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {number} [{name}]: {tag} ({detail}) [{secs:.1}s]");
    result.is_ok()
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut passed = Vec::new();
    let mut note = |n: usize, ok: bool| passed.push((n, ok));

    if on(1) {
        note(1, run(1, "gradient suite", gradient_suite));
    }
    if on(2) {
        note(2, run(2, "reversal layer contract", grl_contract));
    }
    if on(3) {
        note(3, run(3, "patch geometry", geometry));
    }
    if on(4) {
        note(4, run(4, "label rule", label_rule));
    }
    if on(5) {
        note(5, run(5, "matching and maxima oracles", oracles));
    }
    // The adaptation runs go first so their curves feed the metric checks;
    // their line is printed in order below.
    let mut curves = Vec::new();
    let mut per_image = Vec::new();
    let da = on(8).then(|| {
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(|| domain_adaptation(&mut curves, &mut per_image)))
            .unwrap_or_else(|_| Err("panicked".into()));
        (r, start.elapsed().as_secs_f64())
    });
    if on(6) {
        if curves.is_empty() {
            if let Err(e) = quick_curves(&mut curves, &mut per_image) {
                println!("criterion 6: could not produce curves: {e}");
            }
        }
        note(6, run(6, "metric identities and ROC monotonicity", || metric_identities(&curves, &per_image)));
    }
    if on(7) {
        note(7, run(7, "overfit sanity", overfit));
    }
    if let Some((r, secs)) = da {
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion 8 [domain adaptation]: {tag} ({detail}) [{secs:.1}s]");
        note(8, r.is_ok());
    }
    if on(9) {
        note(9, run(9, "round trips and determinism", round_trips));
    }
    let failed: Vec<usize> = passed.iter().filter(|p| !p.1).map(|p| p.0).collect();
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn quick_curves(curves: &mut Vec<RocCurve>, per_image: &mut Vec<Counts>) -> Result<(), String> {
    let (src, tgt) = small_batches(600, 8);
    let cfg = TrainConfig { lambda: 0.005, learning_rate: 1e-3, epochs: 1, batch_size: 4, seed: 1, ..Default::default() };
    let net = PoreNet::<f32>::with_default_head(eighth(1), 1).unwrap();
    let net = train(net, &src, &tgt, &cfg, None, |_| {}).map_err(|e| e.to_string())?.checkpoint.net;
    let mut tc = SynthConfig::target();
    tc.count = 2;
    let images = synth_domain(&tc, 601, 1).map_err(|e| e.to_string())?;
    let (curve, cands) = score_set(&net, &images)?;
    for (c, im) in cands.iter().zip(&images) {
        per_image.push(counts_at(&ScoredImage { candidates: c, gt: &im.pores }, 0.5));
    }
    curves.push(curve);
    Ok(())
}
