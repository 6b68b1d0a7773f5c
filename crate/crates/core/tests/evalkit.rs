use domainpore::dataprep::Pore;
use domainpore::detector::Detection;
use domainpore::evalkit::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive reading of the protocol: build the full distance matrix, scan
/// row `i` for its minimum column, then scan that column for its minimum row.
fn oracle(det: &[Pore], gt: &[Pore]) -> (Vec<usize>, Vec<usize>) {
    let d: Vec<Vec<f64>> = det
        .iter()
        .map(|a| {
            gt.iter()
                .map(|b| ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt())
                .collect()
        })
        .collect();
    let (mut t, mut f) = (Vec::new(), Vec::new());
    for i in 0..det.len() {
        if gt.is_empty() {
            f.push(i);
            continue;
        }
        let mut j_best = 0;
        for j in 1..gt.len() {
            if d[i][j] < d[i][j_best] {
                j_best = j;
            }
        }
        let mut i_best = 0;
        for k in 1..det.len() {
            if d[k][j_best] < d[i_best][j_best] {
                i_best = k;
            }
        }
        if i_best == i {
            t.push(i);
        } else {
            f.push(i);
        }
    }
    (t, f)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: usize) -> Vec<Pore> {
    (0..n).map(|_| (rng.gen_range(0..extent), rng.gen_range(0..extent))).collect()
}

fn assert_identities(r: &Rates, c: &Counts) {
    let p = r.precision;
    assert_eq!(r.r_t, r.recall);
    assert!((r.r_f - (1.0 - p)).abs() < 1e-12);
    let f = if p + r.recall == 0.0 { 0.0 } else { 2.0 * p * r.recall / (p + r.recall) };
    assert!((r.f_score - f).abs() < 1e-12);
    for v in [r.r_t, r.r_f, r.precision, r.recall, r.f_score] {
        assert!((0.0..=1.0).contains(&v));
    }
    if c.total_gt > 0 {
        assert!((r.recall - c.true_detections as f64 / c.total_gt as f64).abs() < 1e-12);
    }
    if c.total_detections() > 0 {
        assert!((r.r_f - c.false_detections as f64 / c.total_detections() as f64).abs() < 1e-12);
    }
}

#[test]
fn matching_agrees_with_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let n = rng.gen_range(0..=30);
        let m = rng.gen_range(0..=30);
        // A small extent forces plenty of distance ties.
        let extent = if trial % 3 == 0 { 6 } else { 60 };
        let det = random_points(&mut rng, n, extent);
        let gt = random_points(&mut rng, m, extent);
        let got = match_pores(&det, &gt);
        let (t, f) = oracle(&det, &gt);
        assert_eq!(got.true_detections, t, "trial {trial}");
        assert_eq!(got.false_detections, f, "trial {trial}");
        assert_eq!(got.true_detections.len() + got.false_detections.len(), n);
        let hit: std::collections::BTreeSet<usize> =
            got.true_detections.iter().map(|&i| got.nearest_gt[i].unwrap()).collect();
        assert_eq!(hit.len(), got.true_detections.len());
        assert_eq!(hit.len() + got.missed.len(), m);
        assert!(got.missed.iter().all(|j| !hit.contains(j)));
    }
}

#[test]
fn matching_examples() {
    let gt = vec![(3, 4), (10, 10), (20, 5)];
    let same = match_pores(&gt, &gt);
    assert_eq!(same.true_detections, vec![0, 1, 2]);
    assert!(same.missed.is_empty());

    let none = match_pores(&[], &gt);
    assert_eq!(none.missed, vec![0, 1, 2]);
    let report = compute_metrics(&none, gt.len());
    assert_eq!(report.micro.r_t, 0.0);
    assert_eq!(report.micro.r_f, 0.0);

    let no_gt = match_pores(&gt, &[]);
    assert_eq!(no_gt.false_detections, vec![0, 1, 2]);

    // Two detections compete for one pore: only the closer is true.
    let m = match_pores(&[(0, 0), (0, 3)], &[(0, 1)]);
    assert_eq!(m.true_detections, vec![0]);
    assert_eq!(m.false_detections, vec![1]);
    // Equidistant: the lower index wins.
    let m = match_pores(&[(0, 0), (0, 2)], &[(0, 1)]);
    assert_eq!(m.true_detections, vec![0]);
    // Two pores share one nearest detection; no second pass rescues either.
    let m = match_pores(&[(5, 5)], &[(5, 4), (5, 7)]);
    assert_eq!(m.true_detections, vec![0]);
    assert_eq!(m.missed, vec![1]);
}

#[test]
fn exact_hit_that_is_unique_nearest_is_true() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let gt = random_points(&mut rng, 10, 100);
        let mut det = random_points(&mut rng, 10, 100);
        let k = rng.gen_range(0..gt.len());
        det.push(gt[k]);
        let m = match_pores(&det, &gt);
        let i = det.len() - 1;
        let unique = det[..i].iter().all(|&d| d != gt[k]);
        if unique && !gt[..k].contains(&gt[k]) {
            assert!(m.true_detections.contains(&i));
        }
    }
}

#[test]
fn metric_examples() {
    let c = Counts { true_detections: 8, false_detections: 2, total_gt: 10 };
    let r = Rates::from_counts(c);
    assert!((r.r_t - 0.8).abs() < 1e-12);
    assert!((r.r_f - 0.2).abs() < 1e-12);
    assert!((r.f_score - 0.8).abs() < 1e-12);
    let half = Rates::from_counts(Counts { true_detections: 5, false_detections: 5, total_gt: 10 });
    assert!((half.f_score - 0.5).abs() < 1e-12);
    let perfect = Rates::from_counts(Counts { true_detections: 7, false_detections: 0, total_gt: 7 });
    assert_eq!((perfect.r_t, perfect.r_f, perfect.f_score), (1.0, 0.0, 1.0));
    let empty = Rates::from_counts(Counts::default());
    assert_eq!(empty.f_score, 0.0);
}

#[test]
fn micro_and_macro_aggregation() {
    let a = Counts { true_detections: 9, false_detections: 1, total_gt: 10 };
    let b = Counts { true_detections: 1, false_detections: 1, total_gt: 10 };
    let rep = DetectionReport::from_image_counts(&[a, b], Some(0.5));
    assert_eq!(rep.counts, a + b);
    assert!((rep.micro.r_t - 0.5).abs() < 1e-12);
    assert!((rep.micro.r_f - 2.0 / 12.0).abs() < 1e-12);
    let fa = Rates::from_counts(a).f_score;
    let fb = Rates::from_counts(b).f_score;
    assert!((rep.macro_.f_score - (fa + fb) / 2.0).abs() < 1e-12);
    assert_identities(&rep.micro, &rep.counts);
    let json = serde_json::to_value(&rep).unwrap();
    assert!(json.get("macro").is_some());
}

fn scored(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<Pore>) {
    let n = rng.gen_range(0..25);
    let gt = random_points(rng, n, 80);
    let mut cand = Vec::new();
    for &(r, c) in &gt {
        if rng.gen_bool(0.8) {
            let row = (r + rng.gen_range(0..3)).min(79);
            cand.push(Detection { row, col: c, value: rng.gen_range(0.3..1.0) });
        }
    }
    for _ in 0..rng.gen_range(0..15) {
        cand.push(Detection { row: rng.gen_range(0..80), col: rng.gen_range(0..80), value: rng.gen_range(0.0..0.7) });
    }
    (cand, gt)
}

#[test]
fn roc_sweep_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let data: Vec<_> = (0..12).map(|_| scored(&mut rng)).collect();
    let images: Vec<ScoredImage> = data.iter().map(|(c, g)| ScoredImage { candidates: c, gt: g }).collect();
    let grid = default_grid();
    assert_eq!(grid.len(), 99);
    assert_eq!((grid[0], grid[98]), (0.01, 0.99));
    let curve = roc_sweep(&images, &grid).unwrap();
    assert_eq!(curve.points.len(), 99);
    for w in curve.points.windows(2) {
        assert!(w[1].th_p > w[0].th_p);
        assert!(w[1].counts.total_detections() <= w[0].counts.total_detections());
    }
    for p in &curve.points {
        assert_identities(&p.micro, &p.counts);
        assert!(p.macro_.f_score >= 0.0 && p.macro_.f_score <= 1.0);
    }

    // A one-threshold sweep equals direct evaluation.
    let th = 0.37;
    let single = roc_sweep(&images, &[th]).unwrap();
    let direct: Vec<Counts> = data
        .iter()
        .map(|(c, g)| {
            let det: Vec<Pore> = c.iter().filter(|d| d.value as f64 > th).map(|d| (d.row, d.col)).collect();
            Counts::from_match(&match_pores(&det, g), g.len())
        })
        .collect();
    let rep = DetectionReport::from_image_counts(&direct, Some(th));
    assert_eq!(single.points[0].counts, rep.counts);
    assert_eq!(single.points[0].micro, rep.micro);

    // Pooled counts are additive over disjoint subsets.
    let left = roc_sweep(&images[..5], &grid).unwrap();
    let right = roc_sweep(&images[5..], &grid).unwrap();
    for ((a, b), all) in left.points.iter().zip(&right.points).zip(&curve.points) {
        assert_eq!(a.counts + b.counts, all.counts);
    }

    let csv = curve.to_csv();
    assert_eq!(csv.lines().count(), 100);
    assert_eq!(csv.lines().next().unwrap(), "th,RT_micro,RF_micro,F_micro,RT_macro,RF_macro,F_macro");
    assert!(csv.lines().nth(1).unwrap().starts_with("0.01,"));
    assert!(roc_sweep(&images, &[]).is_err());
    assert!(roc_sweep(&images, &[0.5, 0.5]).is_err());
}

#[test]
fn grid_parsing() {
    assert_eq!(parse_grid("0.01:0.99:0.01").unwrap(), default_grid());
    assert_eq!(parse_grid("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(parse_grid("0.3:0.3:0.1").unwrap(), vec![0.3]);
    for bad in ["", "0:1", "a:b:c", "0:1:0", "1:0:0.1", "0:1:-1"] {
        assert!(parse_grid(bad).is_err(), "{bad}");
    }
    assert_eq!(default_grid()[6].to_string(), "0.07");
}

fn curve_of(points: &[(f64, f64)]) -> RocCurve {
    // (R_F, R_T) pairs turned into points with consistent counts of 100 GT.
    RocCurve {
        points: points
            .iter()
            .enumerate()
            .map(|(i, &(rf, rt))| {
                let t = (rt * 100.0).round() as usize;
                let f = ((rf * t as f64) / (1.0 - rf)).round() as usize;
                let counts = Counts { true_detections: t, false_detections: f, total_gt: 100 };
                let micro = Rates::from_counts(counts);
                RocPoint { th_p: 0.1 * (i + 1) as f64, counts, micro, macro_: micro }
            })
            .collect(),
    }
}

#[test]
fn operating_point_examples() {
    let c = curve_of(&[(0.5, 0.95), (0.19, 0.9), (0.1, 0.8), (0.02, 0.5)]);
    let exact_rf = c.points[1].micro.r_f;
    let op = operating_point(&c, exact_rf).unwrap();
    assert_eq!(op.th_p, c.points[1].th_p);
    assert!(!op.out_of_range);

    let high = operating_point(&c, 0.9).unwrap();
    assert_eq!(high.th_p, c.points[0].th_p);
    assert!(high.out_of_range);
    let low = operating_point(&c, 0.0).unwrap();
    assert_eq!(low.th_p, c.points[3].th_p);
    assert!(low.out_of_range);

    // Between the 2nd and 3rd points, nearer the 3rd.
    let between = operating_point(&c, 0.12).unwrap();
    assert_eq!(between.th_p, c.points[2].th_p);
    assert!(!between.out_of_range);

    // Equal distance: higher R_T wins.
    let mut tie = curve_of(&[(0.1, 0.6), (0.1, 0.7)]);
    tie.points[1].micro.r_f = tie.points[0].micro.r_f;
    let op = operating_point(&tie, 0.2).unwrap();
    assert_eq!(op.r_t, tie.points[1].micro.r_t);

    assert!(operating_point(&RocCurve::default(), 0.19).is_err());
    let best = best_f_point(&c).unwrap();
    let max_f = c.points.iter().map(|p| p.micro.f_score).fold(0.0, f64::max);
    assert_eq!(best.f_score, max_f);
}
