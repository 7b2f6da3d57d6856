//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails or overruns its time budget.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use drscreen::analytics::{workload_counterfactual, ScreeningEvent};
use drscreen::attribution::{cluster_points, integrated_gradients, ClusterParams};
use drscreen::backend::{AnalyticStubModel, GradientModel, InputTensor, OutputSelector, ScriptedBackend};
use drscreen::calibration::{
    calibration_report, pool_adjacent_violators, transform_score, BetaCalibrator, IsotonicCalibrator, OperatingPoint,
};
use drscreen::enhancement::{apply_clahe_with, enhance_with, stretch_range, ClaheParams, EnhanceParams};
use drscreen::gold_standard::adjust_for_prevalence;
use drscreen::metrics::{auc_binary, bootstrap_ci, cohen_kappa_binary, positive_negative_agreement, BootstrapConfig};
use drscreen::orchestrator::{screen_eye, OrchestratorConfig};
use drscreen::study::RawScores;
use drscreen::synth::{render, FundusSpec};
use drscreen::{Category, Execution, EyeStudy, FieldScores, FundusImage, Laterality, StudyProposal};
use drscreen_service::cli::ProgramReport;
use drscreen_service::service::DecisionRequest;
use drscreen_service::sidecar::{Sidecar, StudyBundle};
use drscreen_service::state::{SortMode, State};
use drscreen_service::store::{read_log, EventBody};
use drscreen_service::{Service, ServiceConfig};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);
/// PA, NA and kappa per GP.
type Agreement = BTreeMap<String, (Option<f64>, Option<f64>, f64)>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn transform() -> Outcome {
    let f = |p, t, tp| transform_score(p, t, tp).map_err(|e| e.to_string());
    for (p, t, expected) in
        [(0.1, 0.1, 0.5), (0.0, 0.1, 0.0), (0.0, 0.3, 0.0), (0.0, 0.77, 0.0), (1.0, 0.1, 1.0), (0.55, 0.1, 0.75)]
    {
        let got = f(p, t, 0.5)?;
        ensure!(close(got, expected, 1e-12), "f({p}, {t}, 0.5) = {got}, expected {expected}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut points = 0;
    for _ in 0..10_000 {
        let t = rng.random_range(0.001..0.999);
        let tp = rng.random_range(0.001..=0.5);
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        let (p1, p2) = if a < b { (a, b) } else { (b, a) };
        if p1 == p2 {
            continue;
        }
        let (s1, s2) = (f(p1, t, tp)?, f(p2, t, tp)?);
        ensure!(s1 < s2, "order lost: f({p1})={s1} >= f({p2})={s2} at t={t}, t'={tp}");
        for (p, s) in [(p1, s1), (p2, s2)] {
            ensure!((s >= tp) == (p >= t), "decision mismatch p={p} t={t} s={s} t'={tp}");
            points += 1;
        }
    }
    Ok(format!("4 fixed values, 10000 ordered pairs, {points} decision points"))
}

fn field(central: bool) -> FieldScores {
    let (c, n) = if central { (0.9, 0.05) } else { (0.05, 0.9) };
    FieldScores([c, n, 0.01, 0.01, 0.01, 0.01, 0.01])
}

fn blank_eye(ids: &[&str]) -> EyeStudy {
    EyeStudy {
        eye_id: "eye".into(),
        laterality: Laterality::Right,
        images: ids
            .iter()
            .enumerate()
            .map(|(i, id)| FundusImage::new(*id, RgbImage::new(64, 64), Laterality::Right, i as u32))
            .collect(),
    }
}

fn decision_table() -> Outcome {
    let cfg = OrchestratorConfig::default();
    let op = OperatingPoint::default();
    let tf = |p| transform_score(p, op.t_dr, op.t_prime).unwrap();
    for bits in 0..8u8 {
        let (c_dr, n_dr, ng) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
        let c_raw = if c_dr { 0.62 } else { 0.03 };
        let n_raw = if n_dr { 0.41 } else { 0.06 };
        let ng_raw = if ng { 0.85 } else { 0.12 };
        let backend = ScriptedBackend::new()
            .with("c", field(true), RawScores { dr_prob: c_raw, non_gradability_prob: ng_raw })
            // Gradability is read from the central field only.
            .with("n", field(false), RawScores { dr_prob: n_raw, non_gradability_prob: 1.0 - ng_raw });
        let p = screen_eye(&blank_eye(&["n", "c"]), &backend, &cfg).map_err(|e| e.to_string())?;
        let refer = p.referral_score >= op.t_prime;
        ensure!(refer == (c_dr || n_dr || ng), "combination {bits:03b}: refer {refer}");
        ensure!(
            p.selected_central.as_deref() == Some("c") && p.selected_nasal.as_deref() == Some("n"),
            "field selection"
        );
        ensure!(p.dr_score_transformed == tf(c_raw).max(tf(n_raw)), "worst-score rule violated at {bits:03b}");
        let expected = match (c_dr || n_dr, ng) {
            (true, _) => Category::ReferableDR,
            (false, true) => Category::NonGradable,
            _ => Category::NonReferable,
        };
        ensure!(p.category == expected, "combination {bits:03b}: category {:?}", p.category);
        p.check_invariants(op.t_prime)?;
    }
    for (dr, ng, expected) in
        [(0.01, 0.9, Category::NonGradable), (0.5, 0.1, Category::ReferableDR), (0.01, 0.1, Category::NonReferable)]
    {
        let backend =
            ScriptedBackend::new().with("only", field(false), RawScores { dr_prob: dr, non_gradability_prob: ng });
        let p = screen_eye(&blank_eye(&["only"]), &backend, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            p.selected_central.as_deref() == Some("only") && p.selected_nasal.is_none(),
            "single image not central"
        );
        ensure!(p.category == expected, "single image dr={dr} ng={ng}: {:?}", p.category);
        ensure!(
            p.non_gradability_score_transformed == transform_score(ng, op.t_ng, op.t_prime).unwrap(),
            "gradability not read"
        );
    }
    Ok("8 combinations + 3 single-image cases".into())
}

fn workload() -> Outcome {
    let total = 22_962u64;
    let gp = (total as f64 * 0.1462).round() as u64;
    let ai = (total as f64 * 0.2685).round() as u64;
    let w = workload_counterfactual(total, gp, ai).map_err(|e| e.to_string())?;
    let inflation = w.referral_inflation.ok_or("no inflation")?;
    ensure!(close(w.reduction_factor, 4.27, 0.02), "reduction {}", w.reduction_factor);
    ensure!(close(inflation, 1.84, 0.02), "inflation {inflation}");
    ensure!(w.current_visualizations.abs_diff(26_318) <= 30, "current {}", w.current_visualizations);
    ensure!(w.current_visualizations == total + gp && w.autonomous_visualizations == ai, "identities");
    Ok(format!(
        "counts ({total}, {gp}, {ai}): current {}, reduction {:.4}, inflation {inflation:.4}",
        w.current_visualizations, w.reduction_factor
    ))
}

fn prevalence() -> Outcome {
    let n = adjust_for_prevalence(1265, 0.07, 0.18);
    ensure!(n == 492, "got {n}");
    Ok("1265 at 7% -> 492 at 18%".into())
}

fn objective(y: &[f64], f: &[f64]) -> f64 {
    y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn isotonic() -> Outcome {
    let ones = |n| vec![1.0; n];
    for (y, expected) in [(vec![0.0, 1.0, 0.0], vec![0.0, 0.5, 0.5]), (vec![1.0, 0.0], vec![0.5, 0.5])] {
        let got = pool_adjacent_violators(&y, &ones(y.len()));
        ensure!(got == expected, "PAV({y:?}) = {got:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut fixtures = 0;
    for n in 1..=8usize {
        for k in 0..6 {
            let y: Vec<f64> =
                (0..n).map(|_| if k % 2 == 0 { rng.random_range(0..2) as f64 } else { rng.random::<f64>() }).collect();
            let fit = pool_adjacent_violators(&y, &ones(n));
            ensure!(fit.windows(2).all(|w| w[0] <= w[1]), "PAV output not monotone for {y:?}");
            let best = objective(&y, &fit);
            for _ in 0..1000 {
                let mut cand: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                cand.sort_by(f64::total_cmp);
                ensure!(best <= objective(&y, &cand) + 1e-12, "candidate beats PAV on {y:?}");
            }
            fixtures += 1;
        }
    }
    let cal = IsotonicCalibrator::fit(&[0.1, 0.2, 0.3, 0.4], &[false, true, false, true]).map_err(|e| e.to_string())?;
    ensure!(cal.predict(0.0) <= cal.predict(0.25) && cal.predict(0.25) <= cal.predict(1.0), "calibrator not monotone");
    Ok(format!("2 hand cases, {fixtures} fixtures x 1000 monotone candidates"))
}

fn beta() -> Outcome {
    let truth = BetaCalibrator { a: 2.5, b: 2.5, c: 0.5 };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let scores: Vec<f64> = (0..5000).map(|_| rng.random_range(0.001..0.999)).collect();
    let labels: Vec<bool> = scores.iter().map(|&s| rng.random_bool(truth.predict(s))).collect();
    let before = calibration_report(&scores, &labels, 10).map_err(|e| e.to_string())?.ece;
    let cal = BetaCalibrator::fit(&scores, &labels).map_err(|e| e.to_string())?;
    let mapped: Vec<f64> = scores.iter().map(|&s| cal.predict(s)).collect();
    let after = calibration_report(&mapped, &labels, 10).map_err(|e| e.to_string())?.ece;
    ensure!(after <= 0.03, "ECE after {after}");
    ensure!(after <= before / 2.0, "ECE {before} -> {after} is not halved");
    let grid: Vec<f64> = (0..=1000).map(|i| cal.predict(i as f64 / 1000.0)).collect();
    ensure!(grid.windows(2).all(|w| w[0] <= w[1]), "mapping not monotone");
    Ok(format!("ECE {before:.4} -> {after:.4}, fit a={:.3} b={:.3} c={:.3}", cal.a, cal.b, cal.c))
}

fn random_input(w: usize, h: usize, seed: u64) -> InputTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InputTensor { width: w, height: h, data: (0..w * h * 3).map(|_| rng.random::<f64>()).collect() }
}

/// Midpoint Riemann sum of the attribution path integral.
fn riemann(model: &dyn GradientModel, x: &InputTensor, base: &InputTensor, m: usize) -> Vec<f64> {
    let mut acc = vec![0.0; x.data.len()];
    for k in 0..m {
        let alpha = (k as f64 + 0.5) / m as f64;
        let point = InputTensor {
            width: x.width,
            height: x.height,
            data: base.data.iter().zip(&x.data).map(|(b, v)| b + alpha * (v - b)).collect(),
        };
        for (a, g) in acc.iter_mut().zip(model.gradient(&point, OutputSelector::DrProbability).data) {
            *a += g / m as f64;
        }
    }
    acc.chunks_exact(3)
        .enumerate()
        .map(|(p, g)| (0..3).map(|c| (x.data[3 * p + c] - base.data[3 * p + c]) * g[c]).sum())
        .collect()
}

fn integrated() -> Outcome {
    let mut worst_linear = 0.0f64;
    for seed in 0..10 {
        let model = AnalyticStubModel { seed, bias: 0.1 };
        let x = random_input(20, 16, seed + 50);
        let base = InputTensor::zeros_like(&x);
        let map = integrated_gradients(&model, &x, &base, "black", OutputSelector::DrLogit, 20, Execution::default());
        let n = x.width * x.height;
        for i in 0..n {
            let expected: f64 =
                (0..3).map(|c| (x.data[3 * i + c] - base.data[3 * i + c]) * model.weight(0, i, n) / 3.0).sum();
            worst_linear = worst_linear.max((map.values[i] - expected).abs());
        }
    }
    ensure!(worst_linear <= 1e-9, "linear attribution error {worst_linear:e}");
    let mut worst_gap = 0.0f64;
    for seed in 0..3 {
        let model = AnalyticStubModel { seed, bias: -0.4 };
        let x = random_input(16, 12, seed + 9);
        let base = InputTensor::zeros_like(&x);
        let map =
            integrated_gradients(&model, &x, &base, "black", OutputSelector::DrProbability, 20, Execution::default());
        let delta =
            model.forward(&x, OutputSelector::DrProbability) - model.forward(&base, OutputSelector::DrProbability);
        let gap = (map.total() - delta).abs();
        ensure!(gap <= 1e-3, "completeness gap {gap:e}");
        let oracle = riemann(&model, &x, &base, 10_000);
        let oracle_gap = (oracle.iter().sum::<f64>() - delta).abs();
        ensure!(oracle_gap <= 1e-3, "Riemann oracle completeness gap {oracle_gap:e}");
        let diff = map.values.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(diff <= 1e-6, "per-pixel disagreement with oracle {diff:e}");
        worst_gap = worst_gap.max(gap);
    }
    Ok(format!("linear max err {worst_linear:.1e}, completeness max gap {worst_gap:.1e}"))
}

/// Core points by direct counting, core components by union-find, borders
/// to the nearest core (ties to smaller coordinates).
fn brute_force(points: &[(f64, f64)], p: &ClusterParams) -> Vec<Vec<usize>> {
    let n = points.len();
    let d = |i: usize, j: usize| (points[i].0 - points[j].0).hypot(points[i].1 - points[j].1);
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| d(i, j) <= p.eps).count() >= p.min_size).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || label[s].is_some() {
            continue;
        }
        let mut stack = vec![s];
        label[s] = Some(next);
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if core[j] && label[j].is_none() && d(i, j) <= p.eps {
                    label[j] = Some(next);
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let l = if core[i] {
            label[i]
        } else {
            (0..n)
                .filter(|&j| core[j] && d(i, j) <= p.eps)
                .min_by(|&a, &b| {
                    d(i, a)
                        .total_cmp(&d(i, b))
                        .then(points[a].0.total_cmp(&points[b].0))
                        .then(points[a].1.total_cmp(&points[b].1))
                })
                .and_then(|j| label[j])
        };
        if let Some(l) = l {
            groups.entry(l).or_default().push(i);
        }
    }
    canonical(groups.into_values().filter(|g| g.len() >= p.min_size).collect())
}

fn canonical(mut c: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    c.iter_mut().for_each(|g| g.sort_unstable());
    c.sort();
    c
}

fn clustering() -> Outcome {
    let params = ClusterParams::default();
    let mut clusters = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(10..=200);
        let centres: Vec<(f64, f64)> = (0..rng.random_range(1..5))
            .map(|_| (rng.random_range(20.0..280.0), rng.random_range(20.0..280.0)))
            .collect();
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    (rng.random_range(0..300) as f64, rng.random_range(0..300) as f64)
                } else {
                    let (cx, cy) = centres[rng.random_range(0..centres.len())];
                    ((cx + rng.random_range(-30.0..30.0f64)).round(), (cy + rng.random_range(-30.0..30.0f64)).round())
                }
            })
            .collect();
        let got = cluster_points(&pts, &params);
        ensure!(got.clusters.iter().all(|c| c.len() >= params.min_size), "undersized cluster for seed {seed}");
        ensure!(canonical(got.clusters.clone()) == brute_force(&pts, &params), "partition differs for seed {seed}");
        clusters += got.clusters.len();
    }
    Ok(format!("50 point sets, {clusters} clusters, all partitions equal"))
}

fn metrics() -> Outcome {
    let auc = |s: &[f64], l: &[bool]| auc_binary(s, l).map_err(|e| e.to_string());
    ensure!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true])? == 1.0, "perfect AUC");
    ensure!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true])? == 0.75, "4-point AUC");
    ensure!(auc(&[0.5; 6], &[true, false, true, false, false, true])? == 0.5, "all-ties AUC");

    // 40 ratings: 17 both positive, 17 both negative, 3 + 3 disagreements.
    let a: Vec<bool> = (0..40).map(|i| i < 20).collect();
    let b: Vec<bool> = (0..40).map(|i| (3..23).contains(&i)).collect();
    let k = cohen_kappa_binary(&a, &b).map_err(|e| e.to_string())?;
    ensure!(close(k, 0.7, 1e-12), "kappa {k}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.random_range(4..60);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 50.0).round() / 50.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (t, tp) = (rng.random_range(0.01..0.99), rng.random_range(0.01..=0.5));
        let mapped: Vec<f64> = scores.iter().map(|&p| transform_score(p, t, tp).unwrap()).collect();
        ensure!(auc(&scores, &labels)? == auc(&mapped, &labels)?, "AUC changed under transform");
    }

    let data: Vec<(f64, bool)> = (0..200).map(|i| ((i * 37 % 200) as f64 / 200.0, i % 3 == 0)).collect();
    let stat = |s: &[(f64, bool)]| {
        let (sc, lb): (Vec<f64>, Vec<bool>) = s.iter().copied().unzip();
        auc_binary(&sc, &lb).ok()
    };
    let cfg = BootstrapConfig { resamples: 300, seed: 42, ..Default::default() };
    let run = |e| bootstrap_ci(&data, stat, &cfg, e).map_err(|e| e.to_string());
    let (r1, r2, r3) = (run(Execution::Sequential)?, run(Execution::Sequential)?, run(Execution::Parallel)?);
    ensure!(r1 == r2 && r1 == r3, "bootstrap not deterministic");
    Ok(format!("AUC hand cases, kappa {k}, 1000 invariance sets, bootstrap [{:.4}, {:.4}]", r1.lo, r1.hi))
}

fn enhancement() -> Outcome {
    let ramp = RgbImage::from_fn(256, 8, |x, _| image::Rgb([x as u8; 3]));
    let s = stretch_range(&ramp, 1.0, 99.0);
    let row: Vec<u8> = (0..256).map(|x| s.get_pixel(x, 0)[0]).collect();
    ensure!(row[0] == 0 && row[255] == 255, "ramp maps to [{}, {}]", row[0], row[255]);
    ensure!(row.windows(2).all(|w| w[0] <= w[1]), "ramp stretch not monotone");

    let flat = RgbImage::from_pixel(64, 64, image::Rgb([90; 3]));
    ensure!(stretch_range(&flat, 1.0, 99.0) == flat, "constant image changed by stretch");

    let img = render(&FundusSpec { size: 192, lesions: 5, seed: 21, ..Default::default() });
    let mut altered = img.clone();
    for px in altered.pixels_mut() {
        px[1] = px[1].wrapping_mul(7).wrapping_add(13);
    }
    let params = ClaheParams::default();
    let (a, b) = (
        apply_clahe_with(&img, &params, Execution::default()),
        apply_clahe_with(&altered, &params, Execution::default()),
    );
    ensure!(a.pixels().zip(b.pixels()).all(|(p, q)| p[0] == q[0] && p[2] == q[2]), "editing green changed red or blue");

    let ep = EnhanceParams::default();
    let runs = [
        enhance_with(&img, &ep, Execution::Sequential),
        enhance_with(&img, &ep, Execution::Sequential),
        enhance_with(&img, &ep, Execution::Parallel),
    ];
    let bytes: Vec<Vec<u8>> = runs.iter().map(|r| drscreen_service::store::encode_png(&r.image).unwrap()).collect();
    ensure!(bytes[0] == bytes[1] && bytes[0] == bytes[2], "enhancement output differs between runs");
    Ok("ramp, constant, channel independence, 3 identical runs".into())
}

fn drscreen(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_drscreen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("spawning drscreen: {e}"))?;
    if !out.status.success() {
        return Err(format!("drscreen {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Agreement computed straight from raw log lines, without the service state.
fn independent_agreement(log: &Path) -> Result<Agreement, String> {
    let mut ai: BTreeMap<String, bool> = BTreeMap::new();
    let mut pairs: BTreeMap<String, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for e in read_log(log).map_err(|e| e.to_string())?.events {
        match e.body {
            EventBody::ProposalComputed(p) => {
                ai.insert(p.study_id, p.proposal.refer);
            }
            EventBody::DecisionRecorded(d) => {
                let a = *ai.get(&d.study_id).ok_or("decision before proposal")?;
                let entry = pairs.entry(d.gp_id).or_default();
                entry.0.push(a);
                entry.1.push(d.refer);
            }
            EventBody::StudyRegistered(_) => {}
        }
    }
    pairs
        .into_iter()
        .map(|(gp, (a, h))| {
            let s = positive_negative_agreement(&a, &h).map_err(|e| e.to_string())?;
            Ok((gp, (s.pa, s.na, s.kappa)))
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |name: &str| -> PathBuf { dir.path().join(name) };
    let images = d("images");
    drscreen(&[
        "gen-cohort",
        "--n",
        "48",
        "--seed",
        "7",
        "--output",
        path_str(&d("cohort.jsonl")),
        "--truth",
        path_str(&d("truth.jsonl")),
        "--images",
        path_str(&images),
        "--image-size",
        "160",
    ])?;
    let cohort: Vec<ScreeningEvent> = std::fs::read_to_string(d("cohort.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;

    let config = ServiceConfig { store_path: d("store/events.jsonl"), ..Default::default() };
    let service = std::sync::Arc::new(Service::open(&config).map_err(|e| e.to_string())?);
    let base = common::spawn(service.clone());
    let http =
        reqwest::blocking::Client::builder().timeout(Duration::from_secs(120)).build().map_err(|e| e.to_string())?;

    let mut served: BTreeMap<String, StudyProposal> = BTreeMap::new();
    for event in &cohort {
        let id = &event.study_id;
        let sidecar: Sidecar =
            serde_json::from_slice(&std::fs::read(images.join(format!("{id}.json"))).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let bundle = StudyBundle::from_dir(sidecar, &images).map_err(|e| e.to_string())?;
        let r = http.post(format!("{base}/studies")).json(&bundle).send().map_err(|e| e.to_string())?;
        ensure!(r.status() == reqwest::StatusCode::CREATED, "register {id}: {}", r.status());
    }
    for event in &cohort {
        let id = &event.study_id;
        let r = http.post(format!("{base}/studies/{id}/proposal")).send().map_err(|e| e.to_string())?;
        ensure!(r.status() == reqwest::StatusCode::OK, "proposal {id}: {}", r.status());
        served.insert(id.clone(), r.json().map_err(|e| e.to_string())?);
    }
    for event in &cohort {
        let req = DecisionRequest {
            gp_id: event.gp_id.clone(),
            refer: event.gp_decision.ok_or("cohort event without GP decision")?.refer,
            note: None,
            decided_at: Some(event.timestamp + chrono::Duration::hours(2)),
            second_level: event.second_level,
        };
        let r = http
            .post(format!("{base}/studies/{}/decision", event.study_id))
            .json(&req)
            .send()
            .map_err(|e| e.to_string())?;
        ensure!(r.status() == reqwest::StatusCode::CREATED, "decision {}: {}", event.study_id, r.status());
    }

    // Batch CLI screening over the same files agrees with the service.
    drscreen(&["screen", path_str(&images), "--output", path_str(&d("proposals.jsonl"))])?;
    let batch = std::fs::read_to_string(d("proposals.jsonl")).map_err(|e| e.to_string())?;
    ensure!(batch.lines().count() == served.len(), "batch produced {} lines", batch.lines().count());
    for line in batch.lines() {
        let p: StudyProposal = serde_json::from_str(line).map_err(|e| e.to_string())?;
        ensure!(served.get(&p.study_id) == Some(&p), "batch proposal for {} differs", p.study_id);
    }

    let log = config.store_path.clone();
    drscreen(&["analyze-program", path_str(&log), "--out-dir", path_str(&d("report"))])?;
    let report: ProgramReport =
        serde_json::from_slice(&std::fs::read(d("report/report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let oracle = independent_agreement(&log)?;
    ensure!(
        report.gp_table.len() == oracle.len() && !oracle.is_empty(),
        "GP rows {} vs {}",
        report.gp_table.len(),
        oracle.len()
    );
    for row in &report.gp_table {
        let (pa, na, kappa) = oracle.get(&row.gp_id).ok_or(format!("unexpected GP {}", row.gp_id))?;
        ensure!(
            row.pa == *pa && row.na == *na && row.kappa == Some(*kappa),
            "GP {} differs: {row:?} vs {:?}",
            row.gp_id,
            (pa, na, kappa)
        );
    }
    let http_table: serde_json::Value =
        http.get(format!("{base}/stats/gp-table")).send().and_then(|r| r.json()).map_err(|e| e.to_string())?;
    ensure!(http_table["rows"] == serde_json::to_value(&report.gp_table).unwrap(), "HTTP gp-table differs from CLI");

    let live = service.snapshot();
    let replayed = State::replay(&read_log(&log).map_err(|e| e.to_string())?.events).map_err(|e| e.to_string())?;
    ensure!(replayed == live, "replayed state differs from live state");
    let worklist = |s: &Service| serde_json::to_string(&s.worklist(SortMode::Category, None)).unwrap();
    let before =
        (worklist(&service), serde_json::to_string(&service.annual(None).map_err(|e| e.to_string())?).unwrap());
    drop(service);
    let restarted = Service::open(&config).map_err(|e| e.to_string())?;
    ensure!(restarted.snapshot() == live, "restart rebuilt different state");
    let after =
        (worklist(&restarted), serde_json::to_string(&restarted.annual(None).map_err(|e| e.to_string())?).unwrap());
    ensure!(before == after, "responses differ after restart");

    let gp: Vec<String> = report
        .gp_table
        .iter()
        .map(|r| format!("{} PA {} NA {} k {}", r.gp_id, fmt(r.pa), fmt(r.na), fmt(r.kappa)))
        .collect();
    Ok(format!("{} studies, {} events; {}", cohort.len(), live.last_sequence(), gp.join("; ")))
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.3}"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("score transform", Duration::from_secs(1), transform),
        ("orchestrator decision table", Duration::from_secs(1), decision_table),
        ("workload counterfactual", Duration::from_secs(1), workload),
        ("prevalence adjustment", Duration::from_secs(1), prevalence),
        ("isotonic regression", Duration::from_secs(10), isotonic),
        ("beta calibration", Duration::from_secs(30), beta),
        ("integrated gradients", Duration::from_secs(30), integrated),
        ("clustering", Duration::from_secs(30), clustering),
        ("metrics", Duration::from_secs(30), metrics),
        ("enhancement", Duration::from_secs(30), enhancement),
        ("end-to-end replay", Duration::from_secs(120), end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("over budget {budget:?}: {d}")),
            Err(e) => (false, e),
        };
        failed += !ok as usize;
        println!(
            "{} {name:<28} {:>8.3}s / {:>4}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
