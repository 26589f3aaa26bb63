//! Acceptance criteria, one test per criterion. Each prints a single
//! `criterion N ... PASS|FAIL` line to stderr.
//! Tests hold a shared lock so timed criteria run alone on the core.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use unidps::commands::{cmd_eval, cmd_fit, cmd_gen, cmd_gradcheck, generate_dataset, run_variant, variants, EvalSource};
use unidps::config::{AblationTable, ExperimentConfig};
use unidps::geometry::enhance_queries;
use unidps::losses::{depth_guidance_level, hungarian_match, loss_depth, semantic_guidance_level, PatchIndex};
use unidps::metrics::{dpq, panoptic_quality, DPQ_LAMBDAS};
use unidps::model::{forward, predict_from, Model, ModelConfig};
use unidps::numerics::{Rng, Tensor};
use unidps::scene::{generate_scene, CategoryTable, DepthMap, PanopticMap, SceneConfig, SegmentInfo};
use unidps::segmentation::{forward_segmentation_from, SegPrediction};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {n:>2} {name:<32} {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gradient_correctness() {
    let _g = serial();
    let cfg = ExperimentConfig::default();
    let t = Instant::now();
    let r = cmd_gradcheck(&cfg, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let terms: Vec<&str> = r.terms.iter().map(|t| t.term.as_str()).collect();
    assert_eq!(terms, ["l_cls", "l_mask", "l_depth", "l_sg", "l_dg", "total"]);
    let worst = r.terms.iter().map(|t| t.worst_rel_error).fold(0.0, f64::max);
    let covered = r.terms.iter().all(|t| t.checked >= 400);
    let pass = worst < 1e-4 && covered && secs < 60.0;
    let per_term: Vec<String> = r.terms.iter().map(|t| format!("{} {:.1e}", t.term, t.worst_rel_error)).collect();
    report(1, "gradient correctness", pass, format!("{}; {secs:.1} s", per_term.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn map_from(ids: Vec<u32>, h: usize, w: usize) -> PanopticMap {
    let present: BTreeSet<u32> = ids.iter().copied().filter(|&i| i != 0).collect();
    PanopticMap {
        height: h,
        width: w,
        segments: present
            .into_iter()
            .map(|id| SegmentInfo {
                id,
                category_id: id / 1000,
                is_thing: id / 1000 >= 5,
            })
            .collect(),
        ids,
    }
}

/// Reference PQ from pairwise pixel scans over every (GT, prediction) pair.
fn reference_pq(pred: &[u32], gt: &[u32]) -> f64 {
    let count = |f: &dyn Fn(usize) -> bool| (0..gt.len()).filter(|&p| f(p)).count();
    let gt_ids: BTreeSet<u32> = gt.iter().copied().filter(|&i| i != 0).collect();
    let pred_ids: BTreeSet<u32> = pred.iter().copied().filter(|&i| i != 0).collect();
    let mut tp: BTreeMap<u32, usize> = BTreeMap::new();
    let mut fp: BTreeMap<u32, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<u32, usize> = BTreeMap::new();
    let mut iou_sum: BTreeMap<u32, f64> = BTreeMap::new();
    let mut matched_p = BTreeSet::new();
    let mut matched_g = BTreeSet::new();
    for &g in &gt_ids {
        for &q in &pred_ids {
            if g / 1000 != q / 1000 {
                continue;
            }
            let inter = count(&|p| gt[p] == g && pred[p] == q);
            let on_void = count(&|p| gt[p] == 0 && pred[p] == q);
            let union = count(&|p| pred[p] == q) + count(&|p| gt[p] == g) - inter - on_void;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                *tp.entry(g / 1000).or_default() += 1;
                *iou_sum.entry(g / 1000).or_default() += iou;
                matched_g.insert(g);
                matched_p.insert(q);
            }
        }
    }
    for &g in &gt_ids {
        if !matched_g.contains(&g) {
            *fn_.entry(g / 1000).or_default() += 1;
        }
    }
    for &q in &pred_ids {
        let area = count(&|p| pred[p] == q);
        let on_void = count(&|p| gt[p] == 0 && pred[p] == q);
        if !matched_p.contains(&q) && 2 * on_void <= area {
            *fp.entry(q / 1000).or_default() += 1;
        }
    }
    let classes: BTreeSet<u32> = gt_ids.iter().map(|g| g / 1000).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let per_class: Vec<f64> = classes
        .iter()
        .map(|c| {
            let get = |m: &BTreeMap<u32, usize>| *m.get(c).unwrap_or(&0) as f64;
            let denom = get(&tp) + 0.5 * get(&fp) + 0.5 * get(&fn_);
            if denom == 0.0 {
                0.0
            } else {
                iou_sum.get(c).copied().unwrap_or(0.0) / denom
            }
        })
        .collect();
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

fn reference_void(pred: &[u32], pd: &DepthMap, gd: &DepthMap, lambda: f64) -> Vec<u32> {
    (0..pred.len())
        .map(|p| {
            let bad = gd.valid[p] && !(pd.valid[p] && (pd.depth[p] - gd.depth[p]).abs() <= lambda * gd.depth[p]);
            if bad {
                0
            } else {
                pred[p]
            }
        })
        .collect()
}

/// Random labelling with at most four segments drawn from `pool`, painted
/// as rectangles over a base segment, with some void.
fn random_labels(rng: &mut Rng, pool: &[u32], h: usize, w: usize) -> Vec<u32> {
    loop {
        let mut ids = vec![pool[rng.int_range(0, pool.len() - 1)]; h * w];
        for _ in 0..rng.int_range(0, 4) {
            let id = if rng.uniform() < 0.15 { 0 } else { pool[rng.int_range(0, pool.len() - 1)] };
            let (y0, x0) = (rng.int_range(0, h - 1), rng.int_range(0, w - 1));
            let (y1, x1) = (rng.int_range(y0, h - 1), rng.int_range(x0, w - 1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    ids[y * w + x] = id;
                }
            }
        }
        let distinct: BTreeSet<u32> = ids.iter().copied().filter(|&i| i != 0).collect();
        if distinct.len() <= 4 {
            return ids;
        }
    }
}

fn perturb(rng: &mut Rng, base: &[u32], pool: &[u32], h: usize, w: usize) -> Vec<u32> {
    loop {
        let mut ids = base.to_vec();
        for _ in 0..rng.int_range(0, 3) {
            let id = if rng.uniform() < 0.2 { 0 } else { pool[rng.int_range(0, pool.len() - 1)] };
            let (y0, x0) = (rng.int_range(0, h - 1), rng.int_range(0, w - 1));
            let (y1, x1) = (rng.int_range(y0, (y0 + 3).min(h - 1)), rng.int_range(x0, (x0 + 3).min(w - 1)));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    ids[y * w + x] = id;
                }
            }
        }
        let distinct: BTreeSet<u32> = ids.iter().copied().filter(|&i| i != 0).collect();
        if distinct.len() <= 4 {
            return ids;
        }
    }
}

#[test]
fn criterion_02_metric_oracle_equivalence() {
    let _g = serial();
    let mut rng = Rng::new(2024);
    let (h, w) = (8, 8);
    let mut mismatches = 0;
    let mut nontrivial = 0;
    for _ in 0..1000 {
        let pool: Vec<u32> = (0..5).map(|_| rng.int_range(1, 8) as u32 * 1000 + rng.int_range(0, 2) as u32).collect();
        let gt_ids = random_labels(&mut rng, &pool, h, w);
        let pred_ids = perturb(&mut rng, &gt_ids, &pool, h, w);
        let gd = DepthMap {
            height: h,
            width: w,
            depth: (0..h * w).map(|_| rng.uniform_range(1.0, 80.0)).collect(),
            valid: (0..h * w).map(|_| rng.uniform() < 0.8).collect(),
        };
        let pd = DepthMap {
            height: h,
            width: w,
            depth: gd.depth.iter().map(|d| d * (1.0 + 0.3 * rng.normal()).abs().max(0.05)).collect(),
            valid: (0..h * w).map(|_| rng.uniform() < 0.95).collect(),
        };
        let gt = map_from(gt_ids.clone(), h, w);
        let pred = map_from(pred_ids.clone(), h, w);
        let pq = panoptic_quality(&pred, &gt).unwrap().pq();
        if pq.to_bits() != reference_pq(&pred_ids, &gt_ids).to_bits() {
            mismatches += 1;
        }
        if pq > 0.0 && pq < 1.0 {
            nontrivial += 1;
        }
        for &l in &DPQ_LAMBDAS {
            let ours = dpq(&pred, &pd, &gt, &gd, l).unwrap().pq();
            let theirs = reference_pq(&reference_void(&pred_ids, &pd, &gd, l), &gt_ids);
            if ours.to_bits() != theirs.to_bits() {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0 && nontrivial > 200;
    report(2, "metric oracle equivalence", pass, format!("{mismatches} mismatches in 4000 ratios, {nontrivial} with 0 < PQ < 1"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_dpq_identity() {
    let _g = serial();
    let mut rng = Rng::new(33);
    let mut failures = 0;
    let mut imperfect = 0;
    for _ in 0..100 {
        let cfg = SceneConfig {
            things: rng.int_range(0, 8),
            stuff_bands: rng.int_range(1, 4),
            sparsity: rng.uniform_range(0.3, 1.0),
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, &mut rng).unwrap();
        let gt = &scene.panoptic_gt;
        let (h, w) = (gt.height, gt.width);
        let pool: Vec<u32> = gt.segments.iter().map(|s| s.id).collect();
        let mut ids = gt.ids.clone();
        for _ in 0..rng.int_range(0, 6) {
            let id = if rng.uniform() < 0.3 { 0 } else { pool[rng.int_range(0, pool.len() - 1)] };
            let (y0, x0) = (rng.int_range(0, h - 1), rng.int_range(0, w - 1));
            let (y1, x1) = (rng.int_range(y0, (y0 + 24).min(h - 1)), rng.int_range(x0, (x0 + 40).min(w - 1)));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    ids[y * w + x] = id;
                }
            }
        }
        let pred = PanopticMap {
            ids,
            ..gt.clone()
        };
        let gd = &scene.depth_gt;
        let pd = DepthMap {
            depth: gd
                .depth
                .iter()
                .zip(&gd.valid)
                .map(|(&d, &v)| if v { d } else { rng.uniform_range(1.0, 80.0) })
                .collect(),
            valid: vec![true; h * w],
            ..gd.clone()
        };
        let pq = panoptic_quality(&pred, gt).unwrap();
        if pq.pq() < 1.0 {
            imperfect += 1;
        }
        for &l in &DPQ_LAMBDAS {
            let d = dpq(&pred, &pd, gt, gd, l).unwrap();
            if d != pq || d.pq().to_bits() != pq.pq().to_bits() {
                failures += 1;
            }
        }
    }
    let pass = failures == 0 && imperfect > 20;
    report(3, "DPQ identity", pass, format!("{failures} of 300 differ, {imperfect} scenes with PQ < 1"));
    assert!(pass);
}

// ---------------------------------------------------------------- 4

fn brute_min(cost: &Tensor) -> f64 {
    let (n, g) = (cost.rows(), cost.cols());
    fn rec(cost: &Tensor, row: usize, used: &mut Vec<bool>, left: usize, acc: f64, best: &mut f64) {
        let (n, g) = (cost.rows(), cost.cols());
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        if n - row < left {
            return;
        }
        if n - row > left {
            rec(cost, row + 1, used, left, acc, best);
        }
        for j in 0..g {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, left - 1, acc + cost.row(row)[j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; g], n.min(g), 0.0, &mut best);
    best
}

#[test]
fn criterion_04_matching_optimality() {
    let _g = serial();
    let mut rng = Rng::new(4);
    let mut failures = 0;
    for _ in 0..200 {
        let (n, g) = (rng.int_range(1, 7), rng.int_range(1, 7));
        let cost = Tensor::from_fn(&[n, g], |_| rng.uniform_range(-3.0, 5.0));
        let m = hungarian_match(&cost).unwrap();
        let mut pairs = m.assignment.clone();
        pairs.sort_unstable();
        let rows: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        let total: f64 = pairs.iter().fold(0.0, |a, &(i, j)| a + cost.row(i)[j]);
        let ok = pairs.len() == n.min(g) && rows.len() == pairs.len() && cols.len() == pairs.len();
        if !ok || total != brute_min(&cost) {
            failures += 1;
        }
    }
    let pass = failures == 0;
    report(4, "matching optimality", pass, format!("{failures} of 200 differ from brute force"));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_toy_overfit() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let (data, run, ev) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("eval"));
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.scenes = 1;
    let manifest = cmd_gen(&cfg, &data, 1).unwrap();
    let (_, scenes) = unidps::scene::read_dataset(&data).unwrap();
    assert_eq!(manifest.scenes.len(), 1);
    assert_eq!(scenes[0].panoptic_gt.segments.len(), 5);
    assert_eq!((scenes[0].height(), scenes[0].width()), (64, 128));
    let t = Instant::now();
    let fitted = cmd_fit(&cfg, &data, &run, 1, false).unwrap();
    let r = cmd_eval(&cfg, &data, &EvalSource::Checkpoint(run.clone()), Some(&ev), 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let m = &r.aggregate;
    let abs_rel = m.depth.as_ref().unwrap().abs_rel;
    let dpq25 = m.dpq.iter().find(|(l, _)| *l == 0.25).unwrap().1.all;
    let decreased = fitted.log[499].loss.total < fitted.log[0].loss.total;
    let pass = m.pq.all >= 0.90 && abs_rel <= 0.05 && dpq25 >= 0.80 && secs < 600.0 && decreased;
    report(
        5,
        "toy overfit",
        pass,
        format!("PQ {:.3}, abs rel {abs_rel:.4}, DPQ@0.25 {dpq25:.3}, {} steps in {secs:.0} s", m.pq.all, fitted.log.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_backup_completeness() {
    let _g = serial();
    let mut rng = Rng::new(6);
    let table = CategoryTable::default();
    let mcfg = ModelConfig::default();
    let model = Model::new(&mcfg, table.len(), &mut Rng::new(60)).unwrap();
    let mut bad = 0;
    let mut with_holes = 0;
    let mut all_filtered = 0;
    for i in 0..100 {
        let cfg = SceneConfig {
            things: rng.int_range(0, 8),
            stuff_bands: rng.int_range(1, 4),
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, &mut rng).unwrap();
        let mut out = forward(&model, &mcfg, &scene.image).unwrap();
        let last = out.seg.predictions.last().unwrap();
        // Flatten class scores so that some or all queries drop below the
        // confidence threshold; sharpen mask logits on half the scenes.
        let scale = if i % 4 == 0 { 0.0 } else { rng.uniform_range(0.0, 0.6) };
        let mut cls = last.class_logits.clone();
        cls.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut masks = last.mask_logits.clone();
        if i % 2 == 1 {
            masks.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        }
        let degraded = SegPrediction::from_logits(cls, masks, last.height, last.width);
        *out.seg.predictions.last_mut().unwrap() = degraded;
        let p = predict_from(&out, &mcfg, &table, scene.height(), scene.width());
        if p.panoptic.kept_query_ids.is_empty() {
            all_filtered += 1;
        }
        if p.panoptic.owner.iter().any(Option::is_none) {
            with_holes += 1;
        }
        let ok = p.depth.valid.iter().all(|&v| v)
            && p.depth.depth.len() == scene.height() * scene.width()
            && p.depth.depth.iter().all(|d| d.is_finite() && *d > 0.0 && *d <= 80.0);
        if !ok {
            bad += 1;
        }
    }
    let pass = bad == 0 && with_holes > 50 && all_filtered > 0;
    report(
        6,
        "backup completeness",
        pass,
        format!("{bad} incomplete maps; {with_holes} scenes with unowned pixels, {all_filtered} with every query filtered"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

pub const GUIDANCE_SEEDS: [u64; 3] = [0, 1, 2];

#[test]
fn criterion_07_guidance_direction() {
    let _g = serial();
    let rows = variants(AblationTable::SemiSupervision);
    let semi = rows.iter().find(|v| v.name == "semi").unwrap();
    let both = rows.iter().find(|v| v.name == "semi_both").unwrap();
    let mut gains = Vec::new();
    let t = Instant::now();
    for seed in GUIDANCE_SEEDS {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.dataset.scenes = 30;
        let scenes = generate_dataset(&cfg, 1).unwrap();
        let names = unidps::commands::default_names(scenes.len());
        let off = run_variant(&cfg, semi, &names, &scenes, None, 1).unwrap();
        let on = run_variant(&cfg, both, &names, &scenes, None, 1).unwrap();
        gains.push((on.metrics.dpq_mean, off.metrics.dpq_mean));
    }
    let mean_gain = gains.iter().map(|(a, b)| a - b).sum::<f64>() / gains.len() as f64;
    let pass = mean_gain >= 0.0;
    let detail: Vec<String> = gains.iter().map(|(a, b)| format!("{:.1} vs {:.1}", 100.0 * a, 100.0 * b)).collect();
    report(
        7,
        "guidance direction",
        pass,
        format!("DPQ with vs without guidance: {}; mean gain {:+.2}; {:.0} s", detail.join(", "), 100.0 * mean_gain, t.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_loss_closed_forms() {
    let _g = serial();
    let mut rng = Rng::new(8);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let c = rng.uniform_range(0.2, 5.0);
        let gt: Vec<f64> = (0..50).map(|_| rng.uniform_range(1.0, 80.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|d| c * d).collect();
        let (l, _) = loss_depth(&pred, &gt, 0.85).unwrap();
        worst = worst.max((l - 0.15 * c.ln().powi(2)).abs());
    }
    let (h, w, k, ch) = (9, 11, 5, 6);
    let ids: Vec<u32> = (0..h * w).map(|p| if p % w < 4 { 1001 } else if p / w < 5 { 2001 } else { 5001 }).collect();
    let v: Vec<f64> = (0..ch).map(|_| rng.normal()).collect();
    let same = Tensor::from_fn(&[h * w, ch], |i| v[i % ch]);
    let sg = semantic_guidance_level(&same, &PatchIndex::semantic(&ids, h, w, k).unwrap(), 0.3).unwrap().0;
    let depth = vec![12.5; h * w];
    let dg = depth_guidance_level(&same, &depth, &PatchIndex::depth(&vec![true; h * w], h, w, k).unwrap(), 10.0)
        .unwrap()
        .0;
    let pass = worst <= 1e-12 && (sg - 0.3).abs() <= 1e-12 && (dg + (k * k - 1) as f64).abs() <= 1e-12;
    report(8, "loss closed forms", pass, format!("SI max err {worst:.1e}, l_sg {sg}, l_dg {dg}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn run_cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_unidps")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn criterion_09_determinism() {
    let _g = serial();
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let mut cfg = common::tiny_config();
    cfg.ablate.variants = vec!["B".into(), "semi_both".into()];
    let cfg_path = r.join("cfg.json");
    common::write_config(&cfg, &cfg_path);
    let c = cfg_path.to_str().unwrap();
    let mut trees = Vec::new();
    let mut stdouts = Vec::new();
    for (run, jobs) in [(0, "1"), (1, "1"), (2, "3")] {
        let base = r.join(format!("run{run}"));
        let p = |s: &str| base.join(s).to_str().unwrap().to_string();
        let mut outs = Vec::new();
        outs.push(run_cli(&["--config", c, "--jobs", jobs, "gen", "--out", &p("data")]));
        outs.push(run_cli(&["--config", c, "--jobs", jobs, "fit", "--dataset", &p("data"), "--out", &p("fit")]));
        outs.push(run_cli(&[
            "--config", c, "--jobs", jobs, "eval", "--dataset", &p("data"), "--checkpoint", &p("fit"), "--out", &p("eval"),
        ]));
        outs.push(run_cli(&[
            "--config", c, "--jobs", jobs, "eval", "--dataset", &p("data"), "--predictions", &p("eval/predictions"), "--out",
            &p("eval_pred"),
        ]));
        outs.push(run_cli(&["--config", c, "--jobs", jobs, "gradcheck", "--out", &p("gradcheck")]));
        outs.push(run_cli(&["--config", c, "--jobs", jobs, "ablate", "--dataset", &p("data"), "--out", &p("ablate")]));
        let prefix = base.to_str().unwrap().to_string();
        stdouts.push(outs.iter().map(|o| String::from_utf8_lossy(&o.stdout).replace(&prefix, "<run>")).collect::<Vec<_>>());
        trees.push(common::tree_digest(&base));
    }
    let files = trees[0].len();
    let same_trees = trees.windows(2).all(|t| t[0] == t[1]);
    let same_stdout = stdouts.windows(2).all(|s| s[0] == s[1]);
    let pass = same_trees && same_stdout && files > 20;
    report(
        9,
        "determinism",
        pass,
        format!("{files} output files over 3 runs with jobs 1/1/3; trees identical: {same_trees}, stdout identical: {same_stdout}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn(t.shape(), |i| {
        let c = t.cols();
        t.row(perm[i / c])[i % c]
    })
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_10_architecture_invariants() {
    let _g = serial();
    let mut rng = Rng::new(10);
    let table = CategoryTable::default();
    let mcfg = ModelConfig::default();
    let model = Model::new(&mcfg, table.len(), &mut rng).unwrap();
    let scene = generate_scene(&SceneConfig::default(), &mut rng).unwrap();
    let enc = model.encoder.forward(&scene.image).unwrap();
    let n = mcfg.queries;
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);

    let base = forward_segmentation_from(&enc.semantic, &model.segmentation, &model.segmentation.query_init);
    let permuted = forward_segmentation_from(
        &enc.semantic,
        &model.segmentation,
        &permute_rows(&model.segmentation.query_init, &perm),
    );
    let mut dec_err: f64 = 0.0;
    for (a, b) in base.predictions.iter().zip(&permuted.predictions) {
        dec_err = dec_err.max(max_diff(&permute_rows(&a.class_probs, &perm), &b.class_probs));
        dec_err = dec_err.max(max_diff(&permute_rows(&a.mask_logits, &perm), &b.mask_logits));
    }
    dec_err = dec_err.max(max_diff(&permute_rows(&base.queries, &perm), &permuted.queries));

    let masks = base.final_prediction();
    let masks_p = SegPrediction::from_logits(
        permute_rows(&masks.class_logits, &perm),
        permute_rows(&masks.mask_logits, &perm),
        masks.height,
        masks.width,
    );
    let e = enhance_queries(&base.queries, &model.geometry, &enc.depth, masks);
    let ep = enhance_queries(&permute_rows(&base.queries, &perm), &model.geometry, &enc.depth, &masks_p);
    let enh_err = max_diff(&permute_rows(&e.queries, &perm), &ep.queries).max(max_diff(&e.latent, &ep.latent));

    let on = forward(&model, &mcfg, &scene.image).unwrap();
    let off_cfg = ModelConfig {
        enable_enhancement: false,
        enable_backup: false,
        ..mcfg.clone()
    };
    let off = forward(&model, &off_cfg, &scene.image).unwrap();
    let (h, w) = (scene.height(), scene.width());
    let identical = on.seg.predictions == off.seg.predictions
        && predict_from(&on, &mcfg, &table, h, w).panoptic == predict_from(&off, &off_cfg, &table, h, w).panoptic;

    let pass = dec_err <= 1e-12 && enh_err <= 1e-12 && identical;
    report(
        10,
        "architecture invariants",
        pass,
        format!("decoder {dec_err:.1e}, enhancement {enh_err:.1e}, geometry on/off identical: {identical}"),
    );
    assert!(pass);
}
