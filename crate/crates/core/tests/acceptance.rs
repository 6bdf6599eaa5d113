//! End-to-end acceptance checks. One driver runs every criterion, prints a
//! PASS/FAIL line for each and fails if any criterion failed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ircr::consistency::{StrategyRegistry, BOUNDARY_CHANNEL};
use ircr::data::{generate_dataset, Scene, SceneConfig};
use ircr::losses::{
    ce_loss, consistency_loss, dice_loss, miac_loss, msge_loss, mse_loss, piac_loss, supervised_loss, LossWeights,
    PairMasks,
};
use ircr::matching::{match_instances, munkres, DistanceMatrix};
use ircr::metrics::{aji, best_ious, dice_metric, f1_obj, mean_scores, MetricReport};
use ircr::model::{backward, forward, EmaConfig, ModelConfig, ModelParams};
use ircr::priors::{extract_all_features, fit_kde, piac_mask, score_instances, BandwidthRule, KdeChannel, PiacConfig, PriorBank};
use ircr::raster::{instance_boundary, BinaryMask, InstanceLabelMap, Tensor};
use ircr::trainer::{evaluate, TrainConfig, Trainer};
use ircr::wbis::{segment_instances, WbisParams};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- matching

/// Minimum total cost over all maximal one-to-one assignments.
fn brute_assignment(w: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(w: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>, skips: usize, acc: f64, best: &mut f64) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                go(w, rows, cols, r + 1, used, skips, acc + w[r * cols + c], best);
                used[c] = false;
            }
        }
        // a row may stay unassigned only when rows outnumber columns
        if skips > 0 {
            go(w, rows, cols, r + 1, used, skips - 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    let skips = rows.saturating_sub(cols);
    go(w, rows, cols, 0, &mut vec![false; cols], skips, 0.0, &mut best);
    best
}

fn munkres_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..500 {
        let rows = rng.gen_range(1..=7);
        let cols = rng.gen_range(1..=7);
        // integer costs create many ties, real costs exercise general values
        let w: Vec<f64> = (0..rows * cols)
            .map(|_| if case % 2 == 0 { rng.gen_range(0..10) as f64 } else { rng.gen_range(0.0..100.0) })
            .collect();
        let m = DistanceMatrix::new(rows, cols, w.clone()).map_err(|e| e.to_string())?;
        let mut pairs = munkres(&m);
        pairs.sort();
        check(pairs.len() == rows.min(cols), || format!("case {case}: {} pairs for {rows}x{cols}", pairs.len()))?;
        let mut rs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut cs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        rs.dedup();
        cs.sort();
        cs.dedup();
        check(rs.len() == pairs.len() && cs.len() == pairs.len(), || format!("case {case}: not one-to-one"))?;
        let got: f64 = pairs.iter().map(|&(r, c)| w[r * cols + c]).sum();
        let want = brute_assignment(&w, rows, cols);
        check(got == want, || format!("case {case} ({rows}x{cols}): cost {got} vs optimum {want}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!("500 matrices optimal in {secs:.2}s"))
}

// ---------------------------------------------------------------- metrics

fn ids(m: &[u32]) -> Vec<u32> {
    let mut v: Vec<u32> = m.iter().copied().filter(|&l| l > 0).collect();
    v.sort();
    v.dedup();
    v
}

fn count(n: usize, f: impl Fn(usize) -> bool) -> f64 {
    (0..n).filter(|&i| f(i)).count() as f64
}

fn oracle_aji(g: &[u32], p: &[u32]) -> f64 {
    let (gi, pi) = (ids(g), ids(p));
    if gi.is_empty() {
        return if pi.is_empty() { 1.0 } else { 0.0 };
    }
    let n = g.len();
    let mut claimed = Vec::new();
    let (mut inter, mut union) = (0.0, 0.0);
    for &a in &gi {
        let mut best: Option<(f64, u32, f64, f64)> = None;
        for &b in &pi {
            let i = count(n, |k| g[k] == a && p[k] == b);
            let u = count(n, |k| g[k] == a || p[k] == b);
            if i == 0.0 {
                continue;
            }
            if best.map_or(true, |(r, ..)| i / u > r) {
                best = Some((i / u, b, i, u));
            }
        }
        match best {
            Some((_, b, i, u)) => {
                inter += i;
                union += u;
                claimed.push(b);
            }
            None => union += count(n, |k| g[k] == a),
        }
    }
    for &b in &pi {
        if !claimed.contains(&b) {
            union += count(n, |k| p[k] == b);
        }
    }
    inter / union
}

fn oracle_dice(g: &[u32], p: &[u32]) -> f64 {
    let n = g.len();
    let a = count(n, |k| g[k] > 0);
    let b = count(n, |k| p[k] > 0);
    if a + b == 0.0 {
        return 1.0;
    }
    2.0 * count(n, |k| g[k] > 0 && p[k] > 0) / (a + b)
}

/// Largest one-to-one matching among pairs with IoU at or above `thr`,
/// by exhaustive search.
fn oracle_f1(g: &[u32], p: &[u32], thr: f64) -> f64 {
    let (gi, pi) = (ids(g), ids(p));
    if gi.is_empty() && pi.is_empty() {
        return 1.0;
    }
    let n = g.len();
    let ok: Vec<Vec<bool>> = gi
        .iter()
        .map(|&a| {
            pi.iter()
                .map(|&b| {
                    let i = count(n, |k| g[k] == a && p[k] == b);
                    let u = count(n, |k| g[k] == a || p[k] == b);
                    i > 0.0 && i / u >= thr
                })
                .collect()
        })
        .collect();
    fn best(ok: &[Vec<bool>], r: usize, used: &mut Vec<bool>) -> usize {
        if r == ok.len() {
            return 0;
        }
        let mut m = best(ok, r + 1, used);
        for c in 0..used.len() {
            if ok[r][c] && !used[c] {
                used[c] = true;
                m = m.max(1 + best(ok, r + 1, used));
                used[c] = false;
            }
        }
        m
    }
    let tp = best(&ok, 0, &mut vec![false; pi.len()]) as f64;
    2.0 * tp / (gi.len() + pi.len()) as f64
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize) -> InstanceLabelMap {
    // blocky maps so instances have realistic overlaps
    let k = rng.gen_range(0..=4u32);
    let raw: Vec<u32> = (0..h * w).map(|_| if k == 0 { 0 } else { rng.gen_range(0..=k) }).collect();
    let mut v = raw.clone();
    if rng.gen_bool(0.5) {
        for r in 0..h {
            for c in 0..w {
                v[r * w + c] = raw[(r / 2) * 2 * w + (c / 2) * 2];
            }
        }
    }
    InstanceLabelMap::compacted(h, w, &v).unwrap()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..500 {
        let h = rng.gen_range(1..=12);
        let w = rng.gen_range(1..=12);
        let gt = random_labels(&mut rng, h, w);
        let pred = random_labels(&mut rng, h, w);
        let (g, p) = (gt.labels(), pred.labels());
        let a = aji(&gt, &pred).map_err(|e| e.to_string())?;
        let d = dice_metric(&gt, &pred).map_err(|e| e.to_string())?;
        let f = f1_obj(&gt, &pred, 0.5).map_err(|e| e.to_string())?.0;
        check((a - oracle_aji(g, p)).abs() <= 1e-12, || format!("case {case}: aji {a} vs {}", oracle_aji(g, p)))?;
        check((d - oracle_dice(g, p)).abs() <= 1e-12, || format!("case {case}: dice {d} vs {}", oracle_dice(g, p)))?;
        check((f - oracle_f1(g, p, 0.5)).abs() <= 1e-12, || format!("case {case}: f1 {f} vs {}", oracle_f1(g, p, 0.5)))?;
    }
    let m = InstanceLabelMap::new(3, 3, vec![1, 1, 0, 0, 2, 2, 3, 0, 2]).unwrap();
    let same = (aji(&m, &m).unwrap(), dice_metric(&m, &m).unwrap(), f1_obj(&m, &m, 0.5).unwrap().0);
    check(same == (1.0, 1.0, 1.0), || format!("identical maps scored {same:?}"))?;
    let gt = InstanceLabelMap::new(1, 6, vec![1, 1, 1, 1, 0, 0]).unwrap();
    let pred = InstanceLabelMap::new(1, 6, vec![0, 0, 1, 1, 1, 1]).unwrap();
    let third = aji(&gt, &pred).unwrap();
    check((third - 1.0 / 3.0).abs() <= 1e-12, || format!("overlap case aji {third}"))?;
    Ok("500 random pairs agree; hand cases 1.0 and 1/3".into())
}

// ---------------------------------------------------------------- gradients

fn rel_err(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, grad: &[f64]) -> f64 {
    let step = 1e-6;
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut a = x.clone();
        a.data_mut()[i] += step;
        let mut b = x.clone();
        b.data_mut()[i] -= step;
        num.push((f(&a) - f(&b)) / (2.0 * step));
    }
    let diff = num.iter().zip(grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = num.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn softmax2(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let p: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.05..0.95)).collect();
    let mut d: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    d.extend(p);
    Tensor::new(vec![2, h, w], d).unwrap()
}

fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.4))
}

/// A few instance pairs on an 8x8 grid.
fn rand_pairs(rng: &mut ChaCha8Rng) -> Vec<PairMasks> {
    (0..3)
        .map(|_| {
            let r0 = rng.gen_range(0..5);
            let c0 = rng.gen_range(0..5);
            let s = BinaryMask::from_fn(8, 8, |r, c| (r0..r0 + 3).contains(&r) && (c0..c0 + 3).contains(&c));
            let t = BinaryMask::from_fn(8, 8, |r, c| (r0 + 1..r0 + 4).contains(&r) && (c0..c0 + 3).contains(&c));
            PairMasks {
                student_boundary: instance_boundary(&s, 1),
                teacher_boundary: instance_boundary(&t, 1),
                student: s,
                teacher: t,
            }
        })
        .collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (8, 8);
    let mut errs: BTreeMap<&str, f64> = BTreeMap::new();

    let gt = rand_mask(&mut rng, h, w);
    let p1 = rand_tensor(&mut rng, &[h, w], 0.05, 0.95);
    let g = dice_loss(&p1, &gt).unwrap().grad;
    errs.insert("dice", rel_err(&|x| dice_loss(x, &gt).unwrap().value, &p1, g.data()));

    let np = softmax2(&mut rng, h, w);
    let g = ce_loss(&np, &gt).unwrap().grad;
    errs.insert("ce", rel_err(&|x| ce_loss(x, &gt).unwrap().value, &np, g.data()));

    let hv = rand_tensor(&mut rng, &[2, h, w], -0.9, 0.9);
    let hv_gt = rand_tensor(&mut rng, &[2, h, w], -1.0, 1.0);
    let g = mse_loss(&hv, &hv_gt).unwrap().grad;
    errs.insert("mse", rel_err(&|x| mse_loss(x, &hv_gt).unwrap().value, &hv, g.data()));
    let g = msge_loss(&hv, &hv_gt, &gt).unwrap().grad;
    errs.insert("msge", rel_err(&|x| msge_loss(x, &hv_gt, &gt).unwrap().value, &hv, g.data()));

    let sup = supervised_loss(&np, &hv, &gt, &hv_gt).unwrap();
    errs.insert("supervised/np", rel_err(&|x| supervised_loss(x, &hv, &gt, &hv_gt).unwrap().total, &np, sup.grad_np.data()));
    errs.insert("supervised/hv", rel_err(&|x| supervised_loss(&np, x, &gt, &hv_gt).unwrap().total, &hv, sup.grad_hv.data()));

    let fs = rand_tensor(&mut rng, &[4, h, w], -1.0, 1.0);
    let ft = rand_tensor(&mut rng, &[4, h, w], -1.0, 1.0);
    let bs = rand_tensor(&mut rng, &[h, w], 0.0, 1.0);
    let bt = rand_tensor(&mut rng, &[h, w], 0.0, 1.0);
    let pairs = rand_pairs(&mut rng);
    let m = miac_loss(&fs, &ft, &bs, &bt, &pairs, 0.5).unwrap();
    errs.insert("miac/features", rel_err(&|x| miac_loss(x, &ft, &bs, &bt, &pairs, 0.5).unwrap().value, &fs, m.grad_features.data()));
    errs.insert("miac/boundary", rel_err(&|x| miac_loss(&fs, &ft, x, &bt, &pairs, 0.5).unwrap().value, &bs, m.grad_boundary.data()));

    let u = Tensor::new(vec![h, w], (0..h * w).map(|i| if i % 5 == 0 { 0.0 } else { 2.0 }).collect()).unwrap();
    let g = piac_loss(&fs, &ft, &u, 3).unwrap().grad;
    errs.insert("piac", rel_err(&|x| piac_loss(x, &ft, &u, 3).unwrap().value, &fs, g.data()));

    let weights = LossWeights { beta: 0.5, gamma1: 0.3, gamma2: 2.0 };
    let total = |x: &Tensor| {
        let bx = x.channel(BOUNDARY_CHANNEL).unwrap();
        let miac = miac_loss(x, &ft, &bx, &bt, &pairs, weights.beta).unwrap().fold_boundary(BOUNDARY_CHANNEL).unwrap();
        consistency_loss(&piac_loss(x, &ft, &u, 3).unwrap(), &miac, &weights).unwrap()
    };
    errs.insert("consistency", rel_err(&|x| total(x).value, &fs, total(&fs).grad.data()));

    let worst_loss = errs.values().cloned().fold(0.0, f64::max);
    check(worst_loss < 1e-4, || format!("loss gradients off: {errs:?}"))?;

    // composite through the network: supervised plus consistency on the
    // feature stack against a fixed teacher stack
    let cfg = ModelConfig { in_channels: 1, width: 4 };
    let params = ModelParams::init(cfg, 11).unwrap();
    let image = rand_tensor(&mut rng, &[1, h, w], 0.0, 1.0);
    let composite = |p: &ModelParams| -> (f64, Tensor, Tensor) {
        let out = forward(p, &image).unwrap();
        let sup = supervised_loss(&out.np_probs, &out.hv, &gt, &hv_gt).unwrap();
        let f = out.features();
        let bx = out.boundary_map();
        let miac = miac_loss(&f, &ft, &bx, &bt, &pairs, weights.beta).unwrap().fold_boundary(BOUNDARY_CHANNEL).unwrap();
        let cons = consistency_loss(&piac_loss(&f, &ft, &u, 3).unwrap(), &miac, &weights).unwrap();
        let mut gnp = sup.grad_np.clone();
        let mut ghv = sup.grad_hv.clone();
        let plane = h * w;
        for (i, v) in cons.grad.data().iter().enumerate() {
            if i < 2 * plane {
                gnp.data_mut()[i] += v;
            } else {
                ghv.data_mut()[i - 2 * plane] += v;
            }
        }
        (sup.total + cons.value, gnp, ghv)
    };
    let out = forward(&params, &image).unwrap();
    let (_, gnp, ghv) = composite(&params);
    let grads = backward(&params, &out, &gnp, &ghv).unwrap();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let flat: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let rebuild = |x: &Tensor| {
        let mut p = params.clone();
        let mut k = 0;
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = x.data()[k];
                k += 1;
            }
        }
        p
    };
    let x = Tensor::new(vec![flat.len()], flat).unwrap();
    let model_err = rel_err(&|x| composite(&rebuild(x)).0, &x, &analytic);
    check(model_err < 1e-3, || format!("model composite relative error {model_err:.2e}"))?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("worst loss error {worst_loss:.2e}, model composite {model_err:.2e}, {secs:.1}s"))
}

// ---------------------------------------------------------------- priors

fn bank_from(scenes: &[Scene]) -> PriorBank {
    let feats: Vec<_> = scenes
        .iter()
        .flat_map(|s| extract_all_features(&s.gt_labels, &s.h_channel).unwrap())
        .collect();
    fit_kde(&feats, BandwidthRule::Silverman).unwrap()
}

fn kde_correctness() -> Outcome {
    let scenes = generate_dataset(&SceneConfig { seed: 40, ..Default::default() }, 8).unwrap();
    let bank = bank_from(&scenes);
    let mut worst = 0.0f64;
    for ch in &bank.channels {
        let (xs, h) = (ch.normalized(), ch.bandwidth);
        for i in 0..=40 {
            let x = -0.5 + 2.0 * i as f64 / 40.0;
            let direct = xs.iter().map(|s| (-((x - s) / h).powi(2) / 2.0).exp() / (2.0 * PI).sqrt()).sum::<f64>()
                / (xs.len() as f64 * h);
            worst = worst.max((ch.density(x) - direct).abs());
        }
    }
    check(worst <= 1e-12, || format!("density differs from direct sum by {worst:e}"))?;
    let mut mass_err = 0.0f64;
    for ch in &bank.channels {
        let h = ch.bandwidth;
        let (lo, hi) = (-10.0 * h, 1.0 + 10.0 * h);
        let n = 20_000;
        let dx = (hi - lo) / n as f64;
        let inner: f64 = (1..n).map(|i| ch.density(lo + i as f64 * dx)).sum();
        let mass = dx * (inner + 0.5 * (ch.density(lo) + ch.density(hi)));
        mass_err = mass_err.max((mass - 1.0).abs());
    }
    check(mass_err < 1e-3, || format!("unit mass off by {mass_err:e}"))?;
    let h = 0.07;
    let one = KdeChannel::new(vec![3.0], 2.0, 4.0, h).unwrap();
    let peak = one.density(one.normalize(3.0));
    let want = 1.0 / ((2.0 * PI).sqrt() * h);
    check((peak - want).abs() <= 1e-12, || format!("single-sample peak {peak} vs {want}"))?;
    Ok(format!("direct-sum error {worst:.1e}, mass error {mass_err:.1e}, single-sample peak exact"))
}

// ---------------------------------------------------------------- training

fn small_scenes(seed: u64, n: usize, size: usize) -> Vec<Scene> {
    let cfg = SceneConfig {
        size,
        count_range: (2, 4),
        radius_range: (2.5, 4.0),
        seed,
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, n).unwrap()
}

fn ema_contract() -> Outcome {
    let data = small_scenes(50, 4, 16);
    let reg = StrategyRegistry::with_defaults();
    let base = TrainConfig {
        batch_size: 2,
        lr: 1e-2,
        labeled_ratio: Some(0.5),
        consistency: "mean-teacher".into(),
        model: ModelConfig { in_channels: 1, width: 4 },
        ema: EmaConfig { alpha: 0.9 },
        seed: 7,
        ..TrainConfig::default()
    };
    for alpha in [0.9, 0.37] {
        let cfg = TrainConfig { ema: EmaConfig { alpha }, ..base.clone() };
        let t = Trainer::new(cfg, &reg, None).map_err(|e| e.to_string())?;
        let mut state = t.init_state().unwrap();
        let mut expect: Vec<Vec<f64>> = state.teacher.tensors().iter().map(|x| x.data().to_vec()).collect();
        for k in 0..3 {
            t.step(&mut state, &[&data[k % 2]], &[&data[2 + k % 2]], 1e-2, 1.0).map_err(|e| e.to_string())?;
            for (e, s) in expect.iter_mut().zip(state.student.tensors()) {
                for (x, &y) in e.iter_mut().zip(s.data()) {
                    *x = alpha * *x + (1.0 - alpha) * y;
                }
            }
        }
        for (e, t) in expect.iter().zip(state.teacher.tensors()) {
            let same = e.iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            check(same, || format!("alpha {alpha}: teacher differs from the unrolled recurrence"))?;
        }
        check(state.teacher != state.student, || "teacher never lagged".into())?;
    }
    let cfg = TrainConfig { ema: EmaConfig { alpha: 0.0 }, ..base };
    let t = Trainer::new(cfg, &reg, None).unwrap();
    let mut state = t.init_state().unwrap();
    for k in 0..3 {
        t.step(&mut state, &[&data[k % 2]], &[&data[2]], 1e-2, 1.0).unwrap();
        check(state.teacher == state.student, || format!("alpha 0: teacher != student after step {k}"))?;
    }
    Ok("3-step teacher bit-identical to the recurrence; alpha 0 copies the student".into())
}

fn wbis_closure() -> Outcome {
    let cfg = SceneConfig { overlap_fraction: 0.2, seed: 60, ..Default::default() };
    let scenes = generate_dataset(&cfg, 100).unwrap();
    let params = WbisParams::default();
    let (mut exact, mut ious) = (0, Vec::new());
    for s in &scenes {
        let fg = s.gt_labels.foreground().to_tensor();
        let pred = segment_instances(&fg, &s.gt_hv, &params).map_err(|e| e.to_string())?;
        if pred.num_instances() == s.gt_labels.num_instances() {
            exact += 1;
        }
        ious.extend(best_ious(&s.gt_labels, &pred).unwrap());
    }
    let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    let rate = exact as f64 / scenes.len() as f64;
    check(rate >= 0.95 && mean_iou >= 0.9, || format!("exact count {rate:.2}, mean IoU {mean_iou:.3}"))?;
    Ok(format!("exact count in {exact}/100 scenes, mean instance IoU {mean_iou:.3}"))
}

fn detachment() -> Outcome {
    let data = small_scenes(70, 8, 32);
    let reg = StrategyRegistry::with_defaults();
    let bank = bank_from(&small_scenes(71, 16, 32));
    let base = TrainConfig {
        batch_size: 2,
        lr: 3e-3,
        labeled_ratio: Some(0.5),
        model: ModelConfig { in_channels: 1, width: 8 },
        seed: 3,
        ..TrainConfig::default()
    };
    // warm the student so the teacher produces instances
    let sup = Trainer::new(TrainConfig { consistency: "sup-only".into(), ..base.clone() }, &reg, None).unwrap();
    let mut state = sup.init_state().unwrap();
    for k in 0..150 {
        sup.step(&mut state, &[&data[k % 4]], &[], 3e-3, 1.0).unwrap();
    }
    state.teacher = state.student.clone();
    let mut zero = TrainConfig { consistency: "ircr".into(), ..base };
    zero.weights.losses.gamma1 = 0.0;
    zero.weights.losses.gamma2 = 0.0;
    let ircr = Trainer::new(zero, &reg, Some(&bank)).unwrap();
    let unlabeled: Vec<&Scene> = data[4..].iter().collect();
    // the first visit fills the cache, the second consumes it
    let g = ircr.gradients(&state, &[&data[0]], &unlabeled, 1.0).unwrap();
    for (id, c) in g.refreshed {
        state.cache.insert(id, c);
    }
    state.step += 1;
    let with_cache = ircr.gradients(&state, &[&data[0]], &unlabeled, 1.0).unwrap();
    let plain = sup.gradients(&state, &[&data[0]], &unlabeled, 1.0).unwrap();
    let pairs = with_cache.row.matched_pairs;
    check(pairs > 0, || "no matched pairs, detachment not exercised".into())?;
    let a: Vec<u64> = with_cache.grads.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
    let b: Vec<u64> = plain.grads.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
    check(a == b, || {
        let n = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        format!("{n} of {} gradient entries differ", a.len())
    })?;
    Ok(format!("gradients bit-identical with {pairs} matched pairs in the cache"))
}

// ---------------------------------------------------------------- ablation

const ABLATION_EPOCHS: usize = 20;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn ablation_config(strategy: &str, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: ABLATION_EPOCHS,
        labeled_ratio: Some(0.125),
        consistency: strategy.into(),
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    cfg.weights.losses.gamma1 = 1e-4;
    cfg.weights.losses.gamma2 = 1e-2;
    cfg
}

fn ablation_ordering() -> Outcome {
    let start = Instant::now();
    let train = generate_dataset(&SceneConfig { seed: 1, ..Default::default() }, 256).unwrap();
    let test = generate_dataset(&SceneConfig { seed: 2, ..Default::default() }, 64).unwrap();
    let bank = bank_from(&generate_dataset(&SceneConfig { seed: 3, ..Default::default() }, 64).unwrap());
    let reg = StrategyRegistry::with_defaults();
    let mut means = Vec::new();
    for strategy in ["sup-only", "mean-teacher", "ircr"] {
        let mut ajis = Vec::new();
        for seed in ABLATION_SEEDS {
            let cfg = ablation_config(strategy, seed);
            let t = Trainer::new(cfg.clone(), &reg, Some(&bank)).map_err(|e| e.to_string())?;
            let out = t.run(&train).map_err(|e| e.to_string())?;
            let reports: Vec<MetricReport> = evaluate(&out.checkpoint.student, &test, &cfg.wbis)
                .unwrap()
                .into_iter()
                .map(|r| r.report)
                .collect();
            ajis.push(mean_scores(&reports).unwrap().0);
        }
        let mean = ajis.iter().sum::<f64>() / ajis.len() as f64;
        println!("    {strategy:>12}: AJI per seed {ajis:.4?}, mean {mean:.4}");
        means.push(mean);
    }
    let secs = start.elapsed().as_secs_f64();
    let (a, b, c) = (means[0], means[1], means[2]);
    let summary = format!("AJI sup-only {a:.4}, mean-teacher {b:.4}, ircr {c:.4}, {:.0}s", secs);
    check(c > b && b > a && c - a >= 0.02 && secs < 1800.0, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- matching radius

/// Moves every instance by its own small offset, drops some and adds a
/// stray blob.
fn perturbed(rng: &mut ChaCha8Rng, teacher: &InstanceLabelMap) -> InstanceLabelMap {
    let (h, w) = (teacher.height(), teacher.width());
    let mut out = vec![0u32; h * w];
    for k in 1..=teacher.num_instances() as u32 {
        if rng.gen_bool(0.1) {
            continue;
        }
        let dr = rng.gen_range(-4i64..=4);
        let dc = rng.gen_range(-4i64..=4);
        for r in 0..h {
            for c in 0..w {
                if teacher.get(r, c) != k {
                    continue;
                }
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if (0..h as i64).contains(&rr) && (0..w as i64).contains(&cc) {
                    out[rr as usize * w + cc as usize] = k;
                }
            }
        }
    }
    let (r0, c0) = (rng.gen_range(0..h - 4), rng.gen_range(0..w - 4));
    for r in r0..r0 + 4 {
        for c in c0..c0 + 4 {
            out[r * w + c] = 1000;
        }
    }
    InstanceLabelMap::compacted(h, w, &out).unwrap()
}

fn radius_monotonicity() -> Outcome {
    let scenes = generate_dataset(&SceneConfig { seed: 90, ..Default::default() }, 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let factors = [0.1, 1.0, 1.5, 2.0, 3.0];
    let mut strict = 0;
    for (i, s) in scenes.iter().enumerate() {
        let student = perturbed(&mut rng, &s.gt_labels);
        let counts: Vec<usize> = factors
            .iter()
            .map(|&f| match_instances(&s.gt_labels, &student, f).unwrap().pairs.len())
            .collect();
        check(counts.windows(2).all(|p| p[0] <= p[1]), || format!("pair {i}: counts {counts:?}"))?;
        if counts[0] < counts[4] {
            strict += 1;
        }
    }
    check(strict * 10 >= scenes.len() * 9, || format!("strictly fewer at 0.1 on only {strict}/50"))?;
    Ok(format!("non-decreasing on 50/50 pairs; 0.1 < 3.0 on {strict}/50"))
}

// ---------------------------------------------------------------- speck filtering

fn speck_filtering() -> Outcome {
    let bank = bank_from(&generate_dataset(&SceneConfig { seed: 100, ..Default::default() }, 40).unwrap());
    let scenes = generate_dataset(&SceneConfig { seed: 101, ..Default::default() }, 40).unwrap();
    let cfg = PiacConfig { tau: 0.35, ..PiacConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut speck_px, mut speck_zero, mut real_px, mut real_zero) = (0usize, 0usize, 0usize, 0usize);
    let (mut n_real, mut n_speck) = (0usize, 0usize);
    for s in &scenes {
        let (h, w) = (s.gt_labels.height(), s.gt_labels.width());
        let n = s.gt_labels.num_instances();
        let mut labels = s.gt_labels.labels().to_vec();
        // one speck per four genuine instances makes specks 20% of the total
        let want = ((n as f64) / 4.0).round() as usize;
        let mut placed = 0;
        let mut background: Vec<usize> = (0..h * w).filter(|&i| labels[i] == 0).collect();
        background.shuffle(&mut rng);
        for &start in &background {
            if placed == want {
                break;
            }
            let size = rng.gen_range(1..=3);
            let (r, c) = (start / w, start % w);
            // a horizontal run of background pixels not touching any instance
            let cells: Vec<usize> = (0..size).map(|d| r * w + c + d).collect();
            let clear = c + size <= w
                && cells.iter().all(|&i| {
                    let (rr, cc) = ((i / w) as i64, (i % w) as i64);
                    (-1..=1).all(|dr| {
                        (-1..=1).all(|dc| {
                            let (y, x) = (rr + dr, cc + dc);
                            y < 0 || x < 0 || y >= h as i64 || x >= w as i64 || labels[y as usize * w + x as usize] == 0
                        })
                    })
                });
            if clear {
                for &i in &cells {
                    labels[i] = 10_000 + placed as u32;
                }
                placed += 1;
            }
        }
        let map = InstanceLabelMap::compacted(h, w, &labels).unwrap();
        let is_speck: Vec<bool> = labels.iter().map(|&l| l >= 10_000).collect();
        let scores = score_instances(&bank, &map, &s.h_channel).map_err(|e| e.to_string())?;
        let mask = piac_mask(&map, &scores, &cfg).map_err(|e| e.to_string())?;
        for i in 0..h * w {
            if map.labels()[i] == 0 {
                continue;
            }
            let zeroed = mask.data()[i] == 0.0;
            if is_speck[i] {
                speck_px += 1;
                speck_zero += zeroed as usize;
            } else {
                real_px += 1;
                real_zero += zeroed as usize;
            }
        }
        n_real += n;
        n_speck += placed;
    }
    let speck_rate = speck_zero as f64 / speck_px as f64;
    let real_rate = real_zero as f64 / real_px as f64;
    let share = n_speck as f64 / (n_real + n_speck) as f64;
    check((share - 0.2).abs() < 0.03, || format!("specks are {share:.3} of instances"))?;
    check(speck_rate >= 0.9 && real_rate <= 0.1, || {
        format!("speck pixels zeroed {speck_rate:.3}, genuine pixels zeroed {real_rate:.3}")
    })?;
    Ok(format!(
        "{n_speck} specks ({:.0}%): {:.1}% of speck pixels zeroed, {:.1}% of genuine",
        share * 100.0,
        speck_rate * 100.0,
        real_rate * 100.0
    ))
}

// ---------------------------------------------------------------- cli determinism

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ircr")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                acc.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    fs::write(d("config.ini"), "[train]\nwidth = 4\nbatch_size = 2\nlr = 0.003\n").unwrap();
    let mut files = 0;
    for run in ["a", "b"] {
        let data = d(&format!("data_{run}"));
        cli(&["gen-data", "--seed", "5", "--n-scenes", "8", "--size", "32", "--min-nuclei", "2", "--max-nuclei", "4", "--out", &data])?;
        let priors = d(&format!("priors_{run}.txt"));
        cli(&["fit-priors", "--data", &data, "--out", &priors])?;
        let train = d(&format!("train_{run}"));
        cli(&[
            "train", "--data", &data, "--out", &train, "--config", &d("config.ini"), "--priors", &priors,
            "--consistency", "ircr", "--seed", "3", "--epochs", "2", "--labeled-ratio", "0.5",
        ])?;
        let eval = d(&format!("eval_{run}.csv"));
        cli(&["eval", "--checkpoint", &format!("{train}/checkpoint"), "--data", &data, "--config", &d("config.ini"), "--out", &eval])?;
    }
    for name in ["data", "train"] {
        let a = tree(&tmp.path().join(format!("{name}_a")));
        let b = tree(&tmp.path().join(format!("{name}_b")));
        check(!a.is_empty() && a == b, || format!("{name} outputs differ between invocations"))?;
        files += a.len();
    }
    for name in ["priors", "eval"] {
        let ext = if name == "eval" { "csv" } else { "txt" };
        let a = fs::read(d(&format!("{name}_a.{ext}"))).unwrap();
        let b = fs::read(d(&format!("{name}_b.{ext}"))).unwrap();
        check(a == b, || format!("{name} outputs differ between invocations"))?;
        files += 1;
    }
    Ok(format!("{files} output files byte-identical across two invocations"))
}

// ---------------------------------------------------------------- driver

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("munkres exactness", munkres_exactness),
        ("metric oracles", metric_oracles),
        ("gradient suite", gradient_suite),
        ("kde correctness", kde_correctness),
        ("ema contract", ema_contract),
        ("wbis closure", wbis_closure),
        ("detachment", detachment),
        ("ablation ordering", ablation_ordering),
        ("matching radius monotonicity", radius_monotonicity),
        ("piac speck filtering", speck_filtering),
        ("cli determinism", cli_determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
