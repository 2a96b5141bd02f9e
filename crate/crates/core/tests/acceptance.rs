//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! Every reference value is recomputed here by a straight-line oracle that
//! does not call the library routine under test.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

use pilot::cli::evaluate;
use pilot::config::RunConfig;
use pilot::datagen::{gen_dataset, DataGenConfig, Split};
use pilot::encoders::EncoderConfig;
use pilot::grad::loss_and_grad;
use pilot::metrics::{aupro, auroc, average_precision, fid, fid_from_stats, mmd2_rbf};
use pilot::model::{init_model, ModelConfig, TrainObjective};
use pilot::numerics::{finite_diff_grad, RngStream};
use pilot::objective::ScoringConfig;
use pilot::prompts::{fuse, projection_residual, AttributeTemplates, BranchNoise};
use pilot::sparse_select::entmax15;
use pilot::trainer::train;
use pilot::tta::{select_pseudo, selection_size, selection_stats, tta_adapt, PseudoSelection, TtaConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, out: Outcome) -> Outcome {
    let took = start.elapsed();
    match out {
        Ok(d) if took > limit => Err(format!("{d}; took {took:.1?}, limit {limit:?}")),
        other => other,
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

// 1

fn entmax_bisection(k: &[f64]) -> Vec<f64> {
    let max = k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mass = |t: f64| k.iter().map(|&v| (v - t).max(0.0).powi(2)).sum::<f64>();
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    k.iter().map(|&v| (v - tau).max(0.0).powi(2)).collect()
}

fn criterion_entmax() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::named(1, "acceptance.entmax");
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let d = 2 + rng.below(63);
        let scale = 0.1 + 5.0 * rng.uniform();
        let k: Vec<f64> = (0..d).map(|_| scale * rng.normal()).collect();
        let got = entmax15(&k).weights;
        let want = entmax_bisection(&k);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        worst_sum = worst_sum.max((got.iter().sum::<f64>() - 1.0).abs());
    }
    let mut exact = true;
    for d in [2usize, 5, 64] {
        for c in [-4.0, 0.0, 3.5] {
            let u = entmax15(&vec![c; d]).weights;
            exact &= u.iter().all(|w| (w - 1.0 / d as f64).abs() <= 1e-15);
            let mut k = vec![c; d];
            k[d / 2] = c + 10.0;
            let h = entmax15(&k).weights;
            exact &= h.iter().enumerate().all(|(i, &w)| w == if i == d / 2 { 1.0 } else { 0.0 });
        }
    }
    within(
        Duration::from_secs(10),
        start,
        check(
            worst <= 1e-10 && worst_sum <= 1e-9 && exact,
            format!("max coord err {worst:.2e}, max |sum-1| {worst_sum:.2e}, special cases exact: {exact}"),
        ),
    )
}

// 2

fn toy_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            dim: 8,
            pre_dim: 10,
            image_h: 8,
            image_w: 8,
            patch_h: 4,
            patch_w: 4,
            layers: vec![1],
            text_depth: 1,
            prefix_layers: 1,
            prefix_len: 2,
            ..EncoderConfig::default()
        },
        pool_size: 2,
        prompt_len: 2,
        templates: AttributeTemplates {
            normal: vec!["{}".into(), "flawless {}".into()],
            anomalous: vec!["damaged {}".into(), "broken {}".into()],
            general: vec!["a photo of a {}".into()],
            industrial: vec![],
            medical: vec![],
        },
        init_seed: seed,
        ..ModelConfig::default()
    }
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let sc = ScoringConfig::default();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for seed in 0..20u64 {
        let m = init_model(&toy_model_config(seed)).map_err(|e| e.to_string())?;
        if m.bank.len() != 4 {
            return Err(format!("toy bank has {} attributes, expected 4", m.bank.len()));
        }
        let data = gen_dataset(
            &DataGenConfig {
                height: 8,
                width: 8,
                defect_min: 2,
                defect_max: 4,
                images_per_category: 2,
                n_categories_aux: 1,
                anomaly_fraction: 0.5,
                seed,
                ..DataGenConfig::default()
            },
            Split::Aux,
        )
        .map_err(|e| e.to_string())?;
        let feats = m.frozen_features(&data).map_err(|e| e.to_string())?;
        let mut rng = RngStream::named(seed, "acceptance.gumbel");
        let pinned: Vec<BranchNoise> = (0..2).map(|_| BranchNoise::sample(&m.bank, 1.0, &mut rng)).collect();
        let batch = (0..2)
            .map(|i| (i, data.records[i].label, Arc::new(data.records[i].mask.clone()), pinned[i].clone()))
            .collect();
        let params = m.param_set();
        let obj = TrainObjective::new(&m, &feats, batch, sc);
        let (_, grads) = loss_and_grad(&obj, &params, &[0, 1]).map_err(|e| e.to_string())?;

        for (pi, entry) in params.entries().iter().enumerate() {
            let fd = finite_diff_grad(
                |t| {
                    let mut ps = params.clone();
                    ps.set_value(pi, t.clone()).unwrap();
                    let mut mm = m.clone();
                    mm.apply_param_set(&ps).unwrap();
                    (0..2)
                        .map(|i| {
                            mm.plain_item_loss(&feats[i], data.records[i].label, &data.records[i].mask, &pinned[i], &sc)
                                .unwrap()
                        })
                        .sum::<f64>()
                        / 2.0
                },
                &entry.value,
                1e-5,
            )
            .map_err(|e| e.to_string())?;
            for (a, b) in grads.get(pi).data().iter().zip(fd.data()) {
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-6));
                coords += 1;
            }
        }
    }
    within(
        Duration::from_secs(60),
        start,
        check(worst < 1e-4, format!("max relative error {worst:.2e} over {coords} coordinates, 20 seeds")),
    )
}

// 3

fn criterion_fusion() -> Outcome {
    let mut rng = RngStream::named(3, "acceptance.fusion");
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut orth, mut proj, mut range_ok) = (0.0f64, 0.0f64, true);
    for _ in 0..1000 {
        let d = 2 + rng.below(63);
        let s = (2.0 * rng.normal()).exp();
        let a: Vec<f64> = (0..d).map(|_| s * rng.normal()).collect();
        let t: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let f = fuse(&a, &t).map_err(|e| e.to_string())?;
        let diff: Vec<f64> = f.iter().zip(&a).map(|(x, y)| x - y).collect();
        let (nd, na) = (dot(&diff, &diff).sqrt(), dot(&a, &a).sqrt());
        orth = orth.max(dot(&diff, &a).abs() / (nd * na).max(f64::MIN_POSITIVE));
        let c = dot(&f, &a) / dot(&a, &a);
        let p_err = a.iter().map(|x| (c * x - x).powi(2)).sum::<f64>().sqrt() / na;
        proj = proj.max(p_err);
        let r = projection_residual(&t, &a).map_err(|e| e.to_string())?;
        range_ok &= (0.0..=1.0).contains(&r);
    }
    check(
        orth <= 1e-9 && proj <= 1e-9 && range_ok,
        format!("orthogonality {orth:.2e}, projection {proj:.2e}, residual in [0,1]: {range_ok}"),
    )
}

// 4

fn pairwise_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &yi) in l.iter().enumerate() {
        for (j, &yj) in l.iter().enumerate() {
            if yi && !yj {
                pairs += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn swept_ap(s: &[f64], l: &[bool]) -> f64 {
    let pos = l.iter().filter(|&&y| y).count() as f64;
    let mut ts = s.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in ts {
        let (mut tp, mut n) = (0.0, 0.0);
        for (v, &y) in s.iter().zip(l) {
            if *v >= t {
                n += 1.0;
                if y {
                    tp += 1.0;
                }
            }
        }
        ap += (tp / pos - prev) * tp / n;
        prev = tp / pos;
    }
    ap
}

fn flood_regions(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            region.push(p);
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        out.push(region);
    }
    out
}

/// Per-threshold PRO curve, integrated by trapezoids up to `f_max`.
fn threshold_aupro(maps: &[Vec<f64>], masks: &[Vec<bool>], h: usize, w: usize, f_max: f64) -> f64 {
    let regions: Vec<(usize, Vec<usize>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| flood_regions(m, h, w).into_iter().map(move |r| (i, r)))
        .collect();
    let normals = masks.iter().flatten().filter(|&&g| !g).count() as f64;
    let mut ts: Vec<f64> = maps.iter().flatten().copied().collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in ts {
        let mut fp = 0.0;
        for (mp, mk) in maps.iter().zip(masks) {
            for (v, g) in mp.iter().zip(mk) {
                if !g && *v >= t {
                    fp += 1.0;
                }
            }
        }
        let pro = regions
            .iter()
            .map(|(i, r)| r.iter().filter(|&&p| maps[*i][p] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        pts.push((fp / normals, pro));
    }
    let mut area = 0.0;
    for win in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x0 >= f_max {
            break;
        }
        let x_end = x1.min(f_max);
        let y_end = if x1 > x0 { y0 + (y1 - y0) * (x_end - x0) / (x1 - x0) } else { y1 };
        area += (x_end - x0) * (y0 + y_end) / 2.0;
    }
    area / f_max
}

fn criterion_metrics() -> Outcome {
    let mut rng = RngStream::named(4, "acceptance.metrics");
    let (mut e_auc, mut e_ap, mut e_pro) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = 2 + rng.below(199);
        let s: Vec<f64> = (0..n).map(|_| rng.below(12) as f64 / 11.0).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
        l[0] = true;
        l[1] = false;
        e_auc = e_auc.max((auroc(&s, &l).map_err(|e| e.to_string())? - pairwise_auroc(&s, &l)).abs());
        e_ap = e_ap.max((average_precision(&s, &l).map_err(|e| e.to_string())? - swept_ap(&s, &l)).abs());
    }
    let (h, w) = (16, 16);
    for _ in 0..3 {
        let mut mask = vec![false; h * w];
        for _ in 0..3 {
            let (y0, x0) = (rng.below(12), rng.below(12));
            let (dy, dx) = (1 + rng.below(4), 1 + rng.below(4));
            for y in y0..y0 + dy {
                for x in x0..x0 + dx {
                    mask[y * w + x] = true;
                }
            }
        }
        let map: Vec<f64> = mask
            .iter()
            .map(|&g| ((rng.uniform() + if g { 0.4 } else { 0.0 }) * 64.0).round() / 64.0)
            .collect();
        let got = aupro(std::slice::from_ref(&map), &[mask.clone()], h, w, 0.3).map_err(|e| e.to_string())?;
        e_pro = e_pro.max((got - threshold_aupro(&[map], &[mask], h, w, 0.3)).abs());
    }

    let x: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
    let same = fid(&x, &x).map_err(|e| e.to_string())?;
    let delta = DVector::from_vec(vec![0.5, -1.25, 2.0]);
    let eye = DMatrix::<f64>::identity(3, 3);
    let shifted = fid_from_stats(&DVector::zeros(3), &eye, &delta, &eye);
    let e_fid = (shifted - delta.norm_squared()).abs();
    check(
        e_auc <= 1e-12 && e_ap <= 1e-12 && e_pro <= 1e-3 && same.abs() <= 1e-8 && e_fid <= 1e-8,
        format!("auroc {e_auc:.1e}, ap {e_ap:.1e}, aupro {e_pro:.1e}, fid(X,X) {same:.1e}, fid shift {e_fid:.1e}"),
    )
}

// 5

fn criterion_selection() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 2000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (prop::collection::vec(0u8..8, 1..80), 0.001f64..0.499);
    let result = runner.run(&strategy, |(raw, rho)| {
        let s: Vec<f64> = raw.iter().map(|&v| v as f64 / 7.0).collect();
        let b = s.len();
        let k = (rho * b as f64).ceil() as usize;
        prop_assert_eq!(selection_size(rho, b), k);
        let mut desc: Vec<usize> = (0..b).collect();
        desc.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
        match select_pseudo(&s, rho) {
            Err(pilot::PilotError::Overlap { .. }) => prop_assert!(2 * k > b),
            Err(e) => prop_assert!(false, "unexpected {}", e),
            Ok(sel) => {
                prop_assert!(2 * k <= b);
                prop_assert_eq!(&sel.anomalous, &desc[..k].to_vec());
                let mut asc: Vec<usize> = (0..b).filter(|i| !desc[..k].contains(i)).collect();
                asc.sort_by(|&i, &j| s[i].total_cmp(&s[j]).then(i.cmp(&j)));
                prop_assert_eq!(&sel.normal, &asc[..k].to_vec());
                prop_assert!(sel.anomalous.iter().all(|i| !sel.normal.contains(i)));
            }
        }
        Ok(())
    });
    check(result.is_ok(), format!("2000 random cases: {}", result.map(|_| "ok".to_string()).unwrap_or_else(|e| e.to_string())))
}

// 6

fn criterion_tta_scope() -> Outcome {
    let cfg = RunConfig::with_seed(6);
    let data = DataGenConfig {
        images_per_category: 10,
        ..cfg.data.clone()
    };
    let aux = gen_dataset(&data, Split::Aux).map_err(|e| e.to_string())?;
    let target = gen_dataset(&data, Split::Target).map_err(|e| e.to_string())?;
    let trained = train(init_model(&cfg.model).map_err(|e| e.to_string())?, &aux, &cfg.train).map_err(|e| e.to_string())?;
    let tta = TtaConfig {
        lr: 1e-2,
        epochs: 3,
        ..cfg.tta.clone()
    };
    let adapted = tta_adapt(trained.clone(), &target, &tta).map_err(|e| e.to_string())?;
    let (before, after) = (trained.param_set(), adapted.param_set());
    let changed: Vec<String> = before
        .entries()
        .iter()
        .zip(after.entries())
        .filter(|(a, b)| a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.to_bits() != y.to_bits()))
        .map(|(a, _)| a.name.clone())
        .collect();
    let allowed = |n: &str| {
        let parts: Vec<&str> = n.split('.').collect();
        parts.len() == 3 && parts[0] == "pool" && ["normal", "anomalous", "modulation", "reference"].contains(&parts[2])
    };
    let frozen_same = trained.vision.fixed_weights() == adapted.vision.fixed_weights()
        && trained.text == adapted.text
        && trained.bank == adapted.bank
        && trained.prefixes == adapted.prefixes
        && trained.vision.w_proj == adapted.vision.w_proj;
    check(
        !changed.is_empty() && changed.iter().all(|n| allowed(n)) && frozen_same,
        format!("{} tensors changed, all in the prompt pool; everything else bit-identical: {frozen_same}", changed.len()),
    )
}

// 7

fn criterion_directional_tta() -> Outcome {
    let start = Instant::now();
    let (mut img_before, mut img_after, mut px_before, mut px_after) = (vec![], vec![], vec![], vec![]);
    for seed in 0..5u64 {
        let cfg = RunConfig::with_seed(seed);
        if cfg.data.n_categories_aux != 4 || cfg.data.n_categories_target != 4 || cfg.train.epochs != 5 || cfg.tta.rho != 0.25 {
            return Err("defaults no longer match the experiment".into());
        }
        let aux = gen_dataset(&cfg.data, Split::Aux).map_err(|e| e.to_string())?;
        let target = gen_dataset(&cfg.data, Split::Target).map_err(|e| e.to_string())?;
        let m = train(init_model(&cfg.model).map_err(|e| e.to_string())?, &aux, &cfg.train).map_err(|e| e.to_string())?;
        let r0 = evaluate(&m, &target, &cfg.scoring, seed).map_err(|e| e.to_string())?;
        let adapted = tta_adapt(m, &target, &cfg.tta).map_err(|e| e.to_string())?;
        let r1 = evaluate(&adapted, &target, &cfg.scoring, seed).map_err(|e| e.to_string())?;
        let get = |v: Option<f64>| v.ok_or_else(|| "undefined metric".to_string());
        img_before.push(get(r0.image_auroc)?);
        img_after.push(get(r1.image_auroc)?);
        px_before.push(get(r0.pixel_auroc)?);
        px_after.push(get(r1.pixel_auroc)?);
    }
    let d_img: Vec<f64> = img_after.iter().zip(&img_before).map(|(a, b)| a - b).collect();
    let d_px: Vec<f64> = px_after.iter().zip(&px_before).map(|(a, b)| a - b).collect();
    let (mi, mp) = (median(&d_img), median(&d_px));
    within(
        Duration::from_secs(300),
        start,
        check(
            mi >= 0.0 && mp > -0.01,
            format!(
                "median image-AUROC change {mi:+.4} (before {:.3}, after {:.3}), median pixel-AUROC change {mp:+.4}",
                median(&img_before),
                median(&img_after)
            ),
        ),
    )
}

// 8

fn criterion_selection_stats() -> Outcome {
    let cats: Vec<usize> = (0..8).map(|i| i / 2).collect();
    let labels = vec![false; 8];
    let uniform = PseudoSelection {
        anomalous: vec![0, 2, 4, 6],
        normal: vec![1, 3, 5, 7],
        scores: vec![0.0; 8],
    };
    let single = PseudoSelection {
        anomalous: vec![0],
        normal: vec![1],
        scores: vec![0.0; 8],
    };
    let e_uni = selection_stats(&uniform, &labels, &cats).map_err(|e| e.to_string())?.evenness;
    let e_one = selection_stats(&single, &labels, &cats).map_err(|e| e.to_string())?.evenness;

    let mut wins = 0;
    let mut rates = Vec::new();
    for seed in 0..5u64 {
        let mut rng = RngStream::named(seed, "acceptance.overlap");
        let n = 400;
        let truth: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
        let cat: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let scores: Vec<f64> = truth.iter().map(|&y| rng.normal() + if y { 1.0 } else { 0.0 }).collect();
        let rate = |rho: f64| -> Result<f64, String> {
            let sel = select_pseudo(&scores, rho).map_err(|e| e.to_string())?;
            Ok(selection_stats(&sel, &truth, &cat).map_err(|e| e.to_string())?.noisy_rate)
        };
        let (lo, hi) = (rate(0.05)?, rate(0.45)?);
        rates.push(format!("{lo:.2}->{hi:.2}"));
        if hi >= lo {
            wins += 1;
        }
    }
    check(
        e_uni == 1.0 && e_one == 0.0 && wins >= 4,
        format!("evenness {e_uni} uniform, {e_one} single-class; noisy_rate grew with rho in {wins}/5 seeds [{}]", rates.join(", ")),
    )
}

// 9

fn criterion_domain_gap() -> Outcome {
    let mut halves_ok = 0;
    let mut worst_gap_p = 0.0f64;
    let mut half_ps = Vec::new();
    for seed in 0..5u64 {
        let cfg = RunConfig::with_seed(seed);
        let m = init_model(&cfg.model).map_err(|e| e.to_string())?;
        let cls = |split| -> Result<Vec<Vec<f64>>, String> {
            let ds = gen_dataset(&cfg.data, split).map_err(|e| e.to_string())?;
            Ok(m.frozen_features(&ds)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|f| m.vision.project_features(f).x_cls)
                .collect())
        };
        let (aux, target) = (cls(Split::Aux)?, cls(Split::Target)?);
        let mut rng = RngStream::named(seed, "acceptance.mmd");
        let (_, p_gap) = mmd2_rbf(&aux, &target, 1000, &mut rng).map_err(|e| e.to_string())?;
        worst_gap_p = worst_gap_p.max(p_gap);
        let order = rng.permutation(aux.len());
        let half = aux.len() / 2;
        let a: Vec<Vec<f64>> = order[..half].iter().map(|&i| aux[i].clone()).collect();
        let b: Vec<Vec<f64>> = order[half..].iter().map(|&i| aux[i].clone()).collect();
        let (_, p_half) = mmd2_rbf(&a, &b, 1000, &mut rng).map_err(|e| e.to_string())?;
        half_ps.push(format!("{p_half:.3}"));
        if p_half > 0.05 {
            halves_ok += 1;
        }
    }
    check(
        worst_gap_p <= 0.01 && halves_ok >= 4,
        format!("aux vs target max p {worst_gap_p:.4}; aux halves p > 0.05 in {halves_ok}/5 [{}]", half_ps.join(", ")),
    )
}

// 10

fn run_pipeline(root: &Path, threads: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let bin = env!("CARGO_BIN_EXE_pilot");
    let run = |args: &[&str]| -> Result<(), String> {
        let t = threads.to_string();
        let out = Command::new(bin)
            .args(["--threads", &t, "--seed", "7", "--set", "data.images_per_category=16"])
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    run(&["gen-data", "--out", &p("data")])?;
    run(&["train", "--data", &p("data/aux"), "--out", &p("model.ckpt")])?;
    run(&["tta", "--ckpt", &p("model.ckpt"), "--target", &p("data/target"), "--out", &p("adapted.ckpt")])?;
    run(&["eval", "--ckpt", &p("adapted.ckpt"), "--data", &p("data/target"), "--out", &p("report.json")])?;
    run(&[
        "analyze", "--ckpt", &p("adapted.ckpt"), "--data", &p("data/target"), "--against", &p("data/aux"), "--out",
        &p("analysis"),
    ])?;
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path: PathBuf = e.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs: Vec<BTreeMap<String, Vec<u8>>> = [(1, "a"), (1, "b"), (4, "c")]
        .iter()
        .map(|(t, name)| run_pipeline(&dir.path().join(name), *t))
        .collect::<Result<_, _>>()?;
    let has_outputs = runs[0].contains_key("report.json") && runs[0].keys().any(|k| k.ends_with(".csv"));
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1].get(*k) != Some(v) || runs[2].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    check(
        has_outputs && differing.is_empty() && runs[0].len() == runs[1].len() && runs[0].len() == runs[2].len(),
        format!("{} files compared across two 1-thread runs and one 4-thread run; differing: {differing:?}", runs[0].len()),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("entmax correctness", criterion_entmax),
        ("gradient fidelity", criterion_gradients),
        ("fusion geometry", criterion_fusion),
        ("metric oracles", criterion_metrics),
        ("selection contract", criterion_selection),
        ("TTA parameter scope", criterion_tta_scope),
        ("directional TTA", criterion_directional_tta),
        ("selection statistics", criterion_selection_stats),
        ("domain gap", criterion_domain_gap),
        ("determinism", criterion_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match out {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({d}) [{took:.1?}]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({d}) [{took:.1?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
