//! Detection and localization metrics, and two-sample statistics for
//! measuring the gap between feature distributions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{PilotError, Result};
use crate::numerics::RngStream;

fn check_binary_input(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(PilotError::config("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PilotError::NonFinite("scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half, via midrank sums.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary_input(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(PilotError::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let group_pos = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * group_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise area under the precision-recall curve; equal scores enter
/// together.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary_input(scores, labels)?;
    if pos == 0 {
        return Err(PilotError::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// AUROC over every pixel of every image.
pub fn pixel_auroc(maps: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
    if maps.len() != masks.len() || maps.iter().zip(masks).any(|(a, b)| a.len() != b.len()) {
        return Err(PilotError::config("maps and masks differ in shape"));
    }
    let scores: Vec<f64> = maps.iter().flatten().copied().collect();
    let labels: Vec<bool> = masks.iter().flatten().copied().collect();
    auroc(&scores, &labels)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// 8-connected labelling. Returns per-pixel labels (0 = background,
/// regions numbered from 1 in raster order of their first pixel) and the
/// region count.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<usize>, usize) {
    assert_eq!(mask.len(), h * w, "mask size");
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut nbrs = Vec::with_capacity(4);
            if x > 0 {
                nbrs.push(i - 1);
            }
            if y > 0 {
                if x > 0 {
                    nbrs.push(i - w - 1);
                }
                nbrs.push(i - w);
                if x + 1 < w {
                    nbrs.push(i - w + 1);
                }
            }
            for n in nbrs {
                if mask[n] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, n));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut labels = vec![0; h * w];
    let mut root_label = vec![0usize; h * w];
    let mut count = 0;
    for i in 0..h * w {
        if mask[i] {
            let r = find(&mut parent, i);
            if root_label[r] == 0 {
                count += 1;
                root_label[r] = count;
            }
            labels[i] = root_label[r];
        }
    }
    (labels, count)
}

/// Points `(fpr, mean per-region overlap)` of the descending-threshold sweep,
/// starting at `(0, 0)`.
pub fn pro_curve(maps: &[Vec<f64>], masks: &[Vec<bool>], h: usize, w: usize) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() || maps.iter().chain(masks.iter().map(|_| &maps[0])).any(|m| m.len() != h * w) {
        return Err(PilotError::config("maps and masks must all be H x W"));
    }
    if masks.iter().any(|m| m.len() != h * w) {
        return Err(PilotError::config("maps and masks must all be H x W"));
    }
    // region id per pixel across the set, and region sizes
    let mut region_of = Vec::with_capacity(maps.len() * h * w);
    let mut sizes: Vec<f64> = Vec::new();
    for mask in masks {
        let (labels, n) = connected_components(mask, h, w);
        let base = sizes.len();
        sizes.extend(std::iter::repeat_n(0.0, n));
        for l in labels {
            if l > 0 {
                sizes[base + l - 1] += 1.0;
                region_of.push(Some(base + l - 1));
            } else {
                region_of.push(None);
            }
        }
    }
    let n_regions = sizes.len();
    let n_normal = region_of.iter().filter(|r| r.is_none()).count();
    if n_regions == 0 {
        return Err(PilotError::UndefinedMetric("AUPRO needs at least one anomalous region".into()));
    }
    if n_normal == 0 {
        return Err(PilotError::UndefinedMetric("AUPRO needs at least one normal pixel".into()));
    }
    let values: Vec<f64> = maps.iter().flatten().copied().collect();
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let mut curve = vec![(0.0, 0.0)];
    let mut fp = 0usize;
    let mut covered = vec![0.0; n_regions];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            match region_of[k] {
                Some(r) => covered[r] += 1.0,
                None => fp += 1,
            }
        }
        let pro = covered.iter().zip(&sizes).map(|(c, s)| c / s).sum::<f64>() / n_regions as f64;
        curve.push((fp as f64 / n_normal as f64, pro));
        i = j + 1;
    }
    Ok(curve)
}

/// Trapezoid area under a curve with non-decreasing x, cut at `x_max` with
/// linear interpolation at the boundary.
pub fn area_up_to(curve: &[(f64, f64)], x_max: f64) -> f64 {
    let mut area = 0.0;
    for win in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x0 >= x_max {
            break;
        }
        if x1 <= x_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cut = y0 + (y1 - y0) * (x_max - x0) / (x1 - x0);
            area += (x_max - x0) * (y0 + y_cut) / 2.0;
            break;
        }
    }
    area
}

/// Normalised area under the per-region-overlap curve up to FPR `f_max`.
pub fn aupro(maps: &[Vec<f64>], masks: &[Vec<bool>], h: usize, w: usize, f_max: f64) -> Result<f64> {
    if !(f_max > 0.0 && f_max <= 1.0) {
        return Err(PilotError::config("AUPRO FPR limit must lie in (0, 1]"));
    }
    let curve = pro_curve(maps, masks, h, w)?;
    Ok((area_up_to(&curve, f_max) / f_max).clamp(0.0, 1.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// RBF kernel over the rows of `z` with the median pairwise distance as
/// bandwidth. Returns the row-major `N x N` matrix and the bandwidth.
pub fn rbf_kernel_matrix(z: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let n = z.len();
    let d2: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|k| sq_dist(&z[k / n], &z[k % n]))
        .collect();
    let mut upper: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d2[i * n + j].sqrt())
        .collect();
    if upper.is_empty() {
        return Err(PilotError::DegenerateKernel);
    }
    upper.sort_by(f64::total_cmp);
    let m = upper.len();
    let median = if m % 2 == 1 {
        upper[m / 2]
    } else {
        0.5 * (upper[m / 2 - 1] + upper[m / 2])
    };
    if !(median > 0.0) {
        return Err(PilotError::DegenerateKernel);
    }
    let inv = 1.0 / (2.0 * median * median);
    Ok((d2.iter().map(|v| (-v * inv).exp()).collect(), median))
}

/// Unbiased MMD^2 for the split where `in_x[i]` marks membership of X.
fn mmd2_from_kernel(k: &[f64], n_total: usize, in_x: &[bool]) -> f64 {
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..n_total {
        for j in 0..n_total {
            if i == j {
                continue;
            }
            let v = k[i * n_total + j];
            match (in_x[i], in_x[j]) {
                (true, true) => sxx += v,
                (false, false) => syy += v,
                (true, false) => sxy += v,
                (false, true) => {}
            }
        }
    }
    let n = in_x.iter().filter(|&&b| b).count() as f64;
    let m = n_total as f64 - n;
    sxx / (n * (n - 1.0)) + syy / (m * (m - 1.0)) - 2.0 * sxy / (n * m)
}

/// Unbiased RBF MMD^2 with a seeded label-permutation p-value
/// `(1 + #{perm >= observed}) / (1 + permutations)`.
pub fn mmd2_rbf(x: &[Vec<f64>], y: &[Vec<f64>], permutations: usize, rng: &mut RngStream) -> Result<(f64, f64)> {
    if x.len() < 2 || y.len() < 2 {
        return Err(PilotError::config("MMD needs at least two points per sample"));
    }
    let z: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
    let (k, _) = rbf_kernel_matrix(&z)?;
    let n_total = z.len();
    let mut in_x = vec![false; n_total];
    in_x[..x.len()].iter_mut().for_each(|b| *b = true);
    let observed = mmd2_from_kernel(&k, n_total, &in_x);

    let perms: Vec<Vec<bool>> = (0..permutations)
        .map(|_| {
            let p = rng.permutation(n_total);
            let mut mark = vec![false; n_total];
            for &i in &p[..x.len()] {
                mark[i] = true;
            }
            mark
        })
        .collect();
    let exceed = perms
        .par_iter()
        .map(|mark| mmd2_from_kernel(&k, n_total, mark))
        .filter(|&s| s >= observed)
        .count();
    Ok((observed, (1 + exceed) as f64 / (1 + permutations) as f64))
}

fn mean_cov(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(PilotError::config("covariance needs at least two rows"));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(PilotError::config("rows differ in width"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(PilotError::NonFinite("FID input".into()));
    }
    let mut mu = DVector::zeros(d);
    for r in x {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in x {
        let c = DVector::from_column_slice(r) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians given by mean and covariance.
///
/// The trace of `(S1 S2)^{1/2}` is taken as the trace of the symmetric
/// `(S1^{1/2} S2 S1^{1/2})^{1/2}`, which has the same eigenvalues.
pub fn fid_from_stats(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let root1 = sym_sqrt(s1);
    let inner = &root1 * s2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross
}

pub fn fid(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = mean_cov(x)?;
    let (m2, s2) = mean_cov(y)?;
    if m1.len() != m2.len() {
        return Err(PilotError::config("feature widths differ"));
    }
    Ok(fid_from_stats(&m1, &s1, &m2, &s2))
}

/// Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // theta-function form converges fast for small lambda
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut s = 0.0;
        for k in 1..=100 {
            let t = (-((2 * k - 1) as f64).powi(2) * c).exp();
            s += t;
            if t < 1e-10 * s.max(1e-300) {
                break;
            }
        }
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let t = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
            s += if k % 2 == 1 { t } else { -t };
            if t < 1e-10 {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(PilotError::config("KS needs non-empty samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(PilotError::NonFinite("KS input".into()));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n || j < m {
        let v = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        while i < n && a[i] == v {
            i += 1;
        }
        while j < m && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = (n * m) as f64 / (n + m) as f64;
    let p = if d == 0.0 { 1.0 } else { kolmogorov_sf(en.sqrt() * d) };
    Ok((d, p))
}
