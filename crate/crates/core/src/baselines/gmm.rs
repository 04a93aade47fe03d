//! Diagonal Gaussian mixtures fitted with k-means++ initialization and hard
//! (classification) EM, plus BIC model selection.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    /// C rows of d means
    pub means: Vec<Vec<f64>>,
    /// C rows of d diagonal variances
    pub variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.components(), self.dim());
        if c == 0 || d == 0 {
            return Err(Error::Shape("mixture has no components".into()));
        }
        if self.means.len() != c
            || self.variances.len() != c
            || self.means.iter().chain(&self.variances).any(|r| r.len() != d)
        {
            return Err(Error::Shape("mixture parameter shapes disagree".into()));
        }
        if self.variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("mixture variances must be positive".into()));
        }
        Ok(())
    }

    /// `log(w_c) + log N(v; mu_c, diag(sigma_c^2))`
    pub fn component_log_density(&self, c: usize, v: ArrayView1<f64>) -> f64 {
        let mut s = self.weights[c].ln();
        for ((&x, &m), &var) in v.iter().zip(&self.means[c]).zip(&self.variances[c]) {
            s -= 0.5 * ((2.0 * PI * var).ln() + (x - m) * (x - m) / var);
        }
        s
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mixture log-density of one vector.
pub fn gmm_log_likelihood(v: ArrayView1<f64>, mixture: &GaussianMixture) -> Result<f64> {
    mixture.validate()?;
    if v.len() != mixture.dim() {
        return Err(Error::Shape(format!(
            "vector has dimension {}, mixture expects {}",
            v.len(),
            mixture.dim()
        )));
    }
    let terms: Vec<f64> = (0..mixture.components())
        .map(|c| mixture.component_log_density(c, v))
        .collect();
    Ok(log_sum_exp(&terms))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Diagonal,
    Full,
    Spherical,
}

/// Parameter count used by BIC: C weights, C*d means, and per-component
/// covariance storage (d, d*d, or 1).
pub fn bic_param_count(c: usize, d: usize, kind: CovarianceKind) -> usize {
    match kind {
        CovarianceKind::Diagonal => c * (2 * d + 1),
        CovarianceKind::Full => c * (d * d + d + 1),
        CovarianceKind::Spherical => c * (d + 2),
    }
}

/// `-2 * log-likelihood + params * ln(n)` for a diagonal mixture.
pub fn bic(points: ArrayView2<f64>, mixture: &GaussianMixture) -> Result<f64> {
    let mut ll = 0.0;
    for v in points.rows() {
        ll += gmm_log_likelihood(v, mixture)?;
    }
    let p = bic_param_count(mixture.components(), mixture.dim(), CovarianceKind::Diagonal);
    Ok(-2.0 * ll + p as f64 * (points.nrows() as f64).ln())
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: ArrayView2<f64>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("component count must be at least 1".into()));
    }
    if points.nrows() < k {
        return Err(Error::InvalidArgument(format!(
            "{} points cannot fill {k} components",
            points.nrows()
        )));
    }
    if points.ncols() == 0 {
        return Err(Error::Shape("points have zero dimension".into()));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("points contain non-finite values".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Array2<f64>,
    pub assignment: Vec<usize>,
    /// sum of squared distances after each Lloyd iteration
    pub objective: Vec<f64>,
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    check_points(points, k)?;
    let n = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // all remaining points coincide with a centroid
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    let mut centroids = points.select(Axis(0), &chosen);
    let mut assignment = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut obj = 0.0;
        for (i, p) in points.rows().into_iter().enumerate() {
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(p, centroids.row(c))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("k >= 1");
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
            obj += dist;
        }
        objective.push(obj);
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            sums.row_mut(assignment[i]).scaled_add(1.0, &p);
            counts[assignment[i]] += 1;
        }
        for c in 0..k {
            // an empty cluster keeps its centroid
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        objective,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    pub kmeans_iter: usize,
    pub variance_floor: f64,
    /// responsibilities instead of hard assignments
    pub soft: bool,
    pub tolerance: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            kmeans_iter: 300,
            variance_floor: 1e-6,
            soft: false,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub mixture: GaussianMixture,
    pub assignment: Vec<usize>,
    /// per iteration: complete-data log-likelihood (hard) or log-likelihood (soft)
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub reseeded: usize,
}

/// Weighted M-step; `resp` is n x C.
fn m_step(points: ArrayView2<f64>, resp: &Array2<f64>, floor: f64) -> GaussianMixture {
    let (n, d) = points.dim();
    let c = resp.ncols();
    let mut mix = GaussianMixture {
        weights: vec![0.0; c],
        means: vec![vec![0.0; d]; c],
        variances: vec![vec![floor; d]; c],
    };
    for k in 0..c {
        let r = resp.column(k);
        let nk: f64 = r.sum();
        mix.weights[k] = nk / n as f64;
        if nk <= 0.0 {
            continue;
        }
        let mean: Array1<f64> = points.t().dot(&r) / nk;
        let mut var = vec![0.0; d];
        for (i, p) in points.rows().into_iter().enumerate() {
            if r[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                var[j] += r[i] * (p[j] - mean[j]) * (p[j] - mean[j]);
            }
        }
        mix.means[k] = mean.to_vec();
        mix.variances[k] = var.iter().map(|v| (v / nk).max(floor)).collect();
    }
    mix
}

fn one_hot(assignment: &[usize], c: usize) -> Array2<f64> {
    let mut r = Array2::zeros((assignment.len(), c));
    for (i, &a) in assignment.iter().enumerate() {
        r[[i, a]] = 1.0;
    }
    r
}

fn complete_loglik(points: ArrayView2<f64>, mix: &GaussianMixture, assignment: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(assignment)
        .map(|(p, &a)| mix.component_log_density(a, p))
        .sum()
}

/// Fits a C-component diagonal mixture. Hard EM alternates argmax assignment
/// with per-cluster maximum likelihood; an emptied component is re-seeded at
/// the point with the lowest density under its current component.
pub fn fit_gmm(points: ArrayView2<f64>, c: usize, seed: u64, cfg: &EmConfig) -> Result<GmmFit> {
    check_points(points, c)?;
    if !(cfg.variance_floor > 0.0) {
        return Err(Error::InvalidArgument("variance floor must be positive".into()));
    }
    let km = kmeans(points, c, seed, cfg.kmeans_iter)?;
    let mut assignment = km.assignment;
    let mut reseeded = 0;
    reseed_empty(points, c, &mut assignment, None, &mut reseeded);
    let mut mix = m_step(points, &one_hot(&assignment, c), cfg.variance_floor);
    let mut objective = Vec::new();
    let mut iterations = 0;

    if cfg.soft {
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..cfg.max_iter {
            iterations += 1;
            let mut resp = Array2::zeros((points.nrows(), c));
            let mut ll = 0.0;
            for (i, p) in points.rows().into_iter().enumerate() {
                let terms: Vec<f64> = (0..c).map(|k| mix.component_log_density(k, p)).collect();
                let z = log_sum_exp(&terms);
                ll += z;
                for k in 0..c {
                    resp[[i, k]] = (terms[k] - z).exp();
                }
            }
            objective.push(ll);
            mix = m_step(points, &resp, cfg.variance_floor);
            if mix.weights.iter().any(|&w| w == 0.0) {
                return Err(Error::InvalidArgument("soft EM produced an empty component".into()));
            }
            if (ll - prev).abs() <= cfg.tolerance * ll.abs().max(1.0) {
                break;
            }
            prev = ll;
        }
        for (i, p) in points.rows().into_iter().enumerate() {
            assignment[i] = argmax_component(&mix, p);
        }
    } else {
        objective.push(complete_loglik(points, &mix, &assignment));
        for _ in 0..cfg.max_iter {
            iterations += 1;
            let mut next: Vec<usize> = points.rows().into_iter().map(|p| argmax_component(&mix, p)).collect();
            let before = reseeded;
            reseed_empty(points, c, &mut next, Some(&mix), &mut reseeded);
            if next == assignment {
                break;
            }
            assignment = next;
            mix = m_step(points, &one_hot(&assignment, c), cfg.variance_floor);
            let obj = complete_loglik(points, &mix, &assignment);
            let last = *objective.last().expect("seeded");
            // argmax assignment and the per-cluster MLE can only raise the
            // objective; a re-seed step is exempt
            debug_assert!(
                reseeded != before || obj >= last - 1e-9 * last.abs().max(1.0),
                "hard-EM objective decreased: {last} -> {obj}"
            );
            objective.push(obj);
        }
    }
    Ok(GmmFit {
        mixture: mix,
        assignment,
        objective,
        iterations,
        reseeded,
    })
}

fn argmax_component(mix: &GaussianMixture, p: ArrayView1<f64>) -> usize {
    (0..mix.components())
        .map(|k| (k, mix.component_log_density(k, p)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("at least one component")
        .0
}

fn reseed_empty(
    points: ArrayView2<f64>,
    c: usize,
    assignment: &mut [usize],
    mix: Option<&GaussianMixture>,
    count: &mut usize,
) {
    loop {
        let mut sizes = vec![0usize; c];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        // farthest point from its own cluster, only taken from clusters of size > 1
        let score = |i: usize| -> f64 {
            let p = points.row(i);
            match mix {
                Some(m) => -m.component_log_density(assignment[i], p),
                None => {
                    let members: Vec<usize> = (0..assignment.len()).filter(|&j| assignment[j] == assignment[i]).collect();
                    let mean = points.select(Axis(0), &members).mean_axis(Axis(0)).expect("nonempty");
                    sq_dist(p, mean.view())
                }
            }
        };
        let far = (0..assignment.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .map(|i| (i, score(i)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("n >= c guarantees a cluster with two points");
        assignment[far] = empty;
        *count += 1;
    }
}

#[derive(Debug, Clone)]
pub struct BicSelection {
    pub components: usize,
    pub fit: GmmFit,
    /// (C, BIC) for every candidate
    pub scores: Vec<(usize, f64)>,
}

/// Fits each candidate C and keeps the lowest BIC; ties go to the smaller C.
pub fn select_components_bic(
    points: ArrayView2<f64>,
    candidates: &[usize],
    seed: u64,
    cfg: &EmConfig,
) -> Result<BicSelection> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, f64, GmmFit)> = None;
    let mut scores = Vec::new();
    for &c in &sorted {
        if c > points.nrows() {
            continue;
        }
        let fit = fit_gmm(points, c, seed, cfg)?;
        let b = bic(points, &fit.mixture)?;
        scores.push((c, b));
        if best.as_ref().is_none_or(|(_, bb, _)| b < *bb) {
            best = Some((c, b, fit));
        }
    }
    let (components, _, fit) =
        best.ok_or_else(|| Error::InvalidArgument("no candidate component count fits the data".into()))?;
    Ok(BicSelection {
        components,
        fit,
        scores,
    })
}
