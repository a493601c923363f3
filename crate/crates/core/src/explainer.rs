//! Local explanations in latent space: boundary sampling between the query and its
//! contrast class, a linear surrogate fitted around the boundary, per-feature
//! importance, decoded traversals and change masks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eclf_nn::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::classifier::{predict, ClassifierModel, Prediction};
use crate::eclfcs::{self, SourceSlice};
use crate::error::{EclfError, Result};
use crate::imageio::{self, Image};
use crate::seed::{fnv1a, rng_for};
use crate::vae::{GaussianPosterior, Mode, Vae};

const EXPLAIN_TAG: u64 = 0xE7;

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainConfig {
    /// Neighbors of the contrast class used for point (B).
    pub neighbors: usize,
    /// Boundary pairs to collect.
    pub pair_budget: usize,
    /// Attempts allowed per requested pair before giving up.
    pub retry_factor: usize,
    pub k_grid: Vec<f64>,
    pub top_n: usize,
    pub scan_steps: usize,
    /// Bisection stops when `|a - b| <= tolerance * |A - B|`.
    pub tolerance: f64,
    /// Share of all surrogate points held out for diagnostics. Held-out points are
    /// drawn in addition to the one fit point per pair.
    pub holdout: f64,
    /// Half-width, as a fraction of the segment, of the band around each crossing
    /// from which surrogate points are drawn.
    pub band: f64,
    /// Contrast class; defaults to the second-highest logit.
    pub contrast: Option<usize>,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            neighbors: 10,
            pair_budget: 1000,
            retry_factor: 20,
            k_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5],
            top_n: 10,
            scan_steps: 64,
            tolerance: 1e-3,
            holdout: 0.2,
            band: 0.5,
            contrast: None,
            seed: 0,
        }
    }
}

crate::kv_section!(ExplainConfig {
    neighbors,
    pair_budget,
    retry_factor,
    k_grid,
    top_n,
    scan_steps,
    tolerance,
    holdout,
    band,
    contrast,
    seed
});

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(EclfError::config("explain.neighbors", "must be at least 1"));
        }
        if self.pair_budget < 10 {
            return Err(EclfError::config("explain.pair_budget", "must be at least 10"));
        }
        if self.retry_factor == 0 {
            return Err(EclfError::config("explain.retry_factor", "must be at least 1"));
        }
        let sorted = self.k_grid.windows(2).all(|w| w[0] < w[1]);
        if !sorted || !self.k_grid.contains(&0.0) || !self.k_grid.contains(&1.0) || self.k_grid.iter().any(|k| !k.is_finite()) {
            return Err(EclfError::config("explain.k_grid", "must be strictly ascending, finite, and contain 0 and 1"));
        }
        if self.top_n == 0 {
            return Err(EclfError::config("explain.top_n", "must be at least 1"));
        }
        if self.scan_steps == 0 {
            return Err(EclfError::config("explain.scan_steps", "must be at least 1"));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(EclfError::config("explain.tolerance", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(EclfError::config("explain.holdout", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.band) {
            return Err(EclfError::config("explain.band", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A classifier over classifiable latent vectors, evaluated in f64.
pub trait LatentClassifier: Sync {
    fn input_dim(&self) -> usize;
    fn classes(&self) -> usize;
    /// Logits for `points.len() / input_dim` row-major points.
    fn logits(&self, points: &[f64]) -> Result<Vec<f64>>;

    fn class_of(&self, point: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(point)?))
    }
}

impl LatentClassifier for ClassifierModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, points: &[f64]) -> Result<Vec<f64>> {
        let n = points.len() / self.input_dim.max(1);
        let x = Tensor::new(vec![n, self.input_dim], points.iter().map(|&v| v as f32).collect())?;
        Ok(ClassifierModel::logits(self, &x)?.data().iter().map(|&v| v as f64).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices of the `k` candidates nearest to `query`; equal distances keep the lower index first.
pub fn knearest(query: &[f64], candidates: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(EclfError::Explain("no samples of the contrast class to draw neighbors from".into()));
    }
    if k == 0 || k > candidates.len() {
        return Err(EclfError::Explain(format!("asked for {k} neighbors among {} samples", candidates.len())));
    }
    let mut order: Vec<(f64, usize)> = candidates.iter().enumerate().map(|(i, c)| (distance(query, c), i)).collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    Ok(order.into_iter().take(k).map(|(_, i)| i).collect())
}

fn draw(post: &GaussianPosterior, rng: &mut impl Rng) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.log_var)
        .map(|(m, lv)| m + (lv / 2.0).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Point (A) from the query posterior and point (B), the mean of one draw per neighbor.
pub fn sample_points(query: &GaussianPosterior, neighbors: &[GaussianPosterior], rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if neighbors.is_empty() {
        return Err(EclfError::Explain("point (B) needs at least one neighbor".into()));
    }
    let d = query.dim();
    if neighbors.iter().any(|p| p.dim() != d) {
        return Err(EclfError::Invalid("neighbor posteriors differ in dimension from the query".into()));
    }
    let a = draw(query, rng);
    let mut b = vec![0.0; d];
    for p in neighbors {
        for (acc, v) in b.iter_mut().zip(draw(p, rng)) {
            *acc += v;
        }
    }
    let n = neighbors.len() as f64;
    b.iter_mut().for_each(|v| *v /= n);
    Ok((a, b))
}

/// Two latent points straddling the decision boundary between `class_a` and `class_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPair {
    pub class_a: usize,
    pub class_b: usize,
    /// Class-A side.
    pub a: Vec<f64>,
    /// Class-B side.
    pub b: Vec<f64>,
    /// `logit_A - logit_B` at `a` and at `b`.
    pub gap_a: f64,
    pub gap_b: f64,
    /// The Monte-Carlo endpoints the pair was found between.
    pub point_a: Vec<f64>,
    pub point_b: Vec<f64>,
    /// Position of the crossing along the segment, 0 at point (A).
    pub t: f64,
}

impl BoundaryPair {
    pub fn distance(&self) -> f64 {
        distance(&self.a, &self.b)
    }

    /// Checks the pair against a live classifier.
    pub fn is_valid(&self, clf: &dyn LatentClassifier, tolerance: f64) -> Result<bool> {
        let tau = tolerance * distance(&self.point_a, &self.point_b);
        Ok(clf.class_of(&self.a)? == self.class_a && clf.class_of(&self.b)? == self.class_b && self.distance() <= tau)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Crossing {
    Pair(BoundaryPair),
    NotCrossing,
}

fn lerp_point(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| interpolate(x, y, t)).collect()
}

/// Coarse scan from `point_a` to `point_b`, then bisection down to the tolerance.
pub fn cross_boundary(
    point_a: &[f64],
    point_b: &[f64],
    clf: &dyn LatentClassifier,
    classes: (usize, usize),
    scan_steps: usize,
    tolerance: f64,
) -> Result<Crossing> {
    let (ca, cb) = classes;
    if point_a.len() != clf.input_dim() || point_b.len() != clf.input_dim() {
        return Err(EclfError::Invalid(format!("boundary search points must have {} entries", clf.input_dim())));
    }
    if clf.class_of(point_a)? != ca {
        return Err(EclfError::Invalid(format!("point (A) is not classified as class {ca}")));
    }
    if clf.class_of(point_b)? != cb {
        return Ok(Crossing::NotCrossing);
    }
    let steps = scan_steps.max(1);
    let ts: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let grid: Vec<f64> = ts.iter().flat_map(|&t| lerp_point(point_a, point_b, t)).collect();
    let logits = clf.logits(&grid)?;
    let c = clf.classes();
    let cls: Vec<usize> = logits.chunks(c).map(argmax).collect();
    let Some(i) = (1..=steps).find(|&i| cls[i - 1] == ca && cls[i] == cb) else {
        return Ok(Crossing::NotCrossing);
    };
    let (mut lo, mut hi) = (ts[i - 1], ts[i]);
    let tau = tolerance * distance(point_a, point_b);
    let (mut a, mut b) = (lerp_point(point_a, point_b, lo), lerp_point(point_a, point_b, hi));
    // 200 halvings exhaust f64 resolution long before this bound.
    for _ in 0..200 {
        if distance(&a, &b) <= tau {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let m = lerp_point(point_a, point_b, mid);
        match clf.class_of(&m)? {
            k if k == ca => (lo, a) = (mid, m),
            k if k == cb => (hi, b) = (mid, m),
            _ => return Ok(Crossing::NotCrossing),
        }
    }
    if distance(&a, &b) > tau {
        return Ok(Crossing::NotCrossing);
    }
    let gap = |p: &[f64]| -> Result<f64> {
        let l = clf.logits(p)?;
        Ok(l[ca] - l[cb])
    };
    Ok(Crossing::Pair(BoundaryPair {
        class_a: ca,
        class_b: cb,
        gap_a: gap(&a)?,
        gap_b: gap(&b)?,
        a,
        b,
        point_a: point_a.to_vec(),
        point_b: point_b.to_vec(),
        t: 0.5 * (lo + hi),
    }))
}

/// Two-output linear model `W x + bias` approximating the contrast logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    /// `[class A, class B]`.
    pub classes: [usize; 2],
    /// Rows for class A and class B.
    pub w: [Vec<f64>; 2],
    pub bias: [f64; 2],
    pub fit_mse: f64,
    pub holdout_mse: f64,
    /// Fraction of held-out points where the surrogate's logit gap has the classifier's sign.
    pub sign_agreement: f64,
    /// Variance of the classifier's logit gap over the held-out points.
    pub gap_variance: f64,
    /// The ridge strength used when the design was rank deficient.
    pub ridge: Option<f64>,
    pub fit_points: usize,
    pub holdout_points: usize,
}

impl LinearSurrogate {
    pub fn outputs(&self, x: &[f64]) -> [f64; 2] {
        let row = |r: usize| self.w[r].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[r];
        [row(0), row(1)]
    }

    pub fn w_a(&self) -> &[f64] {
        &self.w[0]
    }
}

/// Relative singular-value floor below which the design counts as rank deficient.
const RANK_TOL: f64 = 1e-10;
/// Ridge strength relative to the mean diagonal of `X^T X`.
const RIDGE_SCALE: f64 = 1e-6;

/// Least squares with intercept: returns the weight rows, biases and the ridge used if any.
pub fn fit_linear(points: &[Vec<f64>], targets: &[[f64; 2]]) -> Result<([Vec<f64>; 2], [f64; 2], Option<f64>)> {
    let n = points.len();
    if n == 0 || targets.len() != n {
        return Err(EclfError::Explain(format!(
            "surrogate fit needs matching points and targets ({n} vs {})",
            targets.len()
        )));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(EclfError::Invalid("surrogate points differ in length".into()));
    }
    if points.iter().flatten().chain(targets.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(EclfError::Explain("surrogate data is not finite".into()));
    }
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { points[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, 2, |i, j| targets[i][j]);
    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let full_rank = n > d && smax > 0.0 && smin > RANK_TOL * smax;
    let (beta, ridge) = if full_rank {
        (svd.solve(&y, RANK_TOL * smax).map_err(|e| EclfError::Explain(e.to_string()))?, None)
    } else {
        let xtx = x.transpose() * &x;
        let lambda = RIDGE_SCALE * (xtx.trace() / (d + 1) as f64).max(1.0);
        let mut reg = xtx;
        // The intercept stays unpenalized.
        for j in 0..d {
            reg[(j, j)] += lambda;
        }
        let rhs = x.transpose() * &y;
        let sol = reg
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| reg.lu().solve(&rhs))
            .ok_or_else(|| EclfError::Explain("surrogate normal equations are singular".into()))?;
        (sol, Some(lambda))
    };
    let w = [(0..d).map(|j| beta[(j, 0)]).collect(), (0..d).map(|j| beta[(j, 1)]).collect()];
    let bias = [beta[(d, 0)], beta[(d, 1)]];
    if w.iter().flatten().chain(&bias).any(|v| !v.is_finite()) {
        return Err(EclfError::Explain("surrogate fit produced non-finite weights".into()));
    }
    Ok((w, bias, ridge))
}

fn mse(s: &LinearSurrogate, points: &[&Vec<f64>], targets: &[[f64; 2]]) -> f64 {
    let total: f64 = points
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let o = s.outputs(p);
            (o[0] - t[0]).powi(2) + (o[1] - t[1]).powi(2)
        })
        .sum();
    total / (2 * points.len()).max(1) as f64
}

/// Fits on the classifier's contrast logits, holding out a random `holdout` fraction for diagnostics.
pub fn fit_surrogate(points: &[Vec<f64>], clf: &dyn LatentClassifier, classes: (usize, usize), holdout: f64, rng: &mut impl Rng) -> Result<LinearSurrogate> {
    let n = points.len();
    if n < 2 {
        return Err(EclfError::Explain("surrogate fit needs at least two points".into()));
    }
    let n_hold = ((n as f64 * holdout).round() as usize).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    if n_hold > 0 {
        order = rand::seq::index::sample(rng, n, n).into_vec();
    }
    let (hold, fit) = order.split_at(n_hold);
    let pick = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| points[i].clone()).collect() };
    fit_surrogate_split(&pick(fit), &pick(hold), clf, classes)
}

/// Fits on `fit` and scores on `hold`; with no held-out points the diagnostics use the fit set.
pub fn fit_surrogate_split(fit: &[Vec<f64>], hold: &[Vec<f64>], clf: &dyn LatentClassifier, classes: (usize, usize)) -> Result<LinearSurrogate> {
    if fit.len() < 2 {
        return Err(EclfError::Explain("surrogate fit needs at least two points".into()));
    }
    let c = clf.classes();
    let targets = |pts: &[Vec<f64>]| -> Result<Vec<[f64; 2]>> {
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        Ok(clf.logits(&flat)?.chunks(c).map(|l| [l[classes.0], l[classes.1]]).collect())
    };
    let fit_y = targets(fit)?;
    let (w, bias, ridge) = fit_linear(fit, &fit_y)?;
    let mut s = LinearSurrogate {
        classes: [classes.0, classes.1],
        w,
        bias,
        fit_mse: 0.0,
        holdout_mse: 0.0,
        sign_agreement: 0.0,
        gap_variance: 0.0,
        ridge,
        fit_points: fit.len(),
        holdout_points: hold.len(),
    };
    let fit_x: Vec<&Vec<f64>> = fit.iter().collect();
    s.fit_mse = mse(&s, &fit_x, &fit_y);
    let (dx, dy) = if hold.is_empty() {
        (fit_x, fit_y)
    } else {
        (hold.iter().collect(), targets(hold)?)
    };
    s.holdout_mse = mse(&s, &dx, &dy);
    let gaps: Vec<f64> = dy.iter().map(|t| t[0] - t[1]).collect();
    let agree = dx
        .iter()
        .zip(&gaps)
        .filter(|(p, g)| {
            let o = s.outputs(p);
            (o[0] - o[1] >= 0.0) == (**g >= 0.0)
        })
        .count();
    s.sign_agreement = agree as f64 / dx.len() as f64;
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    s.gap_variance = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64;
    Ok(s)
}

/// `W_A ⊙ (a − b)`.
pub fn importance(w_a: &[f64], cfv_a: &[f64], cfv_b: &[f64]) -> Result<Vec<f64>> {
    if w_a.len() != cfv_a.len() || cfv_a.len() != cfv_b.len() {
        return Err(EclfError::Invalid("importance inputs differ in length".into()));
    }
    Ok(w_a.iter().zip(cfv_a.iter().zip(cfv_b)).map(|(w, (a, b))| w * (a - b)).collect())
}

/// Indices by descending `|IM|`, lower index first on ties.
pub fn rank_features(im: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..im.len()).collect();
    idx.sort_by(|&i, &j| im[j].abs().total_cmp(&im[i].abs()).then(i.cmp(&j)));
    idx
}

/// Moves `k` of the way from `from` to `to`; `k = 0` and `k = 1` return the endpoints exactly.
pub fn interpolate(from: f64, to: f64, k: f64) -> f64 {
    (1.0 - k) * from + k * to
}

/// One latent per `k`: `origin` with the `selected` entries moved from `from` toward `to`.
pub fn traversal_latents(origin: &[f64], selected: &[usize], from: &[f64], to: &[f64], k_grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    if selected.len() != from.len() || from.len() != to.len() {
        return Err(EclfError::Invalid("traversal endpoints do not match the selected features".into()));
    }
    if selected.iter().any(|&i| i >= origin.len()) {
        return Err(EclfError::Invalid("traversal feature index is out of range".into()));
    }
    Ok(k_grid
        .iter()
        .map(|&k| {
            let mut z = origin.to_vec();
            for ((&i, &f), &t) in selected.iter().zip(from).zip(to) {
                z[i] = interpolate(f, t, k);
            }
            z
        })
        .collect())
}

/// Decodes one latent on its own, so a frame never depends on its neighbors in the strip.
pub fn decode_one(vae: &Vae<f32>, z: &[f64]) -> Result<Image> {
    let t = Tensor::new(vec![1, z.len()], z.iter().map(|&v| v as f32).collect())?;
    let out = vae.decode(&t)?;
    let (h, w) = (out.shape()[2], out.shape()[3]);
    Image::from_planar(h, w, out.data())
}

/// One decoded frame per latent.
pub fn render_traversal(latents: &[Vec<f64>], vae: &Vae<f32>) -> Result<Vec<Image>> {
    latents.par_iter().map(|z| decode_one(vae, z)).collect()
}

/// Pixels whose summed channel difference reaches the nearest-rank 80th percentile and is non-zero.
pub fn change_mask(frame_a: &Image, frame_b: &Image) -> Result<Vec<bool>> {
    if (frame_a.height, frame_a.width) != (frame_b.height, frame_b.width) {
        return Err(EclfError::Invalid("change mask frames differ in size".into()));
    }
    let hw = frame_a.pixels();
    if hw == 0 {
        return Ok(Vec::new());
    }
    let d: Vec<f64> = (0..hw)
        .map(|p| (0..3).map(|c| (frame_a.data[c * hw + p] as f64 - frame_b.data[c * hw + p] as f64).abs()).sum())
        .collect();
    let mut sorted = d.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = (0.8 * hw as f64).ceil().max(1.0) as usize;
    let threshold = sorted[rank - 1];
    Ok(d.iter().map(|&v| v >= threshold && v > 0.0).collect())
}

/// The mask as a white-on-black image.
pub fn mask_image(mask: &[bool], height: usize, width: usize) -> Result<Image> {
    if mask.len() != height * width {
        return Err(EclfError::Invalid("mask size does not match the image".into()));
    }
    let mut img = Image::black(height, width);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        img.set(i / width, i % width, [1.0; 3]);
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    /// Signed importance per classifiable feature.
    pub values: Vec<f64>,
    pub ranked: Vec<usize>,
    /// Index into the report's pairs of the pair used.
    pub pair: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    /// From point (A) toward point (B).
    MeanPoints,
    /// From point (a) toward point (b).
    BoundaryPoints,
}

impl Anchor {
    pub fn tag(self) -> &'static str {
        match self {
            Anchor::MeanPoints => "AB",
            Anchor::BoundaryPoints => "ab",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalStrip {
    /// Classifiable-feature indices varied together.
    pub features: Vec<usize>,
    pub group: bool,
    pub anchor: Anchor,
    /// Feature source in class-specific mode (single-feature strips only).
    pub source: Option<SourceSlice>,
    /// Class whose opposite slice was zeroed before decoding, in class-specific mode.
    pub gated_class: Option<usize>,
    pub latents: Vec<Vec<f64>>,
    pub frames: Vec<Image>,
    /// Change between the `k = 0` and `k = 1` frames.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationQuery {
    pub id: String,
    /// Full-latent posterior of the query image.
    pub posterior: GaussianPosterior,
}

/// Posteriors of labelled reference samples, from which contrast neighbors are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub posteriors: Vec<GaussianPosterior>,
    pub labels: Vec<usize>,
}

pub struct Models<'a> {
    pub vae: &'a Vae<f32>,
    pub classifier: &'a ClassifierModel,
    pub mode: Mode,
    pub class_names: &'a [String],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    pub attempts: usize,
    /// Draws of point (A) the classifier did not assign to class A.
    pub off_class_starts: usize,
    pub not_crossing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationReport {
    pub query_id: String,
    pub mode: Mode,
    pub class_names: Vec<String>,
    pub prediction: Prediction,
    pub class_a: usize,
    pub class_b: usize,
    pub pairs: Vec<BoundaryPair>,
    pub stats: PairStats,
    pub surrogate: LinearSurrogate,
    pub importance: ImportanceReport,
    pub k_grid: Vec<f64>,
    pub strips: Vec<TraversalStrip>,
}

fn contrast_class(pred: &Prediction, requested: Option<usize>) -> Result<usize> {
    let a = pred.class;
    match requested {
        Some(b) if b == a => Err(EclfError::Explain(format!("contrast class {b} equals the predicted class"))),
        Some(b) if b >= pred.logits.len() => Err(EclfError::Explain(format!("contrast class {b} does not exist"))),
        Some(b) => Ok(b),
        None => {
            let mut order: Vec<usize> = (0..pred.logits.len()).filter(|&c| c != a).collect();
            order.sort_by(|&i, &j| pred.logits[j].total_cmp(&pred.logits[i]).then(i.cmp(&j)));
            order.first().copied().ok_or_else(|| EclfError::Explain("no contrast class available".into()))
        }
    }
}

/// Steps 2 and 3 repeated until `budget` pairs are found or the attempt cap is hit.
pub fn collect_pairs(
    query: &GaussianPosterior,
    neighbors: &[GaussianPosterior],
    clf: &dyn LatentClassifier,
    classes: (usize, usize),
    cfg: &ExplainConfig,
    stream: u64,
) -> Result<(Vec<BoundaryPair>, PairStats)> {
    let cap = cfg.pair_budget * cfg.retry_factor;
    let mut pairs = Vec::with_capacity(cfg.pair_budget);
    let mut stats = PairStats {
        attempts: 0,
        off_class_starts: 0,
        not_crossing: 0,
    };
    let chunk = 256;
    while pairs.len() < cfg.pair_budget && stats.attempts < cap {
        let start = stats.attempts;
        let end = (start + chunk).min(cap);
        let outcomes: Vec<Result<Option<Crossing>>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let mut rng: ChaCha8Rng = rng_for(cfg.seed, &[EXPLAIN_TAG, stream, i as u64]);
                let (pa, pb) = sample_points(query, neighbors, &mut rng)?;
                if clf.class_of(&pa)? != classes.0 {
                    return Ok(None);
                }
                cross_boundary(&pa, &pb, clf, classes, cfg.scan_steps, cfg.tolerance).map(Some)
            })
            .collect();
        for o in outcomes {
            if pairs.len() == cfg.pair_budget {
                break;
            }
            stats.attempts += 1;
            match o? {
                None => stats.off_class_starts += 1,
                Some(Crossing::NotCrossing) => stats.not_crossing += 1,
                Some(Crossing::Pair(p)) => pairs.push(p),
            }
        }
    }
    if pairs.len() < cfg.pair_budget {
        return Err(EclfError::Explain(format!(
            "found {} of {} boundary pairs in {} attempts ({} starts outside class {}, {} segments without a crossing)",
            pairs.len(),
            cfg.pair_budget,
            stats.attempts,
            stats.off_class_starts,
            classes.0,
            stats.not_crossing
        )));
    }
    Ok((pairs, stats))
}

/// The surrogate's training set: one point per pair, uniform on its segment within
/// `band` (a fraction of the segment) of the crossing.
pub fn surrogate_points(pairs: &[BoundaryPair], band: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    pairs.iter().map(|p| band_point(p, band, rng)).collect()
}

/// `count` further band points, each from a pair chosen uniformly at random.
pub fn holdout_points(pairs: &[BoundaryPair], count: usize, band: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if pairs.is_empty() {
        return Vec::new();
    }
    (0..count).map(|_| band_point(&pairs[rng.random_range(0..pairs.len())], band, rng)).collect()
}

fn band_point(p: &BoundaryPair, band: f64, rng: &mut impl Rng) -> Vec<f64> {
    let lo = (p.t - band).max(0.0);
    let hi = (p.t + band).min(1.0);
    let t = if hi > lo { rng.random_range(lo..=hi) } else { p.t };
    lerp_point(&p.point_a, &p.point_b, t)
}

/// Runs the whole pipeline for one query.
pub fn explain(query: &ExplanationQuery, models: &Models, reference: &ReferenceSet, cfg: &ExplainConfig) -> Result<ExplanationReport> {
    cfg.validate()?;
    let layout = models.vae.layout();
    let cs = matches!(models.mode, Mode::EclfCs);
    if cs != layout.is_class_specific() {
        return Err(EclfError::Invalid("explanation mode does not match the latent layout".into()));
    }
    if query.posterior.dim() != layout.total_dim() {
        return Err(EclfError::Invalid(format!(
            "query posterior has {} entries, the latent has {}",
            query.posterior.dim(),
            layout.total_dim()
        )));
    }
    if reference.posteriors.len() != reference.labels.len() {
        return Err(EclfError::Invalid("reference posteriors and labels differ in count".into()));
    }
    let cls_idx = layout.classifiable_indices();
    let q_cfv = query.posterior.select(&cls_idx);
    let feature: Vec<f32> = q_cfv.mu.iter().map(|&v| v as f32).collect();
    let prediction = predict(models.classifier, &feature)?;
    let class_a = prediction.class;
    let class_b = contrast_class(&prediction, cfg.contrast)?;

    let pool: Vec<GaussianPosterior> = reference
        .posteriors
        .iter()
        .zip(&reference.labels)
        .filter(|(_, &l)| l == class_b)
        .map(|(p, _)| p.select(&cls_idx))
        .collect();
    let centers: Vec<Vec<f64>> = pool.iter().map(|p| p.mu.clone()).collect();
    let near = knearest(&q_cfv.mu, &centers, cfg.neighbors)?;
    let neighbors: Vec<GaussianPosterior> = near.iter().map(|&i| pool[i].clone()).collect();

    let clf: &dyn LatentClassifier = models.classifier;
    let stream = fnv1a(query.id.as_bytes());
    let (pairs, stats) = collect_pairs(&q_cfv, &neighbors, clf, (class_a, class_b), cfg, stream)?;

    let mut rng = rng_for(cfg.seed, &[EXPLAIN_TAG, stream, u64::MAX]);
    let fit_pts = surrogate_points(&pairs, cfg.band, &mut rng);
    let n_hold = (fit_pts.len() as f64 * cfg.holdout / (1.0 - cfg.holdout)).round() as usize;
    let hold_pts = holdout_points(&pairs, n_hold, cfg.band, &mut rng);
    let surrogate = fit_surrogate_split(&fit_pts, &hold_pts, clf, (class_a, class_b))?;

    // The pair whose class-A side lies closest to the query mean.
    let used = (0..pairs.len())
        .min_by(|&i, &j| distance(&pairs[i].a, &q_cfv.mu).total_cmp(&distance(&pairs[j].a, &q_cfv.mu)).then(i.cmp(&j)))
        .unwrap_or(0);
    let values = importance(surrogate.w_a(), &pairs[used].a, &pairs[used].b)?;
    let ranked = rank_features(&values);
    let top: Vec<usize> = ranked.iter().copied().take(cfg.top_n.min(ranked.len())).collect();

    let mut strips = Vec::new();
    for anchor in [Anchor::MeanPoints, Anchor::BoundaryPoints] {
        let p = &pairs[used];
        let (from, to) = match anchor {
            Anchor::MeanPoints => (&p.point_a, &p.point_b),
            Anchor::BoundaryPoints => (&p.a, &p.b),
        };
        let mut sets: Vec<(Vec<usize>, bool)> = top.iter().map(|&f| (vec![f], false)).collect();
        sets.push((top.clone(), true));
        for (features, group) in sets {
            let source = if cs && !group { Some(eclfcs::source_of(layout, features[0])?) } else { None };
            let gated_class = if cs { Some(source.map_or(class_a, SourceSlice::class_id)) } else { None };
            let mut origin = query.posterior.mu.clone();
            if let Some(c) = gated_class {
                origin = eclfcs::gate(layout, &origin, c)?;
            }
            let selected: Vec<usize> = features.iter().map(|&f| cls_idx[f]).collect();
            let f_from: Vec<f64> = features.iter().map(|&f| from[f]).collect();
            let f_to: Vec<f64> = features.iter().map(|&f| to[f]).collect();
            let mut latents = traversal_latents(&origin, &selected, &f_from, &f_to, &cfg.k_grid)?;
            if let Some(c) = gated_class {
                for z in &mut latents {
                    *z = eclfcs::gate(layout, z, c)?;
                }
            }
            let frames = render_traversal(&latents, models.vae)?;
            let k0 = cfg.k_grid.iter().position(|&k| k == 0.0).unwrap_or(0);
            let k1 = cfg.k_grid.iter().position(|&k| k == 1.0).unwrap_or(frames.len() - 1);
            let mask = change_mask(&frames[k0], &frames[k1])?;
            strips.push(TraversalStrip {
                features,
                group,
                anchor,
                source,
                gated_class,
                latents,
                frames,
                mask,
            });
        }
    }

    Ok(ExplanationReport {
        query_id: query.id.clone(),
        mode: models.mode,
        class_names: models.class_names.to_vec(),
        prediction,
        class_a,
        class_b,
        pairs,
        stats,
        surrogate,
        importance: ImportanceReport { values, ranked, pair: used },
        k_grid: cfg.k_grid.clone(),
        strips,
    })
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl TraversalStrip {
    /// File stem: `<query>_f<feature>_<anchor>` or `<query>_top<n>_<anchor>`.
    pub fn stem(&self, query_id: &str) -> String {
        let q = sanitize(query_id);
        if self.group {
            format!("{q}_top{}_{}", self.features.len(), self.anchor.tag())
        } else {
            format!("{q}_f{:03}_{}", self.features[0], self.anchor.tag())
        }
    }
}

impl ExplanationReport {
    fn class_label(&self, c: usize) -> String {
        self.class_names.get(c).cloned().unwrap_or_else(|| c.to_string())
    }

    /// Writes strips, per-k frames, masks and a text manifest; returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| EclfError::io(dir, e))?;
        let mut written = Vec::new();
        let mut files = String::new();
        for s in &self.strips {
            let stem = s.stem(&self.query_id);
            let strip_path = dir.join(format!("{stem}.png"));
            imageio::strip(&s.frames)?.save_png(&strip_path)?;
            written.push(strip_path);
            for (frame, k) in s.frames.iter().zip(&self.k_grid) {
                let p = dir.join(format!("{stem}_k{k}.png"));
                frame.save_png(&p)?;
                written.push(p);
            }
            let (h, w) = (s.frames[0].height, s.frames[0].width);
            let mask_path = dir.join(format!("{stem}_mask.png"));
            mask_image(&s.mask, h, w)?.save_png(&mask_path)?;
            written.push(mask_path);
            let source = s.source.map_or(String::new(), |src| format!(" source={}", src.name()));
            let _ = writeln!(files, "strip {stem} features={:?}{source} frames={}", s.features, s.frames.len());
        }
        let manifest = dir.join(format!("{}_report.txt", sanitize(&self.query_id)));
        std::fs::write(&manifest, self.manifest(&files)).map_err(|e| EclfError::io(&manifest, e))?;
        written.push(manifest);
        Ok(written)
    }

    fn manifest(&self, files: &str) -> String {
        let mut m = String::new();
        let s = &self.surrogate;
        let _ = writeln!(m, "query {}", self.query_id);
        let _ = writeln!(m, "mode {}", self.mode);
        let _ = writeln!(m, "predicted {} ({})", self.class_a, self.class_label(self.class_a));
        let _ = writeln!(m, "contrast {} ({})", self.class_b, self.class_label(self.class_b));
        let _ = writeln!(m, "logits {:?}", self.prediction.logits);
        let _ = writeln!(
            m,
            "pairs {} attempts {} off_class_starts {} not_crossing {}",
            self.pairs.len(),
            self.stats.attempts,
            self.stats.off_class_starts,
            self.stats.not_crossing
        );
        let _ = writeln!(
            m,
            "surrogate fit_points {} holdout_points {} fit_mse {:.6e} holdout_mse {:.6e} sign_agreement {:.4} gap_variance {:.6e} ridge {}",
            s.fit_points,
            s.holdout_points,
            s.fit_mse,
            s.holdout_mse,
            s.sign_agreement,
            s.gap_variance,
            s.ridge.map_or("none".to_string(), |r| format!("{r:e}"))
        );
        let _ = writeln!(m, "importance_pair {}", self.importance.pair);
        let _ = writeln!(m, "k_grid {:?}", self.k_grid);
        let _ = writeln!(m, "rank feature importance");
        for (r, &f) in self.importance.ranked.iter().enumerate() {
            let _ = writeln!(m, "{} {} {:+.6e}", r + 1, f, self.importance.values[f]);
        }
        m.push_str(files);
        m
    }
}
