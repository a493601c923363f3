//! Verification oracles and evaluation: quadrature total correlation, the
//! KL decomposition residual, factor alignment and the trend sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use eclf_nn::{Real, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::classifier::{extract_features, train_final, ClassifierConfig};
use crate::error::{EclfError, Result};
use crate::heads::HeadsConfig;
use crate::seed::rng_for;
use crate::synthleaf::{Dataset, FactorRecord, Split};
use crate::vae::{kl_terms, train, KlTerms, Posteriors, Selection, TrainedVae, TrainingConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Integration domain per axis.
pub const QUAD_DOMAIN: (f64, f64) = (-8.0, 8.0);

/// A Gaussian mixture with full covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

struct Component {
    log_w: f64,
    mean: DVector<f64>,
    prec: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianMixture {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covs.len() != k {
            return Err(EclfError::Invalid("mixture needs matching, non-empty weights, means and covariances".into()));
        }
        if d == 0 || self.means.iter().any(|m| m.len() != d) || self.covs.iter().any(|c| c.shape() != (d, d)) {
            return Err(EclfError::Invalid("mixture components differ in dimension".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(EclfError::Invalid("mixture weights must be positive and sum to 1".into()));
        }
        Ok(())
    }

    fn components(&self) -> Result<Vec<Component>> {
        self.validate()?;
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.covs)
            .map(|((&w, m), c)| {
                let chol = c
                    .clone()
                    .cholesky()
                    .ok_or_else(|| EclfError::Invalid("mixture covariance is not positive definite".into()))?;
                let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Ok(Component {
                    log_w: w.ln(),
                    mean: DVector::from_column_slice(m),
                    prec: chol.inverse(),
                    log_norm: -0.5 * (d * LN_2PI + log_det),
                })
            })
            .collect()
    }

    /// The mixture of the `axis` marginals, itself a 1-D mixture.
    pub fn marginal(&self, axis: usize) -> GaussianMixture {
        GaussianMixture {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| vec![m[axis]]).collect(),
            covs: self.covs.iter().map(|c| DMatrix::from_element(1, 1, c[(axis, axis)])).collect(),
        }
    }

    /// Draws one point.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        self.validate()?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let l = self.covs[k]
            .clone()
            .cholesky()
            .ok_or_else(|| EclfError::Invalid("mixture covariance is not positive definite".into()))?
            .l();
        let e = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok((DVector::from_column_slice(&self.means[k]) + l * e).iter().copied().collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(log_density(&self.components()?, x))
    }
}

fn log_density(comps: &[Component], x: &[f64]) -> f64 {
    let x = DVector::from_column_slice(x);
    let terms: Vec<f64> = comps
        .iter()
        .map(|c| {
            let r = &x - &c.mean;
            c.log_w + c.log_norm - 0.5 * (r.transpose() * &c.prec * &r)[(0, 0)]
        })
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Midpoint-rule estimate of `∫ p log p` over the cube `QUAD_DOMAIN^d`.
fn neg_entropy(mix: &GaussianMixture, points: usize) -> Result<f64> {
    let comps = mix.components()?;
    let d = mix.dim();
    let (lo, hi) = QUAD_DOMAIN;
    let h = (hi - lo) / points as f64;
    let axis: Vec<f64> = (0..points).map(|i| lo + (i as f64 + 0.5) * h).collect();
    let cells = points.pow(d as u32);
    let total: f64 = (0..cells)
        .into_par_iter()
        .map(|mut c| {
            let mut x = vec![0.0; d];
            for v in x.iter_mut() {
                *v = axis[c % points];
                c /= points;
            }
            let lp = log_density(&comps, &x);
            let p = lp.exp();
            if p > 0.0 {
                p * lp
            } else {
                0.0
            }
        })
        .sum();
    Ok(total * h.powi(d as i32))
}

/// Grid points per axis: 1024 up to two dimensions, 160 in three.
pub fn quad_points(dim: usize) -> usize {
    if dim <= 2 {
        1024
    } else {
        160
    }
}

/// Total correlation `KL(q(z) || Π_j q(z_j))` by quadrature on `[-8, 8]^d`, `d <= 3`.
pub fn tc_oracle(mix: &GaussianMixture) -> Result<f64> {
    mix.validate()?;
    let d = mix.dim();
    if d > 3 {
        return Err(EclfError::Invalid(format!("quadrature oracle supports up to 3 dimensions, got {d}")));
    }
    let joint = neg_entropy(mix, quad_points(d))?;
    let mut marginals = 0.0;
    for j in 0..d {
        marginals += neg_entropy(&mix.marginal(j), quad_points(1))?;
    }
    Ok(joint - marginals)
}

/// The two sides of the KL decomposition identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    /// Mean closed-form `KL(q(z|n) || p(z))`.
    pub expected_kl: f64,
    /// Minibatch estimates of the three terms.
    pub terms: KlTerms,
    pub samples: usize,
}

impl Decomposition {
    pub fn residual(&self) -> f64 {
        (self.expected_kl - self.terms.sum()).abs()
    }
}

/// Compares the closed-form expected KL with `index_mi + tc + dkl` estimated from
/// `samples` reparameterized draws, taken in minibatches of `batch` posteriors.
pub fn decomposition_check<T: Real>(post: &Posteriors<T>, samples: usize, batch: usize, seed: u64) -> Result<Decomposition> {
    let m = post.len();
    if m == 0 || samples == 0 || batch == 0 {
        return Err(EclfError::Invalid("decomposition check needs posteriors, samples and a batch size".into()));
    }
    let batch = batch.min(m);
    let d = post.mu.shape()[1];
    let expected_kl = (0..m).map(|i| post.get(i).kl_to_prior()).sum::<f64>() / m as f64;
    let mut rng = rng_for(seed, &[0xDC]);
    let mut acc = KlTerms::default();
    let mut drawn = 0;
    while drawn < samples {
        let n = batch.min(samples - drawn).max(if m == 1 { 1 } else { 2 }).min(m);
        let idx = rand::seq::index::sample(&mut rng, m, n).into_vec();
        let rows = |t: &Tensor<T>| -> Result<Tensor<f64>> {
            let data = idx.iter().flat_map(|&i| t.row(i).iter().map(|v| v.as_f64())).collect();
            Ok(Tensor::new(vec![n, d], data)?)
        };
        let sub = Posteriors {
            mu: rows(&post.mu)?,
            log_var: rows(&post.log_var)?,
        };
        let z: Vec<f64> = (0..n * d)
            .map(|i| {
                let e: f64 = rng.sample(StandardNormal);
                sub.mu.data()[i] + (sub.log_var.data()[i] / 2.0).exp() * e
            })
            .collect();
        let z = Tensor::new(vec![n, d], z)?;
        let t = kl_terms(&sub, &z, m)?;
        let w = n as f64;
        acc.index_mi += t.index_mi * w;
        acc.tc += t.tc * w;
        acc.dkl += t.dkl * w;
        drawn += n;
    }
    let inv = 1.0 / drawn as f64;
    Ok(Decomposition {
        expected_kl,
        terms: KlTerms {
            index_mi: acc.index_mi * inv,
            tc: acc.tc * inv,
            dkl: acc.dkl * inv,
        },
        samples: drawn,
    })
}

/// Average ranks, ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(EclfError::Invalid(format!(
            "spearman needs two equal series of length >= 2 ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `|Spearman|` between every factor (rows) and latent dimension (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub factors: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl AlignmentMatrix {
    pub fn dims(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// Best score per factor and the dimension achieving it (lowest index on ties).
    pub fn best_per_factor(&self) -> Vec<(usize, f64)> {
        self.scores
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
            })
            .collect()
    }

    /// The factor most aligned with latent dimension `dim` (lowest index on ties).
    pub fn best_factor_for(&self, dim: usize) -> Option<usize> {
        (0..self.scores.len()).fold(None, |best: Option<usize>, f| match best {
            Some(b) if self.scores[b][dim] >= self.scores[f][dim] => Some(b),
            _ => Some(f),
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["factor".to_string()];
        header.extend((0..self.dims()).map(|j| format!("z{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for (name, row) in self.factors.iter().zip(&self.scores) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| EclfError::Invalid(e.to_string()))?).map_err(|e| EclfError::Invalid(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> EclfError {
    EclfError::Invalid(format!("csv: {e}"))
}

/// Alignment of latent means `[N, D]` with named factor columns.
pub fn factor_alignment(latents: &Tensor<f64>, factor_names: &[String], factors: &[Vec<f64>]) -> Result<AlignmentMatrix> {
    let (n, d) = latents.as_matrix("latent means")?;
    if factors.len() != n {
        return Err(EclfError::Invalid(format!("{} factor records for {n} latents", factors.len())));
    }
    if factors.iter().any(|f| f.len() != factor_names.len()) {
        return Err(EclfError::Invalid("factor records differ from the factor names in length".into()));
    }
    let cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| latents.row(i)[j]).collect()).collect();
    let scores = (0..factor_names.len())
        .map(|f| {
            let fv: Vec<f64> = factors.iter().map(|r| r[f]).collect();
            cols.iter().map(|c| spearman(&fv, c).map(f64::abs)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentMatrix {
        factors: factor_names.to_vec(),
        scores,
    })
}

/// [`factor_alignment`] for synthetic records.
pub fn synth_alignment(latents: &Tensor<f64>, records: &[FactorRecord]) -> Result<AlignmentMatrix> {
    let names: Vec<String> = FactorRecord::NAMES.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.values().to_vec()).collect();
    factor_alignment(latents, &names, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Beta,
    LatentDim,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Beta => "beta",
            SweepAxis::LatentDim => "latent_dim",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        crate::textconf::parse_word(s, &[("beta", SweepAxis::Beta), ("latent_dim", SweepAxis::LatentDim)])
    }
}

crate::conf_value_via_str!(SweepAxis);

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Classifiable share of the latent when sweeping its size.
    pub cfv_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::Beta,
            values: vec![1.0, 4.0, 16.0],
            seeds: vec![0, 1, 2],
            cfv_fraction: 0.5,
        }
    }
}

crate::kv_section!(SweepConfig {
    axis,
    values,
    seeds,
    cfv_fraction
});

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(EclfError::config("sweep.values", "give at least one value"));
        }
        if self.seeds.is_empty() {
            return Err(EclfError::config("sweep.seeds", "give at least one seed"));
        }
        match self.axis {
            SweepAxis::Beta if self.values.iter().any(|v| !(*v >= 0.0)) => Err(EclfError::config("sweep.values", "beta values must be non-negative")),
            SweepAxis::LatentDim if self.values.iter().any(|v| !(*v >= 2.0) || v.fract() != 0.0) => {
                Err(EclfError::config("sweep.values", "latent sizes must be integers of at least 2"))
            }
            _ if !(self.cfv_fraction > 0.0 && self.cfv_fraction < 1.0) => Err(EclfError::config("sweep.cfv_fraction", "must lie in (0, 1)")),
            _ => Ok(()),
        }
    }

    /// The training config of one cell.
    pub fn cell(&self, base: &TrainingConfig, value: f64, seed: u64) -> TrainingConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        match self.axis {
            SweepAxis::Beta => cfg.beta = value,
            SweepAxis::LatentDim => {
                let d = value as usize;
                cfg.latent_dim = d;
                cfg.cfv_dim = ((d as f64 * self.cfv_fraction).round() as usize).clamp(1, d - 1);
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRecord {
    pub value: f64,
    pub seed: u64,
    /// Iteration of the snapshot the record describes.
    pub iteration: u64,
    pub l_rc: f64,
    pub index_mi: f64,
    pub tc: f64,
    pub dkl: f64,
    /// Final-classifier test accuracy on that snapshot's features.
    pub accuracy: f64,
}

pub const SWEEP_HEADER: &str = "axis,value,seed,iteration,l_rc,index_mi,tc,dkl,accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(SWEEP_HEADER.split(',')).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                self.axis.to_string(),
                format!("{}", r.value),
                r.seed.to_string(),
                r.iteration.to_string(),
                format!("{}", r.l_rc),
                format!("{}", r.index_mi),
                format!("{}", r.tc),
                format!("{}", r.dkl),
                format!("{}", r.accuracy),
            ])
            .map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| EclfError::Invalid(e.to_string()))?).map_err(|e| EclfError::Invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| EclfError::io(path, e))
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.records.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Per seed, Spearman between the swept value and `metric`.
    pub fn trend(&self, metric: impl Fn(&SweepRecord) -> f64) -> Result<Vec<(u64, f64)>> {
        self.seeds()
            .into_iter()
            .map(|s| {
                let rows: Vec<&SweepRecord> = self.records.iter().filter(|r| r.seed == s).collect();
                let x: Vec<f64> = rows.iter().map(|r| r.value).collect();
                let y: Vec<f64> = rows.iter().map(|r| metric(r)).collect();
                Ok((s, spearman(&x, &y)?))
            })
            .collect()
    }

    /// Whether more than half the seeds show a trend of the given sign.
    pub fn majority(&self, metric: impl Fn(&SweepRecord) -> f64, positive: bool) -> Result<bool> {
        let t = self.trend(metric)?;
        let hits = t.iter().filter(|(_, r)| if positive { *r > 0.0 } else { *r < 0.0 }).count();
        Ok(2 * hits > t.len())
    }

    pub fn summary(&self) -> Result<String> {
        let mut s = format!("sweep over {}\n", self.axis);
        for (name, f) in [
            ("l_rc", (|r: &SweepRecord| r.l_rc) as fn(&SweepRecord) -> f64),
            ("tc", |r| r.tc),
            ("dkl", |r| r.dkl),
            ("accuracy", |r| r.accuracy),
        ] {
            let t = self.trend(f)?;
            let cells: Vec<String> = t.iter().map(|(seed, r)| format!("seed {seed}: {r:+.3}")).collect();
            s.push_str(&format!("spearman({}, {name}) {}\n", self.axis, cells.join(", ")));
        }
        Ok(s)
    }
}

/// Trains one cell and scores its selected snapshot.
pub fn run_cell(data: &Dataset, cfg: TrainingConfig, heads: &HeadsConfig, cls: &ClassifierConfig, value: f64) -> Result<SweepRecord> {
    let seed = cfg.seed;
    let out = train(data, cfg, heads.clone())?;
    let model = TrainedVae::from_checkpoint(&out.checkpoint, Selection::LowestLoss)?;
    let rec = out
        .val_log
        .iter()
        .find(|r| r.iteration == model.iteration)
        .or_else(|| out.val_log.last())
        .ok_or_else(|| EclfError::Invalid("training produced no validation record".into()))?;
    let feats = |s: Split| extract_features(data.split(s), &model.vae);
    let cls_cfg = ClassifierConfig { seed, ..cls.clone() };
    let clf = train_final(
        &feats(Split::Train)?,
        &data.labels(Split::Train),
        &feats(Split::Val)?,
        &data.labels(Split::Val),
        data.classes(),
        &cls_cfg,
    )?;
    Ok(SweepRecord {
        value,
        seed,
        iteration: rec.iteration,
        l_rc: rec.l_rc,
        index_mi: rec.index_mi,
        tc: rec.tc,
        dkl: rec.dkl,
        accuracy: clf.accuracy(&feats(Split::Test)?, &data.labels(Split::Test))?,
    })
}

/// Every (value, seed) cell, in parallel; records come back in value-major order.
pub fn run_sweep(data: &Dataset, sweep: &SweepConfig, base: &TrainingConfig, heads: &HeadsConfig, cls: &ClassifierConfig) -> Result<SweepResult> {
    sweep.validate()?;
    let cells: Vec<(f64, u64)> = sweep.values.iter().flat_map(|&v| sweep.seeds.iter().map(move |&s| (v, s))).collect();
    let records = cells
        .par_iter()
        .map(|&(v, s)| run_cell(data, sweep.cell(base, v, s), heads, cls, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { axis: sweep.axis, records })
}
