use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use eclf_nn::{Real, Tensor};

use crate::error::{EclfError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Kind {
    Split {
        cfv: Range<usize>,
        ncfv: Range<usize>,
    },
    ClassSpecific {
        cfvs1: Range<usize>,
        ncfv: Range<usize>,
        cfvs2: Range<usize>,
    },
}

/// Partition of the latent vector into classifiable and non-classifiable slices.
///
/// The split form is `[CFV, NCFV]`; the class-specific form is `[CFVS1, NCFV, CFVS2]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentLayout {
    total_dim: usize,
    kind: Kind,
}

fn check_cover(total: usize, ranges: &[&Range<usize>]) -> Result<()> {
    let mut seen = vec![false; total];
    for r in ranges {
        if r.start > r.end || r.end > total {
            return Err(EclfError::Invalid(format!("range {r:?} does not fit in {total} latent dims")));
        }
        for i in (*r).clone() {
            if std::mem::replace(&mut seen[i], true) {
                return Err(EclfError::Invalid(format!("latent index {i} belongs to two slices")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(EclfError::Invalid(format!("latent index {i} is not covered by any slice")));
    }
    Ok(())
}

impl LatentLayout {
    pub fn split(cfv_dim: usize, ncfv_dim: usize) -> Result<Self> {
        Self::from_ranges(cfv_dim + ncfv_dim, 0..cfv_dim, cfv_dim..cfv_dim + ncfv_dim)
    }

    pub fn from_ranges(total_dim: usize, cfv: Range<usize>, ncfv: Range<usize>) -> Result<Self> {
        check_cover(total_dim, &[&cfv, &ncfv])?;
        if cfv.is_empty() || ncfv.is_empty() {
            return Err(EclfError::Invalid("CFV and NCFV must both be non-empty".into()));
        }
        Ok(LatentLayout {
            total_dim,
            kind: Kind::Split { cfv, ncfv },
        })
    }

    pub fn class_specific(cfvs1_dim: usize, ncfv_dim: usize, cfvs2_dim: usize) -> Result<Self> {
        if cfvs1_dim == 0 || ncfv_dim == 0 || cfvs2_dim == 0 {
            return Err(EclfError::Invalid("CFVS1, NCFV and CFVS2 must all be non-empty".into()));
        }
        let a = cfvs1_dim;
        let b = a + ncfv_dim;
        let total = b + cfvs2_dim;
        Ok(LatentLayout {
            total_dim: total,
            kind: Kind::ClassSpecific {
                cfvs1: 0..a,
                ncfv: a..b,
                cfvs2: b..total,
            },
        })
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn is_class_specific(&self) -> bool {
        matches!(self.kind, Kind::ClassSpecific { .. })
    }

    pub fn cfv_range(&self) -> Option<Range<usize>> {
        match &self.kind {
            Kind::Split { cfv, .. } => Some(cfv.clone()),
            Kind::ClassSpecific { .. } => None,
        }
    }

    pub fn ncfv_range(&self) -> Range<usize> {
        match &self.kind {
            Kind::Split { ncfv, .. } | Kind::ClassSpecific { ncfv, .. } => ncfv.clone(),
        }
    }

    pub fn cfvs_ranges(&self) -> Option<(Range<usize>, Range<usize>)> {
        match &self.kind {
            Kind::Split { .. } => None,
            Kind::ClassSpecific { cfvs1, cfvs2, .. } => Some((cfvs1.clone(), cfvs2.clone())),
        }
    }

    /// Latent indices feeding classification: the CFV, or CFVS1 followed by CFVS2.
    pub fn classifiable_indices(&self) -> Vec<usize> {
        match &self.kind {
            Kind::Split { cfv, .. } => cfv.clone().collect(),
            Kind::ClassSpecific { cfvs1, cfvs2, .. } => cfvs1.clone().chain(cfvs2.clone()).collect(),
        }
    }

    pub fn classifiable_dim(&self) -> usize {
        self.total_dim - self.ncfv_range().len()
    }

    pub fn ncfv_indices(&self) -> Vec<usize> {
        self.ncfv_range().collect()
    }

    pub fn classifiable<T: Real>(&self, mu: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(mu.gather_columns(&self.classifiable_indices())?)
    }

    pub fn ncfv<T: Real>(&self, mu: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(mu.gather_columns(&self.ncfv_indices())?)
    }
}

/// `split:<cfv>,<ncfv>` or `class-specific:<cfvs1>,<ncfv>,<cfvs2>`.
impl fmt::Display for LatentLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            Kind::Split { cfv, ncfv } if cfv.start == 0 && ncfv.start == cfv.end => {
                write!(f, "split:{},{}", cfv.len(), ncfv.len())
            }
            Kind::Split { cfv, ncfv } => write!(f, "ranges:{}:{}..{}:{}..{}", self.total_dim, cfv.start, cfv.end, ncfv.start, ncfv.end),
            Kind::ClassSpecific { cfvs1, ncfv, cfvs2 } => {
                write!(f, "class-specific:{},{},{}", cfvs1.len(), ncfv.len(), cfvs2.len())
            }
        }
    }
}

impl FromStr for LatentLayout {
    type Err = EclfError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || EclfError::Invalid(format!("malformed latent layout {s:?}"));
        let nums = |t: &str| -> Result<Vec<usize>> { t.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect() };
        let range = |t: &str| -> Result<Range<usize>> {
            let (a, b) = t.split_once("..").ok_or_else(bad)?;
            Ok(a.parse().map_err(|_| bad())?..b.parse().map_err(|_| bad())?)
        };
        let (kind, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        match kind {
            "split" => match nums(rest)?[..] {
                [c, n] => Self::split(c, n),
                _ => Err(bad()),
            },
            "class-specific" => match nums(rest)?[..] {
                [a, n, b] => Self::class_specific(a, n, b),
                _ => Err(bad()),
            },
            "ranges" => {
                let parts: Vec<&str> = rest.split(':').collect();
                if parts.len() != 3 {
                    return Err(bad());
                }
                Self::from_ranges(parts[0].parse().map_err(|_| bad())?, range(parts[1])?, range(parts[2])?)
            }
            _ => Err(bad()),
        }
    }
}

/// A single sample's diagonal Gaussian posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(EclfError::Invalid(format!(
                "posterior mean has {} entries, log-variance {}",
                mu.len(),
                log_var.len()
            )));
        }
        if mu.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(EclfError::Invalid("posterior parameters must be finite".into()));
        }
        Ok(GaussianPosterior { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn select(&self, idx: &[usize]) -> GaussianPosterior {
        GaussianPosterior {
            mu: idx.iter().map(|&i| self.mu[i]).collect(),
            log_var: idx.iter().map(|&i| self.log_var[i]).collect(),
        }
    }

    /// Closed-form KL to the standard normal prior.
    pub fn kl_to_prior(&self) -> f64 {
        self.mu.iter().zip(&self.log_var).map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0)).sum()
    }
}

/// Posterior parameters for a batch: `mu` and `log_var` are `[N, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors<T = f32> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Real> Posteriors<T> {
    pub fn len(&self) -> usize {
        self.mu.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> GaussianPosterior {
        GaussianPosterior {
            mu: self.mu.row(i).iter().map(|v| v.as_f64()).collect(),
            log_var: self.log_var.row(i).iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// `z = mu + exp(log_var / 2) * noise`.
pub fn reparameterize(post: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != post.dim() {
        return Err(EclfError::Invalid(format!("noise has {} entries, posterior {}", noise.len(), post.dim())));
    }
    Ok(post
        .mu
        .iter()
        .zip(&post.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

pub fn reparameterize_batch<T: Real>(post: &Posteriors<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    if noise.shape() != post.mu.shape() {
        return Err(EclfError::Invalid(format!(
            "noise shape {:?} differs from posterior shape {:?}",
            noise.shape(),
            post.mu.shape()
        )));
    }
    let half = T::lit(0.5);
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .zip(noise.data())
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect();
    Ok(Tensor::new(post.mu.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_text_round_trip() {
        for l in [
            LatentLayout::split(4, 4).unwrap(),
            LatentLayout::class_specific(2, 3, 2).unwrap(),
            LatentLayout::from_ranges(5, 3..5, 0..3).unwrap(),
        ] {
            assert_eq!(l.to_string().parse::<LatentLayout>().unwrap(), l);
        }
    }

    #[test]
    fn overlapping_ranges_rejected() {
        assert!(LatentLayout::from_ranges(4, 0..3, 2..4).is_err());
        assert!(LatentLayout::from_ranges(4, 0..1, 2..4).is_err());
    }

    #[test]
    fn class_specific_order() {
        let l = LatentLayout::class_specific(4, 4, 4).unwrap();
        assert_eq!(l.cfvs_ranges(), Some((0..4, 8..12)));
        assert_eq!(l.ncfv_range(), 4..8);
        assert_eq!(l.classifiable_indices(), vec![0, 1, 2, 3, 8, 9, 10, 11]);
    }

    #[test]
    fn reparameterize_cases() {
        let p = GaussianPosterior::new(vec![1.0, -2.0], vec![0.0, 2.0f64.ln() * 2.0]).unwrap();
        assert_eq!(reparameterize(&p, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        let z = reparameterize(&p, &[0.5, 1.0]).unwrap();
        assert_eq!(z[0], 1.5);
        assert!((z[1] - 0.0).abs() < 1e-12);
        assert!(reparameterize(&p, &[0.0]).is_err());
    }
}
