//! Minibatch estimates of the three KL components: index-code mutual information,
//! total correlation, and dimension-wise KL to a standard-normal prior.
//!
//! The aggregate posterior `q(z) = (1/M) Σ_n q(z|n)` is approximated for sample `i`
//! of a batch of `N` by the stratified weighting of Chen et al.: the sample's own
//! posterior gets weight `1/M`, each of the other `N - 1` gets `(M - 1) / (M (N - 1))`.
//! The weights sum to one, so with `N = M` the estimate is the exact aggregate of the
//! batch. `N = M = 1` is a diagnostic case where the aggregate is the single posterior:
//! MI and TC are zero and DKL is the closed-form Gaussian KL.

use eclf_nn::{Real, Tensor};

use crate::error::{EclfError, Result};

use super::layout::Posteriors;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KlTerms {
    pub index_mi: f64,
    pub tc: f64,
    pub dkl: f64,
}

impl KlTerms {
    pub fn sum(&self) -> f64 {
        self.index_mi + self.tc + self.dkl
    }
}

/// Loss weights applied to the three terms when differentiating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlWeights {
    pub index_mi: f64,
    pub tc: f64,
    pub dkl: f64,
}

/// Gradient of `Σ weight * term` w.r.t. the posterior parameters, with the path
/// through the reparameterized sample `z = mu + exp(log_var/2) * noise` included.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrads<T> {
    pub d_mu: Tensor<T>,
    pub d_log_var: Tensor<T>,
}

struct Inputs {
    n: usize,
    d: usize,
    mu: Vec<f64>,
    lv: Vec<f64>,
    z: Vec<f64>,
}

fn inputs<T: Real>(post: &Posteriors<T>, z: &Tensor<T>, m: usize) -> Result<Inputs> {
    let (n, d) = post.mu.as_matrix("posterior mean")?;
    if post.log_var.shape() != post.mu.shape() || z.shape() != post.mu.shape() {
        return Err(EclfError::Invalid(format!(
            "kl_terms: mu {:?}, log_var {:?}, z {:?} must match",
            post.mu.shape(),
            post.log_var.shape(),
            z.shape()
        )));
    }
    let diagnostic = n == 1 && m == 1;
    if n < 2 && !diagnostic {
        return Err(EclfError::Invalid(format!(
            "total correlation needs a batch of at least 2 (got {n} with dataset size {m})"
        )));
    }
    if m < n {
        return Err(EclfError::Invalid(format!("dataset size {m} is smaller than the batch {n}")));
    }
    let f = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    Ok(Inputs {
        n,
        d,
        mu: f(&post.mu),
        lv: f(&post.log_var),
        z: f(z),
    })
}

/// log N(z; mu, exp(lv)) for one coordinate.
fn log_density(z: f64, mu: f64, lv: f64) -> f64 {
    let r = z - mu;
    -0.5 * (LN_2PI + lv + r * r * (-lv).exp())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(v: &mut [f64]) {
    let lse = log_sum_exp(v);
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
    }
}

fn log_weights(n: usize, m: usize) -> (f64, f64) {
    let own = -(m as f64).ln();
    let other = if n > 1 {
        ((m - 1) as f64).ln() - (m as f64).ln() - ((n - 1) as f64).ln()
    } else {
        f64::NEG_INFINITY
    };
    (own, other)
}

struct Estimate {
    terms: KlTerms,
    /// Responsibilities `[i][j]` of the joint and `[i][j][k]` of each marginal mixture.
    joint_resp: Vec<f64>,
    marg_resp: Vec<f64>,
}

fn estimate(x: &Inputs, m: usize, keep: bool) -> Estimate {
    let (n, d) = (x.n, x.d);
    let (lw_own, lw_other) = log_weights(n, m);
    let mut logq = vec![0.0; n * n * d];
    for i in 0..n {
        for j in 0..n {
            for k in 0..d {
                logq[(i * n + j) * d + k] = log_density(x.z[i * d + k], x.mu[j * d + k], x.lv[j * d + k]);
            }
        }
    }
    let (mut mi, mut tc, mut dkl) = (0.0, 0.0, 0.0);
    let mut joint_resp = if keep { vec![0.0; n * n] } else { Vec::new() };
    let mut marg_resp = if keep { vec![0.0; n * n * d] } else { Vec::new() };
    let mut buf = vec![0.0; n];
    for i in 0..n {
        let lw = |j: usize| if j == i { lw_own } else { lw_other };
        let cond: f64 = (0..d).map(|k| logq[(i * n + i) * d + k]).sum();
        for (j, b) in buf.iter_mut().enumerate() {
            *b = lw(j) + (0..d).map(|k| logq[(i * n + j) * d + k]).sum::<f64>();
        }
        let joint = log_sum_exp(&buf);
        if keep {
            softmax_in_place(&mut buf);
            joint_resp[i * n..(i + 1) * n].copy_from_slice(&buf);
        }
        let mut marginals = 0.0;
        for k in 0..d {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = lw(j) + logq[(i * n + j) * d + k];
            }
            marginals += log_sum_exp(&buf);
            if keep {
                softmax_in_place(&mut buf);
                for j in 0..n {
                    marg_resp[(i * n + j) * d + k] = buf[j];
                }
            }
        }
        let prior: f64 = (0..d).map(|k| -0.5 * (LN_2PI + x.z[i * d + k] * x.z[i * d + k])).sum();
        mi += cond - joint;
        tc += joint - marginals;
        dkl += marginals - prior;
    }
    let inv = 1.0 / n as f64;
    Estimate {
        terms: KlTerms {
            index_mi: mi * inv,
            tc: tc * inv,
            dkl: dkl * inv,
        },
        joint_resp,
        marg_resp,
    }
}

fn diagnostic_terms(x: &Inputs) -> KlTerms {
    let dkl = (0..x.d).map(|k| 0.5 * (x.mu[k] * x.mu[k] + x.lv[k].exp() - x.lv[k] - 1.0)).sum();
    KlTerms { index_mi: 0.0, tc: 0.0, dkl }
}

/// Estimates (index_mi, tc, dkl) from a batch of posteriors and one sample `z` per
/// posterior, for a dataset of size `m`.
pub fn kl_terms<T: Real>(post: &Posteriors<T>, z: &Tensor<T>, m: usize) -> Result<KlTerms> {
    let x = inputs(post, z, m)?;
    if x.n == 1 {
        return Ok(diagnostic_terms(&x));
    }
    Ok(estimate(&x, m, false).terms)
}

/// [`kl_terms`] plus the gradient of the weighted sum, through `z`'s reparameterization.
pub fn kl_terms_with_grad<T: Real>(post: &Posteriors<T>, z: &Tensor<T>, m: usize, w: KlWeights) -> Result<(KlTerms, KlGrads<T>)> {
    let x = inputs(post, z, m)?;
    let (n, d) = (x.n, x.d);
    let mut dmu = vec![0.0; n * d];
    let mut dlv = vec![0.0; n * d];
    let terms = if n == 1 {
        let t = diagnostic_terms(&x);
        for k in 0..d {
            dmu[k] = w.dkl * x.mu[k];
            dlv[k] = w.dkl * 0.5 * (x.lv[k].exp() - 1.0);
        }
        t
    } else {
        let est = estimate(&x, m, true);
        // mean_i of: w_mi*cond + (w_tc - w_mi)*joint + (w_dkl - w_tc)*marginals - w_dkl*prior
        let inv = 1.0 / n as f64;
        let c_cond = w.index_mi * inv;
        let c_joint = (w.tc - w.index_mi) * inv;
        let c_marg = (w.dkl - w.tc) * inv;
        let c_prior = -w.dkl * inv;
        let mut dz = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..n {
                let rj = est.joint_resp[i * n + j];
                for k in 0..d {
                    let idx = (i * n + j) * d + k;
                    let mut g = c_joint * rj + c_marg * est.marg_resp[idx];
                    if i == j {
                        g += c_cond;
                    }
                    if g == 0.0 {
                        continue;
                    }
                    let prec = (-x.lv[j * d + k]).exp();
                    let r = x.z[i * d + k] - x.mu[j * d + k];
                    // d logq / dz = -r*prec, d/dmu = r*prec, d/dlv = -1/2 + r^2*prec/2
                    dz[i * d + k] -= g * r * prec;
                    dmu[j * d + k] += g * r * prec;
                    dlv[j * d + k] += g * 0.5 * (r * r * prec - 1.0);
                }
            }
            for k in 0..d {
                dz[i * d + k] -= c_prior * x.z[i * d + k];
            }
        }
        for i in 0..n * d {
            dmu[i] += dz[i];
            dlv[i] += dz[i] * 0.5 * (x.z[i] - x.mu[i]);
        }
        est.terms
    };
    let to_t = |v: Vec<f64>| Tensor::new(vec![n, d], v.into_iter().map(T::lit).collect());
    Ok((
        terms,
        KlGrads {
            d_mu: to_t(dmu)?,
            d_log_var: to_t(dlv)?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(mu: Vec<f64>, lv: Vec<f64>, n: usize) -> Posteriors<f64> {
        let d = mu.len() / n;
        Posteriors {
            mu: Tensor::new(vec![n, d], mu).unwrap(),
            log_var: Tensor::new(vec![n, d], lv).unwrap(),
        }
    }

    #[test]
    fn diagnostic_mode_matches_closed_form() {
        let p = post(vec![1.0], vec![0.0], 1);
        let t = kl_terms(&p, &p.mu, 1).unwrap();
        assert_eq!((t.index_mi, t.tc), (0.0, 0.0));
        assert!((t.dkl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn singleton_batch_with_larger_dataset_is_error() {
        let p = post(vec![0.0, 0.0], vec![0.0, 0.0], 1);
        assert!(kl_terms(&p, &p.mu, 10).is_err());
    }

    #[test]
    fn dataset_smaller_than_batch_is_error() {
        let p = post(vec![0.0; 6], vec![0.0; 6], 3);
        assert!(kl_terms(&p, &p.mu, 2).is_err());
    }

    fn numeric_grad(p: &Posteriors<f64>, noise: &[f64], m: usize, w: KlWeights) -> (Vec<f64>, Vec<f64>) {
        let loss = |p: &Posteriors<f64>| {
            let z = crate::vae::layout::reparameterize_batch(p, &Tensor::new(p.mu.shape().to_vec(), noise.to_vec()).unwrap()).unwrap();
            let t = kl_terms(p, &z, m).unwrap();
            w.index_mi * t.index_mi + w.tc * t.tc + w.dkl * t.dkl
        };
        let h = 1e-6;
        let mut out = (Vec::new(), Vec::new());
        for which in 0..2 {
            for i in 0..p.mu.len() {
                let mut a = p.clone();
                let mut b = p.clone();
                let (ta, tb) = if which == 0 {
                    (&mut a.mu, &mut b.mu)
                } else {
                    (&mut a.log_var, &mut b.log_var)
                };
                ta.data_mut()[i] += h;
                tb.data_mut()[i] -= h;
                let g = (loss(&a) - loss(&b)) / (2.0 * h);
                if which == 0 {
                    out.0.push(g)
                } else {
                    out.1.push(g)
                }
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let n = 4;
        let d = 3;
        let mu: Vec<f64> = (0..n * d).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let lv: Vec<f64> = (0..n * d).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.25).collect();
        let noise: Vec<f64> = (0..n * d).map(|i| ((i * 3 % 13) as f64 - 6.0) * 0.2).collect();
        let p = post(mu, lv, n);
        for (m, w) in [
            (
                10,
                KlWeights {
                    index_mi: 0.7,
                    tc: 1.3,
                    dkl: 0.4,
                },
            ),
            (
                4,
                KlWeights {
                    index_mi: 0.0,
                    tc: 2.0,
                    dkl: 1.0,
                },
            ),
        ] {
            let z = crate::vae::layout::reparameterize_batch(&p, &Tensor::new(vec![n, d], noise.clone()).unwrap()).unwrap();
            let (_, g) = kl_terms_with_grad(&p, &z, m, w).unwrap();
            let (nm, nl) = numeric_grad(&p, &noise, m, w);
            for (a, b) in g.d_mu.data().iter().zip(&nm).chain(g.d_log_var.data().iter().zip(&nl)) {
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}
