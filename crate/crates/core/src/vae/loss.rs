use eclf_nn::loss::batch_sse;
use eclf_nn::{ConvSpec, Layer, LayerSpec, Real, Sequential, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EclfError, Result};

/// The loss coefficients `alpha` (perceptual), `epsilon_d` (adversarial),
/// `epsilon_s` (supportive), `beta` (TC) and `gamma` (DKL).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub epsilon_d: f64,
    pub epsilon_s: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Coefficients {
    pub const ZERO: Coefficients = Coefficients {
        alpha: 0.0,
        epsilon_d: 0.0,
        epsilon_s: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("vae.alpha", self.alpha),
            ("vae.epsilon_d", self.epsilon_d),
            ("vae.epsilon_s", self.epsilon_s),
            ("vae.beta", self.beta),
            ("vae.gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EclfError::config(key, format!("coefficient must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_rc: f64,
    pub l_rd: f64,
    pub l_d: f64,
    pub l_s: f64,
    pub index_mi: f64,
    pub tc: f64,
    pub dkl: f64,
    pub total: f64,
}

pub const METRIC_HEADER: &str = "iteration,l_rc,l_rd,l_d,l_s,index_mi,tc,dkl,total";

impl LossBreakdown {
    /// The weighted sum; the perceptual, TC and DKL terms are scaled by `warm`.
    pub fn combine(&self, c: &Coefficients, warm: f64) -> f64 {
        self.l_rc + warm * c.alpha * self.l_rd + c.epsilon_d * self.l_d + c.epsilon_s * self.l_s + warm * c.beta * self.tc + warm * c.gamma * self.dkl
    }

    pub fn csv_row(&self, iteration: u64) -> String {
        format!(
            "{iteration},{},{},{},{},{},{},{},{}",
            self.l_rc, self.l_rd, self.l_d, self.l_s, self.index_mi, self.tc, self.dkl, self.total
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<(u64, LossBreakdown)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || EclfError::Checkpoint(format!("malformed metric row {line:?}"));
        if f.len() != 9 {
            return Err(bad());
        }
        let v = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok((
            f[0].parse().map_err(|_| bad())?,
            LossBreakdown {
                l_rc: v(1)?,
                l_rd: v(2)?,
                l_d: v(3)?,
                l_s: v(4)?,
                index_mi: v(5)?,
                tc: v(6)?,
                dkl: v(7)?,
                total: v(8)?,
            },
        ))
    }
}

/// Fills in `total` from the parts.
pub fn total_loss(parts: LossBreakdown, c: &Coefficients, warm: f64) -> Result<LossBreakdown> {
    c.validate()?;
    if !(0.0..=1.0).contains(&warm) {
        return Err(EclfError::Invalid(format!("warmup multiplier {warm} is outside [0, 1]")));
    }
    Ok(LossBreakdown {
        total: parts.combine(c, warm),
        ..parts
    })
}

/// Linear ramp from 0 at `start` to 1 at `end`.
pub fn warmup(iter: u64, start: u64, end: u64) -> f64 {
    if iter <= start {
        0.0
    } else if iter >= end {
        1.0
    } else {
        (iter - start) as f64 / (end - start) as f64
    }
}

/// Per-sample sum of squared pixel errors, averaged over the batch.
pub fn recon_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (l, g) = batch_sse(x_hat, x)?;
    Ok((l.as_f64(), g))
}

/// A frozen convolutional feature stack for the perceptual term.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T = f32> {
    net: Sequential<T>,
}

impl<T: Real> FeatureExtractor<T> {
    /// Three randomly initialized conv+ReLU layers (3 -> 8 -> 16 -> 16 channels).
    pub fn seeded(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = [
            LayerSpec::Conv(ConvSpec::new(3, 8, 3, 1, 1)),
            LayerSpec::Relu,
            LayerSpec::Conv(ConvSpec::new(8, 16, 4, 2, 1)),
            LayerSpec::Relu,
            LayerSpec::Conv(ConvSpec::new(16, 16, 4, 2, 1)),
            LayerSpec::Relu,
        ];
        Ok(FeatureExtractor {
            net: Sequential::init(&specs, &mut rng)?,
        })
    }

    /// A 1x1 identity convolution: features are the pixels themselves.
    pub fn identity() -> Result<Self> {
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { T::one() } else { T::zero() });
        let layer = Layer::with_params(LayerSpec::Conv(ConvSpec::new(3, 3, 1, 1, 0)), vec![w, Tensor::zeros(&[3])])?;
        Ok(FeatureExtractor {
            net: Sequential::from_layers(vec![layer]),
        })
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor { net: self.net.cast() }
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.net.forward(x)?)
    }

    /// Squared feature distance (per-sample sum, batch mean) and, optionally, its
    /// gradient w.r.t. `x_hat`.
    pub fn loss(&self, x: &Tensor<T>, x_hat: &Tensor<T>, want_grad: bool) -> Result<(f64, Option<Tensor<T>>)> {
        let target = self.net.forward(x)?;
        if !want_grad {
            let (l, _) = batch_sse(&self.net.forward(x_hat)?, &target)?;
            return Ok((l.as_f64(), None));
        }
        let trace = self.net.forward_trace(x_hat)?;
        let (l, g) = batch_sse(trace.output(), &target)?;
        let (dx, _) = self.net.backward(&trace, &g)?;
        Ok((l.as_f64(), Some(dx)))
    }
}

pub fn perceptual_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, extractor: &FeatureExtractor<T>) -> Result<f64> {
    Ok(extractor.loss(x, x_hat, false)?.0)
}
