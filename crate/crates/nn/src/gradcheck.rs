//! Central finite-difference verification of analytic gradients.
//!
//! The reference loss is always evaluated in `f64`, whatever precision the analytic
//! gradient was computed in. Perturbed parameters are rounded to `T` first and the
//! difference quotient uses the step that was actually applied.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{NnError, Result};
use crate::sequential::Sequential;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss_at` on up to `probes`
/// distinct scalar parameters drawn uniformly without replacement.
pub fn check_gradients<T: Real>(
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    mut loss_at: impl FnMut(&[Tensor<T>]) -> Result<f64>,
    probes: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    if probes == 0 {
        return Err(NnError::Invalid("grad check needs at least one probe".into()));
    }
    if !(eps > 0.0) {
        return Err(NnError::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    if params.len() != analytic.len() || params.iter().zip(analytic).any(|(p, g)| p.shape() != g.shape()) {
        return Err(NnError::Invalid("analytic gradients do not match parameter shapes".into()));
    }
    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let chosen = sample(rng, total, probes.min(total));

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut results = Vec::with_capacity(chosen.len());
    for flat in chosen.iter() {
        let tensor = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[tensor];
        let original = work[tensor].data()[index];
        let plus = original + T::lit(eps);
        let minus = original - T::lit(eps);

        work[tensor].data_mut()[index] = plus;
        let lp = loss_at(&work)?;
        work[tensor].data_mut()[index] = minus;
        let lm = loss_at(&work)?;
        work[tensor].data_mut()[index] = original;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(NnError::NonFinite {
                what: "loss during grad check".into(),
                index: flat,
            });
        }
        let step = plus.as_f64() - minus.as_f64();
        let numeric = (lp - lm) / step;
        let a = analytic[tensor].data()[index].as_f64();
        results.push(Probe {
            tensor,
            index,
            analytic: a,
            numeric,
            relative_error: relative_error(a, numeric),
        });
    }
    let max_relative_error = results.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        probes: results,
    })
}

/// A loss on a network's output, evaluable at any precision.
pub trait OutputLoss {
    fn eval<T: Real>(&self, output: &Tensor<T>) -> Result<(T, Tensor<T>)>;
}

/// Softmax cross-entropy against fixed labels.
pub struct CrossEntropyLoss(pub Vec<usize>);

impl OutputLoss for CrossEntropyLoss {
    fn eval<T: Real>(&self, output: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        crate::loss::cross_entropy(output, &self.0)
    }
}

/// Half the sum of squared outputs, divided by nothing.
pub struct HalfSumSquares;

impl OutputLoss for HalfSumSquares {
    fn eval<T: Real>(&self, output: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        let half = T::lit(0.5);
        let value = output.data().iter().map(|&v| half * v * v).sum();
        Ok((value, output.clone()))
    }
}

/// Gradient check of every parameter of a [`Sequential`] under `loss`.
pub fn grad_check<T: Real, L: OutputLoss>(
    model: &Sequential<T>,
    loss: &L,
    input: &Tensor<T>,
    probes: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let trace = model.forward_trace(input)?;
    let (value, upstream) = loss.eval(trace.output())?;
    if !value.is_finite() {
        return Err(NnError::NonFinite { what: "loss".into(), index: 0 });
    }
    let (_, analytic) = model.backward(&trace, &upstream)?;
    let params: Vec<Tensor<T>> = model.params().into_iter().cloned().collect();
    let input64: Tensor<f64> = input.cast();
    let mut reference: Sequential<f64> = model.cast();
    check_gradients(
        &params,
        &analytic,
        |p| {
            reference.set_params(p.iter().map(Tensor::cast).collect())?;
            let out = reference.forward(&input64)?;
            Ok(loss.eval(&out)?.0)
        },
        probes,
        eps,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_scalar() {
        let w = Tensor::<f64>::new(vec![1], vec![3.0]).unwrap();
        let g = Tensor::new(vec![1], vec![6.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = check_gradients(&[w], &[g], |p| Ok(p[0].data()[0].powi(2)), 1, 1e-4, &mut rng).unwrap();
        assert!(rep.max_relative_error < 1e-9, "{rep:?}");
        assert!((rep.probes[0].numeric - 6.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_arguments_and_nan_loss() {
        let w = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(check_gradients(&[w.clone()], &[w.clone()], |_| Ok(0.0), 0, 1e-3, &mut rng).is_err());
        assert!(check_gradients(&[w.clone()], &[w.clone()], |_| Ok(0.0), 1, 0.0, &mut rng).is_err());
        let err = check_gradients(&[w.clone()], &[w], |_| Ok(f64::NAN), 1, 1e-3, &mut rng).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { .. }));
    }
}
