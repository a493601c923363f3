//! The adversarial discriminator on the NCFV and the supportive classifier on the
//! classifiable slice.

use eclf_nn::loss::{cross_entropy, uniform_cross_entropy};
use eclf_nn::{OptimizerKind, OptimizerState, Real, Sequential, Tensor};
use rand::Rng;

use crate::error::{EclfError, Result};
use crate::vae::Checkpoint;

/// Which latent slice a head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInput {
    Ncfv,
    Classifiable,
}

/// Three dense layers `widths[0] -> widths[1] -> widths[2] -> widths[3]`, ReLU between.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub input: HeadInput,
    pub widths: [usize; 4],
    /// Standardize each input column over the batch before the first layer.
    pub standardize: bool,
}

impl HeadSpec {
    /// Default hidden widths are `[input, input / 2]`.
    pub fn new(input: HeadInput, input_dim: usize, classes: usize, hidden: Option<[usize; 2]>) -> Result<Self> {
        if input_dim == 0 || classes < 2 {
            return Err(EclfError::Invalid(format!(
                "head needs a non-empty input and at least 2 classes (got {input_dim} inputs, {classes} classes)"
            )));
        }
        let [h1, h2] = hidden.unwrap_or([input_dim, (input_dim / 2).max(1)]);
        if h1 == 0 || h2 == 0 {
            return Err(EclfError::Invalid("hidden widths must be positive".into()));
        }
        Ok(HeadSpec {
            input,
            widths: [input_dim, h1, h2, classes],
            standardize: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.widths[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T = f32> {
    spec: HeadSpec,
    net: Sequential<T>,
}

impl<T: Real> Head<T> {
    pub fn new(spec: HeadSpec, rng: &mut impl Rng) -> Result<Self> {
        let net = Sequential::mlp(&spec.widths, rng)?;
        Ok(Head { spec, net })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn net(&self) -> &Sequential<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential<T> {
        &mut self.net
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let (_, w) = x.as_matrix("head input")?;
        if w != self.spec.widths[0] {
            return Err(EclfError::Invalid(format!("head expects {} input features, got {w}", self.spec.widths[0])));
        }
        Ok(())
    }

    /// Class logits, one row per input row.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        if self.spec.standardize {
            return Ok(self.net.forward(&standardize(x)?.0)?);
        }
        Ok(self.net.forward(x)?)
    }

    /// Loss value, gradient w.r.t. the input, and parameter gradients for a loss on the logits.
    fn backprop(&self, x: &Tensor<T>, loss: impl FnOnce(&Tensor<T>) -> eclf_nn::Result<(T, Tensor<T>)>) -> Result<(f64, Tensor<T>, Vec<Tensor<T>>)> {
        self.check(x)?;
        if !self.spec.standardize {
            let trace = self.net.forward_trace(x)?;
            let (l, g) = loss(trace.output())?;
            let (dx, grads) = self.net.backward(&trace, &g)?;
            return Ok((l.as_f64(), dx, grads));
        }
        let (y, inv_sd) = standardize(x)?;
        let trace = self.net.forward_trace(&y)?;
        let (l, g) = loss(trace.output())?;
        let (dy, grads) = self.net.backward(&trace, &g)?;
        Ok((l.as_f64(), standardize_backward(&y, &inv_sd, &dy)?, grads))
    }

    pub fn cast<U: Real>(&self) -> Head<U> {
        Head {
            spec: self.spec.clone(),
            net: self.net.cast(),
        }
    }
}

const STANDARDIZE_EPS: f64 = 1e-5;

/// Column-wise `(x - mean) / sqrt(var + eps)` over the batch, with the per-column `1 / sd`.
///
/// The discriminator reads its input this way so that rescaling or shifting the NCFV
/// cannot saturate it: otherwise the encoder can push one NCFV dimension far out,
/// leave every first-layer ReLU dead and collect the uniform-prediction reward.
pub fn standardize<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, d) = x.as_matrix("standardize input")?;
    let nt = T::lit(n as f64);
    let src = x.data();
    let mut out = src.to_vec();
    let mut inv_sd = Vec::with_capacity(d);
    for j in 0..d {
        let mean = (0..n).map(|i| src[i * d + j]).fold(T::zero(), |a, v| a + v) / nt;
        let var = (0..n).map(|i| (src[i * d + j] - mean) * (src[i * d + j] - mean)).fold(T::zero(), |a, v| a + v) / nt;
        let r = T::one() / (var + T::lit(STANDARDIZE_EPS)).sqrt();
        for i in 0..n {
            out[i * d + j] = (src[i * d + j] - mean) * r;
        }
        inv_sd.push(r);
    }
    Ok((Tensor::new(vec![n, d], out)?, inv_sd))
}

/// Gradient through [`standardize`], batch statistics included.
pub fn standardize_backward<T: Real>(y: &Tensor<T>, inv_sd: &[T], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = y.as_matrix("standardized input")?;
    let nt = T::lit(n as f64);
    let (yv, g) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); n * d];
    for j in 0..d {
        let mean_g = (0..n).map(|i| g[i * d + j]).fold(T::zero(), |a, v| a + v) / nt;
        let mean_gy = (0..n).map(|i| g[i * d + j] * yv[i * d + j]).fold(T::zero(), |a, v| a + v) / nt;
        for i in 0..n {
            dx[i * d + j] = inv_sd[j] * (g[i * d + j] - mean_g - yv[i * d + j] * mean_gy);
        }
    }
    Ok(Tensor::new(vec![n, d], dx)?)
}

/// Softmax cross-entropy against the true class; updates only the discriminator.
pub fn discriminator_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (l, g) = cross_entropy(logits, labels)?;
    Ok((l.as_f64(), g))
}

/// Cross-entropy from the uniform distribution to the discriminator's prediction.
/// Bounded below by `ln C`, reached only by a uniform prediction.
pub fn adversarial_encoder_loss<T: Real>(logits: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (l, g) = uniform_cross_entropy(logits)?;
    Ok((l.as_f64(), g))
}

pub fn supportive_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    discriminator_loss(logits, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadsConfig {
    /// Two hidden widths, or empty for `[input, input / 2]`.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Discriminator updates per encoder update.
    pub disc_steps: usize,
    /// Batch-standardize the discriminator's input.
    pub standardize: bool,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            hidden: vec![32, 16],
            learning_rate: 3e-3,
            disc_steps: 5,
            standardize: false,
        }
    }
}

crate::kv_section!(HeadsConfig {
    hidden,
    learning_rate,
    disc_steps,
    standardize
});

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.hidden.is_empty() && self.hidden.len() != 2 {
            return Err(EclfError::config("heads.hidden", "give exactly two hidden widths, or leave empty"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EclfError::config("heads.learning_rate", "must be positive"));
        }
        if self.disc_steps == 0 {
            return Err(EclfError::config("heads.disc_steps", "must be at least 1"));
        }
        Ok(())
    }

    fn hidden_pair(&self) -> Option<[usize; 2]> {
        (self.hidden.len() == 2).then(|| [self.hidden[0], self.hidden[1]])
    }
}

/// Discriminator and (optional) supportive head with their optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialHeads {
    pub disc: Head<f32>,
    pub sup: Option<Head<f32>>,
    disc_opt: OptimizerState<f32>,
    sup_opt: OptimizerState<f32>,
}

pub const HEADS_PREFIX: &str = "heads.";

impl AdversarialHeads {
    pub fn new(cfg: &HeadsConfig, ncfv_dim: usize, classifiable_dim: usize, classes: usize, supportive: bool, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut disc_spec = HeadSpec::new(HeadInput::Ncfv, ncfv_dim, classes, cfg.hidden_pair())?;
        disc_spec.standardize = cfg.standardize;
        let disc = Head::new(disc_spec, rng)?;
        let sup = if supportive {
            Some(Head::new(
                HeadSpec::new(HeadInput::Classifiable, classifiable_dim, classes, cfg.hidden_pair())?,
                rng,
            )?)
        } else {
            None
        };
        let kind = OptimizerKind::adam(cfg.learning_rate);
        Ok(AdversarialHeads {
            disc,
            sup,
            disc_opt: OptimizerState::new(kind),
            sup_opt: OptimizerState::new(kind),
        })
    }

    /// One discriminator update on detached NCFV means. Returns the loss before the update.
    pub fn train_discriminator(&mut self, ncfv: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let (l, _, grads) = self.disc.backprop(ncfv, |lg| cross_entropy(lg, labels))?;
        let names = self.disc.net.param_names("disc");
        self.disc_opt.step(&names, &mut self.disc.net.params_mut(), &grads)?;
        Ok(l)
    }

    /// Encoder-side adversarial loss and its gradient w.r.t. the NCFV input.
    pub fn adversarial<T: Real>(disc: &Head<T>, ncfv: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let (l, dx, _) = disc.backprop(ncfv, |lg| uniform_cross_entropy(lg))?;
        Ok((l, dx))
    }

    /// Supportive loss, gradient w.r.t. the classifiable input, and the head's parameter gradients.
    pub fn supportive<T: Real>(sup: &Head<T>, cfv: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>, Vec<Tensor<T>>)> {
        sup.backprop(cfv, |lg| cross_entropy(lg, labels))
    }

    pub fn step_supportive(&mut self, grads: &[Tensor<f32>]) -> Result<()> {
        if let Some(sup) = &mut self.sup {
            let names = sup.net.param_names("sup");
            self.sup_opt.step(&names, &mut sup.net.params_mut(), grads)?;
        }
        Ok(())
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        let mut put = |tag: &str, head: &Head<f32>, opt: &OptimizerState<f32>| {
            let names = head.net.param_names(tag);
            let params: Vec<Tensor<f32>> = head.net.params().into_iter().cloned().collect();
            ck.put_all(HEADS_PREFIX, &names, &params);
            let (m, v) = opt.moments();
            ck.put_all(&format!("optim.{HEADS_PREFIX}m."), &names[..m.len()], m);
            ck.put_all(&format!("optim.{HEADS_PREFIX}v."), &names[..v.len()], v);
            ck.set_meta(&format!("optim.{tag}.steps"), opt.steps().to_string());
        };
        put("disc", &self.disc, &self.disc_opt);
        if let Some(sup) = &self.sup {
            put("sup", sup, &self.sup_opt);
        }
    }

    /// Restores parameters and optimizer moments into heads built with the same config.
    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        let kind = self.disc_opt.kind();
        let restore = |tag: &str, head: &mut Head<f32>, opt: &mut OptimizerState<f32>| -> Result<()> {
            let names = head.net.param_names(tag);
            head.net.set_params(ck.get_all(HEADS_PREFIX, &names)?)?;
            let steps: u64 = ck
                .meta(&format!("optim.{tag}.steps"))?
                .parse()
                .map_err(|_| EclfError::Checkpoint(format!("bad optim.{tag}.steps")))?;
            let (m, v) = if steps == 0 {
                (Vec::new(), Vec::new())
            } else {
                (
                    ck.get_all(&format!("optim.{HEADS_PREFIX}m."), &names)?,
                    ck.get_all(&format!("optim.{HEADS_PREFIX}v."), &names)?,
                )
            };
            *opt = OptimizerState::from_parts(kind, steps, m, v)?;
            Ok(())
        };
        restore("disc", &mut self.disc, &mut self.disc_opt)?;
        if let Some(sup) = &mut self.sup {
            restore("sup", sup, &mut self.sup_opt)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Head::<f64>::new(HeadSpec::new(HeadInput::Ncfv, 4, 2, None).unwrap(), &mut rng).unwrap();
        for p in head.net_mut().params_mut() {
            p.scale(0.0);
        }
        let logits = head.logits(&t(3, 4, vec![1.0; 12])).unwrap();
        assert_eq!(logits.shape(), &[3, 2]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(head.logits(&t(1, 3, vec![0.0; 3])).is_err());
    }

    #[test]
    fn loss_values() {
        let flat = t(1, 2, vec![0.0, 0.0]);
        let skew = t(1, 2, vec![9f64.ln(), 0.0]);
        assert!((discriminator_loss(&flat, &[0]).unwrap().0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((discriminator_loss(&skew, &[1]).unwrap().0 - 2.302585092994046).abs() < 1e-12);
        assert!((adversarial_encoder_loss(&skew).unwrap().0 - 1.2039728043259361).abs() < 1e-12);
        assert!(discriminator_loss(&t(1, 2, vec![60.0, -60.0]), &[0]).unwrap().0 < 1e-20);
        let (_, g) = supportive_loss(&flat, &[0]).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn default_widths() {
        let s = HeadSpec::new(HeadInput::Classifiable, 8, 3, None).unwrap();
        assert_eq!(s.widths, [8, 8, 4, 3]);
    }
}
