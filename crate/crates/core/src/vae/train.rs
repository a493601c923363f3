//! The staged training loop: conv-only pretraining, the reconstruction plus
//! adversarial/supportive stage, then the full objective with a warmup ramp.

use std::fmt;
use std::str::FromStr;

use eclf_nn::gradcheck::{check_gradients, GradCheckReport};
use eclf_nn::{NnError, OptimizerKind, OptimizerState, Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::eclfcs::gate_batch;
use crate::error::{EclfError, Result};
use crate::heads::{AdversarialHeads, Head, HeadsConfig};
use crate::imageio::stack;
use crate::seed::{decode_rng, encode_rng, rng_for};
use crate::synthleaf::{Dataset, LabeledSample};
use crate::textconf::{parse_assignments, parse_word, render_section, ConfValue, Section};

use super::checkpoint::Checkpoint;
use super::kl::{kl_terms, kl_terms_with_grad, KlWeights};
use super::layout::{reparameterize_batch, LatentLayout};
use super::loss::{recon_loss, warmup, Coefficients, FeatureExtractor, LossBreakdown, METRIC_HEADER};
use super::model::{ArchPreset, Architecture, Vae, WeightTying};

const TAG_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_VAL: u64 = 3;
const TAG_EXTRACTOR: u64 = 4;
const TAG_HEADS: u64 = 5;

/// Full-scale schedule (pretrain end, warmup start, warmup end) over a 1.5M budget.
const PAPER_BUDGET: f64 = 1_500_000.0;
const PAPER_PRETRAIN: f64 = 106_000.0;
const PAPER_WARM_START: f64 = 120_000.0;
const PAPER_WARM_END: f64 = 140_000.0;

pub const VAL_HEADER: &str = "iteration,l_rc,index_mi,tc,dkl,score";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eclf,
    EclfCs,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Eclf => "eclf",
            Mode::EclfCs => "eclf-cs",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_word(s, &[("eclf", Mode::Eclf), ("eclf-cs", Mode::EclfCs)])
    }
}

/// Which snapshot downstream stages use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Lowest validation `l_rc + tc + dkl` at or after the end of warmup.
    LowestLoss,
    Final,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::LowestLoss => "lowest-loss",
            Selection::Final => "final",
        })
    }
}

impl FromStr for Selection {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        parse_word(s, &[("lowest-loss", Selection::LowestLoss), ("final", Selection::Final)])
    }
}

crate::conf_value_via_str!(Mode, Selection);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub preset: ArchPreset,
    /// Conv channel override; empty keeps the preset's.
    pub channels: Vec<usize>,
    pub hidden: Option<usize>,
    pub weight_tying: WeightTying,
    pub latent_dim: usize,
    /// Classifiable dims; split evenly between the two class slices in eclf-cs mode.
    pub cfv_dim: usize,
    pub alpha: f64,
    pub epsilon_d: f64,
    pub epsilon_s: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    /// Dataset size for the TC estimator; `auto` uses the training split length.
    pub dataset_size: Option<usize>,
    pub iterations: u64,
    pub pretrain_iterations: Option<u64>,
    pub warmup_start: Option<u64>,
    pub warmup_end: Option<u64>,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub selection: Selection,
    pub supportive: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            mode: Mode::Eclf,
            preset: ArchPreset::Desk,
            channels: Vec::new(),
            hidden: None,
            weight_tying: WeightTying::Mirrored,
            latent_dim: 16,
            cfv_dim: 8,
            alpha: 0.05,
            epsilon_d: 50.0,
            epsilon_s: 5.0,
            beta: 2.0,
            gamma: 1.0,
            batch_size: 32,
            dataset_size: None,
            iterations: 1500,
            pretrain_iterations: None,
            warmup_start: None,
            warmup_end: None,
            learning_rate: 1e-3,
            seed: 0,
            log_interval: 25,
            eval_interval: 50,
            checkpoint_interval: 500,
            selection: Selection::LowestLoss,
            supportive: true,
        }
    }
}

crate::kv_section!(TrainingConfig {
    mode,
    preset,
    channels,
    hidden,
    weight_tying,
    latent_dim,
    cfv_dim,
    alpha,
    epsilon_d,
    epsilon_s,
    beta,
    gamma,
    batch_size,
    dataset_size,
    iterations,
    pretrain_iterations,
    warmup_start,
    warmup_end,
    learning_rate,
    seed,
    log_interval,
    eval_interval,
    checkpoint_interval,
    selection,
    supportive,
});

/// Resolved phase boundaries (iterations are numbered from 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    /// Iterations `1..=pretrain` train only the conv autoencoder.
    pub pretrain: u64,
    pub warmup_start: u64,
    pub warmup_end: u64,
}

impl TrainingConfig {
    pub fn coefficients(&self) -> Coefficients {
        Coefficients {
            alpha: self.alpha,
            epsilon_d: self.epsilon_d,
            epsilon_s: self.epsilon_s,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    /// Unset boundaries scale the full-scale protocol to this budget.
    pub fn schedule(&self) -> Schedule {
        let frac = |f: f64| (self.iterations as f64 * f / PAPER_BUDGET).round() as u64;
        let pretrain = self.pretrain_iterations.unwrap_or_else(|| frac(PAPER_PRETRAIN));
        let warmup_start = self.warmup_start.unwrap_or_else(|| frac(PAPER_WARM_START).max(pretrain));
        let warmup_end = self.warmup_end.unwrap_or_else(|| frac(PAPER_WARM_END).max(warmup_start));
        Schedule {
            pretrain,
            warmup_start,
            warmup_end,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let mut arch = Architecture::preset(self.preset);
        if !self.channels.is_empty() {
            arch.channels = self.channels.clone();
        }
        if let Some(h) = self.hidden {
            arch.hidden = h;
        }
        arch
    }

    pub fn layout(&self) -> Result<LatentLayout> {
        let ncfv = self.latent_dim - self.cfv_dim;
        match self.mode {
            Mode::Eclf => LatentLayout::split(self.cfv_dim, ncfv),
            Mode::EclfCs => LatentLayout::class_specific(self.cfv_dim / 2, ncfv, self.cfv_dim / 2),
        }
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.coefficients().validate()?;
        if self.cfv_dim == 0 || self.cfv_dim >= self.latent_dim {
            return Err(EclfError::config(
                "vae.cfv_dim",
                format!("must be between 1 and latent_dim - 1 = {}", self.latent_dim.saturating_sub(1)),
            ));
        }
        if self.mode == Mode::EclfCs && self.cfv_dim % 2 != 0 {
            return Err(EclfError::config("vae.cfv_dim", "must be even in eclf-cs mode (one half per class)"));
        }
        if self.batch_size < 2 {
            return Err(EclfError::config("vae.batch_size", "must be at least 2 to estimate total correlation"));
        }
        if let Some(m) = self.dataset_size {
            if m < self.batch_size {
                return Err(EclfError::config("vae.dataset_size", "must be at least the batch size"));
            }
        }
        if self.iterations == 0 {
            return Err(EclfError::config("vae.iterations", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EclfError::config("vae.learning_rate", "must be positive"));
        }
        for (key, v) in [
            ("vae.log_interval", self.log_interval),
            ("vae.eval_interval", self.eval_interval),
            ("vae.checkpoint_interval", self.checkpoint_interval),
        ] {
            if v == 0 {
                return Err(EclfError::config(key, "must be positive"));
            }
        }
        let s = self.schedule();
        if s.pretrain > s.warmup_start {
            return Err(EclfError::config("vae.pretrain_iterations", "pretraining must end by warmup_start"));
        }
        if s.warmup_start > s.warmup_end {
            return Err(EclfError::config("vae.warmup_start", "must not exceed warmup_end"));
        }
        if s.warmup_end > self.iterations {
            return Err(EclfError::config("vae.warmup_end", "must not exceed the iteration budget"));
        }
        self.architecture().validate()?;
        if self.epsilon_s >= self.epsilon_d && self.epsilon_d > 0.0 {
            log::warn!(
                "epsilon_s = {} is not below epsilon_d = {}; the supportive head is meant to be the weaker signal",
                self.epsilon_s,
                self.epsilon_d
            );
        }
        Ok(())
    }

    /// The config as `vae.*` lines followed by the heads section.
    pub fn render(&self, heads: &HeadsConfig) -> String {
        format!("{}{}", render_section("vae", self), render_section("heads", heads))
    }

    pub fn parse(text: &str) -> Result<(TrainingConfig, HeadsConfig)> {
        let mut cfg = TrainingConfig::default();
        let mut heads = HeadsConfig::default();
        for a in parse_assignments(text)? {
            match a.section.as_str() {
                "vae" => cfg.apply("vae", &a.key, &a.value)?,
                "heads" => heads.apply("heads", &a.key, &a.value)?,
                other => return Err(EclfError::config(format!("{other}.{}", a.key), "unknown section")),
            }
        }
        Ok((cfg, heads))
    }
}

/// Everything the objective needs besides parameters.
pub struct LossInputs<'a, T> {
    pub x: &'a Tensor<T>,
    pub labels: &'a [usize],
    /// Standard normal draws, one row per sample.
    pub noise: &'a Tensor<T>,
    pub dataset_size: usize,
    pub coefficients: Coefficients,
    pub warm: f64,
    pub mode: Mode,
    /// Evaluate `l_rd` even when its weight is zero.
    pub perceptual_value: bool,
}

pub struct LossGrads<T> {
    pub vae: Vec<Tensor<T>>,
    pub sup: Option<Vec<Tensor<T>>>,
}

/// The full training objective for fixed noise and fixed heads.
///
/// The heads read the posterior means. With `want_grad`, also returns gradients
/// of `total` for the VAE and of the unweighted `l_s` for the supportive head.
pub fn full_loss<T: Real>(
    vae: &Vae<T>,
    disc: &Head<T>,
    sup: Option<&Head<T>>,
    extractor: &FeatureExtractor<T>,
    inp: &LossInputs<'_, T>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<LossGrads<T>>)> {
    let c = inp.coefficients;
    let warm = inp.warm;
    let layout = vae.layout();
    let (post, etr) = vae.encode_trace(inp.x)?;
    // The KL terms describe the encoder's ungated sample.
    let z = reparameterize_batch(&post, inp.noise)?;
    let dtr = match inp.mode {
        Mode::Eclf => vae.decode_trace(&z)?,
        Mode::EclfCs => vae.decode_trace(&gate_batch(layout, &z, inp.labels)?)?,
    };
    let x_hat = dtr.output();
    let (l_rc, mut d_out) = recon_loss(inp.x, x_hat)?;

    let rd_weight = warm * c.alpha;
    let mut l_rd = 0.0;
    if rd_weight > 0.0 || inp.perceptual_value {
        let (l, g) = extractor.loss(inp.x, x_hat, want_grad && rd_weight > 0.0)?;
        l_rd = l;
        if let Some(mut g) = g {
            g.scale(T::lit(rd_weight));
            d_out.add_assign(&g)?;
        }
    }

    let ncfv_idx = layout.ncfv_indices();
    let cls_idx = layout.classifiable_indices();
    let mu_ncfv = post.mu.gather_columns(&ncfv_idx)?;
    let (l_d, mut d_ncfv) = AdversarialHeads::adversarial(disc, &mu_ncfv)?;
    let (l_s, sup_parts) = match sup {
        Some(h) => {
            let mu_cls = post.mu.gather_columns(&cls_idx)?;
            let (l, dx, g) = AdversarialHeads::supportive(h, &mu_cls, inp.labels)?;
            (l, Some((dx, g)))
        }
        None => (0.0, None),
    };

    let kl_w = KlWeights {
        index_mi: 0.0,
        tc: warm * c.beta,
        dkl: warm * c.gamma,
    };
    let (terms, kl_grads) = if want_grad {
        let (t, g) = kl_terms_with_grad(&post, &z, inp.dataset_size, kl_w)?;
        (t, Some(g))
    } else {
        (kl_terms(&post, &z, inp.dataset_size)?, None)
    };

    let mut parts = LossBreakdown {
        l_rc,
        l_rd,
        l_d,
        l_s,
        index_mi: terms.index_mi,
        tc: terms.tc,
        dkl: terms.dkl,
        total: 0.0,
    };
    parts.total = parts.combine(&c, warm);
    if !want_grad {
        return Ok((parts, None));
    }

    let mut grads = vae.zero_grads();
    let mut dz = vae.decode_backward(&dtr, &d_out, &mut grads)?;
    if inp.mode == Mode::EclfCs {
        // Gated entries never reached the decoder.
        dz = gate_batch(layout, &dz, inp.labels)?;
    }
    let kl_grads = kl_grads.expect("computed when want_grad");
    let mut d_mu = kl_grads.d_mu;
    let mut d_lv = kl_grads.d_log_var;
    d_mu.add_assign(&dz)?;
    let half = T::lit(0.5);
    for ((dl, &g), (&lv, &e)) in d_lv.data_mut().iter_mut().zip(dz.data()).zip(post.log_var.data().iter().zip(inp.noise.data())) {
        *dl += g * half * (half * lv).exp() * e;
    }
    d_ncfv.scale(T::lit(c.epsilon_d));
    d_mu.scatter_add_columns(&ncfv_idx, &d_ncfv)?;
    let sup_grads = match sup_parts {
        Some((mut dx, g)) => {
            dx.scale(T::lit(c.epsilon_s));
            d_mu.scatter_add_columns(&cls_idx, &dx)?;
            Some(g)
        }
        None => None,
    };
    vae.encode_backward(&etr, &d_mu, &d_lv, &mut grads)?;
    Ok((parts, Some(LossGrads { vae: grads, sup: sup_grads })))
}

/// Checks the fp32 gradient of `total` against central differences of an fp64
/// copy of the same objective (same heads, extractor, batch and noise).
#[allow(clippy::too_many_arguments)]
pub fn objective_grad_check(
    vae: &Vae<f32>,
    disc: &Head<f32>,
    sup: Option<&Head<f32>>,
    extractor: &FeatureExtractor<f32>,
    inp: &LossInputs<'_, f32>,
    probes: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let (_, grads) = full_loss(vae, disc, sup, extractor, inp, true)?;
    let analytic: Vec<Tensor<f64>> = grads.expect("requested").vae.iter().map(Tensor::cast).collect();
    let mut reference: Vae<f64> = vae.cast();
    let params = reference.params().to_vec();
    let disc64: Head<f64> = disc.cast();
    let sup64: Option<Head<f64>> = sup.map(Head::cast);
    let ext64: FeatureExtractor<f64> = extractor.cast();
    let (x, noise) = (inp.x.cast::<f64>(), inp.noise.cast::<f64>());
    let inp64 = LossInputs {
        x: &x,
        labels: inp.labels,
        noise: &noise,
        dataset_size: inp.dataset_size,
        coefficients: inp.coefficients,
        warm: inp.warm,
        mode: inp.mode,
        perceptual_value: inp.perceptual_value,
    };
    let report = check_gradients(
        &params,
        &analytic,
        |p| {
            let total = reference
                .set_params(p.to_vec())
                .and_then(|_| full_loss(&reference, &disc64, sup64.as_ref(), &ext64, &inp64, false))
                .map_err(|e| NnError::Invalid(e.to_string()))?
                .0
                .total;
            Ok(total)
        },
        probes,
        eps,
        rng,
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValRecord {
    pub iteration: u64,
    pub l_rc: f64,
    pub index_mi: f64,
    pub tc: f64,
    pub dkl: f64,
}

impl ValRecord {
    /// The selection score `l_rc + tc + dkl`.
    pub fn score(&self) -> f64 {
        self.l_rc + self.tc + self.dkl
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.iteration, self.l_rc, self.index_mi, self.tc, self.dkl, self.score())
    }

    fn parse_csv_row(line: &str) -> Result<ValRecord> {
        let bad = || EclfError::Checkpoint(format!("malformed validation row {line:?}"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let v = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(ValRecord {
            iteration: f[0].parse().map_err(|_| bad())?,
            l_rc: v(1)?,
            index_mi: v(2)?,
            tc: v(3)?,
            dkl: v(4)?,
        })
    }
}

pub fn metric_csv(log: &[(u64, LossBreakdown)]) -> String {
    let mut s = format!("{METRIC_HEADER}\n");
    for (it, b) in log {
        s.push_str(&b.csv_row(*it));
        s.push('\n');
    }
    s
}

pub fn val_csv(log: &[ValRecord]) -> String {
    let mut s = format!("{VAL_HEADER}\n");
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn parse_metric_csv(text: &str) -> Result<Vec<(u64, LossBreakdown)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(LossBreakdown::parse_csv_row)
        .collect()
}

fn parse_val_csv(text: &str) -> Result<Vec<ValRecord>> {
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(ValRecord::parse_csv_row).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Best {
    iteration: u64,
    score: f64,
    params: Vec<Tensor<f32>>,
}

/// Training state for one VAE plus heads on one dataset.
pub struct Trainer<'d> {
    cfg: TrainingConfig,
    heads_cfg: HeadsConfig,
    data: &'d Dataset,
    schedule: Schedule,
    dataset_size: usize,
    vae: Vae<f32>,
    opt: OptimizerState<f32>,
    pre_opt: OptimizerState<f32>,
    heads: AdversarialHeads,
    extractor: FeatureExtractor<f32>,
    rng: ChaCha8Rng,
    iteration: u64,
    metric_log: Vec<(u64, LossBreakdown)>,
    val_log: Vec<ValRecord>,
    best: Option<Best>,
    val_x: Tensor<f32>,
    val_labels: Vec<usize>,
    val_noise: Tensor<f32>,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metric_log: Vec<(u64, LossBreakdown)>,
    pub val_log: Vec<ValRecord>,
    pub best_iteration: Option<u64>,
}

fn batch_tensor(samples: &[LabeledSample], idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let x = stack(idx.iter().map(|&i| &samples[i].image))?;
    Ok((x, idx.iter().map(|&i| samples[i].class_id).collect()))
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::from_fn(&[rows, cols], |_| rng.sample::<f32, _>(StandardNormal))
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d Dataset, cfg: TrainingConfig, heads_cfg: HeadsConfig) -> Result<Self> {
        cfg.validate()?;
        heads_cfg.validate()?;
        let classes = data.classes();
        if classes < 2 {
            return Err(EclfError::Dataset("training needs at least two classes".into()));
        }
        if cfg.mode == Mode::EclfCs && classes != 2 {
            return Err(EclfError::config(
                "vae.mode",
                format!("eclf-cs trains exactly two classes, the dataset has {classes}"),
            ));
        }
        if data.train.len() < cfg.batch_size {
            return Err(EclfError::config(
                "vae.batch_size",
                format!("exceeds the {} training samples", data.train.len()),
            ));
        }
        if data.val.len() < 2 {
            return Err(EclfError::Dataset("validation split needs at least two samples".into()));
        }
        let arch = cfg.architecture();
        if data.image_size != arch.image_size {
            return Err(EclfError::config(
                "vae.preset",
                format!("architecture expects {}px images, the dataset has {}px", arch.image_size, data.image_size),
            ));
        }
        let dataset_size = cfg.dataset_size.unwrap_or(data.train.len());
        if dataset_size < cfg.batch_size {
            return Err(EclfError::config("vae.dataset_size", "must be at least the batch size"));
        }
        let layout = cfg.layout()?;
        let vae = Vae::new(arch, layout.clone(), cfg.weight_tying, &mut rng_for(cfg.seed, &[TAG_INIT]))?;
        let heads = AdversarialHeads::new(
            &heads_cfg,
            layout.ncfv_indices().len(),
            layout.classifiable_dim(),
            classes,
            cfg.supportive,
            &mut rng_for(cfg.seed, &[TAG_HEADS]),
        )?;
        let extractor = FeatureExtractor::seeded(crate::seed::derive(cfg.seed, &[TAG_EXTRACTOR]))?;
        let all: Vec<usize> = (0..data.val.len()).collect();
        let (val_x, val_labels) = batch_tensor(&data.val, &all)?;
        let val_noise = normal_tensor(&mut rng_for(cfg.seed, &[TAG_VAL]), data.val.len(), layout.total_dim());
        let adam = OptimizerKind::adam(cfg.learning_rate);
        Ok(Trainer {
            schedule: cfg.schedule(),
            rng: rng_for(cfg.seed, &[TAG_TRAIN]),
            cfg,
            heads_cfg,
            data,
            dataset_size,
            vae,
            opt: OptimizerState::new(adam),
            pre_opt: OptimizerState::new(adam),
            heads,
            extractor,
            iteration: 0,
            metric_log: Vec::new(),
            val_log: Vec::new(),
            best: None,
            val_x,
            val_labels,
            val_noise,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn vae(&self) -> &Vae<f32> {
        &self.vae
    }

    pub fn heads(&self) -> &AdversarialHeads {
        &self.heads
    }

    pub fn extractor(&self) -> &FeatureExtractor<f32> {
        &self.extractor
    }

    pub fn metric_log(&self) -> &[(u64, LossBreakdown)] {
        &self.metric_log
    }

    pub fn val_log(&self) -> &[ValRecord] {
        &self.val_log
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    /// Runs one iteration. On a non-finite loss or gradient, the state is rolled
    /// back to before the iteration and returned inside the error.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let saved_rng = self.rng.clone();
        let saved_heads = self.heads.clone();
        match self.step_inner() {
            Err(EclfError::Diverged { iteration, reason, .. }) => {
                self.rng = saved_rng;
                self.heads = saved_heads;
                Err(EclfError::Diverged {
                    iteration,
                    reason,
                    last_good: Box::new(self.checkpoint()),
                })
            }
            other => other,
        }
    }

    fn step_inner(&mut self) -> Result<LossBreakdown> {
        let it = self.iteration + 1;
        let n = self.cfg.batch_size;
        let idx = rand::seq::index::sample(&mut self.rng, self.data.train.len(), n).into_vec();
        let (x, labels) = batch_tensor(&self.data.train, &idx)?;
        let diverged = |reason: String| EclfError::Diverged {
            iteration: it,
            reason,
            last_good: Box::new(Checkpoint::new()),
        };
        let log_now = it == 1 || it % self.cfg.log_interval == 0 || it == self.cfg.iterations;

        let parts = if it <= self.schedule.pretrain {
            let tr = self.vae.conv_autoencode(&x)?;
            let (l_rc, g) = recon_loss(&x, tr.output())?;
            if !l_rc.is_finite() {
                return Err(diverged(format!("reconstruction loss is {l_rc}")));
            }
            let mut grads = self.vae.zero_grads();
            self.vae.conv_autoencode_backward(&tr, &g, &mut grads)?;
            let slots = self.vae.conv_param_slots();
            let names: Vec<String> = slots.iter().map(|&s| self.vae.param_names()[s].clone()).collect();
            let sub: Vec<Tensor<f32>> = slots.iter().map(|&s| grads[s].clone()).collect();
            if sub.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged("non-finite gradient".into()));
            }
            let mut params = self.vae.params_mut();
            let mut chosen: Vec<&mut Tensor<f32>> = Vec::with_capacity(slots.len());
            for (i, p) in params.drain(..).enumerate() {
                if slots.binary_search(&i).is_ok() {
                    chosen.push(p);
                }
            }
            self.pre_opt.step(&names, &mut chosen, &sub)?;
            LossBreakdown {
                l_rc,
                total: l_rc,
                ..LossBreakdown::default()
            }
        } else {
            // The encoder is frozen while the discriminator trains.
            let ncfv = self.vae.encode(&x)?.mu.gather_columns(&self.vae.layout().ncfv_indices())?;
            for _ in 0..self.heads_cfg.disc_steps {
                let l = self.heads.train_discriminator(&ncfv, &labels).map_err(|e| match e {
                    EclfError::Nn(e) => diverged(format!("discriminator update failed: {e}")),
                    e => e,
                })?;
                if !l.is_finite() {
                    return Err(diverged(format!("discriminator loss is {l}")));
                }
            }
            let noise = normal_tensor(&mut self.rng, n, self.vae.layout().total_dim());
            let warm = if it <= self.schedule.warmup_start {
                0.0
            } else {
                warmup(it, self.schedule.warmup_start, self.schedule.warmup_end)
            };
            let inp = LossInputs {
                x: &x,
                labels: &labels,
                noise: &noise,
                dataset_size: self.dataset_size,
                coefficients: self.cfg.coefficients(),
                warm,
                mode: self.cfg.mode,
                perceptual_value: log_now,
            };
            let (parts, grads) = full_loss(&self.vae, &self.heads.disc, self.heads.sup.as_ref(), &self.extractor, &inp, true)?;
            if !parts.total.is_finite() {
                return Err(diverged(format!("total loss is {}", parts.total)));
            }
            let grads = grads.expect("requested");
            if grads.vae.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged("non-finite gradient".into()));
            }
            let names = self.vae.param_names().to_vec();
            self.opt.step(&names, &mut self.vae.params_mut(), &grads.vae)?;
            if let Some(g) = &grads.sup {
                self.heads.step_supportive(g)?;
            }
            parts
        };

        self.iteration = it;
        if log_now {
            self.metric_log.push((it, parts));
        }
        if it % self.cfg.eval_interval == 0 || it == self.cfg.iterations {
            self.evaluate()?;
        }
        Ok(parts)
    }

    /// Validation losses with fixed noise; updates the lowest-loss snapshot.
    fn evaluate(&mut self) -> Result<()> {
        let post = self.vae.encode(&self.val_x)?;
        let z = reparameterize_batch(&post, &self.val_noise)?;
        let z_dec = match self.cfg.mode {
            Mode::Eclf => z.clone(),
            Mode::EclfCs => gate_batch(self.vae.layout(), &z, &self.val_labels)?,
        };
        let x_hat = self.vae.decode(&z_dec)?;
        let (l_rc, _) = recon_loss(&self.val_x, &x_hat)?;
        let terms = kl_terms(&post, &z, self.val_x.batch())?;
        let rec = ValRecord {
            iteration: self.iteration,
            l_rc,
            index_mi: terms.index_mi,
            tc: terms.tc,
            dkl: terms.dkl,
        };
        self.val_log.push(rec);
        let score = rec.score();
        let eligible = self.iteration >= self.schedule.warmup_end && score.is_finite();
        if eligible && self.best.as_ref().is_none_or(|b| score < b.score) {
            self.best = Some(Best {
                iteration: self.iteration,
                score,
                params: self.vae.params().to_vec(),
            });
        }
        Ok(())
    }

    /// Trains to the end of the budget, handing each periodic checkpoint to `on_checkpoint`.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(u64, &Checkpoint) -> Result<()>) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.step()?;
            if self.iteration % self.cfg.checkpoint_interval == 0 && !self.is_done() {
                on_checkpoint(self.iteration, &self.checkpoint())?;
            }
        }
        Ok(self.outcome())
    }

    pub fn outcome(&self) -> TrainOutcome {
        TrainOutcome {
            checkpoint: self.checkpoint(),
            metric_log: self.metric_log.clone(),
            val_log: self.val_log.clone(),
            best_iteration: self.best.as_ref().map(|b| b.iteration),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "vae");
        ck.set_meta("iteration", self.iteration.to_string());
        ck.set_meta("rng", encode_rng(&self.rng));
        ck.set_meta("config", self.cfg.render(&self.heads_cfg));
        ck.set_meta("layout", self.vae.layout().to_string());
        ck.set_meta("mode", self.cfg.mode.to_string());
        ck.set_meta("class_names", self.data.class_names.join(","));
        ck.set_meta("image_size", self.data.image_size.to_string());
        ck.set_meta("metric_log", metric_csv(&self.metric_log));
        ck.set_meta("val_log", val_csv(&self.val_log));
        let names = self.vae.param_names();
        ck.put_all("vae.", names, self.vae.params());
        put_optimizer(&mut ck, "optim.vae", names, &self.opt);
        let slots = self.vae.conv_param_slots();
        let pre_names: Vec<String> = slots.iter().map(|&s| names[s].clone()).collect();
        put_optimizer(&mut ck, "optim.pre", &pre_names, &self.pre_opt);
        self.heads.save_into(&mut ck);
        match &self.best {
            Some(b) => {
                ck.set_meta("best_iteration", b.iteration.to_string());
                ck.set_meta("best_score", b.score.render_conf());
                ck.put_all("best.vae.", names, &b.params);
            }
            None => ck.set_meta("best_iteration", "none"),
        }
        ck
    }

    /// Restores a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(data: &'d Dataset, ck: &Checkpoint) -> Result<Self> {
        let (cfg, heads_cfg) = TrainingConfig::parse(ck.meta("config")?)?;
        if ck.meta("class_names")? != data.class_names.join(",") {
            return Err(EclfError::Checkpoint("checkpoint was trained on different classes".into()));
        }
        let mut t = Trainer::new(data, cfg, heads_cfg)?;
        let bad = |k: &str| EclfError::Checkpoint(format!("bad metadata {k:?}"));
        t.iteration = ck.meta("iteration")?.parse().map_err(|_| bad("iteration"))?;
        t.rng = decode_rng(ck.meta("rng")?)?;
        let names = t.vae.param_names().to_vec();
        t.vae.set_params(ck.get_all("vae.", &names)?)?;
        t.opt = get_optimizer(ck, "optim.vae", &names, t.opt.kind())?;
        let slots = t.vae.conv_param_slots();
        let pre_names: Vec<String> = slots.iter().map(|&s| names[s].clone()).collect();
        t.pre_opt = get_optimizer(ck, "optim.pre", &pre_names, t.pre_opt.kind())?;
        t.heads.load_from(ck)?;
        t.metric_log = parse_metric_csv(ck.meta("metric_log")?)?;
        t.val_log = parse_val_csv(ck.meta("val_log")?)?;
        t.best = match ck.meta("best_iteration")? {
            "none" => None,
            s => Some(Best {
                iteration: s.parse().map_err(|_| bad("best_iteration"))?,
                score: f64::parse_conf(ck.meta("best_score")?).map_err(|_| bad("best_score"))?,
                params: ck.get_all("best.vae.", &names)?,
            }),
        };
        Ok(t)
    }
}

fn put_optimizer(ck: &mut Checkpoint, prefix: &str, names: &[String], opt: &OptimizerState<f32>) {
    ck.set_meta(&format!("{prefix}.steps"), opt.steps().to_string());
    let (m, v) = opt.moments();
    ck.put_all(&format!("{prefix}.m."), &names[..m.len()], m);
    ck.put_all(&format!("{prefix}.v."), &names[..v.len()], v);
}

fn get_optimizer(ck: &Checkpoint, prefix: &str, names: &[String], kind: OptimizerKind) -> Result<OptimizerState<f32>> {
    let key = format!("{prefix}.steps");
    let steps: u64 = ck.meta(&key)?.parse().map_err(|_| EclfError::Checkpoint(format!("bad metadata {key:?}")))?;
    if steps == 0 {
        return Ok(OptimizerState::new(kind));
    }
    let m = ck.get_all(&format!("{prefix}.m."), names)?;
    let v = ck.get_all(&format!("{prefix}.v."), names)?;
    Ok(OptimizerState::from_parts(kind, steps, m, v)?)
}

/// A trained VAE loaded for downstream stages.
#[derive(Debug, Clone)]
pub struct TrainedVae {
    pub vae: Vae<f32>,
    pub config: TrainingConfig,
    pub class_names: Vec<String>,
    /// The iteration whose weights were loaded.
    pub iteration: u64,
}

impl TrainedVae {
    /// Loads the snapshot chosen by `selection`; lowest-loss falls back to the final
    /// weights when no eligible validation point was recorded.
    pub fn from_checkpoint(ck: &Checkpoint, selection: Selection) -> Result<Self> {
        if ck.meta("kind")? != "vae" {
            return Err(EclfError::Checkpoint("not a VAE checkpoint".into()));
        }
        let (config, _) = TrainingConfig::parse(ck.meta("config")?)?;
        let layout = config.layout()?;
        let mut vae = Vae::new(config.architecture(), layout, config.weight_tying, &mut rng_for(0, &[]))?;
        let names = vae.param_names().to_vec();
        let bad = |k: &str| EclfError::Checkpoint(format!("bad metadata {k:?}"));
        let best = ck.meta("best_iteration")?;
        let (prefix, iteration) = match (selection, best) {
            (Selection::LowestLoss, b) if b != "none" => ("best.vae.", b.parse().map_err(|_| bad("best_iteration"))?),
            _ => ("vae.", ck.meta("iteration")?.parse().map_err(|_| bad("iteration"))?),
        };
        vae.set_params(ck.get_all(prefix, &names)?)?;
        Ok(TrainedVae {
            vae,
            config,
            class_names: ck.meta("class_names")?.split(',').map(str::to_string).collect(),
            iteration,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }
}

/// Convenience wrapper: trains from scratch without periodic checkpoints.
pub fn train(data: &Dataset, cfg: TrainingConfig, heads: HeadsConfig) -> Result<TrainOutcome> {
    Trainer::new(data, cfg, heads)?.run(|_, _| Ok(()))
}
