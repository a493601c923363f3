//! The final classifier on frozen latent means, and a pixel-space baseline.

use eclf_nn::loss::{cross_entropy, softmax};
use eclf_nn::{ConvSpec, LayerSpec, OptimizerKind, OptimizerState, Sequential, Tensor};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{EclfError, Result};
use crate::imageio::stack;
use crate::seed::rng_for;
use crate::synthleaf::LabeledSample;
use crate::vae::{Checkpoint, Posteriors, Vae};

const TAG_FINAL: u64 = 0xC1;
const TAG_BASELINE: u64 = 0xBA;
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_interval: u64,
    /// Two hidden widths, or empty for `[input, input / 2]`.
    pub hidden: Vec<usize>,
    pub baseline_iterations: u64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            iterations: 5000,
            batch_size: 64,
            learning_rate: 1e-3,
            eval_interval: 50,
            hidden: Vec::new(),
            baseline_iterations: 400,
            seed: 0,
        }
    }
}

crate::kv_section!(ClassifierConfig {
    iterations,
    batch_size,
    learning_rate,
    eval_interval,
    hidden,
    baseline_iterations,
    seed,
});

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(EclfError::config("classifier.iterations", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(EclfError::config("classifier.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EclfError::config("classifier.learning_rate", "must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(EclfError::config("classifier.eval_interval", "must be positive"));
        }
        if !self.hidden.is_empty() && (self.hidden.len() != 2 || self.hidden.contains(&0)) {
            return Err(EclfError::config("classifier.hidden", "give two positive widths, or leave empty"));
        }
        Ok(())
    }
}

/// Posterior parameters for every sample, encoded in parallel chunks.
pub fn encode_all(samples: &[LabeledSample], vae: &Vae<f32>) -> Result<Posteriors<f32>> {
    if samples.is_empty() {
        return Err(EclfError::Invalid("no samples to encode".into()));
    }
    let parts: Vec<Posteriors<f32>> = samples
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| vae.encode(&stack(chunk.iter().map(|s| &s.image))?))
        .collect::<Result<_>>()?;
    let d = vae.layout().total_dim();
    let n = samples.len();
    let cat = |f: fn(&Posteriors<f32>) -> &Tensor<f32>| {
        let data: Vec<f32> = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        Tensor::new(vec![n, d], data)
    };
    Ok(Posteriors {
        mu: cat(|p| &p.mu)?,
        log_var: cat(|p| &p.log_var)?,
    })
}

/// The classifiable slice of each sample's posterior mean (no sampling noise).
pub fn extract_features(samples: &[LabeledSample], vae: &Vae<f32>) -> Result<Tensor<f32>> {
    let post = encode_all(samples, vae)?;
    vae.layout().classifiable(&post.mu)
}

pub fn extract_ncfv(samples: &[LabeledSample], vae: &Vae<f32>) -> Result<Tensor<f32>> {
    let post = encode_all(samples, vae)?;
    vae.layout().ncfv(&post.mu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
}

/// Three dense layers over latent features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub net: Sequential<f32>,
    pub input_dim: usize,
    pub classes: usize,
    pub best_iteration: u64,
    pub best_val_accuracy: f64,
    pub final_val_accuracy: f64,
}

fn argmax(row: &[f32]) -> usize {
    // First maximum wins.
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

impl ClassifierModel {
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, w) = x.as_matrix("classifier input")?;
        if w != self.input_dim {
            return Err(EclfError::Invalid(format!("classifier expects {} features, got {w}", self.input_dim)));
        }
        Ok(self.net.forward(x)?)
    }

    pub fn predict_batch(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let lg = self.logits(x)?;
        Ok((0..lg.batch()).map(|i| argmax(lg.row(i))).collect())
    }

    pub fn accuracy(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        accuracy(&self.predict_batch(x)?, labels)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.set_meta("kind", "classifier");
        ck.set_meta(
            "classifier.widths",
            widths(&self.net).iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        ck.set_meta("classifier.best_iteration", self.best_iteration.to_string());
        ck.set_meta("classifier.best_val_accuracy", format!("{}", self.best_val_accuracy));
        ck.set_meta("classifier.final_val_accuracy", format!("{}", self.final_val_accuracy));
        let names = self.net.param_names("classifier");
        let params: Vec<Tensor<f32>> = self.net.params().into_iter().cloned().collect();
        ck.put_all("", &names, &params);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "classifier" {
            return Err(EclfError::Checkpoint("not a classifier checkpoint".into()));
        }
        let bad = |k: &str| EclfError::Checkpoint(format!("bad metadata {k:?}"));
        let w: Vec<usize> = ck
            .meta("classifier.widths")?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad("classifier.widths")))
            .collect::<Result<_>>()?;
        if w.len() != 4 {
            return Err(bad("classifier.widths"));
        }
        let mut net = Sequential::mlp(&w, &mut rng_for(0, &[]))?;
        let names = net.param_names("classifier");
        net.set_params(ck.get_all("", &names)?)?;
        let num = |k: &str| -> Result<f64> { ck.meta(k)?.parse().map_err(|_| bad(k)) };
        Ok(ClassifierModel {
            net,
            input_dim: w[0],
            classes: w[3],
            best_iteration: ck.meta("classifier.best_iteration")?.parse().map_err(|_| bad("classifier.best_iteration"))?,
            best_val_accuracy: num("classifier.best_val_accuracy")?,
            final_val_accuracy: num("classifier.final_val_accuracy")?,
        })
    }
}

fn widths(net: &Sequential<f32>) -> Vec<usize> {
    let mut w = Vec::new();
    for spec in net.specs() {
        if let LayerSpec::Dense { inputs, outputs } = spec {
            if w.is_empty() {
                w.push(inputs);
            }
            w.push(outputs);
        }
    }
    w
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(EclfError::Invalid(format!(
            "accuracy needs equal, non-empty prediction and label lists ({} vs {})",
            pred.len(),
            labels.len()
        )));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
}

/// Class, logits and softmax for one feature vector.
pub fn predict(model: &ClassifierModel, feature: &[f32]) -> Result<Prediction> {
    let x = Tensor::new(vec![1, feature.len()], feature.to_vec())?;
    let logits = model.logits(&x)?.into_data();
    let probs = softmax(&Tensor::new(vec![1, logits.len()], logits.clone())?)?.into_data();
    Ok(Prediction {
        class: argmax(&logits),
        logits,
        probs,
    })
}

fn check_labels(labels: &[usize], rows: usize, what: &str) -> Result<usize> {
    if labels.len() != rows || rows == 0 {
        return Err(EclfError::Invalid(format!("{what}: {} labels for {rows} rows", labels.len())));
    }
    Ok(labels.iter().max().map_or(0, |m| m + 1))
}

fn sample_batch(rng: &mut ChaCha8Rng, x: &Tensor<f32>, labels: &[usize], size: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    let n = labels.len();
    let idx = rand::seq::index::sample(rng, n, size.min(n)).into_vec();
    Ok((x.gather_rows(&idx)?, idx.iter().map(|&i| labels[i]).collect()))
}

trait GatherRows {
    fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<f32>>;
}

impl GatherRows for Tensor<f32> {
    fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let data: Vec<f32> = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Ok(Tensor::new(shape, data)?)
    }
}

/// Trains on frozen features, keeping the snapshot with the best validation accuracy
/// (ties go to the lower validation loss, then the earlier iteration).
pub fn train_final(
    train_x: &Tensor<f32>,
    train_labels: &[usize],
    val_x: &Tensor<f32>,
    val_labels: &[usize],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<ClassifierModel> {
    cfg.validate()?;
    let (rows, dim) = train_x.as_matrix("classifier features")?;
    let seen = check_labels(train_labels, rows, "training set")?;
    let (vrows, vdim) = val_x.as_matrix("validation features")?;
    check_labels(val_labels, vrows, "validation set")?;
    if vdim != dim {
        return Err(EclfError::Invalid(format!("validation features have {vdim} columns, training has {dim}")));
    }
    let mut distinct = train_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(EclfError::Invalid("the classifier needs at least two classes in its training data".into()));
    }
    if classes < seen {
        return Err(EclfError::Invalid(format!(
            "labels reach class {} but only {classes} classes were given",
            seen - 1
        )));
    }
    let [h1, h2] = if cfg.hidden.len() == 2 {
        [cfg.hidden[0], cfg.hidden[1]]
    } else {
        [dim, (dim / 2).max(1)]
    };
    let mut rng = rng_for(cfg.seed, &[TAG_FINAL]);
    let mut net = Sequential::<f32>::mlp(&[dim, h1, h2, classes], &mut rng)?;
    let names = net.param_names("classifier");
    let mut opt = OptimizerState::new(OptimizerKind::adam(cfg.learning_rate));

    let evaluate = |net: &Sequential<f32>| -> Result<(f64, f64)> {
        let lg = net.forward(val_x)?;
        let (loss, _) = cross_entropy(&lg, val_labels)?;
        let pred: Vec<usize> = (0..lg.batch()).map(|i| argmax(lg.row(i))).collect();
        Ok((accuracy(&pred, val_labels)?, loss as f64))
    };
    let (acc0, loss0) = evaluate(&net)?;
    let mut best = (acc0, loss0, 0u64, net.clone());
    let mut last_acc = acc0;
    for it in 1..=cfg.iterations {
        let (bx, by) = sample_batch(&mut rng, train_x, train_labels, cfg.batch_size)?;
        let trace = net.forward_trace(&bx)?;
        let (_, g) = cross_entropy(trace.output(), &by)?;
        let (_, grads) = net.backward(&trace, &g)?;
        opt.step(&names, &mut net.params_mut(), &grads)?;
        if it % cfg.eval_interval == 0 || it == cfg.iterations {
            let (acc, loss) = evaluate(&net)?;
            last_acc = acc;
            if acc > best.0 || (acc == best.0 && loss < best.1) {
                best = (acc, loss, it, net.clone());
            }
        }
    }
    Ok(ClassifierModel {
        net: best.3,
        input_dim: dim,
        classes,
        best_iteration: best.2,
        best_val_accuracy: best.0,
        final_val_accuracy: last_acc,
    })
}

/// One row of the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub model: String,
    pub split: String,
    pub accuracy: f64,
    pub seed: u64,
}

pub const EVAL_HEADER: &str = "dataset,model,split,accuracy,seed";

impl EvalRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.dataset, self.model, self.split, self.accuracy, self.seed)
    }
}

/// A small conv net on raw pixels, for accuracy comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub features: Sequential<f32>,
    pub head: Sequential<f32>,
    pub val_accuracy: f64,
}

impl BaselineModel {
    fn flat(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let f = self.features.forward(x)?;
        let n = f.batch();
        let w = f.len() / n;
        Ok(f.reshape(&[n, w])?)
    }

    pub fn predict_batch(&self, samples: &[LabeledSample]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(ENCODE_CHUNK) {
            let x = stack(chunk.iter().map(|s| &s.image))?;
            let lg = self.head.forward(&self.flat(&x)?)?;
            out.extend((0..lg.batch()).map(|i| argmax(lg.row(i))));
        }
        Ok(out)
    }

    pub fn accuracy(&self, samples: &[LabeledSample]) -> Result<f64> {
        let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
        accuracy(&self.predict_batch(samples)?, &labels)
    }
}

/// Two stride-2 convolutions and two dense layers, trained with Adam on pixels.
/// Returns the final-iteration model.
pub fn train_baseline(train: &[LabeledSample], val: &[LabeledSample], classes: usize, cfg: &ClassifierConfig) -> Result<BaselineModel> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(EclfError::Invalid("baseline needs training and validation samples".into()));
    }
    let size = train[0].image.height;
    if size % 4 != 0 {
        return Err(EclfError::Invalid(format!("baseline needs an image size divisible by 4, got {size}")));
    }
    let mut rng = rng_for(cfg.seed, &[TAG_BASELINE]);
    let features = Sequential::<f32>::init(
        &[
            LayerSpec::Conv(ConvSpec::new(3, 8, 4, 2, 1)),
            LayerSpec::Relu,
            LayerSpec::Conv(ConvSpec::new(8, 16, 4, 2, 1)),
            LayerSpec::Relu,
        ],
        &mut rng,
    )?;
    let flat = 16 * (size / 4) * (size / 4);
    let head = Sequential::<f32>::mlp(&[flat, 32, classes], &mut rng)?;
    let mut model = BaselineModel {
        features,
        head,
        val_accuracy: 0.0,
    };
    let fnames = model.features.param_names("baseline.features");
    let hnames = model.head.param_names("baseline.head");
    let kind = OptimizerKind::adam(cfg.learning_rate);
    let (mut fopt, mut hopt) = (OptimizerState::new(kind), OptimizerState::new(kind));
    for _ in 0..cfg.baseline_iterations {
        let idx = rand::seq::index::sample(&mut rng, train.len(), cfg.batch_size.min(train.len())).into_vec();
        let x = stack(idx.iter().map(|&i| &train[i].image))?;
        let labels: Vec<usize> = idx.iter().map(|&i| train[i].class_id).collect();
        let ftr = model.features.forward_trace(&x)?;
        let fshape = ftr.output().shape().to_vec();
        let flat_x = ftr.output().clone().reshape(&[fshape[0], flat])?;
        let htr = model.head.forward_trace(&flat_x)?;
        let (_, g) = cross_entropy(htr.output(), &labels)?;
        let (dflat, hgrads) = model.head.backward(&htr, &g)?;
        let (_, fgrads) = model.features.backward(&ftr, &dflat.reshape(&fshape)?)?;
        hopt.step(&hnames, &mut model.head.params_mut(), &hgrads)?;
        fopt.step(&fnames, &mut model.features.params_mut(), &fgrads)?;
    }
    model.val_accuracy = model.accuracy(val)?;
    Ok(model)
}
