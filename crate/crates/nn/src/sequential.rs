use rand::Rng;

use crate::error::{NnError, Result};
use crate::layer::{Layer, LayerSpec};
use crate::tensor::{Real, Tensor};

/// A chain of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T = f32> {
    layers: Vec<Layer<T>>,
}

/// Activations recorded by [`Sequential::forward_trace`]: the input to every layer
/// followed by the final output.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub activations: Vec<Tensor<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("trace holds at least the input")
    }
}

impl<T: Real> Sequential<T> {
    pub fn init(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let layers = specs.iter().map(|s| Layer::init(*s, rng)).collect::<Result<_>>()?;
        Ok(Sequential { layers })
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    /// Dense stack `widths[0] -> widths[1] -> ...` with ReLU between layers (not after the last).
    pub fn mlp(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NnError::Spec(format!("mlp needs at least two widths, got {widths:?}")));
        }
        let mut specs = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            specs.push(LayerSpec::Dense {
                inputs: pair[0],
                outputs: pair[1],
            });
            if i + 2 < widths.len() {
                specs.push(LayerSpec::Relu);
            }
        }
        Self::init(&specs, rng)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| *l.spec()).collect()
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        Sequential {
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &Tensor<T>) -> Result<Trace<T>> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().unwrap())?;
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    /// Backpropagates `upstream` (gradient w.r.t. the output) through a recorded trace.
    ///
    /// Parameter gradients come back in the same flat order as [`Sequential::params`].
    pub fn backward(&self, trace: &Trace<T>, upstream: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(NnError::Invalid("trace does not belong to this network".into()));
        }
        let mut grad = upstream.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, input) in self.layers.iter().zip(&trace.activations).rev() {
            let (dx, dparams) = layer.backward(input, &grad)?;
            per_layer.push(dparams);
            grad = dx;
        }
        per_layer.reverse();
        Ok((grad, per_layer.into_iter().flatten().collect()))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params().iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut().iter_mut()).collect()
    }

    /// Names of the parameter tensors, `"{prefix}.{layer}.{weight|bias}"`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, _) in layer.params().iter().enumerate() {
                let kind = if j == 0 { "weight" } else { "bias" };
                names.push(format!("{prefix}.{i}.{kind}"));
            }
        }
        names
    }

    /// Replaces all parameters, validating shapes.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        let expected: usize = self.layers.iter().map(|l| l.params().len()).sum();
        if params.len() != expected {
            return Err(NnError::Invalid(format!("expected {expected} parameter tensors, got {}", params.len())));
        }
        let mut it = params.into_iter();
        for layer in &mut self.layers {
            let spec = *layer.spec();
            let taken: Vec<_> = it.by_ref().take(layer.params().len()).collect();
            *layer = Layer::with_params(spec, taken)?;
        }
        Ok(())
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l.spec() {
            LayerSpec::Dense { inputs, .. } => Some(*inputs),
            _ => None,
        })
    }
}
