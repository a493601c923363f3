use std::fmt;
use std::str::FromStr;

use eclf_nn::layer::{
    conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, dense_backward, dense_forward, relu, relu_backward, sigmoid, sigmoid_backward,
};
use eclf_nn::{ConvSpec, Layer, LayerSpec, Real, Tensor};
use rand::Rng;

use crate::error::{EclfError, Result};

use super::layout::{LatentLayout, Posteriors};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchPreset {
    Desk,
    Paper,
}

impl fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchPreset::Desk => "desk",
            ArchPreset::Paper => "paper",
        })
    }
}

impl FromStr for ArchPreset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        crate::textconf::parse_word(s, &[("desk", ArchPreset::Desk), ("paper", ArchPreset::Paper)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightTying {
    Mirrored,
    Tied,
}

impl fmt::Display for WeightTying {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightTying::Mirrored => "mirrored",
            WeightTying::Tied => "tied",
        })
    }
}

impl FromStr for WeightTying {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        crate::textconf::parse_word(s, &[("mirrored", WeightTying::Mirrored), ("tied", WeightTying::Tied)])
    }
}

crate::conf_value_via_str!(ArchPreset, WeightTying);

/// Encoder/decoder geometry. Every conv layer is 4x4, stride 2, padding 1, halving
/// the spatial size; the decoder mirrors the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub image_size: usize,
    /// Output channels of each encoder conv layer.
    pub channels: Vec<usize>,
    /// Width of FC1. Its output is split in quarters: the first feeds the
    /// classifiable means, the second the NCFV means, the last half the log-variances.
    pub hidden: usize,
}

impl Architecture {
    pub fn preset(p: ArchPreset) -> Self {
        match p {
            ArchPreset::Desk => Architecture {
                image_size: 32,
                channels: vec![16, 32, 32],
                hidden: 256,
            },
            ArchPreset::Paper => Architecture {
                image_size: 128,
                channels: vec![32, 64, 128, 256, 512],
                hidden: 8192,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.channels.len();
        if layers == 0 || self.channels.contains(&0) {
            return Err(EclfError::Invalid("architecture needs at least one conv layer with positive channels".into()));
        }
        if self.image_size % (1 << layers) != 0 || self.image_size >> layers == 0 {
            return Err(EclfError::Invalid(format!("image size {} is not divisible by 2^{layers}", self.image_size)));
        }
        if self.hidden < 4 || self.hidden % 4 != 0 {
            return Err(EclfError::Invalid(format!("hidden width {} must be a positive multiple of 4", self.hidden)));
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.channels.len()
    }

    pub fn flat(&self) -> usize {
        let s = self.bottleneck_size();
        self.channels[self.channels.len() - 1] * s * s
    }

    fn conv_spec(&self, i: usize) -> ConvSpec {
        let cin = if i == 0 { 3 } else { self.channels[i - 1] };
        ConvSpec::new(cin, self.channels[i], 4, 2, 1)
    }

    /// Decoder layer `i` undoes encoder layer `L - 1 - i`.
    fn deconv_spec(&self, i: usize) -> ConvSpec {
        let e = self.conv_spec(self.channels.len() - 1 - i);
        ConvSpec::new(e.out_channels, e.in_channels, 4, 2, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    enc_conv: Vec<(usize, usize)>,
    fc1: (usize, usize),
    fc_c: (usize, usize),
    fc_d: (usize, usize),
    fc_v: (usize, usize),
    dec_fc1: (usize, usize),
    dec_fc2: (usize, usize),
    dec_conv: Vec<(usize, usize)>,
}

/// The split-latent convolutional VAE.
///
/// Parameters live in one flat list (see [`Vae::param_names`]) so optimizers and
/// checkpoints can treat the model uniformly. In tied mode the decoder's transposed
/// convolutions read the encoder's conv kernels (`[out, in, k, k]` of a conv is the
/// `[in, out, k, k]` layout of its transpose) and keep their own biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae<T = f32> {
    arch: Architecture,
    layout: LatentLayout,
    tying: WeightTying,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    slots: Slots,
}

struct ConvTrace<T> {
    /// Input of each layer, then the final (post-ReLU) output.
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
}

pub struct EncoderTrace<T> {
    convs: ConvTrace<T>,
    flat: Tensor<T>,
    fc1_pre: Tensor<T>,
    parts: [Tensor<T>; 3],
}

pub struct DecoderTrace<T> {
    z: Tensor<T>,
    h1_pre: Tensor<T>,
    h1: Tensor<T>,
    h2_pre: Tensor<T>,
    deconvs: ConvTrace<T>,
    output: Tensor<T>,
}

impl<T: Real> DecoderTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

struct Builder<'r, T, R> {
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    rng: &'r mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn layer(&mut self, name: String, spec: LayerSpec) -> Result<(usize, usize)> {
        let ps = Layer::<T>::init(spec, self.rng)?.params().to_vec();
        let base = self.params.len();
        self.names.push(format!("{name}.weight"));
        self.names.push(format!("{name}.bias"));
        self.params.extend(ps);
        Ok((base, base + 1))
    }

    fn bias_only(&mut self, name: String, spec: LayerSpec) -> Result<usize> {
        let ps = Layer::<T>::init(spec, self.rng)?.params().to_vec();
        self.names.push(format!("{name}.bias"));
        self.params.push(ps[1].clone());
        Ok(self.params.len() - 1)
    }
}

fn dense_spec(inputs: usize, outputs: usize) -> LayerSpec {
    LayerSpec::Dense { inputs, outputs }
}

impl<T: Real> Vae<T> {
    pub fn new<R: Rng>(arch: Architecture, layout: LatentLayout, tying: WeightTying, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            rng,
        };
        let layers = arch.channels.len();
        let h = arch.hidden;
        let latent = layout.total_dim();
        let mut enc_conv = Vec::new();
        for i in 0..layers {
            enc_conv.push(b.layer(format!("encoder.conv{i}"), LayerSpec::Conv(arch.conv_spec(i)))?);
        }
        let fc1 = b.layer("encoder.fc1".into(), dense_spec(arch.flat(), h))?;
        let fc_c = b.layer("encoder.fc_c".into(), dense_spec(h / 4, layout.classifiable_dim()))?;
        let fc_d = b.layer("encoder.fc_d".into(), dense_spec(h / 4, layout.ncfv_range().len()))?;
        let fc_v = b.layer("encoder.fc_v".into(), dense_spec(h / 2, latent))?;
        let dec_fc1 = b.layer("decoder.fc1".into(), dense_spec(latent, h))?;
        let dec_fc2 = b.layer("decoder.fc2".into(), dense_spec(h, arch.flat()))?;
        let mut dec_conv = Vec::new();
        for i in 0..layers {
            let spec = LayerSpec::ConvTranspose(arch.deconv_spec(i));
            let name = format!("decoder.deconv{i}");
            dec_conv.push(match tying {
                WeightTying::Mirrored => b.layer(name, spec)?,
                WeightTying::Tied => (enc_conv[layers - 1 - i].0, b.bias_only(name, spec)?),
            });
        }
        let Builder { params, names, .. } = b;
        // Start the log-variance head near a unit posterior.
        let mut vae = Vae {
            arch,
            layout,
            tying,
            params,
            names,
            slots: Slots {
                enc_conv,
                fc1,
                fc_c,
                fc_d,
                fc_v,
                dec_fc1,
                dec_fc2,
                dec_conv,
            },
        };
        let w = vae.slots.fc_v.0;
        vae.params[w].scale(T::lit(0.1));
        Ok(vae)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn tying(&self) -> WeightTying {
        self.tying
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().collect()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(EclfError::Invalid(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((name, old), new) in self.names.iter().zip(&self.params).zip(&params) {
            if old.shape() != new.shape() {
                return Err(EclfError::Invalid(format!("{name}: expected shape {:?}, got {:?}", old.shape(), new.shape())));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Vae<U> {
        Vae {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            tying: self.tying,
            params: self.params.iter().map(|p| p.cast()).collect(),
            names: self.names.clone(),
            slots: self.slots.clone(),
        }
    }

    /// Indices of the parameters used by the conv-only autoencoder path.
    pub fn conv_param_slots(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.slots.enc_conv.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.extend(self.slots.dec_conv.iter().flat_map(|&(w, b)| [w, b]));
        v.sort_unstable();
        v.dedup();
        v
    }

    fn p(&self, slot: usize) -> &Tensor<T> {
        &self.params[slot]
    }

    fn input_shape(&self, n: usize) -> [usize; 4] {
        let s = self.arch.image_size;
        [n, 3, s, s]
    }

    fn conv_stack(&self, x: &Tensor<T>) -> Result<ConvTrace<T>> {
        let n = x.batch();
        if x.shape() != self.input_shape(n) {
            return Err(EclfError::Invalid(format!(
                "encoder expects images of shape {:?}, got {:?}",
                &self.input_shape(n)[1..],
                x.shape().get(1..).unwrap_or(&[])
            )));
        }
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::new();
        for (i, &(w, b)) in self.slots.enc_conv.iter().enumerate() {
            let y = conv_forward(&self.arch.conv_spec(i), self.p(w), self.p(b), &inputs[i])?;
            inputs.push(relu(&y));
            pre.push(y);
        }
        Ok(ConvTrace { inputs, pre })
    }

    fn conv_stack_backward(&self, tr: &ConvTrace<T>, upstream: Tensor<T>, grads: &mut [Tensor<T>]) -> Result<()> {
        let mut g = upstream;
        for i in (0..self.slots.enc_conv.len()).rev() {
            let (w, b) = self.slots.enc_conv[i];
            let dpre = relu_backward(&tr.pre[i], &g);
            let (dx, dw, db) = conv_backward(&self.arch.conv_spec(i), self.p(w), &tr.inputs[i], &dpre)?;
            grads[w].add_assign(&dw)?;
            grads[b].add_assign(&db)?;
            g = dx;
        }
        Ok(())
    }

    fn deconv_stack(&self, h: Tensor<T>) -> Result<(ConvTrace<T>, Tensor<T>)> {
        let layers = self.slots.dec_conv.len();
        let mut inputs = vec![h];
        let mut pre = Vec::new();
        for (i, &(w, b)) in self.slots.dec_conv.iter().enumerate() {
            let y = conv_transpose_forward(&self.arch.deconv_spec(i), self.p(w), self.p(b), &inputs[i])?;
            if i + 1 < layers {
                inputs.push(relu(&y));
            }
            pre.push(y);
        }
        let out = sigmoid(&pre[layers - 1]);
        Ok((ConvTrace { inputs, pre }, out))
    }

    fn deconv_stack_backward(&self, tr: &ConvTrace<T>, d_out: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        let layers = self.slots.dec_conv.len();
        let mut g = sigmoid_backward(&tr.pre[layers - 1], d_out);
        for i in (0..layers).rev() {
            let (w, b) = self.slots.dec_conv[i];
            if i + 1 < layers {
                g = relu_backward(&tr.pre[i], &g);
            }
            let (dx, dw, db) = conv_transpose_backward(&self.arch.deconv_spec(i), self.p(w), &tr.inputs[i], &g)?;
            grads[w].add_assign(&dw)?;
            grads[b].add_assign(&db)?;
            g = dx;
        }
        Ok(g)
    }

    pub fn encode_trace(&self, x: &Tensor<T>) -> Result<(Posteriors<T>, EncoderTrace<T>)> {
        let n = x.batch();
        let convs = self.conv_stack(x)?;
        let flat = convs.inputs.last().expect("non-empty").clone().reshape(&[n, self.arch.flat()])?;
        let h = self.arch.hidden;
        let s = &self.slots;
        let fc1_pre = dense_forward(&dense_spec(self.arch.flat(), h), self.p(s.fc1.0), self.p(s.fc1.1), &flat)?;
        let hid = relu(&fc1_pre);
        let parts = [hid.columns(0, h / 4)?, hid.columns(h / 4, h / 2)?, hid.columns(h / 2, h)?];
        let d = self.layout.total_dim();
        let mu_c = dense_forward(
            &dense_spec(h / 4, self.layout.classifiable_dim()),
            self.p(s.fc_c.0),
            self.p(s.fc_c.1),
            &parts[0],
        )?;
        let mu_d = dense_forward(
            &dense_spec(h / 4, self.layout.ncfv_range().len()),
            self.p(s.fc_d.0),
            self.p(s.fc_d.1),
            &parts[1],
        )?;
        let log_var = dense_forward(&dense_spec(h / 2, d), self.p(s.fc_v.0), self.p(s.fc_v.1), &parts[2])?;
        let mut mu = Tensor::zeros(&[n, d]);
        mu.scatter_add_columns(&self.layout.classifiable_indices(), &mu_c)?;
        mu.scatter_add_columns(&self.layout.ncfv_indices(), &mu_d)?;
        Ok((Posteriors { mu, log_var }, EncoderTrace { convs, flat, fc1_pre, parts }))
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Posteriors<T>> {
        Ok(self.encode_trace(x)?.0)
    }

    /// Adds encoder parameter gradients for upstream `d_mu`, `d_log_var` into `grads`.
    pub fn encode_backward(&self, tr: &EncoderTrace<T>, d_mu: &Tensor<T>, d_log_var: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<()> {
        let s = &self.slots;
        let h = self.arch.hidden;
        let n = tr.flat.batch();
        let heads = [
            (s.fc_c, d_mu.gather_columns(&self.layout.classifiable_indices())?),
            (s.fc_d, d_mu.gather_columns(&self.layout.ncfv_indices())?),
            (s.fc_v, d_log_var.clone()),
        ];
        let mut dhid = Tensor::zeros(&[n, h]);
        let offsets = [0, h / 4, h / 2];
        for (k, ((w, b), dy)) in heads.into_iter().enumerate() {
            let (dx, dw, db) = dense_backward(self.p(w), &tr.parts[k], &dy)?;
            grads[w].add_assign(&dw)?;
            grads[b].add_assign(&db)?;
            let cols: Vec<usize> = (offsets[k]..offsets[k] + dx.row_len()).collect();
            dhid.scatter_add_columns(&cols, &dx)?;
        }
        let dpre = relu_backward(&tr.fc1_pre, &dhid);
        let (dflat, dw, db) = dense_backward(self.p(s.fc1.0), &tr.flat, &dpre)?;
        grads[s.fc1.0].add_assign(&dw)?;
        grads[s.fc1.1].add_assign(&db)?;
        let top = tr.convs.inputs.last().expect("non-empty").shape().to_vec();
        self.conv_stack_backward(&tr.convs, dflat.reshape(&top)?, grads)
    }

    pub fn decode_trace(&self, z: &Tensor<T>) -> Result<DecoderTrace<T>> {
        let (n, d) = z.as_matrix("latent batch")?;
        if d != self.layout.total_dim() {
            return Err(EclfError::Invalid(format!(
                "decoder expects latent vectors of length {}, got {d}",
                self.layout.total_dim()
            )));
        }
        let s = &self.slots;
        let h = self.arch.hidden;
        let h1_pre = dense_forward(&dense_spec(d, h), self.p(s.dec_fc1.0), self.p(s.dec_fc1.1), z)?;
        let h1 = relu(&h1_pre);
        let h2_pre = dense_forward(&dense_spec(h, self.arch.flat()), self.p(s.dec_fc2.0), self.p(s.dec_fc2.1), &h1)?;
        let b = self.arch.bottleneck_size();
        let top = relu(&h2_pre).reshape(&[n, *self.arch.channels.last().expect("non-empty"), b, b])?;
        let (deconvs, output) = self.deconv_stack(top)?;
        Ok(DecoderTrace {
            z: z.clone(),
            h1_pre,
            h1,
            h2_pre,
            deconvs,
            output,
        })
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.decode_trace(z)?.output)
    }

    /// Adds decoder gradients into `grads` and returns the gradient w.r.t. `z`.
    pub fn decode_backward(&self, tr: &DecoderTrace<T>, d_out: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        let s = &self.slots;
        let dtop = self.deconv_stack_backward(&tr.deconvs, d_out, grads)?;
        let n = tr.z.batch();
        let dh2 = relu_backward(&tr.h2_pre, &dtop.reshape(&[n, self.arch.flat()])?);
        let (dh1, dw, db) = dense_backward(self.p(s.dec_fc2.0), &tr.h1, &dh2)?;
        grads[s.dec_fc2.0].add_assign(&dw)?;
        grads[s.dec_fc2.1].add_assign(&db)?;
        let dh1 = relu_backward(&tr.h1_pre, &dh1);
        let (dz, dw, db) = dense_backward(self.p(s.dec_fc1.0), &tr.z, &dh1)?;
        grads[s.dec_fc1.0].add_assign(&dw)?;
        grads[s.dec_fc1.1].add_assign(&db)?;
        Ok(dz)
    }

    /// Conv encoder straight into the conv decoder, skipping the latent bottleneck.
    /// Used for reconstruction-only pretraining.
    pub fn conv_autoencode(&self, x: &Tensor<T>) -> Result<ConvAutoencoderTrace<T>> {
        let enc = self.conv_stack(x)?;
        let (dec, output) = self.deconv_stack(enc.inputs.last().expect("non-empty").clone())?;
        Ok(ConvAutoencoderTrace { enc, dec, output })
    }

    pub fn conv_autoencode_backward(&self, tr: &ConvAutoencoderTrace<T>, d_out: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<()> {
        let d_mid = self.deconv_stack_backward(&tr.dec, d_out, grads)?;
        self.conv_stack_backward(&tr.enc, d_mid, grads)
    }
}

pub struct ConvAutoencoderTrace<T> {
    enc: ConvTrace<T>,
    dec: ConvTrace<T>,
    output: Tensor<T>,
}

impl<T: Real> ConvAutoencoderTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(tying: WeightTying) -> Vae<f64> {
        let arch = Architecture {
            image_size: 16,
            channels: vec![4, 6],
            hidden: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Vae::new(arch, LatentLayout::split(3, 2).unwrap(), tying, &mut rng).unwrap()
    }

    #[test]
    fn shapes_and_range() {
        for t in [WeightTying::Mirrored, WeightTying::Tied] {
            let vae = tiny(t);
            let x = Tensor::from_fn(&[2, 3, 16, 16], |i| (i % 7) as f64 / 7.0);
            let post = vae.encode(&x).unwrap();
            assert_eq!(post.mu.shape(), &[2, 5]);
            let out = vae.decode(&post.mu).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn tied_mode_shares_kernels() {
        let m = tiny(WeightTying::Mirrored);
        let t = tiny(WeightTying::Tied);
        assert_eq!(m.params().len() - t.params().len(), 2);
        assert!(t.param_names().iter().all(|n| !n.starts_with("decoder.deconv") || n.ends_with("bias")));
    }

    #[test]
    fn wrong_input_size_is_reported() {
        let vae = tiny(WeightTying::Mirrored);
        let err = vae.encode(&Tensor::zeros(&[1, 3, 8, 8])).unwrap_err().to_string();
        assert!(err.contains("[3, 16, 16]"), "{err}");
        assert!(vae.decode(&Tensor::zeros(&[1, 4])).is_err());
    }
}
