use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Linear, Mode, Param, Rectifier, Reshape, Scalar,
    Sequential, Tensor,
};

const INFER_CHUNK: usize = 256;

/// Convolutional autoencoder layout. Every encoder stage is a 3x3 stride-2
/// convolution, batch norm and ReLU; the decoder mirrors it with transposed
/// convolutions back to the input shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSpec {
    pub input: ImageShape,
    pub stages: Vec<usize>,
    /// Optional linear bottleneck after the last stage (e.g. 2 for plotting).
    #[serde(default)]
    pub latent_dim: Option<usize>,
}

impl AutoencoderSpec {
    pub fn standard(input: ImageShape) -> Self {
        Self {
            input,
            stages: vec![64, 32, 16],
            latent_dim: None,
        }
    }

    /// Channels and spatial size of the last encoder stage.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        let depth = self.stages.len();
        if depth == 0 || self.stages.contains(&0) {
            return Err(Error::Config("autoencoder needs at least one non-empty stage".into()));
        }
        let f = 1usize << depth;
        let ImageShape {
            channels,
            height,
            width,
        } = self.input;
        if channels == 0 || height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            return Err(Error::Config(format!(
                "input {height}x{width} is not divisible by 2^{depth}; the decoder could not restore it"
            )));
        }
        Ok([self.stages[depth - 1], height / f, width / f])
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        let [c, h, w] = self.feature_shape()?;
        match self.latent_dim {
            Some(0) => Err(Error::Config("latent dimension must be positive".into())),
            Some(l) => Ok(l),
            None => Ok(c * h * w),
        }
    }
}

pub struct Autoencoder<T> {
    pub spec: AutoencoderSpec,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new<R: Rng + ?Sized>(spec: AutoencoderSpec, rng: &mut R) -> Result<Self> {
        let feature = spec.feature_shape()?;
        let flat = feature.iter().product::<usize>();
        let mut enc = Vec::new();
        let mut in_ch = spec.input.channels;
        for &out in &spec.stages {
            enc.push(Layer::Conv(Conv2d::new(in_ch, out, 3, 2, 1, rng)));
            enc.push(Layer::BatchNorm(BatchNorm2d::new(out)));
            enc.push(Layer::Rectifier(Rectifier::relu()));
            in_ch = out;
        }
        enc.push(Layer::Reshape(Reshape::new(&[flat])));
        let mut dec = Vec::new();
        if let Some(latent) = spec.latent_dim {
            enc.push(Layer::Linear(Linear::new(flat, latent, rng)));
            dec.push(Layer::Linear(Linear::new(latent, flat, rng)));
        }
        dec.push(Layer::Reshape(Reshape::new(&feature)));
        let mut targets: Vec<usize> = spec.stages.iter().rev().skip(1).copied().collect();
        targets.push(spec.input.channels);
        let mut in_ch = feature[0];
        for out in targets {
            dec.push(Layer::ConvTranspose(ConvTranspose2d::new(in_ch, out, 3, 2, 1, 1, rng)));
            dec.push(Layer::BatchNorm(BatchNorm2d::new(out)));
            dec.push(Layer::Rectifier(Rectifier::relu()));
            in_ch = out;
        }
        Ok(Self {
            spec,
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim().expect("spec validated at construction")
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        if images.shape().len() != 4 || images.sample_shape() != self.spec.input.dims() {
            return Err(Error::Argument(format!(
                "autoencoder expects [N, {:?}], got {:?}",
                self.spec.input.dims(),
                images.shape()
            )));
        }
        Ok(())
    }

    fn check_embeddings(&self, embeddings: &Tensor<T>) -> Result<()> {
        if embeddings.shape().len() != 2 || embeddings.shape()[1] != self.embedding_dim() {
            return Err(Error::Argument(format!(
                "expected embeddings [N, {}], got {:?}",
                self.embedding_dim(),
                embeddings.shape()
            )));
        }
        Ok(())
    }

    fn chunked(
        net: &mut Sequential<T>,
        x: &Tensor<T>,
        out_sample: &[usize],
    ) -> Result<Tensor<T>> {
        let mut shape = vec![x.batch()];
        shape.extend_from_slice(out_sample);
        let mut data = Vec::with_capacity(shape.iter().product());
        let idx: Vec<usize> = (0..x.batch()).collect();
        for chunk in idx.chunks(INFER_CHUNK) {
            let part = net.forward(&x.select(chunk), Mode::Infer)?;
            data.extend_from_slice(part.data());
        }
        Tensor::from_vec(&shape, data)
    }

    /// Embeddings `[N, d]` in inference mode.
    pub fn encode(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let d = self.embedding_dim();
        Self::chunked(&mut self.encoder, images, &[d])
    }

    /// Images `[N, C, H, W]` with values clamped to `[0, 1]`.
    pub fn decode(&mut self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_embeddings(embeddings)?;
        let dims = self.spec.input.dims();
        let out = Self::chunked(&mut self.decoder, embeddings, &dims)?;
        Ok(out.map(|v| v.max(T::zero()).min(T::one())))
    }

    /// Unclamped reconstruction with activations cached for [`Autoencoder::backward`].
    pub fn reconstruct(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let z = self.encoder.forward(images, mode)?;
        self.decoder.forward(&z, mode)
    }

    /// Accumulates parameter gradients from the gradient w.r.t. the reconstruction.
    pub fn backward(&mut self, d_rec: &Tensor<T>) -> Result<Tensor<T>> {
        let dz = self.decoder.backward(d_rec)?;
        self.encoder.backward(&dz)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
    }

    pub fn clear_cache(&mut self) {
        self.encoder.clear_cache();
        self.decoder.clear_cache();
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut v = self.encoder.named_arrays("encoder");
        v.extend(self.decoder.named_arrays("decoder"));
        v
    }

    pub fn load_arrays(&mut self, lookup: &dyn Fn(&str) -> Option<(Vec<usize>, Vec<T>)>) -> Result<()> {
        self.encoder.load_arrays("encoder", lookup)?;
        self.decoder.load_arrays("decoder", lookup)
    }

    /// Order-sensitive hash of every parameter and buffer value.
    pub fn fingerprint(&self) -> u64 {
        super::fingerprint(&self.named_arrays())
    }
}
