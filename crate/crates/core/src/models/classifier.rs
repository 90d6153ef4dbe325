use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageShape, Predictor};
use crate::error::{Error, Result};
use crate::nn::{
    softmax, BatchNorm2d, Conv2d, Layer, Linear, Mode, Param, Rectifier, Reshape, Scalar,
    Sequential, Tensor,
};

const INFER_CHUNK: usize = 256;

/// Small strided-convolution classifier: each block is a 3x3 stride-2
/// convolution, batch norm and leaky ReLU, followed by a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub input: ImageShape,
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    /// Initial head width; grows with [`Classifier::expand_head`].
    pub num_classes: usize,
    /// Block whose flattened output feeds the content loss.
    pub tap: Option<usize>,
}

impl ClassifierSpec {
    /// Three blocks (32, 64, 128) with the feature tap on the last one.
    pub fn standard(input: ImageShape, num_classes: usize) -> Self {
        Self {
            input,
            channels: vec![32, 64, 128],
            leaky_slope: 0.2,
            num_classes,
            tap: Some(2),
        }
    }

    pub fn block_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("classifier needs at least one non-empty block".into()));
        }
        let (mut h, mut w) = (self.input.height, self.input.width);
        if self.input.channels == 0 || h == 0 || w == 0 {
            return Err(Error::Config("classifier input shape is empty".into()));
        }
        let mut out = Vec::new();
        for &c in &self.channels {
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
            out.push([c, h, w]);
        }
        Ok(out)
    }
}

pub struct Classifier<T> {
    pub spec: ClassifierSpec,
    pub blocks: Vec<Sequential<T>>,
    /// `[Reshape, Linear]`
    pub head: Sequential<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, rng: &mut R) -> Result<Self> {
        let shapes = spec.block_shapes()?;
        if let Some(tap) = spec.tap {
            if tap >= spec.channels.len() {
                return Err(Error::Config(format!("feature tap {tap} past the last block")));
            }
        }
        let mut in_ch = spec.input.channels;
        let mut blocks = Vec::new();
        for &out in &spec.channels {
            blocks.push(Sequential::new(vec![
                Layer::Conv(Conv2d::new(in_ch, out, 3, 2, 1, rng)),
                Layer::BatchNorm(BatchNorm2d::new(out)),
                Layer::Rectifier(Rectifier::leaky(spec.leaky_slope)),
            ]));
            in_ch = out;
        }
        let flat = shapes.last().unwrap().iter().product();
        let head = Sequential::new(vec![
            Layer::Reshape(Reshape::new(&[flat])),
            Layer::Linear(Linear::new(flat, spec.num_classes, rng)),
        ]);
        Ok(Self { spec, blocks, head })
    }

    pub fn linear(&self) -> &Linear<T> {
        match &self.head.layers[1] {
            Layer::Linear(l) => l,
            _ => unreachable!("head layout is fixed at construction"),
        }
    }

    fn linear_mut(&mut self) -> &mut Linear<T> {
        match &mut self.head.layers[1] {
            Layer::Linear(l) => l,
            _ => unreachable!("head layout is fixed at construction"),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear().out_features
    }

    fn tap(&self) -> Result<usize> {
        self.spec
            .tap
            .ok_or_else(|| Error::Config("classifier feature tap is not set".into()))
    }

    /// Length of the flattened tap output.
    pub fn feature_len(&self) -> Result<usize> {
        let tap = self.tap()?;
        Ok(self.spec.block_shapes()?[tap].iter().product())
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        if images.shape().len() != 4 || images.sample_shape() != self.spec.input.dims() {
            return Err(Error::Argument(format!(
                "classifier expects [N, {:?}], got {:?}",
                self.spec.input.dims(),
                images.shape()
            )));
        }
        Ok(())
    }

    /// Flattened tap features `[N, F]`. In `Train`/`Eval` mode activations are
    /// cached so [`Classifier::features_backward`] can return input gradients.
    pub fn conv_features(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let tap = self.tap()?;
        self.check_images(images)?;
        let mut h = self.blocks[0].forward(images, mode)?;
        for block in &mut self.blocks[1..=tap] {
            h = block.forward(&h, mode)?;
        }
        let (n, len) = (h.batch(), h.sample_len());
        h.reshape(&[n, len])
    }

    /// Gradient w.r.t. the input images given the gradient w.r.t. the tap
    /// features. Block parameter gradients accumulate as a side effect and are
    /// cleared here, so a frozen classifier stays untouched.
    pub fn features_backward(&mut self, d_features: &Tensor<T>) -> Result<Tensor<T>> {
        let tap = self.tap()?;
        let mut shape = vec![d_features.batch()];
        shape.extend_from_slice(&self.spec.block_shapes()?[tap]);
        let mut g = d_features.clone().reshape(&shape)?;
        for block in self.blocks[..=tap].iter_mut().rev() {
            g = block.backward(&g)?;
            block.zero_grad();
        }
        Ok(g)
    }

    /// Logits `[N, classes]`.
    pub fn forward(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut h = self.blocks[0].forward(images, mode)?;
        for block in &mut self.blocks[1..] {
            h = block.forward(&h, mode)?;
        }
        self.head.forward(&h, mode)
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, d_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(d_logits)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        Ok(g)
    }

    /// Softmax scores `[N, classes]` in inference mode.
    pub fn scores(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let classes = self.num_classes();
        let mut data = Vec::with_capacity(images.batch() * classes);
        let idx: Vec<usize> = (0..images.batch()).collect();
        for chunk in idx.chunks(INFER_CHUNK) {
            let logits = self.forward(&images.select(chunk), Mode::Infer)?;
            data.extend_from_slice(softmax(&logits).data());
        }
        Tensor::from_vec(&[images.batch(), classes], data)
    }

    /// Argmax labels and the softmax scores they came from.
    pub fn classify(&mut self, images: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
        let scores = self.scores(images)?;
        Ok((argmax_rows(&scores), scores))
    }

    /// Appends head rows for new classes; existing rows are kept bit-exact.
    pub fn expand_head<R: Rng + ?Sized>(&mut self, new_class_count: usize, rng: &mut R) -> Result<()> {
        let current = self.num_classes();
        if new_class_count < current {
            return Err(Error::Argument(format!(
                "cannot shrink the head from {current} to {new_class_count} classes"
            )));
        }
        if new_class_count > current {
            self.linear_mut().grow_outputs(new_class_count - current, rng);
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.head.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        self.blocks.iter_mut().for_each(Sequential::zero_grad);
        self.head.zero_grad();
    }

    pub fn clear_cache(&mut self) {
        self.blocks.iter_mut().for_each(Sequential::clear_cache);
        self.head.clear_cache();
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Sequential::param_count).sum::<usize>() + self.head.param_count()
    }

    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.named_arrays(&format!("block{i}")));
        }
        v.extend(self.head.named_arrays("head"));
        v
    }

    /// Loads arrays written by [`Classifier::named_arrays`], growing the head
    /// first when the stored one is wider.
    pub fn load_arrays<R: Rng + ?Sized>(
        &mut self,
        lookup: &dyn Fn(&str) -> Option<(Vec<usize>, Vec<T>)>,
        rng: &mut R,
    ) -> Result<()> {
        let (shape, _) = lookup("head.1.bias").ok_or_else(|| Error::Format("missing array head.1.bias".into()))?;
        self.expand_head(shape[0], rng)?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.load_arrays(&format!("block{i}"), lookup)?;
        }
        self.head.load_arrays("head", lookup)
    }

    pub fn fingerprint(&self) -> u64 {
        super::fingerprint(&self.named_arrays())
    }
}

pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    (0..scores.batch())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl Predictor for Classifier<f32> {
    fn predict(&mut self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(self.classify(images)?.0)
    }
}
