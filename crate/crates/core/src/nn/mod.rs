//! Convolutional embedding network with exact analytic gradients.
//!
//! Architecture: `[conv3x3 + bias + ReLU + maxpool2]` blocks, an optional
//! adaptation conv block, global average pooling, a dense embedding layer and
//! an optional dense classifier head. All parameters live in one flat vector.

mod checkpoint;
mod layers;
mod norm;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use norm::{l2_normalize, softmax_normalize, EmbeddingNorm};
pub use optim::sgd_step;

use crate::error::{ensure, Error, Result};
use crate::seed::rng_from_seed;
use crate::spectro::SpectrogramImage;
use crate::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Conv block appended before global pooling for post-training on new classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationHead {
    pub channels: usize,
    /// Whether the head is trained on the adaptation support set.
    pub post_train: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_height: usize,
    pub in_width: usize,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub adaptation: Option<AdaptationHead>,
}

impl ArchConfig {
    /// Three conv blocks of 16/32/64 channels on a 128x128 input.
    pub fn standard(num_classes: Option<usize>) -> Self {
        Self {
            in_height: 128,
            in_width: 128,
            channels: vec![16, 32, 64],
            embed_dim: 64,
            num_classes,
            adaptation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_height > 0 && self.in_width > 0, "input dims must be positive");
        ensure!(self.embed_dim > 0, "embed_dim must be positive");
        ensure!(self.channels.iter().all(|&c| c > 0), "conv channel counts must be positive");
        let blocks = self.channels.len() as u32;
        ensure!(
            (self.in_height >> blocks) > 0 && (self.in_width >> blocks) > 0,
            "{}x{} input is too small for {blocks} pooling stages",
            self.in_height,
            self.in_width
        );
        if let Some(k) = self.num_classes {
            ensure!(k >= 2, "classifier head needs at least 2 classes, got {k}");
        }
        if let Some(head) = self.adaptation {
            ensure!(head.channels > 0, "adaptation head needs positive channels");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Backbone,
    Classifier,
    Adaptation,
}

/// Contiguous parameter block of one layer: weights then biases.
#[derive(Debug, Clone, Copy)]
struct Block {
    weights: usize,
    n_weights: usize,
    bias: usize,
    n_bias: usize,
    fan_in: usize,
    role: Role,
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv { cin: usize, cout: usize, h: usize, w: usize, block: Block },
    Relu { len: usize },
    MaxPool { c: usize, h: usize, w: usize },
    Gap { c: usize, plane: usize },
    Dense { n_in: usize, n_out: usize, block: Block },
}

impl Layer {
    fn out_len(&self) -> usize {
        match *self {
            Layer::Conv { cout, h, w, .. } => cout * h * w,
            Layer::Relu { len } => len,
            Layer::MaxPool { c, h, w } => c * (h / 2) * (w / 2),
            Layer::Gap { c, .. } => c,
            Layer::Dense { n_out, .. } => n_out,
        }
    }
}

#[derive(Debug, Clone)]
struct Plan {
    /// Layers up to and including the embedding dense layer.
    body: Vec<Layer>,
    classifier: Option<Layer>,
    blocks: Vec<Block>,
    n_params: usize,
}

fn build_plan(arch: &ArchConfig) -> Plan {
    // Parameter order: conv blocks, embedding dense, classifier, adaptation conv.
    // Attaching an adaptation head therefore never moves backbone parameters.
    let mut offset = 0;
    let mut alloc = |n_weights: usize, n_bias: usize, fan_in: usize, role: Role| {
        let b = Block { weights: offset, n_weights, bias: offset + n_weights, n_bias, fan_in, role };
        offset += n_weights + n_bias;
        b
    };

    let (mut c, mut h, mut w) = (1, arch.in_height, arch.in_width);
    let mut body = Vec::new();
    let mut blocks = Vec::new();
    for &cout in &arch.channels {
        let block = alloc(cout * c * 9, cout, c * 9, Role::Backbone);
        blocks.push(block);
        body.push(Layer::Conv { cin: c, cout, h, w, block });
        body.push(Layer::Relu { len: cout * h * w });
        body.push(Layer::MaxPool { c: cout, h, w });
        c = cout;
        h /= 2;
        w /= 2;
    }
    let pooled = arch.adaptation.map_or(c, |a| a.channels);
    let dense = alloc(arch.embed_dim * pooled, arch.embed_dim, pooled, Role::Backbone);
    blocks.push(dense);
    let classifier = arch.num_classes.map(|k| {
        let b = alloc(k * arch.embed_dim, k, arch.embed_dim, Role::Classifier);
        blocks.push(b);
        Layer::Dense { n_in: arch.embed_dim, n_out: k, block: b }
    });
    if let Some(head) = arch.adaptation {
        let b = alloc(head.channels * c * 9, head.channels, c * 9, Role::Adaptation);
        blocks.push(b);
        body.push(Layer::Conv { cin: c, cout: head.channels, h, w, block: b });
        body.push(Layer::Relu { len: head.channels * h * w });
        c = head.channels;
    }
    body.push(Layer::Gap { c, plane: h * w });
    body.push(Layer::Dense { n_in: c, n_out: arch.embed_dim, block: dense });
    Plan { body, classifier, blocks, n_params: offset }
}

/// Flat gradient aligned index-for-index with the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T>(pub Vec<T>);

impl<T: Scalar> GradientVector<T> {
    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Activations recorded by [`EmbeddingNetwork::forward`] for one sample.
#[derive(Debug, Clone)]
struct Trace<T> {
    /// `inputs[i]` is the input of body layer `i`; the last entry is the embedding.
    inputs: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
}

/// Output of a forward pass plus everything backward needs.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub embeddings: Vec<Vec<T>>,
    pub logits: Option<Vec<Vec<T>>>,
    traces: Vec<Trace<T>>,
    n_params: usize,
}

impl<T> Forward<T> {
    pub fn batch_size(&self) -> usize {
        self.embeddings.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNetwork<T> {
    pub arch: ArchConfig,
    pub params: Vec<T>,
    /// When set only adaptation-head parameters receive gradient.
    pub frozen_backbone: bool,
}

impl<T: Scalar> EmbeddingNetwork<T> {
    /// He-uniform weights, zero biases.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let plan = build_plan(&arch);
        let mut params = vec![T::zero(); plan.n_params];
        let mut rng = rng_from_seed(seed);
        let mut blocks = plan.blocks.clone();
        blocks.sort_by_key(|b| b.weights);
        for b in &blocks {
            fill_he_uniform(&mut rng, &mut params[b.weights..b.weights + b.n_weights], b.fan_in);
        }
        Ok(Self { arch, params, frozen_backbone: false })
    }

    /// Rebuilds a network around an existing parameter vector.
    pub fn from_params(arch: ArchConfig, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let n = build_plan(&arch).n_params;
        ensure!(params.len() == n, "architecture needs {n} parameters, got {}", params.len());
        Ok(Self { arch, params, frozen_backbone: false })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.arch.num_classes
    }

    fn plan(&self) -> Plan {
        build_plan(&self.arch)
    }

    /// Named parameter ranges in storage order: `conv{i}`, `embed`,
    /// `classifier` and `adaptation`, each split into `.weight` and `.bias`.
    pub fn param_layout(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        let mut conv = 0;
        for b in self.plan().blocks {
            let name = match b.role {
                Role::Backbone if conv < self.arch.channels.len() => {
                    conv += 1;
                    format!("conv{}", conv - 1)
                }
                Role::Backbone => "embed".to_string(),
                Role::Classifier => "classifier".to_string(),
                Role::Adaptation => "adaptation".to_string(),
            };
            out.push((format!("{name}.weight"), b.weights..b.weights + b.n_weights));
            out.push((format!("{name}.bias"), b.bias..b.bias + b.n_bias));
        }
        out
    }

    /// `true` for every bias coordinate (excluded from weight decay).
    pub fn bias_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for b in self.plan().blocks {
            mask[b.bias..b.bias + b.n_bias].fill(true);
        }
        mask
    }

    /// `true` for every coordinate outside the adaptation head.
    pub fn backbone_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        for b in self.plan().blocks.iter().filter(|b| b.role == Role::Adaptation) {
            mask[b.weights..b.bias + b.n_bias].fill(false);
        }
        mask
    }

    /// Copy of the network with a freshly initialized adaptation conv block
    /// and a frozen backbone. The head must keep the pooled channel count so
    /// the embedding layer is reused as is.
    pub fn with_adaptation_head(&self, head: AdaptationHead, seed: u64) -> Result<Self> {
        ensure!(self.arch.adaptation.is_none(), "network already has an adaptation head");
        let last = *self.arch.channels.last().unwrap_or(&1);
        ensure!(
            head.channels == last,
            "adaptation head must output {last} channels, got {}",
            head.channels
        );
        let mut arch = self.arch.clone();
        arch.adaptation = Some(head);
        let mut net = Self::init(arch, seed)?;
        let n = self.params.len();
        net.params[..n].copy_from_slice(&self.params);
        net.frozen_backbone = true;
        Ok(net)
    }

    fn check_images(&self, images: &[&SpectrogramImage]) -> Result<()> {
        for (i, img) in images.iter().enumerate() {
            ensure!(
                img.height == self.arch.in_height && img.width == self.arch.in_width,
                "image {i} is {}x{}, network expects {}x{}",
                img.height,
                img.width,
                self.arch.in_height,
                self.arch.in_width
            );
        }
        Ok(())
    }

    /// Pixels scaled to [0, 1].
    pub fn image_input(img: &SpectrogramImage) -> Vec<T> {
        let inv = T::one() / T::of(255.0);
        img.pixels.iter().map(|&p| T::of(p as f64) * inv).collect()
    }

    pub fn forward(&self, images: &[&SpectrogramImage]) -> Result<Forward<T>> {
        self.check_images(images)?;
        let inputs: Vec<Vec<T>> = images.iter().map(|img| Self::image_input(img)).collect();
        self.forward_inputs(inputs)
    }

    /// Forward pass on pre-scaled single-channel inputs of `in_height * in_width`.
    pub fn forward_inputs(&self, inputs: Vec<Vec<T>>) -> Result<Forward<T>> {
        let plan = self.plan();
        let expected = self.arch.in_height * self.arch.in_width;
        let mut embeddings = Vec::with_capacity(inputs.len());
        let mut logits = plan.classifier.map(|_| Vec::with_capacity(inputs.len()));
        let mut traces = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.into_iter().enumerate() {
            ensure!(x.len() == expected, "input {i} has {} values, expected {expected}", x.len());
            let trace = self.run_body(&plan, x);
            let emb = trace.inputs.last().expect("embedding").clone();
            if let (Some(layer), Some(out)) = (plan.classifier, logits.as_mut()) {
                out.push(self.apply(layer, &emb, &mut Vec::new()));
            }
            embeddings.push(emb);
            traces.push(trace);
        }
        if embeddings.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
        Ok(Forward { embeddings, logits, traces, n_params: self.params.len() })
    }

    /// Embeddings only, without keeping activations.
    pub fn embed(&self, images: &[&SpectrogramImage]) -> Result<Vec<Vec<T>>> {
        self.check_images(images)?;
        let plan = self.plan();
        let out = images
            .iter()
            .map(|img| {
                let mut x = Self::image_input(img);
                for layer in &plan.body {
                    x = self.apply(*layer, &x, &mut Vec::new());
                }
                x
            })
            .collect::<Vec<_>>();
        if out.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
        Ok(out)
    }

    /// Classifier logits; errors without a classifier head.
    pub fn logits(&self, images: &[&SpectrogramImage]) -> Result<Vec<Vec<T>>> {
        let layer = self
            .plan()
            .classifier
            .ok_or_else(|| Error::invalid("network has no classifier head"))?;
        let emb = self.embed(images)?;
        Ok(emb.iter().map(|e| self.apply(layer, e, &mut Vec::new())).collect())
    }

    fn run_body(&self, plan: &Plan, x: Vec<T>) -> Trace<T> {
        let mut inputs = Vec::with_capacity(plan.body.len() + 1);
        let mut argmax = Vec::new();
        let mut cur = x;
        for layer in &plan.body {
            let mut idx = Vec::new();
            let next = self.apply(*layer, &cur, &mut idx);
            if matches!(layer, Layer::MaxPool { .. }) {
                argmax.push(idx);
            }
            inputs.push(cur);
            cur = next;
        }
        inputs.push(cur);
        Trace { inputs, argmax }
    }

    fn apply(&self, layer: Layer, x: &[T], argmax: &mut Vec<u32>) -> Vec<T> {
        let mut out = vec![T::zero(); layer.out_len()];
        let p = &self.params;
        match layer {
            Layer::Conv { cin, cout, h, w, block } => layers::conv3x3_forward(
                x,
                &p[block.weights..block.weights + block.n_weights],
                &p[block.bias..block.bias + block.n_bias],
                cin,
                cout,
                h,
                w,
                &mut out,
            ),
            Layer::Relu { .. } => layers::relu_forward(x, &mut out),
            Layer::MaxPool { c, h, w } => {
                argmax.resize(out.len(), 0);
                layers::maxpool_forward(x, c, h, w, &mut out, argmax);
            }
            Layer::Gap { c, plane } => layers::gap_forward(x, c, plane, &mut out),
            Layer::Dense { n_in, block, .. } => layers::dense_forward(
                x,
                &p[block.weights..block.weights + block.n_weights],
                &p[block.bias..block.bias + block.n_bias],
                n_in,
                &mut out,
            ),
        }
        out
    }

    /// Gradient of a scalar loss given its gradient w.r.t. the embeddings
    /// and, when the network has a classifier head, w.r.t. the logits.
    pub fn backward(
        &self,
        fwd: &Forward<T>,
        d_embeddings: &[Vec<T>],
        d_logits: Option<&[Vec<T>]>,
    ) -> Result<GradientVector<T>> {
        if fwd.n_params != self.params.len() || fwd.traces.len() != fwd.embeddings.len() {
            return Err(Error::Contract("forward cache does not belong to this network".into()));
        }
        let n = fwd.batch_size();
        if d_embeddings.len() != n {
            return Err(Error::Contract(format!(
                "{} embedding gradients for a cached batch of {n}",
                d_embeddings.len()
            )));
        }
        let plan = self.plan();
        if let Some(dl) = d_logits {
            if plan.classifier.is_none() {
                return Err(Error::Contract("logit gradient given but network has no classifier".into()));
            }
            if dl.len() != n {
                return Err(Error::Contract(format!("{} logit gradients for a cached batch of {n}", dl.len())));
            }
        }
        let mut grad = GradientVector::zeros(self.params.len());
        for (s, trace) in fwd.traces.iter().enumerate() {
            ensure!(
                d_embeddings[s].len() == self.arch.embed_dim,
                "embedding gradient {s} has wrong length"
            );
            let mut g = d_embeddings[s].clone();
            if let (Some(Layer::Dense { n_in, block, .. }), Some(dl)) = (plan.classifier, d_logits) {
                let emb = trace.inputs.last().expect("embedding");
                let mut d_emb = vec![T::zero(); n_in];
                let (dw, db) = split_block(&mut grad.0, block);
                layers::dense_backward(
                    emb,
                    &self.params[block.weights..block.weights + block.n_weights],
                    &dl[s],
                    n_in,
                    dw,
                    db,
                    &mut d_emb,
                );
                for (a, b) in g.iter_mut().zip(&d_emb) {
                    *a += *b;
                }
            }
            self.backward_body(&plan, trace, g, &mut grad.0);
        }
        if self.frozen_backbone {
            for (gi, frozen) in grad.0.iter_mut().zip(self.backbone_mask()) {
                if frozen {
                    *gi = T::zero();
                }
            }
        }
        Ok(grad)
    }

    fn backward_body(&self, plan: &Plan, trace: &Trace<T>, d_out: Vec<T>, grad: &mut [T]) {
        let mut g = d_out;
        let mut pool = trace.argmax.len();
        let p = &self.params;
        for (i, layer) in plan.body.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let mut d_in = vec![T::zero(); input.len()];
            match *layer {
                Layer::Conv { cin, cout, h, w, block } => {
                    let needs_input_grad = i > 0;
                    let (dw, db) = split_block(grad, block);
                    layers::conv3x3_backward(
                        input,
                        &p[block.weights..block.weights + block.n_weights],
                        &g,
                        cin,
                        cout,
                        h,
                        w,
                        dw,
                        db,
                        needs_input_grad.then_some(&mut d_in[..]),
                    );
                }
                Layer::Relu { .. } => layers::relu_backward(input, &g, &mut d_in),
                Layer::MaxPool { .. } => {
                    pool -= 1;
                    layers::maxpool_backward(&g, &trace.argmax[pool], &mut d_in);
                }
                Layer::Gap { c, plane } => layers::gap_backward(&g, c, plane, &mut d_in),
                Layer::Dense { n_in, block, .. } => {
                    let (dw, db) = split_block(grad, block);
                    layers::dense_backward(
                        input,
                        &p[block.weights..block.weights + block.n_weights],
                        &g,
                        n_in,
                        dw,
                        db,
                        &mut d_in,
                    );
                }
            }
            g = d_in;
        }
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Scalar>(&self) -> EmbeddingNetwork<U> {
        EmbeddingNetwork {
            arch: self.arch.clone(),
            params: self.params.iter().map(|&v| U::of(v.f64())).collect(),
            frozen_backbone: self.frozen_backbone,
        }
    }
}

fn split_block<T>(grad: &mut [T], block: Block) -> (&mut [T], &mut [T]) {
    let (w, rest) = grad[block.weights..block.bias + block.n_bias].split_at_mut(block.n_weights);
    (w, rest)
}

fn fill_he_uniform<T: Scalar, R: Rng>(rng: &mut R, out: &mut [T], fan_in: usize) {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    for v in out {
        *v = T::of(rng.random_range(-limit..limit));
    }
}
