//! The attention MIL network.
//!
//! Instances pass through an MLP encoder (linear + ReLU blocks followed by a
//! frozen per-feature affine normalization), then one gated-attention branch
//! per class pools the embeddings into a class-specific bag representation:
//!
//! ```text
//! a_c = softmax_i( w_cᵀ (tanh(V_cᵀ h_i) ⊙ σ(U_cᵀ h_i)) )
//! r_c = Σ_i a_c[i] · h_i
//! logit_c = W_cᵀ r_c + b_c
//! ```
//!
//! A shared two-way instance head scores every embedding; during training it
//! is supervised with pseudo labels taken from the attention ranking.

mod checkpoint;
mod loss;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION,
    CHECKPOINT_MAGIC,
};
pub use loss::{bag_cross_entropy, build_total_loss, pseudo_labels, PseudoLabel, DEFAULT_PSEUDO_COUNT};

use rand::Rng;

use crate::autodiff::{softmax_rows, Graph, NodeId, ParamId, ParamStore, Parameter, Tensor};
use crate::data::InstanceBag;
use crate::error::{MilError, Result};
use crate::rng::{Purpose, RngStream, StreamId};

pub const GROUP_NORM: &str = "encoder.norm";
pub const GROUP_ATTENTION: &str = "attention";
pub const GROUP_BAG_CLASSIFIER: &str = "bag_classifier";
pub const GROUP_INSTANCE_HEAD: &str = "instance_head";

pub fn block_group(index: usize) -> String {
    format!("encoder.block{}", index + 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output width of each encoder block; the last is the embedding width.
    pub block_widths: Vec<usize>,
    pub attention_dim: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            block_widths: vec![128, 64],
            attention_dim: 32,
            n_classes: 2,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.block_widths.last().expect("validated: at least two blocks")
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_widths.len() < 2 {
            return Err(MilError::InvalidConfig("encoder needs at least two blocks".into()));
        }
        if self.input_dim == 0 || self.attention_dim == 0 || self.block_widths.contains(&0) {
            return Err(MilError::InvalidConfig("all layer widths must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(MilError::InvalidConfig("need at least two classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    v: ParamId,
    u: ParamId,
    w: ParamId,
    classifier_w: ParamId,
    classifier_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    config: ModelConfig,
    params: ParamStore,
    groups: Vec<String>,
    blocks: Vec<(ParamId, ParamId)>,
    norm_scale: ParamId,
    norm_shift: ParamId,
    branches: Vec<Branch>,
    instance_w: ParamId,
    instance_b: ParamId,
}

/// Graph nodes of one model application.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub embeddings: NodeId,
    /// `1×N` class logits.
    pub logits: NodeId,
    /// `1×N` class probabilities.
    pub probabilities: NodeId,
    /// One `1×M` attention row per class.
    pub attention: Vec<NodeId>,
    /// `M×2` instance-head logits.
    pub instance_logits: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub class_probabilities: Vec<f64>,
    /// `N×M`; row `c` is the attention of branch `c` over the instances.
    pub attention: Tensor,
    /// `M×2`.
    pub instance_logits: Tensor,
}

impl BagPrediction {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.class_probabilities)
    }

    /// Probability of class 1, the score used for binary AUC.
    pub fn positive_score(&self) -> f64 {
        self.class_probabilities[1]
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

struct Builder<'a> {
    params: ParamStore,
    groups: Vec<String>,
    rng: &'a mut RngStream,
}

impl Builder<'_> {
    /// Uniform in `±1/√fan_in`.
    fn uniform(&mut self, name: String, group: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values = (0..rows * cols).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.push(name, group, Tensor::new(rows, cols, values).expect("finite init"), true)
    }

    fn push(&mut self, name: String, group: &str, value: Tensor, trainable: bool) -> ParamId {
        self.groups.push(group.to_string());
        self.params.push(Parameter::new(name, value, trainable))
    }
}

impl MilModel {
    /// Fresh model with seeded uniform initialization. Everything is
    /// trainable except the normalization layer.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, StreamId::new(Purpose::Init));
        let mut b = Builder {
            params: ParamStore::new(),
            groups: Vec::new(),
            rng: &mut rng,
        };
        let mut blocks = Vec::new();
        let mut fan_in = config.input_dim;
        for (i, &width) in config.block_widths.iter().enumerate() {
            let group = block_group(i);
            let w = b.uniform(format!("{group}.weight"), &group, fan_in, width, fan_in);
            let bias = b.uniform(format!("{group}.bias"), &group, 1, width, fan_in);
            blocks.push((w, bias));
            fan_in = width;
        }
        let h = config.embedding_dim();
        let norm_scale = b.push(
            format!("{GROUP_NORM}.scale"),
            GROUP_NORM,
            Tensor::filled(1, h, 1.0),
            false,
        );
        let norm_shift = b.push(format!("{GROUP_NORM}.shift"), GROUP_NORM, Tensor::zeros(1, h), false);
        let l = config.attention_dim;
        let attention: Vec<_> = (0..config.n_classes)
            .map(|c| {
                (
                    b.uniform(format!("{GROUP_ATTENTION}.{c}.v"), GROUP_ATTENTION, h, l, h),
                    b.uniform(format!("{GROUP_ATTENTION}.{c}.u"), GROUP_ATTENTION, h, l, h),
                    b.uniform(format!("{GROUP_ATTENTION}.{c}.w"), GROUP_ATTENTION, l, 1, l),
                )
            })
            .collect();
        let classifiers: Vec<_> = (0..config.n_classes)
            .map(|c| {
                (
                    b.uniform(
                        format!("{GROUP_BAG_CLASSIFIER}.{c}.weight"),
                        GROUP_BAG_CLASSIFIER,
                        h,
                        1,
                        h,
                    ),
                    b.uniform(
                        format!("{GROUP_BAG_CLASSIFIER}.{c}.bias"),
                        GROUP_BAG_CLASSIFIER,
                        1,
                        1,
                        h,
                    ),
                )
            })
            .collect();
        let branches = attention
            .into_iter()
            .zip(classifiers)
            .map(|((v, u, w), (classifier_w, classifier_b))| Branch {
                v,
                u,
                w,
                classifier_w,
                classifier_b,
            })
            .collect();
        let instance_w = b.uniform(format!("{GROUP_INSTANCE_HEAD}.weight"), GROUP_INSTANCE_HEAD, h, 2, h);
        let instance_b = b.uniform(format!("{GROUP_INSTANCE_HEAD}.bias"), GROUP_INSTANCE_HEAD, 1, 2, h);
        let Builder { params, groups, .. } = b;
        Ok(MilModel {
            config,
            params,
            groups,
            blocks,
            norm_scale,
            norm_shift,
            branches,
            instance_w,
            instance_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn group_of(&self, id: ParamId) -> &str {
        &self.groups[id.0]
    }

    /// Group names in parameter order, without repeats.
    pub fn group_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.groups {
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        out
    }

    pub fn encoder_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = (0..self.blocks.len()).map(block_group).collect();
        groups.push(GROUP_NORM.to_string());
        groups
    }

    /// Sets the trainable flag of every parameter in `group`. The
    /// normalization layer can never be made trainable.
    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        if trainable && group == GROUP_NORM {
            return Err(MilError::InvalidConfig(format!("{GROUP_NORM} is always frozen")));
        }
        let mut found = false;
        for (i, g) in self.groups.iter().enumerate() {
            if g == group {
                self.params.get_mut(ParamId(i)).trainable = trainable;
                found = true;
            }
        }
        if !found {
            return Err(MilError::InvalidConfig(format!("unknown parameter group {group:?}")));
        }
        Ok(())
    }

    pub fn is_group_trainable(&self, group: &str) -> bool {
        self.groups
            .iter()
            .enumerate()
            .any(|(i, g)| g == group && self.params.get(ParamId(i)).trainable)
    }

    /// True when no encoder parameter is trainable, so embeddings are fixed.
    pub fn encoder_frozen(&self) -> bool {
        self.encoder_groups().iter().all(|g| !self.is_group_trainable(g))
    }

    /// Raw little-endian bytes of every parameter value in `group`.
    pub fn group_bytes(&self, group: &str) -> Vec<u8> {
        self.params
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| *g == group)
            .flat_map(|(p, _)| p.value.as_slice().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn build_encoder(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = x;
        for &(w, b) in &self.blocks {
            let wn = g.param(w);
            let bn = g.param(b);
            let z = g.matmul(h, wn);
            let z = g.add_row(z, bn);
            h = g.relu(z);
        }
        let scale = g.param(self.norm_scale);
        let shift = g.param(self.norm_shift);
        let scaled = g.mul_row(h, scale);
        g.add_row(scaled, shift)
    }

    /// Sets the frozen normalization to standardize the block outputs over
    /// `batches` of raw instances, the role running statistics play in a
    /// pretrained batch-norm layer. Units with no spread keep scale 1.
    pub fn calibrate_norm(&mut self, batches: &[&Tensor]) -> Result<()> {
        let h = self.config.embedding_dim();
        self.params.get_mut(self.norm_scale).value = Tensor::filled(1, h, 1.0);
        self.params.get_mut(self.norm_shift).value = Tensor::zeros(1, h);
        let mut sum = vec![0.0; h];
        let mut sum_sq = vec![0.0; h];
        let mut n = 0usize;
        for batch in batches {
            let out = self.encode(batch)?;
            for i in 0..out.rows() {
                for (j, &v) in out.row(i).iter().enumerate() {
                    sum[j] += v;
                    sum_sq[j] += v * v;
                }
            }
            n += out.rows();
        }
        if n == 0 {
            return Err(MilError::TooFewInstances("no instances to calibrate on".into()));
        }
        let mut scale = Vec::with_capacity(h);
        let mut shift = Vec::with_capacity(h);
        for j in 0..h {
            let mean = sum[j] / n as f64;
            let std = (sum_sq[j] / n as f64 - mean * mean).max(0.0).sqrt();
            let s = if std > 1e-8 { 1.0 / std } else { 1.0 };
            scale.push(s);
            shift.push(-mean * s);
        }
        self.params.get_mut(self.norm_scale).value = Tensor::new(1, h, scale)?;
        self.params.get_mut(self.norm_shift).value = Tensor::new(1, h, shift)?;
        Ok(())
    }

    /// Attention pooling and both heads over an `M×h` embedding node.
    pub fn build_head(&self, g: &mut Graph, embeddings: NodeId) -> ModelNodes {
        let mut attention = Vec::with_capacity(self.branches.len());
        let mut logits = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let v = g.param(br.v);
            let u = g.param(br.u);
            let w = g.param(br.w);
            let hv = g.matmul(embeddings, v);
            let gate_in = g.matmul(embeddings, u);
            let content = g.tanh(hv);
            let gate = g.sigmoid(gate_in);
            let gated = g.mul(content, gate);
            let scores = g.matmul(gated, w);
            let scores_row = g.transpose(scores);
            let weights = g.softmax_rows(scores_row);
            let rep = g.matmul(weights, embeddings);
            let cw = g.param(br.classifier_w);
            let cb = g.param(br.classifier_b);
            let logit = g.matmul(rep, cw);
            logits.push(g.add(logit, cb));
            attention.push(weights);
        }
        let logits = g.concat_cols(&logits);
        let probabilities = g.softmax_rows(logits);
        let iw = g.param(self.instance_w);
        let ib = g.param(self.instance_b);
        let inst = g.matmul(embeddings, iw);
        let instance_logits = g.add_row(inst, ib);
        ModelNodes {
            embeddings,
            logits,
            probabilities,
            attention,
            instance_logits,
        }
    }

    /// Full model on raw instance features bound to a fresh input.
    pub fn build(&self, g: &mut Graph) -> (NodeId, ModelNodes) {
        let x = g.input();
        let h = self.build_encoder(g, x);
        (x, self.build_head(g, h))
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.rows() == 0 {
            return Err(MilError::TooFewInstances("bag has no instances".into()));
        }
        if features.cols() != self.config.input_dim {
            return Err(MilError::shape(
                "encode",
                format!(
                    "features have {} columns, model expects {}",
                    features.cols(),
                    self.config.input_dim
                ),
            ));
        }
        Ok(())
    }

    /// Instance embeddings; row `i` depends only on instance `i`.
    pub fn encode(&self, features: &Tensor) -> Result<Tensor> {
        self.check_features(features)?;
        let mut g = Graph::new();
        let x = g.input();
        let h = self.build_encoder(&mut g, x);
        g.forward(&self.params, std::slice::from_ref(features))?;
        Ok(g.value(h)?.clone())
    }

    /// Class representations (`N×h`) and attention weights (`N×M`).
    pub fn attention_pool(&self, embeddings: &Tensor) -> Result<(Tensor, Tensor)> {
        let (g, nodes) = self.run_head(embeddings)?;
        let weights = stack_rows(&g, &nodes.attention)?;
        let reps = weights.matmul(embeddings)?;
        Ok((reps, weights))
    }

    /// Class logits from class representations; row `c` feeds head `c` only.
    pub fn bag_logits(&self, reps: &Tensor) -> Result<Vec<f64>> {
        if reps.rows() != self.branches.len() || reps.cols() != self.config.embedding_dim() {
            return Err(MilError::shape("bag_logits", format!("reps shape {:?}", reps.shape())));
        }
        self.branches
            .iter()
            .enumerate()
            .map(|(c, br)| {
                let w = &self.params.get(br.classifier_w).value;
                let b = self.params.get(br.classifier_b).value.get(0, 0);
                let dot: f64 = reps.row(c).iter().zip(w.as_slice()).map(|(x, y)| x * y).sum();
                Ok(dot + b)
            })
            .collect()
    }

    fn run_head(&self, embeddings: &Tensor) -> Result<(Graph, ModelNodes)> {
        if embeddings.rows() == 0 {
            return Err(MilError::TooFewInstances("no embeddings".into()));
        }
        if embeddings.cols() != self.config.embedding_dim() {
            return Err(MilError::shape(
                "attention_pool",
                format!("embedding width {}", embeddings.cols()),
            ));
        }
        let mut g = Graph::new();
        let h = g.input();
        let nodes = self.build_head(&mut g, h);
        g.forward(&self.params, std::slice::from_ref(embeddings))?;
        Ok((g, nodes))
    }

    /// Prediction from precomputed embeddings.
    pub fn predict_embeddings(&self, embeddings: &Tensor) -> Result<BagPrediction> {
        let (g, nodes) = self.run_head(embeddings)?;
        prediction_from(&g, &nodes)
    }

    /// Prediction over every instance of the bag.
    pub fn predict(&self, bag: &InstanceBag) -> Result<BagPrediction> {
        self.check_features(&bag.features)?;
        let mut g = Graph::new();
        let (_, nodes) = self.build(&mut g);
        g.forward(&self.params, std::slice::from_ref(&bag.features))?;
        prediction_from(&g, &nodes)
    }

    /// Copies parameter values and trainable flags from another model with
    /// the same architecture.
    pub fn load_values_from(&mut self, other: &MilModel) -> Result<()> {
        if other.config != self.config {
            return Err(MilError::InvalidConfig("architecture mismatch".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(other.params.iter()) {
            dst.value = src.value.clone();
            dst.trainable = src.trainable;
            dst.zero_grad();
        }
        Ok(())
    }
}

pub(crate) fn prediction_from(g: &Graph, nodes: &ModelNodes) -> Result<BagPrediction> {
    Ok(BagPrediction {
        class_probabilities: g.value(nodes.probabilities)?.as_slice().to_vec(),
        attention: stack_rows(g, &nodes.attention)?,
        instance_logits: g.value(nodes.instance_logits)?.clone(),
    })
}

fn stack_rows(g: &Graph, rows: &[NodeId]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut cols = 0;
    for &r in rows {
        let t = g.value(r)?;
        cols = t.cols();
        data.extend_from_slice(t.as_slice());
    }
    Tensor::new(rows.len(), cols, data)
}

/// Softmax of class logits; convenience for callers holding raw logits.
/// Finite-difference check of the full model and total loss on one random
/// bag of `bag_size` instances with features in `[-2, 2)`. Returns the
/// maximum relative error over every trainable parameter.
pub fn gradient_check(config: ModelConfig, model_seed: u64, bag_seed: u64, bag_size: usize, eps: f64) -> Result<f64> {
    if bag_size < 2 {
        return Err(MilError::TooFewInstances(format!(
            "gradient check needs at least 2 instances, got {bag_size}"
        )));
    }
    let mut model = MilModel::new(config, model_seed)?;
    let d = model.config().input_dim;
    let mut rng = RngStream::new(bag_seed, StreamId::new(Purpose::Misc));
    let x = Tensor::new(
        bag_size,
        d,
        (0..bag_size * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )?;
    let mut g = Graph::new();
    let (_, nodes) = model.build(&mut g);
    g.forward(model.params(), std::slice::from_ref(&x))?;
    let row = g.value(nodes.attention[1])?.as_slice().to_vec();
    let pseudo = pseudo_labels(&row, DEFAULT_PSEUDO_COUNT)?;
    let n_classes = model.config().n_classes;
    let loss = build_total_loss(&mut g, &nodes, 1, n_classes, bag_size, &pseudo, 0.7, 0.3)?;
    crate::autodiff::grad_check(&mut g, loss, model.params_mut(), &[x], eps)
}

pub fn class_probabilities(logits: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax_rows(&Tensor::row_vector(logits)?)?.into_vec())
}

#[cfg(test)]
mod tests;
