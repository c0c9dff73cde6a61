//! Policy heads, the behavioral-cloning training loop, and offline
//! perplexity evaluation.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffcore::{
    AdamConfig, AdamState, DiffError, Graph, NodeId, ParamSet, Tensor,
};
use crate::objectcentric::{self, ObjectTrace, RepresentationConfig, Variant};
use crate::perception::{self, BackboneConfig, BoundingBox, ImageTensor};
use crate::seeding;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("config/params mismatch: {0}")]
    ConfigMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes}-way head")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Which classification head the final linear layer feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// 9-way driving action.
    Action9,
    /// 900-way joint future speed/angular-velocity bin.
    Offline900,
}

impl Head {
    pub fn class_count(&self) -> usize {
        match self {
            Head::Action9 => 9,
            Head::Offline900 => 900,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Head::Action9 => "action9",
            Head::Offline900 => "offline900",
        }
    }

    pub fn from_id(id: &str) -> Option<Head> {
        match id {
            "action9" => Some(Head::Action9),
            "offline900" => Some(Head::Offline900),
            _ => None,
        }
    }
}

/// Everything needed to build and run one policy network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    /// Input image dims (C, H, W).
    pub image: (usize, usize, usize),
    pub backbone: BackboneConfig,
    pub rep: RepresentationConfig,
    pub head: Head,
}

impl PolicyConfig {
    pub fn new(rep: RepresentationConfig, head: Head) -> Self {
        Self {
            image: (3, 96, 96),
            backbone: BackboneConfig::default(),
            rep,
            head,
        }
    }

    pub fn class_count(&self) -> usize {
        self.head.class_count()
    }

    pub fn representation_len(&self) -> usize {
        self.rep.representation_len(&self.backbone)
    }

    /// Parameter names and shapes this config requires, in name order.
    pub fn expected_params(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut ic = self.backbone.in_channels;
        for (i, &oc) in self.backbone.widths.iter().enumerate() {
            out.push((
                format!("backbone.block{i}.w"),
                vec![oc, ic, BackboneConfig::KERNEL, BackboneConfig::KERNEL],
            ));
            out.push((format!("backbone.block{i}.b"), vec![oc]));
            ic = oc;
        }
        if self.rep.variant == Variant::PixelAttention {
            out.push(("attn.w".to_string(), vec![self.backbone.feature_depth()]));
        }
        if self.rep.variant.uses_selector() {
            out.push((
                "selector.w".to_string(),
                vec![self.rep.selector_input_len(&self.backbone)],
            ));
            out.push(("selector.b".to_string(), vec![1]));
        }
        out.push((
            "head.w".to_string(),
            vec![self.class_count(), self.representation_len()],
        ));
        out.push(("head.b".to_string(), vec![self.class_count()]));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn validate_params(&self, params: &ParamSet) -> Result<(), PolicyError> {
        let expected = self.expected_params();
        for (name, shape) in &expected {
            match params.get(name) {
                None => {
                    return Err(PolicyError::ConfigMismatch(format!(
                        "missing parameter {name}"
                    )))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(PolicyError::ConfigMismatch(format!(
                        "parameter {name} has shape {:?}, config requires {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != expected.len() {
            let expected_names: Vec<&String> = expected.iter().map(|(n, _)| n).collect();
            let extra: Vec<&String> = params
                .names()
                .filter(|n| !expected_names.contains(n))
                .collect();
            return Err(PolicyError::ConfigMismatch(format!(
                "unexpected parameters: {extra:?}"
            )));
        }
        Ok(())
    }

    /// Fresh parameters, uniform +-1/sqrt(fan_in) per layer, seeded.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = seeding::rng_for(seed, 0x706172616d); // "param"
        let mut params = ParamSet::new();
        self.backbone.init_params(&mut rng, &mut params);
        if self.rep.variant == Variant::PixelAttention {
            perception::init_attention_params(
                self.backbone.feature_depth(),
                &mut rng,
                &mut params,
            );
        }
        if self.rep.variant.uses_selector() {
            objectcentric::init_selector_params(
                self.rep.selector_input_len(&self.backbone),
                &mut rng,
                &mut params,
            );
        }
        let rep_len = self.representation_len();
        let classes = self.class_count();
        let bound = 1.0 / (rep_len as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w: Vec<f64> = (0..classes * rep_len).map(|_| dist.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..classes).map(|_| dist.sample(&mut rng)).collect();
        params.insert(
            "head.w",
            Tensor::new(vec![classes, rep_len], w).expect("init tensors are valid"),
        );
        params.insert("head.b", Tensor::vector(b));
        params
    }
}

/// Logits node plus the per-frame object trace.
pub struct ForwardPass {
    pub logits: NodeId,
    pub trace: ObjectTrace,
}

/// Builds the full network for one frame on an existing graph with params
/// already bound.
pub fn forward(
    g: &mut Graph,
    cfg: &PolicyConfig,
    param_ids: &std::collections::BTreeMap<String, NodeId>,
    image: &ImageTensor,
    boxes: &[BoundingBox],
) -> Result<ForwardPass, PolicyError> {
    if (image.channels(), image.height(), image.width()) != cfg.image {
        return Err(PolicyError::ConfigMismatch(format!(
            "image dims ({}, {}, {}) do not match config {:?}",
            image.channels(),
            image.height(),
            image.width(),
            cfg.image
        )));
    }
    let (rep, trace) = objectcentric::build_representation(
        g,
        image,
        boxes,
        param_ids,
        &cfg.rep,
        &cfg.backbone,
    )?;
    let head_w = param_ids
        .get("head.w")
        .copied()
        .ok_or_else(|| PolicyError::ConfigMismatch("missing parameter head.w".into()))?;
    let head_b = param_ids
        .get("head.b")
        .copied()
        .ok_or_else(|| PolicyError::ConfigMismatch("missing parameter head.b".into()))?;
    let projected = g.matvec(head_w, rep)?;
    let logits = g.add(projected, head_b)?;
    Ok(ForwardPass { logits, trace })
}

/// Pure single-frame inference: logits plus trace.
pub fn predict(
    cfg: &PolicyConfig,
    params: &ParamSet,
    image: &ImageTensor,
    boxes: &[BoundingBox],
) -> Result<(Tensor, ObjectTrace), PolicyError> {
    cfg.validate_params(params)?;
    let mut g = Graph::new();
    let ids = params.bind(&mut g)?;
    let pass = forward(&mut g, cfg, &ids, image, boxes)?;
    Ok((g.value(pass.logits).clone(), pass.trace))
}

/// Cross-entropy of softmax(logits) at the integer label.
pub fn bc_loss(g: &mut Graph, logits: NodeId, label: usize) -> Result<NodeId, PolicyError> {
    Ok(g.cross_entropy(logits, label)?)
}

/// Scalar loss for already-computed logits, without a graph.
pub fn bc_loss_value(logits: &Tensor, label: usize) -> Result<f64, PolicyError> {
    let mut g = Graph::new();
    let node = g.input("logits", logits.clone())?;
    let loss = g.cross_entropy(node, label)?;
    Ok(g.value(loss).item())
}

/// Argmax with ties to the lowest index.
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after any epoch whose mean loss drops below this.
    pub stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 3,
            seed: 0,
            stop_loss: None,
        }
    }
}

/// One supervised example.
#[derive(Debug, Clone)]
pub struct TrainFrame {
    pub image: ImageTensor,
    pub boxes: Vec<BoundingBox>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ParamSet,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Behavioral cloning with Adam. Deterministic given the seed: epoch
/// shuffles derive from it, and batch gradients are reduced in sample order
/// regardless of worker scheduling.
pub fn train(
    cfg: &PolicyConfig,
    frames: &[TrainFrame],
    tc: &TrainConfig,
) -> Result<TrainResult, PolicyError> {
    if frames.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let classes = cfg.class_count();
    for f in frames {
        if f.label >= classes {
            return Err(PolicyError::LabelOutOfRange {
                label: f.label,
                classes,
            });
        }
    }
    let mut params = cfg.init_params(tc.seed);
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: tc.learning_rate,
        weight_decay: tc.weight_decay,
        ..AdamConfig::default()
    });
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut indices: Vec<usize> = (0..frames.len()).collect();
    for epoch in 0..tc.epochs {
        let mut rng = seeding::rng_for(tc.seed, 0x65706f63 + epoch as u64); // "epoc"
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in indices.chunks(tc.batch_size.max(1)) {
            let results: Vec<Result<(f64, std::collections::BTreeMap<String, Tensor>), PolicyError>> =
                batch
                    .par_iter()
                    .map(|&i| {
                        let frame = &frames[i];
                        let mut g = Graph::new();
                        let ids = params.bind(&mut g)?;
                        let pass = forward(&mut g, cfg, &ids, &frame.image, &frame.boxes)?;
                        let loss = g.cross_entropy(pass.logits, frame.label)?;
                        g.backward(loss)?;
                        Ok((g.value(loss).item(), g.param_grads()))
                    })
                    .collect();
            let mut batch_grads: std::collections::BTreeMap<String, Tensor> =
                std::collections::BTreeMap::new();
            let mut count = 0usize;
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                count += 1;
                for (name, grad) in grads {
                    match batch_grads.get_mut(&name) {
                        None => {
                            batch_grads.insert(name, grad);
                        }
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            let inv = 1.0 / count as f64;
            for (_, grad) in batch_grads.iter_mut() {
                for v in grad.data_mut() {
                    *v *= inv;
                }
            }
            adam.step(&mut params, &batch_grads)?;
        }
        let mean = loss_sum / frames.len() as f64;
        epoch_losses.push(mean);
        if let Some(stop) = tc.stop_loss {
            if mean < stop {
                break;
            }
        }
    }
    Ok(TrainResult {
        params,
        epoch_losses,
    })
}

/// Mean cross-entropy over labeled frames ("perplexity" is reported as the
/// mean softmax loss directly, not its exponential).
pub fn evaluate_perplexity(
    cfg: &PolicyConfig,
    params: &ParamSet,
    frames: &[TrainFrame],
) -> Result<f64, PolicyError> {
    if frames.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    cfg.validate_params(params)?;
    let losses: Vec<Result<f64, PolicyError>> = frames
        .par_iter()
        .map(|frame| {
            if frame.label >= cfg.class_count() {
                return Err(PolicyError::LabelOutOfRange {
                    label: frame.label,
                    classes: cfg.class_count(),
                });
            }
            let mut g = Graph::new();
            let ids = params.bind(&mut g)?;
            let pass = forward(&mut g, cfg, &ids, &frame.image, &frame.boxes)?;
            let loss = g.cross_entropy(pass.logits, frame.label)?;
            Ok(g.value(loss).item())
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / frames.len() as f64)
}
