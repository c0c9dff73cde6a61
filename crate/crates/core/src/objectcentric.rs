//! Object scoring, weighting, sparsification, and aggregation: turns a set
//! of detected boxes plus image features into a fixed-length policy input.
//!
//! Weights are a softmax over all detections; pruning keeps the top k
//! without renormalizing, and gradients reach discarded objects only through
//! the shared softmax denominator.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::diffcore::{DiffError, Graph, NodeId, ParamSet, Tensor};
use crate::perception::{
    self, BackboneConfig, BoundingBox, ImageTensor,
};

/// The representation taxonomy: how objects are counted, selected, and
/// aggregated into the policy input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    GlobalOnly,
    PixelAttention,
    DenseSum,
    SparseSum,
    SparseConcat,
    HeuristicSparseSum,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::GlobalOnly,
        Variant::PixelAttention,
        Variant::DenseSum,
        Variant::SparseSum,
        Variant::SparseConcat,
        Variant::HeuristicSparseSum,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Variant::GlobalOnly => "global_only",
            Variant::PixelAttention => "pixel_attention",
            Variant::DenseSum => "dense_sum",
            Variant::SparseSum => "sparse_sum",
            Variant::SparseConcat => "sparse_concat",
            Variant::HeuristicSparseSum => "heuristic_sparse_sum",
        }
    }

    pub fn from_id(id: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.id() == id)
    }

    pub fn uses_objects(&self) -> bool {
        !matches!(self, Variant::GlobalOnly | Variant::PixelAttention)
    }

    pub fn uses_selector(&self) -> bool {
        matches!(
            self,
            Variant::DenseSum | Variant::SparseSum | Variant::SparseConcat
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepresentationConfig {
    pub variant: Variant,
    /// Objects kept by the sparse variants.
    pub k: usize,
    /// RoI pooling grid; object feature length is depth * bins^2.
    pub bins: usize,
    /// Whether the learned selector sees [f_i || G] or f_i alone.
    pub selector_uses_global: bool,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SparseSum,
            k: 5,
            bins: 2,
            selector_uses_global: true,
        }
    }
}

impl RepresentationConfig {
    pub fn object_feature_len(&self, backbone: &BackboneConfig) -> usize {
        backbone.feature_depth() * self.bins * self.bins
    }

    pub fn selector_input_len(&self, backbone: &BackboneConfig) -> usize {
        let d_o = self.object_feature_len(backbone);
        if self.selector_uses_global {
            d_o + backbone.feature_depth()
        } else {
            d_o
        }
    }

    /// Length of the final policy input; a pure function of the config.
    pub fn representation_len(&self, backbone: &BackboneConfig) -> usize {
        let d = backbone.feature_depth();
        let d_o = self.object_feature_len(backbone);
        match self.variant {
            Variant::GlobalOnly | Variant::PixelAttention => d,
            Variant::DenseSum | Variant::SparseSum | Variant::HeuristicSparseSum => d + d_o,
            Variant::SparseConcat => d + self.k * d_o,
        }
    }
}

/// One detection flowing through the pipeline.
#[derive(Debug, Clone)]
pub struct ObjectEntry {
    /// Original detection index; the tie-break and canonical-sum order.
    pub index: usize,
    pub bbox: BoundingBox,
    pub feature: NodeId,
    /// Scalar softmax weight node (couples to all raw scores).
    pub weight: NodeId,
    pub weight_value: f64,
    /// Weighted feature w * f.
    pub weighted: NodeId,
    pub degenerate: bool,
}

/// Detections with their score and weight vectors.
#[derive(Debug, Clone)]
pub struct ObjectSet {
    pub entries: Vec<ObjectEntry>,
    pub score_vec: Option<NodeId>,
    pub weight_vec: Option<NodeId>,
}

/// Per-frame bookkeeping for visualization and logs.
#[derive(Debug, Clone, Default)]
pub struct ObjectTrace {
    /// Clipped detections, in original order.
    pub boxes: Vec<BoundingBox>,
    /// Softmax weight per detection, aligned with `boxes`.
    pub weights: Vec<f64>,
    /// Detection indices kept after pruning, heaviest first.
    pub kept: Vec<usize>,
    /// Pixel-attention mass (row-major) when that variant ran.
    pub attention: Option<(Vec<f64>, usize, usize)>,
    /// Detections whose box collapsed to zero feature-map area.
    pub degenerate: Vec<usize>,
}

/// Selector parameters: a linear map from the selector input to one scalar.
pub fn init_selector_params<R: Rng>(input_len: usize, rng: &mut R, params: &mut ParamSet) {
    let bound = 1.0 / (input_len as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let w: Vec<f64> = (0..input_len).map(|_| dist.sample(rng)).collect();
    params.insert("selector.w", Tensor::vector(w));
    params.insert("selector.b", Tensor::vector(vec![dist.sample(rng)]));
}

struct ScoredInputs {
    features: Vec<(usize, BoundingBox, NodeId, bool)>,
}

/// Learned relevance score per object: selector([f_i || G]) or selector(f_i).
pub fn score_objects(
    g: &mut Graph,
    inputs: &[(NodeId, NodeId)], // (object feature, global feature) pairs
    selector_w: NodeId,
    selector_b: NodeId,
    use_global: bool,
) -> Result<Vec<NodeId>, DiffError> {
    let n = g.value(selector_w).len();
    let mut scores = Vec::with_capacity(inputs.len());
    for &(feature, global) in inputs {
        let sel_in = if use_global {
            g.concat(&[feature, global])?
        } else {
            feature
        };
        let w_row = g.reshape(selector_w, &[1, n])?;
        let dot = g.matvec(w_row, sel_in)?;
        let score = g.add(dot, selector_b)?;
        scores.push(score);
    }
    Ok(scores)
}

/// Box-size heuristic scores: pixel area scaled to [0, 1] by image area.
pub fn heuristic_scores(boxes: &[BoundingBox], image_w: usize, image_h: usize) -> Vec<f64> {
    let image_area = (image_w * image_h) as f64;
    boxes.iter().map(|b| b.area() / image_area).collect()
}

/// Softmax over all detected objects (before any pruning).
pub fn normalize(g: &mut Graph, score_vec: NodeId) -> Result<NodeId, DiffError> {
    g.softmax(score_vec)
}

/// Scales each feature by its weight; original features stay addressable on
/// the entries for visualization.
pub fn weight_features(g: &mut Graph, set: &mut ObjectSet) -> Result<(), DiffError> {
    for entry in &mut set.entries {
        entry.weighted = g.scale(entry.weight, entry.feature)?;
    }
    Ok(())
}

/// Keeps the k heaviest entries, sorted by descending weight; ties go to the
/// lower original detection index.
pub fn top_k(entries: &[ObjectEntry], k: usize) -> Vec<ObjectEntry> {
    let mut sorted: Vec<ObjectEntry> = entries.to_vec();
    sorted.sort_by(|a, b| {
        b.weight_value
            .partial_cmp(&a.weight_value)
            .expect("weights are finite")
            .then(a.index.cmp(&b.index))
    });
    sorted.truncate(k);
    sorted
}

/// Elementwise sum of weighted features. Accumulation runs in original
/// detection order regardless of the list order handed in, so the sum is
/// exactly permutation-invariant and SparseSum(k >= N) matches DenseSum
/// bitwise.
pub fn aggregate_sum(
    g: &mut Graph,
    entries: &[ObjectEntry],
    feature_len: usize,
) -> Result<NodeId, DiffError> {
    if entries.is_empty() {
        return g.constant(Tensor::zeros(&[feature_len]));
    }
    let mut order: Vec<&ObjectEntry> = entries.iter().collect();
    order.sort_by_key(|e| e.index);
    let mut acc = order[0].weighted;
    for e in &order[1..] {
        acc = g.add(acc, e.weighted)?;
    }
    Ok(acc)
}

/// Weighted features concatenated heaviest-first, zero-padded to k slots.
pub fn aggregate_concat(
    g: &mut Graph,
    entries_desc: &[ObjectEntry],
    k: usize,
    feature_len: usize,
) -> Result<NodeId, DiffError> {
    let mut parts: Vec<NodeId> = entries_desc.iter().take(k).map(|e| e.weighted).collect();
    let missing = k - parts.len();
    if missing > 0 {
        let pad = g.constant(Tensor::zeros(&[missing * feature_len]))?;
        parts.push(pad);
    }
    g.concat(&parts)
}

/// Runs the full pipeline for one frame and returns the policy input vector
/// plus the trace used by visualization.
pub fn build_representation(
    g: &mut Graph,
    image: &ImageTensor,
    boxes: &[BoundingBox],
    param_ids: &BTreeMap<String, NodeId>,
    rep: &RepresentationConfig,
    backbone: &BackboneConfig,
) -> Result<(NodeId, ObjectTrace), DiffError> {
    let image_node = g.input("image", image.tensor().clone())?;
    let map = perception::backbone_forward(g, image_node, param_ids)?;
    let mut trace = ObjectTrace::default();

    match rep.variant {
        Variant::GlobalOnly => {
            let global = perception::global_pool(g, map)?;
            Ok((global, trace))
        }
        Variant::PixelAttention => {
            let attn_w = named(param_ids, "attn.w")?;
            let (pooled, mass) = perception::pixel_attention_pool(g, map, attn_w)?;
            let (h, w) = backbone.feature_dims(image.height(), image.width());
            trace.attention = Some((g.value(mass).data().to_vec(), h, w));
            Ok((pooled, trace))
        }
        _ => {
            let global = perception::global_pool(g, map)?;
            let d_o = rep.object_feature_len(backbone);
            let scored = pool_objects(g, map, image, boxes, rep, backbone)?;
            trace.boxes = scored.features.iter().map(|f| f.1).collect();
            trace.degenerate = scored
                .features
                .iter()
                .filter(|f| f.3)
                .map(|f| f.0)
                .collect();

            let object_part = if scored.features.is_empty() {
                let len = match rep.variant {
                    Variant::SparseConcat => rep.k * d_o,
                    _ => d_o,
                };
                g.constant(Tensor::zeros(&[len]))?
            } else {
                let raw_scores: Vec<NodeId> = if rep.variant == Variant::HeuristicSparseSum {
                    let boxes_only: Vec<BoundingBox> =
                        scored.features.iter().map(|f| f.1).collect();
                    let values = heuristic_scores(&boxes_only, image.width(), image.height());
                    let vec = g.constant(Tensor::vector(values))?;
                    (0..scored.features.len())
                        .map(|i| g.gather(vec, i))
                        .collect::<Result<_, _>>()?
                } else {
                    let sel_w = named(param_ids, "selector.w")?;
                    let sel_b = named(param_ids, "selector.b")?;
                    let pairs: Vec<(NodeId, NodeId)> = scored
                        .features
                        .iter()
                        .map(|f| (f.2, global))
                        .collect();
                    score_objects(g, &pairs, sel_w, sel_b, rep.selector_uses_global)?
                };
                let score_vec = g.concat(&raw_scores)?;
                let weight_vec = normalize(g, score_vec)?;
                let weight_values = g.value(weight_vec).data().to_vec();
                trace.weights = weight_values.clone();

                let mut set = ObjectSet {
                    entries: Vec::new(),
                    score_vec: Some(score_vec),
                    weight_vec: Some(weight_vec),
                };
                for (slot, &(index, bbox, feature, degenerate)) in
                    scored.features.iter().enumerate()
                {
                    let weight = g.gather(weight_vec, slot)?;
                    set.entries.push(ObjectEntry {
                        index,
                        bbox,
                        feature,
                        weight,
                        weight_value: weight_values[slot],
                        weighted: weight, // replaced by weight_features below
                        degenerate,
                    });
                }
                weight_features(g, &mut set)?;

                match rep.variant {
                    Variant::DenseSum => aggregate_sum(g, &set.entries, d_o)?,
                    Variant::SparseSum | Variant::HeuristicSparseSum => {
                        let kept = top_k(&set.entries, rep.k);
                        trace.kept = kept.iter().map(|e| e.index).collect();
                        aggregate_sum(g, &kept, d_o)?
                    }
                    Variant::SparseConcat => {
                        let kept = top_k(&set.entries, rep.k);
                        trace.kept = kept.iter().map(|e| e.index).collect();
                        aggregate_concat(g, &kept, rep.k, d_o)?
                    }
                    _ => unreachable!(),
                }
            };
            let rep_vec = g.concat(&[global, object_part])?;
            Ok((rep_vec, trace))
        }
    }
}

fn pool_objects(
    g: &mut Graph,
    map: NodeId,
    image: &ImageTensor,
    boxes: &[BoundingBox],
    rep: &RepresentationConfig,
    backbone: &BackboneConfig,
) -> Result<ScoredInputs, DiffError> {
    let mut features = Vec::new();
    let mut index = 0usize;
    for bbox in boxes {
        let Some(clipped) = bbox.clipped(image.width(), image.height()) else {
            continue; // fully outside the image
        };
        let pooled =
            perception::roi_pool(g, map, &clipped, rep.bins, backbone.total_stride())?;
        features.push((index, clipped, pooled.node, pooled.degenerate));
        index += 1;
    }
    Ok(ScoredInputs { features })
}

fn named(ids: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId, DiffError> {
    ids.get(name)
        .copied()
        .ok_or_else(|| DiffError::UnknownParam {
            name: name.to_string(),
        })
}
