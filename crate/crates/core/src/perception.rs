//! Image features: the shared convolutional backbone, global pooling,
//! RoI pooling for detected boxes, and the pixel-attention alternative.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::diffcore::{CellWindow, DiffError, Graph, NodeId, ParamSet, Tensor};

/// Rasterized observation, [channels, height, width], values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self, DiffError> {
        if tensor.shape().len() != 3 {
            return Err(DiffError::InvalidTensor(format!(
                "image must be [C,H,W], got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(DiffError::InvalidTensor(
                "image values must lie in [0, 1]".to_string(),
            ));
        }
        Ok(Self { tensor })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[channels, height, width]),
        }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn pixel(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.tensor.data()[(channel * self.height() + row) * self.width() + col]
    }

    pub fn set_pixel(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        let (h, w) = (self.height(), self.width());
        self.tensor.data_mut()[(channel * h + row) * w + col] = value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxClass {
    Vehicle,
    Pedestrian,
}

/// Axis-aligned detection in image-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub class: BoxClass,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Clips to image bounds; `None` if nothing with positive area remains.
    pub fn clipped(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let x_min = self.x_min.max(0.0);
        let y_min = self.y_min.max(0.0);
        let x_max = self.x_max.min(width as f64);
        let y_max = self.y_max.min(height as f64);
        if x_min < x_max && y_min < y_max {
            Some(BoundingBox {
                class: self.class,
                x_min,
                y_min,
                x_max,
                y_max,
            })
        } else {
            None
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }
}

/// Four stride-2 conv blocks; the desk-scale stand-in for a deep pretrained
/// backbone, trained from scratch as part of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [16, 32, 64, 64],
        }
    }
}

impl BackboneConfig {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    /// Output feature depth D.
    pub fn feature_depth(&self) -> usize {
        self.widths[3]
    }

    /// Product of the per-block strides.
    pub fn total_stride(&self) -> usize {
        Self::STRIDE.pow(4)
    }

    /// Spatial dims after the four blocks (each block computes ceil(n/2)).
    pub fn feature_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let mut h = height;
        let mut w = width;
        for _ in 0..4 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..4)
            .flat_map(|i| [format!("backbone.block{i}.w"), format!("backbone.block{i}.b")])
            .collect()
    }

    /// Fresh parameters, uniform in +-1/sqrt(fan_in) per layer.
    pub fn init_params<R: Rng>(&self, rng: &mut R, params: &mut ParamSet) {
        let mut ic = self.in_channels;
        for (i, &oc) in self.widths.iter().enumerate() {
            let fan_in = ic * Self::KERNEL * Self::KERNEL;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w: Vec<f64> = (0..oc * fan_in).map(|_| dist.sample(rng)).collect();
            let b: Vec<f64> = (0..oc).map(|_| dist.sample(rng)).collect();
            params.insert(
                format!("backbone.block{i}.w"),
                Tensor::new(vec![oc, ic, Self::KERNEL, Self::KERNEL], w)
                    .expect("init tensors are valid"),
            );
            params.insert(format!("backbone.block{i}.b"), Tensor::vector(b));
            ic = oc;
        }
    }
}

fn lookup(ids: &BTreeMap<String, NodeId>, name: &str) -> Result<NodeId, DiffError> {
    ids.get(name)
        .copied()
        .ok_or_else(|| DiffError::UnknownParam {
            name: name.to_string(),
        })
}

/// Runs the backbone over a bound image node. `param_ids` must contain the
/// `backbone.block{i}.{w,b}` leaves.
pub fn backbone_forward(
    g: &mut Graph,
    image: NodeId,
    param_ids: &BTreeMap<String, NodeId>,
) -> Result<NodeId, DiffError> {
    let mut x = image;
    for i in 0..4 {
        let w = lookup(param_ids, &format!("backbone.block{i}.w"))?;
        let b = lookup(param_ids, &format!("backbone.block{i}.b"))?;
        let conv = g.conv2d(x, w, b, BackboneConfig::STRIDE, BackboneConfig::PAD)?;
        x = g.relu(conv)?;
    }
    Ok(x)
}

/// Per-channel spatial mean of a feature map.
pub fn global_pool(g: &mut Graph, map: NodeId) -> Result<NodeId, DiffError> {
    g.global_avg_pool(map)
}

#[derive(Debug, Clone, Copy)]
pub struct RoiPoolOut {
    pub node: NodeId,
    /// True when the box collapsed to zero feature-map area and was expanded
    /// to its nearest cell.
    pub degenerate: bool,
}

/// Resolves an image-pixel box to a feature-cell window: floor the start,
/// ceil the end, clip, and widen to at least `bins` cells per axis.
pub fn resolve_window(
    bbox: &BoundingBox,
    total_stride: usize,
    map_h: usize,
    map_w: usize,
    bins: usize,
) -> (CellWindow, bool) {
    let s = total_stride as f64;
    let project = |lo: f64, hi: f64, cells: usize| -> (usize, usize, bool) {
        let mut a = (lo / s).floor() as isize;
        let mut b = (hi / s).ceil() as isize;
        a = a.max(0);
        b = b.min(cells as isize);
        let degenerate = a >= b;
        if degenerate {
            let mid = ((lo + hi) / (2.0 * s)).floor() as isize;
            let c = mid.clamp(0, cells as isize - 1);
            a = c;
            b = c + 1;
        }
        let (mut a, mut b) = (a as usize, b as usize);
        while b - a < bins {
            if b < cells {
                b += 1;
            } else if a > 0 {
                a -= 1;
            } else {
                break;
            }
        }
        (a, b, degenerate)
    };
    let (x0, x1, dx) = project(bbox.x_min, bbox.x_max, map_w);
    let (y0, y1, dy) = project(bbox.y_min, bbox.y_max, map_h);
    (CellWindow { x0, x1, y0, y1 }, dx || dy)
}

/// Binned max pooling of the map cells covered by a box, flattened
/// channel-major to [D * bins * bins].
pub fn roi_pool(
    g: &mut Graph,
    map: NodeId,
    bbox: &BoundingBox,
    bins: usize,
    total_stride: usize,
) -> Result<RoiPoolOut, DiffError> {
    let shape = g.value(map).shape().to_vec();
    let (map_h, map_w) = (shape[1], shape[2]);
    let (window, degenerate) = resolve_window(bbox, total_stride, map_h, map_w, bins);
    let node = g.roi_pool_cells(map, window, bins)?;
    Ok(RoiPoolOut { node, degenerate })
}

/// Spatial softmax attention over feature cells. Returns the pooled [D]
/// vector and the [H'*W'] attention mass (sums to 1) for visualization.
pub fn pixel_attention_pool(
    g: &mut Graph,
    map: NodeId,
    attn_w: NodeId,
) -> Result<(NodeId, NodeId), DiffError> {
    let shape = g.value(map).shape().to_vec();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let map2d = g.reshape(map, &[d, h * w])?;
    let w_row = g.reshape(attn_w, &[1, d])?;
    let logits2d = g.matmul(w_row, map2d)?;
    let logits = g.reshape(logits2d, &[h * w])?;
    let mass = g.softmax(logits)?;
    let pooled = g.matvec(map2d, mass)?;
    Ok((pooled, mass))
}

/// Attention projection parameters (a [D] weight vector).
pub fn init_attention_params<R: Rng>(depth: usize, rng: &mut R, params: &mut ParamSet) {
    let bound = 1.0 / (depth as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let w: Vec<f64> = (0..depth).map(|_| dist.sample(rng)).collect();
    params.insert("attn.w", Tensor::vector(w));
}
