//! Dual-head CNN: a shared convolutional backbone feeding a predictor head
//! (target classes) and an adversarial head (protected groups) in parallel.
//! Layer ids are dense and contiguous across backbone, predictor head, then
//! adversarial head, in that order; trainable flags and the ablation
//! machinery address layers by these ids.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d { filters: usize, kernel: usize },
    Dense { width: usize },
    Relu,
    MaxPool2d,
    Flatten,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Conv2d { filters, kernel } => write!(f, "conv2d:{filters}:{kernel}"),
            LayerKind::Dense { width } => write!(f, "dense:{width}"),
            LayerKind::Relu => write!(f, "relu"),
            LayerKind::MaxPool2d => write!(f, "maxpool2d"),
            LayerKind::Flatten => write!(f, "flatten"),
        }
    }
}

impl LayerKind {
    pub fn parse(s: &str) -> Option<LayerKind> {
        let mut it = s.split(':');
        let head = it.next()?;
        let kind = match head {
            "conv2d" => LayerKind::Conv2d {
                filters: it.next()?.parse().ok()?,
                kernel: it.next()?.parse().ok()?,
            },
            "dense" => LayerKind::Dense {
                width: it.next()?.parse().ok()?,
            },
            "relu" => LayerKind::Relu,
            "maxpool2d" => LayerKind::MaxPool2d,
            "flatten" => LayerKind::Flatten,
            _ => return None,
        };
        if it.next().is_some() {
            return None;
        }
        Some(kind)
    }
}

/// One instantiated layer: structural kind plus its parameter handles.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    id: usize,
    kind: LayerKind,
    w: Option<ParamId>,
    b: Option<ParamId>,
}

impl LayerSpec {
    pub fn id(&self) -> usize {
        self.id
    }
    pub fn kind(&self) -> LayerKind {
        self.kind
    }
    pub fn weight_id(&self) -> Option<ParamId> {
        self.w
    }
    pub fn bias_id(&self) -> Option<ParamId> {
        self.b
    }
}

/// Filters of one conv layer marked for zeroing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterMask {
    pub layer_id: usize,
    pub filters: BTreeSet<usize>,
}

/// Activation shape while walking a layer chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Chw(c, h, w) => write!(f, "{c}x{h}x{w}"),
            Shape::Flat(n) => write!(f, "flat {n}"),
        }
    }
}

fn propagate(shape: Shape, kind: LayerKind, id: usize) -> Result<Shape> {
    let fail = |detail: String| Error::ShapeMismatch {
        op: format!("layer {id} ({kind})"),
        detail,
    };
    match kind {
        LayerKind::Conv2d { filters, kernel } => match shape {
            Shape::Chw(_, h, w) if kernel <= h && kernel <= w => {
                Ok(Shape::Chw(filters, h - kernel + 1, w - kernel + 1))
            }
            Shape::Chw(..) => Err(fail(format!("kernel {kernel} exceeds input {shape}"))),
            Shape::Flat(_) => Err(fail(format!("conv needs a spatial input, got {shape}"))),
        },
        LayerKind::MaxPool2d => match shape {
            Shape::Chw(c, h, w) if h >= 2 && w >= 2 => Ok(Shape::Chw(c, h / 2, w / 2)),
            _ => Err(fail(format!("cannot pool {shape}"))),
        },
        LayerKind::Relu => Ok(shape),
        LayerKind::Flatten => match shape {
            Shape::Chw(c, h, w) => Ok(Shape::Flat(c * h * w)),
            Shape::Flat(_) => Err(fail("input already flat".into())),
        },
        LayerKind::Dense { width } => match shape {
            Shape::Flat(_) => Ok(Shape::Flat(width)),
            Shape::Chw(..) => Err(fail(format!("dense needs flat input, got {shape}"))),
        },
    }
}

#[derive(Clone, Debug)]
pub struct DualHeadModel<T: Scalar> {
    input_h: usize,
    input_w: usize,
    n_target_classes: usize,
    n_protected_groups: usize,
    backbone: Vec<LayerSpec>,
    predictor_head: Vec<LayerSpec>,
    adversarial_head: Vec<LayerSpec>,
    params: ParamStore<T>,
    trainable: Vec<bool>,
    adv_head_fitted: bool,
    seed: u64,
}

/// Live forward pass: the graph borrows the model's parameters, so step the
/// optimizer only after dropping this.
pub struct DualForward<'m, T: Scalar> {
    pub graph: Graph<'m, T>,
    pub y_logits: NodeId,
    pub z_logits: NodeId,
}

/// Default backbone: three conv blocks sized so per-layer ablation has
/// layers of clearly different depth to attribute to.
pub fn default_backbone() -> Vec<LayerKind> {
    vec![
        LayerKind::Conv2d { filters: 8, kernel: 3 },
        LayerKind::Relu,
        LayerKind::MaxPool2d,
        LayerKind::Conv2d { filters: 16, kernel: 3 },
        LayerKind::Relu,
        LayerKind::MaxPool2d,
        LayerKind::Conv2d { filters: 32, kernel: 3 },
        LayerKind::Relu,
        LayerKind::MaxPool2d,
        LayerKind::Flatten,
    ]
}

pub fn default_head(classes: usize) -> Vec<LayerKind> {
    vec![
        LayerKind::Dense { width: 64 },
        LayerKind::Relu,
        LayerKind::Dense { width: classes },
    ]
}

impl<T: Scalar> DualHeadModel<T> {
    /// Standard construction: given backbone, dense(64)+relu+dense(C) heads.
    pub fn build_model(
        backbone: &[LayerKind],
        input_hw: (usize, usize),
        n_target_classes: usize,
        n_protected_groups: usize,
        seed: u64,
    ) -> Result<DualHeadModel<T>> {
        Self::build_with_heads(
            backbone,
            &default_head(n_target_classes),
            &default_head(n_protected_groups),
            input_hw,
            n_target_classes,
            n_protected_groups,
            seed,
        )
    }

    /// Full construction with explicit head specs; heads are dense/relu
    /// chains over the shared flattened backbone features.
    pub fn build_with_heads(
        backbone: &[LayerKind],
        predictor_head: &[LayerKind],
        adversarial_head: &[LayerKind],
        input_hw: (usize, usize),
        n_target_classes: usize,
        n_protected_groups: usize,
        seed: u64,
    ) -> Result<DualHeadModel<T>> {
        if n_target_classes < 2 || n_protected_groups < 2 {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "need >= 2 target classes and >= 2 protected groups, got {n_target_classes}/{n_protected_groups}"
                ),
            });
        }
        if backbone.is_empty() {
            return Err(Error::EmptyInput {
                what: "backbone spec".into(),
            });
        }
        let (h, w) = input_hw;
        let mut params = ParamStore::new();
        let mut next_id = 0usize;

        let build_section =
            |section: &str,
             kinds: &[LayerKind],
             mut shape: Shape,
             params: &mut ParamStore<T>,
             next_id: &mut usize|
             -> Result<(Vec<LayerSpec>, Shape)> {
                let mut layers = Vec::with_capacity(kinds.len());
                for &kind in kinds {
                    let id = *next_id;
                    *next_id += 1;
                    let in_shape = shape;
                    shape = propagate(shape, kind, id)?;
                    let (wid, bid) = match kind {
                        LayerKind::Conv2d { filters, kernel } => {
                            if filters < 2 {
                                return Err(Error::InvalidConfig {
                                    detail: format!(
                                        "layer {id}: conv layers need >= 2 filters, got {filters}"
                                    ),
                                });
                            }
                            let c_in = match in_shape {
                                Shape::Chw(c, ..) => c,
                                Shape::Flat(_) => unreachable!("propagate rejected flat input"),
                            };
                            let fan_in = c_in * kernel * kernel;
                            let fan_out = filters * kernel * kernel;
                            let wt = init_uniform::<T>(
                                &[filters, c_in, kernel, kernel],
                                fan_in,
                                fan_out,
                                seed,
                                id,
                            );
                            let w = params.add(&format!("{section}.{id}.w"), wt);
                            let b = params.add(&format!("{section}.{id}.b"), Tensor::zeros(&[filters]));
                            (Some(w), Some(b))
                        }
                        LayerKind::Dense { width } => {
                            let d_in = match in_shape {
                                Shape::Flat(d) => d,
                                Shape::Chw(..) => unreachable!("propagate rejected spatial input"),
                            };
                            let wt = init_uniform::<T>(&[width, d_in], d_in, width, seed, id);
                            let w = params.add(&format!("{section}.{id}.w"), wt);
                            let b = params.add(&format!("{section}.{id}.b"), Tensor::zeros(&[width]));
                            (Some(w), Some(b))
                        }
                        _ => (None, None),
                    };
                    layers.push(LayerSpec {
                        id,
                        kind,
                        w: wid,
                        b: bid,
                    });
                }
                Ok((layers, shape))
            };

        let (bb, feat_shape) =
            build_section("backbone", backbone, Shape::Chw(1, h, w), &mut params, &mut next_id)?;
        let feat = match feat_shape {
            Shape::Flat(n) => n,
            Shape::Chw(..) => {
                return Err(Error::ShapeMismatch {
                    op: "backbone".into(),
                    detail: format!("must end flattened, got {feat_shape}"),
                })
            }
        };
        let (pred, pred_out) = build_section(
            "predictor",
            predictor_head,
            Shape::Flat(feat),
            &mut params,
            &mut next_id,
        )?;
        let (adv, adv_out) = build_section(
            "adversary",
            adversarial_head,
            Shape::Flat(feat),
            &mut params,
            &mut next_id,
        )?;
        for (name, got, want) in [
            ("predictor head", pred_out, n_target_classes),
            ("adversarial head", adv_out, n_protected_groups),
        ] {
            if got != Shape::Flat(want) {
                return Err(Error::ShapeMismatch {
                    op: name.into(),
                    detail: format!("must end with width {want}, got {got}"),
                });
            }
        }

        Ok(DualHeadModel {
            input_h: h,
            input_w: w,
            n_target_classes,
            n_protected_groups,
            backbone: bb,
            predictor_head: pred,
            adversarial_head: adv,
            params,
            trainable: vec![true; next_id],
            adv_head_fitted: false,
            seed,
        })
    }

    pub fn input_hw(&self) -> (usize, usize) {
        (self.input_h, self.input_w)
    }
    pub fn n_target_classes(&self) -> usize {
        self.n_target_classes
    }
    pub fn n_protected_groups(&self) -> usize {
        self.n_protected_groups
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn backbone_layers(&self) -> &[LayerSpec] {
        &self.backbone
    }
    pub fn predictor_layers(&self) -> &[LayerSpec] {
        &self.predictor_head
    }
    pub fn adversary_layers(&self) -> &[LayerSpec] {
        &self.adversarial_head
    }
    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
    pub fn n_layers(&self) -> usize {
        self.trainable.len()
    }
    pub fn adv_head_fitted(&self) -> bool {
        self.adv_head_fitted
    }
    pub fn mark_adv_head_fitted(&mut self) {
        self.adv_head_fitted = true;
    }

    pub fn is_trainable(&self, layer_id: usize) -> Result<bool> {
        self.trainable
            .get(layer_id)
            .copied()
            .ok_or(Error::UnknownLayer { id: layer_id })
    }

    /// Ids of every layer, all sections.
    pub fn all_layer_ids(&self) -> BTreeSet<usize> {
        (0..self.trainable.len()).collect()
    }

    pub fn backbone_ids(&self) -> BTreeSet<usize> {
        self.backbone.iter().map(|l| l.id).collect()
    }

    pub fn head_ids(&self) -> BTreeSet<usize> {
        self.predictor_head
            .iter()
            .chain(&self.adversarial_head)
            .map(|l| l.id)
            .collect()
    }

    pub fn conv_layer_ids(&self) -> Vec<usize> {
        self.backbone
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
            .map(|l| l.id)
            .collect()
    }

    pub fn layer(&self, layer_id: usize) -> Result<&LayerSpec> {
        self.backbone
            .iter()
            .chain(&self.predictor_head)
            .chain(&self.adversarial_head)
            .find(|l| l.id == layer_id)
            .ok_or(Error::UnknownLayer { id: layer_id })
    }

    /// Exactly the listed layers become trainable; all others freeze.
    pub fn set_trainable(&mut self, ids: &BTreeSet<usize>) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyInput {
                what: "trainable layer set".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.trainable.len()) {
            return Err(Error::UnknownLayer { id: bad });
        }
        for (id, flag) in self.trainable.iter_mut().enumerate() {
            *flag = ids.contains(&id);
        }
        Ok(())
    }

    fn section_param_ids(section: &[LayerSpec], trainable: Option<&[bool]>) -> Vec<ParamId> {
        section
            .iter()
            .filter(|l| trainable.map_or(true, |t| t[l.id]))
            .flat_map(|l| l.w.into_iter().chain(l.b))
            .collect()
    }

    pub fn trainable_param_ids(&self) -> Vec<ParamId> {
        let t = Some(self.trainable.as_slice());
        let mut ids = Self::section_param_ids(&self.backbone, t);
        ids.extend(Self::section_param_ids(&self.predictor_head, t));
        ids.extend(Self::section_param_ids(&self.adversarial_head, t));
        ids
    }

    pub fn trainable_backbone_param_ids(&self) -> Vec<ParamId> {
        Self::section_param_ids(&self.backbone, Some(&self.trainable))
    }

    pub fn trainable_predictor_param_ids(&self) -> Vec<ParamId> {
        Self::section_param_ids(&self.predictor_head, Some(&self.trainable))
    }

    pub fn trainable_adversary_param_ids(&self) -> Vec<ParamId> {
        Self::section_param_ids(&self.adversarial_head, Some(&self.trainable))
    }

    pub fn adversary_param_ids(&self) -> Vec<ParamId> {
        Self::section_param_ids(&self.adversarial_head, None)
    }

    /// Append one section's ops to `g`, returning the section output node.
    /// Associated fn (not a method) so callers can drive a graph that
    /// borrows the params while holding cloned layer lists.
    pub fn forward_section(
        section: &[LayerSpec],
        g: &mut Graph<'_, T>,
        input: NodeId,
    ) -> Result<NodeId> {
        let mut cur = input;
        for layer in section {
            cur = match layer.kind {
                LayerKind::Conv2d { .. } => {
                    let w = g.param(layer.w.expect("conv has weights"))?;
                    let b = g.param(layer.b.expect("conv has bias"))?;
                    g.conv2d(cur, w, b)?
                }
                LayerKind::Dense { .. } => {
                    let w = g.param(layer.w.expect("dense has weights"))?;
                    let b = g.param(layer.b.expect("dense has bias"))?;
                    g.dense(cur, w, b)?
                }
                LayerKind::Relu => g.relu(cur)?,
                LayerKind::MaxPool2d => g.maxpool2d(cur)?,
                LayerKind::Flatten => g.flatten(cur)?,
            };
        }
        Ok(cur)
    }

    /// One shared backbone forward feeding both heads.
    pub fn forward_dual<'m>(&'m mut self, images: &Tensor<T>) -> Result<DualForward<'m, T>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.input_h || shape[3] != self.input_w
        {
            return Err(Error::ShapeMismatch {
                op: "forward_dual".into(),
                detail: format!(
                    "images {:?} must be Nx1x{}x{}",
                    shape, self.input_h, self.input_w
                ),
            });
        }
        let backbone = &self.backbone;
        let pred = &self.predictor_head;
        let adv = &self.adversarial_head;
        let mut graph = Graph::new(&mut self.params);
        let x = graph.input(images.clone());
        let feat = Self::forward_section(backbone, &mut graph, x)?;
        let y_logits = Self::forward_section(pred, &mut graph, feat)?;
        let z_logits = Self::forward_section(adv, &mut graph, feat)?;
        Ok(DualForward {
            graph,
            y_logits,
            z_logits,
        })
    }

    /// Forward without gradients; returns (y_logits, z_logits) values.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let fwd = self.forward_dual(images)?;
        let y = fwd.graph.value(fwd.y_logits).clone();
        let z = fwd.graph.value(fwd.z_logits).clone();
        Ok((y, z))
    }

    /// Deep copy with the masked filters' weights and bias entries zeroed.
    pub fn apply_filter_mask(&self, mask: &FilterMask) -> Result<DualHeadModel<T>> {
        if mask.filters.is_empty() {
            return Err(Error::EmptyInput {
                what: "filter mask".into(),
            });
        }
        let layer = self.layer(mask.layer_id)?;
        let filters = match layer.kind {
            LayerKind::Conv2d { filters, .. } => filters,
            _ => {
                return Err(Error::NotConvLayer {
                    id: mask.layer_id,
                    action: "apply a filter mask".into(),
                })
            }
        };
        if let Some(&bad) = mask.filters.iter().find(|&&f| f >= filters) {
            return Err(Error::FilterOutOfRange {
                index: bad,
                layer: mask.layer_id,
                count: filters,
            });
        }
        let mut out = self.clone();
        let wid = layer.w.expect("conv has weights");
        let bid = layer.b.expect("conv has bias");
        let per_filter = out.params.get(wid)?.len() / filters;
        {
            let wt = out.params.get_mut(wid)?;
            for &f in &mask.filters {
                for v in &mut wt.data_mut()[f * per_filter..(f + 1) * per_filter] {
                    *v = T::zero();
                }
            }
        }
        {
            let bt = out.params.get_mut(bid)?;
            for &f in &mask.filters {
                bt.data_mut()[f] = T::zero();
            }
        }
        Ok(out)
    }

    /// Cast a whole model to another precision (drops gradients).
    pub fn cast<U: Scalar>(&self) -> DualHeadModel<U> {
        DualHeadModel {
            input_h: self.input_h,
            input_w: self.input_w,
            n_target_classes: self.n_target_classes,
            n_protected_groups: self.n_protected_groups,
            backbone: self.backbone.clone(),
            predictor_head: self.predictor_head.clone(),
            adversarial_head: self.adversarial_head.clone(),
            params: self.params.cast(),
            trainable: self.trainable.clone(),
            adv_head_fitted: self.adv_head_fitted,
            seed: self.seed,
        }
    }
}

fn init_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    seed: u64,
    layer_id: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = stream(seed, "init", layer_id as u64);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistent by construction")
}

/// Row-wise softmax of a batch of logits, in f64 for metric stability.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let shape = logits.shape();
    debug_assert_eq!(shape.len(), 2);
    let (n, c) = (shape[0], shape[1]);
    let data = logits.data();
    (0..n)
        .map(|i| {
            let row: Vec<f64> = data[i * c..(i + 1) * c].iter().map(|v| v.to_f64()).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            exps.iter().map(|e| e / denom).collect()
        })
        .collect()
}

/// Argmax with ties broken toward the lower index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
