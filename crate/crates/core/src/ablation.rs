//! Layer attribution by filter ablation: zero each conv layer's most
//! mutually-similar filters on a copy, measure how much the target and
//! protected-group metrics drop, and turn the per-layer deltas into a
//! fine-tuning layer selection (pivot layer plus everything downstream).

use std::collections::BTreeSet;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fairness::macro_ovr_auc;
use crate::model::{DualHeadModel, FilterMask, LayerKind};
use crate::scalar::Scalar;

/// Per-filter mean pairwise cosine similarity for one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityScores {
    pub layer_id: usize,
    pub scores: Vec<f64>,
}

/// score(f) = mean over g != f of cos(vec(W_f), vec(W_g)). A zero-norm
/// filter is already dead, so it scores -1 (least similar, never "top");
/// a pair whose other member has zero norm contributes 0 (no direction to
/// compare against).
pub fn filter_similarity<T: Scalar>(
    model: &DualHeadModel<T>,
    layer_id: usize,
) -> Result<SimilarityScores> {
    let layer = model.layer(layer_id)?;
    let filters = match layer.kind() {
        LayerKind::Conv2d { filters, .. } => filters,
        _ => {
            return Err(Error::NotConvLayer {
                id: layer_id,
                action: "score filter similarity".into(),
            })
        }
    };
    let weights = model.params().get(layer.weight_id().expect("conv has weights"))?;
    let per_filter = weights.len() / filters;
    let flat: Vec<Vec<f64>> = (0..filters)
        .map(|f| {
            weights.data()[f * per_filter..(f + 1) * per_filter]
                .iter()
                .map(|v| v.to_f64())
                .collect()
        })
        .collect();
    let norms: Vec<f64> = flat
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let scores = (0..filters)
        .map(|f| {
            if norms[f] == 0.0 {
                return -1.0;
            }
            let mut sum = 0.0;
            for g in 0..filters {
                if g == f || norms[g] == 0.0 {
                    continue;
                }
                let dot: f64 = flat[f].iter().zip(&flat[g]).map(|(a, b)| a * b).sum();
                sum += dot / (norms[f] * norms[g]);
            }
            sum / (filters - 1) as f64
        })
        .collect();
    Ok(SimilarityScores { layer_id, scores })
}

/// Pick the top-scoring filters for zeroing: n = max(1, round(fraction *
/// filter_count)) with ties-to-even rounding, ties on score broken toward
/// the lowest filter index.
pub fn select_ablation_set(scores: &SimilarityScores, fraction: f64) -> Result<FilterMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig {
            detail: format!("ablation fraction must lie in (0, 1], got {fraction}"),
        });
    }
    let count = scores.scores.len();
    if count < 2 {
        return Err(Error::EmptyInput {
            what: "similarity scores (need at least 2 filters)".into(),
        });
    }
    let n = ((fraction * count as f64).round_ties_even() as usize).clamp(1, count);
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then(a.cmp(&b))
    });
    Ok(FilterMask {
        layer_id: scores.layer_id,
        filters: order[..n].iter().copied().collect::<BTreeSet<usize>>(),
    })
}

/// Head evaluation on one split: macro one-vs-rest AUC of the predictor
/// (target labels) and of the adversarial head (group labels).
pub fn evaluate_macro_aucs<T: Scalar>(
    model: &DualHeadModel<T>,
    data: &Dataset,
    split: Split,
) -> Result<(f64, f64)> {
    let indices = data.indices_of(split);
    if indices.is_empty() {
        return Err(Error::EmptyInput {
            what: format!("{split} split"),
        });
    }
    let mut scratch = model.clone();
    let mut y_rows = Vec::with_capacity(indices.len());
    let mut z_rows = Vec::with_capacity(indices.len());
    let mut y_labels = Vec::with_capacity(indices.len());
    let mut z_labels = Vec::with_capacity(indices.len());
    // Per-sample forward math is batch-independent, so chunking only bounds
    // the live tensor footprint.
    for chunk in indices.chunks(64) {
        let (images, ys, zs) = data.batch::<T>(chunk);
        let (y_logits, z_logits) = scratch.predict(&images)?;
        y_rows.extend(crate::model::softmax_rows(&y_logits));
        z_rows.extend(crate::model::softmax_rows(&z_logits));
        y_labels.extend(ys);
        z_labels.extend(zs);
    }
    let target = macro_ovr_auc(&y_rows, &y_labels, model.n_target_classes()).ok_or(
        Error::SingleClassInput {
            what: "target labels in evaluation split".into(),
        },
    )?;
    let protected = macro_ovr_auc(&z_rows, &z_labels, model.n_protected_groups()).ok_or(
        Error::SingleClassInput {
            what: "group labels in evaluation split".into(),
        },
    )?;
    Ok((target, protected))
}

/// One conv layer's ablation outcome. Deltas are metric-after minus
/// metric-before, so harm shows up negative.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAblation {
    pub layer_id: usize,
    pub mask: FilterMask,
    pub n_filters: usize,
    pub delta_target: f64,
    pub delta_protected: f64,
}

impl LayerAblation {
    /// Ranking score: how much more the protected task degrades than the
    /// target task when this layer is ablated.
    pub fn score(&self) -> f64 {
        self.delta_target - self.delta_protected
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub fraction: f64,
    pub baseline_target_auc: f64,
    pub baseline_protected_auc: f64,
    pub layers: Vec<LayerAblation>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "layer_id,n_filters,n_ablated,ablated_filters,baseline_target_auc,baseline_protected_auc,delta_target,delta_protected,score\n",
        );
        for l in &self.layers {
            let filters: Vec<String> = l.mask.filters.iter().map(|f| f.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                l.layer_id,
                l.n_filters,
                l.mask.filters.len(),
                filters.join(";"),
                self.baseline_target_auc,
                self.baseline_protected_auc,
                l.delta_target,
                l.delta_protected,
                l.score(),
            ));
        }
        out
    }

    /// Layer ids ranked by score descending, equal scores toward smaller id.
    pub fn ranked_layer_ids(&self) -> Vec<usize> {
        let mut order: Vec<&LayerAblation> = self.layers.iter().collect();
        order.sort_by(|a, b| {
            b.score()
                .total_cmp(&a.score())
                .then(a.layer_id.cmp(&b.layer_id))
        });
        order.iter().map(|l| l.layer_id).collect()
    }
}

/// Ablate each conv layer independently on a copy and record the metric
/// deltas. The input model is left untouched; the adversarial head must
/// already be fitted as a probe, otherwise its AUCs would be noise.
pub fn run_ablation_study<T: Scalar>(
    model: &DualHeadModel<T>,
    data: &Dataset,
    split: Split,
    fraction: f64,
) -> Result<AblationReport> {
    if !model.adv_head_fitted() {
        return Err(Error::UntrainedProbe);
    }
    let (baseline_target, baseline_protected) = evaluate_macro_aucs(model, data, split)?;
    let mut layers = Vec::new();
    for layer_id in model.conv_layer_ids() {
        let scores = filter_similarity(model, layer_id)?;
        let mask = select_ablation_set(&scores, fraction)?;
        let ablated = model.apply_filter_mask(&mask)?;
        let (target, protected) = evaluate_macro_aucs(&ablated, data, split)?;
        layers.push(LayerAblation {
            layer_id,
            mask,
            n_filters: scores.scores.len(),
            delta_target: target - baseline_target,
            delta_protected: protected - baseline_protected,
        });
    }
    Ok(AblationReport {
        fraction,
        baseline_target_auc: baseline_target,
        baseline_protected_auc: baseline_protected,
        layers,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinetuneSelection {
    pub pivot: usize,
    pub layer_ids: BTreeSet<usize>,
}

/// Take the k best-scoring layers, pivot on the smallest id among them, and
/// select the pivot plus every backbone layer downstream of it plus both
/// heads (fine-tuning a layer invalidates everything computed after it).
pub fn select_finetune_layers<T: Scalar>(
    model: &DualHeadModel<T>,
    report: &AblationReport,
    k: usize,
) -> Result<FinetuneSelection> {
    let ranked = report.ranked_layer_ids();
    if k == 0 || k > ranked.len() {
        return Err(Error::TooFewConvLayers {
            k,
            available: ranked.len(),
        });
    }
    let pivot = *ranked[..k].iter().min().expect("k >= 1");
    let mut layer_ids: BTreeSet<usize> = model
        .backbone_ids()
        .into_iter()
        .filter(|&id| id >= pivot)
        .collect();
    layer_ids.extend(model.head_ids());
    Ok(FinetuneSelection { pivot, layer_ids })
}
