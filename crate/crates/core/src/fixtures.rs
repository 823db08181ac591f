//! Hand-constructed fixtures with exactly derivable outcomes. Nothing here
//! is trained: weights and scores are set so every metric is an exact
//! rational, which lets tests assert equality instead of tolerances.

use std::collections::BTreeSet;

use crate::data::{Dataset, GeneratorConfig, SampleMeta, Split};
use crate::fairness::PredictionSet;
use crate::model::{DualHeadModel, LayerKind};
use crate::params::ParamId;

/// Input edge of the planted-watermark images.
const SIDE: usize = 12;
/// Watermark pixel (group 1 only) and per-class pixels.
const MARK: (usize, usize) = (4, 4);
const CLASS_PX: [(usize, usize); 2] = [(6, 5), (6, 6)];
/// Head logit weight on the detected features; any positive value works,
/// only the sign and the induced ordering matter.
const GAIN: f64 = 3.0;

fn zero_param(model: &mut DualHeadModel<f64>, id: ParamId) {
    for v in model.params_mut().get_mut(id).unwrap().data_mut() {
        *v = 0.0;
    }
}

/// Set conv weight element [filter, channel, kr, kc] of a layer.
fn poke_conv(model: &mut DualHeadModel<f64>, layer_id: usize, f: usize, ch: usize, kr: usize, kc: usize) {
    let wid = model.layer(layer_id).unwrap().weight_id().unwrap();
    let t = model.params_mut().get_mut(wid).unwrap();
    let dims = t.shape().to_vec();
    let idx = ((f * dims[1] + ch) * dims[2] + kr) * dims[3] + kc;
    t.data_mut()[idx] = 1.0;
}

/// Set dense weight element [row, col] of a layer.
fn poke_dense(model: &mut DualHeadModel<f64>, layer_id: usize, row: usize, col: usize, value: f64) {
    let wid = model.layer(layer_id).unwrap().weight_id().unwrap();
    let t = model.params_mut().get_mut(wid).unwrap();
    let cols = t.shape()[1];
    t.data_mut()[row * cols + col] = value;
}

/// A three-conv model where the protected-group watermark is readable only
/// through two identical filters of the LAST conv layer (the planted layer),
/// plus an eight-image evaluation set.
///
/// Construction, layer by layer (3x3 kernels, so each conv shifts
/// coordinates by its tap offset plus nothing else; single-tap filters copy
/// one input pixel per output position):
///
/// - conv 0 (8 filters): filter 0 is a center tap (passes the image shifted
///   by (1,1)); filters 1 and 2 are identical corner taps whose output no
///   later layer reads (the decoy pair that tops the similarity ranking);
///   filters 3..7 are zero.
/// - conv 1 (8 filters): same pattern, reading channel 0 only.
/// - conv 2 (16 filters, PLANTED): filters 0 and 1 are identical taps that
///   land on the watermark pixel; filter 2 and 3 tap the two class pixels;
///   the rest are zero. Only here does the group signal become a feature.
/// - predictor head: one dense row per class reading its class feature.
/// - adversarial head: row 1 reads the watermark feature, row 0 is zero.
///
/// Ablating the top-similar pair of conv 0 or conv 1 hits dead decoys
/// (metric deltas exactly 0); ablating conv 2's pair erases the only
/// protected feature (protected macro AUC drops 1.0 -> 0.5 exactly, target
/// AUC stays 1.0), so conv 2 is ranked first with score +0.5 against 0.
///
/// Returns (model, evaluation data, planted layer id).
pub fn planted_watermark_fixture() -> (DualHeadModel<f64>, Dataset, usize) {
    let mut model = DualHeadModel::<f64>::build_with_heads(
        &[
            LayerKind::Conv2d { filters: 8, kernel: 3 },
            LayerKind::Conv2d { filters: 8, kernel: 3 },
            LayerKind::Conv2d { filters: 16, kernel: 3 },
            LayerKind::Flatten,
        ],
        &[LayerKind::Dense { width: 2 }],
        &[LayerKind::Dense { width: 2 }],
        (SIDE, SIDE),
        2,
        2,
        0,
    )
    .unwrap();
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        zero_param(&mut model, id);
    }

    // conv 0: passer at filter 0, decoy pair at 1/2.
    poke_conv(&mut model, 0, 0, 0, 1, 1);
    poke_conv(&mut model, 0, 1, 0, 0, 0);
    poke_conv(&mut model, 0, 2, 0, 0, 0);
    // conv 1: same, reading the passer channel.
    poke_conv(&mut model, 1, 0, 0, 1, 1);
    poke_conv(&mut model, 1, 1, 0, 0, 0);
    poke_conv(&mut model, 1, 2, 0, 0, 0);
    // conv 2: the planted watermark readers (identical pair) + class taps.
    // After two (1,1) shifts a tap (tr,tc) reads input (r+tr+2, c+tc+2).
    poke_conv(&mut model, 2, 0, 0, 0, 0);
    poke_conv(&mut model, 2, 1, 0, 0, 0);
    poke_conv(&mut model, 2, 2, 0, 1, 1);
    poke_conv(&mut model, 2, 3, 0, 1, 2);

    // Feature coordinates in the 16 x 6 x 6 conv-2 output.
    let feat = |f: usize, r: usize, c: usize| (f * 6 + r) * 6 + c;
    // Watermark (4,4) with tap (0,0): r + 0 + 2 = 4 -> (2,2).
    let mark_feat = feat(0, 2, 2);
    // Class 0 pixel (6,5) with tap (1,1): r = 3, c = 2.
    // Class 1 pixel (6,6) with tap (1,2): r = 3, c = 2.
    let class_feats = [feat(2, 3, 2), feat(3, 3, 2)];

    poke_dense(&mut model, 4, 0, class_feats[0], GAIN);
    poke_dense(&mut model, 4, 1, class_feats[1], GAIN);
    poke_dense(&mut model, 5, 1, mark_feat, GAIN);

    // The adversarial head is a probe by construction.
    model.mark_adv_head_fitted();

    // Two copies of each (y, z) combination; every image is exact binary.
    let mut metas = Vec::new();
    let mut images = Vec::new();
    let mut pid = 0u64;
    for _copy in 0..2 {
        for y in 0..2usize {
            for z in 0..2usize {
                let mut img = vec![0.0f32; SIDE * SIDE];
                let (cr, cc) = CLASS_PX[y];
                img[cr * SIDE + cc] = 1.0;
                if z == 1 {
                    img[MARK.0 * SIDE + MARK.1] = 1.0;
                }
                metas.push(SampleMeta {
                    patient_id: pid,
                    y,
                    z,
                    split: Split::Validation,
                });
                images.extend(img);
                pid += 1;
            }
        }
    }
    let data = Dataset {
        config: GeneratorConfig {
            n_patients: 8,
            images_per_patient: 1,
            height: SIDE,
            width: SIDE,
            c_y: 2,
            c_z: 2,
            rho: 0.0,
            amplitude: 1.0,
            noise: 0.0,
            seed: 0,
        },
        metas,
        images,
    };
    (model, data, 2)
}

/// Layer ids the planted fixture expects `select_finetune_layers` with k=1
/// to emit: the planted conv layer plus everything downstream.
pub fn planted_expected_selection() -> BTreeSet<usize> {
    [2, 3, 4, 5].into_iter().collect()
}

/// Forty hand-enumerated predictions over 2 classes x 2 groups, 10 samples
/// per cell. Correct predictions score 0.9 for the true class, misses 0.1,
/// so every AUC is an exact two-level rank statistic.
///
/// Committed arithmetic (reference group 0):
///   per (class, group) true positives out of 10:
///     class 0: group 0 -> 9,  group 1 -> 10
///     class 1: group 0 -> 6,  group 1 -> 8
///   TPRs: c0 = (0.9, 1.0); c1 = (0.6, 0.8)
///   disparities (group 1 vs 0): c0 = 1.0/0.9 (fair), c1 = 0.8/0.6 (unfair)
///   precision: c0 = 19/25, c1 = 14/15; recall: c0 = 19/20, c1 = 14/20
///   one-vs-rest AUC, both classes: 330/400 = 0.825
pub fn fairness_fixture() -> PredictionSet {
    // (group, y, correct count) in a fixed order; patients 0..39.
    let cells: [(usize, usize, usize); 4] = [(0, 0, 9), (0, 1, 6), (1, 0, 10), (1, 1, 8)];
    let mut preds = PredictionSet::new(2, 2);
    let mut pid = 0u64;
    for (z, y, correct) in cells {
        for i in 0..10 {
            let hit = i < correct;
            // Literal score pairs: deriving one side as 1 - x would break
            // the exact ties the committed AUC is computed from.
            let scores = match (y, hit) {
                (0, true) | (1, false) => [0.9, 0.1],
                _ => [0.1, 0.9],
            };
            preds.push(&scores, y, z, pid).unwrap();
            pid += 1;
        }
    }
    preds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::{run_ablation_study, select_finetune_layers};
    use crate::fairness::build_reports;

    #[test]
    fn planted_model_forward_features_are_exact() {
        let (mut model, data, _) = planted_watermark_fixture();
        let idx = data.indices_of(Split::Validation);
        assert_eq!(idx.len(), 8);
        let (images, ys, zs) = data.batch::<f64>(&idx);
        let (y_logits, z_logits) = model.predict(&images).unwrap();
        for i in 0..8 {
            let yl = &y_logits.data()[i * 2..i * 2 + 2];
            let zl = &z_logits.data()[i * 2..i * 2 + 2];
            // Exactly GAIN on the true class logit, 0 on the other.
            assert_eq!(yl[ys[i]], GAIN);
            assert_eq!(yl[1 - ys[i]], 0.0);
            assert_eq!(zl[0], 0.0);
            assert_eq!(zl[1], if zs[i] == 1 { GAIN } else { 0.0 });
        }
    }

    #[test]
    fn planted_layer_is_ranked_first_with_exact_deltas() {
        let (model, data, planted) = planted_watermark_fixture();
        let report = run_ablation_study(&model, &data, Split::Validation, 0.10).unwrap();
        assert_eq!(report.baseline_target_auc, 1.0);
        assert_eq!(report.baseline_protected_auc, 1.0);
        for l in &report.layers {
            if l.layer_id == planted {
                assert_eq!(l.delta_target, 0.0);
                assert_eq!(l.delta_protected, -0.5);
                assert_eq!(l.mask.filters, [0, 1].into_iter().collect());
            } else {
                assert_eq!(l.delta_target, 0.0);
                assert_eq!(l.delta_protected, 0.0);
                // Decoy pair ties at the top; the mask takes the lower index.
                assert_eq!(l.mask.filters, [1].into_iter().collect());
            }
        }
        assert_eq!(report.ranked_layer_ids()[0], planted);
        let sel = select_finetune_layers(&model, &report, 1).unwrap();
        assert_eq!(sel.pivot, planted);
        assert_eq!(sel.layer_ids, planted_expected_selection());
    }

    #[test]
    fn planted_mask_sizes_follow_the_ten_percent_law() {
        let (model, data, _) = planted_watermark_fixture();
        let report = run_ablation_study(&model, &data, Split::Validation, 0.10).unwrap();
        for l in &report.layers {
            let expect = ((0.10 * l.n_filters as f64).round_ties_even() as usize).max(1);
            assert_eq!(l.mask.filters.len(), expect, "layer {}", l.layer_id);
        }
    }

    #[test]
    fn fairness_fixture_reproduces_committed_report() {
        let report = build_reports(&fairness_fixture(), 0).unwrap();

        let c0 = &report.per_class[0];
        assert_eq!(c0.auc, Some(330.0 / 400.0));
        assert_eq!(c0.precision, Some(19.0 / 25.0));
        assert_eq!(c0.recall, Some(19.0 / 20.0));
        let c1 = &report.per_class[1];
        assert_eq!(c1.auc, Some(330.0 / 400.0));
        assert_eq!(c1.precision, Some(14.0 / 15.0));
        assert_eq!(c1.recall, Some(14.0 / 20.0));

        assert_eq!(report.counts.tpr(0, 0), Some(0.9));
        assert_eq!(report.counts.tpr(0, 1), Some(1.0));
        assert_eq!(report.counts.tpr(1, 0), Some(0.6));
        assert_eq!(report.counts.tpr(1, 1), Some(0.8));

        let d0 = report.disparities.iter().find(|d| d.class == 0).unwrap();
        assert_eq!(d0.disparity, Some(1.0 / 0.9));
        assert_eq!(d0.fair, Some(true));
        let d1 = report.disparities.iter().find(|d| d.class == 1).unwrap();
        assert_eq!(d1.disparity, Some(0.8 / 0.6));
        assert_eq!(d1.fair, Some(false));
    }
}
