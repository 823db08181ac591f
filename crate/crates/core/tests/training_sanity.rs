//! Optimization sanity on an easy two-class problem: baseline training must
//! reach high validation accuracy quickly and descend smoothly.

use debiaslab_core::data::{generate_dataset, GeneratorConfig};
use debiaslab_core::model::{DualHeadModel, LayerKind};
use debiaslab_core::train::{train_baseline, TrainConfig};

#[test]
fn baseline_learns_separable_two_class_toy() {
    // Two clean template classes, no bias, light noise: linearly separable.
    let data = generate_dataset(&GeneratorConfig {
        n_patients: 100,
        images_per_patient: 4,
        height: 16,
        width: 16,
        c_y: 2,
        c_z: 2,
        rho: 0.0,
        amplitude: 0.0,
        noise: 0.05,
        seed: 2,
    })
    .unwrap();
    let mut model = DualHeadModel::<f64>::build_with_heads(
        &[
            LayerKind::Conv2d { filters: 6, kernel: 3 },
            LayerKind::Relu,
            LayerKind::MaxPool2d,
            LayerKind::Flatten,
        ],
        &[LayerKind::Dense { width: 16 }, LayerKind::Relu, LayerKind::Dense { width: 2 }],
        &[LayerKind::Dense { width: 16 }, LayerKind::Relu, LayerKind::Dense { width: 2 }],
        (16, 16),
        2,
        2,
        2,
    )
    .unwrap();
    let config = TrainConfig { epochs: 20, seed: 2, ..TrainConfig::default() };
    let log = train_baseline(&mut model, &data, &config).unwrap();

    let best = log
        .records
        .iter()
        .map(|r| r.val_target_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(best >= 0.95, "best validation accuracy {best}");

    // Loss averaged over any 5-epoch window never increases between
    // consecutive window starts.
    let losses: Vec<f64> = log.records.iter().map(|r| r.loss.combined).collect();
    let windows: Vec<f64> = losses
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(
            pair[1] <= pair[0],
            "5-epoch loss window increased: {} -> {}",
            pair[0],
            pair[1]
        );
    }
}
