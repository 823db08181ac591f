//! Training loops: baseline (predictor loss only) and the two-step
//! adversarial update. Pass 1 descends L_predictor + lambda * L_adversarial
//! over everything trainable; pass 2 backpropagates -lambda * L_adversarial
//! into the trainable backbone so the shared features unlearn the protected
//! attribute. The degenerate pass-2 configurations (shared forward, adversary
//! included, summed apply) are exposed on purpose: one of them cancels the
//! adversarial terms exactly, which is the pitfall the default avoids.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fairness::PredictionSet;
use crate::model::{argmax_row, softmax_rows, DualHeadModel};
use crate::optim::{sgd_step, OptimizerState};
use crate::params::{ParamId, ParamStore};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Evaluation forward chunk size; per-sample math is batch-independent, so
/// this only bounds live tensor memory.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    FullDebias,
    PartialDebias,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::FullDebias => "full_debias",
            Mode::PartialDebias => "partial_debias",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "baseline" => Some(Mode::Baseline),
            "full_debias" | "full" => Some(Mode::FullDebias),
            "partial_debias" | "partial" => Some(Mode::PartialDebias),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass2Apply {
    /// Step after pass 1, then step again with the pass-2 gradients.
    Immediate,
    /// Fold the pass-2 gradients into the pass-1 gradients; one step total.
    Summed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Adversarial loss weight, in [0, 1]; the same value scales both the
    /// pass-1 (+lambda) and pass-2 (-lambda) contributions.
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Pass 2 re-runs the forward with post-step parameters instead of
    /// reusing the pass-1 activations.
    pub pass2_fresh_forward: bool,
    /// Pass 2 also steps the adversarial head (default: backbone only).
    pub pass2_updates_adversary: bool,
    pub pass2_apply: Pass2Apply,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            mode: Mode::Baseline,
            lambda: 0.53,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            pass2_fresh_forward: true,
            pass2_updates_adversary: false,
            pass2_apply: Pass2Apply::Immediate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvalidConfig { detail });
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return bad(format!("lambda must lie in [0,1], got {}", self.lambda));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// Batch losses as observed in pass 1. `combined` is always
/// l_predictor + lambda * l_adversarial for the lambda the update ran with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_predictor: f64,
    pub l_adversarial: f64,
    pub combined: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_target_acc: f64,
    pub val_adversary_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    /// Effective adversarial weight the run used (0 for baseline).
    pub lambda: f64,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// The `seconds` column is wall-clock and therefore the one
    /// intentionally non-reproducible field in any output.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,l_predictor,l_adversarial,combined,val_target_acc,val_adversary_acc,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                r.epoch,
                r.loss.l_predictor,
                r.loss.l_adversarial,
                r.loss.combined,
                r.val_target_acc,
                r.val_adversary_acc,
                r.seconds,
            ));
        }
        out
    }

    pub fn final_val_adversary_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_adversary_acc)
    }

    pub fn final_val_target_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_target_acc)
    }
}

fn ensure_finite(value: f64, context: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            value,
            context: context.into(),
        })
    }
}

/// Add `scale * adjoint` into parameter gradients, optionally restricted to
/// an id set (pass 2 must not touch anything outside its target set).
fn accumulate_adjoints<T: Scalar>(
    params: &mut ParamStore<T>,
    adjoints: &[(ParamId, Vec<T>)],
    scale: T,
    only: Option<&BTreeSet<usize>>,
) -> Result<()> {
    for (pid, adj) in adjoints {
        if only.is_some_and(|s| !s.contains(&pid.0)) {
            continue;
        }
        let scaled: Vec<T> = adj.iter().map(|&g| g * scale).collect();
        params.get_mut(*pid)?.accumulate_grad(&scaled);
    }
    Ok(())
}

fn pass2_param_ids<T: Scalar>(model: &DualHeadModel<T>, config: &TrainConfig) -> Vec<ParamId> {
    let mut ids = model.trainable_backbone_param_ids();
    if config.pass2_updates_adversary {
        ids.extend(model.trainable_adversary_param_ids());
    }
    ids
}

/// One two-step update on one batch. Pass 1: single forward, backward of the
/// predictor loss at scale 1 and of the adversarial loss at scale +lambda,
/// one step over all trainable parameters. Pass 2: backward of the
/// adversarial loss at scale -lambda applied to the trainable backbone only
/// (plus the adversarial head iff configured), as its own step or folded
/// into pass 1 depending on `pass2_apply`.
///
/// lambda = 0 degenerates to a pure predictor update: the adversarial terms
/// are never accumulated, pass 2 is skipped, and the unreached adversarial
/// head is left out of the step, so the parameter trajectory is bit-for-bit
/// the baseline one.
pub fn two_step_update<T: Scalar>(
    model: &mut DualHeadModel<T>,
    images: &Tensor<T>,
    y: &[usize],
    z: &[usize],
    config: &TrainConfig,
    opt: &mut OptimizerState<T>,
) -> Result<LossBreakdown> {
    let lambda = config.lambda;
    let lam = T::from_f64(lambda);

    let mut adv_adjoints: Vec<(ParamId, Vec<T>)> = Vec::new();
    let (l_pred, l_adv) = {
        let mut fwd = model.forward_dual(images)?;
        let pred_loss = fwd.graph.softmax_cross_entropy(fwd.y_logits, y)?;
        let adv_loss = fwd.graph.softmax_cross_entropy(fwd.z_logits, z)?;
        let lp = fwd.graph.value(pred_loss).data()[0].to_f64();
        let la = fwd.graph.value(adv_loss).data()[0].to_f64();
        ensure_finite(lp, "pass 1 predictor loss")?;
        ensure_finite(la, "pass 1 adversarial loss")?;
        fwd.graph.backward(pred_loss, T::one())?;
        if lambda > 0.0 {
            adv_adjoints = fwd.graph.backward_collect(adv_loss)?;
        }
        (lp, la)
    };
    let breakdown = LossBreakdown {
        l_predictor: l_pred,
        l_adversarial: l_adv,
        combined: l_pred + lambda * l_adv,
    };

    let pass1_ids: Vec<ParamId> = if lambda > 0.0 {
        let mut ids = model.trainable_backbone_param_ids();
        ids.extend(model.trainable_predictor_param_ids());
        ids.extend(model.trainable_adversary_param_ids());
        ids
    } else {
        let mut ids = model.trainable_backbone_param_ids();
        ids.extend(model.trainable_predictor_param_ids());
        ids
    };
    if lambda > 0.0 {
        accumulate_adjoints(model.params_mut(), &adv_adjoints, lam, None)?;
    }

    let pass2_ids = pass2_param_ids(model, config);
    let pass2_set: BTreeSet<usize> = pass2_ids.iter().map(|id| id.0).collect();
    match config.pass2_apply {
        Pass2Apply::Immediate => {
            sgd_step(model.params_mut(), &pass1_ids, opt)?;
            if lambda > 0.0 {
                if config.pass2_fresh_forward {
                    let fresh = {
                        let mut fwd = model.forward_dual(images)?;
                        let adv_loss = fwd.graph.softmax_cross_entropy(fwd.z_logits, z)?;
                        let la2 = fwd.graph.value(adv_loss).data()[0].to_f64();
                        ensure_finite(la2, "pass 2 adversarial loss")?;
                        fwd.graph.backward_collect(adv_loss)?
                    };
                    accumulate_adjoints(model.params_mut(), &fresh, -lam, Some(&pass2_set))?;
                } else {
                    accumulate_adjoints(model.params_mut(), &adv_adjoints, -lam, Some(&pass2_set))?;
                }
                sgd_step(model.params_mut(), &pass2_ids, opt)?;
            }
        }
        Pass2Apply::Summed => {
            if lambda > 0.0 {
                if config.pass2_fresh_forward {
                    // No step has happened yet, so this recomputes the same
                    // adjoints; run it anyway to honor the configuration.
                    let fresh = {
                        let mut fwd = model.forward_dual(images)?;
                        let adv_loss = fwd.graph.softmax_cross_entropy(fwd.z_logits, z)?;
                        let la2 = fwd.graph.value(adv_loss).data()[0].to_f64();
                        ensure_finite(la2, "pass 2 adversarial loss")?;
                        fwd.graph.backward_collect(adv_loss)?
                    };
                    accumulate_adjoints(model.params_mut(), &fresh, -lam, Some(&pass2_set))?;
                } else {
                    accumulate_adjoints(model.params_mut(), &adv_adjoints, -lam, Some(&pass2_set))?;
                }
            }
            sgd_step(model.params_mut(), &pass1_ids, opt)?;
        }
    }
    Ok(breakdown)
}

/// Argmax accuracy of both heads on one split: (target, adversary).
pub fn split_accuracy<T: Scalar>(
    model: &mut DualHeadModel<T>,
    data: &Dataset,
    split: Split,
) -> Result<(f64, f64)> {
    let indices = data.indices_of(split);
    if indices.is_empty() {
        return Err(Error::EmptyInput {
            what: format!("{split} split"),
        });
    }
    let (mut y_hits, mut z_hits) = (0usize, 0usize);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (images, ys, zs) = data.batch::<T>(chunk);
        let (y_logits, z_logits) = model.predict(&images)?;
        let cy = model.n_target_classes();
        let cz = model.n_protected_groups();
        for (row, (&y, &z)) in ys.iter().zip(&zs).enumerate() {
            let yr: Vec<f64> = y_logits.data()[row * cy..(row + 1) * cy]
                .iter()
                .map(|v| v.to_f64())
                .collect();
            let zr: Vec<f64> = z_logits.data()[row * cz..(row + 1) * cz]
                .iter()
                .map(|v| v.to_f64())
                .collect();
            y_hits += (argmax_row(&yr) == y) as usize;
            z_hits += (argmax_row(&zr) == z) as usize;
        }
    }
    let n = indices.len() as f64;
    Ok((y_hits as f64 / n, z_hits as f64 / n))
}

/// Predictor softmax scores for one split, packaged for fairness reporting.
pub fn predictions_for_split<T: Scalar>(
    model: &mut DualHeadModel<T>,
    data: &Dataset,
    split: Split,
) -> Result<PredictionSet> {
    let indices = data.indices_of(split);
    if indices.is_empty() {
        return Err(Error::EmptyInput {
            what: format!("{split} split"),
        });
    }
    let mut preds = PredictionSet::new(model.n_target_classes(), model.n_protected_groups());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (images, ys, zs) = data.batch::<T>(chunk);
        let (y_logits, _) = model.predict(&images)?;
        let rows = softmax_rows(&y_logits);
        for (row, &i) in chunk.iter().enumerate() {
            preds.push(&rows[row], ys[row], zs[row], data.metas[i].patient_id)?;
        }
    }
    Ok(preds)
}

/// Seeded Fisher-Yates order of the train split for one epoch.
fn shuffled_train_indices(data: &Dataset, seed: u64, tag: &str, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut indices = data.indices_of(Split::Train);
    let mut rng = stream(seed, tag, epoch as u64);
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    indices
}

/// Shared epoch loop. `lambda` is the effective adversarial weight: the
/// baseline passes 0 here no matter what the config says, which is exactly
/// the lambda = 0 degeneration of `two_step_update`.
fn run_epochs<T: Scalar>(
    model: &mut DualHeadModel<T>,
    data: &Dataset,
    config: &TrainConfig,
    lambda: f64,
) -> Result<TrainLog> {
    config.validate()?;
    if data.indices_of(Split::Train).is_empty() {
        return Err(Error::EmptyInput {
            what: "train split".into(),
        });
    }
    let effective = TrainConfig { lambda, ..*config };
    let mut opt = OptimizerState::new(config.learning_rate, config.momentum)?;
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let order = shuffled_train_indices(data, config.seed, "shuffle", epoch);
        let (mut sp, mut sa, mut sc) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (images, ys, zs) = data.batch::<T>(chunk);
            let bd = two_step_update(model, &images, &ys, &zs, &effective, &mut opt)?;
            sp += bd.l_predictor;
            sa += bd.l_adversarial;
            sc += bd.combined;
            batches += 1;
        }
        let n = batches as f64;
        let (val_target_acc, val_adversary_acc) =
            split_accuracy(model, data, Split::Validation)?;
        records.push(EpochRecord {
            epoch,
            loss: LossBreakdown {
                l_predictor: sp / n,
                l_adversarial: sa / n,
                combined: sc / n,
            },
            val_target_acc,
            val_adversary_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainLog { lambda, records })
}

/// Predictor-only training: backbone + predictor head descend the predictor
/// cross-entropy; the adversarial head is never stepped (its parameters stay
/// bit-for-bit at initialization). Adversarial loss is still measured for
/// the log.
pub fn train_baseline<T: Scalar>(
    model: &mut DualHeadModel<T>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainLog> {
    if config.mode != Mode::Baseline {
        return Err(Error::InvalidConfig {
            detail: format!("train_baseline requires baseline mode, got {}", config.mode.as_str()),
        });
    }
    run_epochs(model, data, config, 0.0)
}

/// Two-step adversarial training. Full mode trains every layer; partial mode
/// applies the supplied layer selection (typically from the ablation study)
/// and freezes the rest.
pub fn train_debias<T: Scalar>(
    model: &mut DualHeadModel<T>,
    data: &Dataset,
    config: &TrainConfig,
    trainable_layers: Option<&BTreeSet<usize>>,
) -> Result<TrainLog> {
    let layers = match (config.mode, trainable_layers) {
        (Mode::FullDebias, None) => model.all_layer_ids(),
        (Mode::FullDebias, Some(_)) => {
            return Err(Error::InvalidConfig {
                detail: "full_debias trains all layers; do not pass a layer selection".into(),
            })
        }
        (Mode::PartialDebias, Some(ids)) => ids.clone(),
        (Mode::PartialDebias, None) => {
            return Err(Error::InvalidConfig {
                detail: "partial_debias requires the layer selection to fine-tune".into(),
            })
        }
        (Mode::Baseline, _) => {
            return Err(Error::InvalidConfig {
                detail: "train_debias requires full_debias or partial_debias mode".into(),
            })
        }
    };
    model.set_trainable(&layers)?;
    run_epochs(model, data, config, config.lambda)
}

/// Fit the adversarial head as a probe on the frozen backbone: only the
/// head's parameters step, on the adversarial cross-entropy, until the
/// validation adversary accuracy plateaus (3 stale epochs) or 20 epochs.
/// Marks the model probe-fitted; the log reports lambda = 1 because the
/// probe's objective is the adversarial loss alone.
pub fn fit_probe<T: Scalar>(
    model: &mut DualHeadModel<T>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if data.indices_of(Split::Train).is_empty() {
        return Err(Error::EmptyInput {
            what: "train split".into(),
        });
    }
    const MAX_EPOCHS: usize = 20;
    const PLATEAU_WINDOW: usize = 3;
    const MIN_GAIN: f64 = 1e-4;

    let saved: BTreeSet<usize> = model
        .all_layer_ids()
        .into_iter()
        .filter(|&id| model.is_trainable(id).expect("known id"))
        .collect();
    let adv_layers: BTreeSet<usize> = model.adversary_layers().iter().map(|l| l.id()).collect();
    model.set_trainable(&adv_layers)?;

    let mut opt = OptimizerState::new(config.learning_rate, config.momentum)?;
    let mut records = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    for epoch in 0..MAX_EPOCHS {
        let started = Instant::now();
        let order = shuffled_train_indices(data, config.seed, "probe", epoch);
        let (mut sp, mut sa) = (0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (images, ys, zs) = data.batch::<T>(chunk);
            {
                let mut fwd = model.forward_dual(&images)?;
                let pred_loss = fwd.graph.softmax_cross_entropy(fwd.y_logits, &ys)?;
                let adv_loss = fwd.graph.softmax_cross_entropy(fwd.z_logits, &zs)?;
                sp += fwd.graph.value(pred_loss).data()[0].to_f64();
                let la = fwd.graph.value(adv_loss).data()[0].to_f64();
                ensure_finite(la, "probe adversarial loss")?;
                sa += la;
                fwd.graph.backward(adv_loss, T::one())?;
            }
            let ids = model.trainable_adversary_param_ids();
            sgd_step(model.params_mut(), &ids, &mut opt)?;
            batches += 1;
        }
        let n = batches as f64;
        let (val_target_acc, val_adversary_acc) =
            split_accuracy(model, data, Split::Validation)?;
        records.push(EpochRecord {
            epoch,
            loss: LossBreakdown {
                l_predictor: sp / n,
                l_adversarial: sa / n,
                combined: sp / n + sa / n,
            },
            val_target_acc,
            val_adversary_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
        if val_adversary_acc > best + MIN_GAIN {
            best = val_adversary_acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= PLATEAU_WINDOW {
                break;
            }
        }
    }
    model.set_trainable(&saved)?;
    model.mark_adv_head_fitted();
    Ok(TrainLog {
        lambda: 1.0,
        records,
    })
}
