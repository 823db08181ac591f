//! Subcommand implementations: thin orchestration over the core library.
//! Every artifact is written atomically and starts with a provenance block
//! echoing the semantic configuration. Provenance never includes filesystem
//! paths, so reruns into different directories produce identical bytes.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use debiaslab_core::ablation::{
    run_ablation_study, select_finetune_layers, AblationReport, FinetuneSelection, LayerAblation,
};
use debiaslab_core::checkpoint::{load_model, save_model};
use debiaslab_core::data::{
    bias_audit, generate_dataset, read_dataset, write_dataset, Dataset, GeneratorConfig, Split,
};
use debiaslab_core::error::Error as CoreError;
use debiaslab_core::fairness::{build_reports, FairnessReport};
use debiaslab_core::fsio::write_atomic;
use debiaslab_core::model::{default_backbone, DualHeadModel, FilterMask};
use debiaslab_core::scalar::{Precision, Scalar};
use debiaslab_core::train::{
    fit_probe, predictions_for_split, train_baseline, train_debias, Mode, Pass2Apply, TrainConfig,
};

use crate::args::{AblateArgs, GenerateArgs, ReportArgs, TrainArgs};
use crate::provenance::Provenance;
use crate::svg::{disparity_svg, MODELS};

/// CLI-level failure: a usage problem, or a core error tagged with the
/// stage that hit it so the message names what was being attempted.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Stage {
        stage: &'static str,
        source: CoreError,
    },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Stage { stage, source } => write!(f, "{stage}: {source}"),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Usage(_) => None,
            CliError::Stage { source, .. } => Some(source),
        }
    }
}

impl CliError {
    /// 2 usage, 4 numeric divergence, 3 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Stage { source, .. } => match source {
                CoreError::NonFiniteLoss { .. } | CoreError::GradCheckFailed { .. } => 4,
                _ => 3,
            },
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> StageExt<T> for Result<T, CoreError> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}

impl<T> StageExt<T> for std::io::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Stage {
            stage,
            source: CoreError::Io(e),
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "NA".into(),
    }
}

fn dataset_section(p: Provenance, config: &GeneratorConfig) -> Provenance {
    p.section("dataset")
        .kv("patients", config.n_patients)
        .kv("images_per_patient", config.images_per_patient)
        .kv("height", config.height)
        .kv("width", config.width)
        .kv("classes", config.c_y)
        .kv("groups", config.c_z)
        .kv("bias", config.rho)
        .kv("amplitude", config.amplitude)
        .kv("noise", config.noise)
        .kv("seed", config.seed)
}

fn run_section(command: &str, precision: Precision) -> Provenance {
    Provenance::new()
        .section("run")
        .kv("command", command)
        .kv("precision", precision)
}

fn train_section(p: Provenance, config: &TrainConfig) -> Provenance {
    let apply = match config.pass2_apply {
        Pass2Apply::Immediate => "immediate",
        Pass2Apply::Summed => "summed",
    };
    p.section("train")
        .kv("mode", config.mode.as_str())
        .kv("lambda", config.lambda)
        .kv("learning_rate", config.learning_rate)
        .kv("momentum", config.momentum)
        .kv("epochs", config.epochs)
        .kv("batch_size", config.batch_size)
        .kv("seed", config.seed)
        .kv("pass2_fresh_forward", config.pass2_fresh_forward)
        .kv("pass2_updates_adversary", config.pass2_updates_adversary)
        .kv("pass2_apply", apply)
}

/// The loaded checkpoint must be evaluable on this dataset.
fn check_model_matches<T: Scalar>(model: &DualHeadModel<T>, data: &Dataset) -> Result<(), CoreError> {
    let (h, w) = model.input_hw();
    let c = &data.config;
    if h == c.height && w == c.width && model.n_target_classes() == c.c_y && model.n_protected_groups() == c.c_z {
        Ok(())
    } else {
        Err(CoreError::CheckpointMismatch {
            detail: format!(
                "checkpoint expects {h}x{w} images with {} classes / {} groups; dataset provides {}x{} with {} / {}",
                model.n_target_classes(),
                model.n_protected_groups(),
                c.height,
                c.width,
                c.c_y,
                c.c_z
            ),
        })
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let config = GeneratorConfig {
        n_patients: args.patients,
        images_per_patient: args.images_per_patient,
        height: args.height,
        width: args.width,
        c_y: args.classes,
        c_z: args.groups,
        rho: args.bias,
        amplitude: args.amplitude,
        noise: args.noise,
        seed: args.seed,
    };
    let dataset = generate_dataset(&config).stage("generate dataset")?;
    write_dataset(&dataset, &args.out).stage("write dataset")?;
    let audit = bias_audit(&dataset).stage("audit dataset")?;
    println!(
        "wrote {} images ({} patients x {}) to {}",
        dataset.len(),
        config.n_patients,
        config.images_per_patient,
        args.out.display()
    );
    println!(
        "label-group association: overall Cramer's V {:.4} (chi-square {:.2}, n {})",
        audit.overall.cramers_v, audit.overall.chi_square, audit.overall.n
    );
    for (split, table) in &audit.per_split {
        println!("  {split}: V {:.4} (n {})", table.cramers_v, table.n);
    }
    Ok(())
}

fn parse_pass2_apply(s: &str) -> Result<Pass2Apply, CliError> {
    match s {
        "immediate" => Ok(Pass2Apply::Immediate),
        "summed" => Ok(Pass2Apply::Summed),
        other => Err(CliError::Usage(format!(
            "--pass2-apply must be 'immediate' or 'summed', got '{other}'"
        ))),
    }
}

fn probe_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        mode: Mode::Baseline,
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        batch_size: config.batch_size,
        seed: config.seed,
        ..TrainConfig::default()
    }
}

fn fit_probe_if_needed<T: Scalar>(
    model: &mut DualHeadModel<T>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(), CliError> {
    if model.adv_head_fitted() {
        return Ok(());
    }
    let log = fit_probe(model, data, &probe_config(config)).stage("fit adversarial probe")?;
    eprintln!(
        "fitted adversarial probe: {} epochs, final validation adversary accuracy {:.4}",
        log.records.len(),
        log.final_val_adversary_acc().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn selection_text(sel: &FinetuneSelection, k: usize, prov: &Provenance) -> String {
    let layers: Vec<String> = sel.layer_ids.iter().map(|id| id.to_string()).collect();
    format!(
        "{}pivot={}\nk={}\nlayers={}\n",
        prov.comment_block(),
        sel.pivot,
        k,
        layers.join(",")
    )
}

fn malformed_report(path: &Path, detail: String) -> CliError {
    CliError::Stage {
        stage: "parse ablation report",
        source: CoreError::BadManifest {
            path: path.display().to_string(),
            detail,
        },
    }
}

/// Inverse of `AblationReport::to_csv`: provenance comments are skipped
/// (except a `fraction=` echo), filter masks come back from the
/// semicolon-joined column.
pub fn parse_ablation_csv(path: &Path) -> Result<AblationReport, CliError> {
    let text = fs::read_to_string(path).stage("read ablation report")?;
    let mut layers = Vec::new();
    let mut baselines: Option<(f64, f64)> = None;
    let mut fraction = 0.0f64;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("fraction=") {
                fraction = v
                    .parse()
                    .map_err(|_| malformed_report(path, format!("bad fraction '{v}'")))?;
            }
            continue;
        }
        if line.starts_with("layer_id,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(malformed_report(
                path,
                format!("expected 9 columns, got {}: '{line}'", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64, CliError> {
            fields[i]
                .parse()
                .map_err(|_| malformed_report(path, format!("bad number '{}' in '{line}'", fields[i])))
        };
        let layer_id: usize = fields[0]
            .parse()
            .map_err(|_| malformed_report(path, format!("bad layer id '{}'", fields[0])))?;
        let n_filters: usize = fields[1]
            .parse()
            .map_err(|_| malformed_report(path, format!("bad filter count '{}'", fields[1])))?;
        let n_ablated: usize = fields[2]
            .parse()
            .map_err(|_| malformed_report(path, format!("bad ablated count '{}'", fields[2])))?;
        let mut filters = BTreeSet::new();
        for part in fields[3].split(';').filter(|p| !p.is_empty()) {
            let f: usize = part
                .parse()
                .map_err(|_| malformed_report(path, format!("bad filter index '{part}'")))?;
            filters.insert(f);
        }
        if filters.len() != n_ablated {
            return Err(malformed_report(
                path,
                format!(
                    "layer {layer_id} claims {n_ablated} ablated filters but lists {}",
                    filters.len()
                ),
            ));
        }
        baselines = Some((num(4)?, num(5)?));
        layers.push(LayerAblation {
            layer_id,
            mask: FilterMask { layer_id, filters },
            n_filters,
            delta_target: num(6)?,
            delta_protected: num(7)?,
        });
    }
    let (baseline_target_auc, baseline_protected_auc) =
        baselines.ok_or_else(|| malformed_report(path, "no layer rows".into()))?;
    Ok(AblationReport {
        fraction,
        baseline_target_auc,
        baseline_protected_auc,
        layers,
    })
}

fn write_ablation_outputs(
    out: &Path,
    report: &AblationReport,
    sel: &FinetuneSelection,
    k: usize,
    prov: &Provenance,
) -> Result<(), CliError> {
    let prov = prov
        .clone()
        .section("ablation")
        .kv("fraction", report.fraction)
        .kv("k", k)
        .kv("baseline_target_auc", report.baseline_target_auc)
        .kv("baseline_protected_auc", report.baseline_protected_auc);
    let csv = format!("{}{}", prov.comment_block(), report.to_csv());
    write_atomic(&out.join("ablation_report.csv"), csv.as_bytes()).stage("write ablation report")?;
    write_atomic(
        &out.join("selection.txt"),
        selection_text(sel, k, &prov).as_bytes(),
    )
    .stage("write layer selection")?;
    Ok(())
}

pub fn cmd_train<T: Scalar>(args: &TrainArgs, precision: Precision) -> Result<(), CliError> {
    let mode = Mode::parse(&args.mode).ok_or_else(|| {
        CliError::Usage(format!(
            "--mode must be 'baseline', 'full_debias' or 'partial_debias', got '{}'",
            args.mode
        ))
    })?;
    let config = TrainConfig {
        mode,
        lambda: args.lambda,
        learning_rate: args.lr,
        momentum: args.momentum,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        pass2_fresh_forward: args.pass2_fresh_forward,
        pass2_updates_adversary: args.pass2_updates_adversary,
        pass2_apply: parse_pass2_apply(&args.pass2_apply)?,
    };
    config.validate().stage("validate training config")?;
    let data = read_dataset(&args.data).stage("read dataset")?;
    fs::create_dir_all(&args.out).stage("create output directory")?;
    let prov = train_section(
        dataset_section(run_section("train", precision), &data.config),
        &config,
    );

    let (model, log) = match mode {
        Mode::Baseline | Mode::FullDebias => {
            if args.baseline_checkpoint.is_some() || args.ablation_report.is_some() {
                eprintln!(
                    "warning: --baseline-checkpoint/--ablation-report only apply to partial_debias; ignored"
                );
            }
            let mut model: DualHeadModel<T> = DualHeadModel::build_model(
                &default_backbone(),
                (data.config.height, data.config.width),
                data.config.c_y,
                data.config.c_z,
                args.seed,
            )
            .stage("build model")?;
            let log = match mode {
                Mode::Baseline => train_baseline(&mut model, &data, &config).stage("train baseline")?,
                _ => train_debias(&mut model, &data, &config, None).stage("train full debias")?,
            };
            (model, log)
        }
        Mode::PartialDebias => {
            let ckpt = args.baseline_checkpoint.as_deref().ok_or_else(|| {
                CliError::Usage("partial_debias requires --baseline-checkpoint".into())
            })?;
            let mut model: DualHeadModel<T> =
                load_model(ckpt).stage("load baseline checkpoint")?;
            check_model_matches(&model, &data).stage("check checkpoint against dataset")?;
            let report = match &args.ablation_report {
                Some(path) => parse_ablation_csv(path)?,
                None => {
                    fit_probe_if_needed(&mut model, &data, &config)?;
                    run_ablation_study(&model, &data, Split::Validation, args.fraction)
                        .stage("ablation study")?
                }
            };
            let sel = select_finetune_layers(&model, &report, args.k)
                .stage("select fine-tune layers")?;
            write_ablation_outputs(&args.out, &report, &sel, args.k, &prov)?;
            println!(
                "fine-tuning from layer {} ({} of {} layers trainable)",
                sel.pivot,
                sel.layer_ids.len(),
                model.n_layers()
            );
            let log = train_debias(&mut model, &data, &config, Some(&sel.layer_ids))
                .stage("train partial debias")?;
            (model, log)
        }
    };

    save_model(&model, &args.out.join("checkpoint.dblb")).stage("save checkpoint")?;
    let log_csv = format!("{}{}", prov.comment_block(), log.to_csv());
    write_atomic(&args.out.join("train_log.csv"), log_csv.as_bytes()).stage("write train log")?;
    println!(
        "trained {} for {} epochs: final validation target accuracy {:.4}, adversary accuracy {:.4}",
        mode.as_str(),
        log.records.len(),
        log.final_val_target_acc().unwrap_or(f64::NAN),
        log.final_val_adversary_acc().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", args.out.join("checkpoint.dblb").display());
    Ok(())
}

pub fn cmd_ablate<T: Scalar>(args: &AblateArgs, precision: Precision) -> Result<(), CliError> {
    let data = read_dataset(&args.data).stage("read dataset")?;
    let mut model: DualHeadModel<T> = load_model(&args.checkpoint).stage("load checkpoint")?;
    check_model_matches(&model, &data).stage("check checkpoint against dataset")?;
    fs::create_dir_all(&args.out).stage("create output directory")?;
    let config = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    fit_probe_if_needed(&mut model, &data, &config)?;
    let report =
        run_ablation_study(&model, &data, Split::Validation, args.fraction).stage("ablation study")?;
    let sel = select_finetune_layers(&model, &report, args.k).stage("select fine-tune layers")?;
    let prov = dataset_section(run_section("ablate", precision), &data.config);
    write_ablation_outputs(&args.out, &report, &sel, args.k, &prov)?;
    save_model(&model, &args.out.join("probe_checkpoint.dblb")).stage("save probe checkpoint")?;
    println!(
        "baseline macro AUC: target {:.4}, protected {:.4}",
        report.baseline_target_auc, report.baseline_protected_auc
    );
    for layer in &report.layers {
        println!(
            "layer {}: ablated {}/{} filters, delta target {:+.4}, delta protected {:+.4}, score {:+.4}",
            layer.layer_id,
            layer.mask.filters.len(),
            layer.n_filters,
            layer.delta_target,
            layer.delta_protected,
            layer.score()
        );
    }
    println!(
        "pivot layer {}; fine-tune selection: {}",
        sel.pivot,
        sel.layer_ids
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    Ok(())
}

/// `class,metric,baseline,partial,full` grid over AUC/precision/recall.
fn comparison_table_csv(c_y: usize, reports: &[FairnessReport], prov: &Provenance) -> String {
    let mut out = prov.comment_block();
    out.push_str("class,metric,baseline,partial,full\n");
    for class in 0..c_y {
        for (metric, pick) in [
            ("auc", 0usize),
            ("precision", 1),
            ("recall", 2),
        ] {
            let cells: Vec<String> = reports
                .iter()
                .map(|r| {
                    let m = &r.per_class[class];
                    fmt_opt(match pick {
                        0 => m.auc,
                        1 => m.precision,
                        _ => m.recall,
                    })
                })
                .collect();
            out.push_str(&format!("{class},{metric},{}\n", cells.join(",")));
        }
    }
    out
}

fn comparison_table_text(c_y: usize, reports: &[FairnessReport]) -> String {
    let mut out = String::from("class  metric     baseline  partial   full\n");
    for class in 0..c_y {
        for (metric, pick) in [("auc", 0usize), ("precision", 1), ("recall", 2)] {
            let cell = |r: &FairnessReport| {
                let m = &r.per_class[class];
                match match pick {
                    0 => m.auc,
                    1 => m.precision,
                    _ => m.recall,
                } {
                    Some(v) => format!("{v:.4}"),
                    None => "NA".into(),
                }
            };
            out.push_str(&format!(
                "{class:<6} {metric:<10} {:<9} {:<9} {}\n",
                cell(&reports[0]),
                cell(&reports[1]),
                cell(&reports[2])
            ));
        }
    }
    out
}

pub fn cmd_report<T: Scalar>(args: &ReportArgs, precision: Precision) -> Result<(), CliError> {
    let data = read_dataset(&args.data).stage("read dataset")?;
    fs::create_dir_all(&args.out).stage("create output directory")?;
    let paths = [&args.baseline, &args.partial, &args.full];
    let base_prov = dataset_section(run_section("report", precision), &data.config)
        .section("report")
        .kv("ref_group", args.ref_group)
        .kv("split", Split::Test);

    let mut reports: Vec<FairnessReport> = Vec::new();
    for ((name, _), path) in MODELS.iter().zip(paths) {
        let mut model: DualHeadModel<T> = load_model(path).stage("load checkpoint")?;
        check_model_matches(&model, &data).stage("check checkpoint against dataset")?;
        let preds =
            predictions_for_split(&mut model, &data, Split::Test).stage("evaluate test split")?;
        let report = build_reports(&preds, args.ref_group).stage("build fairness report")?;
        let prov = base_prov.clone().section("model").kv("name", *name);
        let csv = format!("{}{}", prov.comment_block(), report.to_csv());
        write_atomic(&args.out.join(format!("fairness_{name}.csv")), csv.as_bytes())
            .stage("write fairness report")?;
        reports.push(report);
    }

    let table = comparison_table_csv(data.config.c_y, &reports, &base_prov);
    write_atomic(&args.out.join("comparison_table.csv"), table.as_bytes())
        .stage("write comparison table")?;
    let text = comparison_table_text(data.config.c_y, &reports);
    write_atomic(&args.out.join("comparison_table.txt"), text.as_bytes())
        .stage("write comparison table")?;

    for group in (0..data.config.c_z).filter(|&g| g != args.ref_group) {
        let per_class: Vec<[Option<f64>; 3]> = (0..data.config.c_y)
            .map(|class| {
                let mut row = [None; 3];
                for (m, report) in reports.iter().enumerate() {
                    row[m] = report
                        .disparities
                        .iter()
                        .find(|d| d.class == class && d.group == group)
                        .and_then(|d| d.disparity);
                }
                row
            })
            .collect();
        let prov = base_prov.clone().section("plot").kv("group", group);
        let svg = disparity_svg(group, args.ref_group, &per_class, &prov.xml_comment());
        write_atomic(
            &args.out.join(format!("disparity_group{group}.svg")),
            svg.as_bytes(),
        )
        .stage("write disparity plot")?;
    }

    for ((name, _), report) in MODELS.iter().zip(&reports) {
        println!(
            "{name}: macro AUC {}, mean |ln disparity| {}",
            fmt_opt(report.macro_auc()),
            fmt_opt(report.mean_abs_ln_disparity())
        );
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use debiaslab_core::fairness::PredictionSet;

    #[test]
    fn exit_codes_map_error_classes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        let divergence = CliError::Stage {
            stage: "train",
            source: CoreError::NonFiniteLoss {
                value: f64::NAN,
                context: "pass 1".into(),
            },
        };
        assert_eq!(divergence.exit_code(), 4);
        let data = CliError::Stage {
            stage: "read dataset",
            source: CoreError::EmptyInput { what: "x".into() },
        };
        assert_eq!(data.exit_code(), 3);
    }

    #[test]
    fn ablation_csv_round_trips_through_parser() {
        let report = AblationReport {
            fraction: 0.1,
            baseline_target_auc: 0.925,
            baseline_protected_auc: 0.75,
            layers: vec![
                LayerAblation {
                    layer_id: 0,
                    mask: FilterMask {
                        layer_id: 0,
                        filters: [0, 3].into_iter().collect(),
                    },
                    n_filters: 16,
                    delta_target: -0.0125,
                    delta_protected: -0.25,
                },
                LayerAblation {
                    layer_id: 2,
                    mask: FilterMask {
                        layer_id: 2,
                        filters: [1].into_iter().collect(),
                    },
                    n_filters: 8,
                    delta_target: -0.2,
                    delta_protected: 0.0,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation_report.csv");
        let prov = Provenance::new().section("ablation").kv("fraction", 0.1);
        std::fs::write(&path, format!("{}{}", prov.comment_block(), report.to_csv())).unwrap();
        let parsed = parse_ablation_csv(&path).unwrap();
        assert_eq!(parsed.fraction, 0.1);
        assert_eq!(parsed.baseline_target_auc, report.baseline_target_auc);
        assert_eq!(parsed.baseline_protected_auc, report.baseline_protected_auc);
        assert_eq!(parsed.layers.len(), 2);
        for (a, b) in parsed.layers.iter().zip(&report.layers) {
            assert_eq!(a.layer_id, b.layer_id);
            assert_eq!(a.mask.filters, b.mask.filters);
            assert_eq!(a.n_filters, b.n_filters);
            assert_eq!(a.delta_target, b.delta_target);
            assert_eq!(a.delta_protected, b.delta_protected);
        }
    }

    #[test]
    fn malformed_ablation_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "layer_id,n_filters\n0,1\n").unwrap();
        let err = parse_ablation_csv(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("expected 9 columns"), "{err}");
    }

    #[test]
    fn comparison_table_covers_full_grid_with_na_for_undefined() {
        // Two classes, predictions that never pick class 1 for one model
        // would make precision undefined; emulate with a tiny prediction set.
        let mut preds = PredictionSet::new(2, 2);
        for (scores, y, z, pid) in [
            ([0.9, 0.1], 0usize, 0usize, 0u64),
            ([0.8, 0.2], 0, 1, 1),
            ([0.7, 0.3], 1, 0, 2),
            ([0.6, 0.4], 1, 1, 3),
        ] {
            preds.push(&scores, y, z, pid).unwrap();
        }
        let report = build_reports(&preds, 0).unwrap();
        let reports = vec![report.clone(), report.clone(), report];
        let csv = comparison_table_csv(2, &reports, &Provenance::new());
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 1 + 2 * 3, "header plus class x metric grid");
        assert!(rows[0].starts_with("class,metric,"));
        // Class 1 is never predicted: precision undefined, recall 0.
        let p1 = rows.iter().find(|r| r.starts_with("1,precision,")).unwrap();
        assert_eq!(*p1, "1,precision,NA,NA,NA");
        let r1 = rows.iter().find(|r| r.starts_with("1,recall,")).unwrap();
        assert_eq!(*r1, "1,recall,0,0,0");
    }
}
