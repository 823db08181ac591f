//! Evaluation metrics: one-vs-rest AUC (Mann-Whitney, exact under ties),
//! per-class precision/recall, per-group TPR disparity against a reference
//! group, and the 80% fairness band. Undefined quantities (zero
//! denominators, single-class inputs) surface as None, never as fabricated
//! numbers.

use crate::error::{Error, Result};

/// Mann-Whitney AUC. Rank-based, but exact: ranks are handled as doubled
/// integers (a tie group spanning 1-based ranks i..j contributes i+j per
/// member), so the result is the same rational number the O(n^2) pairwise
/// count produces, down to the final division.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auc_roc".into(),
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassInput {
            what: "auc_roc".into(),
        });
    }
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of doubled ranks over positives.
    let mut r2: u64 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            if labels[k] {
                r2 += doubled;
            }
        }
        i = j + 1;
    }
    let u2 = r2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Reference implementation: count every (positive, negative) pair. Shares
/// the integer arithmetic shape of `auc_roc` so equality is exact.
pub fn auc_pairwise_oracle(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassInput {
            what: "auc_pairwise_oracle".into(),
        });
    }
    let mut twice_wins: u64 = 0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                twice_wins += 2;
            } else if scores[i] == scores[j] {
                twice_wins += 1;
            }
        }
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC over raw score rows: mean of the per-class AUCs
/// that are defined (classes absent from `labels`, or covering all of it,
/// are skipped). None when no class has a defined AUC.
pub fn macro_ovr_auc(score_rows: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Option<f64> {
    let mut defined = Vec::new();
    for class in 0..n_classes {
        let scores: Vec<f64> = score_rows.iter().map(|r| r[class]).collect();
        let flags: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if let Ok(auc) = auc_roc(&scores, &flags) {
            defined.push(auc);
        }
    }
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per (class, group) confusion cell from argmax decisions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cell {
    pub true_pos: u64,
    pub false_neg: u64,
    pub false_pos: u64,
    pub true_neg: u64,
}

#[derive(Clone, Debug)]
pub struct ConfusionCounts {
    pub c_y: usize,
    pub c_z: usize,
    cells: Vec<Cell>,
}

impl ConfusionCounts {
    pub fn cell(&self, class: usize, group: usize) -> Cell {
        self.cells[class * self.c_z + group]
    }

    /// Aggregate one class over all groups.
    pub fn class_total(&self, class: usize) -> Cell {
        let mut acc = Cell::default();
        for g in 0..self.c_z {
            let c = self.cell(class, g);
            acc.true_pos += c.true_pos;
            acc.false_neg += c.false_neg;
            acc.false_pos += c.false_pos;
            acc.true_neg += c.true_neg;
        }
        acc
    }

    pub fn tpr(&self, class: usize, group: usize) -> Option<f64> {
        let c = self.cell(class, group);
        let denom = c.true_pos + c.false_neg;
        (denom > 0).then(|| c.true_pos as f64 / denom as f64)
    }
}

/// (precision, recall) for one class, groups pooled. None flags an empty
/// denominator rather than coercing it to a number.
pub fn precision_recall(counts: &ConfusionCounts, class: usize) -> (Option<f64>, Option<f64>) {
    let c = counts.class_total(class);
    let precision = (c.true_pos + c.false_pos > 0)
        .then(|| c.true_pos as f64 / (c.true_pos + c.false_pos) as f64);
    let recall = (c.true_pos + c.false_neg > 0)
        .then(|| c.true_pos as f64 / (c.true_pos + c.false_neg) as f64);
    (precision, recall)
}

/// TPR_group / TPR_ref. None when either TPR is undefined or the reference
/// TPR is zero.
pub fn tpr_disparity(
    counts: &ConfusionCounts,
    class: usize,
    group: usize,
    ref_group: usize,
) -> Result<Option<f64>> {
    if group == ref_group {
        return Err(Error::InvalidConfig {
            detail: format!("disparity of group {group} against itself"),
        });
    }
    if group >= counts.c_z || ref_group >= counts.c_z {
        return Err(Error::UnknownReferenceGroup {
            group: group.max(ref_group),
        });
    }
    let tpr_g = counts.tpr(class, group);
    let tpr_r = counts.tpr(class, ref_group);
    Ok(match (tpr_g, tpr_r) {
        (Some(g), Some(r)) if r > 0.0 => Some(g / r),
        _ => None,
    })
}

/// 80% rule, both endpoints fair. The band [0.8, 1.25] is exactly closed
/// under reciprocals.
pub fn fairness_flag(disparity: f64) -> bool {
    (0.8..=1.25).contains(&disparity)
}

/// Per-sample softmax scores with labels, group ids, and patient ids.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    c_y: usize,
    c_z: usize,
    scores: Vec<f64>,
    y: Vec<usize>,
    z: Vec<usize>,
    patients: Vec<u64>,
}

impl PredictionSet {
    pub fn new(c_y: usize, c_z: usize) -> PredictionSet {
        PredictionSet {
            c_y,
            c_z,
            scores: Vec::new(),
            y: Vec::new(),
            z: Vec::new(),
            patients: Vec::new(),
        }
    }

    pub fn push(&mut self, scores: &[f64], y: usize, z: usize, patient_id: u64) -> Result<()> {
        if scores.len() != self.c_y {
            return Err(Error::ShapeMismatch {
                op: "PredictionSet::push".into(),
                detail: format!("{} scores for {} classes", scores.len(), self.c_y),
            });
        }
        let sum: f64 = scores.iter().sum();
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig {
                detail: format!("scores must lie in [0,1] and sum to 1 (+-1e-6), got {scores:?}"),
            });
        }
        if y >= self.c_y || z >= self.c_z {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "labels ({y},{z}) outside vocabularies ({},{})",
                    self.c_y, self.c_z
                ),
            });
        }
        self.scores.extend_from_slice(scores);
        self.y.push(y);
        self.z.push(z);
        self.patients.push(patient_id);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn c_y(&self) -> usize {
        self.c_y
    }

    pub fn c_z(&self) -> usize {
        self.c_z
    }

    pub fn score_row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.c_y..(i + 1) * self.c_y]
    }

    pub fn label(&self, i: usize) -> (usize, usize) {
        (self.y[i], self.z[i])
    }

    pub fn confusion_counts(&self) -> ConfusionCounts {
        let mut cells = vec![Cell::default(); self.c_y * self.c_z];
        for i in 0..self.len() {
            let pred = crate::model::argmax_row(self.score_row(i));
            let (actual, group) = (self.y[i], self.z[i]);
            for class in 0..self.c_y {
                let cell = &mut cells[class * self.c_z + group];
                match (actual == class, pred == class) {
                    (true, true) => cell.true_pos += 1,
                    (true, false) => cell.false_neg += 1,
                    (false, true) => cell.false_pos += 1,
                    (false, false) => cell.true_neg += 1,
                }
            }
        }
        ConfusionCounts {
            c_y: self.c_y,
            c_z: self.c_z,
            cells,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisparityCell {
    pub class: usize,
    pub group: usize,
    pub tpr_group: Option<f64>,
    pub tpr_ref: Option<f64>,
    pub disparity: Option<f64>,
    pub fair: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct FairnessReport {
    pub ref_group: usize,
    pub per_class: Vec<ClassMetrics>,
    pub disparities: Vec<DisparityCell>,
    pub counts: ConfusionCounts,
}

impl FairnessReport {
    /// Mean of the defined per-class AUCs.
    pub fn macro_auc(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class.iter().filter_map(|c| c.auc).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Mean |ln disparity| over the defined cells; 0 means full parity.
    pub fn mean_abs_ln_disparity(&self) -> Option<f64> {
        let defined: Vec<f64> = self
            .disparities
            .iter()
            .filter_map(|d| d.disparity)
            .filter(|d| *d > 0.0)
            .map(|d| d.ln().abs())
            .collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// class,group,tpr,tpr_ref,disparity,fair with NA for undefined cells.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        let mut out = String::from("class,group,tpr,tpr_ref,disparity,fair\n");
        for d in &self.disparities {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                d.class,
                d.group,
                fmt_opt(d.tpr_group),
                fmt_opt(d.tpr_ref),
                fmt_opt(d.disparity),
                d.fair.map_or("NA".to_string(), |f| f.to_string()),
            ));
        }
        out
    }

    /// Aligned text block: one row per class, metric columns.
    pub fn to_text(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("     NA".to_string(), |x| format!("{x:7.4}"));
        let mut out = String::from("class     auc  precision   recall\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{:>5} {} {:>10} {:>8}\n",
                c.class,
                fmt_opt(c.auc),
                fmt_opt(c.precision).trim_start(),
                fmt_opt(c.recall).trim_start(),
            ));
        }
        out
    }
}

/// Assemble the full report: argmax confusion counts, one-vs-rest AUC per
/// class, precision/recall per class, disparity cells for every non-reference
/// group. Degenerate cells are kept, flagged undefined.
pub fn build_reports(preds: &PredictionSet, ref_group: usize) -> Result<FairnessReport> {
    if preds.is_empty() {
        return Err(Error::EmptyInput {
            what: "prediction set".into(),
        });
    }
    if ref_group >= preds.c_z() || !(0..preds.len()).any(|i| preds.label(i).1 == ref_group) {
        return Err(Error::UnknownReferenceGroup { group: ref_group });
    }
    let counts = preds.confusion_counts();
    let per_class = (0..preds.c_y())
        .map(|class| {
            let scores: Vec<f64> = (0..preds.len())
                .map(|i| preds.score_row(i)[class])
                .collect();
            let labels: Vec<bool> = (0..preds.len()).map(|i| preds.label(i).0 == class).collect();
            let auc = match auc_roc(&scores, &labels) {
                Ok(v) => Some(v),
                Err(Error::SingleClassInput { .. }) => None,
                Err(e) => return Err(e),
            };
            let (precision, recall) = precision_recall(&counts, class);
            Ok(ClassMetrics {
                class,
                auc,
                precision,
                recall,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut disparities = Vec::new();
    for class in 0..preds.c_y() {
        for group in (0..preds.c_z()).filter(|&g| g != ref_group) {
            let disparity = tpr_disparity(&counts, class, group, ref_group)?;
            disparities.push(DisparityCell {
                class,
                group,
                tpr_group: counts.tpr(class, group),
                tpr_ref: counts.tpr(class, ref_group),
                disparity,
                fair: disparity.map(fairness_flag),
            });
        }
    }
    Ok(FairnessReport {
        ref_group,
        per_class,
        disparities,
        counts,
    })
}
