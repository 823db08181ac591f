//! Synthetic biased image data. Each patient has a fixed protected group;
//! images combine a class-specific geometric template (center box), a
//! group-specific corner gradient watermark, and Gaussian pixel noise. Class
//! draws are skewed toward the group's favored classes with probability rho
//! per patient, except on the test split where rho is forced to 0 so the
//! spurious shortcut fails exactly where fairness is measured.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Intensity of template pattern pixels before noise. Kept well below the
/// default group-signature amplitude so the class signal is the subtler of
/// the two, as in real imaging cohorts where demographic cues are glaring
/// and pathology is not; templates stay trivially matched-filterable since
/// the per-template contrast-to-noise ratio is still about 20.
const TEMPLATE_LEVEL: f64 = 0.1;
const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub height: usize,
    pub width: usize,
    pub c_y: usize,
    pub c_z: usize,
    /// Probability a train/validation patient's class draws are skewed
    /// toward the group's favored classes.
    pub rho: f64,
    /// Pixel strength of the group watermark.
    pub amplitude: f64,
    /// Gaussian pixel noise sigma.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 100,
            images_per_patient: 4,
            height: 28,
            width: 28,
            c_y: 4,
            c_z: 2,
            rho: 0.9,
            amplitude: 0.4,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvalidConfig { detail });
        if self.n_patients == 0 || self.images_per_patient == 0 {
            return bad("patient and image counts must be positive".into());
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!(
                "images must be at least 8x8 for disjoint template and watermark regions, got {}x{}",
                self.height, self.width
            ));
        }
        if self.c_y < 2 || self.c_y > 4 {
            return bad(format!("c_y must be in [2,4] (one template per class), got {}", self.c_y));
        }
        if self.c_z < 2 || self.c_z > 4 {
            return bad(format!("c_z must be in [2,4] (one corner per group), got {}", self.c_z));
        }
        for (name, v) in [("rho", self.rho), ("amplitude", self.amplitude)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0,1], got {v}"));
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be a finite non-negative sigma, got {}", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub patient_id: u64,
    pub y: usize,
    pub z: usize,
    pub split: Split,
}

/// One sample materialized as a tensor, for callers that want per-sample
/// access rather than batch assembly.
#[derive(Clone, Debug)]
pub struct LabeledSample<T: Scalar> {
    pub image: Tensor<T>,
    pub y: usize,
    pub z: usize,
    pub patient_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub metas: Vec<SampleMeta>,
    /// Row-major pixels, n_images * height * width, each in [0,1].
    pub images: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.config.height * self.config.width;
        &self.images[i * px..(i + 1) * px]
    }

    pub fn sample<T: Scalar>(&self, i: usize) -> LabeledSample<T> {
        let m = self.metas[i];
        let data: Vec<T> = self.image(i).iter().map(|&v| T::from_f32(v)).collect();
        LabeledSample {
            image: Tensor::from_vec(&[1, self.config.height, self.config.width], data)
                .expect("image length fixed by construction"),
            y: m.y,
            z: m.z,
            patient_id: m.patient_id,
        }
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.metas
            .iter()
            .enumerate()
            .filter(|(_, m)| m.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Batch tensor [n,1,h,w] plus y and z label vectors for `indices`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>, Vec<usize>) {
        let (h, w) = (self.config.height, self.config.width);
        let mut data = Vec::with_capacity(indices.len() * h * w);
        let mut ys = Vec::with_capacity(indices.len());
        let mut zs = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f32(v)));
            ys.push(self.metas[i].y);
            zs.push(self.metas[i].z);
        }
        let t = Tensor::from_vec(&[indices.len(), 1, h, w], data)
            .expect("batch length fixed by construction");
        (t, ys, zs)
    }
}

/// Split tag per patient id.
pub type SplitSpec = BTreeMap<u64, Split>;

/// Shuffle patients by seed, then cut 60:20:20 by largest-remainder
/// rounding. All of a patient's images share the patient's split.
pub fn patientwise_split(patient_ids: &[u64], ratios: (f64, f64, f64), seed: u64) -> Result<SplitSpec> {
    let n = patient_ids.len();
    if n < 5 {
        return Err(Error::TooFewPatients {
            what: "patient-wise split".into(),
            min: 5,
            got: n,
        });
    }
    let rs = [ratios.0, ratios.1, ratios.2];
    if rs.iter().any(|r| *r < 0.0) || (rs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig {
            detail: format!("split ratios must be non-negative and sum to 1, got {rs:?}"),
        });
    }

    let mut order: Vec<u64> = patient_ids.to_vec();
    let mut rng = stream(seed, "split", 0);
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    // Largest remainder: floor quotas, then hand out leftovers by fractional
    // part, ties broken in split order (train, validation, test).
    let quotas: Vec<f64> = rs.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut by_frac: Vec<usize> = (0..3).collect();
    by_frac.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &by_frac {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }

    let mut spec = SplitSpec::new();
    let mut cursor = 0usize;
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        for &pid in &order[cursor..cursor + count] {
            spec.insert(pid, *split);
        }
        cursor += count;
    }
    Ok(spec)
}

/// Classes favored by group g: those c with floor(c * c_z / c_y) == g.
/// Groups with no favored class fall back to the full class range.
fn favored_classes(g: usize, c_y: usize, c_z: usize) -> Vec<usize> {
    let fav: Vec<usize> = (0..c_y).filter(|&c| c * c_z / c_y == g).collect();
    if fav.is_empty() {
        (0..c_y).collect()
    } else {
        fav
    }
}

/// Class templates drawn inside the center box [h/4, 3h/4) x [w/4, 3w/4):
/// 0 horizontal bars, 1 vertical bars, 2 centered disk, 3 diagonal cross.
pub fn template_value(y: usize, r: usize, c: usize, h: usize, w: usize) -> f64 {
    let (top, left) = (h / 4, w / 4);
    let (bottom, right) = (3 * h / 4, 3 * w / 4);
    if r < top || r >= bottom || c < left || c >= right {
        return 0.0;
    }
    let hit = match y {
        0 => (r - top) / 2 % 2 == 0,
        1 => (c - left) / 2 % 2 == 0,
        2 => {
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let rad = (bottom - top) as f64 / 2.0 - 0.5;
            let dr = r as f64 - cy;
            let dc = c as f64 - cx;
            dr * dr + dc * dc <= rad * rad
        }
        3 => {
            let (rr, cc) = (r - top, c - left);
            let n = (bottom - top).min(right - left);
            rr.abs_diff(cc) <= 1 || (rr + cc).abs_diff(n - 1) <= 1
        }
        _ => unreachable!("c_y validated <= 4"),
    };
    if hit {
        TEMPLATE_LEVEL
    } else {
        0.0
    }
}

/// Corner gradient for group z: a ramp of the given amplitude peaking at the
/// group's corner pixel and fading linearly over a quarter-width square.
/// Spatially disjoint from the center-box templates.
pub fn watermark_value(z: usize, r: usize, c: usize, h: usize, w: usize, amplitude: f64) -> f64 {
    let (sh, sw) = (h / 4, w / 4);
    let (anchor_r, anchor_c) = match z {
        0 => (0, 0),
        1 => (0, w - 1),
        2 => (h - 1, 0),
        3 => (h - 1, w - 1),
        _ => unreachable!("c_z validated <= 4"),
    };
    let dr = r.abs_diff(anchor_r);
    let dc = c.abs_diff(anchor_c);
    if dr >= sh || dc >= sw {
        return 0.0;
    }
    let d = dr.max(dc) as f64;
    let s = sh.max(sw) as f64;
    amplitude * (1.0 - d / s)
}

pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let patient_ids: Vec<u64> = (0..config.n_patients as u64).collect();
    let splits = patientwise_split(&patient_ids, (0.6, 0.2, 0.2), config.seed)?;

    let px = config.height * config.width;
    let n_images = config.n_patients * config.images_per_patient;
    let mut metas = Vec::with_capacity(n_images);
    let mut images = Vec::with_capacity(n_images * px);
    let noise_dist = if config.noise > 0.0 {
        Some(Normal::new(0.0, config.noise).expect("sigma validated finite and positive"))
    } else {
        None
    };

    for &pid in &patient_ids {
        let split = splits[&pid];
        let mut rng = stream(config.seed, "patient", pid);
        let z = rng.random_range(0..config.c_z);
        // Test patients are never skewed: disparity is measured where the
        // shortcut stops matching the labels.
        let eff_rho = if split == Split::Test { 0.0 } else { config.rho };
        let skewed = rng.random_bool(eff_rho);
        let favored = favored_classes(z, config.c_y, config.c_z);

        for _ in 0..config.images_per_patient {
            let y = if skewed {
                favored[rng.random_range(0..favored.len())]
            } else {
                rng.random_range(0..config.c_y)
            };
            for r in 0..config.height {
                for c in 0..config.width {
                    let mut v = template_value(y, r, c, config.height, config.width)
                        + watermark_value(z, r, c, config.height, config.width, config.amplitude);
                    if let Some(dist) = &noise_dist {
                        v += dist.sample(&mut rng);
                    }
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            metas.push(SampleMeta {
                patient_id: pid,
                y,
                z,
                split,
            });
        }
    }
    Ok(Dataset {
        config: config.clone(),
        metas,
        images,
    })
}

/// Class x group contingency counts with the chi-square statistic and
/// Cramer's V for one subset of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
    pub chi_square: f64,
    pub cramers_v: f64,
}

fn contingency(metas: &[&SampleMeta], c_y: usize, c_z: usize) -> ContingencyTable {
    let mut counts = vec![vec![0u64; c_z]; c_y];
    for m in metas {
        counts[m.y][m.z] += 1;
    }
    let n: u64 = metas.len() as u64;
    let row: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..c_z).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    let mut chi = 0.0;
    if n > 0 {
        for i in 0..c_y {
            for j in 0..c_z {
                let e = row[i] as f64 * col[j] as f64 / n as f64;
                if e > 0.0 {
                    let d = counts[i][j] as f64 - e;
                    chi += d * d / e;
                }
            }
        }
    }
    let live_rows = row.iter().filter(|&&r| r > 0).count();
    let live_cols = col.iter().filter(|&&c| c > 0).count();
    let k = live_rows.min(live_cols);
    let v = if n > 0 && k >= 2 {
        (chi / (n as f64 * (k as f64 - 1.0))).sqrt()
    } else {
        0.0
    };
    ContingencyTable {
        counts,
        n,
        chi_square: chi,
        cramers_v: v,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasAudit {
    pub overall: ContingencyTable,
    pub per_split: Vec<(Split, ContingencyTable)>,
}

pub fn bias_audit(dataset: &Dataset) -> Result<BiasAudit> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput {
            what: "dataset for bias audit".into(),
        });
    }
    let (c_y, c_z) = (dataset.config.c_y, dataset.config.c_z);
    let all: Vec<&SampleMeta> = dataset.metas.iter().collect();
    let per_split = Split::ALL
        .iter()
        .map(|&s| {
            let subset: Vec<&SampleMeta> =
                dataset.metas.iter().filter(|m| m.split == s).collect();
            (s, contingency(&subset, c_y, c_z))
        })
        .collect();
    Ok(BiasAudit {
        overall: contingency(&all, c_y, c_z),
        per_split,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    height: usize,
    width: usize,
    c_y: usize,
    c_z: usize,
    n_images: usize,
    n_patients: usize,
    config: GeneratorConfig,
}

/// Directory layout: manifest.json + images.f32 (little-endian pixels) +
/// labels.csv (index,patient_id,y,z,split).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_patients = {
        let mut ids: Vec<u64> = dataset.metas.iter().map(|m| m.patient_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    let manifest = DatasetManifest {
        version: DATASET_FORMAT,
        height: dataset.config.height,
        width: dataset.config.width,
        c_y: dataset.config.c_y,
        c_z: dataset.config.c_z,
        n_images: dataset.len(),
        n_patients,
        config: dataset.config.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), json.as_bytes())?;

    let mut raw = Vec::with_capacity(dataset.images.len() * 4);
    for &v in &dataset.images {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&dir.join("images.f32"), &raw)?;

    let mut csv = String::from("index,patient_id,y,z,split\n");
    for (i, m) in dataset.metas.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{},{}\n", m.patient_id, m.y, m.z, m.split));
    }
    write_atomic(&dir.join("labels.csv"), csv.as_bytes())?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let mtext = fs::read_to_string(&mpath)?;
    let manifest: DatasetManifest = serde_json::from_str(&mtext).map_err(|e| Error::Json {
        path: mpath.display().to_string(),
        source: e,
    })?;
    if manifest.version != DATASET_FORMAT {
        return Err(Error::BadDataset {
            path: mpath.display().to_string(),
            detail: format!(
                "unsupported dataset format {}, expected {DATASET_FORMAT}",
                manifest.version
            ),
        });
    }

    let ipath = dir.join("images.f32");
    let raw = fs::read(&ipath)?;
    let expect = manifest.n_images * manifest.height * manifest.width * 4;
    if raw.len() != expect {
        return Err(Error::BadDataset {
            path: ipath.display().to_string(),
            detail: format!("expected {expect} bytes of pixel data, got {}", raw.len()),
        });
    }
    let images: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let lpath = dir.join("labels.csv");
    let ltext = fs::read_to_string(&lpath)?;
    let bad_label = |line: usize, detail: String| Error::BadDataset {
        path: lpath.display().to_string(),
        detail: format!("line {line}: {detail}"),
    };
    let mut lines = ltext.lines().enumerate();
    match lines.next() {
        Some((_, "index,patient_id,y,z,split")) => {}
        other => {
            return Err(bad_label(
                1,
                format!("bad header {:?}", other.map(|(_, l)| l)),
            ))
        }
    }
    let mut metas = Vec::with_capacity(manifest.n_images);
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad_label(lineno + 1, format!("expected 5 fields, got {}", fields.len())));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| bad_label(lineno + 1, "bad index".into()))?;
        if index != metas.len() {
            return Err(bad_label(
                lineno + 1,
                format!("index {index} out of order, expected {}", metas.len()),
            ));
        }
        let patient_id: u64 = fields[1]
            .parse()
            .map_err(|_| bad_label(lineno + 1, "bad patient id".into()))?;
        let y: usize = fields[2]
            .parse()
            .map_err(|_| bad_label(lineno + 1, "bad y label".into()))?;
        let z: usize = fields[3]
            .parse()
            .map_err(|_| bad_label(lineno + 1, "bad z label".into()))?;
        let split = Split::parse(fields[4])
            .ok_or_else(|| bad_label(lineno + 1, format!("bad split tag '{}'", fields[4])))?;
        if y >= manifest.c_y || z >= manifest.c_z {
            return Err(bad_label(
                lineno + 1,
                format!("label ({y},{z}) outside vocabularies ({},{})", manifest.c_y, manifest.c_z),
            ));
        }
        metas.push(SampleMeta {
            patient_id,
            y,
            z,
            split,
        });
    }
    if metas.len() != manifest.n_images {
        return Err(Error::BadDataset {
            path: lpath.display().to_string(),
            detail: format!(
                "manifest declares {} images but labels.csv has {} rows",
                manifest.n_images,
                metas.len()
            ),
        });
    }
    Ok(Dataset {
        config: manifest.config,
        metas,
        images,
    })
}
