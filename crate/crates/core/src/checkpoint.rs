//! Weight checkpoints. Binary layout: magic "DBLB", format version (u32 LE),
//! record count (u32 LE), then per parameter: name length (u32 LE), name
//! bytes, rank (u32 LE), dims (u32 LE each), data as little-endian 32-bit
//! floats. Data is always stored 32-bit regardless of the run precision; a
//! 64-bit run widens on load. A text sidecar manifest (key=value per line)
//! makes a checkpoint self-describing enough to rebuild the model.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::model::{DualHeadModel, LayerKind};
use crate::params::ParamStore;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"DBLB";
const VERSION: u32 = 1;

pub fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    ckpt.with_file_name(name)
}

pub fn write_params<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id)?;
        let t = params.get(id)?;
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    write_atomic(path, &buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::BadCheckpoint {
                offset: self.pos as u64,
                detail: format!(
                    "unexpected end reading {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Overwrite every parameter in `params` from the checkpoint. The name sets
/// must match exactly, as must each shape.
pub fn read_params_into<T: Scalar>(params: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        buf: &bytes,
        pos: 0,
    };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::BadCheckpoint {
            offset: 0,
            detail: "bad magic, not a DBLB checkpoint".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::BadCheckpoint {
            offset: 4,
            detail: format!("unsupported format version {version}, expected {VERSION}"),
        });
    }
    let count = cur.u32("record count")? as usize;

    let mut seen: BTreeSet<String> = BTreeSet::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name_off = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::BadCheckpoint {
                offset: name_off as u64,
                detail: "parameter name is not utf-8".into(),
            })?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let data_off = cur.pos;
        let raw = cur.take(n * 4, "tensor data")?;

        let id = params.find(&name).ok_or_else(|| Error::CheckpointMismatch {
            detail: format!("checkpoint names parameter '{name}' the model does not have"),
        })?;
        let t = params.get_mut(id)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::CheckpointMismatch {
                detail: format!(
                    "parameter '{name}' has shape {:?} in the checkpoint (byte {data_off}) but {:?} in the model",
                    shape,
                    t.shape()
                ),
            });
        }
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            t.data_mut()[i] = T::from_f32(f32::from_le_bytes([
                chunk[0], chunk[1], chunk[2], chunk[3],
            ]));
        }
        t.clear_grad();
        seen.insert(name);
    }
    if cur.pos != bytes.len() {
        return Err(Error::BadCheckpoint {
            offset: cur.pos as u64,
            detail: format!("{} trailing bytes after the last record", bytes.len() - cur.pos),
        });
    }
    let missing: Vec<String> = params
        .ids()
        .filter_map(|id| {
            let name = params.name(id).ok()?;
            (!seen.contains(name)).then(|| name.to_string())
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::CheckpointMismatch {
            detail: format!("checkpoint is missing parameters: {}", missing.join(", ")),
        });
    }
    Ok(())
}

fn kinds_line(layers: &[crate::model::LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| l.kind().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_kinds(line: &str, path: &Path) -> Result<Vec<LayerKind>> {
    line.split(',')
        .map(|tok| {
            LayerKind::parse(tok).ok_or_else(|| Error::BadManifest {
                path: path.display().to_string(),
                detail: format!("unknown layer kind '{tok}'"),
            })
        })
        .collect()
}

/// Checkpoint + manifest for a whole model.
pub fn save_model<T: Scalar>(model: &DualHeadModel<T>, ckpt: &Path) -> Result<()> {
    write_params(model.params(), ckpt)?;
    let trainable: Vec<String> = (0..model.n_layers())
        .filter(|&id| model.is_trainable(id).unwrap_or(false))
        .map(|id| id.to_string())
        .collect();
    let (h, w) = model.input_hw();
    let manifest = format!(
        "format={VERSION}\ninput_h={h}\ninput_w={w}\nc_y={}\nc_z={}\nseed={}\nadv_head_fitted={}\nbackbone={}\npredictor={}\nadversary={}\ntrainable={}\n",
        model.n_target_classes(),
        model.n_protected_groups(),
        model.seed(),
        if model.adv_head_fitted() { 1 } else { 0 },
        kinds_line(model.backbone_layers()),
        kinds_line(model.predictor_layers()),
        kinds_line(model.adversary_layers()),
        trainable.join(",")
    );
    write_atomic(&manifest_path(ckpt), manifest.as_bytes())?;
    Ok(())
}

pub fn load_model<T: Scalar>(ckpt: &Path) -> Result<DualHeadModel<T>> {
    let mpath = manifest_path(ckpt);
    let text = fs::read_to_string(&mpath)?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::BadManifest {
            path: mpath.display().to_string(),
            detail: format!("line without '=': {line}"),
        })?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::BadManifest {
            path: mpath.display().to_string(),
            detail: format!("missing key '{k}'"),
        })
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::BadManifest {
            path: mpath.display().to_string(),
            detail: format!("key '{k}' is not an integer"),
        })
    };
    let format: usize = parse_usize("format")?;
    if format != VERSION as usize {
        return Err(Error::BadManifest {
            path: mpath.display().to_string(),
            detail: format!("unsupported manifest format {format}"),
        });
    }
    let backbone = parse_kinds(get("backbone")?, &mpath)?;
    let predictor = parse_kinds(get("predictor")?, &mpath)?;
    let adversary = parse_kinds(get("adversary")?, &mpath)?;
    let seed: u64 = get("seed")?.parse().map_err(|_| Error::BadManifest {
        path: mpath.display().to_string(),
        detail: "seed is not an integer".into(),
    })?;
    let mut model = DualHeadModel::<T>::build_with_heads(
        &backbone,
        &predictor,
        &adversary,
        (parse_usize("input_h")?, parse_usize("input_w")?),
        parse_usize("c_y")?,
        parse_usize("c_z")?,
        seed,
    )?;
    read_params_into(model.params_mut(), ckpt)?;
    let trainable_raw = get("trainable")?;
    if !trainable_raw.is_empty() {
        let ids: BTreeSet<usize> = trainable_raw
            .split(',')
            .map(|s| {
                s.parse().map_err(|_| Error::BadManifest {
                    path: mpath.display().to_string(),
                    detail: format!("bad trainable id '{s}'"),
                })
            })
            .collect::<Result<_>>()?;
        model.set_trainable(&ids)?;
    }
    if get("adv_head_fitted")?.as_str() == "1" {
        model.mark_adv_head_fitted();
    }
    Ok(model)
}
