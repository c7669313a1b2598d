//! Binary dataset and relevance-map files, JSON sidecars and CSV exports.
//!
//! Layout (little-endian): 4-byte magic, `u32` version, `u32` N, C, H, W,
//! `f32` payload in `[N,C,H,W]` order, `i32` labels, `u8` split codes.
//! Panel and modules live in `<file>.json`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, MarkerModule, MarkerPanel, ModuleSpec, Split};
use crate::error::{dim_err, CimError, Result};
use crate::model::Model;
use crate::params::ByteReader;
use crate::tensor::Tensor;

pub const MAGIC_DATASET: &[u8; 4] = b"MPXD";
pub const MAGIC_RELEVANCE: &[u8; 4] = b"RLVM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    panel: MarkerPanel,
    modules: Vec<ModuleSpec>,
}

/// `data.mpxd` → `data.mpxd.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn encode(magic: &[u8; 4], values: &Tensor, labels: &[usize], splits: &[Split]) -> Result<Vec<u8>> {
    let (n, c, h, w) = values.dims4()?;
    if labels.len() != n || splits.len() != n {
        return dim_err(format!("{n} patches but {} labels / {} splits", labels.len(), splits.len()));
    }
    let mut out = Vec::with_capacity(24 + values.len() * 4 + n * 5);
    out.extend_from_slice(magic);
    for v in [VERSION, n as u32, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in values.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in labels {
        let l = i32::try_from(l).map_err(|_| CimError::Format(format!("label {l} exceeds i32")))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend(splits.iter().map(|s| s.code()));
    Ok(out)
}

fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<(Tensor, Vec<usize>, Vec<Split>)> {
    let mut r = ByteReader { bytes, pos: 0 };
    let found = r.take(4)?;
    if found != magic {
        return Err(CimError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CimError::Format(format!("unsupported version {version}")));
    }
    let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| CimError::Format("header extents overflow".into()))?;
    let payload = r.take(count * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let labels = r
        .take(n * 4)?
        .chunks_exact(4)
        .map(|b| {
            let l = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            usize::try_from(l).map_err(|_| CimError::Format(format!("negative label {l}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = r.take(n)?.iter().map(|&s| Split::from_code(s)).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(CimError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((Tensor::new(&[n, c, h, w], data)?, labels, splits))
}

pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    std::fs::write(path, encode(MAGIC_DATASET, &bundle.patches, &bundle.labels, &bundle.splits)?)?;
    let sidecar = Sidecar {
        panel: bundle.panel.clone(),
        modules: bundle.modules.iter().map(|m| m.to_spec(&bundle.panel)).collect(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    let (patches, labels, splits) = decode(MAGIC_DATASET, &std::fs::read(path)?)?;
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    let panel = MarkerPanel::new(sidecar.panel.names().to_vec())?;
    let modules = sidecar
        .modules
        .iter()
        .map(|m| MarkerModule::resolve(m, &panel))
        .collect::<Result<Vec<_>>>()?;
    let bundle = DatasetBundle {
        patches,
        labels,
        panel,
        modules,
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Relevance maps `[N,C,H,W]` in the dataset layout under the "RLVM" magic.
pub fn write_maps(path: &Path, maps: &Tensor, labels: &[usize], splits: &[Split]) -> Result<()> {
    std::fs::write(path, encode(MAGIC_RELEVANCE, maps, labels, splits)?)?;
    Ok(())
}

pub fn read_maps(path: &Path) -> Result<(Tensor, Vec<usize>, Vec<Split>)> {
    decode(MAGIC_RELEVANCE, &std::fs::read(path)?)
}

/// Modules file: JSON array of `{name, markers: [names]}` resolved against `panel`.
pub fn load_modules(path: &Path, panel: &MarkerPanel) -> Result<Vec<MarkerModule>> {
    let specs: Vec<ModuleSpec> = serde_json::from_slice(&std::fs::read(path)?)?;
    if specs.is_empty() {
        return Err(CimError::Empty("modules file lists no modules".into()));
    }
    specs.iter().map(|s| MarkerModule::resolve(s, panel)).collect()
}

pub fn save_modules(path: &Path, modules: &[MarkerModule], panel: &MarkerPanel) -> Result<()> {
    let specs: Vec<ModuleSpec> = modules.iter().map(|m| m.to_spec(panel)).collect();
    std::fs::write(path, serde_json::to_vec_pretty(&specs)?)?;
    Ok(())
}

/// Pooled eval-mode embeddings of every patch as CSV `patch_id,label,e0..e{D-1}`.
pub fn export_embeddings(model: &Model, bundle: &DatasetBundle, path: &Path) -> Result<Tensor> {
    let emb = model.embed(&bundle.patches)?;
    let d = emb.shape()[1];
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = ["patch_id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..d).map(|j| format!("e{j}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (i, row) in emb.data().chunks(d).enumerate() {
        write!(f, "{i},{}", bundle.labels[i])?;
        for v in row {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(emb)
}
