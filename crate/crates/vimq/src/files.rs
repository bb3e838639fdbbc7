//! On-disk formats: QTEN tensor files, model directories and QuantConfig JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vimq_core::model::{OutlierProfile, QuantConfig, VimBlock, VimDims};
use vimq_core::ssm::Discretization;
use vimq_core::tensor::DType;
use vimq_core::Tensor;

use crate::error::{Error, Result};

/// Format tag stored in every model manifest.
pub const MODEL_FORMAT: &str = "vimq.model/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const QTEN_EXT: &str = "qten";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::I8 => "i8",
        DType::I32 => "i32",
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn read_qten(path: &Path) -> Result<Tensor> {
    Tensor::from_qten_bytes(&read_bytes(path)?).map_err(|source| Error::Qten {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `t` and returns the sha256 of the bytes written.
pub fn write_qten(path: &Path, t: &Tensor) -> Result<String> {
    let bytes = t.to_qten_bytes();
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Pretty JSON with a trailing newline. Field order follows the types, and
/// maps are ordered, so equal values give equal bytes.
pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report types serialize");
    v.push(b'\n');
    v
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Canonical serialization of a config; its sha256 is the config digest.
pub fn config_bytes(qc: &QuantConfig) -> Vec<u8> {
    json_bytes(qc)
}

pub fn config_digest(qc: &QuantConfig) -> String {
    sha256_hex(&config_bytes(qc))
}

/// Writes `qc` and returns its digest.
pub fn write_config(path: &Path, qc: &QuantConfig) -> Result<String> {
    let bytes = config_bytes(qc);
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads a config and returns it with its digest. The digest is taken over
/// the canonical form, so reformatting the file does not change it.
pub fn read_config(path: &Path) -> Result<(QuantConfig, String)> {
    let qc: QuantConfig = read_json(path)?;
    let digest = config_digest(&qc);
    Ok((qc, digest))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// File name relative to the manifest's directory.
    pub file: String,
    pub dtype: String,
    pub dims: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub dims: VimDims,
    pub seed: u64,
    pub outlier_profile: OutlierProfile,
    pub discretization: Discretization,
    pub tensors: Vec<TensorEntry>,
}

fn tensor_file(name: &str) -> String {
    format!("{name}.{QTEN_EXT}")
}

/// Writes one QTEN file per tensor plus `manifest.json` into `dir`. Returns
/// the sha256 of the manifest, which covers every tensor digest.
pub fn save_model(dir: &Path, m: &VimBlock) -> Result<String> {
    create_dir(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in m.tensors() {
        let file = tensor_file(name);
        let sha256 = write_qten(&dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            file,
            dtype: dtype_name(t.dtype()).to_string(),
            dims: t.dims().to_vec(),
            sha256,
        });
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        dims: m.dims,
        seed: m.seed,
        outlier_profile: m.profile,
        discretization: m.discretization,
        tensors,
    };
    let bytes = json_bytes(&manifest);
    write_bytes(&dir.join(MANIFEST_FILE), &bytes)?;
    Ok(sha256_hex(&bytes))
}

fn manifest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads the tensor behind a manifest entry, checking its digest and shape.
pub fn read_entry(dir: &Path, entry: &TensorEntry) -> Result<Tensor> {
    let manifest = dir.join(MANIFEST_FILE);
    if entry.file.is_empty() || Path::new(&entry.file).file_name() != Some(entry.file.as_ref()) {
        return Err(manifest_err(&manifest, format!("bad tensor file name {:?}", entry.file)));
    }
    let path = dir.join(&entry.file);
    let bytes = read_bytes(&path)?;
    let actual = sha256_hex(&bytes);
    if actual != entry.sha256 {
        return Err(Error::Digest {
            path,
            expected: entry.sha256.clone(),
            actual,
        });
    }
    let t = Tensor::from_qten_bytes(&bytes).map_err(|source| Error::Qten {
        path: path.clone(),
        source,
    })?;
    if t.dims() != entry.dims.as_slice() || dtype_name(t.dtype()) != entry.dtype {
        return Err(manifest_err(
            &path,
            format!(
                "holds {} {:?}, manifest says {} {:?}",
                dtype_name(t.dtype()),
                t.dims(),
                entry.dtype,
                entry.dims
            ),
        ));
    }
    Ok(t)
}

/// A loaded model with the digest of its manifest.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: VimBlock,
    pub manifest_sha256: String,
    pub dir: PathBuf,
}

/// Inverse of [`save_model`]; verifies every tensor against the manifest.
pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_bytes(&path)?;
    let manifest: ModelManifest = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    if manifest.format != MODEL_FORMAT {
        return Err(manifest_err(&path, format!("unsupported format {:?}", manifest.format)));
    }
    let mut loaded = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if loaded.iter().any(|(n, _): &(String, Tensor)| *n == entry.name) {
            return Err(manifest_err(&path, format!("duplicate tensor {:?}", entry.name)));
        }
        loaded.push((entry.name.clone(), read_entry(dir, entry)?));
    }
    let model = VimBlock::from_tensors(
        manifest.dims,
        manifest.seed,
        manifest.outlier_profile,
        manifest.discretization,
        |name| {
            let i = loaded.iter().position(|(n, _)| n == name)?;
            Some(loaded.swap_remove(i).1)
        },
    )?;
    if let Some((extra, _)) = loaded.first() {
        return Err(manifest_err(&path, format!("unknown tensor {extra:?}")));
    }
    Ok(LoadedModel {
        model,
        manifest_sha256: sha256_hex(&bytes),
        dir: dir.to_path_buf(),
    })
}
