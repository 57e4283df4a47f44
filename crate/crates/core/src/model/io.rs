//! Model directory and image file formats.
//!
//! A model directory holds `manifest.json` (config, format version, and a
//! tensor name/shape/offset table) plus `weights.bin` (little-endian IEEE-754
//! f32, row-major, concatenated in manifest order). Weights are widened to
//! f64 on load and narrowed back on save, which round-trips exactly.
//!
//! Image inputs are `<name>.bin` (little-endian f32, n x d row-major) with a
//! `<name>.json` sidecar giving n, d, and grid_side.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

use super::{DecoderLayer, ImageInput, LayerNorm, Model, ModelConfig};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const TOKENIZER_FILE: &str = "tokenizer.json";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Flatten the model into (name, shape, row-major f64 data) in the canonical
/// on-disk order.
fn tensor_list(model: &Model) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let mat = |m: &Matrix| (vec![m.rows(), m.cols()], m.data().to_vec());
    let push_mat = |out: &mut Vec<_>, name: &str, m: &Matrix| {
        let (shape, data) = mat(m);
        out.push((name.to_string(), shape, data));
    };
    let push_vec = |out: &mut Vec<_>, name: &str, v: &[f64]| {
        out.push((name.to_string(), vec![v.len()], v.to_vec()));
    };
    push_mat(&mut out, "token_embeddings", &model.token_embeddings);
    push_mat(&mut out, "pos_embeddings", &model.pos_embeddings);
    for (i, l) in model.layers.iter().enumerate() {
        push_vec(&mut out, &format!("layers.{i}.ln1.gamma"), &l.ln1.gamma);
        push_vec(&mut out, &format!("layers.{i}.ln1.beta"), &l.ln1.beta);
        push_mat(&mut out, &format!("layers.{i}.attn.wq"), &l.wq);
        push_mat(&mut out, &format!("layers.{i}.attn.wk"), &l.wk);
        push_mat(&mut out, &format!("layers.{i}.attn.wv"), &l.wv);
        push_mat(&mut out, &format!("layers.{i}.attn.wo"), &l.wo);
        push_vec(&mut out, &format!("layers.{i}.ln2.gamma"), &l.ln2.gamma);
        push_vec(&mut out, &format!("layers.{i}.ln2.beta"), &l.ln2.beta);
        push_mat(&mut out, &format!("layers.{i}.ff.w1"), &l.w1);
        push_vec(&mut out, &format!("layers.{i}.ff.b1"), &l.b1);
        push_mat(&mut out, &format!("layers.{i}.ff.w2"), &l.w2);
        push_vec(&mut out, &format!("layers.{i}.ff.b2"), &l.b2);
    }
    push_vec(&mut out, "final_norm.gamma", &model.final_norm.gamma);
    push_vec(&mut out, "final_norm.beta", &model.final_norm.beta);
    push_mat(&mut out, "unembedding", &model.unembedding);
    out
}

/// Write `manifest.json` + `weights.bin` into `dir` (created if missing).
pub fn save_model(dir: &Path, model: &Model) -> Result<()> {
    model.validate()?;
    std::fs::create_dir_all(dir)?;
    let tensors = tensor_list(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: blob.len(),
        });
        for v in data {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config: model.config.clone(),
        tensors: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    std::fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

fn read_tensor(blob: &[u8], entry: &TensorEntry) -> Result<Vec<f64>> {
    let count: usize = entry.shape.iter().product();
    let bytes = count * 4;
    let end = entry.offset.checked_add(bytes).ok_or_else(|| {
        Error::Load(format!("tensor {}: offset overflow", entry.name))
    })?;
    if end > blob.len() {
        return Err(Error::Load(format!(
            "tensor {}: needs bytes {}..{} but blob has {}",
            entry.name,
            entry.offset,
            end,
            blob.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let at = entry.offset + i * 4;
        let v = f32::from_le_bytes([blob[at], blob[at + 1], blob[at + 2], blob[at + 3]]);
        if !v.is_finite() {
            return Err(Error::Load(format!(
                "tensor {}: non-finite value at element {i}",
                entry.name
            )));
        }
        out.push(v as f64);
    }
    Ok(out)
}

struct TensorReader<'a> {
    blob: &'a [u8],
    entries: std::collections::HashMap<&'a str, &'a TensorEntry>,
}

impl<'a> TensorReader<'a> {
    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Load(format!("tensor {name}: missing from manifest")))?;
        if entry.shape != vec![rows, cols] {
            return Err(Error::Load(format!(
                "tensor {name}: manifest shape {:?} != expected [{rows}, {cols}]",
                entry.shape
            )));
        }
        Matrix::new(rows, cols, read_tensor(self.blob, entry)?)
            .map_err(|e| Error::Load(format!("tensor {name}: {e}")))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Load(format!("tensor {name}: missing from manifest")))?;
        if entry.shape != vec![len] {
            return Err(Error::Load(format!(
                "tensor {name}: manifest shape {:?} != expected [{len}]",
                entry.shape
            )));
        }
        read_tensor(self.blob, entry)
    }
}

/// Load a model directory, shape-validating every tensor against the
/// manifest config.
pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Load(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&raw)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Load(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let blob = std::fs::read(dir.join(WEIGHTS_FILE))?;
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if blob.len() != expected {
        return Err(Error::Load(format!(
            "weights.bin length {} != manifest total {}",
            blob.len(),
            expected
        )));
    }
    let reader = TensorReader {
        blob: &blob,
        entries: manifest
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t))
            .collect(),
    };

    let cfg = &manifest.config;
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(DecoderLayer {
            ln1: LayerNorm {
                gamma: reader.vector(&format!("layers.{i}.ln1.gamma"), d)?,
                beta: reader.vector(&format!("layers.{i}.ln1.beta"), d)?,
            },
            wq: reader.matrix(&format!("layers.{i}.attn.wq"), d, d)?,
            wk: reader.matrix(&format!("layers.{i}.attn.wk"), d, d)?,
            wv: reader.matrix(&format!("layers.{i}.attn.wv"), d, d)?,
            wo: reader.matrix(&format!("layers.{i}.attn.wo"), d, d)?,
            ln2: LayerNorm {
                gamma: reader.vector(&format!("layers.{i}.ln2.gamma"), d)?,
                beta: reader.vector(&format!("layers.{i}.ln2.beta"), d)?,
            },
            w1: reader.matrix(&format!("layers.{i}.ff.w1"), cfg.d_ff, d)?,
            b1: reader.vector(&format!("layers.{i}.ff.b1"), cfg.d_ff)?,
            w2: reader.matrix(&format!("layers.{i}.ff.w2"), d, cfg.d_ff)?,
            b2: reader.vector(&format!("layers.{i}.ff.b2"), d)?,
        });
    }
    let model = Model {
        config: manifest.config.clone(),
        token_embeddings: reader.matrix("token_embeddings", cfg.vocab_size, d)?,
        pos_embeddings: reader.matrix("pos_embeddings", cfg.max_seq, d)?,
        layers,
        final_norm: LayerNorm {
            gamma: reader.vector("final_norm.gamma", d)?,
            beta: reader.vector("final_norm.beta", d)?,
        },
        unembedding: reader.matrix("unembedding", cfg.vocab_size, d)?,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageSidecar {
    n: usize,
    d: usize,
    grid_side: Option<usize>,
}

/// Write image embeddings as `<stem>.bin` + `<stem>.json`.
pub fn save_image(bin_path: &Path, img: &ImageInput) -> Result<()> {
    let mut blob = Vec::with_capacity(img.embeddings.data().len() * 4);
    for v in img.embeddings.data() {
        blob.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(bin_path, blob)?;
    let sidecar = ImageSidecar {
        n: img.embeddings.rows(),
        d: img.embeddings.cols(),
        grid_side: img.grid_side,
    };
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    std::fs::write(bin_path.with_extension("json"), json)?;
    Ok(())
}

/// Load `<stem>.bin` using its `<stem>.json` sidecar.
pub fn load_image(bin_path: &Path) -> Result<ImageInput> {
    let sidecar_path = bin_path.with_extension("json");
    let raw = std::fs::read_to_string(&sidecar_path)
        .map_err(|e| Error::Load(format!("{}: {e}", sidecar_path.display())))?;
    let sidecar: ImageSidecar = serde_json::from_str(&raw)?;
    let blob = std::fs::read(bin_path)?;
    let count = sidecar.n * sidecar.d;
    if blob.len() != count * 4 {
        return Err(Error::Load(format!(
            "{}: blob length {} != {}x{} f32",
            bin_path.display(),
            blob.len(),
            sidecar.n,
            sidecar.d
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let at = i * 4;
        let v = f32::from_le_bytes([blob[at], blob[at + 1], blob[at + 2], blob[at + 3]]);
        if !v.is_finite() {
            return Err(Error::Load(format!(
                "{}: non-finite value at element {i}",
                bin_path.display()
            )));
        }
        data.push(v as f64);
    }
    ImageInput::new(Matrix::new(sidecar.n, sidecar.d, data)?, sidecar.grid_side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toygen::{self, ToySpec};

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec::standard(0);
        let model_dir = dir.path().join("model");
        let (model, _tok) = toygen::gen_toy_model(&spec, &model_dir).unwrap();

        let loaded = load_model(&model_dir).unwrap();
        assert_eq!(loaded.config, model.config);

        let second = dir.path().join("model2");
        save_model(&second, &loaded).unwrap();
        let blob_a = std::fs::read(model_dir.join(WEIGHTS_FILE)).unwrap();
        let blob_b = std::fs::read(second.join(WEIGHTS_FILE)).unwrap();
        assert_eq!(blob_a, blob_b);
    }

    #[test]
    fn manifest_blob_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec::standard(1);
        let model_dir = dir.path().join("model");
        toygen::gen_toy_model(&spec, &model_dir).unwrap();
        // Truncate the blob: manifest still declares the full size.
        let blob = std::fs::read(model_dir.join(WEIGHTS_FILE)).unwrap();
        std::fs::write(model_dir.join(WEIGHTS_FILE), &blob[..blob.len() / 2]).unwrap();
        let err = load_model(&model_dir).unwrap_err();
        assert!(matches!(err, Error::Load(_)), "got {err:?}");
    }

    #[test]
    fn non_finite_weight_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec::standard(2);
        let model_dir = dir.path().join("model");
        toygen::gen_toy_model(&spec, &model_dir).unwrap();
        let mut blob = std::fs::read(model_dir.join(WEIGHTS_FILE)).unwrap();
        // First tensor is token_embeddings; poison its first element.
        blob[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(model_dir.join(WEIGHTS_FILE), blob).unwrap();
        let err = load_model(&model_dir).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("token_embeddings"), "message was {msg}");
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_model(dir.path()).is_err());
    }

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageInput::new(
            Matrix::new(4, 3, (0..12).map(|i| i as f64 * 0.25).collect()).unwrap(),
            Some(2),
        )
        .unwrap();
        let path = dir.path().join("img_000.bin");
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.embeddings, img.embeddings);
        assert_eq!(back.grid_side, Some(2));
    }
}
