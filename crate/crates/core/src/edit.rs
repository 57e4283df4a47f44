//! Gated orthogonalization edits: removing an object's text direction from
//! image-position latents, one object at a time or in mass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::ObjectQuery;
use crate::model::{ImageInput, Intervention, Model, PrefillOutput, TokenId, Tokenizer};
use crate::numkernel::{dot, norm_sq, Vector};

/// Edit parameters: the layer to edit at, the layer to extract the text
/// embedding from (-1 = mean of raw token embeddings), and the weight
/// factor alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub l_image: i32,
    pub l_text: i32,
    pub alpha: f64,
}

impl EditConfig {
    /// Reference tuple reported for InstructBLIP: (1, 2, 1.5).
    pub const INSTRUCTBLIP: EditConfig = EditConfig {
        l_image: 1,
        l_text: 2,
        alpha: 1.5,
    };

    /// Reference tuple reported for LLaVA: (19, 21, 3.5).
    pub const LLAVA: EditConfig = EditConfig {
        l_image: 19,
        l_text: 21,
        alpha: 3.5,
    };

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        for (name, l) in [("l_image", self.l_image), ("l_text", self.l_text)] {
            if l != -1 && !(1..=n_layers as i32).contains(&l) {
                return Err(Error::Invalid(format!(
                    "{name} = {l} outside {{-1, 1..={n_layers}}}"
                )));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Invalid(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// A set of objects to erase under one edit configuration.
#[derive(Debug, Clone)]
pub struct EraseRequest {
    pub objects: Vec<ObjectQuery>,
    pub config: EditConfig,
}

impl EraseRequest {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Invalid("empty object list".into()));
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if a.canonical_name == b.canonical_name {
                    return Err(Error::Invalid(format!(
                        "duplicate object {:?} in erase request",
                        a.canonical_name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Orthogonalize each vector in `vectors` against `t`, gated on a positive
/// dot product: k <- k - alpha * (k.t / |t|^2) * t when k.t > 0, else k
/// unchanged. Order is preserved.
pub fn project_away(vectors: &[Vector], t: &Vector, alpha: f64) -> Result<Vec<Vector>> {
    let t_sq = norm_sq(t.data());
    if t_sq == 0.0 {
        return Err(Error::DegenerateDirection);
    }
    let mut out = Vec::with_capacity(vectors.len());
    for k in vectors {
        if k.dim() != t.dim() {
            return Err(Error::Shape(format!(
                "project_away: vector dim {} != text dim {}",
                k.dim(),
                t.dim()
            )));
        }
        let p = dot(k.data(), t.data());
        if p > 0.0 {
            let coeff = alpha * p / t_sq;
            let edited: Vec<f64> = k
                .data()
                .iter()
                .zip(t.data())
                .map(|(kv, tv)| kv - coeff * tv)
                .collect();
            out.push(Vector::from(edited));
        } else {
            out.push(k.clone());
        }
    }
    Ok(out)
}

/// In-place variant used inside the forward-pass transform.
fn project_away_rows(rows: &mut [Vec<f64>], t: &[f64], t_sq: f64, alpha: f64) {
    for row in rows.iter_mut() {
        let p = dot(row, t);
        if p > 0.0 {
            let coeff = alpha * p / t_sq;
            for (r, tv) in row.iter_mut().zip(t) {
                *r -= coeff * tv;
            }
        }
    }
}

/// Text embeddings for every object in the request, computed once on the
/// clean model before any edit.
pub fn text_embeddings(
    model: &Model,
    tokenizer: &Tokenizer,
    req: &EraseRequest,
) -> Result<Vec<Vector>> {
    req.validate()?;
    req.config.validate(model.config.n_layers)?;
    let mut out = Vec::with_capacity(req.objects.len());
    for obj in &req.objects {
        let t = model.extract_text_embedding(tokenizer, &obj.surface_form, req.config.l_text)?;
        if norm_sq(t.data()) == 0.0 {
            return Err(Error::DegenerateDirection);
        }
        out.push(t);
    }
    Ok(out)
}

/// Build the intervention that applies `project_away` sequentially for each
/// object (in request order) to the image-position states at l_image.
pub fn erase_intervention(
    model: &Model,
    tokenizer: &Tokenizer,
    req: &EraseRequest,
) -> Result<Intervention> {
    let embeddings = text_embeddings(model, tokenizer, req)?;
    let alpha = req.config.alpha;
    let pairs: Vec<(Vec<f64>, f64)> = embeddings
        .into_iter()
        .map(|t| {
            let sq = norm_sq(t.data());
            (t.into_data(), sq)
        })
        .collect();
    let transform = Box::new(move |rows: &mut [Vec<f64>]| {
        for (t, t_sq) in &pairs {
            project_away_rows(rows, t, *t_sq, alpha);
        }
    });
    Ok(Intervention::new(
        req.config.l_image,
        0..model.config.n_image_tokens,
        transform,
    ))
}

/// Run a prefill with all requested objects projected away. The returned
/// decode state generates captions under the edits.
pub fn erase_objects(
    model: &Model,
    tokenizer: &Tokenizer,
    img: &ImageInput,
    prompt: &[TokenId],
    req: &EraseRequest,
) -> Result<PrefillOutput> {
    let intervention = erase_intervention(model, tokenizer, req)?;
    model.forward_prefill(img, prompt, Some(&intervention))
}
