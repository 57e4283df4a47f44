//! Deterministic toy models, planted-concept images, annotations, and
//! masks that make the library's claims testable at desk scale.
//!
//! # How the toy decoder captions an image
//!
//! Dimensions 0..3 and 4..7 are reserved angle blocks (antipodal cos/sin
//! pairs, so layer-norm means cancel in every key/query read-out). Each
//! image row carries its own patch-slot angle in the key block; positional
//! embeddings give every text position a query angle targeting one patch
//! slot per generation step, then the BOS slot. Decoder layers 2..L copy
//! the attended patch's content into the text stream, where the
//! unembedding turns it into that patch's token — so the greedy caption
//! reads the patch grid in order and stops when the scan reaches BOS.
//! Layer 1 has no structural weights: at noise_scale = 0 it is exactly
//! identity-residual.
//!
//! Concept content lives in the orthonormal complement (dims 8+, all
//! mean-free). A patch's content norm carries the lens-visible strength
//! (strong plantings are loud, weak ones quiet), while its direction
//! composition drives emission, which layer norm makes norm-blind — this
//! is what separates internal confidence from output probability. Strong
//! plantings mix in an auxiliary direction that the unembedding row also
//! reads but the token embedding (hence the text embedding used for
//! erasure) does not, so orthogonalizing away a strong concept leaves a
//! readable residue while a weak planting is removed cleanly. Every patch
//! also carries a small "gist" of the image's other planted concepts;
//! over-weighted edits (large alpha) blow up patch norms through the gist
//! gate, starving the attention routing and collapsing the caption — the
//! toy analogue of high-weight edit degradation.
//!
//! Patch 0 is reserved as the attention sink for image positions and must
//! not be planted.

pub mod detmath;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chair::{DatasetRecord, ObjectLexicon};
use crate::error::{Error, Result};
use crate::model::{
    io, DecoderLayer, ImageInput, LayerNorm, Model, ModelConfig, TokenId, Tokenizer, BOS_ID,
};
use crate::numkernel::{dot, Matrix};
use crate::pgm;
use detmath::{det_sincos, DetRng};

/// Captioning prompt the toy positional tables are keyed to.
pub const DEFAULT_PROMPT: &str = "Please describe this image in detail.";

/// Golden nucleus-sampling sequence for the seed-7 standard toy model,
/// frozen from the first run and cross-checked by a manual trace of the
/// leading greedy steps (see decode tests).
pub const GOLDEN_NUCLEUS_SEED7: &[TokenId] = &[
    2, 8, 4, 26, 2, 7, 2, 42, 16, 2, 34, 2, 2, 2, 17, 2,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Strong,
    Weak,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub token: String,
    pub strength: Strength,
}

/// Everything needed to regenerate a toy model and one planted image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySpec {
    pub seed: u64,
    pub config: ModelConfig,
    pub concepts: Vec<ConceptSpec>,
    /// concept name -> planted patch indices (patch 0 is reserved).
    #[serde(default)]
    pub planted_patches: BTreeMap<String, Vec<usize>>,
    pub noise_scale: f64,
    /// Content norm of strong plantings (lens-visible signal).
    #[serde(default = "default_s_strong")]
    pub s_strong: f64,
    /// Content norm of weak plantings and empty patches.
    #[serde(default = "default_s_weak")]
    pub s_weak: f64,
}

fn default_s_strong() -> f64 {
    64.0
}

fn default_s_weak() -> f64 {
    6.0
}

impl ToySpec {
    /// The standard acceptance-scale spec: d=64, L=4, n=16 (4x4 grid).
    pub fn standard(seed: u64) -> ToySpec {
        let concepts = ["cat", "dog", "car", "tree", "bird", "fish"]
            .iter()
            .map(|name| ConceptSpec {
                name: (*name).to_string(),
                token: format!(" {name}"),
                strength: Strength::Strong,
            })
            .collect();
        ToySpec {
            seed,
            config: ModelConfig {
                d_model: 64,
                n_layers: 4,
                n_heads: 1,
                d_ff: 16,
                vocab_size: 43,
                n_image_tokens: 16,
                grid_side: Some(4),
                max_seq: 48,
            },
            concepts,
            planted_patches: BTreeMap::new(),
            noise_scale: 1e-3,
            s_strong: default_s_strong(),
            s_weak: default_s_weak(),
        }
    }

    pub fn load(path: &Path) -> Result<ToySpec> {
        let raw = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// One image's planting layout: (concept name, patch index) pairs.
#[derive(Debug, Clone)]
pub struct ImagePlan {
    pub seed: u64,
    pub strong: Vec<(String, usize)>,
    pub weak: Vec<(String, usize)>,
}

impl ImagePlan {
    pub fn from_spec(spec: &ToySpec) -> Result<ImagePlan> {
        let mut strong = Vec::new();
        let mut weak = Vec::new();
        for (name, patches) in &spec.planted_patches {
            let concept = spec
                .concepts
                .iter()
                .find(|c| &c.name == name)
                .ok_or_else(|| Error::Invalid(format!("planted unknown concept {name:?}")))?;
            for &p in patches {
                match concept.strength {
                    Strength::Strong => strong.push((name.clone(), p)),
                    Strength::Weak => weak.push((name.clone(), p)),
                }
            }
        }
        Ok(ImagePlan {
            seed: spec.seed,
            strong,
            weak,
        })
    }
}

/// Tuning constants of the toy construction. The strength norms live in
/// [`ToySpec`]; everything here is architecture-level.
#[derive(Debug, Clone, Copy)]
struct ToyParams {
    angle_slots: usize,
    pos_scale: f64,
    img_pq_frac: f64,
    concept_emb: f64,
    bos_emb: f64,
    unembed_scale: f64,
    aux_mix: f64,
    value_scale: f64,
    query_scale: f64,
    phi_strong: f64,
    phi_weak: f64,
    phi_jitter: f64,
    filler_frac: f64,
    filler_jitter: f64,
    gist_frac: f64,
    norm_jitter: f64,
}

const PARAMS: ToyParams = ToyParams {
    angle_slots: 24,
    pos_scale: 4.0,
    img_pq_frac: 0.3,
    concept_emb: 0.5,
    bos_emb: 10.0,
    unembed_scale: 0.42,
    aux_mix: 1.2,
    value_scale: 0.5,
    query_scale: 17.0,
    phi_strong: 0.50,
    phi_weak: 0.75,
    phi_jitter: 0.10,
    filler_frac: 0.22,
    filler_jitter: 0.04,
    gist_frac: 0.04,
    norm_jitter: 0.05,
};

/// Angle blocks: dims 0..4 hold the key angle, dims 4..8 the query target
/// angle, both as antipodal pairs (c, -c, s, -s)/sqrt(2).
const KEY_BLOCK: usize = 0;
const QUERY_BLOCK: usize = 4;
const CONTENT_START: usize = 8;

fn f32r(x: f64) -> f64 {
    x as f32 as f64
}

fn f32r_vec(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = f32r(*x);
    }
}

/// Write the antipodal encoding of `angle` scaled by `scale` into
/// `row[block..block+4]`.
fn write_angle(row: &mut [f64], block: usize, angle: f64, scale: f64) {
    let (s, c) = det_sincos(angle);
    let h = scale / 2f64.sqrt();
    row[block] += c * h;
    row[block + 1] -= c * h;
    row[block + 2] += s * h;
    row[block + 3] -= s * h;
}

struct Directions {
    /// name -> (base direction, auxiliary direction), unit, orthonormal.
    concepts: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    filler: Vec<f64>,
    bos: Vec<f64>,
    d: usize,
}

impl Directions {
    /// Unit planting direction: strong mixes in the auxiliary component
    /// that the unembedding row reads but the token embedding does not.
    fn plant_dir(&self, name: &str, strength: Strength) -> Result<Vec<f64>> {
        let (base, aux) = self
            .concepts
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown concept {name:?}")))?;
        Ok(match strength {
            Strength::Weak => base.clone(),
            Strength::Strong => {
                let rho = PARAMS.aux_mix;
                let norm = (1.0 + rho * rho).sqrt();
                base.iter()
                    .zip(aux)
                    .map(|(b, a)| (b + rho * a) / norm)
                    .collect()
            }
        })
    }
}

/// Subtract from `v` its components along each row of `basis` and along
/// the all-ones direction restricted to the content dims.
fn orthogonalize_content(v: &mut [f64], basis: &[Vec<f64>], d: usize) {
    let dims = (d - CONTENT_START) as f64;
    let mean = v[CONTENT_START..].iter().sum::<f64>() / dims;
    for x in v[CONTENT_START..].iter_mut() {
        *x -= mean;
    }
    for b in basis {
        let p = dot(v, b);
        for (x, bb) in v.iter_mut().zip(b) {
            *x -= p * bb;
        }
    }
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if n < 1e-9 {
        return Err(Error::Invalid("degenerate direction draw".into()));
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(())
}

/// A fresh unit direction in the mean-free content subspace, orthogonal to
/// everything drawn so far.
fn draw_direction(rng: &mut DetRng, basis: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; d];
    for x in v[CONTENT_START..].iter_mut() {
        *x = rng.gaussian();
    }
    orthogonalize_content(&mut v, basis, d);
    normalize(&mut v)?;
    Ok(v)
}

/// Deterministic toy universe: directions, tokenizer, vocabulary layout.
pub struct ToyWorld {
    pub spec: ToySpec,
    dirs: Directions,
    tokenizer: Tokenizer,
    prompt_words: Vec<String>,
    /// Total prompt token count including BOS; positional tables key the
    /// patch-scan targets to this offset.
    m_prompt: usize,
}

impl ToyWorld {
    pub fn build(spec: &ToySpec) -> Result<ToyWorld> {
        spec.config.validate()?;
        let d = spec.config.d_model;
        let needed = 2 * spec.concepts.len() + 2;
        if d < CONTENT_START + needed + 1 {
            return Err(Error::Invalid(format!(
                "d_model {} too small for {} concepts (need {})",
                d,
                spec.concepts.len(),
                CONTENT_START + needed + 1
            )));
        }
        if spec.config.n_image_tokens + 2 > PARAMS.angle_slots {
            return Err(Error::Invalid(format!(
                "n_image_tokens {} exceeds angle budget",
                spec.config.n_image_tokens
            )));
        }
        for patches in spec.planted_patches.values() {
            for &p in patches {
                if p == 0 || p >= spec.config.n_image_tokens {
                    return Err(Error::Invalid(format!(
                        "planted patch {p} invalid (patch 0 is the attention sink)"
                    )));
                }
            }
        }

        // Orthonormal direction set, seeded.
        let mut rng = DetRng::new(spec.seed ^ 0x746f_795f_6469_7273);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut concepts = BTreeMap::new();
        for c in &spec.concepts {
            let base = draw_direction(&mut rng, &basis, d)?;
            basis.push(base.clone());
            let aux = draw_direction(&mut rng, &basis, d)?;
            basis.push(aux.clone());
            if concepts.insert(c.name.clone(), (base, aux)).is_some() {
                return Err(Error::Invalid(format!("duplicate concept {:?}", c.name)));
            }
        }
        let filler = draw_direction(&mut rng, &basis, d)?;
        basis.push(filler.clone());
        let bos = draw_direction(&mut rng, &basis, d)?;

        let prompt_words: Vec<String> = vec![
            "Please".into(),
            " describe".into(),
            " this".into(),
            " image".into(),
            " in".into(),
            " detail".into(),
            ".".into(),
        ];
        let mut vocab: Vec<String> = vec!["<s>".into(), "</s>".into(), " the".into()];
        for c in &spec.concepts {
            vocab.push(c.token.clone());
        }
        vocab.extend(prompt_words.iter().cloned());
        for ch in 'a'..='z' {
            vocab.push(ch.to_string());
        }
        vocab.push(" ".into());
        if vocab.len() != spec.config.vocab_size {
            return Err(Error::Invalid(format!(
                "config vocab_size {} != constructed vocabulary {}",
                spec.config.vocab_size,
                vocab.len()
            )));
        }
        let tokenizer = Tokenizer::new(vocab)?;
        let m_prompt = 1 + tokenizer.tokenize(DEFAULT_PROMPT)?.len();

        Ok(ToyWorld {
            spec: spec.clone(),
            dirs: Directions {
                concepts,
                filler,
                bos,
                d,
            },
            tokenizer,
            prompt_words,
            m_prompt,
        })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI / PARAMS.angle_slots as f64
    }

    /// Assemble the model weights from the drawn directions.
    pub fn model(&self) -> Result<Model> {
        let cfg = &self.spec.config;
        let d = cfg.d_model;
        let ns = self.spec.noise_scale;
        let omega = self.omega();
        let n = cfg.n_image_tokens;
        let mut rng = DetRng::new(self.spec.seed ^ 0x746f_795f_6d64_6c73);
        let mut noise = |len: usize| -> Vec<f64> {
            let scale = ns / (d as f64).sqrt();
            (0..len).map(|_| rng.gaussian() * scale).collect()
        };

        // Token embeddings.
        let v_sz = cfg.vocab_size;
        let mut tok_emb = noise(v_sz * d);
        let bos_row = &mut tok_emb[(BOS_ID as usize) * d..(BOS_ID as usize + 1) * d];
        for (x, b) in bos_row.iter_mut().zip(&self.dirs.bos) {
            *x += PARAMS.bos_emb * b;
        }
        for c in &self.spec.concepts {
            let id = self
                .tokenizer
                .id(&c.token)
                .ok_or_else(|| Error::Invalid(format!("concept token {:?} missing", c.token)))? as usize;
            let (base, _aux) = &self.dirs.concepts[&c.name];
            for (x, b) in tok_emb[id * d..(id + 1) * d].iter_mut().zip(base) {
                *x += PARAMS.concept_emb * b;
            }
        }

        // Positional table. Image rows are noise-only (their angles travel
        // in the image content); text rows carry key parking + scan targets.
        let mut pos = noise(cfg.max_seq * d);
        for p in 0..cfg.max_seq {
            if p < n {
                continue;
            }
            let row = &mut pos[p * d..(p + 1) * d];
            let key_slot = if p == n { n } else { n + 1 };
            write_angle(row, KEY_BLOCK, omega * key_slot as f64, PARAMS.pos_scale);
            // Predictor at position p targets scan step p - (n + m - 1);
            // steps at or past the patch count map to the BOS slot, and
            // pre-scan positions sink to patch 0.
            let step = p as i64 - (n + self.m_prompt - 1) as i64;
            let target_slot = if step < 0 {
                0
            } else {
                (step as usize).min(n)
            };
            write_angle(
                row,
                QUERY_BLOCK,
                omega * target_slot as f64,
                PARAMS.pos_scale,
            );
        }

        // Decoder layers. Layer 1 is identity + noise; layers 2..L carry
        // the angle-matched copy machinery.
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 1..=cfg.n_layers {
            let structural = l >= 2;
            let mut wq = noise(d * d);
            let mut wk = noise(d * d);
            let mut wv = noise(d * d);
            let mut wo = noise(d * d);
            if structural {
                let qa = PARAMS.query_scale;
                // Row 0 reads the cos pair, row 1 the sin pair; zero-sum
                // rows cancel the layer-norm mean exactly.
                wq[QUERY_BLOCK] += qa;
                wq[QUERY_BLOCK + 1] -= qa;
                wq[d + QUERY_BLOCK + 2] += qa;
                wq[d + QUERY_BLOCK + 3] -= qa;
                wk[KEY_BLOCK] += qa;
                wk[KEY_BLOCK + 1] -= qa;
                wk[d + KEY_BLOCK + 2] += qa;
                wk[d + KEY_BLOCK + 3] -= qa;
                for i in CONTENT_START..d {
                    wv[i * d + i] += PARAMS.value_scale;
                    wo[i * d + i] += 1.0;
                }
            }
            let gamma_noise = noise(d);
            let beta1 = noise(d);
            let gamma2_noise = noise(d);
            let beta2 = noise(d);
            layers.push(DecoderLayer {
                ln1: LayerNorm {
                    gamma: gamma_noise.iter().map(|g| 1.0 + g).collect(),
                    beta: beta1,
                },
                wq: Matrix::new(d, d, wq)?,
                wk: Matrix::new(d, d, wk)?,
                wv: Matrix::new(d, d, wv)?,
                wo: Matrix::new(d, d, wo)?,
                ln2: LayerNorm {
                    gamma: gamma2_noise.iter().map(|g| 1.0 + g).collect(),
                    beta: beta2,
                },
                w1: Matrix::new(cfg.d_ff, d, noise(cfg.d_ff * d))?,
                b1: noise(cfg.d_ff),
                w2: Matrix::new(d, cfg.d_ff, noise(d * cfg.d_ff))?,
                b2: noise(d),
            });
        }

        // Unembedding: concept rows read base + aux, filler reads the
        // filler direction, stop reads the BOS direction.
        let w = PARAMS.unembed_scale;
        let mut unembed = noise(v_sz * d);
        for c in &self.spec.concepts {
            let id = self.tokenizer.id(&c.token).unwrap() as usize;
            let (base, aux) = &self.dirs.concepts[&c.name];
            for i in 0..d {
                unembed[id * d + i] += w * (base[i] + PARAMS.aux_mix * aux[i]);
            }
        }
        let filler_id = self.tokenizer.id(" the").unwrap() as usize;
        let stop_id = 1usize;
        for i in 0..d {
            unembed[filler_id * d + i] += w * self.dirs.filler[i];
            unembed[stop_id * d + i] += w * self.dirs.bos[i];
        }

        // Narrow every tensor through f32 so the in-memory model matches a
        // save/load round trip bit for bit.
        f32r_vec(&mut tok_emb);
        f32r_vec(&mut pos);
        f32r_vec(&mut unembed);
        let mut layers_f = Vec::with_capacity(layers.len());
        for mut l in layers {
            for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                let rows = m.rows();
                let cols = m.cols();
                let mut data = m.data().to_vec();
                f32r_vec(&mut data);
                *m = Matrix::new(rows, cols, data)?;
            }
            f32r_vec(&mut l.ln1.gamma);
            f32r_vec(&mut l.ln1.beta);
            f32r_vec(&mut l.ln2.gamma);
            f32r_vec(&mut l.ln2.beta);
            f32r_vec(&mut l.b1);
            f32r_vec(&mut l.b2);
            layers_f.push(l);
        }

        let model = Model {
            config: cfg.clone(),
            token_embeddings: Matrix::new(v_sz, d, tok_emb)?,
            pos_embeddings: Matrix::new(cfg.max_seq, d, pos)?,
            layers: layers_f,
            final_norm: LayerNorm::identity(d),
            unembedding: Matrix::new(v_sz, d, unembed)?,
        };
        model.validate()?;
        Ok(model)
    }

    /// Render one planted image as decoder-ready embeddings.
    pub fn render_image(&self, plan: &ImagePlan) -> Result<ImageInput> {
        let cfg = &self.spec.config;
        let d = cfg.d_model;
        let n = cfg.n_image_tokens;
        let omega = self.omega();
        let mut rng = DetRng::new(plan.seed ^ self.spec.seed.rotate_left(17) ^ 0x696d_67);

        // Per-patch plan lookup.
        let mut by_patch: BTreeMap<usize, (String, Strength)> = BTreeMap::new();
        let mut planted_dirs: Vec<(String, Vec<f64>)> = Vec::new();
        for (set, strength) in [(&plan.strong, Strength::Strong), (&plan.weak, Strength::Weak)] {
            for (name, patch) in set.iter() {
                if *patch == 0 || *patch >= n {
                    return Err(Error::Invalid(format!(
                        "cannot plant {name:?} at patch {patch} (patch 0 is the sink)"
                    )));
                }
                if by_patch.insert(*patch, (name.clone(), strength)).is_some() {
                    return Err(Error::Invalid(format!("patch {patch} planted twice")));
                }
                if !planted_dirs.iter().any(|(nm, _)| nm == name) {
                    planted_dirs.push((name.clone(), self.dirs.plant_dir(name, strength)?));
                }
            }
        }

        let ortho_basis: Vec<Vec<f64>> = self
            .dirs
            .concepts
            .values()
            .flat_map(|(b, a)| [b.clone(), a.clone()])
            .chain([self.dirs.filler.clone(), self.dirs.bos.clone()])
            .collect();

        let mut data = vec![0.0; n * d];
        for patch in 0..n {
            let row = &mut data[patch * d..(patch + 1) * d];

            let (phi, plant, cn) = match by_patch.get(&patch) {
                Some((name, Strength::Strong)) => (
                    PARAMS.phi_strong + rng.range(-PARAMS.phi_jitter, PARAMS.phi_jitter),
                    Some(self.dirs.plant_dir(name, Strength::Strong)?),
                    self.spec.s_strong * (1.0 + rng.range(-PARAMS.norm_jitter, PARAMS.norm_jitter)),
                ),
                Some((name, Strength::Weak)) => (
                    PARAMS.phi_weak + rng.range(-PARAMS.phi_jitter, PARAMS.phi_jitter),
                    Some(self.dirs.plant_dir(name, Strength::Weak)?),
                    self.spec.s_weak * (1.0 + rng.range(-PARAMS.norm_jitter, PARAMS.norm_jitter)),
                ),
                None => (
                    0.0,
                    None,
                    self.spec.s_weak * (1.0 + rng.range(-PARAMS.norm_jitter, PARAMS.norm_jitter)),
                ),
            };
            let f_frac =
                PARAMS.filler_frac + rng.range(-PARAMS.filler_jitter, PARAMS.filler_jitter);

            // Gist of the image's other planted concepts.
            let own = by_patch.get(&patch).map(|(name, _)| name.clone());
            let gists: Vec<&Vec<f64>> = planted_dirs
                .iter()
                .filter(|(name, _)| Some(name) != own.as_ref())
                .map(|(_, dir)| dir)
                .collect();

            let g = PARAMS.gist_frac;
            let used_sq =
                phi * phi + f_frac * f_frac + g * g * gists.len() as f64;
            if used_sq >= 1.0 {
                return Err(Error::Invalid("patch composition exceeds unit norm".into()));
            }
            let junk_frac = (1.0 - used_sq).sqrt();
            let mut junk = vec![0.0; d];
            for x in junk[CONTENT_START..].iter_mut() {
                *x = rng.gaussian();
            }
            orthogonalize_content(&mut junk, &ortho_basis, d);
            normalize(&mut junk)?;

            if let Some(p) = &plant {
                for (x, v) in row.iter_mut().zip(p) {
                    *x += cn * phi * v;
                }
            }
            for dir in &gists {
                for (x, v) in row.iter_mut().zip(dir.iter()) {
                    *x += cn * g * v;
                }
            }
            for i in 0..d {
                row[i] += cn * (f_frac * self.dirs.filler[i] + junk_frac * junk[i]);
            }

            // Key angle for this patch and the shared sink target, scaled
            // with the content norm so layer-norm leaves key magnitudes
            // uniform across patches.
            write_angle(row, KEY_BLOCK, omega * patch as f64, PARAMS.img_pq_frac * cn);
            write_angle(row, QUERY_BLOCK, 0.0, PARAMS.img_pq_frac * cn);
            f32r_vec(row);
        }
        ImageInput::new(Matrix::new(n, d, data)?, cfg.grid_side)
    }

    /// Ground-truth mask for a planting, upsampled by `factor` with the
    /// nearest-patch convention.
    pub fn gt_mask(&self, patches: &[usize], factor: usize) -> Result<(usize, usize, Vec<bool>)> {
        let g = self
            .spec
            .config
            .grid_side
            .ok_or_else(|| Error::Invalid("mask requires a square grid".into()))?;
        let side = g * factor;
        let mut fg = vec![false; side * side];
        for y in 0..side {
            for x in 0..side {
                let patch = (y / factor) * g + (x / factor);
                if patches.contains(&patch) {
                    fg[y * side + x] = true;
                }
            }
        }
        Ok((side, side, fg))
    }
}

/// [BOS] + tokenized captioning prompt.
pub fn canonical_prompt_ids(tokenizer: &Tokenizer) -> Result<Vec<TokenId>> {
    let mut ids = vec![BOS_ID];
    ids.extend(tokenizer.tokenize(DEFAULT_PROMPT)?);
    Ok(ids)
}

/// Build the toy model and tokenizer in memory. The weights pass through
/// f32, so this matches `gen_toy_model` + `load_model` exactly.
pub fn gen_toy_model_in_memory(spec: &ToySpec) -> Result<(Model, Tokenizer)> {
    let world = ToyWorld::build(spec)?;
    Ok((world.model()?, world.tokenizer.clone()))
}

/// Generate the toy model and write the model directory (manifest,
/// weights, tokenizer).
pub fn gen_toy_model(spec: &ToySpec, dir: &Path) -> Result<(Model, Tokenizer)> {
    let world = ToyWorld::build(spec)?;
    let model = world.model()?;
    io::save_model(dir, &model)?;
    world.tokenizer.save(&dir.join(io::TOKENIZER_FILE))?;
    Ok((model, world.tokenizer.clone()))
}

/// The object lexicon covering a spec's concepts: canonical name plus the
/// space-prefixed token form.
pub fn toy_lexicon(spec: &ToySpec) -> Result<ObjectLexicon> {
    let map: BTreeMap<String, Vec<String>> = spec
        .concepts
        .iter()
        .map(|c| (c.name.clone(), vec![c.name.clone()]))
        .collect();
    ObjectLexicon::new(map)
}

/// Per-image specs for a standard synthetic dataset: every image plants
/// two strong ("present") concepts and one or two weak
/// ("hallucination-like") concepts on distinct patches.
pub fn standard_image_specs(base: &ToySpec, n_images: usize, seed: u64) -> Vec<ToySpec> {
    let mut out = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rng = DetRng::new(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut spec = base.clone();
        let n_concepts = spec.concepts.len();
        // Shuffle concept indices.
        let mut order: Vec<usize> = (0..n_concepts).collect();
        for j in (1..order.len()).rev() {
            order.swap(j, rng.below(j + 1));
        }
        let n_weak = 1 + (rng.below(2));
        let chosen_strong = &order[0..2];
        let chosen_weak = &order[2..2 + n_weak];
        // Distinct patches in 1..n.
        let n_patches = spec.config.n_image_tokens;
        let mut patch_order: Vec<usize> = (1..n_patches).collect();
        for j in (1..patch_order.len()).rev() {
            patch_order.swap(j, rng.below(j + 1));
        }
        let mut planted = BTreeMap::new();
        let mut next_patch = 0usize;
        for (idx_set, strength) in [(chosen_strong, Strength::Strong), (chosen_weak, Strength::Weak)]
        {
            for &ci in idx_set {
                spec.concepts[ci].strength = strength;
                planted.insert(
                    spec.concepts[ci].name.clone(),
                    vec![patch_order[next_patch]],
                );
                next_patch += 1;
            }
        }
        spec.planted_patches = planted;
        spec.seed = seed.wrapping_add(1 + i as u64);
        out.push(spec);
    }
    out
}

/// Everything `gen_toy_dataset` wrote, with paths relative to the root.
pub struct GeneratedDataset {
    pub root: std::path::PathBuf,
    pub model_dir: std::path::PathBuf,
    pub dataset_file: std::path::PathBuf,
    pub lexicon_file: std::path::PathBuf,
    pub records: Vec<DatasetRecord>,
}

/// Generate a dataset directory: model/ + lexicon.json + dataset.jsonl +
/// images/ + masks/. The first spec defines the shared model; each spec
/// contributes one image. Deterministic in the specs.
pub fn gen_toy_dataset(specs: &[ToySpec], dir: &Path) -> Result<GeneratedDataset> {
    let model_spec = specs
        .first()
        .ok_or_else(|| Error::Invalid("empty spec list".into()))?;
    for s in specs {
        if s.config != model_spec.config {
            return Err(Error::Invalid(
                "all dataset specs must share one model config".into(),
            ));
        }
    }
    std::fs::create_dir_all(dir)?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;

    let world = ToyWorld::build(model_spec)?;
    let model_dir = dir.join("model");
    io::save_model(&model_dir, &world.model()?)?;
    world.tokenizer.save(&model_dir.join(io::TOKENIZER_FILE))?;

    let lexicon_file = dir.join("lexicon.json");
    toy_lexicon(model_spec)?.save(&lexicon_file)?;

    let mut records = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let plan = ImagePlan::from_spec(spec)?;
        let img = world.render_image(&plan)?;
        let image_id = format!("img_{i:04}");
        let rel_bin = format!("images/{image_id}.bin");
        io::save_image(&dir.join(&rel_bin), &img)?;

        let mut masks = BTreeMap::new();
        for (name, patch) in &plan.strong {
            let rel_mask = format!("masks/{image_id}.{name}.pgm");
            let (w, h, fg) = world.gt_mask(&[*patch], 2)?;
            pgm::write_mask(&dir.join(&rel_mask), w, h, &fg)?;
            masks.insert(name.clone(), rel_mask);
        }

        let annotations: Vec<String> = plan.strong.iter().map(|(n, _)| n.clone()).collect();
        records.push(DatasetRecord {
            image_id,
            image_file: rel_bin,
            annotations,
            masks,
        });
    }
    let dataset_file = dir.join("dataset.jsonl");
    crate::chair::save_dataset(&dataset_file, &records)?;
    Ok(GeneratedDataset {
        root: dir.to_path_buf(),
        model_dir,
        dataset_file,
        lexicon_file,
        records,
    })
}
