//! Minimal decoder-only transformer with an image-embedding prefix.
//!
//! The sequence layout is the n image embeddings followed by text token
//! embeddings. Every forward pass records a full [`HiddenTrace`] (layer 0
//! holds the input embeddings), supports a registered [`Intervention`] at a
//! chosen layer, and produces a [`DecodeState`] for incremental generation
//! that is numerically identical to full recomputation.

pub mod io;
pub mod tokenizer;

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numkernel::{dot, softmax_slice, Matrix, Vector};
pub use tokenizer::{TokenId, Tokenizer, BOS_ID};

const LN_EPS: f64 = 1e-5;

/// Static shape description of a model.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_image_tokens: usize,
    /// Side of the square patch grid when the image tokens are spatial.
    pub grid_side: Option<usize>,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_image_tokens == 0 {
            return Err(Error::Invalid("n_image_tokens must be >= 1".into()));
        }
        if let Some(g) = self.grid_side {
            if g * g != self.n_image_tokens {
                return Err(Error::Invalid(format!(
                    "grid_side {} squared != n_image_tokens {}",
                    g, self.n_image_tokens
                )));
            }
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_seq < self.n_image_tokens {
            return Err(Error::Invalid("degenerate model config".into()));
        }
        Ok(())
    }
}

/// Layer normalization parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(self.gamma.iter().zip(self.beta.iter()))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }
}

/// One pre-norm decoder layer: attention and feed-forward sublayers.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNorm,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Immutable model weights. Shareable across threads once loaded.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub token_embeddings: Matrix,
    pub pos_embeddings: Matrix,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub unembedding: Matrix,
}

/// Precomputed image embeddings consumed by the decoder.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub embeddings: Matrix,
    pub grid_side: Option<usize>,
}

impl ImageInput {
    pub fn new(embeddings: Matrix, grid_side: Option<usize>) -> Result<Self> {
        if let Some(g) = grid_side {
            if g * g != embeddings.rows() {
                return Err(Error::Invalid(format!(
                    "grid_side {} squared != {} image rows",
                    g,
                    embeddings.rows()
                )));
            }
        }
        Ok(Self {
            embeddings,
            grid_side,
        })
    }
}

/// Per-layer, per-position latent states captured during a forward pass.
///
/// Slot 0 stores the input embeddings; slot l >= 1 stores the output of
/// decoder layer l (after any intervention registered at that layer).
#[derive(Debug, Clone)]
pub struct HiddenTrace {
    states: Vec<Vec<Vec<f64>>>,
    d: usize,
}

impl HiddenTrace {
    /// Number of layer slots (n_layers + 1).
    pub fn layer_slots(&self) -> usize {
        self.states.len()
    }

    pub fn seq_len(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// State at a trace slot: 0 = input embeddings, l = layer l output.
    pub fn state(&self, layer_slot: usize, pos: usize) -> &[f64] {
        &self.states[layer_slot][pos]
    }
}

/// Transform applied in place to the hidden rows at the intervened
/// positions. Each row is one position's d-dimensional state.
pub type StateTransform = Box<dyn Fn(&mut [Vec<f64>]) + Send + Sync>;

/// A registered edit applied during the forward pass.
///
/// `layer` is -1 for the raw image embeddings (before positional addition)
/// or 1..=L for the output of that decoder layer. Only the rows in
/// `positions` (image-token indices) are handed to the transform.
pub struct Intervention {
    pub layer: i32,
    pub positions: Range<usize>,
    pub transform: StateTransform,
}

impl Intervention {
    pub fn new(layer: i32, positions: Range<usize>, transform: StateTransform) -> Self {
        Self {
            layer,
            positions,
            transform,
        }
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer != -1 && !(1..=config.n_layers as i32).contains(&self.layer) {
            return Err(Error::LayerOutOfRange {
                layer: self.layer,
                n_layers: config.n_layers,
            });
        }
        if self.positions.end > config.n_image_tokens {
            return Err(Error::Invalid(format!(
                "intervention positions {:?} exceed image range 0..{}",
                self.positions, config.n_image_tokens
            )));
        }
        Ok(())
    }
}

/// Cached keys and values for one layer.
#[derive(Debug, Clone, Default)]
struct LayerCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Incremental decoding state. Edits made at prefill persist here via the
/// cached keys and values, so later steps see the edited sequence.
#[derive(Debug, Clone)]
pub struct DecodeState {
    caches: Vec<LayerCache>,
    len: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Result of a prefill pass.
pub struct PrefillOutput {
    pub trace: HiddenTrace,
    pub logits: Vector,
    pub state: DecodeState,
}

impl Model {
    /// Validate that every weight shape is consistent with the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        let check = |name: &str, m: &Matrix, r: usize, c: usize| -> Result<()> {
            if m.rows() != r || m.cols() != c {
                return Err(Error::Load(format!(
                    "tensor {name}: shape {}x{} != expected {r}x{c}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        check(
            "token_embeddings",
            &self.token_embeddings,
            self.config.vocab_size,
            d,
        )?;
        check("pos_embeddings", &self.pos_embeddings, self.config.max_seq, d)?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Load(format!(
                "layer count {} != config n_layers {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            check(&format!("layers.{i}.attn.wq"), &l.wq, d, d)?;
            check(&format!("layers.{i}.attn.wk"), &l.wk, d, d)?;
            check(&format!("layers.{i}.attn.wv"), &l.wv, d, d)?;
            check(&format!("layers.{i}.attn.wo"), &l.wo, d, d)?;
            check(&format!("layers.{i}.ff.w1"), &l.w1, self.config.d_ff, d)?;
            check(&format!("layers.{i}.ff.w2"), &l.w2, d, self.config.d_ff)?;
            if l.b1.len() != self.config.d_ff || l.b2.len() != d {
                return Err(Error::Load(format!("layers.{i}: bias length mismatch")));
            }
            if l.ln1.gamma.len() != d
                || l.ln1.beta.len() != d
                || l.ln2.gamma.len() != d
                || l.ln2.beta.len() != d
            {
                return Err(Error::Load(format!("layers.{i}: norm length mismatch")));
            }
        }
        if self.final_norm.gamma.len() != d || self.final_norm.beta.len() != d {
            return Err(Error::Load("final_norm length mismatch".into()));
        }
        check("unembedding", &self.unembedding, self.config.vocab_size, d)?;
        Ok(())
    }

    /// Multi-head causal attention for one query over the cached positions.
    fn attend(&self, q: &[f64], cache: &LayerCache) -> Vec<f64> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = cache.k.len();
        let mut out = vec![0.0; d];
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            let mut scores = Vec::with_capacity(t);
            for j in 0..t {
                scores.push(dot(&q[lo..hi], &cache.k[j][lo..hi]) * scale);
            }
            let weights = softmax_slice(&scores).expect("nonempty attention window");
            for (j, w) in weights.iter().enumerate() {
                let vj = &cache.v[j][lo..hi];
                for (o, val) in out[lo..hi].iter_mut().zip(vj.iter()) {
                    *o += w * val;
                }
            }
        }
        out
    }

    /// Forward one position through one layer, appending its K/V to the
    /// cache. Both prefill and incremental steps go through this path, so
    /// the two are bit-identical by construction.
    fn layer_forward_pos(&self, layer: &DecoderLayer, x: &[f64], cache: &mut LayerCache) -> Vec<f64> {
        let ln1x = layer.ln1.apply(x);
        let q = layer.wq.matvec(&ln1x).expect("wq shape");
        let k = layer.wk.matvec(&ln1x).expect("wk shape");
        let v = layer.wv.matvec(&ln1x).expect("wv shape");
        cache.k.push(k);
        cache.v.push(v);
        let attn = self.attend(&q, cache);
        let proj = layer.wo.matvec(&attn).expect("wo shape");
        let mut x1: Vec<f64> = x.iter().zip(proj.iter()).map(|(a, b)| a + b).collect();
        let ln2x = layer.ln2.apply(&x1);
        let mut hidden = layer.w1.matvec(&ln2x).expect("w1 shape");
        for (h, b) in hidden.iter_mut().zip(layer.b1.iter()) {
            *h = (*h + b).max(0.0);
        }
        let mut ff = layer.w2.matvec(&hidden).expect("w2 shape");
        for (f, b) in ff.iter_mut().zip(layer.b2.iter()) {
            *f += b;
        }
        for (a, b) in x1.iter_mut().zip(ff.iter()) {
            *a += b;
        }
        x1
    }

    /// Run a full sequence of input rows through all layers, recording the
    /// trace and building the decode caches.
    fn run_sequence(
        &self,
        mut states: Vec<Vec<f64>>,
        intervention: Option<&Intervention>,
    ) -> Result<(HiddenTrace, DecodeState)> {
        let t = states.len();
        let mut trace = Vec::with_capacity(self.config.n_layers + 1);
        trace.push(states.clone());
        let mut decode = DecodeState {
            caches: vec![LayerCache::default(); self.config.n_layers],
            len: 0,
        };
        for l in 1..=self.config.n_layers {
            let layer = &self.layers[l - 1];
            let cache = &mut decode.caches[l - 1];
            let mut next = Vec::with_capacity(t);
            for state in &states {
                next.push(self.layer_forward_pos(layer, state, cache));
            }
            if let Some(iv) = intervention {
                if iv.layer == l as i32 {
                    (iv.transform)(&mut next[iv.positions.clone()]);
                }
            }
            trace.push(next.clone());
            states = next;
        }
        decode.len = t;
        Ok((
            HiddenTrace {
                states: trace,
                d: self.config.d_model,
            },
            decode,
        ))
    }

    fn embed_token(&self, token: TokenId, pos: usize) -> Result<Vec<f64>> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::Invalid(format!("token id {token} out of vocab")));
        }
        let mut row = self.token_embeddings.row(token as usize).to_vec();
        for (r, p) in row.iter_mut().zip(self.pos_embeddings.row(pos)) {
            *r += p;
        }
        Ok(row)
    }

    /// Causal prefill over image embeddings followed by prompt tokens.
    ///
    /// If an intervention is registered at layer l, the transform is applied
    /// to the image-position rows right after layer l produces its output
    /// (or to the raw image embeddings when layer = -1); every later layer
    /// and every later decode step consumes the edited states.
    pub fn forward_prefill(
        &self,
        img: &ImageInput,
        prompt: &[TokenId],
        intervention: Option<&Intervention>,
    ) -> Result<PrefillOutput> {
        let n = self.config.n_image_tokens;
        let d = self.config.d_model;
        if img.embeddings.rows() != n || img.embeddings.cols() != d {
            return Err(Error::Shape(format!(
                "image embeddings {}x{} != expected {}x{}",
                img.embeddings.rows(),
                img.embeddings.cols(),
                n,
                d
            )));
        }
        let t = n + prompt.len();
        if t > self.config.max_seq {
            return Err(Error::SequenceOverflow {
                len: t,
                max: self.config.max_seq,
            });
        }
        if let Some(iv) = intervention {
            iv.validate(&self.config)?;
        }

        let mut image_rows: Vec<Vec<f64>> = (0..n).map(|i| img.embeddings.row(i).to_vec()).collect();
        if let Some(iv) = intervention {
            if iv.layer == -1 {
                (iv.transform)(&mut image_rows[iv.positions.clone()]);
            }
        }
        let mut rows = Vec::with_capacity(t);
        for (i, mut row) in image_rows.into_iter().enumerate() {
            for (r, p) in row.iter_mut().zip(self.pos_embeddings.row(i)) {
                *r += p;
            }
            rows.push(row);
        }
        for (j, &tok) in prompt.iter().enumerate() {
            rows.push(self.embed_token(tok, n + j)?);
        }

        let (trace, state) = self.run_sequence(rows, intervention)?;
        let last = trace.state(self.config.n_layers, t - 1);
        let logits = self.next_token_logits(last);
        Ok(PrefillOutput {
            trace,
            logits,
            state,
        })
    }

    /// Advance the decode state by one token, returning next-token logits.
    /// Matches a from-scratch recomputation of the full sequence within
    /// 1e-9 (exactly, in fact: the arithmetic path is shared).
    pub fn forward_step(&self, state: &mut DecodeState, token: TokenId) -> Result<Vector> {
        let pos = state.len;
        if pos + 1 > self.config.max_seq {
            return Err(Error::SequenceOverflow {
                len: pos + 1,
                max: self.config.max_seq,
            });
        }
        let mut x = self.embed_token(token, pos)?;
        for l in 0..self.config.n_layers {
            let layer = &self.layers[l];
            x = self.layer_forward_pos(layer, &x, &mut state.caches[l]);
        }
        state.len += 1;
        Ok(self.next_token_logits(&x))
    }

    /// Text-only forward pass (no image prefix), tracing all layers.
    pub fn forward_text(&self, ids: &[TokenId]) -> Result<HiddenTrace> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty text sequence".into()));
        }
        if ids.len() > self.config.max_seq {
            return Err(Error::SequenceOverflow {
                len: ids.len(),
                max: self.config.max_seq,
            });
        }
        let rows = ids
            .iter()
            .enumerate()
            .map(|(p, &tok)| self.embed_token(tok, p))
            .collect::<Result<Vec<_>>>()?;
        let (trace, _) = self.run_sequence(rows, None)?;
        Ok(trace)
    }

    /// Final-norm then unembed: the actual next-token distribution head.
    /// (The logit lens on intermediate states composes the unembedding
    /// directly, without this norm; see the lens module.)
    pub fn next_token_logits(&self, state: &[f64]) -> Vector {
        let normed = self.final_norm.apply(state);
        Vector::from(self.unembedding.matvec(&normed).expect("unembedding shape"))
    }

    /// Text embedding of an object word for editing.
    ///
    /// For l_t >= 1, runs the text model alone on [BOS] + object tokens and
    /// returns the hidden state at the object's final token after layer l_t.
    /// For l_t = -1, returns the mean of the object's raw token embeddings.
    pub fn extract_text_embedding(
        &self,
        tok: &Tokenizer,
        object_text: &str,
        l_t: i32,
    ) -> Result<Vector> {
        let ids = tok.tokenize(object_text)?;
        if ids.is_empty() {
            return Err(Error::Invalid("empty object text".into()));
        }
        if l_t == -1 {
            let d = self.config.d_model;
            let mut mean = vec![0.0; d];
            for &id in &ids {
                if id as usize >= self.config.vocab_size {
                    return Err(Error::Invalid(format!("token id {id} out of vocab")));
                }
                for (m, e) in mean.iter_mut().zip(self.token_embeddings.row(id as usize)) {
                    *m += e;
                }
            }
            let inv = 1.0 / ids.len() as f64;
            for m in &mut mean {
                *m *= inv;
            }
            return Ok(Vector::from(mean));
        }
        if !(1..=self.config.n_layers as i32).contains(&l_t) {
            return Err(Error::LayerOutOfRange {
                layer: l_t,
                n_layers: self.config.n_layers,
            });
        }
        let mut seq = vec![BOS_ID];
        seq.extend_from_slice(&ids);
        let trace = self.forward_text(&seq)?;
        Ok(Vector::from(
            trace.state(l_t as usize, seq.len() - 1).to_vec(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toygen::{self, ToySpec};

    fn small_spec(seed: u64) -> ToySpec {
        let mut spec = ToySpec::standard(seed);
        spec.config.n_layers = 2;
        spec.config.d_model = 32;
        spec.config.d_ff = 8;
        spec
    }

    fn planted_image(spec: &ToySpec) -> ImageInput {
        let world = toygen::ToyWorld::build(spec).unwrap();
        world
            .render_image(&toygen::ImagePlan {
                seed: 7,
                strong: vec![("cat".into(), 3)],
                weak: vec![("dog".into(), 5)],
            })
            .unwrap()
    }

    /// Hand-built model with all-zero weights, for pure shape checks.
    fn zero_model(config: ModelConfig) -> Model {
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| DecoderLayer {
                ln1: LayerNorm::identity(d),
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                ln2: LayerNorm::identity(d),
                w1: Matrix::zeros(config.d_ff, d),
                b1: vec![0.0; config.d_ff],
                w2: Matrix::zeros(d, config.d_ff),
                b2: vec![0.0; d],
            })
            .collect();
        Model {
            token_embeddings: Matrix::zeros(config.vocab_size, d),
            pos_embeddings: Matrix::zeros(config.max_seq, d),
            layers,
            final_norm: LayerNorm::identity(d),
            unembedding: Matrix::zeros(config.vocab_size, d),
            config,
        }
    }

    #[test]
    fn trace_shape_contract() {
        // n=4, d=8, L=2, 3 prompt tokens -> (L+1) slots x 7 positions x 8.
        let model = zero_model(ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 1,
            d_ff: 4,
            vocab_size: 16,
            n_image_tokens: 4,
            grid_side: Some(2),
            max_seq: 32,
        });
        let prompt: Vec<TokenId> = vec![BOS_ID, 2, 3];
        let img = ImageInput::new(Matrix::zeros(4, 8), Some(2)).unwrap();
        let out = model.forward_prefill(&img, &prompt, None).unwrap();
        assert_eq!(out.trace.layer_slots(), 3);
        assert_eq!(out.trace.seq_len(), 7);
        assert_eq!(out.trace.state(0, 0).len(), 8);
    }

    #[test]
    fn identity_intervention_is_noop() {
        let spec = small_spec(11);
        let (model, _tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        let img = planted_image(&spec);
        let prompt = vec![BOS_ID, 2, 3];
        let base = model.forward_prefill(&img, &prompt, None).unwrap();
        let noop = Intervention::new(1, 0..spec.config.n_image_tokens, Box::new(|_rows| {}));
        let edited = model.forward_prefill(&img, &prompt, Some(&noop)).unwrap();
        for l in 0..base.trace.layer_slots() {
            for p in 0..base.trace.seq_len() {
                assert_eq!(base.trace.state(l, p), edited.trace.state(l, p));
            }
        }
        assert_eq!(base.logits.data(), edited.logits.data());
    }

    #[test]
    fn intervention_locality() {
        let spec = small_spec(13);
        let (model, _tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        let img = planted_image(&spec);
        let n = spec.config.n_image_tokens;
        let prompt = vec![BOS_ID, 2, 3];
        let base = model.forward_prefill(&img, &prompt, None).unwrap();
        let zero = Intervention::new(
            1,
            0..n,
            Box::new(|rows: &mut [Vec<f64>]| {
                for r in rows {
                    r.iter_mut().for_each(|v| *v = 0.0);
                }
            }),
        );
        let edited = model.forward_prefill(&img, &prompt, Some(&zero)).unwrap();
        // Layer 0 identical everywhere; layer 1 identical at text positions.
        for p in 0..base.trace.seq_len() {
            assert_eq!(base.trace.state(0, p), edited.trace.state(0, p));
        }
        for p in n..base.trace.seq_len() {
            assert_eq!(base.trace.state(1, p), edited.trace.state(1, p));
        }
        // Image rows at layer 1 are zeroed; downstream layers differ.
        for p in 0..n {
            assert!(edited.trace.state(1, p).iter().all(|&v| v == 0.0));
        }
        let mut downstream_differs = false;
        for p in 0..base.trace.seq_len() {
            if base.trace.state(2, p) != edited.trace.state(2, p) {
                downstream_differs = true;
            }
        }
        assert!(downstream_differs);
    }

    #[test]
    fn out_of_range_intervention_layer() {
        let spec = small_spec(3);
        let (model, _tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        let img = planted_image(&spec);
        for bad in [0, spec.config.n_layers as i32 + 1, -2] {
            let iv = Intervention::new(bad, 0..1, Box::new(|_r| {}));
            assert!(model.forward_prefill(&img, &[BOS_ID], Some(&iv)).is_err());
        }
    }

    #[test]
    fn incremental_matches_recompute() {
        let spec = small_spec(17);
        let (model, _tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        let img = planted_image(&spec);
        let prompt = vec![BOS_ID, 2, 3];
        let continuation: Vec<TokenId> = vec![4, 5, 2];

        let mut out = model.forward_prefill(&img, &prompt, None).unwrap();
        let mut step_logits = Vec::new();
        for &tok in &continuation {
            step_logits.push(model.forward_step(&mut out.state, tok).unwrap());
        }

        for take in 1..=continuation.len() {
            let mut full_prompt = prompt.clone();
            full_prompt.extend_from_slice(&continuation[..take]);
            let full = model.forward_prefill(&img, &full_prompt, None).unwrap();
            let diff = full
                .logits
                .data()
                .iter()
                .zip(step_logits[take - 1].data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff <= 1e-9, "step {take} diverged by {diff}");
        }
    }

    #[test]
    fn incremental_matches_recompute_with_intervention() {
        let spec = small_spec(23);
        let (model, _tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        let img = planted_image(&spec);
        let n = spec.config.n_image_tokens;
        let prompt = vec![BOS_ID, 2, 3];
        let make_iv = || {
            Intervention::new(
                1,
                0..n,
                Box::new(|rows: &mut [Vec<f64>]| {
                    for r in rows.iter_mut() {
                        for v in r.iter_mut() {
                            *v *= 0.5;
                        }
                    }
                }),
            )
        };
        let iv = make_iv();
        let mut out = model.forward_prefill(&img, &prompt, Some(&iv)).unwrap();
        let logits_step = model.forward_step(&mut out.state, 4).unwrap();

        let mut full_prompt = prompt.clone();
        full_prompt.push(4);
        let iv2 = make_iv();
        let full = model
            .forward_prefill(&img, &full_prompt, Some(&iv2))
            .unwrap();
        let diff = full
            .logits
            .data()
            .iter()
            .zip(logits_step.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff <= 1e-9);
    }

    #[test]
    fn causality_last_token_perturbation() {
        let spec = small_spec(29);
        let (model, _tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        let img = planted_image(&spec);
        let a = model.forward_prefill(&img, &[BOS_ID, 2, 3], None).unwrap();
        let b = model.forward_prefill(&img, &[BOS_ID, 2, 4], None).unwrap();
        let t = a.trace.seq_len();
        for l in 0..a.trace.layer_slots() {
            for p in 0..t - 1 {
                assert_eq!(a.trace.state(l, p), b.trace.state(l, p));
            }
        }
    }

    #[test]
    fn determinism_across_runs() {
        let spec = small_spec(31);
        let (model, _tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        let img = planted_image(&spec);
        let a = model.forward_prefill(&img, &[BOS_ID, 2], None).unwrap();
        let b = model.forward_prefill(&img, &[BOS_ID, 2], None).unwrap();
        for l in 0..a.trace.layer_slots() {
            for p in 0..a.trace.seq_len() {
                assert_eq!(a.trace.state(l, p), b.trace.state(l, p));
            }
        }
    }

    #[test]
    fn sequence_overflow_rejected() {
        let spec = small_spec(5);
        let (model, _tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        let img = planted_image(&spec);
        let long: Vec<TokenId> = vec![2; spec.config.max_seq];
        assert!(matches!(
            model.forward_prefill(&img, &long, None),
            Err(Error::SequenceOverflow { .. })
        ));
    }

    #[test]
    fn text_embedding_raw_mean() {
        let spec = small_spec(37);
        let (model, tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        // Single-token object at l_T = -1: exactly that embedding row.
        let cat = model.extract_text_embedding(&tok, " cat", -1).unwrap();
        let id = tok.id(" cat").unwrap() as usize;
        assert_eq!(cat.data(), model.token_embeddings.row(id));
        // Two-token object: arithmetic mean of the two rows.
        let two = model.extract_text_embedding(&tok, " cat dog", -1).unwrap();
        let id2 = tok.id(" dog").unwrap() as usize;
        let mean: Vec<f64> = model
            .token_embeddings
            .row(id)
            .iter()
            .zip(model.token_embeddings.row(id2))
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        assert_eq!(two.data(), &mean[..]);
    }

    #[test]
    fn text_embedding_matches_trace() {
        let spec = small_spec(41);
        let (model, tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        let emb = model.extract_text_embedding(&tok, " cat", 1).unwrap();
        let ids = vec![BOS_ID, tok.id(" cat").unwrap()];
        let trace = model.forward_text(&ids).unwrap();
        assert_eq!(emb.data(), trace.state(1, 1));
    }

    #[test]
    fn text_embedding_empty_rejected() {
        let spec = small_spec(43);
        let (model, tok) = toygen::gen_toy_model_in_memory(&spec).unwrap();
        assert!(model.extract_text_embedding(&tok, "", -1).is_err());
    }
}
