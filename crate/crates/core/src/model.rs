//! The toy latent-video transformer.
//!
//! One token per (frame, grid cell). Causality is frame-level: all tokens of
//! a frame share a temporal position, spatial cells attend bidirectionally
//! within a frame. A staggered stack of causal and bidirectional attention
//! layers consumes the current chunk plus external key/value context (FIFO
//! cache frames and pinned sink frames) and predicts the clean latent.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{checkpoint, Tensor};

const ROPE_BASE: f64 = 10000.0;
const MASK_NEG: f64 = -1e30;
const TIME_FEATURES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayerKind {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub layer_kinds: Vec<LayerKind>,
    /// Frames per chunk (w).
    pub chunk_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub latent_channels: usize,
    pub sink_frames: usize,
    pub cond_dim: usize,
}

impl ModelConfig {
    /// Staggered causal/bidirectional pattern, every other layer.
    pub fn staggered_kinds(n_layers: usize, causal_first: bool) -> Vec<LayerKind> {
        (0..n_layers)
            .map(|i| {
                if (i % 2 == 0) == causal_first {
                    LayerKind::Causal
                } else {
                    LayerKind::Bidirectional
                }
            })
            .collect()
    }

    pub fn toy_default() -> ModelConfig {
        ModelConfig {
            n_layers: 6,
            model_dim: 64,
            n_heads: 4,
            layer_kinds: Self::staggered_kinds(6, true),
            chunk_frames: 4,
            grid_h: 8,
            grid_w: 8,
            latent_channels: 4,
            sink_frames: 1,
            cond_dim: 8,
        }
    }

    /// A smaller grid for fast tests.
    pub fn tiny(n_layers: usize, kinds: Vec<LayerKind>) -> ModelConfig {
        ModelConfig {
            n_layers,
            model_dim: 16,
            n_heads: 2,
            layer_kinds: kinds,
            chunk_frames: 2,
            grid_h: 2,
            grid_w: 2,
            latent_channels: 2,
            sink_frames: 1,
            cond_dim: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary embedding",
                self.head_dim()
            )));
        }
        if self.layer_kinds.len() != self.n_layers {
            return Err(Error::Config(format!(
                "layer_kinds length {} != n_layers {}",
                self.layer_kinds.len(),
                self.n_layers
            )));
        }
        if self.chunk_frames == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config("zero-sized chunk or grid".to_string()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.grid_h, self.grid_w, self.latent_channels]
    }
}

/// One chunk of `w` latent frames: the unit of autoregressive generation.
#[derive(Debug, Clone)]
pub struct LatentChunk {
    /// `[w, H', W', C]`
    pub frames: Tensor,
    pub chunk_index: usize,
    pub noise_level: f64,
}

/// Per-frame audio track, optional global text embedding, reference latent.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    /// `[frames, cond_dim]`
    pub audio: Tensor,
    /// `[cond_dim]`
    pub text: Option<Tensor>,
    /// `[H', W', C]` reference-image latent.
    pub reference: Tensor,
    /// Embedding substituted on unconditional passes; fixed during eval.
    pub null_audio: Tensor,
}

impl ConditionSet {
    pub fn new(audio: Tensor, text: Option<Tensor>, reference: Tensor, cond_dim: usize) -> ConditionSet {
        ConditionSet {
            audio,
            text,
            reference,
            null_audio: Tensor::zeros(&[cond_dim]),
        }
    }

    /// Restrict the audio track to `[start, start+len)` frames.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<ConditionSet> {
        Ok(ConditionSet {
            audio: self.audio.narrow(0, start, len)?,
            text: self.text.clone(),
            reference: self.reference.clone(),
            null_audio: self.null_audio.clone(),
        })
    }
}

/// Frame-level attention layout: current-chunk query frames against
/// (sink ++ cache ++ current-chunk) key frames.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub n_q: usize,
    pub n_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n_k + k]
    }
}

/// Frame-level mask for a single current chunk.
pub fn build_mask(
    cfg: &ModelConfig,
    layer: usize,
    n_sink: usize,
    n_cache: usize,
    n_chunk: usize,
) -> Result<AttentionMask> {
    let chunk_ids = vec![0usize; n_chunk];
    build_stitched_mask(cfg, layer, n_sink, n_cache, &chunk_ids)
}

/// Frame-level mask where current frames may span several chunks: a query in
/// chunk `a` sees sink and cache frames always, and current frames per layer
/// kind (causal: earlier-or-same frame; bidirectional: chunk `<= a`).
pub fn build_stitched_mask(
    cfg: &ModelConfig,
    layer: usize,
    n_sink: usize,
    n_cache: usize,
    chunk_ids: &[usize],
) -> Result<AttentionMask> {
    if layer >= cfg.n_layers {
        return Err(Error::invalid("build_mask", "layer index out of range"));
    }
    let kind = cfg.layer_kinds[layer];
    let n_chunk = chunk_ids.len();
    let n_k = n_sink + n_cache + n_chunk;
    let mut allowed = vec![false; n_chunk * n_k];
    for q in 0..n_chunk {
        for k in 0..n_k {
            let ok = if k < n_sink + n_cache {
                // sink keys fully allowed; cache frames are strictly older
                true
            } else {
                let f = k - n_sink - n_cache;
                match kind {
                    LayerKind::Causal => f <= q,
                    LayerKind::Bidirectional => chunk_ids[f] <= chunk_ids[q],
                }
            };
            allowed[q * n_k + k] = ok;
        }
    }
    Ok(AttentionMask {
        n_q: n_chunk,
        n_k,
        allowed,
    })
}

/// Rotary position rotation over the last axis (must be even), one position
/// per token along the second-to-last axis.
pub fn rope_apply(x: &Tensor, positions: &[i64]) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::invalid("rope_apply", "need at least 2 dims"));
    }
    let d = shape[shape.len() - 1];
    let n = shape[shape.len() - 2];
    if d % 2 != 0 {
        return Err(Error::invalid("rope_apply", "head dimension must be even"));
    }
    if positions.len() != n {
        return Err(Error::invalid(
            "rope_apply",
            format!("{} positions for {} tokens", positions.len(), n),
        ));
    }
    let half = d / 2;
    let mut cos_d = Vec::with_capacity(n * d);
    let mut sin_d = Vec::with_capacity(n * d);
    for &p in positions {
        for i in 0..half {
            let theta = (p as f64) * ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            cos_d.push(c);
            cos_d.push(c);
            sin_d.push(s);
            sin_d.push(s);
        }
    }
    let cos_t = Tensor::new(cos_d, &[n, d])?;
    let sin_t = Tensor::new(sin_d, &[n, d])?;

    // rotate_half: (x0, x1) -> (-x1, x0) per pair
    let mut perm = Vec::with_capacity(d);
    let mut sign = Vec::with_capacity(d);
    for i in 0..half {
        perm.push(2 * i + 1);
        perm.push(2 * i);
        sign.push(-1.0);
        sign.push(1.0);
    }
    let sign_t = Tensor::new(sign, &[d])?;
    let rot = x.index_select(shape.len() - 1, &perm)?.mul(&sign_t)?;
    x.mul(&cos_t)?.add(&rot.mul(&sin_t)?)
}

/// Pre-rotation key and value blocks for one chunk at one layer,
/// `[tokens, model_dim]` each.
#[derive(Debug, Clone)]
pub struct ChunkKv {
    pub k: Tensor,
    pub v: Tensor,
}

/// Per-layer external attention context: sink frames followed by cache
/// frames, keys stored pre-rotation with one position per frame.
#[derive(Debug, Clone)]
pub struct ExternalKv {
    /// `[ext_tokens, model_dim]`
    pub k: Tensor,
    pub v: Tensor,
    /// Per external frame, sink frames first.
    pub frame_positions: Vec<i64>,
    pub n_sink_frames: usize,
}

impl ExternalKv {
    pub fn n_frames(&self) -> usize {
        self.frame_positions.len()
    }

    pub fn n_cache_frames(&self) -> usize {
        self.frame_positions.len() - self.n_sink_frames
    }
}

#[derive(Debug, Default)]
pub struct ForwardCounters {
    pub total: Cell<u64>,
    pub unconditional: Cell<u64>,
}

impl ForwardCounters {
    pub fn reset(&self) {
        self.total.set(0);
        self.unconditional.set(0);
    }
}

struct LayerParams {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// The latent-video transformer; used for student, teacher and fake-score
/// networks alike.
pub struct Model {
    pub cfg: ModelConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    spatial_pos: Tensor,
    time_w: Tensor,
    audio_w: Tensor,
    text_w: Tensor,
    layers: Vec<LayerParams>,
    ln_f_g: Tensor,
    ln_f_b: Tensor,
    head_w: Tensor,
    head_b: Tensor,
    pub counters: ForwardCounters,
}

fn init(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let t = Tensor::randn(shape, std, rng);
    Tensor::param(t.data().to_vec(), shape)
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let c = cfg.latent_channels;
        let g = cfg.tokens_per_frame();
        let w_std = 1.0 / (d as f64).sqrt();

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_g: Tensor::param(vec![1.0; d], &[d])?,
                ln1_b: Tensor::param(vec![0.0; d], &[d])?,
                wq: init(&[d, d], w_std, &mut rng)?,
                wk: init(&[d, d], w_std, &mut rng)?,
                wv: init(&[d, d], w_std, &mut rng)?,
                wo: init(&[d, d], w_std, &mut rng)?,
                ln2_g: Tensor::param(vec![1.0; d], &[d])?,
                ln2_b: Tensor::param(vec![0.0; d], &[d])?,
                w1: init(&[d, 2 * d], w_std, &mut rng)?,
                b1: Tensor::param(vec![0.0; 2 * d], &[2 * d])?,
                w2: init(&[2 * d, d], 1.0 / (2.0 * d as f64).sqrt(), &mut rng)?,
                b2: Tensor::param(vec![0.0; d], &[d])?,
            });
        }

        Ok(Model {
            patch_w: init(&[c, d], 1.0 / (c as f64).sqrt(), &mut rng)?,
            patch_b: Tensor::param(vec![0.0; d], &[d])?,
            spatial_pos: init(&[g, d], 0.02, &mut rng)?,
            time_w: init(&[TIME_FEATURES, d], 0.1, &mut rng)?,
            audio_w: init(&[cfg.cond_dim, d], 1.0 / (cfg.cond_dim as f64).sqrt(), &mut rng)?,
            text_w: init(&[cfg.cond_dim, d], 1.0 / (cfg.cond_dim as f64).sqrt(), &mut rng)?,
            layers,
            ln_f_g: Tensor::param(vec![1.0; d], &[d])?,
            ln_f_b: Tensor::param(vec![0.0; d], &[d])?,
            head_w: init(&[d, c], w_std, &mut rng)?,
            head_b: Tensor::param(vec![0.0; c], &[c])?,
            cfg,
            counters: ForwardCounters::default(),
        })
    }

    /// Deep copy with fresh parameter leaves (same values, new identities).
    pub fn clone_params_fresh(&self) -> Result<Model> {
        let mut copy = Model::new(self.cfg.clone(), 0)?;
        let src: Vec<Tensor> = self.param_list();
        let mut dst = copy.param_slots();
        assert_eq!(src.len(), dst.len());
        for (d, s) in dst.iter_mut().zip(src) {
            **d = Tensor::param(s.data().to_vec(), s.shape())?;
        }
        Ok(copy)
    }

    fn param_list(&self) -> Vec<Tensor> {
        let mut v = vec![
            self.patch_w.clone(),
            self.patch_b.clone(),
            self.spatial_pos.clone(),
            self.time_w.clone(),
            self.audio_w.clone(),
            self.text_w.clone(),
        ];
        for l in &self.layers {
            v.extend([
                l.ln1_g.clone(),
                l.ln1_b.clone(),
                l.wq.clone(),
                l.wk.clone(),
                l.wv.clone(),
                l.wo.clone(),
                l.ln2_g.clone(),
                l.ln2_b.clone(),
                l.w1.clone(),
                l.b1.clone(),
                l.w2.clone(),
                l.b2.clone(),
            ]);
        }
        v.extend([
            self.ln_f_g.clone(),
            self.ln_f_b.clone(),
            self.head_w.clone(),
            self.head_b.clone(),
        ]);
        v
    }

    pub fn param_slots(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.spatial_pos,
            &mut self.time_w,
            &mut self.audio_w,
            &mut self.text_w,
        ];
        for l in &mut self.layers {
            v.push(&mut l.ln1_g);
            v.push(&mut l.ln1_b);
            v.push(&mut l.wq);
            v.push(&mut l.wk);
            v.push(&mut l.wv);
            v.push(&mut l.wo);
            v.push(&mut l.ln2_g);
            v.push(&mut l.ln2_b);
            v.push(&mut l.w1);
            v.push(&mut l.b1);
            v.push(&mut l.w2);
            v.push(&mut l.b2);
        }
        v.push(&mut self.ln_f_g);
        v.push(&mut self.ln_f_b);
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let names = self.param_names();
        names.into_iter().zip(self.param_list()).collect()
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = vec![
            "patch_w".to_string(),
            "patch_b".to_string(),
            "spatial_pos".to_string(),
            "time_w".to_string(),
            "audio_w".to_string(),
            "text_w".to_string(),
        ];
        for i in 0..self.layers.len() {
            for f in [
                "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2",
                "b2",
            ] {
                v.push(format!("layers.{i}.{f}"));
            }
        }
        v.extend([
            "ln_f_g".to_string(),
            "ln_f_b".to_string(),
            "head_w".to_string(),
            "head_b".to_string(),
        ]);
        v
    }

    /// FNV-1a over every parameter's bit pattern, for freeze assertions.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in self.param_list() {
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_params();
        let refs: Vec<(String, &Tensor)> =
            named.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut meta = BTreeMap::new();
        meta.insert(
            "model_config".to_string(),
            serde_json::to_string(&self.cfg)?,
        );
        checkpoint::save(path, &refs, &meta)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (tensors, meta) = checkpoint::load(path)?;
        let cfg_json = meta.get("model_config").ok_or_else(|| {
            Error::Checkpoint("missing model_config header".to_string())
        })?;
        let cfg: ModelConfig = serde_json::from_str(cfg_json)?;
        let mut model = Model::new(cfg, 0)?;
        let map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let names = model.param_names();
        let mut slots = model.param_slots();
        for (slot, name) in slots.iter_mut().zip(&names) {
            let t = map.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {name}"))
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = Tensor::param(t.data().to_vec(), t.shape())?;
        }
        Ok(model)
    }

    fn affine_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
        x.layer_norm_last()?.mul(g)?.add(b)
    }

    /// Additive condition injection: per-frame audio projection (or the null
    /// embedding when `use_audio` is off) plus a global text bias.
    pub fn inject_conditions(
        &self,
        hidden: &Tensor,
        cond: &ConditionSet,
        use_audio: bool,
        use_text: bool,
    ) -> Result<Tensor> {
        let d = self.cfg.model_dim;
        let g = self.cfg.tokens_per_frame();
        let n = hidden.shape()[0];
        let frames = n / g;
        let audio = if use_audio {
            cond.audio.clone()
        } else {
            // null embedding tiled across frames
            let mut data = Vec::with_capacity(frames * self.cfg.cond_dim);
            for _ in 0..frames {
                data.extend_from_slice(cond.null_audio.data());
            }
            Tensor::new(data, &[frames, self.cfg.cond_dim])?
        };
        if audio.shape()[0] != frames {
            return Err(Error::UnexpectedShape {
                op: "inject_conditions",
                expected: vec![frames, self.cfg.cond_dim],
                got: audio.shape().to_vec(),
            });
        }
        let audio_emb = audio.matmul(&self.audio_w)?.reshape(&[frames, 1, d])?;
        let mut h = hidden
            .reshape(&[frames, g, d])?
            .add(&audio_emb)?;
        if use_text {
            if let Some(text) = &cond.text {
                let text_emb = text.reshape(&[1, self.cfg.cond_dim])?.matmul(&self.text_w)?;
                h = h.add(&text_emb.reshape(&[d])?)?;
            }
        }
        h.reshape(&[n, d])
    }

    /// Denoised-latent prediction for a chunk given external KV context.
    /// Returns this chunk's own key/value blocks per layer.
    pub fn forward_chunk(
        &self,
        frames: &Tensor,
        t: f64,
        cond: &ConditionSet,
        ext: Option<&[ExternalKv]>,
        positions: &[i64],
        use_audio: bool,
        use_text: bool,
    ) -> Result<(Tensor, Vec<ChunkKv>)> {
        let w = frames.shape()[0];
        if positions.len() != w {
            return Err(Error::invalid(
                "forward_chunk",
                format!("{} positions for {} frames", positions.len(), w),
            ));
        }
        if positions.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::invalid(
                "forward_chunk",
                "positions must be strictly increasing within the chunk",
            ));
        }
        let chunk_ids = vec![0usize; w];
        self.forward_frames(frames, t, cond, &chunk_ids, positions, ext, use_audio, use_text)
    }

    /// Core forward over an arbitrary span of frames. `chunk_ids` assigns each
    /// frame to a generation chunk for bidirectional masking; equal ids
    /// reproduce a plain single-chunk forward.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_frames(
        &self,
        frames: &Tensor,
        t: f64,
        cond: &ConditionSet,
        chunk_ids: &[usize],
        positions: &[i64],
        ext: Option<&[ExternalKv]>,
        use_audio: bool,
        use_text: bool,
    ) -> Result<(Tensor, Vec<ChunkKv>)> {
        let cfg = &self.cfg;
        let [h_, w_, c] = cfg.frame_shape();
        let f = frames.shape()[0];
        if frames.shape() != [f, h_, w_, c] {
            return Err(Error::UnexpectedShape {
                op: "forward_frames",
                expected: vec![f, h_, w_, c],
                got: frames.shape().to_vec(),
            });
        }
        if chunk_ids.len() != f || positions.len() != f {
            return Err(Error::invalid(
                "forward_frames",
                "chunk_ids/positions length mismatch",
            ));
        }
        if let Some(ext) = ext {
            if ext.len() != cfg.n_layers {
                return Err(Error::invalid(
                    "forward_frames",
                    format!("{} external kv layers for {} layers", ext.len(), cfg.n_layers),
                ));
            }
        }
        self.counters.total.set(self.counters.total.get() + 1);
        if !use_audio {
            self.counters
                .unconditional
                .set(self.counters.unconditional.get() + 1);
        }

        let d = cfg.model_dim;
        let g = cfg.tokens_per_frame();
        let n = f * g;
        let heads = cfg.n_heads;
        let hd = cfg.head_dim();

        // Patch embed + spatial position + noise-level embedding.
        let mut h = frames
            .reshape(&[n, c])?
            .matmul(&self.patch_w)?
            .add(&self.patch_b)?
            .reshape(&[f, g, d])?
            .add(&self.spatial_pos)?
            .reshape(&[n, d])?;
        h = h.add(&self.time_embedding(t)?)?;

        // Token-level query positions (frame position shared by its cells).
        let q_pos: Vec<i64> = positions
            .iter()
            .flat_map(|&p| std::iter::repeat(p).take(g))
            .collect();

        let mut kv_out = Vec::with_capacity(cfg.n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let x = Self::affine_norm(&h, &layer.ln1_g, &layer.ln1_b)?;
            let q = x.matmul(&layer.wq)?;
            let k_cur = x.matmul(&layer.wk)?;
            let v_cur = x.matmul(&layer.wv)?;
            kv_out.push(ChunkKv {
                k: k_cur.clone(),
                v: v_cur.clone(),
            });

            let ext_l = ext.map(|e| &e[li]);
            let (n_sink, n_cache) = match ext_l {
                Some(e) => (e.n_sink_frames, e.n_cache_frames()),
                None => (0, 0),
            };
            let (k_all, v_all, mut k_pos) = match ext_l {
                Some(e) if e.n_frames() > 0 => {
                    let k_pos: Vec<i64> = e
                        .frame_positions
                        .iter()
                        .flat_map(|&p| std::iter::repeat(p).take(g))
                        .collect();
                    (
                        Tensor::concat(&[&e.k, &k_cur], 0)?,
                        Tensor::concat(&[&e.v, &v_cur], 0)?,
                        k_pos,
                    )
                }
                _ => (k_cur.clone(), v_cur.clone(), Vec::new()),
            };
            k_pos.extend(&q_pos);
            let m = k_all.shape()[0];

            // Heads-first layout for batched attention.
            let qh = q.reshape(&[n, heads, hd])?.permute(&[1, 0, 2])?;
            let kh = k_all.reshape(&[m, heads, hd])?.permute(&[1, 0, 2])?;
            let vh = v_all.reshape(&[m, heads, hd])?.permute(&[1, 0, 2])?;
            let qh = rope_apply(&qh, &q_pos)?;
            let kh = rope_apply(&kh, &k_pos)?;

            let mask = build_stitched_mask(cfg, li, n_sink, n_cache, chunk_ids)?;
            let bias = expand_mask_bias(&mask, g)?;

            let logits = qh
                .matmul(&kh.transpose(1, 2)?)?
                .scale(1.0 / (hd as f64).sqrt())
                .add(&bias)?;
            let probs = logits.softmax_last()?;
            let attn = probs
                .matmul(&vh)?
                .permute(&[1, 0, 2])?
                .reshape(&[n, d])?
                .matmul(&layer.wo)?;
            h = h.add(&attn)?;

            let y = Self::affine_norm(&h, &layer.ln2_g, &layer.ln2_b)?;
            let mlp = y
                .matmul(&layer.w1)?
                .add(&layer.b1)?
                .silu()
                .matmul(&layer.w2)?
                .add(&layer.b2)?;
            h = h.add(&mlp)?;

            if li == 0 {
                h = self.inject_conditions(&h, cond, use_audio, use_text)?;
            }
        }

        let raw = Self::affine_norm(&h, &self.ln_f_g, &self.ln_f_b)?
            .matmul(&self.head_w)?
            .add(&self.head_b)?
            .reshape(&[f, h_, w_, c])?;
        // x0-parameterization with a noise-level-dependent skip: at t=0 the
        // input already is the clean latent.
        let pred = frames.scale(1.0 - t).add(&raw.scale(t))?;
        Ok((pred, kv_out))
    }

    fn time_embedding(&self, t: f64) -> Result<Tensor> {
        let mut feats = Vec::with_capacity(TIME_FEATURES);
        for i in 0..TIME_FEATURES / 2 {
            let f = (2.0f64).powi(i as i32);
            feats.push((std::f64::consts::TAU * f * t).sin());
            feats.push((std::f64::consts::TAU * f * t).cos());
        }
        let emb = Tensor::new(feats, &[1, TIME_FEATURES])?.matmul(&self.time_w)?;
        emb.reshape(&[self.cfg.model_dim])
    }

    /// Key/value blocks for context frames (sink setup and recaching):
    /// a plain forward at the given noise level, keeping only the kv.
    pub fn encode_context(
        &self,
        frames: &Tensor,
        t: f64,
        cond: &ConditionSet,
        positions: &[i64],
        sink: Option<&[ExternalKv]>,
    ) -> Result<Vec<ChunkKv>> {
        let f = frames.shape()[0];
        let chunk_ids: Vec<usize> = (0..f).collect();
        let (_, kv) =
            self.forward_frames(frames, t, cond, &chunk_ids, positions, sink, true, true)?;
        Ok(kv)
    }
}

/// Expand a frame-level mask to a token-level additive bias
/// (`0` allowed, large negative forbidden).
fn expand_mask_bias(mask: &AttentionMask, tokens_per_frame: usize) -> Result<Tensor> {
    let g = tokens_per_frame;
    let nq = mask.n_q * g;
    let nk = mask.n_k * g;
    let mut data = vec![0.0; nq * nk];
    for q in 0..mask.n_q {
        for k in 0..mask.n_k {
            if !mask.allowed(q, k) {
                for qt in 0..g {
                    let row = (q * g + qt) * nk;
                    for kt in 0..g {
                        data[row + k * g + kt] = MASK_NEG;
                    }
                }
            }
        }
    }
    Tensor::new(data, &[nq, nk])
}
