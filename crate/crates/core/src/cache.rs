//! Per-denoising-timestep, per-layer FIFO key/value buffers of capacity `L`
//! frames, plus the pinned bidirectional reference (sink) cache.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ChunkKv, ConditionSet, ExternalKv, Model};
use crate::numeric::Tensor;

/// One cached frame: pre-rotation key/value blocks `[tokens_per_frame, dim]`,
/// the frame's stream position, and a monotone tag for eviction audits.
#[derive(Debug, Clone)]
pub struct CachedFrame {
    pub k: Tensor,
    pub v: Tensor,
    pub position: i64,
    pub seq_tag: u64,
}

/// FIFO buffers indexed `[timestep][layer]`; each holds at most `capacity`
/// frames and evolves independently of the other timesteps' buffers.
#[derive(Debug, Clone)]
pub struct KVCacheSet {
    buffers: Vec<Vec<Vec<CachedFrame>>>,
    pub capacity: usize,
    n_layers: usize,
    next_tag: u64,
}

impl KVCacheSet {
    pub fn new(n_timesteps: usize, n_layers: usize, capacity: usize) -> KVCacheSet {
        KVCacheSet {
            buffers: vec![vec![Vec::new(); n_layers]; n_timesteps],
            capacity,
            n_layers,
            next_tag: 0,
        }
    }

    pub fn n_timesteps(&self) -> usize {
        self.buffers.len()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Frames currently held for one (timestep, layer) buffer.
    pub fn len(&self, timestep: usize, layer: usize) -> usize {
        self.buffers[timestep][layer].len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers
            .iter()
            .all(|t| t.iter().all(|l| l.is_empty()))
    }

    pub fn frames(&self, timestep: usize, layer: usize) -> &[CachedFrame] {
        &self.buffers[timestep][layer]
    }

    pub fn clear(&mut self) {
        for t in &mut self.buffers {
            for l in t.iter_mut() {
                l.clear();
            }
        }
    }

    /// Append one chunk's per-layer kv at the given timestep, evicting the
    /// oldest frames first whenever the buffer would exceed capacity.
    pub fn append_evict(
        &mut self,
        timestep: usize,
        kv: &[ChunkKv],
        positions: &[i64],
        tokens_per_frame: usize,
    ) -> Result<()> {
        if timestep >= self.buffers.len() {
            return Err(Error::Cache(format!(
                "timestep {} out of range ({} buffers)",
                timestep,
                self.buffers.len()
            )));
        }
        if kv.len() != self.n_layers {
            return Err(Error::Cache(format!(
                "kv covers {} layers, cache has {}",
                kv.len(),
                self.n_layers
            )));
        }
        let w = positions.len();
        let tag_base = self.next_tag;
        for (layer, chunk_kv) in kv.iter().enumerate() {
            let buffer = &mut self.buffers[timestep][layer];
            // evict-then-append: oldest frames leave first
            while buffer.len() + w > self.capacity {
                buffer.remove(0);
            }
            for (fi, &position) in positions.iter().enumerate() {
                let k = chunk_kv.k.narrow(0, fi * tokens_per_frame, tokens_per_frame)?;
                let v = chunk_kv.v.narrow(0, fi * tokens_per_frame, tokens_per_frame)?;
                buffer.push(CachedFrame {
                    k: k.detach(),
                    v: v.detach(),
                    position,
                    seq_tag: tag_base + fi as u64,
                });
            }
        }
        self.next_tag = tag_base + w as u64;
        Ok(())
    }

    /// Structured dump of (timestep, layer, frame count, sequence tags), for
    /// test oracles.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        for (t, layers) in self.buffers.iter().enumerate() {
            for (l, buffer) in layers.iter().enumerate() {
                let tags: Vec<u64> = buffer.iter().map(|f| f.seq_tag).collect();
                let _ = writeln!(out, "timestep={t} layer={l} frames={} tags={tags:?}", buffer.len());
            }
        }
        out
    }
}

/// Pinned key/value blocks of the reference frame(s); contents fixed after
/// set, only the position metadata is remapped while the stream rolls.
#[derive(Debug, Clone, Default)]
pub struct SinkCache {
    layers: Vec<ChunkKv>,
    n_frames: usize,
}

impl SinkCache {
    pub fn is_set(&self) -> bool {
        !self.layers.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn layers(&self) -> &[ChunkKv] {
        &self.layers
    }

    pub fn reset(&mut self) {
        self.layers.clear();
        self.n_frames = 0;
    }

    /// Pin the sink from context kv blocks. A second set without an explicit
    /// reset is rejected.
    pub fn set(&mut self, kv: Vec<ChunkKv>, n_frames: usize) -> Result<()> {
        if self.is_set() {
            return Err(Error::Cache(
                "sink already set; call reset() before re-setting".to_string(),
            ));
        }
        self.layers = kv.into_iter()
            .map(|b| ChunkKv { k: b.k.detach(), v: b.v.detach() })
            .collect();
        self.n_frames = n_frames;
        Ok(())
    }

    /// Byte-level fingerprint of the pinned contents (positions excluded).
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for block in &self.layers {
            for t in [&block.k, &block.v] {
                for v in t.data() {
                    for b in v.to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                }
            }
        }
        h
    }
}

/// Pin the sink from a reference latent (or the first generated chunk):
/// encodes the frames once through the model at `t = 0`.
pub fn set_sink(
    sink: &mut SinkCache,
    model: &Model,
    latent: &Tensor,
    cond: &ConditionSet,
) -> Result<()> {
    let shape = latent.shape();
    let [h, w, c] = model.cfg.frame_shape();
    let frames = if shape == [h, w, c] {
        latent.reshape(&[1, h, w, c])?
    } else if shape.len() == 4 && shape[1] == h && shape[2] == w && shape[3] == c {
        latent.clone()
    } else {
        return Err(Error::UnexpectedShape {
            op: "set_sink",
            expected: vec![h, w, c],
            got: shape.to_vec(),
        });
    };
    let n = frames.shape()[0];
    // Sink frames are encoded with the null audio track: the sink carries
    // identity, not audio dynamics.
    let sink_cond = ConditionSet {
        audio: Tensor::zeros(&[n, model.cfg.cond_dim]),
        text: cond.text.clone(),
        reference: cond.reference.clone(),
        null_audio: cond.null_audio.clone(),
    };
    let positions: Vec<i64> = (0..n as i64).collect();
    let kv = model.encode_context(&frames.detach(), 0.0, &sink_cond, &positions, None)?;
    sink.set(kv, n)
}

/// Rebuild the FIFO buffers by re-encoding recent clean frames through the
/// model. Every timestep buffer receives the same re-encoded kv, taken at the
/// schedule's final (cleanest) noise level.
pub fn recache(
    model: &Model,
    cond: &ConditionSet,
    cache: &mut KVCacheSet,
    sink: &SinkCache,
    frames: &Tensor,
    positions: &[i64],
    recache_noise: f64,
    delta: i64,
) -> Result<()> {
    let f = frames.shape()[0];
    if f == 0 {
        cache.clear();
        return Ok(());
    }
    if cond.audio.shape()[0] != f {
        return Err(Error::Cache(format!(
            "recache: {} audio frames for {} latent frames",
            cond.audio.shape()[0],
            f
        )));
    }
    let g = model.cfg.tokens_per_frame();
    let ext = sink_context(sink, positions[0], delta, model.cfg.n_layers);
    let kv = model.encode_context(
        &frames.detach(),
        recache_noise,
        cond,
        positions,
        ext.as_deref(),
    )?;
    cache.clear();
    for t in 0..cache.n_timesteps() {
        cache.append_evict(t, &kv, positions, g)?;
    }
    Ok(())
}

/// Per-layer sink context with rolling positions: the sink sits `delta`
/// frame-positions before the current chunk's first position.
pub fn sink_context(
    sink: &SinkCache,
    current_start: i64,
    delta: i64,
    n_layers: usize,
) -> Option<Vec<ExternalKv>> {
    if !sink.is_set() {
        return None;
    }
    let base = current_start - delta;
    let mut out = Vec::with_capacity(n_layers);
    for block in sink.layers() {
        out.push(ExternalKv {
            k: block.k.clone(),
            v: block.v.clone(),
            frame_positions: (0..sink.n_frames() as i64).map(|i| base + i).collect(),
            n_sink_frames: sink.n_frames(),
        });
    }
    Some(out)
}

/// Assemble the full per-layer external context (sink ++ cache frames) seen
/// by one timestep's forward.
pub fn assemble_context(
    cache: &KVCacheSet,
    timestep: usize,
    sink: &SinkCache,
    current_start: i64,
    delta: i64,
) -> Result<Option<Vec<ExternalKv>>> {
    let n_layers = cache.n_layers();
    let has_cache = (0..n_layers).any(|l| cache.len(timestep, l) > 0);
    if !sink.is_set() && !has_cache {
        return Ok(None);
    }
    let sink_base = current_start - delta;
    let mut out = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let mut ks: Vec<&Tensor> = Vec::new();
        let mut vs: Vec<&Tensor> = Vec::new();
        let mut positions: Vec<i64> = Vec::new();
        let n_sink = if sink.is_set() { sink.n_frames() } else { 0 };
        if let Some(block) = sink.layers().get(layer) {
            ks.push(&block.k);
            vs.push(&block.v);
            positions.extend((0..n_sink as i64).map(|i| sink_base + i));
        }
        for frame in cache.frames(timestep, layer) {
            ks.push(&frame.k);
            vs.push(&frame.v);
            positions.push(frame.position);
        }
        if ks.is_empty() {
            return Err(Error::Cache(format!(
                "layer {layer} has neither sink nor cache entries while others do"
            )));
        }
        out.push(ExternalKv {
            k: Tensor::concat(&ks, 0)?,
            v: Tensor::concat(&vs, 0)?,
            frame_positions: positions,
            n_sink_frames: n_sink,
        });
    }
    Ok(Some(out))
}
