//! Streaming long-horizon generation: per-timestep cache maintenance, sink
//! initialization from the first chunk, rolling position remapping, and
//! latency accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{set_sink, KVCacheSet, SinkCache};
use crate::diffusion::{few_step_sample, TimestepSchedule};
use crate::error::{Error, Result};
use crate::model::{ConditionSet, LatentChunk, Model};
use crate::numeric::Tensor;

/// Streaming knobs. `rolling` pins the sink at a fixed relative offset
/// `delta` before the live window; turning it off leaves the sink at its
/// original absolute positions (useful only as a control).
#[derive(Debug, Clone)]
pub struct StreamConfig {
    /// Per-timestep cache capacity in frames (L); must be a multiple of w.
    pub capacity: usize,
    /// Sink offset in frame positions, default L + w.
    pub delta: i64,
    pub use_sink: bool,
    pub rolling: bool,
}

impl StreamConfig {
    pub fn new(capacity: usize, chunk_frames: usize) -> Result<StreamConfig> {
        if capacity == 0 || capacity % chunk_frames != 0 {
            return Err(Error::invalid(
                "StreamConfig",
                format!("capacity {capacity} must be a positive multiple of w = {chunk_frames}"),
            ));
        }
        Ok(StreamConfig {
            capacity,
            delta: (capacity + chunk_frames) as i64,
            use_sink: true,
            rolling: true,
        })
    }
}

/// One live stream: per-timestep caches, the pinned sink, the position
/// counter, and the generated chunks in order.
pub struct StreamSession {
    pub kv: KVCacheSet,
    pub sink: SinkCache,
    pub sched: TimestepSchedule,
    pub config: StreamConfig,
    pub next_position: i64,
    pub chunks: Vec<LatentChunk>,
    pub chunk_seconds: Vec<f64>,
    pub total_calls: u64,
    pub unconditional_calls: u64,
    pub cache_high_water_floats: usize,
}

/// Total f64 slots held by the cached key/value frames.
pub fn cache_floats(cache: &KVCacheSet) -> usize {
    let mut total = 0;
    for t in 0..cache.n_timesteps() {
        for l in 0..cache.n_layers() {
            for f in cache.frames(t, l) {
                total += f.k.numel() + f.v.numel();
            }
        }
    }
    total
}

/// Sink frame positions after the rolling remap: a block of
/// `sink.n_frames()` positions starting `delta` before `current_start`.
pub fn rolling_rope(sink: &SinkCache, current_start: i64, delta: i64) -> Vec<i64> {
    let base = current_start - delta;
    (0..sink.n_frames() as i64).map(|i| base + i).collect()
}

impl StreamSession {
    pub fn new(model: &Model, sched: TimestepSchedule, config: StreamConfig) -> Result<StreamSession> {
        if config.capacity % model.cfg.chunk_frames != 0 {
            return Err(Error::invalid(
                "StreamSession",
                "cache capacity must be a multiple of the chunk length",
            ));
        }
        Ok(StreamSession {
            kv: KVCacheSet::new(sched.n_steps(), model.cfg.n_layers, config.capacity),
            sink: SinkCache::default(),
            sched,
            config,
            next_position: 0,
            chunks: Vec::new(),
            chunk_seconds: Vec::new(),
            total_calls: 0,
            unconditional_calls: 0,
            cache_high_water_floats: 0,
        })
    }

    /// Generate the next chunk: T denoising passes against this session's
    /// per-timestep caches, then pin the sink if this was the first chunk.
    pub fn generate_chunk(&mut self, model: &Model, cond: &ConditionSet, seed: u64) -> Result<&LatentChunk> {
        let w = model.cfg.chunk_frames;
        let start = self.next_position;
        let cond_chunk = cond.slice_frames(start as usize, w)?;
        let positions: Vec<i64> = (start..start + w as i64).collect();
        // with rolling off the sink base pins to −delta regardless of start
        let delta_eff = if self.config.rolling {
            self.config.delta
        } else {
            start + self.config.delta
        };
        let calls_before = model.counters.total.get();
        let uncond_before = model.counters.unconditional.get();
        let t0 = Instant::now();
        let chunk = few_step_sample(
            model,
            &cond_chunk,
            &mut self.kv,
            &self.sink,
            &self.sched,
            &positions,
            delta_eff,
            self.chunks.len(),
            seed,
        )?;
        self.chunk_seconds.push(t0.elapsed().as_secs_f64());
        self.total_calls += model.counters.total.get() - calls_before;
        self.unconditional_calls += model.counters.unconditional.get() - uncond_before;
        self.cache_high_water_floats = self.cache_high_water_floats.max(cache_floats(&self.kv));
        self.next_position += w as i64;
        if self.config.use_sink && !self.sink.is_set() {
            let n = model.cfg.sink_frames.min(w);
            let first = chunk.frames.narrow(0, 0, n)?;
            set_sink(&mut self.sink, model, &first, &cond_chunk)?;
        }
        self.chunks.push(chunk);
        Ok(self.chunks.last().unwrap())
    }
}

/// Run a whole stream of `m` chunks; the per-frame condition track must cover
/// all of them.
pub fn generate_stream(
    model: &Model,
    cond: &ConditionSet,
    m: usize,
    sched: &TimestepSchedule,
    config: StreamConfig,
    seed: u64,
) -> Result<StreamSession> {
    if m == 0 {
        return Err(Error::invalid("generate_stream", "need at least one chunk"));
    }
    let w = model.cfg.chunk_frames;
    if cond.audio.shape()[0] < m * w {
        return Err(Error::invalid(
            "generate_stream",
            format!(
                "condition track covers {} frames, stream needs {}",
                cond.audio.shape()[0],
                m * w
            ),
        ));
    }
    let mut session = StreamSession::new(model, sched.clone(), config)?;
    for i in 0..m {
        session.generate_chunk(model, cond, seed.wrapping_add(i as u64))?;
    }
    Ok(session)
}

/// Concatenate a session's chunks into one `[frames, H', W', C]` latent clip.
pub fn collect_latents(session: &StreamSession) -> Result<Tensor> {
    if session.chunks.is_empty() {
        return Err(Error::invalid("collect_latents", "empty session"));
    }
    let refs: Vec<&Tensor> = session.chunks.iter().map(|c| &c.frames).collect();
    Tensor::concat(&refs, 0)
}

/// Throughput and memory summary of a finished stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_chunks: usize,
    pub n_frames: usize,
    pub total_calls: u64,
    pub calls_per_frame: f64,
    pub total_seconds: f64,
    pub mean_chunk_seconds: f64,
    pub cache_high_water_floats: usize,
    pub cache_model_floats: usize,
}

pub fn latency_report(session: &StreamSession, model: &Model) -> Result<LatencyReport> {
    if session.chunks.is_empty() {
        return Err(Error::invalid("latency_report", "no chunks generated"));
    }
    let w = model.cfg.chunk_frames;
    let n_frames = session.chunks.len() * w;
    let g = model.cfg.tokens_per_frame();
    let held = session.config.capacity.min(n_frames);
    // each cached frame stores pre-rotation k and v blocks per layer and
    // timestep
    let cache_model_floats =
        session.sched.n_steps() * model.cfg.n_layers * held * g * model.cfg.model_dim * 2;
    let total_seconds: f64 = session.chunk_seconds.iter().sum();
    Ok(LatencyReport {
        n_chunks: session.chunks.len(),
        n_frames,
        total_calls: session.total_calls,
        calls_per_frame: session.total_calls as f64 / n_frames as f64,
        total_seconds,
        mean_chunk_seconds: total_seconds / session.chunks.len() as f64,
        cache_high_water_floats: session.cache_high_water_floats,
        cache_model_floats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_noise, sampler_step};
    use crate::model::{LayerKind, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup() -> (Model, ConditionSet, TimestepSchedule) {
        let cfg = ModelConfig::tiny(2, vec![LayerKind::Causal, LayerKind::Bidirectional]);
        let model = Model::new(cfg.clone(), 91).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let cond = ConditionSet::new(
            Tensor::randn(&[24, cfg.cond_dim], 1.0, &mut rng),
            None,
            Tensor::randn(&[cfg.grid_h, cfg.grid_w, cfg.latent_channels], 1.0, &mut rng),
            cfg.cond_dim,
        );
        (model, cond, TimestepSchedule::default_four_step())
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_chunk_sets_sink_afterward() {
        let (model, cond, sched) = tiny_setup();
        let config = StreamConfig::new(6, model.cfg.chunk_frames).unwrap();
        let session = generate_stream(&model, &cond, 1, &sched, config, 5).unwrap();
        assert_eq!(session.chunks.len(), 1);
        assert!(session.sink.is_set());
        assert_eq!(session.sink.n_frames(), model.cfg.sink_frames);
    }

    #[test]
    fn stream_counts_capacity_and_sink_permanence() {
        let (model, cond, sched) = tiny_setup();
        let w = model.cfg.chunk_frames;
        let config = StreamConfig::new(6, w).unwrap();
        let mut session = StreamSession::new(&model, sched.clone(), config).unwrap();
        let mut sink_hash = None;
        for i in 0..5 {
            session.generate_chunk(&model, &cond, 100 + i).unwrap();
            if let Some(h) = sink_hash {
                assert_eq!(session.sink.content_hash(), h, "sink drifted at chunk {i}");
            }
            if session.sink.is_set() {
                sink_hash = Some(session.sink.content_hash());
            }
        }
        assert_eq!(session.total_calls, 5 * sched.n_steps() as u64);
        assert_eq!(session.unconditional_calls, 0);
        // beyond the fill-up phase every buffer pins at capacity
        for t in 0..sched.n_steps() {
            for l in 0..model.cfg.n_layers {
                assert_eq!(session.kv.len(t, l), 6);
            }
        }
        // eviction audit: nothing older than capacity frames back remains
        let oldest_allowed = session.next_position - 6;
        for t in 0..sched.n_steps() {
            for f in session.kv.frames(t, 0) {
                assert!(f.position >= oldest_allowed);
            }
        }
        assert_eq!(session.chunks.len() * w, 10);
    }

    #[test]
    fn condition_track_too_short_rejected() {
        let (model, cond, sched) = tiny_setup();
        let config = StreamConfig::new(6, model.cfg.chunk_frames).unwrap();
        assert!(generate_stream(&model, &cond, 13, &sched, config.clone(), 5).is_err());
        assert!(generate_stream(&model, &cond, 0, &sched, config, 5).is_err());
    }

    #[test]
    fn sliding_window_matches_stitched_oracle() {
        // while nothing is evicted, streaming with caches must equal a
        // from-scratch stitched forward over every chunk's per-step state
        let (model, cond, sched) = tiny_setup();
        let w = model.cfg.chunk_frames;
        let m = 3;
        let mut config = StreamConfig::new(6, w).unwrap();
        config.use_sink = false;
        let seed = 700u64;
        let session = generate_stream(&model, &cond, m, &sched, config, seed).unwrap();

        let [h, gw, c] = model.cfg.frame_shape();
        let t_count = sched.n_steps();
        // states[j][i]: chunk i's noisy input entering step j
        let mut states: Vec<Vec<Tensor>> = vec![Vec::new(); t_count];
        for i in 0..m {
            let mut x = sample_noise(&[w, h, gw, c], seed.wrapping_add(i as u64));
            let mut pred = x.clone();
            for (j, &t) in sched.steps.iter().enumerate() {
                states[j].push(x.clone());
                let all: Vec<&Tensor> = states[j].iter().collect();
                let stacked = Tensor::concat(&all, 0).unwrap();
                let n_frames = (i + 1) * w;
                let chunk_ids: Vec<usize> =
                    (0..n_frames).map(|f| f / w).collect();
                let positions: Vec<i64> = (0..n_frames as i64).collect();
                let cond_all = cond.slice_frames(0, n_frames).unwrap();
                let (full_pred, _) = model
                    .forward_frames(&stacked, t, &cond_all, &chunk_ids, &positions, None, true, true)
                    .unwrap();
                pred = full_pred.narrow(0, i * w, w).unwrap();
                let t_next = sched.steps.get(j + 1).copied().unwrap_or(0.0);
                if t_next > 0.0 {
                    x = sampler_step(&x, &pred, t, t_next).unwrap();
                }
            }
            let diff = max_abs_diff(&pred, &session.chunks[i].frames);
            assert!(diff < 1e-5, "chunk {i} drifted from oracle by {diff}");
        }
    }

    #[test]
    fn rolling_sink_makes_logits_position_invariant() {
        let (model, cond, sched) = tiny_setup();
        let w = model.cfg.chunk_frames;
        let run = |start_chunks: usize, rolling: bool| {
            let mut config = StreamConfig::new(6, w).unwrap();
            config.rolling = rolling;
            let mut session = StreamSession::new(&model, sched.clone(), config).unwrap();
            // pin the sink up front and plant the stream far into the track
            let mut rng = ChaCha8Rng::seed_from_u64(777);
            let anchor = Tensor::randn(&[1, model.cfg.grid_h, model.cfg.grid_w, model.cfg.latent_channels], 1.0, &mut rng);
            set_sink(&mut session.sink, &model, &anchor, &cond).unwrap();
            session.next_position = (start_chunks * w) as i64;
            let shifted = ConditionSet::new(
                Tensor::concat(
                    &[&Tensor::zeros(&[start_chunks * w, model.cfg.cond_dim]), &cond.audio],
                    0,
                )
                .unwrap(),
                cond.text.clone(),
                cond.reference.clone(),
                model.cfg.cond_dim,
            );
            session.generate_chunk(&model, &shifted, 55).unwrap();
            session.chunks[0].frames.clone()
        };
        let near = run(1, true);
        let far = run(100, true);
        assert!(max_abs_diff(&near, &far) < 1e-9);

        // without the rolling remap the relative offset changes with the
        // absolute position and the outputs drift
        let near_fixed = run(1, false);
        let far_fixed = run(100, false);
        assert!(max_abs_diff(&near_fixed, &far_fixed) > 1e-9);
    }

    #[test]
    fn latency_report_contract() {
        let (model, cond, sched) = tiny_setup();
        let config = StreamConfig::new(6, model.cfg.chunk_frames).unwrap();
        let session = generate_stream(&model, &cond, 5, &sched, config, 5).unwrap();
        let report = latency_report(&session, &model).unwrap();
        let w = model.cfg.chunk_frames as f64;
        assert!((report.calls_per_frame - sched.n_steps() as f64 / w).abs() < 1e-12);
        // high-water mark within 20 percent of the capacity model
        let ratio = report.cache_high_water_floats as f64 / report.cache_model_floats as f64;
        assert!((0.8..=1.2).contains(&ratio), "ratio = {ratio}");

        let empty = StreamSession::new(&model, sched.clone(), StreamConfig::new(6, 2).unwrap()).unwrap();
        assert!(latency_report(&empty, &model).is_err());
    }

    #[test]
    fn collect_latents_orders_frames() {
        let (model, cond, sched) = tiny_setup();
        let config = StreamConfig::new(6, model.cfg.chunk_frames).unwrap();
        let session = generate_stream(&model, &cond, 3, &sched, config, 5).unwrap();
        let all = collect_latents(&session).unwrap();
        assert_eq!(all.shape()[0], 3 * model.cfg.chunk_frames);
        let first = all.narrow(0, 0, model.cfg.chunk_frames).unwrap();
        assert_eq!(first.data(), session.chunks[0].frames.data());
    }
}
