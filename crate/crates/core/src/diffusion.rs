//! Forward noising, the few-step timestep schedule, SNR-phase routing, CFG
//! score combination, and the backward simulation that prepares distillation
//! inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::{assemble_context, KVCacheSet, SinkCache};
use crate::error::{Error, Result};
use crate::model::{ConditionSet, LatentChunk, Model};
use crate::numeric::Tensor;

/// Signal-to-noise phase of a sampled timestep: large noise carries little
/// signal, so large τ maps to `Low`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnrPhase {
    Low,
    High,
}

/// Descending few-step denoising schedule plus the τ partition used by the
/// distillation objective.
#[derive(Debug, Clone)]
pub struct TimestepSchedule {
    /// Strictly decreasing noise levels in (0, 1], noisiest first.
    pub steps: Vec<f64>,
    /// Phase split: τ ≥ snr_split is the low-SNR side.
    pub snr_split: f64,
    /// Grid the distillation τ is drawn from.
    pub tau_grid: Vec<f64>,
}

impl TimestepSchedule {
    pub fn new(steps: Vec<f64>, snr_split: f64, tau_grid: Vec<f64>) -> Result<TimestepSchedule> {
        let sched = TimestepSchedule { steps, snr_split, tau_grid };
        sched.validate()?;
        Ok(sched)
    }

    /// The default 4-pass schedule: t ∈ {1.0, 0.75, 0.5, 0.25}, split 0.5,
    /// τ drawn from {0.1, …, 0.9}.
    pub fn default_four_step() -> TimestepSchedule {
        TimestepSchedule {
            steps: vec![1.0, 0.75, 0.5, 0.25],
            snr_split: 0.5,
            tau_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::invalid("TimestepSchedule", "empty step list"));
        }
        for &t in &self.steps {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::invalid(
                    "TimestepSchedule",
                    format!("step {t} outside (0, 1]"),
                ));
            }
        }
        for pair in self.steps.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::invalid(
                    "TimestepSchedule",
                    "steps must be strictly decreasing",
                ));
            }
        }
        if self.tau_grid.is_empty() {
            return Err(Error::invalid("TimestepSchedule", "empty tau grid"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Noise level the cache recache encoding uses: the cleanest scheduled
    /// step.
    pub fn recache_level(&self) -> f64 {
        *self.steps.last().unwrap()
    }

    pub fn draw_tau(&self, rng: &mut ChaCha8Rng) -> f64 {
        use rand::Rng;
        self.tau_grid[rng.gen_range(0..self.tau_grid.len())]
    }
}

/// Low iff τ ≥ snr_split; the boundary value counts as low.
pub fn classify_snr(tau: f64, sched: &TimestepSchedule) -> SnrPhase {
    if tau >= sched.snr_split {
        SnrPhase::Low
    } else {
        SnrPhase::High
    }
}

/// Standard-normal sample with the given shape, deterministic in the seed.
pub fn sample_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Forward noising x_t = (1 − t)·x₀ + t·ε with ε ~ N(0, 1).
pub fn add_noise(x0: &Tensor, t: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("add_noise", format!("t = {t} outside [0, 1]")));
    }
    let eps = sample_noise(x0.shape(), seed);
    x0.scale(1.0 - t).add(&eps.scale(t))
}

/// s_uncond + α·(s_cond − s_uncond).
pub fn cfg_combine(s_cond: &Tensor, s_uncond: &Tensor, alpha: f64) -> Result<Tensor> {
    if s_cond.shape() != s_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: s_cond.shape().to_vec(),
            rhs: s_uncond.shape().to_vec(),
        });
    }
    s_uncond.add(&s_cond.sub(s_uncond)?.scale(alpha))
}

/// Deterministic step of the few-step sampler: given the clean prediction at
/// level `t`, move the latent to `t_next` along the implied noise direction.
pub fn sampler_step(x_t: &Tensor, pred_x0: &Tensor, t: f64, t_next: f64) -> Result<Tensor> {
    // implied eps = (x_t − (1 − t)·x0) / t, then renoise x0 with it at t_next
    let eps = x_t.sub(&pred_x0.scale(1.0 - t))?.scale(1.0 / t);
    pred_x0.scale(1.0 - t_next).add(&eps.scale(t_next))
}

/// Run `n_passes` student steps of the schedule from `noise` (noisiest step
/// first) without gradient recording; returns the last clean prediction.
pub fn partial_sample(
    student: impl Fn(&Tensor, f64) -> Result<Tensor>,
    noise: &Tensor,
    sched: &TimestepSchedule,
    n_passes: usize,
) -> Result<Tensor> {
    if n_passes == 0 || n_passes > sched.n_steps() {
        return Err(Error::invalid(
            "partial_sample",
            format!("n_passes = {n_passes} for a {}-step schedule", sched.n_steps()),
        ));
    }
    let mut x = noise.detach();
    let mut pred = x.clone();
    for i in 0..n_passes {
        let t = sched.steps[i];
        pred = student(&x, t)?.detach();
        let t_next = sched.steps.get(i + 1).copied().unwrap_or(0.0);
        if i + 1 < n_passes {
            x = sampler_step(&x, &pred, t, t_next)?;
        }
    }
    Ok(pred)
}

/// Mid-generation recovery for distillation: sample partway down the schedule
/// (T − k + 1 student passes, stopping at step k counted from the clean end),
/// then renoise the resulting clean estimate back to level t_k with fresh
/// seeded noise.
pub fn backward_simulate(
    student: impl Fn(&Tensor, f64) -> Result<Tensor>,
    noise: &Tensor,
    sched: &TimestepSchedule,
    stop_at: usize,
    seed: u64,
) -> Result<Tensor> {
    let t_count = sched.n_steps();
    if stop_at == 0 || stop_at > t_count {
        return Err(Error::invalid(
            "backward_simulate",
            format!("stop_at = {stop_at} for a {t_count}-step schedule"),
        ));
    }
    let n_passes = t_count - stop_at + 1;
    let pred = partial_sample(student, noise, sched, n_passes)?;
    add_noise(&pred, sched.steps[t_count - stop_at], seed)
}

/// Generate one clean chunk with the few-step sampler, reading and updating
/// the per-timestep caches. Exactly T conditional forward passes.
#[allow(clippy::too_many_arguments)]
pub fn few_step_sample(
    model: &Model,
    cond: &ConditionSet,
    cache: &mut KVCacheSet,
    sink: &SinkCache,
    sched: &TimestepSchedule,
    positions: &[i64],
    delta: i64,
    chunk_index: usize,
    seed: u64,
) -> Result<LatentChunk> {
    if cache.n_timesteps() != sched.n_steps() {
        return Err(Error::Cache(format!(
            "cache has {} timestep buffers for a {}-step schedule",
            cache.n_timesteps(),
            sched.n_steps()
        )));
    }
    let [h, w, c] = model.cfg.frame_shape();
    let g = model.cfg.tokens_per_frame();
    let mut x = sample_noise(&[positions.len(), h, w, c], seed);
    let mut pred = x.clone();
    for (j, &t) in sched.steps.iter().enumerate() {
        let ext = assemble_context(cache, j, sink, positions[0], delta)?;
        let (p, kv) = model.forward_chunk(&x, t, cond, ext.as_deref(), positions, true, true)?;
        pred = p.detach();
        cache.append_evict(j, &kv, positions, g)?;
        let t_next = sched.steps.get(j + 1).copied().unwrap_or(0.0);
        if t_next > 0.0 {
            x = sampler_step(&x, &pred, t, t_next)?;
        }
    }
    if !pred.is_finite() {
        return Err(Error::Diverged("non-finite sample from few_step_sample".to_string()));
    }
    Ok(LatentChunk { frames: pred, chunk_index, noise_level: 0.0 })
}
