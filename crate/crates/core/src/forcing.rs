//! Long-horizon rollout training: self-generated windows feed the caches,
//! the stream recaches at the sampled switch point, and past the
//! long-sequence threshold the distillation field is gated to the final
//! frame of each window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accdmd::{
    dmd_generator_loss, field_norm, phase_name, phased_scores, train_fake_score, OralMask,
    TelemetryRecord, TrainLog,
};
use crate::cache::{assemble_context, recache, set_sink, KVCacheSet, SinkCache};
use crate::diffusion::{add_noise, classify_snr, sample_noise, sampler_step, TimestepSchedule};
use crate::error::{Error, Result};
use crate::model::{ConditionSet, Model};
use crate::numeric::{Adam, Tensor};

/// One training sample: a full-length condition track plus the identity's
/// oral-region mask.
#[derive(Debug, Clone)]
pub struct ForcingSample {
    pub cond: ConditionSet,
    pub mask: OralMask,
}

/// Knobs of the rollout stage.
#[derive(Debug, Clone)]
pub struct ForcingConfig {
    /// Rollout length in frames before a fresh sample is drawn.
    pub l_total: usize,
    /// Long-sequence threshold N̂: windows at or past it are tail-gated.
    pub long_threshold: usize,
    /// Per-timestep cache capacity in frames.
    pub capacity: usize,
    /// Sink offset in frame positions.
    pub delta: i64,
    /// Audio CFG scale.
    pub alpha: f64,
    pub iterations: usize,
    pub gen_lr: f64,
    pub fake_lr: f64,
    /// Turning this off applies the field to whole windows everywhere (the
    /// ablation arm of the drift comparison).
    pub tail_forcing: bool,
    /// Whether rollouts pin a reference sink; off only for the sink ablation.
    pub use_sink: bool,
}

impl ForcingConfig {
    pub fn toy_default(w: usize, capacity: usize) -> ForcingConfig {
        ForcingConfig {
            l_total: 16 * w,
            long_threshold: 2 * w,
            capacity,
            delta: (capacity + w) as i64,
            alpha: 1.8,
            iterations: 10,
            gen_lr: 1e-3,
            fake_lr: 1e-3,
            tail_forcing: true,
            use_sink: true,
        }
    }

    pub fn validate(&self, w: usize) -> Result<()> {
        if self.l_total % w != 0 || self.l_total < 2 * w {
            return Err(Error::invalid(
                "ForcingConfig",
                "l_total must be a multiple of w and at least two windows",
            ));
        }
        if self.capacity % w != 0 {
            return Err(Error::invalid(
                "ForcingConfig",
                "cache capacity must be a multiple of w",
            ));
        }
        Ok(())
    }
}

/// Live rollout bookkeeping: caches, sink, generated frames, and the sampled
/// switch point.
pub struct RolloutState {
    pub kv: KVCacheSet,
    pub sink: SinkCache,
    /// Frames generated so far in this rollout.
    pub l: usize,
    pub switch_index: usize,
    pub switch_point: usize,
    pub long_threshold: usize,
    pub delta: i64,
    /// Clean windows generated this rollout, in order.
    pub generated: Vec<Tensor>,
    /// Times recache has run this rollout, for call-trace audits.
    pub recache_calls: usize,
}

impl RolloutState {
    pub fn new(model: &Model, sched: &TimestepSchedule, cfg: &ForcingConfig) -> Result<RolloutState> {
        cfg.validate(model.cfg.chunk_frames)?;
        Ok(RolloutState {
            kv: KVCacheSet::new(sched.n_steps(), model.cfg.n_layers, cfg.capacity),
            sink: SinkCache::default(),
            l: 0,
            switch_index: 1,
            switch_point: model.cfg.chunk_frames,
            long_threshold: cfg.long_threshold,
            delta: cfg.delta,
            generated: Vec::new(),
            recache_calls: 0,
        })
    }

    /// Start a fresh rollout: empty caches, l = 0, new switch index, sink
    /// pinned from the sample's reference latent.
    pub fn reset(
        &mut self,
        model: &Model,
        sample: &ForcingSample,
        cfg: &ForcingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let w = model.cfg.chunk_frames;
        self.kv.clear();
        self.sink.reset();
        self.generated.clear();
        self.l = 0;
        self.recache_calls = 0;
        let n_windows = cfg.l_total / w;
        self.switch_index = rng.gen_range(1..n_windows.max(2));
        self.switch_point = self.switch_index * w;
        if cfg.use_sink {
            set_sink(&mut self.sink, model, &sample.cond.reference, &sample.cond)?;
        }
        Ok(())
    }

    /// Generate the next window with the student's few-step sampler against
    /// the rollout caches. With `differentiable` the final denoising pass
    /// keeps its graph so the distillation loss can reach the student.
    pub fn rollout_step(
        &mut self,
        student: &Model,
        cond: &ConditionSet,
        sched: &TimestepSchedule,
        seed: u64,
        differentiable: bool,
    ) -> Result<Tensor> {
        let w = student.cfg.chunk_frames;
        let [h, gw, c] = student.cfg.frame_shape();
        let g = student.cfg.tokens_per_frame();
        let start = self.l as i64;
        let cond_w = cond.slice_frames(self.l, w)?;
        let positions: Vec<i64> = (start..start + w as i64).collect();
        let mut x = sample_noise(&[w, h, gw, c], seed);
        let mut pred = x.clone();
        let last = sched.n_steps() - 1;
        for (j, &t) in sched.steps.iter().enumerate() {
            let ext = assemble_context(&self.kv, j, &self.sink, start, self.delta)?;
            let (p, kv) =
                student.forward_chunk(&x, t, &cond_w, ext.as_deref(), &positions, true, true)?;
            pred = if differentiable && j == last { p } else { p.detach() };
            self.kv.append_evict(j, &kv, &positions, g)?;
            let t_next = sched.steps.get(j + 1).copied().unwrap_or(0.0);
            if t_next > 0.0 {
                x = sampler_step(&x, &pred.detach(), t, t_next)?;
            }
        }
        self.generated.push(pred.detach());
        self.l += w;
        Ok(pred)
    }

    /// Rebuild the caches from the most recent clean frames; called exactly
    /// when l reaches the switch point.
    pub fn recache_now(
        &mut self,
        student: &Model,
        cond: &ConditionSet,
        sched: &TimestepSchedule,
        capacity: usize,
    ) -> Result<()> {
        let w = student.cfg.chunk_frames;
        let held = capacity.min(self.l);
        let n_windows = held / w;
        let start_window = self.l / w - n_windows;
        let refs: Vec<&Tensor> = self.generated[start_window..].iter().collect();
        let frames = Tensor::concat(&refs, 0)?;
        let first = (start_window * w) as i64;
        let positions: Vec<i64> = (first..first + held as i64).collect();
        let cond_slice = cond.slice_frames(start_window * w, held)?;
        recache(
            student,
            &cond_slice,
            &mut self.kv,
            &self.sink,
            &frames,
            &positions,
            sched.recache_level(),
            self.delta,
        )?;
        self.recache_calls += 1;
        Ok(())
    }
}

/// Zero the field on all but the final frame of the window once the rollout
/// has passed the long-sequence threshold.
pub fn tail_gate(field: &Tensor, l: usize, long_threshold: usize) -> Result<Tensor> {
    let w = field.shape()[0];
    if l < long_threshold || w == 1 {
        return Ok(field.clone());
    }
    let mut mask_shape = vec![1usize; field.rank()];
    mask_shape[0] = w;
    let mut mask = vec![0.0; w];
    mask[w - 1] = 1.0;
    field.mul(&Tensor::new(mask, &mask_shape)?)
}

/// One full rollout of Alg.-style forcing training: self-generate windows,
/// recache at the switch point, alternate fake-score and generator updates
/// 1:1 per window. Returns the mean generator loss of the rollout.
#[allow(clippy::too_many_arguments)]
fn run_rollout(
    student: &mut Model,
    teacher: &Model,
    fake: &mut Model,
    sample: &ForcingSample,
    sched: &TimestepSchedule,
    cfg: &ForcingConfig,
    gen_opt: &mut Adam,
    fake_opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    state: &mut RolloutState,
    step_counter: &mut u64,
    log: &mut TrainLog,
) -> Result<f64> {
    let w = student.cfg.chunk_frames;
    state.reset(student, sample, cfg, rng)?;
    let mut loss_sum = 0.0;
    let mut n_windows = 0;
    while state.l < cfg.l_total {
        if state.l == state.switch_point {
            state.recache_now(student, &sample.cond, sched, cfg.capacity)?;
        }
        let l_before = state.l;
        let window_seed = rng.gen::<u64>();
        let window = state.rollout_step(student, &sample.cond, sched, window_seed, true)?;
        let cond_w = sample.cond.slice_frames(l_before, w)?;

        // fake-score update on the detached window, then the generator update
        let fake_tau = sched.draw_tau(rng);
        train_fake_score(fake, fake_opt, &window.detach(), fake_tau, &cond_w, rng.gen())?;

        let tau = sched.draw_tau(rng);
        let phase = classify_snr(tau, sched);
        let x_tau = add_noise(&window.detach(), tau, rng.gen())?;
        let (field, passes) = phased_scores(
            teacher, fake, &x_tau, tau, &cond_w, cfg.alpha, &sample.mask, phase, sched,
        )?;
        let gated = if cfg.tail_forcing {
            tail_gate(&field, l_before, cfg.long_threshold)?
        } else {
            field.clone()
        };
        let loss = dmd_generator_loss(&gated, &window)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!(
                "generator loss {value} at l = {l_before} (tau {tau})"
            )));
        }
        let grads = loss.backward()?;
        let mut slots = student.param_slots();
        gen_opt.step(&mut slots, &grads)?;

        log.push(TelemetryRecord {
            step: *step_counter,
            phase: phase_name(phase).to_string(),
            tau,
            teacher_passes: passes.teacher,
            fake_passes: passes.fake,
            loss: value,
            field_norm: field_norm(&gated),
        });
        *step_counter += 1;
        loss_sum += value;
        n_windows += 1;
    }
    Ok(loss_sum / n_windows as f64)
}

/// The rollout training stage over a dataset. Runs `cfg.iterations` rollouts
/// cycling through the samples; aborts on divergence.
pub fn training_loop(
    student: &mut Model,
    teacher: &Model,
    fake: &mut Model,
    data: &[ForcingSample],
    sched: &TimestepSchedule,
    cfg: &ForcingConfig,
    seed: u64,
    log: &mut TrainLog,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("training_loop", "empty dataset"));
    }
    cfg.validate(student.cfg.chunk_frames)?;
    for sample in data {
        if sample.cond.audio.shape()[0] < cfg.l_total {
            return Err(Error::invalid(
                "training_loop",
                "condition track shorter than l_total",
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen_opt = Adam::new(cfg.gen_lr);
    let mut fake_opt = Adam::new(cfg.fake_lr);
    let mut state = RolloutState::new(student, sched, cfg)?;
    let mut step = 0u64;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let sample = &data[it % data.len()];
        let mean = run_rollout(
            student, teacher, fake, sample, sched, cfg, &mut gen_opt, &mut fake_opt, &mut rng,
            &mut state, &mut step, log,
        )?;
        losses.push(mean);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, ModelConfig};
    use crate::numeric::Tensor;

    fn tiny_world() -> (Model, Model, Model, ForcingSample, TimestepSchedule, ForcingConfig) {
        let mcfg = ModelConfig::tiny(2, vec![LayerKind::Causal, LayerKind::Bidirectional]);
        let student = Model::new(mcfg.clone(), 31).unwrap();
        let teacher = Model::new(mcfg.clone(), 32).unwrap();
        let fake = Model::new(mcfg.clone(), 33).unwrap();
        let sched = TimestepSchedule::default_four_step();
        let mut cfg = ForcingConfig::toy_default(mcfg.chunk_frames, 6);
        cfg.l_total = 8 * mcfg.chunk_frames;
        cfg.iterations = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let cond = ConditionSet::new(
            Tensor::randn(&[cfg.l_total, mcfg.cond_dim], 1.0, &mut rng),
            None,
            Tensor::randn(&[mcfg.grid_h, mcfg.grid_w, mcfg.latent_channels], 1.0, &mut rng),
            mcfg.cond_dim,
        );
        let mask = OralMask::ones(mcfg.grid_h, mcfg.grid_w);
        (student, teacher, fake, ForcingSample { cond, mask }, sched, cfg)
    }

    #[test]
    fn tail_gate_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = Tensor::randn(&[4, 2, 2, 2], 1.0, &mut rng);
        // below threshold the field is untouched
        let open = tail_gate(&field, 3, 8).unwrap();
        assert_eq!(open.data(), field.data());
        // at or past the threshold only the final frame survives
        let gated = tail_gate(&field, 8, 8).unwrap();
        let per_frame = 2 * 2 * 2;
        assert!(gated.data()[..3 * per_frame].iter().all(|v| *v == 0.0));
        assert_eq!(&gated.data()[3 * per_frame..], &field.data()[3 * per_frame..]);
        // single-frame windows are never gated away
        let f1 = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        assert_eq!(tail_gate(&f1, 100, 0).unwrap().data(), f1.data());
    }

    #[test]
    fn tail_gate_zeroes_non_tail_generator_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field = Tensor::randn(&[3, 2, 2, 1], 1.0, &mut rng);
        let gated = tail_gate(&field, 10, 0).unwrap();
        let gen = Tensor::param(vec![0.1; 12], &[3, 2, 2, 1]).unwrap();
        let loss = dmd_generator_loss(&gated, &gen).unwrap();
        let g = loss.backward().unwrap().wrt(&gen).unwrap();
        let per_frame = 4;
        assert!(g.data()[..2 * per_frame].iter().all(|v| *v == 0.0), "non-tail gradient leaked");
        assert!(g.data()[2 * per_frame..].iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn rollout_reset_and_first_step_matches_cache_free() {
        let (student, _, _, sample, sched, cfg) = tiny_world();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = RolloutState::new(&student, &sched, &cfg).unwrap();
        state.reset(&student, &sample, &cfg, &mut rng).unwrap();
        assert_eq!(state.l, 0);
        assert!(state.kv.is_empty());
        assert!(state.sink.is_set());
        assert!(state.switch_index >= 1);

        // two sequential windows: the second forward must see the first's kv
        state.rollout_step(&student, &sample.cond, &sched, 50, false).unwrap();
        assert_eq!(state.l, student.cfg.chunk_frames);
        for j in 0..sched.n_steps() {
            assert_eq!(state.kv.len(j, 0), student.cfg.chunk_frames);
        }
        state.rollout_step(&student, &sample.cond, &sched, 51, false).unwrap();
        assert_eq!(state.kv.len(0, 0), 2 * student.cfg.chunk_frames);
        assert_eq!(state.generated.len(), 2);
    }

    #[test]
    fn rollout_is_reproducible() {
        let (student, _, _, sample, sched, cfg) = tiny_world();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut state = RolloutState::new(&student, &sched, &cfg).unwrap();
            state.reset(&student, &sample, &cfg, &mut rng).unwrap();
            let a = state.rollout_step(&student, &sample.cond, &sched, 60, false).unwrap();
            let b = state.rollout_step(&student, &sample.cond, &sched, 61, false).unwrap();
            (a.data().to_vec(), b.data().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn recache_fires_exactly_once_per_rollout_at_switch_point() {
        let (mut student, teacher, mut fake, sample, sched, cfg) = tiny_world();
        let mut log = TrainLog::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut gen_opt = Adam::new(cfg.gen_lr);
        let mut fake_opt = Adam::new(cfg.fake_lr);
        let mut state = RolloutState::new(&student, &sched, &cfg).unwrap();
        let mut step = 0u64;
        run_rollout(
            &mut student, &teacher, &mut fake, &sample, &sched, &cfg, &mut gen_opt,
            &mut fake_opt, &mut rng, &mut state, &mut step, &mut log,
        )
        .unwrap();
        assert_eq!(state.recache_calls, 1);
        assert_eq!(state.l, cfg.l_total);
        // one fake and one generator update per window, logged 1:1
        assert_eq!(log.records.len(), cfg.l_total / student.cfg.chunk_frames);
        assert!(log.records.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn training_loop_smoke_and_validation() {
        let (mut student, teacher, mut fake, sample, sched, mut cfg) = tiny_world();
        cfg.iterations = 2;
        cfg.l_total = 4 * student.cfg.chunk_frames;
        let short = ForcingSample {
            cond: sample.cond.slice_frames(0, 2).unwrap(),
            mask: sample.mask.clone(),
        };
        let mut log = TrainLog::default();
        assert!(training_loop(
            &mut student, &teacher, &mut fake, &[short], &sched, &cfg, 9, &mut log
        )
        .is_err());

        let before = student.param_hash();
        let losses = training_loop(
            &mut student, &teacher, &mut fake, &[sample], &sched, &cfg, 9, &mut log,
        )
        .unwrap();
        assert_eq!(losses.len(), 2);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert_ne!(student.param_hash(), before, "student never updated");
    }

    #[test]
    fn zero_threshold_gates_every_window() {
        let (mut student, teacher, mut fake, sample, sched, mut cfg) = tiny_world();
        cfg.long_threshold = 0;
        cfg.l_total = 4 * student.cfg.chunk_frames;
        let mut log = TrainLog::default();
        training_loop(
            &mut student, &teacher, &mut fake, &[sample.clone()], &sched, &cfg, 11, &mut log,
        )
        .unwrap();
        assert!(log.records.iter().all(|r| r.loss.is_finite()));
        // every window trips the gate when the threshold is zero
        let w = student.cfg.chunk_frames;
        let field = Tensor::ones(&[w, 2, 2, 2]);
        for l in (0..cfg.l_total).step_by(w) {
            let gated = tail_gate(&field, l, 0).unwrap();
            let live: usize = gated.data().iter().filter(|v| **v != 0.0).count();
            assert_eq!(live, 2 * 2 * 2);
        }
    }
}
