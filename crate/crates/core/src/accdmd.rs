//! Phased score-distillation objective: real/fake score assembly per SNR
//! phase, oral-region mask routing, the generator surrogate loss, fake-score
//! training, and teacher adaptation to short chunks.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise, cfg_combine, classify_snr, SnrPhase, TimestepSchedule};
use crate::error::{Error, Result};
use crate::model::{ConditionSet, Model};
use crate::numeric::{Adam, Tensor};

/// How the real/fake difference is applied over the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionMode {
    Global,
    OralMasked,
}

/// Matched real/fake score estimates at one τ.
#[derive(Debug, Clone)]
pub struct ScorePair {
    pub s_real: Tensor,
    pub s_fake: Tensor,
    pub phase: SnrPhase,
    pub region_mode: RegionMode,
}

impl ScorePair {
    pub fn new(s_real: Tensor, s_fake: Tensor, phase: SnrPhase, region_mode: RegionMode) -> Result<ScorePair> {
        if s_real.shape() != s_fake.shape() {
            return Err(Error::ShapeMismatch {
                op: "ScorePair",
                lhs: s_real.shape().to_vec(),
                rhs: s_fake.shape().to_vec(),
            });
        }
        Ok(ScorePair { s_real, s_fake, phase, region_mode })
    }
}

/// Soft oral-region mask over the latent grid, values in [0, 1].
#[derive(Debug, Clone)]
pub struct OralMask {
    /// `[H', W']`
    pub m: Tensor,
}

impl OralMask {
    /// Clamps incoming values into [0, 1].
    pub fn new(m: Tensor) -> Result<OralMask> {
        if m.rank() != 2 {
            return Err(Error::invalid("OralMask", "mask must be [H', W']"));
        }
        let clamped: Vec<f64> = m.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(OralMask { m: Tensor::new(clamped, m.shape())? })
    }

    pub fn zeros(h: usize, w: usize) -> OralMask {
        OralMask { m: Tensor::zeros(&[h, w]) }
    }

    pub fn ones(h: usize, w: usize) -> OralMask {
        OralMask { m: Tensor::ones(&[h, w]) }
    }

    /// Mask broadcast over `[frames, H', W', C]`.
    fn broadcastable(&self) -> Result<Tensor> {
        let s = self.m.shape();
        self.m.reshape(&[1, s[0], s[1], 1])
    }
}

/// Split the guided distillation gradient into its two parts: a
/// distribution-matching term Δ_DM = s^R_c − s^F and a condition-alignment
/// term Δ_CA = s^R_c − s^R_uncond; the full field is Δ_DM + (α − 1)·Δ_CA.
pub fn decompose_cfg_gradient(
    s_real_cond: &Tensor,
    s_real_uncond: &Tensor,
    s_fake: &Tensor,
    alpha: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    if s_real_cond.shape() != s_real_uncond.shape() || s_real_cond.shape() != s_fake.shape() {
        return Err(Error::ShapeMismatch {
            op: "decompose_cfg_gradient",
            lhs: s_real_cond.shape().to_vec(),
            rhs: s_fake.shape().to_vec(),
        });
    }
    let delta_dm = s_real_cond.sub(s_fake)?;
    let delta_ca = s_real_cond.sub(s_real_uncond)?;
    let grad_full = delta_dm.add(&delta_ca.scale(alpha - 1.0))?;
    Ok((grad_full, delta_dm, delta_ca))
}

/// Network-pass tally of one phased-score evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub teacher: u64,
    pub fake: u64,
}

/// Real-minus-fake gradient field for one noisy chunk.
///
/// Low phase: CFG-combined teacher (conditional + audio-unconditional passes)
/// minus the fake conditional score, applied globally. High phase: one plain
/// conditional teacher pass; the fake side blends CFG-combined and
/// conditional scores per pixel under the oral mask.
#[allow(clippy::too_many_arguments)]
pub fn phased_scores(
    teacher: &Model,
    fake: &Model,
    x_tau: &Tensor,
    tau: f64,
    cond: &ConditionSet,
    alpha: f64,
    mask: &OralMask,
    phase: SnrPhase,
    sched: &TimestepSchedule,
) -> Result<(Tensor, PassCounts)> {
    if classify_snr(tau, sched) != phase {
        return Err(Error::invalid(
            "phased_scores",
            format!("phase does not match tau = {tau} under split {}", sched.snr_split),
        ));
    }
    let positions: Vec<i64> = (0..x_tau.shape()[0] as i64).collect();
    let teacher_before = teacher.counters.total.get();
    let fake_before = fake.counters.total.get();
    let x = x_tau.detach();
    let field = match phase {
        SnrPhase::Low => {
            let (t_c, _) = teacher.forward_chunk(&x, tau, cond, None, &positions, true, true)?;
            let (t_u, _) = teacher.forward_chunk(&x, tau, cond, None, &positions, false, true)?;
            let (f_c, _) = fake.forward_chunk(&x, tau, cond, None, &positions, true, true)?;
            cfg_combine(&t_c, &t_u, alpha)?.sub(&f_c)?
        }
        SnrPhase::High => {
            let (t_c, _) = teacher.forward_chunk(&x, tau, cond, None, &positions, true, true)?;
            let (f_c, _) = fake.forward_chunk(&x, tau, cond, None, &positions, true, true)?;
            let (f_u, _) = fake.forward_chunk(&x, tau, cond, None, &positions, false, true)?;
            let f_cfg = cfg_combine(&f_c, &f_u, alpha)?;
            let m = mask.broadcastable()?;
            let one_minus = m.neg().add_scalar(1.0);
            let blend = m.mul(&f_cfg)?.add(&one_minus.mul(&f_c)?)?;
            t_c.sub(&blend)?
        }
    };
    let counts = PassCounts {
        teacher: teacher.counters.total.get() - teacher_before,
        fake: fake.counters.total.get() - fake_before,
    };
    Ok((field.detach(), counts))
}

/// Unphased global field: CFG-combined teacher minus the conditional fake
/// score at any τ. The baseline the phase routing is an ablation against.
pub fn cfg_dmd_field(
    teacher: &Model,
    fake: &Model,
    x_tau: &Tensor,
    tau: f64,
    cond: &ConditionSet,
    alpha: f64,
) -> Result<(Tensor, PassCounts)> {
    let positions: Vec<i64> = (0..x_tau.shape()[0] as i64).collect();
    let teacher_before = teacher.counters.total.get();
    let fake_before = fake.counters.total.get();
    let x = x_tau.detach();
    let (t_c, _) = teacher.forward_chunk(&x, tau, cond, None, &positions, true, true)?;
    let (t_u, _) = teacher.forward_chunk(&x, tau, cond, None, &positions, false, true)?;
    let (f_c, _) = fake.forward_chunk(&x, tau, cond, None, &positions, true, true)?;
    let field = cfg_combine(&t_c, &t_u, alpha)?.sub(&f_c)?;
    let counts = PassCounts {
        teacher: teacher.counters.total.get() - teacher_before,
        fake: fake.counters.total.get() - fake_before,
    };
    Ok((field.detach(), counts))
}

/// Mean absolute value of the field plus 1e-8, the per-sample normalizer.
pub fn field_norm(field: &Tensor) -> f64 {
    let d = field.data();
    d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64 + 1e-8
}

/// Surrogate whose gradient w.r.t. `generated` is minus the normalized field:
/// 0.5·||generated − detach(generated + field / norm)||².
pub fn dmd_generator_loss(gradient_field: &Tensor, generated: &Tensor) -> Result<Tensor> {
    if gradient_field.shape() != generated.shape() {
        return Err(Error::ShapeMismatch {
            op: "dmd_generator_loss",
            lhs: gradient_field.shape().to_vec(),
            rhs: generated.shape().to_vec(),
        });
    }
    let normalized = gradient_field.detach().scale(1.0 / field_norm(gradient_field));
    let target = generated.add(&normalized)?.detach();
    Ok(generated.sub(&target)?.square().sum_all().scale(0.5))
}

/// Per-frame-chunk denoising regression loss at level `tau`. The window is
/// treated as one chunk regardless of its length.
pub fn denoising_loss(
    model: &Model,
    frames: &Tensor,
    tau: f64,
    cond: &ConditionSet,
    seed: u64,
) -> Result<Tensor> {
    let clean = frames.detach();
    let x_tau = add_noise(&clean, tau, seed)?;
    let positions: Vec<i64> = (0..frames.shape()[0] as i64).collect();
    let (pred, _) = model.forward_chunk(&x_tau, tau, cond, None, &positions, true, true)?;
    Ok(pred.sub(&clean)?.square().mean_all())
}

/// One optimizer step of the fake-score model on detached student outputs.
/// Returns the scalar denoising loss. The student is never touched.
pub fn train_fake_score(
    fake: &mut Model,
    opt: &mut Adam,
    generated: &Tensor,
    tau: f64,
    cond: &ConditionSet,
    seed: u64,
) -> Result<f64> {
    let loss = denoising_loss(fake, generated, tau, cond, seed)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Diverged(format!("fake-score loss {value}")));
    }
    let grads = loss.backward()?;
    let mut slots = fake.param_slots();
    opt.step(&mut slots, &grads)?;
    Ok(value)
}

/// Adapt the teacher to short chunks by plain denoising regression over the
/// dataset. Noise levels cycle through the schedule's τ grid.
pub fn sft_teacher(
    teacher: &mut Model,
    dataset: &[(Tensor, ConditionSet)],
    sched: &TimestepSchedule,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Ok(Vec::new());
    }
    let mut opt = Adam::new(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for (i, (frames, cond)) in dataset.iter().enumerate() {
            let tau = sched.draw_tau(&mut rng);
            let noise_seed = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add((epoch * dataset.len() + i) as u64);
            let loss = denoising_loss(teacher, frames, tau, cond, noise_seed)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("teacher SFT loss {value}")));
            }
            epoch_loss += value;
            let grads = loss.backward()?;
            let mut slots = teacher.param_slots();
            opt.step(&mut slots, &grads)?;
        }
        losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok(losses)
}

/// Average denoising loss over a dataset at fixed τ values; used for
/// held-out comparisons.
pub fn eval_denoising(
    model: &Model,
    dataset: &[(Tensor, ConditionSet)],
    taus: &[f64],
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (frames, cond)) in dataset.iter().enumerate() {
        for (j, &tau) in taus.iter().enumerate() {
            let loss = denoising_loss(model, frames, tau, cond, seed + (i * taus.len() + j) as u64)?;
            total += loss.item();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One structured training-step record, written as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: u64,
    pub phase: String,
    pub tau: f64,
    pub teacher_passes: u64,
    pub fake_passes: u64,
    pub loss: f64,
    pub field_norm: f64,
}

/// Append-only JSON-lines training log.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub records: Vec<TelemetryRecord>,
}

impl TrainLog {
    pub fn push(&mut self, record: TelemetryRecord) {
        self.records.push(record);
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }
}

pub fn phase_name(phase: SnrPhase) -> &'static str {
    match phase {
        SnrPhase::Low => "low",
        SnrPhase::High => "high",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, ModelConfig};

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn oral_mask_clamps() {
        let raw = Tensor::new(vec![-0.5, 0.3, 1.7, 1.0], &[2, 2]).unwrap();
        let mask = OralMask::new(raw).unwrap();
        assert_eq!(mask.m.data(), &[0.0, 0.3, 1.0, 1.0]);
        assert!(OralMask::new(Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn decomposition_identity_matches_cfg_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s_c = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng);
        let s_u = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng);
        let s_f = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng);
        for alpha in [0.0, 1.0, 1.8, 3.5] {
            let (grad, dm, ca) = decompose_cfg_gradient(&s_c, &s_u, &s_f, alpha).unwrap();
            let direct = cfg_combine(&s_c, &s_u, alpha).unwrap().sub(&s_f).unwrap();
            assert!(max_abs_diff(&grad, &direct) < 1e-12, "alpha = {alpha}");
            if alpha == 1.0 {
                assert!(max_abs_diff(&grad, &dm) < 1e-12);
            }
            let rebuilt = dm.add(&ca.scale(alpha - 1.0)).unwrap();
            assert!(max_abs_diff(&grad, &rebuilt) < 1e-12);
        }
        // equal cond/uncond scores make the field alpha-independent
        let (g1, _, _) = decompose_cfg_gradient(&s_c, &s_c, &s_f, 1.0).unwrap();
        let (g2, _, _) = decompose_cfg_gradient(&s_c, &s_c, &s_f, 9.0).unwrap();
        assert!(max_abs_diff(&g1, &g2) < 1e-12);
    }

    fn tiny_pair() -> (Model, Model, ConditionSet, TimestepSchedule) {
        let cfg = ModelConfig::tiny(2, vec![LayerKind::Causal, LayerKind::Bidirectional]);
        let teacher = Model::new(cfg.clone(), 7).unwrap();
        let fake = Model::new(cfg.clone(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cond = ConditionSet::new(
            Tensor::randn(&[cfg.chunk_frames, cfg.cond_dim], 1.0, &mut rng),
            None,
            Tensor::randn(&[cfg.grid_h, cfg.grid_w, cfg.latent_channels], 1.0, &mut rng),
            cfg.cond_dim,
        );
        (teacher, fake, cond, TimestepSchedule::default_four_step())
    }

    #[test]
    fn phased_pass_counts() {
        let (teacher, fake, cond, sched) = tiny_pair();
        let cfg = &teacher.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(
            &[cfg.chunk_frames, cfg.grid_h, cfg.grid_w, cfg.latent_channels],
            1.0,
            &mut rng,
        );
        let mask = OralMask::zeros(cfg.grid_h, cfg.grid_w);

        let (_, low) =
            phased_scores(&teacher, &fake, &x, 0.7, &cond, 1.8, &mask, SnrPhase::Low, &sched)
                .unwrap();
        assert_eq!(low, PassCounts { teacher: 2, fake: 1 });

        let (_, high) =
            phased_scores(&teacher, &fake, &x, 0.2, &cond, 1.8, &mask, SnrPhase::High, &sched)
                .unwrap();
        assert_eq!(high, PassCounts { teacher: 1, fake: 2 });

        // phase mismatch rejected
        assert!(phased_scores(
            &teacher, &fake, &x, 0.7, &cond, 1.8, &mask, SnrPhase::High, &sched
        )
        .is_err());
    }

    #[test]
    fn mask_routing_matches_elementwise_oracle() {
        let (teacher, fake, cond, sched) = tiny_pair();
        let cfg = &teacher.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(
            &[cfg.chunk_frames, cfg.grid_h, cfg.grid_w, cfg.latent_channels],
            1.0,
            &mut rng,
        );
        let positions: Vec<i64> = (0..cfg.chunk_frames as i64).collect();
        let tau = 0.3;
        let alpha = 1.8;
        let (t_c, _) = teacher.forward_chunk(&x, tau, &cond, None, &positions, true, true).unwrap();
        let (f_c, _) = fake.forward_chunk(&x, tau, &cond, None, &positions, true, true).unwrap();
        let (f_u, _) = fake.forward_chunk(&x, tau, &cond, None, &positions, false, true).unwrap();
        let f_cfg = cfg_combine(&f_c, &f_u, alpha).unwrap();

        // all-zero mask collapses to the plain conditional fake score
        let zeros = OralMask::zeros(cfg.grid_h, cfg.grid_w);
        let (field0, _) =
            phased_scores(&teacher, &fake, &x, tau, &cond, alpha, &zeros, SnrPhase::High, &sched)
                .unwrap();
        assert!(max_abs_diff(&field0, &t_c.sub(&f_c).unwrap()) < 1e-12);

        // all-one mask collapses to the CFG-combined fake score
        let ones = OralMask::ones(cfg.grid_h, cfg.grid_w);
        let (field1, _) =
            phased_scores(&teacher, &fake, &x, tau, &cond, alpha, &ones, SnrPhase::High, &sched)
                .unwrap();
        assert!(max_abs_diff(&field1, &t_c.sub(&f_cfg).unwrap()) < 1e-12);

        // checkerboard with a soft cell against a brute-force elementwise blend
        let mut mvals = vec![0.0; cfg.grid_h * cfg.grid_w];
        for r in 0..cfg.grid_h {
            for c in 0..cfg.grid_w {
                mvals[r * cfg.grid_w + c] = if (r + c) % 2 == 0 { 1.0 } else { 0.0 };
            }
        }
        mvals[0] = 0.4;
        let mask = OralMask::new(Tensor::new(mvals.clone(), &[cfg.grid_h, cfg.grid_w]).unwrap())
            .unwrap();
        let (field, _) =
            phased_scores(&teacher, &fake, &x, tau, &cond, alpha, &mask, SnrPhase::High, &sched)
                .unwrap();
        let mut expected = vec![0.0; field.numel()];
        let ch = cfg.latent_channels;
        for f in 0..cfg.chunk_frames {
            for r in 0..cfg.grid_h {
                for c in 0..cfg.grid_w {
                    for k in 0..ch {
                        let idx = ((f * cfg.grid_h + r) * cfg.grid_w + c) * ch + k;
                        let m = mvals[r * cfg.grid_w + c];
                        let blend = m * f_cfg.data()[idx] + (1.0 - m) * f_c.data()[idx];
                        expected[idx] = t_c.data()[idx] - blend;
                    }
                }
            }
        }
        let oracle = Tensor::new(expected, field.shape()).unwrap();
        assert!(max_abs_diff(&field, &oracle) < 1e-12);
    }

    #[test]
    fn generator_loss_gradient_is_minus_normalized_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let field = Tensor::randn(&[2, 3, 3, 2], 1.5, &mut rng);
        let generated = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng).detach();
        let gen_param = Tensor::param(generated.data().to_vec(), generated.shape()).unwrap();
        let loss = dmd_generator_loss(&field, &gen_param).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.wrt(&gen_param).unwrap();
        let norm = field_norm(&field);
        for (gi, fi) in g.data().iter().zip(field.data()) {
            assert!((gi + fi / norm).abs() < 1e-10);
        }

        // zero field: zero loss and zero gradient
        let zero_field = Tensor::zeros(&[2, 3, 3, 2]);
        let gen2 = Tensor::param(generated.data().to_vec(), generated.shape()).unwrap();
        let loss0 = dmd_generator_loss(&zero_field, &gen2).unwrap();
        assert!(loss0.item().abs() < 1e-24);
        let g0 = loss0.backward().unwrap();
        assert!(g0.wrt(&gen2).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn generator_loss_direction_invariant_to_field_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let field = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let scaled = field.scale(37.0);
        let gen = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let grad_of = |f: &Tensor| {
            let p = Tensor::param(gen.data().to_vec(), gen.shape()).unwrap();
            let loss = dmd_generator_loss(f, &p).unwrap();
            let grads = loss.backward().unwrap();
            grads.wrt(&p).unwrap().data().to_vec()
        };
        let a = grad_of(&field);
        let b = grad_of(&scaled);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fake_training_reduces_loss_and_leaves_student_alone() {
        let (student, mut fake, cond, _) = tiny_pair();
        let cfg = student.cfg.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // a fixed "student output" distribution the fake model regresses onto
        let generated = Tensor::randn(
            &[cfg.chunk_frames, cfg.grid_h, cfg.grid_w, cfg.latent_channels],
            0.5,
            &mut rng,
        );
        let student_hash = student.param_hash();
        let mut opt = Adam::new(3e-3);
        let mut losses = Vec::new();
        for step in 0..200u64 {
            let tau = 0.1 + 0.8 * ((step % 9) as f64 / 8.0);
            let loss =
                train_fake_score(&mut fake, &mut opt, &generated, tau, &cond, 1000 + step)
                    .unwrap();
            losses.push(loss);
        }
        let early: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(late < early, "fake loss did not decrease: {early} -> {late}");
        assert_eq!(student.param_hash(), student_hash);
    }

    #[test]
    fn sft_improves_heldout_and_empty_dataset_is_noop() {
        let cfg = ModelConfig::tiny(2, vec![LayerKind::Causal, LayerKind::Bidirectional]);
        let mut teacher = Model::new(cfg.clone(), 15).unwrap();
        let sched = TimestepSchedule::default_four_step();

        let hash = teacher.param_hash();
        assert!(sft_teacher(&mut teacher, &[], &sched, 3, 1e-3, 0).unwrap().is_empty());
        assert_eq!(teacher.param_hash(), hash);

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let make = |rng: &mut ChaCha8Rng| {
            let frames = Tensor::randn(
                &[cfg.chunk_frames, cfg.grid_h, cfg.grid_w, cfg.latent_channels],
                0.5,
                rng,
            );
            let cond = ConditionSet::new(
                Tensor::randn(&[cfg.chunk_frames, cfg.cond_dim], 1.0, rng),
                None,
                frames.narrow(0, 0, 1).unwrap().reshape(&[cfg.grid_h, cfg.grid_w, cfg.latent_channels]).unwrap(),
                cfg.cond_dim,
            );
            (frames, cond)
        };
        let train: Vec<_> = (0..6).map(|_| make(&mut rng)).collect();
        let held: Vec<_> = (0..3).map(|_| make(&mut rng)).collect();
        let taus = [0.2, 0.5, 0.8];

        let before = eval_denoising(&teacher, &held, &taus, 500).unwrap();
        let losses = sft_teacher(&mut teacher, &train, &sched, 20, 3e-3, 17).unwrap();
        assert_eq!(losses.len(), 20);
        let after = eval_denoising(&teacher, &held, &taus, 500).unwrap();
        assert!(
            after < 0.95 * before,
            "held-out loss only moved {before} -> {after}"
        );

        // determinism given seed
        let mut t2 = Model::new(cfg.clone(), 15).unwrap();
        sft_teacher(&mut t2, &train, &sched, 20, 3e-3, 17).unwrap();
        assert_eq!(t2.param_hash(), teacher.param_hash());
    }

    #[test]
    fn telemetry_roundtrips_as_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = TrainLog::default();
        log.push(TelemetryRecord {
            step: 0,
            phase: phase_name(SnrPhase::Low).to_string(),
            tau: 0.7,
            teacher_passes: 2,
            fake_passes: 1,
            loss: 0.5,
            field_norm: 0.1,
        });
        log.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: TelemetryRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(parsed.phase, "low");
        assert_eq!(parsed.teacher_passes, 2);
    }
}
