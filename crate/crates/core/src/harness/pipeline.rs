//! Staged toy training pipeline: teacher regression, short-chunk adaptation,
//! phased score distillation, long-horizon rollouts with tail gating, and the
//! pixel decoder refinement stage, followed by streaming evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accdmd::{
    cfg_dmd_field, dmd_generator_loss, field_norm, phase_name, phased_scores, sft_teacher,
    train_fake_score, OralMask, TelemetryRecord, TrainLog,
};
use crate::config::Config;
use crate::diffusion::{add_noise, backward_simulate, classify_snr, sample_noise, TimestepSchedule};
use crate::error::{Error, Result};
use crate::forcing::{training_loop, ForcingSample};
use crate::inference::{
    collect_latents, generate_stream, latency_report, LatencyReport, StreamConfig,
};
use crate::model::{ConditionSet, Model};
use crate::numeric::{Adam, Tensor};
use crate::refiner::{pretrain_vae, refiner_stage, sobel_energy, Discriminator, Vae};

use super::data::{gen_dataset, DatasetItem};
use super::metrics::{session_metrics, MetricRecord};

/// Ablation switches layered on top of a configuration. Defaults run the
/// full method.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Adapt the teacher to short chunks before distillation.
    pub use_sft: bool,
    /// Route the real-minus-fake field by noise phase; off falls back to the
    /// single global field.
    pub phased_field: bool,
    /// Gate rollout gradients to the final frame past the long threshold.
    pub tail_forcing: bool,
    /// Pin a reference sink during rollouts and streaming.
    pub use_sink: bool,
    /// Train the pixel decoder refinement stage.
    pub use_refiner: bool,
    /// Replace the configured attention pattern, e.g. "CC" or "BB".
    pub layer_pattern: Option<String>,
}

impl Default for PipelineOptions {
    fn default() -> PipelineOptions {
        PipelineOptions {
            use_sft: true,
            phased_field: true,
            tail_forcing: true,
            use_sink: true,
            use_refiner: true,
            layer_pattern: None,
        }
    }
}

/// Everything a finished pipeline run leaves behind.
pub struct Artifacts {
    pub teacher: Model,
    pub student: Model,
    pub fake: Model,
    /// Refined decoder, when the refiner stage ran.
    pub vae: Option<Vae>,
    /// Reconstruction-only decoder snapshot taken before refinement.
    pub base_vae: Option<Vae>,
    pub dataset: Vec<DatasetItem>,
    pub teacher_losses: Vec<f64>,
    pub sft_losses: Vec<f64>,
    pub distill_losses: Vec<f64>,
    pub forcing_losses: Vec<f64>,
    pub refiner_losses: Vec<(f64, f64)>,
    pub log: TrainLog,
}

/// The synthetic dataset a configuration describes, deterministic in `seed`.
pub fn dataset_from_config(cfg: &Config, seed: u64) -> Result<Vec<DatasetItem>> {
    let mcfg = cfg.model_config()?;
    gen_dataset(
        cfg.data.n_identities,
        cfg.data.frames_per_video,
        mcfg.grid_h,
        mcfg.grid_w,
        mcfg.latent_channels,
        mcfg.cond_dim,
        cfg.data.pixel_channels,
        seed,
    )
}

/// Chunked (latents, conditions) pairs for denoising regression.
pub fn chunk_pairs(dataset: &[DatasetItem], len: usize) -> Result<Vec<(Tensor, ConditionSet)>> {
    let mut out = Vec::new();
    for item in dataset {
        let frames = item.latents.shape()[0];
        let mut start = 0;
        while start + len <= frames {
            out.push((
                item.latents.narrow(0, start, len)?.detach(),
                item.cond.slice_frames(start, len)?,
            ));
            start += len;
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("chunk_pairs", "videos shorter than one chunk"));
    }
    Ok(out)
}

/// Score-distillation stage: recover a mid-schedule state by simulating the
/// student backward from noise, take one differentiable student step, update
/// the fake score model on the detached sample, and descend the
/// real-minus-fake field.
#[allow(clippy::too_many_arguments)]
pub fn distill_stage(
    student: &mut Model,
    teacher: &Model,
    fake: &mut Model,
    samples: &[(ConditionSet, OralMask)],
    sched: &TimestepSchedule,
    iterations: usize,
    gen_lr: f64,
    fake_lr: f64,
    alpha: f64,
    phased_field: bool,
    seed: u64,
    log: &mut TrainLog,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("distill_stage", "no chunk samples"));
    }
    let w = student.cfg.chunk_frames;
    let [h, gw, c] = student.cfg.frame_shape();
    let positions: Vec<i64> = (0..w as i64).collect();
    let t_count = sched.n_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen_opt = Adam::new(gen_lr);
    let mut fake_opt = Adam::new(fake_lr);
    let mut losses = Vec::with_capacity(iterations);
    let step_base = log.records.len() as u64;
    for it in 0..iterations {
        let (cond, mask) = &samples[it % samples.len()];
        let noise_seed = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(it as u64);

        // partial backward simulation with the frozen-graph student
        let stop_at = rng.gen_range(1..=t_count);
        let noise = sample_noise(&[w, h, gw, c], noise_seed);
        let z = backward_simulate(
            |x, t| student.forward_chunk(x, t, cond, None, &positions, true, true).map(|(p, _)| p),
            &noise,
            sched,
            stop_at,
            noise_seed ^ 0x5555,
        )?;
        let t_gen = sched.steps[t_count - stop_at];
        let (generated, _) =
            student.forward_chunk(&z, t_gen, cond, None, &positions, true, true)?;

        // the fake score model chases the current student distribution
        let tau_fake = sched.draw_tau(&mut rng);
        train_fake_score(fake, &mut fake_opt, &generated.detach(), tau_fake, cond, noise_seed ^ 0xAAAA)?;

        // distillation field at a fresh noise level
        let tau = sched.draw_tau(&mut rng);
        let x_tau = add_noise(&generated.detach(), tau, noise_seed ^ 0x3333)?;
        let phase = classify_snr(tau, sched);
        let (field, counts) = if phased_field {
            phased_scores(teacher, fake, &x_tau, tau, cond, alpha, mask, phase, sched)?
        } else {
            cfg_dmd_field(teacher, fake, &x_tau, tau, cond, alpha)?
        };
        let loss = dmd_generator_loss(&field, &generated)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("distillation loss {value}")));
        }
        let grads = loss.backward()?;
        let mut slots = student.param_slots();
        gen_opt.step(&mut slots, &grads)?;

        log.push(TelemetryRecord {
            step: step_base + it as u64,
            phase: if phased_field { phase_name(phase).to_string() } else { "global".to_string() },
            tau,
            teacher_passes: counts.teacher,
            fake_passes: counts.fake,
            loss: value,
            field_norm: field_norm(&field),
        });
        losses.push(value);
    }
    Ok(losses)
}

fn pixel_clips(dataset: &[DatasetItem], l_clip: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for item in dataset {
        let frames = item.pixels.shape()[0];
        let mut start = 0;
        while start + l_clip <= frames {
            out.push(item.pixels.narrow(0, start, l_clip)?.detach());
            start += l_clip;
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("pixel_clips", "videos shorter than one clip"));
    }
    Ok(out)
}

fn stream_config(cfg: &Config, use_sink: bool) -> Result<StreamConfig> {
    let mut sc = cfg.stream_config()?;
    sc.use_sink = sc.use_sink && use_sink;
    Ok(sc)
}

/// (student-generated latent clip, ground-truth pixel clip) pairs for the
/// refiner.
fn generated_pairs(
    student: &Model,
    cfg: &Config,
    sched: &TimestepSchedule,
    dataset: &[DatasetItem],
    l_clip: usize,
    use_sink: bool,
    seed: u64,
) -> Result<Vec<(Tensor, Tensor)>> {
    let w = student.cfg.chunk_frames;
    let mut pairs = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.iter().enumerate() {
        let session = generate_stream(
            student,
            &item.cond,
            l_clip / w,
            sched,
            stream_config(cfg, use_sink)?,
            seed.wrapping_add(i as u64 * 1009),
        )?;
        let latents = collect_latents(&session)?.detach();
        pairs.push((latents, item.pixels.narrow(0, 0, l_clip)?.detach()));
    }
    Ok(pairs)
}

/// Teacher regression on double-length chunks followed by optional
/// short-chunk adaptation. Returns the model and both loss curves.
pub fn train_teacher_stage(
    cfg: &Config,
    use_sft: bool,
    dataset: &[DatasetItem],
    seed: u64,
) -> Result<(Model, Vec<f64>, Vec<f64>)> {
    let mcfg = cfg.model_config()?;
    let sched = cfg.schedule()?;
    let w = mcfg.chunk_frames;
    let mut teacher = Model::new(mcfg, seed ^ 0x7F)?;
    let long_len = (2 * w).min(cfg.data.frames_per_video);
    let long_chunks = chunk_pairs(dataset, long_len)?;
    let pretrain = sft_teacher(
        &mut teacher,
        &long_chunks,
        &sched,
        cfg.train.teacher.pretrain_epochs,
        cfg.train.teacher.lr,
        seed.wrapping_add(1),
    )?;
    let sft = if use_sft {
        let short_chunks = chunk_pairs(dataset, w)?;
        sft_teacher(
            &mut teacher,
            &short_chunks,
            &sched,
            cfg.train.teacher.sft_epochs,
            cfg.train.teacher.lr,
            seed.wrapping_add(2),
        )?
    } else {
        Vec::new()
    };
    Ok((teacher, pretrain, sft))
}

/// Distillation plus long-horizon rollouts from a trained teacher.
pub struct StudentArtifacts {
    pub student: Model,
    pub fake: Model,
    pub distill_losses: Vec<f64>,
    pub forcing_losses: Vec<f64>,
    pub log: TrainLog,
}

pub fn train_student_stages(
    teacher: &Model,
    cfg: &Config,
    opts: &PipelineOptions,
    dataset: &[DatasetItem],
    seed: u64,
) -> Result<StudentArtifacts> {
    let sched = cfg.schedule()?;
    let w = teacher.cfg.chunk_frames;
    let mut student = teacher.clone_params_fresh()?;
    let mut fake = teacher.clone_params_fresh()?;
    let mut log = TrainLog::default();
    let mut chunk_samples = Vec::new();
    for item in dataset {
        let frames = item.latents.shape()[0];
        let mut start = 0;
        while start + w <= frames {
            chunk_samples.push((item.cond.slice_frames(start, w)?, item.identity.mask.clone()));
            start += w;
        }
    }
    let distill_losses = distill_stage(
        &mut student,
        teacher,
        &mut fake,
        &chunk_samples,
        &sched,
        cfg.train.accdmd.iterations,
        cfg.train.accdmd.gen_lr,
        cfg.train.accdmd.fake_lr,
        cfg.diffusion.alpha,
        opts.phased_field,
        seed.wrapping_add(3),
        &mut log,
    )?;

    let mut fcfg = cfg.forcing_config();
    fcfg.tail_forcing = fcfg.tail_forcing && opts.tail_forcing;
    fcfg.use_sink = fcfg.use_sink && opts.use_sink;
    let fdata: Vec<ForcingSample> = dataset
        .iter()
        .map(|item| ForcingSample { cond: item.cond.clone(), mask: item.identity.mask.clone() })
        .collect();
    let forcing_losses = training_loop(
        &mut student,
        teacher,
        &mut fake,
        &fdata,
        &sched,
        &fcfg,
        seed.wrapping_add(4),
        &mut log,
    )?;
    Ok(StudentArtifacts { student, fake, distill_losses, forcing_losses, log })
}

/// Decoder pretraining plus adversarial refinement against the frozen
/// student. Returns (refined decoder, pre-refinement snapshot, losses).
pub fn train_refiner_stages(
    student: &Model,
    cfg: &Config,
    dataset: &[DatasetItem],
    use_sink: bool,
    seed: u64,
) -> Result<(Vae, Vae, Vec<(f64, f64)>)> {
    let sched = cfg.schedule()?;
    let mcfg = cfg.model_config()?;
    let r = &cfg.train.refiner;
    let mut vae = Vae::new(cfg.data.pixel_channels, mcfg.latent_channels, r.vae_hidden, seed ^ 0x55);
    let clips = pixel_clips(dataset, r.l_clip)?;
    pretrain_vae(&mut vae, &clips, r.pretrain_steps, r.dec_lr)?;
    let base = vae.clone_params_fresh()?;
    let mut disc = Discriminator::new(r.l_clip, cfg.data.pixel_channels, r.disc_width, seed ^ 0x56);
    let pairs =
        generated_pairs(student, cfg, &sched, dataset, r.l_clip, use_sink, seed.wrapping_add(5))?;
    let losses = refiner_stage(
        student, &mut vae, &mut disc, &pairs, r.steps, r.dec_lr, r.disc_lr, r.lambda1, r.lambda2,
        r.adv_weight,
    )?;
    Ok((vae, base, losses))
}

/// Run every stage on synthetic data and return the trained models plus the
/// per-stage loss curves.
pub fn train_toy_pipeline(base: &Config, opts: &PipelineOptions, seed: u64) -> Result<Artifacts> {
    let mut cfg = base.clone();
    if let Some(pattern) = &opts.layer_pattern {
        cfg.model.layer_pattern = pattern.clone();
        cfg.model.n_layers = pattern.len();
    }
    cfg.validate()?;
    let dataset = dataset_from_config(&cfg, seed)?;

    let (teacher, teacher_losses, sft_losses) =
        train_teacher_stage(&cfg, opts.use_sft, &dataset, seed)?;
    let stu = train_student_stages(&teacher, &cfg, opts, &dataset, seed)?;
    let (vae, base_vae, refiner_losses) = if opts.use_refiner {
        let (v, b, l) = train_refiner_stages(&stu.student, &cfg, &dataset, opts.use_sink, seed)?;
        (Some(v), Some(b), l)
    } else {
        (None, None, Vec::new())
    };

    Ok(Artifacts {
        teacher,
        student: stu.student,
        fake: stu.fake,
        vae,
        base_vae,
        dataset,
        teacher_losses,
        sft_losses,
        distill_losses: stu.distill_losses,
        forcing_losses: stu.forcing_losses,
        refiner_losses,
        log: stu.log,
    })
}

/// One streaming evaluation of a model against a dataset item, optionally
/// decoding to pixels with refined and reconstruction-only decoders.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: MetricRecord,
    pub latency: LatencyReport,
    pub pixel_mse_refined: Option<f64>,
    pub pixel_mse_base: Option<f64>,
    pub sobel_refined: Option<f64>,
    pub sobel_base: Option<f64>,
    pub sobel_gt: f64,
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.square().mean_all().item())
}

pub fn eval_run(
    model: &Model,
    cfg: &Config,
    item: &DatasetItem,
    vae: Option<&Vae>,
    base_vae: Option<&Vae>,
    use_sink: bool,
    seed: u64,
) -> Result<EvalReport> {
    let sched = cfg.schedule()?;
    let session = generate_stream(
        model,
        &item.cond,
        cfg.inference.chunks,
        &sched,
        stream_config(cfg, use_sink)?,
        seed,
    )?;
    let metrics = session_metrics(&session, item)?;
    let latency = latency_report(&session, model)?;
    let latents = collect_latents(&session)?;
    let n = latents.shape()[0];
    let gt_pixels = item.pixels.narrow(0, 0, n)?;
    let sobel_gt = sobel_energy(&gt_pixels)?;

    let mut report = EvalReport {
        metrics,
        latency,
        pixel_mse_refined: None,
        pixel_mse_base: None,
        sobel_refined: None,
        sobel_base: None,
        sobel_gt,
    };
    if let Some(v) = vae {
        let decoded = v.decode(&latents)?;
        report.pixel_mse_refined = Some(mse(&decoded, &gt_pixels)?);
        report.sobel_refined = Some(sobel_energy(&decoded)?);
    }
    if let Some(v) = base_vae {
        let decoded = v.decode(&latents)?;
        report.pixel_mse_base = Some(mse(&decoded, &gt_pixels)?);
        report.sobel_base = Some(sobel_energy(&decoded)?);
    }
    Ok(report)
}
