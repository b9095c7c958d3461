//! Command-line front end: staged training with checkpoint hand-off,
//! streaming inference with PNG and raw-tensor output, fast invariant
//! checks, and the ablation report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use streamar::accdmd::{decompose_cfg_gradient, sft_teacher, TrainLog};
use streamar::config::Config;
use streamar::diffusion::cfg_combine;
use streamar::forcing::{training_loop, ForcingSample};
use streamar::harness::ablation::{ablation_suite, format_table};
use streamar::harness::data::DatasetItem;
use streamar::harness::metrics::session_metrics;
use streamar::harness::pipeline::{chunk_pairs, dataset_from_config, distill_stage};
use streamar::harness::plot::{save_clip_pngs, save_line_plot};
use streamar::inference::{collect_latents, generate_stream, latency_report};
use streamar::model::Model;
use streamar::numeric::{checkpoint, finite_diff_check, Tensor};
use streamar::refiner::{pretrain_vae, refiner_stage, Discriminator, Vae};

#[derive(Parser)]
#[command(
    name = "streamar",
    about = "Streaming latent-video diffusion: train, stream, check, report"
)]
struct Cli {
    /// TOML configuration; omitted, the preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in scale when no config file is given: "tiny" or "toy".
    #[arg(long, global = true, default_value = "tiny")]
    preset: String,
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Teacher denoising regression plus short-chunk adaptation.
    TrainTeacherSft,
    /// Distill the few-step student against teacher and fake scores.
    TrainAccdmd,
    /// Long-horizon cached rollouts with tail-gated gradients.
    TrainForcing,
    /// Pixel decoder pretraining and adversarial refinement.
    TrainRefiner,
    /// Stream chunks with the trained student and write frames + metrics.
    InferStream {
        /// "refined", "base", or "none" (dump latents only).
        #[arg(long, default_value = "refined")]
        decoder: String,
        /// Dataset identity index to condition on.
        #[arg(long, default_value_t = 0)]
        identity: usize,
    },
    /// Fast self-checks of the core identities.
    CheckInvariants,
    /// Retrain every ablation arm and tabulate streaming metrics.
    Report,
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    if let Some(path) = &cli.config {
        return Ok(Config::load(path)?);
    }
    match cli.preset.as_str() {
        "tiny" => Ok(Config::tiny()),
        "toy" => Ok(Config::default()),
        other => bail!("unknown preset {other:?}; expected \"tiny\" or \"toy\""),
    }
}

fn load_model(dir: &Path, name: &str, produced_by: &str) -> anyhow::Result<Model> {
    let path = dir.join(name);
    Model::load(&path)
        .with_context(|| format!("cannot load {}; run `{produced_by}` first", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn dataset(cfg: &Config, seed: u64) -> anyhow::Result<Vec<DatasetItem>> {
    Ok(dataset_from_config(cfg, seed)?)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    fs::create_dir_all(&cli.out_dir)?;
    let out = cli.out_dir.clone();
    match &cli.cmd {
        Cmd::TrainTeacherSft => train_teacher(&cfg, &out, cli.seed),
        Cmd::TrainAccdmd => train_accdmd(&cfg, &out, cli.seed),
        Cmd::TrainForcing => train_forcing(&cfg, &out, cli.seed),
        Cmd::TrainRefiner => train_refiner(&cfg, &out, cli.seed),
        Cmd::InferStream { decoder, identity } => {
            infer_stream(&cfg, &out, cli.seed, decoder, *identity)
        }
        Cmd::CheckInvariants => check_invariants(&cfg, cli.seed),
        Cmd::Report => report(&cfg, &out, cli.seed),
    }
}

fn train_teacher(cfg: &Config, out: &Path, seed: u64) -> anyhow::Result<()> {
    let mcfg = cfg.model_config()?;
    let sched = cfg.schedule()?;
    let data = dataset(cfg, seed)?;
    let w = mcfg.chunk_frames;
    let mut teacher = Model::new(mcfg, seed ^ 0x7F)?;

    let long = chunk_pairs(&data, (2 * w).min(cfg.data.frames_per_video))?;
    let pre = sft_teacher(
        &mut teacher,
        &long,
        &sched,
        cfg.train.teacher.pretrain_epochs,
        cfg.train.teacher.lr,
        seed.wrapping_add(1),
    )?;
    let short = chunk_pairs(&data, w)?;
    let sft = sft_teacher(
        &mut teacher,
        &short,
        &sched,
        cfg.train.teacher.sft_epochs,
        cfg.train.teacher.lr,
        seed.wrapping_add(2),
    )?;
    teacher.save(&out.join("teacher.ckpt"))?;
    write_json(&out.join("teacher_losses.json"), &serde_json::json!({ "pretrain": pre, "sft": sft }))?;
    save_line_plot(&[("pretrain", &pre), ("sft", &sft)], &out.join("teacher_losses.png"), 320, 160)?;
    println!(
        "teacher: {} pretrain epochs (loss {:.4} -> {:.4}), {} adaptation epochs",
        pre.len(),
        pre.first().copied().unwrap_or(0.0),
        pre.last().copied().unwrap_or(0.0),
        sft.len()
    );
    Ok(())
}

fn train_accdmd(cfg: &Config, out: &Path, seed: u64) -> anyhow::Result<()> {
    let teacher = load_model(out, "teacher.ckpt", "train-teacher-sft")?;
    let sched = cfg.schedule()?;
    let data = dataset(cfg, seed)?;
    let w = teacher.cfg.chunk_frames;
    let mut student = teacher.clone_params_fresh()?;
    let mut fake = teacher.clone_params_fresh()?;
    let mut samples = Vec::new();
    for item in &data {
        let frames = item.latents.shape()[0];
        let mut start = 0;
        while start + w <= frames {
            samples.push((item.cond.slice_frames(start, w)?, item.identity.mask.clone()));
            start += w;
        }
    }
    let mut log = TrainLog::default();
    let losses = distill_stage(
        &mut student,
        &teacher,
        &mut fake,
        &samples,
        &sched,
        cfg.train.accdmd.iterations,
        cfg.train.accdmd.gen_lr,
        cfg.train.accdmd.fake_lr,
        cfg.diffusion.alpha,
        true,
        seed.wrapping_add(3),
        &mut log,
    )?;
    student.save(&out.join("student.ckpt"))?;
    fake.save(&out.join("fake.ckpt"))?;
    log.write_jsonl(&out.join("distill_telemetry.jsonl"))?;
    save_line_plot(&[("distill", &losses)], &out.join("distill_losses.png"), 320, 160)?;
    println!("distillation: {} iterations, final loss {:.4}", losses.len(), losses.last().unwrap());
    Ok(())
}

fn train_forcing(cfg: &Config, out: &Path, seed: u64) -> anyhow::Result<()> {
    let teacher = load_model(out, "teacher.ckpt", "train-teacher-sft")?;
    let mut student = load_model(out, "student.ckpt", "train-accdmd")?;
    let mut fake = load_model(out, "fake.ckpt", "train-accdmd")?;
    let sched = cfg.schedule()?;
    let data = dataset(cfg, seed)?;
    let fdata: Vec<ForcingSample> = data
        .iter()
        .map(|item| ForcingSample { cond: item.cond.clone(), mask: item.identity.mask.clone() })
        .collect();
    let mut log = TrainLog::default();
    let losses = training_loop(
        &mut student,
        &teacher,
        &mut fake,
        &fdata,
        &sched,
        &cfg.forcing_config(),
        seed.wrapping_add(4),
        &mut log,
    )?;
    student.save(&out.join("student.ckpt"))?;
    fake.save(&out.join("fake.ckpt"))?;
    log.write_jsonl(&out.join("forcing_telemetry.jsonl"))?;
    save_line_plot(&[("forcing", &losses)], &out.join("forcing_losses.png"), 320, 160)?;
    println!("forcing: {} rollouts, final mean loss {:.4}", losses.len(), losses.last().unwrap());
    Ok(())
}

fn train_refiner(cfg: &Config, out: &Path, seed: u64) -> anyhow::Result<()> {
    let student = load_model(out, "student.ckpt", "train-accdmd")?;
    let sched = cfg.schedule()?;
    let data = dataset(cfg, seed)?;
    let r = &cfg.train.refiner;
    let mcfg = cfg.model_config()?;

    let mut clips = Vec::new();
    for item in &data {
        let frames = item.pixels.shape()[0];
        let mut start = 0;
        while start + r.l_clip <= frames {
            clips.push(item.pixels.narrow(0, start, r.l_clip)?.detach());
            start += r.l_clip;
        }
    }
    let mut vae = Vae::new(cfg.data.pixel_channels, mcfg.latent_channels, r.vae_hidden, seed ^ 0x55);
    let pre = pretrain_vae(&mut vae, &clips, r.pretrain_steps, r.dec_lr)?;
    vae.save(&out.join("vae_base.ckpt"))?;

    let w = student.cfg.chunk_frames;
    let mut pairs = Vec::with_capacity(data.len());
    for (i, item) in data.iter().enumerate() {
        let session = generate_stream(
            &student,
            &item.cond,
            r.l_clip / w,
            &sched,
            cfg.stream_config()?,
            seed.wrapping_add(500 + i as u64),
        )?;
        pairs.push((collect_latents(&session)?.detach(), item.pixels.narrow(0, 0, r.l_clip)?.detach()));
    }
    let mut disc = Discriminator::new(r.l_clip, cfg.data.pixel_channels, r.disc_width, seed ^ 0x56);
    let losses = refiner_stage(
        &student, &mut vae, &mut disc, &pairs, r.steps, r.dec_lr, r.disc_lr, r.lambda1, r.lambda2,
        r.adv_weight,
    )?;
    vae.save(&out.join("vae.ckpt"))?;
    let dec: Vec<f64> = losses.iter().map(|(d, _)| *d).collect();
    let disc_curve: Vec<f64> = losses.iter().map(|(_, d)| *d).collect();
    write_json(
        &out.join("refiner_losses.json"),
        &serde_json::json!({ "pretrain": pre, "decoder": dec, "discriminator": disc_curve }),
    )?;
    println!(
        "refiner: {} pretrain steps, {} refine steps, final decoder loss {:.4}",
        pre.len(),
        dec.len(),
        dec.last().unwrap()
    );
    Ok(())
}

fn infer_stream(
    cfg: &Config,
    out: &Path,
    seed: u64,
    decoder: &str,
    identity: usize,
) -> anyhow::Result<()> {
    let student = load_model(out, "student.ckpt", "train-accdmd")?;
    let vae = match decoder {
        "refined" => Some(Vae::load(&out.join("vae.ckpt")).context("run train-refiner first")?),
        "base" => Some(Vae::load(&out.join("vae_base.ckpt")).context("run train-refiner first")?),
        "none" => None,
        other => bail!("unknown decoder {other:?}; expected refined, base, or none"),
    };
    let sched = cfg.schedule()?;
    let data = dataset(cfg, seed)?;
    let item = data
        .get(identity)
        .with_context(|| format!("identity {identity} out of range ({} available)", data.len()))?;

    let session = generate_stream(
        &student,
        &item.cond,
        cfg.inference.chunks,
        &sched,
        cfg.stream_config()?,
        seed,
    )?;
    let latents = collect_latents(&session)?;
    checkpoint::save(
        &out.join("stream_latents.ckpt"),
        &[("latents".to_string(), &latents)],
        &BTreeMap::new(),
    )?;
    let frames_dir = out.join("frames");
    match &vae {
        Some(v) => {
            let decoded = v.decode(&latents)?;
            checkpoint::save(
                &out.join("stream_pixels.ckpt"),
                &[("pixels".to_string(), &decoded)],
                &BTreeMap::new(),
            )?;
            save_clip_pngs(&decoded, &frames_dir, "frame")?;
        }
        None => {
            save_clip_pngs(&latents, &frames_dir, "latent")?;
        }
    }
    let metrics = session_metrics(&session, item)?;
    let latency = latency_report(&session, &student)?;
    write_json(&out.join("stream_metrics.json"), &metrics)?;
    write_json(&out.join("stream_latency.json"), &latency)?;
    save_line_plot(&[("drift", &metrics.drift)], &out.join("drift.png"), 320, 160)?;
    println!(
        "streamed {} chunks ({} frames): sync {:.3}, tail drift {:.4}, {:.1} calls/frame, cache {} floats",
        latency.n_chunks,
        latency.n_frames,
        metrics.sync_proxy,
        metrics.tail_drift(),
        latency.calls_per_frame,
        latency.cache_high_water_floats
    );
    Ok(())
}

fn check_invariants(cfg: &Config, seed: u64) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // guided gradient splits exactly into matching plus alignment parts
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let sc = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng);
        let su = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng);
        let sf = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut rng);
        let (full, _, _) = decompose_cfg_gradient(&sc, &su, &sf, cfg.diffusion.alpha)?;
        let direct = cfg_combine(&sc, &su, cfg.diffusion.alpha)?.sub(&sf)?;
        for (a, b) in full.data().iter().zip(direct.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    check("gradient decomposition identity (max err <= 1e-12)", worst <= 1e-12);

    // autodiff gradients against central differences on a mixed expression
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let wt = Tensor::randn(&[4, 3], 0.5, &mut rng);
    let fd = finite_diff_check(
        |inp| {
            let h = inp[0].matmul(&inp[1])?.silu().layer_norm_last()?;
            Ok(h.softmax_last()?.mul(&h)?.sum_all())
        },
        &[x, wt],
        1e-5,
        1e-6,
    )?;
    check("finite-difference gradient check", fd.pass());

    // streaming is deterministic in the seed
    let sched = cfg.schedule()?;
    let data = dataset(cfg, seed)?;
    let model = Model::new(cfg.model_config()?, seed ^ 0x7F)?;
    let m = cfg.inference.chunks.min(data[0].latents.shape()[0] / model.cfg.chunk_frames);
    let a = generate_stream(&model, &data[0].cond, m, &sched, cfg.stream_config()?, seed)?;
    let b = generate_stream(&model, &data[0].cond, m, &sched, cfg.stream_config()?, seed)?;
    let la = collect_latents(&a)?;
    let lb = collect_latents(&b)?;
    let identical =
        la.data().iter().zip(lb.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    check("streaming byte-identical across reruns", identical);

    // exactly T conditional sampler passes per chunk
    let t_count = sched.n_steps() as u64;
    check(
        "sampler pass budget (T conditional, zero unconditional)",
        a.total_calls == t_count * m as u64 && a.unconditional_calls == 0,
    );

    // the cache window holds the newest frames at every denoising level
    let w = model.cfg.chunk_frames;
    let held = cfg.cache.capacity.min(m * w) as i64;
    let want: Vec<i64> = ((m * w) as i64 - held..(m * w) as i64).collect();
    let mut fifo_ok = true;
    for ts in 0..a.kv.n_timesteps() {
        for layer in 0..a.kv.n_layers() {
            let got: Vec<i64> = a.kv.frames(ts, layer).iter().map(|f| f.position).collect();
            fifo_ok &= got == want;
        }
    }
    check("cache keeps the newest frames in order", fifo_ok);

    // the pinned sink never changes once set
    check(
        "reference sink pinned for the whole stream",
        !a.config.use_sink || (a.sink.is_set() && a.sink.content_hash() == b.sink.content_hash()),
    );

    if failures > 0 {
        bail!("{failures} invariant check(s) failed");
    }
    Ok(())
}

fn report(cfg: &Config, out: &Path, seed: u64) -> anyhow::Result<()> {
    let rows = ablation_suite(cfg, seed)?;
    write_json(&out.join("ablations.json"), &rows)?;
    let table = format_table(&rows);
    fs::write(out.join("ablations.txt"), &table)?;
    print!("{table}");
    Ok(())
}
