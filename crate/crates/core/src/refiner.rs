//! Pixel-domain decoder refinement: a small convolutional latent-to-pixel
//! codec, a clip discriminator, and the fine-tuning step that sharpens the
//! decoder on generated latents against ground-truth pixels while the
//! generator stays frozen.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{checkpoint, Adam, Tensor};

/// Decoded frames `[L_clip, H, W, channels]` with values in [−1, 1].
#[derive(Debug, Clone)]
pub struct PixelClip {
    pub frames: Tensor,
}

impl PixelClip {
    pub fn new(frames: Tensor) -> Result<PixelClip> {
        if frames.rank() != 4 {
            return Err(Error::invalid("PixelClip", "expected [frames, H, W, channels]"));
        }
        if !frames.is_finite() {
            return Err(Error::invalid("PixelClip", "non-finite pixel values"));
        }
        Ok(PixelClip { frames })
    }
}

/// Two-conv encoder and two-conv decoder at a fixed 4x spatial factor. The
/// decoder half doubles as the refinable latent-to-pixel map.
pub struct Vae {
    pub enc1: Tensor,
    pub enc1_b: Tensor,
    pub enc2: Tensor,
    pub enc2_b: Tensor,
    pub dec1: Tensor,
    pub dec1_b: Tensor,
    pub dec2: Tensor,
    pub dec2_b: Tensor,
    pub pixel_channels: usize,
    pub latent_channels: usize,
    pub hidden: usize,
}

pub const VAE_FACTOR: usize = 4;

fn conv_kernel(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / (9.0 * cin as f64)).sqrt();
    let init = Tensor::randn(&[3, 3, cin, cout], std, rng);
    Tensor::param(init.data().to_vec(), init.shape()).unwrap()
}

fn zero_param(shape: &[usize]) -> Tensor {
    Tensor::param(vec![0.0; shape.iter().product()], shape).unwrap()
}

impl Vae {
    pub fn new(pixel_channels: usize, latent_channels: usize, hidden: usize, seed: u64) -> Vae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Vae {
            enc1: conv_kernel(pixel_channels, hidden, &mut rng),
            enc1_b: zero_param(&[hidden]),
            enc2: conv_kernel(hidden, latent_channels, &mut rng),
            enc2_b: zero_param(&[latent_channels]),
            dec1: conv_kernel(latent_channels, hidden, &mut rng),
            dec1_b: zero_param(&[hidden]),
            dec2: conv_kernel(hidden, pixel_channels, &mut rng),
            dec2_b: zero_param(&[pixel_channels]),
            pixel_channels,
            latent_channels,
            hidden,
        }
    }

    /// Pixels `[f, H, W, pc]` to latents `[f, H/4, W/4, C]`.
    pub fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        let h = pixels.conv2d(&self.enc1, 2, 1)?.add(&self.enc1_b)?.silu();
        h.conv2d(&self.enc2, 2, 1)?.add(&self.enc2_b)
    }

    /// Latents `[f, H', W', C]` to pixels `[f, 4H', 4W', pc]` in [−1, 1].
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let h = latents
            .upsample_nearest(2)?
            .conv2d(&self.dec1, 1, 1)?
            .add(&self.dec1_b)?
            .silu();
        let out = h
            .upsample_nearest(2)?
            .conv2d(&self.dec2, 1, 1)?
            .add(&self.dec2_b)?;
        Ok(out.tanh())
    }

    pub fn param_slots(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc1, &mut self.enc1_b, &mut self.enc2, &mut self.enc2_b,
            &mut self.dec1, &mut self.dec1_b, &mut self.dec2, &mut self.dec2_b,
        ]
    }

    pub fn decoder_slots(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.dec1, &mut self.dec1_b, &mut self.dec2, &mut self.dec2_b]
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("enc1".into(), self.enc1.clone()),
            ("enc1_b".into(), self.enc1_b.clone()),
            ("enc2".into(), self.enc2.clone()),
            ("enc2_b".into(), self.enc2_b.clone()),
            ("dec1".into(), self.dec1.clone()),
            ("dec1_b".into(), self.dec1_b.clone()),
            ("dec2".into(), self.dec2.clone()),
            ("dec2_b".into(), self.dec2_b.clone()),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Deep copy with fresh parameter leaves, detached from any graph.
    pub fn clone_params_fresh(&self) -> Result<Vae> {
        let mut copy = Vae::new(self.pixel_channels, self.latent_channels, self.hidden, 0);
        for (slot, (_, src)) in copy.param_slots().into_iter().zip(self.named_params()) {
            *slot = Tensor::param(src.data().to_vec(), src.shape())?;
        }
        Ok(copy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_params();
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut meta = BTreeMap::new();
        meta.insert(
            "vae_config".to_string(),
            format!("{},{},{}", self.pixel_channels, self.latent_channels, self.hidden),
        );
        checkpoint::save(path, &refs, &meta)
    }

    pub fn load(path: &Path) -> Result<Vae> {
        let (tensors, meta) = checkpoint::load(path)?;
        let cfg = meta
            .get("vae_config")
            .ok_or_else(|| Error::Checkpoint("missing vae_config header".to_string()))?;
        let dims: Vec<usize> = cfg
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Checkpoint(format!("bad vae_config: {e}")))?;
        if dims.len() != 3 {
            return Err(Error::Checkpoint("bad vae_config field count".to_string()));
        }
        let mut vae = Vae::new(dims[0], dims[1], dims[2], 0);
        let by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        for (name, slot) in vae
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect::<Vec<_>>()
            .into_iter()
            .zip(vae.param_slots())
        {
            let t = by_name
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            *slot = Tensor::param(t.data().to_vec(), t.shape())?;
        }
        Ok(vae)
    }
}

/// Decode a fixed-length latent clip; the length is validated against the
/// refiner's configured clip size.
pub fn decode_clip(vae: &Vae, latents: &Tensor, l_clip: usize) -> Result<PixelClip> {
    if latents.rank() != 4 || latents.shape()[0] != l_clip {
        return Err(Error::invalid(
            "decode_clip",
            format!("expected [{l_clip}, H', W', C], got {:?}", latents.shape()),
        ));
    }
    PixelClip::new(vae.decode(latents)?)
}

/// Three strided conv layers over the channel-stacked clip, pooled to one
/// real/fake logit.
pub struct Discriminator {
    pub c1: Tensor,
    pub c1_b: Tensor,
    pub c2: Tensor,
    pub c2_b: Tensor,
    pub c3: Tensor,
    pub c3_b: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub l_clip: usize,
    pub pixel_channels: usize,
    pub width: usize,
}

impl Discriminator {
    pub fn new(l_clip: usize, pixel_channels: usize, width: usize, seed: u64) -> Discriminator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Discriminator {
            c1: conv_kernel(l_clip * pixel_channels, width, &mut rng),
            c1_b: zero_param(&[width]),
            c2: conv_kernel(width, width, &mut rng),
            c2_b: zero_param(&[width]),
            c3: conv_kernel(width, width, &mut rng),
            c3_b: zero_param(&[width]),
            w_out: {
                let init = Tensor::randn(&[width, 1], 0.1, &mut rng);
                Tensor::param(init.data().to_vec(), init.shape()).unwrap()
            },
            b_out: zero_param(&[1]),
            l_clip,
            pixel_channels,
            width,
        }
    }

    /// Clip `[L_clip, H, W, pc]` to a scalar logit.
    pub fn logit(&self, clip: &Tensor) -> Result<Tensor> {
        let s = clip.shape();
        if s.len() != 4 || s[0] != self.l_clip || s[3] != self.pixel_channels {
            return Err(Error::invalid(
                "Discriminator::logit",
                format!("expected [{}, H, W, {}], got {s:?}", self.l_clip, self.pixel_channels),
            ));
        }
        // frames concatenate along channels before the conv stack
        let stacked = clip
            .permute(&[1, 2, 0, 3])?
            .reshape(&[1, s[1], s[2], s[0] * s[3]])?;
        let h = stacked.conv2d(&self.c1, 2, 1)?.add(&self.c1_b)?.silu();
        let h = h.conv2d(&self.c2, 2, 1)?.add(&self.c2_b)?.silu();
        let h = h.conv2d(&self.c3, 2, 1)?.add(&self.c3_b)?.silu();
        let hs = h.shape().to_vec();
        let pooled = h
            .reshape(&[hs[1] * hs[2], hs[3]])?
            .mean_axis(0)?
            .reshape(&[1, self.width])?;
        let logit = pooled.matmul(&self.w_out)?.add(&self.b_out)?;
        logit.reshape(&[1])
    }

    pub fn param_slots(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.c1, &mut self.c1_b, &mut self.c2, &mut self.c2_b,
            &mut self.c3, &mut self.c3_b, &mut self.w_out, &mut self.b_out,
        ]
    }

    pub fn zero_init(&mut self) {
        for slot in self.param_slots() {
            *slot = Tensor::param(vec![0.0; slot.numel()], slot.shape()).unwrap();
        }
    }
}

/// λ₁·L1 + λ₂·L2 between decoded and ground-truth pixels.
pub fn recon_loss(decoded: &Tensor, gt: &Tensor, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    if decoded.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: decoded.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let diff = decoded.sub(gt)?;
    let l1 = diff.abs().mean_all().scale(lambda1);
    let l2 = diff.square().mean_all().scale(lambda2);
    l1.add(&l2)
}

/// −log σ(x), the logistic loss on a scalar logit.
fn neg_log_sigmoid(logit: &Tensor) -> Tensor {
    logit.sigmoid().ln().neg()
}

/// −log(1 − σ(x)).
fn neg_log_one_minus_sigmoid(logit: &Tensor) -> Tensor {
    logit.sigmoid().neg().add_scalar(1.0).ln().neg()
}

/// One alternating refinement step: discriminator sub-step on real vs
/// decoded-detached, then a decoder sub-step on reconstruction plus the
/// non-saturating adversarial term. Returns (recon loss, decoder-side
/// adversarial loss).
#[allow(clippy::too_many_arguments)]
pub fn refine_step(
    vae: &mut Vae,
    disc: &mut Discriminator,
    dec_opt: &mut Adam,
    disc_opt: &mut Adam,
    gen_latents: &Tensor,
    gt_pixels: &Tensor,
    lambda1: f64,
    lambda2: f64,
    adv_weight: f64,
) -> Result<(f64, f64)> {
    let latents = gen_latents.detach();

    // discriminator sub-step
    let decoded = vae.decode(&latents)?.detach();
    let d_real = disc.logit(&gt_pixels.detach())?;
    let d_fake = disc.logit(&decoded)?;
    let d_loss = neg_log_sigmoid(&d_real)
        .add(&neg_log_one_minus_sigmoid(&d_fake))?
        .sum_all();
    let d_grads = d_loss.backward()?;
    let mut d_slots = disc.param_slots();
    disc_opt.step(&mut d_slots, &d_grads)?;

    // decoder sub-step
    let decoded = vae.decode(&latents)?;
    let recon = recon_loss(&decoded, &gt_pixels.detach(), lambda1, lambda2)?;
    let adv = neg_log_sigmoid(&disc.logit(&decoded)?).sum_all().scale(adv_weight);
    let recon_value = recon.item();
    let adv_value = adv.item();
    if !recon_value.is_finite() || !adv_value.is_finite() {
        return Err(Error::Diverged(format!(
            "refiner losses recon {recon_value} adv {adv_value}"
        )));
    }
    let total = recon.add(&adv)?;
    let grads = total.backward()?;
    let mut slots = vae.decoder_slots();
    dec_opt.step(&mut slots, &grads)?;
    Ok((recon_value, adv_value))
}

/// Joint encoder/decoder pretraining by plain reconstruction. Returns the
/// per-step losses.
pub fn pretrain_vae(
    vae: &mut Vae,
    clips: &[Tensor],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::invalid("pretrain_vae", "empty dataset"));
    }
    let mut opt = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let clip = &clips[step % clips.len()];
        let latent = vae.encode(&clip.detach())?;
        let recon = vae.decode(&latent)?;
        let loss = recon_loss(&recon, clip, 1.0, 1.0)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("vae pretrain loss {value}")));
        }
        let grads = loss.backward()?;
        let mut slots = vae.param_slots();
        opt.step(&mut slots, &grads)?;
        losses.push(value);
    }
    Ok(losses)
}

/// The refinement stage over (generated latents, ground-truth pixels) pairs,
/// with the student generator hash-checked frozen across every step.
#[allow(clippy::too_many_arguments)]
pub fn refiner_stage(
    student: &Model,
    vae: &mut Vae,
    disc: &mut Discriminator,
    data: &[(Tensor, Tensor)],
    steps: usize,
    dec_lr: f64,
    disc_lr: f64,
    lambda1: f64,
    lambda2: f64,
    adv_weight: f64,
) -> Result<Vec<(f64, f64)>> {
    if data.is_empty() {
        return Err(Error::invalid("refiner_stage", "empty dataset"));
    }
    let frozen = student.param_hash();
    let mut dec_opt = Adam::new(dec_lr);
    let mut disc_opt = Adam::new(disc_lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (latents, gt) = &data[step % data.len()];
        losses.push(refine_step(
            vae, disc, &mut dec_opt, &mut disc_opt, latents, gt, lambda1, lambda2, adv_weight,
        )?);
        assert_eq!(
            student.param_hash(),
            frozen,
            "generator parameters changed during the refiner stage"
        );
    }
    Ok(losses)
}

/// Mean Sobel gradient magnitude over a pixel clip, the high-frequency
/// content proxy.
pub fn sobel_energy(frames: &Tensor) -> Result<f64> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::invalid("sobel_energy", "expected [frames, H, W, channels]"));
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h < 3 || w < 3 {
        return Err(Error::invalid("sobel_energy", "frame too small for a 3x3 stencil"));
    }
    let d = frames.data();
    let at = |fi: usize, y: usize, x: usize, ch: usize| d[((fi * h + y) * w + x) * c + ch];
    let mut total = 0.0;
    let mut count = 0usize;
    for fi in 0..f {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for ch in 0..c {
                    let gx = -at(fi, y - 1, x - 1, ch) + at(fi, y - 1, x + 1, ch)
                        - 2.0 * at(fi, y, x - 1, ch)
                        + 2.0 * at(fi, y, x + 1, ch)
                        - at(fi, y + 1, x - 1, ch)
                        + at(fi, y + 1, x + 1, ch);
                    let gy = -at(fi, y - 1, x - 1, ch) - 2.0 * at(fi, y - 1, x, ch)
                        - at(fi, y - 1, x + 1, ch)
                        + at(fi, y + 1, x - 1, ch)
                        + 2.0 * at(fi, y + 1, x, ch)
                        + at(fi, y + 1, x + 1, ch);
                    total += (gx * gx + gy * gy).sqrt();
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}
