//! Synthetic avatar-like data: per-identity latent textures with an oral
//! region driven by an audio envelope, slow background drift, and an analytic
//! pixel renderer for refiner ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accdmd::OralMask;
use crate::error::{Error, Result};
use crate::model::ConditionSet;
use crate::numeric::Tensor;
use crate::refiner::VAE_FACTOR;

/// A deterministic identity: base latent texture, fixed oral rectangle, a
/// positive oral response pattern, and drift/audio motion parameters.
#[derive(Debug, Clone)]
pub struct SyntheticIdentity {
    pub seed: u64,
    /// `[H', W', C]`
    pub base: Tensor,
    pub mask: OralMask,
    /// (y0, x0, height, width) of the oral rectangle in latent cells.
    pub oral_rect: (usize, usize, usize, usize),
    /// `[H', W', C]`, positive inside the oral rectangle, zero outside.
    pub oral_pattern: Tensor,
    /// `[H', W', C]`, zero inside the oral rectangle.
    pub drift_pattern: Tensor,
    pub drift_rate: f64,
    pub audio_freq: f64,
    pub audio_phase: f64,
    /// `[cond_dim]` direction the envelope projects onto in audio space.
    pub audio_dir: Vec<f64>,
}

/// One dataset item: ground-truth latents, the driving envelope, the model
/// condition set, and analytically rendered pixels.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub identity: SyntheticIdentity,
    /// `[frames, H', W', C]`
    pub latents: Tensor,
    pub envelope: Vec<f64>,
    pub cond: ConditionSet,
    /// `[frames, 4H', 4W', pixel_channels]`
    pub pixels: Tensor,
}

fn smooth_field(h: usize, w: usize, c: usize, amp: f64, rng: &mut ChaCha8Rng) -> Tensor {
    // a few random low-frequency sinusoids per channel
    let mut data = vec![0.0; h * w * c];
    for ch in 0..c {
        for _ in 0..3 {
            let fy: f64 = rng.gen_range(0.2..1.2);
            let fx: f64 = rng.gen_range(0.2..1.2);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let a: f64 = amp * rng.gen_range(0.3..1.0);
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * c + ch] +=
                        a * (fy * y as f64 / h as f64 * std::f64::consts::TAU
                            + fx * x as f64 / w as f64 * std::f64::consts::TAU
                            + phase)
                            .sin();
                }
            }
        }
    }
    Tensor::new(data, &[h, w, c]).unwrap()
}

pub fn gen_identity(seed: u64, grid_h: usize, grid_w: usize, channels: usize, cond_dim: usize) -> SyntheticIdentity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = smooth_field(grid_h, grid_w, channels, 0.4, &mut rng);

    // oral rectangle: lower-center block, jittered by at most one cell
    let rh = (grid_h / 4).max(1);
    let rw = (grid_w / 2).max(1);
    let y0 = (grid_h - rh - grid_h / 8).min(grid_h - rh);
    let x0_base = (grid_w - rw) / 2;
    let x0 = if grid_w > rw + 1 {
        (x0_base + rng.gen_range(0..2)).min(grid_w - rw)
    } else {
        x0_base
    };
    let mut mask_vals = vec![0.0; grid_h * grid_w];
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            mask_vals[y * grid_w + x] = 1.0;
        }
    }
    let mask = OralMask::new(Tensor::new(mask_vals.clone(), &[grid_h, grid_w]).unwrap()).unwrap();

    // positive response pattern confined to the rectangle
    let mut oral = vec![0.0; grid_h * grid_w * channels];
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            for ch in 0..channels {
                oral[(y * grid_w + x) * channels + ch] = 0.4 + 0.6 * rng.gen::<f64>();
            }
        }
    }
    let oral_pattern = Tensor::new(oral, &[grid_h, grid_w, channels]).unwrap();

    // slow drift lives strictly outside the oral rectangle
    let drift_raw = smooth_field(grid_h, grid_w, channels, 1.0, &mut rng);
    let drift: Vec<f64> = drift_raw
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * (1.0 - mask_vals[i / channels]))
        .collect();
    let drift_pattern = Tensor::new(drift, &[grid_h, grid_w, channels]).unwrap();

    let audio_dir: Vec<f64> = (0..cond_dim)
        .map(|j| if j == 0 { 1.0 } else { rng.gen_range(-0.5..0.5) })
        .collect();

    SyntheticIdentity {
        seed,
        base,
        mask,
        oral_rect: (y0, x0, rh, rw),
        oral_pattern,
        drift_pattern,
        drift_rate: 0.004,
        audio_freq: rng.gen_range(0.05..0.15),
        audio_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        audio_dir,
    }
}

/// Analytic latent-to-pixel renderer: 4x nearest upsampling of a fixed
/// channel mix, plus a period-two stripe texture carrying the
/// high-frequency detail.
pub fn render_pixels(latents: &Tensor, pixel_channels: usize) -> Result<Tensor> {
    let s = latents.shape();
    if s.len() != 4 {
        return Err(Error::invalid("render_pixels", "expected [frames, H', W', C]"));
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = (h * VAE_FACTOR, w * VAE_FACTOR);
    let d = latents.data();
    let mut out = vec![0.0; f * ph * pw * pixel_channels];
    for fi in 0..f {
        for py in 0..ph {
            for px in 0..pw {
                let (ly, lx) = (py / VAE_FACTOR, px / VAE_FACTOR);
                let mut mix = 0.0;
                for ch in 0..c {
                    let weight = 1.0 / (1.0 + ch as f64);
                    mix += weight * d[((fi * h + ly) * w + lx) * c + ch];
                }
                let stripe = if (px / 2) % 2 == 0 { 0.2 } else { -0.2 };
                let v = (mix + stripe).tanh();
                for pc in 0..pixel_channels {
                    out[((fi * ph + py) * pw + px) * pixel_channels + pc] = v;
                }
            }
        }
    }
    Tensor::new(out, &[f, ph, pw, pixel_channels])
}

/// Build one item: latents follow base + drift·k + envelope·oral pattern,
/// audio embeds the envelope, pixels come from the analytic renderer.
pub fn gen_item(
    identity: &SyntheticIdentity,
    frames: usize,
    cond_dim: usize,
    pixel_channels: usize,
    silent: bool,
) -> Result<DatasetItem> {
    let base_shape = identity.base.shape();
    let (h, w, c) = (base_shape[0], base_shape[1], base_shape[2]);
    let bd = identity.base.data();
    let od = identity.oral_pattern.data();
    let dd = identity.drift_pattern.data();

    let envelope: Vec<f64> = (0..frames)
        .map(|k| {
            if silent {
                0.0
            } else {
                0.5 * (1.0
                    + (identity.audio_freq * std::f64::consts::TAU * k as f64
                        + identity.audio_phase)
                        .sin())
            }
        })
        .collect();

    let mut lat = vec![0.0; frames * h * w * c];
    for (k, &e) in envelope.iter().enumerate() {
        let drift = identity.drift_rate * k as f64;
        for i in 0..h * w * c {
            lat[k * h * w * c + i] = bd[i] + drift * dd[i] + e * od[i];
        }
    }
    let latents = Tensor::new(lat, &[frames, h, w, c])?;

    let mut audio = vec![0.0; frames * cond_dim];
    for (k, &e) in envelope.iter().enumerate() {
        for j in 0..cond_dim {
            audio[k * cond_dim + j] = e * identity.audio_dir[j];
        }
    }
    let cond = ConditionSet::new(
        Tensor::new(audio, &[frames, cond_dim])?,
        None,
        latents.narrow(0, 0, 1)?.reshape(&[h, w, c])?,
        cond_dim,
    );

    let pixels = render_pixels(&latents, pixel_channels)?;
    Ok(DatasetItem { identity: identity.clone(), latents, envelope, cond, pixels })
}

/// Deterministic dataset of `n` identities, each with a full-length video.
pub fn gen_dataset(
    n_identities: usize,
    frames_per_video: usize,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    cond_dim: usize,
    pixel_channels: usize,
    seed: u64,
) -> Result<Vec<DatasetItem>> {
    if n_identities == 0 {
        return Err(Error::invalid("gen_dataset", "need at least one identity"));
    }
    (0..n_identities)
        .map(|i| {
            let identity = gen_identity(
                seed.wrapping_mul(1000).wrapping_add(i as u64),
                grid_h,
                grid_w,
                channels,
                cond_dim,
            );
            gen_item(&identity, frames_per_video, cond_dim, pixel_channels, false)
        })
        .collect()
}
