//! Proxy metrics: per-frame drift of the non-oral region against the
//! reference, envelope/oral-energy synchrony, and streaming call counters.

use serde::{Deserialize, Serialize};

use crate::accdmd::OralMask;
use crate::error::{Error, Result};
use crate::inference::{collect_latents, StreamSession};
use crate::numeric::Tensor;

use super::data::DatasetItem;

/// One evaluation's worth of streaming metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Mean non-oral feature distance to the reference frame, per frame.
    pub drift: Vec<f64>,
    /// Pearson correlation of oral-region signal with the audio envelope.
    pub sync_proxy: f64,
    pub total_calls: u64,
    pub unconditional_calls: u64,
    pub nfe_per_chunk: f64,
    pub wall_seconds: f64,
}

impl MetricRecord {
    pub fn mean_drift(&self) -> f64 {
        if self.drift.is_empty() {
            return 0.0;
        }
        self.drift.iter().sum::<f64>() / self.drift.len() as f64
    }

    pub fn tail_drift(&self) -> f64 {
        *self.drift.last().unwrap_or(&0.0)
    }
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va < 1e-18 || vb < 1e-18 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Per-frame mean latent value over the oral region (all channels); linear
/// in the envelope for ground-truth videos.
pub fn oral_signal(frames: &Tensor, mask: &OralMask) -> Result<Vec<f64>> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::invalid("oral_signal", "expected [frames, H', W', C]"));
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    let m = mask.m.data();
    if mask.m.shape() != [h, w] {
        return Err(Error::invalid("oral_signal", "mask grid does not match frames"));
    }
    let weight: f64 = m.iter().sum::<f64>() * c as f64;
    if weight <= 0.0 {
        return Err(Error::invalid("oral_signal", "empty oral mask"));
    }
    let d = frames.data();
    let mut out = Vec::with_capacity(f);
    for k in 0..f {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mv = m[y * w + x];
                if mv == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    acc += mv * d[((k * h + y) * w + x) * c + ch];
                }
            }
        }
        out.push(acc / weight);
    }
    Ok(out)
}

/// Per-frame mean squared distance to the reference over the non-oral
/// region.
pub fn drift_curve(frames: &Tensor, reference: &Tensor, mask: &OralMask) -> Result<Vec<f64>> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::invalid("drift_curve", "expected [frames, H', W', C]"));
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    if reference.shape() != [h, w, c] {
        return Err(Error::invalid("drift_curve", "reference grid mismatch"));
    }
    let m = mask.m.data();
    let weight: f64 = m.iter().map(|v| 1.0 - v).sum::<f64>() * c as f64;
    if weight <= 0.0 {
        return Err(Error::invalid("drift_curve", "mask covers the whole frame"));
    }
    let d = frames.data();
    let r = reference.data();
    let mut out = Vec::with_capacity(f);
    for k in 0..f {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                let keep = 1.0 - m[y * w + x];
                if keep == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let idx = (y * w + x) * c + ch;
                    let diff = d[k * h * w * c + idx] - r[idx];
                    acc += keep * diff * diff;
                }
            }
        }
        out.push(acc / weight);
    }
    Ok(out)
}

/// Metrics of one finished streaming session against its dataset item.
pub fn session_metrics(session: &StreamSession, item: &DatasetItem) -> Result<MetricRecord> {
    let latents = collect_latents(session)?;
    let n = latents.shape()[0];
    if item.envelope.len() < n {
        return Err(Error::invalid("session_metrics", "envelope shorter than stream"));
    }
    let drift = drift_curve(&latents, &item.cond.reference, &item.identity.mask)?;
    let signal = oral_signal(&latents, &item.identity.mask)?;
    let sync_proxy = pearson(&signal, &item.envelope[..n]);
    Ok(MetricRecord {
        drift,
        sync_proxy,
        total_calls: session.total_calls,
        unconditional_calls: session.unconditional_calls,
        nfe_per_chunk: session.total_calls as f64 / session.chunks.len() as f64,
        wall_seconds: session.chunk_seconds.iter().sum(),
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
