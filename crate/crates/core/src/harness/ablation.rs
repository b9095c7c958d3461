//! Ablation suite: retrain the pipeline with one ingredient removed at a
//! time and summarize streaming metrics per arm.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::Result;

use super::pipeline::{eval_run, train_toy_pipeline, PipelineOptions};

/// Aggregated evaluation of one trained arm over the whole dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub sync_proxy: f64,
    pub mean_drift: f64,
    pub tail_drift: f64,
    pub nfe_per_chunk: f64,
    pub unconditional_calls: u64,
    pub pixel_mse_refined: Option<f64>,
    pub pixel_mse_base: Option<f64>,
    /// Shortfall of decoded high-frequency energy against ground truth.
    pub sobel_gap_refined: Option<f64>,
    pub sobel_gap_base: Option<f64>,
}

/// The named arms, baseline first; each drops exactly one ingredient.
pub fn ablation_arms() -> Vec<(String, PipelineOptions)> {
    let full = PipelineOptions::default;
    vec![
        ("baseline".to_string(), full()),
        ("no_sft".to_string(), PipelineOptions { use_sft: false, ..full() }),
        ("global_field".to_string(), PipelineOptions { phased_field: false, ..full() }),
        ("no_tail_forcing".to_string(), PipelineOptions { tail_forcing: false, ..full() }),
        ("no_sink".to_string(), PipelineOptions { use_sink: false, ..full() }),
        ("no_refiner".to_string(), PipelineOptions { use_refiner: false, ..full() }),
        (
            "full_causal".to_string(),
            PipelineOptions { layer_pattern: Some(causal_pattern(6)), ..full() },
        ),
        (
            "full_bidirectional".to_string(),
            PipelineOptions { layer_pattern: Some(bidi_pattern(6)), ..full() },
        ),
    ]
}

fn causal_pattern(n: usize) -> String {
    "C".repeat(n)
}

fn bidi_pattern(n: usize) -> String {
    "B".repeat(n)
}

/// Train one arm and evaluate it on every dataset identity, averaging the
/// per-item metrics.
pub fn run_arm(cfg: &Config, name: &str, opts: &PipelineOptions, seed: u64) -> Result<AblationRow> {
    // pattern overrides sized to the configured depth
    let mut opts = opts.clone();
    if let Some(p) = &opts.layer_pattern {
        let kind = p.chars().next().unwrap_or('C');
        opts.layer_pattern = Some(kind.to_string().repeat(cfg.model.n_layers));
    }
    let art = train_toy_pipeline(cfg, &opts, seed)?;
    let mut cfg_eval = cfg.clone();
    if let Some(p) = &opts.layer_pattern {
        cfg_eval.model.layer_pattern = p.clone();
        cfg_eval.model.n_layers = p.len();
    }

    let n = art.dataset.len() as f64;
    let mut row = AblationRow {
        name: name.to_string(),
        sync_proxy: 0.0,
        mean_drift: 0.0,
        tail_drift: 0.0,
        nfe_per_chunk: 0.0,
        unconditional_calls: 0,
        pixel_mse_refined: None,
        pixel_mse_base: None,
        sobel_gap_refined: None,
        sobel_gap_base: None,
    };
    let mut mse_r = 0.0;
    let mut mse_b = 0.0;
    let mut gap_r = 0.0;
    let mut gap_b = 0.0;
    for (i, item) in art.dataset.iter().enumerate() {
        let report = eval_run(
            &art.student,
            &cfg_eval,
            item,
            art.vae.as_ref(),
            art.base_vae.as_ref(),
            opts.use_sink,
            seed.wrapping_add(1000 + i as u64),
        )?;
        row.sync_proxy += report.metrics.sync_proxy / n;
        row.mean_drift += report.metrics.mean_drift() / n;
        row.tail_drift += report.metrics.tail_drift() / n;
        row.nfe_per_chunk += report.metrics.nfe_per_chunk / n;
        row.unconditional_calls += report.metrics.unconditional_calls;
        if let (Some(m), Some(s)) = (report.pixel_mse_refined, report.sobel_refined) {
            mse_r += m / n;
            gap_r += (report.sobel_gt - s).max(0.0) / n;
        }
        if let (Some(m), Some(s)) = (report.pixel_mse_base, report.sobel_base) {
            mse_b += m / n;
            gap_b += (report.sobel_gt - s).max(0.0) / n;
        }
    }
    if art.vae.is_some() {
        row.pixel_mse_refined = Some(mse_r);
        row.pixel_mse_base = Some(mse_b);
        row.sobel_gap_refined = Some(gap_r);
        row.sobel_gap_base = Some(gap_b);
    }
    Ok(row)
}

/// Every arm in sequence with a shared seed.
pub fn ablation_suite(cfg: &Config, seed: u64) -> Result<Vec<AblationRow>> {
    ablation_arms()
        .iter()
        .map(|(name, opts)| run_arm(cfg, name, opts, seed))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Fixed-width text table of the suite results.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>8} {:>10} {:>10} {:>6} {:>10} {:>10}\n",
        "arm", "sync", "drift", "tail", "nfe", "px_mse", "hf_gap"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:>8.3} {:>10.4} {:>10.4} {:>6.1} {:>10} {:>10}\n",
            r.name,
            r.sync_proxy,
            r.mean_drift,
            r.tail_drift,
            r.nfe_per_chunk,
            fmt_opt(r.pixel_mse_refined),
            fmt_opt(r.sobel_gap_refined),
        ));
    }
    out
}
