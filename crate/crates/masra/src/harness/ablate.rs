//! Config-driven ablation sweeps: train and evaluate a set of toggle
//! variants over a shared seed list, then summarize mean and spread.

use super::config::RunConfig;
use super::train::train;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::model::{EstaSource, LrcaSource};
use serde::{Deserialize, Serialize};

/// Partial overrides applied on top of the base configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TogglePatch {
    #[serde(default)]
    pub use_esta: Option<bool>,
    #[serde(default)]
    pub use_lrca: Option<bool>,
    #[serde(default)]
    pub use_dai: Option<bool>,
    #[serde(default)]
    pub use_sge: Option<bool>,
    #[serde(default)]
    pub use_sora: Option<bool>,
    #[serde(default)]
    pub codebook_attn_grads: Option<bool>,
    #[serde(default)]
    pub esta_source: Option<EstaSource>,
    #[serde(default)]
    pub lrca_source: Option<LrcaSource>,
}

impl TogglePatch {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        if let Some(v) = self.use_esta {
            cfg.use_esta = v;
        }
        if let Some(v) = self.use_lrca {
            cfg.use_lrca = v;
        }
        if let Some(v) = self.use_dai {
            cfg.use_dai = v;
        }
        if let Some(v) = self.use_sge {
            cfg.use_sge = v;
        }
        if let Some(v) = self.use_sora {
            cfg.use_sora = v;
        }
        if let Some(v) = self.codebook_attn_grads {
            cfg.codebook_attn_grads = v;
        }
        if let Some(v) = self.esta_source {
            cfg.esta_source = v;
        }
        if let Some(v) = self.lrca_source {
            cfg.lrca_source = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSpec {
    pub label: String,
    pub patch: TogglePatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub result: Option<EvalResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub label: String,
    pub runs: Vec<RunOutcome>,
    pub mean_map_avg: f64,
    pub std_map_avg: f64,
    pub mean_r1_05: f64,
    pub std_r1_05: f64,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantOutcome>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Train and evaluate every (variant, seed) pair on the identical dataset
/// and seed list. A failed run is recorded and the sweep continues.
pub fn ablate(
    base: &RunConfig,
    variants: &[VariantSpec],
    seeds: &[u64],
) -> Result<AblationReport> {
    if variants.len() < 2 {
        return Err(Error::InvalidArg {
            op: "ablate",
            reason: format!("need at least 2 variants, got {}", variants.len()),
        });
    }
    if seeds.len() < 3 {
        return Err(Error::InvalidArg {
            op: "ablate",
            reason: format!("need at least 3 seeds, got {}", seeds.len()),
        });
    }
    let mut outcomes = Vec::with_capacity(variants.len());
    for spec in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = spec.patch.apply(base);
            cfg.seed = seed;
            cfg.out_dir = None; // sweeps keep artifacts in memory
            let outcome = match train(&cfg) {
                Ok(result) => {
                    let val = result.checkpoint.best_val().cloned();
                    match val {
                        Some(v) => RunOutcome {
                            seed,
                            result: Some(v),
                            error: None,
                        },
                        None => RunOutcome {
                            seed,
                            result: None,
                            error: Some("no validation split".into()),
                        },
                    }
                }
                Err(e) => RunOutcome {
                    seed,
                    result: None,
                    error: Some(e.to_string()),
                },
            };
            runs.push(outcome);
        }
        let maps: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.result.as_ref().map(|v| v.map_avg))
            .collect();
        let r1s: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.result.as_ref().map(|v| v.r1(0.5)))
            .collect();
        let (mean_map, std_map) = mean_std(&maps);
        let (mean_r1, std_r1) = mean_std(&r1s);
        outcomes.push(VariantOutcome {
            label: spec.label.clone(),
            failed: runs.iter().filter(|r| r.error.is_some()).count(),
            runs,
            mean_map_avg: mean_map,
            std_map_avg: std_map,
            mean_r1_05: mean_r1,
            std_r1_05: std_r1,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        variants: outcomes,
    })
}

impl AblationReport {
    /// Markdown summary: per-variant mean +/- std plus the pairwise
    /// mAP-avg ordering.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Ablation report\n\n");
        out.push_str(&format!(
            "seeds: {}\n\n",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out.push_str("| variant | mAP-avg | R1@0.5 | failed |\n");
        out.push_str("|---|---|---|---|\n");
        for v in &self.variants {
            out.push_str(&format!(
                "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {} |\n",
                v.label, v.mean_map_avg, v.std_map_avg, v.mean_r1_05, v.std_r1_05, v.failed
            ));
        }
        out.push_str("\n## Pairwise mAP-avg ordering\n\n");
        for a in &self.variants {
            for b in &self.variants {
                if a.label < b.label {
                    let rel = if a.mean_map_avg > b.mean_map_avg {
                        ">"
                    } else if a.mean_map_avg < b.mean_map_avg {
                        "<"
                    } else {
                        "="
                    };
                    out.push_str(&format!(
                        "- {} ({:.4}) {} {} ({:.4})\n",
                        a.label, a.mean_map_avg, rel, b.label, b.mean_map_avg
                    ));
                }
            }
        }
        out
    }

    pub fn variant(&self, label: &str) -> Option<&VariantOutcome> {
        self.variants.iter().find(|v| v.label == label)
    }
}

/// The ESTA x LRCA on/off grid.
pub fn alignment_grid() -> Vec<VariantSpec> {
    let mk = |label: &str, esta: bool, lrca: bool| VariantSpec {
        label: label.into(),
        patch: TogglePatch {
            use_esta: Some(esta),
            use_lrca: Some(lrca),
            ..TogglePatch::default()
        },
    };
    vec![
        mk("neither", false, false),
        mk("esta_only", true, false),
        mk("lrca_only", false, true),
        mk("full", true, true),
    ]
}

/// Backbone component removals.
pub fn backbone_variants() -> Vec<VariantSpec> {
    let mut specs = vec![VariantSpec {
        label: "full".into(),
        patch: TogglePatch::default(),
    }];
    for (label, patch) in [
        (
            "no_dai",
            TogglePatch {
                use_dai: Some(false),
                ..TogglePatch::default()
            },
        ),
        (
            "no_sge",
            TogglePatch {
                use_sge: Some(false),
                ..TogglePatch::default()
            },
        ),
        (
            "no_sora",
            TogglePatch {
                use_sora: Some(false),
                ..TogglePatch::default()
            },
        ),
    ] {
        specs.push(VariantSpec {
            label: label.into(),
            patch,
        });
    }
    specs
}

/// Prior-modality grid (event-alignment source x relation source), labeled
/// `<esta>-<lrca>` with T = text prior, V = visual.
pub fn prior_source_variants() -> Vec<VariantSpec> {
    let mk = |label: &str, esta: EstaSource, lrca: LrcaSource| VariantSpec {
        label: label.into(),
        patch: TogglePatch {
            esta_source: Some(esta),
            lrca_source: Some(lrca),
            ..TogglePatch::default()
        },
    };
    vec![
        mk("T-T", EstaSource::MllmPrior, LrcaSource::TextPrior),
        mk("T-V", EstaSource::MllmPrior, LrcaSource::VisualSelf),
        mk("V-T", EstaSource::Visual, LrcaSource::TextPrior),
        mk("V-V", EstaSource::Visual, LrcaSource::VisualSelf),
    ]
}

pub fn preset_variants(name: &str) -> Result<Vec<VariantSpec>> {
    match name {
        "alignment-grid" => Ok(alignment_grid()),
        "backbone" => Ok(backbone_variants()),
        "prior-source" => Ok(prior_source_variants()),
        other => Err(Error::InvalidArg {
            op: "preset_variants",
            reason: format!(
                "unknown preset `{other}`; valid: alignment-grid, backbone, prior-source"
            ),
        }),
    }
}
