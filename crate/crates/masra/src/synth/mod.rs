//! Synthetic grounding scenarios.
//!
//! Each scenario is built from a handful of latent event prototypes. Fixed
//! "encoder" maps (shared across every scenario and dataset, playing the
//! role of frozen feature extractors) turn prototypes into video, query and
//! caption features. Because captions and event descriptions are produced
//! by an isometric map while the video map is anisotropic, text-side priors
//! reflect the latent event geometry more faithfully than raw video
//! features do.
//!
//! The same latent structure yields ground-truth spans, per-clip saliency
//! labels, event descriptions with spans, and clip captions, so the
//! generator doubles as a perfectly reliable stand-in for a training-time
//! caption model.

pub mod io;

use crate::error::{Error, Result};
use crate::lrca;
use crate::nn::params::normal_sample;
use crate::nn::Tensor2D;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum clips per event; also keeps the ground-truth span strictly wider
/// than one clip.
const MIN_EVENT_LEN: usize = 2;

/// Seed of the fixed encoder maps. Changing it changes every feature in
/// every dataset, so it is a constant of the artifact.
const WORLD_SEED: u64 = 0x4d41_5352_4131;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Number of video clips.
    pub t: usize,
    /// Number of query tokens.
    pub l: usize,
    /// Raw video feature dimension.
    pub c_v: usize,
    /// Raw query feature dimension.
    pub c_q: usize,
    /// Caption / event-description embedding dimension.
    pub d: usize,
    /// Inclusive range for the number of events.
    pub m_range: (usize, usize),
    /// Per-entry feature jitter.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            t: 32,
            l: 8,
            c_v: 64,
            c_q: 64,
            d: 32,
            m_range: (3, 5),
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| Error::InvalidArg {
            op: "ScenarioConfig::validate",
            reason,
        };
        if self.t < 4 {
            return Err(err(format!("t must be >= 4, got {}", self.t)));
        }
        if self.m_range.0 < 2 {
            return Err(err(format!("m_range.min must be >= 2, got {}", self.m_range.0)));
        }
        if self.m_range.0 > self.m_range.1 {
            return Err(err(format!(
                "m_range min {} exceeds max {}",
                self.m_range.0, self.m_range.1
            )));
        }
        if self.m_range.1 > self.t / 2 {
            return Err(err(format!(
                "m_range.max {} exceeds t/2 = {}",
                self.m_range.1,
                self.t / 2
            )));
        }
        if self.m_range.1 * MIN_EVENT_LEN > self.t {
            return Err(err(format!(
                "infeasible partition: {} events of length >= {MIN_EVENT_LEN} exceed t = {}",
                self.m_range.1, self.t
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(err(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.l == 0 {
            return Err(err("l must be >= 1".into()));
        }
        let min_dim = self.c_v.min(self.c_q).min(self.d);
        if min_dim < 4 {
            return Err(err(format!(
                "feature dims must all be >= 4, got min {min_dim}"
            )));
        }
        Ok(())
    }

    /// Latent prototype dimension, a deterministic function of the feature
    /// dims so the encoder maps can all be isometries or near-isometries.
    pub fn latent_dim(&self) -> usize {
        (self.c_v.min(self.c_q).min(self.d) / 4).clamp(2, 8)
    }
}

/// One event-level prior: a description embedding plus its clip span
/// (1-based, inclusive).
#[derive(Debug, Clone, PartialEq)]
pub struct EventPrior {
    pub description: Vec<f64>,
    pub span: (usize, usize),
}

/// Training-only supervision attached to a scenario. Stripped copies of a
/// dataset drop this entire block.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPriors {
    pub events: Vec<EventPrior>,
    /// T x D caption embeddings, one per clip.
    pub clip_captions: Tensor2D,
    /// Cached T x T caption relation matrix (pairwise cosine), precomputed
    /// because the supervision is static.
    pub relation: Tensor2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Generator seed; doubles as the record id.
    pub id: u64,
    /// T x C_v clip features.
    pub video: Tensor2D,
    /// L x C_q query token features.
    pub query: Tensor2D,
    /// Ground-truth span in 1-based inclusive clip indices, start < end.
    pub gt_span: (usize, usize),
    /// Per-clip 0/1 relevance labels.
    pub saliency_gt: Vec<f64>,
    pub priors: Option<ScenarioPriors>,
}

impl Scenario {
    pub fn t(&self) -> usize {
        self.video.rows()
    }

    /// Ground truth as a normalized half-open interval over [0, 1].
    /// Clip `i` (1-based) covers [(i-1)/T, i/T).
    pub fn gt_normalized(&self) -> (f64, f64) {
        let t = self.t() as f64;
        ((self.gt_span.0 - 1) as f64 / t, self.gt_span.1 as f64 / t)
    }

    pub fn events(&self) -> Result<&[EventPrior]> {
        self.priors
            .as_ref()
            .map(|p| p.events.as_slice())
            .ok_or_else(|| Error::InvalidArg {
                op: "Scenario::events",
                reason: format!("scenario {} carries no priors", self.id),
            })
    }
}

/// Fixed latent-to-feature maps shared by every scenario.
struct WorldMaps {
    /// latent x C_v, anisotropic.
    video: Array2<f64>,
    /// latent x C_q, isometry.
    query: Array2<f64>,
    /// latent x D, isometry.
    caption: Array2<f64>,
}

fn mix_dims(cfg: &ScenarioConfig) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for v in [cfg.c_v, cfg.c_q, cfg.d, cfg.latent_dim()] {
        h ^= v as u64;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    }
    h
}

/// Rows of an `n x d` matrix orthonormalized by Gram-Schmidt.
fn orthonormal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    assert!(n <= d, "cannot orthonormalize {n} rows in {d} dims");
    let mut m = Array2::from_shape_simple_fn((n, d), || normal_sample(rng));
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| m[(i, k)] * m[(j, k)]).sum();
            for k in 0..d {
                m[(i, k)] -= dot * m[(j, k)];
            }
        }
        let norm: f64 = (0..d).map(|k| m[(i, k)] * m[(i, k)]).sum::<f64>().sqrt();
        for k in 0..d {
            m[(i, k)] /= norm;
        }
    }
    m
}

fn world_maps(cfg: &ScenarioConfig) -> WorldMaps {
    let lat = cfg.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED ^ mix_dims(cfg));
    let mut video = orthonormal_rows(&mut rng, lat, cfg.c_v);
    // Anisotropic scaling compresses part of the latent geometry so raw
    // video similarities are a distorted view of event relations.
    for (j, mut row) in video.rows_mut().into_iter().enumerate() {
        let s = if lat > 1 {
            1.6 - 1.2 * j as f64 / (lat - 1) as f64
        } else {
            1.0
        };
        row.mapv_inplace(|v| v * s);
    }
    let query = orthonormal_rows(&mut rng, lat, cfg.c_q);
    let caption = orthonormal_rows(&mut rng, lat, cfg.d);
    WorldMaps {
        video,
        query,
        caption,
    }
}

/// Unit-norm latent prototype.
fn sample_prototype(rng: &mut ChaCha8Rng, lat: usize) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..lat).map(|_| normal_sample(rng)).collect();
        let norm: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return p.iter().map(|v| v / norm).collect();
        }
    }
}

fn map_latent(p: &[f64], map: &Array2<f64>) -> Vec<f64> {
    let d = map.ncols();
    let mut out = vec![0.0; d];
    for (j, pj) in p.iter().enumerate() {
        for k in 0..d {
            out[k] += pj * map[(j, k)];
        }
    }
    out
}

/// Contiguous, ordered, non-overlapping event spans plus background gaps.
fn sample_spans(rng: &mut ChaCha8Rng, t: usize, m: usize) -> Vec<(usize, usize)> {
    let max_len = (t / m).max(MIN_EVENT_LEN);
    let lengths: Vec<usize> = loop {
        let candidate: Vec<usize> = (0..m)
            .map(|_| rng.gen_range(MIN_EVENT_LEN..=max_len))
            .collect();
        if candidate.iter().sum::<usize>() <= t {
            break candidate;
        }
    };
    let background = t - lengths.iter().sum::<usize>();
    let mut gaps = vec![0usize; m + 1];
    for _ in 0..background {
        let g = rng.gen_range(0..=m);
        gaps[g] += 1;
    }
    let mut spans = Vec::with_capacity(m);
    let mut pos = 1 + gaps[0];
    for (i, len) in lengths.iter().enumerate() {
        spans.push((pos, pos + len - 1));
        pos += len + gaps[i + 1];
    }
    spans
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let maps = world_maps(config);
    let lat = config.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let m = rng.gen_range(config.m_range.0..=config.m_range.1);
    let spans = sample_spans(&mut rng, config.t, m);
    let prototypes: Vec<Vec<f64>> = (0..m).map(|_| sample_prototype(&mut rng, lat)).collect();
    let background = sample_prototype(&mut rng, lat);
    let target = rng.gen_range(0..m);

    // Clip index (1-based) -> owning event, None for background.
    let owner = |clip: usize| -> Option<usize> {
        spans
            .iter()
            .position(|&(s, e)| clip >= s && clip <= e)
    };

    let sigma = config.noise_sigma;
    let mut video = Array2::zeros((config.t, config.c_v));
    let mut captions = Array2::zeros((config.t, config.d));
    for clip in 1..=config.t {
        let proto = owner(clip)
            .map(|i| &prototypes[i])
            .unwrap_or(&background);
        let v = map_latent(proto, &maps.video);
        let c = map_latent(proto, &maps.caption);
        for (k, base) in v.iter().enumerate() {
            video[(clip - 1, k)] = base + sigma * normal_sample(&mut rng);
        }
        for (k, base) in c.iter().enumerate() {
            captions[(clip - 1, k)] = base + sigma * normal_sample(&mut rng);
        }
    }

    let mut query = Array2::zeros((config.l, config.c_q));
    let q_base = map_latent(&prototypes[target], &maps.query);
    for tok in 0..config.l {
        for (k, base) in q_base.iter().enumerate() {
            query[(tok, k)] = base + sigma * normal_sample(&mut rng);
        }
    }

    let events: Vec<EventPrior> = (0..m)
        .map(|i| EventPrior {
            description: map_latent(&prototypes[i], &maps.caption),
            span: spans[i],
        })
        .collect();

    let gt_span = spans[target];
    let saliency_gt: Vec<f64> = (1..=config.t)
        .map(|clip| {
            if clip >= gt_span.0 && clip <= gt_span.1 {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let clip_captions = Tensor2D::new(captions)?;
    let relation = lrca::textual_relation_matrix(&clip_captions)?;
    Ok(Scenario {
        id: config.seed,
        video: Tensor2D::new(video)?,
        query: Tensor2D::new(query)?,
        gt_span,
        saliency_gt,
        priors: Some(ScenarioPriors {
            events,
            clip_captions,
            relation: relation.into_tensor(),
        }),
    })
}
