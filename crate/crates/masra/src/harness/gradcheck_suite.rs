//! Finite-difference validation of every loss in the objective, run on a
//! fixed miniature model and scenario.
//!
//! Discrete choices (codeword selection, prediction matching) are frozen
//! from the base forward pass so the checked loss surface is locally
//! smooth while parameters are perturbed.

use crate::error::Result;
use crate::model::{tiny_model_config, tiny_scenario_config, ForwardFixings, Model};
use crate::nn::gradcheck::{finite_diff_grad_check, GradReport};
use crate::nn::graph::GradMap;
use crate::nn::{Graph, ParamStore};
use crate::synth::{generate_scenario, Scenario};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
const SUITE_SEED: u64 = 20240717;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Semantic,
    Relation,
    Codebook,
    Vtg,
    Saliency,
    Overall,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Semantic,
        LossKind::Relation,
        LossKind::Codebook,
        LossKind::Vtg,
        LossKind::Saliency,
        LossKind::Overall,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Semantic => "semantic",
            LossKind::Relation => "relation",
            LossKind::Codebook => "codebook",
            LossKind::Vtg => "vtg",
            LossKind::Saliency => "saliency",
            LossKind::Overall => "overall",
        }
    }
}

fn component_loss(
    model: &Model,
    store: &ParamStore,
    scenario: &Scenario,
    fixings: &ForwardFixings,
    kind: LossKind,
) -> Result<(f64, GradMap)> {
    let mut g = Graph::new();
    let fwd = model.forward_training(&mut g, store, scenario, Some(fixings))?;
    let target = match kind {
        LossKind::Semantic => fwd.losses.semantic,
        LossKind::Relation => fwd.losses.relation,
        LossKind::Codebook => fwd.losses.cb,
        LossKind::Vtg => fwd.losses.vtg,
        LossKind::Saliency => fwd.losses.sal,
        LossKind::Overall => fwd.total,
    };
    let grads = g.backward(target)?;
    Ok((g.scalar(target), grads.by_param))
}

/// One finite-difference report per loss. The instance is fixed so results
/// are reproducible run to run.
pub fn run_suite() -> Result<Vec<(LossKind, GradReport)>> {
    let (model, mut store) = Model::new(tiny_model_config(), SUITE_SEED)?;
    let scenario = generate_scenario(&tiny_scenario_config(SUITE_SEED ^ 0xabcd))?;
    // Freeze the discrete choices at their base-parameter values.
    let fixings = {
        let mut g = Graph::new();
        let fwd = model.forward_training(&mut g, &store, &scenario, None)?;
        ForwardFixings {
            aux: fwd.backbone.aux.clone(),
            matched: Some(fwd.matched),
            context_sg: Some(g.value(fwd.backbone.context_token).iter().copied().collect()),
        }
    };
    let mut reports = Vec::with_capacity(LossKind::ALL.len());
    for kind in LossKind::ALL {
        let report = finite_diff_grad_check(
            |s: &ParamStore| component_loss(&model, s, &scenario, &fixings, kind),
            &mut store,
            GRADCHECK_EPS,
            GRADCHECK_TOL,
        )?;
        reports.push((kind, report));
    }
    Ok(reports)
}
