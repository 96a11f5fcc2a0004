//! Central finite-difference validation of analytic gradients.

use crate::error::Result;
use crate::nn::graph::GradMap;
use crate::nn::params::ParamStore;
use std::collections::BTreeMap;

/// Outcome for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    /// Largest relative error over the tensor's elements; infinite when the
    /// loss evaluated non-finite at a perturbed point.
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub per_param: BTreeMap<String, ParamCheck>,
    pub pass: bool,
}

impl GradReport {
    /// `{parameter_name: {max_rel_err, pass}, ..., "pass": bool}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (name, check) in &self.per_param {
            let err = if check.max_rel_err.is_finite() {
                serde_json::json!(check.max_rel_err)
            } else {
                serde_json::Value::Null
            };
            map.insert(
                name.clone(),
                serde_json::json!({ "max_rel_err": err, "pass": check.pass }),
            );
        }
        map.insert("pass".into(), serde_json::json!(self.pass));
        serde_json::Value::Object(map)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
            .map(|(k, v)| (k.as_str(), v.max_rel_err))
    }
}

/// Compare the analytic gradient of a deterministic scalar loss against a
/// central finite difference, element by element.
///
/// The closure must return the loss value and its analytic parameter
/// gradients at the given store state; perturbed evaluations only use the
/// value. Relative error uses a scale floor so near-zero gradients are
/// judged against an absolute tolerance of `tol * 1e-3`.
pub fn finite_diff_grad_check<F>(
    loss_fn: F,
    params: &mut ParamStore,
    eps: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&ParamStore) -> Result<(f64, GradMap)>,
{
    assert!(eps > 0.0, "eps must be positive");
    let (_, analytic) = loss_fn(params)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut per_param = BTreeMap::new();
    let mut all_pass = true;
    for name in names {
        let dim = params.get(&name)?.dim();
        let mut max_rel = 0.0f64;
        let mut finite = true;
        'elems: for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = params.get(&name)?[(r, c)];
                params.get_mut(&name)?[(r, c)] = orig + eps;
                let f_plus = loss_fn(params)?.0;
                params.get_mut(&name)?[(r, c)] = orig - eps;
                let f_minus = loss_fn(params)?.0;
                params.get_mut(&name)?[(r, c)] = orig;
                if !f_plus.is_finite() || !f_minus.is_finite() {
                    finite = false;
                    break 'elems;
                }
                let numeric = (f_plus - f_minus) / (2.0 * eps);
                let a = analytic
                    .get(&name)
                    .map(|g| g[(r, c)])
                    .unwrap_or(0.0);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
        let check = if finite {
            ParamCheck {
                max_rel_err: max_rel,
                pass: max_rel <= tol,
            }
        } else {
            ParamCheck {
                max_rel_err: f64::INFINITY,
                pass: false,
            }
        };
        all_pass &= check.pass;
        per_param.insert(name, check);
    }
    Ok(GradReport {
        per_param,
        pass: all_pass,
    })
}
