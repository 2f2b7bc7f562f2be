use serde::Serialize;

use super::params::ParamSet;
use super::rng::SeededRng;
use crate::error::{MuseError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per tensor (chosen at random).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare analytic gradients against central finite differences.
pub fn grad_check(
    loss: impl Fn(&ParamSet) -> Result<f64>,
    grad: impl Fn(&ParamSet) -> Result<ParamSet>,
    params: &ParamSet,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(MuseError::NonFinite(format!("grad_check base loss {base}")));
    }
    let analytic = grad(params)?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut work = params.clone();
    let mut report = Vec::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.len();
        let g = analytic.get(&name)?.clone();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(cap) = cfg.max_coords_per_tensor {
            if n > cap {
                rng.shuffle(&mut coords);
                coords.truncate(cap);
                coords.sort_unstable();
            }
        }
        let mut pc = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: coords.len(),
        };
        for &i in &coords {
            let orig = params.get(&name)?.data()[i];
            work.get_mut(&name).expect("param").data_mut()[i] = orig + cfg.step;
            let lp = loss(&work)?;
            work.get_mut(&name).expect("param").data_mut()[i] = orig - cfg.step;
            let lm = loss(&work)?;
            work.get_mut(&name).expect("param").data_mut()[i] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(MuseError::NonFinite(format!("grad_check loss at {name}[{i}]")));
            }
            let num = (lp - lm) / (2.0 * cfg.step);
            let a = g.data()[i];
            let err = relative_error(a, num);
            if err > pc.max_rel_error || pc.checked == 0 {
                pc.max_rel_error = err;
                pc.worst_index = i;
                pc.analytic = a;
                pc.numeric = num;
            }
        }
        report.push(pc);
    }
    let max_rel_error = report.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
        tolerance: cfg.tolerance,
        pass: max_rel_error <= cfg.tolerance,
    })
}
