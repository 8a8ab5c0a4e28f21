//! Minimisation of the dislocation energy over the interior degrees of
//! freedom of a clamped domain.

use std::collections::VecDeque;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::energy::{DefectModel, DisplacementField, Setup};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lbfgs,
    NonlinearCg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Termination threshold on the largest interior force component.
    pub force_tol: f64,
    pub max_iter: usize,
    /// L-BFGS memory.
    pub history: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Step reduction factor of the backtracking line search.
    pub backtrack: f64,
    /// Largest trial displacement of any degree of freedom per step.
    pub max_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Lbfgs,
            force_tol: 1e-8,
            max_iter: 20_000,
            history: 10,
            armijo: 1e-4,
            backtrack: 0.5,
            max_step: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.force_tol > 0.0) || self.max_iter < 1 || self.history < 1 {
            return Err(Error::Invalid("solver needs force_tol > 0, max_iter ≥ 1 and history ≥ 1".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) || !(self.armijo > 0.0 && self.armijo < 0.5) {
            return Err(Error::Invalid("line-search constants out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RelaxResult {
    pub field: DisplacementField,
    pub energy: f64,
    pub iterations: usize,
    pub final_force_inf: f64,
    pub converged: bool,
    /// Energy after every accepted step, starting with the initial energy.
    pub energy_trace: Vec<f64>,
    /// Rounding-level energy resolution used by the line search.
    pub noise_floor: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

enum Trial {
    Accepted { x: DisplacementField, f: f64, g: Vec<f64> },
    Failed,
}

/// Backtracking line search with the Armijo condition. When the energy change
/// is below the rounding floor the approximate condition
/// `f⁺ ≤ f + floor` and `g⁺·d ≤ (1 − 2c) |g·d|` is accepted instead.
fn line_search(
    model: &DefectModel,
    cfg: &SolverConfig,
    x: &DisplacementField,
    f: f64,
    g: &[f64],
    d: &[f64],
    noise: f64,
) -> Result<Trial> {
    let slope = dot(g, d);
    let mut alpha = (cfg.max_step / inf_norm(d).max(1e-300)).min(1.0);
    for _ in 0..60 {
        let mut xt = x.clone();
        xt.dofs.iter_mut().zip(d).for_each(|(v, dv)| *v += alpha * dv);
        match model.energy_and_gradient(&xt) {
            Ok((ft, gt)) => {
                if ft <= f + cfg.armijo * alpha * slope {
                    return Ok(Trial::Accepted { x: xt, f: ft, g: gt });
                }
                if ft <= f + noise && dot(&gt, d) <= (1.0 - 2.0 * cfg.armijo) * slope.abs() {
                    return Ok(Trial::Accepted { x: xt, f: ft, g: gt });
                }
            }
            Err(Error::DomainEscape { .. }) => {}
            Err(e) => return Err(e),
        }
        alpha *= cfg.backtrack;
        if alpha * inf_norm(d) < 1e-16 {
            break;
        }
    }
    Ok(Trial::Failed)
}

/// Relaxes the corrector from `initial` (zero if `None`).
pub fn relax(model: &DefectModel, cfg: &SolverConfig, initial: Option<DisplacementField>) -> Result<RelaxResult> {
    cfg.validate()?;
    let mut x = initial.unwrap_or_else(|| model.zero_field());
    let (mut f, mut g) = model.energy_and_gradient(&x)?;
    let noise = 4.0 * f64::EPSILON * model.energy_scale();
    let mut trace = vec![f];
    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::new();
    let mut d_prev: Vec<f64> = Vec::new();
    let mut g_prev: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut failures = 0;
    while inf_norm(&g) > cfg.force_tol {
        if iterations >= cfg.max_iter {
            warn!("relaxation stopped after {iterations} iterations, max force {:.3e}", inf_norm(&g));
            return Ok(RelaxResult {
                field: x,
                energy: f,
                iterations,
                final_force_inf: inf_norm(&g),
                converged: false,
                energy_trace: trace,
                noise_floor: noise,
            });
        }
        let mut d = match cfg.method {
            Method::Lbfgs => lbfgs_direction(&g, &s_hist, &y_hist),
            Method::NonlinearCg => {
                if d_prev.is_empty() {
                    g.iter().map(|v| -v).collect()
                } else {
                    let num: f64 = g.iter().zip(&g_prev).map(|(a, b)| a * (a - b)).sum();
                    let beta = (num / dot(&g_prev, &g_prev)).max(0.0);
                    g.iter().zip(&d_prev).map(|(a, p)| -a + beta * p).collect()
                }
            }
        };
        if dot(&g, &d) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            d = g.iter().map(|v| -v).collect();
        }
        match line_search(model, cfg, &x, f, &g, &d, noise)? {
            Trial::Accepted { x: xn, f: fn_, g: gn } => {
                failures = 0;
                let s: Vec<f64> = xn.dofs.iter().zip(&x.dofs).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                if dot(&s, &y) > 1e-16 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                    s_hist.push_back(s);
                    y_hist.push_back(y);
                    if s_hist.len() > cfg.history {
                        s_hist.pop_front();
                        y_hist.pop_front();
                    }
                }
                g_prev = std::mem::replace(&mut g, gn);
                d_prev = d;
                x = xn;
                f = fn_;
                trace.push(f);
                iterations += 1;
                if iterations % 500 == 0 {
                    debug!("iteration {iterations}: energy {f:.12e}, max force {:.3e}", inf_norm(&g));
                }
            }
            Trial::Failed => {
                failures += 1;
                if failures > 1 || (s_hist.is_empty() && d_prev.is_empty()) {
                    return Err(Error::LineSearchFailure(iterations));
                }
                s_hist.clear();
                y_hist.clear();
                d_prev.clear();
            }
        }
    }
    info!("relaxed in {iterations} iterations: energy {f:.10e}, max force {:.3e}", inf_norm(&g));
    Ok(RelaxResult {
        field: x,
        energy: f,
        iterations,
        final_force_inf: inf_norm(&g),
        converged: true,
        energy_trace: trace,
        noise_floor: noise,
    })
}

fn lbfgs_direction(g: &[f64], s_hist: &VecDeque<Vec<f64>>, y_hist: &VecDeque<Vec<f64>>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let k = s_hist.len();
    let mut alpha = vec![0.0; k];
    let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&s_hist[i], &y_hist[i])).collect();
    for i in (0..k).rev() {
        alpha[i] = rho[i] * dot(&s_hist[i], &q);
        q.iter_mut().zip(&y_hist[i]).for_each(|(a, y)| *a -= alpha[i] * y);
    }
    if k > 0 {
        let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..k {
        let beta = rho[i] * dot(&y_hist[i], &q);
        q.iter_mut().zip(&s_hist[i]).for_each(|(a, s)| *a += (alpha[i] - beta) * s);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// One relaxed level of a domain-size hierarchy.
pub struct Level {
    pub radius: f64,
    pub model: DefectModel,
    pub result: RelaxResult,
}

/// Relaxes ascending radii, warm-starting each level from the previous
/// solution padded with zeros.
pub fn hierarchy_relax(setup: &Setup, radii: &[f64], cfg: &SolverConfig) -> Result<Vec<Level>> {
    if radii.is_empty() || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("radii must be non-empty and strictly ascending".into()));
    }
    let mut levels: Vec<Level> = Vec::with_capacity(radii.len());
    for &radius in radii {
        let model = setup.model(radius)?;
        let init = levels.last().map(|prev| model.pad_from(&prev.model, &prev.result.field));
        info!("relaxing R = {radius} ({} interior sites)", model.n_interior());
        let result = relax(&model, cfg, init)?;
        levels.push(Level { radius, model, result });
    }
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Geometry;
    use crate::potential::toy_pair_ml;
    use crate::predictor::TensorSource;

    fn toy() -> Setup {
        Setup::new(Geometry::toy_edge().unwrap(), toy_pair_ml(), TensorSource::CauchyBorn, None).unwrap()
    }

    #[test]
    fn defect_free_setup_is_already_critical() {
        let geom = Geometry::toy_edge().unwrap();
        let setup = Setup::reference(&geom, toy_pair_ml(), 4.0).unwrap();
        let m = setup.model(8.0).unwrap();
        let r = relax(&m, &SolverConfig::default(), None).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert!(r.field.dofs.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn both_methods_converge_with_monotone_energy() {
        let setup = toy();
        let m = setup.model(8.0).unwrap();
        for method in [Method::Lbfgs, Method::NonlinearCg] {
            let cfg = SolverConfig { method, force_tol: 1e-7, ..Default::default() };
            let r = relax(&m, &cfg, None).unwrap();
            assert!(r.converged, "{method:?}");
            assert!(r.final_force_inf <= cfg.force_tol);
            assert!(r.energy < 0.0);
            for w in r.energy_trace.windows(2) {
                assert!(w[1] <= w[0] + r.noise_floor);
            }
        }
    }

    #[test]
    fn single_level_hierarchy_equals_relax() {
        let setup = toy();
        let cfg = SolverConfig { force_tol: 1e-7, ..Default::default() };
        let h = hierarchy_relax(&setup, &[8.0], &cfg).unwrap();
        let direct = relax(&setup.model(8.0).unwrap(), &cfg, None).unwrap();
        assert_eq!(h[0].result.field, direct.field);
        assert!(hierarchy_relax(&setup, &[10.0, 8.0], &cfg).is_err());
    }
}
