//! Annulus-averaged decay fits and self-convergence studies.

use std::io::Write;

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cbmodel::GreenField;
use crate::energy::{DefectModel, DisplacementField, SlipOps};
use crate::error::{Error, Result};
use crate::predictor::{elastic_strain, SiteValues};
use crate::solver::{Level, RelaxResult};

/// Ratio of consecutive annulus radii.
pub const BIN_RATIO: f64 = 1.3;
/// Fewest bins accepted by a fit.
pub const MIN_BINS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bin {
    pub r_mid: f64,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayFit {
    pub bins: Vec<Bin>,
    /// Least-squares slope of `log mean` (or `log(mean / log r)`) against `log r`.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Slope of the bin maxima, for diagnostics.
    pub max_slope: f64,
    pub window: (f64, f64),
    pub log_correction: bool,
}

/// Least-squares line `y = a + s x`; returns `(s, a, r²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let s = sxy / sxx;
    let a = my - s * mx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (s, a, r2)
}

/// Fits `|q| ≈ c r^s` (or `c r^s log r`) over geometric annuli in `window`.
/// Samples are `(|ℓ − x̂|, |q(ℓ)|)`.
pub fn decay_fit(samples: &[(f64, f64)], window: (f64, f64), log_correction: bool) -> Result<DecayFit> {
    let (lo, hi) = window;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::EmptyWindow(0));
    }
    let n_bins = ((hi / lo).ln() / BIN_RATIO.ln()).floor() as usize;
    let mut acc = vec![(0.0f64, 0.0f64, 0usize); n_bins];
    for &(r, q) in samples {
        if r < lo || r >= lo * BIN_RATIO.powi(n_bins as i32) {
            continue;
        }
        let k = (((r / lo).ln() / BIN_RATIO.ln()).floor() as usize).min(n_bins - 1);
        acc[k].0 += q.abs();
        acc[k].1 = acc[k].1.max(q.abs());
        acc[k].2 += 1;
    }
    let bins: Vec<Bin> = acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.2 > 0 && a.0 > 0.0)
        .map(|(k, a)| Bin { r_mid: lo * BIN_RATIO.powf(k as f64 + 0.5), mean: a.0 / a.2 as f64, max: a.1, count: a.2 })
        .collect();
    if bins.len() < MIN_BINS {
        return Err(Error::EmptyWindow(bins.len()));
    }
    let lr: Vec<f64> = bins.iter().map(|b| b.r_mid.ln()).collect();
    let corr = |b: &Bin| if log_correction { b.r_mid.ln().ln() } else { 0.0 };
    let lm: Vec<f64> = bins.iter().map(|b| b.mean.ln() - corr(b)).collect();
    let lx: Vec<f64> = bins.iter().map(|b| b.max.ln() - corr(b)).collect();
    let (slope, intercept, r2) = linear_fit(&lr, &lm);
    let (max_slope, _, _) = linear_fit(&lr, &lx);
    Ok(DecayFit { bins, slope, intercept, r2, max_slope, window, log_correction })
}

/// Checks that a fit window avoids the core and the clamped boundary.
pub fn check_window(model: &DefectModel, window: (f64, f64)) -> Result<()> {
    let d = &model.domain;
    let lo = model.pred.r_hat + d.b1 + model.stencil.r_cut;
    let hi = d.radius - 2.0 * model.stencil.r_cut;
    if window.0 < lo || window.1 > hi {
        return Err(Error::Invalid(format!(
            "fit window [{}, {}] must lie inside [{lo:.3}, {hi:.3}]",
            window.0, window.1
        )));
    }
    Ok(())
}

fn interior_samples(model: &DefectModel, q: impl Fn(usize, usize) -> f64 + Sync) -> Vec<(f64, f64)> {
    let d = &model.domain;
    d.interior_sites.par_iter().enumerate().map(|(k, &i)| ((d.positions[i] - d.core).norm(), q(k, i))).collect()
}

/// Decay of the net site force and of the largest species force at the
/// predictor (zero corrector).
#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    pub net: DecayFit,
    pub species: DecayFit,
    pub separation: f64,
}

pub fn residual_decay_report(model: &DefectModel, window: (f64, f64)) -> Result<ResidualReport> {
    check_window(model, window)?;
    let ff = model.forces(&model.zero_field())?;
    let net = decay_fit(&interior_samples(model, |k, _| ff.net(k).norm()), window, false)?;
    let species = decay_fit(&interior_samples(model, |k, _| ff.max_species(k)), window, false)?;
    let separation = species.slope - net.slope;
    Ok(ResidualReport { net, species, separation })
}

/// Lattice function view of the species-0 corrector with clamped exterior.
fn u_at(model: &DefectModel, x: &DisplacementField, n: [i64; 2]) -> Vector3<f64> {
    let d = &model.domain;
    d.index_of(n).and_then(|i| d.dof_index[i]).map_or(Vector3::zeros(), |k| x.u(k))
}

fn p_at(model: &DefectModel, x: &DisplacementField, n: [i64; 2], a: usize) -> Vector3<f64> {
    let d = &model.domain;
    d.index_of(n).and_then(|i| d.dof_index[i]).map_or(Vector3::zeros(), |k| x.p(k, a))
}

/// `D̃_{ρ₁} ⋯ D̃_{ρ_j} w(ℓ)` for a species-independent lattice function:
/// on the slipped region this is `R D_{ρ₁} ⋯ D_{ρ_j} S w`, elsewhere plain.
pub fn slipped_difference<F>(ops: &SlipOps, slipped: bool, w: &F, l: [i64; 2], rhos: &[[i64; 2]]) -> Vector3<f64>
where
    F: Fn([i64; 2]) -> Vector3<f64>,
{
    fn diff<G: Fn([i64; 2]) -> Vector3<f64>>(g: &G, l: [i64; 2], rhos: &[[i64; 2]]) -> Vector3<f64> {
        match rhos.split_first() {
            None => g(l),
            Some((r, rest)) => diff(g, [l[0] + r[0], l[1] + r[1]], rest) - diff(g, l, rest),
        }
    }
    if slipped {
        let sw = |k: [i64; 2]| ops.s(w, k);
        ops.r(|k| diff(&sw, k, rhos), l)
    } else {
        diff(w, l, rhos)
    }
}

/// Decay fits of the relaxed corrector.
#[derive(Clone, Debug, Serialize)]
pub struct StrainReport {
    /// `max_ρ |D̃_ρ U|`.
    pub strain: DecayFit,
    /// `max_α |p_α|`.
    pub shift: DecayFit,
    /// `max_{ρ₁,ρ₂} |D̃_{ρ₁}D̃_{ρ₂} U|`.
    pub second_strain: Option<DecayFit>,
    /// `max_{ρ,α} |D_ρ p_α|`.
    pub shift_gradient: Option<DecayFit>,
}

/// Nearest-neighbour offsets used for higher differences.
fn short_offsets(model: &DefectModel) -> Vec<[i64; 2]> {
    let mut offs = model.stencil.offsets();
    let a = &model.lattice2d;
    let len = |n: &[i64; 2]| (a * Vector2::new(n[0] as f64, n[1] as f64)).norm();
    offs.sort_by(|x, y| len(x).partial_cmp(&len(y)).unwrap());
    let shortest = len(&offs[0]);
    let mut out: Vec<[i64; 2]> = offs.into_iter().filter(|n| len(n) <= 2.0 * shortest + 1e-9).collect();
    out.truncate(8);
    out
}

pub fn strain_decay_report(model: &DefectModel, result: &RelaxResult, window: (f64, f64)) -> Result<StrainReport> {
    if !result.converged {
        return Err(Error::NotConverged);
    }
    check_window(model, window)?;
    let x = &result.field;
    let ops = slip_ops(model)?;
    let d = &model.domain;
    let offs = model.stencil.offsets();
    let short = short_offsets(model);
    let u = |n: [i64; 2]| u_at(model, x, n);
    let strain = interior_samples(model, |_, i| {
        offs.iter().map(|r| slipped_difference(&ops, d.gamma[i], &u, d.sites[i], &[*r]).norm()).fold(0.0, f64::max)
    });
    let shift = interior_samples(model, |k, _| (1..x.n_species).map(|a| x.p(k, a).norm()).fold(0.0, f64::max));
    let second = interior_samples(model, |_, i| {
        let mut m: f64 = 0.0;
        for r1 in &short {
            for r2 in &short {
                m = m.max(slipped_difference(&ops, d.gamma[i], &u, d.sites[i], &[*r1, *r2]).norm());
            }
        }
        m
    });
    let dp = interior_samples(model, |_, i| {
        let l = d.sites[i];
        let mut m: f64 = 0.0;
        for a in 1..x.n_species {
            let pa = |n: [i64; 2]| p_at(model, x, n, a);
            for r in &short {
                m = m.max(slipped_difference(&ops, d.gamma[i], &pa, l, &[*r]).norm());
            }
        }
        m
    });
    Ok(StrainReport {
        strain: decay_fit(&strain, window, true)?,
        shift: decay_fit(&shift, window, true)?,
        second_strain: decay_fit(&second, window, true).ok(),
        shift_gradient: decay_fit(&dp, window, true).ok(),
    })
}

fn slip_ops(model: &DefectModel) -> Result<SlipOps> {
    let d = &model.domain;
    Ok(SlipOps {
        b12: d.b12.ok_or(Error::MisalignedBurgers)?,
        burgers: model.pred.burgers,
        core: d.core,
        lattice2d: model.lattice2d,
    })
}

/// Decay of the predictor's lattice strains.
#[derive(Clone, Debug, Serialize)]
pub struct PredictorReport {
    /// `max_t |e_t(ℓ)|`.
    pub strain: DecayFit,
    /// `max_t |D̃_{−ρ_t} e_t(ℓ)|`.
    pub strain_difference: DecayFit,
}

pub fn predictor_decay_report(model: &DefectModel, window: (f64, f64)) -> Result<PredictorReport> {
    check_window(model, window)?;
    let d = &model.domain;
    let st = &model.stencil;
    let vals = SiteValues::new(&model.pred, d, model.lattice2d)?;
    let ops = slip_ops(model)?;
    let coupled: Vec<usize> = model.potential.active().to_vec();
    let e_at = |n: [i64; 2], t: usize| -> Vector3<f64> {
        match d.index_of(n) {
            Some(i) => elastic_strain(&vals, st, i, t).unwrap_or_else(|_| Vector3::zeros()),
            None => Vector3::zeros(),
        }
    };
    let strain =
        interior_samples(model, |_, i| coupled.iter().map(|&t| e_at(d.sites[i], t).norm()).fold(0.0, f64::max));
    let diff = interior_samples(model, |_, i| {
        coupled
            .iter()
            .map(|&t| {
                let n = st.triples[t].n;
                let w = |k: [i64; 2]| e_at(k, t);
                slipped_difference(&ops, d.gamma[i], &w, d.sites[i], &[[-n[0], -n[1]]]).norm()
            })
            .fold(0.0, f64::max)
    });
    Ok(PredictorReport {
        strain: decay_fit(&strain, window, false)?,
        strain_difference: decay_fit(&diff, window, false)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub radius: f64,
    pub distance: f64,
    pub energy: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub reference_radius: f64,
    /// Log-log slope of distance against radius, reference row excluded.
    pub slope: f64,
    /// Half-width of the 95% bootstrap interval of the slope.
    pub slope_half_width: f64,
}

/// Distances `‖u_R − u_{R_max}‖_{a₁}` on the largest domain.
pub fn convergence_study(levels: &[Level], seed: u64) -> Result<ConvergenceTable> {
    if levels.len() < 4 {
        return Err(Error::Invalid("a convergence study needs at least four levels".into()));
    }
    if levels.iter().any(|l| !l.result.converged) {
        return Err(Error::NotConverged);
    }
    let reference = levels.last().unwrap();
    let big = &reference.model;
    let rows: Vec<ConvergenceRow> = levels
        .iter()
        .map(|l| {
            let mut diff = big.pad_from(&l.model, &l.result.field);
            diff.dofs.iter_mut().zip(&reference.result.field.dofs).for_each(|(a, b)| *a -= b);
            ConvergenceRow {
                radius: l.radius,
                distance: big.a1_norm(&diff),
                energy: l.result.energy,
                iterations: l.result.iterations,
            }
        })
        .collect();
    let pts: Vec<(f64, f64)> =
        rows[..rows.len() - 1].iter().map(|r| (r.radius.ln(), r.distance.max(1e-300).ln())).collect();
    let (slope, half) = slope_with_bootstrap(&pts, seed);
    Ok(ConvergenceTable { rows, reference_radius: reference.radius, slope, slope_half_width: half })
}

/// Least-squares slope and the half-width of its 95% bootstrap interval.
pub fn slope_with_bootstrap(pts: &[(f64, f64)], seed: u64) -> (f64, f64) {
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, _, _) = linear_fit(&xs, &ys);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(2000);
    while samples.len() < 2000 {
        let idx: Vec<usize> = (0..pts.len()).map(|_| rng.gen_range(0..pts.len())).collect();
        let bx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        if bx.iter().all(|v| (v - bx[0]).abs() < 1e-12) {
            continue;
        }
        let by: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        samples.push(linear_fit(&bx, &by).0);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = samples[(0.025 * samples.len() as f64) as usize];
    let hi = samples[(0.975 * samples.len() as f64) as usize - 1];
    (slope, 0.5 * (hi - lo))
}

/// Decay of Green's-matrix blocks on a periodic supercell.
#[derive(Clone, Debug, Serialize)]
pub struct GreenReport {
    /// `|D_ρ G₀₀|` along the first lattice vector.
    pub d_g00: DecayFit,
    pub g0p: DecayFit,
    pub gpp: DecayFit,
}

/// Samples `(|ℓ|, value)` for every supercell offset, using minimum images.
pub fn green_samples(gf: &GreenField, lattice2d: &Matrix2<f64>) -> Vec<(f64, [f64; 3])> {
    let n = gf.n as i64;
    let wrap = |i: i64| if i > n / 2 { i - n } else { i };
    (0..n * n)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (wrap(c / n), wrap(c % n));
            let r = (lattice2d * Vector2::new(i as f64, j as f64)).norm();
            let here = gf.idx(i, j);
            let next = gf.idx(i + 1, j);
            let dg = (gf.g00[next] - gf.g00[here]).norm();
            (r, [dg, gf.g0p[here].norm(), gf.gpp[here].norm()])
        })
        .collect()
}

pub fn green_decay_report(gf: &GreenField, lattice2d: &Matrix2<f64>, window: (f64, f64)) -> Result<GreenReport> {
    let s = green_samples(gf, lattice2d);
    let pick = |k: usize| s.iter().map(|(r, v)| (*r, v[k])).collect::<Vec<_>>();
    Ok(GreenReport {
        d_g00: decay_fit(&pick(0), window, false)?,
        g0p: decay_fit(&pick(1), window, false)?,
        gpp: decay_fit(&pick(2), window, false)?,
    })
}

/// Writes bins of several fits as `quantity,r,mean,max,count`.
pub fn write_decay_csv(header: &str, fits: &[(&str, &DecayFit)], w: &mut impl Write) -> std::io::Result<()> {
    write!(w, "{header}")?;
    writeln!(w, "quantity,r,mean,max,count")?;
    for (name, f) in fits {
        for b in &f.bins {
            writeln!(w, "{name},{:.6},{:.10e},{:.10e},{}", b.r_mid, b.mean, b.max, b.count)?;
        }
    }
    Ok(())
}

pub fn write_convergence_csv(header: &str, t: &ConvergenceTable, w: &mut impl Write) -> std::io::Result<()> {
    write!(w, "{header}")?;
    writeln!(w, "R,dist,energy,iterations")?;
    for r in &t.rows {
        writeln!(w, "{},{:.10e},{:.10e},{}", r.radius, r.distance, r.energy, r.iterations)?;
    }
    Ok(())
}

/// Gnuplot script plotting a CSV on log-log axes, one curve per name.
pub fn write_plt(
    csv_name: &str,
    x_col: usize,
    y_col: usize,
    names: &[&str],
    w: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(w, "set datafile separator ','")?;
    writeln!(w, "set logscale xy")?;
    writeln!(w, "set key left bottom")?;
    if names.is_empty() {
        writeln!(w, "plot '{csv_name}' every ::1 using {x_col}:{y_col} with linespoints notitle")?;
        return Ok(());
    }
    let curves: Vec<String> = names
        .iter()
        .map(|n| {
            format!("'{csv_name}' using (strcol(1) eq '{n}' ? ${x_col} : 1/0):{y_col} with linespoints title '{n}'")
        })
        .collect();
    writeln!(w, "plot {}", curves.join(", \\\n     "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice_samples(q: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        let mut v = Vec::new();
        for i in -120..=120 {
            for j in -120..=120 {
                let x = Vector2::new(i as f64 + 0.31, j as f64 * 0.866 + 0.17);
                let r = x.norm();
                v.push((r, q(r)));
            }
        }
        v
    }

    #[test]
    fn recovers_synthetic_powers() {
        for s in [-1.0, -2.0, -3.0] {
            let f = decay_fit(&lattice_samples(|r| r.powf(s)), (8.0, 90.0), false).unwrap();
            assert!((f.slope - s).abs() < 0.02, "{s}: {}", f.slope);
            let g = decay_fit(&lattice_samples(|r| r.powf(s) * r.ln()), (8.0, 90.0), true).unwrap();
            assert!((g.slope - s).abs() < 0.05, "{s} log: {}", g.slope);
        }
    }

    #[test]
    fn narrow_window_is_rejected() {
        let v = lattice_samples(|r| 1.0 / r);
        assert!(matches!(decay_fit(&v, (10.0, 20.0), false), Err(Error::EmptyWindow(_))));
    }

    #[test]
    fn bootstrap_of_exact_line_has_zero_width() {
        let pts: Vec<(f64, f64)> = (1..7).map(|i| (i as f64, 2.0 - 1.5 * i as f64)).collect();
        let (s, h) = slope_with_bootstrap(&pts, 1);
        assert!((s + 1.5).abs() < 1e-12);
        assert!(h < 1e-9);
    }
}
