//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3x2, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dislocore::analysis::slipped_difference;
use dislocore::cbmodel::{cb_density, fidx, Matrix6};
use dislocore::energy::{DefectModel, DisplacementField, SlipOps};
use dislocore::lattice::{Geometry, InteractionStencil};
use dislocore::potential::SitePotential;

/// Ĥ(k) assembled block by block from the second derivatives of the site
/// potential: `Ĥ₀₀`, `Ĥ₀p`, `Ĥp₀` and `Ĥpp` in `(U, p₁ … p_{S−1})` order,
/// rows indexed by the test argument `(τγδ)` and columns by the trial
/// argument `(ραβ)`.
pub fn literal_hamiltonian(v: &dyn SitePotential, stencil: &InteractionStencil, k: [f64; 2]) -> DMatrix<Complex64> {
    let s = stencil.n_species;
    let zero = vec![Vector3::zeros(); v.active().len()];
    let phase = |n: [i64; 2]| Complex64::from_polar(1.0, 2.0 * PI * (k[0] * n[0] as f64 + k[1] * n[1] as f64));
    let one = Complex64::new(1.0, 0.0);
    let ind = |a: usize, b: usize| if a == b { one } else { Complex64::new(0.0, 0.0) };
    let mut h = DMatrix::<Complex64>::zeros(3 * s, 3 * s);
    for blk in v.d2(&zero) {
        let test = &stencil.triples[v.active()[blk.i]];
        let trial = &stencil.triples[v.active()[blk.j]];
        let (tau, gamma, delta) = (test.n, test.alpha, test.beta);
        let (rho, alpha, beta) = (trial.n, trial.alpha, trial.beta);
        let e_tau = phase(tau).conj();
        let e_rho = phase(rho);
        let mut add = |row: usize, col: usize, f: Complex64| {
            for r in 0..3 {
                for c in 0..3 {
                    h[(3 * row + r, 3 * col + c)] += f * blk.m[(r, c)];
                }
            }
        };
        add(0, 0, (e_tau - one) * (e_rho - one));
        for b in 1..s {
            add(0, b, (e_tau - one) * e_rho * ind(beta, b) - (e_tau - one) * ind(alpha, b));
        }
        for d in 1..s {
            add(d, 0, e_tau * (e_rho - one) * ind(delta, d) - (e_rho - one) * ind(gamma, d));
        }
        for d in 1..s {
            for b in 1..s {
                let f = e_tau * e_rho * ind(delta, d) * ind(beta, b) + ind(gamma, d) * ind(alpha, b)
                    - e_tau * ind(delta, d) * ind(alpha, b)
                    - e_rho * ind(gamma, d) * ind(beta, b);
                add(d, b, f);
            }
        }
    }
    h
}

/// Gradient of `p ↦ W(F, p)` over species `1..S` from the analytic first
/// derivatives of the site potential.
fn shift_gradient(
    v: &dyn SitePotential,
    stencil: &InteractionStencil,
    f: &Matrix3x2<f64>,
    p: &[Vector3<f64>],
) -> DVector<f64> {
    let s = stencil.n_species;
    let g: Vec<Vector3<f64>> = v
        .active()
        .iter()
        .map(|&t| {
            let tr = &stencil.triples[t];
            f * tr.rho + p[tr.beta] - p[tr.alpha]
        })
        .collect();
    let mut d = vec![Vector3::zeros(); g.len()];
    v.d1(&g, &mut d);
    let mut out = DVector::zeros(3 * (s - 1));
    for (k, &t) in v.active().iter().enumerate() {
        let tr = &stencil.triples[t];
        for c in 0..3 {
            if tr.beta > 0 {
                out[3 * (tr.beta - 1) + c] += d[k][c];
            }
            if tr.alpha > 0 {
                out[3 * (tr.alpha - 1) + c] -= d[k][c];
            }
        }
    }
    out
}

/// `min_p W(F, p)` with `p₀ = 0`, by Newton iteration on the analytic shift
/// gradient with a difference-quotient Jacobian.
pub fn relaxed_density(v: &dyn SitePotential, stencil: &InteractionStencil, f: &Matrix3x2<f64>) -> f64 {
    let s = stencil.n_species;
    let q = 3 * (s - 1);
    let unpack = |x: &DVector<f64>| -> Vec<Vector3<f64>> {
        (0..s)
            .map(|a| if a == 0 { Vector3::zeros() } else { Vector3::new(x[3 * a - 3], x[3 * a - 2], x[3 * a - 1]) })
            .collect()
    };
    let mut x = DVector::zeros(q);
    let h = 1e-6;
    for _ in 0..20 {
        let g = shift_gradient(v, stencil, f, &unpack(&x));
        if g.amax() < 1e-14 {
            break;
        }
        let mut jac = DMatrix::zeros(q, q);
        for c in 0..q {
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            let col =
                (shift_gradient(v, stencil, f, &unpack(&xp)) - shift_gradient(v, stencil, f, &unpack(&xm))) / (2.0 * h);
            jac.set_column(c, &col);
        }
        let jac = (&jac + jac.transpose()) * 0.5;
        x -= jac.lu().solve(&g).expect("shift Hessian is invertible");
    }
    cb_density(v, stencil, f, &unpack(&x))
}

/// Hessian of the relaxed density at `F = 0` by Richardson-extrapolated
/// central differences.
pub fn nested_elastic_tensor(v: &dyn SitePotential, stencil: &InteractionStencil, h: f64) -> Matrix6 {
    let w = |a: usize, ha: f64, b: usize, hb: f64| {
        let mut f = Matrix3x2::zeros();
        f[(a / 2, a % 2)] += ha;
        f[(b / 2, b % 2)] += hb;
        relaxed_density(v, stencil, &f)
    };
    let second = |a: usize, b: usize, h: f64| {
        if a == b {
            (w(a, h, a, 0.0) - 2.0 * w(a, 0.0, a, 0.0) + w(a, -h, a, 0.0)) / (h * h)
        } else {
            (w(a, h, b, h) - w(a, h, b, -h) - w(a, -h, b, h) + w(a, -h, b, -h)) / (4.0 * h * h)
        }
    };
    let mut c = Matrix6::zeros();
    for a in 0..6 {
        for b in a..6 {
            let val = (4.0 * second(a, b, h / 2.0) - second(a, b, h)) / 3.0;
            c[(a, b)] = val;
            c[(b, a)] = val;
        }
    }
    c
}

pub fn random_field(m: &DefectModel, amp: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
    let mut x = m.zero_field();
    x.dofs.iter_mut().for_each(|v| *v = rng.gen_range(-amp..amp));
    x
}

fn slip_ops(m: &DefectModel) -> SlipOps {
    SlipOps {
        b12: m.domain.b12.expect("aligned Burgers vector"),
        burgers: m.pred.burgers,
        core: m.domain.core,
        lattice2d: m.lattice2d,
    }
}

/// Largest gap between `D̃_{(ραβ)}u(ℓ)` and
/// `D̃_ρu₀ + D̃_ρp_β + p_β − p_α` over all sites and triples for `n_fields`
/// random fields, with the number of slipped and plain evaluations.
/// `swap_branches` evaluates the identity with the wrong branch everywhere.
pub fn slip_identity_error(m: &DefectModel, n_fields: usize, seed: u64, swap_branches: bool) -> (f64, usize, usize) {
    let ops = slip_ops(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut slipped, mut plain) = (0.0f64, 0, 0);
    for _ in 0..n_fields {
        let x = random_field(m, 1.0, &mut rng);
        let d = &m.domain;
        let lookup = |n: [i64; 2]| d.index_of(n).and_then(|i| d.dof_index[i]);
        let u0 = |n: [i64; 2]| lookup(n).map_or(Vector3::zeros(), |k| x.u(k));
        for (i, &l) in d.sites.iter().enumerate() {
            let in_gamma = d.gamma[i];
            if in_gamma {
                slipped += 1;
            } else {
                plain += 1;
            }
            for (t, tr) in m.stencil.triples.iter().enumerate() {
                let pb = |n: [i64; 2]| lookup(n).map_or(Vector3::zeros(), |k| x.p(k, tr.beta));
                let pa = |n: [i64; 2]| lookup(n).map_or(Vector3::zeros(), |k| x.p(k, tr.alpha));
                let branch = in_gamma != swap_branches;
                let via = slipped_difference(&ops, branch, &u0, l, &[tr.n])
                    + slipped_difference(&ops, branch, &pb, l, &[tr.n])
                    + pb(l)
                    - pa(l);
                let direct = m.dtilde(&x, l, t).expect("site in domain");
                worst = worst.max((direct - via).amax());
            }
        }
    }
    (worst, slipped, plain)
}

/// Largest `|∂E/∂x_k − FD_k| / ‖∇E‖_∞` over `n` random interior DOFs at a
/// random perturbation of the predictor.
pub fn gradient_fd_error(m: &DefectModel, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_field(m, 0.02, &mut rng);
    let (_, g) = m.energy_and_gradient(&x).expect("energy");
    let h = 1e-5;
    let mut errs = Vec::with_capacity(n);
    let mut scale: f64 = 0.0;
    for _ in 0..n {
        let k = rng.gen_range(0..m.n_dofs());
        let mut xp = x.clone();
        xp.dofs[k] += h;
        let mut xm = x.clone();
        xm.dofs[k] -= h;
        let fd = (m.energy(&xp).expect("energy") - m.energy(&xm).expect("energy")) / (2.0 * h);
        errs.push((fd - g[k]).abs());
        scale = scale.max(g[k].abs());
    }
    errs.into_iter().fold(0.0, f64::max) / scale
}

/// Smooth periodic displacement on an `n × n` grid over `[0, 2π)²` with its
/// exact gradient in `F[i][j] ↦ 2i + j` order.
pub fn manufactured_displacement(n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let modes: [[(f64, f64, f64); 2]; 3] =
        [[(1.0, 2.0, 0.7), (3.0, -1.0, 0.2)], [(2.0, -1.0, 0.5), (1.0, 1.0, -0.3)], [(0.0, 1.0, 0.4), (2.0, 3.0, 0.1)]];
    let m = n * n;
    let mut u = vec![vec![0.0; m]; 3];
    let mut grad = vec![vec![0.0; m]; 6];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (2.0 * PI * i as f64 / n as f64, 2.0 * PI * j as f64 / n as f64);
            for c in 0..3 {
                for &(a, b, amp) in &modes[c] {
                    let arg = a * x + b * y + c as f64;
                    u[c][i * n + j] += amp * arg.sin();
                    grad[fidx(c, 0)][i * n + j] += amp * a * arg.cos();
                    grad[fidx(c, 1)][i * n + j] += amp * b * arg.cos();
                }
            }
        }
    }
    (u, grad)
}

pub fn toy() -> (Geometry, Box<dyn SitePotential>) {
    let g = Geometry::toy_edge().expect("toy geometry");
    let v = dislocore::potential::toy_pair_ml().bind(&g.ml, &g.stencil);
    (g, v)
}
