//! Site potentials on an interaction stencil.
//!
//! Arguments are displacement differences `g_t = u_β(ℓ+ρ) − u_α(ℓ)` for the
//! potential's active triples, so `g = 0` is the reference configuration and
//! the reference separations live inside the bound potential.

pub mod sw;
pub mod toy;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::lattice::{InteractionStencil, ProjectedMultilattice};

pub use sw::SwParams;
pub use toy::ToyParams;

/// A nonzero second-derivative block `∂²V / ∂g_i ∂g_j` (rows follow `i`).
#[derive(Clone, Debug)]
pub struct HessBlock {
    pub i: usize,
    pub j: usize,
    pub m: Matrix3<f64>,
}

pub trait SitePotential: Send + Sync {
    /// Stencil indices of the triples read by this potential, in argument order.
    fn active(&self) -> &[usize];
    /// Interaction cutoff in lattice units.
    fn cutoff(&self) -> f64;
    fn evaluate(&self, g: &[Vector3<f64>]) -> f64;
    /// Writes the gradient into `out` and returns the energy.
    fn d1(&self, g: &[Vector3<f64>], out: &mut [Vector3<f64>]) -> f64;
    /// All nonzero Hessian blocks, both `(i, j)` and `(j, i)`.
    fn d2(&self, g: &[Vector3<f64>]) -> Vec<HessBlock>;
    /// Reference separation of each active argument (shortest image).
    fn ref_gaps(&self) -> &[Vector3<f64>];
}

#[derive(Clone, Debug, PartialEq)]
pub enum Potential {
    StillingerWeber(SwParams),
    Toy(ToyParams),
}

impl Potential {
    pub fn name(&self) -> &'static str {
        match self {
            Potential::StillingerWeber(_) => "sw-si",
            Potential::Toy(_) => "toy",
        }
    }

    pub fn bind(&self, ml: &ProjectedMultilattice, stencil: &InteractionStencil) -> Box<dyn SitePotential> {
        match self {
            Potential::StillingerWeber(p) => Box::new(p.bind(ml, stencil)),
            Potential::Toy(p) => Box::new(p.bind(stencil)),
        }
    }
}

/// Stillinger–Weber silicon with the original parameters.
pub fn sw_silicon() -> Potential {
    Potential::StillingerWeber(SwParams::silicon())
}

/// Two-species Morse test potential on the square 2-lattice.
pub fn toy_pair_ml() -> Potential {
    Potential::Toy(ToyParams::default())
}

#[derive(Clone, Debug)]
pub struct ReferenceState {
    pub energy_per_site: f64,
    /// Net force on each species shift at the reference, per basis atom.
    pub shift_force: Vec<Vector3<f64>>,
}

impl ReferenceState {
    pub fn max_shift_force(&self) -> f64 {
        self.shift_force.iter().map(|f| f.norm()).fold(0.0, f64::max)
    }
}

pub fn reference_state(v: &dyn SitePotential, stencil: &InteractionStencil) -> ReferenceState {
    let n = v.active().len();
    let g = vec![Vector3::zeros(); n];
    let mut d = vec![Vector3::zeros(); n];
    let e = v.d1(&g, &mut d);
    let mut shift_force = vec![Vector3::zeros(); stencil.n_species];
    for (k, &t) in v.active().iter().enumerate() {
        let tr = &stencil.triples[t];
        shift_force[tr.beta] += d[k];
        shift_force[tr.alpha] -= d[k];
    }
    ReferenceState { energy_per_site: e, shift_force }
}

/// Defect site energy `V(e + du) − V(e)`.
pub fn v_ell(v: &dyn SitePotential, e: &[Vector3<f64>], du: &[Vector3<f64>]) -> Result<f64> {
    let limit = 3.0 * v.cutoff();
    let g: Vec<Vector3<f64>> = e.iter().zip(du).map(|(a, b)| a + b).collect();
    for (k, r0) in v.ref_gaps().iter().enumerate() {
        let len = (r0 + g[k]).norm();
        if len > limit {
            return Err(Error::DomainEscape { site: 0, len });
        }
    }
    Ok(v.evaluate(&g) - v.evaluate(e))
}

/// Hessian blocks by Richardson-extrapolated central differences of a
/// gradient restricted to the arguments `args`.
pub(crate) fn fd_hessian_blocks(
    args: &[usize],
    g: &[Vector3<f64>],
    h: f64,
    mut grad: impl FnMut(&[Vector3<f64>], &mut [Vector3<f64>]),
) -> Vec<HessBlock> {
    let n = g.len();
    let mut x = g.to_vec();
    let mut gp = vec![Vector3::zeros(); n];
    let mut gm = vec![Vector3::zeros(); n];
    let mut cols: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(3 * args.len());
    for &j in args {
        for c in 0..3 {
            let mut diff = |step: f64, x: &mut Vec<Vector3<f64>>| {
                x[j][c] = g[j][c] + step;
                grad(x, &mut gp);
                x[j][c] = g[j][c] - step;
                grad(x, &mut gm);
                x[j][c] = g[j][c];
                args.iter().map(|&i| (gp[i] - gm[i]) / (2.0 * step)).collect::<Vec<_>>()
            };
            let d1 = diff(h, &mut x);
            let d2 = diff(0.5 * h, &mut x);
            cols.push(d1.iter().zip(&d2).map(|(a, b)| (b * 4.0 - a) / 3.0).collect());
        }
    }
    let mut out = Vec::new();
    for (bj, &j) in args.iter().enumerate() {
        for (bi, &i) in args.iter().enumerate() {
            let mut m = Matrix3::zeros();
            for c in 0..3 {
                m.set_column(c, &cols[3 * bj + c][bi]);
            }
            if m.iter().any(|v| *v != 0.0) {
                out.push(HessBlock { i, j, m });
            }
        }
    }
    out
}

/// Symmetrizes a block list so that block `(j, i)` is the transpose of `(i, j)`.
pub(crate) fn symmetrize(blocks: Vec<HessBlock>) -> Vec<HessBlock> {
    use std::collections::BTreeMap;
    let mut map: BTreeMap<(usize, usize), Matrix3<f64>> = BTreeMap::new();
    for b in blocks {
        *map.entry((b.i, b.j)).or_insert_with(Matrix3::zeros) += b.m;
    }
    let keys: Vec<(usize, usize)> = map.keys().copied().collect();
    let mut out = Vec::with_capacity(keys.len());
    for (i, j) in keys {
        let a = map[&(i, j)];
        let b = map.get(&(j, i)).copied().unwrap_or_else(Matrix3::zeros);
        out.push(HessBlock { i, j, m: (a + b.transpose()) * 0.5 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{Geometry, MultilatticeSpec, SILICON_R_CUT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn silicon() -> (Geometry, Box<dyn SitePotential>) {
        let g = Geometry::silicon_edge(SILICON_R_CUT).unwrap();
        let v = sw_silicon().bind(&g.ml, &g.stencil);
        (g, v)
    }

    fn toy() -> (Geometry, Box<dyn SitePotential>) {
        let g = Geometry::toy_edge().unwrap();
        let v = toy_pair_ml().bind(&g.ml, &g.stencil);
        (g, v)
    }

    fn random_args(n: usize, amp: f64, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vector3::from_fn(|_, _| amp * (2.0 * rng.gen::<f64>() - 1.0))).collect()
    }

    /// Per-atom SW energy of ideal diamond by direct summation over neighbours.
    fn diamond_energy_per_atom(a0: f64) -> f64 {
        let p = SwParams::silicon();
        let (eps, s) = (p.epsilon, p.sigma);
        let rc = p.a * s;
        let mut neigh = Vec::new();
        for i in -3i64..=3 {
            for j in -3i64..=3 {
                for k in -3i64..=3 {
                    for basis in [Vector3::zeros(), Vector3::new(0.25, 0.25, 0.25)] {
                        let fcc = Vector3::new((j + k) as f64, (i + k) as f64, (i + j) as f64) * 0.5;
                        let r = (fcc + basis) * a0;
                        if r.norm() > 1e-9 && r.norm() < rc {
                            neigh.push(r);
                        }
                    }
                }
            }
        }
        let f2 = |r: f64| p.A * (p.B * (s / r).powi(4) - 1.0) * (s / (r - rc)).exp();
        let mut e = 0.0;
        for r in &neigh {
            e += 0.5 * eps * f2(r.norm());
        }
        for (j, rj) in neigh.iter().enumerate() {
            for rk in &neigh[j + 1..] {
                let c = rj.dot(rk) / (rj.norm() * rk.norm());
                e += eps
                    * p.lambda
                    * (c + 1.0 / 3.0).powi(2)
                    * (p.gamma * s / (rj.norm() - rc) + p.gamma * s / (rk.norm() - rc)).exp();
            }
        }
        e
    }

    #[test]
    fn silicon_site_energy_is_the_cohesive_energy() {
        let (g, v) = silicon();
        let e = v.evaluate(&vec![Vector3::zeros(); v.active().len()]);
        let per_atom = e / g.ml.n_species() as f64;
        let oracle = diamond_energy_per_atom(MultilatticeSpec::silicon().angstrom_per_unit);
        assert!((per_atom - oracle).abs() < 1e-10 * oracle.abs(), "{per_atom} vs {oracle}");
        assert!((per_atom + 4.3363).abs() < 1e-3, "{per_atom}");
    }

    #[test]
    fn stretched_beyond_cutoff_has_no_energy() {
        let (geo, v) = silicon();
        let r0 = v.ref_gaps();
        let images: Vec<&Vec<Vector3<f64>>> = v.active().iter().map(|&t| &geo.stencil.triples[t].images).collect();
        let shortest_after = |s: f64| {
            images
                .iter()
                .zip(r0)
                .flat_map(|(imgs, r)| imgs.iter().map(move |i| (i + r * (s - 1.0)).norm()))
                .fold(f64::INFINITY, f64::min)
        };
        let mut scale = 1.5;
        while shortest_after(scale) <= v.cutoff() {
            scale *= 1.1;
        }
        let g: Vec<Vector3<f64>> = r0.iter().map(|r| r * (scale - 1.0)).collect();
        assert_eq!(v.evaluate(&g), 0.0);
    }

    fn check_gradient(v: &dyn SitePotential, seed: u64) {
        let g = random_args(v.active().len(), 0.01, seed);
        let mut d = vec![Vector3::zeros(); g.len()];
        v.d1(&g, &mut d);
        let scale = d.iter().map(|x| x.amax()).fold(0.0, f64::max);
        let h = 1e-5;
        let mut x = g.clone();
        let mut worst: f64 = 0.0;
        for k in 0..g.len() {
            for c in 0..3 {
                x[k][c] = g[k][c] + h;
                let ep = v.evaluate(&x);
                x[k][c] = g[k][c] - h;
                let em = v.evaluate(&x);
                x[k][c] = g[k][c];
                worst = worst.max(((ep - em) / (2.0 * h) - d[k][c]).abs() / scale);
            }
        }
        assert!(worst < 1e-6, "relative gradient error {worst:.3e}");
    }

    #[test]
    fn gradients_match_central_differences() {
        check_gradient(silicon().1.as_ref(), 1);
        check_gradient(toy().1.as_ref(), 2);
    }

    fn check_hessian(v: &dyn SitePotential, seed: u64, tol: f64) {
        let n = v.active().len();
        let g = random_args(n, 0.01, seed);
        let blocks = v.d2(&g);
        let mut dense = vec![vec![Matrix3::zeros(); n]; n];
        for b in &blocks {
            dense[b.i][b.j] += b.m;
        }
        let scale = blocks.iter().map(|b| b.m.amax()).fold(0.0, f64::max);
        let h = 1e-5;
        let mut x = g.clone();
        let mut dp = vec![Vector3::zeros(); n];
        let mut dm = vec![Vector3::zeros(); n];
        let mut worst: f64 = 0.0;
        for j in 0..n {
            for c in 0..3 {
                x[j][c] = g[j][c] + h;
                v.d1(&x, &mut dp);
                x[j][c] = g[j][c] - h;
                v.d1(&x, &mut dm);
                x[j][c] = g[j][c];
                for i in 0..n {
                    let col = (dp[i] - dm[i]) / (2.0 * h);
                    worst = worst.max((col - dense[i][j].column(c)).amax() / scale);
                }
            }
        }
        assert!(worst < tol, "relative Hessian error {worst:.3e}");
    }

    #[test]
    fn hessians_match_differences_of_gradients() {
        check_hessian(toy().1.as_ref(), 3, 1e-5);
        check_hessian(silicon().1.as_ref(), 4, 1e-5);
    }

    #[test]
    fn reference_states_are_equilibria() {
        let (g, v) = silicon();
        assert!(reference_state(v.as_ref(), &g.stencil).max_shift_force() < 1e-8);
        let (g, v) = toy();
        assert!(reference_state(v.as_ref(), &g.stencil).max_shift_force() < 1e-10);
    }

    #[test]
    fn pair_potential_is_point_symmetric() {
        let (g, v) = toy();
        let args = random_args(v.active().len(), 0.05, 5);
        let pos: HashMap<usize, usize> = v.active().iter().enumerate().map(|(k, &t)| (t, k)).collect();
        let flipped: Vec<Vector3<f64>> = v.active().iter().map(|&t| -args[pos[&g.stencil.reverse(t)]]).collect();
        assert!((v.evaluate(&args) - v.evaluate(&flipped)).abs() < 1e-13);
    }

    #[test]
    fn defect_site_energy_reductions_and_taylor_remainder() {
        let (_, v) = silicon();
        let n = v.active().len();
        let e = random_args(n, 0.02, 6);
        let zero = vec![Vector3::zeros(); n];
        assert_eq!(v_ell(v.as_ref(), &e, &zero).unwrap(), 0.0);
        let du = random_args(n, 0.01, 7);
        let direct = v.evaluate(&du) - v.evaluate(&zero);
        assert!((v_ell(v.as_ref(), &zero, &du).unwrap() - direct).abs() < 1e-12);

        let mut grad = vec![Vector3::zeros(); n];
        v.d1(&e, &mut grad);
        let blocks = v.d2(&e);
        let remainder = |amp: f64| {
            let d: Vec<Vector3<f64>> = du.iter().map(|x| x * (amp / 0.01)).collect();
            let lin: f64 = grad.iter().zip(&d).map(|(a, b)| a.dot(b)).sum();
            let quad: f64 = blocks.iter().map(|b| d[b.i].dot(&(b.m * d[b.j]))).sum();
            (v_ell(v.as_ref(), &e, &d).unwrap() - lin - 0.5 * quad).abs()
        };
        // Third-order remainder: a tenfold smaller step shrinks it about 1000×.
        let ratio = remainder(1e-1) / remainder(1e-2);
        assert!(ratio > 300.0 && ratio < 3000.0, "{ratio}");

        let far: Vec<Vector3<f64>> = v.ref_gaps().iter().map(|r| r * 5.0).collect();
        assert!(matches!(v_ell(v.as_ref(), &zero, &far), Err(Error::DomainEscape { .. })));
    }

    #[test]
    fn fourth_differences_are_bounded() {
        for (_, v) in [silicon(), toy()] {
            let n = v.active().len();
            let g = random_args(n, 0.01, 8);
            let dir = random_args(n, 1.0, 9);
            let at = |t: f64| v.evaluate(&g.iter().zip(&dir).map(|(a, d)| a + d * t).collect::<Vec<_>>());
            let d4 = |h: f64| (at(2.0 * h) - 4.0 * at(h) + 6.0 * at(0.0) - 4.0 * at(-h) + at(-2.0 * h)) / h.powi(4);
            let (coarse, fine) = (d4(1e-2), d4(5e-3));
            assert!((coarse - fine).abs() < 0.2 * coarse.abs().max(fine.abs()), "{coarse} {fine}");
        }
    }
}
