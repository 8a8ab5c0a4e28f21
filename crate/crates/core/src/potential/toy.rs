//! Morse pair potential on the square 2-lattice with a harmonic penalty on
//! the intra-cell gap. Every bond is slightly stretched so that the lattice
//! carries tension and the out-of-plane modes are stable.

use nalgebra::{Matrix3, Vector3};

use super::{HessBlock, SitePotential};
use crate::lattice::InteractionStencil;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyParams {
    /// Well depth; a negative value produces an unstable lattice.
    pub depth: f64,
    pub stiffness: f64,
    /// Equilibrium distance for same-species bonds.
    pub r_same: f64,
    /// Equilibrium distance for cross-species bonds.
    pub r_cross: f64,
    /// Harmonic coefficient on the `(0, α, β)` gap.
    pub k_cell: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self { depth: 1.0, stiffness: 2.0, r_same: 0.95, r_cross: 0.68, k_cell: 0.5 }
    }
}

impl ToyParams {
    pub fn sign_flipped() -> Self {
        Self { depth: -1.0, ..Self::default() }
    }

    pub fn bind(&self, stencil: &InteractionStencil) -> ToySite {
        let mut active = Vec::new();
        let mut terms = Vec::new();
        let mut ref_gaps = Vec::new();
        for (t, tr) in stencil.triples.iter().enumerate() {
            if !tr.coupled() {
                continue;
            }
            active.push(t);
            ref_gaps.push(tr.ref_gap);
            terms.push(ToyTerm {
                r0: tr.images[0],
                r_eq: if tr.alpha == tr.beta { self.r_same } else { self.r_cross },
                cell: tr.n == [0, 0],
            });
        }
        ToySite { params: self.clone(), cutoff: stencil.r_cut, active, ref_gaps, terms }
    }

    /// Morse energy and its first two radial derivatives.
    fn morse(&self, r: f64, r_eq: f64) -> (f64, f64, f64) {
        let a = self.stiffness;
        let x = (-a * (r - r_eq)).exp();
        let d = self.depth;
        let v = d * ((1.0 - x) * (1.0 - x) - 1.0);
        let dv = 2.0 * d * a * x * (1.0 - x);
        let ddv = 2.0 * d * a * a * x * (2.0 * x - 1.0);
        (v, dv, ddv)
    }
}

#[derive(Clone, Debug)]
struct ToyTerm {
    r0: Vector3<f64>,
    r_eq: f64,
    cell: bool,
}

#[derive(Clone, Debug)]
pub struct ToySite {
    pub params: ToyParams,
    cutoff: f64,
    active: Vec<usize>,
    ref_gaps: Vec<Vector3<f64>>,
    terms: Vec<ToyTerm>,
}

impl SitePotential for ToySite {
    fn active(&self) -> &[usize] {
        &self.active
    }

    fn cutoff(&self) -> f64 {
        self.cutoff
    }

    fn ref_gaps(&self) -> &[Vector3<f64>] {
        &self.ref_gaps
    }

    fn evaluate(&self, g: &[Vector3<f64>]) -> f64 {
        let mut e = 0.0;
        for (t, term) in self.terms.iter().enumerate() {
            let r = (term.r0 + g[t]).norm();
            e += 0.5 * self.params.morse(r, term.r_eq).0;
            if term.cell {
                e += 0.25 * self.params.k_cell * g[t].norm_squared();
            }
        }
        e
    }

    fn d1(&self, g: &[Vector3<f64>], out: &mut [Vector3<f64>]) -> f64 {
        let mut e = 0.0;
        for (t, term) in self.terms.iter().enumerate() {
            let rv = term.r0 + g[t];
            let r = rv.norm();
            let (v, dv, _) = self.params.morse(r, term.r_eq);
            e += 0.5 * v;
            out[t] = rv * (0.5 * dv / r);
            if term.cell {
                e += 0.25 * self.params.k_cell * g[t].norm_squared();
                out[t] += g[t] * (0.5 * self.params.k_cell);
            }
        }
        e
    }

    fn d2(&self, g: &[Vector3<f64>]) -> Vec<HessBlock> {
        let mut out = Vec::with_capacity(self.terms.len());
        for (t, term) in self.terms.iter().enumerate() {
            let rv = term.r0 + g[t];
            let r = rv.norm();
            let (_, dv, ddv) = self.params.morse(r, term.r_eq);
            let u = rv / r;
            let uu = u * u.transpose();
            let mut m = (uu * ddv + (Matrix3::identity() - uu) * (dv / r)) * 0.5;
            if term.cell {
                m += Matrix3::identity() * (0.5 * self.params.k_cell);
            }
            out.push(HessBlock { i: t, j: t, m });
        }
        out
    }
}
