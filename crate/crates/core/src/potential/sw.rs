//! Stillinger–Weber potential split into per-atom energies: each pair term is
//! shared half-half by its endpoints and each three-body term belongs to its
//! apex atom. A projected site carries every atom of its basis.

#![allow(non_snake_case)]

use nalgebra::Vector3;

use super::{fd_hessian_blocks, symmetrize, HessBlock, SitePotential};
use crate::lattice::{InteractionStencil, ProjectedMultilattice};

#[derive(Clone, Debug, PartialEq)]
pub struct SwParams {
    /// eV
    pub epsilon: f64,
    /// Å
    pub sigma: f64,
    pub A: f64,
    pub B: f64,
    pub p: f64,
    pub q: f64,
    pub a: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Neighbours are bound when their reference distance is below
    /// `(1 + skin) · a σ`.
    pub skin: f64,
}

impl SwParams {
    pub fn silicon() -> Self {
        Self {
            epsilon: 2.1683,
            sigma: 2.0951,
            A: 7.049556277,
            B: 0.6022245584,
            p: 4.0,
            q: 0.0,
            a: 1.8,
            lambda: 21.0,
            gamma: 1.2,
            skin: 0.1,
        }
    }

    /// Pair-term minimum location in units of σ.
    pub fn pair_minimum(&self) -> f64 {
        let f = |r: f64| pair(self, 1.0, r).0;
        let (mut lo, mut hi) = (0.9, self.a - 1e-6);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let m1 = hi - g * (hi - lo);
            let m2 = lo + g * (hi - lo);
            if f(m1) < f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        0.5 * (lo + hi)
    }

    /// Diamond cube edge (Å) at which the nearest-neighbour bond sits at the
    /// pair minimum; the three-body term vanishes at the tetrahedral angle,
    /// so this is the stress-free lattice constant.
    pub fn equilibrium_lattice_constant(&self) -> f64 {
        4.0 * self.pair_minimum() * self.sigma / 3f64.sqrt()
    }

    pub fn bind(&self, ml: &ProjectedMultilattice, stencil: &InteractionStencil) -> SwSite {
        let unit = ml.parent.angstrom_per_unit;
        let sigma = self.sigma / unit;
        let rc = self.a * sigma;
        let reach = ((1.0 + self.skin) * rc).min(stencil.r_cut);
        let mut active = Vec::new();
        let mut ref_gaps = Vec::new();
        let mut neigh: Vec<Vec<(usize, Vector3<f64>)>> = vec![Vec::new(); ml.n_species()];
        for (t, tr) in stencil.triples.iter().enumerate() {
            let imgs: Vec<Vector3<f64>> = tr.images.iter().filter(|g| g.norm() <= reach).copied().collect();
            if imgs.is_empty() {
                continue;
            }
            let k = active.len();
            active.push(t);
            ref_gaps.push(tr.ref_gap);
            for r0 in imgs {
                neigh[tr.alpha].push((k, r0));
            }
        }
        SwSite { params: self.clone(), sigma, rc, active, ref_gaps, neigh }
    }
}

/// Pair energy and its radial derivative; `s` is σ in the length unit used.
fn pair(p: &SwParams, s: f64, r: f64) -> (f64, f64) {
    let rc = p.a * s;
    if r >= rc {
        return (0.0, 0.0);
    }
    let x = s / r;
    let xp = int_pow(x, p.p);
    let xq = int_pow(x, p.q);
    let f = p.A * p.epsilon * (p.B * xp - xq);
    let df = p.A * p.epsilon * (-p.p * p.B * xp + p.q * xq) / r;
    let d = r - rc;
    let e = (s / d).exp();
    let de = -e * s / (d * d);
    (f * e, df * e + f * de)
}

fn int_pow(x: f64, e: f64) -> f64 {
    if e == e.trunc() && e.abs() < 32.0 {
        x.powi(e as i32)
    } else {
        x.powf(e)
    }
}

#[derive(Clone, Debug)]
pub struct SwSite {
    pub params: SwParams,
    sigma: f64,
    rc: f64,
    active: Vec<usize>,
    ref_gaps: Vec<Vector3<f64>>,
    /// Per basis atom: (argument index, reference separation).
    neigh: Vec<Vec<(usize, Vector3<f64>)>>,
}

const MAX_NEIGH: usize = 64;

impl SwSite {
    pub fn n_atoms(&self) -> usize {
        self.neigh.len()
    }

    /// Energy of atom `a`; accumulates its gradient into `out` if given.
    fn atom(&self, a: usize, g: &[Vector3<f64>], mut out: Option<&mut [Vector3<f64>]>) -> f64 {
        let p = &self.params;
        let s = self.sigma;
        let rc = self.rc;
        let mut idx = [0usize; MAX_NEIGH];
        let mut vec = [Vector3::zeros(); MAX_NEIGH];
        let mut len = [0.0f64; MAX_NEIGH];
        let mut n = 0;
        for &(k, r0) in &self.neigh[a] {
            let r = r0 + g[k];
            let l = r.norm();
            if l < rc {
                assert!(n < MAX_NEIGH, "too many neighbours within the cutoff");
                idx[n] = k;
                vec[n] = r;
                len[n] = l;
                n += 1;
            }
        }
        let mut e = 0.0;
        for j in 0..n {
            let (v, dv) = pair(p, s, len[j]);
            e += 0.5 * v;
            if let Some(o) = out.as_deref_mut() {
                o[idx[j]] += vec[j] * (0.5 * dv / len[j]);
            }
        }
        let gs = p.gamma * s;
        let le = p.lambda * p.epsilon;
        for j in 0..n {
            let dj = len[j] - rc;
            let ej = gs / dj;
            for k in (j + 1)..n {
                let dk = len[k] - rc;
                let ex = (ej + gs / dk).exp();
                let inv = 1.0 / (len[j] * len[k]);
                let c = vec[j].dot(&vec[k]) * inv;
                let c3 = c + 1.0 / 3.0;
                let h = le * c3 * c3 * ex;
                e += h;
                if let Some(o) = out.as_deref_mut() {
                    let dhdc = 2.0 * le * c3 * ex;
                    let dcj = vec[k] * inv - vec[j] * (c / (len[j] * len[j]));
                    let dck = vec[j] * inv - vec[k] * (c / (len[k] * len[k]));
                    let radj = -h * gs / (dj * dj) / len[j];
                    let radk = -h * gs / (dk * dk) / len[k];
                    o[idx[j]] += dcj * dhdc + vec[j] * radj;
                    o[idx[k]] += dck * dhdc + vec[k] * radk;
                }
            }
        }
        e
    }

    /// Arguments read by atom `a`, sorted and unique.
    fn atom_args(&self, a: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.neigh[a].iter().map(|x| x.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

impl SitePotential for SwSite {
    fn active(&self) -> &[usize] {
        &self.active
    }

    fn cutoff(&self) -> f64 {
        self.rc
    }

    fn ref_gaps(&self) -> &[Vector3<f64>] {
        &self.ref_gaps
    }

    fn evaluate(&self, g: &[Vector3<f64>]) -> f64 {
        (0..self.neigh.len()).map(|a| self.atom(a, g, None)).sum()
    }

    fn d1(&self, g: &[Vector3<f64>], out: &mut [Vector3<f64>]) -> f64 {
        out.iter_mut().for_each(|o| *o = Vector3::zeros());
        (0..self.neigh.len()).map(|a| self.atom(a, g, Some(out))).sum()
    }

    fn d2(&self, g: &[Vector3<f64>]) -> Vec<HessBlock> {
        let mut blocks = Vec::new();
        for a in 0..self.neigh.len() {
            let args = self.atom_args(a);
            blocks.extend(fd_hessian_blocks(&args, g, 1e-4 * self.rc, |x, o| {
                o.iter_mut().for_each(|v| *v = Vector3::zeros());
                self.atom(a, x, Some(o));
            }));
        }
        symmetrize(blocks)
    }
}
