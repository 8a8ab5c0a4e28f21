//! The dislocation energy on a clamped finite domain, its gradient, slip
//! operators, slipped differences and the a₁ seminorm.
//!
//! Degrees of freedom live on interior sites only, `3S` per site laid out as
//! `[U, p₁, …, p_{S−1}]`; species `γ` moves by `u_γ = U + p_γ` with `p₀ = 0`.
//! All sums use fixed-size chunks and an ordered compensated reduction, so
//! results do not depend on the thread count.

use std::io::Write;
use std::sync::Mutex;

use log::warn;
use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::cbmodel::{cb_derivatives, elastic_tensor, CbDerivatives, ElasticTensor};
use crate::error::{Error, Result};
use crate::lattice::{Domain, Geometry, InteractionStencil, ProjectedMultilattice};
use crate::potential::{Potential, SitePotential};
use crate::predictor::{default_r_hat, elastic_strains, CleSolution, PredictorField, SiteValues, TensorSource, Zeta};

const CHUNK: usize = 128;
const CLAMPED: u32 = u32::MAX;

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Corrector displacements on the interior sites of a domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub n_species: usize,
    pub dofs: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(n_sites: usize, n_species: usize) -> Self {
        Self { n_species, dofs: vec![0.0; 3 * n_species * n_sites] }
    }

    pub fn n_sites(&self) -> usize {
        self.dofs.len() / (3 * self.n_species)
    }

    #[inline]
    fn v3(&self, k: usize) -> Vector3<f64> {
        Vector3::new(self.dofs[k], self.dofs[k + 1], self.dofs[k + 2])
    }

    pub fn u(&self, site: usize) -> Vector3<f64> {
        self.v3(site * 3 * self.n_species)
    }

    /// Shift of species `alpha` relative to species 0.
    pub fn p(&self, site: usize, alpha: usize) -> Vector3<f64> {
        if alpha == 0 {
            Vector3::zeros()
        } else {
            self.v3((site * self.n_species + alpha) * 3)
        }
    }

    /// `u_α = U + p_α`.
    #[inline]
    pub fn atom(&self, site: usize, alpha: usize) -> Vector3<f64> {
        let base = site * 3 * self.n_species;
        let mut v = self.v3(base);
        if alpha > 0 {
            v += self.v3(base + 3 * alpha);
        }
        v
    }

    pub fn set_u(&mut self, site: usize, v: Vector3<f64>) {
        let b = site * 3 * self.n_species;
        self.dofs[b..b + 3].copy_from_slice(v.as_slice());
    }

    pub fn set_p(&mut self, site: usize, alpha: usize, v: Vector3<f64>) {
        assert!(alpha > 0, "species 0 carries no shift");
        let b = (site * self.n_species + alpha) * 3;
        self.dofs[b..b + 3].copy_from_slice(v.as_slice());
    }
}

/// Negative energy gradient in the `[U, p₁ …]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceField {
    pub n_species: usize,
    pub f: Vec<f64>,
}

impl ForceField {
    fn v3(&self, k: usize) -> Vector3<f64> {
        Vector3::new(self.f[k], self.f[k + 1], self.f[k + 2])
    }

    /// Force on the shift of species `alpha ≥ 1`.
    pub fn shift(&self, site: usize, alpha: usize) -> Vector3<f64> {
        self.v3((site * self.n_species + alpha) * 3)
    }

    /// Force on atom `γ`; the shift force equals the atom force for `γ ≥ 1`
    /// and the `U` force is the sum over all species.
    pub fn species_force(&self, site: usize, gamma: usize) -> Vector3<f64> {
        if gamma > 0 {
            return self.shift(site, gamma);
        }
        let mut f = self.net(site);
        for a in 1..self.n_species {
            f -= self.shift(site, a);
        }
        f
    }

    /// Net site force `Σ_γ f_γ`.
    pub fn net(&self, site: usize) -> Vector3<f64> {
        self.v3(site * 3 * self.n_species)
    }

    pub fn max_species(&self, site: usize) -> f64 {
        (0..self.n_species).map(|g| self.species_force(site, g).norm()).fold(0.0, f64::max)
    }

    pub fn inf_norm(&self) -> f64 {
        self.f.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Net site force at interior site `site`.
pub fn net_site_force(ff: &ForceField, site: usize) -> Result<Vector3<f64>> {
    if (site + 1) * 3 * ff.n_species > ff.f.len() {
        return Err(Error::OutOfDomain([site as i64, 0]));
    }
    Ok(ff.net(site))
}

/// Slip relabelings on lattice functions for a frame with `b₁₂ ∈ Λ`.
#[derive(Clone, Debug)]
pub struct SlipOps {
    pub b12: [i64; 2],
    pub burgers: Vector3<f64>,
    pub core: Vector2<f64>,
    pub lattice2d: Matrix2<f64>,
}

impl SlipOps {
    pub fn new(ml: &ProjectedMultilattice) -> Result<Self> {
        let b12v = ml.frame.b12();
        let b12 = if b12v.norm() < 1e-10 { Some([0, 0]) } else { ml.lattice_coords(&b12v) };
        let b12 = b12.ok_or(Error::MisalignedBurgers)?;
        Ok(Self { b12, burgers: ml.frame.burgers, core: ml.frame.core, lattice2d: ml.lattice2d })
    }

    pub fn below(&self, l: [i64; 2]) -> bool {
        (self.lattice2d * Vector2::new(l[0] as f64, l[1] as f64)).y < self.core.y
    }

    /// `(Su)(ℓ) = u(ℓ − b₁₂)` below the cut plane, `u(ℓ)` above.
    pub fn s<T>(&self, u: impl Fn([i64; 2]) -> T, l: [i64; 2]) -> T {
        if self.below(l) {
            u([l[0] - self.b12[0], l[1] - self.b12[1]])
        } else {
            u(l)
        }
    }

    /// `(Ru)(ℓ) = u(ℓ + b₁₂)` below the cut plane, `u(ℓ)` above.
    pub fn r<T>(&self, u: impl Fn([i64; 2]) -> T, l: [i64; 2]) -> T {
        if self.below(l) {
            u([l[0] + self.b12[0], l[1] + self.b12[1]])
        } else {
            u(l)
        }
    }

    /// `(S₀w)_α(ℓ) = w_α(ℓ − b₁₂) − b` below the cut plane.
    pub fn s0(&self, w: impl Fn([i64; 2]) -> Vector3<f64>, l: [i64; 2]) -> Vector3<f64> {
        if self.below(l) {
            w([l[0] - self.b12[0], l[1] - self.b12[1]]) - self.burgers
        } else {
            w(l)
        }
    }
}

/// Admissibility thresholds: strains and shifts stay below `m_a`, and below
/// one half beyond radius `r_a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmissibilityConfig {
    pub m_a: f64,
    pub r_a: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmissibilityReport {
    pub max_strain: f64,
    pub max_shift: f64,
    pub far_max_strain: f64,
    pub far_max_shift: f64,
    pub admissible: bool,
}

/// Geometry, potential, Cauchy–Born data and predictor shared by all
/// domain sizes of one dislocation setup.
pub struct Setup {
    pub geom: Geometry,
    pub potential: Potential,
    pub cbd: CbDerivatives,
    pub tensor: ElasticTensor,
    pub pred: PredictorField,
}

impl Setup {
    pub fn new(geom: Geometry, potential: Potential, source: TensorSource, r_hat: Option<f64>) -> Result<Self> {
        let v = potential.bind(&geom.ml, &geom.stencil);
        let cbd = cb_derivatives(v.as_ref(), &geom.stencil);
        let tensor = elastic_tensor(&cbd)?;
        let r_hat = r_hat.unwrap_or_else(|| default_r_hat(&geom.frame.burgers));
        let pred = PredictorField::for_geometry(&geom, &cbd, &tensor, source, r_hat)?;
        Ok(Self { geom, potential, cbd, tensor, pred })
    }

    /// Defect-free setup: zero Burgers vector and zero predictor.
    pub fn reference(geom: &Geometry, potential: Potential, r_hat: f64) -> Result<Self> {
        let geom = geom.without_defect();
        let v = potential.bind(&geom.ml, &geom.stencil);
        let cbd = cb_derivatives(v.as_ref(), &geom.stencil);
        let tensor = elastic_tensor(&cbd)?;
        let pred = PredictorField {
            cle: CleSolution::zero(geom.frame.core),
            zeta: Zeta::new(Vector2::zeros(), geom.frame.core, r_hat)?,
            shift_map: cbd.shift_map()?,
            n_species: cbd.n_species,
            burgers: Vector3::zeros(),
            r_hat,
        };
        Ok(Self { geom, potential, cbd, tensor, pred })
    }

    pub fn model(&self, radius: f64) -> Result<DefectModel> {
        let v = self.potential.bind(&self.geom.ml, &self.geom.stencil);
        DefectModel::new(&self.geom, v, self.pred.clone(), radius)
    }
}

/// Energy model of one clamped domain.
pub struct DefectModel {
    pub stencil: InteractionStencil,
    pub domain: Domain,
    pub lattice2d: Matrix2<f64>,
    pub pred: PredictorField,
    pub potential: Box<dyn SitePotential>,
    /// Stored sites whose slipped stencil reaches an interior site.
    pub active_sites: Vec<usize>,
    pub admissibility: AdmissibilityConfig,
    n_args: usize,
    arg_species: Vec<[usize; 2]>,
    /// Per `(active site, argument)`: interior index of the α and β ends.
    ends: Vec<[u32; 2]>,
    /// Elastic strains per `(active site, argument)`.
    strain: Vec<Vector3<f64>>,
    /// `V(e(ℓ))` per active site.
    v_ref: Vec<f64>,
    gather_offsets: Vec<usize>,
    /// `(flat argument index) << 1 | end`.
    gather: Vec<u32>,
    scratch: Mutex<Vec<Vector3<f64>>>,
}

impl DefectModel {
    pub fn new(geom: &Geometry, potential: Box<dyn SitePotential>, pred: PredictorField, radius: f64) -> Result<Self> {
        let domain = geom.domain(radius, pred.r_hat)?;
        if domain.b12.is_none() {
            return Err(Error::MisalignedBurgers);
        }
        let stencil = geom.stencil.clone();
        let active_triples: Vec<usize> = potential.active().to_vec();
        let n_args = active_triples.len();
        let arg_species: Vec<[usize; 2]> =
            active_triples.iter().map(|&t| [stencil.triples[t].alpha, stencil.triples[t].beta]).collect();

        let dof =
            |n: [i64; 2]| -> u32 { domain.index_of(n).and_then(|i| domain.dof_index[i]).map_or(CLAMPED, |d| d as u32) };
        let mut active_sites = Vec::new();
        let mut ends = Vec::new();
        for i in 0..domain.len() {
            let a = dof(domain.sites[i]);
            let site_ends: Vec<[u32; 2]> = active_triples
                .iter()
                .map(|&t| {
                    let tr = &stencil.triples[t];
                    let (m, _, _) = domain.slip_target(i, tr.n, &tr.rho);
                    [a, dof(m)]
                })
                .collect();
            if site_ends.iter().any(|e| e[0] != CLAMPED || e[1] != CLAMPED) {
                active_sites.push(i);
                ends.extend(site_ends);
            }
        }

        let vals = SiteValues::new(&pred, &domain, geom.ml.lattice2d)?;
        let strain: Vec<Vector3<f64>> =
            elastic_strains(&vals, &stencil, &active_sites, &active_triples)?.into_iter().flatten().collect();
        let v_ref: Vec<f64> = active_sites
            .par_iter()
            .enumerate()
            .map(|(a, _)| potential.evaluate(&strain[a * n_args..(a + 1) * n_args]))
            .collect();

        let n_int = domain.n_interior();
        let mut counts = vec![0usize; n_int + 1];
        for e in &ends {
            for &d in e {
                if d != CLAMPED {
                    counts[d as usize + 1] += 1;
                }
            }
        }
        for k in 0..n_int {
            counts[k + 1] += counts[k];
        }
        let gather_offsets = counts.clone();
        let mut fill = counts;
        let mut gather = vec![0u32; gather_offsets[n_int]];
        for (flat, e) in ends.iter().enumerate() {
            for (end, &d) in e.iter().enumerate() {
                if d != CLAMPED {
                    gather[fill[d as usize]] = ((flat as u32) << 1) | end as u32;
                    fill[d as usize] += 1;
                }
            }
        }
        let admissibility = AdmissibilityConfig { m_a: 0.4, r_a: 2.0 * pred.r_hat };
        let scratch = Mutex::new(vec![Vector3::zeros(); ends.len()]);
        Ok(Self {
            stencil,
            domain,
            lattice2d: geom.ml.lattice2d,
            pred,
            potential,
            active_sites,
            admissibility,
            n_args,
            arg_species,
            ends,
            strain,
            v_ref,
            gather_offsets,
            gather,
            scratch,
        })
    }

    pub fn n_species(&self) -> usize {
        self.stencil.n_species
    }

    /// `Σ_ℓ |V(e(ℓ))|`, the magnitude that sets the rounding error of energies.
    pub fn energy_scale(&self) -> f64 {
        self.v_ref.iter().map(|v| v.abs()).sum()
    }

    pub fn n_interior(&self) -> usize {
        self.domain.n_interior()
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.n_species() * self.n_interior()
    }

    pub fn zero_field(&self) -> DisplacementField {
        DisplacementField::zeros(self.n_interior(), self.n_species())
    }

    /// Elastic strains of the potential's arguments at active site slot `a`.
    pub fn strains(&self, a: usize) -> &[Vector3<f64>] {
        &self.strain[a * self.n_args..(a + 1) * self.n_args]
    }

    #[inline]
    fn end_value(&self, x: &DisplacementField, d: u32, species: usize) -> Vector3<f64> {
        if d == CLAMPED {
            Vector3::zeros()
        } else {
            x.atom(d as usize, species)
        }
    }

    fn site_args(&self, x: &DisplacementField, a: usize, g: &mut [Vector3<f64>]) -> Result<()> {
        let limit = 3.0 * self.potential.cutoff();
        let r0 = self.potential.ref_gaps();
        for k in 0..self.n_args {
            let [da, db] = self.ends[a * self.n_args + k];
            let [sa, sb] = self.arg_species[k];
            g[k] = self.strain[a * self.n_args + k] + self.end_value(x, db, sb) - self.end_value(x, da, sa);
            let len = (r0[k] + g[k]).norm();
            if !(len <= limit) {
                return Err(Error::DomainEscape { site: self.active_sites[a], len });
            }
        }
        Ok(())
    }

    fn check_len(&self, x: &DisplacementField) -> Result<()> {
        if x.dofs.len() != self.n_dofs() || x.n_species != self.n_species() {
            return Err(Error::Invalid(format!("field has {} dofs, model expects {}", x.dofs.len(), self.n_dofs())));
        }
        Ok(())
    }

    /// `Σ_ℓ V(e(ℓ) + D̃u(ℓ)) − V(e(ℓ))` over the active sites.
    pub fn energy(&self, x: &DisplacementField) -> Result<f64> {
        self.check_len(x)?;
        let n = self.active_sites.len();
        let idx: Vec<usize> = (0..n).collect();
        let parts: Vec<Result<KahanSum>> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![Vector3::zeros(); self.n_args];
                let mut s = KahanSum::default();
                for &a in chunk {
                    self.site_args(x, a, &mut g)?;
                    s.add(self.potential.evaluate(&g) - self.v_ref[a]);
                }
                Ok(s)
            })
            .collect();
        let mut total = KahanSum::default();
        for p in parts {
            let p = p?;
            total.add(p.sum);
            total.add(p.comp);
        }
        Ok(total.value())
    }

    /// Site energies `V_ℓ(u)` of the active sites, in active-site order.
    pub fn site_energies(&self, x: &DisplacementField) -> Result<Vec<f64>> {
        self.check_len(x)?;
        (0..self.active_sites.len())
            .into_par_iter()
            .map(|a| {
                let mut g = vec![Vector3::zeros(); self.n_args];
                self.site_args(x, a, &mut g)?;
                Ok(self.potential.evaluate(&g) - self.v_ref[a])
            })
            .collect()
    }

    /// Energy and its gradient with respect to the degrees of freedom.
    pub fn energy_and_gradient(&self, x: &DisplacementField) -> Result<(f64, Vec<f64>)> {
        self.check_len(x)?;
        let na = self.n_args;
        let mut dv = self.scratch.lock().unwrap_or_else(|e| e.into_inner());
        let parts: Vec<Result<KahanSum>> = dv
            .par_chunks_mut(CHUNK * na)
            .enumerate()
            .map(|(c, out)| {
                let mut g = vec![Vector3::zeros(); na];
                let mut s = KahanSum::default();
                for (j, o) in out.chunks_mut(na).enumerate() {
                    let a = c * CHUNK + j;
                    self.site_args(x, a, &mut g)?;
                    s.add(self.potential.d1(&g, o) - self.v_ref[a]);
                }
                Ok(s)
            })
            .collect();
        let mut total = KahanSum::default();
        for p in parts {
            let p = p?;
            total.add(p.sum);
            total.add(p.comp);
        }
        let s = self.n_species();
        let mut grad = vec![0.0; self.n_dofs()];
        grad.par_chunks_mut(3 * s).enumerate().for_each(|(d, out)| {
            let mut per = vec![Vector3::<f64>::zeros(); s];
            for &e in &self.gather[self.gather_offsets[d]..self.gather_offsets[d + 1]] {
                let flat = (e >> 1) as usize;
                let end = (e & 1) as usize;
                let k = flat % na;
                let sp = self.arg_species[k][end];
                if end == 1 {
                    per[sp] += dv[flat];
                } else {
                    per[sp] -= dv[flat];
                }
            }
            let mut tot = Vector3::zeros();
            for (g, v) in per.iter().enumerate() {
                tot += v;
                if g > 0 {
                    out[3 * g..3 * g + 3].copy_from_slice(v.as_slice());
                }
            }
            out[..3].copy_from_slice(tot.as_slice());
        });
        Ok((total.value(), grad))
    }

    pub fn forces(&self, x: &DisplacementField) -> Result<ForceField> {
        let (_, g) = self.energy_and_gradient(x)?;
        Ok(ForceField { n_species: self.n_species(), f: g.into_iter().map(|v| -v).collect() })
    }

    fn atom_at(&self, x: &DisplacementField, n: [i64; 2], alpha: usize) -> Vector3<f64> {
        match self.domain.index_of(n).and_then(|i| self.domain.dof_index[i]) {
            Some(d) => x.atom(d, alpha),
            None => Vector3::zeros(),
        }
    }

    /// Slipped difference `D̃_{(ραβ)}u(ℓ)` of the corrector at lattice point `l`.
    pub fn dtilde(&self, x: &DisplacementField, l: [i64; 2], t: usize) -> Result<Vector3<f64>> {
        let i = self.domain.index_of(l).ok_or(Error::OutOfDomain(l))?;
        let tr = &self.stencil.triples[t];
        let (m, _, _) = self.domain.slip_target(i, tr.n, &tr.rho);
        Ok(self.atom_at(x, m, tr.beta) - self.atom_at(x, l, tr.alpha))
    }

    /// `‖u‖_{a₁}` with plain differences over all stored sites and triples.
    pub fn a1_norm(&self, x: &DisplacementField) -> f64 {
        let parts: Vec<KahanSum> = self
            .domain
            .sites
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut s = KahanSum::default();
                for &l in chunk {
                    for tr in &self.stencil.triples {
                        let m = [l[0] + tr.n[0], l[1] + tr.n[1]];
                        let d = self.atom_at(x, m, tr.beta) - self.atom_at(x, l, tr.alpha);
                        s.add(d.norm_squared());
                    }
                }
                s
            })
            .collect();
        let mut total = KahanSum::default();
        for p in parts {
            total.add(p.sum);
            total.add(p.comp);
        }
        total.value().max(0.0).sqrt()
    }

    pub fn admissibility(&self, x: &DisplacementField) -> AdmissibilityReport {
        let cfg = self.admissibility;
        let core = self.domain.core;
        let mut rep = AdmissibilityReport {
            max_strain: 0.0,
            max_shift: 0.0,
            far_max_strain: 0.0,
            far_max_shift: 0.0,
            admissible: true,
        };
        for (d, &i) in self.domain.interior_sites.iter().enumerate() {
            let far = (self.domain.positions[i] - core).norm() > cfg.r_a;
            let l = self.domain.sites[i];
            let strain = self
                .stencil
                .triples
                .iter()
                .enumerate()
                .map(|(t, _)| self.dtilde(x, l, t).map_or(0.0, |v| v.norm()))
                .fold(0.0, f64::max);
            let shift = (1..x.n_species).map(|a| x.p(d, a).norm()).fold(0.0, f64::max);
            rep.max_strain = rep.max_strain.max(strain);
            rep.max_shift = rep.max_shift.max(shift);
            if far {
                rep.far_max_strain = rep.far_max_strain.max(strain);
                rep.far_max_shift = rep.far_max_shift.max(shift);
            }
        }
        rep.admissible =
            rep.max_strain < cfg.m_a && rep.max_shift < cfg.m_a && rep.far_max_strain < 0.5 && rep.far_max_shift < 0.5;
        if !rep.admissible {
            warn!(
                "field exceeds admissibility bounds: strain {:.3}, shift {:.3} (far {:.3}, {:.3})",
                rep.max_strain, rep.max_shift, rep.far_max_strain, rep.far_max_shift
            );
        }
        rep
    }

    /// Copies `x` from `from` onto this model's interior, zero elsewhere.
    pub fn pad_from(&self, from: &DefectModel, x: &DisplacementField) -> DisplacementField {
        let s = self.n_species();
        let mut out = self.zero_field();
        for (d, &i) in from.domain.interior_sites.iter().enumerate() {
            if let Some(k) = self.domain.index_of(from.domain.sites[i]).and_then(|j| self.domain.dof_index[j]) {
                out.dofs[3 * s * k..3 * s * (k + 1)].copy_from_slice(&x.dofs[3 * s * d..3 * s * (d + 1)]);
            }
        }
        out
    }

    /// Extended-XYZ dump of all stored atoms with reference and displaced
    /// positions in Ångström.
    pub fn write_xyz(&self, ml: &ProjectedMultilattice, x: &DisplacementField, w: &mut impl Write) -> Result<()> {
        let unit = ml.parent.angstrom_per_unit;
        let s = self.n_species();
        let io = |e: std::io::Error| Error::Invalid(format!("write failed: {e}"));
        writeln!(w, "{}", self.domain.len() * s).map_err(io)?;
        writeln!(
            w,
            "Properties=species:S:1:pos:R:3:ref_pos:R:3:interior:I:1 radius={} core=\"{} {}\"",
            self.domain.radius, self.domain.core.x, self.domain.core.y
        )
        .map_err(io)?;
        for (i, &l) in self.domain.sites.iter().enumerate() {
            let u0 = self.pred.atoms(&self.domain.positions[i])?;
            for a in 0..s {
                let r = ml.atom_position(l, a);
                let p = r + u0[a] + self.atom_at(x, l, a);
                let label = &ml.parent.labels[ml.basis[a].species];
                writeln!(
                    w,
                    "{label} {:.10} {:.10} {:.10} {:.10} {:.10} {:.10} {}",
                    p.x * unit,
                    p.y * unit,
                    p.z * unit,
                    r.x * unit,
                    r.y * unit,
                    r.z * unit,
                    self.domain.interior[i] as u8
                )
                .map_err(io)?;
            }
        }
        Ok(())
    }

    /// CSV of per-site forces: position, net force and max species force.
    pub fn write_force_csv(&self, ff: &ForceField, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::Invalid(format!("write failed: {e}"));
        writeln!(w, "l1,l2,x1,x2,net1,net2,net3,max_species").map_err(io)?;
        for (d, &i) in self.domain.interior_sites.iter().enumerate() {
            let l = self.domain.sites[i];
            let x = self.domain.positions[i];
            let n = ff.net(d);
            writeln!(w, "{},{},{},{},{:e},{:e},{:e},{:e}", l[0], l[1], x.x, x.y, n.x, n.y, n.z, ff.max_species(d))
                .map_err(io)?;
        }
        Ok(())
    }
}
