//! Crystal geometry: 3D multilattices, the dislocation frame, the projected
//! 2D multilattice, interaction stencils and finite domains.

use std::collections::HashMap;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LATTICE_TOL: f64 = 1e-10;
/// Max-norm bound on integer coefficients in lattice-vector searches.
pub const SEARCH_BOUND: i64 = 16;

/// A 3D multilattice `M = ∪_α (B Z³ + p_α)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultilatticeSpec {
    /// Columns are the Bravais vectors, in lattice-constant units.
    pub cell: Matrix3<f64>,
    pub shifts: Vec<Vector3<f64>>,
    pub labels: Vec<String>,
    /// Length of one lattice unit in Ångström.
    pub angstrom_per_unit: f64,
}

/// On-disk crystal description (TOML or JSON). `cell` rows are Bravais vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrystalFile {
    pub cell: [[f64; 3]; 3],
    pub shifts: Vec<[f64; 3]>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default = "default_lattice_constant")]
    pub lattice_constant: f64,
}

fn default_lattice_constant() -> f64 {
    1.0
}

impl MultilatticeSpec {
    pub fn new(cell: Matrix3<f64>, shifts: Vec<Vector3<f64>>, labels: Vec<String>) -> Result<Self> {
        if cell.determinant() <= 0.0 {
            return Err(Error::Invalid("cell matrix must have positive determinant".into()));
        }
        if shifts.is_empty() || shifts[0].norm() > LATTICE_TOL {
            return Err(Error::Invalid("first species shift must be zero".into()));
        }
        let inv = cell.try_inverse().unwrap();
        let shifts = shifts
            .into_iter()
            .map(|p| {
                let f = (inv * p).map(|c| {
                    let r = c - c.floor();
                    if (1.0 - r).abs() < LATTICE_TOL {
                        0.0
                    } else {
                        r
                    }
                });
                cell * f
            })
            .collect::<Vec<_>>();
        let mut labels = labels;
        labels.resize(shifts.len(), "X".into());
        Ok(Self { cell, shifts, labels, angstrom_per_unit: 1.0 })
    }

    pub fn from_file(file: &CrystalFile) -> Result<Self> {
        let rows = file.cell;
        let cell = Matrix3::from_columns(&[Vector3::from(rows[0]), Vector3::from(rows[1]), Vector3::from(rows[2])]);
        let shifts = file.shifts.iter().map(|s| Vector3::from(*s)).collect();
        let mut spec = Self::new(cell, shifts, file.labels.clone())?;
        spec.angstrom_per_unit = file.lattice_constant;
        Ok(spec)
    }

    pub fn to_file(&self) -> CrystalFile {
        let c = &self.cell;
        CrystalFile {
            cell: [
                [c[(0, 0)], c[(1, 0)], c[(2, 0)]],
                [c[(0, 1)], c[(1, 1)], c[(2, 1)]],
                [c[(0, 2)], c[(1, 2)], c[(2, 2)]],
            ],
            shifts: self.shifts.iter().map(|s| [s.x, s.y, s.z]).collect(),
            labels: self.labels.clone(),
            lattice_constant: self.angstrom_per_unit,
        }
    }

    /// Diamond-cubic silicon, conventional cube edge = 1. The length unit is the
    /// equilibrium lattice constant of the Stillinger–Weber model.
    pub fn silicon() -> Self {
        let cell = Matrix3::new(0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0);
        let mut spec =
            Self::new(cell, vec![Vector3::zeros(), Vector3::new(0.25, 0.25, 0.25)], vec!["Si".into(), "Si".into()])
                .unwrap();
        spec.angstrom_per_unit = crate::potential::sw::SwParams::silicon().equilibrium_lattice_constant();
        spec
    }

    /// Face-centred cubic Bravais lattice (single species).
    pub fn fcc() -> Self {
        let cell = Matrix3::new(0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0);
        Self::new(cell, vec![Vector3::zeros()], vec!["A".into()]).unwrap()
    }

    /// Square 2-lattice with a centred second species, stacked with period 2
    /// along z so that no interaction reaches a periodic image.
    pub fn toy_square() -> Self {
        let cell = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 2.0));
        Self::new(cell, vec![Vector3::zeros(), Vector3::new(0.5, 0.5, 0.0)], vec!["A".into(), "B".into()]).unwrap()
    }

    pub fn n_species(&self) -> usize {
        self.shifts.len()
    }

    pub fn volume(&self) -> f64 {
        self.cell.determinant()
    }

    /// Integer coordinates of `v` if it is a Bravais vector.
    pub fn lattice_coords(&self, v: &Vector3<f64>) -> Option<[i64; 3]> {
        let f = self.cell.try_inverse()? * v;
        let n = f.map(|c| c.round());
        if (self.cell * n - v).norm() < LATTICE_TOL * (1.0 + v.norm()) {
            Some([n.x as i64, n.y as i64, n.z as i64])
        } else {
            None
        }
    }

    /// True if `x` is an atom position of the multilattice.
    pub fn is_atom(&self, x: &Vector3<f64>) -> bool {
        self.shifts.iter().any(|p| self.lattice_coords(&(x - p)).is_some())
    }

    fn for_each_vector(&self, mut f: impl FnMut(Vector3<f64>)) {
        let k = SEARCH_BOUND;
        for i in -k..=k {
            for j in -k..=k {
                for l in -k..=k {
                    if i == 0 && j == 0 && l == 0 {
                        continue;
                    }
                    f(self.cell * Vector3::new(i as f64, j as f64, l as f64));
                }
            }
        }
    }
}

/// Orientation of the dislocation: the line is along `e₃` and the Burgers
/// vector lies in the `e₁e₃` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct DislocationFrame {
    /// Rows are `e₁, e₂, e₃` in crystal coordinates; frame = rotation · crystal.
    pub rotation: Matrix3<f64>,
    pub burgers: Vector3<f64>,
    pub core: Vector2<f64>,
    pub line_period: f64,
}

impl DislocationFrame {
    pub fn b12(&self) -> Vector2<f64> {
        Vector2::new(self.burgers.x, 0.0)
    }

    pub fn with_core(mut self, core: Vector2<f64>) -> Self {
        self.core = core;
        self
    }

    pub fn to_frame(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x
    }

    pub fn to_crystal(&self, y: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * y
    }
}

/// Builds the frame. The core is left at the origin; use
/// [`ProjectedMultilattice::default_core`] and [`DislocationFrame::with_core`].
pub fn build_frame(spec: &MultilatticeSpec, burgers: &Vector3<f64>, line: &Vector3<f64>) -> Result<DislocationFrame> {
    if line.norm() < LATTICE_TOL {
        return Err(Error::DegenerateFrame("zero line direction".into()));
    }
    if burgers.norm() < LATTICE_TOL {
        return Err(Error::DegenerateFrame("zero Burgers vector".into()));
    }
    if spec.lattice_coords(burgers).is_none() {
        return Err(Error::NotALatticeVector([burgers.x, burgers.y, burgers.z]));
    }
    let e3 = line.normalize();
    let period = line_period(spec, &e3)?;
    let b_perp = burgers - e3 * burgers.dot(&e3);
    let e1 = if b_perp.norm() > LATTICE_TOL {
        b_perp.normalize()
    } else {
        let mut best: Option<Vector3<f64>> = None;
        spec.for_each_vector(|v| {
            if v.dot(&e3).abs() < LATTICE_TOL && best.map_or(true, |b| v.norm() < b.norm() - LATTICE_TOL) {
                best = Some(v);
            }
        });
        best.ok_or(Error::PeriodSearchFailed(SEARCH_BOUND))?.normalize()
    };
    let e2 = e3.cross(&e1);
    let rotation = Matrix3::from_rows(&[e1.transpose(), e2.transpose(), e3.transpose()]);
    let mut b = rotation * burgers;
    b.y = 0.0;
    Ok(DislocationFrame { rotation, burgers: b, core: Vector2::zeros(), line_period: period })
}

fn line_period(spec: &MultilatticeSpec, e3: &Vector3<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    spec.for_each_vector(|v| {
        if v.cross(e3).norm() < LATTICE_TOL * (1.0 + v.norm()) && v.dot(e3) > 0.0 {
            best = best.min(v.norm());
        }
    });
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::PeriodSearchFailed(SEARCH_BOUND))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasisAtom {
    /// Offset from the site in frame coordinates; third component in `[0, period)`.
    pub offset: Vector3<f64>,
    /// Species index in the parent multilattice.
    pub species: usize,
}

/// The 2D multilattice obtained by collapsing the line direction.
#[derive(Clone, Debug)]
pub struct ProjectedMultilattice {
    /// Columns are the projected lattice vectors; `a₁ ∥ e₁`.
    pub lattice2d: Matrix2<f64>,
    pub basis: Vec<BasisAtom>,
    pub parent: MultilatticeSpec,
    pub frame: DislocationFrame,
    /// Fractional `a₂` coordinate of the middle of the widest gap between
    /// atomic layers, measured from the site row.
    pub layer_gap_center: f64,
}

impl ProjectedMultilattice {
    pub fn n_species(&self) -> usize {
        self.basis.len()
    }

    pub fn site_position(&self, n: [i64; 2]) -> Vector2<f64> {
        self.lattice2d * Vector2::new(n[0] as f64, n[1] as f64)
    }

    pub fn atom_position(&self, n: [i64; 2], alpha: usize) -> Vector3<f64> {
        let s = self.site_position(n);
        Vector3::new(s.x, s.y, 0.0) + self.basis[alpha].offset
    }

    /// Integer coordinates of a 2D point if it lies on the projected lattice.
    pub fn lattice_coords(&self, x: &Vector2<f64>) -> Option<[i64; 2]> {
        let f = self.lattice2d.try_inverse()? * x;
        let n = f.map(|c| c.round());
        if (self.lattice2d * n - x).norm() < LATTICE_TOL * (1.0 + x.norm()) {
            Some([n.x as i64, n.y as i64])
        } else {
            None
        }
    }

    pub fn cell_area(&self) -> f64 {
        self.lattice2d.determinant().abs()
    }

    /// Default core: a quarter of `a₁` along the row, centred in the widest
    /// interlayer gap so that the cut separates whole layers.
    pub fn default_core(&self) -> Vector2<f64> {
        self.lattice2d * Vector2::new(0.25, self.layer_gap_center)
    }
}

/// Projects the multilattice along the frame's line direction.
pub fn project(spec: &MultilatticeSpec, frame: &DislocationFrame) -> Result<ProjectedMultilattice> {
    let rot = &frame.rotation;
    let e3 = rot.row(2).transpose();
    let mut inplane: Vec<Vector2<f64>> = Vec::new();
    spec.for_each_vector(|v| {
        if v.dot(&e3).abs() < LATTICE_TOL * (1.0 + v.norm()) {
            let y = rot * v;
            inplane.push(Vector2::new(y.x, y.y));
        }
    });
    if inplane.is_empty() {
        return Err(Error::PeriodSearchFailed(SEARCH_BOUND));
    }
    let a1 = inplane
        .iter()
        .filter(|v| v.y.abs() < LATTICE_TOL && v.x > 0.0)
        .min_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap())
        .copied()
        .or_else(|| inplane.iter().min_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap()).copied())
        .unwrap();
    let a1n = a1.norm();
    let u1 = a1 / a1n;
    let u2 = Vector2::new(-u1.y, u1.x);
    let h = inplane.iter().map(|v| v.dot(&u2).abs()).filter(|&y| y > LATTICE_TOL).fold(f64::INFINITY, f64::min);
    let mut a2 = *inplane
        .iter()
        .find(|v| (v.dot(&u2) - h).abs() < LATTICE_TOL)
        .ok_or(Error::PeriodSearchFailed(SEARCH_BOUND))?;
    let k = (a2.dot(&u1) / a1n).round();
    a2 -= a1 * k;
    let lattice2d = Matrix2::from_columns(&[a1, a2]);
    let inv2 = lattice2d.try_inverse().unwrap();

    let per_species = lattice2d.determinant().abs() * frame.line_period / spec.volume();
    let n_layers = per_species.round();
    if (per_species - n_layers).abs() > 1e-8 || n_layers < 1.0 {
        return Err(Error::Invalid(format!("non-integral layer count {per_species}")));
    }
    let want = n_layers as usize;
    let period = frame.line_period;

    // Collect one representative per (species, in-plane class, x3 in [0, period)).
    let mut atoms: Vec<(usize, Vector2<f64>, f64)> = Vec::new();
    let kmax = 8i64;
    for (s, p) in spec.shifts.iter().enumerate() {
        let mut found = 0;
        'search: for i in -kmax..=kmax {
            for j in -kmax..=kmax {
                for l in -kmax..=kmax {
                    let x = spec.cell * Vector3::new(i as f64, j as f64, l as f64) + p;
                    let y = rot * x;
                    let z = y.z;
                    if z < -LATTICE_TOL || z >= period - LATTICE_TOL {
                        continue;
                    }
                    let z = z.max(0.0);
                    let f = inv2 * Vector2::new(y.x, y.y);
                    let f = f.map(|c| {
                        let r = c - c.floor();
                        if (1.0 - r) < 1e-9 {
                            0.0
                        } else {
                            r
                        }
                    });
                    let dup =
                        atoms.iter().any(|(s2, f2, z2)| *s2 == s && frac_dist(f2, &f) < 1e-8 && (z2 - z).abs() < 1e-8);
                    if !dup {
                        atoms.push((s, f, z));
                        found += 1;
                        if found == want {
                            break 'search;
                        }
                    }
                }
            }
        }
        if found != want {
            return Err(Error::Invalid(format!("found {found} of {want} atoms for species {s}")));
        }
    }

    // Put the row boundary in the widest gap between layers along a₂.
    let mut levels: Vec<f64> = atoms.iter().map(|a| a.1.y).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup_by(|a, b| (*a - *b).abs() < 1e-8);
    let mut best_gap = -1.0;
    let mut gap_top = 0.0;
    for i in 0..levels.len() {
        let lo = levels[i];
        let hi = if i + 1 < levels.len() { levels[i + 1] } else { levels[0] + 1.0 };
        if hi - lo > best_gap + 1e-9 {
            best_gap = hi - lo;
            gap_top = hi;
        }
    }
    let start = if gap_top > 1e-9 { gap_top - gap_top.ceil() } else { 0.0 };
    let layer_gap_center = start + 1.0 - 0.5 * best_gap;

    let mut basis: Vec<BasisAtom> = atoms
        .iter()
        .map(|(s, f, z)| {
            let mut f = *f;
            if f.y >= start + 1.0 - 1e-9 {
                f.y -= 1.0;
            }
            if f.y < start - 1e-9 {
                f.y += 1.0;
            }
            let xy = lattice2d * f;
            BasisAtom { offset: Vector3::new(xy.x, xy.y, *z), species: *s }
        })
        .collect();
    let origin = basis
        .iter()
        .position(|a| a.species == 0 && a.offset.norm() < 1e-9)
        .ok_or_else(|| Error::Invalid("no species-0 atom at the origin".into()))?;
    let first = basis.remove(origin);
    basis.sort_by(|a, b| {
        (a.species, a.offset.y, a.offset.x, a.offset.z)
            .partial_cmp(&(b.species, b.offset.y, b.offset.x, b.offset.z))
            .unwrap()
    });
    basis.insert(0, first);

    Ok(ProjectedMultilattice { lattice2d, basis, parent: spec.clone(), frame: frame.clone(), layer_gap_center })
}

fn frac_dist(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let d = a - b;
    d.map(|c| (c - c.round()).abs()).amax()
}

/// One interaction `(ρ, α, β)`: the pair (atom α at ℓ, atom β at ℓ + ρ).
#[derive(Clone, Debug, PartialEq)]
pub struct Triple {
    pub n: [i64; 2],
    pub rho: Vector2<f64>,
    pub alpha: usize,
    pub beta: usize,
    /// Shortest reference separation vector over the images along the line.
    pub ref_gap: Vector3<f64>,
    /// Reference separations (all images along the line) within the cutoff.
    /// Empty for triples added only to satisfy the stencil conditions.
    pub images: Vec<Vector3<f64>>,
}

impl Triple {
    pub fn coupled(&self) -> bool {
        !self.images.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct InteractionStencil {
    pub triples: Vec<Triple>,
    pub r_cut: f64,
    pub n_species: usize,
    lookup: HashMap<([i64; 2], usize, usize), usize>,
}

impl InteractionStencil {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn find(&self, n: [i64; 2], alpha: usize, beta: usize) -> Option<usize> {
        self.lookup.get(&(n, alpha, beta)).copied()
    }

    /// Index of `(−ρ, β, α)`.
    pub fn reverse(&self, t: usize) -> usize {
        let tr = &self.triples[t];
        self.find([-tr.n[0], -tr.n[1]], tr.beta, tr.alpha).expect("stencil is closed")
    }

    /// Largest `|ρ|` over all triples.
    pub fn range(&self) -> f64 {
        self.triples.iter().map(|t| t.rho.norm()).fold(0.0, f64::max)
    }

    /// Distinct nonzero lattice offsets `ρ`, in first-appearance order.
    pub fn offsets(&self) -> Vec<[i64; 2]> {
        let mut out: Vec<[i64; 2]> = Vec::new();
        for t in &self.triples {
            if t.n != [0, 0] && !out.contains(&t.n) {
                out.push(t.n);
            }
        }
        out
    }

    pub fn satisfies_cond1(&self) -> bool {
        (0..self.n_species).all(|a| {
            let rhos: Vec<Vector2<f64>> =
                self.triples.iter().filter(|t| t.alpha == a && t.beta == a).map(|t| t.rho).collect();
            spans_plane(&rhos)
        })
    }

    pub fn satisfies_cond2(&self) -> bool {
        (0..self.n_species).all(|a| (0..self.n_species).all(|b| a == b || self.find([0, 0], a, b).is_some()))
    }

    pub fn is_closed(&self) -> bool {
        self.triples.iter().all(|t| self.find([-t.n[0], -t.n[1]], t.beta, t.alpha).is_some())
    }
}

fn spans_plane(v: &[Vector2<f64>]) -> bool {
    let scale = v.iter().map(|x| x.norm()).fold(0.0, f64::max);
    v.iter().any(|a| v.iter().any(|b| (a.x * b.y - a.y * b.x).abs() > 1e-8 * scale * scale))
}

/// All triples whose reference interatomic distance is at most `r_cut`,
/// enlarged with zero-coupling triples until the stencil conditions hold.
pub fn build_stencil(ml: &ProjectedMultilattice, r_cut: f64) -> Result<InteractionStencil> {
    if r_cut <= 0.0 {
        return Err(Error::Invalid("r_cut must be positive".into()));
    }
    let s = ml.n_species();
    let a = &ml.lattice2d;
    let period = ml.frame.line_period;
    let diam = ml.basis.iter().map(|b| Vector2::new(b.offset.x, b.offset.y).norm()).fold(0.0, f64::max);
    let reach = 2.0 * r_cut + 2.0 * diam;
    let h = a[(1, 1)].abs();
    let a1 = a[(0, 0)].abs();
    let n2max = (reach / h).ceil() as i64 + 1;
    let n1max = ((reach + a[(0, 1)].abs() * n2max as f64) / a1).ceil() as i64 + 1;
    let kmax = (r_cut / period).ceil() as i64 + 1;

    let mut triples = Vec::new();
    for alpha in 0..s {
        for beta in 0..s {
            for n2 in -n2max..=n2max {
                for n1 in -n1max..=n1max {
                    if n1 == 0 && n2 == 0 && alpha == beta {
                        continue;
                    }
                    let rho = a * Vector2::new(n1 as f64, n2 as f64);
                    let base = Vector3::new(rho.x, rho.y, 0.0) + ml.basis[beta].offset - ml.basis[alpha].offset;
                    let mut images = Vec::new();
                    let mut best = base;
                    for k in -kmax..=kmax {
                        let g = base + Vector3::new(0.0, 0.0, k as f64 * period);
                        if g.norm() < best.norm() - 1e-12 {
                            best = g;
                        }
                        if g.norm() <= r_cut {
                            images.push(g);
                        }
                    }
                    if !images.is_empty() {
                        triples.push(Triple { n: [n1, n2], rho, alpha, beta, ref_gap: best, images });
                    }
                }
            }
        }
    }
    let mut st = InteractionStencil { triples, r_cut, n_species: s, lookup: HashMap::new() };
    st.reindex();

    let zero_triple = |n: [i64; 2], alpha: usize, beta: usize| {
        let rho = a * Vector2::new(n[0] as f64, n[1] as f64);
        let base = Vector3::new(rho.x, rho.y, 0.0) + ml.basis[beta].offset - ml.basis[alpha].offset;
        let mut best = base;
        for k in -kmax..=kmax {
            let g = base + Vector3::new(0.0, 0.0, k as f64 * period);
            if g.norm() < best.norm() - 1e-12 {
                best = g;
            }
        }
        Triple { n, rho, alpha, beta, ref_gap: best, images: Vec::new() }
    };

    for alpha in 0..s {
        for beta in 0..s {
            if alpha != beta && st.find([0, 0], alpha, beta).is_none() {
                st.triples.push(zero_triple([0, 0], alpha, beta));
            }
        }
    }
    st.reindex();

    // Candidate same-species offsets within 2 r_cut, shortest first.
    let mut cands: Vec<[i64; 2]> = Vec::new();
    let m2 = (2.0 * r_cut / h).ceil() as i64 + 1;
    let m1 = ((2.0 * r_cut + a[(0, 1)].abs() * m2 as f64) / a1).ceil() as i64 + 1;
    for n2 in -m2..=m2 {
        for n1 in -m1..=m1 {
            let rho = a * Vector2::new(n1 as f64, n2 as f64);
            if (n1, n2) != (0, 0) && rho.norm() <= 2.0 * r_cut {
                cands.push([n1, n2]);
            }
        }
    }
    cands.sort_by(|x, y| {
        let nx = (a * Vector2::new(x[0] as f64, x[1] as f64)).norm();
        let ny = (a * Vector2::new(y[0] as f64, y[1] as f64)).norm();
        nx.partial_cmp(&ny).unwrap().then(x.cmp(y))
    });
    for alpha in 0..s {
        let mut rhos: Vec<Vector2<f64>> =
            st.triples.iter().filter(|t| t.alpha == alpha && t.beta == alpha).map(|t| t.rho).collect();
        let mut ci = 0;
        while !spans_plane(&rhos) {
            if ci >= cands.len() {
                return Err(Error::Cond1Violation(alpha));
            }
            let n = cands[ci];
            ci += 1;
            for m in [n, [-n[0], -n[1]]] {
                if st.find(m, alpha, alpha).is_none() {
                    let t = zero_triple(m, alpha, alpha);
                    rhos.push(t.rho);
                    st.triples.push(t);
                    st.reindex();
                }
            }
        }
    }
    st.triples.sort_by(|x, y| (x.alpha, x.beta, x.n[1], x.n[0]).cmp(&(y.alpha, y.beta, y.n[1], y.n[0])));
    st.reindex();
    Ok(st)
}

impl InteractionStencil {
    fn reindex(&mut self) {
        self.lookup = self.triples.iter().enumerate().map(|(i, t)| ((t.n, t.alpha, t.beta), i)).collect();
    }
}

/// A finite set of lattice sites around the core with the clamped ring.
#[derive(Clone, Debug)]
pub struct Domain {
    /// Integer coordinates, lexicographically ordered.
    pub sites: Vec<[i64; 2]>,
    pub positions: Vec<Vector2<f64>>,
    pub radius: f64,
    pub interior: Vec<bool>,
    pub gamma: Vec<bool>,
    pub core: Vector2<f64>,
    pub r_hat: f64,
    /// `|b₁|`, the in-plane Burgers length.
    pub b1: f64,
    /// Integer coordinates of `b₁₂`, if it is a projected-lattice vector.
    pub b12: Option<[i64; 2]>,
    pub ring: f64,
    /// Site index of every interior site, in site order.
    pub interior_sites: Vec<usize>,
    /// Interior index of each site.
    pub dof_index: Vec<Option<usize>>,
    index: SiteIndex,
}

#[derive(Clone, Debug)]
struct SiteIndex {
    lo: [i64; 2],
    dims: [i64; 2],
    slots: Vec<u32>,
}

impl SiteIndex {
    fn new(sites: &[[i64; 2]]) -> Self {
        let lo = [sites.iter().map(|s| s[0]).min().unwrap_or(0), sites.iter().map(|s| s[1]).min().unwrap_or(0)];
        let hi = [sites.iter().map(|s| s[0]).max().unwrap_or(0), sites.iter().map(|s| s[1]).max().unwrap_or(0)];
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1];
        let mut slots = vec![u32::MAX; (dims[0] * dims[1]) as usize];
        for (i, s) in sites.iter().enumerate() {
            slots[((s[0] - lo[0]) * dims[1] + s[1] - lo[1]) as usize] = i as u32;
        }
        Self { lo, dims, slots }
    }

    fn get(&self, n: [i64; 2]) -> Option<usize> {
        let i = n[0] - self.lo[0];
        let j = n[1] - self.lo[1];
        if i < 0 || j < 0 || i >= self.dims[0] || j >= self.dims[1] {
            return None;
        }
        let v = self.slots[(i * self.dims[1] + j) as usize];
        (v != u32::MAX).then_some(v as usize)
    }
}

/// Distance from `x` to the nearest point of the projected lattice.
pub fn distance_to_lattice(ml: &ProjectedMultilattice, x: &Vector2<f64>) -> f64 {
    let f = ml.lattice2d.try_inverse().unwrap() * x;
    let mut best = f64::INFINITY;
    for i in -2..=2 {
        for j in -2..=2 {
            let n = [f.x.floor() as i64 + i, f.y.floor() as i64 + j];
            best = best.min((ml.site_position(n) - x).norm());
        }
    }
    best
}

pub fn build_domain(
    ml: &ProjectedMultilattice,
    stencil: &InteractionStencil,
    radius: f64,
    frame: &DislocationFrame,
    r_hat: f64,
) -> Result<Domain> {
    if radius <= r_hat + 2.0 * stencil.r_cut {
        return Err(Error::Invalid(format!(
            "radius {radius} must exceed r_hat + 2 r_cut = {}",
            r_hat + 2.0 * stencil.r_cut
        )));
    }
    let core = frame.core;
    if distance_to_lattice(ml, &core) < 0.1 {
        return Err(Error::Invalid("core lies within 0.1 of a lattice site".into()));
    }
    let b12v = frame.b12();
    let b12 = if b12v.norm() < LATTICE_TOL { Some([0, 0]) } else { ml.lattice_coords(&b12v) };
    let ring = (2.0 * stencil.r_cut).max(stencil.range() + b12v.norm());
    let outer = radius + ring;
    let inv = ml.lattice2d.try_inverse().unwrap();
    let mut lo = [i64::MAX; 2];
    let mut hi = [i64::MIN; 2];
    for (sx, sy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
        let f = inv * (core + Vector2::new(sx * outer, sy * outer));
        lo[0] = lo[0].min(f.x.floor() as i64 - 1);
        lo[1] = lo[1].min(f.y.floor() as i64 - 1);
        hi[0] = hi[0].max(f.x.ceil() as i64 + 1);
        hi[1] = hi[1].max(f.y.ceil() as i64 + 1);
    }
    let mut sites = Vec::new();
    for i in lo[0]..=hi[0] {
        for j in lo[1]..=hi[1] {
            if (ml.site_position([i, j]) - core).norm() <= outer {
                sites.push([i, j]);
            }
        }
    }
    let positions: Vec<Vector2<f64>> = sites.iter().map(|n| ml.site_position(*n)).collect();
    let interior: Vec<bool> = positions.iter().map(|x| (x - core).norm() <= radius).collect();
    let b1 = frame.burgers.x.abs();
    let gamma = positions.iter().map(|x| gamma_rule(x, &core, r_hat, b1)).collect();
    let n_int = interior.iter().filter(|&&b| b).count();
    if n_int < 10 {
        return Err(Error::DomainTooSmall(n_int));
    }
    let mut interior_sites = Vec::with_capacity(n_int);
    let mut dof_index = vec![None; sites.len()];
    for (i, &b) in interior.iter().enumerate() {
        if b {
            dof_index[i] = Some(interior_sites.len());
            interior_sites.push(i);
        }
    }
    let index = SiteIndex::new(&sites);
    Ok(Domain {
        sites,
        positions,
        radius,
        interior,
        gamma,
        core,
        r_hat,
        b1,
        b12,
        ring,
        interior_sites,
        dof_index,
        index,
    })
}

/// Membership of `x` in the slipped region right of the core.
pub fn gamma_rule(x: &Vector2<f64>, core: &Vector2<f64>, r_hat: f64, b1: f64) -> bool {
    x.x >= core.x && (x - core).norm() > r_hat + b1
}

impl Domain {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn n_interior(&self) -> usize {
        self.interior_sites.len()
    }

    pub fn index_of(&self, n: [i64; 2]) -> Option<usize> {
        self.index.get(n)
    }

    /// Below the cut line `x₂ = x̂₂`.
    pub fn below(&self, x: &Vector2<f64>) -> bool {
        x.y < self.core.y
    }

    /// Site holding the `β` end of the slipped difference `D̃_ρ` at site `i`,
    /// together with the cut-side indicators `(ℓ below, m below)` used by the
    /// slipped predictor. Outside `Ω_Γ` this is plain `ℓ + ρ`.
    pub fn slip_target(&self, i: usize, rho_n: [i64; 2], rho: &Vector2<f64>) -> ([i64; 2], bool, bool) {
        let l = self.sites[i];
        let x = self.positions[i];
        let plain = [l[0] + rho_n[0], l[1] + rho_n[1]];
        if !self.gamma[i] {
            return (plain, false, false);
        }
        let b = self.b12.unwrap_or([0, 0]);
        let l_below = self.below(&x);
        let m_below = (x + rho).y < self.core.y;
        let m = match (l_below, m_below) {
            (false, true) => [plain[0] - b[0], plain[1] - b[1]],
            (true, false) => [plain[0] + b[0], plain[1] + b[1]],
            _ => plain,
        };
        (m, l_below, m_below)
    }
}

/// Frame, projected multilattice and stencil for one dislocation setup.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub frame: DislocationFrame,
    pub ml: ProjectedMultilattice,
    pub stencil: InteractionStencil,
}

impl Geometry {
    /// Builds the frame and projection and places the core at `core` (or the
    /// default core when `None`).
    pub fn new(
        spec: &MultilatticeSpec,
        burgers: &Vector3<f64>,
        line: &Vector3<f64>,
        r_cut: f64,
        core: Option<Vector2<f64>>,
    ) -> Result<Self> {
        let frame = build_frame(spec, burgers, line)?;
        let ml = project(spec, &frame)?;
        let frame = frame.with_core(core.unwrap_or_else(|| ml.default_core()));
        let ml = ProjectedMultilattice { frame: frame.clone(), ..ml };
        let stencil = build_stencil(&ml, r_cut)?;
        Ok(Self { frame, ml, stencil })
    }

    /// Silicon `½[1̄10](111)` edge dislocation along `[112]`.
    pub fn silicon_edge(r_cut: f64) -> Result<Self> {
        Self::new(
            &MultilatticeSpec::silicon(),
            &Vector3::new(-0.5, 0.5, 0.0),
            &Vector3::new(1.0, 1.0, 2.0),
            r_cut,
            None,
        )
    }

    /// Edge dislocation with `b = [100]` on the toy square 2-lattice.
    pub fn toy_edge() -> Result<Self> {
        Self::new(
            &MultilatticeSpec::toy_square(),
            &Vector3::new(1.0, 0.0, 0.0),
            &Vector3::new(0.0, 0.0, 1.0),
            TOY_R_CUT,
            None,
        )
    }

    pub fn domain(&self, radius: f64, r_hat: f64) -> Result<Domain> {
        build_domain(&self.ml, &self.stencil, radius, &self.frame, r_hat)
    }
}

/// Default stencil cutoff for the silicon setup (lattice units).
pub const SILICON_R_CUT: f64 = 0.9;
/// Stencil cutoff for the toy setup: nearest and diagonal neighbours.
pub const TOY_R_CUT: f64 = 1.5;

impl Geometry {
    /// The same geometry with a zero Burgers vector, for defect-free runs.
    pub fn without_defect(&self) -> Geometry {
        let mut frame = self.frame.clone();
        frame.burgers = Vector3::zeros();
        let ml = ProjectedMultilattice { frame: frame.clone(), ..self.ml.clone() };
        Geometry { frame, ml, stencil: self.stencil.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fcc_vectors_along(dir: &Vector3<f64>) -> f64 {
        // FCC vectors are ½(i, j, k) with i + j + k even.
        let mut best = f64::INFINITY;
        for i in -8i64..=8 {
            for j in -8i64..=8 {
                for k in -8i64..=8 {
                    if (i + j + k) % 2 != 0 || (i, j, k) == (0, 0, 0) {
                        continue;
                    }
                    let v = Vector3::new(i as f64, j as f64, k as f64) * 0.5;
                    if v.cross(dir).norm() < 1e-12 {
                        best = best.min(v.norm());
                    }
                }
            }
        }
        best
    }

    #[test]
    fn silicon_edge_frame() {
        let g = Geometry::silicon_edge(SILICON_R_CUT).unwrap();
        let b = g.frame.burgers;
        assert!((b.x - 0.5f64.sqrt()).abs() < 1e-12 && b.y == 0.0 && b.z.abs() < 1e-12);
        let rot = g.frame.rotation;
        assert!((rot * rot.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((g.frame.line_period - fcc_vectors_along(&Vector3::new(1.0, 1.0, 2.0))).abs() < 1e-12);
        assert_eq!(g.ml.n_species() % 2, 0);
        assert!(g.ml.n_species() > 2);
        let per_species = g.ml.cell_area() * g.frame.line_period / MultilatticeSpec::silicon().volume();
        assert_eq!(g.ml.basis.iter().filter(|a| a.species == 0).count() as f64, per_species.round());
        assert!(g.stencil.satisfies_cond1() && g.stencil.satisfies_cond2() && g.stencil.is_closed());
    }

    #[test]
    fn basis_atoms_are_distinct_crystal_atoms() {
        let g = Geometry::silicon_edge(SILICON_R_CUT).unwrap();
        let spec = MultilatticeSpec::silicon();
        for (i, a) in g.ml.basis.iter().enumerate() {
            let x = g.frame.to_crystal(&a.offset);
            assert!(spec.lattice_coords(&(x - spec.shifts[a.species])).is_some(), "atom {i}");
            for b in &g.ml.basis[..i] {
                let d = a.offset - b.offset;
                let in_plane = g.ml.lattice_coords(&Vector2::new(d.x, d.y)).is_some();
                let along = (d.z / g.frame.line_period - (d.z / g.frame.line_period).round()).abs() < 1e-9;
                assert!(!(in_plane && along), "duplicate basis atom {i}");
            }
        }
    }

    #[test]
    fn screw_frame_has_no_edge_component() {
        let spec = MultilatticeSpec::toy_square();
        let f = build_frame(&spec, &Vector3::new(0.0, 0.0, 2.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((f.burgers - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert_eq!(f.b12(), Vector2::zeros());
        let ml = project(&spec, &f).unwrap();
        assert_eq!(ml.n_species(), 2);
    }

    #[test]
    fn fcc_frame_period_is_the_shortest_parallel_vector() {
        let spec = MultilatticeSpec::fcc();
        let line = Vector3::new(1.0, -1.0, 0.0);
        let f = build_frame(&spec, &Vector3::new(0.5, 0.5, 0.0), &line).unwrap();
        assert!(f.burgers.z.abs() < 1e-12);
        assert!((f.line_period - fcc_vectors_along(&line)).abs() < 1e-12);
    }

    #[test]
    fn non_lattice_burgers_is_rejected() {
        let spec = MultilatticeSpec::fcc();
        let r = build_frame(&spec, &Vector3::new(0.3, 0.0, 0.0), &Vector3::new(0.0, 0.0, 1.0));
        assert!(matches!(r, Err(Error::NotALatticeVector(_))));
    }

    #[test]
    fn toy_stencil_matches_brute_force_enumeration() {
        let spec = MultilatticeSpec::toy_square();
        let f = build_frame(&spec, &Vector3::new(1.0, 0.0, 0.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let ml = project(&spec, &f).unwrap();
        let st = build_stencil(&ml, 1.01).unwrap();
        let offs: Vec<Vector2<f64>> = ml.basis.iter().map(|a| Vector2::new(a.offset.x, a.offset.y)).collect();
        assert!(((offs[1] - offs[0]).norm() - 0.5f64.sqrt()).abs() < 1e-12);
        for a in 0..2 {
            for b in 0..2 {
                let mut expect = Vec::new();
                for i in -3i64..=3 {
                    for j in -3i64..=3 {
                        let d = Vector2::new(i as f64, j as f64) + offs[b] - offs[a];
                        if (i, j, a) != (0, 0, b) && d.norm() <= 1.01 {
                            expect.push([i, j]);
                        }
                    }
                }
                assert_eq!(expect.len(), 4);
                let got: Vec<[i64; 2]> =
                    st.triples.iter().filter(|t| t.alpha == a && t.beta == b && t.coupled()).map(|t| t.n).collect();
                let mut got_sorted = got.clone();
                got_sorted.sort();
                expect.sort();
                assert_eq!(got_sorted, expect, "species pair ({a}, {b})");
            }
        }
        assert!(st.find([0, 0], 0, 1).is_some() && st.find([0, 0], 1, 0).is_some());
    }

    #[test]
    fn tiny_cutoff_cannot_span_the_plane() {
        let g = Geometry::toy_edge().unwrap();
        assert!(matches!(build_stencil(&g.ml, 0.3), Err(Error::Cond1Violation(_))));
    }

    #[test]
    fn domain_site_count_and_slipped_region() {
        let g = Geometry::toy_edge().unwrap();
        let d = g.domain(20.0, 4.0).unwrap();
        let mut exact = 0;
        for i in -25i64..=25 {
            for j in -25i64..=25 {
                if (Vector2::new(i as f64, j as f64) - d.core).norm() <= 20.0 {
                    exact += 1;
                }
            }
        }
        assert_eq!(d.n_interior(), exact);
        assert!((d.n_interior() as f64 / (std::f64::consts::PI * 400.0) - 1.0).abs() < 0.02);
        let c = d.core;
        assert!(!gamma_rule(&Vector2::new(c.x - 5.0, c.y), &c, 4.0, 1.0));
        assert!(!gamma_rule(&Vector2::new(c.x + 5.0 - 1e-9, c.y), &c, 4.0, 1.0));
        assert!(gamma_rule(&Vector2::new(c.x + 5.0 + 1e-9, c.y), &c, 4.0, 1.0));
        for (i, &s) in d.sites.iter().enumerate() {
            assert_eq!(d.index_of(s), Some(i));
        }
    }

    #[test]
    fn domain_rejects_small_radius() {
        let g = Geometry::toy_edge().unwrap();
        assert!(g.domain(6.0, 4.0).is_err());
    }

    #[test]
    fn crystal_file_round_trip() {
        let spec = MultilatticeSpec::silicon();
        let back = MultilatticeSpec::from_file(&spec.to_file()).unwrap();
        assert!((back.cell - spec.cell).norm() < 1e-14);
        assert_eq!(back.shifts, spec.shifts);
        assert!((back.angstrom_per_unit - spec.angstrom_per_unit).abs() < 1e-14);
    }
}
