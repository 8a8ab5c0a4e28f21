//! Continuum predictor: the anisotropic linear-elastic dislocation field, the
//! core regularisation map `ζ`, the linearised shift field and the lattice
//! elastic strains.
//!
//! Positions are in-plane frame coordinates. The branch cut is the ray
//! `{x₂ = x̂₂, x₁ > x̂₁}` and angles are taken in `[0, 2π)`.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};
use num_complex::Complex64;

use crate::cbmodel::{fidx, isotropic_full, voigt_to_full, CbDerivatives, ElasticTensor};
use crate::error::{Error, Result};
use crate::lattice::{Domain, Geometry, InteractionStencil};

/// Angle of `v` in `[0, 2π)`.
pub fn arg_2pi(v: &Vector2<f64>) -> f64 {
    let a = v.y.atan2(v.x);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

fn carg_2pi(z: Complex64) -> f64 {
    let a = z.im.atan2(z.re);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Where the elastic tensor of the linear-elastic solve comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorSource {
    CauchyBorn,
    Isotropic {
        mu: f64,
        nu: f64,
    },
    /// 21 Voigt constants in crystal axes (row-major upper triangle).
    Table(Vec<f64>),
}

impl TensorSource {
    /// Room-temperature experimental silicon constants (GPa).
    pub fn silicon_table() -> Self {
        let (c11, c12, c44) = (165.7, 63.9, 79.6);
        TensorSource::Table(vec![
            c11, c12, c12, 0.0, 0.0, 0.0, c11, c12, 0.0, 0.0, 0.0, c11, 0.0, 0.0, 0.0, c44, 0.0, 0.0, c44, 0.0, c44,
        ])
    }

    /// Isotropic Voigt average `(μ, ν)` of 21 Voigt entries.
    pub fn voigt_isotropic(voigt: &[f64]) -> Result<Self> {
        if voigt.len() != 21 {
            return Err(Error::Invalid(format!("expected 21 Voigt entries, got {}", voigt.len())));
        }
        let mut c = [[0.0; 6]; 6];
        let mut k = 0;
        for i in 0..6 {
            for j in i..6 {
                c[i][j] = voigt[k];
                k += 1;
            }
        }
        let diag = c[0][0] + c[1][1] + c[2][2];
        let off = c[0][1] + c[0][2] + c[1][2];
        let shear = c[3][3] + c[4][4] + c[5][5];
        let mu = (diag - off + 3.0 * shear) / 15.0;
        let bulk = (diag + 2.0 * off) / 9.0;
        let nu = (3.0 * bulk - 2.0 * mu) / (2.0 * (3.0 * bulk + mu));
        Ok(TensorSource::Isotropic { mu, nu })
    }

    /// Frame-restricted tensor used for the solve.
    pub fn tensor(&self, cb: &ElasticTensor, rotation: &Matrix3<f64>) -> Result<ElasticTensor> {
        match self {
            TensorSource::CauchyBorn => Ok(cb.clone()),
            TensorSource::Isotropic { mu, nu } => Ok(ElasticTensor::from_full(&isotropic_full(*mu, *nu), rotation)),
            TensorSource::Table(v) => Ok(ElasticTensor::from_full(&voigt_to_full(v)?, rotation)),
        }
    }
}

#[derive(Clone, Debug)]
enum CleKind {
    Stroh {
        p: [Complex64; 3],
        a: [Vector3<Complex64>; 3],
        /// `b_α · b` for each root.
        w: [Complex64; 3],
    },
    Isotropic {
        nu: f64,
    },
    Zero,
}

/// Solution of the linear-elastic dislocation problem with the cut on the
/// positive `x₁` ray through the core.
#[derive(Clone, Debug)]
pub struct CleSolution {
    pub burgers: Vector3<f64>,
    pub core: Vector2<f64>,
    pub source: TensorSource,
    kind: CleKind,
}

const ROOT_SEPARATION: f64 = 1e-6;

/// Sextic roots and Stroh vectors `(p, a, b)` with `2 aᵀb = 1`.
fn stroh_eigen(c: &ElasticTensor) -> Result<([Complex64; 3], [Vector3<Complex64>; 3], [Vector3<Complex64>; 3])> {
    let q = Matrix3::from_fn(|i, k| c.get(i, 0, k, 0));
    let r = Matrix3::from_fn(|i, k| c.get(i, 0, k, 1));
    let t = Matrix3::from_fn(|i, k| c.get(i, 1, k, 1));
    let ti = t.try_inverse().ok_or(Error::DegenerateSextic(0.0))?;
    let mut n = nalgebra::Matrix6::<f64>::zeros();
    n.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-ti * r.transpose()));
    n.fixed_view_mut::<3, 3>(0, 3).copy_from(&ti);
    n.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r * ti * r.transpose() - q));
    n.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-r * ti));
    let eig = n.complex_eigenvalues();
    let mut roots: Vec<Complex64> = eig.iter().copied().filter(|z| z.im > 0.0).collect();
    if roots.len() != 3 {
        return Err(Error::DegenerateSextic(0.0));
    }
    roots.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    let mut sep = f64::INFINITY;
    for i in 0..3 {
        for j in (i + 1)..3 {
            sep = sep.min((roots[i] - roots[j]).norm());
        }
    }
    if sep < ROOT_SEPARATION {
        return Err(Error::DegenerateSextic(sep));
    }
    let cq = q.map(|x| Complex64::new(x, 0.0));
    let cr = r.map(|x| Complex64::new(x, 0.0));
    let ct = t.map(|x| Complex64::new(x, 0.0));
    let mut pa = [Vector3::zeros(); 3];
    let mut pb = [Vector3::zeros(); 3];
    for (k, &p) in roots.iter().enumerate() {
        let kmat = cq + (cr + cr.transpose()) * p + ct * (p * p);
        let svd = kmat.svd(false, true);
        let vt = svd.v_t.ok_or(Error::DegenerateSextic(sep))?;
        let imin =
            (0..3).min_by(|&i, &j| svd.singular_values[i].partial_cmp(&svd.singular_values[j]).unwrap()).unwrap();
        let a: Vector3<Complex64> = vt.row(imin).adjoint();
        let b = (cr.transpose() + ct * p) * a;
        let s = (a.transpose() * b)[(0, 0)] * 2.0;
        let f = Complex64::new(1.0, 0.0) / s.sqrt();
        pa[k] = a * f;
        pb[k] = b * f;
    }
    Ok(([roots[0], roots[1], roots[2]], pa, pb))
}

/// Solves the anisotropic linear-elastic problem by the Stroh formalism.
/// In isotropic mode the closed-form solution is used.
pub fn solve_cle(
    c: &ElasticTensor,
    burgers: &Vector3<f64>,
    core: Vector2<f64>,
    source: TensorSource,
) -> Result<CleSolution> {
    if burgers.norm() == 0.0 {
        return Err(Error::Invalid("zero Burgers vector".into()));
    }
    if c.legendre_hadamard_min() <= 0.0 {
        return Err(Error::Invalid("elastic tensor violates the Legendre–Hadamard condition".into()));
    }
    if let TensorSource::Isotropic { nu, .. } = source {
        return Ok(CleSolution { burgers: *burgers, core, source, kind: CleKind::Isotropic { nu } });
    }
    let eig = match stroh_eigen(c) {
        Ok(e) => e,
        Err(Error::DegenerateSextic(sep)) => {
            warn!("near-degenerate sextic roots (separation {sep:.2e}); perturbing the tensor");
            let scale = c.c.amax() * 1e-8;
            let mut cp = c.clone();
            for i in 0..6 {
                for j in 0..6 {
                    cp.c[(i, j)] += scale * ((i * 6 + j) % 5) as f64 * if i == j { 1.0 } else { 0.0 };
                }
            }
            stroh_eigen(&cp)?
        }
        Err(e) => return Err(e),
    };
    let (p, a, b) = eig;
    let bc = burgers.map(|x| Complex64::new(x, 0.0));
    let w = [b[0].dot(&bc), b[1].dot(&bc), b[2].dot(&bc)];
    Ok(CleSolution { burgers: *burgers, core, source, kind: CleKind::Stroh { p, a, w } })
}

impl CleSolution {
    /// The zero field, for defect-free reference runs.
    pub fn zero(core: Vector2<f64>) -> Self {
        Self { burgers: Vector3::zeros(), core, source: TensorSource::CauchyBorn, kind: CleKind::Zero }
    }

    pub fn displacement(&self, x: &Vector2<f64>) -> Vector3<f64> {
        let y = x - self.core;
        match &self.kind {
            CleKind::Stroh { p, a, w } => {
                let mut acc = Vector3::<Complex64>::zeros();
                for k in 0..3 {
                    let z = Complex64::new(y.x, 0.0) + p[k] * y.y;
                    let lz = Complex64::new(z.norm().ln(), carg_2pi(z));
                    acc += a[k] * (w[k] * lz);
                }
                acc.map(|z| z.im / PI)
            }
            CleKind::Isotropic { nu } => isotropic_displacement(&y, &self.burgers, *nu),
            CleKind::Zero => Vector3::zeros(),
        }
    }

    /// `∂U_i/∂x_j`.
    pub fn gradient(&self, x: &Vector2<f64>) -> Matrix3x2<f64> {
        let y = x - self.core;
        match &self.kind {
            CleKind::Stroh { p, a, w } => {
                let mut g = Matrix3x2::<Complex64>::zeros();
                for k in 0..3 {
                    let z = Complex64::new(y.x, 0.0) + p[k] * y.y;
                    let col = a[k] * (w[k] / z);
                    g.set_column(0, &(g.column(0) + col));
                    g.set_column(1, &(g.column(1) + col * p[k]));
                }
                g.map(|z| z.im / PI)
            }
            CleKind::Isotropic { nu } => isotropic_gradient(&y, &self.burgers, *nu),
            CleKind::Zero => Matrix3x2::zeros(),
        }
    }
}

fn isotropic_displacement(y: &Vector2<f64>, b: &Vector3<f64>, nu: f64) -> Vector3<f64> {
    let th = arg_2pi(y);
    let r = y.norm();
    let k = b.x / (2.0 * PI);
    let m = 4.0 * (1.0 - nu);
    Vector3::new(
        k * (th + (2.0 * th).sin() / m),
        -k * ((1.0 - 2.0 * nu) / (2.0 * (1.0 - nu)) * r.ln() + (2.0 * th).cos() / m),
        b.z * th / (2.0 * PI),
    )
}

fn isotropic_gradient(y: &Vector2<f64>, b: &Vector3<f64>, nu: f64) -> Matrix3x2<f64> {
    let th = arg_2pi(y);
    let r2 = y.norm_squared();
    let dth = Vector2::new(-y.y / r2, y.x / r2);
    let dlr = Vector2::new(y.x / r2, y.y / r2);
    let k = b.x / (2.0 * PI);
    let c = (1.0 - 2.0 * nu) / (2.0 * (1.0 - nu));
    let d1 = dth * (k * (1.0 + (2.0 * th).cos() / (2.0 * (1.0 - nu))));
    let d2 = -(dlr * (k * c) - dth * (k * (2.0 * th).sin() / (2.0 * (1.0 - nu))));
    let d3 = dth * (b.z / (2.0 * PI));
    Matrix3x2::new(d1.x, d1.y, d2.x, d2.y, d3.x, d3.y)
}

/// Quintic smoothstep clamped to `[0, 1]`, with its derivative.
pub fn smoothstep(t: f64) -> (f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        (t * t * t * (10.0 - 15.0 * t + 6.0 * t * t), 30.0 * t * t * (1.0 - t) * (1.0 - t))
    }
}

/// `ζ(x) = x − b₁₂ η(|x − x̂| / r̂) arg(x − x̂) / (2π)`.
#[derive(Clone, Debug)]
pub struct Zeta {
    pub b12: Vector2<f64>,
    pub core: Vector2<f64>,
    pub r_hat: f64,
}

const ZETA_MAX_ITER: usize = 50;

impl Zeta {
    pub fn new(b12: Vector2<f64>, core: Vector2<f64>, r_hat: f64) -> Result<Self> {
        if r_hat <= b12.norm() {
            return Err(Error::Invalid(format!("r_hat {r_hat} must exceed |b12| = {}", b12.norm())));
        }
        Ok(Self { b12, core, r_hat })
    }

    /// Slip fraction `η · arg / 2π` and its gradient.
    fn phi(&self, x: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let y = x - self.core;
        let r = y.norm();
        if r == 0.0 {
            return (0.0, Vector2::zeros());
        }
        let (eta, deta) = smoothstep(r / self.r_hat);
        let th = arg_2pi(&y) / (2.0 * PI);
        let dth = Vector2::new(-y.y, y.x) / (2.0 * PI * r * r);
        (eta * th, y * (deta * th / (self.r_hat * r)) + dth * eta)
    }

    pub fn apply(&self, x: &Vector2<f64>) -> Vector2<f64> {
        x - self.b12 * self.phi(x).0
    }

    pub fn jacobian(&self, x: &Vector2<f64>) -> Matrix2<f64> {
        Matrix2::identity() - self.b12 * self.phi(x).1.transpose()
    }

    /// `ζ⁻¹(y)` by damped Newton on the slip fraction `s` with `x = y + b₁₂ s`.
    /// Points on the cut stay on the `arg = 0` side.
    pub fn inverse(&self, y: &Vector2<f64>) -> Result<Vector2<f64>> {
        let bb = self.b12.norm_squared();
        if bb == 0.0 {
            return Ok(*y);
        }
        let mut s = 0.0;
        let res = |s: f64| s - self.phi(&(y + self.b12 * s)).0;
        let mut f = res(s);
        for _ in 0..ZETA_MAX_ITER {
            if f.abs() < 1e-14 {
                return Ok(y + self.b12 * s);
            }
            let df = 1.0 - self.phi(&(y + self.b12 * s)).1.dot(&self.b12);
            if df <= 0.0 {
                return Err(Error::InversionFailure([y.x, y.y]));
            }
            let mut step = -f / df;
            let mut accepted = false;
            for _ in 0..30 {
                let fn_ = res(s + step);
                if fn_.abs() < f.abs() || fn_.abs() < 1e-14 {
                    s += step;
                    f = fn_;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if f.abs() < 1e-12 {
            Ok(y + self.b12 * s)
        } else {
            Err(Error::InversionFailure([y.x, y.y]))
        }
    }
}

/// `U⁰ = U^lin ∘ ζ⁻¹` together with the shift field `p⁰ = P ∇U⁰`.
#[derive(Clone, Debug)]
pub struct PredictorField {
    pub cle: CleSolution,
    pub zeta: Zeta,
    /// `3(S−1) × 6` map from `∇U` to the shifts of species `1..S`.
    pub shift_map: DMatrix<f64>,
    pub n_species: usize,
    pub burgers: Vector3<f64>,
    pub r_hat: f64,
}

/// Default core radius: four Burgers lengths.
pub fn default_r_hat(burgers: &Vector3<f64>) -> f64 {
    4.0 * burgers.norm()
}

impl PredictorField {
    /// Builds the predictor, doubling `r_hat` up to three times if `ζ` cannot
    /// be inverted on a dense sample around the core.
    pub fn new(cle: CleSolution, cbd: &CbDerivatives, r_hat: f64) -> Result<Self> {
        let shift_map = cbd.shift_map()?;
        let b12 = Vector2::new(cle.burgers.x, 0.0);
        let mut r = r_hat;
        let mut last = Error::Invalid("r_hat".into());
        for _ in 0..4 {
            let zeta = Zeta::new(b12, cle.core, r)?;
            match check_bijective(&zeta) {
                Ok(()) => {
                    return Ok(Self { burgers: cle.burgers, cle, zeta, shift_map, n_species: cbd.n_species, r_hat: r })
                }
                Err(e) => {
                    warn!("zeta inversion failed for r_hat = {r}; doubling");
                    last = e;
                    r *= 2.0;
                }
            }
        }
        Err(last)
    }

    /// Predictor for a geometry with the chosen tensor source.
    pub fn for_geometry(
        geom: &Geometry,
        cbd: &CbDerivatives,
        cb_tensor: &ElasticTensor,
        source: TensorSource,
        r_hat: f64,
    ) -> Result<Self> {
        let c = source.tensor(cb_tensor, &geom.frame.rotation)?;
        let cle = solve_cle(&c, &geom.frame.burgers, geom.frame.core, source)?;
        Self::new(cle, cbd, r_hat)
    }

    pub fn core(&self) -> Vector2<f64> {
        self.zeta.core
    }

    pub fn b12(&self) -> Vector2<f64> {
        self.zeta.b12
    }

    pub fn u0(&self, x: &Vector2<f64>) -> Result<Vector3<f64>> {
        Ok(self.cle.displacement(&self.zeta.inverse(x)?))
    }

    /// `∇U⁰ = ∇U^lin(ζ⁻¹(x)) · Dζ(ζ⁻¹(x))⁻¹`.
    pub fn grad_u0(&self, x: &Vector2<f64>) -> Result<Matrix3x2<f64>> {
        let xi = self.zeta.inverse(x)?;
        self.grad_at(&xi, x)
    }

    fn grad_at(&self, xi: &Vector2<f64>, x: &Vector2<f64>) -> Result<Matrix3x2<f64>> {
        let j = self.zeta.jacobian(xi).try_inverse().ok_or(Error::InversionFailure([x.x, x.y]))?;
        Ok(self.cle.gradient(xi) * j)
    }

    /// Shifts of all species (species 0 is zero) for a given `∇U`.
    pub fn p0_from_grad(&self, g: &Matrix3x2<f64>) -> Vec<Vector3<f64>> {
        let mut f = nalgebra::DVector::zeros(6);
        for i in 0..3 {
            for j in 0..2 {
                f[fidx(i, j)] = g[(i, j)];
            }
        }
        let p = &self.shift_map * f;
        let mut out = vec![Vector3::zeros(); self.n_species];
        for s in 1..self.n_species {
            out[s] = Vector3::new(p[3 * (s - 1)], p[3 * (s - 1) + 1], p[3 * (s - 1) + 2]);
        }
        out
    }

    pub fn p0(&self, x: &Vector2<f64>) -> Result<Vec<Vector3<f64>>> {
        Ok(self.p0_from_grad(&self.grad_u0(x)?))
    }

    /// `u⁰_α(x) = U⁰(x) + p⁰_α(x)` for every species.
    pub fn atoms(&self, x: &Vector2<f64>) -> Result<Vec<Vector3<f64>>> {
        let xi = self.zeta.inverse(x)?;
        let u = self.cle.displacement(&xi);
        let p = self.p0_from_grad(&self.grad_at(&xi, x)?);
        Ok(p.into_iter().map(|p| u + p).collect())
    }

    /// Slipped predictor `S₀u⁰`: below the cut plane `x₂ < x̂₂` it is
    /// `u⁰(x − b₁₂) − b`.
    pub fn slipped_atoms(&self, x: &Vector2<f64>) -> Result<Vec<Vector3<f64>>> {
        if x.y < self.core().y {
            let v = self.atoms(&(x - self.b12()))?;
            Ok(v.into_iter().map(|u| u - self.burgers).collect())
        } else {
            self.atoms(x)
        }
    }
}

fn check_bijective(z: &Zeta) -> Result<()> {
    let n_r = 40;
    let n_t = 64;
    for i in 0..n_r {
        let r = 3.0 * z.r_hat * (i as f64 + 0.5) / n_r as f64;
        for k in 0..n_t {
            let t = 2.0 * PI * (k as f64 + 0.37) / n_t as f64;
            let y = z.core + Vector2::new(r * t.cos(), r * t.sin());
            let x = z.inverse(&y)?;
            if (z.apply(&x) - y).norm() > 1e-9 {
                return Err(Error::InversionFailure([y.x, y.y]));
            }
        }
    }
    Ok(())
}

/// Predictor atom displacements at a lattice site, cached by site index for
/// stored sites and evaluated directly elsewhere.
pub struct SiteValues<'a> {
    pub pred: &'a PredictorField,
    pub domain: &'a Domain,
    pub lattice2d: Matrix2<f64>,
    stored: Vec<Vec<Vector3<f64>>>,
}

impl<'a> SiteValues<'a> {
    pub fn new(pred: &'a PredictorField, domain: &'a Domain, lattice2d: Matrix2<f64>) -> Result<Self> {
        use rayon::prelude::*;
        let stored = domain.positions.par_iter().map(|x| pred.atoms(x)).collect::<Result<Vec<_>>>()?;
        Ok(Self { pred, domain, lattice2d, stored })
    }

    pub fn get(&self, n: [i64; 2], alpha: usize) -> Result<Vector3<f64>> {
        match self.domain.index_of(n) {
            Some(i) => Ok(self.stored[i][alpha]),
            None => {
                let x = self.lattice2d * Vector2::new(n[0] as f64, n[1] as f64);
                Ok(self.pred.atoms(&x)?[alpha])
            }
        }
    }

    pub fn at_site(&self, i: usize) -> &[Vector3<f64>] {
        &self.stored[i]
    }
}

/// Elastic strain `e_t(ℓ)` of one stencil triple at stored site `i`: the
/// slipped difference of the predictor on `Ω_Γ`, the plain one elsewhere.
pub fn elastic_strain(vals: &SiteValues, stencil: &InteractionStencil, i: usize, t: usize) -> Result<Vector3<f64>> {
    let d = vals.domain;
    let tr = &stencil.triples[t];
    let (m, l_below, m_below) = d.slip_target(i, tr.n, &tr.rho);
    let mut e = vals.get(m, tr.beta)? - vals.at_site(i)[tr.alpha];
    if l_below != m_below {
        let b = vals.pred.burgers;
        e += if l_below { b } else { -b };
    }
    Ok(e)
}

/// Elastic strains of the listed triples at every listed site.
pub fn elastic_strains(
    vals: &SiteValues,
    stencil: &InteractionStencil,
    sites: &[usize],
    triples: &[usize],
) -> Result<Vec<Vec<Vector3<f64>>>> {
    use rayon::prelude::*;
    sites.par_iter().map(|&i| triples.iter().map(|&t| elastic_strain(vals, stencil, i, t)).collect()).collect()
}
