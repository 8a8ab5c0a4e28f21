//! Cauchy–Born density, its second-derivative blocks, the relaxed elastic
//! tensor, the dynamical matrix and the periodic lattice Green's matrix.
//!
//! Deformation gradients are 3×2 (fields do not vary along the line) and are
//! flattened as `F[i][j] ↦ 2i + j`. Shift blocks carry all species; the
//! uniform-shift null direction is removed by fixing species 0.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Matrix3x2, SMatrix, SymmetricEigen, Vector2, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::{freq, Fft2};
use crate::lattice::InteractionStencil;
use crate::potential::{HessBlock, SitePotential};

pub type Matrix6 = SMatrix<f64, 6, 6>;

/// Flattened index of `F[i][j]`.
#[inline]
pub fn fidx(i: usize, j: usize) -> usize {
    2 * i + j
}

/// Second derivatives of `W(F, p)` at the reference.
#[derive(Clone, Debug)]
pub struct CbDerivatives {
    pub n_species: usize,
    pub d2_ff: Matrix6,
    /// 6 × 3S
    pub d2_fp: DMatrix<f64>,
    /// 3S × 3S
    pub d2_pp: DMatrix<f64>,
}

/// `W(F, p) = V((Fρ + p_β − p_α))`.
pub fn cb_density(v: &dyn SitePotential, stencil: &InteractionStencil, f: &Matrix3x2<f64>, p: &[Vector3<f64>]) -> f64 {
    let g: Vec<Vector3<f64>> = v
        .active()
        .iter()
        .map(|&t| {
            let tr = &stencil.triples[t];
            f * tr.rho + p[tr.beta] - p[tr.alpha]
        })
        .collect();
    v.evaluate(&g)
}

pub fn cb_derivatives(v: &dyn SitePotential, stencil: &InteractionStencil) -> CbDerivatives {
    let zero = vec![Vector3::zeros(); v.active().len()];
    cb_derivatives_from_blocks(v.active(), stencil, &v.d2(&zero))
}

pub(crate) fn cb_derivatives_from_blocks(
    active: &[usize],
    stencil: &InteractionStencil,
    blocks: &[HessBlock],
) -> CbDerivatives {
    let s = stencil.n_species;
    let mut ff = Matrix6::zeros();
    let mut fp = DMatrix::zeros(6, 3 * s);
    let mut pp = DMatrix::zeros(3 * s, 3 * s);
    for b in blocks {
        let tk = &stencil.triples[active[b.i]];
        let tl = &stencil.triples[active[b.j]];
        let m = &b.m;
        for i in 0..3 {
            for m_ in 0..3 {
                let v = m[(i, m_)];
                if v == 0.0 {
                    continue;
                }
                for j in 0..2 {
                    for n in 0..2 {
                        ff[(fidx(i, j), fidx(m_, n))] += v * tk.rho[j] * tl.rho[n];
                    }
                    fp[(fidx(i, j), 3 * tl.beta + m_)] += v * tk.rho[j];
                    fp[(fidx(i, j), 3 * tl.alpha + m_)] -= v * tk.rho[j];
                }
                pp[(3 * tk.beta + i, 3 * tl.beta + m_)] += v;
                pp[(3 * tk.alpha + i, 3 * tl.alpha + m_)] += v;
                pp[(3 * tk.beta + i, 3 * tl.alpha + m_)] -= v;
                pp[(3 * tk.alpha + i, 3 * tl.beta + m_)] -= v;
            }
        }
    }
    CbDerivatives { n_species: s, d2_ff: ff, d2_fp: fp, d2_pp: pp }
}

impl CbDerivatives {
    /// Shift blocks with species 0 removed (the shift quotient).
    pub fn quotient(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let q = 3 * (self.n_species - 1);
        let pp = self.d2_pp.view((3, 3), (q, q)).into_owned();
        let fp = self.d2_fp.view((0, 3), (6, q)).into_owned();
        (fp, pp)
    }

    /// Linear map `∇U ↦ p` solving `d2_pp p = −d2_pF ∇U` with `p₀ = 0`;
    /// rows are `3(S−1)` shift components of species `1..S`.
    pub fn shift_map(&self) -> Result<DMatrix<f64>> {
        if self.n_species == 1 {
            return Ok(DMatrix::zeros(0, 6));
        }
        let (fp, pp) = self.quotient();
        let chol = Cholesky::new(pp).ok_or(Error::SingularShiftHessian)?;
        Ok(-chol.solve(&fp.transpose()))
    }
}

/// Relaxed elastic tensor `C_{ijkl}` with `j, l` in-plane derivative indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticTensor {
    pub c: Matrix6,
}

pub fn elastic_tensor(cbd: &CbDerivatives) -> Result<ElasticTensor> {
    if cbd.n_species == 1 {
        return Ok(ElasticTensor { c: cbd.d2_ff });
    }
    let (fp, _) = cbd.quotient();
    let map = cbd.shift_map()?;
    let corr = &fp * &map;
    let mut c = cbd.d2_ff;
    for i in 0..6 {
        for j in 0..6 {
            c[(i, j)] += corr[(i, j)];
        }
    }
    Ok(ElasticTensor { c })
}

impl ElasticTensor {
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.c[(fidx(i, j), fidx(k, l))]
    }

    pub fn major_asymmetry(&self) -> f64 {
        (self.c - self.c.transpose()).amax()
    }

    /// Acoustic tensor `K_{ik}(n) = C_{ijkl} n_j n_l`.
    pub fn acoustic(&self, n: &Vector2<f64>) -> Matrix3<f64> {
        Matrix3::from_fn(|i, k| {
            let mut s = 0.0;
            for j in 0..2 {
                for l in 0..2 {
                    s += self.get(i, j, k, l) * n[j] * n[l];
                }
            }
            s
        })
    }

    /// Minimum of `a·K(n)a` over unit `a` and sampled unit `n`.
    pub fn legendre_hadamard_min(&self) -> f64 {
        (0..720)
            .map(|k| {
                let th = PI * k as f64 / 720.0;
                let k = self.acoustic(&Vector2::new(th.cos(), th.sin()));
                SymmetricEigen::new((k + k.transpose()) * 0.5).eigenvalues.min()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Rotates a full 3D stiffness (crystal axes) into the frame and keeps the
    /// in-plane derivative indices.
    pub fn from_full(full: &[[[[f64; 3]; 3]; 3]; 3], rotation: &Matrix3<f64>) -> Self {
        let r = rotation;
        let mut c = Matrix6::zeros();
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..3 {
                    for l in 0..2 {
                        let mut s = 0.0;
                        for a in 0..3 {
                            for b in 0..3 {
                                for cc in 0..3 {
                                    for d in 0..3 {
                                        s += r[(i, a)] * r[(j, b)] * r[(k, cc)] * r[(l, d)] * full[a][b][cc][d];
                                    }
                                }
                            }
                        }
                        c[(fidx(i, j), fidx(k, l))] = s;
                    }
                }
            }
        }
        Self { c }
    }
}

/// Full stiffness from 21 Voigt constants (row-major upper triangle).
pub fn voigt_to_full(v21: &[f64]) -> Result<[[[[f64; 3]; 3]; 3]; 3]> {
    if v21.len() != 21 {
        return Err(Error::Invalid(format!("expected 21 Voigt constants, got {}", v21.len())));
    }
    let mut m = [[0.0; 6]; 6];
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            m[i][j] = v21[k];
            m[j][i] = v21[k];
            k += 1;
        }
    }
    let voigt = |i: usize, j: usize| match (i, j) {
        (0, 0) => 0,
        (1, 1) => 1,
        (2, 2) => 2,
        (1, 2) | (2, 1) => 3,
        (0, 2) | (2, 0) => 4,
        _ => 5,
    };
    let mut c = [[[[0.0; 3]; 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    c[i][j][k][l] = m[voigt(i, j)][voigt(k, l)];
                }
            }
        }
    }
    Ok(c)
}

/// Isotropic stiffness from shear modulus and Poisson ratio.
pub fn isotropic_full(mu: f64, nu: f64) -> [[[[f64; 3]; 3]; 3]; 3] {
    let lambda = 2.0 * mu * nu / (1.0 - 2.0 * nu);
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let mut c = [[[[0.0; 3]; 3]; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    c[i][j][k][l] = lambda * d(i, j) * d(k, l) + mu * (d(i, k) * d(j, l) + d(i, l) * d(j, k));
                }
            }
        }
    }
    c
}

/// Coefficients of one stencil difference in Fourier space, as
/// `(dof block, factor)` with block 0 = `U` and block μ = `p_μ`.
fn symbol_row(n: [i64; 2], alpha: usize, beta: usize, k: [f64; 2]) -> Vec<(usize, Complex64)> {
    let th = 2.0 * PI * (k[0] * n[0] as f64 + k[1] * n[1] as f64);
    let e = Complex64::from_polar(1.0, th);
    let mut row = vec![(0, e - 1.0)];
    if beta != 0 {
        row.push((beta, e));
    }
    if alpha != 0 {
        row.push((alpha, Complex64::new(-1.0, 0.0)));
    }
    row
}

/// Fourier symbol of the homogeneous Hessian in `(U, p₁ … p_{S−1})` variables.
#[derive(Clone, Debug)]
pub struct DynamicalMatrix {
    pub n_species: usize,
    /// `(n, α, β)` of every active argument.
    args: Vec<([i64; 2], usize, usize)>,
    pub blocks: Vec<HessBlock>,
    /// `(n, α, β)` of every stencil triple, for the a₁ symbol.
    stencil_triples: Vec<([i64; 2], usize, usize)>,
}

pub fn dynamical_matrix(v: &dyn SitePotential, stencil: &InteractionStencil) -> DynamicalMatrix {
    let zero = vec![Vector3::zeros(); v.active().len()];
    dynamical_matrix_from_blocks(v.active(), stencil, v.d2(&zero))
}

pub(crate) fn dynamical_matrix_from_blocks(
    active: &[usize],
    stencil: &InteractionStencil,
    blocks: Vec<HessBlock>,
) -> DynamicalMatrix {
    let args = active
        .iter()
        .map(|&t| {
            let tr = &stencil.triples[t];
            (tr.n, tr.alpha, tr.beta)
        })
        .collect();
    let stencil_triples = stencil.triples.iter().map(|t| (t.n, t.alpha, t.beta)).collect();
    DynamicalMatrix { n_species: stencil.n_species, args, blocks, stencil_triples }
}

impl DynamicalMatrix {
    pub fn dim(&self) -> usize {
        3 * self.n_species
    }

    /// `Ĥ(ξ)` at reduced wave vector `k` (`ξ·ρ = k·n`).
    pub fn eval(&self, k: [f64; 2]) -> DMatrix<Complex64> {
        let rows: Vec<Vec<(usize, Complex64)>> = self.args.iter().map(|&(n, a, b)| symbol_row(n, a, b, k)).collect();
        let d = self.dim();
        let mut h = DMatrix::<Complex64>::zeros(d, d);
        for blk in &self.blocks {
            for &(x, cx) in &rows[blk.i] {
                for &(y, cy) in &rows[blk.j] {
                    let f = cx.conj() * cy;
                    for r in 0..3 {
                        for c in 0..3 {
                            h[(3 * x + r, 3 * y + c)] += f * blk.m[(r, c)];
                        }
                    }
                }
            }
        }
        h
    }

    /// Symbol of the a₁ seminorm, `Σ_R B*B ⊗ I₃`.
    pub fn a1_symbol(&self, k: [f64; 2]) -> DMatrix<Complex64> {
        let d = self.dim();
        let mut a = DMatrix::<Complex64>::zeros(d, d);
        for &(n, al, be) in &self.stencil_triples {
            let row = symbol_row(n, al, be, k);
            for &(x, cx) in &row {
                for &(y, cy) in &row {
                    let f = cx.conj() * cy;
                    for r in 0..3 {
                        a[(3 * x + r, 3 * y + r)] += f;
                    }
                }
            }
        }
        a
    }

    /// Smallest eigenvalue of `Ĥ(ξ)` relative to the a₁ symbol.
    pub fn normalized_min_eigenvalue(&self, k: [f64; 2]) -> Option<f64> {
        let h = self.eval(k);
        let a = self.a1_symbol(k);
        let l = Cholesky::new(a)?.l();
        let x = l.solve_lower_triangular(&h)?;
        let m = l.solve_lower_triangular(&x.adjoint())?;
        let m = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
        Some(SymmetricEigen::new(m).eigenvalues.min())
    }
}

#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub grid_n: usize,
    pub min_normalized: f64,
    pub argmin: [f64; 2],
}

pub fn stability_scan(h: &DynamicalMatrix, grid_n: usize) -> Result<StabilityReport> {
    if grid_n < 8 {
        return Err(Error::Invalid("stability grid must be at least 8".into()));
    }
    let ks: Vec<[f64; 2]> = (0..grid_n)
        .flat_map(|i| (0..grid_n).map(move |j| (i, j)))
        .filter(|&(i, j)| (i, j) != (0, 0))
        .map(|(i, j)| [i as f64 / grid_n as f64, j as f64 / grid_n as f64])
        .collect();
    let vals: Vec<(f64, [f64; 2])> =
        ks.par_iter().map(|&k| (h.normalized_min_eigenvalue(k).unwrap_or(f64::NEG_INFINITY), k)).collect();
    let (min, argmin) = vals.iter().copied().fold((f64::INFINITY, [0.0, 0.0]), |a, b| if b.0 < a.0 { b } else { a });
    if min <= 0.0 {
        return Err(Error::UnstablePotential { value: min, k: argmin });
    }
    Ok(StabilityReport { grid_n, min_normalized: min, argmin })
}

/// Periodic Green's matrix columns for `U` and one shift species.
#[derive(Clone, Debug)]
pub struct GreenField {
    pub n: usize,
    pub column_species: usize,
    /// Per cell, row-major `(i, j)`: `G₀₀`.
    pub g00: Vec<Matrix3<f64>>,
    /// `G₀p` with columns of `p_μ`, μ = `column_species`.
    pub g0p: Vec<Matrix3<f64>>,
    /// `G_pp` rows for all shifts, columns of `p_μ`: `3(S−1) × 3`.
    pub gpp: Vec<DMatrix<f64>>,
}

impl GreenField {
    pub fn idx(&self, i: i64, j: i64) -> usize {
        let n = self.n as i64;
        (i.rem_euclid(n) * n + j.rem_euclid(n)) as usize
    }
}

/// Inverse DFT of `Ĥ(ξ)⁻¹` on the `n × n` dual grid, with the translation
/// block at `ξ = 0` projected out.
pub fn greens_supercell(h: &DynamicalMatrix, n: usize, column_species: usize) -> Result<GreenField> {
    if !n.is_power_of_two() {
        return Err(Error::Invalid("supercell size must be a power of two".into()));
    }
    let s = h.n_species;
    if s < 2 || column_species == 0 || column_species >= s {
        return Err(Error::Invalid("Green's shift column needs a species index in 1..S".into()));
    }
    let d = h.dim();
    let q = d - 3;
    let ncomp = 9 + 9 + 3 * q;
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let cols = [0usize, 1, 2, 3 * column_species, 3 * column_species + 1, 3 * column_species + 2];
    let spectra: Vec<Result<Vec<Complex64>>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let k = [i as f64 / n as f64, j as f64 / n as f64];
            let hk = h.eval(k);
            let mut x = DMatrix::<Complex64>::zeros(d, 6);
            if i == 0 && j == 0 {
                let hp = hk.view((3, 3), (q, q)).into_owned();
                let lu = hp.lu();
                let mut rhs = DMatrix::<Complex64>::zeros(q, 3);
                for c in 0..3 {
                    rhs[(cols[3 + c] - 3, c)] = Complex64::new(1.0, 0.0);
                }
                let sol = lu.solve(&rhs).ok_or(Error::SingularMode(k))?;
                for c in 0..3 {
                    for r in 0..q {
                        x[(3 + r, 3 + c)] = sol[(r, c)];
                    }
                }
            } else {
                let mut rhs = DMatrix::<Complex64>::zeros(d, 6);
                for (c, &col) in cols.iter().enumerate() {
                    rhs[(col, c)] = Complex64::new(1.0, 0.0);
                }
                x = hk.lu().solve(&rhs).ok_or(Error::SingularMode(k))?;
            }
            let mut out = Vec::with_capacity(ncomp);
            for r in 0..3 {
                for c in 0..3 {
                    out.push(x[(r, c)]);
                }
            }
            for r in 0..3 {
                for c in 0..3 {
                    out.push(x[(r, 3 + c)]);
                }
            }
            for r in 0..q {
                for c in 0..3 {
                    out.push(x[(3 + r, 3 + c)]);
                }
            }
            Ok(out)
        })
        .collect();
    let spectra: Vec<Vec<Complex64>> = spectra.into_iter().collect::<Result<_>>()?;
    let fft = Fft2::new(n);
    let scale = 1.0 / (n * n) as f64;
    let real: Vec<Vec<f64>> = (0..ncomp)
        .into_par_iter()
        .map(|c| {
            let mut buf: Vec<Complex64> = spectra.iter().map(|v| v[c]).collect();
            fft.inverse(&mut buf);
            buf.iter().map(|z| z.re * scale).collect()
        })
        .collect();
    let m = n * n;
    let mut g00 = vec![Matrix3::zeros(); m];
    let mut g0p = vec![Matrix3::zeros(); m];
    let mut gpp = vec![DMatrix::zeros(q, 3); m];
    for cell in 0..m {
        for r in 0..3 {
            for c in 0..3 {
                g00[cell][(r, c)] = real[3 * r + c][cell];
                g0p[cell][(r, c)] = real[9 + 3 * r + c][cell];
            }
        }
        for r in 0..q {
            for c in 0..3 {
                gpp[cell][(r, c)] = real[18 + 3 * r + c][cell];
            }
        }
    }
    Ok(GreenField { n, column_species, g00, g0p, gpp })
}

/// The homogeneous Hessian acting on periodic `n × n` fields in
/// `(U, p₁ … p_{S−1})` layout, `3S` values per cell.
pub struct PeriodicHessian<'a> {
    pub h: &'a DynamicalMatrix,
    pub n: usize,
}

impl PeriodicHessian<'_> {
    fn species_value(&self, x: &[f64], cell: usize, species: usize) -> Vector3<f64> {
        let s = self.h.n_species;
        let base = cell * 3 * s;
        let u = Vector3::new(x[base], x[base + 1], x[base + 2]);
        if species == 0 {
            u
        } else {
            u + Vector3::new(x[base + 3 * species], x[base + 3 * species + 1], x[base + 3 * species + 2])
        }
    }

    /// Returns `(Hx, ⟨x, Hx⟩)`.
    pub fn apply(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let n = self.n as i64;
        let s = self.h.n_species;
        let na = self.h.args.len();
        let mut gu = vec![Vector3::zeros(); (n * n) as usize * s];
        let mut quad = 0.0;
        let mut d = vec![Vector3::zeros(); na];
        let mut sv = vec![Vector3::zeros(); na];
        for i in 0..n {
            for j in 0..n {
                let cell = (i * n + j) as usize;
                for (k, &(rn, a, b)) in self.h.args.iter().enumerate() {
                    let m = ((i + rn[0]).rem_euclid(n) * n + (j + rn[1]).rem_euclid(n)) as usize;
                    d[k] = self.species_value(x, m, b) - self.species_value(x, cell, a);
                }
                sv.iter_mut().for_each(|v| *v = Vector3::zeros());
                for blk in &self.h.blocks {
                    sv[blk.i] += blk.m * d[blk.j];
                }
                for (k, &(rn, a, b)) in self.h.args.iter().enumerate() {
                    quad += d[k].dot(&sv[k]);
                    let m = ((i + rn[0]).rem_euclid(n) * n + (j + rn[1]).rem_euclid(n)) as usize;
                    gu[m * s + b] += sv[k];
                    gu[cell * s + a] -= sv[k];
                }
            }
        }
        let mut out = vec![0.0; x.len()];
        for cell in 0..(n * n) as usize {
            let base = cell * 3 * s;
            let mut tot = Vector3::zeros();
            for sp in 0..s {
                tot += gu[cell * s + sp];
                if sp > 0 {
                    for c in 0..3 {
                        out[base + 3 * sp + c] = gu[cell * s + sp][c];
                    }
                }
            }
            for c in 0..3 {
                out[base + c] = tot[c];
            }
        }
        (out, quad)
    }
}

/// Residuals of the linearized Cauchy–Born system on a periodic grid.
#[derive(Clone, Debug)]
pub struct EquivalenceResidual {
    /// Weak residual of the mixed system against the standard-form load,
    /// relative to test and field norms (sup over test fields).
    pub mixed: f64,
    /// Relative size of the shift equation `d2_pF ∇U + d2_pp p`.
    pub shift_equation: f64,
}

/// Checks the equivalence of the mixed `(U, p)` linear Cauchy–Born system and
/// the standard form `−∇·(C∇U) = f`. Fields live on an `n × n` grid over
/// `[0, 2π)²`: `u` has 3 and `p` has `3(S−1)` components per point.
pub fn cb_equivalence_check(
    cbd: &CbDerivatives,
    n: usize,
    u: &[Vec<f64>],
    p: &[Vec<f64>],
    n_tests: usize,
    seed: u64,
) -> Result<EquivalenceResidual> {
    let c = elastic_tensor(cbd)?;
    let (fp, pp) = cbd.quotient();
    let q = pp.nrows();
    let fft = Fft2::new(n);
    let m = n * n;
    let spectral = |f: &[f64], dir: usize| -> Vec<f64> {
        let mut buf: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.forward(&mut buf);
        for i in 0..n {
            for j in 0..n {
                let kk = if dir == 0 { freq(i, n) } else { freq(j, n) };
                let kk = if (dir == 0 && i == n / 2) || (dir == 1 && j == n / 2) { 0.0 } else { kk };
                buf[i * n + j] *= Complex64::new(0.0, kk);
            }
        }
        fft.inverse(&mut buf);
        buf.iter().map(|z| z.re / m as f64).collect()
    };
    // ∇U
    let mut grad = vec![vec![0.0; m]; 6];
    for i in 0..3 {
        for j in 0..2 {
            grad[fidx(i, j)] = spectral(&u[i], j);
        }
    }
    let div = |sig: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..3)
            .map(|i| {
                let a = spectral(&sig[fidx(i, 0)], 0);
                let b = spectral(&sig[fidx(i, 1)], 1);
                a.iter().zip(&b).map(|(x, y)| -(x + y)).collect()
            })
            .collect()
    };
    let mut sig_std = vec![vec![0.0; m]; 6];
    let mut sig_mix = vec![vec![0.0; m]; 6];
    let mut rp = vec![vec![0.0; m]; q];
    for x in 0..m {
        let g = DVector::from_fn(6, |a, _| grad[a][x]);
        let pv = DVector::from_fn(q, |a, _| p[a][x]);
        let s1 = c.c * nalgebra::SVector::<f64, 6>::from_iterator(g.iter().copied());
        let s2 = cbd.d2_ff * nalgebra::SVector::<f64, 6>::from_iterator(g.iter().copied()) + {
            let t = &fp * &pv;
            nalgebra::SVector::<f64, 6>::from_iterator(t.iter().copied())
        };
        let r = fp.transpose() * &g + &pp * &pv;
        for a in 0..6 {
            sig_std[a][x] = s1[a];
            sig_mix[a][x] = s2[a];
        }
        for a in 0..q {
            rp[a][x] = r[a];
        }
    }
    let f = div(&sig_std);
    let ru = div(&sig_mix);
    let norm = |v: &[Vec<f64>]| v.iter().flat_map(|c| c.iter()).map(|x| x * x).sum::<f64>().sqrt();
    let field_norm = norm(&grad) + norm(p) + 1e-300;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_tests {
        let vt: Vec<Vec<f64>> = (0..3).map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let qt: Vec<Vec<f64>> = (0..q).map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut w = 0.0;
        for i in 0..3 {
            for x in 0..m {
                w += (ru[i][x] - f[i][x]) * vt[i][x];
            }
        }
        for a in 0..q {
            for x in 0..m {
                w += rp[a][x] * qt[a][x];
            }
        }
        let tn = norm(&vt) + norm(&qt);
        worst = worst.max(w.abs() / (tn * field_norm));
    }
    let shift_equation = norm(&rp) / field_norm;
    Ok(EquivalenceResidual { mixed: worst, shift_equation })
}
