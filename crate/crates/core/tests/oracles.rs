mod common;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use dislocore::cbmodel::{cb_derivatives, cb_equivalence_check, dynamical_matrix, elastic_tensor, PeriodicHessian};
use dislocore::energy::Setup;
use dislocore::fft::Fft2;
use dislocore::lattice::{Geometry, SILICON_R_CUT};
use dislocore::potential::{sw_silicon, toy_pair_ml};
use dislocore::predictor::TensorSource;
use dislocore::solver::{hierarchy_relax, relax, SolverConfig};

fn toy_setup() -> Setup {
    Setup::new(Geometry::toy_edge().unwrap(), toy_pair_ml(), TensorSource::CauchyBorn, None).unwrap()
}

#[test]
fn dynamical_matrix_matches_block_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let toy = toy();
    let si = Geometry::silicon_edge(SILICON_R_CUT).unwrap();
    let si_v = sw_silicon().bind(&si.ml, &si.stencil);
    for (g, v) in [(&toy.0, toy.1.as_ref()), (&si, si_v.as_ref())] {
        let h = dynamical_matrix(v, &g.stencil);
        for _ in 0..4 {
            let k = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let fast = h.eval(k);
            let slow = literal_hamiltonian(v, &g.stencil, k);
            let scale = slow.iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!((&fast - &slow).camax() <= 1e-12 * scale, "k = {k:?}");
        }
    }
}

#[test]
fn schur_tensor_matches_nested_minimisation() {
    let (g, v) = toy();
    let cbd = cb_derivatives(v.as_ref(), &g.stencil);
    let schur = elastic_tensor(&cbd).unwrap().c;
    let nested = nested_elastic_tensor(v.as_ref(), &g.stencil, 1e-2);
    let scale = schur.amax();
    assert!((schur - nested).amax() <= 1e-6 * scale, "{schur}\n{nested}");
}

#[test]
fn mixed_cauchy_born_system_reproduces_standard_form() {
    let (g, v) = toy();
    let cbd = cb_derivatives(v.as_ref(), &g.stencil);
    let map = cbd.shift_map().unwrap();
    let n = 32;
    let (u, grad) = manufactured_displacement(n);
    let q = map.nrows();
    let mut p = vec![vec![0.0; n * n]; q];
    for x in 0..n * n {
        let gv = DVector::from_fn(6, |a, _| grad[a][x]);
        let pv = &map * gv;
        for a in 0..q {
            p[a][x] = pv[a];
        }
    }
    let res = cb_equivalence_check(&cbd, n, &u, &p, 20, 3).unwrap();
    assert!(res.mixed <= 1e-8 && res.shift_equation <= 1e-8, "{res:?}");

    let zeros = vec![vec![0.0; n * n]; 3];
    let zp = vec![vec![0.0; n * n]; q];
    assert_eq!(cb_equivalence_check(&cbd, n, &zeros, &zp, 5, 3).unwrap().mixed, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noisy: Vec<Vec<f64>> = p.iter().map(|c| c.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect()).collect();
    let bad = cb_equivalence_check(&cbd, n, &u, &noisy, 20, 3).unwrap();
    assert!(bad.mixed > 1e-4 && bad.shift_equation > 1e-3, "{bad:?}");
}

#[test]
fn periodic_quadratic_form_obeys_plancherel() {
    let (g, v) = toy();
    let h = dynamical_matrix(v.as_ref(), &g.stencil);
    let n = 16;
    let d = h.dim();
    let ph = PeriodicHessian { h: &h, n };
    let fft = Fft2::new(n);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let symbols: Vec<DMatrix<Complex64>> =
        (0..n * n).map(|c| h.eval([(c / n) as f64 / n as f64, (c % n) as f64 / n as f64])).collect();
    for _ in 0..20 {
        let x: Vec<f64> = (0..n * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, real) = ph.apply(&x);
        let spectra: Vec<Vec<Complex64>> = (0..d)
            .map(|c| {
                let mut buf: Vec<Complex64> = (0..n * n).map(|cell| Complex64::new(x[cell * d + c], 0.0)).collect();
                fft.forward(&mut buf);
                buf
            })
            .collect();
        let mut fourier = Complex64::new(0.0, 0.0);
        for (cell, hk) in symbols.iter().enumerate() {
            let xk = DVector::from_fn(d, |c, _| spectra[c][cell]);
            fourier += (xk.adjoint() * hk * &xk)[(0, 0)];
        }
        fourier /= (n * n) as f64;
        assert!(fourier.im.abs() <= 1e-9 * fourier.re.abs());
        assert!((fourier.re - real).abs() <= 1e-10 * real.abs(), "{} vs {real}", fourier.re);
    }
}

#[test]
fn slipped_differences_split_into_displacement_and_shift_parts() {
    let setup = toy_setup();
    let m = setup.model(10.0).unwrap();
    let (err, slipped, plain) = slip_identity_error(&m, 50, 5, false);
    assert!(slip_identity_error(&m, 1, 5, true).0 > 0.1);
    assert!(slipped > 0 && plain > 0);
    assert!(err <= 1e-13, "{err}");

    let si = Setup::new(Geometry::silicon_edge(SILICON_R_CUT).unwrap(), sw_silicon(), TensorSource::CauchyBorn, None)
        .unwrap();
    let m = si.model(14.0).unwrap();
    let (err, slipped, plain) = slip_identity_error(&m, 3, 6, false);
    assert!(slipped > 0 && plain > 0);
    assert!(err <= 1e-13, "{err}");
}

#[test]
fn relaxed_field_is_critical_along_random_directions() {
    let setup = toy_setup();
    let m = setup.model(10.0).unwrap();
    let r = relax(&m, &SolverConfig { force_tol: 1e-9, ..Default::default() }, None).unwrap();
    assert!(r.converged);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-4;
    for _ in 0..5 {
        let dir: Vec<f64> = (0..m.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut xp = r.field.clone();
        let mut xm = r.field.clone();
        for k in 0..m.n_dofs() {
            xp.dofs[k] += h * dir[k] / norm;
            xm.dofs[k] -= h * dir[k] / norm;
        }
        let slope = (m.energy(&xp).unwrap() - m.energy(&xm).unwrap()) / (2.0 * h);
        assert!(slope.abs() <= 1e-7, "{slope}");
    }
}

#[test]
fn warm_start_saves_iterations() {
    let setup = toy_setup();
    let cfg = SolverConfig { force_tol: 1e-8, ..Default::default() };
    let levels = hierarchy_relax(&setup, &[10.0, 14.0], &cfg).unwrap();
    let cold = relax(&levels[1].model, &cfg, None).unwrap();
    assert!(levels[1].result.converged && cold.converged);
    assert!(levels[1].result.iterations < cold.iterations, "{} vs {}", levels[1].result.iterations, cold.iterations);
    assert!((levels[1].result.energy - cold.energy).abs() <= 1e-8 * cold.energy.abs());
}
