mod common;

use std::sync::OnceLock;

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use dislocore::analysis::decay_fit;
use dislocore::cbmodel::dynamical_matrix;
use dislocore::energy::{DefectModel, Setup, SlipOps};
use dislocore::lattice::{Geometry, SILICON_R_CUT};
use dislocore::potential::{sw_silicon, toy_pair_ml, SitePotential};
use dislocore::predictor::TensorSource;

fn toy_model() -> &'static DefectModel {
    static MODEL: OnceLock<DefectModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        Setup::new(Geometry::toy_edge().unwrap(), toy_pair_ml(), TensorSource::CauchyBorn, None)
            .unwrap()
            .model(10.0)
            .unwrap()
    })
}

fn silicon_site() -> &'static (Geometry, Box<dyn SitePotential>) {
    static SITE: OnceLock<(Geometry, Box<dyn SitePotential>)> = OnceLock::new();
    SITE.get_or_init(|| {
        let g = Geometry::silicon_edge(SILICON_R_CUT).unwrap();
        let v = sw_silicon().bind(&g.ml, &g.stencil);
        (g, v)
    })
}

fn power_samples(slope: f64, amp: f64, log: bool) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in -70i64..=70 {
        for j in -70i64..=70 {
            let r = ((i * i + j * j) as f64).sqrt();
            if r >= 1.0 {
                out.push((r, amp * r.powf(slope) * if log { r.ln() } else { 1.0 }));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fit_recovers_constructed_slopes(slope in -3.5f64..-0.5, amp in 0.01f64..100.0, log in any::<bool>()) {
        let fit = decay_fit(&power_samples(slope, amp, log), (10.0, 60.0), log).unwrap();
        prop_assert!((fit.slope - slope).abs() <= 0.05, "{} vs {slope}", fit.slope);
    }

    #[test]
    fn gradient_matches_differences_for_random_fields(seed in any::<u64>()) {
        let e = gradient_fd_error(toy_model(), 5, seed);
        prop_assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn symbol_is_hermitian_with_conjugate_reflection(k1 in -0.5f64..0.5, k2 in -0.5f64..0.5) {
        let (g, v) = toy();
        let h = dynamical_matrix(v.as_ref(), &g.stencil);
        let a = h.eval([k1, k2]);
        let b = h.eval([-k1, -k2]);
        let scale = a.iter().map(|z| z.norm()).fold(1e-300, f64::max);
        prop_assert!((&a - a.adjoint()).camax() <= 1e-13 * scale);
        prop_assert!((&a - b.conjugate()).camax() <= 1e-13 * scale);
    }

    #[test]
    fn slip_then_unslip_is_identity(l1 in -40i64..40, l2 in -40i64..40) {
        let m = toy_model();
        let ops = SlipOps { b12: m.domain.b12.unwrap(), burgers: m.pred.burgers, core: m.domain.core, lattice2d: m.lattice2d };
        let f = |n: [i64; 2]| Vector3::new(n[0] as f64, n[1] as f64, (n[0] * n[1]) as f64);
        prop_assert_eq!(ops.r(|k| ops.s(f, k), [l1, l2]), f([l1, l2]));
    }

    #[test]
    fn site_energy_is_invariant_under_rotation_about_the_line(angle in -3.0f64..3.0, seed in any::<u64>()) {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        let (_, v) = silicon_site();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.gen_range(-0.5..0.5);
        let g: Vec<Vector3<f64>> = v.ref_gaps().iter().map(|_| 0.02 * Vector3::new(next(), next(), next())).collect();
        let rotated: Vec<Vector3<f64>> =
            v.ref_gaps().iter().zip(&g).map(|(r0, gi)| rot * (r0 + gi) - r0).collect();
        let (a, b) = (v.evaluate(&g), v.evaluate(&rotated));
        prop_assert!((a - b).abs() <= 1e-11 * a.abs().max(1.0), "{a} vs {b}");
    }
}
