//! Property tests for the module invariants.

use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{
    apply_rigid_motion, pushforward_histogram, random_rigid_motion, reconstruct, triangle_map, BinSpec, Sampling,
    TriangleClass,
};
use crate::measure::{
    gen_cantor_product, gen_uniform_cube, measure_fourier, mollify_sample, CantorSpec, DiscreteMeasure, MollifierSpec,
};
use crate::oscillatory::{
    hessian_matrix, phase_gradient, phase_hessian, phase_value, project_to_critical, sample_sigma, sigma_hat_mc,
    FrequencyPair, RotationBlock, SigmaEngine, SigmaMethod, CHART_RADIUS, DET_REL_TOL,
};
use crate::separator::{certify, separate_three, stopping_time, CubeAddress};

fn unit_points(dim: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0..1.0f64, dim), n)
}

fn chart_point(m: usize) -> impl Strategy<Value = (f64, Vec<f64>, Vec<f64>)> {
    let r = CHART_RADIUS / (2.0 * (m as f64 + 1.0).sqrt());
    (-r..r, prop::collection::vec(-r..r, m), prop::collection::vec(-r..r, m))
}

fn freq(dim: usize) -> impl Strategy<Value = FrequencyPair> {
    (
        prop::collection::vec(-5.0..5.0f64, dim),
        prop::collection::vec(-5.0..5.0f64, dim),
    )
        .prop_map(|(xi, eta)| FrequencyPair::new(xi, eta).unwrap())
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fourier_is_hermitian(pts in unit_points(3, 20), xi in prop::collection::vec(-20.0..20.0f64, 3)) {
        let mu = DiscreteMeasure::uniform(3, pts).unwrap();
        let neg: Vec<f64> = xi.iter().map(|v| -v).collect();
        let a = measure_fourier(&mu, &xi);
        let b = measure_fourier(&mu, &neg).conj();
        prop_assert!((a - b).norm() <= 1e-12);
    }

    #[test]
    fn mollification_keeps_mass_and_stays_close(n in 1usize..200, eps in 1e-4..0.5f64, seed: u64) {
        let mu = gen_uniform_cube(2, n, seed).unwrap();
        let moved = mollify_sample(&mu, &MollifierSpec::new(eps).unwrap(), seed ^ 1).unwrap();
        prop_assert_eq!(moved.weights(), mu.weights());
        for (p, q) in mu.points().iter().zip(moved.points()) {
            let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            prop_assert!(d2.sqrt() <= eps);
        }
    }

    #[test]
    fn measure_json_round_trip(pts in unit_points(2, 15)) {
        let mu = DiscreteMeasure::uniform(2, pts).unwrap();
        let back = DiscreteMeasure::from_json(&mu.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.points(), mu.points());
        prop_assert_eq!(back.weights(), mu.weights());
    }

    #[test]
    fn cantor_dimension_in_range(dim in 1usize..=3, ratio in 0.05..0.5f64, depth in 1u32..4, seed: u64) {
        let spec = CantorSpec { dim, ratio, depth, seed, jitter: false };
        let s = spec.nominal_dimension();
        prop_assert!(s > 0.0 && s <= dim as f64 + 1e-12);
        let mu = gen_cantor_product(&spec).unwrap();
        prop_assert_eq!(mu.len(), 1usize << (dim as u32 * depth));
        prop_assert!(mu.points().iter().flatten().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn cube_address_round_trip(p in prop::collection::vec(0.0..1.0f64, 3), level in 0u32..12) {
        let c = CubeAddress::containing(&p, level);
        prop_assert!(c.contains(&p));
        if let Some(parent) = c.parent() {
            prop_assert!(parent.contains(&p));
            prop_assert_eq!(parent.child(&c.offsets()), c);
        }
    }

    #[test]
    fn separations_are_valid_and_certify_is_idempotent(n in 30usize..400, seed: u64) {
        let mu = gen_uniform_cube(2, n, seed).unwrap();
        let sep = separate_three(&mu, 4.0, 2.0, None).unwrap();
        prop_assert!(sep.check(&mu).is_ok());
        prop_assert!(0.0 < sep.c3 && sep.c3 <= sep.c4 && sep.c4 < FRAC_PI_2);
        let again = certify(&sep, &mu).unwrap();
        for (a, b) in [(sep.c1, again.c1), (sep.c2, again.c2), (sep.c3, again.c3), (sep.c4, again.c4)] {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tracked_mass_bound_holds(n in 30usize..400, seed: u64) {
        let mu = gen_uniform_cube(2, n, seed).unwrap();
        let st = stopping_time(&mu, 4.0, 2.0, None).unwrap();
        for step in &st.trace {
            prop_assert!(step.mass >= step.tracked_bound * (1.0 - 1e-12));
        }
    }

    #[test]
    fn triangle_map_is_rigid_invariant(
        pts in unit_points(3, 3),
        seed: u64,
    ) {
        let Ok(a) = triangle_map(&pts[0], &pts[1], &pts[2]) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rot, tau) = random_rigid_motion(3, &mut rng);
        let m: Vec<Vec<f64>> = pts.iter().map(|p| apply_rigid_motion(&rot, &tau, p)).collect();
        let b = triangle_map(&m[0], &m[1], &m[2]).unwrap();
        prop_assert!((a.t - b.t).abs() <= 1e-9);
        prop_assert!((a.r - b.r).abs() <= 1e-9);
        prop_assert!((a.alpha - b.alpha).abs() <= 1e-9);
    }

    #[test]
    fn reconstruction_maps_back(t in 0.01..2.0f64, r in 0.01..2.0f64, alpha in 0.01..(PI - 0.01), dim in 2usize..6) {
        let c = TriangleClass { t, r, alpha };
        let (x, y, z) = reconstruct(&c, dim);
        let back = triangle_map(&x, &y, &z).unwrap();
        prop_assert!((back.t - t).abs() <= 1e-12 * t.max(1.0));
        prop_assert!((back.r - r).abs() <= 1e-12 * r.max(1.0));
        prop_assert!((back.alpha - alpha).abs() <= 1e-12);
    }

    #[test]
    fn histogram_mass_is_conserved(pts in unit_points(2, 12), mc in any::<bool>(), seed: u64) {
        let mu = DiscreteMeasure::uniform(2, pts).unwrap();
        let bins = BinSpec::regular((0.0, 1.0), (0.0, 1.0), (0.0, PI / 2.0), [6, 6, 6]).unwrap();
        let sampling = if mc { Sampling::MonteCarlo { n: 5000, seed } } else { Sampling::Exact };
        let h = pushforward_histogram(&mu, &mu, &mu, &bins, sampling).unwrap();
        prop_assert!(h.mass.iter().all(|m| *m >= 0.0));
        prop_assert!((h.total() + h.out_of_range + h.excluded - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn swapping_first_two_measures_transposes(a in unit_points(2, 6), b in unit_points(2, 7), c in unit_points(2, 5)) {
        let (m1, m2, m3) = (
            DiscreteMeasure::uniform(2, a).unwrap(),
            DiscreteMeasure::uniform(2, b).unwrap(),
            DiscreteMeasure::uniform(2, c).unwrap(),
        );
        let bins = BinSpec::regular((0.0, 1.5), (0.0, 1.5), (0.0, PI), [5, 5, 4]).unwrap();
        let h = pushforward_histogram(&m1, &m2, &m3, &bins, Sampling::Exact).unwrap();
        let g = pushforward_histogram(&m2, &m1, &m3, &bins, Sampling::Exact).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..4 {
                    prop_assert_eq!(h.get(i, j, k), g.get(j, i, k));
                }
            }
        }
    }

    #[test]
    fn rotation_block_orthogonal(alpha in 0.01..(FRAC_PI_2 - 0.01), dim in 2usize..7) {
        let m = RotationBlock::new(alpha).unwrap().matrix(dim);
        for i in 0..dim {
            for j in 0..dim {
                let s: f64 = (0..dim).map(|k| m[k][i] * m[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((s - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn surface_samples_lie_on_the_manifold(dim in 2usize..6, alpha in 0.05..(PI - 0.05), seed: u64) {
        for s in sample_sigma(dim, alpha, 50, seed).unwrap() {
            let nx: f64 = s.x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = s.y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let xy: f64 = s.x.iter().zip(&s.y).map(|(a, b)| a * b).sum();
            prop_assert!((nx - 1.0).abs() <= 1e-10 && (ny - 1.0).abs() <= 1e-10);
            prop_assert!((xy - alpha.cos()).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences(
        (u1, up, vp) in chart_point(2),
        fp in freq(4),
        alpha in 0.1..(FRAC_PI_2 - 0.1),
    ) {
        let g = phase_gradient(u1, &up, &vp, alpha, &fp).unwrap();
        let mut z: Vec<f64> = std::iter::once(u1).chain(up.iter().copied()).chain(vp.iter().copied()).collect();
        let h = 1e-4;
        for k in 0..z.len() {
            let z0 = z[k];
            let f = |z: &[f64]| phase_value(z[0], &z[1..3], &z[3..5], alpha, &fp).unwrap();
            z[k] = z0 + h;
            let fp_ = f(&z);
            z[k] = z0 - h;
            let fm = f(&z);
            z[k] = z0;
            let fd = (fp_ - fm) / (2.0 * h);
            prop_assert!(close(g[k], fd, 1e-8), "component {}: {} vs {}", k, g[k], fd);
        }
    }

    #[test]
    fn hessian_is_constant(
        (a1, au, av) in chart_point(3),
        (b1, bu, bv) in chart_point(3),
        fp in freq(5),
        alpha in 0.1..(FRAC_PI_2 - 0.1),
    ) {
        // the gradient is affine, so its differences recover the Hessian exactly
        let ga = phase_gradient(a1, &au, &av, alpha, &fp).unwrap();
        let gb = phase_gradient(b1, &bu, &bv, alpha, &fp).unwrap();
        let hm = hessian_matrix(alpha, &fp).unwrap();
        let da: Vec<f64> = std::iter::once(b1 - a1)
            .chain(bu.iter().zip(&au).map(|(x, y)| x - y))
            .chain(bv.iter().zip(&av).map(|(x, y)| x - y))
            .collect();
        for i in 0..hm.len() {
            let pred: f64 = (0..hm.len()).map(|j| hm[i][j] * da[j]).sum();
            prop_assert!((gb[i] - ga[i] - pred).abs() <= 1e-12 * 1e3);
            for (j, row) in hm.iter().enumerate() {
                prop_assert!((hm[i][j] - row[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn determinant_identity_at_critical_pairs(dim in 2usize..=5, fp in freq(5), alpha in 0.1..(FRAC_PI_2 - 0.1)) {
        let fp = FrequencyPair::new(fp.xi[..dim].to_vec(), fp.eta[..dim].to_vec()).unwrap();
        let crit = project_to_critical(&fp, alpha);
        let rep = phase_hessian(alpha, &crit, true);
        prop_assert!(rep.is_ok(), "{:?}", rep.err());
        let rep = rep.unwrap();
        let scale = rep.det_direct.abs().max(rep.det_closed.abs());
        prop_assert!(rep.degenerate || (rep.det_direct - rep.det_closed).abs() <= DET_REL_TOL * scale);
    }

    #[test]
    fn sigma_hat_is_bounded(dim in 2usize..=5, fp in freq(5), alpha in 0.1..(PI - 0.1), seed: u64) {
        let fp = FrequencyPair::new(fp.xi[..dim].to_vec(), fp.eta[..dim].to_vec()).unwrap();
        let mc = sigma_hat_mc(&fp, alpha, 500, seed).unwrap();
        prop_assert!(mc.abs() <= 1.0 + 1e-12);
        let zero = sigma_hat_mc(&FrequencyPair::zero(dim), alpha, 10, seed).unwrap();
        prop_assert_eq!(zero.value.re, 1.0);
        prop_assert_eq!(zero.value.im, 0.0);
        let q = SigmaEngine::new(dim, alpha, SigmaMethod::Quadrature).unwrap().evaluate(&fp).unwrap();
        prop_assert!(q.abs() <= 1.0 + 1e-12);
    }
}
