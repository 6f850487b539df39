use lainr_core::harness::{make_latlon_grid, rotate_coeffs, weighted_rmse, Dataset};
use lainr_core::ltsr::{from_bytes, to_bytes, Tensor};
use lainr_core::sinr::{AffineDecoder, FieldSnapshot, LatentState, SinrDims, SinrParams};
use lainr_core::sphere::{real_sph_harm, SphCoeffs, SphericalPoint};
use lainr_core::trainer::recon_loss;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval(c: &SphCoeffs, p: &SphericalPoint) -> f64 {
    c.iter().map(|((l, m), v)| v * real_sph_harm(l, m, p).unwrap()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalization_round_trips(seed in 0u64..1000, k in 1usize..3, t in 1usize..4, c in 1usize..3, scale in 0.1f64..100.0) {
        let shape = [k, t, 4, 3, c];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale) + scale).collect();
        let mut d = Dataset::new(shape, vals.clone(), 1.0, (0..c).map(|i| format!("c{i}")).collect()).unwrap();
        d.normalize();
        prop_assert!(d.values.iter().all(|v| v.is_finite()));
        d.denormalize();
        for (a, b) in d.values.iter().zip(&vals) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn squared_rmse_is_recon_loss(seed in 0u64..1000, nlon in 2usize..10, nlat in 2usize..6, c in 1usize..3) {
        let grid = make_latlon_grid(nlon, nlat);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        let mut snap = || {
            let v = DMatrix::from_fn(grid.len(), c, |_, _| rng.random_range(-2.0..2.0));
            FieldSnapshot::new(grid.clone(), v, names.clone()).unwrap()
        };
        let (a, b) = (snap(), snap());
        let r = weighted_rmse(&a, &b).unwrap();
        let l = recon_loss(&a, &b).unwrap();
        prop_assert!((r * r - l).abs() <= 1e-12 * (1.0 + l));
    }

    #[test]
    fn rotated_coefficients_shift_longitude(seed in 0u64..1000, lmax in 0usize..6, alpha in -7.0f64..7.0, lat in -1.5f64..1.5, lon in -3.1f64..3.1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = SphCoeffs::new();
        for l in 0..=lmax {
            for m in -(l as isize)..=l as isize {
                c.set(l, m, rng.random_range(-1.0..1.0)).unwrap();
            }
        }
        let r = rotate_coeffs(&c, alpha);
        let p = SphericalPoint::from_lat_lon(lat, lon).unwrap();
        let shifted = (lon - alpha).rem_euclid(std::f64::consts::TAU);
        let q = SphericalPoint::from_lat_lon(lat, shifted).unwrap();
        prop_assert!((eval(&r, &p) - eval(&c, &q)).abs() < 1e-9);
    }

    #[test]
    fn ltsr_round_trip_is_bit_exact(dims in prop::collection::vec(1usize..5, 0..4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.random::<u64>() & 0x7fef_ffff_ffff_ffff)).collect();
        let t = Tensor::new(dims, data).unwrap();
        let back = from_bytes(&to_bytes(&t)).unwrap();
        prop_assert_eq!(back.dims, t.dims);
        prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encoding_is_idempotent(seed in 0u64..1000, latent in 2usize..8) {
        let dims = SinrDims { depth: 2, degree: 2, hidden: 6, latent, channels: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sp = SinrParams::init(dims, true, &mut rng);
        let grid = make_latlon_grid(12, 6);
        let dec = AffineDecoder::new(&sp, &grid);
        let field = DMatrix::from_fn(grid.len(), 1, |_, _| rng.random_range(-1.0..1.0));
        let z = dec.encode(&field, 0.0).unwrap().z;
        let again = dec.encode(&dec.decode(&z), 0.0).unwrap().z;
        prop_assert!((&again - &z).amax() <= 1e-8 * (1.0 + z.amax()));
        let zs = LatentState::new(DVector::zeros(latent), 0.0);
        prop_assert!(dec.decode(&zs.z).iter().all(|v| v.is_finite()));
    }
}
