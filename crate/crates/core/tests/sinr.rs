use std::f64::consts::PI;

use lainr_core::autograd::{value_and_grad, AutogradError};
use lainr_core::sinr::{
    admissible, encode_loss_on_tape, recon_weights, represent_subspace, sinr_decode, sinr_encode,
    sinr_forward, EncodeOptions, FieldSnapshot, FilterBasis, LatentState, SinrDims, SinrError,
    SinrNet, SinrParams,
};
use lainr_core::sphere::{
    gauss_legendre_grid, project_field, real_sph_harm, synthesize_field, SamplingSet, SphCoeffs,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims(depth: usize, degree: usize, hidden: usize, latent: usize) -> SinrDims {
    SinrDims {
        depth,
        degree,
        hidden,
        latent,
        channels: 1,
    }
}

fn random_z(m: usize, rng: &mut ChaCha8Rng, scale: f64) -> LatentState {
    LatentState::new(DVector::from_fn(m, |_, _| rng.random_range(-scale..scale)), 0.0)
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

#[test]
fn represent_single_harmonic() {
    let mut c = SphCoeffs::new();
    c.set(1, 0, 2.5).unwrap();
    let sp = represent_subspace(&c, dims(2, 2, 6, 3)).unwrap();
    let g = gauss_legendre_grid(6, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = sinr_forward(&sp, &random_z(3, &mut rng, 1.0), &g).unwrap();
    for (p, v) in g.points().iter().zip(out.values.column(0).iter()) {
        assert!((v - 2.5 * real_sph_harm(1, 0, p).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn represent_examples() {
    let d = dims(3, 2, 5, 2);
    let g = gauss_legendre_grid(8, 16);
    let z = LatentState::zeros(2);

    let mut c = SphCoeffs::new();
    c.set(0, 0, 1.0).unwrap();
    let out = sinr_decode(&represent_subspace(&c, d).unwrap(), &z, &g).unwrap();
    assert!(out.values.iter().all(|v| (v - 1.0 / (4.0 * PI).sqrt()).abs() < 1e-14));

    let mut c = SphCoeffs::new();
    c.set(5, 2, 3.0).unwrap();
    let out = sinr_decode(&represent_subspace(&c, d).unwrap(), &z, &g).unwrap();
    for (p, v) in g.points().iter().zip(out.values.iter()) {
        assert!((v - 3.0 * real_sph_harm(5, 2, p).unwrap()).abs() < 1e-10);
    }

    let out = sinr_decode(&represent_subspace(&SphCoeffs::new(), d).unwrap(), &z, &g).unwrap();
    assert!(out.values.iter().all(|&v| v == 0.0));
}

#[test]
fn represent_rejects_bad_inputs() {
    let mut c = SphCoeffs::new();
    c.set(4, 0, 1.0).unwrap();
    assert!(matches!(
        represent_subspace(&c, dims(3, 2, 5, 2)),
        Err(SinrError::OutsideIndexSet { ell: 4, m: 0 })
    ));
    let mut c = SphCoeffs::new();
    c.set(3, 3, 1.0).unwrap();
    assert!(represent_subspace(&c, dims(3, 2, 5, 2)).is_err());
    assert!(matches!(
        represent_subspace(&SphCoeffs::new(), dims(1, 2, 4, 2)),
        Err(SinrError::HiddenTooSmall { hidden: 4, needed: 5 })
    ));
}

#[test]
fn represent_random_admissible_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = gauss_legendre_grid(12, 24);
    for _ in 0..50 {
        let (degree, depth) = (rng.random_range(0..4), rng.random_range(0..4));
        let d = dims(depth, degree, 2 * degree + 1 + rng.random_range(0..3), 2);
        let mut c = SphCoeffs::new();
        for ell in 0..=degree + depth {
            for m in -(ell as isize)..=ell as isize {
                if admissible(ell, m, degree, depth) && rng.random_bool(0.6) {
                    c.set(ell, m, rng.random_range(-2.0..2.0)).unwrap();
                }
            }
        }
        let sp = represent_subspace(&c, d).unwrap();
        let out = sinr_forward(&sp, &LatentState::zeros(2), &g).unwrap();
        let want = synthesize_field(&c, &g);
        for (a, b) in out.values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_heads_give_zero_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = dims(2, 2, 8, 4);
    let mut sp = SinrParams::init(d, true, &mut rng);
    for l in 0..=2 {
        sp.params.slice_mut(&format!("wout{l}")).unwrap().fill(0.0);
        sp.params.slice_mut(&format!("bout{l}")).unwrap().fill(0.0);
    }
    let out = sinr_forward(&sp, &random_z(4, &mut rng, 1.0), &gauss_legendre_grid(6, 12)).unwrap();
    assert!(out.values.iter().all(|&v| v == 0.0));
}

#[test]
fn output_is_band_limited() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = dims(2, 2, 8, 3);
    let bound = d.output_degree_bound();
    assert_eq!(bound, 9);
    let g = gauss_legendre_grid(24, 48);
    for _ in 0..5 {
        let sp = SinrParams::init(d, true, &mut rng);
        let out = sinr_forward(&sp, &random_z(3, &mut rng, 1.0), &g).unwrap();
        let f: Vec<f64> = out.values.column(0).iter().copied().collect();
        let c = project_field(&f, &g, bound).unwrap();
        let back = synthesize_field(&c, &g);
        let resid: f64 = f
            .iter()
            .zip(&back)
            .zip(g.quad_weights().unwrap())
            .map(|((a, b), w)| w * (a - b).powi(2))
            .sum();
        assert!(resid < 1e-8, "residual energy {resid}");
        assert!(f.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}

#[test]
fn tape_forward_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for skip in [true, false] {
        let d = SinrDims {
            channels: 2,
            ..dims(3, 2, 7, 4)
        };
        let sp = SinrParams::init(d, skip, &mut rng);
        let g = gauss_legendre_grid(5, 10);
        let z = random_z(4, &mut rng, 1.0);
        let direct = sinr_forward(&sp, &z, &g).unwrap().values;
        let basis = FilterBasis::for_dims(&g, &d);
        let mut tape = lainr_core::autograd::Tape::new();
        let b = tape.bind(&sp.params);
        let zr = tape.input(DMatrix::from_row_slice(1, 4, z.z.as_slice()));
        let out = SinrNet::forward_on_tape(&mut tape, &b, &d, skip, &basis, zr).unwrap();
        assert!(max_abs_diff(tape.value(out), &direct) < 1e-13);
    }
}

fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let fp = f(&p);
            p[i] -= 2.0 * h;
            let fm = f(&p);
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn assert_grad_close(g: &[f64], fd: &[f64], what: &str) {
    for (i, (a, b)) in g.iter().zip(fd).enumerate() {
        let scale = a.abs().max(b.abs()).max(1e-3);
        assert!((a - b).abs() / scale < 1e-5, "{what} coordinate {i}: {a} vs {fd}", fd = b);
    }
}

#[test]
fn recon_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = SinrDims {
        channels: 2,
        ..dims(2, 1, 4, 3)
    };
    let sp = SinrParams::init(d, true, &mut rng);
    let g = gauss_legendre_grid(4, 8);
    let target = DMatrix::from_fn(g.len(), 2, |_, _| rng.random_range(-1.0..1.0));
    let z = DMatrix::from_row_slice(1, 3, random_z(3, &mut rng, 1.0).z.as_slice());
    let basis = FilterBasis::for_dims(&g, &d);
    let w = recon_weights(&g, 2);
    let loss = |p: &lainr_core::autograd::ParamVector| {
        value_and_grad(p, |t, b| {
            let zr = t.constant(z.clone());
            let out = SinrNet::forward_on_tape(t, b, &d, true, &basis, zr)
                .map_err(|e| AutogradError::Shape(e.to_string()))?;
            let y = t.constant(target.clone());
            Ok(t.weighted_sq_error(out, y, &w))
        })
        .unwrap()
    };
    let rep = loss(&sp.params);
    let fd = fd_gradient(
        |x| {
            let mut p = sp.params.clone();
            p.values.copy_from_slice(x);
            loss(&p).loss
        },
        &sp.params.values,
    );
    assert_grad_close(&rep.grad.values, &fd, "params");
}

#[test]
fn encode_loss_gradient_agrees_with_tape_and_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let d = dims(2, 2, 6, 5);
    let sp = SinrParams::init(d, true, &mut rng);
    let g = gauss_legendre_grid(6, 12);
    let truth = sinr_forward(&sp, &random_z(5, &mut rng, 2.0), &g).unwrap();
    let z = random_z(5, &mut rng, 1.0).z;
    let rep = encode_loss_on_tape(&sp, &truth, &z).unwrap();
    let fd = fd_gradient(
        |x| encode_loss_on_tape(&sp, &truth, &DVector::from_column_slice(x)).unwrap().loss,
        z.as_slice(),
    );
    assert_grad_close(&rep.grad.values, &fd, "latent");
}

#[test]
fn decoder_is_affine_in_latent() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = SinrDims {
        channels: 2,
        ..dims(3, 2, 6, 4)
    };
    let sp = SinrParams::init(d, true, &mut rng);
    let g = gauss_legendre_grid(5, 10);
    let net = sp.net();
    let filt = net.filters(&FilterBasis::for_dims(&g, &d));
    let jac = net.jacobian(&filt);
    let z = random_z(4, &mut rng, 3.0).z;
    let base = net.eval(&filt, &DVector::zeros(4));
    let out = net.eval(&filt, &z);
    let lin = &jac * &z;
    for p in 0..g.len() {
        for c in 0..2 {
            assert!((out[(p, c)] - base[(p, c)] - lin[p * 2 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn jacobian_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let g = gauss_legendre_grid(4, 8);

    let d = dims(2, 1, 4, 3);
    let mut sp = SinrParams::init(d, true, &mut rng);
    for l in 1..=2 {
        sp.params.slice_mut(&format!("a{l}")).unwrap().fill(0.0);
    }
    let net = sp.net();
    let jac = net.jacobian(&net.filters(&FilterBasis::for_dims(&g, &d)));
    assert!(jac.iter().all(|&v| v == 0.0));

    // one layer, head reading hidden unit 0 only: J[p, i] = A[0, i] g_1(p)[0]
    let d = dims(1, 1, 3, 2);
    let sp = {
        let mut sp = SinrParams::init(d, true, &mut rng);
        let wout = sp.params.slice_mut("wout1").unwrap();
        wout.copy_from_slice(&[1.0, 0.0, 0.0]);
        sp
    };
    let a = sp.params.matrix("a1").unwrap();
    let xi = sp.params.matrix("xi1").unwrap();
    let jac = {
        let net = sp.net();
        net.jacobian(&net.filters(&FilterBasis::for_dims(&g, &d)))
    };
    for (p, pt) in g.points().iter().enumerate() {
        let filt: f64 = (-1isize..=1)
            .map(|m| xi[(0, (m + 1) as usize)] * real_sph_harm(m.unsigned_abs() + 1, m, pt).unwrap())
            .sum();
        for i in 0..2 {
            assert!((jac[(p, i)] - a[(0, i)] * filt).abs() < 1e-13);
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let d = SinrDims {
        channels: 2,
        ..dims(3, 2, 6, 4)
    };
    let sp = SinrParams::init(d, false, &mut rng);
    let g = gauss_legendre_grid(5, 10);
    let net = sp.net();
    let filt = net.filters(&FilterBasis::for_dims(&g, &d));
    let jac = net.jacobian(&filt);
    let z = random_z(4, &mut rng, 1.0).z;
    let h = 1e-5;
    for i in 0..4 {
        let mut zp = z.clone();
        zp[i] += h;
        let mut zm = z.clone();
        zm[i] -= h;
        let diff = (net.eval(&filt, &zp) - net.eval(&filt, &zm)) / (2.0 * h);
        for p in 0..g.len() {
            for c in 0..2 {
                let (a, b) = (jac[(p * 2 + c, i)], diff[(p, c)]);
                assert!((a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3));
            }
        }
    }
}

#[test]
fn outputs_depend_on_latent_only_through_modulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let d = dims(2, 1, 3, 8);
    let sp = SinrParams::init(d, true, &mut rng);
    let stacked = DMatrix::from_fn(6, 8, |r, c| {
        sp.params.matrix(&format!("a{}", r / 3 + 1)).unwrap()[(r % 3, c)]
    });
    let eig = (stacked.transpose() * &stacked).symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let null = eig.eigenvectors.column(k).clone_owned();
    assert!((&stacked * &null).amax() < 1e-12);
    let z1 = random_z(8, &mut rng, 1.0);
    let z2 = LatentState::new(&z1.z + null * 5.0, 0.0);
    assert!((&z1.z - &z2.z).norm() > 1.0);
    let g = gauss_legendre_grid(5, 10);
    let a = sinr_forward(&sp, &z1, &g).unwrap().values;
    let b = sinr_forward(&sp, &z2, &g).unwrap().values;
    assert!(max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn latent_dimension_checked() {
    let sp = SinrParams::zeros(dims(1, 1, 3, 4), true);
    assert!(matches!(
        sinr_forward(&sp, &LatentState::zeros(3), &gauss_legendre_grid(2, 4)),
        Err(SinrError::Dimension(_))
    ));
}

fn snapshot(set: &SamplingSet, values: Vec<f64>) -> FieldSnapshot {
    let n = values.len();
    FieldSnapshot::new(set.clone(), DMatrix::from_vec(n, 1, values), vec!["f".into()]).unwrap()
}

#[test]
fn encode_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let d = dims(2, 2, 8, 6);
    let sp = SinrParams::init(d, true, &mut rng);
    let g = gauss_legendre_grid(8, 16);
    let z = random_z(6, &mut rng, 1.0);
    let snap = sinr_decode(&sp, &z, &g).unwrap();
    let res = sinr_encode(&sp, &snap, &z, &EncodeOptions::default()).unwrap();
    assert!((&res.state.z - &z.z).amax() < 1e-12);
    assert!(res.loss < 1e-20);
}

#[test]
fn encode_recovers_decodable_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let d = dims(2, 2, 8, 6);
    let sp = SinrParams::init(d, true, &mut rng);
    let g = gauss_legendre_grid(8, 16);
    let opts = EncodeOptions {
        steps: 3000,
        lr: 5e-2,
        tol: 0.0,
        ..EncodeOptions::default()
    };
    for _ in 0..10 {
        let z = random_z(6, &mut rng, 1.0);
        let snap = sinr_decode(&sp, &z, &g).unwrap();
        let res = sinr_encode(&sp, &snap, &LatentState::zeros(6), &opts).unwrap();
        assert!(res.loss < 1e-6, "loss {}", res.loss);
    }
}

#[test]
fn masked_encode_generalizes_to_full_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let d = dims(3, 3, 12, 12);
    let sp = SinrParams::init(d, true, &mut rng);
    let g = gauss_legendre_grid(32, 64);
    let opts = EncodeOptions {
        steps: 3000,
        lr: 5e-2,
        tol: 0.0,
        ..EncodeOptions::default()
    };
    for _ in 0..3 {
        // a decodable field plus a small band-limited component outside the decoder's range
        let z = random_z(12, &mut rng, 1.0);
        let mut extra = SphCoeffs::new();
        for ell in 0..=4 {
            for m in -(ell as isize)..=ell as isize {
                extra.set(ell, m, rng.random_range(-0.02..0.02)).unwrap();
            }
        }
        let base = sinr_decode(&sp, &z, &g).unwrap();
        let pert = synthesize_field(&extra, &g);
        let values: Vec<f64> = base.values.iter().zip(&pert).map(|(a, b)| a + b).collect();
        let full = snapshot(&g, values);
        let rmse = |s: &LatentState| {
            let dec = sinr_decode(&sp, s, &g).unwrap();
            let w = recon_weights(&g, 1);
            ((&dec.values - &full.values).map(|v| v * v).component_mul(&w).sum()).sqrt()
        };
        let full_fit = sinr_encode(&sp, &full, &LatentState::zeros(12), &opts).unwrap();
        let count = (0.03 * g.len() as f64).round() as usize;
        let mut idx: Vec<usize> = (0..g.len()).collect();
        for i in 0..count {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(count);
        let masked = full.subset(&idx, "mask");
        let masked_fit = sinr_encode(&sp, &masked, &LatentState::zeros(12), &opts).unwrap();
        let (rf, rm) = (rmse(&full_fit.state), rmse(&masked_fit.state));
        assert!(rm.is_finite() && rm < 2.0 * rf, "masked {rm} vs full {rf}");
    }
}

#[test]
fn serialization_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let sp = SinrParams::init(dims(2, 2, 6, 3), false, &mut rng);
    let bytes = sp.to_named().to_bytes();
    let back = SinrParams::from_named(&lainr_core::ltsr::NamedTensors::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, sp);
}
