//! Gaussian densities and sampling, plus finite-difference oracles that are
//! independent of the tape.

use nalgebra::DMatrix;

use super::{FlowRng, Tape, Tensor, TensorError, Var};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log-density summed over all entries.
pub fn gaussian_logp(z: &Tensor, mean: &Tensor, log_std: &Tensor) -> Result<f64, TensorError> {
    if z.shape() != mean.shape() || z.shape() != log_std.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gaussian_logp",
            lhs: z.shape().to_vec(),
            rhs: if z.shape() != mean.shape() {
                mean.shape().to_vec()
            } else {
                log_std.shape().to_vec()
            },
        });
    }
    Ok(z
        .data()
        .iter()
        .zip(mean.data())
        .zip(log_std.data())
        .map(|((&x, &m), &ls)| {
            let u = (x - m) / ls.exp();
            -0.5 * LN_2PI - ls - 0.5 * u * u
        })
        .sum())
}

/// Differentiable version of [`gaussian_logp`] returning one value per
/// leading-axis entry. `mean` and `log_std` broadcast against `z`.
pub fn gaussian_logp_per_sample(tape: &Tape, z: Var, mean: Var, log_std: Var) -> Result<Var, TensorError> {
    let diff = tape.sub(z, mean)?;
    let inv_std = tape.exp(tape.neg(log_std)?)?;
    let u = tape.mul(diff, inv_std)?;
    let sq = tape.mul(u, u)?;
    let half_sq = tape.scale(sq, -0.5)?;
    let terms = tape.sub(half_sq, log_std)?;
    let terms = tape.add_scalar(terms, -0.5 * LN_2PI)?;
    tape.sum_per_sample(terms)
}

/// `mean + t * exp(log_std) * eps` with `eps` standard normal, drawn in
/// row-major order.
pub fn sample_gaussian(mean: &Tensor, log_std: &Tensor, temperature: f64, rng: &mut FlowRng) -> Result<Tensor, TensorError> {
    if mean.shape() != log_std.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "sample_gaussian",
            lhs: mean.shape().to_vec(),
            rhs: log_std.shape().to_vec(),
        });
    }
    let data = mean
        .data()
        .iter()
        .zip(log_std.data())
        .map(|(&m, &ls)| m + temperature * ls.exp() * rng.normal())
        .collect();
    Tensor::new(mean.shape(), data)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// `ln|det J|` of a map `R^k -> R^k` at `x`, with the Jacobian built by
/// central differences and factored by partial-pivot LU.
pub fn fd_jacobian_logdet(mut f: impl FnMut(&Tensor) -> Tensor, x: &Tensor, h: f64) -> Result<f64, TensorError> {
    let k = x.numel();
    let mut jac = DMatrix::<f64>::zeros(k, k);
    let mut probe = x.clone();
    for j in 0..k {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[j] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[j] = orig;
        if fp.numel() != k {
            return Err(TensorError::ShapeMismatch {
                op: "fd_jacobian_logdet",
                lhs: x.shape().to_vec(),
                rhs: fp.shape().to_vec(),
            });
        }
        for i in 0..k {
            jac[(i, j)] = (fp.data()[i] - fm.data()[i]) / (2.0 * h);
        }
    }
    let lu = jac.lu();
    let u = lu.u();
    let logdet: f64 = (0..k).map(|i| u[(i, i)].abs().ln()).sum();
    if !logdet.is_finite() || logdet < (1e-12f64).ln() {
        return Err(TensorError::SingularJacobian { det: logdet.exp() });
    }
    Ok(logdet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_at_zero() {
        let z = Tensor::zeros(&[1]);
        let lp = gaussian_logp(&z, &z, &z).unwrap();
        assert!((lp - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn logp_is_additive_over_dims() {
        let z = Tensor::new(&[2], vec![0.3, 0.3]).unwrap();
        let z1 = Tensor::new(&[1], vec![0.3]).unwrap();
        let zero2 = Tensor::zeros(&[2]);
        let zero1 = Tensor::zeros(&[1]);
        let two = gaussian_logp(&z, &zero2, &zero2).unwrap();
        let one = gaussian_logp(&z1, &zero1, &zero1).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn logp_peaks_at_mean() {
        let m = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let ls = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let at_mean = gaussian_logp(&m, &m, &ls).unwrap();
        for shift in [-0.3, 0.1, 0.7] {
            let z = m.map(|v| v + shift);
            assert!(gaussian_logp(&z, &m, &ls).unwrap() < at_mean);
        }
    }

    #[test]
    fn logp_shape_mismatch() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(gaussian_logp(&a, &b, &a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn tape_logp_matches_numeric() {
        let tape = Tape::new();
        let z = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.4 - 1.0);
        let m = Tensor::from_fn(&[2, 3], |i| (i as f64).sin());
        let ls = Tensor::from_fn(&[2, 3], |i| 0.1 * i as f64 - 0.2);
        let (vz, vm, vl) = (tape.leaf(z.clone()).unwrap(), tape.leaf(m.clone()).unwrap(), tape.leaf(ls.clone()).unwrap());
        let per = tape.value(gaussian_logp_per_sample(&tape, vz, vm, vl).unwrap());
        for b in 0..2 {
            let want = gaussian_logp(&z.index0(b), &m.index0(b), &ls.index0(b)).unwrap();
            assert!((per.data()[b] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_temperature_returns_mean() {
        let m = Tensor::from_fn(&[4], |i| i as f64);
        let s = sample_gaussian(&m, &Tensor::zeros(&[4]), 0.0, &mut FlowRng::new(1)).unwrap();
        assert_eq!(s, m);
    }

    #[test]
    fn seeded_samples_repeat_bitwise() {
        let m = Tensor::zeros(&[16]);
        let a = sample_gaussian(&m, &m, 0.7, &mut FlowRng::new(9)).unwrap();
        let b = sample_gaussian(&m, &m, 0.7, &mut FlowRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_variance_matches_temperature() {
        let n = 100_000;
        let (t, log_std) = (0.7, 0.4f64);
        let m = Tensor::zeros(&[n]);
        let s = sample_gaussian(&m, &Tensor::full(&[n], log_std), t, &mut FlowRng::new(21)).unwrap();
        let mean = s.sum() / n as f64;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = (t * log_std.exp()).powi(2);
        assert!((var / want - 1.0).abs() < 0.05, "var {var} want {want}");
    }

    #[test]
    fn fd_gradient_of_sum_is_ones() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 1.3);
        let g = fd_gradient(|t| t.sum(), &x, 1e-5);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn fd_gradient_of_product() {
        let x = Tensor::new(&[2], vec![2.0, 5.0]).unwrap();
        let g = fd_gradient(|t| t.data()[0] * t.data()[1], &x, 1e-5);
        assert!((g.data()[0] - 5.0).abs() < 1e-6);
        assert!((g.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fd_logdet_identity_and_doubling() {
        let x = Tensor::new(&[2], vec![0.3, -0.8]).unwrap();
        assert!(fd_jacobian_logdet(|t| t.clone(), &x, 1e-5).unwrap().abs() < 1e-9);
        let ld = fd_jacobian_logdet(|t| t.map(|v| 2.0 * v), &x, 1e-5).unwrap();
        assert!((ld - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((ld - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn fd_logdet_rejects_singular_maps() {
        let x = Tensor::new(&[2], vec![0.3, -0.8]).unwrap();
        let r = fd_jacobian_logdet(|t| Tensor::new(&[2], vec![t.data()[0], t.data()[0]]).unwrap(), &x, 1e-5);
        assert!(matches!(r, Err(TensorError::SingularJacobian { .. })));
    }
}
