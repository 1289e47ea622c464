//! Tensor substrate: values, reverse-mode tape, convolution kernels,
//! optimizer steps and a finite-difference gradient checker.

pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use conv::ConvSpec;
pub use optim::{sgd_step, Param};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Forward-only convolution of a `[C, H, W]` tensor.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weights.clone());
    let b = tape.constant(bias.clone());
    let y = tape.conv2d(x, w, Some(b), spec)?;
    Ok(tape.value(y).clone())
}

pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.softmax(x, axis)?;
    Ok(tape.value(y).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(a.clone());
    let b = tape.constant(b.clone());
    let y = tape.matmul(a, b)?;
    Ok(tape.value(y).clone())
}

pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.upsample_nearest(x, factor)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, project, GradCheckOptions};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let spec = ConvSpec::same(1, 1, 3).with_relu(false);
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn dilated_conv_preserves_size() {
        let spec = ConvSpec::same(1, 1, 3).with_dilation(2);
        assert_eq!((spec.padding, spec.dilation), (2, 2));
        let x = Tensor::full(&[1, 8, 8], 1.0);
        let y = conv2d(&x, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let spec = ConvSpec::same(2, 1, 3);
        let err = conv2d(
            &Tensor::zeros(&[3, 4, 4]),
            &Tensor::zeros(&[1, 2, 3, 3]),
            &Tensor::zeros(&[1]),
            &spec,
        )
        .unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn conv_input_gradient_of_sum_matches_finite_differences() {
        let mut r = rng(7);
        let spec = ConvSpec::same(2, 3, 3).with_relu(false);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        let report = check_gradients(
            &[x, w, b],
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), &spec)?;
                Ok(tape.sum(y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn strided_dilated_conv_gradients() {
        for seed in 0..4 {
            let mut r = rng(seed);
            let spec = ConvSpec {
                in_channels: 2,
                out_channels: 2,
                kernel: (3, 3),
                stride: 2,
                dilation: 2,
                padding: 1,
                has_relu: false,
            };
            let x = Tensor::randn(&[2, 7, 6], 1.0, &mut r);
            let w = Tensor::randn(&[2, 2, 3, 3], 0.5, &mut r);
            let b = Tensor::randn(&[2], 0.5, &mut r);
            let report = check_gradients(
                &[x, w, b],
                |tape, v| {
                    let y = tape.conv2d(v[0], v[1], Some(v[2]), &spec)?;
                    project(tape, y, 99)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn softmax_uniform_and_scalar_oracle() {
        let y = softmax(&Tensor::new(vec![3], vec![0.0; 3]).unwrap(), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, v) in y.data().iter().enumerate() {
            let expect = ((k + 1) as f64).exp() / z;
            assert!((v - expect).abs() < 1e-15);
        }
        assert!((y.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let err = softmax(&Tensor::zeros(&[2, 2]), 2).unwrap_err();
        assert!(err.to_string().contains("axis 2"));
    }

    #[test]
    fn softmax_gradients_on_each_axis() {
        let mut r = rng(3);
        let x = Tensor::randn(&[3, 4, 2], 2.0, &mut r);
        for axis in 0..3 {
            let report = check_gradients(
                std::slice::from_ref(&x),
                |tape, v| {
                    let y = tape.softmax(v[0], axis)?;
                    project(tape, y, 5)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "axis {axis}: {report:?}");
        }
    }

    #[test]
    fn matmul_hand_case_and_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        assert!(matmul(&a, &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let mut r = rng(11);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[3, 5], 1.0, &mut r);
        let report = check_gradients(
            &[a, b],
            |tape, v| {
                let at = tape.transpose(v[0])?;
                let y = tape.matmul(at, v[1])?;
                project(tape, y, 1)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let z = upsample_nearest(&x, 3).unwrap();
        assert_eq!(z.sum(), 9.0 * x.sum());
        assert!(upsample_nearest(&x, 0).is_err());
    }

    #[test]
    fn upsample_gradient_sums_replicas() {
        let mut r = rng(2);
        let x = Tensor::randn(&[2, 3, 2], 1.0, &mut r);
        let report = check_gradients(
            &[x],
            |tape, v| {
                let y = tape.upsample_nearest(v[0], 3)?;
                project(tape, y, 4)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn composed_graph_gradients() {
        let mut r = rng(21);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.4, &mut r);
        let s = Tensor::scalar(0.7);
        let spec = ConvSpec::same(2, 3, 3);
        let report = check_gradients(
            &[x, w, s],
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], None, &spec)?;
                let y = tape.upsample_nearest(y, 2)?;
                let m = tape.reshape(y, &[3, 64])?;
                let a = tape.softmax(m, 1)?;
                let t = tape.transpose(a)?;
                let g = tape.matmul(a, t)?;
                let g = tape.scalar_mul(v[2], g)?;
                let sq = tape.sum_squares(g);
                let sg = tape.sigmoid(g);
                let p = project(tape, sg, 3)?;
                tape.add(sq, p)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn bce_gradient_matches_closed_form() {
        let mut r = rng(8);
        let u = Tensor::uniform(&[1, 4, 4], 0.05, 0.95, &mut r);
        let k: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let mut tape = Tape::new();
        let uv = tape.input(u.clone());
        let l = tape.bce_mean(uv, &k, 1e-7).unwrap();
        let g = tape.backward(l).unwrap();
        let got = g.get(uv).unwrap();
        for ((gv, p), kv) in got.iter().zip(u.data()).zip(&k) {
            let expect = (p - kv) / (p * (1.0 - p)) / 16.0;
            assert!((gv - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 1.0));
        let x = tape.input(Tensor::full(&[2], 2.0));
        let y = tape.mul(c, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
    }
}
