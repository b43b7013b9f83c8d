mod common;

use common::checks::{conv_oracle_error, loss_fd, network_error, primitive_errors, INSTANCES};
use common::{random, rng};
use spinectx_core::loss::{bce_loss, composite_loss, dice_loss, LossInputs, LossValue};
use spinectx_core::ops::conv::conv3d_backward_input;
use spinectx_core::ops::{self, kernel_extent, ConvSpec};
use spinectx_core::{par, Real, Shape5, Tensor5};

#[test]
fn dilated_conv_matches_direct_loops() {
    let cases = [1, 2, 3, 4, 8, 16].map(|r| (3, r)).into_iter().chain([(1, 1)]);
    for (k, r) in cases {
        for s in 0..3 {
            let err = conv_oracle_error(k, r, 100 * (k * r) as u64 + s);
            assert!(err < 1e-5, "k={k} r={r} seed {s}: rel err {err:e}");
        }
    }
}

#[test]
fn kernel_extents() {
    assert_eq!(kernel_extent(3, 1), 3);
    assert_eq!(kernel_extent(3, 8), 17);
    assert_eq!(kernel_extent(3, 16), 33);
}

#[test]
fn conv_input_adjoint() {
    let mut g = rng(11);
    for r in [1, 2, 4] {
        let spec = ConvSpec::same(2, 3, 3, r, false);
        let shape = Shape5::new(1, 2, 5, 6, 7);
        let x: Tensor5<f64> = random(&mut g, shape, 1.0);
        let w: Tensor5<f64> = random(&mut g, spec.weight_shape(), 1.0);
        let y = ops::conv3d_forward(&x, &w, None, &spec).unwrap();
        let gy: Tensor5<f64> = random(&mut g, y.shape(), 1.0);
        let gx = conv3d_backward_input(&gy, &w, &spec, shape);
        let (lhs, rhs) = (y.dot(&gy), x.dot(&gx));
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "r={r}: {lhs} vs {rhs}");
    }
}

#[test]
fn upsample_adjoint() {
    let mut g = rng(12);
    for dims in [[1, 1, 1], [2, 3, 4], [4, 4, 4]] {
        let shape = Shape5::new(2, 2, dims[0], dims[1], dims[2]);
        let x: Tensor5<f64> = random(&mut g, shape, 1.0);
        let y = ops::trilinear_upsample2(&x);
        let gy: Tensor5<f64> = random(&mut g, y.shape(), 1.0);
        let gx = ops::trilinear_upsample2_backward(&gy, shape);
        assert!((y.dot(&gy) - x.dot(&gx)).abs() < 1e-12);
    }
}

#[test]
fn maxpool_adjoint() {
    let mut g = rng(13);
    let shape = Shape5::new(2, 3, 4, 6, 2);
    let x: Tensor5<f64> = random(&mut g, shape, 1.0);
    let p = ops::maxpool3d(&x).unwrap();
    let gy: Tensor5<f64> = random(&mut g, p.output.shape(), 1.0);
    let gx = ops::maxpool3d_backward(&gy, &p.argmax, shape);
    assert!((p.output.dot(&gy) - x.dot(&gx)).abs() < 1e-12);
}

#[test]
fn concat_split_adjoint() {
    let mut g = rng(14);
    let a: Tensor5<f64> = random(&mut g, Shape5::new(2, 1, 2, 3, 3), 1.0);
    let b: Tensor5<f64> = random(&mut g, Shape5::new(2, 3, 2, 3, 3), 1.0);
    let y = ops::concat_channels(&[&a, &b]).unwrap();
    let gy: Tensor5<f64> = random(&mut g, y.shape(), 1.0);
    let parts = ops::split_channels(&gy, &[1, 3]).unwrap();
    assert!((y.dot(&gy) - a.dot(&parts[0]) - b.dot(&parts[1])).abs() < 1e-12);
}

fn assert_primitives<T: Real>(h: f64, tol: f64) {
    for (name, err) in primitive_errors::<T>(h) {
        println!("{} {name}: {err:.2e}", T::DTYPE);
        assert!(err < tol, "{name} ({}): rel err {err:e} >= {tol:e}", T::DTYPE);
    }
}

#[test]
fn primitive_gradients_f64() {
    assert_primitives::<f64>(1e-6, 1e-6);
}

#[test]
fn primitive_gradients_f32() {
    assert_primitives::<f32>(1e-2, 1e-3);
}

#[test]
fn loss_gradients() {
    for (name, f) in [
        ("bce", bce_loss::<f64> as fn(&LossInputs<'_, f64>) -> LossValue<f64>),
        ("dice", dice_loss::<f64>),
        ("composite", composite_loss::<f64>),
    ] {
        let err = (0..INSTANCES).map(|i| loss_fd(f, 9000 + i)).fold(0.0, f64::max);
        assert!(err < 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn network_gradients_f64() {
    let err = network_error::<f64>(1e-5);
    println!("network f64: {err:.2e}");
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn network_gradients_f32() {
    let err = network_error::<f32>(1e-5);
    println!("network f32: {err:.2e}");
    assert!(err < 1e-3, "{err:e}");
}

#[test]
fn conv_is_thread_count_independent() {
    let mut g = rng(21);
    let spec = ConvSpec::same(4, 5, 3, 2, true);
    let x: Tensor5<f32> = random(&mut g, Shape5::new(2, 4, 24, 40, 40), 1.0);
    let w: Tensor5<f32> = random(&mut g, spec.weight_shape(), 1.0);
    let b = vec![0.1f32; 5];
    let run = || ops::conv3d_forward(&x, &w, Some(&b), &spec).unwrap();
    let one = par::sequential(run);
    for threads in [2, 3] {
        let many = par::with_threads(threads, run);
        assert!(one.data().iter().zip(many.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
