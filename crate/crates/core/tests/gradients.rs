use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ekfac_core::linalg::DenseMatrix;
use ekfac_core::net::{mlp_specs, Activation, LayerSpec, Loss, Network};

const STEP: f64 = 1e-5;

/// Worst relative error between central differences and backprop over
/// `directions` random directions per layer.
fn worst_fd_error(net: &Network, x: &DenseMatrix, t: &DenseMatrix, directions: usize, seed: u64) -> f64 {
    let bw = net.backward(&net.forward(x).unwrap(), t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (l, grad) in bw.mean_grads.iter().enumerate() {
        for _ in 0..directions {
            let v = DMatrix::from_fn(grad.nrows(), grad.ncols(), |_, _| rng.random_range(-1.0..1.0));
            let mut plus = net.clone();
            plus.apply_step(l, &v, -STEP).unwrap();
            let mut minus = net.clone();
            minus.apply_step(l, &v, STEP).unwrap();
            let fd = (plus.loss(x, t).unwrap() - minus.loss(x, t).unwrap()) / (2.0 * STEP);
            let analytic = grad.dot(&v);
            let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

fn data(rng: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::try_from_na(DMatrix::from_fn(n, d, |_, _| rng.random_range(lo..hi))).unwrap()
}

#[test]
fn sigmoid_mse_gradients_match_finite_differences() {
    let net = Network::initialized(&mlp_specs(&[6, 5, 4, 3], Activation::Sigmoid).unwrap(), Loss::Mse, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = data(&mut rng, 10, 6, -1.0, 1.0);
    let t = data(&mut rng, 10, 3, 0.0, 1.0);
    let e = worst_fd_error(&net, &x, &t, 25, 3);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn sigmoid_bce_gradients_match_finite_differences() {
    let net = Network::initialized(&mlp_specs(&[5, 4, 5], Activation::Sigmoid).unwrap(), Loss::Bce, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = data(&mut rng, 8, 5, 0.0, 1.0);
    let e = worst_fd_error(&net, &x, &x, 25, 6);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn mixed_activation_gradients_match_finite_differences() {
    let specs = vec![
        LayerSpec::new(4, 6, Activation::Relu).unwrap(),
        LayerSpec::new(6, 3, Activation::Identity).unwrap(),
    ];
    let net = Network::initialized(&specs, Loss::Mse, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = data(&mut rng, 12, 4, -1.0, 1.0);
    let t = data(&mut rng, 12, 3, -1.0, 1.0);
    let e = worst_fd_error(&net, &x, &t, 25, 9);
    assert!(e < 1e-4, "{e}");
}
