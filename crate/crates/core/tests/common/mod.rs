#![allow(dead_code)]

use std::path::PathBuf;

use camp_core::experiment::ExperimentConfig;
use camp_core::{Batch, Network, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn workspace_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn reference_config() -> ExperimentConfig {
    let text = std::fs::read_to_string(workspace_file("configs/blobs_mlp.json")).expect("reference config");
    ExperimentConfig::from_json(&text).expect("valid reference config")
}

pub fn random_batch(shape: &[usize], n: usize, classes: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = shape.iter().product();
    let data = (0..n * per).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let labels = (0..n).map(|i| i % classes).collect();
    Batch::new(Tensor::new(full, data).unwrap(), labels, classes).unwrap()
}

/// Central-difference gradient of the mean loss over every parameter.
pub fn numeric_gradient(net: &Network<f64>, batch: &Batch<f64>, h: f64) -> Vec<f64> {
    let params = net.flatten_params();
    let mut probe = net.clone();
    (0..params.len())
        .map(|i| {
            let mut p = params.clone();
            p[i] += h;
            probe.unflatten_params(&p).unwrap();
            let up = probe.loss(batch).unwrap();
            p[i] -= 2.0 * h;
            probe.unflatten_params(&p).unwrap();
            let down = probe.loss(batch).unwrap();
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Hessian of the mean loss over the weight view, by central differences of
/// the analytic weight gradient, symmetrized.
pub fn explicit_hessian(net: &Network<f64>, batch: &Batch<f64>, h: f64) -> DMatrix<f64> {
    let w = net.weights_flat();
    let n = w.len();
    let mut probe = net.clone();
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut x = w.clone();
        x[j] += h;
        probe.set_weights_flat(&x).unwrap();
        let up = probe.weight_gradient(batch).unwrap();
        x[j] -= 2.0 * h;
        probe.set_weights_flat(&x).unwrap();
        let down = probe.weight_gradient(batch).unwrap();
        for i in 0..n {
            hess[(i, j)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// Eigenpair with the largest |eigenvalue|.
pub fn dominant_eigenpair(hess: &DMatrix<f64>) -> (f64, Vec<f64>) {
    let eig = SymmetricEigen::new(hess.clone());
    let k = (0..eig.eigenvalues.len())
        .max_by(|&a, &b| eig.eigenvalues[a].abs().total_cmp(&eig.eigenvalues[b].abs()))
        .unwrap();
    (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect())
}
