//! Oracles shared by the integration tests. Nothing here calls into the
//! library's forward/backward code, so the tests compare two independent
//! computations.
#![allow(dead_code)]

use inhoc::matrix::Matrix;
use inhoc::model::{Activation, Layer, ModelParams};
use rand::Rng;

/// Plain nested-loop forward pass.
pub fn naive_forward(p: &ModelParams, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let n = p.layers.len();
    for (l, layer) in p.layers.iter().enumerate() {
        let mut next = Vec::with_capacity(layer.bias.len());
        for o in 0..layer.bias.len() {
            let mut z = layer.bias[o];
            for (i, hi) in h.iter().enumerate() {
                z += layer.weights.get(o, i) * hi;
            }
            next.push(if l + 1 == n {
                z
            } else {
                match p.activation {
                    Activation::Relu => z.max(0.0),
                    Activation::Tanh => z.tanh(),
                }
            });
        }
        h = next;
    }
    h[0]
}

pub fn random_model<R: Rng>(rng: &mut R, sizes: &[usize], activation: Activation, scale: f64) -> ModelParams {
    let layers = sizes
        .windows(2)
        .map(|w| Layer {
            weights: Matrix::from_vec(
                w[1],
                w[0],
                (0..w[0] * w[1]).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
            .unwrap(),
            bias: (0..w[1]).map(|_| rng.gen_range(-scale..scale)).collect(),
        })
        .collect();
    ModelParams::new(activation, layers).unwrap()
}

/// Single-layer (affine) model `w . x + b`.
pub fn linear_model(w: &[f64], b: f64) -> ModelParams {
    ModelParams::new(
        Activation::Relu,
        vec![Layer {
            weights: Matrix::from_vec(1, w.len(), w.to_vec()).unwrap(),
            bias: vec![b],
        }],
    )
    .unwrap()
}

pub fn random_rows<R: Rng>(rng: &mut R, n: usize, q: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(n, q, (0..n * q).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Relative error with a small floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite difference of `f` with respect to every parameter.
pub fn fd_param_grad(p: &ModelParams, h: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let n = p.num_params();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut plus = p.clone();
        let mut minus = p.clone();
        *plus.values_mut().nth(k).unwrap() += h;
        *minus.values_mut().nth(k).unwrap() -= h;
        out.push((f(&plus) - f(&minus)) / (2.0 * h));
    }
    out
}

pub fn fd_input_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Exact Shapley values by subset enumeration with absent features set to
/// `baseline`.
pub fn exact_shapley(f: impl Fn(&[f64]) -> f64, x: &[f64], baseline: &[f64]) -> Vec<f64> {
    let q = x.len();
    let fact: Vec<f64> = (0..=q)
        .scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        })
        .collect();
    let value = |mask: usize| {
        let z: Vec<f64> = (0..q)
            .map(|j| if mask & (1 << j) != 0 { x[j] } else { baseline[j] })
            .collect();
        f(&z)
    };
    let mut phi = vec![0.0; q];
    for (j, pj) in phi.iter_mut().enumerate() {
        for mask in 0..(1usize << q) {
            if mask & (1 << j) != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[q - s - 1] / fact[q];
            *pj += w * (value(mask | (1 << j)) - value(mask));
        }
    }
    phi
}

/// Brute-force confidence: count mutated rows whose naive prediction lies in
/// `[lower, upper]`.
pub fn brute_confidence(p: &ModelParams, mutated: &Matrix, lower: f64, upper: f64) -> f64 {
    if mutated.rows() == 0 {
        return 1.0;
    }
    let inside = mutated
        .iter_rows()
        .filter(|x| {
            let z = naive_forward(p, x);
            lower <= z && z <= upper
        })
        .count();
    inside as f64 / mutated.rows() as f64
}

/// Stationary distribution of the column-stochastic
/// `[[1 - a, b], [a, 1 - b]]`.
pub fn stationary_2x2(a: f64, b: f64) -> [f64; 2] {
    [b / (a + b), a / (a + b)]
}

/// Small models trained on a generated eMBB dataset with plain minibatch
/// gradient descent, one per seed, plus the rows they were trained on.
pub fn trained_checkpoints(seeds: &[u64]) -> Vec<(ModelParams, Matrix)> {
    use inhoc::datagen::{generate_cl_dataset, GeneratorConfig, SliceId, SliceSpec};
    use inhoc::game::{oracle_step, OracleConfig};
    use inhoc::model::init_params;
    use rand::SeedableRng;

    let spec = SliceSpec::default_for(SliceId::Embb);
    seeds
        .iter()
        .map(|&seed| {
            let data = generate_cl_dataset(&spec, 1, 300, 0.5, seed, &GeneratorConfig::default()).unwrap();
            let init = init_params(&[5, 16, 16, 1], Activation::Relu, seed).unwrap();
            let cfg = OracleConfig {
                steps: 400,
                lr: 0.002,
                batch_size: 32,
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (p, _) = oracle_step(&init, &data.features, &data.targets, &[], &[1.0], 0.0, &cfg, &mut rng).unwrap();
            (p, data.features)
        })
        .collect()
}
