//! Oracles shared by the integration tests. Nothing here calls into the
//! library's numerics except to build inputs.
#![allow(dead_code)]

use buckdrm::control::OBS_DIM;
use buckdrm::dqn::{Dense, QNetwork, Transition};
use buckdrm::plant::PlantParams;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Exact state of the linear RLC filter (no CPL) under constant duty, from the
/// 2x2 matrix exponential of the underdamped system.
pub fn rlc_exact(p: &PlantParams, d: f64, x0: (f64, f64), t: f64) -> (f64, f64) {
    let (l, c, r) = (p.inductance, p.capacitance, p.resistance);
    let a = [[0.0, -1.0 / l], [1.0 / c, -1.0 / (r * c)]];
    let v_eq = p.v_in * d;
    let i_eq = v_eq / r;
    let s = (a[0][0] + a[1][1]) / 2.0;
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let q = (det - s * s).sqrt();
    assert!(q > 0.0, "oracle assumes an underdamped filter");
    let (cos, sin) = ((q * t).cos(), (q * t).sin() / q);
    let e = (s * t).exp();
    let m = [
        [e * (cos + sin * (a[0][0] - s)), e * sin * a[0][1]],
        [e * sin * a[1][0], e * (cos + sin * (a[1][1] - s))],
    ];
    let (di, dv) = (x0.0 - i_eq, x0.1 - v_eq);
    (
        i_eq + m[0][0] * di + m[0][1] * dv,
        v_eq + m[1][0] * di + m[1][1] * dv,
    )
}

/// log2 ratios of successive errors under step halving.
pub fn observed_order(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Plain-loop forward pass, independent of the library's GEMM path.
pub fn oracle_forward(layers: &[Dense], offset: &[f64], scale: &[f64], s: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = s
        .iter()
        .zip(offset)
        .zip(scale)
        .map(|((s, o), k)| (s - o) * k)
        .collect();
    for (n, layer) in layers.iter().enumerate() {
        let mut y = layer.biases.clone();
        for (o, y) in y.iter_mut().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                *y += layer.weights[o * layer.inputs + i] * xi;
            }
        }
        if n + 1 < layers.len() {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        x = y;
    }
    x
}

/// Mean squared TD error of the taken actions.
pub fn oracle_loss(
    layers: &[Dense],
    offset: &[f64],
    scale: &[f64],
    batch: &[Transition],
    targets: &[f64],
) -> f64 {
    batch
        .iter()
        .zip(targets)
        .map(|(t, y)| (y - oracle_forward(layers, offset, scale, &t.state)[t.action]).powi(2))
        .sum::<f64>()
        / batch.len() as f64
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, n_actions: usize) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let mut state = [0.0; OBS_DIM];
            let mut next_state = [0.0; OBS_DIM];
            state
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-2.0..2.0));
            next_state
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-2.0..2.0));
            Transition {
                state,
                action: rng.random_range(0..n_actions),
                reward: rng.random_range(-5.0..5.0),
                next_state,
                terminal: rng.random_bool(0.2),
            }
        })
        .collect()
}

/// Glorot weights, small random biases and a non-trivial input normalization.
pub fn random_net(rng: &mut ChaCha8Rng, dims: &[usize]) -> QNetwork {
    let mut net = QNetwork::new(dims, rng);
    for layer in net.layers_mut() {
        layer
            .biases
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.3..0.3));
    }
    let offset: Vec<f64> = (0..dims[0]).map(|k| 0.1 * k as f64).collect();
    let scale: Vec<f64> = (0..dims[0]).map(|k| 1.0 + 0.2 * k as f64).collect();
    net.with_input_normalization(offset, scale).unwrap()
}

/// Worst relative disagreement between backprop and central differences of
/// [`oracle_loss`] over every parameter.
pub fn worst_gradient_error(net: &QNetwork, batch: &[Transition], targets: &[f64], h: f64) -> f64 {
    let (_, grads) = buckdrm::dqn::td_loss_and_grad(net, batch, targets);
    let (offset, scale) = (net.input_offset().to_vec(), net.input_scale().to_vec());
    let base = net.layers().to_vec();
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, perturb: &dyn Fn(&mut Vec<Dense>, f64)| {
        let mut plus = base.clone();
        perturb(&mut plus, h);
        let mut minus = base.clone();
        perturb(&mut minus, -h);
        let numeric = (oracle_loss(&plus, &offset, &scale, batch, targets)
            - oracle_loss(&minus, &offset, &scale, batch, targets))
            / (2.0 * h);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    };
    for (k, layer) in base.iter().enumerate() {
        for j in 0..layer.weights.len() {
            check(grads.weights[k][j], &|ls, d| ls[k].weights[j] += d);
        }
        for j in 0..layer.biases.len() {
            check(grads.biases[k][j], &|ls, d| ls[k].biases[j] += d);
        }
    }
    worst
}

/// Network whose greedy action is `best` regardless of input.
pub fn biased_net(n_actions: usize, best: usize) -> QNetwork {
    let mut net = QNetwork::zeros(&[OBS_DIM, 4, n_actions]);
    net.layers_mut()[1].biases[best] = 1.0;
    net
}

/// Pearson statistic against expected counts.
pub fn chi_square(counts: &[u64], expected: &[f64]) -> f64 {
    counts
        .iter()
        .zip(expected)
        .map(|(&c, &e)| (c as f64 - e).powi(2) / e)
        .sum()
}

/// Mean plus three standard deviations of a chi-square with `dof` degrees of freedom.
pub fn three_sigma(dof: usize) -> f64 {
    dof as f64 + 3.0 * (2.0 * dof as f64).sqrt()
}
