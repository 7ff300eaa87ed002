//! Analytic backward pass vs central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nicf_core::data_env::SupportState;
use nicf_core::numerics::{finite_diff_grad, FD_STEP};
use nicf_core::qnet::{backward, forward, QNetConfig, QNetParams};

/// Draw a config + state whose ReLU pre-activations stay clear of kinks,
/// so the finite-difference probe never crosses one.
fn sample_case(rng: &mut ChaCha8Rng) -> (QNetParams, SupportState, u32) {
    loop {
        let cfg = QNetConfig {
            n_items: rng.gen_range(3..=10),
            dim: if rng.gen_bool(0.5) { 4 } else { 8 },
            blocks: rng.gen_range(1..=2),
            r_max: rng.gen_range(2..=5),
        };
        let params = QNetParams::init(cfg, rng.gen());
        let mut state = SupportState::new(cfg.r_max);
        let hist_len = rng.gen_range(1..=8.min(cfg.n_items));
        let mut items: Vec<u32> = (0..cfg.n_items as u32).collect();
        for t in 0..hist_len {
            let k = rng.gen_range(0..items.len());
            let item = items.swap_remove(k);
            let rating = rng.gen_range(1..=cfg.r_max);
            let _ = t;
            state.push(item, rating);
        }
        let selected = rng.gen_range(0..cfg.n_items as u32);
        let (_, cache) = forward(&params, &state);
        if cache.min_relu_margin() > 1e-3 {
            return (params, state, selected);
        }
    }
}

fn max_relative_error(params: &QNetParams, state: &SupportState, selected: u32) -> f64 {
    let (_, cache) = forward(params, state);
    let analytic = backward(params, &cache, selected, 1.0).unwrap().to_flat();

    let base = params.to_flat();
    let mut probe = params.clone();
    let numeric = finite_diff_grad(
        |flat| {
            probe.copy_from_flat(flat).unwrap();
            forward(&probe, state).0[selected as usize]
        },
        &base,
        FD_STEP,
    )
    .unwrap();

    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(&numeric) {
        // Stricter than the elementwise |analytic| > 1e-6 gate: a numeric
        // gradient without analytic mass is also a failure.
        if a.abs().max(n.abs()) > 1e-6 {
            let rel = (a - n).abs() / a.abs().max(n.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..6 {
        let (params, state, selected) = sample_case(&mut rng);
        let worst = max_relative_error(&params, &state, selected);
        assert!(
            worst < 1e-4,
            "case {case}: max relative error {worst:.3e} (cfg {:?}, t={})",
            params.config(),
            state.len()
        );
    }
}

#[test]
fn gradient_flows_to_every_parameter_family() {
    // With ≥ 2 items per channel, every tensor that feeds the selected
    // Q-value should receive gradient mass. (Single-item channels would
    // leave w_query/w_key at exactly zero: a one-entry softmax is
    // constant, which is correct, not a bug.)
    let cfg = QNetConfig { n_items: 5, dim: 8, blocks: 2, r_max: 2 };
    let mut state = SupportState::new(2);
    state.push(0, 1);
    state.push(1, 2);
    state.push(2, 1);
    state.push(3, 2);
    // A fully dead ReLU layer legitimately blocks all upstream gradient;
    // pick a seed whose policy hidden layer is alive.
    let params = (0..64u64)
        .map(|seed| QNetParams::init(cfg, seed))
        .find(|p| {
            let (_, cache) = forward(p, &state);
            cache.policy_hidden.as_slice().iter().any(|&h| h > 0.0)
        })
        .expect("some seed yields a live policy layer");
    let (_, cache) = forward(&params, &state);
    let grads = backward(&params, &cache, 4, 1.0).unwrap();
    let names = QNetParams::tensor_names(cfg);
    for (name, tensor) in names.iter().zip(grads.tensors()) {
        let mass: f64 = tensor.as_slice().iter().map(|v| v.abs()).sum();
        assert!(mass > 0.0, "no gradient reached {name}");
    }
}
