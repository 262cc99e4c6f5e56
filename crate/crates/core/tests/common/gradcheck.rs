//! Central finite-difference checks of analytic gradients.

use ktd_core::losses::softmax_raw;
use ktd_core::nets::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// |a - n| / max(|a|, |n|, 1e-5): relative, with an absolute floor for
/// near-zero gradients where finite differences only see rounding noise
/// (a loss of size 30 carries about 1e-9 of it at this step).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Smooth 2-layer network: conv (tanh, average pool) then a shared FC and
/// three heads. 20 + 152 + 27 = 199 parameters.
pub fn smooth_spec(cosine: Option<f64>) -> NetworkSpec {
    let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut spec = NetworkSpec::conv_blocks("grad", 6, &[2], 8, &classes).unwrap();
    spec.backbone = vec![
        LayerSpec::conv3x3(1, 2),
        LayerSpec::Activation {
            func: ActivationKind::Tanh,
        },
        LayerSpec::Pool {
            pool: PoolKind::Avg,
            size: 2,
            stride: 2,
        },
        LayerSpec::Flatten,
    ];
    spec.shared_activation = ActivationKind::Tanh;
    let spec = match cosine {
        Some(s) => spec.with_cosine_heads(s),
        None => spec,
    };
    spec.validate().unwrap();
    assert!(count_params(&spec).unwrap() <= 500);
    spec
}

pub fn randomized(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> WeightBundle {
    let mut bundle = init_weights(spec, rng.random()).unwrap();
    for arr in bundle.entries.values_mut() {
        for v in arr.data.iter_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
    bundle
}

pub type LossFn<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;

/// Largest relative error over all weights for `loss(logits)`.
pub fn network_check(spec: &NetworkSpec, bundle: &WeightBundle, input: &[f64], loss: &LossFn<'_>) -> f64 {
    let net = Network::new(spec, bundle).unwrap();
    let trace = net.forward_traced(input, Mode::Eval).unwrap();
    let (_, d_logits) = loss(&trace.output.logits);
    let mut grads = Gradients::zeros_like(bundle);
    net.backward(&trace, &d_logits, None, &mut grads);

    let eval = |b: &WeightBundle| {
        let out = Network::new(spec, b).unwrap().forward(input, Mode::Eval).unwrap();
        loss(&out.logits).0
    };
    let mut worst: f64 = 0.0;
    let mut probe = bundle.clone();
    for (name, arr) in &bundle.entries {
        for i in 0..arr.data.len() {
            let orig = arr.data[i];
            probe.entries.get_mut(name).unwrap().data[i] = orig + STEP;
            let up = eval(&probe);
            probe.entries.get_mut(name).unwrap().data[i] = orig - STEP;
            let down = eval(&probe);
            probe.entries.get_mut(name).unwrap().data[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(grads.entries[name][i], numeric);
            worst = worst.max(e);
        }
    }
    worst
}

pub fn logits_check(z: &[f64], loss: &LossFn<'_>) -> f64 {
    let (_, g) = loss(z);
    let mut worst: f64 = 0.0;
    let mut probe = z.to_vec();
    for i in 0..z.len() {
        probe[i] = z[i] + STEP;
        let up = loss(&probe).0;
        probe[i] = z[i] - STEP;
        let down = loss(&probe).0;
        probe[i] = z[i];
        let e = rel_err(g[i], (up - down) / (2.0 * STEP));
        worst = worst.max(e);
    }
    worst
}

pub fn pc_away_from_kinks(logits: &[f64], label: usize, xi: f64) -> bool {
    let p = softmax_raw(logits, 1.0);
    (0..p.len()).filter(|j| *j != label).all(|j| (p[j] + xi - p[label]).abs() > 1e-3)
}
