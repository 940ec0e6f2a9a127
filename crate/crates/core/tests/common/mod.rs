#![allow(dead_code)]

use rand::Rng;
use simulst::numerics::{Tape, Tensor, Var};

/// Builds a loss on a fresh tape from leaf inputs.
pub type LossFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

fn eval(inputs: &[Tensor<f64>], f: &LossFn) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = f(&mut tape, &vars);
    tape.scalar(loss)
}

/// Largest per-tensor relative error between tape gradients and central
/// finite differences with step `h`.
pub fn gradcheck(inputs: &[Tensor<f64>], f: &LossFn, h: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic: Vec<f64> = grads
            .get(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let numeric: Vec<f64> = (0..t.len())
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                (eval(&plus, f) - eval(&minus, f)) / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-7);
        worst = worst.max(rel);
    }
    worst
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

pub fn tiny_config() -> simulst::model::ModelConfig {
    simulst::model::ModelConfig {
        d_feat: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        transformer_layers_per_block: 1,
        semantic_layers: 1,
        decoder_layers: 1,
        src_vocab: 6,
        tgt_vocab: 9,
        dropout: 0.0,
        ..Default::default()
    }
}

pub fn random_features(frames: usize, dim: usize, seed: u64) -> simulst::data::FeatureSequence {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    simulst::data::FeatureSequence::new(frames, dim, data).unwrap()
}

/// Sets the output bias of `token` so that it dominates every decoder step.
pub fn force_token(model: &mut simulst::model::Model, token: usize, bias: f32) {
    let id = model.params.id("decoder.project.b").unwrap();
    model.params.get_mut(id).data_mut()[token] = bias;
}
