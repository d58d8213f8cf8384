use crate::numerics::{rng::Rng, Bound, ParamId, ParamSet, Tape, Tensor, Var};

/// Three linear layers with GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp3 {
    layers: [(ParamId, ParamId); 3],
    pub input: usize,
    pub output: usize,
}

impl Mlp3 {
    /// Register the layer tensors in `params` under `prefix`. Weights are
    /// N(0, 1/fan_in) scaled by `last_scale` for the final layer.
    pub fn build(
        params: &mut ParamSet,
        prefix: &str,
        dims: [usize; 4],
        last_scale: f64,
        r: &mut Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(3);
        for l in 0..3 {
            let (i, o) = (dims[l], dims[l + 1]);
            let std = (1.0 / i as f64).sqrt() * if l == 2 { last_scale } else { 1.0 };
            let w = params.add(format!("{prefix}.l{}.w", l + 1), Tensor::randn(&[i, o], std, r));
            let b = params.add(format!("{prefix}.l{}.b", l + 1), Tensor::zeros(&[o]));
            layers.push((w, b));
        }
        Self {
            layers: [layers[0], layers[1], layers[2]],
            input: dims[0],
            output: dims[3],
        }
    }

    /// Re-resolve a network previously built under `prefix`.
    pub fn find(params: &ParamSet, prefix: &str) -> Option<Self> {
        let mut layers = Vec::with_capacity(3);
        for l in 1..=3 {
            let w = params.find(&format!("{prefix}.l{l}.w"))?;
            let b = params.find(&format!("{prefix}.l{l}.b"))?;
            layers.push((w, b));
        }
        let input = params.get(layers[0].0).shape()[0];
        let output = params.get(layers[2].0).shape()[1];
        Some(Self {
            layers: [layers[0], layers[1], layers[2]],
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, p[w]);
            h = tape.add_row(h, p[b]);
            if l < 2 {
                h = tape.gelu(h);
            }
        }
        h
    }
}
