//! Pre-LN decoder-only transformer shared by policies and reward models.

use crate::numerics::kernels::{self, gelu};
use crate::numerics::{rng, Bound, ParamId, ParamSet, Tape, Tensor, Var};

use super::SeqError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub context_len: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: crate::taskworld::VOCAB_SIZE,
            context_len: 19,
            width: 64,
            heads: 4,
            blocks: 2,
            mlp: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), SeqError> {
        let dims = [self.vocab, self.context_len, self.width, self.heads, self.blocks, self.mlp];
        if dims.contains(&0) {
            return Err(SeqError::Config("all model dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(SeqError::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Parameter shapes in canonical order.
fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, m) = (c.width, c.mlp);
    let mut v = vec![
        ("tok_emb".to_string(), vec![c.vocab, d]),
        ("pos_emb".to_string(), vec![c.context_len, d]),
    ];
    for b in 0..c.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        v.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.w_qkv"), vec![d, 3 * d]),
            (p("attn.b_qkv"), vec![3 * d]),
            (p("attn.w_out"), vec![d, d]),
            (p("attn.b_out"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("mlp.w_fc"), vec![d, m]),
            (p("mlp.b_fc"), vec![m]),
            (p("mlp.w_proj"), vec![m, d]),
            (p("mlp.b_proj"), vec![d]),
        ]);
    }
    v.extend([
        ("ln_f.gain".to_string(), vec![d]),
        ("ln_f.bias".to_string(), vec![d]),
        ("lm_head.w".to_string(), vec![d, c.vocab]),
        ("lm_head.b".to_string(), vec![c.vocab]),
    ]);
    v
}

impl Layout {
    fn resolve(c: &ModelConfig, params: &ParamSet) -> Result<Self, SeqError> {
        let shapes = param_shapes(c);
        if params.len() != shapes.len() {
            return Err(SeqError::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in shapes.iter().enumerate() {
            if params.names()[i] != *name || params.tensors()[i].shape() != shape.as_slice() {
                return Err(SeqError::Config(format!(
                    "parameter {i}: expected {name} {shape:?}, found {} {:?}",
                    params.names()[i],
                    params.tensors()[i].shape()
                )));
            }
        }
        let id = |n: &str| params.find(n).expect("validated above");
        let blocks = (0..c.blocks)
            .map(|b| {
                let p = |s: &str| id(&format!("block{b}.{s}"));
                BlockIds {
                    ln1_g: p("ln1.gain"),
                    ln1_b: p("ln1.bias"),
                    w_qkv: p("attn.w_qkv"),
                    b_qkv: p("attn.b_qkv"),
                    w_o: p("attn.w_out"),
                    b_o: p("attn.b_out"),
                    ln2_g: p("ln2.gain"),
                    ln2_b: p("ln2.bias"),
                    w_fc: p("mlp.w_fc"),
                    b_fc: p("mlp.b_fc"),
                    w_proj: p("mlp.w_proj"),
                    b_proj: p("mlp.b_proj"),
                }
            })
            .collect();
        Ok(Self {
            tok_emb: id("tok_emb"),
            pos_emb: id("pos_emb"),
            blocks,
            lnf_g: id("ln_f.gain"),
            lnf_b: id("ln_f.bias"),
            head_w: id("lm_head.w"),
            head_b: id("lm_head.b"),
        })
    }
}

/// Output of a taped forward pass over one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Final-layer features after the last layer norm, `[T, width]`.
    pub features: Var,
    /// Next-token logits, `[T, vocab]`.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl Transformer {
    /// Random initialisation: N(0, 0.02) weights, residual projections
    /// scaled down by sqrt(2 * blocks), zero biases, unit gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, SeqError> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let resid_std = 0.02 / ((2 * config.blocks) as f64).sqrt();
        let mut params = ParamSet::new();
        for (name, shape) in param_shapes(&config) {
            let t = if name.ends_with("gain") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else if name.ends_with("w_out") || name.ends_with("w_proj") {
                Tensor::randn(&shape, resid_std, &mut r)
            } else {
                Tensor::randn(&shape, 0.02, &mut r)
            };
            params.add(name, t);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, SeqError> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Zero the output projection so every next-token distribution is uniform.
    pub fn zero_lm_head(&mut self) {
        for id in [self.layout.head_w, self.layout.head_b] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Taped forward pass over `tokens` (token indices).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, tokens: &[usize]) -> Forward {
        let c = &self.config;
        let t = tokens.len();
        assert!(t > 0 && t <= c.context_len, "sequence length {t} outside 1..={}", c.context_len);
        let l = &self.layout;
        let positions: Vec<usize> = (0..t).collect();
        let tok = tape.embedding(p[l.tok_emb], tokens);
        let pos = tape.embedding(p[l.pos_emb], &positions);
        let mut x = tape.add(tok, pos);
        let dh = c.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for b in &l.blocks {
            let h = tape.layer_norm(x, p[b.ln1_g], p[b.ln1_b]);
            let qkv = tape.matmul(h, p[b.w_qkv]);
            let qkv = tape.add_row(qkv, p[b.b_qkv]);
            let mut heads = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let q = tape.slice_cols(qkv, hd * dh, dh);
                let k = tape.slice_cols(qkv, c.width + hd * dh, dh);
                let v = tape.slice_cols(qkv, 2 * c.width + hd * dh, dh);
                let s = tape.matmul_nt(q, k);
                let s = tape.scale(s, inv_sqrt);
                let a = tape.causal_softmax(s);
                heads.push(tape.matmul(a, v));
            }
            let att = tape.concat_cols(&heads);
            let att = tape.matmul(att, p[b.w_o]);
            let att = tape.add_row(att, p[b.b_o]);
            x = tape.add(x, att);
            let h = tape.layer_norm(x, p[b.ln2_g], p[b.ln2_b]);
            let m = tape.matmul(h, p[b.w_fc]);
            let m = tape.add_row(m, p[b.b_fc]);
            let m = tape.gelu(m);
            let m = tape.matmul(m, p[b.w_proj]);
            let m = tape.add_row(m, p[b.b_proj]);
            x = tape.add(x, m);
        }
        let features = tape.layer_norm(x, p[l.lnf_g], p[l.lnf_b]);
        let logits = tape.matmul(features, p[l.head_w]);
        let logits = tape.add_row(logits, p[l.head_b]);
        Forward { features, logits }
    }

    /// Tape-free incremental evaluator with cached keys and values.
    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            model: self,
            keys: vec![Vec::new(); self.config.blocks],
            values: vec![Vec::new(); self.config.blocks],
            pos: 0,
        }
    }
}

/// Feeds tokens one at a time and returns the features and logits at each
/// new position. Produces the same values as [`Transformer::forward`].
pub struct Decoder<'a> {
    model: &'a Transformer,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

/// Per-position output of the decoder.
pub struct Step {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Decoder<'_> {
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn step(&mut self, token: usize) -> Step {
        let m = self.model;
        let c = &m.config;
        let l = &m.layout;
        let ps = &m.params;
        assert!(self.pos < c.context_len, "context length {} exceeded", c.context_len);
        assert!(token < c.vocab, "token {token} out of range");
        let d = c.width;
        let dh = c.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut x: Vec<f64> = ps
            .get(l.tok_emb)
            .row(token)
            .iter()
            .zip(ps.get(l.pos_emb).row(self.pos))
            .map(|(a, b)| a + b)
            .collect();
        let n = self.pos + 1;
        for (bi, b) in l.blocks.iter().enumerate() {
            let (h, _, _) = kernels::layer_norm(&x, ps.get(b.ln1_g).data(), ps.get(b.ln1_b).data(), 1, d);
            let qkv = kernels::linear(&h, ps.get(b.w_qkv).data(), ps.get(b.b_qkv).data(), 1, d, 3 * d);
            self.keys[bi].extend_from_slice(&qkv[d..2 * d]);
            self.values[bi].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&self.keys[bi], &self.values[bi]);
            let mut att = vec![0.0; d];
            let mut w = vec![0.0; n];
            for hd in 0..c.heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = kernels::dot(q, &keys[j * d + hd * dh..j * d + (hd + 1) * dh]) * inv_sqrt;
                }
                kernels::softmax_rows(&mut w, n);
                let out = &mut att[hd * dh..(hd + 1) * dh];
                for (j, &wj) in w.iter().enumerate() {
                    for (o, &v) in out.iter_mut().zip(&values[j * d + hd * dh..j * d + (hd + 1) * dh]) {
                        *o += wj * v;
                    }
                }
            }
            let proj = kernels::linear(&att, ps.get(b.w_o).data(), ps.get(b.b_o).data(), 1, d, d);
            for (xi, a) in x.iter_mut().zip(&proj) {
                *xi += a;
            }
            let (h, _, _) = kernels::layer_norm(&x, ps.get(b.ln2_g).data(), ps.get(b.ln2_b).data(), 1, d);
            let mut hid = kernels::linear(&h, ps.get(b.w_fc).data(), ps.get(b.b_fc).data(), 1, d, c.mlp);
            for v in &mut hid {
                *v = gelu(*v);
            }
            let out = kernels::linear(&hid, ps.get(b.w_proj).data(), ps.get(b.b_proj).data(), 1, c.mlp, d);
            for (xi, a) in x.iter_mut().zip(&out) {
                *xi += a;
            }
        }
        let (features, _, _) = kernels::layer_norm(&x, ps.get(l.lnf_g).data(), ps.get(l.lnf_b).data(), 1, d);
        let logits = kernels::linear(&features, ps.get(l.head_w).data(), ps.get(l.head_b).data(), 1, d, c.vocab);
        self.pos += 1;
        Step { features, logits }
    }

    /// Feed several tokens, returning the output at every fed position.
    pub fn feed(&mut self, tokens: &[usize]) -> Vec<Step> {
        tokens.iter().map(|&t| self.step(t)).collect()
    }
}
