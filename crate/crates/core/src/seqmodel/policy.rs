use rand::Rng as _;

use crate::numerics::{kernels, rng, Bound, ParamSet, Tape, Var};
use crate::taskworld::{Instruction, ModelTag, Response, Sampler, Token};

use super::transformer::{Forward, ModelConfig, Transformer};
use super::SeqError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Sft,
    Policy,
    RetrainedPolicy,
    Reference,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Sft => "sft",
            Role::Policy => "policy",
            Role::RetrainedPolicy => "retrained-policy",
            Role::Reference => "reference",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        [Role::Sft, Role::Policy, Role::RetrainedPolicy, Role::Reference]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

/// Autoregressive language model over the task vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub net: Transformer,
    pub role: Role,
    /// Tag attached to sampled responses.
    pub tag: ModelTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    /// Softmax temperature. Zero selects greedy (argmax) decoding.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub terminator: Token,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(temperature: f64, max_new_tokens: usize, seed: u64) -> Self {
        Self {
            temperature,
            max_new_tokens,
            terminator: Token::EOS,
            seed,
        }
    }

    pub fn greedy(max_new_tokens: usize) -> Self {
        Self::new(0.0, max_new_tokens, 0)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// A sampled response with the model's untempered log-probability rows at
/// each generated step.
#[derive(Clone, Debug)]
pub struct Trace {
    pub response: Response,
    /// `log_probs[i]` is the full log-softmax row that produced token `i`.
    pub log_probs: Vec<Vec<f64>>,
    /// Final-layer features at the position that produced token `i`.
    pub features: Vec<Vec<f64>>,
}

impl Trace {
    pub fn token_logprobs(&self) -> Vec<f64> {
        self.response
            .tokens
            .iter()
            .zip(&self.log_probs)
            .map(|(t, row)| row[t.index()])
            .collect()
    }
}

fn ids(tokens: &[Token]) -> Vec<usize> {
    tokens.iter().map(|t| t.index()).collect()
}

impl PolicyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, SeqError> {
        Ok(Self {
            net: Transformer::new(config, seed)?,
            role: Role::Sft,
            tag: ModelTag::Sft,
        })
    }

    /// Model whose every next-token distribution is uniform.
    pub fn uniform(config: ModelConfig) -> Result<Self, SeqError> {
        let mut m = Self::new(config, 0)?;
        m.net.zero_lm_head();
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.net.params_mut()
    }

    pub fn with_role(mut self, role: Role, tag: ModelTag) -> Self {
        self.role = role;
        self.tag = tag;
        self
    }

    fn check_fits(&self, prompt: usize, new: usize) {
        let ctx = self.config().context_len;
        assert!(
            prompt > 0 && prompt + new <= ctx + 1,
            "prompt of {prompt} plus {new} tokens does not fit context {ctx}"
        );
    }

    /// Autoregressive sampling until the terminator or `max_new_tokens`.
    pub fn sample_traced(&self, x: &Instruction, cfg: &SamplingConfig) -> Trace {
        assert!(cfg.temperature >= 0.0 && cfg.temperature.is_finite(), "bad temperature");
        self.check_fits(x.prompt.len(), cfg.max_new_tokens);
        let mut r = rng::rng(cfg.seed);
        let mut dec = self.net.decoder();
        let prompt = ids(&x.prompt);
        let last = dec.feed(&prompt).pop().expect("nonempty prompt");
        let (mut logits, mut feats) = (last.logits, last.features);
        let vocab = self.config().vocab;
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        let mut features = Vec::new();
        for i in 0..cfg.max_new_tokens {
            let mut lp = logits.clone();
            kernels::log_softmax_rows(&mut lp, vocab);
            let next = if cfg.temperature == 0.0 {
                argmax(&logits)
            } else {
                let mut p: Vec<f64> = logits.iter().map(|v| v / cfg.temperature).collect();
                kernels::softmax_rows(&mut p, vocab);
                categorical(&p, r.random())
            };
            log_probs.push(lp);
            features.push(std::mem::take(&mut feats));
            let tok = Token(next as u8);
            tokens.push(tok);
            if tok == cfg.terminator || i + 1 == cfg.max_new_tokens {
                break;
            }
            let s = dec.step(next);
            logits = s.logits;
            feats = s.features;
        }
        Trace {
            response: Response::new(tokens, self.tag),
            log_probs,
            features,
        }
    }

    pub fn sample(&self, x: &Instruction, cfg: &SamplingConfig) -> Response {
        self.sample_traced(x, cfg).response
    }

    /// `n` independent draws; draw `i` uses a seed hashed from the base
    /// seed, the instruction id, and `i`. Duplicates are kept.
    pub fn sample_set(&self, x: &Instruction, n: usize, cfg: &SamplingConfig) -> Vec<Response> {
        (0..n as u64)
            .map(|i| {
                let seed = rng::derive_seed(&[cfg.seed, rng::label("draw"), x.id, i]);
                self.sample(x, &cfg.with_seed(seed))
            })
            .collect()
    }

    /// Exact log-probability of `y` given `x`: the total and each token's term.
    pub fn sequence_logprob(&self, x: &Instruction, y: &[Token]) -> (f64, Vec<f64>) {
        let rows = self.logprob_rows(x, y);
        let per: Vec<f64> = y.iter().zip(&rows).map(|(t, r)| r[t.index()]).collect();
        (per.iter().sum(), per)
    }

    /// Full log-softmax rows that score each token of `y`.
    pub fn logprob_rows(&self, x: &Instruction, y: &[Token]) -> Vec<Vec<f64>> {
        if y.is_empty() {
            return Vec::new();
        }
        self.check_fits(x.prompt.len(), y.len());
        let mut dec = self.net.decoder();
        let mut input = ids(&x.prompt);
        input.extend(y[..y.len() - 1].iter().map(|t| t.index()));
        let vocab = self.config().vocab;
        let steps = dec.feed(&input);
        steps[x.prompt.len() - 1..]
            .iter()
            .map(|s| {
                let mut lp = s.logits.clone();
                kernels::log_softmax_rows(&mut lp, vocab);
                lp
            })
            .collect()
    }

    /// Taped scoring of `y` after `x`: per-token log-probabilities `[|y|]`,
    /// full log-softmax rows `[|y|, vocab]`, and the forward pass.
    pub fn taped_logprobs(&self, tape: &mut Tape, p: &Bound, x: &Instruction, y: &[Token]) -> TapedScore {
        assert!(!y.is_empty(), "cannot score an empty response on the tape");
        self.check_fits(x.prompt.len(), y.len());
        let mut input = ids(&x.prompt);
        input.extend(y[..y.len() - 1].iter().map(|t| t.index()));
        let fwd = self.net.forward(tape, p, &input);
        let start = x.prompt.len() - 1;
        let logits = tape.slice_rows(fwd.logits, start, y.len());
        let rows = tape.log_softmax(logits);
        let token = tape.gather(rows, &ids(y));
        TapedScore { token, rows, forward: fwd, start }
    }
}

pub struct TapedScore {
    pub token: Var,
    pub rows: Var,
    pub forward: Forward,
    /// Row of the forward pass that predicts the first response token.
    pub start: usize,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// Binds a policy to a sampling configuration for preference collection.
pub struct PolicySampler<'a> {
    pub model: &'a PolicyModel,
    pub config: SamplingConfig,
}

impl Sampler for PolicySampler<'_> {
    fn sample_response(&self, x: &Instruction, seed: u64) -> Response {
        self.model.sample(x, &self.config.with_seed(seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskworld::TaskFamily;

    #[test]
    fn categorical_edges() {
        assert_eq!(categorical(&[0.2, 0.3, 0.5], 0.0), 0);
        assert_eq!(categorical(&[0.2, 0.3, 0.5], 0.25), 1);
        assert_eq!(categorical(&[0.2, 0.3, 0.5, 0.0], 1.0 - 1e-17), 2);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn taped_and_decoder_scores_agree() {
        let m = PolicyModel::new(ModelConfig::default(), 4).unwrap();
        let x = Instruction::new(0, TaskFamily::Sort, 0, vec![Token::letter(3), Token::letter(1)]);
        let y = [Token::letter(1), Token::letter(3), Token::EOS];
        let (total, per) = m.sequence_logprob(&x, &y);
        let mut tape = Tape::new();
        let p = m.params().bind_frozen(&mut tape);
        let s = m.taped_logprobs(&mut tape, &p, &x, &y);
        for (a, b) in per.iter().zip(tape.value(s.token).data()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((total - per.iter().sum::<f64>()).abs() < 1e-12);
    }
}
