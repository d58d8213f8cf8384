use rand::seq::SliceRandom;

use crate::numerics::{rng, Adam, AdamConfig, Tape};
use crate::taskworld::{Instruction, Response};

use super::policy::PolicyModel;
use super::SeqError;

#[derive(Clone, Debug, PartialEq)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SftLog {
    /// Mean response-token cross-entropy before any update.
    pub initial_loss: f64,
    /// Mean minibatch loss during each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean response-token cross-entropy after training.
    pub final_loss: f64,
}

/// Mean cross-entropy per response token, prompts excluded.
pub fn demo_cross_entropy(model: &PolicyModel, demos: &[(Instruction, Response)]) -> f64 {
    let (mut nll, mut count) = (0.0, 0usize);
    for (x, y) in demos {
        let (lp, per) = model.sequence_logprob(x, &y.tokens);
        nll -= lp;
        count += per.len();
    }
    nll / count.max(1) as f64
}

/// Supervised fine-tuning with the loss restricted to response tokens.
pub fn sft_train(
    init: &PolicyModel,
    demos: &[(Instruction, Response)],
    cfg: &SftConfig,
) -> Result<(PolicyModel, SftLog), SeqError> {
    if demos.is_empty() {
        return Err(SeqError::Config("no demonstrations".into()));
    }
    if cfg.batch_size == 0 {
        return Err(SeqError::Config("batch_size must be positive".into()));
    }
    if demos.iter().any(|(_, y)| y.is_empty()) {
        return Err(SeqError::Config("demonstration with empty response".into()));
    }
    let mut model = init.clone();
    let mut log = SftLog {
        initial_loss: demo_cross_entropy(&model, demos),
        ..Default::default()
    };
    let mut opt = Adam::new(cfg.optimizer.clone(), model.params());
    let mut order: Vec<usize> = (0..demos.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::rng(rng::derive_seed(&[cfg.seed, rng::label("sft"), epoch as u64])));
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape);
            let mut terms = Vec::with_capacity(chunk.len());
            let mut count = 0;
            for &i in chunk {
                let (x, y) = &demos[i];
                let s = model.taped_logprobs(&mut tape, &p, x, &y.tokens);
                terms.push(tape.sum(s.token));
                count += y.len();
            }
            let sum = tape.add_all(&terms);
            let loss = tape.scale(sum, -1.0 / count as f64);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(SeqError::Divergence { epoch, step });
            }
            let mut grads = p.grads(&tape.backward(loss)?);
            opt.step(model.params_mut(), &mut grads)?;
            total += value;
            batches += 1;
        }
        log.epoch_losses.push(total / batches as f64);
    }
    log.final_loss = demo_cross_entropy(&model, demos);
    Ok((model, log))
}
