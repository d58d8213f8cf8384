use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::numerics::{rng, Adam, AdamConfig, ParamSet, Tape};
use crate::spg::PolicySampleSet;
use crate::taskworld::{PreferenceDataset, PreferencePair};

use super::mib::{MibHead, ViewNoise};
use super::model::{preference_accuracy, RewardModel, RmRole};
use super::RewardError;

#[derive(Clone, Debug, PartialEq)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Let the representation loss update the shared backbone, not only the
    /// head.
    pub mib_into_backbone: bool,
    /// Train only the heads; the backbone stays at its initial values.
    pub freeze_backbone: bool,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: AdamConfig::with_lr(3e-4),
            seed: 0,
            mib_into_backbone: true,
            freeze_backbone: false,
        }
    }
}

/// Training data for one reward-model fit.
#[derive(Clone, Copy, Debug, Default)]
pub struct RewardInputs<'a> {
    /// Human-simulated preferences `D`.
    pub human: Option<&'a PreferenceDataset>,
    /// Synthetic preferences `D-hat`.
    pub synthetic: Option<&'a PreferenceDataset>,
    /// Policy samples `P`, the source of view pairs.
    pub samples: Option<&'a [PolicySampleSet]>,
    /// Held-out pairs for per-epoch accuracy.
    pub heldout: Option<&'a PreferenceDataset>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub step: usize,
    pub pairs: usize,
    pub views: usize,
    pub pairwise: f64,
    pub mib: f64,
    pub mi: f64,
    pub skl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pairwise: f64,
    pub mib: f64,
    pub total: f64,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardLog {
    pub lambda: f64,
    pub batches: Vec<BatchRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RewardLog {
    /// One tab-separated `key=value` line per batch and per epoch.
    pub fn write_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for b in &self.batches {
            writeln!(
                w,
                "kind=batch\tepoch={}\tstep={}\tpairs={}\tviews={}\tpairwise={:.6}\tmib={:.6}\tmi={:.6}\tskl={:.6}\tlambda={}\ttotal={:.6}",
                b.epoch, b.step, b.pairs, b.views, b.pairwise, b.mib, b.mi, b.skl, self.lambda, b.total
            )?;
        }
        for e in &self.epochs {
            let acc = e.heldout_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            writeln!(
                w,
                "kind=epoch\tepoch={}\tpairwise={:.6}\tmib={:.6}\ttotal={:.6}\theldout_accuracy={acc}",
                e.epoch, e.pairwise, e.mib, e.total
            )?;
        }
        Ok(())
    }
}

/// Split `n` items into `parts` contiguous, nearly equal ranges.
fn balanced_chunks(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = n / parts + usize::from(i < n % parts);
        out.push((start, len));
        start += len;
    }
    out
}

/// Fit a reward model on `D ∪ D-hat` with pairwise loss, plus `lambda`
/// times the head's representation loss on view pairs from `P`.
///
/// Each epoch shuffles the pairs into batches and draws one view pair per
/// sampled instruction, spreading the view pairs evenly over the same
/// batches. With `lambda = 0` no view pairs are drawn and the head is unused.
pub fn train_reward(
    init: &RewardModel,
    inputs: &RewardInputs<'_>,
    head: Option<&MibHead>,
    lambda: f64,
    cfg: &RewardTrainConfig,
) -> Result<(RewardModel, RewardLog), RewardError> {
    let human = inputs
        .human
        .filter(|d| !d.is_empty())
        .ok_or_else(|| RewardError::Config("human preference dataset is empty".into()))?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(RewardError::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if cfg.batch_size == 0 {
        return Err(RewardError::Config("batch_size must be positive".into()));
    }
    let use_mib = lambda > 0.0;
    let (head, samples) = if use_mib {
        let h = head.ok_or(RewardError::MissingViews("a representation head"))?;
        let s = inputs
            .samples
            .filter(|s| s.len() >= 2)
            .ok_or(RewardError::MissingViews("at least two policy sample sets"))?;
        if h.feature_dim != init.config().width {
            return Err(RewardError::DimensionMismatch {
                left: h.feature_dim,
                right: init.config().width,
            });
        }
        (Some(h), s)
    } else {
        (None, &[][..])
    };

    let pairs: Vec<&PreferencePair> = human
        .iter()
        .chain(inputs.synthetic.into_iter().flat_map(|d| d.iter()))
        .collect();

    let mut model = init.clone();
    let n_backbone = model.net.params().len();
    let n_head = model.head.len();
    let mut joint = model.net.params().clone();
    joint.append(&model.head);
    if let Some(h) = head {
        joint.append(&h.params);
    }
    let mut opt = Adam::new(cfg.optimizer.clone(), &joint);
    let mut log = RewardLog {
        lambda,
        ..Default::default()
    };
    let steps = pairs.len().div_ceil(cfg.batch_size);
    let view_chunks = balanced_chunks(samples.len(), steps.min(samples.len() / 2).max(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut set_order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        order.shuffle(&mut rng::rng(rng::derive_seed(&[cfg.seed, rng::label("rm-pairs"), e])));
        let mut views = Vec::new();
        if use_mib {
            let mut r = rng::rng(rng::derive_seed(&[cfg.seed, rng::label("rm-views"), e]));
            set_order.shuffle(&mut r);
            for &si in &set_order {
                let n = samples[si].responses.len();
                let i = r.random_range(0..n);
                let j = (i + 1 + r.random_range(0..n - 1)) % n;
                views.push((si, i, j));
            }
        }
        let (mut sum_pair, mut sum_mib, mut sum_total) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let chunk = &order[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(order.len())];
            let mut tape = Tape::new();
            let p = joint.bind(&mut tape);
            let bb = p.range(0, n_backbone);
            let hb = p.range(n_backbone, n_head);
            let mut gaps = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let pr = pairs[k];
                let fw = model.features_taped(&mut tape, &bb, &pr.instruction, &pr.chosen.tokens);
                let fl = model.features_taped(&mut tape, &bb, &pr.instruction, &pr.rejected.tokens);
                let sw = model.head_taped(&mut tape, &hb, fw);
                let sl = model.head_taped(&mut tape, &hb, fl);
                let gap = tape.sub(sw, sl);
                let nll = tape.neg(gap);
                gaps.push(tape.softplus(nll));
            }
            let pair_sum = tape.add_all(&gaps);
            let pair_loss = tape.scale(pair_sum, 1.0 / chunk.len() as f64);
            let mut record = BatchRecord {
                epoch,
                step,
                pairs: chunk.len(),
                views: 0,
                pairwise: tape.scalar(pair_loss),
                mib: 0.0,
                mi: 0.0,
                skl: 0.0,
                total: 0.0,
            };
            let mut loss = pair_loss;
            if let (Some(h), Some(&(start, len))) = (head, view_chunks.get(step).filter(|_| use_mib)) {
                let feat_bound = if cfg.mib_into_backbone {
                    bb.clone()
                } else {
                    model.net.params().bind_frozen(&mut tape)
                };
                let (mut f1, mut f2) = (Vec::with_capacity(len), Vec::with_capacity(len));
                for &(si, i, j) in &views[start..start + len] {
                    let s = &samples[si];
                    f1.push(model.features_taped(&mut tape, &feat_bound, &s.instruction, &s.responses[i].tokens));
                    f2.push(model.features_taped(&mut tape, &feat_bound, &s.instruction, &s.responses[j].tokens));
                }
                let v1 = tape.stack_rows(&f1);
                let v2 = tape.stack_rows(&f2);
                let mb = p.range(n_backbone + n_head, h.params.len());
                let noise = ViewNoise::draw(
                    len,
                    h.config.dim_z,
                    rng::derive_seed(&[cfg.seed, rng::label("rm-noise"), e, step as u64]),
                );
                let terms = h.loss_taped(&mut tape, &mb, v1, v2, &noise);
                record.views = len;
                record.mib = tape.scalar(terms.loss);
                record.mi = tape.scalar(terms.mi);
                record.skl = terms.skl.map(|s| tape.scalar(s)).unwrap_or(0.0);
                let weighted = tape.scale(terms.loss, lambda);
                loss = tape.add(loss, weighted);
            }
            record.total = tape.scalar(loss);
            if !record.total.is_finite() {
                return Err(RewardError::Divergence { epoch, step });
            }
            let mut grads = p.grads(&tape.backward(loss)?);
            if cfg.freeze_backbone {
                grads[..n_backbone].iter_mut().for_each(|g| g.data_mut().fill(0.0));
            }
            opt.step(&mut joint, &mut grads)?;
            sync(&mut model, &joint, n_backbone);
            sum_pair += record.pairwise;
            sum_mib += record.mib;
            sum_total += record.total;
            log.batches.push(record);
        }
        log.epochs.push(EpochRecord {
            epoch,
            pairwise: sum_pair / steps as f64,
            mib: sum_mib / steps as f64,
            total: sum_total / steps as f64,
            heldout_accuracy: inputs.heldout.map(|h| preference_accuracy(&model, h.iter())),
        });
    }
    if let Some(h) = head {
        let mut mib = h.clone();
        mib.params = joint.split_off(n_backbone + n_head);
        model.mib = Some(mib);
    }
    if inputs.synthetic.is_some() || use_mib {
        model.role = RmRole::Retrained;
    }
    Ok((model, log))
}

/// Copy the backbone and scalar-head slices of the joint set back.
fn sync(model: &mut RewardModel, joint: &ParamSet, n_backbone: usize) {
    let t = joint.tensors();
    model.net.params_mut().tensors_mut().clone_from_slice(&t[..n_backbone]);
    let n_head = model.head.len();
    model.head.tensors_mut().clone_from_slice(&t[n_backbone..n_backbone + n_head]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything() {
        let c = balanced_chunks(400, 7);
        assert_eq!(c.len(), 7);
        assert_eq!(c.iter().map(|x| x.1).sum::<usize>(), 400);
        assert!(c.windows(2).all(|w| w[0].0 + w[0].1 == w[1].0));
    }
}
