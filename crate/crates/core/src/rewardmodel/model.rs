use crate::numerics::{softplus, Bound, ParamSet, Tape, Tensor, Var};
use crate::seqmodel::{Checkpoint, ModelConfig, PolicyModel, SeqError, Transformer};
use crate::taskworld::{Instruction, PreferencePair, Token};

use super::mib::{MibConfig, MibHead, RepresentationLoss};
use super::RewardError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RmRole {
    Initial,
    Retrained,
}

impl RmRole {
    pub fn name(self) -> &'static str {
        match self {
            RmRole::Initial => "initial",
            RmRole::Retrained => "retrained",
        }
    }
}

/// Transformer backbone with a scalar head on mean-pooled final features.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub net: Transformer,
    /// `score.w` `[width, 1]` and `score.b` `[1]`.
    pub head: ParamSet,
    pub role: RmRole,
    pub mib: Option<MibHead>,
}

fn input_ids(x: &Instruction, y: &[Token]) -> Vec<usize> {
    x.prompt.iter().chain(y).map(|t| t.index()).collect()
}

/// Rows of the final layer that are averaged into the pooled feature:
/// the response positions, or the last prompt position for an empty response.
fn pool_range(x: &Instruction, y: &[Token]) -> (usize, usize) {
    if y.is_empty() {
        (x.prompt.len() - 1, 1)
    } else {
        (x.prompt.len(), y.len())
    }
}

impl RewardModel {
    /// Backbone copied from `policy` with a zero scalar head.
    pub fn from_policy(policy: &PolicyModel, role: RmRole) -> Self {
        let width = policy.config().width;
        let mut head = ParamSet::new();
        head.add("score.w", Tensor::zeros(&[width, 1]));
        head.add("score.b", Tensor::zeros(&[1]));
        Self {
            net: policy.net.clone(),
            head,
            role,
            mib: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    fn check_fits(&self, x: &Instruction, y: &[Token]) {
        let ctx = self.config().context_len;
        assert!(
            x.prompt.len() + y.len() <= ctx,
            "prompt and response ({} tokens) exceed context {ctx}",
            x.prompt.len() + y.len()
        );
    }

    /// Mean-pooled final-layer features for `(x, y)`.
    pub fn features(&self, x: &Instruction, y: &[Token]) -> Vec<f64> {
        self.check_fits(x, y);
        let mut dec = self.net.decoder();
        let steps = dec.feed(&input_ids(x, y));
        let (start, len) = pool_range(x, y);
        let mut pooled = vec![0.0; self.config().width];
        for s in &steps[start..start + len] {
            for (p, f) in pooled.iter_mut().zip(&s.features) {
                *p += f;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= len as f64);
        pooled
    }

    pub fn score(&self, x: &Instruction, y: &[Token]) -> f64 {
        let f = self.features(x, y);
        let w = self.head.tensors()[0].data();
        let b = self.head.tensors()[1].data()[0];
        f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b
    }

    /// Pooled features on the tape, `[width]`.
    pub fn features_taped(&self, tape: &mut Tape, backbone: &Bound, x: &Instruction, y: &[Token]) -> Var {
        self.check_fits(x, y);
        let fwd = self.net.forward(tape, backbone, &input_ids(x, y));
        let (start, len) = pool_range(x, y);
        let rows = tape.slice_rows(fwd.features, start, len);
        tape.mean_rows(rows)
    }

    /// Scalar score of pooled features `[width]` (or `[B, width]` giving `[B, 1]`).
    pub fn head_taped(&self, tape: &mut Tape, head: &Bound, pooled: Var) -> Var {
        let hv = head.vars();
        let m = tape.matmul(pooled, hv[0]);
        let m = tape.add_row(m, hv[1]);
        if tape.shape(m).iter().product::<usize>() == 1 {
            tape.reshape(m, &[])
        } else {
            m
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self
            .config()
            .write_meta(Checkpoint::new("reward"))
            .with_meta("role", self.role.name())
            .with_section("backbone", self.net.params())
            .with_section("scalar_head", &self.head);
        if let Some(m) = &self.mib {
            ck = ck
                .with_meta("mib_loss", m.config.loss.name())
                .with_meta("mib_dim_z", m.config.dim_z)
                .with_meta("mib_hidden", m.config.hidden)
                .with_section("mib_head", &m.params);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RewardError> {
        ck.expect_kind("reward")?;
        let config = ModelConfig::read_meta(ck)?;
        let role = match ck.meta("role")? {
            "initial" => RmRole::Initial,
            "retrained" => RmRole::Retrained,
            r => return Err(SeqError::Checkpoint(format!("unknown reward role {r}")).into()),
        };
        let section = |n: &str| {
            ck.section(n)
                .cloned()
                .ok_or_else(|| SeqError::Checkpoint(format!("missing section {n}")))
        };
        let net = Transformer::from_params(config.clone(), section("backbone")?)?;
        let head = section("scalar_head")?;
        let names: Vec<&str> = head.names().iter().map(String::as_str).collect();
        if names != ["score.w", "score.b"]
            || head.tensors()[0].shape() != [config.width, 1]
            || head.tensors()[1].shape() != [1]
        {
            return Err(SeqError::Checkpoint("malformed scalar head".into()).into());
        }
        let mib = match ck.section("mib_head") {
            None => None,
            Some(p) => {
                let loss = RepresentationLoss::parse(ck.meta("mib_loss")?)
                    .ok_or_else(|| SeqError::Checkpoint("unknown mib loss".into()))?;
                let cfg = MibConfig {
                    dim_z: ck.meta_usize("mib_dim_z")?,
                    hidden: ck.meta_usize("mib_hidden")?,
                    loss,
                };
                Some(MibHead::from_params(config.width, cfg, p.clone())?)
            }
        };
        Ok(Self { net, head, role, mib })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), RewardError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RewardError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Mean of `-log sigmoid(gap)` over score gaps `score(y_w) - score(y_l)`.
pub fn pairwise_loss_from_gaps(gaps: &[f64]) -> f64 {
    gaps.iter().map(|&g| softplus(-g)).sum::<f64>() / gaps.len() as f64
}

/// Bradley–Terry negative log-likelihood of a batch of preferences.
pub fn pairwise_loss(model: &RewardModel, batch: &[PreferencePair]) -> Result<f64, RewardError> {
    if batch.is_empty() {
        return Err(RewardError::Config("empty preference batch".into()));
    }
    let gaps: Vec<f64> = batch
        .iter()
        .map(|p| {
            model.score(&p.instruction, &p.chosen.tokens) - model.score(&p.instruction, &p.rejected.tokens)
        })
        .collect();
    Ok(pairwise_loss_from_gaps(&gaps))
}

/// Fraction of pairs whose chosen response scores strictly higher.
pub fn preference_accuracy<'a>(model: &RewardModel, pairs: impl IntoIterator<Item = &'a PreferencePair>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for p in pairs {
        n += 1;
        if model.score(&p.instruction, &p.chosen.tokens) > model.score(&p.instruction, &p.rejected.tokens) {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Anything that assigns a scalar score to a response.
pub trait ResponseScorer {
    fn score_response(&self, x: &Instruction, y: &[Token]) -> f64;
}

impl ResponseScorer for RewardModel {
    fn score_response(&self, x: &Instruction, y: &[Token]) -> f64 {
        self.score(x, y)
    }
}

impl<F: Fn(&Instruction, &[Token]) -> f64> ResponseScorer for F {
    fn score_response(&self, x: &Instruction, y: &[Token]) -> f64 {
        self(x, y)
    }
}
