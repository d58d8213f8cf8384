use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::numerics::{rng, AdamConfig};
use crate::rewardmodel::{MibConfig, RepresentationLoss, RewardTrainConfig};
use crate::rloptim::PpoConfig;
use crate::seqmodel::{ModelConfig, SamplingConfig, SftConfig};
use crate::spg::{SpgConfig, WinnerRule};
use crate::taskworld::{SplitCounts, TrueRewardSpec, WorldConfig};

use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Sft,
    BestOfN,
    Ppo,
    RlpUml,
    RlpSpg,
    Ablations,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::BestOfN => "best-of-n",
            Method::Ppo => "ppo",
            Method::RlpUml => "rlp-uml",
            Method::RlpSpg => "rlp-spg",
            Method::Ablations => "ablations",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [
            Method::Sft,
            Method::BestOfN,
            Method::Ppo,
            Method::RlpUml,
            Method::RlpSpg,
            Method::Ablations,
        ]
        .into_iter()
        .find(|m| m.name() == s)
    }
}

/// Every knob of one experiment. Serialised as flat `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub out_dir: PathBuf,

    pub alphabet: usize,
    pub min_args: usize,
    pub max_args: usize,
    pub max_response_len: usize,
    pub n_sft: usize,
    pub n_preference: usize,
    pub n_unlabeled: usize,
    pub n_eval: usize,

    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp: usize,

    pub correctness_weight: f64,
    pub brevity_weight: f64,
    pub format_weight: f64,
    pub tau: f64,
    pub verbosity_bias: f64,

    pub sft_epochs: usize,
    pub sft_batch: usize,
    pub sft_lr: f64,

    pub rm_epochs: usize,
    pub rm_batch: usize,
    pub rm_lr: f64,

    pub ppo_iterations: usize,
    pub ppo_beta: f64,
    pub ppo_clip: f64,
    pub ppo_epochs: usize,
    pub ppo_rollout_batch: usize,
    pub ppo_minibatch: usize,
    pub ppo_lr: f64,
    pub ppo_kl_stop: f64,
    pub ppo_value_coef: f64,
    pub ppo_gae_lambda: f64,

    /// Samples per instruction in the policy sample dataset.
    pub samples_n: usize,
    pub spg_gamma: f64,
    pub spg_winner: WinnerRule,
    pub mib_lambda: f64,
    pub mib_loss: RepresentationLoss,
    pub mib_dim_z: usize,
    pub mib_hidden: usize,
    pub mib_into_backbone: bool,
    /// Start the retrained reward model from the initial one instead of a
    /// fresh head on the SFT backbone.
    pub rm_warm_start: bool,

    pub train_temperature: f64,
    pub eval_temperature: f64,
    pub best_of_n: usize,
    pub eval_seeds: Vec<u64>,
    pub ablation_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let counts = SplitCounts::default();
        let model = ModelConfig::default();
        let spec = TrueRewardSpec::default();
        let sft = SftConfig::default();
        let rm = RewardTrainConfig::default();
        let ppo = PpoConfig::default();
        let mib = MibConfig::default();
        Self {
            seed: 0,
            method: Method::RlpSpg,
            out_dir: PathBuf::from("runs/default"),
            alphabet: world.alphabet,
            min_args: world.min_args,
            max_args: world.max_args,
            max_response_len: world.max_response_len,
            n_sft: counts.sft,
            n_preference: counts.preference,
            n_unlabeled: counts.unlabeled,
            n_eval: counts.eval,
            width: model.width,
            heads: model.heads,
            blocks: model.blocks,
            mlp: model.mlp,
            correctness_weight: spec.correctness_weight,
            brevity_weight: spec.brevity_weight,
            format_weight: spec.format_weight,
            tau: spec.tau,
            verbosity_bias: spec.verbosity_bias,
            sft_epochs: sft.epochs,
            sft_batch: sft.batch_size,
            sft_lr: sft.optimizer.lr,
            rm_epochs: rm.epochs,
            rm_batch: rm.batch_size,
            rm_lr: rm.optimizer.lr,
            ppo_iterations: ppo.iterations,
            ppo_beta: ppo.beta,
            ppo_clip: ppo.clip,
            ppo_epochs: ppo.epochs,
            ppo_rollout_batch: ppo.rollout_batch,
            ppo_minibatch: ppo.minibatch,
            ppo_lr: ppo.optimizer.lr,
            ppo_kl_stop: ppo.kl_stop,
            ppo_value_coef: ppo.value_coef,
            ppo_gae_lambda: ppo.gae_lambda,
            samples_n: 10,
            spg_gamma: 0.5,
            spg_winner: WinnerRule::RewardArgmax,
            mib_lambda: 0.5,
            mib_loss: mib.loss,
            mib_dim_z: mib.dim_z,
            mib_hidden: mib.hidden,
            mib_into_backbone: rm.mib_into_backbone,
            rm_warm_start: false,
            train_temperature: 1.0,
            eval_temperature: 0.7,
            best_of_n: 16,
            eval_seeds: vec![0, 1, 2],
            ablation_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn seeds_text(v: &[u64]) -> String {
    v.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

fn winner_name(w: WinnerRule) -> &'static str {
    match w {
        WinnerRule::RewardArgmax => "argmax",
        WinnerRule::Uniform => "uniform",
    }
}

impl ExperimentConfig {
    /// Keys and rendered values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("method", self.method.name().into()),
            ("out_dir", self.out_dir.display().to_string()),
            ("alphabet", self.alphabet.to_string()),
            ("min_args", self.min_args.to_string()),
            ("max_args", self.max_args.to_string()),
            ("max_response_len", self.max_response_len.to_string()),
            ("n_sft", self.n_sft.to_string()),
            ("n_preference", self.n_preference.to_string()),
            ("n_unlabeled", self.n_unlabeled.to_string()),
            ("n_eval", self.n_eval.to_string()),
            ("width", self.width.to_string()),
            ("heads", self.heads.to_string()),
            ("blocks", self.blocks.to_string()),
            ("mlp", self.mlp.to_string()),
            ("correctness_weight", self.correctness_weight.to_string()),
            ("brevity_weight", self.brevity_weight.to_string()),
            ("format_weight", self.format_weight.to_string()),
            ("tau", self.tau.to_string()),
            ("verbosity_bias", self.verbosity_bias.to_string()),
            ("sft_epochs", self.sft_epochs.to_string()),
            ("sft_batch", self.sft_batch.to_string()),
            ("sft_lr", self.sft_lr.to_string()),
            ("rm_epochs", self.rm_epochs.to_string()),
            ("rm_batch", self.rm_batch.to_string()),
            ("rm_lr", self.rm_lr.to_string()),
            ("ppo_iterations", self.ppo_iterations.to_string()),
            ("ppo_beta", self.ppo_beta.to_string()),
            ("ppo_clip", self.ppo_clip.to_string()),
            ("ppo_epochs", self.ppo_epochs.to_string()),
            ("ppo_rollout_batch", self.ppo_rollout_batch.to_string()),
            ("ppo_minibatch", self.ppo_minibatch.to_string()),
            ("ppo_lr", self.ppo_lr.to_string()),
            ("ppo_kl_stop", self.ppo_kl_stop.to_string()),
            ("ppo_value_coef", self.ppo_value_coef.to_string()),
            ("ppo_gae_lambda", self.ppo_gae_lambda.to_string()),
            ("samples_n", self.samples_n.to_string()),
            ("spg_gamma", self.spg_gamma.to_string()),
            ("spg_winner", winner_name(self.spg_winner).into()),
            ("mib_lambda", self.mib_lambda.to_string()),
            ("mib_loss", self.mib_loss.name().into()),
            ("mib_dim_z", self.mib_dim_z.to_string()),
            ("mib_hidden", self.mib_hidden.to_string()),
            ("mib_into_backbone", self.mib_into_backbone.to_string()),
            ("rm_warm_start", self.rm_warm_start.to_string()),
            ("train_temperature", self.train_temperature.to_string()),
            ("eval_temperature", self.eval_temperature.to_string()),
            ("best_of_n", self.best_of_n.to_string()),
            ("eval_seeds", seeds_text(&self.eval_seeds)),
            ("ablation_seeds", seeds_text(&self.ablation_seeds)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
            v.parse()
                .map_err(|_| PipelineError::Config(format!("bad value `{v}` for `{key}`")))
        }
        fn seeds(key: &str, v: &str) -> Result<Vec<u64>, PipelineError> {
            v.split(',').map(|s| num(key, s.trim())).collect()
        }
        let bad = |what: &str| PipelineError::Config(format!("unknown {what} `{value}` for `{key}`"));
        match key {
            "seed" => self.seed = num(key, value)?,
            "method" => self.method = Method::parse(value).ok_or_else(|| bad("method"))?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "alphabet" => self.alphabet = num(key, value)?,
            "min_args" => self.min_args = num(key, value)?,
            "max_args" => self.max_args = num(key, value)?,
            "max_response_len" => self.max_response_len = num(key, value)?,
            "n_sft" => self.n_sft = num(key, value)?,
            "n_preference" => self.n_preference = num(key, value)?,
            "n_unlabeled" => self.n_unlabeled = num(key, value)?,
            "n_eval" => self.n_eval = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "mlp" => self.mlp = num(key, value)?,
            "correctness_weight" => self.correctness_weight = num(key, value)?,
            "brevity_weight" => self.brevity_weight = num(key, value)?,
            "format_weight" => self.format_weight = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "verbosity_bias" => self.verbosity_bias = num(key, value)?,
            "sft_epochs" => self.sft_epochs = num(key, value)?,
            "sft_batch" => self.sft_batch = num(key, value)?,
            "sft_lr" => self.sft_lr = num(key, value)?,
            "rm_epochs" => self.rm_epochs = num(key, value)?,
            "rm_batch" => self.rm_batch = num(key, value)?,
            "rm_lr" => self.rm_lr = num(key, value)?,
            "ppo_iterations" => self.ppo_iterations = num(key, value)?,
            "ppo_beta" => self.ppo_beta = num(key, value)?,
            "ppo_clip" => self.ppo_clip = num(key, value)?,
            "ppo_epochs" => self.ppo_epochs = num(key, value)?,
            "ppo_rollout_batch" => self.ppo_rollout_batch = num(key, value)?,
            "ppo_minibatch" => self.ppo_minibatch = num(key, value)?,
            "ppo_lr" => self.ppo_lr = num(key, value)?,
            "ppo_kl_stop" => self.ppo_kl_stop = num(key, value)?,
            "ppo_value_coef" => self.ppo_value_coef = num(key, value)?,
            "ppo_gae_lambda" => self.ppo_gae_lambda = num(key, value)?,
            "samples_n" => self.samples_n = num(key, value)?,
            "spg_gamma" => self.spg_gamma = num(key, value)?,
            "spg_winner" => {
                self.spg_winner = match value {
                    "argmax" => WinnerRule::RewardArgmax,
                    "uniform" => WinnerRule::Uniform,
                    _ => return Err(bad("winner rule")),
                }
            }
            "mib_lambda" => self.mib_lambda = num(key, value)?,
            "mib_loss" => self.mib_loss = RepresentationLoss::parse(value).ok_or_else(|| bad("loss"))?,
            "mib_dim_z" => self.mib_dim_z = num(key, value)?,
            "mib_hidden" => self.mib_hidden = num(key, value)?,
            "mib_into_backbone" => self.mib_into_backbone = num(key, value)?,
            "rm_warm_start" => self.rm_warm_start = num(key, value)?,
            "train_temperature" => self.train_temperature = num(key, value)?,
            "eval_temperature" => self.eval_temperature = num(key, value)?,
            "best_of_n" => self.best_of_n = num(key, value)?,
            "eval_seeds" => self.eval_seeds = seeds(key, value)?,
            "ablation_seeds" => self.ablation_seeds = seeds(key, value)?,
            _ => return Err(PipelineError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// The config text with the keys that do not affect shared stage
    /// outputs (method, output directory, evaluation seeds) removed.
    pub fn fingerprint_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            if !matches!(k, "method" | "out_dir" | "eval_seeds" | "ablation_seeds") {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.world().validate()?;
        self.model().validate()?;
        self.reward_spec().validate()?;
        self.ppo().validate()?;
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.n_sft == 0 || self.n_preference == 0 || self.n_unlabeled == 0 || self.n_eval == 0 {
            return bad("every split needs at least one instruction");
        }
        if self.samples_n < 2 {
            return bad("samples_n must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.spg_gamma) {
            return bad("spg_gamma must lie in [0, 1]");
        }
        if !(self.mib_lambda >= 0.0 && self.mib_lambda.is_finite()) {
            return bad("mib_lambda must be finite and >= 0");
        }
        if !(self.train_temperature > 0.0 && self.eval_temperature > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.best_of_n == 0 {
            return bad("best_of_n must be positive");
        }
        if self.eval_seeds.is_empty() || self.ablation_seeds.is_empty() {
            return bad("seed lists must be nonempty");
        }
        if self.sft_epochs == 0 || self.sft_batch == 0 || self.rm_batch == 0 {
            return bad("SFT epochs and batch sizes must be positive");
        }
        Ok(())
    }

    /// Seed for a named stage, derived from the experiment seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(&[self.seed, rng::label(stage)])
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            alphabet: self.alphabet,
            min_args: self.min_args,
            max_args: self.max_args,
            max_response_len: self.max_response_len,
        }
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            sft: self.n_sft,
            preference: self.n_preference,
            unlabeled: self.n_unlabeled,
            eval: self.n_eval,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            context_len: self.world().context_len(),
            width: self.width,
            heads: self.heads,
            blocks: self.blocks,
            mlp: self.mlp,
            ..ModelConfig::default()
        }
    }

    pub fn reward_spec(&self) -> TrueRewardSpec {
        TrueRewardSpec {
            correctness_weight: self.correctness_weight,
            brevity_weight: self.brevity_weight,
            format_weight: self.format_weight,
            tau: self.tau,
            verbosity_bias: self.verbosity_bias,
            max_response_len: self.max_response_len,
        }
    }

    pub fn sft(&self) -> SftConfig {
        SftConfig {
            epochs: self.sft_epochs,
            batch_size: self.sft_batch,
            optimizer: AdamConfig::with_lr(self.sft_lr),
            seed: self.stage_seed("sft"),
        }
    }

    pub fn reward_training(&self, stage: &str) -> RewardTrainConfig {
        RewardTrainConfig {
            epochs: self.rm_epochs,
            batch_size: self.rm_batch,
            optimizer: AdamConfig::with_lr(self.rm_lr),
            seed: self.stage_seed(stage),
            mib_into_backbone: self.mib_into_backbone,
            ..RewardTrainConfig::default()
        }
    }

    /// PPO settings. Initial training and every retraining share the seed,
    /// so runs differ only in the reward model.
    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            clip: self.ppo_clip,
            beta: self.ppo_beta,
            epochs: self.ppo_epochs,
            gae_lambda: self.ppo_gae_lambda,
            rollout_batch: self.ppo_rollout_batch,
            minibatch: self.ppo_minibatch,
            iterations: self.ppo_iterations,
            value_coef: self.ppo_value_coef,
            kl_stop: self.ppo_kl_stop,
            temperature: self.train_temperature,
            max_new_tokens: self.max_response_len,
            optimizer: AdamConfig::with_lr(self.ppo_lr),
            seed: self.stage_seed("ppo"),
            ..PpoConfig::default()
        }
    }

    pub fn mib(&self, loss: RepresentationLoss) -> MibConfig {
        MibConfig {
            dim_z: self.mib_dim_z,
            hidden: self.mib_hidden,
            loss,
        }
    }

    pub fn spg(&self) -> SpgConfig {
        SpgConfig {
            gamma: self.spg_gamma,
            winner: self.spg_winner,
            seed: self.stage_seed("spg"),
        }
    }

    pub fn train_sampling(&self, stage: &str) -> SamplingConfig {
        SamplingConfig::new(self.train_temperature, self.max_response_len, self.stage_seed(stage))
    }
}
