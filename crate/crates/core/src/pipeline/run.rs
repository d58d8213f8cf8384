use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::rewardmodel::{train_reward, MibHead, RepresentationLoss, RewardInputs, RewardModel, RmRole};
use crate::rloptim::train_policy;
use crate::seqmodel::{sft_train, PolicyModel, PolicySampler};
use crate::spg::{
    ablation_reward_rank, ablation_rlaif, ablation_select_all, build_policy_samples, generate_synthetic_preferences,
    ExactCanonical, PolicySampleSet,
};
use crate::taskworld::{
    collect_preferences, generate_splits, gold_answer, load_instructions, load_preferences, save_instructions,
    save_preferences, CollectionReport, InstructionSet, ModelTag, PreferenceDataset, Split, Splits,
};

use super::artifacts::{load_samples, save_samples};
use super::config::{ExperimentConfig, Method};
use super::eval::{evaluate_winrate, BestOfN, EvalConfig, Responder, Sampled, WinRateReport};
use super::manifest::{file_sha256, now_secs, sha256_hex, FileEntry, RunManifest, StageEntry};
use super::{PipelineError, StageFailure};

/// One way of retraining the reward model on policy data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Pairwise loss plus a representation loss on view pairs from `P`.
    Uml(RepresentationLoss),
    /// Self-consistency synthetic preferences with the confidence filter.
    Spg,
    /// Synthetic preferences without the confidence filter.
    SelectAll,
    /// Pairs ranked by the policy's own mean token log-probability.
    Rlaif,
    /// Pairs ranked by the initial reward model.
    RewardRank,
}

impl Variant {
    /// Representation-loss ablation, MIB first.
    pub const LOSS_ABLATION: [Variant; 4] = [
        Variant::Uml(RepresentationLoss::Mib),
        Variant::Uml(RepresentationLoss::InfoMax),
        Variant::Uml(RepresentationLoss::Mvi),
        Variant::Uml(RepresentationLoss::Contrastive),
    ];

    /// Synthetic-preference ablation, SPG last.
    pub const PREFERENCE_ABLATION: [Variant; 4] =
        [Variant::Rlaif, Variant::RewardRank, Variant::SelectAll, Variant::Spg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Uml(RepresentationLoss::Mib) => "rlp-uml",
            Variant::Uml(RepresentationLoss::InfoMax) => "uml-infomax",
            Variant::Uml(RepresentationLoss::Mvi) => "uml-mvi",
            Variant::Uml(RepresentationLoss::Contrastive) => "uml-cl",
            Variant::Spg => "rlp-spg",
            Variant::SelectAll => "select-all",
            Variant::Rlaif => "rlaif",
            Variant::RewardRank => "reward-rank",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Self::LOSS_ABLATION
            .into_iter()
            .chain(Self::PREFERENCE_ABLATION)
            .find(|v| v.name() == s)
    }

    /// True when the variant trains on a synthetic preference dataset.
    pub fn synthetic(self) -> bool {
        !matches!(self, Variant::Uml(_))
    }

    fn tag(self) -> ModelTag {
        match self {
            Variant::Uml(_) => ModelTag::RlpUml,
            Variant::Spg => ModelTag::RlpSpg,
            _ => ModelTag::Other,
        }
    }
}

/// Stages a stage reads from. Used to drop stale downstream records.
fn deps(stage: &str) -> Vec<String> {
    let own = |s: &str| vec![s.to_string()];
    match stage {
        "data" => vec![],
        "sft" => own("data"),
        "prefs" => own("sft"),
        "rm" => own("prefs"),
        "ppo" => own("rm"),
        "samples" => own("ppo"),
        "eval-sft" => own("sft"),
        "eval-best-of-n" => own("rm"),
        "eval-ppo" => own("ppo"),
        _ => {
            if stage.starts_with("synth-") {
                vec!["samples".into(), "rm".into()]
            } else if let Some(v) = stage.strip_prefix("retrain-rm-") {
                vec!["samples".into(), "rm".into(), format!("synth-{v}")]
            } else if let Some(v) = stage.strip_prefix("retrain-policy-") {
                vec![format!("retrain-rm-{v}")]
            } else if let Some(v) = stage.strip_prefix("eval-") {
                vec![format!("retrain-policy-{v}")]
            } else {
                vec![]
            }
        }
    }
}

fn depends_on(stage: &str, upstream: &str) -> bool {
    deps(stage).iter().any(|d| d == upstream || depends_on(d, upstream))
}

fn at<E: Into<StageFailure>>(stage: &str) -> impl Fn(E) -> PipelineError + '_ {
    move |e| PipelineError::stage(stage, e)
}

/// Stage-by-stage executor over one run directory. Each accessor makes sure
/// its stage (and everything upstream) is on disk, reusing recorded outputs
/// whose hashes still match, then loads the result from disk.
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub manifest: RunManifest,
}

impl Runner {
    /// Open (or start) the run in `cfg.out_dir`. A manifest written under a
    /// different fingerprint is discarded.
    pub fn open(cfg: ExperimentConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let root = cfg.out_dir.clone();
        std::fs::create_dir_all(&root)?;
        cfg.save(&root.join("config.txt"))?;
        let fingerprint = sha256_hex(cfg.fingerprint_text().as_bytes());
        let config = FileEntry {
            label: "config".into(),
            path: PathBuf::from("config.txt"),
            sha256: file_sha256(&root.join("config.txt"))?,
        };
        let previous = RunManifest::load(&root).ok().filter(|m| m.fingerprint == fingerprint);
        let manifest = match previous {
            Some(mut m) => {
                m.method = cfg.method.name().into();
                m.config = config;
                m.version = env!("CARGO_PKG_VERSION").into();
                m
            }
            None => RunManifest {
                version: env!("CARGO_PKG_VERSION").into(),
                fingerprint,
                method: cfg.method.name().into(),
                seed: cfg.seed,
                config,
                stages: Vec::new(),
            },
        };
        manifest.save(&root)?;
        Ok(Self { cfg, root, manifest })
    }

    fn reusable(&self, stage: &str) -> bool {
        self.manifest.stage_intact(&self.root, stage)
    }

    fn out(&self, rel: &str) -> Result<PathBuf, PipelineError> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    /// Path of a recorded stage output.
    pub fn file(&self, stage: &str, label: &str) -> Result<PathBuf, PipelineError> {
        self.manifest
            .path(&self.root, stage, label)
            .ok_or_else(|| PipelineError::Manifest(format!("stage {stage} has no output `{label}`")))
    }

    /// Record a finished stage, drop records that depended on its previous
    /// outputs, and persist the manifest.
    fn commit(&mut self, stage: &str, files: &[(&str, String)]) -> Result<(), PipelineError> {
        let mut entries = Vec::with_capacity(files.len());
        for (label, rel) in files {
            entries.push(FileEntry {
                label: label.to_string(),
                path: PathBuf::from(rel),
                sha256: file_sha256(&self.root.join(rel)).map_err(at(stage))?,
            });
        }
        self.manifest.stages.retain(|s| !depends_on(&s.name, stage));
        self.manifest.record(StageEntry {
            name: stage.to_string(),
            completed: now_secs(),
            files: entries,
        });
        self.manifest.save(&self.root)
    }

    pub fn data(&mut self) -> Result<Splits, PipelineError> {
        const STAGE: &str = "data";
        if !self.reusable(STAGE) {
            let splits = generate_splits(self.cfg.stage_seed(STAGE), self.cfg.split_counts(), &self.cfg.world())
                .map_err(at(STAGE))?;
            let mut files = Vec::new();
            for s in Split::ALL {
                let rel = format!("data/{}.txt", s.name());
                save_instructions(&self.out(&rel)?, splits.get(s)).map_err(at(STAGE))?;
                files.push((s.name(), rel));
            }
            self.commit(STAGE, &files)?;
        }
        let load = |s: Split| -> Result<InstructionSet, PipelineError> {
            load_instructions(&self.file(STAGE, s.name())?).map_err(at(STAGE))
        };
        Ok(Splits {
            sft: load(Split::Sft)?,
            preference: load(Split::Preference)?,
            unlabeled: load(Split::Unlabeled)?,
            eval: load(Split::Eval)?,
        })
    }

    pub fn sft(&mut self) -> Result<PolicyModel, PipelineError> {
        const STAGE: &str = "sft";
        let splits = self.data()?;
        if !self.reusable(STAGE) {
            let f = STAGE;
            let init = PolicyModel::new(self.cfg.model(), self.cfg.stage_seed("sft-init")).map_err(at(f))?;
            let demos: Vec<_> = splits.sft.iter().map(|x| (x.clone(), gold_answer(x))).collect();
            let (model, log) = sft_train(&init, &demos, &self.cfg.sft()).map_err(at(f))?;
            model.save(&self.out("sft/policy.ckpt")?).map_err(at(f))?;
            let mut text = format!("kind=initial\tloss={:.6}\n", log.initial_loss);
            for (e, l) in log.epoch_losses.iter().enumerate() {
                let _ = writeln!(text, "kind=epoch\tepoch={e}\tloss={l:.6}");
            }
            let _ = writeln!(text, "kind=final\tloss={:.6}", log.final_loss);
            std::fs::write(self.out("sft/log.txt")?, text)?;
            self.commit(STAGE, &[("policy", "sft/policy.ckpt".into()), ("log", "sft/log.txt".into())])?;
        }
        PolicyModel::load(&self.file(STAGE, "policy")?).map_err(at(STAGE))
    }

    /// Annotated SFT pairs `D` on the preference split, and held-out pairs
    /// on the eval split.
    pub fn preferences(&mut self) -> Result<(PreferenceDataset, PreferenceDataset), PipelineError> {
        const STAGE: &str = "prefs";
        let sft = self.sft()?;
        let splits = self.data()?;
        if !self.reusable(STAGE) {
            let f = STAGE;
            let spec = self.cfg.reward_spec();
            let sampler = PolicySampler {
                model: &sft,
                config: self.cfg.train_sampling(STAGE),
            };
            let (human, r1) =
                collect_preferences(&sampler, &splits.preference, &spec, self.cfg.stage_seed(STAGE)).map_err(at(f))?;
            let (heldout, r2) =
                collect_preferences(&sampler, &splits.eval, &spec, self.cfg.stage_seed("heldout")).map_err(at(f))?;
            save_preferences(&self.out("prefs/human.txt")?, &human).map_err(at(f))?;
            save_preferences(&self.out("prefs/heldout.txt")?, &heldout).map_err(at(f))?;
            let line = |set: &str, r: &CollectionReport| {
                let ids: Vec<String> = r.skipped.iter().map(u64::to_string).collect();
                format!(
                    "set={set}\trequested={}\tcollected={}\tskipped={}\n",
                    r.requested,
                    r.collected,
                    ids.join(",")
                )
            };
            std::fs::write(self.out("prefs/report.txt")?, line("human", &r1) + &line("heldout", &r2))?;
            self.commit(
                STAGE,
                &[
                    ("human", "prefs/human.txt".into()),
                    ("heldout", "prefs/heldout.txt".into()),
                    ("report", "prefs/report.txt".into()),
                ],
            )?;
        }
        let f = STAGE;
        Ok((
            load_preferences(&self.file(STAGE, "human")?).map_err(at(f))?,
            load_preferences(&self.file(STAGE, "heldout")?).map_err(at(f))?,
        ))
    }

    /// Initial reward model `r_phi`.
    pub fn reward_model(&mut self) -> Result<RewardModel, PipelineError> {
        const STAGE: &str = "rm";
        let (human, heldout) = self.preferences()?;
        let sft = self.sft()?;
        if !self.reusable(STAGE) {
            let f = STAGE;
            let init = RewardModel::from_policy(&sft, RmRole::Initial);
            let inputs = RewardInputs {
                human: Some(&human),
                heldout: Some(&heldout),
                ..Default::default()
            };
            let (rm, log) =
                train_reward(&init, &inputs, None, 0.0, &self.cfg.reward_training(STAGE)).map_err(at(f))?;
            rm.save(&self.out("rm/reward.ckpt")?).map_err(at(f))?;
            let mut buf = Vec::new();
            log.write_lines(&mut buf)?;
            std::fs::write(self.out("rm/log.txt")?, buf)?;
            self.commit(STAGE, &[("reward", "rm/reward.ckpt".into()), ("log", "rm/log.txt".into())])?;
        }
        RewardModel::load(&self.file(STAGE, "reward")?).map_err(at(STAGE))
    }

    fn train_ppo(
        &mut self,
        stage: &str,
        reward: &RewardModel,
        tag: ModelTag,
        dir: &str,
    ) -> Result<(), PipelineError> {
        let f = stage;
        let sft = self.sft()?;
        let splits = self.data()?;
        let (policy, log) =
            train_policy(&sft, reward, &splits.unlabeled, tag, &self.cfg.ppo()).map_err(at(f))?;
        let ckpt = format!("{dir}/policy.ckpt");
        let log_path = format!("{dir}/ppo_log.txt");
        policy.save(&self.out(&ckpt)?).map_err(at(f))?;
        let mut buf = Vec::new();
        log.write_lines(&mut buf)?;
        std::fs::write(self.out(&log_path)?, buf)?;
        self.commit(stage, &[("policy", ckpt), ("log", log_path)])
    }

    /// PPO policy `pi_theta` trained against `r_phi`.
    pub fn ppo(&mut self) -> Result<PolicyModel, PipelineError> {
        const STAGE: &str = "ppo";
        let rm = self.reward_model()?;
        if !self.reusable(STAGE) {
            self.train_ppo(STAGE, &rm, ModelTag::Ppo, "ppo")?;
        }
        PolicyModel::load(&self.file(STAGE, "policy")?).map_err(at(STAGE))
    }

    /// Policy sample dataset `P`: `samples_n` draws per unlabeled instruction.
    pub fn samples(&mut self) -> Result<Vec<PolicySampleSet>, PipelineError> {
        const STAGE: &str = "samples";
        let ppo = self.ppo()?;
        let splits = self.data()?;
        if !self.reusable(STAGE) {
            let f = STAGE;
            let p = build_policy_samples(&ppo, &splits.unlabeled, self.cfg.samples_n, &self.cfg.train_sampling(STAGE))
                .map_err(at(f))?;
            save_samples(&self.out("samples/samples.txt")?, &p).map_err(at(f))?;
            self.commit(STAGE, &[("samples", "samples/samples.txt".into())])?;
        }
        load_samples(&self.file(STAGE, "samples")?).map_err(at(STAGE))
    }

    /// Synthetic preferences `D-hat` for a variant that uses them.
    pub fn synthetic(&mut self, v: Variant) -> Result<PreferenceDataset, PipelineError> {
        let stage = format!("synth-{}", v.name());
        if !v.synthetic() {
            return Err(PipelineError::Config(format!("{} does not build synthetic preferences", v.name())));
        }
        let p = self.samples()?;
        let rm = self.reward_model()?;
        let ppo = self.ppo()?;
        let splits = self.data()?;
        if !self.reusable(&stage) {
            let f = stage.as_str();
            let dir = v.name();
            let mut report = String::new();
            let data = match v {
                Variant::Spg | Variant::SelectAll => {
                    let (d, r) = if v == Variant::Spg {
                        generate_synthetic_preferences(&p, &rm, &ExactCanonical, &self.cfg.spg())
                    } else {
                        ablation_select_all(&p, &rm, &ExactCanonical, &self.cfg.spg())
                    }
                    .map_err(at(f))?;
                    let mut buf = Vec::new();
                    r.write_lines(&mut buf)?;
                    report = String::from_utf8_lossy(&buf).into_owned();
                    d
                }
                Variant::Rlaif | Variant::RewardRank => {
                    let sampling = self.cfg.train_sampling(&stage);
                    let (d, r) = if v == Variant::Rlaif {
                        ablation_rlaif(&ppo, &splits.unlabeled, &sampling)
                    } else {
                        ablation_reward_rank(&ppo, &rm, &splits.unlabeled, &sampling)
                    }
                    .map_err(at(f))?;
                    let ids: Vec<String> = r.skipped.iter().map(u64::to_string).collect();
                    let _ = writeln!(report, "considered={}\tskipped={}", r.considered, ids.join(","));
                    d
                }
                Variant::Uml(_) => unreachable!("checked above"),
            };
            let (d_rel, r_rel) = (format!("{dir}/dhat.txt"), format!("{dir}/synth_report.txt"));
            save_preferences(&self.out(&d_rel)?, &data).map_err(at(f))?;
            std::fs::write(self.out(&r_rel)?, report)?;
            self.commit(&stage, &[("dhat", d_rel), ("report", r_rel)])?;
        }
        load_preferences(&self.file(&stage, "dhat")?).map_err(at(&stage))
    }

    /// Retrained reward model `r-hat_phi` for a variant.
    pub fn retrained_reward(&mut self, v: Variant) -> Result<RewardModel, PipelineError> {
        let stage = format!("retrain-rm-{}", v.name());
        let synthetic = if v.synthetic() { Some(self.synthetic(v)?) } else { None };
        let (human, heldout) = self.preferences()?;
        let p = self.samples()?;
        let rm = self.reward_model()?;
        let sft = self.sft()?;
        if !self.reusable(&stage) {
            let f = stage.as_str();
            let init = if self.cfg.rm_warm_start {
                RewardModel {
                    role: RmRole::Retrained,
                    mib: None,
                    ..rm
                }
            } else {
                RewardModel::from_policy(&sft, RmRole::Retrained)
            };
            let mut inputs = RewardInputs {
                human: Some(&human),
                heldout: Some(&heldout),
                synthetic: synthetic.as_ref(),
                ..Default::default()
            };
            let head;
            let (head_ref, lambda) = match v {
                Variant::Uml(loss) => {
                    inputs.samples = Some(&p);
                    head = MibHead::new(sft.config().width, self.cfg.mib(loss), self.cfg.stage_seed("mib-head"))
                        .map_err(at(f))?;
                    (Some(&head), self.cfg.mib_lambda)
                }
                _ => (None, 0.0),
            };
            let (model, log) = train_reward(&init, &inputs, head_ref, lambda, &self.cfg.reward_training("retrain-rm"))
                .map_err(at(f))?;
            let (ck, lg) = (format!("{}/reward.ckpt", v.name()), format!("{}/rm_log.txt", v.name()));
            model.save(&self.out(&ck)?).map_err(at(f))?;
            let mut buf = Vec::new();
            log.write_lines(&mut buf)?;
            std::fs::write(self.out(&lg)?, buf)?;
            self.commit(&stage, &[("reward", ck), ("log", lg)])?;
        }
        RewardModel::load(&self.file(&stage, "reward")?).map_err(at(&stage))
    }

    /// Retrained policy `pi-hat_theta`: PPO from the SFT model against the
    /// variant's retrained reward model.
    pub fn retrained_policy(&mut self, v: Variant) -> Result<PolicyModel, PipelineError> {
        let stage = format!("retrain-policy-{}", v.name());
        let reward = self.retrained_reward(v)?;
        if !self.reusable(&stage) {
            self.train_ppo(&stage, &reward, v.tag(), v.name())?;
        }
        PolicyModel::load(&self.file(&stage, "policy")?).map_err(at(&stage))
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seeds: self.cfg.eval_seeds.clone(),
            shared_sampling: true,
        }
    }

    fn evaluate(&mut self, name: &str, responder: &dyn Responder) -> Result<WinRateReport, PipelineError> {
        let stage = format!("eval-{name}");
        let sft = self.sft()?;
        let splits = self.data()?;
        let reference = Sampled {
            policy: &sft,
            temperature: self.cfg.eval_temperature,
            max_new_tokens: self.cfg.max_response_len,
        };
        let report = evaluate_winrate(
            (name, responder),
            ("sft", &reference),
            &splits.eval,
            &self.cfg.reward_spec(),
            &self.eval_config(),
        );
        let rel = format!("eval/{name}.txt");
        let mut buf = Vec::new();
        report.write_lines(&mut buf)?;
        std::fs::write(self.out(&rel)?, buf)?;
        self.commit(&stage, &[("winrate", rel)])?;
        Ok(report)
    }

    fn load_eval(&self, name: &str) -> Result<WinRateReport, PipelineError> {
        let stage = format!("eval-{name}");
        let text = std::fs::read_to_string(self.file(&stage, "winrate")?)?;
        WinRateReport::parse_lines(&text).map_err(|e| PipelineError::stage(&stage, StageFailure::Other(e)))
    }

    fn sampled<'a>(&self, policy: &'a PolicyModel) -> Sampled<'a> {
        Sampled {
            policy,
            temperature: self.cfg.eval_temperature,
            max_new_tokens: self.cfg.max_response_len,
        }
    }

    /// Win-rate of a method against SFT samples on the eval split.
    pub fn eval_method(&mut self, method: Method) -> Result<WinRateReport, PipelineError> {
        match method {
            Method::Sft => {
                let sft = self.sft()?;
                if self.reusable("eval-sft") {
                    return self.load_eval("sft");
                }
                let r = self.sampled(&sft);
                self.evaluate("sft", &r)
            }
            Method::BestOfN => {
                let rm = self.reward_model()?;
                let sft = self.sft()?;
                if self.reusable("eval-best-of-n") {
                    return self.load_eval("best-of-n");
                }
                let r = BestOfN {
                    policy: &sft,
                    reward: &rm,
                    n: self.cfg.best_of_n,
                    temperature: self.cfg.eval_temperature,
                    max_new_tokens: self.cfg.max_response_len,
                };
                self.evaluate("best-of-n", &r)
            }
            Method::Ppo => {
                let ppo = self.ppo()?;
                if self.reusable("eval-ppo") {
                    return self.load_eval("ppo");
                }
                let r = self.sampled(&ppo);
                self.evaluate("ppo", &r)
            }
            Method::RlpUml => self.eval_variant(Variant::Uml(self.cfg.mib_loss)),
            Method::RlpSpg => self.eval_variant(Variant::Spg),
            Method::Ablations => Err(PipelineError::Config(
                "the ablation method has no single policy to evaluate".into(),
            )),
        }
    }

    pub fn eval_variant(&mut self, v: Variant) -> Result<WinRateReport, PipelineError> {
        let policy = self.retrained_policy(v)?;
        if self.reusable(&format!("eval-{}", v.name())) {
            return self.load_eval(v.name());
        }
        let r = self.sampled(&policy);
        self.evaluate(v.name(), &r)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

/// Run Algorithm 1 for the configured method and return the manifest.
///
/// `sft` stops after supervised training, `best-of-n` after the initial
/// reward model, `ppo` after the first PPO run. `rlp-uml` and `rlp-spg` add
/// the reward and policy retraining; `ablations` runs every retraining
/// variant. The final stage evaluates against SFT samples.
pub fn run_algorithm1(cfg: &ExperimentConfig) -> Result<RunManifest, PipelineError> {
    let mut runner = Runner::open(cfg.clone())?;
    match cfg.method {
        Method::Ablations => {
            runner.eval_method(Method::Ppo)?;
            runner.eval_method(Method::BestOfN)?;
            for v in Variant::LOSS_ABLATION.into_iter().chain(Variant::PREFERENCE_ABLATION) {
                runner.eval_variant(v)?;
            }
        }
        m => {
            runner.eval_method(m)?;
        }
    }
    Ok(runner.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_parse_back() {
        for v in Variant::LOSS_ABLATION.into_iter().chain(Variant::PREFERENCE_ABLATION) {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
    }

    #[test]
    fn dependency_closure() {
        assert!(depends_on("eval-rlp-spg", "sft"));
        assert!(depends_on("retrain-rm-rlp-spg", "synth-rlp-spg"));
        assert!(!depends_on("ppo", "samples"));
        assert!(!depends_on("retrain-policy-rlp-uml", "synth-rlp-spg"));
    }
}
