use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 3
n_sft = 24
n_preference = 16
n_unlabeled = 12
n_eval = 12
width = 16
heads = 2
blocks = 1
mlp = 32
sft_epochs = 2
rm_epochs = 1
rm_batch = 8
ppo_iterations = 2
ppo_rollout_batch = 4
ppo_minibatch = 2
ppo_epochs = 1
samples_n = 3
mib_dim_z = 4
mib_hidden = 8
best_of_n = 2
eval_seeds = 0
";

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("exp.cfg");
    let text = format!("{TINY}out_dir = {}\n{extra}", dir.join("run").display());
    std::fs::write(&p, text).unwrap();
    p
}

fn rlp(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlp"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stage_subcommands_build_up_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "method = rlp-spg\n");
    for cmd in ["gen-data", "sft", "collect-prefs", "train-rm", "ppo", "sample-policy"] {
        let o = rlp(&cfg, &[cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(stdout(&rlp(&cfg, &["retrain-rm", "--method", "spg"])).contains("retrain-rm-rlp-spg"));
    assert!(rlp(&cfg, &["retrain-policy", "--method", "spg"]).status.success());
    let o = rlp(&cfg, &["eval"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("rlp-spg vs sft"), "{}", stdout(&o));

    let run = dir.path().join("run");
    for f in ["data/eval.txt", "prefs/human.txt", "samples/samples.txt", "rlp-spg/dhat.txt", "manifest.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_rlp"))
        .args(["report", "--run"])
        .arg(&run)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("RLP-SPG"), "{}", stdout(&o));
}

#[test]
fn uml_retraining_takes_a_loss_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = rlp(&cfg, &["retrain-rm", "--method", "uml", "--loss", "mvi"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("retrain-rm-uml-mvi"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "no_such_key = 1\n");
    let o = rlp(&cfg, &["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let cfg = write_config(dir.path(), "");
    assert_eq!(rlp(&cfg, &["--set", "spg_gamma=3", "gen-data"]).status.code(), Some(2));
    assert_eq!(rlp(&cfg, &["retrain-rm", "--method", "uml", "--loss", "bogus"]).status.code(), Some(2));
}

#[test]
fn stage_failures_exit_with_3_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mib_dim_z = 0\n");
    let o = rlp(&cfg, &["retrain-rm", "--method", "uml"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("retrain-rm-rlp-uml"));
}

#[test]
fn divergence_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sft_lr = NaN\n");
    let o = rlp(&cfg, &["sft"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`sft`"));
}

#[test]
fn report_without_inputs_fails() {
    let o = Command::new(env!("CARGO_BIN_EXE_rlp")).arg("report").output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing to report"));
}
