use rlp_core::taskworld::*;

fn letters(s: &str) -> Vec<Token> {
    s.bytes().map(|b| Token::letter((b - b'a') as usize)).collect()
}

fn resp(s: &str, eos: bool) -> Response {
    let mut t = letters(s);
    if eos {
        t.push(Token::EOS);
    }
    Response::new(t, ModelTag::Sft)
}

fn first_preference_rate(x: &Instruction, y1: &Response, y2: &Response, spec: &TrueRewardSpec, n: u64) -> f64 {
    let wins = (0..n)
        .filter(|&s| annotate(x, y1, y2, spec, s).unwrap().chosen == *y1)
        .count();
    wins as f64 / n as f64
}

#[test]
fn equal_reward_is_a_fair_coin() {
    let spec = TrueRewardSpec::default();
    let x = Instruction::new(0, TaskFamily::Copy, 0, letters("ab"));
    let (y1, y2) = (resp("ac", true), resp("cb", true));
    assert_eq!(true_reward(&x, &y1, &spec), true_reward(&x, &y2, &spec));
    let rate = first_preference_rate(&x, &y1, &y2, &spec, 10_000);
    assert!((rate - 0.5).abs() <= 0.02, "rate {rate}");
}

#[test]
fn gap_of_tau_ln3_gives_three_to_one() {
    let x = Instruction::new(0, TaskFamily::Reverse, 0, letters("abc"));
    let (y1, y2) = (resp("cba", true), resp("cbd", true));
    let base = TrueRewardSpec::default();
    let gap = true_reward(&x, &y1, &base) - true_reward(&x, &y2, &base);
    assert!(gap > 0.0);
    let spec = TrueRewardSpec {
        tau: gap / 3f64.ln(),
        ..base
    };
    // 1 / (1 + e^{-ln 3}) = 3/4
    assert!((preference_probability(&x, &y1, &y2, &spec) - 0.75).abs() < 1e-12);
    let rate = first_preference_rate(&x, &y1, &y2, &spec, 10_000);
    assert!((rate - 0.75).abs() <= 0.02, "rate {rate}");
    let swapped = first_preference_rate(&x, &y2, &y1, &spec, 10_000);
    assert!((rate + swapped - 1.0).abs() < 1e-12);
}

#[test]
fn vanishing_tau_always_picks_the_better_response() {
    let x = Instruction::new(0, TaskFamily::Sort, 0, letters("cab"));
    let spec = TrueRewardSpec {
        tau: 1e-9,
        ..TrueRewardSpec::default()
    };
    let (good, bad) = (resp("abc", true), resp("abd", true));
    assert_eq!(first_preference_rate(&x, &good, &bad, &spec, 2_000), 1.0);
}

#[test]
fn verbosity_bias_favours_longer_answers() {
    let x = Instruction::new(0, TaskFamily::Copy, 0, letters("ab"));
    let (short, long) = (resp("ab", true), resp("abab", true));
    let fair = TrueRewardSpec::default();
    let biased = TrueRewardSpec {
        verbosity_bias: 20.0,
        ..TrueRewardSpec::default()
    };
    assert!(preference_probability(&x, &long, &short, &fair) < 0.5);
    assert!(preference_probability(&x, &long, &short, &biased) > 0.5);
}

#[test]
fn record_files_round_trip_bit_exact() {
    let splits = generate_splits(9, SplitCounts::default(), &WorldConfig::default()).unwrap();
    let mut first = Vec::new();
    write_instructions(&mut first, &splits.unlabeled).unwrap();
    let back = read_instructions(first.as_slice()).unwrap();
    assert_eq!(back, splits.unlabeled);
    let mut second = Vec::new();
    write_instructions(&mut second, &back).unwrap();
    assert_eq!(first, second);

    let spec = TrueRewardSpec::default();
    let mut data = PreferenceDataset::new(DatasetTag::Human);
    for (i, x) in splits.preference.iter().take(20).enumerate() {
        let gold = gold_answer(x);
        let mut other = gold.tokens.clone();
        other.insert(0, Token::FILL);
        let other = Response::new(other, ModelTag::Ppo);
        data.push(annotate(x, &gold, &other, &spec, i as u64).unwrap()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prefs.tsv");
    save_preferences(&path, &data).unwrap();
    let loaded = load_preferences(&path).unwrap();
    assert_eq!(loaded, data);
    let again = dir.path().join("again.tsv");
    save_preferences(&again, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

struct NoisyGold;

impl Sampler for NoisyGold {
    fn sample_response(&self, x: &Instruction, seed: u64) -> Response {
        let mut t = gold_answer(x).tokens;
        // corrupt a seed-chosen position half of the time
        if seed % 2 == 1 {
            let i = (seed / 2) as usize % (t.len() - 1);
            t[i] = Token::letter(((seed / 7) % 21) as usize);
        }
        Response::new(t, ModelTag::Sft)
    }
}

#[test]
fn collection_is_reproducible() {
    let spec = TrueRewardSpec::default();
    let splits = generate_splits(4, SplitCounts::default(), &WorldConfig::default()).unwrap();
    let (a, ra) = collect_preferences(&NoisyGold, &splits.preference, &spec, 3).unwrap();
    let (b, rb) = collect_preferences(&NoisyGold, &splits.preference, &spec, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.collected + ra.skipped.len(), 200);
    assert_eq!(a.len(), ra.collected);
}
