//! Multi-view information bottleneck head: Gaussian encoders over pooled
//! features, a Jensen–Shannon mutual-information critic, and the
//! representation losses compared in the ablation suite.

use std::f64::consts::LN_2;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{rng, Adam, AdamConfig, Bound, ParamSet, Tape, Tensor, Var};

use super::mlp::Mlp3;
use super::RewardError;

/// Objective used to train the representation head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepresentationLoss {
    /// `-I(z1; z2) + SKL(p(z|v1) || p(z|v2))`.
    Mib,
    /// `-I(v; z)`, averaged over both views.
    InfoMax,
    /// `-I(z1; z2)` alone.
    Mvi,
    /// Symmetric InfoNCE over the same view pairs.
    Contrastive,
}

impl RepresentationLoss {
    pub const ALL: [RepresentationLoss; 4] = [
        RepresentationLoss::Mib,
        RepresentationLoss::InfoMax,
        RepresentationLoss::Mvi,
        RepresentationLoss::Contrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RepresentationLoss::Mib => "mib",
            RepresentationLoss::InfoMax => "infomax",
            RepresentationLoss::Mvi => "mvi",
            RepresentationLoss::Contrastive => "cl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MibConfig {
    pub dim_z: usize,
    pub hidden: usize,
    pub loss: RepresentationLoss,
}

impl Default for MibConfig {
    fn default() -> Self {
        Self {
            dim_z: 16,
            hidden: 64,
            loss: RepresentationLoss::Mib,
        }
    }
}

/// Factorised Gaussian `N(mean, diag(dev^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianRepresentation {
    pub mean: Vec<f64>,
    /// Elementwise positive standard deviations.
    pub dev: Vec<f64>,
}

/// Symmetrised KL divergence `(KL(g1||g2) + KL(g2||g1)) / 2` in closed form.
pub fn skl_divergence(g1: &GaussianRepresentation, g2: &GaussianRepresentation) -> Result<f64, RewardError> {
    let d = g1.mean.len();
    if g1.dev.len() != d || g2.mean.len() != d || g2.dev.len() != d {
        return Err(RewardError::DimensionMismatch {
            left: d,
            right: g2.mean.len(),
        });
    }
    let mut total = 0.0;
    for i in 0..d {
        let (v1, v2) = (g1.dev[i] * g1.dev[i], g2.dev[i] * g2.dev[i]);
        let dm2 = (g1.mean[i] - g2.mean[i]).powi(2);
        // the log-determinant terms of the two directions cancel
        total += 0.25 * (v1 / v2 + v2 / v1) + 0.25 * dm2 * (1.0 / v1 + 1.0 / v2) - 0.5;
    }
    Ok(total)
}

/// Batch-mean symmetrised KL between rows of `(mu1, exp(s1))` and `(mu2, exp(s2))`.
pub fn skl_taped(tape: &mut Tape, mu1: Var, s1: Var, mu2: Var, s2: Var) -> Var {
    let batch = tape.value(mu1).dims2().0;
    let ds = tape.sub(s1, s2);
    let up = tape.scale(ds, 2.0);
    let up = tape.exp(up);
    let down = tape.scale(ds, -2.0);
    let down = tape.exp(down);
    let ratio = tape.add(up, down);
    let ratio = tape.scale(ratio, 0.25);
    let dm = tape.sub(mu1, mu2);
    let dm2 = tape.square(dm);
    let p1 = tape.scale(s1, -2.0);
    let p1 = tape.exp(p1);
    let p2 = tape.scale(s2, -2.0);
    let p2 = tape.exp(p2);
    let prec = tape.add(p1, p2);
    let shift = tape.mul(dm2, prec);
    let shift = tape.scale(shift, 0.25);
    let per = tape.add(ratio, shift);
    let per = tape.add_scalar(per, -0.5);
    let total = tape.sum(per);
    tape.scale(total, 1.0 / batch as f64)
}

/// Random cyclic permutation (no fixed points), used to pair each row with
/// another row's partner as a negative sample.
pub fn derangement(n: usize, r: &mut rng::Rng) -> Vec<usize> {
    assert!(n >= 2, "derangement needs at least two items");
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Jensen–Shannon lower bound `E_pos[-sp(-T)] - E_neg[sp(T)]` on the tape.
/// Negatives pair `a[i]` with `b[perm[i]]`.
pub fn js_bound_taped(tape: &mut Tape, critic: &Mlp3, p: &Bound, a: Var, b: Var, perm: &[usize]) -> Var {
    let pos_in = tape.concat_cols(&[a, b]);
    let t_pos = critic.forward(tape, p, pos_in);
    let neg_b = tape.permute_rows(b, perm);
    let neg_in = tape.concat_cols(&[a, neg_b]);
    let t_neg = critic.forward(tape, p, neg_in);
    let m = tape.neg(t_pos);
    let m = tape.softplus(m);
    let pos = tape.mean(m);
    let neg = tape.softplus(t_neg);
    let neg = tape.mean(neg);
    let sum = tape.add(pos, neg);
    tape.neg(sum)
}

/// Symmetric InfoNCE loss with scaled dot-product similarity.
pub fn info_nce_taped(tape: &mut Tape, z1: Var, z2: Var) -> Var {
    let (b, d) = tape.value(z1).dims2();
    let diag: Vec<usize> = (0..b).collect();
    let mut terms = Vec::with_capacity(2);
    for (u, v) in [(z1, z2), (z2, z1)] {
        let s = tape.matmul_nt(u, v);
        let s = tape.scale(s, 1.0 / (d as f64).sqrt());
        let lp = tape.log_softmax(s);
        let g = tape.gather(lp, &diag);
        terms.push(tape.mean(g));
    }
    let t = tape.add(terms[0], terms[1]);
    tape.scale(t, -0.5)
}

/// Pre-drawn randomness for one batch of view pairs.
#[derive(Clone, Debug)]
pub struct ViewNoise {
    pub eps1: Tensor,
    pub eps2: Tensor,
    pub perm: Vec<usize>,
}

impl ViewNoise {
    pub fn draw(batch: usize, dim_z: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let eps1 = Tensor::randn(&[batch, dim_z], 1.0, &mut r);
        let eps2 = Tensor::randn(&[batch, dim_z], 1.0, &mut r);
        let perm = derangement(batch, &mut r);
        Self { eps1, eps2, perm }
    }
}

/// Loss and its logged parts for one batch of views.
#[derive(Clone, Copy, Debug)]
pub struct MibTerms {
    pub loss: Var,
    /// Mutual-information bound maximised by the loss (JS or InfoNCE).
    pub mi: Var,
    /// Batch-mean SKL, `None` for losses without that term.
    pub skl: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MibHead {
    pub config: MibConfig,
    pub feature_dim: usize,
    pub params: ParamSet,
    mu: Mlp3,
    dev: Mlp3,
    critic: Option<Mlp3>,
}

impl MibHead {
    pub fn new(feature_dim: usize, config: MibConfig, seed: u64) -> Result<Self, RewardError> {
        if config.dim_z == 0 || config.hidden == 0 || feature_dim == 0 {
            return Err(RewardError::Config("MIB dimensions must be positive".into()));
        }
        let mut r = rng::rng(seed);
        let mut params = ParamSet::new();
        let (d, h, z) = (feature_dim, config.hidden, config.dim_z);
        Mlp3::build(&mut params, "mu", [d, h, h, z], 1.0, &mut r);
        // small final layer so every deviation starts near 1
        Mlp3::build(&mut params, "dev", [d, h, h, z], 0.1, &mut r);
        if let Some(input) = critic_input(&config, feature_dim) {
            Mlp3::build(&mut params, "critic", [input, h, h, 1], 1.0, &mut r);
        }
        Self::from_params(feature_dim, config, params)
    }

    pub fn from_params(feature_dim: usize, config: MibConfig, params: ParamSet) -> Result<Self, RewardError> {
        let bad = || RewardError::Config("MIB parameters do not match the configuration".into());
        let mu = Mlp3::find(&params, "mu").ok_or_else(bad)?;
        let dev = Mlp3::find(&params, "dev").ok_or_else(bad)?;
        let critic = Mlp3::find(&params, "critic");
        let expect = critic_input(&config, feature_dim);
        if mu.input != feature_dim
            || dev.input != feature_dim
            || mu.output != config.dim_z
            || dev.output != config.dim_z
            || critic.as_ref().map(|c| c.input) != expect
        {
            return Err(bad());
        }
        Ok(Self {
            config,
            feature_dim,
            params,
            mu,
            dev,
            critic,
        })
    }

    /// Mean and log-deviation rows for pooled features `v` `[B, feature_dim]`.
    pub fn encode_taped(&self, tape: &mut Tape, p: &Bound, v: Var) -> (Var, Var) {
        (self.mu.forward(tape, p, v), self.dev.forward(tape, p, v))
    }

    pub fn gaussian(&self, v: &[f64]) -> GaussianRepresentation {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::mat(1, v.len(), v.to_vec()));
        let (mu, s) = self.encode_taped(&mut tape, &p, x);
        GaussianRepresentation {
            mean: tape.value(mu).data().to_vec(),
            dev: tape.value(s).data().iter().map(|x| x.exp()).collect(),
        }
    }

    /// Reparameterised samples `z_i = mu(v_i) + dev(v_i) * eps_i`.
    pub fn encode_views(&self, v1: &[f64], v2: &[f64], seed: u64) -> (Vec<f64>, Vec<f64>) {
        let noise = ViewNoise::draw(2, self.config.dim_z, seed);
        let sample = |v: &[f64], eps: &[f64]| {
            let g = self.gaussian(v);
            g.mean.iter().zip(&g.dev).zip(eps).map(|((m, d), e)| m + d * e).collect()
        };
        (sample(v1, noise.eps1.row(0)), sample(v2, noise.eps2.row(0)))
    }

    fn reparameterise(&self, tape: &mut Tape, mu: Var, s: Var, eps: &Tensor) -> Var {
        let dev = tape.exp(s);
        let e = tape.constant(eps.clone());
        let spread = tape.mul(dev, e);
        tape.add(mu, spread)
    }

    /// Representation loss over a batch of view pairs `v1`, `v2` `[B, feature_dim]`.
    pub fn loss_taped(&self, tape: &mut Tape, p: &Bound, v1: Var, v2: Var, noise: &ViewNoise) -> MibTerms {
        let (mu1, s1) = self.encode_taped(tape, p, v1);
        let (mu2, s2) = self.encode_taped(tape, p, v2);
        let z1 = self.reparameterise(tape, mu1, s1, &noise.eps1);
        let z2 = self.reparameterise(tape, mu2, s2, &noise.eps2);
        match self.config.loss {
            RepresentationLoss::Mib => {
                let critic = self.critic.as_ref().expect("critic present");
                let mi = js_bound_taped(tape, critic, p, z1, z2, &noise.perm);
                let skl = skl_taped(tape, mu1, s1, mu2, s2);
                let loss = tape.sub(skl, mi);
                MibTerms { loss, mi, skl: Some(skl) }
            }
            RepresentationLoss::Mvi => {
                let critic = self.critic.as_ref().expect("critic present");
                let mi = js_bound_taped(tape, critic, p, z1, z2, &noise.perm);
                let loss = tape.neg(mi);
                MibTerms { loss, mi, skl: None }
            }
            RepresentationLoss::InfoMax => {
                let critic = self.critic.as_ref().expect("critic present");
                let a = js_bound_taped(tape, critic, p, v1, z1, &noise.perm);
                let b = js_bound_taped(tape, critic, p, v2, z2, &noise.perm);
                let sum = tape.add(a, b);
                let mi = tape.scale(sum, 0.5);
                let loss = tape.neg(mi);
                MibTerms { loss, mi, skl: None }
            }
            RepresentationLoss::Contrastive => {
                let loss = info_nce_taped(tape, z1, z2);
                let mi = tape.neg(loss);
                MibTerms { loss, mi, skl: None }
            }
        }
    }
}

fn critic_input(config: &MibConfig, feature_dim: usize) -> Option<usize> {
    match config.loss {
        RepresentationLoss::Mib | RepresentationLoss::Mvi => Some(2 * config.dim_z),
        RepresentationLoss::InfoMax => Some(feature_dim + config.dim_z),
        RepresentationLoss::Contrastive => None,
    }
}

/// Values of one representation-loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MibValue {
    pub loss: f64,
    pub mi: f64,
    pub skl: f64,
}

/// Evaluate the head's loss on pooled feature batches `v1`, `v2`.
pub fn mib_loss(head: &MibHead, v1: &Tensor, v2: &Tensor, seed: u64) -> Result<MibValue, RewardError> {
    let (b, d) = v1.dims2();
    if v2.dims2() != (b, d) || d != head.feature_dim {
        return Err(RewardError::DimensionMismatch {
            left: d,
            right: v2.dims2().1,
        });
    }
    if b < 2 {
        return Err(RewardError::BatchTooSmall(b));
    }
    let mut tape = Tape::new();
    let p = head.params.bind_frozen(&mut tape);
    let a = tape.constant(v1.clone());
    let c = tape.constant(v2.clone());
    let terms = head.loss_taped(&mut tape, &p, a, c, &ViewNoise::draw(b, head.config.dim_z, seed));
    Ok(MibValue {
        loss: tape.scalar(terms.loss),
        mi: tape.scalar(terms.mi),
        skl: terms.skl.map(|s| tape.scalar(s)).unwrap_or(0.0),
    })
}

/// A standalone critic for estimating mutual information between two
/// sample matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct JsCritic {
    pub params: ParamSet,
    net: Mlp3,
}

impl JsCritic {
    pub fn new(dim_a: usize, dim_b: usize, hidden: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let net = Mlp3::build(&mut params, "critic", [dim_a + dim_b, hidden, hidden, 1], 1.0, &mut rng::rng(seed));
        Self { params, net }
    }

    /// A critic whose output is 0 everywhere.
    pub fn zero(dim_a: usize, dim_b: usize, hidden: usize) -> Self {
        let mut c = Self::new(dim_a, dim_b, hidden, 0);
        for t in c.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        c
    }

    pub fn bound_taped(&self, tape: &mut Tape, p: &Bound, a: Var, b: Var, perm: &[usize]) -> Var {
        js_bound_taped(tape, &self.net, p, a, b, perm)
    }
}

/// JS mutual-information lower bound of paired rows of `a` and `b`, with
/// negatives formed by a seeded in-batch derangement.
pub fn js_mi_estimate(critic: &JsCritic, a: &Tensor, b: &Tensor, seed: u64) -> Result<f64, RewardError> {
    let n = a.dims2().0;
    if b.dims2().0 != n {
        return Err(RewardError::DimensionMismatch {
            left: n,
            right: b.dims2().0,
        });
    }
    if n < 2 {
        return Err(RewardError::BatchTooSmall(n));
    }
    let mut tape = Tape::new();
    let p = critic.params.bind_frozen(&mut tape);
    let perm = derangement(n, &mut rng::rng(seed));
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let v = critic.bound_taped(&mut tape, &p, av, bv, &perm);
    Ok(tape.scalar(v))
}

/// The JS bound shifted so that independent inputs score 0: the optimum of
/// the raw bound is `2 JSD - 2 ln 2`.
pub fn centered_js_mi(raw: f64) -> f64 {
    raw + 2.0 * LN_2
}

/// Settings for estimating mutual information of synthetic Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct MiProbeConfig {
    pub hidden: usize,
    pub batch: usize,
    pub steps: usize,
    pub eval_samples: usize,
    pub lr: f64,
}

impl Default for MiProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            batch: 128,
            steps: 300,
            eval_samples: 8192,
            lr: 5e-3,
        }
    }
}

/// Draw `n` pairs of standard normals with correlation `rho`.
pub fn correlated_pairs(n: usize, rho: f64, r: &mut rng::Rng) -> (Tensor, Tensor) {
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let c = (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        let x: f64 = StandardNormal.sample(r);
        let e: f64 = StandardNormal.sample(r);
        a.push(x);
        b.push(rho * x + c * e);
    }
    (Tensor::mat(n, 1, a), Tensor::mat(n, 1, b))
}

/// Train a fresh critic on correlated Gaussian pairs and return the centred
/// JS estimate on held-out samples.
pub fn gaussian_mi_probe(rho: f64, seed: u64, cfg: &MiProbeConfig) -> Result<f64, RewardError> {
    let mut critic = JsCritic::new(1, 1, cfg.hidden, rng::derive_seed(&[seed, rng::label("critic")]));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &critic.params);
    let mut data = rng::rng(rng::derive_seed(&[seed, rng::label("data")]));
    for _ in 0..cfg.steps {
        let (a, b) = correlated_pairs(cfg.batch, rho, &mut data);
        let perm = derangement(cfg.batch, &mut data);
        let mut tape = Tape::new();
        let p = critic.params.bind(&mut tape);
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let bound = critic.bound_taped(&mut tape, &p, av, bv, &perm);
        let loss = tape.neg(bound);
        let mut g = p.grads(&tape.backward(loss)?);
        opt.step(&mut critic.params, &mut g)?;
    }
    let (a, b) = correlated_pairs(cfg.eval_samples, rho, &mut data);
    let raw = js_mi_estimate(&critic, &a, &b, data.random())?;
    Ok(centered_js_mi(raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mean: &[f64], dev: &[f64]) -> GaussianRepresentation {
        GaussianRepresentation {
            mean: mean.to_vec(),
            dev: dev.to_vec(),
        }
    }

    #[test]
    fn skl_closed_form_cases() {
        let a = g(&[0.3, -1.0], &[0.5, 2.0]);
        assert!(skl_divergence(&a, &a).unwrap().abs() < 1e-12);
        let unit = skl_divergence(&g(&[0.0], &[1.0]), &g(&[1.0], &[1.0])).unwrap();
        assert!((unit - 0.5).abs() < 1e-15);
        let b = g(&[1.0, 0.0], &[1.5, 0.7]);
        assert_eq!(skl_divergence(&a, &b).unwrap(), skl_divergence(&b, &a).unwrap());
        assert!(skl_divergence(&a, &g(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn taped_skl_matches_closed_form() {
        let mut tape = Tape::new();
        let mu1 = tape.constant(Tensor::mat(2, 2, vec![0.1, 0.2, -0.3, 0.4]));
        let s1 = tape.constant(Tensor::mat(2, 2, vec![0.0, -0.5, 0.3, 0.1]));
        let mu2 = tape.constant(Tensor::mat(2, 2, vec![1.0, 0.0, 0.5, -0.2]));
        let s2 = tape.constant(Tensor::mat(2, 2, vec![0.2, 0.1, -0.4, 0.0]));
        let v = skl_taped(&mut tape, mu1, s1, mu2, s2);
        let row = |m: Var, s: Var, i: usize| {
            g(tape.value(m).row(i), &tape.value(s).row(i).iter().map(|x| x.exp()).collect::<Vec<_>>())
        };
        let want = (skl_divergence(&row(mu1, s1, 0), &row(mu2, s2, 0)).unwrap()
            + skl_divergence(&row(mu1, s1, 1), &row(mu2, s2, 1)).unwrap())
            / 2.0;
        assert!((tape.scalar(v) - want).abs() < 1e-12);
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut r = rng::rng(3);
        for n in 2..30 {
            let p = derangement(n, &mut r);
            let mut sorted = p.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }

    #[test]
    fn estimator_needs_two_rows() {
        let c = JsCritic::new(1, 1, 4, 0);
        let one = Tensor::mat(1, 1, vec![0.0]);
        assert!(matches!(js_mi_estimate(&c, &one, &one, 0), Err(RewardError::BatchTooSmall(1))));
    }

    #[test]
    fn constant_zero_critic_gives_minus_two_ln_two() {
        let c = JsCritic::zero(2, 2, 4);
        let mut r = rng::rng(1);
        let a = Tensor::randn(&[8, 2], 1.0, &mut r);
        let b = Tensor::randn(&[8, 2], 1.0, &mut r);
        let v = js_mi_estimate(&c, &a, &b, 5).unwrap();
        assert!((v + 2.0 * LN_2).abs() < 1e-12);
    }
}
