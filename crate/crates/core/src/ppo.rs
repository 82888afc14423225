//! From-scratch PPO-clip actor-critic with hand-written gradients.
//!
//! Two tanh hidden layers feed a squashed-mean Gaussian policy head (mean
//! scaled into the flow range, one state-independent log-std) and a scalar
//! value head. Updates run clipped-surrogate ascent plus an entropy bonus
//! on the actor and squared-error regression on the critic, each with its
//! own adaptive-moment optimizer. Everything is deterministic given the
//! seed, and checkpoints reload bit-exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOG_STD_MIN: f64 = -6.907755278982137; // ln 1e-3
const LOG_STD_MAX: f64 = 1.6094379124341003; // ln 5
const HALF_LN_2PI: f64 = 0.9189385332046727;
const ENTROPY_CONST: f64 = 1.4189385332046727; // 0.5 ln(2 pi e)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One policy update per finished batch episode.
    PerBatch,
    /// Accumulate `horizon` transitions before each update.
    Horizon,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyperparams {
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub epochs: usize,
    pub gamma: f64,
    pub entropy_weight: f64,
    pub minibatch: usize,
    pub horizon: usize,
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub hidden: [usize; 2],
    pub update_mode: UpdateMode,
    pub log_std_init: f64,
    /// Action range the squashed mean is scaled into.
    pub action_min: f64,
    pub action_max: f64,
}

impl Default for PpoHyperparams {
    fn default() -> Self {
        PpoHyperparams {
            critic_lr: 1e-4,
            actor_lr: 5e-5,
            epochs: 10,
            gamma: 0.99,
            entropy_weight: 0.02,
            minibatch: 64,
            horizon: 2048,
            clip_eps: 0.2,
            gae_lambda: 0.95,
            hidden: [100, 100],
            update_mode: UpdateMode::PerBatch,
            log_std_init: 0.0,
            action_min: 0.0,
            action_max: 10.0,
        }
    }
}

impl PpoHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!(
                "ppo.clip_eps must lie in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "ppo.gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config(format!(
                "ppo.gae_lambda must lie in [0, 1], got {}",
                self.gae_lambda
            )));
        }
        if self.minibatch == 0 || self.epochs == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "ppo.minibatch, epochs and horizon must be >= 1".into(),
            ));
        }
        if self.hidden[0] == 0 || self.hidden[1] == 0 {
            return Err(Error::Config("ppo.hidden layer sizes must be >= 1".into()));
        }
        if !(self.action_min < self.action_max) {
            return Err(Error::Config("ppo.action range must be ordered".into()));
        }
        Ok(())
    }
}

/// Two tanh hidden layers and a linear scalar head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w_head: DMatrix<f64>,
    pub b_head: DVector<f64>,
}

/// Forward activations kept for backpropagation.
struct MlpCache {
    h1: DVector<f64>,
    h2: DVector<f64>,
    out: f64,
}

impl Mlp {
    fn init(n_in: usize, hidden: [usize; 2], rng: &mut ChaCha12Rng) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let limit = 1.0 / (cols as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
        };
        Mlp {
            w1: uniform(hidden[0], n_in),
            b1: DVector::zeros(hidden[0]),
            w2: uniform(hidden[1], hidden[0]),
            b2: DVector::zeros(hidden[1]),
            w_head: uniform(1, hidden[1]),
            b_head: DVector::zeros(1),
        }
    }

    fn forward(&self, s: &DVector<f64>) -> MlpCache {
        let h1 = (&self.w1 * s + &self.b1).map(f64::tanh);
        let h2 = (&self.w2 * &h1 + &self.b2).map(f64::tanh);
        let out = (&self.w_head * &h2)[0] + self.b_head[0];
        MlpCache { h1, h2, out }
    }

    /// Accumulate the gradients of `d_out * out` into `grads`.
    fn backward(&self, s: &DVector<f64>, cache: &MlpCache, d_out: f64, grads: &mut MlpGrads) {
        grads.w_head += d_out * cache.h2.transpose();
        grads.b_head[0] += d_out;
        let dh2 = self.w_head.transpose() * d_out;
        let dz2 = dh2.component_mul(&cache.h2.map(|h| 1.0 - h * h));
        grads.w2 += &dz2 * cache.h1.transpose();
        grads.b2 += &dz2;
        let dh1 = self.w2.transpose() * dz2;
        let dz1 = dh1.component_mul(&cache.h1.map(|h| 1.0 - h * h));
        grads.w1 += &dz1 * s.transpose();
        grads.b1 += &dz1;
    }

    fn is_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
            && self.w_head.iter().all(|v| v.is_finite())
            && self.b_head.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w_head: DMatrix<f64>,
    pub b_head: DVector<f64>,
}

impl MlpGrads {
    fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            w1: DMatrix::zeros(net.w1.nrows(), net.w1.ncols()),
            b1: DVector::zeros(net.b1.len()),
            w2: DMatrix::zeros(net.w2.nrows(), net.w2.ncols()),
            b2: DVector::zeros(net.b2.len()),
            w_head: DMatrix::zeros(net.w_head.nrows(), net.w_head.ncols()),
            b_head: DVector::zeros(net.b_head.len()),
        }
    }
}

/// Actor, critic and the state-independent exploration log-std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: f64,
}

impl PolicyParams {
    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite() && self.log_std.is_finite()
    }
}

/// Gaussian policy head at a normalized state: mean squashed into (lo, hi),
/// std from the clamped log-std.
pub fn policy_forward(
    params: &PolicyParams,
    state: &DVector<f64>,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64)> {
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("policy input state is not finite".into()));
    }
    let cache = params.actor.forward(state);
    if !cache.out.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite actor activation {}",
            cache.out
        )));
    }
    Ok((squash_mean(cache.out, lo, hi), clamped_std(params.log_std)))
}

fn squash_mean(pre_tanh: f64, lo: f64, hi: f64) -> f64 {
    lo + 0.5 * (hi - lo) * (pre_tanh.tanh() + 1.0)
}

fn clamped_std(log_std: f64) -> f64 {
    log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).exp()
}

fn gaussian_log_prob(action: f64, mean: f64, std: f64) -> f64 {
    let z = (action - mean) / std;
    -0.5 * z * z - std.ln() - HALF_LN_2PI
}

#[derive(Debug, Clone, Copy)]
pub struct ActionSample {
    /// Unclipped Gaussian draw; the density is evaluated here.
    pub raw: f64,
    /// Value sent to the environment.
    pub executed: f64,
    pub log_prob: f64,
    pub mean: f64,
    pub std: f64,
}

/// Draw an action: Gaussian around the squashed mean, log-density taken at
/// the raw sample, execution value clipped to the physical range.
pub fn sample_action(
    params: &PolicyParams,
    state: &DVector<f64>,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha12Rng,
) -> Result<ActionSample> {
    let (mean, std) = policy_forward(params, state, lo, hi)?;
    let z: f64 = rng.sample(StandardNormal);
    let raw = mean + std * z;
    Ok(ActionSample {
        raw,
        executed: raw.clamp(lo, hi),
        log_prob: gaussian_log_prob(raw, mean, std),
        mean,
        std,
    })
}

/// One stored step of experience. States are stored in normalized form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Raw (unclipped) sampled action.
    pub action: f64,
    pub log_prob_old: f64,
    pub reward: f64,
    pub value_old: f64,
    pub done: bool,
}

/// The clipped per-sample surrogate `min(ratio * A, g(eps, A))`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let g = if advantage >= 0.0 {
        (1.0 + clip_eps) * advantage
    } else {
        (1.0 - clip_eps) * advantage
    };
    (ratio * advantage).min(g)
}

/// Exponentially weighted advantage estimates and value-regression targets.
///
/// Episodes are delimited by `done`; a buffer truncated mid-episode treats
/// the cut as a zero-value boundary.
pub fn compute_advantages(
    transitions: &[Transition],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = transitions.len();
    let mut advantages = vec![0.0; n];
    let mut running = 0.0;
    for i in (0..n).rev() {
        let next_value = if transitions[i].done || i + 1 == n {
            0.0
        } else {
            transitions[i + 1].value_old
        };
        if transitions[i].done {
            running = 0.0;
        }
        let delta = transitions[i].reward + gamma * next_value - transitions[i].value_old;
        running = delta + gamma * lambda * running;
        advantages[i] = running;
    }
    let returns: Vec<f64> = advantages
        .iter()
        .zip(transitions)
        .map(|(a, t)| a + t.value_old)
        .collect();
    (advantages, returns)
}

pub fn normalize_advantages(advantages: &[f64]) -> Vec<f64> {
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    advantages.iter().map(|a| (a - mean) / sd).collect()
}

/// Actor minibatch loss: negative clipped surrogate minus the entropy
/// bonus (a quantity to minimize). `batch` pairs transitions with their
/// normalized advantages.
pub fn actor_loss(
    params: &PolicyParams,
    batch: &[(&Transition, f64)],
    hp: &PpoHyperparams,
) -> Result<f64> {
    let std = clamped_std(params.log_std);
    let mut total = 0.0;
    for (tr, adv) in batch {
        let s = DVector::from_row_slice(&tr.state);
        let cache = params.actor.forward(&s);
        let mean = squash_mean(cache.out, hp.action_min, hp.action_max);
        let logp = gaussian_log_prob(tr.action, mean, std);
        let ratio = (logp - tr.log_prob_old).exp();
        total -= clipped_surrogate(ratio, *adv, hp.clip_eps);
    }
    let entropy = params.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX) + ENTROPY_CONST;
    let loss = total / batch.len() as f64 - hp.entropy_weight * entropy;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite actor loss {loss}")));
    }
    Ok(loss)
}

/// Analytic gradient of [`actor_loss`]: (loss, actor grads, log_std grad,
/// mean ratio, clipped fraction).
pub fn actor_loss_grads(
    params: &PolicyParams,
    batch: &[(&Transition, f64)],
    hp: &PpoHyperparams,
) -> Result<(f64, MlpGrads, f64, f64, f64)> {
    let mut grads = MlpGrads::zeros_like(&params.actor);
    let mut log_std_grad = 0.0;
    let mut total = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped_count = 0usize;
    let b = batch.len() as f64;
    let std = clamped_std(params.log_std);
    for (tr, adv) in batch {
        let s = DVector::from_row_slice(&tr.state);
        let cache = params.actor.forward(&s);
        let mean = squash_mean(cache.out, hp.action_min, hp.action_max);
        let logp = gaussian_log_prob(tr.action, mean, std);
        let ratio = (logp - tr.log_prob_old).exp();
        ratio_sum += ratio;
        let unclipped = ratio * adv;
        let g_branch = if *adv >= 0.0 {
            (1.0 + hp.clip_eps) * adv
        } else {
            (1.0 - hp.clip_eps) * adv
        };
        total -= unclipped.min(g_branch);
        if unclipped <= g_branch {
            // minimizing the negative surrogate: d(-surr)/d logp = -ratio adv
            let d_logp = -(ratio * adv) / b;
            let z = (tr.action - mean) / std;
            let d_mean = d_logp * z / std;
            log_std_grad += d_logp * (z * z - 1.0);
            let d_pre =
                d_mean * 0.5 * (hp.action_max - hp.action_min) * (1.0 - cache.out.tanh().powi(2));
            params.actor.backward(&s, &cache, d_pre, &mut grads);
        } else {
            clipped_count += 1;
        }
    }
    // entropy bonus: d entropy / d log_std = 1
    log_std_grad -= hp.entropy_weight;
    let entropy = params.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX) + ENTROPY_CONST;
    let loss = total / b - hp.entropy_weight * entropy;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite actor loss {loss}")));
    }
    Ok((
        loss,
        grads,
        log_std_grad,
        ratio_sum / b,
        clipped_count as f64 / b,
    ))
}

/// Critic minibatch loss: mean squared error against the regression
/// targets paired with each transition.
pub fn critic_loss(params: &PolicyParams, batch: &[(&Transition, f64)]) -> Result<f64> {
    let mut total = 0.0;
    for (tr, ret) in batch {
        let s = DVector::from_row_slice(&tr.state);
        let v = params.critic.forward(&s).out;
        total += (v - ret).powi(2);
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite critic loss {loss}")));
    }
    Ok(loss)
}

/// Analytic gradient of [`critic_loss`].
pub fn critic_loss_grads(
    params: &PolicyParams,
    batch: &[(&Transition, f64)],
) -> Result<(f64, MlpGrads)> {
    let mut grads = MlpGrads::zeros_like(&params.critic);
    let mut total = 0.0;
    let b = batch.len() as f64;
    for (tr, ret) in batch {
        let s = DVector::from_row_slice(&tr.state);
        let cache = params.critic.forward(&s);
        total += (cache.out - ret).powi(2);
        let d_out = 2.0 * (cache.out - ret) / b;
        params.critic.backward(&s, &cache, d_out, &mut grads);
    }
    let loss = total / b;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite critic loss {loss}")));
    }
    Ok((loss, grads))
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorSet {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    w_head: DMatrix<f64>,
    b_head: DVector<f64>,
}

impl TensorSet {
    fn zeros_like(net: &Mlp) -> Self {
        TensorSet {
            w1: DMatrix::zeros(net.w1.nrows(), net.w1.ncols()),
            b1: DVector::zeros(net.b1.len()),
            w2: DMatrix::zeros(net.w2.nrows(), net.w2.ncols()),
            b2: DVector::zeros(net.b2.len()),
            w_head: DMatrix::zeros(net.w_head.nrows(), net.w_head.ncols()),
            b_head: DVector::zeros(net.b_head.len()),
        }
    }
}

fn adam_elem(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, b1c: f64, b2c: f64, lr: f64) {
    *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
    *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
    *p -= lr * (*m / b1c) / ((*v / b2c).sqrt() + ADAM_EPS);
}

/// Adaptive moment estimation over one network's tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamState {
    m: TensorSet,
    v: TensorSet,
    t: u64,
}

impl AdamState {
    fn new(net: &Mlp) -> Self {
        AdamState {
            m: TensorSet::zeros_like(net),
            v: TensorSet::zeros_like(net),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Mlp, grads: &MlpGrads, lr: f64) {
        self.t += 1;
        let b1c = 1.0 - ADAM_B1.powi(self.t as i32);
        let b2c = 1.0 - ADAM_B2.powi(self.t as i32);
        let pairs: [(&mut DMatrix<f64>, &DMatrix<f64>, &mut DMatrix<f64>, &mut DMatrix<f64>); 3] = [
            (&mut net.w1, &grads.w1, &mut self.m.w1, &mut self.v.w1),
            (&mut net.w2, &grads.w2, &mut self.m.w2, &mut self.v.w2),
            (
                &mut net.w_head,
                &grads.w_head,
                &mut self.m.w_head,
                &mut self.v.w_head,
            ),
        ];
        for (p, g, m, v) in pairs {
            for i in 0..p.nrows() {
                for j in 0..p.ncols() {
                    adam_elem(
                        &mut p[(i, j)],
                        g[(i, j)],
                        &mut m[(i, j)],
                        &mut v[(i, j)],
                        b1c,
                        b2c,
                        lr,
                    );
                }
            }
        }
        let vec_pairs: [(&mut DVector<f64>, &DVector<f64>, &mut DVector<f64>, &mut DVector<f64>); 3] = [
            (&mut net.b1, &grads.b1, &mut self.m.b1, &mut self.v.b1),
            (&mut net.b2, &grads.b2, &mut self.m.b2, &mut self.v.b2),
            (
                &mut net.b_head,
                &grads.b_head,
                &mut self.m.b_head,
                &mut self.v.b_head,
            ),
        ];
        for (p, g, m, v) in vec_pairs {
            for i in 0..p.len() {
                adam_elem(&mut p[i], g[i], &mut m[i], &mut v[i], b1c, b2c, lr);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct AdamScalar {
    m: f64,
    v: f64,
    t: u64,
}

impl AdamScalar {
    fn new() -> Self {
        AdamScalar {
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    fn step(&mut self, param: &mut f64, grad: f64, lr: f64) {
        self.t += 1;
        let b1c = 1.0 - ADAM_B1.powi(self.t as i32);
        let b2c = 1.0 - ADAM_B2.powi(self.t as i32);
        adam_elem(param, grad, &mut self.m, &mut self.v, b1c, b2c, lr);
    }
}

/// Streaming state standardization; temperatures and concentrations differ
/// by two orders of magnitude, so raw states never enter the networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub count: u64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm {
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn update(&mut self, raw: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for i in 0..self.mean.len() {
            let delta = raw[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (raw[i] - self.mean[i]);
        }
    }

    pub fn normalize(&self, raw: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.mean.len(), |i, _| {
            let var = if self.count > 1 {
                self.m2[i] / self.count as f64
            } else {
                1.0
            };
            (raw[i] - self.mean[i]) / (var + 1e-8).sqrt()
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub minibatches: usize,
}

/// The agent: parameters, optimizers, state normalizer and its own RNG.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub hp: PpoHyperparams,
    pub params: PolicyParams,
    pub normalizer: RunningNorm,
    opt_actor: AdamState,
    opt_critic: AdamState,
    opt_log_std: AdamScalar,
    rng: ChaCha12Rng,
    n_state: usize,
    updates_done: u64,
}

impl PpoAgent {
    pub fn new(n_state: usize, hp: PpoHyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        if n_state == 0 {
            return Err(Error::Config("agent state dimension must be >= 1".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let actor = Mlp::init(n_state, hp.hidden, &mut rng);
        let critic = Mlp::init(n_state, hp.hidden, &mut rng);
        let log_std = hp.log_std_init.clamp(LOG_STD_MIN, LOG_STD_MAX);
        let opt_actor = AdamState::new(&actor);
        let opt_critic = AdamState::new(&critic);
        Ok(PpoAgent {
            normalizer: RunningNorm::new(n_state),
            params: PolicyParams {
                actor,
                critic,
                log_std,
            },
            opt_actor,
            opt_critic,
            opt_log_std: AdamScalar::new(),
            rng,
            n_state,
            hp,
            updates_done: 0,
        })
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn updates_done(&self) -> u64 {
        self.updates_done
    }

    /// Feed a raw state into the running normalizer and return its
    /// normalized form.
    pub fn observe(&mut self, raw: &[f64]) -> Result<DVector<f64>> {
        if raw.len() != self.n_state {
            return Err(Error::Dimension(format!(
                "state has {} entries, agent expects {}",
                raw.len(),
                self.n_state
            )));
        }
        self.normalizer.update(raw);
        Ok(self.normalizer.normalize(raw))
    }

    /// Sample an action and the value estimate at a normalized state.
    pub fn act(&mut self, state: &DVector<f64>) -> Result<(ActionSample, f64)> {
        let sample = sample_action(
            &self.params,
            state,
            self.hp.action_min,
            self.hp.action_max,
            &mut self.rng,
        )?;
        let value = self.params.critic.forward(state).out;
        Ok((sample, value))
    }

    /// Deterministic policy mean at a normalized state.
    pub fn mean_action(&self, state: &DVector<f64>) -> f64 {
        squash_mean(
            self.params.actor.forward(state).out,
            self.hp.action_min,
            self.hp.action_max,
        )
    }

    /// Clipped-surrogate update over the buffered transitions.
    pub fn update(&mut self, transitions: &[Transition]) -> Result<PpoDiagnostics> {
        if transitions.is_empty() {
            return Err(Error::Config(
                "ppo update needs at least one transition".into(),
            ));
        }
        let (advantages, returns) =
            compute_advantages(transitions, self.hp.gamma, self.hp.gae_lambda);
        let norm_adv = normalize_advantages(&advantages);

        let n = transitions.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut last = PpoDiagnostics {
            actor_loss: 0.0,
            critic_loss: 0.0,
            mean_ratio: 1.0,
            clip_fraction: 0.0,
            entropy: self.params.log_std + ENTROPY_CONST,
            minibatches: 0,
        };
        let mut minibatches = 0usize;
        for _epoch in 0..self.hp.epochs {
            // Fisher-Yates with the agent's own stream
            for i in (1..n).rev() {
                let j = self.rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(self.hp.minibatch) {
                let actor_batch: Vec<(&Transition, f64)> = chunk
                    .iter()
                    .map(|&i| (&transitions[i], norm_adv[i]))
                    .collect();
                let critic_batch: Vec<(&Transition, f64)> = chunk
                    .iter()
                    .map(|&i| (&transitions[i], returns[i]))
                    .collect();

                let (a_loss, a_grads, ls_grad, mean_ratio, clip_fraction) =
                    actor_loss_grads(&self.params, &actor_batch, &self.hp).map_err(|e| {
                        Error::Numeric(format!("update aborted at minibatch {minibatches}: {e}"))
                    })?;
                let (c_loss, c_grads) =
                    critic_loss_grads(&self.params, &critic_batch).map_err(|e| {
                        Error::Numeric(format!("update aborted at minibatch {minibatches}: {e}"))
                    })?;

                self.opt_actor
                    .step(&mut self.params.actor, &a_grads, self.hp.actor_lr);
                self.opt_log_std
                    .step(&mut self.params.log_std, ls_grad, self.hp.actor_lr);
                self.params.log_std = self.params.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
                self.opt_critic
                    .step(&mut self.params.critic, &c_grads, self.hp.critic_lr);

                if !self.params.is_finite() {
                    return Err(Error::Numeric(format!(
                        "update aborted at minibatch {minibatches}: parameters left the finite domain"
                    )));
                }
                minibatches += 1;
                last = PpoDiagnostics {
                    actor_loss: a_loss,
                    critic_loss: c_loss,
                    mean_ratio,
                    clip_fraction,
                    entropy: self.params.log_std + ENTROPY_CONST,
                    minibatches,
                };
            }
        }
        self.updates_done += 1;
        Ok(last)
    }

    /// Serialize the complete agent (parameters, optimizer moments,
    /// normalizer, RNG stream) as a versioned JSON blob.
    pub fn save_checkpoint(&self) -> Result<String> {
        let file = CheckpointFile {
            schema_version: 1,
            n_state: self.n_state,
            hp: self.hp.clone(),
            params: self.params.clone(),
            normalizer: self.normalizer.clone(),
            opt_actor: self.opt_actor.clone(),
            opt_critic: self.opt_critic.clone(),
            opt_log_std: self.opt_log_std,
            rng: self.rng.clone(),
            updates_done: self.updates_done,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn load_checkpoint(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported checkpoint schema version {}",
                file.schema_version
            )));
        }
        file.hp.validate()?;
        Ok(PpoAgent {
            hp: file.hp,
            params: file.params,
            normalizer: file.normalizer,
            opt_actor: file.opt_actor,
            opt_critic: file.opt_critic,
            opt_log_std: file.opt_log_std,
            rng: file.rng,
            n_state: file.n_state,
            updates_done: file.updates_done,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    n_state: usize,
    hp: PpoHyperparams,
    params: PolicyParams,
    normalizer: RunningNorm,
    opt_actor: AdamState,
    opt_critic: AdamState,
    opt_log_std: AdamScalar,
    rng: ChaCha12Rng,
    updates_done: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn toy_hp() -> PpoHyperparams {
        PpoHyperparams {
            hidden: [8, 8],
            minibatch: 8,
            ..Default::default()
        }
    }

    fn toy_agent(seed: u64) -> PpoAgent {
        PpoAgent::new(3, toy_hp(), seed).unwrap()
    }

    #[test]
    fn zero_weights_give_centered_policy() {
        let mut agent = toy_agent(0);
        agent.params.actor.w1.fill(0.0);
        agent.params.actor.w2.fill(0.0);
        agent.params.actor.w_head.fill(0.0);
        agent.params.log_std = 0.0;
        let (mean, std) = policy_forward(
            &agent.params,
            &DVector::from_row_slice(&[1.0, -2.0, 3.0]),
            0.0,
            10.0,
        )
        .unwrap();
        assert_abs_diff_eq!(mean, 5.0, epsilon = 1e-14);
        assert_abs_diff_eq!(std, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn policy_mean_stays_in_range() {
        let agent = toy_agent(3);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let s = DVector::from_fn(3, |_, _| 50.0 * (rng.gen::<f64>() - 0.5));
            let (mean, std) = policy_forward(&agent.params, &s, 0.0, 10.0).unwrap();
            assert!(mean > 0.0 && mean < 10.0, "mean {mean} escaped (0, 10)");
            assert!(std > 0.0);
        }
    }

    #[test]
    fn policy_rejects_non_finite_state() {
        let agent = toy_agent(3);
        assert!(policy_forward(
            &agent.params,
            &DVector::from_row_slice(&[f64::NAN, 0.0, 0.0]),
            0.0,
            10.0
        )
        .is_err());
    }

    #[test]
    fn mean_gradient_matches_finite_differences() {
        let agent = toy_agent(7);
        let s = DVector::from_row_slice(&[0.5, -0.3, 1.2]);
        let (lo, hi) = (0.0, 10.0);

        let cache = agent.params.actor.forward(&s);
        let mut grads = MlpGrads::zeros_like(&agent.params.actor);
        let d_pre = 0.5 * (hi - lo) * (1.0 - cache.out.tanh().powi(2));
        agent.params.actor.backward(&s, &cache, d_pre, &mut grads);

        let h = 1e-6;
        let mut check = |analytic: f64, set: &dyn Fn(&mut Mlp, f64)| {
            let mut plus = agent.params.actor.clone();
            set(&mut plus, h);
            let mut minus = agent.params.actor.clone();
            set(&mut minus, -h);
            let mp = squash_mean(plus.forward(&s).out, lo, hi);
            let mm = squash_mean(minus.forward(&s).out, lo, hi);
            let fd = (mp - mm) / (2.0 * h);
            assert_relative_eq!(analytic, fd, max_relative = 1e-5, epsilon = 1e-10);
        };
        check(grads.w1[(2, 1)], &|m, e| m.w1[(2, 1)] += e);
        check(grads.b1[4], &|m, e| m.b1[4] += e);
        check(grads.w2[(3, 5)], &|m, e| m.w2[(3, 5)] += e);
        check(grads.w_head[(0, 6)], &|m, e| m.w_head[(0, 6)] += e);
        check(grads.b_head[0], &|m, e| m.b_head[0] += e);
    }

    #[test]
    fn sampling_is_seeded_and_centered() {
        let agent = toy_agent(11);
        let s = DVector::from_row_slice(&[0.2, 0.4, -0.1]);
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let a = sample_action(&agent.params, &s, 0.0, 10.0, &mut r1).unwrap();
        let b = sample_action(&agent.params, &s, 0.0, 10.0, &mut r2).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.log_prob, b.log_prob);

        // Monte Carlo mean within 3 sigma / sqrt(N)
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_action(&agent.params, &s, 0.0, 10.0, &mut rng)
                .unwrap()
                .raw;
        }
        let empirical = sum / n as f64;
        let (mean, std) = policy_forward(&agent.params, &s, 0.0, 10.0).unwrap();
        assert!(
            (empirical - mean).abs() < 3.0 * std / (n as f64).sqrt(),
            "empirical mean {empirical} vs policy mean {mean}"
        );
    }

    #[test]
    fn tiny_std_collapses_to_mean() {
        let mut agent = toy_agent(13);
        agent.params.log_std = -20.0; // clamps to ln 1e-3
        let s = DVector::from_row_slice(&[0.0, 0.0, 0.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let sample = sample_action(&agent.params, &s, 0.0, 10.0, &mut rng).unwrap();
        assert!((sample.raw - sample.mean).abs() < 0.01);
    }

    #[test]
    fn gae_limits_and_recursive_oracle() {
        let transitions: Vec<Transition> = [
            (1.0, 0.5, false),
            (-0.5, 0.2, false),
            (2.0, -0.1, false),
            (0.3, 0.4, false),
            (1.5, 0.0, true),
        ]
        .into_iter()
        .map(|(reward, value_old, done)| Transition {
            state: vec![0.0],
            action: 0.0,
            log_prob_old: 0.0,
            reward,
            value_old,
            done,
        })
        .collect();
        let gamma = 0.9;

        // lambda = 1: discounted return minus value
        let (adv, _) = compute_advantages(&transitions, gamma, 1.0);
        for i in 0..5 {
            let mut ret = 0.0;
            for j in (i..5).rev() {
                ret = transitions[j].reward + gamma * ret;
            }
            assert_abs_diff_eq!(adv[i], ret - transitions[i].value_old, epsilon = 1e-12);
        }

        // lambda = 0: one-step TD error
        let (adv0, _) = compute_advantages(&transitions, gamma, 0.0);
        for i in 0..5 {
            let next = if i == 4 { 0.0 } else { transitions[i + 1].value_old };
            let td = transitions[i].reward + gamma * next - transitions[i].value_old;
            assert_abs_diff_eq!(adv0[i], td, epsilon = 1e-12);
        }

        // generic lambda: hand-unrolled recursion
        let lambda = 0.7;
        let (advl, rets) = compute_advantages(&transitions, gamma, lambda);
        let mut expected = vec![0.0; 5];
        let mut running = 0.0;
        for i in (0..5).rev() {
            let next = if i == 4 { 0.0 } else { transitions[i + 1].value_old };
            let delta = transitions[i].reward + gamma * next - transitions[i].value_old;
            running = delta + gamma * lambda * if i == 4 { 0.0 } else { running };
            expected[i] = running;
        }
        for i in 0..5 {
            assert_abs_diff_eq!(advl[i], expected[i], epsilon = 1e-12);
            assert_abs_diff_eq!(rets[i], advl[i] + transitions[i].value_old, epsilon = 1e-12);
        }
    }

    #[test]
    fn gae_resets_at_episode_boundaries() {
        let mk = |reward: f64, done: bool| Transition {
            state: vec![0.0],
            action: 0.0,
            log_prob_old: 0.0,
            reward,
            value_old: 0.0,
            done,
        };
        let two_episodes = vec![mk(1.0, false), mk(1.0, true), mk(1.0, false), mk(1.0, true)];
        let (adv, _) = compute_advantages(&two_episodes, 0.9, 0.95);
        // each episode must see only its own rewards
        assert_abs_diff_eq!(adv[0], adv[2], epsilon = 1e-12);
        assert_abs_diff_eq!(adv[1], adv[3], epsilon = 1e-12);
    }

    #[test]
    fn clip_hand_values() {
        assert_abs_diff_eq!(clipped_surrogate(2.0, 1.0, 0.2), 1.2, epsilon = 1e-15);
        assert_abs_diff_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8, epsilon = 1e-15);
        // at ratio 1 the surrogate equals the advantage
        assert_abs_diff_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(clipped_surrogate(1.0, -0.7, 0.2), -0.7, epsilon = 1e-15);
        // pointwise bounds
        for &(r, a) in &[(0.3, 1.0), (1.7, -0.5), (1.0, 0.0), (2.5, 2.0)] {
            let s = clipped_surrogate(r, a, 0.2);
            let g = if a >= 0.0 { 1.2 * a } else { 0.8 * a };
            assert!(s <= r * a + 1e-15);
            assert!(s <= g + 1e-15);
        }
    }

    fn toy_batch(agent: &PpoAgent, n: usize) -> Vec<Transition> {
        let mut rng = ChaCha12Rng::seed_from_u64(1234);
        (0..n)
            .map(|i| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                let s = DVector::from_row_slice(&raw);
                let sample = sample_action(&agent.params, &s, 0.0, 10.0, &mut rng).unwrap();
                Transition {
                    state: raw,
                    action: sample.raw,
                    // offset the stored log-prob so ratios sit near but not
                    // exactly at 1 and clip branches stay stable under
                    // finite-difference perturbations
                    log_prob_old: sample.log_prob - 0.05 * (rng.gen::<f64>() - 0.5),
                    reward: rng.gen::<f64>() - 0.3,
                    value_old: rng.gen::<f64>() * 0.5,
                    done: i == n - 1,
                }
            })
            .collect()
    }

    #[test]
    fn actor_gradients_match_finite_differences_everywhere() {
        let agent = toy_agent(17);
        let transitions = toy_batch(&agent, 3);
        let advs = [0.8, -1.1, 0.4];
        let batch: Vec<(&Transition, f64)> = transitions.iter().zip(advs).collect();
        let (_, grads, ls_grad, _, _) = actor_loss_grads(&agent.params, &batch, &agent.hp).unwrap();

        let h = 1e-6;
        let loss_at = |params: &PolicyParams| actor_loss(params, &batch, &agent.hp).unwrap();
        let check = |analytic: f64, mutate: &dyn Fn(&mut PolicyParams, f64)| {
            let mut plus = agent.params.clone();
            mutate(&mut plus, h);
            let mut minus = agent.params.clone();
            mutate(&mut minus, -h);
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "gradient mismatch: analytic {analytic:.9e} vs fd {fd:.9e}"
            );
        };
        for (i, j) in [(0usize, 0usize), (3, 2), (7, 1)] {
            check(grads.w1[(i, j)], &|p, e| p.actor.w1[(i, j)] += e);
        }
        for i in [0usize, 5] {
            check(grads.b1[i], &|p, e| p.actor.b1[i] += e);
            check(grads.b2[i], &|p, e| p.actor.b2[i] += e);
        }
        for (i, j) in [(0usize, 0usize), (4, 7)] {
            check(grads.w2[(i, j)], &|p, e| p.actor.w2[(i, j)] += e);
        }
        for j in [0usize, 3, 7] {
            check(grads.w_head[(0, j)], &|p, e| p.actor.w_head[(0, j)] += e);
        }
        check(grads.b_head[0], &|p, e| p.actor.b_head[0] += e);
        check(ls_grad, &|p, e| p.log_std += e);
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let agent = toy_agent(19);
        let transitions = toy_batch(&agent, 3);
        let rets = [1.2, -0.3, 0.6];
        let batch: Vec<(&Transition, f64)> = transitions.iter().zip(rets).collect();
        let (_, grads) = critic_loss_grads(&agent.params, &batch).unwrap();
        let h = 1e-6;
        let loss_at = |params: &PolicyParams| critic_loss(params, &batch).unwrap();
        let cases: [(f64, Box<dyn Fn(&mut PolicyParams, f64)>); 3] = [
            (grads.w1[(2, 1)], Box::new(|p, e| p.critic.w1[(2, 1)] += e)),
            (grads.b2[3], Box::new(|p, e| p.critic.b2[3] += e)),
            (
                grads.w_head[(0, 5)],
                Box::new(|p, e| p.critic.w_head[(0, 5)] += e),
            ),
        ];
        for (analytic, mutate) in cases {
            let mut plus = agent.params.clone();
            mutate(&mut plus, h);
            let mut minus = agent.params.clone();
            mutate(&mut minus, -h);
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            assert_relative_eq!(analytic, fd, max_relative = 1e-4, epsilon = 1e-10);
        }
    }

    #[test]
    fn surrogate_at_old_policy_equals_advantage() {
        let agent = toy_agent(23);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let transitions: Vec<Transition> = (0..4)
            .map(|i| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() - 0.5).collect();
                let s = DVector::from_row_slice(&raw);
                let sample = sample_action(&agent.params, &s, 0.0, 10.0, &mut rng).unwrap();
                Transition {
                    state: raw,
                    action: sample.raw,
                    log_prob_old: sample.log_prob,
                    reward: 0.0,
                    value_old: 0.0,
                    done: i == 3,
                }
            })
            .collect();
        let advs = [0.9, -0.4, 0.1, -1.3];
        let batch: Vec<(&Transition, f64)> = transitions.iter().zip(advs).collect();
        let (_, _, _, mean_ratio, clip_fraction) =
            actor_loss_grads(&agent.params, &batch, &agent.hp).unwrap();
        assert_abs_diff_eq!(mean_ratio, 1.0, epsilon = 1e-12);
        assert_eq!(clip_fraction, 0.0);
        let loss = actor_loss(&agent.params, &batch, &agent.hp).unwrap();
        let mean_adv = advs.iter().sum::<f64>() / 4.0;
        let entropy = agent.params.log_std + ENTROPY_CONST;
        assert_abs_diff_eq!(
            loss,
            -mean_adv - agent.hp.entropy_weight * entropy,
            epsilon = 1e-12
        );
    }

    #[test]
    fn update_moves_log_prob_in_advantage_direction() {
        let mut agent = toy_agent(29);
        agent.hp.epochs = 1;
        agent.hp.minibatch = 64;
        agent.hp.entropy_weight = 0.0;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let transitions: Vec<Transition> = (0..8)
            .map(|i| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() - 0.5).collect();
                let s = DVector::from_row_slice(&raw);
                let sample = sample_action(&agent.params, &s, 0.0, 10.0, &mut rng).unwrap();
                Transition {
                    state: raw,
                    action: sample.raw,
                    log_prob_old: sample.log_prob,
                    // alternate strong rewards so advantages carry both signs
                    reward: if i % 2 == 0 { 1.0 } else { -1.0 },
                    value_old: 0.0,
                    done: i == 7,
                }
            })
            .collect();
        let (advantages, _) =
            compute_advantages(&transitions, agent.hp.gamma, agent.hp.gae_lambda);
        let norm = normalize_advantages(&advantages);
        let before: Vec<f64> = transitions
            .iter()
            .map(|tr| {
                let s = DVector::from_row_slice(&tr.state);
                let (mean, std) = policy_forward(&agent.params, &s, 0.0, 10.0).unwrap();
                gaussian_log_prob(tr.action, mean, std)
            })
            .collect();
        agent.update(&transitions).unwrap();
        let mut weighted = 0.0;
        for (i, tr) in transitions.iter().enumerate() {
            let s = DVector::from_row_slice(&tr.state);
            let (mean, std) = policy_forward(&agent.params, &s, 0.0, 10.0).unwrap();
            let after = gaussian_log_prob(tr.action, mean, std);
            weighted += norm[i] * (after - before[i]);
        }
        assert!(
            weighted > 0.0,
            "advantage-weighted log-prob change must be positive, got {weighted:.3e}"
        );
    }

    #[test]
    fn larger_entropy_weight_never_lowers_post_update_entropy() {
        let base = toy_agent(31);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let transitions: Vec<Transition> = (0..6)
            .map(|i| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() - 0.5).collect();
                let s = DVector::from_row_slice(&raw);
                let mut r2 = ChaCha12Rng::seed_from_u64(50 + i as u64);
                let sample = sample_action(&base.params, &s, 0.0, 10.0, &mut r2).unwrap();
                Transition {
                    state: raw,
                    action: sample.raw,
                    log_prob_old: sample.log_prob,
                    reward: rng.gen::<f64>(),
                    value_old: 0.0,
                    done: i == 5,
                }
            })
            .collect();
        let mut log_stds = Vec::new();
        for weight in [0.0, 0.02, 0.2] {
            let mut agent = base.clone();
            agent.hp.epochs = 1;
            agent.hp.minibatch = 64;
            agent.hp.entropy_weight = weight;
            agent.update(&transitions).unwrap();
            log_stds.push(agent.params.log_std);
        }
        assert!(log_stds[1] >= log_stds[0] - 1e-12);
        assert!(log_stds[2] >= log_stds[1] - 1e-12);
    }

    #[test]
    fn non_finite_parameters_abort_update() {
        let mut agent = toy_agent(37);
        let transitions = toy_batch(&agent, 3);
        agent.params.actor.w1[(0, 0)] = f64::NAN;
        let err = agent.update(&transitions).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut agent = toy_agent(41);
        let transitions = toy_batch(&agent, 8);
        agent.update(&transitions).unwrap();
        for t in &transitions {
            agent.observe(&t.state).unwrap();
        }

        let blob = agent.save_checkpoint().unwrap();
        let mut restored = PpoAgent::load_checkpoint(&blob).unwrap();

        assert_eq!(
            agent.params.log_std.to_bits(),
            restored.params.log_std.to_bits()
        );
        for (a, b) in agent
            .params
            .actor
            .w1
            .iter()
            .zip(restored.params.actor.w1.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in agent.normalizer.mean.iter().zip(&restored.normalizer.mean) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // the RNG stream continues identically
        let s = DVector::from_row_slice(&[0.1, 0.2, 0.3]);
        let (sample_a, _) = agent.act(&s).unwrap();
        let (sample_b, _) = restored.act(&s).unwrap();
        assert_eq!(sample_a.raw.to_bits(), sample_b.raw.to_bits());
    }

    #[test]
    fn hyperparameter_validation() {
        let mut hp = PpoHyperparams::default();
        hp.clip_eps = 1.5;
        assert!(hp.validate().is_err());
        let mut hp = PpoHyperparams::default();
        hp.gamma = 0.0;
        assert!(hp.validate().is_err());
        assert!(PpoHyperparams::default().validate().is_ok());
    }
}
