//! Training orchestration: offline imitation pre-training against the
//! hierarchical informer on the lifted model (no plant access), online
//! weighted adaptation on the real plant with the informer in the loop,
//! a plain-PPO baseline, and the pure ILC closed loop the informer
//! experiments run.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kf_ilc::{BatchIlcRecord, HierarchicalInformer};
use crate::lifted::LiftedBatchModel;
use crate::ppo::{PpoAgent, Transition, UpdateMode};
use crate::reactor::{NoiseConfig, Reactor};

/// Which state component the discrete tracking reward follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackedVariable {
    ConcentrationA,
    ConcentrationB,
    ReactionTemp,
    JacketTemp,
}

impl TrackedVariable {
    pub fn index(&self) -> usize {
        match self {
            TrackedVariable::ConcentrationA => 0,
            TrackedVariable::ConcentrationB => 1,
            TrackedVariable::ReactionTemp => 2,
            TrackedVariable::JacketTemp => 3,
        }
    }
}

/// Hybrid reward: continuous imitation penalty plus banded tracking reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Weight of the continuous imitation term.
    pub alpha: f64,
    /// Weight of the discrete tracking term.
    pub beta: f64,
    /// Strictly increasing band edges on the absolute tracking error.
    pub thresholds: Vec<f64>,
    /// Band values; one more entry than thresholds (the last applies at and
    /// beyond the final edge).
    pub values: Vec<f64>,
    pub ref_variable: TrackedVariable,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 1.0,
            beta: 1.0,
            thresholds: vec![0.05, 0.1, 0.5, 1.0, 2.0, 3.5, 5.0],
            values: vec![300.0, 100.0, 50.0, 0.0, -5.0, -20.0, -50.0, -100.0],
            ref_variable: TrackedVariable::ReactionTemp,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.thresholds.len() + 1 {
            return Err(Error::Config(format!(
                "reward: {} band values for {} thresholds (need thresholds + 1)",
                self.values.len(),
                self.thresholds.len()
            )));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "reward: thresholds must be strictly increasing".into(),
            ));
        }
        if self.thresholds.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::Config(
                "reward: thresholds must be finite and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive fusion of the expert and agent actions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Total number of executions the authority handover is spread over.
    pub k_total: u64,
    /// Exponential coefficient on the action gap.
    pub rate: f64,
    /// Which counter drives the decay factor.
    pub index_mode: IndexMode,
    /// Diagnostic override: pin the weight to a constant.
    pub theta_override: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    /// Decay with the episode counter.
    Episode,
    /// Decay with the global step counter.
    Time,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            k_total: 1000,
            rate: 1.1,
            index_mode: IndexMode::Episode,
            theta_override: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_total == 0 {
            return Err(Error::Config("fusion.k_total must be >= 1".into()));
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::Config(format!(
                "fusion.rate must be finite and positive, got {}",
                self.rate
            )));
        }
        if let Some(v) = self.theta_override {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "fusion.theta_override must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Authority weight of the expert action: grows with the action gap and
/// decays as the counter approaches the total execution budget.
pub fn fusion_weight(a: f64, u_ilc: f64, counter: u64, cfg: &FusionConfig) -> f64 {
    if let Some(v) = cfg.theta_override {
        return v;
    }
    let gap = (a - u_ilc).abs();
    let decay = (cfg.k_total.saturating_sub(counter)) as f64 / cfg.k_total as f64;
    (1.0 - (-cfg.rate * gap).exp()) * decay
}

/// Convex combination of expert and agent actions, clipped to the flow box.
pub fn fuse_action(a: f64, u_ilc: f64, theta: f64) -> f64 {
    (theta * u_ilc + (1.0 - theta) * a).clamp(0.0, 10.0)
}

/// Banded tracking reward on the absolute error.
pub fn discrete_reward(err_abs: f64, cfg: &RewardConfig) -> f64 {
    for (threshold, value) in cfg.thresholds.iter().zip(&cfg.values) {
        if err_abs < *threshold {
            return *value;
        }
    }
    *cfg.values.last().expect("validated: non-empty values")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardParts {
    pub total: f64,
    pub continuous: f64,
    pub discrete: f64,
}

/// Total step reward: continuous imitation penalty plus the banded
/// tracking term on the estimated state error.
pub fn step_reward(a: f64, u_ilc: f64, x_est: f64, x_ref: f64, cfg: &RewardConfig) -> RewardParts {
    let continuous = -cfg.alpha * (u_ilc - a).abs();
    let discrete = cfg.beta * discrete_reward((x_est - x_ref).abs(), cfg);
    RewardParts {
        total: continuous + discrete,
        continuous,
        discrete,
    }
}

/// Mean squared tracking error of a trajectory against its reference.
pub fn evaluate_mse(trajectory: &[f64], reference: &[f64]) -> Result<f64> {
    if trajectory.len() != reference.len() || trajectory.is_empty() {
        return Err(Error::Dimension(format!(
            "mse: trajectory has {} points, reference {}",
            trajectory.len(),
            reference.len()
        )));
    }
    Ok(trajectory
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / trajectory.len() as f64)
}

/// Everything recorded about one training batch/episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: u64,
    /// Absolute states at sampling instants 0..=n_steps.
    pub states: Vec<Vec<f64>>,
    /// Agent actions as executed (clipped), one per interval.
    pub agent_actions: Vec<f64>,
    /// Expert actions, one per interval (empty when no informer ran).
    pub ilc_actions: Vec<f64>,
    /// Actions actually applied to the environment.
    pub applied_actions: Vec<f64>,
    /// Fusion weights, one per interval (empty when no fusion ran).
    pub thetas: Vec<f64>,
    pub rewards: Vec<f64>,
    pub reward_total: f64,
    /// Mean squared reaction-temperature tracking error vs the nominal.
    pub tracking_mse: f64,
    pub terminal_c_b: f64,
    pub mean_theta: f64,
    /// Mean absolute gap between expert and agent actions.
    pub mean_gap: f64,
    pub kf: Option<BatchIlcRecord>,
}

/// Lifted linear simulator: the offline stand-in for the plant. Same
/// disturbance and measurement model as the reactor, but everything flows
/// through the lifted matrices, so no plant code is ever touched.
#[derive(Debug, Clone)]
pub struct LiftedSimEnv {
    pub model: LiftedBatchModel,
    pub noise: NoiseConfig,
    /// Deterministic inlet offset of the first batch, K.
    pub initial_offset: f64,
    drift: DVector<f64>,
    x_true: DVector<f64>,
    v: Vec<f64>,
    m: Vec<Vec<f64>>,
    nq: Vec<f64>,
    episode: u64,
    t: usize,
    z_nom: DVector<f64>,
    y_nom: DVector<f64>,
}

impl LiftedSimEnv {
    pub fn new(model: LiftedBatchModel, noise: NoiseConfig, initial_offset: f64) -> Result<Self> {
        noise.validate()?;
        if model.dims.n_u != 1 || model.dims.n_d != 1 {
            return Err(Error::Dimension(
                "the lifted simulator drives one input and one disturbance channel".into(),
            ));
        }
        let n = model.dims.n_steps;
        let z_nom = model.nominal_z_stacked();
        let y_nom = model.nominal_y_terminal();
        Ok(LiftedSimEnv {
            drift: DVector::from_element(n, initial_offset),
            x_true: DVector::zeros(model.dims.lifted()),
            v: vec![0.0; n],
            m: Vec::new(),
            nq: Vec::new(),
            episode: 0,
            t: 0,
            z_nom,
            y_nom,
            model,
            noise,
            initial_offset,
        })
    }

    /// Start episode `k` (1-based, must advance one at a time): advances the
    /// disturbance drift and redraws the episode noise.
    pub fn reset(&mut self, k: u64) -> Result<DVector<f64>> {
        if k != self.episode + 1 {
            return Err(Error::Config(format!(
                "lifted simulator episodes advance one at a time (got {k} after {})",
                self.episode
            )));
        }
        let n = self.model.dims.n_steps;
        if k > 1 && self.noise.var_w > 0.0 {
            let mut rng = ChaCha12Rng::seed_from_u64(self.noise.seed);
            rng.set_stream(0);
            // fast-forward the shared walk stream to this episode's segment
            let sd = self.noise.var_w.sqrt();
            let mut step = DVector::zeros(n);
            for _ in 1..k {
                for i in 0..n {
                    let w: f64 = rng.sample(StandardNormal);
                    step[i] = sd * w;
                }
            }
            self.drift += step;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(self.noise.seed);
        rng.set_stream(k);
        let mut normal = |sd: f64| -> f64 {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        };
        self.v = (0..n).map(|_| normal(self.noise.var_v.sqrt())).collect();
        self.m = (0..n)
            .map(|_| {
                (0..self.model.dims.n_z)
                    .map(|_| normal(self.noise.var_m.sqrt()))
                    .collect()
            })
            .collect();
        self.nq = (0..self.model.dims.n_y)
            .map(|_| normal(self.noise.var_n.sqrt()))
            .collect();
        self.x_true = DVector::zeros(self.model.dims.lifted());
        self.t = 0;
        self.episode = k;
        Ok(self.model.nominal_x[0].clone())
    }

    /// Apply one absolute flow value; returns the noisy absolute
    /// observation at the next instant.
    pub fn step(&mut self, u_abs: f64) -> Result<Vec<f64>> {
        let dims = self.model.dims;
        let t = self.t;
        if t >= dims.n_steps {
            return Err(Error::Config("lifted simulator episode complete".into()));
        }
        let u_dev = u_abs - self.model.nominal_u[t][0];
        let d = self.drift[t] + self.v[t];
        self.x_true += self.model.psi_u_col(t) * DVector::from_element(1, u_dev)
            + self.model.psi_d_col(t) * DVector::from_element(1, d);
        self.t += 1;
        let time = self.t;
        let z_block = self.model.omega_row(time) * &self.x_true;
        let obs: Vec<f64> = (0..dims.n_z)
            .map(|i| self.z_nom[(time - 1) * dims.n_z + i] + z_block[i] + self.m[t][i])
            .collect();
        Ok(obs)
    }

    /// Noisy absolute terminal quality, after the last step.
    pub fn terminal_quality(&self) -> Result<Vec<f64>> {
        let dims = self.model.dims;
        if self.t != dims.n_steps {
            return Err(Error::Config(
                "terminal quality is available only at episode end".into(),
            ));
        }
        let y_dev = &self.model.gamma * &self.x_true;
        Ok((0..dims.n_y)
            .map(|i| self.y_nom[i] + y_dev[i] + self.nq[i])
            .collect())
    }

    /// True absolute state at sampling instant `time` of the running episode.
    pub fn true_state_abs(&self, time: usize) -> DVector<f64> {
        let n_x = self.model.dims.n_x;
        if time == 0 {
            return self.model.nominal_x[0].clone();
        }
        &self.model.nominal_x[time] + self.x_true.rows((time - 1) * n_x, n_x).clone_owned()
    }
}

/// Common per-episode knobs of the training loops.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: u64,
    /// Append the previous executed action to the agent state.
    pub append_prev_action: bool,
    /// Stop the online loop early when the mean fusion weight stays below
    /// `early_stop_theta` for `early_stop_window` consecutive episodes.
    pub early_stop: bool,
    pub early_stop_theta: f64,
    pub early_stop_window: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1000,
            append_prev_action: false,
            early_stop: true,
            early_stop_theta: 0.01,
            early_stop_window: 20,
        }
    }
}

/// Agent state dimension implied by a train configuration.
pub fn agent_state_dim(base: usize, cfg: &TrainConfig) -> usize {
    base + usize::from(cfg.append_prev_action)
}

fn assemble_state(estimate: &DVector<f64>, prev_action: f64, append: bool) -> Vec<f64> {
    let mut s: Vec<f64> = estimate.as_slice().to_vec();
    if append {
        s.push(prev_action);
    }
    s
}

/// Nominal reaction-temperature reference at instants 1..=n_steps.
fn nominal_temperature(model: &LiftedBatchModel) -> Vec<f64> {
    (1..=model.dims.n_steps)
        .map(|t| model.nominal_x[t][TrackedVariable::ReactionTemp.index()])
        .collect()
}

fn temperature_trajectory(states: &[Vec<f64>]) -> Vec<f64> {
    states
        .iter()
        .skip(1)
        .map(|s| s[TrackedVariable::ReactionTemp.index()])
        .collect()
}

/// Offline imitation pre-training: the informer controls the lifted
/// simulator, the agent only shadows it. The plant is not reachable from
/// this function by construction.
pub fn pretrain_offline(
    agent: &mut PpoAgent,
    informer: &mut HierarchicalInformer,
    env: &mut LiftedSimEnv,
    train: &TrainConfig,
) -> Result<Vec<BatchRecord>> {
    let n = informer.model.dims.n_steps;
    let expected_dim = agent_state_dim(informer.model.dims.n_x, train);
    if agent.n_state() != expected_dim {
        return Err(Error::Dimension(format!(
            "agent expects {} state entries, pre-training provides {expected_dim}",
            agent.n_state()
        )));
    }
    let t_nom = nominal_temperature(&informer.model);
    let mut records = Vec::with_capacity(train.episodes as usize);
    let mut buffer: Vec<Transition> = Vec::new();
    for k in 1..=train.episodes {
        env.reset(k)?;
        informer.begin_batch().map_err(|e| {
            Error::Solver(format!("informer failed starting episode {k}: {e}"))
        })?;
        let mut prev_action = 0.0;
        let mut raw_state = assemble_state(&env.true_state_abs(0), prev_action, train.append_prev_action);
        // instant 0 is the known initial state
        let mut state = agent.observe(&raw_state)?;

        let mut transitions = Vec::with_capacity(n);
        let mut record = BatchRecord {
            batch_index: k,
            states: vec![env.true_state_abs(0).as_slice().to_vec()],
            agent_actions: Vec::with_capacity(n),
            ilc_actions: Vec::with_capacity(n),
            applied_actions: Vec::with_capacity(n),
            thetas: Vec::new(),
            rewards: Vec::with_capacity(n),
            reward_total: 0.0,
            tracking_mse: 0.0,
            terminal_c_b: 0.0,
            mean_theta: 0.0,
            mean_gap: 0.0,
            kf: None,
        };
        for t in 0..n {
            let u_ilc = informer.compute_action().map_err(|e| {
                Error::Solver(format!("informer failed at episode {k}, step {t}: {e}"))
            })?;
            // agent action: used only for the imitation reward
            let (sample, value) = agent.act(&state)?;
            let reward = -(u_ilc - sample.executed).abs();

            let obs = env.step(u_ilc)?;
            let y = if t + 1 == n {
                Some(env.terminal_quality()?)
            } else {
                None
            };
            informer
                .advance(u_ilc, &obs, y.as_deref())
                .map_err(|e| Error::Solver(format!("informer failed at episode {k}, step {t}: {e}")))?;

            transitions.push(Transition {
                state: state.as_slice().to_vec(),
                action: sample.raw,
                log_prob_old: sample.log_prob,
                reward,
                value_old: value,
                done: t + 1 == n,
            });
            record.states.push(env.true_state_abs(t + 1).as_slice().to_vec());
            record.agent_actions.push(sample.executed);
            record.ilc_actions.push(u_ilc);
            record.applied_actions.push(u_ilc);
            record.rewards.push(reward);

            // the agent's next state is the filtered estimate
            prev_action = sample.executed;
            raw_state = assemble_state(
                &informer.estimate_abs(t + 1),
                prev_action,
                train.append_prev_action,
            );
            state = agent.observe(&raw_state)?;
        }
        record.kf = Some(informer.finish_batch()?);
        record.reward_total = record.rewards.iter().sum();
        record.mean_gap = record
            .agent_actions
            .iter()
            .zip(&record.ilc_actions)
            .map(|(a, u)| (a - u).abs())
            .sum::<f64>()
            / n as f64;
        record.tracking_mse = evaluate_mse(&temperature_trajectory(&record.states), &t_nom)?;
        record.terminal_c_b = record.states[n][TrackedVariable::ConcentrationB.index()];

        match agent.hp.update_mode {
            UpdateMode::PerBatch => {
                agent.update(&transitions)?;
            }
            UpdateMode::Horizon => {
                buffer.extend(transitions);
                if buffer.len() >= agent.hp.horizon {
                    agent.update(&buffer)?;
                    buffer.clear();
                }
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Pure informer closed loop on the real plant: the expert alone drives
/// every batch.
pub fn run_ilc_closed_loop(
    informer: &mut HierarchicalInformer,
    reactor: &Reactor,
    noise: &NoiseConfig,
    n_batches: u64,
) -> Result<Vec<BatchRecord>> {
    let n = informer.model.dims.n_steps;
    let t_nom = nominal_temperature(&informer.model);
    let mut records = Vec::with_capacity(n_batches as usize);
    for k in 1..=n_batches {
        informer.begin_batch()?;
        let mut session = reactor.begin_session(noise, k)?;
        let mut record = BatchRecord {
            batch_index: k,
            states: vec![session.state().as_vector().as_slice().to_vec()],
            agent_actions: Vec::new(),
            ilc_actions: Vec::with_capacity(n),
            applied_actions: Vec::with_capacity(n),
            thetas: Vec::new(),
            rewards: Vec::new(),
            reward_total: 0.0,
            tracking_mse: 0.0,
            terminal_c_b: 0.0,
            mean_theta: 0.0,
            mean_gap: 0.0,
            kf: None,
        };
        for t in 0..n {
            let u_ilc = informer.compute_action().map_err(|e| {
                Error::Solver(format!("informer failed at batch {k}, step {t}: {e}"))
            })?;
            let obs = session.step(u_ilc)?;
            let y = if t + 1 == n {
                Some(session.terminal_quality()?)
            } else {
                None
            };
            informer.advance(u_ilc, &obs, y.as_ref().map(|v| v.as_slice()))?;
            record.ilc_actions.push(u_ilc);
            record.applied_actions.push(u_ilc);
            record
                .states
                .push(session.state().as_vector().as_slice().to_vec());
        }
        record.kf = Some(informer.finish_batch()?);
        record.tracking_mse = evaluate_mse(&temperature_trajectory(&record.states), &t_nom)?;
        record.terminal_c_b = record.states[n][TrackedVariable::ConcentrationB.index()];
        records.push(record);
    }
    Ok(records)
}

/// Online weighted adaptation: informer and agent generate actions in
/// parallel; the fused action drives the plant; the agent learns from the
/// hybrid reward on the filtered state.
pub fn train_online(
    agent: &mut PpoAgent,
    informer: &mut HierarchicalInformer,
    reactor: &Reactor,
    noise: &NoiseConfig,
    reward_cfg: &RewardConfig,
    fusion_cfg: &FusionConfig,
    train: &TrainConfig,
) -> Result<Vec<BatchRecord>> {
    reward_cfg.validate()?;
    fusion_cfg.validate()?;
    let n = informer.model.dims.n_steps;
    let expected_dim = agent_state_dim(informer.model.dims.n_x, train);
    if agent.n_state() != expected_dim {
        return Err(Error::Dimension(format!(
            "agent expects {} state entries, online training provides {expected_dim}",
            agent.n_state()
        )));
    }
    let t_nom = nominal_temperature(&informer.model);
    let ref_index = reward_cfg.ref_variable.index();
    let mut records = Vec::with_capacity(train.episodes as usize);
    let mut buffer: Vec<Transition> = Vec::new();
    let mut global_step: u64 = 0;
    let mut quiet_episodes = 0u64;
    for k in 1..=train.episodes {
        informer.begin_batch()?;
        let mut session = reactor.begin_session(noise, k)?;
        let mut prev_action = 0.0;
        let mut raw_state =
            assemble_state(&informer.estimate_abs(0), prev_action, train.append_prev_action);
        let mut state = agent.observe(&raw_state)?;

        let mut transitions = Vec::with_capacity(n);
        let mut record = BatchRecord {
            batch_index: k,
            states: vec![session.state().as_vector().as_slice().to_vec()],
            agent_actions: Vec::with_capacity(n),
            ilc_actions: Vec::with_capacity(n),
            applied_actions: Vec::with_capacity(n),
            thetas: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            reward_total: 0.0,
            tracking_mse: 0.0,
            terminal_c_b: 0.0,
            mean_theta: 0.0,
            mean_gap: 0.0,
            kf: None,
        };
        for t in 0..n {
            let u_ilc = informer.compute_action().map_err(|e| {
                Error::Solver(format!("informer failed at episode {k}, step {t}: {e}"))
            })?;
            let (sample, value) = agent.act(&state)?;
            let a_t = sample.executed;
            let counter = match fusion_cfg.index_mode {
                IndexMode::Episode => k,
                IndexMode::Time => global_step,
            };
            let theta = fusion_weight(a_t, u_ilc, counter, fusion_cfg);
            let u = fuse_action(a_t, u_ilc, theta);

            let obs = session.step(u)?;
            let y = if t + 1 == n {
                Some(session.terminal_quality()?)
            } else {
                None
            };
            informer.advance(u, &obs, y.as_ref().map(|v| v.as_slice()))?;

            let estimate = informer.estimate_abs(t + 1);
            let reward = step_reward(a_t, u_ilc, estimate[ref_index], informer.model.nominal_x[t + 1][ref_index], reward_cfg);

            transitions.push(Transition {
                state: state.as_slice().to_vec(),
                action: sample.raw,
                log_prob_old: sample.log_prob,
                reward: reward.total,
                value_old: value,
                done: t + 1 == n,
            });
            record.states.push(session.state().as_vector().as_slice().to_vec());
            record.agent_actions.push(a_t);
            record.ilc_actions.push(u_ilc);
            record.applied_actions.push(u);
            record.thetas.push(theta);
            record.rewards.push(reward.total);

            prev_action = a_t;
            raw_state = assemble_state(&estimate, prev_action, train.append_prev_action);
            state = agent.observe(&raw_state)?;
            global_step += 1;
        }
        record.kf = Some(informer.finish_batch()?);
        record.reward_total = record.rewards.iter().sum();
        record.mean_theta = record.thetas.iter().sum::<f64>() / n as f64;
        record.mean_gap = record
            .agent_actions
            .iter()
            .zip(&record.ilc_actions)
            .map(|(a, u)| (a - u).abs())
            .sum::<f64>()
            / n as f64;
        record.tracking_mse = evaluate_mse(&temperature_trajectory(&record.states), &t_nom)?;
        record.terminal_c_b = record.states[n][TrackedVariable::ConcentrationB.index()];

        match agent.hp.update_mode {
            UpdateMode::PerBatch => {
                agent.update(&transitions)?;
            }
            UpdateMode::Horizon => {
                buffer.extend(transitions);
                if buffer.len() >= agent.hp.horizon {
                    agent.update(&buffer)?;
                    buffer.clear();
                }
            }
        }
        let mean_theta = record.mean_theta;
        records.push(record);
        if train.early_stop {
            if mean_theta < train.early_stop_theta {
                quiet_episodes += 1;
                if quiet_episodes >= train.early_stop_window {
                    log::info!("authority handover complete after {k} episodes");
                    break;
                }
            } else {
                quiet_episodes = 0;
            }
        }
    }
    Ok(records)
}

/// Plain PPO baseline: raw noisy observations as the state, banded
/// tracking reward only, no informer and no fusion.
pub fn train_baseline_ppo(
    agent: &mut PpoAgent,
    reactor: &Reactor,
    noise: &NoiseConfig,
    nominal: &LiftedBatchModel,
    reward_cfg: &RewardConfig,
    train: &TrainConfig,
) -> Result<Vec<BatchRecord>> {
    reward_cfg.validate()?;
    let n = nominal.dims.n_steps;
    let expected_dim = agent_state_dim(nominal.dims.n_z, train);
    if agent.n_state() != expected_dim {
        return Err(Error::Dimension(format!(
            "agent expects {} state entries, the baseline provides {expected_dim}",
            agent.n_state()
        )));
    }
    // the baseline observes (T, T_J); its tracking reward follows the
    // reaction temperature row of the observation
    let t_nom = nominal_temperature(nominal);
    let mut records = Vec::with_capacity(train.episodes as usize);
    let mut buffer: Vec<Transition> = Vec::new();
    for k in 1..=train.episodes {
        let mut session = reactor.begin_session(noise, k)?;
        let init = session.state().as_vector();
        let mut prev_action = 0.0;
        let mut raw_state = assemble_state(
            &DVector::from_row_slice(&[init[2], init[3]]),
            prev_action,
            train.append_prev_action,
        );
        let mut state = agent.observe(&raw_state)?;

        let mut transitions = Vec::with_capacity(n);
        let mut record = BatchRecord {
            batch_index: k,
            states: vec![session.state().as_vector().as_slice().to_vec()],
            agent_actions: Vec::with_capacity(n),
            ilc_actions: Vec::new(),
            applied_actions: Vec::with_capacity(n),
            thetas: Vec::new(),
            rewards: Vec::with_capacity(n),
            reward_total: 0.0,
            tracking_mse: 0.0,
            terminal_c_b: 0.0,
            mean_theta: 0.0,
            mean_gap: 0.0,
            kf: None,
        };
        for t in 0..n {
            let (sample, value) = agent.act(&state)?;
            let a_t = sample.executed;
            let obs = session.step(a_t)?;
            // banded tracking reward on the measured reaction temperature
            let reward = reward_cfg.beta * discrete_reward((obs[0] - t_nom[t]).abs(), reward_cfg);

            transitions.push(Transition {
                state: state.as_slice().to_vec(),
                action: sample.raw,
                log_prob_old: sample.log_prob,
                reward,
                value_old: value,
                done: t + 1 == n,
            });
            record.states.push(session.state().as_vector().as_slice().to_vec());
            record.agent_actions.push(a_t);
            record.applied_actions.push(a_t);
            record.rewards.push(reward);

            prev_action = a_t;
            raw_state = assemble_state(
                &DVector::from_row_slice(&obs),
                prev_action,
                train.append_prev_action,
            );
            state = agent.observe(&raw_state)?;
        }
        record.reward_total = record.rewards.iter().sum();
        record.tracking_mse = evaluate_mse(&temperature_trajectory(&record.states), &t_nom)?;
        record.terminal_c_b = record.states[n][TrackedVariable::ConcentrationB.index()];

        match agent.hp.update_mode {
            UpdateMode::PerBatch => {
                agent.update(&transitions)?;
            }
            UpdateMode::Horizon => {
                buffer.extend(transitions);
                if buffer.len() >= agent.hp.horizon {
                    agent.update(&buffer)?;
                    buffer.clear();
                }
            }
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kf_ilc::{IlcConfig, IlcObjectiveConfig, NoiseCovariances};
    use crate::lifted::{build_lifted, linearize};
    use crate::ppo::PpoHyperparams;
    use crate::reactor::{BatchTimeGrid, ReactorParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn fusion_weight_hand_values() {
        let cfg = FusionConfig::default();
        assert_eq!(fusion_weight(3.0, 3.0, 0, &cfg), 0.0);
        assert_eq!(fusion_weight(1.0, 9.0, 1000, &cfg), 0.0);
        // gap 2, counter 0: 1 - exp(-2.2)
        assert_abs_diff_eq!(
            fusion_weight(4.0, 2.0, 0, &cfg),
            0.8891968416376661,
            epsilon = 1e-15
        );
        // override wins
        let pinned = FusionConfig {
            theta_override: Some(0.25),
            ..Default::default()
        };
        assert_eq!(fusion_weight(4.0, 2.0, 0, &pinned), 0.25);
    }

    #[test]
    fn fuse_action_degenerate_cases() {
        assert_eq!(fuse_action(2.0, 6.0, 1.0), 6.0);
        assert_eq!(fuse_action(2.0, 6.0, 0.0), 2.0);
        assert_eq!(fuse_action(2.0, 6.0, 0.5), 4.0);
    }

    #[test]
    fn reward_bands_match_the_table() {
        let cfg = RewardConfig::default();
        assert_eq!(discrete_reward(0.03, &cfg), 300.0);
        assert_eq!(discrete_reward(0.07, &cfg), 100.0);
        assert_eq!(discrete_reward(0.3, &cfg), 50.0);
        assert_eq!(discrete_reward(0.7, &cfg), 0.0);
        assert_eq!(discrete_reward(1.5, &cfg), -5.0);
        assert_eq!(discrete_reward(3.0, &cfg), -20.0);
        assert_eq!(discrete_reward(4.0, &cfg), -50.0);
        assert_eq!(discrete_reward(5.0, &cfg), -100.0);
        assert_eq!(discrete_reward(7.0, &cfg), -100.0);
        // boundary: strictly-less-than bands
        assert_eq!(discrete_reward(0.05, &cfg), 100.0);
    }

    #[test]
    fn step_reward_decomposition() {
        let cfg = RewardConfig::default();
        let r = step_reward(3.0, 3.0, 320.3, 320.0, &cfg);
        assert_eq!(r.continuous, 0.0);
        assert_eq!(r.discrete, 50.0);
        assert_eq!(r.total, 50.0);

        let r2 = step_reward(1.0, 4.0, 320.0, 320.0, &cfg);
        assert_eq!(r2.continuous, -3.0);
        assert_eq!(r2.discrete, 300.0);
        assert_abs_diff_eq!(r2.total, r2.continuous + r2.discrete, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn theta_always_in_unit_interval(
            a in 0.0f64..10.0,
            u in 0.0f64..10.0,
            counter in 0u64..2000,
        ) {
            let cfg = FusionConfig::default();
            let theta = fusion_weight(a, u, counter, &cfg);
            prop_assert!((0.0..=1.0).contains(&theta));
        }

        #[test]
        fn fused_action_always_in_flow_box(
            a in 0.0f64..10.0,
            u in 0.0f64..10.0,
            theta in 0.0f64..1.0,
        ) {
            let fused = fuse_action(a, u, theta);
            prop_assert!((0.0..=10.0).contains(&fused));
        }

        #[test]
        fn reward_parts_stay_in_contract(
            a in 0.0f64..10.0,
            u in 0.0f64..10.0,
            err in 0.0f64..20.0,
        ) {
            let cfg = RewardConfig::default();
            let r = step_reward(a, u, err, 0.0, &cfg);
            prop_assert!(r.continuous <= 0.0);
            prop_assert!(cfg.values.contains(&(r.discrete / cfg.beta)));
            prop_assert!((r.total - (r.continuous + r.discrete)).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_oracle() {
        assert_eq!(evaluate_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(evaluate_mse(&[2.0, 3.0], &[1.0, 2.0]).unwrap(), 1.0);
        let a = [0.3, -0.4, 1.9, 2.2];
        let b = [0.1, 0.0, 2.0, 1.0];
        let direct: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 4.0;
        assert_abs_diff_eq!(evaluate_mse(&a, &b).unwrap(), direct, epsilon = 1e-15);
        assert!(evaluate_mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn reward_config_validation() {
        let mut cfg = RewardConfig::default();
        cfg.values.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = RewardConfig::default();
        cfg.thresholds[1] = cfg.thresholds[0];
        assert!(cfg.validate().is_err());
        assert!(RewardConfig::default().validate().is_ok());
    }

    /// Small production-like setup on a coarse grid for loop tests.
    fn small_setup() -> (Reactor, LiftedBatchModel) {
        let reactor = Reactor::new(
            ReactorParams::default(),
            BatchTimeGrid::new(3600.0, 8, 5.0).unwrap(),
        )
        .unwrap();
        let u_nom = vec![1.0; 8];
        let states = reactor.run_nominal(&u_nom).unwrap();
        let ltv = linearize(&reactor.params, &reactor.grid, &states, &u_nom).unwrap();
        let nominal_x = states
            .iter()
            .map(|s| DVector::from_row_slice(s.as_vector().as_slice()))
            .collect();
        let nominal_u = u_nom.iter().map(|&v| DVector::from_element(1, v)).collect();
        let model = build_lifted(&ltv, nominal_x, nominal_u).unwrap();
        (reactor, model)
    }

    fn small_informer(model: &LiftedBatchModel, noise: &NoiseConfig) -> HierarchicalInformer {
        let cov = NoiseCovariances::from_noise_config(noise, 1, 2, 2);
        HierarchicalInformer::new(
            model.clone(),
            cov,
            IlcObjectiveConfig::default(),
            IlcConfig::default(),
        )
        .unwrap()
    }

    fn small_hp() -> PpoHyperparams {
        PpoHyperparams {
            hidden: [16, 16],
            ..Default::default()
        }
    }

    #[test]
    fn lifted_sim_reproduces_nominal_under_nominal_input() {
        let (_, model) = small_setup();
        let noise = NoiseConfig::noiseless(0);
        let mut env = LiftedSimEnv::new(model.clone(), noise, 0.0).unwrap();
        env.reset(1).unwrap();
        for t in 0..8 {
            let u = model.nominal_u[t][0];
            let obs = env.step(u).unwrap();
            let expected = &model.nominal_x[t + 1];
            assert_abs_diff_eq!(obs[0], expected[2], epsilon = 1e-9);
            assert_abs_diff_eq!(obs[1], expected[3], epsilon = 1e-9);
        }
        let y = env.terminal_quality().unwrap();
        assert_abs_diff_eq!(y[0], model.nominal_x[8][0], epsilon = 1e-9);
        assert_abs_diff_eq!(y[1], model.nominal_x[8][1], epsilon = 1e-9);
    }

    #[test]
    fn pretraining_env_evolution_is_agent_independent() {
        let (_, model) = small_setup();
        let noise = NoiseConfig {
            seed: 3,
            ..NoiseConfig::default()
        };
        let train = TrainConfig {
            episodes: 3,
            ..Default::default()
        };

        // two different agents, same environment seeds
        let mut records = Vec::new();
        for agent_seed in [1u64, 99u64] {
            let mut agent = PpoAgent::new(4, small_hp(), agent_seed).unwrap();
            let mut informer = small_informer(&model, &noise);
            let mut env = LiftedSimEnv::new(model.clone(), noise.clone(), -5.0).unwrap();
            let recs = pretrain_offline(&mut agent, &mut informer, &mut env, &train).unwrap();
            records.push(recs);
        }
        for (a, b) in records[0].iter().zip(&records[1]) {
            assert_eq!(a.states, b.states, "environment path must not depend on the agent");
            assert_eq!(a.ilc_actions, b.ilc_actions);
        }
    }

    #[test]
    fn pretraining_rewards_are_imitation_gaps() {
        let (_, model) = small_setup();
        let noise = NoiseConfig {
            seed: 5,
            ..NoiseConfig::default()
        };
        let train = TrainConfig {
            episodes: 2,
            ..Default::default()
        };
        let mut agent = PpoAgent::new(4, small_hp(), 7).unwrap();
        let mut informer = small_informer(&model, &noise);
        let mut env = LiftedSimEnv::new(model.clone(), noise, -5.0).unwrap();
        let recs = pretrain_offline(&mut agent, &mut informer, &mut env, &train).unwrap();
        for rec in &recs {
            for ((r, a), u) in rec.rewards.iter().zip(&rec.agent_actions).zip(&rec.ilc_actions) {
                assert_abs_diff_eq!(*r, -(u - a).abs(), epsilon = 1e-12);
            }
            assert!(rec.kf.is_some());
        }
    }

    #[test]
    fn online_training_invariants_and_determinism() {
        let (reactor, model) = small_setup();
        let noise = NoiseConfig {
            seed: 11,
            ..NoiseConfig::default()
        };
        let train = TrainConfig {
            episodes: 3,
            ..Default::default()
        };
        let run = |seed: u64| {
            let mut agent = PpoAgent::new(4, small_hp(), seed).unwrap();
            let mut informer = small_informer(&model, &noise);
            train_online(
                &mut agent,
                &mut informer,
                &reactor,
                &noise,
                &RewardConfig::default(),
                &FusionConfig::default(),
                &train,
            )
            .unwrap()
        };
        let recs = run(21);
        for rec in &recs {
            for &theta in &rec.thetas {
                assert!((0.0..=1.0).contains(&theta));
            }
            for &u in &rec.applied_actions {
                assert!((0.0..=10.0).contains(&u));
            }
        }
        // bit-identical rerun under the same seeds
        let again = run(21);
        assert_eq!(
            serde_json::to_string(&recs).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn theta_override_pins_the_loop_to_one_side() {
        let (reactor, model) = small_setup();
        let noise = NoiseConfig::noiseless(13);
        let train = TrainConfig {
            episodes: 1,
            ..Default::default()
        };

        // theta = 1: applied == expert
        let mut agent = PpoAgent::new(4, small_hp(), 31).unwrap();
        let mut informer = small_informer(&model, &noise);
        let pure_ilc = train_online(
            &mut agent,
            &mut informer,
            &reactor,
            &noise,
            &RewardConfig::default(),
            &FusionConfig {
                theta_override: Some(1.0),
                ..Default::default()
            },
            &train,
        )
        .unwrap();
        for rec in &pure_ilc {
            assert_eq!(rec.applied_actions, rec.ilc_actions);
        }

        // theta = 0: applied == agent
        let mut agent = PpoAgent::new(4, small_hp(), 31).unwrap();
        let mut informer = small_informer(&model, &noise);
        let pure_agent = train_online(
            &mut agent,
            &mut informer,
            &reactor,
            &noise,
            &RewardConfig::default(),
            &FusionConfig {
                theta_override: Some(0.0),
                ..Default::default()
            },
            &train,
        )
        .unwrap();
        for rec in &pure_agent {
            assert_eq!(rec.applied_actions, rec.agent_actions);
        }
    }

    #[test]
    fn baseline_runs_and_records_everything() {
        let (reactor, model) = small_setup();
        let noise = NoiseConfig {
            seed: 17,
            ..NoiseConfig::default()
        };
        let train = TrainConfig {
            episodes: 3,
            ..Default::default()
        };
        let run = |seed: u64| {
            let mut agent = PpoAgent::new(2, small_hp(), seed).unwrap();
            train_baseline_ppo(
                &mut agent,
                &reactor,
                &noise,
                &model,
                &RewardConfig::default(),
                &train,
            )
            .unwrap()
        };
        let recs = run(5);
        assert_eq!(recs.len(), 3);
        for rec in &recs {
            assert!(rec.reward_total.is_finite());
            assert_eq!(rec.rewards.len(), 8);
            assert!(rec.tracking_mse.is_finite());
            assert!(rec.ilc_actions.is_empty());
        }
        let again = run(5);
        assert_eq!(
            serde_json::to_string(&recs).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn ilc_closed_loop_runs_and_reports() {
        let (reactor, model) = small_setup();
        let noise = NoiseConfig {
            seed: 19,
            ..NoiseConfig::default()
        };
        let mut informer = small_informer(&model, &noise);
        let recs = run_ilc_closed_loop(&mut informer, &reactor, &noise, 3).unwrap();
        assert_eq!(recs.len(), 3);
        for rec in &recs {
            assert_eq!(rec.applied_actions.len(), 8);
            let kf = rec.kf.as_ref().unwrap();
            assert!(kf.trace_p_posterior.is_finite());
            assert!(kf.innovation_norm.is_finite());
        }
    }
}
