//! On-policy actor-critic trainer: small dense networks, clipped-surrogate
//! policy updates with generalized advantage estimation, and a staged
//! curriculum over the built-in scenario stages.
//!
//! Everything here is deliberately single-threaded and seeded so a full
//! training run is reproducible bit for bit: rollouts step a fixed set of
//! environments sequentially, and all randomness flows from one ChaCha
//! stream.

use crate::actions::RawAction;
use crate::env::{stage_spec, Env, EnvConfig, StageSpec, Termination};
use crate::obs::{ObsScales, StackedState};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("environment error: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
}

// ---------------------------------------------------------------------------
// dense network

/// Fully connected net with tanh hidden layers and a linear output layer.
/// Forward/backward operate on column-per-sample batches.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub ws: Vec<DMatrix<f64>>,
    pub bs: Vec<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub ws: Vec<DMatrix<f64>>,
    pub bs: Vec<DVector<f64>>,
}

impl Mlp {
    /// Uniform Xavier init; `out_scale` shrinks the final layer (used to
    /// start the policy near its mean action).
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng, out_scale: f64) -> Mlp {
        assert!(sizes.len() >= 2);
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let mut s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if l == sizes.len() - 2 {
                s *= out_scale;
            }
            ws.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.gen_range(-s..s)
            }));
            bs.push(DVector::zeros(fan_out));
        }
        Mlp {
            sizes: sizes.to_vec(),
            ws,
            bs,
        }
    }

    /// Returns all post-activation values per layer; `acts[0]` is the input
    /// and `acts.last()` the linear output.
    pub fn forward(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let n = self.ws.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(x.clone());
        for l in 0..n {
            let mut z = &self.ws[l] * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &self.bs[l];
            }
            if l + 1 < n {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn output(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).pop().unwrap()
    }

    /// Backprop `dout` (d loss / d output, same shape as the output batch)
    /// through the cached activations.
    pub fn backward(&self, acts: &[DMatrix<f64>], dout: &DMatrix<f64>) -> MlpGrads {
        let n = self.ws.len();
        let mut ws = Vec::with_capacity(n);
        let mut bs = Vec::with_capacity(n);
        let mut delta = dout.clone();
        for l in (0..n).rev() {
            let dw = &delta * acts[l].transpose();
            let db = DVector::from_iterator(
                delta.nrows(),
                delta.row_iter().map(|r| r.sum()),
            );
            if l > 0 {
                let mut up = self.ws[l].transpose() * &delta;
                // tanh' = 1 - h^2 on the post-activation of layer l
                up.zip_apply(&acts[l], |d, h| *d *= 1.0 - h * h);
                delta = up;
            }
            ws.push(dw);
            bs.push(db);
        }
        ws.reverse();
        bs.reverse();
        MlpGrads { ws, bs }
    }

}

impl MlpGrads {
    fn scale(&mut self, s: f64) {
        for w in &mut self.ws {
            *w *= s;
        }
        for b in &mut self.bs {
            *b *= s;
        }
    }
}

// ---------------------------------------------------------------------------
// Adam over a flat list of tensors

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[usize]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update; `params` and `grads` are parallel slices of tensors.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / b1t;
                let vh = v[i] / b2t;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

fn global_grad_norm(grads: &[&[f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// policy and value heads

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gaussian policy in pre-squash space: the net outputs 4 means, a separate
/// state-independent vector holds log standard deviations, and actions are
/// the sigmoid of the sampled pre-squash variables.
#[derive(Clone, Debug)]
pub struct Policy {
    pub net: Mlp,
    pub log_std: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct Value {
    pub net: Mlp,
}

pub const ACTION_DIM: usize = 4;

impl Policy {
    pub fn new(obs_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Policy {
        Policy {
            net: Mlp::new(&[obs_dim, hidden, hidden, ACTION_DIM], rng, 0.01),
            log_std: DVector::from_element(ACTION_DIM, 0.0),
        }
    }

    pub fn mean(&self, obs: &[f64]) -> DVector<f64> {
        let x = DMatrix::from_column_slice(obs.len(), 1, obs);
        DVector::from_column_slice(self.net.output(&x).as_slice())
    }

    /// Sample a squashed action; returns the action, the pre-squash sample,
    /// and its log-density under the squashed distribution.
    pub fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> (RawAction, [f64; ACTION_DIM], f64) {
        let mu = self.mean(obs);
        let mut z = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            let eps = standard_normal(rng);
            z[i] = mu[i] + self.log_std[i].exp() * eps;
        }
        let logp = self.log_prob(&mu, &z);
        (squash(&z), z, logp)
    }

    /// Deterministic action: sigmoid of the mean.
    pub fn act_mean(&self, obs: &[f64]) -> RawAction {
        let mu = self.mean(obs);
        squash(&[mu[0], mu[1], mu[2], mu[3]])
    }

    /// Log-density of the squashed action `sigmoid(z)`: the Gaussian
    /// log-density of `z` minus the log-derivative of the sigmoid.
    pub fn log_prob(&self, mu: &DVector<f64>, z: &[f64; ACTION_DIM]) -> f64 {
        let mut lp = 0.0;
        for i in 0..ACTION_DIM {
            let sd = self.log_std[i].exp();
            let u = (z[i] - mu[i]) / sd;
            lp += -0.5 * u * u - self.log_std[i] - 0.5 * (2.0 * PI).ln();
            let a = sigmoid(z[i]);
            lp -= (a * (1.0 - a)).max(1e-12).ln();
        }
        lp
    }

    /// Entropy of the pre-squash Gaussian (the squash correction is left
    /// out; it does not depend on the trainable parameters' scale term).
    pub fn entropy(&self) -> f64 {
        self.log_std.sum() + ACTION_DIM as f64 * 0.5 * (2.0 * PI * std::f64::consts::E).ln()
    }
}

fn squash(z: &[f64; ACTION_DIM]) -> RawAction {
    RawAction {
        alpha_s: sigmoid(z[0]),
        beta_s: sigmoid(z[1]),
        alpha_l: sigmoid(z[2]),
        beta_l: sigmoid(z[3]),
    }
}

/// Box-Muller from two uniforms, so sampling is identical across platforms.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Value {
    pub fn new(obs_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Value {
        Value {
            net: Mlp::new(&[obs_dim, hidden, hidden, 1], rng, 1.0),
        }
    }

    pub fn predict(&self, obs: &[f64]) -> f64 {
        let x = DMatrix::from_column_slice(obs.len(), 1, obs);
        self.net.output(&x)[(0, 0)]
    }
}

// ---------------------------------------------------------------------------
// GAE

/// Generalized advantage estimation over one trajectory segment.
/// `values` has one extra trailing entry: the bootstrap value of the state
/// after the last transition (0 if the segment ended the episode).
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lam: f64,
) -> Vec<f64> {
    assert_eq!(values.len(), rewards.len() + 1);
    assert_eq!(dones.len(), rewards.len());
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let nonterm = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * nonterm - values[t];
        acc = delta + gamma * lam * nonterm * acc;
        adv[t] = acc;
    }
    adv
}

// ---------------------------------------------------------------------------
// training configuration

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub hidden: usize,
    pub n_envs: usize,
    pub rollout_steps: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub ent_coef: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    pub max_grad_norm: f64,
    /// Stages to run, in order.
    pub stages: Vec<usize>,
    /// Env-step budget per stage; training moves on when the budget runs
    /// out even if the promotion threshold was not reached.
    pub stage_budget: usize,
    /// Trailing-episode window used for the promotion success rate.
    pub success_window: usize,
    pub out_dir: Option<PathBuf>,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            hidden: 256,
            n_envs: 8,
            rollout_steps: 4096,
            minibatch: 256,
            epochs: 8,
            gamma: 0.99,
            lam: 0.95,
            clip: 0.2,
            ent_coef: 0.003,
            lr_policy: 3e-4,
            lr_value: 1e-3,
            max_grad_norm: 0.5,
            stages: (1..=7).collect(),
            stage_budget: 300_000,
            success_window: 50,
            out_dir: None,
            env: EnvConfig::default(),
        }
    }
}

/// Promotion threshold: 0.9 for the large-arena stages, 0.8 for the dense
/// small-arena stages; the last stage has no promotion.
pub fn promotion_threshold(stage_id: usize) -> f64 {
    if stage_id <= 4 {
        0.9
    } else {
        0.8
    }
}

pub fn scales_for_stage(stage: &StageSpec, env: &EnvConfig) -> ObsScales {
    ObsScales {
        lidar_range: env.lidar_range,
        arena_diagonal: (stage.arena_w * stage.arena_w + stage.arena_h * stage.arena_h).sqrt(),
        v_max: env.mpc.limits.v_max,
    }
}

// ---------------------------------------------------------------------------
// rollout collection

struct Transition {
    obs: Vec<f64>,
    z: [f64; ACTION_DIM],
    logp: f64,
    reward: f64,
    done: bool,
    value: f64,
}

struct EnvSlot {
    env: Env,
    state: StackedState,
    episode_return: f64,
}

struct Collector {
    stage: StageSpec,
    scales: ObsScales,
    env_config: EnvConfig,
    slots: Vec<EnvSlot>,
    seed_counter: u64,
    /// Trailing episode outcomes (true = success) for promotion checks.
    outcomes: Vec<bool>,
    returns: Vec<f64>,
}

impl Collector {
    fn new(
        stage: StageSpec,
        env_config: &EnvConfig,
        n_envs: usize,
        seed_counter: &mut u64,
    ) -> Result<Collector, PpoError> {
        let scales = scales_for_stage(&stage, env_config);
        let mut slots = Vec::with_capacity(n_envs);
        for _ in 0..n_envs {
            let (env, state) = Env::reset(&stage, *seed_counter, env_config.clone())?;
            *seed_counter += 1;
            slots.push(EnvSlot {
                env,
                state,
                episode_return: 0.0,
            });
        }
        Ok(Collector {
            stage,
            scales,
            env_config: env_config.clone(),
            slots,
            seed_counter: *seed_counter,
            outcomes: Vec::new(),
            returns: Vec::new(),
        })
    }

    /// Step every env round-robin until at least `total` transitions exist.
    /// Returns per-env trajectories (GAE needs contiguous streams).
    fn collect(
        &mut self,
        policy: &Policy,
        value: &Value,
        total: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<Transition>>, PpoError> {
        let n = self.slots.len();
        let mut trajs: Vec<Vec<Transition>> = (0..n).map(|_| Vec::new()).collect();
        let mut count = 0;
        while count < total {
            for (i, slot) in self.slots.iter_mut().enumerate() {
                let obs = slot.state.normalized(&self.scales);
                let (action, z, logp) = policy.act(&obs, rng);
                let v = value.predict(&obs);
                let (next, reward, flags) = slot.env.step(action);
                slot.episode_return += reward.total;
                trajs[i].push(Transition {
                    obs,
                    z,
                    logp,
                    reward: reward.total,
                    done: flags.done,
                    value: v,
                });
                count += 1;
                if flags.done {
                    self.outcomes
                        .push(flags.termination == Termination::Success);
                    self.returns.push(slot.episode_return);
                    let (env, state) =
                        Env::reset(&self.stage, self.seed_counter, self.env_config.clone())?;
                    self.seed_counter += 1;
                    slot.env = env;
                    slot.state = state;
                    slot.episode_return = 0.0;
                } else {
                    slot.state = next;
                }
            }
        }
        Ok(trajs)
    }

    fn window_success_rate(&self, window: usize) -> Option<f64> {
        if self.outcomes.len() < window {
            return None;
        }
        let tail = &self.outcomes[self.outcomes.len() - window..];
        Some(tail.iter().filter(|&&s| s).count() as f64 / window as f64)
    }
}

// ---------------------------------------------------------------------------
// the PPO update

pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
}

struct Batch {
    obs: Vec<Vec<f64>>,
    z: Vec<[f64; ACTION_DIM]>,
    old_logp: Vec<f64>,
    adv: Vec<f64>,
    ret: Vec<f64>,
}

#[derive(Debug)]
pub struct Learner {
    pub policy: Policy,
    pub value: Value,
    pub adam_policy: Adam,
    pub adam_value: Adam,
}

impl Learner {
    pub fn new(obs_dim: usize, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Learner {
        let policy = Policy::new(obs_dim, config.hidden, rng);
        let value = Value::new(obs_dim, config.hidden, rng);
        let p_shapes = tensor_shapes(&policy.net)
            .chain(std::iter::once(ACTION_DIM))
            .collect::<Vec<_>>();
        let v_shapes = tensor_shapes(&value.net).collect::<Vec<_>>();
        Learner {
            adam_policy: Adam::new(config.lr_policy, &p_shapes),
            adam_value: Adam::new(config.lr_value, &v_shapes),
            policy,
            value,
        }
    }

    fn update(&mut self, batch: &Batch, config: &TrainConfig, rng: &mut ChaCha8Rng) -> UpdateStats {
        let n = batch.obs.len();
        let obs_dim = batch.obs[0].len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut stats = UpdateStats {
            policy_loss: 0.0,
            value_loss: 0.0,
            entropy: self.policy.entropy(),
            clip_frac: 0.0,
        };
        let mut updates = 0usize;
        let mut clipped = 0usize;
        let mut samples = 0usize;

        // advantage normalization over the whole batch
        let mean = batch.adv.iter().sum::<f64>() / n as f64;
        let var = batch.adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-8);
        let adv: Vec<f64> = batch.adv.iter().map(|a| (a - mean) / std).collect();

        for _ in 0..config.epochs {
            // Fisher-Yates with the training RNG keeps runs reproducible
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for chunk in order.chunks(config.minibatch) {
                let m = chunk.len();
                let mut x = DMatrix::zeros(obs_dim, m);
                for (c, &idx) in chunk.iter().enumerate() {
                    x.column_mut(c).copy_from_slice(&batch.obs[idx]);
                }

                // policy pass
                let acts = self.policy.net.forward(&x);
                let mu = acts.last().unwrap().clone();
                let mut dmu = DMatrix::zeros(ACTION_DIM, m);
                let mut dlogstd = DVector::zeros(ACTION_DIM);
                let mut ploss = 0.0;
                for (c, &idx) in chunk.iter().enumerate() {
                    let z = &batch.z[idx];
                    let mu_c = DVector::from_column_slice(mu.column(c).as_slice());
                    let lp = self.policy.log_prob(&mu_c, z);
                    let ratio = (lp - batch.old_logp[idx]).exp();
                    let a = adv[idx];
                    let surr1 = ratio * a;
                    let surr2 = ratio.clamp(1.0 - config.clip, 1.0 + config.clip) * a;
                    ploss -= surr1.min(surr2);
                    samples += 1;
                    if surr1 > surr2 {
                        clipped += 1;
                    } else {
                        // gradient of -ratio*A through mu, log_std
                        for i in 0..ACTION_DIM {
                            let sd = self.policy.log_std[i].exp();
                            let u = (z[i] - mu_c[i]) / sd;
                            // d lp / d mu = u / sd, d lp / d log_std = u^2 - 1
                            dmu[(i, c)] += -a * ratio * (u / sd);
                            dlogstd[i] += -a * ratio * (u * u - 1.0);
                        }
                    }
                }
                // entropy bonus: d entropy / d log_std = 1
                for i in 0..ACTION_DIM {
                    dlogstd[i] -= config.ent_coef * m as f64;
                }
                let scale = 1.0 / m as f64;
                dmu *= scale;
                dlogstd *= scale;
                let mut pgrads = self.policy.net.backward(&acts, &dmu);
                clip_and_step_policy(
                    &mut self.policy,
                    &mut pgrads,
                    &dlogstd,
                    &mut self.adam_policy,
                    config.max_grad_norm,
                );
                stats.policy_loss += ploss * scale;

                // value pass
                let vacts = self.value.net.forward(&x);
                let vout = vacts.last().unwrap();
                let mut dv = DMatrix::zeros(1, m);
                let mut vloss = 0.0;
                for (c, &idx) in chunk.iter().enumerate() {
                    let err = vout[(0, c)] - batch.ret[idx];
                    vloss += 0.5 * err * err;
                    dv[(0, c)] = err;
                }
                dv *= scale;
                let mut vgrads = self.value.net.backward(&vacts, &dv);
                clip_and_step_value(
                    &mut self.value,
                    &mut vgrads,
                    &mut self.adam_value,
                    config.max_grad_norm,
                );
                stats.value_loss += vloss * scale;
                updates += 1;
            }
        }
        stats.policy_loss /= updates.max(1) as f64;
        stats.value_loss /= updates.max(1) as f64;
        stats.clip_frac = clipped as f64 / samples.max(1) as f64;
        stats.entropy = self.policy.entropy();
        stats
    }
}

fn tensor_shapes(mlp: &Mlp) -> impl Iterator<Item = usize> + '_ {
    mlp.ws
        .iter()
        .map(|w| w.len())
        .chain(mlp.bs.iter().map(|b| b.len()))
}

fn clip_and_step_policy(
    policy: &mut Policy,
    grads: &mut MlpGrads,
    dlogstd: &DVector<f64>,
    adam: &mut Adam,
    max_norm: f64,
) {
    let mut dlogstd = dlogstd.clone();
    {
        let gslices: Vec<&[f64]> = grads
            .ws
            .iter()
            .map(|w| w.as_slice())
            .chain(grads.bs.iter().map(|b| b.as_slice()))
            .chain(std::iter::once(dlogstd.as_slice()))
            .collect();
        let norm = global_grad_norm(&gslices);
        if norm > max_norm {
            let s = max_norm / norm;
            grads.scale(s);
            dlogstd *= s;
        }
    }
    let gslices: Vec<&[f64]> = grads
        .ws
        .iter()
        .map(|w| w.as_slice())
        .chain(grads.bs.iter().map(|b| b.as_slice()))
        .chain(std::iter::once(dlogstd.as_slice()))
        .collect();
    let mut pslices: Vec<&mut [f64]> = Vec::new();
    for w in &mut policy.net.ws {
        pslices.push(unsafe { std::slice::from_raw_parts_mut(w.as_mut_slice().as_mut_ptr(), w.len()) });
    }
    for b in &mut policy.net.bs {
        pslices.push(unsafe { std::slice::from_raw_parts_mut(b.as_mut_slice().as_mut_ptr(), b.len()) });
    }
    pslices.push(policy.log_std.as_mut_slice());
    adam.step(&mut pslices, &gslices);
}

fn clip_and_step_value(value: &mut Value, grads: &mut MlpGrads, adam: &mut Adam, max_norm: f64) {
    {
        let gslices: Vec<&[f64]> = grads
            .ws
            .iter()
            .map(|w| w.as_slice())
            .chain(grads.bs.iter().map(|b| b.as_slice()))
            .collect();
        let norm = global_grad_norm(&gslices);
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
    let gslices: Vec<&[f64]> = grads
        .ws
        .iter()
        .map(|w| w.as_slice())
        .chain(grads.bs.iter().map(|b| b.as_slice()))
        .collect();
    let mut pslices: Vec<&mut [f64]> = Vec::new();
    for w in &mut value.net.ws {
        pslices.push(unsafe { std::slice::from_raw_parts_mut(w.as_mut_slice().as_mut_ptr(), w.len()) });
    }
    for b in &mut value.net.bs {
        pslices.push(unsafe { std::slice::from_raw_parts_mut(b.as_mut_slice().as_mut_ptr(), b.len()) });
    }
    adam.step(&mut pslices, &gslices);
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub policy_sizes: Vec<usize>,
    pub value_sizes: Vec<usize>,
    pub policy_ws: Vec<Vec<f64>>,
    pub policy_bs: Vec<Vec<f64>>,
    pub log_std: Vec<f64>,
    pub value_ws: Vec<Vec<f64>>,
    pub value_bs: Vec<Vec<f64>>,
    pub adam_policy: Adam,
    pub adam_value: Adam,
    pub stage_idx: usize,
    pub env_steps: u64,
    pub seed_counter: u64,
    pub train_seed: u64,
}

impl Checkpoint {
    pub fn capture(learner: &Learner, stage_idx: usize, env_steps: u64, seed_counter: u64, train_seed: u64) -> Checkpoint {
        Checkpoint {
            policy_sizes: learner.policy.net.sizes.clone(),
            value_sizes: learner.value.net.sizes.clone(),
            policy_ws: learner.policy.net.ws.iter().map(|w| w.as_slice().to_vec()).collect(),
            policy_bs: learner.policy.net.bs.iter().map(|b| b.as_slice().to_vec()).collect(),
            log_std: learner.policy.log_std.as_slice().to_vec(),
            value_ws: learner.value.net.ws.iter().map(|w| w.as_slice().to_vec()).collect(),
            value_bs: learner.value.net.bs.iter().map(|b| b.as_slice().to_vec()).collect(),
            adam_policy: learner.adam_policy.clone(),
            adam_value: learner.adam_value.clone(),
            stage_idx,
            env_steps,
            seed_counter,
            train_seed,
        }
    }

    pub fn restore(&self) -> Result<Learner, PpoError> {
        let build = |sizes: &[usize], ws: &[Vec<f64>], bs: &[Vec<f64>]| -> Result<Mlp, PpoError> {
            let mut mws = Vec::new();
            let mut mbs = Vec::new();
            for l in 0..sizes.len() - 1 {
                let (rows, cols) = (sizes[l + 1], sizes[l]);
                if ws[l].len() != rows * cols || bs[l].len() != rows {
                    return Err(PpoError::Shape(format!("layer {l} tensor size")));
                }
                mws.push(DMatrix::from_column_slice(rows, cols, &ws[l]));
                mbs.push(DVector::from_column_slice(&bs[l]));
            }
            Ok(Mlp {
                sizes: sizes.to_vec(),
                ws: mws,
                bs: mbs,
            })
        };
        Ok(Learner {
            policy: Policy {
                net: build(&self.policy_sizes, &self.policy_ws, &self.policy_bs)?,
                log_std: DVector::from_column_slice(&self.log_std),
            },
            value: Value {
                net: build(&self.value_sizes, &self.value_ws, &self.value_bs)?,
            },
            adam_policy: self.adam_policy.clone(),
            adam_value: self.adam_value.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PpoError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, PpoError> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

// ---------------------------------------------------------------------------
// curriculum driver

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub env_steps: u64,
    pub iterations: usize,
    pub final_success_rate: f64,
    pub promoted: bool,
    /// Wall-clock time spent on this stage.
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub learner: Learner,
    pub reports: Vec<StageReport>,
    pub total_env_steps: u64,
}

/// Run the staged curriculum. Promotion requires the trailing-window success
/// rate to reach the stage threshold; otherwise the stage budget caps the
/// time spent before moving on. `resume` restarts from a saved checkpoint.
pub fn train_curriculum(
    config: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainResult, PpoError> {
    let obs_dim = StackedState::dim(config.env.rnum_v);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (mut learner, mut stage_idx, mut total_steps, mut seed_counter) = match resume {
        Some(cp) => (cp.restore()?, cp.stage_idx, cp.env_steps, cp.seed_counter),
        None => (Learner::new(obs_dim, config, &mut rng), 0, 0, config.seed << 20),
    };

    let mut curves: Option<std::fs::File> = match &config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join("curves.csv"))?;
            writeln!(
                f,
                "stage,iteration,env_steps,mean_return,success_rate,policy_loss,value_loss,entropy,clip_frac"
            )?;
            Some(f)
        }
        None => None,
    };

    let mut reports = Vec::new();
    while stage_idx < config.stages.len() {
        let stage = stage_spec(config.stages[stage_idx]);
        let threshold = promotion_threshold(stage.id);
        let mut collector = Collector::new(stage, &config.env, config.n_envs, &mut seed_counter)?;
        let mut stage_steps = 0u64;
        let mut iterations = 0usize;
        let mut promoted = false;
        let mut last_rate = 0.0;
        let stage_start = std::time::Instant::now();

        while (stage_steps as usize) < config.stage_budget {
            let trajs = collector.collect(
                &learner.policy,
                &learner.value,
                config.rollout_steps,
                &mut rng,
            )?;
            let mut batch = Batch {
                obs: Vec::new(),
                z: Vec::new(),
                old_logp: Vec::new(),
                adv: Vec::new(),
                ret: Vec::new(),
            };
            let scales = scales_for_stage(&stage, &config.env);
            for (i, traj) in trajs.iter().enumerate() {
                if traj.is_empty() {
                    continue;
                }
                let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
                let dones: Vec<bool> = traj.iter().map(|t| t.done).collect();
                let mut values: Vec<f64> = traj.iter().map(|t| t.value).collect();
                let bootstrap = if *dones.last().unwrap() {
                    0.0
                } else {
                    let obs = collector.slots[i].state.normalized(&scales);
                    learner.value.predict(&obs)
                };
                values.push(bootstrap);
                let adv = gae(&rewards, &values, &dones, config.gamma, config.lam);
                for (t, tr) in traj.iter().enumerate() {
                    batch.obs.push(tr.obs.clone());
                    batch.z.push(tr.z);
                    batch.old_logp.push(tr.logp);
                    batch.adv.push(adv[t]);
                    batch.ret.push(adv[t] + tr.value);
                }
            }
            let n_collected = batch.obs.len() as u64;
            stage_steps += n_collected;
            total_steps += n_collected;
            let stats = learner.update(&batch, config, &mut rng);
            iterations += 1;

            let rate = collector
                .window_success_rate(config.success_window)
                .unwrap_or(0.0);
            last_rate = rate;
            let mean_return = if collector.returns.is_empty() {
                0.0
            } else {
                let tail = collector
                    .returns
                    .iter()
                    .rev()
                    .take(config.success_window)
                    .collect::<Vec<_>>();
                tail.iter().copied().sum::<f64>() / tail.len() as f64
            };
            if let Some(f) = curves.as_mut() {
                writeln!(
                    f,
                    "{},{},{},{:.4},{:.4},{:.6},{:.6},{:.4},{:.4}",
                    stage.id,
                    iterations,
                    total_steps,
                    mean_return,
                    rate,
                    stats.policy_loss,
                    stats.value_loss,
                    stats.entropy,
                    stats.clip_frac
                )?;
            }

            // Early stop once the trailing success rate clears the stage
            // threshold; on the last stage this just ends training early.
            if rate >= threshold {
                promoted = true;
                break;
            }
        }

        reports.push(StageReport {
            stage: stage.id,
            env_steps: stage_steps,
            iterations,
            final_success_rate: last_rate,
            promoted,
            seconds: stage_start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = &config.out_dir {
            let cp = Checkpoint::capture(
                &learner,
                stage_idx + 1,
                total_steps,
                collector.seed_counter,
                config.seed,
            );
            cp.save(&dir.join(format!("checkpoint_stage{}.json", stage.id)))?;
        }
        seed_counter = collector.seed_counter;
        stage_idx += 1;
    }

    if let Some(dir) = &config.out_dir {
        let cp = Checkpoint::capture(&learner, stage_idx, total_steps, seed_counter, config.seed);
        cp.save(&dir.join("checkpoint_final.json"))?;
    }

    Ok(TrainResult {
        learner,
        reports,
        total_env_steps: total_steps,
    })
}

/// Roll the deterministic (mean-action) policy over the given seeds and
/// return the per-seed success flags.
pub fn evaluate_policy(
    policy: &Policy,
    stage_id: usize,
    seeds: &[u64],
    env_config: &EnvConfig,
) -> Result<Vec<bool>, PpoError> {
    let stage = stage_spec(stage_id);
    let scales = scales_for_stage(&stage, env_config);
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (mut env, mut state) = Env::reset(&stage, seed, env_config.clone())?;
        let mut success = false;
        while !env.done {
            let obs = state.normalized(&scales);
            let action = policy.act_mean(&obs);
            let (next, _, flags) = env.step(action);
            state = next;
            if flags.done {
                success = flags.termination == Termination::Success;
            }
        }
        out.push(success);
    }
    Ok(out)
}
