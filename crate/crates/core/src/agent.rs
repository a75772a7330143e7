//! Advantage actor-critic mask policy.
//!
//! A shared MLP trunk reads one attention-state row per source token and
//! feeds two heads: a two-way policy (mask / attend) and a scalar state
//! value. Every episode carries a single terminal reward (the summary's
//! ROUGE score), so the per-token return is that reward and the advantage is
//! `R - b(s_t)` with the previous episode's value of the same state as the
//! default baseline.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::numerics::{
    load_into_store, write_store, Adam, Graph, NodeId, NumericsError, ParamId, ParameterStore,
    Tensor,
};

pub const MASK_ACTION: usize = 0;
pub const ATTEND_ACTION: usize = 1;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("state rows have dimension {got}, agent expects {want}")]
    StateDimMismatch { got: usize, want: usize },
    #[error("trajectory has no tokens")]
    EmptyTrajectory,
    #[error("trajectory arrays disagree on length")]
    LengthMismatch,
    #[error("invalid agent config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("agent checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// Where the advantage baseline comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineMode {
    /// Value of the same state recorded on the previous episode for this
    /// example; falls back to the current value the first time around.
    #[default]
    PreviousValue,
    CurrentValue,
}

impl std::str::FromStr for BaselineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "previous_value" => Ok(BaselineMode::PreviousValue),
            "current_value" => Ok(BaselineMode::CurrentValue),
            other => Err(format!("unknown baseline mode: {other}")),
        }
    }
}

impl std::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BaselineMode::PreviousValue => write!(f, "previous_value"),
            BaselineMode::CurrentValue => write!(f, "current_value"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub state_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Entropy coefficient (beta).
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub baseline: BaselineMode,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            state_dim: 16,
            hidden_sizes: vec![32, 32],
            entropy_coef: 0.01,
            learning_rate: 1e-3,
            value_coef: 1.0,
            baseline: BaselineMode::PreviousValue,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.state_dim == 0 {
            return Err(AgentError::BadConfig("state_dim must be positive".into()));
        }
        if self.entropy_coef < 0.0 {
            return Err(AgentError::BadConfig(format!(
                "entropy_coef {} must be nonnegative",
                self.entropy_coef
            )));
        }
        Ok(())
    }

    /// Number of pooled buckets the transformer state must provide.
    pub fn buckets(&self) -> usize {
        self.state_dim - 1
    }
}

/// Per-token (p_mask, p_attend) pairs.
#[derive(Debug, Clone)]
pub struct PolicyDistribution {
    pub probs: Vec<(f64, f64)>,
}

impl PolicyDistribution {
    pub fn p_mask(&self, t: usize) -> f64 {
        self.probs[t].0
    }

    pub fn p_attend(&self, t: usize) -> f64 {
        self.probs[t].1
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Per-token mask/attend decisions (0 = mask, 1 = attend).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskAction {
    pub actions: Vec<usize>,
}

impl MaskAction {
    pub fn masked_flags(&self) -> Vec<bool> {
        self.actions.iter().map(|&a| a == MASK_ACTION).collect()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.actions.is_empty() {
            return 0.0;
        }
        self.actions.iter().filter(|&&a| a == MASK_ACTION).count() as f64
            / self.actions.len() as f64
    }
}

/// Everything recorded for one episode.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: MaskAction,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub baseline: Vec<f64>,
    pub reward: f64,
    pub advantages: Vec<f64>,
    pub entropies: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check(&self) -> Result<(), AgentError> {
        let t = self.states.len();
        if t == 0 {
            return Err(AgentError::EmptyTrajectory);
        }
        if [
            self.actions.actions.len(),
            self.log_probs.len(),
            self.values.len(),
            self.baseline.len(),
            self.advantages.len(),
            self.entropies.len(),
        ]
        .iter()
        .any(|&l| l != t)
        {
            return Err(AgentError::LengthMismatch);
        }
        Ok(())
    }
}

/// `A_t = R - b(s_t)`; the single episodic reward stands in for every
/// per-token return.
pub fn advantages(reward: f64, baseline: &[f64]) -> Vec<f64> {
    baseline.iter().map(|b| reward - b).collect()
}

/// Previous-episode value cache keyed by example id.
#[derive(Debug, Clone, Default)]
pub struct BaselineCache {
    values: HashMap<String, Vec<f64>>,
}

impl BaselineCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Baseline for this episode: the cached previous values when present
    /// and compatible, otherwise the current values.
    pub fn baseline(&self, example_id: &str, current: &[f64], mode: BaselineMode) -> Vec<f64> {
        match mode {
            BaselineMode::CurrentValue => current.to_vec(),
            BaselineMode::PreviousValue => match self.values.get(example_id) {
                Some(prev) if prev.len() == current.len() => prev.clone(),
                _ => current.to_vec(),
            },
        }
    }

    pub fn store(&mut self, example_id: &str, values: Vec<f64>) {
        self.values.insert(example_id.to_string(), values);
    }

    /// Dropped at phase boundaries.
    pub fn reset(&mut self) {
        self.values.clear();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub actor: f64,
    pub critic: f64,
    pub entropy: f64,
}

#[derive(Debug)]
pub struct ActOutput {
    pub distribution: PolicyDistribution,
    pub actions: MaskAction,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
}

struct AgentGraphNodes {
    probs: NodeId,
    log_probs: NodeId,
    values: NodeId,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub store: ParameterStore,
    trunk: Vec<(ParamId, ParamId)>,
    policy_head: (ParamId, ParamId),
    value_head: (ParamId, ParamId),
    adam: Adam,
}

fn he_normal(rng: &mut ChaCha20Rng, fan_in: usize) -> f64 {
    let std = (2.0 / fan_in as f64).sqrt();
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Agent {
    /// Trunk weights use He initialization; both heads start at zero so the
    /// initial policy is exactly uniform and initial values are exactly 0.
    pub fn new(cfg: AgentConfig, rng: &mut ChaCha20Rng) -> Result<Self, AgentError> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let mut trunk = Vec::new();
        let mut fan_in = cfg.state_dim;
        for (i, &h) in cfg.hidden_sizes.iter().enumerate() {
            let data: Vec<f64> = (0..fan_in * h).map(|_| he_normal(rng, fan_in)).collect();
            let w = store.add(
                format!("trunk{i}.w"),
                Tensor::new(vec![fan_in, h], data).expect("sized"),
            );
            let b = store.add(format!("trunk{i}.b"), Tensor::vector(&vec![0.0; h]));
            trunk.push((w, b));
            fan_in = h;
        }
        let policy_head = (
            store.add("policy.w", Tensor::zeros(vec![fan_in, 2])),
            store.add("policy.b", Tensor::vector(&[0.0, 0.0])),
        );
        let value_head = (
            store.add("value.w", Tensor::zeros(vec![fan_in, 1])),
            store.add("value.b", Tensor::vector(&[0.0])),
        );
        let adam = Adam::new(cfg.learning_rate);
        Ok(Agent {
            cfg,
            store,
            trunk,
            policy_head,
            value_head,
            adam,
        })
    }

    fn forward_graph(
        &self,
        g: &mut Graph,
        states: &[Vec<f64>],
    ) -> Result<AgentGraphNodes, AgentError> {
        let t = states.len();
        if t == 0 {
            return Err(AgentError::EmptyTrajectory);
        }
        for row in states {
            if row.len() != self.cfg.state_dim {
                return Err(AgentError::StateDimMismatch {
                    got: row.len(),
                    want: self.cfg.state_dim,
                });
            }
        }
        let flat: Vec<f64> = states.iter().flatten().copied().collect();
        let mut x = g.constant(Tensor::new(vec![t, self.cfg.state_dim], flat)?);
        for &(w, b) in &self.trunk {
            let wn = g.param(&self.store, w);
            let bn = g.param(&self.store, b);
            let h = g.matmul(x, wn)?;
            let h = g.add_bias(h, bn)?;
            x = g.relu(h);
        }
        let (pw, pb) = self.policy_head;
        let pwn = g.param(&self.store, pw);
        let pbn = g.param(&self.store, pb);
        let logits = g.matmul(x, pwn)?;
        let logits = g.add_bias(logits, pbn)?;
        let probs = g.softmax_lastdim(logits)?;
        let log_probs = g.log_softmax_lastdim(logits)?;

        let (vw, vb) = self.value_head;
        let vwn = g.param(&self.store, vw);
        let vbn = g.param(&self.store, vb);
        let v = g.matmul(x, vwn)?;
        let v = g.add_bias(v, vbn)?;
        let values = g.reshape(v, vec![t])?;
        Ok(AgentGraphNodes {
            probs,
            log_probs,
            values,
        })
    }

    /// Policy and value pass plus per-token action sampling.
    pub fn act(&self, states: &[Vec<f64>], rng: &mut ChaCha20Rng) -> Result<ActOutput, AgentError> {
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, states)?;
        let (dist, values, entropies) = read_outputs(&g, &nodes, states.len());
        let mut actions = Vec::with_capacity(states.len());
        let mut log_probs = Vec::with_capacity(states.len());
        let lp = g.data(nodes.log_probs);
        for t in 0..states.len() {
            let a = if rng.random::<f64>() < dist.p_mask(t) {
                MASK_ACTION
            } else {
                ATTEND_ACTION
            };
            actions.push(a);
            log_probs.push(lp[t * 2 + a]);
        }
        Ok(ActOutput {
            distribution: dist,
            actions: MaskAction { actions },
            values,
            log_probs,
            entropies,
        })
    }

    /// Deterministic evaluation policy: most likely action per token, with
    /// the exact tie going to attend.
    pub fn act_greedy(&self, states: &[Vec<f64>]) -> Result<ActOutput, AgentError> {
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, states)?;
        let (dist, values, entropies) = read_outputs(&g, &nodes, states.len());
        let lp = g.data(nodes.log_probs);
        let mut actions = Vec::with_capacity(states.len());
        let mut log_probs = Vec::with_capacity(states.len());
        for t in 0..states.len() {
            let a = if dist.p_mask(t) > dist.p_attend(t) {
                MASK_ACTION
            } else {
                ATTEND_ACTION
            };
            actions.push(a);
            log_probs.push(lp[t * 2 + a]);
        }
        Ok(ActOutput {
            distribution: dist,
            actions: MaskAction { actions },
            values,
            log_probs,
            entropies,
        })
    }

    /// One optimizer step on the combined A2C loss. Only agent parameters
    /// move; the advantage enters the actor term as a constant.
    pub fn update(&mut self, traj: &Trajectory) -> Result<LossBreakdown, AgentError> {
        traj.check()?;
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, &traj.states)?;
        let losses = a2c_loss_nodes(
            &mut g,
            nodes.log_probs,
            nodes.probs,
            nodes.values,
            &traj.actions.actions,
            &traj.advantages,
            traj.reward,
            self.cfg.entropy_coef,
            self.cfg.value_coef,
        )?;
        let breakdown = LossBreakdown {
            total: g.scalar_value(losses.total),
            actor: g.scalar_value(losses.actor),
            critic: g.scalar_value(losses.critic),
            entropy: g.scalar_value(losses.entropy),
        };
        g.backward(losses.total)?;
        g.flush_grads(&mut self.store);
        self.adam.step(&mut self.store)?;
        self.store.zero_grads();
        Ok(breakdown)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    // ── Checkpointing ───────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let ferr = |e: io::Error| AgentError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = io::BufWriter::new(fs::File::create(path).map_err(ferr)?);
        let hidden = self
            .cfg
            .hidden_sizes
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        write!(
            f,
            "state_dim={}\nhidden={}\nentropy_coef={}\nlearning_rate={}\nvalue_coef={}\nbaseline={}\n[params]\n",
            self.cfg.state_dim,
            hidden,
            self.cfg.entropy_coef,
            self.cfg.learning_rate,
            self.cfg.value_coef,
            self.cfg.baseline
        )
        .map_err(ferr)?;
        write_store(&mut f, &self.store).map_err(ferr)?;
        f.flush().map_err(ferr)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let cerr = |message: String| AgentError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let f = fs::File::open(path).map_err(|e| cerr(e.to_string()))?;
        let mut r = BufReader::new(f);
        let mut cfg = AgentConfig::default();
        loop {
            let mut line = Vec::new();
            r.read_until(b'\n', &mut line)
                .map_err(|e| cerr(e.to_string()))?;
            let text = String::from_utf8(line).map_err(|e| cerr(e.to_string()))?;
            let text = text.trim_end_matches('\n');
            if text == "[params]" {
                break;
            }
            let (key, value) = text
                .split_once('=')
                .ok_or_else(|| cerr(format!("bad header line: {text}")))?;
            match key {
                "state_dim" => {
                    cfg.state_dim = value.parse().map_err(|e| cerr(format!("state_dim: {e}")))?
                }
                "hidden" => {
                    cfg.hidden_sizes = value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| cerr(format!("hidden: {e}")))?
                }
                "entropy_coef" => {
                    cfg.entropy_coef = value
                        .parse()
                        .map_err(|e| cerr(format!("entropy_coef: {e}")))?
                }
                "learning_rate" => {
                    cfg.learning_rate = value
                        .parse()
                        .map_err(|e| cerr(format!("learning_rate: {e}")))?
                }
                "value_coef" => {
                    cfg.value_coef = value
                        .parse()
                        .map_err(|e| cerr(format!("value_coef: {e}")))?
                }
                "baseline" => cfg.baseline = value.parse().map_err(cerr)?,
                other => return Err(cerr(format!("unknown header key {other}"))),
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut agent = Agent::new(cfg, &mut rng)?;
        load_into_store(&mut r, &mut agent.store).map_err(|e| cerr(e.to_string()))?;
        Ok(agent)
    }
}

use rand::SeedableRng;

fn read_outputs(
    g: &Graph,
    nodes: &AgentGraphNodes,
    t: usize,
) -> (PolicyDistribution, Vec<f64>, Vec<f64>) {
    let p = g.data(nodes.probs);
    let lp = g.data(nodes.log_probs);
    let probs: Vec<(f64, f64)> = (0..t).map(|i| (p[i * 2], p[i * 2 + 1])).collect();
    let values = g.data(nodes.values).to_vec();
    let entropies: Vec<f64> = (0..t)
        .map(|i| {
            (0..2)
                .map(|a| {
                    let pa = p[i * 2 + a];
                    if pa > 0.0 {
                        pa * lp[i * 2 + a]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect();
    (PolicyDistribution { probs }, values, entropies)
}

pub struct A2cLossNodes {
    pub total: NodeId,
    pub actor: NodeId,
    pub critic: NodeId,
    pub entropy: NodeId,
}

/// A2C loss from graph nodes.
///
/// With `T` tokens, sampled actions `a_t`, and constant advantages `A_t`:
/// the actor term is `-(1/2T) sum_t log pi(a_t|s_t) A_t`, the critic term is
/// the squared regression `(1/2T) sum_t (R - V_t)^2`, and the entropy term is
/// `(1/2T) sum_t sum_i P_t(i) log P_t(i)` (negated entropy, so minimizing it
/// spreads the policy). Total = actor + value_coef * critic + beta * entropy.
#[allow(clippy::too_many_arguments)]
pub fn a2c_loss_nodes(
    g: &mut Graph,
    log_probs: NodeId,
    probs: NodeId,
    values: NodeId,
    actions: &[usize],
    advantages: &[f64],
    reward: f64,
    beta: f64,
    value_coef: f64,
) -> Result<A2cLossNodes, AgentError> {
    let t = actions.len();
    if t == 0 {
        return Err(AgentError::EmptyTrajectory);
    }
    if advantages.len() != t {
        return Err(AgentError::LengthMismatch);
    }
    let half_t = 1.0 / (2.0 * t as f64);

    let picked = g.take_per_row(log_probs, actions)?;
    let adv = g.constant(Tensor::vector(advantages));
    let weighted = g.mul(picked, adv)?;
    let actor_sum = g.sum_all(weighted);
    let actor = g.scale(actor_sum, -half_t);

    let r = g.constant(Tensor::vector(&vec![reward; t]));
    let diff = g.sub(r, values)?;
    let sq = g.mul(diff, diff)?;
    let critic_sum = g.sum_all(sq);
    let critic = g.scale(critic_sum, half_t);

    let plogp = g.mul(probs, log_probs)?;
    let ent_sum = g.sum_all(plogp);
    let entropy = g.scale(ent_sum, half_t);

    let scaled_critic = g.scale(critic, value_coef);
    let scaled_entropy = g.scale(entropy, beta);
    let partial = g.add(actor, scaled_critic)?;
    let total = g.add(partial, scaled_entropy)?;
    Ok(A2cLossNodes {
        total,
        actor,
        critic,
        entropy,
    })
}

/// Synthetic salience environment for convergence checks: per-episode reward
/// is the fraction of salient tokens attended minus the fraction of noise
/// tokens attended, so the optimum is exactly 1.
pub mod bandit {
    use super::*;

    pub struct SalienceBandit {
        /// Fixed pool of (id, states, salient flags) episodes.
        pub examples: Vec<(String, Vec<Vec<f64>>, Vec<bool>)>,
    }

    impl SalienceBandit {
        /// `num_examples` episodes of `tokens_per_episode` tokens each, half
        /// salient. States encode saliency linearly in the first two
        /// coordinates plus a small deterministic jitter elsewhere.
        pub fn new(
            num_examples: usize,
            tokens_per_episode: usize,
            state_dim: usize,
            rng: &mut ChaCha20Rng,
        ) -> Self {
            let mut examples = Vec::with_capacity(num_examples);
            for e in 0..num_examples {
                let mut states = Vec::with_capacity(tokens_per_episode);
                let mut salient = Vec::with_capacity(tokens_per_episode);
                for t in 0..tokens_per_episode {
                    let is_salient = t % 2 == 0;
                    let mut row = vec![0.0; state_dim];
                    row[0] = if is_salient { 1.0 } else { 0.0 };
                    if state_dim > 1 {
                        row[1] = if is_salient { 0.0 } else { 1.0 };
                    }
                    for slot in row.iter_mut().skip(2) {
                        *slot = rng.random_range(-0.1..0.1);
                    }
                    states.push(row);
                    salient.push(is_salient);
                }
                examples.push((format!("bandit{e}"), states, salient));
            }
            SalienceBandit { examples }
        }

        pub fn reward(&self, example: usize, actions: &MaskAction) -> f64 {
            let salient = &self.examples[example].2;
            let mut s_total = 0.0;
            let mut s_attended = 0.0;
            let mut n_total = 0.0;
            let mut n_attended = 0.0;
            for (a, &is_salient) in actions.actions.iter().zip(salient) {
                if is_salient {
                    s_total += 1.0;
                    if *a == ATTEND_ACTION {
                        s_attended += 1.0;
                    }
                } else {
                    n_total += 1.0;
                    if *a == ATTEND_ACTION {
                        n_attended += 1.0;
                    }
                }
            }
            let s_frac = if s_total > 0.0 { s_attended / s_total } else { 0.0 };
            let n_frac = if n_total > 0.0 { n_attended / n_total } else { 0.0 };
            s_frac - n_frac
        }
    }

    /// Runs the agent on the bandit for `episodes`, returning the highest
    /// trailing-`window` mean reward reached.
    pub fn run_to_convergence(
        agent: &mut Agent,
        env: &SalienceBandit,
        episodes: usize,
        window: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<f64, AgentError> {
        let mut cache = BaselineCache::new();
        let mut rewards = Vec::with_capacity(episodes);
        let mut best = f64::NEG_INFINITY;
        for ep in 0..episodes {
            let idx = ep % env.examples.len();
            let (id, states, _) = &env.examples[idx];
            let out = agent.act(states, rng)?;
            let reward = env.reward(idx, &out.actions);
            let baseline = cache.baseline(id, &out.values, agent.cfg.baseline);
            let adv = advantages(reward, &baseline);
            let traj = Trajectory {
                states: states.clone(),
                actions: out.actions,
                log_probs: out.log_probs,
                values: out.values.clone(),
                baseline,
                reward,
                advantages: adv,
                entropies: out.entropies,
            };
            agent.update(&traj)?;
            cache.store(id, out.values);
            rewards.push(reward);
            if rewards.len() >= window {
                let mean: f64 =
                    rewards[rewards.len() - window..].iter().sum::<f64>() / window as f64;
                best = best.max(mean);
            }
        }
        Ok(best)
    }
}
