//! DDPG actor–critic with a ring replay buffer, Polyak targets and an
//! online elastic-weight-consolidation penalty on the actor.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CulError, Result};
use crate::neural::{soft_update, Activation, DenseNet, OptState, OuNoise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub gamma: f64,
    /// Polyak factor for the target networks.
    pub target_smoothing: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub ewc_lambda: f64,
    pub ewc_batch: usize,
    pub ewc_samples: usize,
    pub online_gamma: f64,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    /// Multiplier applied to the actor's freshly initialized output layer.
    pub actor_output_init_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden_units: 128,
            hidden_layers: 2,
            gamma: 0.99,
            target_smoothing: 1e-3,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            batch_size: 128,
            buffer_capacity: 100_000,
            ewc_lambda: 1.0,
            ewc_batch: 128,
            ewc_samples: 100_000,
            online_gamma: 0.9,
            ou_theta: 0.15,
            ou_sigma: 0.2,
            actor_output_init_scale: 1e-3,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(CulError::InvalidParams { name, reason });
        if self.hidden_units == 0 || self.hidden_layers == 0 {
            return bad("hidden layers", "need at least one non-empty hidden layer".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", format!("must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.target_smoothing > 0.0 && self.target_smoothing <= 1.0) {
            return bad("target_smoothing", format!("must lie in (0, 1], got {}", self.target_smoothing));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rate", "must be positive".into());
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch_size", "must be positive and fit in the buffer".into());
        }
        if self.ewc_batch == 0 || self.ewc_samples == 0 {
            return bad("ewc_batch", "Fisher batch and sample counts must be positive".into());
        }
        if !(self.ewc_lambda >= 0.0 && (0.0..=1.0).contains(&self.online_gamma)) {
            return bad("ewc_lambda", "need lambda ≥ 0 and online gamma in [0, 1]".into());
        }
        if !(self.ou_theta >= 0.0 && self.ou_sigma >= 0.0) {
            return bad("ou noise", "theta and sigma must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: f64,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring store; the oldest transition is overwritten first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    obs_dim: usize,
    capacity: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    r: Vec<f64>,
    s_next: Vec<f64>,
    done: Vec<bool>,
    cursor: usize,
}

/// Column-per-sample view of a mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub s: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub r: Vec<f64>,
    pub s_next: DMatrix<f64>,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn from_transitions(obs_dim: usize, ts: &[Transition]) -> Result<Self> {
        for t in ts {
            check_transition(obs_dim, t)?;
        }
        let m = ts.len();
        Ok(Batch {
            s: DMatrix::from_fn(obs_dim, m, |i, j| ts[j].s[i]),
            a: DMatrix::from_fn(1, m, |_, j| ts[j].a),
            r: ts.iter().map(|t| t.r).collect(),
            s_next: DMatrix::from_fn(obs_dim, m, |i, j| ts[j].s_next[i]),
            done: ts.iter().map(|t| t.done).collect(),
        })
    }
}

fn check_transition(obs_dim: usize, t: &Transition) -> Result<()> {
    if t.s.len() != obs_dim || t.s_next.len() != obs_dim {
        return Err(CulError::DimensionMismatch {
            context: "transition observation",
            expected: obs_dim,
            got: t.s.len().max(t.s_next.len()),
        });
    }
    let finite = t.s.iter().chain(&t.s_next).all(|v| v.is_finite()) && t.a.is_finite() && t.r.is_finite();
    if !finite {
        return Err(CulError::NonFiniteValue("transition"));
    }
    if t.a.abs() > 1.0 {
        return Err(CulError::InvalidParams {
            name: "action",
            reason: format!("normalized action {} outside [-1, 1]", t.a),
        });
    }
    Ok(())
}

impl ReplayBuffer {
    pub fn new(obs_dim: usize, capacity: usize) -> Result<Self> {
        if obs_dim == 0 || capacity == 0 {
            return Err(CulError::InvalidParams {
                name: "replay buffer",
                reason: "observation size and capacity must be positive".into(),
            });
        }
        Ok(ReplayBuffer {
            obs_dim,
            capacity,
            s: Vec::new(),
            a: Vec::new(),
            r: Vec::new(),
            s_next: Vec::new(),
            done: Vec::new(),
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        check_transition(self.obs_dim, t)?;
        let d = self.obs_dim;
        if self.len() < self.capacity {
            self.s.extend_from_slice(&t.s);
            self.s_next.extend_from_slice(&t.s_next);
            self.a.push(t.a);
            self.r.push(t.r);
            self.done.push(t.done);
        } else {
            let i = self.cursor;
            self.s[i * d..(i + 1) * d].copy_from_slice(&t.s);
            self.s_next[i * d..(i + 1) * d].copy_from_slice(&t.s_next);
            self.a[i] = t.a;
            self.r[i] = t.r;
            self.done[i] = t.done;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    fn physical(&self, i: usize) -> usize {
        if self.len() < self.capacity {
            i
        } else {
            (self.cursor + i) % self.capacity
        }
    }

    /// Transition `i` counted from the oldest one still stored.
    pub fn get(&self, i: usize) -> Option<Transition> {
        (i < self.len()).then(|| self.slot(self.physical(i)))
    }

    fn slot(&self, p: usize) -> Transition {
        let d = self.obs_dim;
        Transition {
            s: self.s[p * d..(p + 1) * d].to_vec(),
            a: self.a[p],
            r: self.r[p],
            s_next: self.s_next[p * d..(p + 1) * d].to_vec(),
            done: self.done[p],
        }
    }

    fn gather(&self, slots: &[usize]) -> Batch {
        let d = self.obs_dim;
        Batch {
            s: DMatrix::from_fn(d, slots.len(), |i, j| self.s[slots[j] * d + i]),
            a: DMatrix::from_fn(1, slots.len(), |_, j| self.a[slots[j]]),
            r: slots.iter().map(|&p| self.r[p]).collect(),
            s_next: DMatrix::from_fn(d, slots.len(), |i, j| self.s_next[slots[j] * d + i]),
            done: slots.iter().map(|&p| self.done[p]).collect(),
        }
    }

    /// Uniform mini-batch without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Batch> {
        if self.len() < m || m == 0 {
            return Err(CulError::BufferUnderfull { have: self.len(), need: m.max(1) });
        }
        let slots = index::sample(rng, self.len(), m).into_vec();
        Ok(self.gather(&slots))
    }

    /// States of the given storage slots as columns.
    fn states(&self, slots: &[usize]) -> DMatrix<f64> {
        let d = self.obs_dim;
        DMatrix::from_fn(d, slots.len(), |i, j| self.s[slots[j] * d + i])
    }
}

/// Anchor parameters and decayed diagonal Fisher of all consolidated tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherSnapshot {
    pub anchor: Vec<f64>,
    pub fisher: Vec<f64>,
    pub tasks: usize,
}

/// `F* ← γ·F*_prev + F_t`, `θ* ← θ_now`.
pub fn consolidate_task(
    prev: Option<&FisherSnapshot>,
    theta_now: &[f64],
    fisher_task: &[f64],
    online_gamma: f64,
) -> Result<FisherSnapshot> {
    if theta_now.len() != fisher_task.len() {
        return Err(CulError::DimensionMismatch {
            context: "consolidation Fisher",
            expected: theta_now.len(),
            got: fisher_task.len(),
        });
    }
    if fisher_task.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(CulError::NonFiniteValue("task Fisher"));
    }
    let (fisher, tasks) = match prev {
        Some(p) => {
            if p.fisher.len() != fisher_task.len() {
                return Err(CulError::DimensionMismatch {
                    context: "previous Fisher",
                    expected: fisher_task.len(),
                    got: p.fisher.len(),
                });
            }
            let f = p.fisher.iter().zip(fisher_task).map(|(a, b)| online_gamma * a + b).collect();
            (f, p.tasks + 1)
        }
        None => (fisher_task.to_vec(), 1),
    };
    Ok(FisherSnapshot {
        anchor: theta_now.to_vec(),
        fisher,
        tasks,
    })
}

/// `(λ/2)·γ·Σ F*_j (θ_j − θ*_j)²`.
pub fn ewc_penalty(theta: &[f64], snap: &FisherSnapshot, lambda: f64, online_gamma: f64) -> f64 {
    let s: f64 = theta
        .iter()
        .zip(&snap.anchor)
        .zip(&snap.fisher)
        .map(|((t, a), f)| f * (t - a) * (t - a))
        .sum();
    0.5 * lambda * online_gamma * s
}

/// Mean squared per-sample gradient of the actor output over the columns of
/// `states`, processed `n_batch` at a time.
pub fn fisher_diagonal(actor: &DenseNet, states: &DMatrix<f64>, n_batch: usize) -> Result<Vec<f64>> {
    let n = states.ncols();
    if n == 0 {
        return Err(CulError::BufferUnderfull { have: 0, need: 1 });
    }
    let mut acc = vec![0.0; actor.params().len()];
    let mut start = 0;
    while start < n {
        let m = n_batch.max(1).min(n - start);
        let chunk = states.columns(start, m).into_owned();
        let (_, cache) = actor.forward_batch(&chunk)?;
        let sq = actor.squared_grad_sum(&cache, &DMatrix::from_element(actor.output_dim(), m, 1.0))?;
        acc.iter_mut().zip(sq).for_each(|(a, s)| *a += s);
        start += m;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// Deterministic actor, safe to share across evaluation threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    actor: DenseNet,
}

impl Policy {
    pub fn new(actor: DenseNet) -> Self {
        Policy { actor }
    }

    pub fn actor(&self) -> &DenseNet {
        &self.actor
    }

    pub fn action(&self, obs: &[f64]) -> Result<f64> {
        Self::action_of(&self.actor, obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub actor_target: DenseNet,
    pub critic_target: DenseNet,
    pub actor_opt: OptState,
    pub critic_opt: OptState,
    pub noise: OuNoise,
}

fn concat_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, cfg: AgentConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let hidden = vec![cfg.hidden_units; cfg.hidden_layers];
        let actor_sizes: Vec<usize> = std::iter::once(obs_dim).chain(hidden.iter().copied()).chain([1]).collect();
        let critic_sizes: Vec<usize> = std::iter::once(obs_dim + 1).chain(hidden).chain([1]).collect();
        let mut actor = DenseNet::new(&actor_sizes, Activation::Relu, Activation::Tanh, rng)?;
        let last = actor.num_layers() - 1;
        actor.scale_layer(last, cfg.actor_output_init_scale);
        let critic = DenseNet::new(&critic_sizes, Activation::Relu, Activation::Linear, rng)?;
        Ok(Agent {
            actor_opt: OptState::new(actor.params().len(), cfg.actor_lr),
            critic_opt: OptState::new(critic.params().len(), cfg.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            noise: OuNoise {
                theta: cfg.ou_theta,
                sigma: cfg.ou_sigma,
                ..OuNoise::default()
            },
            cfg,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn policy(&self) -> Policy {
        Policy::new(self.actor.clone())
    }

    /// Normalized action; with `explore` the OU sample is added and the sum
    /// clamped to `[−1, 1]`.
    pub fn act<R: Rng + ?Sized>(&mut self, obs: &[f64], explore: bool, rng: &mut R) -> Result<f64> {
        let a = Policy::action_of(&self.actor, obs)?;
        if explore {
            Ok((a + self.noise.sample(rng)).clamp(-1.0, 1.0))
        } else {
            Ok(a)
        }
    }

    pub fn td_targets(&self, batch: &Batch) -> Result<Vec<f64>> {
        let a_next = self.actor_target.predict_batch(&batch.s_next)?;
        let q_next = self.critic_target.predict_batch(&concat_rows(&batch.s_next, &a_next))?;
        Ok((0..batch.len())
            .map(|j| {
                let cont = if batch.done[j] { 0.0 } else { 1.0 };
                batch.r[j] + self.cfg.gamma * cont * q_next[(0, j)]
            })
            .collect())
    }

    /// Mean squared TD error and its gradient with respect to the critic.
    pub fn critic_loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let y = self.td_targets(batch)?;
        let (q, cache) = self.critic.forward_batch(&concat_rows(&batch.s, &batch.a))?;
        let m = batch.len() as f64;
        let diff: Vec<f64> = (0..batch.len()).map(|j| q[(0, j)] - y[j]).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / m;
        let upstream = DMatrix::from_fn(1, batch.len(), |_, j| 2.0 * diff[j] / m);
        let (grad, _) = self.critic.backward_batch(&cache, &upstream)?;
        Ok((loss, grad))
    }

    /// `−mean Q(s, μ(s))` plus the consolidation penalty, with its gradient
    /// with respect to the actor parameters.
    pub fn actor_objective_and_grad(&self, batch: &Batch, ewc: Option<&FisherSnapshot>) -> Result<(f64, Vec<f64>)> {
        let m = batch.len();
        let (a, actor_cache) = self.actor.forward_batch(&batch.s)?;
        let (q, critic_cache) = self.critic.forward_batch(&concat_rows(&batch.s, &a))?;
        let mut objective = -q.sum() / m as f64;
        let upstream = DMatrix::from_element(1, m, -1.0 / m as f64);
        let (_, d_input) = self.critic.backward_batch(&critic_cache, &upstream)?;
        let d_action = d_input.rows(self.obs_dim(), 1).into_owned();
        let (mut grad, _) = self.actor.backward_batch(&actor_cache, &d_action)?;
        if let Some(snap) = ewc {
            if snap.anchor.len() != grad.len() {
                return Err(CulError::DimensionMismatch {
                    context: "consolidation anchor",
                    expected: grad.len(),
                    got: snap.anchor.len(),
                });
            }
            let (lambda, g) = (self.cfg.ewc_lambda, self.cfg.online_gamma);
            objective += ewc_penalty(self.actor.params(), snap, lambda, g);
            for (((gr, t), a), f) in grad.iter_mut().zip(self.actor.params()).zip(&snap.anchor).zip(&snap.fisher) {
                *gr += lambda * g * f * (t - a);
            }
        }
        Ok((objective, grad))
    }

    /// One optimizer step on the critic; returns the pre-step loss.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64> {
        let (loss, grad) = self.critic_loss_and_grad(batch)?;
        self.critic_opt.step(self.critic.params_mut(), &grad)?;
        Ok(loss)
    }

    /// One optimizer step on the actor with the critic frozen, followed by
    /// the soft update of both targets; returns the pre-step objective.
    pub fn actor_update(&mut self, batch: &Batch, ewc: Option<&FisherSnapshot>) -> Result<f64> {
        let (objective, grad) = self.actor_objective_and_grad(batch, ewc)?;
        self.actor_opt.step(self.actor.params_mut(), &grad)?;
        self.update_targets()?;
        Ok(objective)
    }

    pub fn update_targets(&mut self) -> Result<()> {
        let eta = self.cfg.target_smoothing;
        soft_update(self.actor_target.params_mut(), self.actor.params(), eta)?;
        soft_update(self.critic_target.params_mut(), self.critic.params(), eta)
    }

    /// Diagonal Fisher of the actor over at most `n_samples` buffer states.
    pub fn compute_fisher<R: Rng + ?Sized>(
        &self,
        buffer: &ReplayBuffer,
        n_batch: usize,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if buffer.is_empty() {
            return Err(CulError::BufferUnderfull { have: 0, need: 1 });
        }
        let n = n_samples.min(buffer.len());
        let slots: Vec<usize> = if n == buffer.len() {
            (0..n).collect()
        } else {
            index::sample(rng, buffer.len(), n).into_vec()
        };
        fisher_diagonal(&self.actor, &buffer.states(&slots), n_batch)
    }
}

impl Policy {
    fn action_of(actor: &DenseNet, obs: &[f64]) -> Result<f64> {
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(CulError::NonFiniteValue("observation"));
        }
        let x = DMatrix::from_column_slice(obs.len(), 1, obs);
        Ok(actor.predict_batch(&x)?[(0, 0)])
    }
}
