//! Entropy-regularized on-policy actor-critic.
//!
//! Every update plays `T` steps on `batch_size` environment lanes while
//! recording the forward passes on one tape, then takes one Adam step for the
//! actor, one for the critic and one for the temperature. The per-step
//! training reward is the scaled environment reward plus `alpha` times the
//! joint entropy of the three sub-action distributions; `alpha` is frozen for
//! the window. Advantages come from GAE with a critic bootstrap at the window
//! boundary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{global_norm, Mat, ParamStore, Tape, Var};
use crate::dataset::{generate_dataset, generate_instance, Distribution, InstanceSpec, DEFAULT_BIN_SIDE};
use crate::env::{Mode, PackAction, PackingEnv};
use crate::error::{Error, Result};
use crate::geometry::{BinSpec, BoxDims, Dim};
use crate::model::{
    load_checkpoint, run_episode, save_checkpoint, CheckpointMeta, Choice, LaneCache, Model, ModelConfig, Norm,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub clip_norm: f64,
    pub target_entropy: f64,
    pub gae_lambda: f64,
    pub rollout_window: usize,
    pub train_steps: usize,
    pub instance_size: usize,
    pub distribution: Distribution,
    pub mode: Mode,
    pub bin_side: f64,
    pub initial_alpha: f64,
    /// Multiplier of the environment reward. `None` maps the bin to
    /// `[-1, 1]` on every axis: `8 / (W * L * W)`.
    pub reward_scale: Option<f64>,
    /// Train on this one instance in every lane instead of fresh random ones.
    pub fixed_instance: Option<Vec<[f64; 3]>>,
    pub eval_every: usize,
    pub eval_instances: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            gamma: 0.96,
            clip_norm: 5.0,
            target_entropy: 0.6,
            gae_lambda: 0.95,
            rollout_window: 20,
            train_steps: 10_000,
            instance_size: 200,
            distribution: Distribution::Hard,
            mode: Mode::Offline,
            bin_side: DEFAULT_BIN_SIDE,
            initial_alpha: 0.01,
            reward_scale: None,
            fixed_instance: None,
            eval_every: 100,
            eval_instances: 16,
            checkpoint_every: 500,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must lie in [0, 1]".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.learning_rate >= 0.0) || !(self.initial_alpha > 0.0) {
            return Err(Error::Config("clip_norm and initial_alpha must be positive, learning_rate non-negative".into()));
        }
        if self.batch_size == 0 || self.rollout_window == 0 || self.instance_size == 0 {
            return Err(Error::Config("batch_size, rollout_window and instance_size must be positive".into()));
        }
        if self.fixed_instance.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::Config("fixed_instance has no boxes".into()));
        }
        Ok(())
    }

    pub fn bin(&self) -> Result<BinSpec> {
        let bin = match self.model.dimension()? {
            Dim::Three => BinSpec::cube(self.bin_side, self.model.n_s),
            Dim::Two => BinSpec::strip(self.bin_side, self.model.n_s),
        };
        bin.validate()?;
        Ok(bin)
    }

    pub fn reward_scale(&self) -> f64 {
        self.reward_scale.unwrap_or(8.0 / (self.bin_side * self.bin_side * self.bin_side))
    }

    /// SHA-256 of the configuration with `train_steps` left out, so a run
    /// can be extended and still resume.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("train_steps");
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn fixed_boxes(&self) -> Option<Vec<BoxDims>> {
        self.fixed_instance.as_ref().map(|rows| rows.iter().map(|r| BoxDims::new(r[0], r[1], r[2])).collect())
    }
}

/// GAE over one lane's window. `dones[t]` marks an episode that ended with
/// step `t`; `bootstrap` is the critic value after the last step (ignored if
/// it ended an episode). Returns advantages and value targets
/// `advantage + value`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(rewards.len() == values.len() && values.len() == dones.len());
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// One sample of the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm {
    pub log_prob: Var,
    pub value: Var,
    pub advantage: f64,
    pub target: f64,
    /// The `log pi` entering the temperature loss, held constant. Training
    /// passes minus the analytic joint entropy.
    pub log_pi: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub actor: Var,
    pub critic: Var,
    pub temperature: Var,
    pub total: Var,
}

/// `L_theta = -mean(A * log pi)`, `L_phi = mean((V - target)^2)` and
/// `L_alpha = -mean(alpha * (log pi + target_entropy))`, with advantages,
/// targets and `log pi` in the last one as constants.
pub fn compute_losses(tape: &mut Tape, terms: &[LossTerm], log_alpha: Var, target_entropy: f64) -> Losses {
    let n = terms.len() as f64;
    let adv = tape.constant(Array2::from_shape_fn((1, terms.len()), |(_, i)| -terms[i].advantage / n));
    let lps: Vec<Var> = terms.iter().map(|t| t.log_prob).collect();
    let lp_col = tape.concat_rows(&lps);
    let actor = tape.matmul(adv, lp_col);

    let vs: Vec<Var> = terms.iter().map(|t| t.value).collect();
    let v_col = tape.concat_rows(&vs);
    let targets = tape.constant(Array2::from_shape_fn((terms.len(), 1), |(i, _)| terms[i].target));
    let diff = tape.sub(v_col, targets);
    let sq = tape.mul(diff, diff);
    let critic = tape.mean(sq);

    let mean_term: f64 = terms.iter().map(|t| t.log_pi + target_entropy).sum::<f64>() / n;
    let alpha = tape.exp(log_alpha);
    let temperature = tape.scale(alpha, -mean_term);

    let ac = tape.add(actor, critic);
    let total = tape.add(ac, temperature);
    Losses { actor, critic, temperature, total }
}

/// Adam over a fixed set of parameter ids.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    ids: Vec<usize>,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore, ids: impl IntoIterator<Item = usize>, lr: f64) -> Self {
        let ids: Vec<usize> = ids.into_iter().collect();
        let zeros = |i: &usize| Array2::zeros(params.get(*i).raw_dim());
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: ids.iter().map(zeros).collect(), v: ids.iter().map(zeros).collect(), ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Scale this group's gradients to at most `max_norm`; returns the norm
    /// before and after.
    pub fn clip(&self, grads: &mut [Option<Mat>], max_norm: f64) -> (f64, f64) {
        let norm = global_norm(self.ids.iter().map(|&i| &grads[i]));
        if norm > max_norm {
            let s = max_norm / norm;
            for &i in &self.ids {
                if let Some(g) = &mut grads[i] {
                    *g *= s;
                }
            }
            return (norm, max_norm);
        }
        (norm, norm)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = &grads[id] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            if self.lr == 0.0 {
                continue;
            }
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
    }

    fn state_tensors(&self, group: &str, params: &ParamStore) -> Vec<(String, Mat)> {
        let mut out = vec![(format!("adam.{group}.t"), Array2::from_elem((1, 1), self.t as f64))];
        for (k, &id) in self.ids.iter().enumerate() {
            out.push((format!("adam.{group}.m.{}", params.name(id)), self.m[k].clone()));
            out.push((format!("adam.{group}.v.{}", params.name(id)), self.v[k].clone()));
        }
        out
    }

    fn restore(&mut self, group: &str, params: &ParamStore, extra: &[(String, Mat)]) -> Result<()> {
        let find = |name: String| {
            extra.iter().find(|(n, _)| *n == name).map(|(_, t)| t.clone()).ok_or_else(|| Error::Checkpoint(format!("missing {name}")))
        };
        self.t = find(format!("adam.{group}.t"))?[[0, 0]] as u64;
        for (k, &id) in self.ids.iter().enumerate() {
            self.m[k] = find(format!("adam.{group}.m.{}", params.name(id)))?;
            self.v[k] = find(format!("adam.{group}.v.{}", params.name(id)))?;
        }
        Ok(())
    }
}

/// Per-update diagnostics, one metrics line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_theta: f64,
    pub loss_phi: f64,
    pub loss_alpha: f64,
    pub alpha: f64,
    pub entropy: f64,
    /// Mean gap ratio of the episodes finished during this update.
    pub gap_ratio: Option<f64>,
    /// Gradient norms before clipping: actor, critic, temperature.
    pub grad_norms: [f64; 3],
    /// Gradient norms after clipping.
    pub clipped_norms: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_gap_ratio: Option<f64>,
}

/// One update's experience, indexed `[lane][step]`. Built fresh for every
/// update and dropped after it, so no sample outlives the parameters that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    /// Optimizer steps taken before collection started.
    pub policy_version: usize,
    /// Temperature used for every step of the window.
    pub alpha: f64,
    pub reward_scale: f64,
    pub actions: Vec<Vec<PackAction>>,
    pub log_probs: Vec<Vec<f64>>,
    /// Joint analytic entropy of the three sub-action distributions.
    pub entropies: Vec<Vec<f64>>,
    pub env_rewards: Vec<Vec<f64>>,
    /// Training rewards: scaled environment reward plus `alpha` times the
    /// entropy.
    pub rewards: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub dones: Vec<Vec<bool>>,
    pub advantages: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl RolloutBuffer {
    fn new(policy_version: usize, alpha: f64, reward_scale: f64, lanes: usize, t_len: usize) -> Self {
        fn v<T: Clone>(lanes: usize, t_len: usize) -> Vec<Vec<T>> {
            vec![Vec::with_capacity(t_len); lanes]
        }
        RolloutBuffer {
            policy_version,
            alpha,
            reward_scale,
            actions: v(lanes, t_len),
            log_probs: v(lanes, t_len),
            entropies: v(lanes, t_len),
            env_rewards: v(lanes, t_len),
            rewards: v(lanes, t_len),
            values: v(lanes, t_len),
            dones: v(lanes, t_len),
            advantages: Vec::with_capacity(lanes),
            targets: Vec::with_capacity(lanes),
        }
    }
}

struct Lane {
    env: PackingEnv,
    cache: LaneCache,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub step: usize,
    optimizers: [Adam; 3],
    lanes: Vec<Lane>,
    rng: ChaCha8Rng,
    bin: BinSpec,
    last_rollout: Option<RolloutBuffer>,
}

const GROUPS: [&str; 3] = ["actor", "critic", "alpha"];

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(config.model.clone())?;
        *model.params.get_mut(model.groups.log_alpha) = Array2::from_elem((1, 1), config.initial_alpha.ln());
        Trainer::with_model(config, model, 0)
    }

    fn with_model(config: TrainConfig, model: Model, step: usize) -> Result<Self> {
        let bin = config.bin()?;
        let lr = config.learning_rate;
        let g = model.groups.clone();
        let optimizers = [
            Adam::new(&model.params, g.actor.clone(), lr),
            Adam::new(&model.params, g.critic.clone(), lr),
            Adam::new(&model.params, [g.log_alpha], lr),
        ];
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(step as u64));
        let mut t = Trainer { config, model, step, optimizers, lanes: Vec::new(), rng, bin, last_rollout: None };
        t.lanes = (0..t.config.batch_size).map(|_| t.fresh_lane()).collect::<Result<_>>()?;
        Ok(t)
    }

    fn fresh_lane(&mut self) -> Result<Lane> {
        let boxes = match self.config.fixed_boxes() {
            Some(b) => b,
            None => {
                let spec = InstanceSpec {
                    n_boxes: self.config.instance_size,
                    distribution: self.config.distribution,
                    bin: self.bin,
                    seed: self.rng.gen(),
                };
                generate_instance(&spec)?.boxes
            }
        };
        let env = PackingEnv::reset(&boxes, self.model.config.env_config(self.bin, self.config.mode)?)?;
        Ok(Lane { env, cache: self.model.new_cache() })
    }

    /// One update: a `T`-step rollout on every lane, then one optimizer step
    /// per parameter group.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let cfg = self.config.clone();
        let t_len = cfg.rollout_window;
        let lanes = self.lanes.len();
        let alpha = self.model.alpha();
        let scale = cfg.reward_scale();
        let mut tape = Tape::new();
        let mut bn_updates = Vec::new();

        let mut buf = RolloutBuffer::new(self.step, alpha, scale, lanes, t_len);
        let mut lp_vars = vec![Vec::with_capacity(t_len); lanes];
        let mut value_vars = vec![Vec::with_capacity(t_len); lanes];
        let mut finished = Vec::new();

        for _ in 0..t_len {
            for i in 0..lanes {
                if self.lanes[i].env.is_done() {
                    self.lanes[i] = self.fresh_lane()?;
                }
            }
            let envs: Vec<&PackingEnv> = self.lanes.iter().map(|l| &l.env).collect();
            let actor_caches: Vec<_> = self.lanes.iter().map(|l| &l.cache.actor).collect();
            let critic_caches: Vec<_> = self.lanes.iter().map(|l| &l.cache.critic).collect();
            let (step, upd) =
                self.model.policy_step(&mut tape, &envs, &actor_caches, Choice::Sample(&mut self.rng), Norm::Batch { update: true })?;
            bn_updates.extend(upd);
            let (vals, critic_updates, upd) = self.model.critic_values(&mut tape, &envs, &critic_caches, Norm::Batch { update: true });
            bn_updates.extend(upd);

            for (i, lane) in self.lanes.iter_mut().enumerate() {
                if let Some(u) = step.cache_updates[i].clone() {
                    lane.cache.actor.push(u);
                }
                if let Some(u) = critic_updates[i].clone() {
                    lane.cache.critic.push(u);
                }
                let o = &step.outputs[i];
                let out = lane.env.step(&o.action)?;
                buf.actions[i].push(o.action);
                buf.log_probs[i].push(o.log_prob);
                buf.entropies[i].push(o.entropy);
                buf.env_rewards[i].push(out.reward);
                buf.rewards[i].push(out.reward * scale + alpha * o.entropy);
                buf.values[i].push(tape.scalar(vals[i]));
                buf.dones[i].push(out.done);
                lp_vars[i].push(step.vars[i].log_prob);
                value_vars[i].push(vals[i]);
                if out.done {
                    finished.push(lane.env.gap_ratio()?);
                }
            }
        }

        // critic bootstrap after the window, outside the gradient
        let bootstrap: Vec<f64> = {
            let mut t2 = Tape::new();
            let envs: Vec<&PackingEnv> = self.lanes.iter().map(|l| &l.env).collect();
            let caches: Vec<_> = self.lanes.iter().map(|l| &l.cache.critic).collect();
            let (vals, _, _) = self.model.critic_values(&mut t2, &envs, &caches, Norm::Batch { update: false });
            vals.iter().zip(&envs).map(|(v, e)| if e.is_done() { 0.0 } else { t2.scalar(*v) }).collect()
        };

        let mut terms = Vec::with_capacity(lanes * t_len);
        for i in 0..lanes {
            let (adv, targets) = gae_advantages(&buf.rewards[i], &buf.values[i], &buf.dones[i], bootstrap[i], cfg.gamma, cfg.gae_lambda);
            for t in 0..t_len {
                terms.push(LossTerm {
                    log_prob: lp_vars[i][t],
                    value: value_vars[i][t],
                    advantage: adv[t],
                    target: targets[t],
                    log_pi: -buf.entropies[i][t],
                });
            }
            buf.advantages.push(adv);
            buf.targets.push(targets);
        }
        let log_alpha = tape.param(&self.model.params, self.model.groups.log_alpha);
        let losses = compute_losses(&mut tape, &terms, log_alpha, cfg.target_entropy);
        let (lt, lp, la) = (tape.scalar(losses.actor), tape.scalar(losses.critic), tape.scalar(losses.temperature));
        for (name, v) in [("actor loss", lt), ("critic loss", lp), ("temperature loss", la)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} at step {}", self.step)));
            }
        }
        let mut grads = tape.backward(losses.total, self.model.params.len());
        let mut grad_norms = [0.0; 3];
        let mut clipped_norms = [0.0; 3];
        for (k, opt) in self.optimizers.iter_mut().enumerate() {
            let (before, after) = opt.clip(&mut grads, cfg.clip_norm);
            if !before.is_finite() {
                return Err(Error::NonFinite(format!("{} gradient at step {}", GROUPS[k], self.step)));
            }
            grad_norms[k] = before;
            clipped_norms[k] = after;
            opt.step(&mut self.model.params, &grads);
        }
        self.model.apply_bn_updates(bn_updates);
        self.step += 1;

        let n_samples = (lanes * t_len) as f64;
        let mean_entropy = buf.entropies.iter().flatten().sum::<f64>() / n_samples;
        self.last_rollout = Some(buf);
        Ok(StepMetrics {
            step: self.step,
            loss_theta: lt,
            loss_phi: lp,
            loss_alpha: la,
            alpha,
            entropy: mean_entropy,
            gap_ratio: (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64),
            grad_norms,
            clipped_norms,
            eval_gap_ratio: None,
        })
    }

    /// Experience of the most recent update.
    pub fn last_rollout(&self) -> Option<&RolloutBuffer> {
        self.last_rollout.as_ref()
    }

    /// Instances used for periodic greedy evaluation.
    pub fn eval_set(&self) -> Result<Vec<Vec<BoxDims>>> {
        if let Some(b) = self.config.fixed_boxes() {
            return Ok(vec![b]);
        }
        let insts = generate_dataset(
            self.config.eval_instances.max(1),
            self.config.instance_size,
            self.config.distribution,
            self.bin,
            self.config.seed ^ 0x5eed_e7a1,
        )?;
        Ok(insts.into_iter().map(|i| i.boxes).collect())
    }

    /// Mean greedy gap ratio over `instances`.
    pub fn evaluate(&self, instances: &[Vec<BoxDims>]) -> Result<f64> {
        let mut total = 0.0;
        for boxes in instances {
            let (_, env) = run_episode(&self.model, boxes, self.bin, self.config.mode, Choice::Greedy)?;
            total += env.gap_ratio()?;
        }
        Ok(total / instances.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta { model: self.model.config.clone(), step: self.step as u64, config_hash: self.config.hash() };
        let mut extra = Vec::new();
        for (k, opt) in self.optimizers.iter().enumerate() {
            extra.extend(opt.state_tensors(GROUPS[k], &self.model.params));
        }
        save_checkpoint(path, &self.model, &meta, &extra)?;
        Ok(())
    }

    /// Continue from a checkpoint written by [`Trainer::save`] with the same
    /// configuration hash.
    pub fn resume(config: TrainConfig, path: &Path) -> Result<Self> {
        config.validate()?;
        let ck = load_checkpoint(path)?;
        if ck.meta.config_hash != config.hash() {
            return Err(Error::Config(format!(
                "checkpoint config hash {} differs from the run's {}",
                ck.meta.config_hash,
                config.hash()
            )));
        }
        let mut t = Trainer::with_model(config, ck.model, ck.meta.step as usize)?;
        for (k, opt) in t.optimizers.iter_mut().enumerate() {
            opt.restore(GROUPS[k], &t.model.params, &ck.extra)?;
        }
        Ok(t)
    }
}

/// Files of a training run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step_{step:06}.ckpt"))
    }

    /// Newest checkpoint by step number.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(None);
        }
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_"))
                .and_then(|n| n.strip_suffix(".ckpt"))
                .and_then(|n| n.parse::<usize>().ok());
            if let Some(s) = step {
                if best.as_ref().map_or(true, |(b, _)| s > *b) {
                    best = Some((s, path));
                }
            }
        }
        Ok(best.map(|b| b.1))
    }
}

#[derive(Debug, Clone, Serialize)]
struct ConfigSnapshot<'a> {
    config_hash: String,
    config: &'a TrainConfig,
}

/// Train into `run_dir`: config snapshot, one metrics line per update,
/// periodic greedy evaluation and checkpoints, and a final checkpoint. With
/// `resume`, continues from the newest checkpoint in the directory.
pub fn train(config: TrainConfig, run_dir: impl AsRef<Path>, resume: bool) -> Result<Trainer> {
    let run = RunDir { root: run_dir.as_ref().to_path_buf() };
    fs::create_dir_all(run.checkpoints())?;
    let mut trainer = match (resume, run.latest_checkpoint()?) {
        (true, Some(path)) => Trainer::resume(config, &path)?,
        _ => Trainer::new(config)?,
    };
    let snapshot = ConfigSnapshot { config_hash: trainer.config.hash(), config: &trainer.config };
    fs::write(run.config(), serde_json::to_string_pretty(&snapshot).expect("config serializes") + "\n")?;
    let mut metrics = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(run.metrics())?);
    let eval_set = trainer.eval_set()?;
    let cfg = trainer.config.clone();

    while trainer.step < cfg.train_steps {
        let mut m = trainer.train_step()?;
        if cfg.eval_every > 0 && (trainer.step % cfg.eval_every == 0 || trainer.step == cfg.train_steps) {
            m.eval_gap_ratio = Some(trainer.evaluate(&eval_set)?);
        }
        writeln!(metrics, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
            metrics.flush()?;
            trainer.save(&run.checkpoint(trainer.step))?;
        }
    }
    metrics.flush()?;
    let last = run.checkpoint(trainer.step);
    if !last.exists() {
        trainer.save(&last)?;
    }
    Ok(trainer)
}

/// A uniformly random valid action: candidate slot, feasible rotation and
/// grid cell each drawn uniformly.
pub fn random_action(env: &PackingEnv, rng: &mut impl Rng) -> PackAction {
    let valid: Vec<usize> = env.mask().iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
    let select = valid[rng.gen_range(0..valid.len())];
    let rots: Vec<usize> = env.rotation_mask(select).iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
    let rotation = crate::geometry::Rotation(rots[rng.gen_range(0..rots.len())] as u8);
    let bin = env.bin();
    let pos_x = rng.gen_range(0..bin.slots);
    let pos_y = if bin.dim == Dim::Three { rng.gen_range(0..bin.slots) } else { 0 };
    PackAction { select, rotation, pos_x, pos_y }
}

/// Mean gap ratio of `episodes` random-policy episodes on one instance, with
/// `n_u` candidate slots.
pub fn random_policy_gap_ratio(boxes: &[BoxDims], bin: BinSpec, mode: Mode, n_u: usize, episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = crate::env::EnvConfig::new(bin, mode).with_capacities(1, n_u);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut env = PackingEnv::reset(boxes, cfg)?;
        while !env.is_done() {
            let a = random_action(&env, &mut rng);
            env.step(&a)?;
        }
        total += env.gap_ratio()?;
    }
    Ok(total / episodes as f64)
}
