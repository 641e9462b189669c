//! The recurrent conditional-query policy and its critic.
//!
//! The encoder embeds the packed FIFO window and runs `L` attention layers.
//! Each layer attends from the current rows to the concatenation of a cache
//! of its own earlier inputs and the current rows, so stacking `L` layers
//! with a cache of `B` entries reaches `L * B` packing steps back. Cached
//! entries are constants: no gradient crosses packing steps.
//!
//! Three decoders share the encoder's keys and values and emit the
//! sub-actions in order. Each one is queried with the outcome of the previous
//! sub-action: the candidate boxes for selection, the selected box for
//! rotation, the rotated box for the x slot, and the rotated box plus the
//! chosen x for the y slot.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Manifest};

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Mat, ParamStore, Tape, Var};
use crate::env::{normalize_dims, normalize_placement, EnvConfig, Mode, PackAction, PackingEnv};
use crate::error::{Error, Result};
use crate::geometry::{rotate, BinSpec, BoxDims, Dim, Rotation};

/// How the position sub-action is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionHead {
    /// x slot, then y slot conditioned on the chosen x.
    Factored,
    /// One categorical over all `n_s * n_s` cells.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: u32,
    pub d_h: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Cache length `B` of every encoder layer.
    pub recur_len: usize,
    pub n_p: usize,
    pub n_u: usize,
    pub n_s: usize,
    pub position_head: PositionHead,
    /// Ablation: every head reads the pooled selection decoder output and no
    /// sub-action is conditioned on the previous one.
    pub no_query: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::small(Dim::Three)
    }
}

impl ModelConfig {
    pub fn small(dim: Dim) -> Self {
        ModelConfig {
            dim: dim.as_int(),
            d_h: 128,
            d_ff: 512,
            n_heads: 8,
            n_enc_layers: 3,
            n_dec_layers: 1,
            recur_len: 20,
            n_p: 20,
            n_u: 20,
            n_s: 128,
            position_head: PositionHead::Factored,
            no_query: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            init_seed: 0,
        }
    }

    pub fn large(dim: Dim) -> Self {
        ModelConfig { d_h: 256, d_ff: 1024, n_enc_layers: 6, n_dec_layers: 2, ..ModelConfig::small(dim) }
    }

    pub fn dimension(&self) -> Result<Dim> {
        Dim::from_int(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.dimension()?;
        if self.d_h == 0 || self.n_heads == 0 || self.d_h % self.n_heads != 0 {
            return Err(Error::Config(format!("d_h {} must be a positive multiple of n_heads {}", self.d_h, self.n_heads)));
        }
        if self.d_ff == 0 || self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.recur_len == 0 || self.n_p == 0 || self.n_u == 0 || self.n_s < 2 {
            return Err(Error::Config("need recur_len, n_p, n_u >= 1 and n_s >= 2".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0) {
            return Err(Error::Config("bad batch-norm settings".into()));
        }
        Ok(())
    }

    /// Environment configuration matching the model's context sizes.
    pub fn env_config(&self, bin: BinSpec, mode: Mode) -> Result<EnvConfig> {
        if bin.slots != self.n_s {
            return Err(Error::Config(format!("bin has {} slots but the model was built for {}", bin.slots, self.n_s)));
        }
        if bin.dim != self.dimension()? {
            return Err(Error::Config(format!("bin is {:?} but the model is {}D", bin.dim, self.dim)));
        }
        Ok(EnvConfig::new(bin, mode).with_capacities(self.n_p, self.n_u))
    }

    fn rotation_count(&self) -> usize {
        Dim::from_int(self.dim).map(Dim::rotation_count).unwrap_or(6)
    }
}

/// Per-layer FIFO of earlier layer inputs for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache {
    capacity: usize,
    layers: Vec<VecDeque<Array1<f64>>>,
}

impl EncoderCache {
    pub fn new(n_layers: usize, capacity: usize) -> Self {
        EncoderCache { capacity, layers: vec![VecDeque::with_capacity(capacity); n_layers] }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layer(&self, i: usize) -> &VecDeque<Array1<f64>> {
        &self.layers[i]
    }

    /// Append one entry per layer, evicting the oldest when full.
    pub fn push(&mut self, entries: Vec<Array1<f64>>) {
        assert_eq!(entries.len(), self.layers.len());
        for (fifo, e) in self.layers.iter_mut().zip(entries) {
            if fifo.len() == self.capacity {
                fifo.pop_front();
            }
            fifo.push_back(e);
        }
    }

    fn matrix(&self, layer: usize) -> Option<Mat> {
        let fifo = &self.layers[layer];
        let d = fifo.front()?.len();
        Some(Array2::from_shape_fn((fifo.len(), d), |(r, c)| fifo[r][c]))
    }
}

/// Actor and critic caches of one lane.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneCache {
    pub actor: EncoderCache,
    pub critic: EncoderCache,
}

/// How batch normalization gets its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    /// Statistics of the current batch; `update` folds them into the running
    /// averages.
    Batch { update: bool },
    /// Running averages, as in greedy evaluation.
    Running,
}

/// How each sub-action is chosen.
pub enum Choice<'a> {
    Sample(&'a mut ChaCha8Rng),
    Greedy,
    /// Replay given actions, one per lane.
    Forced(&'a [PackAction]),
}

/// One lane's decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStepOutput {
    pub action: PackAction,
    /// Selection distribution over candidate slots; `None` online.
    pub select_probs: Option<Vec<f64>>,
    pub rotate_probs: Vec<f64>,
    /// One distribution (joint head or 2D) or two (x, then y given x).
    pub position_probs: Vec<Vec<f64>>,
    /// Log-probabilities of the chosen select, rotate and position
    /// sub-actions; selection is 0 online.
    pub sub_log_probs: [f64; 3],
    pub log_prob: f64,
    pub entropy: f64,
}

/// Tape handles of one lane's joint log-probability and entropy.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub log_prob: Var,
    pub entropy: Var,
}

/// Result of a batched policy step.
pub struct PolicyStep {
    pub outputs: Vec<PolicyStepOutput>,
    pub vars: Vec<StepVars>,
    /// Newest layer inputs to push into each lane's actor cache.
    pub cache_updates: Vec<Option<Vec<Array1<f64>>>>,
}

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    bn1: BnLayer,
    ff1: Linear,
    ff2: Linear,
    bn2: BnLayer,
}

#[derive(Debug, Clone)]
struct Encoder {
    embed: Linear,
    layers: Vec<EncLayer>,
}

#[derive(Debug, Clone)]
struct DecLayer {
    wq: Linear,
    wo: Linear,
    bn1: BnLayer,
    ff1: Linear,
    ff2: Linear,
    bn2: BnLayer,
}

#[derive(Debug, Clone)]
struct Decoder {
    embed: Linear,
    layers: Vec<DecLayer>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Actor {
    encoder: Encoder,
    kv: Vec<(Linear, Linear)>,
    select: Decoder,
    rotate: Decoder,
    position: Decoder,
    position_y: Option<Decoder>,
}

#[derive(Debug, Clone)]
struct Critic {
    encoder: Encoder,
    kv: Vec<(Linear, Linear)>,
    decoder: Decoder,
    value: Linear,
}

/// Parameter ids of each optimizer group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroups {
    pub actor: std::ops::Range<usize>,
    pub critic: std::ops::Range<usize>,
    pub log_alpha: usize,
}

/// Actor, critic, temperature and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub bn: Vec<BatchStats>,
    pub groups: ParamGroups,
    actor: Actor,
    critic: Critic,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    bn: &'a mut Vec<BatchStats>,
    rng: &'a mut ChaCha8Rng,
    d: usize,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, out: usize, bias: bool) -> Linear {
        let w = self.store.add_uniform(format!("{name}.w"), fan_in, out, fan_in, self.rng);
        let b = bias.then(|| self.store.add_uniform(format!("{name}.b"), 1, out, fan_in, self.rng));
        Linear { w, b }
    }

    fn bn(&mut self, name: &str) -> BnLayer {
        let gamma = self.store.add(format!("{name}.gamma"), Array2::ones((1, self.d)));
        let beta = self.store.add(format!("{name}.beta"), Array2::zeros((1, self.d)));
        self.bn.push(BatchStats { mean: Array1::zeros(self.d), var: Array1::ones(self.d) });
        BnLayer { gamma, beta, stats: self.bn.len() - 1 }
    }

    fn feed_forward(&mut self, name: &str, d_ff: usize) -> (Linear, Linear) {
        let d = self.d;
        (self.linear(&format!("{name}.ff1"), d, d_ff, true), self.linear(&format!("{name}.ff2"), d_ff, d, true))
    }

    fn encoder(&mut self, name: &str, cfg: &ModelConfig) -> Encoder {
        let d = self.d;
        let embed = self.linear(&format!("{name}.embed"), 6, d, true);
        let layers = (0..cfg.n_enc_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                let wq = self.linear(&format!("{p}.wq"), d, d, false);
                let wk = self.linear(&format!("{p}.wk"), d, d, false);
                let wv = self.linear(&format!("{p}.wv"), d, d, false);
                let wo = self.linear(&format!("{p}.wo"), d, d, true);
                let bn1 = self.bn(&format!("{p}.bn1"));
                let (ff1, ff2) = self.feed_forward(&p, cfg.d_ff);
                let bn2 = self.bn(&format!("{p}.bn2"));
                EncLayer { wq, wk, wv, wo, bn1, ff1, ff2, bn2 }
            })
            .collect();
        Encoder { embed, layers }
    }

    fn shared_kv(&mut self, name: &str, n: usize) -> Vec<(Linear, Linear)> {
        let d = self.d;
        (0..n)
            .map(|i| (self.linear(&format!("{name}.kv{i}.wk"), d, d, false), self.linear(&format!("{name}.kv{i}.wv"), d, d, false)))
            .collect()
    }

    fn decoder(&mut self, name: &str, cfg: &ModelConfig, query_in: usize, out: usize) -> Decoder {
        let d = self.d;
        let embed = self.linear(&format!("{name}.embed"), query_in, d, true);
        let layers = (0..cfg.n_dec_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                let wq = self.linear(&format!("{p}.wq"), d, d, false);
                let wo = self.linear(&format!("{p}.wo"), d, d, true);
                let bn1 = self.bn(&format!("{p}.bn1"));
                let (ff1, ff2) = self.feed_forward(&p, cfg.d_ff);
                let bn2 = self.bn(&format!("{p}.bn2"));
                DecLayer { wq, wo, bn1, ff1, ff2, bn2 }
            })
            .collect();
        let head = self.linear(&format!("{name}.head"), d, out, true);
        Decoder { embed, layers, head }
    }
}

/// Normalized packed window, or the floor token when nothing is packed yet.
fn packed_features(env: &PackingEnv) -> (Mat, bool) {
    let bin = env.bin();
    let packed = &env.state().packed;
    if packed.is_empty() {
        // the bin floor as a flat box spanning the footprint
        return (Array2::from_shape_vec((1, 6), vec![2.0, 2.0, 0.0, -1.0, -1.0, 0.0]).expect("shape"), true);
    }
    let rows: Vec<f64> = packed.iter().flat_map(|p| normalize_placement(p, bin)).collect();
    (Array2::from_shape_vec((packed.len(), 6), rows).expect("shape"), false)
}

fn unpacked_features(env: &PackingEnv) -> (Mat, Vec<bool>) {
    let bin = env.bin();
    let slots = &env.state().unpacked;
    let rows: Vec<f64> =
        slots.iter().flat_map(|d| d.map(|d| normalize_dims(&d, bin)).unwrap_or([0.0; 3])).collect();
    (Array2::from_shape_vec((slots.len(), 3), rows).expect("shape"), env.mask())
}

fn row_matrix(v: &[f64]) -> Mat {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("shape")
}

fn stack(parts: &[Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("matching widths")
}

fn ranges(lens: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lens.map(|n| {
        let r = (start, start + n);
        start += n;
        r
    })
    .collect()
}

/// Index drawn from the probabilities `probs` (`exp` of a log-softmax row).
fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Forward-pass context: tape, normalization mode and pending running-stat
/// updates.
struct Fwd<'a> {
    model: &'a Model,
    tape: &'a mut Tape,
    norm: Norm,
    bn_updates: Vec<(usize, BatchStats)>,
}

impl Fwd<'_> {
    fn p(&mut self, id: usize) -> Var {
        self.tape.param(&self.model.params, id)
    }

    fn linear(&mut self, l: &Linear, x: Var) -> Var {
        let w = self.p(l.w);
        let y = self.tape.matmul(x, w);
        match l.b {
            Some(b) => {
                let b = self.p(b);
                self.tape.add_row(y, b)
            }
            None => y,
        }
    }

    fn batch_norm(&mut self, l: &BnLayer, x: Var) -> Var {
        let (g, b) = (self.p(l.gamma), self.p(l.beta));
        let eps = self.model.config.bn_eps;
        match self.norm {
            Norm::Running => self.tape.batch_norm(x, g, b, eps, Some(&self.model.bn[l.stats])).0,
            Norm::Batch { update } => {
                let (y, stats) = self.tape.batch_norm(x, g, b, eps, None);
                if update {
                    self.bn_updates.push((l.stats, stats));
                }
                y
            }
        }
    }

    fn feed_forward_block(&mut self, ff1: &Linear, ff2: &Linear, bn: &BnLayer, x: Var) -> Var {
        let h = self.linear(ff1, x);
        let h = self.tape.relu(h);
        let h = self.linear(ff2, h);
        let s = self.tape.add(x, h);
        self.batch_norm(bn, s)
    }

    /// Attention from `q` rows to `k`/`v` rows lane by lane.
    fn lane_attention(&mut self, q: Var, qr: &[(usize, usize)], k: Var, v: Var, kr: &[(usize, usize)]) -> Var {
        let heads = self.model.config.n_heads;
        let outs: Vec<Var> = qr
            .iter()
            .zip(kr)
            .map(|(&(q0, q1), &(k0, k1))| {
                let qi = self.tape.slice_rows(q, q0, q1);
                let ki = self.tape.slice_rows(k, k0, k1);
                let vi = self.tape.slice_rows(v, k0, k1);
                self.tape.attention(qi, ki, vi, heads)
            })
            .collect();
        self.tape.concat_rows(&outs)
    }

    /// Encode every lane's packed window. Returns the stacked output, the row
    /// range of each lane and the newest row's layer inputs (none for the
    /// floor token).
    fn encode(
        &mut self,
        enc: &Encoder,
        envs: &[&PackingEnv],
        caches: &[&EncoderCache],
    ) -> (Var, Vec<(usize, usize)>, Vec<Option<Vec<Array1<f64>>>>) {
        let feats: Vec<(Mat, bool)> = envs.iter().map(|e| packed_features(e)).collect();
        let rr = ranges(feats.iter().map(|f| f.0.nrows()));
        let x = self.tape.constant(stack(&feats.iter().map(|f| f.0.clone()).collect::<Vec<_>>()));
        let mut h = self.linear(&enc.embed, x);
        let mut newest: Vec<Option<Vec<Array1<f64>>>> =
            feats.iter().map(|f| if f.1 { None } else { Some(Vec::new()) }).collect();

        for (li, layer) in enc.layers.iter().enumerate() {
            let hv = self.tape.value(h);
            for (lane, n) in newest.iter_mut().enumerate() {
                if let Some(n) = n {
                    n.push(hv.row(rr[lane].1 - 1).to_owned());
                }
            }
            let q = self.linear(&layer.wq, h);
            let mut kv_parts = Vec::with_capacity(2 * envs.len());
            let mut kv_lens = Vec::with_capacity(envs.len());
            for (lane, &(r0, r1)) in rr.iter().enumerate() {
                let mut len = r1 - r0;
                if let Some(c) = caches[lane].matrix(li) {
                    len += c.nrows();
                    kv_parts.push(self.tape.constant(c));
                }
                kv_parts.push(self.tape.slice_rows(h, r0, r1));
                kv_lens.push(len);
            }
            let kv_in = self.tape.concat_rows(&kv_parts);
            let k = self.linear(&layer.wk, kv_in);
            let v = self.linear(&layer.wv, kv_in);
            let kr = ranges(kv_lens.into_iter());
            let a = self.lane_attention(q, &rr, k, v, &kr);
            let a = self.linear(&layer.wo, a);
            let s = self.tape.add(h, a);
            let s = self.batch_norm(&layer.bn1, s);
            h = self.feed_forward_block(&layer.ff1, &layer.ff2, &layer.bn2, s);
        }
        (h, rr, newest)
    }

    fn shared_kv(&mut self, kv: &[(Linear, Linear)], h_e: Var) -> Vec<(Var, Var)> {
        kv.iter().map(|(wk, wv)| (self.linear(wk, h_e), self.linear(wv, h_e))).collect()
    }

    /// Decoder body on stacked query rows; returns the last hidden layer.
    fn decode(&mut self, dec: &Decoder, queries: Mat, qr: &[(usize, usize)], kvs: &[(Var, Var)], er: &[(usize, usize)]) -> Var {
        let x = self.tape.constant(queries);
        let mut x = self.linear(&dec.embed, x);
        for (layer, &(k, v)) in dec.layers.iter().zip(kvs) {
            let q = self.linear(&layer.wq, x);
            let a = self.lane_attention(q, qr, k, v, er);
            let a = self.linear(&layer.wo, a);
            let s = self.tape.add(x, a);
            let s = self.batch_norm(&layer.bn1, s);
            x = self.feed_forward_block(&layer.ff1, &layer.ff2, &layer.bn2, s);
        }
        x
    }

    /// Masked mean of each lane's rows as a `1 x d` row per lane, stacked.
    fn masked_pool(&mut self, x: Var, rr: &[(usize, usize)], masks: &[Vec<bool>]) -> Var {
        let pooled: Vec<Var> = rr
            .iter()
            .zip(masks)
            .map(|(&(r0, r1), mask)| {
                let n = mask.iter().filter(|m| **m).count().max(1) as f64;
                let w = Array2::from_shape_fn((1, r1 - r0), |(_, j)| if mask[j] { 1.0 / n } else { 0.0 });
                let w = self.tape.constant(w);
                let xi = self.tape.slice_rows(x, r0, r1);
                self.tape.matmul(w, xi)
            })
            .collect();
        self.tape.concat_rows(&pooled)
    }
}

/// One categorical sub-action taken from a logit row.
struct Picked {
    index: usize,
    log_prob: Var,
    entropy: Var,
    probs: Vec<f64>,
}

/// Log-softmax of row `row` of `logits`, then choose an index.
fn pick(f: &mut Fwd, logits: Var, row: usize, mask: &[bool], forced: Option<usize>, choice: &mut Choice) -> Picked {
    let l = f.tape.slice_rows(logits, row, row + 1);
    let lp = f.tape.log_softmax(l, mask);
    let probs: Vec<f64> = f.tape.value(lp).iter().map(|v| v.exp()).collect();
    let index = match choice {
        Choice::Sample(rng) => draw(&probs, rng),
        Choice::Greedy => argmax(&probs),
        Choice::Forced(_) => forced.expect("forced sub-action"),
    };
    let log_prob = f.tape.pick(lp, 0, index);
    let entropy = f.tape.entropy(lp);
    Picked { index, log_prob, entropy, probs }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.d_h;
        let n_s = config.n_s;
        let (actor, actor_end) = {
            let mut b = Builder { store: &mut params, bn: &mut bn, rng: &mut rng, d };
            let encoder = b.encoder("actor.encoder", &config);
            let kv = b.shared_kv("actor.decoder", config.n_dec_layers);
            let select = b.decoder("actor.select", &config, 3, 1);
            let rotate = b.decoder("actor.rotate", &config, 3, config.rotation_count());
            let three_d = config.dim == 3;
            let joint = three_d && config.position_head == PositionHead::Joint;
            let position = b.decoder("actor.position", &config, 3, if joint { n_s * n_s } else { n_s });
            let position_y = (three_d && !joint).then(|| b.decoder("actor.position_y", &config, 4, n_s));
            (Actor { encoder, kv, select, rotate, position, position_y }, b.store.len())
        };
        let (critic, critic_end) = {
            let mut b = Builder { store: &mut params, bn: &mut bn, rng: &mut rng, d };
            let encoder = b.encoder("critic.encoder", &config);
            let kv = b.shared_kv("critic.decoder", config.n_dec_layers);
            let decoder = b.decoder("critic.decoder", &config, 3, d);
            let value = b.linear("critic.value", d, 1, true);
            (Critic { encoder, kv, decoder, value }, b.store.len())
        };
        let log_alpha = params.add("log_alpha", Array2::from_elem((1, 1), 0.01f64.ln()));
        Ok(Model {
            config,
            params,
            bn,
            groups: ParamGroups { actor: 0..actor_end, critic: actor_end..critic_end, log_alpha },
            actor,
            critic,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.params.get(self.groups.log_alpha)[[0, 0]].exp()
    }

    pub fn new_cache(&self) -> LaneCache {
        let c = EncoderCache::new(self.config.n_enc_layers, self.config.recur_len);
        LaneCache { actor: c.clone(), critic: c }
    }

    /// Fold batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: Vec<(usize, BatchStats)>) {
        let m = self.config.bn_momentum;
        for (i, s) in updates {
            let r = &mut self.bn[i];
            r.mean = &r.mean * (1.0 - m) + &s.mean * m;
            r.var = &r.var * (1.0 - m) + &s.var * m;
        }
    }

    /// Run the actor on every lane: select, rotate, then position, each
    /// decoder queried with the previous outcome. Returns per-lane outputs and
    /// the batch-norm updates gathered along the way.
    pub fn policy_step(
        &self,
        tape: &mut Tape,
        envs: &[&PackingEnv],
        caches: &[&EncoderCache],
        mut choice: Choice<'_>,
        norm: Norm,
    ) -> Result<(PolicyStep, Vec<(usize, BatchStats)>)> {
        if envs.iter().any(|e| e.is_done()) {
            return Err(Error::EpisodeComplete);
        }
        let cfg = &self.config;
        let a = &self.actor;
        let mut f = Fwd { model: self, tape, norm, bn_updates: Vec::new() };
        let (h_e, er, newest) = f.encode(&a.encoder, envs, caches);
        let kvs = f.shared_kv(&a.kv, h_e);
        let lanes = envs.len();
        let online = envs.iter().map(|e| e.config().mode == Mode::Online).collect::<Vec<_>>();

        let forced = |choice: &Choice, lane: usize| -> Option<PackAction> {
            match choice {
                Choice::Forced(acts) => Some(acts[lane]),
                _ => None,
            }
        };

        // selection, with candidate boxes as queries
        let unpacked: Vec<(Mat, Vec<bool>)> = envs.iter().map(|e| unpacked_features(e)).collect();
        let ur = ranges(unpacked.iter().map(|u| u.0.nrows()));
        let need_select = cfg.no_query || online.iter().any(|o| !o);
        let mut select_out = None;
        let mut selected = vec![0usize; lanes];
        let mut select_pick: Vec<Option<Picked>> = (0..lanes).map(|_| None).collect();
        if need_select {
            let q = stack(&unpacked.iter().map(|u| u.0.clone()).collect::<Vec<_>>());
            let x = f.decode(&a.select, q, &ur, &kvs, &er);
            let logits = f.linear(&a.select.head, x);
            for lane in 0..lanes {
                if online[lane] {
                    continue;
                }
                let (r0, r1) = ur[lane];
                let col = f.tape.slice_rows(logits, r0, r1);
                let lane_logits = f.tape.transpose(col);
                let fs = forced(&choice, lane).map(|a| a.select);
                let p = pick(&mut f, lane_logits, 0, &unpacked[lane].1, fs, &mut choice);
                if !unpacked[lane].1[p.index] {
                    return Err(Error::InvalidAction(format!("slot {} is masked", p.index)));
                }
                selected[lane] = p.index;
                select_pick[lane] = Some(p);
            }
            select_out = Some(x);
        }
        let pooled = if cfg.no_query {
            let masks: Vec<Vec<bool>> = unpacked.iter().map(|u| u.1.clone()).collect();
            Some(f.masked_pool(select_out.expect("selection decoder ran"), &ur, &masks))
        } else {
            None
        };
        let one_each = ranges(std::iter::repeat(1).take(lanes));

        // rotation, queried with the selected box
        let boxes: Vec<BoxDims> = envs.iter().zip(&selected).map(|(e, &s)| e.candidate(s).expect("unmasked")).collect();
        let rot_masks: Vec<Vec<bool>> = envs.iter().zip(&selected).map(|(e, &s)| e.rotation_mask(s)).collect();
        let rot_logits = match pooled {
            Some(p) => f.linear(&a.rotate.head, p),
            None => {
                let q = stack(&envs.iter().zip(&boxes).map(|(e, b)| row_matrix(&normalize_dims(b, e.bin()))).collect::<Vec<_>>());
                let x = f.decode(&a.rotate, q, &one_each, &kvs, &er);
                f.linear(&a.rotate.head, x)
            }
        };
        let mut rot_pick = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let fr = forced(&choice, lane).map(|a| a.rotation.index());
            let p = pick(&mut f, rot_logits, lane, &rot_masks[lane], fr, &mut choice);
            rot_pick.push(p);
        }
        let rotated: Vec<BoxDims> = boxes.iter().zip(&rot_pick).map(|(b, p)| rotate(*b, Rotation(p.index as u8))).collect();

        // position, queried with the rotated box
        let n_s = cfg.n_s;
        let joint = cfg.dim == 3 && cfg.position_head == PositionHead::Joint;
        let x_logits = match pooled {
            Some(p) => f.linear(&a.position.head, p),
            None => {
                let q = stack(&envs.iter().zip(&rotated).map(|(e, b)| row_matrix(&normalize_dims(b, e.bin()))).collect::<Vec<_>>());
                let x = f.decode(&a.position, q, &one_each, &kvs, &er);
                f.linear(&a.position.head, x)
            }
        };
        let width = if joint { n_s * n_s } else { n_s };
        let all = vec![true; width];
        let mut pos_pick = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let fx = forced(&choice, lane).map(|a| if joint { a.pos_x * n_s + a.pos_y } else { a.pos_x });
            pos_pick.push(pick(&mut f, x_logits, lane, &all, fx, &mut choice));
        }
        let mut y_pick: Vec<Option<Picked>> = (0..lanes).map(|_| None).collect();
        if let Some(dec_y) = &a.position_y {
            let y_logits = match pooled {
                Some(p) => f.linear(&dec_y.head, p),
                None => {
                    let q = stack(
                        &envs
                            .iter()
                            .zip(&rotated)
                            .zip(&pos_pick)
                            .map(|((e, b), px)| {
                                let bin = e.bin();
                                let x = (px.index as f64 * bin.slot_width()).min(bin.width - b.w);
                                let [w, l, h] = normalize_dims(b, bin);
                                row_matrix(&[w, l, h, 2.0 * x / bin.width - 1.0])
                            })
                            .collect::<Vec<_>>(),
                    );
                    let x = f.decode(dec_y, q, &one_each, &kvs, &er);
                    f.linear(&dec_y.head, x)
                }
            };
            let all = vec![true; n_s];
            for (lane, slot) in y_pick.iter_mut().enumerate() {
                let fy = forced(&choice, lane).map(|a| a.pos_y);
                *slot = Some(pick(&mut f, y_logits, lane, &all, fy, &mut choice));
            }
        }

        let mut outputs = Vec::with_capacity(lanes);
        let mut vars = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let (pos_x, pos_y) = if joint {
                (pos_pick[lane].index / n_s, pos_pick[lane].index % n_s)
            } else {
                (pos_pick[lane].index, y_pick[lane].as_ref().map_or(0, |p| p.index))
            };
            let action = PackAction { select: selected[lane], rotation: Rotation(rot_pick[lane].index as u8), pos_x, pos_y };
            // position term first, so the joint sum adds in the order
            // select, rotate, position
            let mut pos_lp = pos_pick[lane].log_prob;
            let mut h_terms = vec![rot_pick[lane].entropy, pos_pick[lane].entropy];
            let mut position_probs = vec![pos_pick[lane].probs.clone()];
            if let Some(y) = &y_pick[lane] {
                pos_lp = f.tape.add(pos_lp, y.log_prob);
                h_terms.push(y.entropy);
                position_probs.push(y.probs.clone());
            }
            let mut lp_terms = vec![rot_pick[lane].log_prob, pos_lp];
            if let Some(s) = &select_pick[lane] {
                lp_terms.insert(0, s.log_prob);
                h_terms.insert(0, s.entropy);
            }
            let log_prob = sum_scalars(f.tape, &lp_terms);
            let entropy = sum_scalars(f.tape, &h_terms);
            let sel_lp = select_pick[lane].as_ref().map_or(0.0, |s| f.tape.scalar(s.log_prob));
            let rot_lp = f.tape.scalar(rot_pick[lane].log_prob);
            let pos_lp = f.tape.scalar(pos_lp);
            outputs.push(PolicyStepOutput {
                action,
                select_probs: select_pick[lane].as_ref().map(|s| s.probs.clone()),
                rotate_probs: rot_pick[lane].probs.clone(),
                position_probs,
                sub_log_probs: [sel_lp, rot_lp, pos_lp],
                log_prob: f.tape.scalar(log_prob),
                entropy: f.tape.scalar(entropy),
            });
            vars.push(StepVars { log_prob, entropy });
        }
        let updates = std::mem::take(&mut f.bn_updates);
        Ok((PolicyStep { outputs, vars, cache_updates: newest }, updates))
    }

    /// Critic value of each lane's current state, as `1 x 1` tape nodes, and
    /// the critic cache updates.
    pub fn critic_values(
        &self,
        tape: &mut Tape,
        envs: &[&PackingEnv],
        caches: &[&EncoderCache],
        norm: Norm,
    ) -> (Vec<Var>, Vec<Option<Vec<Array1<f64>>>>, Vec<(usize, BatchStats)>) {
        let c = &self.critic;
        let mut f = Fwd { model: self, tape, norm, bn_updates: Vec::new() };
        let (h_e, er, newest) = f.encode(&c.encoder, envs, caches);
        let kvs = f.shared_kv(&c.kv, h_e);
        let unpacked: Vec<(Mat, Vec<bool>)> = envs.iter().map(|e| unpacked_features(e)).collect();
        let ur = ranges(unpacked.iter().map(|u| u.0.nrows()));
        let q = stack(&unpacked.iter().map(|u| u.0.clone()).collect::<Vec<_>>());
        let x = f.decode(&c.decoder, q, &ur, &kvs, &er);
        let x = f.linear(&c.decoder.head, x);
        let x = f.tape.relu(x);
        let masks: Vec<Vec<bool>> = unpacked.into_iter().map(|u| u.1).collect();
        let pooled = f.masked_pool(x, &ur, &masks);
        let v = f.linear(&c.value, pooled);
        let values = (0..envs.len()).map(|lane| f.tape.pick(v, lane, 0)).collect();
        let updates = std::mem::take(&mut f.bn_updates);
        (values, newest, updates)
    }

    /// Raw encoder output of the actor for one lane, for inspection.
    pub fn encode_actor(&self, env: &PackingEnv, cache: &EncoderCache, norm: Norm) -> (Mat, Option<Vec<Array1<f64>>>) {
        let mut tape = Tape::new();
        let mut f = Fwd { model: self, tape: &mut tape, norm, bn_updates: Vec::new() };
        let (h, _, mut newest) = f.encode(&self.actor.encoder, &[env], &[cache]);
        (tape.value(h).clone(), newest.pop().flatten())
    }
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t);
    }
    acc
}

/// Play one whole episode with the actor, one lane, no training.
pub fn run_episode(model: &Model, boxes: &[BoxDims], bin: BinSpec, mode: Mode, mut choice: Choice<'_>) -> Result<(Vec<PackAction>, PackingEnv)> {
    let mut env = PackingEnv::reset(boxes, model.config.env_config(bin, mode)?)?;
    let mut cache = model.new_cache().actor;
    let mut actions = Vec::with_capacity(boxes.len());
    while !env.is_done() {
        let mut tape = Tape::new();
        let step_choice = match &mut choice {
            Choice::Sample(rng) => Choice::Sample(rng),
            Choice::Greedy => Choice::Greedy,
            Choice::Forced(a) => Choice::Forced(std::slice::from_ref(&a[actions.len()])),
        };
        let (step, _) = model.policy_step(&mut tape, &[&env], &[&cache], step_choice, Norm::Running)?;
        let action = step.outputs[0].action;
        if let Some(u) = step.cache_updates.into_iter().next().flatten() {
            cache.push(u);
        }
        env.step(&action)?;
        actions.push(action);
    }
    Ok((actions, env))
}
