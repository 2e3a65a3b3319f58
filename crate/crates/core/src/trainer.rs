//! End-to-end optimisation: the batched objective with its gradients, Adam
//! for the network, SGD for the centers, a training loop with a plain-text
//! log, and a finite-difference gradient harness.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::centers::{center_grads, update_centers, CenterBank, TripletRecord, CENTER_SETS};
use crate::config::{parse_flag, parse_value, KeyValue};
use crate::data::{Dataset, VideoSample};
use crate::error::{Error, Result};
use crate::loss::{
    aclpt_loss, atcl_loss, attention, branch_aggregates, cls_loss, nt_loss, tempered_attention, BranchLossInput,
    LossBreakdown, TripletHyper,
};
use crate::model::{Architecture, Branch, Dims, Network, Stream, StreamGrads};
use crate::numkit::{fd_grad_check, GradCheck, Tensor2};

/// Ablation settings: which of the two extra components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Angular triplet-center loss only, single branch.
    Atcl,
    /// ATCL with the adversarial branch.
    AtclPlus,
    /// ATCL plus the new triplet, single branch.
    Aclpt,
    /// Everything.
    A2clpt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Atcl, Variant::AtclPlus, Variant::Aclpt, Variant::A2clpt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Atcl => "atcl",
            Variant::AtclPlus => "atcl_plus",
            Variant::Aclpt => "aclpt",
            Variant::A2clpt => "a2clpt",
        }
    }

    /// Rewrites the switches of `cfg`; `gamma` is the new-triplet weight
    /// used by the variants that keep it.
    pub fn apply(self, cfg: &mut TrainConfig, gamma: f64) {
        let (g, adv) = match self {
            Variant::Atcl => (0.0, false),
            Variant::AtclPlus => (0.0, true),
            Variant::Aclpt => (gamma, false),
            Variant::A2clpt => (gamma, true),
        };
        cfg.gamma = g;
        cfg.adversarial = adv;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?} (atcl, atcl_plus, aclpt, a2clpt)")))
    }
}

/// Every optimisation hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the triplet terms in the total loss.
    pub alpha: f64,
    /// Weight of the new-triplet loss.
    pub gamma: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub m1: f64,
    pub m2: f64,
    /// Top-k ratio `s` of the classification score.
    pub topk_ratio: f64,
    /// Erase ratio `s_a` of the adversarial branch.
    pub erase_ratio: f64,
    pub omega: f64,
    pub adversarial: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub center_lr_rgb: f64,
    pub center_lr_flow: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Embedding width `E`; `None` keeps the input dimension.
    pub embed_dim: Option<usize>,
    pub kernel_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.6,
            beta_min: 0.001,
            beta_max: 0.1,
            m1: 2.0,
            m2: 1.0,
            topk_ratio: 8.0,
            erase_ratio: 40.0,
            omega: 0.6,
            adversarial: true,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 5e-4,
            center_lr_rgb: 0.1,
            center_lr_flow: 0.2,
            iterations: 2000,
            seed: 0,
            checkpoint_every: 0,
            embed_dim: None,
            kernel_size: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("train config: {m}")));
        let nonneg = [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("omega", self.omega),
            ("weight-decay", self.weight_decay),
            ("center-lr-rgb", self.center_lr_rgb),
            ("center-lr-flow", self.center_lr_flow),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be >= 0, got {v}"));
            }
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return bad(format!("need 0 < beta-min <= beta-max < 1, got [{}, {}]", self.beta_min, self.beta_max));
        }
        for (k, v) in [("m1", self.m1), ("m2", self.m2)] {
            if !(0.0..=PI).contains(&v) {
                return bad(format!("{k} must lie in [0, pi], got {v}"));
            }
        }
        if !(self.topk_ratio >= 1.0 && self.topk_ratio.is_finite()) {
            return bad(format!("s must be >= 1, got {}", self.topk_ratio));
        }
        if !(self.erase_ratio >= 1.0 && self.erase_ratio.is_finite()) {
            return bad(format!("s-a must be >= 1, got {}", self.erase_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch-size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.embed_dim == Some(0) {
            return bad("embed-dim must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel-size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }

    pub fn hyper(&self, beta: f64) -> TripletHyper {
        TripletHyper {
            m1: self.m1,
            m2: self.m2,
            gamma: self.gamma,
            beta,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            adversarial: self.adversarial,
            erase_ratio: self.erase_ratio,
        }
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "beta-min" => self.beta_min = parse_value(key, value)?,
            "beta-max" => self.beta_max = parse_value(key, value)?,
            "m1" => self.m1 = parse_value(key, value)?,
            "m2" => self.m2 = parse_value(key, value)?,
            "topk-ratio" => self.topk_ratio = parse_value(key, value)?,
            "erase-ratio" => self.erase_ratio = parse_value(key, value)?,
            "omega" => self.omega = parse_value(key, value)?,
            "adversarial" => self.adversarial = parse_flag(key, value)?,
            "batch-size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight-decay" => self.weight_decay = parse_value(key, value)?,
            "center-lr-rgb" => self.center_lr_rgb = parse_value(key, value)?,
            "center-lr-flow" => self.center_lr_flow = parse_value(key, value)?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "checkpoint-every" => self.checkpoint_every = parse_value(key, value)?,
            "embed-dim" if value == "auto" => self.embed_dim = None,
            "embed-dim" => self.embed_dim = Some(parse_value(key, value)?),
            "kernel-size" => self.kernel_size = parse_value(key, value)?,
            _ => return Err(Error::invalid(format!("unknown train config key {key:?}"))),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("alpha", self.alpha.to_string()),
            ("gamma", self.gamma.to_string()),
            ("beta-min", self.beta_min.to_string()),
            ("beta-max", self.beta_max.to_string()),
            ("m1", self.m1.to_string()),
            ("m2", self.m2.to_string()),
            ("topk-ratio", self.topk_ratio.to_string()),
            ("erase-ratio", self.erase_ratio.to_string()),
            ("omega", self.omega.to_string()),
            ("adversarial", self.adversarial.to_string()),
            ("batch-size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight-decay", self.weight_decay.to_string()),
            ("center-lr-rgb", self.center_lr_rgb.to_string()),
            ("center-lr-flow", self.center_lr_flow.to_string()),
            ("iterations", self.iterations.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint-every", self.checkpoint_every.to_string()),
            ("embed-dim", self.embed_dim.map_or("auto".into(), |e| e.to_string())),
            ("kernel-size", self.kernel_size.to_string()),
        ]
    }
}

/// Objective value and gradients of one minibatch.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Batch-averaged loss terms.
    pub loss: LossBreakdown,
    /// Gradient of `loss.total` with respect to every network parameter.
    pub grads: Network,
    /// Center deltas in [`CENTER_SETS`] order, already scaled by `alpha`.
    pub center_deltas: [Tensor2; 4],
    /// Triplet statistics per center set.
    pub records: [Vec<TripletRecord>; 4],
}

struct SamplePass {
    loss: LossBreakdown,
    grads: Network,
    records: [Vec<TripletRecord>; 4],
}

fn set_index(stream: Stream, branch: Branch) -> usize {
    CENTER_SETS
        .iter()
        .position(|&(s, b)| s == stream && b == branch)
        .expect("every pair has a center set")
}

fn sample_pass(sample: &VideoSample, net: &Network, bank: &CenterBank, cfg: &TrainConfig, beta: f64) -> Result<SamplePass> {
    if !sample.has_label() {
        return Err(Error::invalid("training sample without labels"));
    }
    let fwd = net.forward(sample)?;
    let d = net.dims();
    let adv = net.arch.adversarial;
    let hyper = cfg.hyper(beta);
    let mut loss = LossBreakdown::default();
    let mut records: [Vec<TripletRecord>; 4] = Default::default();
    let mut ups = [
        StreamGrads::zeros(d.embed_dim, d.num_classes, sample.len(), adv),
        StreamGrads::zeros(d.embed_dim, d.num_classes, sample.len(), adv),
    ];

    for (si, stream) in Stream::ALL.into_iter().enumerate() {
        let sf = fwd.stream(stream);
        for branch in Branch::ALL {
            let Some(c) = sf.tcam(branch) else { continue };
            let bl = aclpt_loss(&BranchLossInput {
                features: sf.features(),
                tcam: c,
                labels: &sample.labels,
                centers: bank.get(stream, branch),
                hyper,
            })?;
            let cl = cls_loss(c, &sample.labels, cfg.topk_ratio)?;
            loss.atcl += bl.atcl;
            loss.nt += bl.nt;
            loss.aclpt += bl.aclpt;
            loss.skipped += bl.skipped;
            match (stream, branch) {
                (Stream::Rgb, Branch::First) => loss.cls.rgb = cl.value,
                (Stream::Rgb, Branch::Adversarial) => loss.cls.rgb_adversarial = cl.value,
                (Stream::Flow, Branch::First) => loss.cls.flow = cl.value,
                (Stream::Flow, Branch::Adversarial) => loss.cls.flow_adversarial = cl.value,
            }
            let up = &mut ups[si];
            up.d_features.axpy(cfg.alpha, &bl.d_features);
            let d_c = match branch {
                Branch::First => &mut up.d_first,
                Branch::Adversarial => up.d_adversarial.as_mut().expect("adversarial branch is on"),
            };
            d_c.axpy(cfg.alpha, &bl.d_tcam);
            d_c.axpy(1.0, &cl.d_tcam);
            records[set_index(stream, branch)] = bl.records;
        }
    }
    let fused = cls_loss(&fwd.fused, &sample.labels, cfg.topk_ratio)?;
    loss.cls.fused = fused.value;
    loss.total = cfg.alpha * loss.aclpt + loss.cls.sum();

    let mut grads = net.zeros_like();
    let [d_rgb, d_flow] = ups;
    net.backward(sample, &fwd, d_rgb, d_flow, &fused.d_tcam, &mut grads);
    Ok(SamplePass { loss, grads, records })
}

/// Total loss, parameter gradients and center deltas of one minibatch; one
/// tempering `beta` per sample.
pub fn forward_backward(
    batch: &[&VideoSample],
    net: &Network,
    bank: &CenterBank,
    cfg: &TrainConfig,
    betas: &[f64],
) -> Result<StepResult> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if betas.len() != batch.len() {
        return Err(Error::shape("forward_backward betas", batch.len(), betas.len()));
    }
    let passes: Vec<SamplePass> = batch
        .par_iter()
        .zip(betas.par_iter())
        .map(|(s, &beta)| sample_pass(s, net, bank, cfg, beta).map_err(|e| e.in_sample(&s.id)))
        .collect::<Result<_>>()?;

    let n = batch.len();
    let mut loss = LossBreakdown::default();
    let mut grads = net.zeros_like();
    let mut records: [Vec<TripletRecord>; 4] = Default::default();
    for p in passes {
        loss.accumulate(&p.loss);
        grads.axpy(1.0, &p.grads);
        for (all, r) in records.iter_mut().zip(p.records) {
            all.extend(r);
        }
    }
    let inv_n = 1.0 / n as f64;
    loss.scale(inv_n);
    grads.scale(inv_n);

    let mut deltas: [Tensor2; 4] = Default::default();
    for (k, delta) in deltas.iter_mut().enumerate() {
        let mut g = center_grads(&records[k], &bank.sets()[k], n, cfg.gamma)?;
        g.scale(cfg.alpha);
        *delta = g;
    }
    Ok(StepResult {
        loss,
        grads,
        center_deltas: deltas,
        records,
    })
}

/// Per-tensor first and second moments.
#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay over the network parameters. Centers
/// never enter its state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Names of the tensors that have optimiser state.
    pub fn state_keys(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    pub fn step(&mut self, net: &mut Network, grads: &Network) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut grads = grads.clone();
        for (p, g) in net.params_mut().into_iter().zip(grads.params_mut()) {
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.values.len()],
                v: vec![0.0; p.values.len()],
            });
            for (i, (w, &gi)) in p.values.iter_mut().zip(g.values.iter()).enumerate() {
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + self.eps);
                let decay = if p.decay { self.weight_decay * *w } else { 0.0 };
                *w -= self.lr * (update + decay);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Not serialised, so logs stay reproducible.
    pub wall_time: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str =
    "# iteration\tatcl\tnt\taclpt\tcls_rgb\tcls_rgb_adv\tcls_flow\tcls_flow_adv\tcls_fused\ttotal\tgrad_norm\tskipped";

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let l = &r.loss;
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.iteration,
                l.atcl,
                l.nt,
                l.aclpt,
                l.cls.rgb,
                l.cls.rgb_adversarial,
                l.cls.flow,
                l.cls.flow_adversarial,
                l.cls.fused,
                l.total,
                r.grad_norm,
                l.skipped
            );
        }
        s
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

/// Trained state.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub bank: CenterBank,
    pub log: TrainLog,
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const BETA_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded network and center bank for a dataset of the given dimensions.
pub fn initialize(feature_dim: usize, num_classes: usize, cfg: &TrainConfig) -> (Network, CenterBank) {
    let mut rng = stream_rng(cfg.seed, INIT_STREAM);
    let embed_dim = cfg.embed_dim.unwrap_or(feature_dim);
    let dims = Dims {
        input_dim: feature_dim,
        embed_dim,
        num_classes,
        kernel_size: cfg.kernel_size,
    };
    let net = Network::init(&mut rng, dims, cfg.architecture(), cfg.omega);
    let bank = CenterBank::random(&mut rng, num_classes, embed_dim);
    (net, bank)
}

/// Endless reshuffling iterator over sample indices.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn check_trainable(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if ds.num_classes < 2 {
        return Err(Error::invalid("training needs at least two classes"));
    }
    if let Some(s) = ds.samples.iter().find(|s| !s.has_label()) {
        return Err(Error::invalid(format!("sample {:?} has no labels", s.id)));
    }
    if cfg.iterations > 0 && ds.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    Ok(())
}

/// [`train_with`] without checkpoint callbacks.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, cfg, |_, _, _| Ok(()))
}

/// Runs `cfg.iterations` optimisation steps. `on_checkpoint(iteration,
/// network, bank)` fires after every `checkpoint_every`-th step.
pub fn train_with<F>(ds: &Dataset, cfg: &TrainConfig, mut on_checkpoint: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Network, &CenterBank) -> Result<()>,
{
    check_trainable(ds, cfg)?;
    let (mut net, mut bank) = initialize(ds.feature_dim, ds.num_classes, cfg);
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
    let mut sampler = BatchSampler::new(ds.len(), stream_rng(cfg.seed, SHUFFLE_STREAM));
    let mut beta_rng = stream_rng(cfg.seed, BETA_STREAM);
    let mut log = TrainLog::default();

    for it in 0..cfg.iterations {
        let started = Instant::now();
        let idx = sampler.next_batch(cfg.batch_size);
        let batch: Vec<&VideoSample> = idx.iter().map(|&i| &ds.samples[i]).collect();
        let betas: Vec<f64> = batch
            .iter()
            .map(|_| beta_rng.random_range(cfg.beta_min..=cfg.beta_max))
            .collect();
        let step = forward_backward(&batch, &net, &bank, cfg, &betas)?;
        let grad_norm = step.grads.sq_norm().sqrt();
        adam.step(&mut net, &step.grads);
        update_centers(&mut bank, &step.center_deltas, cfg.center_lr_rgb, cfg.center_lr_flow)?;
        log.records.push(LogRecord {
            iteration: it + 1,
            loss: step.loss,
            grad_norm,
            wall_time: started.elapsed(),
        });
        if (it + 1) % 100 == 0 {
            log::debug!("iteration {}: total {:.4}", it + 1, step.loss.total);
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(it + 1, &net, &bank)?;
        }
    }
    Ok(TrainOutcome {
        network: net,
        bank,
        log,
    })
}

/// Objective over a whole dataset with a seeded `beta` per sample.
pub fn dataset_objective(ds: &Dataset, net: &Network, bank: &CenterBank, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut rng = stream_rng(cfg.seed, EVAL_STREAM);
    let batch: Vec<&VideoSample> = ds.samples.iter().collect();
    let betas: Vec<f64> = batch
        .iter()
        .map(|_| rng.random_range(cfg.beta_min..=cfg.beta_max))
        .collect();
    forward_backward(&batch, net, bank, cfg, &betas).map(|r| r.loss)
}

/// A small random problem on which every gradient is checked.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub network: Network,
    pub bank: CenterBank,
    pub samples: Vec<VideoSample>,
    pub betas: Vec<f64>,
    pub cfg: TrainConfig,
}

impl GradInstance {
    pub const DIM: usize = 6;
    pub const LEN: usize = 7;
    pub const CLASSES: usize = 3;
    pub const BATCH: usize = 2;

    /// D=E=6, l=7, N_c=3, batch of 2, with random nonzero biases and fusion
    /// weights. The top-k and erase ratios are shrunk to 3 so that both act
    /// on a 7-step sequence; the other hyperparameters come from `cfg`.
    ///
    /// Draws are repeated until every kink of the objective (ReLU inputs,
    /// hinges, top-k and erase selections, nearest-negative choices) is at
    /// least [`KINK_MARGIN`] away, so central differences never straddle one.
    pub fn random(cfg: &TrainConfig, seed: u64) -> Self {
        let mut cfg = cfg.clone();
        cfg.embed_dim = Some(Self::DIM);
        cfg.topk_ratio = 3.0;
        cfg.erase_ratio = 3.0;
        cfg.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(f64, Self)> = None;
        for _ in 0..MAX_DRAWS {
            let inst = Self::draw(&mut rng, &cfg);
            let margin = inst.kink_margin().unwrap_or(0.0);
            if margin >= KINK_MARGIN {
                return inst;
            }
            if best.as_ref().is_none_or(|(m, _)| margin > *m) {
                best = Some((margin, inst));
            }
        }
        best.expect("at least one draw").1
    }

    fn draw(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Self {
        let dims = Dims {
            input_dim: Self::DIM,
            embed_dim: Self::DIM,
            num_classes: Self::CLASSES,
            kernel_size: cfg.kernel_size,
        };
        let mut network = Network::init(rng, dims, cfg.architecture(), cfg.omega);
        for p in network.params_mut() {
            if p.name.starts_with("fusion") {
                p.values.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            } else if !p.decay {
                p.values.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        let bank = CenterBank::random(rng, Self::CLASSES, Self::DIM);
        let samples = (0..Self::BATCH)
            .map(|i| {
                let mut feat = || Tensor2::from_fn(Self::DIM, Self::LEN, |_, _| rng.random_range(-1.0..1.0));
                let (rgb, flow) = (feat(), feat());
                let mut labels: Vec<bool> = (0..Self::CLASSES).map(|_| rng.random_bool(0.5)).collect();
                labels[rng.random_range(0..Self::CLASSES)] = true;
                VideoSample {
                    id: format!("check_{i}"),
                    rgb,
                    flow,
                    labels,
                    gt_segments: Vec::new(),
                }
            })
            .collect();
        let betas = (0..Self::BATCH)
            .map(|_| rng.random_range(cfg.beta_min..=cfg.beta_max))
            .collect();
        Self {
            network: network.clone(),
            bank,
            samples,
            betas,
            cfg: cfg.clone(),
        }
    }

    /// Smallest distance from the current point to any kink of the
    /// objective.
    pub fn kink_margin(&self) -> Result<f64> {
        let mut margin = f64::INFINITY;
        let mut see = |v: f64| margin = margin.min(v.abs());
        let k = |len| crate::loss::topk_count(len, self.cfg.topk_ratio);
        let k_a = |len| crate::model::erase_count(len, self.cfg.erase_ratio);
        for (sample, &beta) in self.samples.iter().zip(&self.betas) {
            let fwd = self.network.forward(sample)?;
            for stream in Stream::ALL {
                let sf = fwd.stream(stream);
                sf.embed.pre_hidden.as_slice().iter().for_each(|&z| see(z));
                sf.embed.pre_out.as_slice().iter().for_each(|&z| see(z));
                // a fully inactive time step is a flat direction of every
                // angle-based term, so its gradient is zero up to rounding
                for t in 0..sample.len() {
                    see(sf.features().col(t).into_iter().fold(0.0, f64::max));
                }
                for j in 0..Self::CLASSES {
                    see(selection_gap(sf.first.row(j), k(sample.len())));
                    see(selection_gap(sf.first.row(j), k_a(sample.len())));
                }
                for branch in Branch::ALL {
                    let Some(c) = sf.tcam(branch) else { continue };
                    for j in 0..Self::CLASSES {
                        see(selection_gap(c.row(j), k(sample.len())));
                    }
                    let centers = self.bank.get(stream, branch);
                    let bl = aclpt_loss(&BranchLossInput {
                        features: sf.features(),
                        tcam: c,
                        labels: &sample.labels,
                        centers,
                        hyper: self.cfg.hyper(beta),
                    })?;
                    for r in &bl.records {
                        see(r.atcl_hinge);
                        see(r.nt_hinge);
                        let mut d: Vec<f64> = (0..Self::CLASSES)
                            .filter(|&n| n != r.class)
                            .map(|n| crate::numkit::angular_distance(&r.big, centers.row(n)))
                            .collect::<Result<_>>()?;
                        d.sort_by(f64::total_cmp);
                        if d.len() > 1 {
                            see(d[1] - d[0]);
                        }
                    }
                }
            }
            for j in 0..Self::CLASSES {
                see(selection_gap(fwd.fused.row(j), k(sample.len())));
            }
        }
        Ok(margin)
    }

    fn batch(&self) -> Vec<&VideoSample> {
        self.samples.iter().collect()
    }

    fn objective(&self, net: &Network) -> Result<f64> {
        forward_backward(&self.batch(), net, &self.bank, &self.cfg, &self.betas).map(|r| r.loss.total)
    }
}

/// Gap between the `k`-th and `(k+1)`-th largest entries; infinite when
/// the selection is all or nothing.
fn selection_gap(row: &[f64], k: usize) -> f64 {
    if k == 0 || k >= row.len() {
        return f64::INFINITY;
    }
    let mut v = row.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[k - 1] - v[k]
}

/// Minimum distance to a kink accepted by [`GradInstance::random`].
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 1000;

/// Worst finite-difference disagreement per checked group.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<(String, GradCheck)>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|(_, g)| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|(_, g)| !(g.max_rel_error < tolerance))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.failures(tolerance).is_empty()
    }

    pub fn to_text(&self, tolerance: f64) -> String {
        let width = self.groups.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$}  {:>12}  {:>6}  {:>14}  {:>14}  status\n",
            "group", "max_rel_err", "worst", "numeric", "analytic"
        );
        for (name, g) in &self.groups {
            let status = if g.max_rel_error < tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{name:<width$}  {:>12.3e}  {:>6}  {:>14.6e}  {:>14.6e}  {status}",
                g.max_rel_error, g.worst_index, g.numeric, g.analytic
            );
        }
        s
    }
}

/// Central-difference step of the center oracle.
pub const FD_EPS: f64 = 1e-5;

/// Steps tried per coordinate by [`sweep_check`]. Small gradients need the
/// larger steps to rise above rounding noise, curved ones the smaller.
pub const FD_STEPS: [f64; 4] = [1e-6, 1e-5, 1e-4, 1e-3];

/// Per-coordinate [`fd_grad_check`] at every step in [`FD_STEPS`], keeping
/// the best step for each coordinate and the worst coordinate overall.
pub fn sweep_check<F>(mut f: F, x0: &[f64], analytic: &[f64]) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        numeric: 0.0,
        analytic: analytic.first().copied().unwrap_or(0.0),
    };
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        let mut best: Option<GradCheck> = None;
        for eps in FD_STEPS {
            let c = fd_grad_check(
                |xi| {
                    x[i] = xi[0];
                    let v = f(&x);
                    x[i] = x0[i];
                    v
                },
                &x0[i..=i],
                eps,
                &analytic[i..=i],
            )
            .map_err(|e| match e {
                Error::NonFiniteCheck { .. } => Error::NonFiniteCheck { index: i },
                other => other,
            })?;
            if best.is_none_or(|b| c.max_rel_error < b.max_rel_error) {
                best = Some(c);
            }
        }
        let best = best.expect("at least one step");
        if best.max_rel_error > worst.max_rel_error {
            worst = GradCheck { worst_index: i, ..best };
        }
    }
    Ok(worst)
}

/// Checks a fresh [`GradInstance`] drawn from `seed`.
pub fn gradcheck(cfg: &TrainConfig, seed: u64) -> Result<GradcheckReport> {
    gradcheck_instance(&GradInstance::random(cfg, seed), |_, _| {})
}

/// Runs every check on `inst`. `tamper(group, analytic)` may rewrite an
/// analytic gradient before comparison; [`gradcheck`] leaves them alone.
pub fn gradcheck_instance<T>(inst: &GradInstance, tamper: T) -> Result<GradcheckReport>
where
    T: Fn(&str, &mut [f64]),
{
    let batch = inst.batch();
    let step = forward_backward(&batch, &inst.network, &inst.bank, &inst.cfg, &inst.betas)?;
    let mut groups = Vec::new();

    let mut analytic = step.grads.clone();
    let mut probe = inst.network.clone();
    let names: Vec<String> = probe.params_mut().into_iter().map(|p| p.name).collect();
    for (gi, name) in names.iter().enumerate() {
        let mut a = analytic.params_mut().swap_remove(gi).values.to_vec();
        tamper(name, &mut a);
        let x0 = probe.params_mut().swap_remove(gi).values.to_vec();
        let check = sweep_check(
            |x| {
                let mut net = inst.network.clone();
                net.params_mut().swap_remove(gi).values.copy_from_slice(x);
                inst.objective(&net).unwrap_or(f64::NAN)
            },
            &x0,
            &a,
        )?;
        groups.push((name.clone(), check));
    }

    groups.extend(loss_level_checks(inst, &tamper)?);
    groups.push(("centers".into(), center_oracle_check(inst, &step, &tamper)?));
    Ok(GradcheckReport { groups })
}

/// Gradients of the loss with respect to the first-branch RGB T-CAM, the
/// embedded features and the two aggregates of the first sample.
fn loss_level_checks<T>(inst: &GradInstance, tamper: &T) -> Result<Vec<(String, GradCheck)>>
where
    T: Fn(&str, &mut [f64]),
{
    let sample = &inst.samples[0];
    let fwd = inst.network.forward(sample)?;
    let xe = fwd.rgb.features().clone();
    let c = fwd.rgb.first.clone();
    let centers = inst.bank.get(Stream::Rgb, Branch::First);
    let hyper = inst.cfg.hyper(inst.betas[0]);
    let labels = &sample.labels;
    let s = inst.cfg.topk_ratio;
    let branch = |xe: &Tensor2, c: &Tensor2| {
        aclpt_loss(&BranchLossInput {
            features: xe,
            tcam: c,
            labels,
            centers,
            hyper,
        })
    };
    let base = branch(&xe, &c)?;
    let mut out = Vec::new();

    let mut a = base.d_tcam.clone();
    a.axpy(1.0, &cls_loss(&c, labels, s)?.d_tcam);
    let mut a = a.into_vec();
    tamper("loss.tcam", &mut a);
    let (rows, cols) = c.shape();
    let check = sweep_check(
        |x| {
            let c = Tensor2::new(rows, cols, x.to_vec()).expect("finite probe");
            let tri = branch(&xe, &c).map(|b| b.aclpt).unwrap_or(f64::NAN);
            tri + cls_loss(&c, labels, s).map(|l| l.value).unwrap_or(f64::NAN)
        },
        c.as_slice(),
        &a,
    )?;
    out.push(("loss.tcam".into(), check));

    let mut a = base.d_features.clone().into_vec();
    tamper("loss.features", &mut a);
    let (rows, cols) = xe.shape();
    let check = sweep_check(
        |x| {
            let xe = Tensor2::new(rows, cols, x.to_vec()).expect("finite probe");
            branch(&xe, &c).map(|b| b.aclpt).unwrap_or(f64::NAN)
        },
        xe.as_slice(),
        &a,
    )?;
    out.push(("loss.features".into(), check));

    let (big, small) = branch_aggregates(&xe, &attention(&c)?, &tempered_attention(&c, hyper.beta)?, labels);
    let atcl = atcl_loss(&big, labels, centers, hyper.m1)?;
    let nt = nt_loss(&big, &small, labels, centers, hyper.m2)?;
    let mut d_big = atcl.d_big.clone();
    d_big.axpy(hyper.gamma, &nt.d_big);
    let mut d_small = nt.d_small.clone();
    d_small.scale(hyper.gamma);
    // only labeled rows are aggregates; the rest are structural zeros
    let rows_used: Vec<usize> = (0..labels.len()).filter(|&j| labels[j]).collect();
    let pick = |m: &Tensor2| -> Vec<f64> { rows_used.iter().flat_map(|&j| m.row(j).to_vec()).collect() };
    let mut x0 = pick(&big);
    x0.extend(pick(&small));
    let mut a = pick(&d_big);
    a.extend(pick(&d_small));
    tamper("loss.aggregates", &mut a);
    let dim = big.cols();
    let half = rows_used.len() * dim;
    let check = sweep_check(
        |x| {
            let (mut b, mut sm) = (big.clone(), small.clone());
            for (r, &j) in rows_used.iter().enumerate() {
                b.row_mut(j).copy_from_slice(&x[r * dim..(r + 1) * dim]);
                sm.row_mut(j).copy_from_slice(&x[half + r * dim..half + (r + 1) * dim]);
            }
            let at = atcl_loss(&b, labels, centers, hyper.m1).map(|o| o.value);
            let n = nt_loss(&b, &sm, labels, centers, hyper.m2).map(|o| o.value);
            match (at, n) {
                (Ok(at), Ok(n)) => at + hyper.gamma * n,
                _ => f64::NAN,
            }
        },
        &x0,
        &a,
    )?;
    out.push(("loss.aggregates".into(), check));
    Ok(out)
}

/// Derivative of `acos(v_hat . c)` with respect to `c` by central
/// differences (the center-gradient formulas differentiate this form).
fn fd_angle_wrt_center(v: &[f64], c: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let angle = |c: &[f64]| {
        let cos: f64 = v.iter().zip(c).map(|(a, b)| a / n * b).sum();
        cos.clamp(-1.0, 1.0).acos()
    };
    let mut probe = c.to_vec();
    (0..c.len())
        .map(|i| {
            let x = probe[i];
            probe[i] = x + FD_EPS;
            let hi = angle(&probe);
            probe[i] = x - FD_EPS;
            let lo = angle(&probe);
            probe[i] = x;
            (hi - lo) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Rebuilds the averaged center deltas from per-sample finite-difference
/// derivatives and compares them with the analytic deltas of `step`.
fn center_oracle_check<T>(inst: &GradInstance, step: &StepResult, tamper: &T) -> Result<GradCheck>
where
    T: Fn(&str, &mut [f64]),
{
    let n = inst.samples.len() as f64;
    let cfg = &inst.cfg;
    let mut numeric = Vec::new();
    let mut analytic = Vec::new();
    for (k, records) in step.records.iter().enumerate() {
        let centers = &inst.bank.sets()[k];
        let (n_c, dim) = centers.shape();
        let mut expect = Tensor2::zeros(n_c, dim);
        for j in 0..n_c {
            let c = centers.row(j);
            let mut roles = [(vec![0.0; dim], 0usize), (vec![0.0; dim], 0), (vec![0.0; dim], 0)];
            for r in records {
                if r.atcl_hinge > 0.0 && r.class == j {
                    let g = fd_angle_wrt_center(&r.big, c);
                    roles[0].0.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    roles[0].1 += 1;
                }
                if r.atcl_hinge > 0.0 && r.negative == j {
                    let g = fd_angle_wrt_center(&r.big, c);
                    roles[1].0.iter_mut().zip(&g).for_each(|(a, b)| *a -= b);
                    roles[1].1 += 1;
                }
                if r.nt_hinge > 0.0 && r.class == j {
                    let gb = fd_angle_wrt_center(&r.big, c);
                    let gs = fd_angle_wrt_center(&r.small, c);
                    for ((a, b), s) in roles[2].0.iter_mut().zip(&gb).zip(&gs) {
                        *a += cfg.gamma * (b - s);
                    }
                    roles[2].1 += 1;
                }
            }
            for (sum, count) in &roles {
                for (d, v) in sum.iter().enumerate() {
                    expect.add_at(j, d, cfg.alpha * v / (n * (1.0 + *count as f64)));
                }
            }
        }
        numeric.extend_from_slice(expect.as_slice());
        analytic.extend_from_slice(step.center_deltas[k].as_slice());
    }
    tamper("centers", &mut analytic);
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        numeric: 0.0,
        analytic: 0.0,
    };
    for (i, (fd, an)) in numeric.iter().zip(&analytic).enumerate() {
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
        if rel > worst.max_rel_error || !rel.is_finite() {
            worst = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                numeric: *fd,
                analytic: *an,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{apply_kv, parse_kv};
    use crate::data::{synth_generate, SynthConfig};

    fn tiny_data(seed: u64) -> Dataset {
        synth_generate(&SynthConfig {
            num_classes: 3,
            feature_dim: 6,
            num_videos: 6,
            min_len: 12,
            max_len: 16,
            min_segments: 1,
            max_segments: 2,
            min_segment_len: 2,
            max_segment_len: 4,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            embed_dim: Some(6),
            batch_size: 3,
            iterations: 5,
            erase_ratio: 4.0,
            topk_ratio: 4.0,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_and_key_values() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.gamma, c.m1, c.m2), (1.0, 0.6, 2.0, 1.0));
        assert_eq!((c.erase_ratio, c.topk_ratio, c.omega), (40.0, 8.0, 0.6));
        assert_eq!((c.lr, c.weight_decay), (1e-4, 5e-4));
        c.validate().unwrap();

        let mut d = TrainConfig::default();
        let echo = crate::config::format_kv(&c.entries());
        apply_kv(&parse_kv(&echo).unwrap(), &mut [&mut d]).unwrap();
        assert_eq!(c, d);
        assert!(d.set("nope", "1").is_err());
        assert!(d.set("alpha", "x").is_err());
        d.set("m1", "4").unwrap();
        assert!(d.validate().is_err());
    }

    #[test]
    fn variants() {
        let mut c = TrainConfig::default();
        Variant::Atcl.apply(&mut c, 0.6);
        assert_eq!((c.gamma, c.adversarial), (0.0, false));
        Variant::AtclPlus.apply(&mut c, 0.6);
        assert_eq!((c.gamma, c.adversarial), (0.0, true));
        Variant::Aclpt.apply(&mut c, 0.6);
        assert_eq!((c.gamma, c.adversarial), (0.6, false));
        Variant::A2clpt.apply(&mut c, 0.6);
        assert_eq!((c.gamma, c.adversarial), (0.6, true));
        assert_eq!("atcl_plus".parse::<Variant>().unwrap(), Variant::AtclPlus);
        assert!("full".parse::<Variant>().is_err());
    }

    #[test]
    fn alpha_zero_leaves_only_classification() {
        let ds = tiny_data(1);
        let mut cfg = tiny_cfg();
        cfg.alpha = 0.0;
        let (net, bank) = initialize(6, 3, &cfg);
        let batch: Vec<&VideoSample> = ds.samples.iter().take(2).collect();
        let r = forward_backward(&batch, &net, &bank, &cfg, &[0.05, 0.05]).unwrap();
        assert_eq!(r.loss.total, r.loss.cls.sum());
        assert!(r.center_deltas.iter().all(|d| d.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicated_sample_doubles_the_sum() {
        let ds = tiny_data(2);
        let cfg = tiny_cfg();
        let (net, bank) = initialize(6, 3, &cfg);
        let s = &ds.samples[0];
        let one = forward_backward(&[s], &net, &bank, &cfg, &[0.05]).unwrap();
        let two = forward_backward(&[s, s], &net, &bank, &cfg, &[0.05, 0.05]).unwrap();
        // the batch sum doubles, so the 1/N average is unchanged
        assert_eq!(two.loss.total, one.loss.total);
        assert_eq!(two.grads, one.grads);
    }

    #[test]
    fn unlabeled_sample_is_reported_by_id() {
        let mut ds = tiny_data(3);
        ds.samples[0].labels.iter_mut().for_each(|y| *y = false);
        let cfg = tiny_cfg();
        let (net, bank) = initialize(6, 3, &cfg);
        let err = forward_backward(&[&ds.samples[0]], &net, &bank, &cfg, &[0.05]).unwrap_err();
        assert!(err.to_string().contains(&ds.samples[0].id));
    }

    #[test]
    fn zero_iterations_return_the_initialisation() {
        let ds = tiny_data(4);
        let mut cfg = tiny_cfg();
        cfg.iterations = 0;
        let out = train(&ds, &cfg).unwrap();
        let (net, bank) = initialize(6, 3, &cfg);
        assert_eq!(out.network, net);
        assert_eq!(out.bank, bank);
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_keeps_centers_unit() {
        let ds = tiny_data(5);
        let mut cfg = tiny_cfg();
        cfg.checkpoint_every = 2;
        let mut seen = Vec::new();
        let a = train_with(&ds, &cfg, |it, _, bank| {
            seen.push((it, bank.max_norm_error()));
            Ok(())
        })
        .unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.log.to_text(), b.log.to_text());
        assert_eq!(a.network, b.network);
        assert_eq!(a.bank, b.bank);
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![2, 4]);
        assert!(seen.iter().all(|s| s.1 < 1e-12));
        assert!(a.bank.max_norm_error() < 1e-12);
        let its: Vec<usize> = a.log.records.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn adam_state_never_holds_centers() {
        let ds = tiny_data(6);
        let cfg = tiny_cfg();
        let (mut net, bank) = initialize(6, 3, &cfg);
        let mut adam = Adam::new(cfg.lr, cfg.weight_decay);
        let batch: Vec<&VideoSample> = ds.samples.iter().take(2).collect();
        let r = forward_backward(&batch, &net, &bank, &cfg, &[0.05, 0.05]).unwrap();
        adam.step(&mut net, &r.grads);
        assert_eq!(adam.steps(), 1);
        assert!(adam.state_keys().count() > 0);
        assert!(adam.state_keys().all(|k| !k.contains("center")));
    }

    #[test]
    fn adam_first_step_moves_each_weight_by_lr() {
        let cfg = tiny_cfg();
        let (net, _) = initialize(6, 3, &cfg);
        let mut grads = net.zeros_like();
        grads.fusion.w_rgb[0] = 0.3;
        grads.rgb.embedding.b1[1] = -2.0;
        let mut adam = Adam::new(0.01, 0.0);
        let mut moved = net.clone();
        adam.step(&mut moved, &grads);
        assert!((moved.fusion.w_rgb[0] - (net.fusion.w_rgb[0] - 0.01)).abs() < 1e-9);
        assert!((moved.rgb.embedding.b1[1] - (net.rgb.embedding.b1[1] + 0.01)).abs() < 1e-9);
        assert_eq!(moved.flow, net.flow);
    }

    #[test]
    fn decoupled_decay_touches_weights_only() {
        let cfg = tiny_cfg();
        let (mut net, _) = initialize(6, 3, &cfg);
        net.rgb.embedding.b1[0] = 0.5;
        let grads = net.zeros_like();
        let mut adam = Adam::new(0.1, 0.5);
        let mut moved = net.clone();
        adam.step(&mut moved, &grads);
        assert_eq!(moved.rgb.embedding.b1, net.rgb.embedding.b1);
        assert_eq!(moved.fusion, net.fusion);
        let (w0, w1) = (net.rgb.embedding.w1.get(0, 0), moved.rgb.embedding.w1.get(0, 0));
        assert!((w1 - w0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn alpha_zero_freezes_centers_in_training() {
        let ds = tiny_data(7);
        let mut cfg = tiny_cfg();
        cfg.alpha = 0.0;
        let out = train(&ds, &cfg).unwrap();
        let (_, bank) = initialize(6, 3, &cfg);
        for (a, b) in out.bank.sets().iter().zip(bank.sets()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradcheck_passes_on_fresh_instances() {
        for seed in 0..3 {
            let r = gradcheck(&TrainConfig::default(), seed).unwrap();
            assert!(r.passes(1e-4), "{}", r.to_text(1e-4));
            assert_eq!(r.groups.len(), 16 + 2 + 3 + 1);
        }
    }

    #[test]
    fn gradcheck_with_wide_kernel() {
        let cfg = TrainConfig {
            kernel_size: 3,
            ..TrainConfig::default()
        };
        let r = gradcheck(&cfg, 11).unwrap();
        assert!(r.passes(1e-4), "{}", r.to_text(1e-4));
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let inst = GradInstance::random(&TrainConfig::default(), 3);
        let r = gradcheck_instance(&inst, |name, g| {
            if name == "head.flow.first.kernel" {
                g.iter_mut().for_each(|v| *v *= 1.01);
            }
        })
        .unwrap();
        assert_eq!(r.failures(1e-4), vec!["head.flow.first.kernel"]);
        assert!(r.to_text(1e-4).contains("FAIL"));
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn inactive_hinges_give_zero_triplet_gradients() {
        let inst = GradInstance::random(&TrainConfig::default(), 8);
        let sample = &inst.samples[0];
        let fwd = inst.network.forward(sample).unwrap();
        let xe = fwd.rgb.features();
        let c = &fwd.rgb.first;
        // centers placed on the aggregates: own distance 0, margins 0
        let att = attention(c).unwrap();
        let tmp = tempered_attention(c, 0.05).unwrap();
        let (big, _) = branch_aggregates(xe, &att, &tmp, &sample.labels);
        let mut centers = inst.bank.get(Stream::Rgb, Branch::First).clone();
        for j in (0..3).filter(|&j| sample.labels[j]) {
            centers.row_mut(j).copy_from_slice(big.row(j));
        }
        let centers = CenterBank::from_sets([centers.clone(), centers.clone(), centers.clone(), centers]).unwrap();
        let hyper = TripletHyper {
            m1: 0.0,
            m2: 0.0,
            gamma: 0.6,
            beta: 0.05,
        };
        let eval = |c: &Tensor2| {
            aclpt_loss(&BranchLossInput {
                features: xe,
                tcam: c,
                labels: &sample.labels,
                centers: centers.get(Stream::Rgb, Branch::First),
                hyper,
            })
            .unwrap()
        };
        let b = eval(c);
        assert_eq!(b.aclpt, 0.0);
        assert!(b.d_tcam.as_slice().iter().all(|&v| v == 0.0));
        assert!(b.d_features.as_slice().iter().all(|&v| v == 0.0));
        let chk = fd_grad_check(
            |x| eval(&Tensor2::new(3, 7, x.to_vec()).unwrap()).aclpt,
            c.as_slice(),
            1e-6,
            b.d_tcam.as_slice(),
        )
        .unwrap();
        assert_eq!(chk.numeric, 0.0);
        assert_eq!(chk.max_rel_error, 0.0);
    }
}
