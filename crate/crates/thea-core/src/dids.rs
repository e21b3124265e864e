//! The simulated differentiable IDS channel: a sequence-to-sequence
//! attention model trained to reproduce the conventional channel's edits
//! so that gradients can flow through insertions and deletions.
//!
//! The model consumes the padded 5-channel vector sequence and the
//! padded profile, embedded separately and concatenated along the
//! feature axis, and emits one 5-way distribution per output slot via
//! learned position queries. Once trained it is frozen; downstream
//! training only reads it.

use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    sinusoidal_pe, Adam, Binder, DecoderLayerIdx, EncoderLayerIdx, LayerNormIdx, LinearIdx,
    ParamSet,
};
use crate::nn::tape::{Arr, Id, Tape};
use crate::profile::{ErrorProfile, EV_INSERT_BASE, PROFILE_PAD, PROFILE_VOCAB};
use crate::seq::{DnaSequence, PadScheme, SimplexSequence, PAD_CHANNEL};
use crate::{apply_profile_simplex, ChannelSpec};

/// Architecture constants of the channel model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DidsArch {
    /// Model width; each embedding stream gets half.
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Padded length of the vector sequence, the profile, and the output.
    pub max_len: usize,
}

impl DidsArch {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::InvalidConfig("width must be positive and even".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig("heads must divide width".into()));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.max_len == 0 {
            return Err(Error::InvalidConfig("layers and max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn pad_scheme(&self) -> PadScheme {
        PadScheme {
            max_length: self.max_len,
        }
    }
}

struct DidsSkeleton {
    embed_vec: LinearIdx,
    embed_prof: LinearIdx,
    enc: Vec<EncoderLayerIdx>,
    queries: usize,
    dec: Vec<DecoderLayerIdx>,
    final_ln: LayerNormIdx,
    head: LinearIdx,
}

impl DidsSkeleton {
    fn init(params: &mut ParamSet, rng: &mut ChaCha8Rng, arch: &DidsArch) -> Self {
        let d = arch.width;
        let half = d / 2;
        let ff = 4 * d;
        let embed_vec = LinearIdx::init(params, rng, "embed_vec", 5, half, false);
        let embed_prof = LinearIdx::init(params, rng, "embed_prof", PROFILE_VOCAB, half, false);
        let enc = (0..arch.enc_layers)
            .map(|i| EncoderLayerIdx::init(params, rng, &format!("enc{i}"), d, arch.heads, ff))
            .collect();
        let queries = params.add(
            "queries",
            Arr::from_shape_fn(IxDyn(&[arch.max_len, d]), |_| {
                let u1: f32 = rng.random_range(1e-7f32..1.0);
                let u2: f32 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos() * 0.02
            }),
        );
        let dec = (0..arch.dec_layers)
            .map(|i| DecoderLayerIdx::init(params, rng, &format!("dec{i}"), d, arch.heads, ff))
            .collect();
        let final_ln = LayerNormIdx::init(params, "final_ln", d);
        let head = LinearIdx::init(params, rng, "head", d, 5, true);
        Self {
            embed_vec,
            embed_prof,
            enc,
            queries,
            dec,
            final_ln,
            head,
        }
    }
}

/// The trained (or training) differentiable channel.
pub struct DidsModel {
    pub arch: DidsArch,
    pub params: ParamSet,
    skeleton: DidsSkeleton,
    /// Seed the parameters were initialized (and trained) with.
    pub seed: u64,
    /// Training configuration, kept for manifests and eval defaults.
    pub train_cfg: Option<DidsTrainConfig>,
}

impl DidsModel {
    pub fn new(arch: DidsArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let skeleton = DidsSkeleton::init(&mut params, &mut rng, &arch);
        Ok(Self {
            arch,
            params,
            skeleton,
            seed,
            train_cfg: None,
        })
    }

    /// Builds the forward graph from already-padded tape inputs:
    /// `c_pad` is `[B, max_len, 5]`, `p_onehot` is `[B, max_len, 10]`.
    /// Returns output logits `[B, max_len, 5]`.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        c_pad: Id,
        p_onehot: Id,
    ) -> Id {
        let batch = tape.value(c_pad).shape()[0];
        debug_assert_eq!(tape.value(c_pad).shape(), &[batch, self.arch.max_len, 5]);
        debug_assert_eq!(
            tape.value(p_onehot).shape(),
            &[batch, self.arch.max_len, PROFILE_VOCAB]
        );
        let ev = self.skeleton.embed_vec.apply(tape, binder, c_pad);
        let ep = self.skeleton.embed_prof.apply(tape, binder, p_onehot);
        let joined = tape.concat(ev, ep, 2);
        let pe = sinusoidal_pe(self.arch.max_len, self.arch.width);
        let mut x = tape.add_const(joined, &pe);
        for layer in &self.skeleton.enc {
            x = layer.apply(tape, binder, x);
        }
        let memory = x;
        let q = binder.bind(tape, self.skeleton.queries);
        let zeros = tape.constant(Arr::zeros(IxDyn(&[
            batch,
            self.arch.max_len,
            self.arch.width,
        ])));
        let mut y = tape.add_broadcast(zeros, q);
        for layer in &self.skeleton.dec {
            y = layer.apply(tape, binder, y, memory);
        }
        let y = self.skeleton.final_ln.apply(tape, binder, y);
        self.skeleton.head.apply(tape, binder, y)
    }

    /// Pure forward pass on one (sequence, profile) pair. Pads both
    /// inputs internally and returns `max_len` 5-way probability rows.
    pub fn forward(&self, c: &SimplexSequence, p: &ErrorProfile) -> Result<SimplexSequence> {
        if c.channels() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "expected a 4-channel codeword, got {} channels",
                c.channels()
            )));
        }
        p.validate_for(c.len())?;
        if p.len() > self.arch.max_len {
            return Err(Error::PadOverflow {
                len: p.len(),
                max: self.arch.max_len,
            });
        }
        let c_pad = pad_rows_array(c, self.arch.max_len)?;
        let p_onehot = profile_one_hot(p, self.arch.max_len);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let ci = tape.constant(insert_batch_axis(c_pad));
        let pi = tape.constant(insert_batch_axis(p_onehot));
        let logits = self.forward_logits(&mut tape, &mut binder, ci, pi);
        let probs = tape.softmax_last(logits);
        let rows = tape
            .value(probs)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        Ok(SimplexSequence::from_rows_unchecked(normalize_rows(rows)))
    }
}

/// Pads a 4-channel sequence into a raw `[max_len, 5]` array.
fn pad_rows_array(c: &SimplexSequence, max_len: usize) -> Result<Array2<f32>> {
    if c.len() > max_len {
        return Err(Error::PadOverflow {
            len: c.len(),
            max: max_len,
        });
    }
    let mut out = Array2::<f32>::zeros((max_len, 5));
    for (i, row) in c.rows().outer_iter().enumerate() {
        for j in 0..4 {
            out[[i, j]] = row[j];
        }
    }
    for i in c.len()..max_len {
        out[[i, PAD_CHANNEL]] = 1.0;
    }
    Ok(out)
}

/// One-hot profile representation with trailing pad symbols, `[max_len, 10]`.
fn profile_one_hot(p: &ErrorProfile, max_len: usize) -> Array2<f32> {
    debug_assert!(p.len() <= max_len);
    let mut out = Array2::<f32>::zeros((max_len, PROFILE_VOCAB));
    for (i, &e) in p.events().iter().enumerate() {
        out[[i, e as usize]] = 1.0;
    }
    for i in p.len()..max_len {
        out[[i, PROFILE_PAD as usize]] = 1.0;
    }
    out
}

fn insert_batch_axis(a: Array2<f32>) -> Arr {
    let (r, c) = a.dim();
    a.into_shape_with_order(IxDyn(&[1, r, c])).unwrap()
}

/// Exact renormalization guard for rows produced in f32.
fn normalize_rows(mut rows: Array2<f32>) -> Array2<f32> {
    for mut row in rows.rows_mut() {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if sum > 0.0 {
            let inv = (1.0 / sum) as f32;
            row.mapv_inplace(|v| v * inv);
        }
    }
    rows
}

/// Per-sequence KL divergence of `pred` from `target`, averaged over
/// positions. Target rows are clamped to `[1e-8, 1]` before the log.
pub fn kld_loss(pred: &SimplexSequence, target: &SimplexSequence) -> Result<f64> {
    if pred.len() != target.len() || pred.channels() != target.channels() {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{} vs target {}x{}",
            pred.len(),
            pred.channels(),
            target.len(),
            target.channels()
        )));
    }
    const EPS: f64 = 1e-8;
    let k = pred.len() as f64;
    let mut total = 0.0f64;
    for (prow, trow) in pred.rows().outer_iter().zip(target.rows().outer_iter()) {
        for (&p, &t) in prow.iter().zip(trow.iter()) {
            let t = (t as f64).max(EPS);
            let p = (p as f64).max(EPS);
            total += t * (t / p).ln();
        }
    }
    Ok(total / k)
}

/// Training configuration for the channel model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DidsTrainConfig {
    /// Inclusive range of true input lengths per training example.
    pub len_range: (usize, usize),
    /// Profile rates are drawn uniformly from this range per example.
    pub rate_range: (f64, f64),
    /// Dirichlet concentration for the soft half of the input mixture.
    pub dirichlet_alpha: f64,
    /// Fraction of rows drawn as exact one-hots instead of Dirichlet.
    pub one_hot_fraction: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f32,
    pub warmup: usize,
    pub seed: u64,
    pub arch: DidsArch,
    /// Record a loss-history entry every this many steps.
    pub log_every: usize,
    /// Stop early once held-out accuracy at `rate` reaches `accuracy`,
    /// checked every `check_every` steps on `n` sequences.
    pub early_stop: Option<EarlyStop>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EarlyStop {
    pub rate: f64,
    pub accuracy: f64,
    pub check_every: usize,
    pub n: usize,
}

impl DidsTrainConfig {
    /// Reduced-scale preset: every mechanism at single-CPU-tractable cost.
    pub fn desk(seed: u64) -> Self {
        Self {
            len_range: (16, 32),
            rate_range: (0.0, 0.2),
            dirichlet_alpha: 0.3,
            one_hot_fraction: 0.5,
            batch: 64,
            steps: 20_000,
            lr: 1e-4,
            warmup: 1_000,
            seed,
            arch: DidsArch {
                width: 64,
                heads: 4,
                enc_layers: 1,
                dec_layers: 1,
                max_len: 48,
            },
            log_every: 50,
            early_stop: Some(EarlyStop {
                rate: 0.10,
                accuracy: 0.965,
                check_every: 1_000,
                n: 256,
            }),
        }
    }

    /// Full-scale preset matching the published architecture constants.
    pub fn paper(seed: u64) -> Self {
        Self {
            len_range: (120, 150),
            rate_range: (0.0, 0.2),
            dirichlet_alpha: 0.3,
            one_hot_fraction: 0.5,
            batch: 256,
            steps: 200_000,
            lr: 1e-4,
            warmup: 1_000,
            seed,
            arch: DidsArch {
                width: 512,
                heads: 16,
                enc_layers: 1,
                dec_layers: 1,
                max_len: 166,
            },
            log_every: 100,
            early_stop: Some(EarlyStop {
                rate: 0.10,
                accuracy: 0.995,
                check_every: 5_000,
                n: 512,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(Error::InvalidConfig("bad length range".into()));
        }
        if self.len_range.1 + 8 > self.arch.max_len {
            return Err(Error::InvalidConfig(format!(
                "max input length {} leaves too little insertion headroom under max_len {}",
                self.len_range.1, self.arch.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.rate_range.0)
            || !(0.0..1.0).contains(&self.rate_range.1)
            || self.rate_range.0 > self.rate_range.1
        {
            return Err(Error::InvalidConfig("rate range must lie in [0, 1)".into()));
        }
        if self.dirichlet_alpha <= 0.0 || !(0.0..=1.0).contains(&self.one_hot_fraction) {
            return Err(Error::InvalidConfig("bad sampling law".into()));
        }
        if self.batch == 0 || self.steps == 0 || self.lr <= 0.0 || self.log_every == 0 {
            return Err(Error::InvalidConfig(
                "batch, steps, lr, log_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One prepared training/eval example.
struct Example {
    c_rows: Array2<f32>,
    profile: ErrorProfile,
}

/// Samples a simplex sequence row by row: one-hot with probability
/// `one_hot_fraction`, otherwise symmetric Dirichlet.
fn sample_rows(
    len: usize,
    alpha: f64,
    one_hot_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut rows = Array2::<f32>::zeros((len, 4));
    for i in 0..len {
        if rng.random::<f64>() < one_hot_fraction {
            let b = rng.random_range(0..4usize);
            rows[[i, b]] = 1.0;
        } else {
            let mut draw = [0.0f64; 4];
            let mut sum = 0.0;
            for d in draw.iter_mut() {
                // Guard against exact zeros from tiny-alpha gamma draws.
                *d = gamma.sample(rng).max(1e-30);
                sum += *d;
            }
            for (j, d) in draw.iter().enumerate() {
                rows[[i, j]] = (*d / sum) as f32;
            }
        }
    }
    rows
}

/// Draws an example whose profile fits the padded length.
fn sample_example(cfg: &DidsTrainConfig, rng: &mut ChaCha8Rng) -> Example {
    let len = rng.random_range(cfg.len_range.0..=cfg.len_range.1);
    let c_rows = sample_rows(len, cfg.dirichlet_alpha, cfg.one_hot_fraction, rng);
    let rate = rng.random_range(cfg.rate_range.0..=cfg.rate_range.1);
    let spec = ChannelSpec::iid(rate, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 0);
    let profile = loop {
        let p = spec.generate(len, rng).expect("valid spec");
        if p.len() <= cfg.arch.max_len && p.output_len(len) > 0 {
            break p;
        }
    };
    Example { c_rows, profile }
}

/// Stacks examples into model inputs and the conventional-channel target.
fn assemble_batch(examples: &[Example], max_len: usize) -> (Arr, Arr, Arr) {
    let b = examples.len();
    let mut c_pad = Array3::<f32>::zeros((b, max_len, 5));
    let mut p_onehot = Array3::<f32>::zeros((b, max_len, PROFILE_VOCAB));
    let mut target = Array3::<f32>::zeros((b, max_len, 5));
    for (bi, ex) in examples.iter().enumerate() {
        let len = ex.c_rows.nrows();
        for i in 0..len {
            for j in 0..4 {
                c_pad[[bi, i, j]] = ex.c_rows[[i, j]];
            }
        }
        for i in len..max_len {
            c_pad[[bi, i, PAD_CHANNEL]] = 1.0;
        }
        for (i, &e) in ex.profile.events().iter().enumerate() {
            p_onehot[[bi, i, e as usize]] = 1.0;
        }
        for i in ex.profile.len()..max_len {
            p_onehot[[bi, i, PROFILE_PAD as usize]] = 1.0;
        }
        let c_seq = SimplexSequence::from_rows_unchecked(ex.c_rows.clone());
        let out = apply_profile_simplex(&c_seq, &ex.profile).expect("length-matched profile");
        for (i, row) in out.rows().outer_iter().enumerate() {
            for j in 0..4 {
                target[[bi, i, j]] = row[j];
            }
        }
        for i in out.len()..max_len {
            target[[bi, i, PAD_CHANNEL]] = 1.0;
        }
    }
    (
        c_pad.into_dyn(),
        p_onehot.into_dyn(),
        target.into_dyn(),
    )
}

/// Entropy term `-(1/(B*k)) sum t ln t` of a stacked target, for turning
/// the tape's cross-entropy value into the reported KL divergence.
fn target_entropy_term(target: &Arr) -> f64 {
    let b = target.shape()[0] as f64;
    let k = target.shape()[1] as f64;
    let mut h = 0.0f64;
    for &t in target.iter() {
        let t = t as f64;
        if t > 1e-8 {
            h -= t * t.ln();
        }
    }
    h / (b * k)
}

/// Trains the channel model and returns it frozen, plus the loss history
/// (KL divergence per logged step).
pub fn train_dids(cfg: &DidsTrainConfig) -> Result<(DidsModel, Vec<(usize, f64)>)> {
    cfg.validate()?;
    let mut model = DidsModel::new(cfg.arch, cfg.seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(2);
    let mut opt = Adam::new(&model.params, cfg.lr, cfg.warmup);
    let mut history = Vec::new();
    let max_len = cfg.arch.max_len;
    for step in 0..cfg.steps {
        let examples: Vec<Example> = (0..cfg.batch)
            .map(|_| sample_example(cfg, &mut data_rng))
            .collect();
        let (c_pad, p_onehot, target) = assemble_batch(&examples, max_len);
        let entropy_term = target_entropy_term(&target);

        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, true);
        let ci = tape.constant(c_pad);
        let pi = tape.constant(p_onehot);
        let logits = model.forward_logits(&mut tape, &mut binder, ci, pi);
        let logp = tape.log_softmax_last(logits);
        let weighted = tape.mul_const(logp, target);
        let total = tape.sum_all(weighted);
        let loss = tape.scale(total, -1.0 / (cfg.batch as f32 * max_len as f32));
        let ce = tape.scalar(loss) as f64;
        let kld = ce - entropy_term;
        if !kld.is_finite() {
            return Err(Error::Diverged {
                step,
                metric: "kld",
                value: kld,
            });
        }
        let mut grads = tape.backward(loss);
        let per_param = binder.collect_grads(&mut grads);
        opt.step(&mut model.params, &per_param);

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            history.push((step, kld));
        }
        if let Some(es) = cfg.early_stop {
            if (step + 1) % es.check_every == 0 {
                let acc = eval_dids_accuracy_with(&model, cfg, es.rate, es.n, &mut eval_rng)?;
                if acc >= es.accuracy {
                    history.push((step, kld));
                    break;
                }
            }
        }
    }
    model.train_cfg = Some(cfg.clone());
    Ok((model, history))
}

/// Fraction of positions (argmax over the 5 channels, pads included)
/// where the model output matches the conventional channel, over `n`
/// random one-hot sequences with iid profiles at the given rate.
pub fn eval_dids_accuracy(
    model: &DidsModel,
    rate: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cfg = model
        .train_cfg
        .clone()
        .ok_or_else(|| Error::InvalidConfig("model carries no training config".into()))?;
    eval_dids_accuracy_with(model, &cfg, rate, n, rng)
}

fn eval_dids_accuracy_with(
    model: &DidsModel,
    cfg: &DidsTrainConfig,
    rate: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("rate {rate} outside [0, 1)")));
    }
    let spec = ChannelSpec::iid(rate, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 0);
    let max_len = model.arch.max_len;
    let mut matches = 0usize;
    let mut total = 0usize;
    let chunk = 32usize;
    let mut done = 0usize;
    while done < n {
        let b = chunk.min(n - done);
        let examples: Vec<Example> = (0..b)
            .map(|_| {
                let len = rng.random_range(cfg.len_range.0..=cfg.len_range.1);
                let seq = DnaSequence::random(len, rng).expect("len >= 1");
                let profile = loop {
                    let p = spec.generate(len, rng).expect("valid spec");
                    if p.len() <= max_len && p.output_len(len) > 0 {
                        break p;
                    }
                };
                Example {
                    c_rows: seq.to_one_hot().rows().clone(),
                    profile,
                }
            })
            .collect();
        let (c_pad, p_onehot, target) = assemble_batch(&examples, max_len);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, false);
        let ci = tape.constant(c_pad);
        let pi = tape.constant(p_onehot);
        let logits = model.forward_logits(&mut tape, &mut binder, ci, pi);
        let out = tape.value(logits);
        for bi in 0..b {
            for i in 0..max_len {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                let mut tbest = 0usize;
                let mut tbest_v = f32::NEG_INFINITY;
                for j in 0..5 {
                    let v = out[[bi, i, j]];
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                    let t = target[[bi, i, j]];
                    if t > tbest_v {
                        tbest_v = t;
                        tbest = j;
                    }
                }
                matches += usize::from(best == tbest);
                total += 1;
            }
        }
        done += b;
    }
    Ok(matches as f64 / total as f64)
}

/// Which single edit a gradient probe applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditKind {
    Insertion,
    Deletion,
    Substitution,
}

impl EditKind {
    /// Input-window offset where the gradient should peak when the
    /// output is perturbed `k` positions after the edit.
    pub fn expected_offset(&self, k: i64) -> i64 {
        match self {
            EditKind::Substitution => k,
            EditKind::Deletion => k + 1,
            EditKind::Insertion => k - 1,
        }
    }
}

/// Result of [`grad_probe`]: the averaged absolute-gradient window around
/// the edit position and each run's argmax offset.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    /// Window offsets relative to the edit index.
    pub offsets: Vec<i64>,
    /// Mean |gradient| per window offset, summed over channels.
    pub mean_window: Vec<f64>,
    /// Per-run argmax offset within the window.
    pub run_argmax: Vec<i64>,
}

impl ProbeOutcome {
    /// Offset of the mean window's peak.
    pub fn argmax_offset(&self) -> i64 {
        let mut best = 0usize;
        for (i, &v) in self.mean_window.iter().enumerate() {
            if v > self.mean_window[best] {
                best = i;
            }
        }
        self.offsets[best]
    }

    /// Fraction of runs whose window argmax hit the expected offset.
    pub fn hit_fraction(&self, expected: i64) -> f64 {
        if self.run_argmax.is_empty() {
            return 0.0;
        }
        let hits = self.run_argmax.iter().filter(|&&o| o == expected).count();
        hits as f64 / self.run_argmax.len() as f64
    }

    /// Peak mean |gradient| over the window.
    pub fn peak(&self) -> f64 {
        self.mean_window.iter().cloned().fold(0.0, f64::max)
    }
}

const PROBE_WINDOW: (i64, i64) = (-2, 6);

/// Applies a single edit at an aligned index, perturbs the channel output
/// `k` positions after it, and back-propagates the discrepancy to the
/// input rows. Averages |gradient| over `runs` random sequences.
pub fn grad_probe(
    model: &DidsModel,
    op: EditKind,
    k: i64,
    runs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeOutcome> {
    let cfg = model
        .train_cfg
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("model carries no training config".into()))?;
    let len = (cfg.len_range.0 + cfg.len_range.1) / 2;
    let m = len / 2;
    let (w_lo, w_hi) = PROBE_WINDOW;
    if (m as i64) + w_lo < 0 || (m as i64) + w_hi + 2 >= len as i64 {
        return Err(Error::InvalidConfig(format!(
            "probe window does not fit a length-{len} sequence"
        )));
    }
    if !(w_lo..=w_hi).contains(&k) {
        return Err(Error::InvalidConfig(format!(
            "perturbation offset {k} outside window {w_lo}..={w_hi}"
        )));
    }
    let max_len = model.arch.max_len;
    let window_len = (w_hi - w_lo + 1) as usize;
    let mut mean_window = vec![0.0f64; window_len];
    let mut run_argmax = Vec::with_capacity(runs);
    for _ in 0..runs {
        let seq = DnaSequence::random(len, rng)?;
        // identity profile with the single edit at m
        let mut events = vec![0u8; len];
        match op {
            EditKind::Substitution => events[m] = rng.random_range(1..=3u8),
            EditKind::Deletion => events[m] = 8,
            EditKind::Insertion => {
                events.insert(m, EV_INSERT_BASE + rng.random_range(0..4u8))
            }
        }
        let profile = ErrorProfile::new(events)?;
        let reference = apply_profile_simplex(&seq.to_one_hot(), &profile)?;
        // perturb the conventional output at m + k by rolling that base
        let mut target = reference.rows().clone();
        let pos = (m as i64 + k) as usize;
        let roll = rng.random_range(1..=3u8);
        let row: Vec<f32> = target.row(pos).to_vec();
        let rolled =
            crate::profile::roll_substitute(&[row[0], row[1], row[2], row[3]], roll)?;
        for j in 0..4 {
            target[[pos, j]] = rolled[j];
        }
        let target_seq = SimplexSequence::from_rows_unchecked(target);
        let target_pad = pad_rows_array(&target_seq, max_len)?.into_dyn();

        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, false);
        // the input rows are the probe target: tracked
        let c4 = tape.leaf(
            seq.to_one_hot()
                .rows()
                .clone()
                .into_shape_with_order(IxDyn(&[1, len, 4]))
                .unwrap(),
            true,
        );
        let zero_col = tape.constant(Arr::zeros(IxDyn(&[1, len, 1])));
        let c5 = tape.concat(c4, zero_col, 2);
        let mut pad_block = Array3::<f32>::zeros((1, max_len - len, 5));
        pad_block
            .index_axis_mut(Axis(2), PAD_CHANNEL)
            .fill(1.0);
        let pad_rows = tape.constant(pad_block.into_dyn());
        let c_pad = tape.concat(c5, pad_rows, 1);
        let p_onehot = tape.constant(insert_batch_axis(profile_one_hot(&profile, max_len)));
        let logits = model.forward_logits(&mut tape, &mut binder, c_pad, p_onehot);
        let logp = tape.log_softmax_last(logits);
        let target_arr = target_pad
            .into_shape_with_order(IxDyn(&[1, max_len, 5]))
            .unwrap();
        let weighted = tape.mul_const(logp, target_arr);
        let total = tape.sum_all(weighted);
        let loss = tape.scale(total, -1.0 / max_len as f32);
        let grads = tape.backward(loss);
        let gc = grads.get(c4).expect("tracked input");
        let mut best_idx = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (w, off) in (w_lo..=w_hi).enumerate() {
            let i = (m as i64 + off) as usize;
            let mag: f64 = (0..4).map(|j| gc[[0, i, j]].abs() as f64).sum();
            mean_window[w] += mag / runs as f64;
            if mag > best_v {
                best_v = mag;
                best_idx = w;
            }
        }
        run_argmax.push(w_lo + best_idx as i64);
    }
    Ok(ProbeOutcome {
        offsets: (w_lo..=w_hi).collect(),
        mean_window,
        run_argmax,
    })
}

/// Result of [`grad_probe_profile`]: mean |gradient| over the identity
/// profile's one-hot representation, by position and symbol class.
#[derive(Debug, Clone)]
pub struct ProfileProbeOutcome {
    /// `[max_len, 10]` mean absolute gradient map.
    pub mean_map: Array2<f64>,
    /// Edit position used for every run.
    pub edit_index: usize,
    /// True input length used for every run.
    pub input_len: usize,
}

impl ProfileProbeOutcome {
    /// Total gradient mass in a class range over a position range.
    pub fn mass(&self, positions: std::ops::Range<usize>, classes: std::ops::Range<usize>) -> f64 {
        let mut total = 0.0;
        for i in positions {
            for j in classes.clone() {
                total += self.mean_map[[i, j]];
            }
        }
        total
    }

    pub fn total_mass(&self) -> f64 {
        self.mean_map.sum()
    }
}

/// With an identity profile and a manually edited target, reports how the
/// discrepancy gradient lands on the profile's symbol classes. `edit`
/// of `None` leaves the target unedited (the near-zero control case).
pub fn grad_probe_profile(
    model: &DidsModel,
    edit: Option<EditKind>,
    runs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ProfileProbeOutcome> {
    let cfg = model
        .train_cfg
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("model carries no training config".into()))?;
    let len = (cfg.len_range.0 + cfg.len_range.1) / 2;
    let m = len / 2;
    let max_len = model.arch.max_len;
    let mut mean_map = Array2::<f64>::zeros((max_len, PROFILE_VOCAB));
    for _ in 0..runs {
        let seq = DnaSequence::random(len, rng)?;
        let p0 = ErrorProfile::identity(len);
        // manual edit of the codeword itself
        let mut symbols = seq.symbols().to_vec();
        match edit {
            Some(EditKind::Substitution) => {
                symbols[m] = (symbols[m] + rng.random_range(1..=3u8)) % 4;
            }
            Some(EditKind::Insertion) => {
                symbols.insert(m, rng.random_range(0..4u8));
            }
            Some(EditKind::Deletion) => {
                symbols.remove(m);
            }
            None => {}
        }
        let target = DnaSequence::new(symbols)?.to_one_hot();
        let target_pad = pad_rows_array(&target, max_len)?;

        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params, false);
        let ci = tape.constant(insert_batch_axis(pad_rows_array(&seq.to_one_hot(), max_len)?));
        // the identity profile's one-hot matrix is the probe target
        let pi = tape.leaf(insert_batch_axis(profile_one_hot(&p0, max_len)), true);
        let logits = model.forward_logits(&mut tape, &mut binder, ci, pi);
        let logp = tape.log_softmax_last(logits);
        let target_arr = insert_batch_axis(target_pad);
        let weighted = tape.mul_const(logp, target_arr);
        let total = tape.sum_all(weighted);
        let loss = tape.scale(total, -1.0 / max_len as f32);
        let grads = tape.backward(loss);
        let gp = grads.get(pi).expect("tracked profile");
        for i in 0..max_len {
            for j in 0..PROFILE_VOCAB {
                mean_map[[i, j]] += gp[[0, i, j]].abs() as f64 / runs as f64;
            }
        }
    }
    Ok(ProfileProbeOutcome {
        mean_map,
        edit_index: m,
        input_len: len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> DidsArch {
        DidsArch {
            width: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 12,
        }
    }

    #[test]
    fn forward_rows_are_normalized() {
        let model = DidsModel::new(tiny_arch(), 0).unwrap();
        let c = DnaSequence::parse("ATGCAT").unwrap().to_one_hot();
        let p = ErrorProfile::identity(6);
        let out = model.forward(&c, &p).unwrap();
        assert_eq!(out.len(), 12);
        assert_eq!(out.channels(), 5);
        for row in out.rows().outer_iter() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DidsModel::new(tiny_arch(), 1).unwrap();
        let c = DnaSequence::parse("ATGCATGC").unwrap().to_one_hot();
        let p = ErrorProfile::new(vec![0, 1, 0, 8, 0, 0, 4, 0, 0]).unwrap();
        let a = model.forward(&c, &p).unwrap();
        let b = model.forward(&c, &p).unwrap();
        assert_eq!(a.rows(), b.rows());
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let model = DidsModel::new(tiny_arch(), 0).unwrap();
        let c = DnaSequence::parse("ATGC").unwrap().to_one_hot();
        let p = ErrorProfile::identity(5);
        assert!(model.forward(&c, &p).is_err());
        let too_long = DnaSequence::random(13, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p13 = ErrorProfile::identity(13);
        assert!(model.forward(&too_long.to_one_hot(), &p13).is_err());
    }

    #[test]
    fn kld_examples() {
        // pred == target -> 0
        let t = SimplexSequence::from_rows(ndarray::array![[0.5f32, 0.25, 0.125, 0.125]]).unwrap();
        assert!(kld_loss(&t, &t).unwrap().abs() < 1e-9);

        // one-hot target vs halved prediction -> ln 2
        let target =
            SimplexSequence::from_rows(ndarray::array![[1.0f32, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        let pred = SimplexSequence::from_rows(ndarray::array![[
            0.5f32, 0.25, 0.125, 0.0625, 0.0625
        ]])
        .unwrap();
        let kld = kld_loss(&pred, &target).unwrap();
        assert!((kld - std::f64::consts::LN_2).abs() < 1e-5, "{kld}");

        // duplicating positions leaves the mean unchanged
        let target2 = SimplexSequence::from_rows(ndarray::array![
            [1.0f32, 0.0, 0.0, 0.0, 0.0],
            [1.0f32, 0.0, 0.0, 0.0, 0.0]
        ])
        .unwrap();
        let pred2 = SimplexSequence::from_rows(ndarray::array![
            [0.5f32, 0.25, 0.125, 0.0625, 0.0625],
            [0.5f32, 0.25, 0.125, 0.0625, 0.0625]
        ])
        .unwrap();
        let kld2 = kld_loss(&pred2, &target2).unwrap();
        assert!((kld2 - kld).abs() < 1e-9);

        // shape mismatch rejected
        assert!(kld_loss(&pred, &t).is_err());
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let mut cfg = DidsTrainConfig::desk(3);
        cfg.arch = DidsArch {
            width: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 48,
        };
        let model = DidsModel::new(cfg.arch, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let acc = eval_dids_accuracy_with(&model, &cfg, 0.01, 64, &mut rng).unwrap();
        assert!(acc < 0.6, "untrained accuracy {acc} suspiciously high");
    }

    #[test]
    fn config_validation() {
        let mut cfg = DidsTrainConfig::desk(0);
        cfg.validate().unwrap();
        cfg.rate_range = (0.2, 0.1);
        assert!(cfg.validate().is_err());
        let mut cfg = DidsTrainConfig::desk(0);
        cfg.len_range = (45, 45);
        assert!(cfg.validate().is_err());
    }

    /// Prints per-step training cost at candidate widths; run with
    /// `cargo test -p thea-core --release timing_probe -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn timing_probe() {
        for width in [64usize, 96, 128] {
            let mut cfg = DidsTrainConfig::desk(0);
            cfg.arch.width = width;
            cfg.steps = 6;
            cfg.log_every = 1;
            cfg.early_stop = None;
            let t0 = std::time::Instant::now();
            let _ = train_dids(&cfg).unwrap();
            println!(
                "dids width {width}: {:.3} s/step (batch {})",
                t0.elapsed().as_secs_f64() / cfg.steps as f64,
                cfg.batch
            );
        }
    }
}
