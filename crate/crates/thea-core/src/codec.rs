//! The autoencoder code: an attention encoder that maps a source
//! sequence to a longer codeword plus an auxiliary reconstruction, and a
//! decoder that recovers the source from the corrupted codeword.
//!
//! During training the codeword rows pass through a Gumbel-noise softmax;
//! the injected disturbance pushes the converged encoder toward confident,
//! one-hot-like codewords, so the argmax used at test time loses almost
//! nothing. The channel between encoder and decoder is the frozen
//! differentiable IDS model; at test time it is replaced by the exact
//! conventional channel.

use std::time::Instant;

use ndarray::{Array2, Array3, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSpec;
use crate::dids::DidsModel;
use crate::error::{Error, Result};
use crate::eval::{mean_entropy, ner, MetricsRecord};
use crate::nn::layers::{Adam, Binder, ParamSet, Seq2SeqIdx};
use crate::nn::tape::{Arr, Id, Tape};
use crate::profile::{apply_profile_discrete, ErrorProfile, PROFILE_PAD, PROFILE_VOCAB};
use crate::seq::{DnaSequence, PadScheme, SimplexSequence, PAD_CHANNEL};

/// Auxiliary reconstruction target shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuxPattern {
    /// Reproduce the source itself.
    I,
    /// Forward differences `s_i - s_{i+1} mod 4`, length `l_s - 1`.
    Diff,
    /// Position-shifted sequence `s_i + i mod 4`, length `l_s`.
    Pos,
    /// `I` then `Diff`, concatenated.
    IDiff,
    /// `I` then `Pos`, concatenated.
    IPos,
}

impl AuxPattern {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "I" => Ok(Self::I),
            "Diff" => Ok(Self::Diff),
            "Pos" => Ok(Self::Pos),
            "I+Diff" => Ok(Self::IDiff),
            "I+Pos" => Ok(Self::IPos),
            other => Err(Error::UnknownPattern(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::I => "I",
            Self::Diff => "Diff",
            Self::Pos => "Pos",
            Self::IDiff => "I+Diff",
            Self::IPos => "I+Pos",
        }
    }

    /// Auxiliary target length for a source of length `l_s`.
    pub fn aux_len(&self, l_s: usize) -> usize {
        match self {
            Self::I | Self::Pos => l_s,
            Self::Diff => l_s - 1,
            Self::IDiff => 2 * l_s - 1,
            Self::IPos => 2 * l_s,
        }
    }
}

/// Builds the auxiliary target for a source sequence.
pub fn aux_target(s: &DnaSequence, pattern: AuxPattern) -> Result<DnaSequence> {
    let sym = s.symbols();
    let diff = || -> Vec<u8> {
        sym.windows(2).map(|w| (w[0] + 4 - w[1]) % 4).collect()
    };
    let pos = || -> Vec<u8> {
        sym.iter()
            .enumerate()
            .map(|(i, &b)| ((b as usize + i) % 4) as u8)
            .collect()
    };
    let out = match pattern {
        AuxPattern::I => sym.to_vec(),
        AuxPattern::Diff => {
            if sym.len() < 2 {
                return Err(Error::InvalidConfig(
                    "Diff needs a source of length at least 2".into(),
                ));
            }
            diff()
        }
        AuxPattern::Pos => pos(),
        AuxPattern::IDiff => {
            if sym.len() < 2 {
                return Err(Error::InvalidConfig(
                    "I+Diff needs a source of length at least 2".into(),
                ));
            }
            let mut v = sym.to_vec();
            v.extend(diff());
            v
        }
        AuxPattern::IPos => {
            let mut v = sym.to_vec();
            v.extend(pos());
            v
        }
    };
    DnaSequence::new(out)
}

/// How codeword logits become simplex rows during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discretization {
    /// Gumbel-noise softmax (the disturbance-based default).
    Gumbel,
    /// Plain softmax (the ablation arm; pair with an entropy weight).
    Softmax,
}

/// Whether encoding runs with training-time disturbance or test-time argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Train,
    Test,
}

/// Architecture constants of the encoder/decoder pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecArch {
    pub l_s: usize,
    pub l_c: usize,
    pub width: usize,
    pub heads: usize,
    /// Attention layers per stack; both halves use `layers + layers`.
    pub layers: usize,
    pub aux: AuxPattern,
    /// Padded channel length; must match the channel model it trains with.
    pub max_len: usize,
}

impl CodecArch {
    pub fn validate(&self) -> Result<()> {
        if self.l_s >= self.l_c {
            return Err(Error::InvalidConfig(format!(
                "source length {} must be below codeword length {}",
                self.l_s, self.l_c
            )));
        }
        if self.l_s == 0 {
            return Err(Error::InvalidConfig("source length must be positive".into()));
        }
        if self.max_len < self.l_c + 16 {
            return Err(Error::InvalidConfig(format!(
                "max_len {} must be at least l_c + 16 = {}",
                self.max_len,
                self.l_c + 16
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig("heads must divide width".into()));
        }
        if self.layers == 0 {
            return Err(Error::InvalidConfig("layers must be positive".into()));
        }
        Ok(())
    }

    pub fn aux_len(&self) -> usize {
        self.aux.aux_len(self.l_s)
    }

    pub fn pad_scheme(&self) -> PadScheme {
        PadScheme {
            max_length: self.max_len,
        }
    }

    pub fn code_rate(&self) -> f64 {
        self.l_s as f64 / self.l_c as f64
    }
}

/// The encoder/decoder parameter pair.
pub struct CodecModel {
    pub arch: CodecArch,
    pub params: ParamSet,
    enc: Seq2SeqIdx,
    dec: Seq2SeqIdx,
    pub seed: u64,
}

impl CodecModel {
    pub fn new(arch: CodecArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let enc = Seq2SeqIdx::init(
            &mut params,
            &mut rng,
            "enc",
            4,
            4,
            arch.l_c + arch.aux_len(),
            arch.width,
            arch.heads,
            arch.layers,
            arch.layers,
        );
        let dec = Seq2SeqIdx::init(
            &mut params,
            &mut rng,
            "dec",
            5,
            4,
            arch.l_s,
            arch.width,
            arch.heads,
            arch.layers,
            arch.layers,
        );
        Ok(Self {
            arch,
            params,
            enc,
            dec,
            seed,
        })
    }

    /// Encoder forward on one-hot sources `[B, l_s, 4]`, producing raw
    /// logits `[B, l_c + aux_len, 4]`.
    fn encoder_logits(&self, tape: &mut Tape, binder: &mut Binder, sources: Id) -> Id {
        self.enc.apply(tape, binder, sources)
    }

    /// Decoder forward on padded 5-channel rows `[B, max_len, 5]`,
    /// producing logits `[B, l_s, 4]`.
    fn decoder_logits(&self, tape: &mut Tape, binder: &mut Binder, corrupted: Id) -> Id {
        self.dec.apply(tape, binder, corrupted)
    }
}

/// Samples standard Gumbel noise `-ln(-ln u)` with `u` clamped into
/// `(1e-12, 1 - 1e-12)`.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| gumbel_from_uniform(rng.random::<f64>()) as f32)
}

/// The Gumbel transform of one uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// Gumbel-softmax on a 4-logit row: `softmax((x + g) / tau)`.
pub fn gumbel_softmax(x: &[f32; 4], tau: f32, g: &[f32; 4]) -> Result<[f32; 4]> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let mut z = [0.0f32; 4];
    for i in 0..4 {
        z[i] = (x[i] + g[i]) / tau;
    }
    let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut out = [0.0f32; 4];
    let mut sum = 0.0f64;
    for i in 0..4 {
        out[i] = (z[i] - max).exp();
        sum += out[i] as f64;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / sum) as f32;
    }
    Ok(out)
}

/// Sum over positions of `-ln p[true symbol]`, probabilities clamped by 1e-8.
pub fn ce_loss(pred: &SimplexSequence, truth: &DnaSequence) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} rows, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.channels() != 4 {
        return Err(Error::ShapeMismatch("cross-entropy expects 4 channels".into()));
    }
    let mut total = 0.0f64;
    for (row, &b) in pred.rows().outer_iter().zip(truth.symbols()) {
        let p = (row[b as usize] as f64).max(1e-8);
        total -= p.ln();
    }
    Ok(total)
}

/// The auxiliary loss shares the cross-entropy form.
pub fn aux_loss(reconstruction: &SimplexSequence, target: &DnaSequence) -> Result<f64> {
    ce_loss(reconstruction, target)
}

/// Entropy constraint on a codeword: `-sum_i sum_j c_ij ln c_ij`,
/// with `0 ln 0 = 0`.
pub fn entropy_constraint(c: &SimplexSequence) -> f64 {
    let mut total = 0.0f64;
    for &v in c.rows().iter() {
        let v = v as f64;
        if v > 0.0 {
            total -= v * v.ln();
        }
    }
    total
}

/// Training configuration for the codec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub l_s: usize,
    pub l_c: usize,
    pub tau: f32,
    /// Auxiliary loss weight.
    pub mu: f64,
    /// Optional entropy-constraint weight (the discretization alternative).
    pub lambda: f64,
    pub pattern: AuxPattern,
    pub discretization: Discretization,
    pub channel: ChannelSpec,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f32,
    pub warmup: usize,
    pub seed_train: u64,
    pub seed_test: u64,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    /// Validation sequences per epoch (conventional-channel test path).
    pub val_sequences: usize,
}

impl CodecTrainConfig {
    /// Reduced-scale preset preserving every mechanism.
    pub fn desk(channel: ChannelSpec, seed_train: u64, seed_test: u64) -> Self {
        Self {
            l_s: 20,
            l_c: 30,
            tau: 1.0,
            mu: 1.0,
            lambda: 0.0,
            pattern: AuxPattern::I,
            discretization: Discretization::Gumbel,
            channel,
            batch: 64,
            epochs: 10,
            steps_per_epoch: 250,
            lr: 1e-4,
            warmup: 200,
            seed_train,
            seed_test,
            width: 64,
            heads: 4,
            layers: 2,
            max_len: 48,
            val_sequences: 256,
        }
    }

    /// Full-scale preset matching the published architecture constants.
    pub fn paper(channel: ChannelSpec, seed_train: u64, seed_test: u64) -> Self {
        Self {
            l_s: 100,
            l_c: 150,
            tau: 1.0,
            mu: 1.0,
            lambda: 0.0,
            pattern: AuxPattern::I,
            discretization: Discretization::Gumbel,
            channel,
            batch: 256,
            epochs: 100,
            steps_per_epoch: 500,
            lr: 1e-4,
            warmup: 1_000,
            seed_train,
            seed_test,
            width: 512,
            heads: 16,
            layers: 3,
            max_len: 166,
            val_sequences: 1_000,
        }
    }

    pub fn arch(&self) -> CodecArch {
        CodecArch {
            l_s: self.l_s,
            l_c: self.l_c,
            width: self.width,
            heads: self.heads,
            layers: self.layers,
            aux: self.pattern,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.mu < 0.0 || self.lambda < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if self.seed_train == self.seed_test {
            return Err(Error::InvalidConfig(
                "training and testing seeds must differ".into(),
            ));
        }
        if self.batch == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "batch, epochs, steps_per_epoch must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        self.channel.validate()?;
        if matches!(self.pattern, AuxPattern::Diff | AuxPattern::IDiff) && self.l_s < 2 {
            return Err(Error::InvalidConfig(
                "difference patterns need l_s >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch's logged metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_aux: f64,
    /// Mean codeword entropy of the plain-softmax codeword.
    pub entropy: f64,
    pub val_ner: f64,
}

/// Epoch-by-epoch training history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_val_ner(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_ner)
    }

    pub fn final_entropy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.entropy)
    }

    /// `epoch,L_CE,L_Aux,entropy,val_NER` rows.
    pub fn to_csv<W: std::io::Write>(&self, writer: &mut W) -> Result<()> {
        writeln!(writer, "epoch,L_CE,L_Aux,entropy,val_NER")?;
        for e in &self.epochs {
            writeln!(
                writer,
                "{},{:.6},{:.6},{:.6},{:.6}",
                e.epoch, e.l_ce, e.l_aux, e.entropy, e.val_ner
            )?;
        }
        Ok(())
    }
}

fn one_hot_batch(seqs: &[DnaSequence], len: usize) -> Arr {
    let mut out = Array3::<f32>::zeros((seqs.len(), len, 4));
    for (bi, s) in seqs.iter().enumerate() {
        debug_assert_eq!(s.len(), len);
        for (i, &b) in s.symbols().iter().enumerate() {
            out[[bi, i, b as usize]] = 1.0;
        }
    }
    out.into_dyn()
}

/// Profiles for a batch of discrete codewords, resampling the rare draw
/// whose insertions overflow the padded length.
fn batch_profiles(
    codewords: &[DnaSequence],
    channel: &ChannelSpec,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ErrorProfile>> {
    codewords
        .iter()
        .map(|cw| {
            loop {
                let p = channel.generate_for(cw, rng)?;
                if p.len() <= max_len && p.output_len(cw.len()) > 0 {
                    return Ok(p);
                }
            }
        })
        .collect()
}

fn profile_one_hot_batch(profiles: &[ErrorProfile], max_len: usize) -> Arr {
    let mut out = Array3::<f32>::zeros((profiles.len(), max_len, PROFILE_VOCAB));
    for (bi, p) in profiles.iter().enumerate() {
        for (i, &e) in p.events().iter().enumerate() {
            out[[bi, i, e as usize]] = 1.0;
        }
        for i in p.len()..max_len {
            out[[bi, i, PROFILE_PAD as usize]] = 1.0;
        }
    }
    out.into_dyn()
}

/// Index targets as a one-hot mask for cross-entropy, `[B, len, 4]`.
fn ce_mask(seqs: &[DnaSequence], len: usize) -> Arr {
    one_hot_batch(seqs, len)
}

/// Mean per-row entropy of softmax applied to `[B, T, 4]` logits.
fn softmax_entropy(logits: &Arr) -> f64 {
    let mut total = 0.0f64;
    let mut rows = 0usize;
    for row in logits.rows() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for &v in row.iter() {
            sum += ((v - max) as f64).exp();
        }
        let ln_sum = sum.ln();
        let mut h = 0.0f64;
        for &v in row.iter() {
            let lp = (v - max) as f64 - ln_sum;
            h -= lp.exp() * lp;
        }
        total += h;
        rows += 1;
    }
    total / rows as f64
}

/// Two-phase training, phase two: the channel model stays frozen while
/// the encoder/decoder minimize reconstruction plus weighted auxiliary
/// (and optional entropy) losses.
pub fn train_codec(
    cfg: &CodecTrainConfig,
    dids: &DidsModel,
) -> Result<(CodecModel, TrainHistory)> {
    cfg.validate()?;
    if dids.arch.max_len != cfg.max_len {
        return Err(Error::ShapeMismatch(format!(
            "channel model pads to {}, codec expects {}",
            dids.arch.max_len, cfg.max_len
        )));
    }
    let dids_fingerprint = dids.params.fingerprint();
    let arch = cfg.arch();
    let mut model = CodecModel::new(arch, cfg.seed_train)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed_train);
    data_rng.set_stream(1);
    let mut gumbel_rng = ChaCha8Rng::seed_from_u64(cfg.seed_train);
    gumbel_rng.set_stream(2);
    let mut opt = Adam::new(&model.params, cfg.lr, cfg.warmup);
    let mut history = TrainHistory::default();
    let aux_len = arch.aux_len();

    for epoch in 0..cfg.epochs {
        let mut sum_ce = 0.0f64;
        let mut sum_aux = 0.0f64;
        let mut sum_entropy = 0.0f64;
        for step in 0..cfg.steps_per_epoch {
            let sources: Vec<DnaSequence> = (0..cfg.batch)
                .map(|_| DnaSequence::random(cfg.l_s, &mut data_rng).expect("l_s >= 1"))
                .collect();
            let aux_targets: Vec<DnaSequence> = sources
                .iter()
                .map(|s| aux_target(s, cfg.pattern))
                .collect::<Result<_>>()?;

            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.params, true);
            let src = tape.constant(one_hot_batch(&sources, cfg.l_s));
            let enc_logits = model.encoder_logits(&mut tape, &mut binder, src);
            let c_logits = tape.narrow(enc_logits, 1, 0, cfg.l_c);
            let r_logits = tape.narrow(enc_logits, 1, cfg.l_c, aux_len);

            // disturbance-based discretization (or the softmax ablation)
            let codeword = match cfg.discretization {
                Discretization::Gumbel => {
                    let g = gumbel_noise(&[cfg.batch, cfg.l_c, 4], &mut gumbel_rng);
                    let noisy = tape.add_const(c_logits, &g);
                    let scaled = tape.scale(noisy, 1.0 / cfg.tau);
                    tape.softmax_last(scaled)
                }
                Discretization::Softmax => tape.softmax_last(c_logits),
            };

            // entropy of the inference-time (plain softmax) codeword
            sum_entropy += softmax_entropy(tape.value(c_logits));

            // channel profiles depend on the current discrete codeword
            let codewords: Vec<DnaSequence> = {
                let c_val = tape.value(codeword);
                (0..cfg.batch)
                    .map(|bi| {
                        let rows = c_val.index_axis(Axis(0), bi);
                        let symbols: Vec<u8> = (0..cfg.l_c)
                            .map(|i| {
                                let mut best = 0u8;
                                let mut best_v = f32::NEG_INFINITY;
                                for j in 0..4 {
                                    let v = rows[[i, j]];
                                    if v > best_v {
                                        best_v = v;
                                        best = j as u8;
                                    }
                                }
                                best
                            })
                            .collect();
                        DnaSequence::new(symbols).expect("l_c >= 1")
                    })
                    .collect()
            };
            let profiles = batch_profiles(&codewords, &cfg.channel, cfg.max_len, &mut data_rng)?;
            let p_onehot = tape.constant(profile_one_hot_batch(&profiles, cfg.max_len));

            // pad the codeword in-graph so gradients flow back to it
            let zero_col = tape.constant(Arr::zeros(IxDyn(&[cfg.batch, cfg.l_c, 1])));
            let c5 = tape.concat(codeword, zero_col, 2);
            let mut pad_block = Array3::<f32>::zeros((cfg.batch, cfg.max_len - cfg.l_c, 5));
            pad_block.index_axis_mut(Axis(2), PAD_CHANNEL).fill(1.0);
            let pad_rows = tape.constant(pad_block.into_dyn());
            let c_pad = tape.concat(c5, pad_rows, 1);

            // frozen channel model: constants on the tape, gradients pass through
            let mut dids_binder = Binder::new(&dids.params, false);
            let dids_logits = dids.forward_logits(&mut tape, &mut dids_binder, c_pad, p_onehot);
            let corrupted = tape.softmax_last(dids_logits);

            let dec_logits = model.decoder_logits(&mut tape, &mut binder, corrupted);
            let dec_logp = tape.log_softmax_last(dec_logits);
            let ce_weights = ce_mask(&sources, cfg.l_s);
            let ce_terms = tape.mul_const(dec_logp, ce_weights);
            let ce_sum = tape.sum_all(ce_terms);
            let loss_ce = tape.scale(ce_sum, -1.0 / cfg.batch as f32);

            let r_logp = tape.log_softmax_last(r_logits);
            let aux_weights = ce_mask(&aux_targets, aux_len);
            let aux_terms = tape.mul_const(r_logp, aux_weights);
            let aux_sum = tape.sum_all(aux_terms);
            let loss_aux = tape.scale(aux_sum, -1.0 / cfg.batch as f32);

            let weighted_aux = tape.scale(loss_aux, cfg.mu as f32);
            let mut loss = tape.add(loss_ce, weighted_aux);
            if cfg.lambda > 0.0 {
                let logc = tape.log_clamp(codeword, 1e-12);
                let c_logc = tape.mul(codeword, logc);
                let h_sum = tape.sum_all(c_logc);
                let loss_en = tape.scale(h_sum, -1.0 / cfg.batch as f32);
                let weighted_en = tape.scale(loss_en, cfg.lambda as f32);
                loss = tape.add(loss, weighted_en);
            }

            let ce_val = tape.scalar(loss_ce) as f64;
            let aux_val = tape.scalar(loss_aux) as f64;
            let total_val = tape.scalar(loss) as f64;
            if !total_val.is_finite() {
                return Err(Error::Diverged {
                    step: epoch * cfg.steps_per_epoch + step,
                    metric: "loss",
                    value: total_val,
                });
            }
            sum_ce += ce_val;
            sum_aux += aux_val;

            let mut grads = tape.backward(loss);
            let per_param = binder.collect_grads(&mut grads);
            opt.step(&mut model.params, &per_param);
        }

        // validation through the exact conventional channel
        let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed_train);
        val_rng.set_stream(1_000 + epoch as u64);
        let val = test_pipeline_named(
            &model,
            &cfg.channel,
            "validation",
            cfg.val_sequences,
            &mut val_rng,
        )?;
        history.epochs.push(EpochRecord {
            epoch,
            l_ce: sum_ce / cfg.steps_per_epoch as f64,
            l_aux: sum_aux / cfg.steps_per_epoch as f64,
            entropy: sum_entropy / cfg.steps_per_epoch as f64,
            val_ner: val.ner,
        });
    }

    debug_assert_eq!(
        dids.params.fingerprint(),
        dids_fingerprint,
        "frozen channel parameters changed during codec training"
    );
    Ok((model, history))
}

/// Test-mode encoding of one source: codeword rows are exact one-hots via
/// argmax; train mode applies the Gumbel softmax rowwise with the given
/// temperature. The auxiliary reconstruction always uses plain softmax.
pub fn encode(
    model: &CodecModel,
    s: &DnaSequence,
    mode: EncodeMode,
    tau: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(SimplexSequence, SimplexSequence)> {
    let mut pair = encode_batch(model, std::slice::from_ref(s), mode, tau, rng)?;
    Ok(pair.pop().expect("one input"))
}

/// Batched [`encode`].
pub fn encode_batch(
    model: &CodecModel,
    sources: &[DnaSequence],
    mode: EncodeMode,
    tau: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(SimplexSequence, SimplexSequence)>> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let arch = &model.arch;
    for s in sources {
        if s.len() != arch.l_s {
            return Err(Error::ShapeMismatch(format!(
                "source length {} does not match l_s {}",
                s.len(),
                arch.l_s
            )));
        }
    }
    let aux_len = arch.aux_len();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let src = tape.constant(one_hot_batch(sources, arch.l_s));
    let enc_logits = model.encoder_logits(&mut tape, &mut binder, src);
    let logits = tape.value(enc_logits);
    let mut out = Vec::with_capacity(sources.len());
    for bi in 0..sources.len() {
        let rows = logits.index_axis(Axis(0), bi);
        let mut c_rows = Array2::<f32>::zeros((arch.l_c, 4));
        for i in 0..arch.l_c {
            let x = [rows[[i, 0]], rows[[i, 1]], rows[[i, 2]], rows[[i, 3]]];
            match mode {
                EncodeMode::Train => {
                    let g = [
                        gumbel_from_uniform(rng.random::<f64>()) as f32,
                        gumbel_from_uniform(rng.random::<f64>()) as f32,
                        gumbel_from_uniform(rng.random::<f64>()) as f32,
                        gumbel_from_uniform(rng.random::<f64>()) as f32,
                    ];
                    let row = gumbel_softmax(&x, tau, &g)?;
                    for j in 0..4 {
                        c_rows[[i, j]] = row[j];
                    }
                }
                EncodeMode::Test => {
                    let mut best = 0usize;
                    let mut best_v = f32::NEG_INFINITY;
                    for (j, &v) in x.iter().enumerate() {
                        if v > best_v {
                            best_v = v;
                            best = j;
                        }
                    }
                    c_rows[[i, best]] = 1.0;
                }
            }
        }
        let mut r_rows = Array2::<f32>::zeros((aux_len, 4));
        for i in 0..aux_len {
            let x = [
                rows[[arch.l_c + i, 0]],
                rows[[arch.l_c + i, 1]],
                rows[[arch.l_c + i, 2]],
                rows[[arch.l_c + i, 3]],
            ];
            let row = gumbel_softmax(&x, 1.0, &[0.0; 4])?; // plain softmax
            for j in 0..4 {
                r_rows[[i, j]] = row[j];
            }
        }
        out.push((
            SimplexSequence::from_rows_unchecked(c_rows),
            SimplexSequence::from_rows_unchecked(r_rows),
        ));
    }
    Ok(out)
}

/// Decodes one padded 5-channel corrupted codeword into `l_s` base
/// distributions.
pub fn decode(model: &CodecModel, corrupted: &SimplexSequence) -> Result<SimplexSequence> {
    let mut out = decode_batch(model, std::slice::from_ref(corrupted))?;
    Ok(out.pop().expect("one input"))
}

/// Batched [`decode`].
pub fn decode_batch(
    model: &CodecModel,
    corrupted: &[SimplexSequence],
) -> Result<Vec<SimplexSequence>> {
    let arch = &model.arch;
    let mut stacked = Array3::<f32>::zeros((corrupted.len(), arch.max_len, 5));
    for (bi, c) in corrupted.iter().enumerate() {
        if c.channels() != 5 || c.len() != arch.max_len {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects {}x5 padded rows, got {}x{}",
                arch.max_len,
                c.len(),
                c.channels()
            )));
        }
        for (i, row) in c.rows().outer_iter().enumerate() {
            for j in 0..5 {
                stacked[[bi, i, j]] = row[j];
            }
        }
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let x = tape.constant(stacked.into_dyn());
    let logits = model.decoder_logits(&mut tape, &mut binder, x);
    let probs = tape.softmax_last(logits);
    let vals = tape.value(probs);
    let mut out = Vec::with_capacity(corrupted.len());
    for bi in 0..corrupted.len() {
        let mut rows = Array2::<f32>::zeros((arch.l_s, 4));
        rows.assign(&vals.index_axis(Axis(0), bi));
        for mut row in rows.rows_mut() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            if sum > 0.0 {
                let inv = (1.0 / sum) as f32;
                row.mapv_inplace(|v| v * inv);
            }
        }
        out.push(SimplexSequence::from_rows_unchecked(rows));
    }
    Ok(out)
}

/// Plain-softmax codewords (the test-phase continuous form), batched.
fn encode_soft_batch(
    model: &CodecModel,
    sources: &[DnaSequence],
) -> Result<Vec<SimplexSequence>> {
    let arch = &model.arch;
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let src = tape.constant(one_hot_batch(sources, arch.l_s));
    let enc_logits = model.encoder_logits(&mut tape, &mut binder, src);
    let c_logits = tape.narrow(enc_logits, 1, 0, arch.l_c);
    let probs = tape.softmax_last(c_logits);
    let vals = tape.value(probs);
    let mut out = Vec::with_capacity(sources.len());
    for bi in 0..sources.len() {
        let mut rows = Array2::<f32>::zeros((arch.l_c, 4));
        rows.assign(&vals.index_axis(Axis(0), bi));
        out.push(SimplexSequence::from_rows_unchecked(normalize_rows(rows)));
    }
    Ok(out)
}

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

/// Full test-phase pipeline: encode with argmax, corrupt through the
/// exact conventional channel, decode, compare.
pub fn test_pipeline(
    model: &CodecModel,
    channel: &ChannelSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetricsRecord> {
    test_pipeline_named(model, channel, "channel", n, rng)
}

pub fn test_pipeline_named(
    model: &CodecModel,
    channel: &ChannelSpec,
    channel_name: &str,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetricsRecord> {
    channel.validate()?;
    let arch = &model.arch;
    let pad = arch.pad_scheme();
    let start = Instant::now();
    let mut ner_total = 0.0f64;
    let mut entropy_total = 0.0f64;
    let mut done = 0usize;
    let chunk = 64usize;
    while done < n {
        let b = chunk.min(n - done);
        let sources: Vec<DnaSequence> = (0..b)
            .map(|_| DnaSequence::random(arch.l_s, rng).expect("l_s >= 1"))
            .collect();
        // one continuous pass: entropy column + argmax codewords
        let soft = encode_soft_batch(model, &sources)?;
        let mut corrupted_batch = Vec::with_capacity(b);
        for c in &soft {
            entropy_total += mean_entropy(c);
            let codeword = crate::seq::argmax_discretize(c)?;
            let profile = loop {
                let p = channel.generate_for(&codeword, rng)?;
                if p.len() <= arch.max_len {
                    break p;
                }
            };
            match apply_profile_discrete(&codeword, &profile) {
                Ok(seq) => {
                    // clip the rare insert-heavy draw to capacity
                    let seq = if seq.len() > arch.max_len {
                        DnaSequence::new(seq.symbols()[..arch.max_len].to_vec())?
                    } else {
                        seq
                    };
                    corrupted_batch.push(pad.pad_to(&seq.to_one_hot())?);
                }
                Err(Error::EmptyChannelOutput) => {
                    // everything deleted: the decoder sees pure padding
                    corrupted_batch.push(all_pad_rows(arch.max_len));
                }
                Err(e) => return Err(e),
            }
        }
        let decoded = decode_batch(model, &corrupted_batch)?;
        for (s, d) in sources.iter().zip(decoded.iter()) {
            let s_hat = crate::seq::argmax_discretize(d)?;
            ner_total += ner(s, &s_hat)?;
        }
        done += b;
    }
    Ok(MetricsRecord {
        channel: channel_name.to_string(),
        code_rate: arch.code_rate(),
        n,
        ner: ner_total / n as f64,
        entropy: entropy_total / n as f64,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn all_pad_rows(max_len: usize) -> SimplexSequence {
    let mut rows = Array2::<f32>::zeros((max_len, 5));
    rows.column_mut(PAD_CHANNEL).fill(1.0);
    SimplexSequence::from_rows_unchecked(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> CodecArch {
        CodecArch {
            l_s: 4,
            l_c: 6,
            width: 16,
            heads: 2,
            layers: 1,
            aux: AuxPattern::I,
            max_len: 22,
        }
    }

    #[test]
    fn gumbel_noise_examples() {
        // u = 1/e gives exactly 0
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-12);
        // clamping keeps extreme draws finite
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn gumbel_softmax_examples() {
        // zero noise, tau 1, flat logits -> uniform
        let out = gumbel_softmax(&[0.0; 4], 1.0, &[0.0; 4]).unwrap();
        for v in out {
            assert!((v - 0.25).abs() < 1e-6);
        }
        // low temperature sharpens: softmax(10,0,0,0)
        let out = gumbel_softmax(&[1.0, 0.0, 0.0, 0.0], 0.1, &[0.0; 4]).unwrap();
        assert!((out[0] - 0.99986).abs() < 1e-4, "{out:?}");
        for v in &out[1..] {
            assert!((v - 4.5e-5).abs() < 1e-5);
        }
        assert!(gumbel_softmax(&[0.0; 4], 0.0, &[0.0; 4]).is_err());
    }

    #[test]
    fn ce_loss_examples() {
        let truth = DnaSequence::parse("A").unwrap();
        // perfect one-hot prediction -> 0 (within the 1e-8 clamp)
        let perfect =
            SimplexSequence::from_rows(ndarray::array![[1.0f32, 0.0, 0.0, 0.0]]).unwrap();
        assert!(ce_loss(&perfect, &truth).unwrap().abs() < 1e-9);
        // uniform prediction of length L -> L ln 4
        let uniform = SimplexSequence::from_rows(ndarray::Array2::from_elem((3, 4), 0.25)).unwrap();
        let truth3 = DnaSequence::parse("ATG").unwrap();
        let l = ce_loss(&uniform, &truth3).unwrap();
        assert!((l - 3.0 * 4.0f64.ln()).abs() < 1e-6);
        // halved probability -> ln 2
        let half =
            SimplexSequence::from_rows(ndarray::array![[0.5f32, 0.25, 0.125, 0.125]]).unwrap();
        let l = ce_loss(&half, &truth).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
        // length mismatch rejected
        assert!(ce_loss(&uniform, &truth).is_err());
    }

    #[test]
    fn entropy_constraint_examples() {
        let one_hot = DnaSequence::parse("ATGC").unwrap().to_one_hot();
        assert_eq!(entropy_constraint(&one_hot), 0.0);
        let uniform =
            SimplexSequence::from_rows(ndarray::Array2::from_elem((1, 4), 0.25)).unwrap();
        assert!((entropy_constraint(&uniform) - 4.0f64.ln()).abs() < 1e-6);
        let many = SimplexSequence::from_rows(ndarray::Array2::from_elem((150, 4), 0.25)).unwrap();
        assert!((entropy_constraint(&many) - 150.0 * 4.0f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn aux_target_examples() {
        let s = DnaSequence::new(vec![0, 0, 0, 0]).unwrap();
        assert_eq!(aux_target(&s, AuxPattern::Pos).unwrap().symbols(), &[0, 1, 2, 3]);
        let s = DnaSequence::new(vec![0, 1, 2, 3]).unwrap();
        assert_eq!(aux_target(&s, AuxPattern::Diff).unwrap().symbols(), &[3, 3, 3]);
        assert_eq!(aux_target(&s, AuxPattern::I).unwrap().symbols(), s.symbols());
        assert_eq!(aux_target(&s, AuxPattern::IDiff).unwrap().len(), 7);
        assert_eq!(aux_target(&s, AuxPattern::IPos).unwrap().len(), 8);
        assert!(AuxPattern::parse("I+Pos").is_ok());
        assert!(AuxPattern::parse("bogus").is_err());
    }

    #[test]
    fn aux_targets_are_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = DnaSequence::random(17, &mut rng).unwrap();
            // recover from (s_0, Diff)
            let diff = aux_target(&s, AuxPattern::Diff).unwrap();
            let mut rec = vec![s.symbols()[0]];
            for &d in diff.symbols() {
                let prev = *rec.last().unwrap();
                rec.push((prev + 4 - d) % 4);
            }
            assert_eq!(rec, s.symbols());
            // recover from Pos
            let pos = aux_target(&s, AuxPattern::Pos).unwrap();
            let rec: Vec<u8> = pos
                .symbols()
                .iter()
                .enumerate()
                .map(|(i, &v)| ((v as usize + 4 * 17 - i) % 4) as u8)
                .collect();
            assert_eq!(rec, s.symbols());
        }
    }

    #[test]
    fn gs_with_zero_noise_equals_softmax() {
        let x = [0.3f32, -1.2, 2.0, 0.5];
        let gs = gumbel_softmax(&x, 1.0, &[0.0; 4]).unwrap();
        let max = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exp: Vec<f64> = x.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exp.iter().sum();
        for (a, e) in gs.iter().zip(exp.iter()) {
            assert!((*a as f64 - e / sum).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_decode_shapes() {
        let model = CodecModel::new(tiny_arch(), 0).unwrap();
        let s = DnaSequence::parse("ATGC").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, r) = encode(&model, &s, EncodeMode::Train, 1.0, &mut rng).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(r.len(), 4);
        // test mode emits exact one-hots
        let (c_test, _) = encode(&model, &s, EncodeMode::Test, 1.0, &mut rng).unwrap();
        for row in c_test.rows().outer_iter() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            assert_eq!((ones, zeros), (1, 3));
        }
        // train mode with a fixed seed is deterministic
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = encode(&model, &s, EncodeMode::Train, 1.0, &mut r1).unwrap();
        let b = encode(&model, &s, EncodeMode::Train, 1.0, &mut r2).unwrap();
        assert_eq!(a.0.rows(), b.0.rows());
        // wrong source length rejected
        let bad = DnaSequence::parse("ATGCA").unwrap();
        assert!(encode(&model, &bad, EncodeMode::Test, 1.0, &mut rng).is_err());

        // decoder: padded input -> l_s rows summing to one
        let pad = model.arch.pad_scheme();
        let corrupted = pad.pad_to(&DnaSequence::parse("ATGCAT").unwrap().to_one_hot()).unwrap();
        let decoded = decode(&model, &corrupted).unwrap();
        assert_eq!(decoded.len(), 4);
        for row in decoded.rows().outer_iter() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
        // shorter corrupted input still yields l_s rows
        let shorter = pad.pad_to(&DnaSequence::parse("ATG").unwrap().to_one_hot()).unwrap();
        assert_eq!(decode(&model, &shorter).unwrap().len(), 4);
        // unpadded input rejected
        assert!(decode(&model, &DnaSequence::parse("ATG").unwrap().to_one_hot()).is_err());
    }

    #[test]
    fn config_validation() {
        let chan = crate::channel::preset("Hom").unwrap();
        let mut cfg = CodecTrainConfig::desk(chan.clone(), 1, 2);
        cfg.validate().unwrap();
        cfg.seed_test = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = CodecTrainConfig::desk(chan.clone(), 1, 2);
        cfg.l_s = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = CodecTrainConfig::desk(chan, 1, 2);
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
    }
}
