//! Channel-customized IDS-correcting codes over the DNA alphabet.
//!
//! The crate has three tiers:
//!
//! - **Channel layer** ([`seq`], [`profile`], [`channel`]): discrete and
//!   simplex sequence types, replayable error profiles, and profile
//!   generators for every supported channel configuration.
//! - **Model layer** ([`nn`], [`dids`], [`codec`]): a trained
//!   sequence-to-sequence stand-in for the IDS channel that admits
//!   gradients, and the encoder/decoder pair that learns a code through
//!   it using disturbance-based discretization.
//! - **Evaluation layer** ([`eval`], [`ckpt`]): error-rate metrics,
//!   cross-channel experiment drivers, and checkpoint persistence.

pub mod channel;
pub mod ckpt;
pub mod codec;
pub mod dids;
pub mod error;
pub mod eval;
pub mod nn;
pub mod profile;
pub mod seq;

pub use channel::{
    channel_presets, preset, wrap_external_channel, AdapterOutcome, ChannelKind, ChannelSpec,
    KmerTable,
};
pub use ckpt::{load_codec, load_dids, save_codec, save_dids};
pub use codec::{
    aux_loss, aux_target, ce_loss, decode, decode_batch, encode, encode_batch,
    entropy_constraint, gumbel_from_uniform, gumbel_noise, gumbel_softmax, test_pipeline,
    train_codec, AuxPattern, CodecArch, CodecModel, CodecTrainConfig, Discretization, EncodeMode,
    EpochRecord, TrainHistory,
};
pub use dids::{
    eval_dids_accuracy, grad_probe, grad_probe_profile, kld_loss, train_dids, DidsArch, DidsModel,
    DidsTrainConfig, EditKind,
};
pub use error::{Error, Result};
pub use eval::{cross_matrix, mean_entropy, ner, rate_sweep, write_metrics_csv, MetricsRecord};
pub use profile::{
    apply_profile_discrete, apply_profile_simplex, infer_profile, levenshtein, roll_substitute,
    ErrorProfile,
};
pub use seq::{argmax_discretize, DnaSequence, PadScheme, SimplexSequence};
