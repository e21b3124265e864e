//! Metrics and experiment drivers: nucleobase error rate, codeword
//! entropy, cross-channel train/test matrices, and code-rate sweeps.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSpec;
use crate::codec::{test_pipeline_named, train_codec, CodecModel, CodecTrainConfig, TrainHistory};
use crate::dids::DidsModel;
use crate::error::{Error, Result};
use crate::seq::{DnaSequence, SimplexSequence};

pub mod plot;

/// One evaluation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub channel: String,
    pub code_rate: f64,
    pub n: usize,
    pub ner: f64,
    pub entropy: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn csv_header() -> &'static str {
        "train_channel,test_channel,code_rate,n,ner,entropy,seconds"
    }

    pub fn csv_row(&self, train_channel: &str) -> String {
        format!(
            "{},{},{:.6},{},{:.6},{:.6},{:.3}",
            train_channel, self.channel, self.code_rate, self.n, self.ner, self.entropy,
            self.seconds
        )
    }
}

/// Writes evaluation cells as `train_channel,test_channel,...` rows.
pub fn write_metrics_csv<W: std::io::Write>(
    writer: &mut W,
    rows: &[(String, MetricsRecord)],
) -> Result<()> {
    writeln!(writer, "{}", MetricsRecord::csv_header())?;
    for (train_channel, record) in rows {
        writeln!(writer, "{}", record.csv_row(train_channel))?;
    }
    Ok(())
}

/// Fraction of positions where two equal-length sequences disagree.
pub fn ner(s: &DnaSequence, s_hat: &DnaSequence) -> Result<f64> {
    if s.len() != s_hat.len() {
        return Err(Error::ShapeMismatch(format!(
            "sequences of length {} and {} are not comparable",
            s.len(),
            s_hat.len()
        )));
    }
    let mismatches = s
        .symbols()
        .iter()
        .zip(s_hat.symbols())
        .filter(|(a, b)| a != b)
        .count();
    Ok(mismatches as f64 / s.len() as f64)
}

/// Mean over rows of the Shannon entropy (natural log), `0 ln 0 = 0`.
pub fn mean_entropy(c: &SimplexSequence) -> f64 {
    let mut total = 0.0f64;
    for row in c.rows().outer_iter() {
        for &v in row.iter() {
            let v = v as f64;
            if v > 0.0 {
                total -= v * v.ln();
            }
        }
    }
    total / c.len() as f64
}

/// NER of every (codec, channel) pair: entry `(i, j)` tests codec `i`
/// on channel `j` with `n` fresh sequences. All codecs must share
/// source and codeword lengths.
pub fn cross_matrix(
    codecs: &[(String, &CodecModel)],
    channels: &[(String, ChannelSpec)],
    n: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<(String, MetricsRecord)>)> {
    if codecs.is_empty() || channels.is_empty() {
        return Err(Error::InvalidConfig("empty cross matrix".into()));
    }
    let (l_s, l_c) = (codecs[0].1.arch.l_s, codecs[0].1.arch.l_c);
    for (name, codec) in codecs {
        if codec.arch.l_s != l_s || codec.arch.l_c != l_c {
            return Err(Error::InvalidConfig(format!(
                "codec '{name}' has mismatched lengths"
            )));
        }
    }
    let mut matrix = Array2::<f64>::zeros((codecs.len(), channels.len()));
    let mut rows = Vec::with_capacity(codecs.len() * channels.len());
    for (i, (codec_name, codec)) in codecs.iter().enumerate() {
        for (j, (channel_name, spec)) in channels.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((i * channels.len() + j) as u64);
            let record = test_pipeline_named(codec, spec, channel_name, n, &mut rng)?;
            matrix[[i, j]] = record.ner;
            rows.push((codec_name.clone(), record));
        }
    }
    Ok((matrix, rows))
}

/// Trains one codec per source length against a fixed channel and codeword
/// length, then evaluates each: the code-rate sweep.
pub fn rate_sweep(
    l_s_list: &[usize],
    l_c: usize,
    channel: &ChannelSpec,
    template: &CodecTrainConfig,
    dids: &DidsModel,
    n: usize,
) -> Result<Vec<(MetricsRecord, CodecModel, TrainHistory)>> {
    let mut out = Vec::with_capacity(l_s_list.len());
    for &l_s in l_s_list {
        let mut cfg = template.clone();
        cfg.l_s = l_s;
        cfg.l_c = l_c;
        cfg.channel = channel.clone();
        cfg.validate()?;
        let (model, history) = train_codec(&cfg, dids)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_test);
        let mut record = test_pipeline_named(&model, channel, "sweep", n, &mut rng)?;
        record.code_rate = l_s as f64 / l_c as f64;
        out.push((record, model, history));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> DnaSequence {
        DnaSequence::parse(s).unwrap()
    }

    #[test]
    fn ner_examples() {
        assert_eq!(ner(&seq("ATGC"), &seq("ATGC")).unwrap(), 0.0);
        assert_eq!(ner(&seq("AAAA"), &seq("AAAT")).unwrap(), 0.25);
        assert!(ner(&seq("AAA"), &seq("AAAA")).is_err());
    }

    #[test]
    fn ner_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = DnaSequence::random(24, &mut rng).unwrap();
            let b = DnaSequence::random(24, &mut rng).unwrap();
            let c = DnaSequence::random(24, &mut rng).unwrap();
            let ab = ner(&a, &b).unwrap();
            let ba = ner(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert_eq!(ner(&a, &a).unwrap(), 0.0);
            if ab == 0.0 {
                assert_eq!(a, b);
            }
            let ac = ner(&a, &c).unwrap();
            let cb = ner(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-12);
        }
    }

    #[test]
    fn entropy_examples() {
        let one_hot = seq("ATGCATGC").to_one_hot();
        assert_eq!(mean_entropy(&one_hot), 0.0);
        let uniform =
            SimplexSequence::from_rows(ndarray::Array2::from_elem((5, 4), 0.25)).unwrap();
        assert!((mean_entropy(&uniform) - 4.0f64.ln()).abs() < 1e-6);
        // half one-hot, half uniform -> half of ln 4
        let mut rows = ndarray::Array2::<f32>::zeros((2, 4));
        rows[[0, 0]] = 1.0;
        rows.row_mut(1).fill(0.25);
        let mixed = SimplexSequence::from_rows(rows).unwrap();
        assert!((mean_entropy(&mixed) - 0.5 * 4.0f64.ln()).abs() < 1e-6);
        // bounded by ln 4 and invariant under row permutation
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = DnaSequence::random(10, &mut rng).unwrap().to_one_hot();
            assert!(mean_entropy(&s) <= 4.0f64.ln() + 1e-9);
        }
    }

    #[test]
    fn entropy_row_permutation_invariant() {
        let rows = ndarray::array![
            [0.7f32, 0.1, 0.1, 0.1],
            [0.25, 0.25, 0.25, 0.25],
            [1.0, 0.0, 0.0, 0.0]
        ];
        let fwd = SimplexSequence::from_rows(rows.clone()).unwrap();
        let mut rev_rows = ndarray::Array2::<f32>::zeros((3, 4));
        for i in 0..3 {
            rev_rows.row_mut(i).assign(&rows.row(2 - i));
        }
        let rev = SimplexSequence::from_rows(rev_rows).unwrap();
        assert!((mean_entropy(&fwd) - mean_entropy(&rev)).abs() < 1e-12);
    }

    #[test]
    fn random_pair_ner_monte_carlo() {
        // independent uniform pairs of length 10^4 disagree at 3/4 of positions
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DnaSequence::random(10_000, &mut rng).unwrap();
        let b = DnaSequence::random(10_000, &mut rng).unwrap();
        let v = ner(&a, &b).unwrap();
        assert!((v - 0.75).abs() < 0.02, "{v}");
    }

    #[test]
    fn metrics_csv_shape() {
        let record = MetricsRecord {
            channel: "Hom".into(),
            code_rate: 0.67,
            n: 10,
            ner: 0.01,
            entropy: 0.05,
            seconds: 1.5,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[("Hom".into(), record)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), MetricsRecord::csv_header());
        assert!(lines.next().unwrap().starts_with("Hom,Hom,0.67"));
    }
}
