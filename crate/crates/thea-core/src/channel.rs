//! Error-profile generators: position-independent, position-ramped, and
//! k-mer context channels, plus the adapter for external channel
//! simulators that produce (input, output) sequence pairs.
//!
//! Generators draw one categorical event per input position. An
//! insertion event emits its inserted base immediately before that
//! position's own match symbol, so consecutive insertions arise only
//! across neighboring positions.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{self, ErrorProfile, EV_DELETE, EV_INSERT_BASE, EV_MATCH};
use crate::seq::DnaSequence;

/// Levenshtein threshold above which the external-channel adapter
/// rejects an observed pair as an outlier.
pub const OUTLIER_DISTANCE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    /// Same error rate at every position.
    Iid,
    /// Error rate interpolates linearly from `rate_curve.0` to `rate_curve.1`.
    Positional,
    /// Per-position rates looked up from the k-mer ending at that position.
    Kmer,
    /// Profiles come from observed (input, output) pairs, not a generator.
    External,
}

/// Declarative description of a profile generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    /// Probability of an error event per position (iid / positional mean).
    #[serde(default)]
    pub total_rate: f64,
    /// (insertion, deletion, substitution) shares, summing to 1.
    #[serde(default = "default_proportions")]
    pub proportions: (f64, f64, f64),
    /// (start, end) rates for the positional kind.
    #[serde(default)]
    pub rate_curve: (f64, f64),
    /// Context width for the kmer kind.
    #[serde(default = "default_kmer_k")]
    pub kmer_k: usize,
    /// Per-context (ins, del, sub) rates for the kmer kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kmer_table: Option<KmerTable>,
    /// Default RNG seed for data generation tied to this spec.
    #[serde(default)]
    pub seed: u64,
}

fn default_proportions() -> (f64, f64, f64) {
    (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
}

fn default_kmer_k() -> usize {
    3
}

impl ChannelSpec {
    pub fn iid(total_rate: f64, proportions: (f64, f64, f64), seed: u64) -> Self {
        Self {
            kind: ChannelKind::Iid,
            total_rate,
            proportions,
            rate_curve: (total_rate, total_rate),
            kmer_k: default_kmer_k(),
            kmer_table: None,
            seed,
        }
    }

    pub fn positional(start: f64, end: f64, proportions: (f64, f64, f64), seed: u64) -> Self {
        Self {
            kind: ChannelKind::Positional,
            total_rate: 0.5 * (start + end),
            proportions,
            rate_curve: (start, end),
            kmer_k: default_kmer_k(),
            kmer_table: None,
            seed,
        }
    }

    pub fn kmer(table: KmerTable, seed: u64) -> Self {
        let mean = table.mean_total_rate();
        Self {
            kind: ChannelKind::Kmer,
            total_rate: mean,
            proportions: default_proportions(),
            rate_curve: (mean, mean),
            kmer_k: table.k,
            kmer_table: Some(table),
            seed,
        }
    }

    pub fn external(seed: u64) -> Self {
        Self {
            kind: ChannelKind::External,
            total_rate: 0.0,
            proportions: default_proportions(),
            rate_curve: (0.0, 0.0),
            kmer_k: default_kmer_k(),
            kmer_table: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_rate = |r: f64, what: &str| -> Result<()> {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidSpec(format!("{what} {r} must lie in [0, 1)")));
            }
            Ok(())
        };
        match self.kind {
            ChannelKind::Iid => {
                check_rate(self.total_rate, "total_rate")?;
                self.validate_proportions()?;
            }
            ChannelKind::Positional => {
                check_rate(self.rate_curve.0, "rate_curve start")?;
                check_rate(self.rate_curve.1, "rate_curve end")?;
                self.validate_proportions()?;
            }
            ChannelKind::Kmer => {
                let table = self
                    .kmer_table
                    .as_ref()
                    .ok_or_else(|| Error::InvalidSpec("kmer kind requires kmer_table".into()))?;
                if table.k != self.kmer_k {
                    return Err(Error::InvalidSpec(format!(
                        "kmer_k {} does not match table k {}",
                        self.kmer_k, table.k
                    )));
                }
                table.validate()?;
            }
            ChannelKind::External => {}
        }
        Ok(())
    }

    fn validate_proportions(&self) -> Result<()> {
        let (i, d, s) = self.proportions;
        if i < 0.0 || d < 0.0 || s < 0.0 {
            return Err(Error::InvalidSpec("proportions must be non-negative".into()));
        }
        if ((i + d + s) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "proportions sum to {}, expected 1",
                i + d + s
            )));
        }
        Ok(())
    }

    /// Mean per-position error rate implied by the spec.
    pub fn mean_rate(&self) -> f64 {
        match self.kind {
            ChannelKind::Positional => 0.5 * (self.rate_curve.0 + self.rate_curve.1),
            ChannelKind::Kmer => self
                .kmer_table
                .as_ref()
                .map(|t| t.mean_total_rate())
                .unwrap_or(0.0),
            _ => self.total_rate,
        }
    }

    /// Generates a profile for a target input length. The kmer kind needs
    /// the concrete sequence; use [`ChannelSpec::generate_for`] instead.
    pub fn generate<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> Result<ErrorProfile> {
        self.validate()?;
        match self.kind {
            ChannelKind::Iid => Ok(gen_iid(length, self.total_rate, self.proportions, rng)),
            ChannelKind::Positional => Ok(gen_positional(
                length,
                self.rate_curve,
                self.proportions,
                rng,
            )),
            ChannelKind::Kmer => Err(Error::InvalidSpec(
                "kmer channels generate per sequence; call generate_for".into(),
            )),
            ChannelKind::External => Err(Error::InvalidSpec(
                "external channels replay observed pairs; call wrap_external_channel".into(),
            )),
        }
    }

    /// Generates a profile for a concrete sequence. Context-free kinds
    /// ignore the sequence content and use its length.
    pub fn generate_for<R: Rng + ?Sized>(
        &self,
        s: &DnaSequence,
        rng: &mut R,
    ) -> Result<ErrorProfile> {
        match self.kind {
            ChannelKind::Kmer => {
                self.validate()?;
                let table = self.kmer_table.as_ref().expect("validated");
                Ok(gen_kmer(s, table, rng))
            }
            _ => self.generate(s.len(), rng),
        }
    }
}

/// Draws the event for one position given per-class probabilities, then
/// appends it (insertions first emit their base, then the position's match).
fn push_event<R: Rng + ?Sized>(
    events: &mut Vec<u8>,
    p_ins: f64,
    p_del: f64,
    p_sub: f64,
    rng: &mut R,
) {
    let u: f64 = rng.random();
    if u < p_ins {
        let base: u8 = rng.random_range(0..4);
        events.push(EV_INSERT_BASE + base);
        events.push(EV_MATCH);
    } else if u < p_ins + p_del {
        events.push(EV_DELETE);
    } else if u < p_ins + p_del + p_sub {
        let k: u8 = rng.random_range(1..=3);
        events.push(k);
    } else {
        events.push(EV_MATCH);
    }
}

fn gen_iid<R: Rng + ?Sized>(
    length: usize,
    rate: f64,
    (pi, pd, ps): (f64, f64, f64),
    rng: &mut R,
) -> ErrorProfile {
    let mut events = Vec::with_capacity(length + 4);
    for _ in 0..length {
        push_event(&mut events, rate * pi, rate * pd, rate * ps, rng);
    }
    ErrorProfile::new(events).expect("generator emits valid events")
}

fn gen_positional<R: Rng + ?Sized>(
    length: usize,
    (start, end): (f64, f64),
    (pi, pd, ps): (f64, f64, f64),
    rng: &mut R,
) -> ErrorProfile {
    let mut events = Vec::with_capacity(length + 4);
    for i in 0..length {
        let t = if length > 1 {
            i as f64 / (length - 1) as f64
        } else {
            0.5
        };
        let rate = start + (end - start) * t;
        push_event(&mut events, rate * pi, rate * pd, rate * ps, rng);
    }
    ErrorProfile::new(events).expect("generator emits valid events")
}

fn gen_kmer<R: Rng + ?Sized>(s: &DnaSequence, table: &KmerTable, rng: &mut R) -> ErrorProfile {
    let mut events = Vec::with_capacity(s.len() + 4);
    let mut context = vec![0u8; table.k]; // start-padded with A
    for &b in s.symbols() {
        context.rotate_left(1);
        context[table.k - 1] = b;
        let [ri, rd, rs] = table.rates(&context);
        push_event(&mut events, ri, rd, rs, rng);
    }
    ErrorProfile::new(events).expect("generator emits valid events")
}

/// Dense per-context (ins, del, sub) rate table over all `4^k` k-mers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmerTable {
    pub k: usize,
    /// Indexed by the base-4 encoding of the k-mer, most significant
    /// digit first; entry `[ins, del, sub]`.
    pub rates: Vec<[f64; 3]>,
}

impl KmerTable {
    /// Encodes a k-mer of base indices into its table index.
    pub fn encode(kmer: &[u8]) -> usize {
        kmer.iter().fold(0usize, |acc, &b| acc * 4 + b as usize)
    }

    fn rates(&self, kmer: &[u8]) -> [f64; 3] {
        self.rates[Self::encode(kmer)]
    }

    pub fn validate(&self) -> Result<()> {
        let expect = 4usize.pow(self.k as u32);
        if self.rates.len() != expect {
            return Err(Error::InvalidSpec(format!(
                "kmer table covers {} of {} contexts",
                self.rates.len(),
                expect
            )));
        }
        for (idx, r) in self.rates.iter().enumerate() {
            let total: f64 = r.iter().sum();
            if r.iter().any(|&v| v < 0.0) || total >= 1.0 {
                return Err(Error::InvalidSpec(format!(
                    "context {idx} has rates {r:?}; classes must be non-negative and sum below 1"
                )));
            }
        }
        Ok(())
    }

    /// Uniform table: every context gets `total_rate` split by proportions.
    pub fn uniform(k: usize, total_rate: f64, (pi, pd, ps): (f64, f64, f64)) -> Self {
        let n = 4usize.pow(k as u32);
        Self {
            k,
            rates: vec![[total_rate * pi, total_rate * pd, total_rate * ps]; n],
        }
    }

    /// A synthetic memory-channel stand-in: context rates vary smoothly
    /// around `total_rate` and homopolymer contexts skew toward deletions.
    pub fn synthetic<R: Rng + ?Sized>(k: usize, total_rate: f64, rng: &mut R) -> Self {
        let n = 4usize.pow(k as u32);
        let mut rates = Vec::with_capacity(n);
        for idx in 0..n {
            // decode to measure repeat content
            let mut ctx = vec![0u8; k];
            let mut v = idx;
            for slot in ctx.iter_mut().rev() {
                *slot = (v % 4) as u8;
                v /= 4;
            }
            let homopolymer = ctx.windows(2).all(|w| w[0] == w[1]);
            let jitter: f64 = 0.5 + rng.random::<f64>(); // 0.5..1.5
            let total = (total_rate * jitter).min(0.9);
            let (pi, pd, ps) = if homopolymer {
                (0.2, 0.6, 0.2)
            } else {
                (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
            };
            rates.push([total * pi, total * pd, total * ps]);
        }
        Self { k, rates }
    }

    /// Mean of per-context total rates, uniform over contexts.
    pub fn mean_total_rate(&self) -> f64 {
        let sum: f64 = self.rates.iter().map(|r| r[0] + r[1] + r[2]).sum();
        sum / self.rates.len() as f64
    }

    /// Loads `context,ins,del,sub` rows; every one of the `4^k` contexts
    /// must appear exactly once.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut seen: BTreeMap<usize, [f64; 3]> = BTreeMap::new();
        let mut k = None;
        for record in rdr.records() {
            let record = record.map_err(|e| Error::Parse(format!("kmer csv: {e}")))?;
            if record.len() != 4 {
                return Err(Error::Parse(format!(
                    "kmer csv row has {} fields, expected context,ins,del,sub",
                    record.len()
                )));
            }
            let ctx = DnaSequence::parse(&record[0])
                .map_err(|e| Error::Parse(format!("kmer csv context '{}': {e}", &record[0])))?;
            match k {
                None => k = Some(ctx.len()),
                Some(k) if k != ctx.len() => {
                    return Err(Error::Parse("kmer csv mixes context lengths".into()))
                }
                _ => {}
            }
            let mut rates = [0.0f64; 3];
            for (slot, field) in rates.iter_mut().zip(record.iter().skip(1)) {
                *slot = field
                    .parse()
                    .map_err(|_| Error::Parse(format!("kmer csv rate '{field}'")))?;
            }
            let idx = Self::encode(ctx.symbols());
            if seen.insert(idx, rates).is_some() {
                return Err(Error::Parse(format!("duplicate context '{}'", &record[0])));
            }
        }
        let k = k.ok_or_else(|| Error::Parse("kmer csv is empty".into()))?;
        let expect = 4usize.pow(k as u32);
        if seen.len() != expect {
            return Err(Error::InvalidSpec(format!(
                "kmer table covers {} of {expect} contexts",
                seen.len()
            )));
        }
        let table = Self {
            k,
            rates: seen.into_values().collect(),
        };
        table.validate()?;
        Ok(table)
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    /// Writes the `context,ins,del,sub` CSV form.
    pub fn to_csv<W: std::io::Write>(&self, writer: &mut W) -> Result<()> {
        writeln!(writer, "context,ins,del,sub")?;
        for (idx, r) in self.rates.iter().enumerate() {
            let mut ctx = vec![0u8; self.k];
            let mut v = idx;
            for slot in ctx.iter_mut().rev() {
                *slot = (v % 4) as u8;
                v /= 4;
            }
            let ctx = DnaSequence::new(ctx).expect("k >= 1");
            writeln!(writer, "{ctx},{},{},{}", r[0], r[1], r[2])?;
        }
        Ok(())
    }
}

/// Outcome of feeding an observed pair through the external-channel adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdapterOutcome {
    /// Inferred minimum-edit profile for the pair.
    Profile(ErrorProfile),
    /// The pair's edit distance exceeded [`OUTLIER_DISTANCE`].
    Rejected { distance: usize },
}

/// Turns an (input, observed output) pair from any external simulator into
/// a replayable profile, rejecting outlier pairs.
pub fn wrap_external_channel(input: &DnaSequence, observed: &DnaSequence) -> AdapterOutcome {
    let distance = profile::levenshtein(input, observed);
    if distance > OUTLIER_DISTANCE {
        AdapterOutcome::Rejected { distance }
    } else {
        AdapterOutcome::Profile(profile::infer_profile(input, observed))
    }
}

/// Every named channel configuration used by the experiments.
pub fn channel_presets() -> Vec<(String, ChannelSpec)> {
    let third = default_proportions();
    let mut out = vec![
        ("Hom".to_string(), ChannelSpec::iid(0.01, third, 0)),
        (
            "Asc".to_string(),
            ChannelSpec::positional(0.0, 0.02, third, 0),
        ),
        (
            "Des".to_string(),
            ChannelSpec::positional(0.02, 0.0, third, 0),
        ),
    ];
    for rate_pct in [0.5f64, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let name = if rate_pct.fract() == 0.0 {
            format!("Rate{}", rate_pct as u32)
        } else {
            format!("Rate{rate_pct}")
        };
        out.push((name, ChannelSpec::iid(rate_pct / 100.0, third, 0)));
    }
    out.push(("C111".to_string(), ChannelSpec::iid(0.1036, third, 0)));
    let c253_total = 1.66 + 5.31 + 3.38;
    out.push((
        "C253".to_string(),
        ChannelSpec::iid(
            0.1036,
            (1.66 / c253_total, 5.31 / c253_total, 3.38 / c253_total),
            0,
        ),
    ));
    out
}

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<ChannelSpec> {
    channel_presets()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, spec)| spec)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_gives_identity() {
        let spec = ChannelSpec::iid(0.0, default_proportions(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = spec.generate(10, &mut rng).unwrap();
        assert_eq!(p.events(), ErrorProfile::identity(10).events());
    }

    #[test]
    fn seeded_determinism() {
        let spec = ChannelSpec::iid(0.1, default_proportions(), 0);
        let a = spec
            .generate(500, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        let b = spec
            .generate(500, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        assert_eq!(a, b);
        let c = spec
            .generate(500, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn profiles_satisfy_length_invariant() {
        let spec = ChannelSpec::iid(0.3, (0.5, 0.2, 0.3), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [1usize, 2, 17, 64] {
            let p = spec.generate(len, &mut rng).unwrap();
            p.validate_for(len).unwrap();
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ChannelSpec::iid(1.0, default_proportions(), 0)
            .validate()
            .is_err());
        assert!(ChannelSpec::iid(-0.1, default_proportions(), 0)
            .validate()
            .is_err());
        assert!(ChannelSpec::iid(0.5, (0.5, 0.2, 0.2), 0).validate().is_err());
        assert!(ChannelSpec::positional(0.0, 1.0, default_proportions(), 0)
            .validate()
            .is_err());
        let mut bad_kmer = ChannelSpec::kmer(KmerTable::uniform(2, 0.1, default_proportions()), 0);
        bad_kmer.kmer_table = None;
        assert!(bad_kmer.validate().is_err());
    }

    #[test]
    fn preset_values() {
        let c111 = preset("C111").unwrap();
        assert_eq!(c111.total_rate, 0.1036);
        let hom = preset("Hom").unwrap();
        assert_eq!(hom.proportions, default_proportions());
        assert_eq!(hom.total_rate, 0.01);
        let asc = preset("Asc").unwrap();
        assert_eq!(asc.rate_curve, (0.0, 0.02));
        let des = preset("Des").unwrap();
        assert_eq!(des.rate_curve, (0.02, 0.0));
        let c253 = preset("C253").unwrap();
        let (pi, pd, ps) = c253.proportions;
        assert!((pi + pd + ps - 1.0).abs() < 1e-12);
        assert!((pi / pd - 1.66 / 5.31).abs() < 1e-12);
        assert!(preset("Rate16").is_ok());
        assert!(preset("Rate0.5").is_ok());
        assert!(preset("nope").is_err());
    }

    #[test]
    fn adapter_outcomes() {
        let x = DnaSequence::parse("ATGC").unwrap();
        // identical pair -> all-zero profile
        match wrap_external_channel(&x, &x) {
            AdapterOutcome::Profile(p) => assert_eq!(p.events(), &[0, 0, 0, 0]),
            other => panic!("unexpected {other:?}"),
        }
        // known single deletion
        let y = DnaSequence::parse("AGC").unwrap();
        match wrap_external_channel(&x, &y) {
            AdapterOutcome::Profile(p) => assert_eq!(p.events(), &[0, 8, 0, 0]),
            other => panic!("unexpected {other:?}"),
        }
        // distance exactly 21 -> rejected; distance 20 -> accepted
        let long_x = DnaSequence::new(vec![0u8; 21]).unwrap();
        let long_y = DnaSequence::new(vec![1u8; 21]).unwrap();
        match wrap_external_channel(&long_x, &long_y) {
            AdapterOutcome::Rejected { distance } => assert_eq!(distance, 21),
            other => panic!("unexpected {other:?}"),
        }
        let edge_x = DnaSequence::new(vec![0u8; 20]).unwrap();
        let edge_y = DnaSequence::new(vec![1u8; 20]).unwrap();
        assert!(matches!(
            wrap_external_channel(&edge_x, &edge_y),
            AdapterOutcome::Profile(_)
        ));
    }

    #[test]
    fn kmer_csv_roundtrip() {
        let table = KmerTable::synthetic(2, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        let mut buf = Vec::new();
        table.to_csv(&mut buf).unwrap();
        let back = KmerTable::from_csv(buf.as_slice()).unwrap();
        assert_eq!(table, back);
        // missing contexts rejected
        let partial = "context,ins,del,sub\nAA,0.1,0.1,0.1\n";
        assert!(KmerTable::from_csv(partial.as_bytes()).is_err());
    }
}
