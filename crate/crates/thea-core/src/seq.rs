//! DNA sequences, probability-simplex sequences, and the padded
//! 5-channel representation used at model boundaries.
//!
//! Bases are stored as indices `0..=3` mapped to `A,T,G,C` in that order.
//! A [`SimplexSequence`] is the continuous counterpart: one probability
//! vector per position, either 4-wide (plain codewords) or 5-wide (padded
//! model-boundary form where channel 4 marks padding).

use std::fmt;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// The DNA alphabet in index order.
pub const BASES: [char; 4] = ['A', 'T', 'G', 'C'];

/// Index of the padding channel in the 5-channel representation.
pub const PAD_CHANNEL: usize = 4;

/// Row-sum tolerance for simplex validation.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// A fixed-length sequence over `{A,T,G,C}`, stored as base indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DnaSequence {
    symbols: Vec<u8>,
}

impl DnaSequence {
    /// Builds a sequence from base indices, rejecting symbols outside
    /// `0..=3` and empty input.
    pub fn new(symbols: Vec<u8>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::EmptySequence);
        }
        for (pos, &value) in symbols.iter().enumerate() {
            if value > 3 {
                return Err(Error::InvalidSymbol { value, pos });
            }
        }
        Ok(Self { symbols })
    }

    /// Parses an uppercase `ACGT` string.
    pub fn parse(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut symbols = Vec::with_capacity(text.len());
        for (pos, ch) in text.chars().enumerate() {
            let idx = BASES.iter().position(|&b| b == ch).ok_or(Error::Parse(format!(
                "character '{ch}' at column {pos} is not one of ACGT"
            )))?;
            symbols.push(idx as u8);
        }
        Ok(Self { symbols })
    }

    /// Draws a uniform random sequence of the given length.
    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        let symbols = (0..len).map(|_| rng.random_range(0..4u8)).collect();
        Ok(Self { symbols })
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// One-hot encodes into a 4-channel simplex sequence.
    pub fn to_one_hot(&self) -> SimplexSequence {
        let mut rows = Array2::<f32>::zeros((self.symbols.len(), 4));
        for (i, &b) in self.symbols.iter().enumerate() {
            rows[[i, b as usize]] = 1.0;
        }
        SimplexSequence { rows }
    }
}

impl fmt::Display for DnaSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.symbols {
            write!(f, "{}", BASES[b as usize])?;
        }
        Ok(())
    }
}

/// A sequence of probability vectors: an `L x k` matrix with `k` in
/// `{4, 5}`, each row non-negative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSequence {
    rows: Array2<f32>,
}

impl SimplexSequence {
    /// Validates and wraps an `L x k` matrix of probability rows.
    pub fn from_rows(rows: Array2<f32>) -> Result<Self> {
        let k = rows.ncols();
        if k != 4 && k != 5 {
            return Err(Error::ShapeMismatch(format!(
                "simplex rows must have 4 or 5 channels, got {k}"
            )));
        }
        for (i, row) in rows.outer_iter().enumerate() {
            let mut sum = 0.0f64;
            for &v in row.iter() {
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::NotOnSimplex {
                        row: i,
                        reason: format!("entry {v} is negative or non-finite"),
                    });
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::NotOnSimplex {
                    row: i,
                    reason: format!("row sums to {sum}"),
                });
            }
        }
        Ok(Self { rows })
    }

    /// Wraps rows that are normalized by construction (softmax outputs).
    pub(crate) fn from_rows_unchecked(rows: Array2<f32>) -> Self {
        debug_assert!(Self::from_rows(rows.clone()).is_ok());
        Self { rows }
    }

    pub fn rows(&self) -> &Array2<f32> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Number of channels per row: 4, or 5 for the padded form.
    pub fn channels(&self) -> usize {
        self.rows.ncols()
    }

    /// Per-row argmax indices; ties break to the lowest index.
    pub fn argmax_indices(&self) -> Vec<usize> {
        self.rows
            .outer_iter()
            .map(|row| {
                let mut best = 0usize;
                let mut best_v = row[0];
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Per-row argmax of a 4-channel simplex sequence as a discrete sequence.
/// Ties break to the lowest base index.
pub fn argmax_discretize(c: &SimplexSequence) -> Result<DnaSequence> {
    if c.channels() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "argmax discretization expects 4 channels, got {}",
            c.channels()
        )));
    }
    let symbols: Vec<u8> = c.argmax_indices().into_iter().map(|i| i as u8).collect();
    DnaSequence::new(symbols)
}

/// Fixed-capacity padding into the 5-channel model-boundary form.
///
/// Rows past the true length are the exact pad one-hot `(0,0,0,0,1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadScheme {
    pub max_length: usize,
}

impl PadScheme {
    /// Default capacity for a codeword length: `l_c + 16`.
    pub fn for_codeword_len(l_c: usize) -> Self {
        Self { max_length: l_c + 16 }
    }

    /// Pads a 4-channel sequence to `max_length` 5-channel rows.
    pub fn pad_to(&self, c: &SimplexSequence) -> Result<SimplexSequence> {
        if c.channels() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "padding expects 4 channels, got {}",
                c.channels()
            )));
        }
        let len = c.len();
        if len > self.max_length {
            return Err(Error::PadOverflow {
                len,
                max: self.max_length,
            });
        }
        let mut rows = Array2::<f32>::zeros((self.max_length, 5));
        for (i, row) in c.rows().outer_iter().enumerate() {
            for j in 0..4 {
                rows[[i, j]] = row[j];
            }
        }
        for i in len..self.max_length {
            rows[[i, PAD_CHANNEL]] = 1.0;
        }
        Ok(SimplexSequence { rows })
    }

    /// Recovers the 4-channel sequence from a padded one, validating that
    /// trailing rows are exact pad one-hots.
    pub fn unpad(&self, padded: &SimplexSequence) -> Result<SimplexSequence> {
        if padded.channels() != 5 {
            return Err(Error::ShapeMismatch(format!(
                "unpad expects 5 channels, got {}",
                padded.channels()
            )));
        }
        if padded.len() != self.max_length {
            return Err(Error::ShapeMismatch(format!(
                "padded length {} does not match capacity {}",
                padded.len(),
                self.max_length
            )));
        }
        let mut true_len = self.max_length;
        for (i, row) in padded.rows().outer_iter().enumerate() {
            if row[PAD_CHANNEL] != 0.0 {
                true_len = i;
                break;
            }
        }
        if true_len == 0 {
            return Err(Error::BadPadding("no content rows before padding".into()));
        }
        let mut rows = Array2::<f32>::zeros((true_len, 4));
        for i in 0..true_len {
            for j in 0..4 {
                rows[[i, j]] = padded.rows()[[i, j]];
            }
        }
        for i in true_len..self.max_length {
            let row = padded.rows().row(i);
            let exact = (0..4).all(|j| row[j] == 0.0) && row[PAD_CHANNEL] == 1.0;
            if !exact {
                return Err(Error::BadPadding(format!(
                    "row {i} after the content region is not the pad one-hot"
                )));
            }
        }
        SimplexSequence::from_rows(rows)
    }
}

/// Reads the line-oriented DNA text format: one uppercase ACGT string per line.
pub fn read_dna_lines<R: BufRead>(reader: R) -> Result<Vec<DnaSequence>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let seq = DnaSequence::parse(line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        out.push(seq);
    }
    Ok(out)
}

/// Writes the line-oriented DNA text format.
pub fn write_dna_lines<W: Write>(writer: &mut W, seqs: &[DnaSequence]) -> Result<()> {
    for s in seqs {
        writeln!(writer, "{s}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn parse_roundtrip() {
        let s = DnaSequence::parse("ATGC").unwrap();
        assert_eq!(s.symbols(), &[0, 1, 2, 3]);
        assert_eq!(s.to_string(), "ATGC");
    }

    #[test]
    fn rejects_bad_symbols() {
        assert!(DnaSequence::new(vec![0, 4]).is_err());
        assert!(DnaSequence::new(vec![]).is_err());
        assert!(DnaSequence::parse("ATGX").is_err());
        assert!(DnaSequence::parse("").is_err());
    }

    #[test]
    fn simplex_validation() {
        let ok = array![[0.25f32, 0.25, 0.25, 0.25], [1.0, 0.0, 0.0, 0.0]];
        assert!(SimplexSequence::from_rows(ok).is_ok());
        let bad_sum = array![[0.5f32, 0.25, 0.25, 0.25]];
        assert!(SimplexSequence::from_rows(bad_sum).is_err());
        let negative = array![[1.25f32, -0.25, 0.0, 0.0]];
        assert!(SimplexSequence::from_rows(negative).is_err());
        let wrong_width = Array2::<f32>::zeros((1, 3));
        assert!(SimplexSequence::from_rows(wrong_width).is_err());
    }

    #[test]
    fn argmax_examples() {
        // [(0.1,0.7,0.1,0.1)] -> "T"
        let c = SimplexSequence::from_rows(array![[0.1f32, 0.7, 0.1, 0.1]]).unwrap();
        assert_eq!(argmax_discretize(&c).unwrap().to_string(), "T");

        // one-hot sequence -> identical discrete sequence
        let s = DnaSequence::parse("GATTACA").unwrap();
        assert_eq!(argmax_discretize(&s.to_one_hot()).unwrap(), s);

        // uniform row ties break to lowest index -> "A"
        let u = SimplexSequence::from_rows(array![[0.25f32, 0.25, 0.25, 0.25]]).unwrap();
        assert_eq!(argmax_discretize(&u).unwrap().to_string(), "A");
    }

    #[test]
    fn pad_examples() {
        let scheme = PadScheme { max_length: 5 };
        let c = DnaSequence::parse("ATG").unwrap().to_one_hot();
        let padded = scheme.pad_to(&c).unwrap();
        assert_eq!(padded.len(), 5);
        for i in 3..5 {
            let row = padded.rows().row(i);
            assert_eq!(row.to_vec(), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        }
        // L = L_max leaves no pad rows
        let full = DnaSequence::parse("ATGCA").unwrap().to_one_hot();
        let padded_full = scheme.pad_to(&full).unwrap();
        assert!(padded_full.rows().column(PAD_CHANNEL).iter().all(|&v| v == 0.0));
        // round trip
        let back = scheme.unpad(&padded).unwrap();
        assert_eq!(&back, &c);
        // overflow rejected
        let long = DnaSequence::parse("ATGCAT").unwrap().to_one_hot();
        assert!(scheme.pad_to(&long).is_err());
    }

    #[test]
    fn dna_text_format() {
        let text = "ATGC\nGATTACA\n";
        let seqs = read_dna_lines(std::io::Cursor::new(text)).unwrap();
        assert_eq!(seqs.len(), 2);
        let mut buf = Vec::new();
        write_dna_lines(&mut buf, &seqs).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }
}
