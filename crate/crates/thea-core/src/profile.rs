//! Error profiles and the conventional IDS channel.
//!
//! A profile is a sequence of event symbols replayed against an input
//! sequence with two pointers, one on the sequence and one on the profile:
//!
//! | symbol | event                                   |
//! |--------|-----------------------------------------|
//! | 0      | match: copy the base                    |
//! | 1..=3  | substitution: base `b` becomes `(b+k)%4`|
//! | 4..=7  | insertion of A/T/G/C before the base    |
//! | 8      | deletion: consume without emitting      |
//!
//! Match, substitution, and deletion advance both pointers; insertion
//! advances only the profile pointer. The same replay is defined on
//! simplex rows, where substitution rolls the row, insertion adds a
//! one-hot row, and deletion removes the row. On one-hot rows the two
//! forms coincide exactly.

use std::io::{BufRead, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::seq::{DnaSequence, SimplexSequence};

/// Match event.
pub const EV_MATCH: u8 = 0;
/// Deletion event.
pub const EV_DELETE: u8 = 8;
/// First insertion event; `EV_INSERT_BASE + b` inserts base `b`.
pub const EV_INSERT_BASE: u8 = 4;
/// Padding symbol used only at model boundaries, never inside a profile.
pub const PROFILE_PAD: u8 = 9;
/// Vocabulary size of the model-boundary profile representation.
pub const PROFILE_VOCAB: usize = 10;

/// An ordered record of channel events, symbols in `0..=8`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ErrorProfile {
    events: Vec<u8>,
}

impl ErrorProfile {
    pub fn new(events: Vec<u8>) -> Result<Self> {
        for (pos, &value) in events.iter().enumerate() {
            if value > 8 {
                return Err(Error::InvalidProfileEvent { value, pos });
            }
        }
        Ok(Self { events })
    }

    /// The all-match profile of the given length.
    pub fn identity(len: usize) -> Self {
        Self { events: vec![EV_MATCH; len] }
    }

    pub fn events(&self) -> &[u8] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn insertions(&self) -> usize {
        self.events.iter().filter(|&&e| (4..=7).contains(&e)).count()
    }

    pub fn deletions(&self) -> usize {
        self.events.iter().filter(|&&e| e == EV_DELETE).count()
    }

    pub fn substitutions(&self) -> usize {
        self.events.iter().filter(|&&e| (1..=3).contains(&e)).count()
    }

    /// Number of input positions the profile consumes.
    pub fn consumed(&self) -> usize {
        self.events.len() - self.insertions()
    }

    /// Number of non-match events.
    pub fn cost(&self) -> usize {
        self.events.iter().filter(|&&e| e != EV_MATCH).count()
    }

    /// Output length when applied to an input of length `input_len`.
    pub fn output_len(&self, input_len: usize) -> usize {
        input_len + self.insertions() - self.deletions()
    }

    /// Checks the length invariant against an input sequence length.
    pub fn validate_for(&self, input_len: usize) -> Result<()> {
        if self.consumed() != input_len {
            return Err(Error::ProfileLengthMismatch {
                consumed: self.consumed(),
                expected: input_len,
            });
        }
        Ok(())
    }
}

/// Rolls a probability vector by `k` positions: `out[i] = v[(i - k) mod 4]`.
/// On a one-hot base `b` this is the substitution `b -> (b + k) mod 4`.
pub fn roll_substitute(v: &[f32; 4], k: u8) -> Result<[f32; 4]> {
    if !(1..=3).contains(&k) {
        return Err(Error::InvalidSubstitutionType(k));
    }
    let k = k as usize;
    let mut out = [0.0f32; 4];
    for i in 0..4 {
        out[i] = v[(i + 4 - k) % 4];
    }
    Ok(out)
}

/// Replays a profile against a discrete sequence.
pub fn apply_profile_discrete(s: &DnaSequence, p: &ErrorProfile) -> Result<DnaSequence> {
    p.validate_for(s.len())?;
    let mut out = Vec::with_capacity(p.output_len(s.len()));
    let mut i = 0usize; // sequence pointer
    for &e in p.events() {
        match e {
            EV_MATCH => {
                out.push(s.symbols()[i]);
                i += 1;
            }
            1..=3 => {
                out.push((s.symbols()[i] + e) % 4);
                i += 1;
            }
            4..=7 => out.push(e - EV_INSERT_BASE),
            EV_DELETE => i += 1,
            _ => unreachable!("validated at construction"),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyChannelOutput);
    }
    DnaSequence::new(out)
}

/// Replays a profile against a simplex sequence: the promoted IDS form.
pub fn apply_profile_simplex(c: &SimplexSequence, p: &ErrorProfile) -> Result<SimplexSequence> {
    if c.channels() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "promoted IDS operations expect 4 channels, got {}",
            c.channels()
        )));
    }
    p.validate_for(c.len())?;
    let out_len = p.output_len(c.len());
    if out_len == 0 {
        return Err(Error::EmptyChannelOutput);
    }
    let mut rows = Array2::<f32>::zeros((out_len, 4));
    let mut i = 0usize; // input row pointer
    let mut o = 0usize; // output row pointer
    for &e in p.events() {
        match e {
            EV_MATCH => {
                for j in 0..4 {
                    rows[[o, j]] = c.rows()[[i, j]];
                }
                i += 1;
                o += 1;
            }
            1..=3 => {
                let row = c.rows().row(i);
                let rolled = roll_substitute(&[row[0], row[1], row[2], row[3]], e)?;
                for j in 0..4 {
                    rows[[o, j]] = rolled[j];
                }
                i += 1;
                o += 1;
            }
            4..=7 => {
                rows[[o, (e - EV_INSERT_BASE) as usize]] = 1.0;
                o += 1;
            }
            EV_DELETE => i += 1,
            _ => unreachable!("validated at construction"),
        }
    }
    SimplexSequence::from_rows(rows)
}

/// Levenshtein distance between two base sequences, unit costs.
pub fn levenshtein(x: &DnaSequence, y: &DnaSequence) -> usize {
    let xs = x.symbols();
    let ys = y.symbols();
    let mut prev: Vec<usize> = (0..=ys.len()).collect();
    let mut cur = vec![0usize; ys.len() + 1];
    for (i, &xb) in xs.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &yb) in ys.iter().enumerate() {
            let sub = prev[j] + usize::from(xb != yb);
            let del = prev[j + 1] + 1;
            let ins = cur[j] + 1;
            cur[j + 1] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[ys.len()]
}

/// Infers a minimum-cost profile turning `x` into `y`.
///
/// The result always satisfies `apply_profile_discrete(x, p) == y` and
/// `p.cost() == levenshtein(x, y)`. Ties are resolved deterministically:
/// substitutions are preferred over insertion+deletion pairs, and edits
/// land at the leftmost position achieving minimum cost.
pub fn infer_profile(x: &DnaSequence, y: &DnaSequence) -> ErrorProfile {
    let xs = x.symbols();
    let ys = y.symbols();
    let n = xs.len();
    let m = ys.len();
    // dist[i][j] = edit distance between x[..i] and y[..j]
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..=n {
        dist[i][0] = i;
    }
    for j in 0..=m {
        dist[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dist[i - 1][j - 1] + usize::from(xs[i - 1] != ys[j - 1]);
            let del = dist[i - 1][j] + 1;
            let ins = dist[i][j - 1] + 1;
            dist[i][j] = sub.min(del).min(ins);
        }
    }
    // Backward traceback. Preferring the diagonal first pushes edits to
    // the leftmost equivalent position and favors substitutions over
    // insertion+deletion pairs; deletion is tried before insertion.
    let mut events = Vec::with_capacity(n.max(m));
    let mut i = n;
    let mut j = m;
    while i > 0 || j > 0 {
        let here = dist[i][j];
        if i > 0 && j > 0 {
            let step = usize::from(xs[i - 1] != ys[j - 1]);
            if dist[i - 1][j - 1] + step == here {
                if step == 0 {
                    events.push(EV_MATCH);
                } else {
                    let k = (ys[j - 1] + 4 - xs[i - 1]) % 4;
                    events.push(k);
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[i - 1][j] + 1 == here {
            events.push(EV_DELETE);
            i -= 1;
            continue;
        }
        debug_assert!(j > 0 && dist[i][j - 1] + 1 == here);
        events.push(EV_INSERT_BASE + ys[j - 1]);
        j -= 1;
    }
    events.reverse();
    ErrorProfile { events }
}

/// Reads the profile text format: one comma-separated list of integers
/// 0..=8 per line.
pub fn read_profile_lines<R: BufRead>(reader: R) -> Result<Vec<ErrorProfile>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut events = Vec::new();
        for tok in line.split(',') {
            let v: u8 = tok
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad event '{tok}'", n + 1)))?;
            events.push(v);
        }
        out.push(ErrorProfile::new(events).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Writes the profile text format.
pub fn write_profile_lines<W: Write>(writer: &mut W, profiles: &[ErrorProfile]) -> Result<()> {
    for p in profiles {
        let line: Vec<String> = p.events().iter().map(|e| e.to_string()).collect();
        writeln!(writer, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn seq(s: &str) -> DnaSequence {
        DnaSequence::parse(s).unwrap()
    }

    fn prof(events: &[u8]) -> ErrorProfile {
        ErrorProfile::new(events.to_vec()).unwrap()
    }

    #[test]
    fn roll_examples() {
        // (0.7,0.1,0.1,0.1), k=1 -> (0.1,0.7,0.1,0.1)
        let rolled = roll_substitute(&[0.7, 0.1, 0.1, 0.1], 1).unwrap();
        assert_eq!(rolled, [0.1, 0.7, 0.1, 0.1]);
        // one-hot A, k=2 -> one-hot G
        let rolled = roll_substitute(&[1.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(rolled, [0.0, 0.0, 1.0, 0.0]);
        // k=1 then k=3 is the identity
        let v = [0.4, 0.3, 0.2, 0.1];
        let back = roll_substitute(&roll_substitute(&v, 1).unwrap(), 3).unwrap();
        assert_eq!(back, v);
        assert!(roll_substitute(&v, 0).is_err());
        assert!(roll_substitute(&v, 4).is_err());
    }

    #[test]
    fn roll_group_identity() {
        let v = [0.55, 0.25, 0.15, 0.05];
        for k in 1..=3u8 {
            let once = roll_substitute(&v, k).unwrap();
            let back = roll_substitute(&once, 4 - k).unwrap();
            assert_eq!(back, v, "k={k}");
        }
    }

    #[test]
    fn discrete_examples() {
        assert_eq!(
            apply_profile_discrete(&seq("ATGC"), &prof(&[0, 8, 0, 0])).unwrap(),
            seq("AGC")
        );
        assert_eq!(
            apply_profile_discrete(&seq("AT"), &prof(&[4, 0, 0])).unwrap(),
            seq("AAT")
        );
        assert_eq!(
            apply_profile_discrete(&seq("ATGC"), &prof(&[0, 0, 0, 0])).unwrap(),
            seq("ATGC")
        );
        // length-inconsistent profile rejected
        assert!(apply_profile_discrete(&seq("ATGC"), &prof(&[0, 0, 0])).is_err());
        // deleting everything is an error, not an empty sequence
        assert!(matches!(
            apply_profile_discrete(&seq("A"), &prof(&[8])),
            Err(Error::EmptyChannelOutput)
        ));
    }

    #[test]
    fn simplex_examples() {
        // degeneration to the discrete case
        let c = seq("ATGC").to_one_hot();
        let out = apply_profile_simplex(&c, &prof(&[0, 8, 0, 0])).unwrap();
        assert_eq!(out, seq("AGC").to_one_hot());
        // roll by 2 on a soft row
        let c = SimplexSequence::from_rows(array![[0.7f32, 0.1, 0.1, 0.1]]).unwrap();
        let out = apply_profile_simplex(&c, &prof(&[2])).unwrap();
        assert_eq!(out.rows().row(0).to_vec(), vec![0.1, 0.1, 0.7, 0.1]);
        // all-zero profile is the identity
        let c = SimplexSequence::from_rows(array![
            [0.7f32, 0.1, 0.1, 0.1],
            [0.25, 0.25, 0.25, 0.25]
        ])
        .unwrap();
        let out = apply_profile_simplex(&c, &prof(&[0, 0])).unwrap();
        assert_eq!(&out, &c);
    }

    #[test]
    fn infer_examples() {
        assert_eq!(infer_profile(&seq("ATGC"), &seq("AGC")).events(), &[0, 8, 0, 0]);
        assert_eq!(infer_profile(&seq("ATGC"), &seq("ATGC")).events(), &[0, 0, 0, 0]);
        assert_eq!(infer_profile(&seq("AAAA"), &seq("ATAA")).events(), &[0, 1, 0, 0]);
    }

    #[test]
    fn infer_is_minimal_and_sound() {
        let cases = [
            ("ATGC", "AGC"),
            ("AT", "AAT"),
            ("AAAA", "ATAA"),
            ("A", "TTTT"),
            ("GATTACA", "GATTACA"),
            ("ATAT", "TATA"),
            ("AA", "A"),
            ("AA", "AAA"),
        ];
        for (xs, ys) in cases {
            let x = seq(xs);
            let y = seq(ys);
            let p = infer_profile(&x, &y);
            assert_eq!(apply_profile_discrete(&x, &p).unwrap(), y, "{xs}->{ys}");
            assert_eq!(p.cost(), levenshtein(&x, &y), "{xs}->{ys}");
        }
    }

    #[test]
    fn infer_prefers_leftmost_edits() {
        // deleting either A of "AA" yields "A"; the leftmost deletion wins
        assert_eq!(infer_profile(&seq("AA"), &seq("A")).events(), &[8, 0]);
        // inserting at the leftmost compatible position
        assert_eq!(infer_profile(&seq("AA"), &seq("AAA")).events(), &[4, 0, 0]);
        // substitution preferred over insert+delete
        assert_eq!(infer_profile(&seq("AT"), &seq("TA")).events(), &[1, 3]);
    }

    #[test]
    fn profile_text_format() {
        let text = "0,8,0,0\n4,0,0\n";
        let profiles = read_profile_lines(std::io::Cursor::new(text)).unwrap();
        assert_eq!(profiles.len(), 2);
        assert_eq!(profiles[0].events(), &[0, 8, 0, 0]);
        let mut buf = Vec::new();
        write_profile_lines(&mut buf, &profiles).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
        assert!(read_profile_lines(std::io::Cursor::new("0,9\n")).is_err());
    }

    #[test]
    fn length_law() {
        let s = seq("ATGCATGC");
        let p = prof(&[0, 4, 0, 8, 0, 1, 0, 0, 5]);
        assert!(p.validate_for(s.len()).is_err()); // consumed() = 7 != 8

        let p = prof(&[0, 4, 0, 8, 0, 1, 0, 0, 5, 0]);
        p.validate_for(s.len()).unwrap();
        let out = apply_profile_discrete(&s, &p).unwrap();
        assert_eq!(out.len(), s.len() + p.insertions() - p.deletions());
    }
}
