//! Synthetic datasets with known generating distributions.

use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::bitcodec::{bits_to_index, index_to_bits, BitVector};
use crate::error::{BarError, Result};
use crate::nn::Tensor;
use crate::rng::stream;

/// A class-labelled token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub class: usize,
    pub tokens: Vec<BitVector>,
}

/// A class-labelled image stored as `(size·size) × channels` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub class: usize,
    pub image: Tensor,
}

const ROW_SUM_TOLERANCE: f64 = 1e-9;

fn check_stochastic(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(BarError::Domain(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(BarError::Domain(format!("{what} sums to {s}")));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Class-conditional Markov chain over a set of codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovBits {
    bits: usize,
    seq_len: usize,
    codewords: Vec<BitVector>,
    initial: Vec<Vec<f64>>,
    transitions: Vec<Vec<Vec<f64>>>,
}

impl MarkovBits {
    /// `initial[c]` and the rows of `transitions[c]` are distributions over
    /// the codewords.
    pub fn new(
        codewords: Vec<BitVector>,
        initial: Vec<Vec<f64>>,
        transitions: Vec<Vec<Vec<f64>>>,
        seq_len: usize,
    ) -> Result<Self> {
        let s = codewords.len();
        let bits = codewords.first().map(BitVector::len).ok_or_else(|| BarError::Domain("no codewords".into()))?;
        if codewords.iter().any(|c| c.len() != bits) {
            return Err(BarError::Shape("codewords differ in width".into()));
        }
        if seq_len == 0 {
            return Err(BarError::Domain("sequence length must be positive".into()));
        }
        if initial.is_empty() || initial.len() != transitions.len() {
            return Err(BarError::Domain("need one initial distribution and one matrix per class".into()));
        }
        for (c, (init, matrix)) in initial.iter().zip(&transitions).enumerate() {
            if init.len() != s || matrix.len() != s || matrix.iter().any(|r| r.len() != s) {
                return Err(BarError::Shape(format!("class {c} tables are not {s}-square")));
            }
            check_stochastic(init, &format!("initial distribution of class {c}"))?;
            for (i, row) in matrix.iter().enumerate() {
                check_stochastic(row, &format!("transition row {i} of class {c}"))?;
            }
        }
        Ok(MarkovBits { bits, seq_len, codewords, initial, transitions })
    }

    /// Random task: `states` distinct codewords, a uniform initial state and
    /// `branching` equally likely successors per state and class. Successors
    /// of one state are at Hamming distance at least 2 from each other, so no
    /// per-bit factorization can express the transition.
    pub fn reference(bits: usize, states: usize, classes: usize, branching: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if branching == 0 || branching > states || classes == 0 {
            return Err(BarError::Domain(format!("{branching} successors among {states} states")));
        }
        if bits < 64 && states as u64 > 1u64 << bits {
            return Err(BarError::Domain(format!("{states} states do not fit in {bits} bits")));
        }
        let mut rng = stream(seed, &[0x7461736b]);
        let codewords: Vec<BitVector> = if bits <= 20 {
            sample_indices(&mut rng, 1usize << bits, states)
                .into_iter()
                .map(|i| index_to_bits(i as u64, bits))
                .collect::<Result<_>>()?
        } else {
            let mut out: Vec<BitVector> = Vec::with_capacity(states);
            while out.len() < states {
                let c = BitVector::new((0..bits).map(|_| rng.random_range(0..2u8)).collect())?;
                if !out.contains(&c) {
                    out.push(c);
                }
            }
            out
        };
        let initial = vec![vec![1.0 / states as f64; states]; classes];
        let mut transitions = Vec::with_capacity(classes);
        for _ in 0..classes {
            let mut matrix = Vec::with_capacity(states);
            for _ in 0..states {
                let succ = (0..1000)
                    .map(|_| sample_indices(&mut rng, states, branching).into_vec())
                    .find(|succ| {
                        succ.iter().enumerate().all(|(a, &i)| {
                            succ[a + 1..].iter().all(|&j| codewords[i].hamming(&codewords[j]) >= 2)
                        })
                    })
                    .ok_or_else(|| BarError::Domain("cannot find well-separated successors".into()))?;
                let mut row = vec![0.0; states];
                for i in succ {
                    row[i] = 1.0 / branching as f64;
                }
                matrix.push(row);
            }
            transitions.push(matrix);
        }
        Self::new(codewords, initial, transitions, seq_len)
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn class_count(&self) -> usize {
        self.initial.len()
    }

    pub fn codewords(&self) -> &[BitVector] {
        &self.codewords
    }

    fn state_of(&self, t: &BitVector) -> Option<usize> {
        self.codewords.iter().position(|c| c == t)
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Sequence {
        let mut s = draw(&self.initial[class], rng);
        let mut tokens = vec![self.codewords[s].clone()];
        for _ in 1..self.seq_len {
            s = draw(&self.transitions[class][s], rng);
            tokens.push(self.codewords[s].clone());
        }
        Sequence { class, tokens }
    }

    /// Probability of `tokens[i]` given `tokens[i-1]` (or the initial
    /// distribution at `i = 0`).
    pub fn token_probability(&self, class: usize, tokens: &[BitVector], i: usize) -> f64 {
        let Some(cur) = self.state_of(&tokens[i]) else { return 0.0 };
        if i == 0 {
            return self.initial[class][cur];
        }
        match self.state_of(&tokens[i - 1]) {
            Some(prev) => self.transitions[class][prev][cur],
            None => 0.0,
        }
    }

    /// Mean per-token negative log-likelihood under the task after mixing
    /// every conditional with `eps` of the uniform distribution on `2^k`.
    pub fn smoothed_nll(&self, seq: &Sequence, eps: f64) -> f64 {
        let uniform = (-(self.bits as f64) * std::f64::consts::LN_2).exp();
        let n = seq.tokens.len();
        (0..n)
            .map(|i| -((1.0 - eps) * self.token_probability(seq.class, &seq.tokens, i) + eps * uniform).ln())
            .sum::<f64>()
            / n as f64
    }

    /// Largest `k·len` for which the exact sequence table is produced.
    pub const EXACT_MAX_TOTAL_BITS: usize = 12;

    /// Probability of every sequence of `len` tokens, indexed by the
    /// concatenated bits with token 0 in the lowest bits.
    pub fn exact_distribution(&self, class: usize, len: usize) -> Result<Vec<f64>> {
        if self.bits * len > Self::EXACT_MAX_TOTAL_BITS || len == 0 || len > self.seq_len {
            return Err(BarError::Capability(format!(
                "exact table for {len} tokens of {} bits exceeds 2^{}",
                self.bits,
                Self::EXACT_MAX_TOTAL_BITS
            )));
        }
        let mut out = vec![0.0; 1 << (self.bits * len)];
        for (idx, p) in out.iter_mut().enumerate() {
            let tokens: Vec<BitVector> = (0..len)
                .map(|i| index_to_bits(((idx >> (i * self.bits)) & ((1 << self.bits) - 1)) as u64, self.bits))
                .collect::<Result<_>>()?;
            *p = (0..len).map(|i| self.token_probability(class, &tokens, i)).product();
        }
        Ok(out)
    }
}

/// Index of a sequence in the table of [`MarkovBits::exact_distribution`].
pub fn sequence_index(tokens: &[BitVector]) -> Result<usize> {
    let mut idx = 0usize;
    for (i, t) in tokens.iter().enumerate() {
        idx |= (bits_to_index(t)? as usize) << (i * t.len());
    }
    Ok(idx)
}

/// Two-colour checkerboards whose period is set by the class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckerTextures {
    pub size: usize,
    pub channels: usize,
    pub classes: usize,
}

/// Filled shapes over a smooth background; the class picks the shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyImages {
    pub size: usize,
    pub channels: usize,
    pub classes: usize,
}

fn random_colour<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect()
}

impl CheckerTextures {
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> LabeledImage {
        let period = 1usize << (class % self.size.trailing_zeros().max(1) as usize);
        let (a, b) = (random_colour(self.channels, rng), random_colour(self.channels, rng));
        let (ox, oy) = (rng.random_range(0..2 * period), rng.random_range(0..2 * period));
        let mut image = Tensor::zeros(self.size * self.size, self.channels);
        for y in 0..self.size {
            for x in 0..self.size {
                let odd = ((x + ox) / period + (y + oy) / period) % 2 == 1;
                image.row_mut(y * self.size + x).copy_from_slice(if odd { &b } else { &a });
            }
        }
        LabeledImage { class, image }
    }
}

impl ToyImages {
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> LabeledImage {
        let n = self.size as f64;
        let (bg0, bg1, fg) = (
            random_colour(self.channels, rng),
            random_colour(self.channels, rng),
            random_colour(self.channels, rng),
        );
        let (cx, cy) = (rng.random_range(0.25 * n..0.75 * n), rng.random_range(0.25 * n..0.75 * n));
        let r = rng.random_range(0.15 * n..0.35 * n);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let mut image = Tensor::zeros(self.size * self.size, self.channels);
        for y in 0..self.size {
            for x in 0..self.size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = match class % 3 {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= r && dy.abs() <= r,
                    _ => (dx * angle.cos() + dy * angle.sin()).abs() <= 0.4 * r,
                };
                let t = (x + y) as f64 / (2.0 * n);
                let row = image.row_mut(y * self.size + x);
                for c in 0..self.channels {
                    row[c] = if inside { fg[c] } else { (1.0 - t) * bg0[c] + t * bg1[c] };
                }
            }
        }
        LabeledImage { class, image }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticTask {
    MarkovBits(MarkovBits),
    CheckerTextures(CheckerTextures),
    ToyImages(ToyImages),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    MarkovBits,
    CheckerTextures,
    ToyImages,
}

impl FromStr for TaskKind {
    type Err = BarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov_bits" => Ok(TaskKind::MarkovBits),
            "checker_textures" => Ok(TaskKind::CheckerTextures),
            "toy_images" => Ok(TaskKind::ToyImages),
            _ => Err(BarError::config("task", format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Sequences(Vec<Sequence>),
    Images(Vec<LabeledImage>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Sequences(s) => s.len(),
            Dataset::Images(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_sequences(self) -> Result<Vec<Sequence>> {
        match self {
            Dataset::Sequences(s) => Ok(s),
            Dataset::Images(_) => Err(BarError::Domain("task produces images, not token sequences".into())),
        }
    }

    pub fn into_images(self) -> Result<Vec<LabeledImage>> {
        match self {
            Dataset::Images(i) => Ok(i),
            Dataset::Sequences(_) => Err(BarError::Domain("task produces token sequences, not images".into())),
        }
    }
}

/// Draws `count` examples; example `i` uses its own random stream and class
/// `i mod classes`, so datasets are reproducible and balanced.
pub fn gen_dataset(task: &SyntheticTask, count: usize, seed: u64) -> Result<Dataset> {
    let rng_for = |i: usize| stream(seed, &[0x64617461, i as u64]);
    Ok(match task {
        SyntheticTask::MarkovBits(m) => Dataset::Sequences(
            (0..count).map(|i| m.sample_sequence(i % m.class_count(), &mut rng_for(i))).collect(),
        ),
        SyntheticTask::CheckerTextures(t) => {
            Dataset::Images((0..count).map(|i| t.sample(i % t.classes, &mut rng_for(i))).collect())
        }
        SyntheticTask::ToyImages(t) => {
            Dataset::Images((0..count).map(|i| t.sample(i % t.classes, &mut rng_for(i))).collect())
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(s: usize) -> Vec<Vec<f64>> {
        (0..s).map(|i| (0..s).map(|j| f64::from(u8::from(i == j))).collect()).collect()
    }

    fn all_codes(k: usize) -> Vec<BitVector> {
        (0..1u64 << k).map(|i| index_to_bits(i, k).unwrap()).collect()
    }

    #[test]
    fn identity_chain_repeats_its_first_token() {
        let s = 8;
        let m = MarkovBits::new(all_codes(3), vec![vec![1.0 / 8.0; s]], vec![identity(s)], 6).unwrap();
        let Dataset::Sequences(data) = gen_dataset(&SyntheticTask::MarkovBits(m), 50, 1).unwrap() else {
            panic!("expected sequences")
        };
        for seq in data {
            assert!(seq.tokens.iter().all(|t| t == &seq.tokens[0]));
        }
    }

    #[test]
    fn uniform_chain_has_uniform_marginal() {
        let k = 3;
        let s = 1 << k;
        let m = MarkovBits::new(all_codes(k), vec![vec![1.0 / s as f64; s]], vec![vec![vec![1.0 / s as f64; s]; s]], 2)
            .unwrap();
        let data = gen_dataset(&SyntheticTask::MarkovBits(m), 50_000, 2).unwrap().into_sequences().unwrap();
        let mut counts = vec![0usize; s];
        for seq in &data {
            for t in &seq.tokens {
                counts[bits_to_index(t).unwrap() as usize] += 1;
            }
        }
        let n = 100_000.0;
        let p = 1.0 / s as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n * p).abs() < 3.0 * sd, "count {c}");
        }
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let mut t = identity(4);
        t[2][2] = 0.9;
        let r = MarkovBits::new(all_codes(2), vec![vec![0.25; 4]], vec![t], 3);
        assert!(matches!(r, Err(BarError::Domain(_))));
        let mut t = identity(4);
        t[1] = vec![1.5, -0.5, 0.0, 0.0];
        assert!(MarkovBits::new(all_codes(2), vec![vec![0.25; 4]], vec![t], 3).is_err());
    }

    #[test]
    fn datasets_are_reproducible() {
        let m = MarkovBits::reference(8, 12, 3, 2, 5, 4).unwrap();
        let task = SyntheticTask::MarkovBits(m);
        assert_eq!(gen_dataset(&task, 40, 9).unwrap(), gen_dataset(&task, 40, 9).unwrap());
        assert_ne!(gen_dataset(&task, 40, 9).unwrap(), gen_dataset(&task, 40, 10).unwrap());
        let img = SyntheticTask::ToyImages(ToyImages { size: 8, channels: 3, classes: 3 });
        assert_eq!(gen_dataset(&img, 6, 1).unwrap(), gen_dataset(&img, 6, 1).unwrap());
    }

    #[test]
    fn reference_successors_are_separated() {
        for k in [4, 32] {
            let m = MarkovBits::reference(k, 8, 2, 2, 4, 5).unwrap();
            for class in 0..2 {
                for row in &m.transitions[class] {
                    let succ: Vec<usize> = (0..8).filter(|&j| row[j] > 0.0).collect();
                    assert_eq!(succ.len(), 2);
                    assert!(m.codewords[succ[0]].hamming(&m.codewords[succ[1]]) >= 2);
                }
            }
        }
    }

    #[test]
    fn exact_tables_normalize() {
        let m = MarkovBits::reference(4, 10, 2, 2, 3, 6).unwrap();
        for len in 1..=3 {
            let p = m.exact_distribution(1, len).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(m.exact_distribution(0, 4), Err(BarError::Capability(_))));
        let seq = m.sample_sequence(1, &mut stream(0, &[]));
        let idx = sequence_index(&seq.tokens).unwrap();
        assert!(m.exact_distribution(1, 3).unwrap()[idx] > 0.0);
    }

    #[test]
    fn images_stay_in_range() {
        let mut rng = stream(3, &[]);
        for class in 0..4 {
            let a = CheckerTextures { size: 16, channels: 3, classes: 4 }.sample(class, &mut rng);
            let b = ToyImages { size: 16, channels: 3, classes: 4 }.sample(class, &mut rng);
            for img in [a.image, b.image] {
                assert_eq!(img.shape(), (256, 3));
                assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }
}
