//! Synthetic token-to-feature corpus.
//!
//! Tokens `1, 2` and `3, 4` form two pairs whose acoustic prototypes differ
//! only by `pair_separation`. Which member of a pair is spoken is fixed by
//! the parity of an earlier token: the previous one for the first pair, the
//! one two back for the second. The remaining ids are ordinary tokens. A
//! sequence starts with an ordinary token, a pair token is always followed
//! by an ordinary token, and no token repeats immediately.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

/// Smallest vocabulary with both pairs and at least two ordinary tokens.
pub const MIN_VOCAB: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token: (usize, usize),
    pub noise_std: f64,
    pub token_len: (usize, usize),
    pub corpus_size: usize,
    pub seed: u64,
    /// Distance between the two prototypes of a pair.
    pub pair_separation: f64,
    /// Probability that an ordinary token is followed by a token of each pair.
    pub pair_prob: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            feature_dim: 16,
            frames_per_token: (5, 8),
            noise_std: 0.4,
            token_len: (4, 10),
            corpus_size: 1000,
            seed: 1,
            pair_separation: 0.05,
            pair_prob: 0.2,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::config("task.vocab", format!("need at least {MIN_VOCAB} tokens")));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("task.feature_dim", "must be positive"));
        }
        let (rmin, rmax) = self.frames_per_token;
        if rmin == 0 || rmin > rmax {
            return Err(Error::config("task.frames_min", "need 1 <= frames_min <= frames_max"));
        }
        let (lmin, lmax) = self.token_len;
        if lmin == 0 || lmin > lmax {
            return Err(Error::config("task.len_min", "need 1 <= len_min <= len_max"));
        }
        if self.corpus_size == 0 {
            return Err(Error::config("task.corpus_size", "must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("task.noise_std", "must be non-negative"));
        }
        if !(0.0..=0.5).contains(&self.pair_prob) {
            return Err(Error::config("task.pair_prob", "must lie in [0, 0.5]"));
        }
        if !(self.pair_separation >= 0.0) {
            return Err(Error::config("task.pair_separation", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T x d]` frames.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Split point between training and held-out utterances (last 10%).
pub fn split_index(len: usize) -> usize {
    len - (len / 10).max(1).min(len.saturating_sub(1))
}

fn is_pair(t: usize) -> bool {
    (1..=4).contains(&t)
}

/// Prototype of every token id, index 0 unused.
pub fn prototypes(spec: &SyntheticTaskSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(spec.seed, Stream::Corpus);
    prototypes_from(spec, &mut rng)
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn prototypes_from(spec: &SyntheticTaskSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let d = spec.feature_dim;
    let draw = |rng: &mut Rng| -> Vec<f64> { (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let mut protos = vec![vec![0.0; d]];
    for t in 1..=spec.vocab_size {
        let base = draw(rng);
        if t == 2 || t == 4 {
            let dir = base;
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let partner = protos[t - 1].clone();
            protos.push(
                partner
                    .iter()
                    .zip(&dir)
                    .map(|(p, u)| round_f32(p + spec.pair_separation * u / norm))
                    .collect(),
            );
        } else {
            protos.push(base.into_iter().map(round_f32).collect());
        }
    }
    protos
}

fn parity(t: Option<usize>) -> usize {
    t.map_or(0, |t| t % 2)
}

fn ordinary(rng: &mut Rng, v: usize, avoid: Option<usize>) -> usize {
    loop {
        let t = rng.random_range(5..=v);
        if Some(t) != avoid {
            return t;
        }
    }
}

/// Samples one label sequence from the grammar.
pub fn sample_labels(spec: &SyntheticTaskSpec, rng: &mut Rng) -> Vec<usize> {
    let len = rng.random_range(spec.token_len.0..=spec.token_len.1);
    let mut out: Vec<usize> = Vec::with_capacity(len);
    for i in 0..len {
        let prev = out.last().copied();
        let next = match prev {
            None => ordinary(rng, spec.vocab_size, None),
            Some(p) if is_pair(p) => ordinary(rng, spec.vocab_size, None),
            Some(p) => {
                let draw: f64 = rng.random();
                let two_back = (i >= 2).then(|| out[i - 2]);
                if draw < spec.pair_prob {
                    1 + parity(Some(p))
                } else if draw < 2.0 * spec.pair_prob && two_back.is_some() {
                    3 + parity(two_back)
                } else {
                    ordinary(rng, spec.vocab_size, Some(p))
                }
            }
        };
        out.push(next);
    }
    out
}

/// Deterministic corpus for `spec.seed`; features are stored at 32-bit precision.
pub fn generate_corpus(spec: &SyntheticTaskSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Corpus);
    let protos = prototypes_from(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config("task.noise_std", e.to_string()))?;
    let d = spec.feature_dim;
    let mut corpus = Vec::with_capacity(spec.corpus_size);
    for n in 0..spec.corpus_size {
        let labels = sample_labels(spec, &mut rng);
        let mut data = Vec::new();
        for &t in &labels {
            let r = rng.random_range(spec.frames_per_token.0..=spec.frames_per_token.1);
            for _ in 0..r {
                data.extend(protos[t].iter().map(|&p| round_f32(p + noise.sample(&mut rng))));
            }
        }
        let frames = data.len() / d;
        corpus.push(Utterance {
            id: format!("utt{n:05}"),
            features: Tensor::new(vec![frames, d], data)?,
            labels,
        });
    }
    Ok(corpus)
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_corpus<W: Write>(corpus: &[Utterance], mut w: W) -> Result<()> {
    for u in corpus {
        put_u32(&mut w, u.id.len())?;
        w.write_all(u.id.as_bytes())?;
        put_u32(&mut w, u.features.rows())?;
        put_u32(&mut w, u.features.cols())?;
        for &x in u.features.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        put_u32(&mut w, u.labels.len())?;
        for &l in &u.labels {
            put_u32(&mut w, l)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn read_corpus<R: Read>(mut r: R) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    loop {
        let mut b = [0u8; 4];
        match r.read_exact(&mut b) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let id_len = u32::from_le_bytes(b) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| Error::Format(e.to_string()))?;
        let t = get_u32(&mut r)?;
        let d = get_u32(&mut r)?;
        let mut buf = vec![0u8; 4 * t * d];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let u = get_u32(&mut r)?;
        let labels = (0..u).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        if labels.contains(&0) {
            return Err(Error::Format(format!("utterance {id} contains the blank id")));
        }
        out.push(Utterance {
            id,
            features: Tensor::new(vec![t, d], data)?,
            labels,
        });
    }
    Ok(out)
}

pub fn save_corpus(corpus: &[Utterance], path: &Path) -> Result<()> {
    write_corpus(corpus, BufWriter::new(File::create(path)?))
}

pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    read_corpus(BufReader::new(File::open(path)?))
}
