//! Hashed n-gram features and a trainable linear projection to unit vectors.
//!
//! Text is normalized, split into word unigrams and character n-grams (taken
//! inside each word padded as `<word>`), and every feature is hashed into one
//! of `F` buckets with a seeded 64-bit hash. The low bits pick the bucket, the
//! top bit picks the sign. The bag is L2-normalized, projected by a
//! `d_out × F` matrix and normalized again.
//!
//! Model file layout (little-endian):
//!
//! ```text
//! "RVRM" | version u32 | d_out u32 | F u32 | hash_seed u64 | ngram_min u32 | ngram_max u32
//! | d_out * F f64 weights, row-major
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{normalize, Document};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"RVRM";
pub const MODEL_VERSION: u32 = 1;
const MODEL_HEADER_LEN: usize = 32;

/// Separator placed between the query and each context document.
pub const DOC_SEPARATOR: &str = " [DOC] ";

const WORD_TAG: u8 = b'w';
const CHAR_TAG: u8 = b'c';

/// Seeded FNV-1a followed by the splitmix64 finalizer.
pub fn feature_hash(seed: u64, tag: u8, token: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed
        .to_le_bytes()
        .iter()
        .chain(std::iter::once(&tag))
        .chain(token.as_bytes())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub d_out: usize,
    pub n_features: usize,
    pub hash_seed: u64,
    pub ngram_min: usize,
    pub ngram_max: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            d_out: 64,
            n_features: 1 << 15,
            hash_seed: 42,
            ngram_min: 3,
            ngram_max: 5,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 {
            return Err(Error::Config("d_out must be at least 1".into()));
        }
        if !self.n_features.is_power_of_two() || self.n_features > (1 << 31) {
            return Err(Error::Config(format!(
                "n_features must be a power of two no larger than 2^31, got {}",
                self.n_features
            )));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::Config(format!(
                "invalid n-gram range ({}, {})",
                self.ngram_min, self.ngram_max
            )));
        }
        Ok(())
    }

    /// Raw (unhashed) feature counts of `text`, keyed by `(tag, token)`.
    pub fn raw_features(&self, text: &str) -> HashMap<(u8, String), u32> {
        let norm = normalize(text);
        let mut counts = HashMap::new();
        if norm.is_empty() {
            return counts;
        }
        let mut buf: Vec<char> = Vec::new();
        for word in norm.split(' ') {
            *counts.entry((WORD_TAG, word.to_string())).or_insert(0) += 1;
            buf.clear();
            buf.push('<');
            buf.extend(word.chars());
            buf.push('>');
            for n in self.ngram_min..=self.ngram_max.min(buf.len()) {
                for window in buf.windows(n) {
                    let gram: String = window.iter().collect();
                    *counts.entry((CHAR_TAG, gram)).or_insert(0) += 1;
                }
            }
        }
        counts
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        let mask = (self.n_features - 1) as u64;
        let mut buckets: HashMap<u32, f64> = HashMap::new();
        for ((tag, token), count) in self.raw_features(text) {
            let h = feature_hash(self.hash_seed, tag, &token);
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            *buckets.entry((h & mask) as u32).or_insert(0.0) += sign * f64::from(count);
        }
        FeatureVector::from_buckets(buckets)
    }
}

/// Sparse, L2-normalized hashed feature vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector {
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl FeatureVector {
    fn from_buckets(buckets: HashMap<u32, f64>) -> Self {
        let mut entries: Vec<(u32, f64)> = buckets.into_iter().filter(|(_, v)| *v != 0.0).collect();
        entries.sort_unstable_by_key(|(i, _)| *i);
        let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        let (indices, values) = entries.into_iter().map(|(i, v)| (i, v / norm)).unzip();
        Self { indices, values }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }
}

/// Dense vector of length `d_out`; unit norm, or all zeros for empty input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

/// Dot product; equals cosine similarity for unit vectors.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum())
}

/// SHA-256 of a serialized model file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// The trainable encoder: hashed features followed by a linear projection.
#[derive(Debug, Clone)]
pub struct EmbedderModel {
    config: EmbedderConfig,
    /// Feature-major: the `d_out` weights of feature `c` are contiguous at
    /// `c * d_out`. Files store the same matrix row-major.
    params: Vec<f64>,
    fingerprint: OnceLock<Fingerprint>,
}

impl PartialEq for EmbedderModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl EmbedderModel {
    /// Builds a model from a row-major `d_out x F` weight matrix.
    pub fn from_weights(config: EmbedderConfig, weights: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.d_out * config.n_features;
        if weights.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: weights.len(),
            });
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("weight at flat index {pos}")));
        }
        let (d, f) = (config.d_out, config.n_features);
        let mut params = vec![0.0; expected];
        for r in 0..d {
            for c in 0..f {
                params[c * d + r] = weights[r * f + c];
            }
        }
        Ok(Self {
            config,
            params,
            fingerprint: OnceLock::new(),
        })
    }

    /// Gaussian init with variance `1 / d_out`, so projected unit features
    /// have roughly unit norm.
    pub fn random(config: EmbedderConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let normal = Normal::new(0.0, 1.0 / (config.d_out as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let weights = (0..config.d_out * config.n_features)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self::from_weights(config, weights)
    }

    /// `d_out = F` with identity weights: embeddings equal the feature vectors.
    pub fn identity(n_features: usize, hash_seed: u64, ngram: (usize, usize)) -> Result<Self> {
        let config = EmbedderConfig {
            d_out: n_features,
            n_features,
            hash_seed,
            ngram_min: ngram.0,
            ngram_max: ngram.1,
        };
        config.validate()?;
        let mut weights = vec![0.0; n_features * n_features];
        for i in 0..n_features {
            weights[i * n_features + i] = 1.0;
        }
        Self::from_weights(config, weights)
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn d_out(&self) -> usize {
        self.config.d_out
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features
    }

    /// The weight matrix in row-major `d_out x F` order.
    pub fn weights_row_major(&self) -> Vec<f64> {
        let (d, f) = (self.config.d_out, self.config.n_features);
        let mut out = vec![0.0; d * f];
        for (c, col) in self.params.chunks_exact(d).enumerate() {
            for (r, w) in col.iter().enumerate() {
                out[r * f + c] = *w;
            }
        }
        out
    }

    /// Raw parameter buffer in feature-major order; see [`Self::param_index`].
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter buffer; clears the cached fingerprint.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.fingerprint = OnceLock::new();
        &mut self.params
    }

    /// Position of `W[row, col]` in [`Self::params`].
    pub fn param_index(&self, row: usize, col: usize) -> usize {
        col * self.config.d_out + row
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.params[self.param_index(row, col)]
    }

    pub fn featurize(&self, text: &str) -> FeatureVector {
        self.config.featurize(text)
    }

    /// Unnormalized projection `W x`.
    pub fn project(&self, features: &FeatureVector) -> Vec<f64> {
        let d = self.config.d_out;
        let mut u = vec![0.0; d];
        for (c, v) in features.iter() {
            for (acc, w) in u.iter_mut().zip(&self.params[c * d..(c + 1) * d]) {
                *acc += w * v;
            }
        }
        u
    }

    pub fn embed_features(&self, features: &FeatureVector) -> Result<Embedding> {
        let mut u = self.project(features);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection overflowed".into()));
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("embedding norm overflowed".into()));
        }
        if norm > 0.0 {
            u.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Embedding(u))
    }

    pub fn embed(&self, text: &str) -> Result<Embedding> {
        self.embed_features(&self.featurize(text))
    }

    pub fn embed_document(&self, doc: &Document) -> Result<Embedding> {
        self.embed(&doc.full_text())
    }

    pub fn fingerprint(&self) -> Fingerprint {
        *self.fingerprint.get_or_init(|| {
            let mut sink = HashSink(Sha256::new());
            self.write_to(&mut sink)
                .expect("hashing sink does not fail");
            let digest = sink.0.finalize();
            let mut fp = [0u8; 32];
            fp.copy_from_slice(&digest);
            Fingerprint(fp)
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = &self.config;
        let mut header = Vec::with_capacity(MODEL_HEADER_LEN);
        header.extend_from_slice(&MODEL_MAGIC);
        header.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        header.extend_from_slice(&(c.d_out as u32).to_le_bytes());
        header.extend_from_slice(&(c.n_features as u32).to_le_bytes());
        header.extend_from_slice(&c.hash_seed.to_le_bytes());
        header.extend_from_slice(&(c.ngram_min as u32).to_le_bytes());
        header.extend_from_slice(&(c.ngram_max as u32).to_le_bytes());
        w.write_all(&header)?;
        let (d, f) = (c.d_out, c.n_features);
        let mut buf = Vec::with_capacity(8 * f);
        for r in 0..d {
            buf.clear();
            for col in 0..f {
                buf.extend_from_slice(&self.params[col * d + r].to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: MODEL_HEADER_LEN as u64,
                actual,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < MODEL_HEADER_LEN {
            return Err(Error::Truncated {
                expected: MODEL_HEADER_LEN as u64,
                actual,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: MODEL_VERSION,
            });
        }
        let config = EmbedderConfig {
            d_out: u32_at(8) as usize,
            n_features: u32_at(12) as usize,
            hash_seed: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            ngram_min: u32_at(24) as usize,
            ngram_max: u32_at(28) as usize,
        };
        config
            .validate()
            .map_err(|e| Error::Corrupt(format!("model header: {e}")))?;
        let count = config.d_out * config.n_features;
        let expected = (MODEL_HEADER_LEN + count * 8) as u64;
        if actual != expected {
            return Err(if actual < expected {
                Error::Truncated { expected, actual }
            } else {
                Error::Corrupt(format!(
                    "{} trailing bytes after weights",
                    actual - expected
                ))
            });
        }
        let weights = bytes[MODEL_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_weights(config, weights).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct HashSink(Sha256);

impl Write for HashSink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// `q [DOC] title. text [DOC] ...` over the first `m_budget` context documents.
pub fn augment_query<'a, I>(query: &str, ctx_docs: I, m_budget: usize) -> String
where
    I: IntoIterator<Item = &'a Document>,
{
    let mut out = query.to_string();
    for doc in ctx_docs.into_iter().take(m_budget) {
        out.push_str(DOC_SEPARATOR);
        out.push_str(&doc.render());
    }
    out
}
