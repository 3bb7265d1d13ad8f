//! Exact top-k inner-product search over an embedded corpus.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! "RVRI" | version u32 | doc count u64 | d_out u32 | model fingerprint [u8; 32]
//! | per doc: id length u32, id UTF-8 bytes
//! | count * d_out f32 matrix, row-major
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::embedder::{EmbedderModel, Embedding, Fingerprint};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: [u8; 4] = *b"RVRI";
pub const INDEX_VERSION: u32 = 1;

/// Rows per parallel scoring chunk.
const SCAN_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

/// Entries sorted by descending score, ties by ascending doc id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn top(&self, k: usize) -> &[RankedEntry] {
        &self.entries[..k.min(self.entries.len())]
    }
}

/// Total order used for ranking: higher score first, then smaller doc id.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    doc_ids: Vec<String>,
    dim: usize,
    matrix: Vec<f32>,
    fingerprint: Fingerprint,
}

impl VectorIndex {
    pub fn build(corpus: &Corpus, model: &EmbedderModel) -> Result<Self> {
        let dim = model.d_out();
        let rows: Vec<Embedding> = corpus
            .docs()
            .par_iter()
            .map(|d| model.embed_document(d))
            .collect::<Result<_>>()?;
        let mut matrix = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            matrix.extend(row.as_slice().iter().map(|&v| v as f32));
        }
        Ok(Self {
            doc_ids: corpus.iter().map(|d| d.id.clone()).collect(),
            dim,
            matrix,
            fingerprint: model.fingerprint(),
        })
    }

    pub fn from_parts(
        doc_ids: Vec<String>,
        dim: usize,
        matrix: Vec<f32>,
        fingerprint: Fingerprint,
    ) -> Result<Self> {
        if matrix.len() != doc_ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: doc_ids.len() * dim,
                actual: matrix.len(),
            });
        }
        let mut seen = HashSet::with_capacity(doc_ids.len());
        if let Some(dup) = doc_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        Ok(Self {
            doc_ids,
            dim,
            matrix,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn check_model(&self, model: &EmbedderModel) -> Result<()> {
        let fp = model.fingerprint();
        if fp != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                model: fp.to_string(),
                index: self.fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn search(&self, model: &EmbedderModel, query_text: &str, k: usize) -> Result<RankedList> {
        self.check_model(model)?;
        let q = model.embed(query_text)?;
        self.search_embedding(&q, k)
    }

    /// Exact top-`k` for an already embedded query.
    pub fn search_embedding(&self, query: &Embedding, k: usize) -> Result<RankedList> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let k = k.min(self.len());
        if k == 0 {
            return Ok(RankedList::default());
        }
        let q = query.as_slice();
        let mut scores = vec![0.0f64; self.len()];
        scores
            .par_chunks_mut(SCAN_CHUNK)
            .enumerate()
            .for_each(|(chunk, out)| {
                let start = chunk * SCAN_CHUNK;
                for (j, s) in out.iter_mut().enumerate() {
                    let row = self.row(start + j);
                    *s = row.iter().zip(q).map(|(&r, &x)| f64::from(r) * x).sum();
                }
            });

        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |a: &usize, b: &usize| {
            rank_order(scores[*a], &self.doc_ids[*a], scores[*b], &self.doc_ids[*b])
        };
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(RankedList {
            entries: order
                .into_iter()
                .map(|i| RankedEntry {
                    doc_id: self.doc_ids[i].clone(),
                    score: scores[i],
                })
                .collect(),
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.fingerprint.0)?;
        for id in &self.doc_ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(1 << 16);
        for chunk in self.matrix.chunks(1 << 14) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if magic != INDEX_MAGIC {
            return Err(Error::BadMagic {
                expected: INDEX_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: INDEX_VERSION,
            });
        }
        let count = cur.u64()?;
        let dim = cur.u32()? as usize;
        let fingerprint = Fingerprint(cur.take(32)?.try_into().unwrap());
        let count = usize::try_from(count)
            .map_err(|_| Error::Corrupt(format!("document count {count} too large")))?;
        let mut doc_ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let raw = cur.take(len)?;
            let id = std::str::from_utf8(raw)
                .map_err(|e| Error::Corrupt(format!("document id is not UTF-8: {e}")))?;
            doc_ids.push(id.to_string());
        }
        let expected = cur.pos as u64 + (count as u64) * (dim as u64) * 4;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(Error::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after matrix",
                actual - expected
            )));
        }
        let matrix = bytes[cur.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_parts(doc_ids, dim, matrix, fingerprint)
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

pub fn build_index(corpus: &Corpus, model: &EmbedderModel) -> Result<VectorIndex> {
    VectorIndex::build(corpus, model)
}

pub fn search(
    index: &VectorIndex,
    model: &EmbedderModel,
    query_text: &str,
    k: usize,
) -> Result<RankedList> {
    index.search(model, query_text, k)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Document;
    use crate::embedder::EmbedderConfig;
    use proptest::prelude::*;

    fn model() -> EmbedderModel {
        EmbedderModel::random(
            EmbedderConfig {
                d_out: 16,
                n_features: 1024,
                hash_seed: 5,
                ngram_min: 3,
                ngram_max: 4,
            },
            9,
        )
        .unwrap()
    }

    fn corpus(n: usize) -> Corpus {
        let words = [
            "heat",
            "strain",
            "crying",
            "freeman",
            "sanctuary",
            "wounded",
            "man",
            "mai",
        ];
        Corpus::new(
            (0..n)
                .map(|i| {
                    let text: Vec<&str> = (0..5)
                        .map(|j| words[(i * 7 + j * 3) % words.len()])
                        .collect();
                    Document::new(format!("d{i:03}"), "", text.join(" "))
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rows_align_with_corpus() {
        let c = corpus(3);
        let idx = build_index(&c, &model()).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.doc_ids(), ["d000", "d001", "d002"]);
    }

    #[test]
    fn k_edge_cases() {
        let c = corpus(10);
        let m = model();
        let idx = build_index(&c, &m).unwrap();
        assert!(idx.search(&m, "heat", 0).unwrap().is_empty());
        let all = idx.search(&m, "heat", 50).unwrap();
        assert_eq!(all.len(), 10);
        let empty = Corpus::default();
        let idx0 = build_index(&empty, &m).unwrap();
        assert!(idx0.search(&m, "heat", 5).unwrap().is_empty());
    }

    #[test]
    fn wrong_model_is_rejected() {
        let c = corpus(4);
        let idx = build_index(&c, &model()).unwrap();
        let other = EmbedderModel::random(*model().config(), 10).unwrap();
        assert!(matches!(
            idx.search(&other, "heat", 2),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_documents_tie_by_id() {
        let docs = vec![
            Document::new("z", "", "crying freeman"),
            Document::new("b", "", "crying freeman"),
            Document::new("m", "", "crying freeman"),
            Document::new("a", "", "sanctuary"),
        ];
        let c = Corpus::new(docs).unwrap();
        let m = model();
        let idx = build_index(&c, &m).unwrap();
        let r = idx.search(&m, "crying freeman", 3).unwrap();
        let ids: Vec<_> = r.ids().collect();
        assert_eq!(ids, ["b", "m", "z"]);
        assert_eq!(r.entries[0].score, r.entries[2].score);
    }

    #[test]
    fn save_load_round_trip() {
        let c = corpus(12);
        let m = model();
        let idx = build_index(&c, &m).unwrap();
        let mut bytes = Vec::new();
        idx.write_to(&mut bytes).unwrap();
        let back = VectorIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back.doc_ids(), idx.doc_ids());
        let a: Vec<u32> = back.matrix().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = idx.matrix().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);

        let mut again = Vec::new();
        build_index(&c, &m).unwrap().write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn corrupt_files_have_distinct_errors() {
        let c = corpus(12);
        let idx = build_index(&c, &model()).unwrap();
        let mut bytes = Vec::new();
        idx.write_to(&mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(
            VectorIndex::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));

        let cut = bytes.len() - 37;
        match VectorIndex::from_bytes(&bytes[..cut]) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, cut as u64);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            VectorIndex::from_bytes(&bytes[..30]),
            Err(Error::Truncated { .. })
        ));
    }

    proptest! {
        #[test]
        fn smaller_k_is_a_prefix(k1 in 0usize..20, k2 in 0usize..20, q in "[a-z ]{0,20}") {
            let (k1, k2) = (k1.min(k2), k1.max(k2));
            let c = corpus(15);
            let m = model();
            let idx = build_index(&c, &m).unwrap();
            let a = idx.search(&m, &q, k1).unwrap();
            let b = idx.search(&m, &q, k2).unwrap();
            prop_assert_eq!(&b.entries[..a.len()], &a.entries[..]);
            prop_assert_eq!(a.len(), k1.min(15));
            prop_assert!(b.entries.windows(2).all(|w| rank_order(w[0].score, &w[0].doc_id, w[1].score, &w[1].doc_id) == Ordering::Less));
        }
    }
}
