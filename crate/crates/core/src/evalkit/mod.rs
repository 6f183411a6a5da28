//! Frozen-encoder evaluation: same-category video retrieval, text-to-video
//! retrieval and linear-probe classification.

mod extract;
mod probe;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use extract::{center_window, extract_embeddings, Benchmark, ClipEmbeddings};
pub use probe::{linear_probe, train_probe, ProbeConfig, ProbeReport};

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-4;

/// Unit-norm embeddings keyed by item id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    labels: Vec<usize>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, labels: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != rows.len() {
            return Err(Error::Contract(format!(
                "{} ids, {} labels, {} embeddings",
                ids.len(),
                labels.len(),
                rows.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Contract(format!("duplicate item id {dup}")));
        }
        let dim = rows.first().map_or(0, Vec::len);
        for (id, r) in ids.iter().zip(&rows) {
            if r.len() != dim {
                return Err(Error::Contract(format!("embedding of {id} has {} dims, expected {dim}", r.len())));
            }
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(Error::Contract(format!("embedding of {id} has norm {n}")));
            }
        }
        Ok(EmbeddingIndex {
            ids,
            labels,
            dim,
            data: rows.concat(),
        })
    }

    /// L2-normalizes each row first.
    pub fn from_raw(ids: Vec<String>, labels: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::Numeric("cannot normalize a zero embedding".into()));
                }
                Ok(r.into_iter().map(|x| x / n).collect())
            })
            .collect::<Result<_>>()?;
        Self::new(ids, labels, rows)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Candidates ordered by cosine similarity to `query`, best first;
    /// ties go to the smaller id. `exclude` is left out.
    pub fn rank(&self, query: &[f64], exclude: Option<usize>) -> Vec<usize> {
        let sims: Vec<f64> = (0..self.len()).map(|i| dot(query, self.embedding(i))).collect();
        let mut order: Vec<usize> = (0..self.len()).filter(|&i| Some(i) != exclude).collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        order
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Recall at 1, 5 and 10 plus median rank of the first positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "MedR")]
    pub medr: f64,
    pub queries: usize,
}

impl RetrievalReport {
    fn from_ranks(ranks: &[usize]) -> Result<Self> {
        let n = ranks.len() as f64;
        let at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(RetrievalReport {
            r1: at(1),
            r5: at(5),
            r10: at(10),
            medr: median_rank(ranks)?,
            queries: ranks.len(),
        })
    }
}

/// Median of 1-based ranks; the mean of the central pair for even counts.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("median rank of an empty list".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks start at 1".into()));
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

/// Leave-one-out retrieval: each item queries every other item and hits
/// at `k` when a same-category item is among the top `k`. Items of
/// singleton categories are skipped as queries.
pub fn zero_shot_video_retrieval(index: &EmbeddingIndex) -> Result<RetrievalReport> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in index.labels() {
        *counts.entry(l).or_default() += 1;
    }
    let mut singles: Vec<usize> = counts.iter().filter(|(_, &c)| c < 2).map(|(&l, _)| l).collect();
    if !singles.is_empty() {
        singles.sort_unstable();
        log::warn!("categories {singles:?} have a single item and are excluded as queries");
    }
    let mut ranks = Vec::new();
    for q in 0..index.len() {
        let label = index.labels[q];
        if counts[&label] < 2 {
            continue;
        }
        let order = index.rank(index.embedding(q), Some(q));
        let first = order.iter().position(|&i| index.labels[i] == label).expect("category has another item");
        ranks.push(first + 1);
    }
    if ranks.is_empty() {
        return Err(Error::Contract("no category has two or more items".into()));
    }
    RetrievalReport::from_ranks(&ranks)
}

/// Text query paired with exactly one video of the index.
#[derive(Clone, Debug, PartialEq)]
pub struct TextQuery {
    pub video_id: String,
    pub embedding: Vec<f64>,
}

/// Ranks every video for each text query; the paired video is the only
/// positive.
pub fn text_to_video_retrieval(videos: &EmbeddingIndex, texts: &[TextQuery]) -> Result<RetrievalReport> {
    if texts.len() != videos.len() {
        return Err(Error::Contract(format!(
            "{} text queries for {} videos; pairing must be one to one",
            texts.len(),
            videos.len()
        )));
    }
    let pos: HashMap<&str, usize> = videos.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut used = HashSet::new();
    let mut ranks = Vec::with_capacity(texts.len());
    for t in texts {
        let &target = pos
            .get(t.video_id.as_str())
            .ok_or_else(|| Error::Contract(format!("text paired with unknown video {}", t.video_id)))?;
        if !used.insert(target) {
            return Err(Error::Contract(format!("video {} is paired twice", t.video_id)));
        }
        if t.embedding.len() != videos.dim() {
            return Err(Error::Contract(format!(
                "text embedding has {} dims, videos have {}",
                t.embedding.len(),
                videos.dim()
            )));
        }
        let order = videos.rank(&t.embedding, None);
        ranks.push(order.iter().position(|&i| i == target).expect("target ranked") + 1);
    }
    RetrievalReport::from_ranks(&ranks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:03}")).collect()
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_rank(&[1]).unwrap(), 1.0);
        assert_eq!(median_rank(&[1, 2, 3, 4]).unwrap(), 2.5);
        assert_eq!(median_rank(&[7, 7, 7]).unwrap(), 7.0);
        assert_eq!(median_rank(&[5, 1, 3]).unwrap(), 3.0);
        assert!(matches!(median_rank(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn clustered_embeddings_give_perfect_recall() {
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let rows = labels
            .iter()
            .map(|&l| (0..4).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = zero_shot_video_retrieval(&EmbeddingIndex::new(ids(12), labels, rows).unwrap()).unwrap();
        assert_eq!((r.r1, r.medr), (1.0, 1.0));
    }

    #[test]
    fn query_never_retrieves_itself() {
        // every item is alone in its direction; the self match would give R@1 = 1
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        let index = EmbeddingIndex::new(ids(4), vec![0, 1, 0, 1], rows).unwrap();
        let r = zero_shot_video_retrieval(&index).unwrap();
        assert_eq!(r.r1, 0.0);
        assert!(index.rank(index.embedding(0), Some(0)).iter().all(|&i| i != 0));
    }

    #[test]
    fn singleton_category_is_skipped() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = zero_shot_video_retrieval(&EmbeddingIndex::new(ids(3), vec![0, 0, 1], rows).unwrap()).unwrap();
        assert_eq!(r.queries, 2);
    }

    #[test]
    fn ties_break_by_id() {
        let rows = vec![vec![1.0, 0.0]; 3];
        let index = EmbeddingIndex::new(vec!["c".into(), "a".into(), "b".into()], vec![0, 0, 0], rows).unwrap();
        assert_eq!(index.rank(&[1.0, 0.0], None), vec![1, 2, 0]);
    }

    #[test]
    fn identical_spaces_give_rank_one() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let index = EmbeddingIndex::new(ids(5), vec![0; 5], rows.clone()).unwrap();
        let texts: Vec<TextQuery> = ids(5)
            .into_iter()
            .zip(rows)
            .map(|(video_id, embedding)| TextQuery { video_id, embedding })
            .collect();
        let r = text_to_video_retrieval(&index, &texts).unwrap();
        assert_eq!((r.r1, r.medr), (1.0, 1.0));
    }

    #[test]
    fn duplicate_pairing_is_rejected() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let index = EmbeddingIndex::new(ids(2), vec![0, 1], rows).unwrap();
        let q = TextQuery {
            video_id: "v000".into(),
            embedding: vec![1.0, 0.0],
        };
        let err = text_to_video_retrieval(&index, &[q.clone(), q]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn index_rejects_bad_input() {
        assert!(EmbeddingIndex::new(ids(1), vec![0], vec![vec![2.0, 0.0]]).is_err());
        assert!(EmbeddingIndex::new(vec!["a".into(), "a".into()], vec![0, 0], vec![vec![1.0], vec![1.0]]).is_err());
    }
}
