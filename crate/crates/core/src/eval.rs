//! Retrieval evaluation: Euclidean ranking with same-camera junk removal,
//! average precision, CMC, and the expected mAP of a random ranking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::ReidModel;
use crate::tape::Mat;

/// Identity and camera of one query or gallery image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub identity: u64,
    pub camera: u64,
}

/// Gallery ranking for one query. Junk entries (same identity and camera as
/// the query) are left out of `order`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Gallery indices, nearest first.
    pub order: Vec<usize>,
    /// Distances aligned with `order`, non-decreasing.
    pub distances: Vec<f64>,
    /// Gallery indices removed as junk.
    pub junk: Vec<usize>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn rank_gallery(
    query: &[f64],
    gallery: &[Vec<f64>],
    query_meta: ImageMeta,
    gallery_meta: &[ImageMeta],
) -> Result<RankingResult> {
    if gallery.len() != gallery_meta.len() {
        return Err(Error::LengthMismatch {
            left: gallery.len(),
            right: gallery_meta.len(),
        });
    }
    if let Some(g) = gallery.iter().find(|g| g.len() != query.len()) {
        return Err(Error::Dimension(format!(
            "query has {} dimensions, gallery entry {}",
            query.len(),
            g.len()
        )));
    }
    let (junk, valid): (Vec<usize>, Vec<usize>) = (0..gallery.len()).partition(|&i| gallery_meta[i] == query_meta);
    if valid.is_empty() {
        return Err(Error::Protocol(format!(
            "query of identity {} camera {} has no valid gallery entry",
            query_meta.identity, query_meta.camera
        )));
    }
    let mut scored: Vec<(f64, usize)> = valid.into_iter().map(|i| (euclidean(query, &gallery[i]), i)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RankingResult {
        order: scored.iter().map(|s| s.1).collect(),
        distances: scored.iter().map(|s| s.0).collect(),
        junk,
    })
}

/// Mean precision at the ranks of the relevant entries; `relevant` is indexed
/// by gallery position. `None` when the ranking holds no relevant entry.
pub fn average_precision(ranking: &RankingResult, relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &g) in ranking.order.iter().enumerate() {
        if relevant[g] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Rank (1-based) of the first relevant entry.
pub fn first_hit(ranking: &RankingResult, relevant: &[bool]) -> Option<usize> {
    ranking.order.iter().position(|&g| relevant[g]).map(|p| p + 1)
}

/// `cmc[r - 1]` is the fraction of queries whose first relevant entry is at
/// rank ≤ r, for r in 1..=max_rank. Queries without relevant entries are skipped.
pub fn compute_cmc(rankings: &[RankingResult], relevance: &[Vec<bool>], max_rank: usize) -> Result<Vec<f64>> {
    if rankings.len() != relevance.len() {
        return Err(Error::LengthMismatch {
            left: rankings.len(),
            right: relevance.len(),
        });
    }
    let mut counts = vec![0usize; max_rank];
    let mut scored = 0usize;
    for (r, rel) in rankings.iter().zip(relevance) {
        if let Some(hit) = first_hit(r, rel) {
            scored += 1;
            for c in counts.iter_mut().skip(hit - 1) {
                *c += 1;
            }
        }
    }
    if scored == 0 {
        return Err(Error::Protocol("no query has a relevant gallery entry".into()));
    }
    Ok(counts.into_iter().map(|c| c as f64 / scored as f64).collect())
}

/// Expected AP when `n` valid entries holding `relevant` matches are ranked
/// uniformly at random.
pub fn expected_random_ap(n: usize, relevant: usize) -> f64 {
    assert!(relevant >= 1 && relevant <= n, "need 1 <= relevant <= n");
    let harmonic: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    if n == 1 {
        return 1.0;
    }
    let pair = (relevant - 1) as f64 / (n - 1) as f64;
    (harmonic + pair * (n as f64 - harmonic)) / n as f64
}

/// Which model, trained where, evaluated where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Protocol {
    pub train_domain: String,
    pub test_domain: String,
    pub init: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean AP in [0, 1].
    pub map: f64,
    /// Rank to CMC value.
    pub cmc: BTreeMap<usize, f64>,
    /// Expected mAP of a uniformly random ranking of the same queries.
    pub random_map: f64,
    pub protocol: Protocol,
    pub queries: usize,
    pub gallery: usize,
    /// Queries without any relevant valid gallery entry.
    pub excluded_queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<serde_json::Value>,
}

pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

pub fn evaluate_embeddings(
    query: &[Vec<f64>],
    query_meta: &[ImageMeta],
    gallery: &[Vec<f64>],
    gallery_meta: &[ImageMeta],
    protocol: Protocol,
) -> Result<EvalReport> {
    if query.len() != query_meta.len() {
        return Err(Error::LengthMismatch {
            left: query.len(),
            right: query_meta.len(),
        });
    }
    if query.is_empty() {
        return Err(Error::EmptyInput("evaluation queries"));
    }
    let mut rankings = Vec::new();
    let mut relevance = Vec::new();
    let mut aps = Vec::new();
    let mut random = Vec::new();
    for (q, &meta) in query.iter().zip(query_meta) {
        let ranking = rank_gallery(q, gallery, meta, gallery_meta)?;
        let rel: Vec<bool> = gallery_meta.iter().map(|g| g.identity == meta.identity).collect();
        if let Some(ap) = average_precision(&ranking, &rel) {
            aps.push(ap);
            let r = ranking.order.iter().filter(|&&g| rel[g]).count();
            random.push(expected_random_ap(ranking.order.len(), r));
        }
        rankings.push(ranking);
        relevance.push(rel);
    }
    let excluded = query.len() - aps.len();
    if excluded > 0 {
        log::warn!("{excluded} queries have no relevant gallery entry and are left out of mAP");
    }
    let max_rank = *CMC_RANKS.last().expect("non-empty");
    let cmc = compute_cmc(&rankings, &relevance, max_rank)?;
    Ok(EvalReport {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        cmc: CMC_RANKS.iter().map(|&r| (r, cmc[r - 1])).collect(),
        random_map: random.iter().sum::<f64>() / random.len() as f64,
        protocol,
        queries: query.len(),
        gallery: gallery.len(),
        excluded_queries: excluded,
        lineage: None,
    })
}

/// Query and gallery images of one test split.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub domain: String,
    pub query: Vec<(Mat, ImageMeta)>,
    pub gallery: Vec<(Mat, ImageMeta)>,
}

fn embed_all(model: &ReidModel, items: &[(Mat, ImageMeta)]) -> Result<(Vec<Vec<f64>>, Vec<ImageMeta>)> {
    let emb = items.iter().map(|(m, _)| model.embed(m)).collect::<Result<Vec<_>>>()?;
    Ok((emb, items.iter().map(|(_, meta)| *meta).collect()))
}

/// Ranks the test split of the domain the model was trained on.
pub fn evaluate(model: &ReidModel, set: &EvalSet, init: &str) -> Result<EvalReport> {
    cross_domain_eval(model, &set.domain, set, init)
}

/// Direct transfer: a model trained on `train_domain` ranks another domain's split.
pub fn cross_domain_eval(model: &ReidModel, train_domain: &str, set: &EvalSet, init: &str) -> Result<EvalReport> {
    let (q, qm) = embed_all(model, &set.query)?;
    let (g, gm) = embed_all(model, &set.gallery)?;
    evaluate_embeddings(
        &q,
        &qm,
        &g,
        &gm,
        Protocol {
            train_domain: train_domain.to_string(),
            test_domain: set.domain.clone(),
            init: init.to_string(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(identity: u64, camera: u64) -> ImageMeta {
        ImageMeta { identity, camera }
    }

    #[test]
    fn self_match_ranks_first_and_junk_is_dropped() {
        let q = vec![1.0, 0.0];
        let gallery = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let gm = [meta(2, 0), meta(1, 1), meta(1, 0)];
        let r = rank_gallery(&q, &gallery, meta(1, 0), &gm).unwrap();
        assert_eq!(r.order, vec![1, 0]);
        assert_eq!(r.junk, vec![2]);
    }

    #[test]
    fn only_junk_is_a_protocol_error() {
        let r = rank_gallery(&[0.0], &[vec![0.0]], meta(1, 0), &[meta(1, 0)]);
        assert!(matches!(r, Err(Error::Protocol(_))));
    }

    #[test]
    fn ap_hand_values() {
        let r = RankingResult {
            order: vec![0, 1, 2],
            distances: vec![0.0, 1.0, 2.0],
            junk: vec![],
        };
        let ap = average_precision(&r, &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&r, &[true, true, true]), Some(1.0));
        assert_eq!(average_precision(&r, &[false, false, true]), Some(1.0 / 3.0));
        assert_eq!(average_precision(&r, &[false, false, false]), None);
    }

    #[test]
    fn random_ap_edges() {
        assert!((expected_random_ap(5, 5) - 1.0).abs() < 1e-12);
        let h3 = 1.0 + 0.5 + 1.0 / 3.0;
        assert!((expected_random_ap(3, 1) - h3 / 3.0).abs() < 1e-12);
    }
}
