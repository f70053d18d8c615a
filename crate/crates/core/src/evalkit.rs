//! Retrieval evaluation: embedding extraction, gallery ranking and top-k accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::LoadedSample;
use crate::error::{Error, Result};
use crate::heatmap::{render_stack, HeatmapConfig};
use crate::model::{encode_batch, LandmarkNet};

pub const TOP_KS: [usize; 3] = [1, 5, 10];
const EMBED_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: usize,
    pub identity: String,
    pub embedding: Vec<f32>,
}

/// Embeds samples in inference mode (no augmentation) and L2-normalizes the result.
/// Heatmaps are rendered from the annotated coordinates; `k = 0` models ignore them.
pub fn embed_all(net: &mut LandmarkNet<f32>, samples: &[LoadedSample], hm: &HeatmapConfig) -> Result<Vec<EmbeddingRecord>> {
    let k = net.config.k;
    let mut out = Vec::with_capacity(samples.len());
    for (ci, chunk) in samples.chunks(EMBED_BATCH).enumerate() {
        let stacks = if k > 0 {
            chunk
                .iter()
                .map(|s| {
                    let lms = &s.sample.landmarks;
                    if lms.k() != k {
                        return Err(Error::Eval(format!(
                            "{} has {} landmarks; checkpoint expects {k}",
                            s.sample.image_path,
                            lms.k()
                        )));
                    }
                    Ok(render_stack(lms, &hm.at_size(s.image.width)))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let maps: Vec<_> = stacks.iter().map(Some).collect();
        let input = encode_batch(&images, &maps, k)?;
        let size = chunk[0].image.width;
        let fwd = net.forward(chunk.len(), size, size, &input, false, false)?;
        for (j, s) in chunk.iter().enumerate() {
            let mut e = fwd.embedding.row(j).to_vec();
            let norm = e.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::Eval(format!("degenerate embedding for {}", s.sample.image_path)));
            }
            e.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            out.push(EmbeddingRecord {
                sample_id: ci * EMBED_BATCH + j,
                identity: s.sample.identity.clone(),
                embedding: e,
            });
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Gallery sample ids by ascending Euclidean distance; ties go to the lower id.
pub fn rank_gallery(query: &[f32], gallery: &[EmbeddingRecord]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = gallery.iter().map(|g| (sq_dist(query, &g.embedding), g.sample_id)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, id)| id).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: usize,
    pub identity: String,
    /// Gallery sample ids, best match first.
    pub ranked: Vec<usize>,
    /// Zero-based rank of the first same-identity gallery item.
    pub first_hit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
    /// Accuracies are fractions over queries.
    pub averaged_over: String,
    pub config_digest: String,
    pub queries: Vec<QueryResult>,
}

impl RetrievalReport {
    pub fn topk(&self, k: usize) -> f64 {
        let hits = self.queries.iter().filter(|q| q.first_hit < k).count();
        hits as f64 / self.queries.len().max(1) as f64
    }
}

/// Ranks every query against the gallery. Query and gallery sets must be
/// disjoint collections, and every query identity must appear in the gallery.
pub fn topk_accuracy(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord], config_digest: &str) -> Result<RetrievalReport> {
    if gallery.is_empty() {
        return Err(Error::Eval("empty gallery".into()));
    }
    let by_id: std::collections::HashMap<usize, &EmbeddingRecord> = gallery.iter().map(|g| (g.sample_id, g)).collect();
    let mut results = Vec::with_capacity(queries.len());
    for q in queries {
        let ranked = rank_gallery(&q.embedding, gallery);
        let first_hit = ranked
            .iter()
            .position(|id| by_id[id].identity == q.identity)
            .ok_or_else(|| Error::Eval(format!("query identity {} is absent from the gallery", q.identity)))?;
        results.push(QueryResult {
            query_id: q.sample_id,
            identity: q.identity.clone(),
            ranked,
            first_hit,
        });
    }
    let mut report = RetrievalReport {
        top1: 0.0,
        top5: 0.0,
        top10: 0.0,
        n_queries: queries.len(),
        n_gallery: gallery.len(),
        averaged_over: "queries".into(),
        config_digest: config_digest.to_string(),
        queries: results,
    };
    report.top1 = report.topk(1);
    report.top5 = report.topk(5);
    report.top10 = report.topk(10);
    Ok(report)
}

/// Embeds both sets with one network and scores the queries.
pub fn evaluate(
    net: &mut LandmarkNet<f32>,
    gallery: &[LoadedSample],
    query: &[LoadedSample],
    hm: &HeatmapConfig,
    config_digest: &str,
) -> Result<RetrievalReport> {
    let g = embed_all(net, gallery, hm)?;
    let q = embed_all(net, query, hm)?;
    topk_accuracy(&q, &g, config_digest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepVariable {
    Radius,
    Mla,
}

impl SweepVariable {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "radius" => Some(Self::Radius),
            "mla" => Some(Self::Mla),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub variable: SweepVariable,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Row labels in reporting order.
    pub fn labels(variable: SweepVariable) -> Vec<&'static str> {
        match variable {
            SweepVariable::Radius => vec!["hm 5%", "hm 10%", "hm 20%"],
            SweepVariable::Mla => vec!["with MLA", "no MLA"],
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| setting | top-1 | top-5 | top-10 | config |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.2}% | {:.2}% | {:.2}% | {} |",
                r.label,
                100.0 * r.top1,
                100.0 * r.top5,
                100.0 * r.top10,
                &r.config_digest[..r.config_digest.len().min(12)]
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, identity: &str, e: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord {
            sample_id: id,
            identity: identity.into(),
            embedding: e,
        }
    }

    #[test]
    fn ties_break_by_lower_id() {
        let g = vec![rec(5, "a", vec![1.0, 0.0]), rec(2, "b", vec![-1.0, 0.0]), rec(9, "c", vec![0.0, 1.0])];
        assert_eq!(rank_gallery(&[0.0, 0.0], &g)[..2], [2, 5]);
    }

    #[test]
    fn rank_six_is_top10_not_top5() {
        let mut g: Vec<_> = (0..5).map(|i| rec(i, "x", vec![0.1 * i as f32, 0.0])).collect();
        g.push(rec(5, "q", vec![1.0, 0.0]));
        g.extend((6..12).map(|i| rec(i, "y", vec![5.0, 0.0])));
        let q = vec![rec(100, "q", vec![0.0, 0.0])];
        let r = topk_accuracy(&q, &g, "").unwrap();
        assert_eq!((r.top1, r.top5, r.top10), (0.0, 0.0, 1.0));
        assert_eq!(r.queries[0].first_hit, 5);
    }

    #[test]
    fn absent_identity_is_an_error() {
        let g = vec![rec(0, "a", vec![0.0])];
        assert!(topk_accuracy(&[rec(1, "b", vec![0.0])], &g, "").is_err());
    }
}
