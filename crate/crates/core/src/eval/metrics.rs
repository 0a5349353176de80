use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{embed_all, sq_dist, Embedder, EmbeddingRow, EmbeddingTable, EvalError};
use crate::data::{Modality, Spectrum};

pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    M1ToM2,
    M2ToM1,
    Averaged,
}

impl Direction {
    pub fn query_modality(self) -> Option<Modality> {
        match self {
            Self::M1ToM2 => Some(Modality::M1),
            Self::M2ToM1 => Some(Modality::M2),
            Self::Averaged => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::M1ToM2 => "M1->M2",
            Self::M2ToM1 => "M2->M1",
            Self::Averaged => "averaged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
    pub map_at: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub n_gallery: usize,
}

impl MetricsReport {
    pub fn recall1(&self) -> f64 {
        self.recall_at.get(&1).copied().unwrap_or(0.0)
    }
}

/// Gallery indices ordered by squared distance to `query`, ties by ascending source id.
pub fn rank(query: &[f64], gallery: &[&EmbeddingRow]) -> Result<Vec<usize>, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let d: Vec<f64> = gallery.iter().map(|g| sq_dist(query, &g.embedding)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| match d[a].total_cmp(&d[b]) {
        Ordering::Equal => gallery[a].source_id.cmp(&gallery[b].source_id),
        o => o,
    });
    Ok(order)
}

/// Queries with at least one same-class gallery item, as `(query, R_q)`.
fn answerable(query_labels: &[u32], gallery_labels: &[u32]) -> Vec<(usize, usize)> {
    query_labels
        .iter()
        .enumerate()
        .map(|(q, &c)| (q, gallery_labels.iter().filter(|&&g| g == c).count()))
        .filter(|&(_, r)| r > 0)
        .collect()
}

/// Fraction of queries with a same-class item among the first `k` ranked.
/// Queries without any same-class gallery item are excluded.
pub fn recall_at_k(rankings: &[Vec<usize>], query_labels: &[u32], gallery_labels: &[u32], k: usize) -> f64 {
    let qs = answerable(query_labels, gallery_labels);
    if qs.is_empty() {
        return 0.0;
    }
    let hits = qs
        .iter()
        .filter(|&&(q, _)| rankings[q].iter().take(k).any(|&g| gallery_labels[g] == query_labels[q]))
        .count();
    hits as f64 / qs.len() as f64
}

/// Mean truncated average precision, `Σ_{i≤k} rel(i)·Prec@i / min(k, R_q)`.
pub fn map_at_k(rankings: &[Vec<usize>], query_labels: &[u32], gallery_labels: &[u32], k: usize) -> f64 {
    let qs = answerable(query_labels, gallery_labels);
    if qs.is_empty() {
        return 0.0;
    }
    let total: f64 = qs
        .iter()
        .map(|&(q, r)| {
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (i, &g) in rankings[q].iter().take(k).enumerate() {
                if gallery_labels[g] == query_labels[q] {
                    hits += 1;
                    sum += hits as f64 / (i + 1) as f64;
                }
            }
            sum / k.min(r) as f64
        })
        .sum();
    total / qs.len() as f64
}

/// Retrieval metrics with queries of modality `from` against the other modality.
pub fn evaluate_table(table: &EmbeddingTable, from: Modality, ks: &[usize]) -> Result<MetricsReport, EvalError> {
    if ks.iter().any(|&k| k == 0) {
        return Err(EvalError::InvalidConfig("k must be at least 1".into()));
    }
    let queries = table.of_modality(from);
    let gallery = table.of_modality(from.other());
    if queries.is_empty() {
        return Err(EvalError::NoQueries(from.to_string()));
    }
    let rankings = queries.iter().map(|q| rank(&q.embedding, &gallery)).collect::<Result<Vec<_>, _>>()?;
    let ql: Vec<u32> = queries.iter().map(|r| r.class_id).collect();
    let gl: Vec<u32> = gallery.iter().map(|r| r.class_id).collect();
    let direction = match from {
        Modality::M1 => Direction::M1ToM2,
        Modality::M2 => Direction::M2ToM1,
    };
    Ok(MetricsReport {
        direction,
        recall_at: ks.iter().map(|&k| (k, recall_at_k(&rankings, &ql, &gl, k))).collect(),
        map_at: ks.iter().map(|&k| (k, map_at_k(&rankings, &ql, &gl, k))).collect(),
        n_queries: queries.len(),
        n_gallery: gallery.len(),
    })
}

fn average(a: &MetricsReport, b: &MetricsReport) -> MetricsReport {
    let mean = |x: &BTreeMap<usize, f64>, y: &BTreeMap<usize, f64>| {
        x.iter().map(|(k, v)| (*k, (v + y[k]) / 2.0)).collect()
    };
    MetricsReport {
        direction: Direction::Averaged,
        recall_at: mean(&a.recall_at, &b.recall_at),
        map_at: mean(&a.map_at, &b.map_at),
        n_queries: a.n_queries + b.n_queries,
        n_gallery: a.n_gallery + b.n_gallery,
    }
}

/// Metrics in both directions and their average, in that order.
pub fn evaluate(embedder: &dyn Embedder, spectra: &[Spectrum], ks: &[usize]) -> Result<Vec<MetricsReport>, EvalError> {
    let table = embed_all(embedder, spectra)?;
    let a = evaluate_table(&table, Modality::M1, ks)?;
    let b = evaluate_table(&table, Modality::M2, ks)?;
    let avg = average(&a, &b);
    Ok(vec![a, b, avg])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::eval::RawEmbedder;
    use crate::rng;

    fn row(id: &str, m: Modality, c: u32, e: Vec<f64>) -> EmbeddingRow {
        EmbeddingRow { source_id: id.into(), class_id: c, modality: m, embedding: e }
    }

    #[test]
    fn rank_examples() {
        let g = [row("b", Modality::M2, 0, vec![2.0]), row("a", Modality::M2, 1, vec![1.0])];
        let refs: Vec<&EmbeddingRow> = g.iter().collect();
        assert_eq!(rank(&[0.0], &refs).unwrap(), vec![1, 0]);
        assert_eq!(rank(&[2.0], &refs).unwrap(), vec![0, 1]);
        // equidistant: ascending source id
        assert_eq!(rank(&[1.5], &refs).unwrap(), vec![1, 0]);
        assert!(matches!(rank(&[0.0], &[]), Err(EvalError::EmptyGallery)));
    }

    #[test]
    fn metric_examples() {
        let perfect = vec![vec![0, 1, 2]];
        assert_eq!(recall_at_k(&perfect, &[7], &[7, 1, 2], 1), 1.0);
        assert_eq!(map_at_k(&perfect, &[7], &[7, 1, 2], 3), 1.0);
        // first hit at rank 3
        let r = vec![vec![1, 2, 0]];
        assert_eq!(recall_at_k(&r, &[7], &[7, 1, 2], 1), 0.0);
        assert_eq!(recall_at_k(&r, &[7], &[7, 1, 2], 3), 1.0);
        // hits at ranks 1 and 3 with R_q = 2
        let r = vec![vec![0, 1, 2]];
        let ap = map_at_k(&r, &[7], &[7, 1, 7], 3);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    /// Independent recount: per query, walk positions and count by hand.
    fn brute(rankings: &[Vec<usize>], ql: &[u32], gl: &[u32], k: usize) -> (f64, f64) {
        let (mut rec, mut ap, mut n) = (0.0, 0.0, 0.0);
        for (q, r) in rankings.iter().enumerate() {
            let rq = gl.iter().filter(|&&g| g == ql[q]).count();
            if rq == 0 {
                continue;
            }
            n += 1.0;
            let rel: Vec<f64> = r.iter().map(|&g| if gl[g] == ql[q] { 1.0 } else { 0.0 }).collect();
            if rel[..k.min(rel.len())].iter().sum::<f64>() > 0.0 {
                rec += 1.0;
            }
            let mut s = 0.0;
            for i in 0..k.min(rel.len()) {
                let prec = rel[..=i].iter().sum::<f64>() / (i + 1) as f64;
                s += rel[i] * prec;
            }
            ap += s / (k.min(rq)) as f64;
        }
        if n == 0.0 {
            (0.0, 0.0)
        } else {
            (rec / n, ap / n)
        }
    }

    fn random_instance(seed: u64) -> (Vec<EmbeddingRow>, Vec<EmbeddingRow>) {
        let mut r = rng::stream(seed, "metric-oracle", 0);
        let nq = r.random_range(1..=50);
        let ng = r.random_range(1..=100);
        let classes = r.random_range(1..=12);
        let dim = r.random_range(1..=4);
        let mut mk = |i: usize, m: Modality| {
            let e = (0..dim).map(|_| (r.random_range(-3..=3) as f64) * 0.5).collect();
            row(&format!("{m}-{i:03}"), m, r.random_range(0..classes), e)
        };
        let q = (0..nq).map(|i| mk(i, Modality::M1)).collect();
        let g = (0..ng).map(|i| mk(i, Modality::M2)).collect();
        (q, g)
    }

    #[test]
    fn metrics_match_brute_force_on_random_instances() {
        for seed in 0..60 {
            let (q, g) = random_instance(seed);
            let gr: Vec<&EmbeddingRow> = g.iter().collect();
            let rankings: Vec<Vec<usize>> = q.iter().map(|x| rank(&x.embedding, &gr).unwrap()).collect();
            // exhaustive oracle for rank: compare against all keys sorted as tuples
            for (x, rk) in q.iter().zip(&rankings) {
                let mut keys: Vec<(f64, &str, usize)> = g
                    .iter()
                    .enumerate()
                    .map(|(i, y)| {
                        let d: f64 = x.embedding.iter().zip(&y.embedding).map(|(a, b)| (a - b).powi(2)).sum();
                        (d, y.source_id.as_str(), i)
                    })
                    .collect();
                keys.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(keys.iter().map(|k| k.2).collect::<Vec<_>>(), *rk);
            }
            let ql: Vec<u32> = q.iter().map(|x| x.class_id).collect();
            let gl: Vec<u32> = g.iter().map(|x| x.class_id).collect();
            for k in [1, 2, 3, 5, 10] {
                let (br, bm) = brute(&rankings, &ql, &gl, k);
                assert!((recall_at_k(&rankings, &ql, &gl, k) - br).abs() <= 1e-12);
                assert!((map_at_k(&rankings, &ql, &gl, k) - bm).abs() <= 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn metric_invariants(seed in 0u64..5000) {
            let (q, g) = random_instance(seed);
            let gr: Vec<&EmbeddingRow> = g.iter().collect();
            let rankings: Vec<Vec<usize>> = q.iter().map(|x| rank(&x.embedding, &gr).unwrap()).collect();
            let ql: Vec<u32> = q.iter().map(|x| x.class_id).collect();
            let gl: Vec<u32> = g.iter().map(|x| x.class_id).collect();
            prop_assert_eq!(recall_at_k(&rankings, &ql, &gl, 1), map_at_k(&rankings, &ql, &gl, 1));
            let mut prev = 0.0;
            for k in 1..=6 {
                let r = recall_at_k(&rankings, &ql, &gl, k);
                let m = map_at_k(&rankings, &ql, &gl, k);
                prop_assert!(r >= prev);
                prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&m));
                prev = r;
            }
        }

        #[test]
        fn rank_is_invariant_under_rigid_motion(seed in 0u64..5000, theta in 0.0f64..6.3, tx in -5.0f64..5.0) {
            let mut r = rng::stream(seed, "rigid", 0);
            let pts: Vec<Vec<f64>> = (0..20).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
            let q = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let moved = |p: &[f64]| vec![theta.cos() * p[0] - theta.sin() * p[1] + tx, theta.sin() * p[0] + theta.cos() * p[1] - tx];
            let g: Vec<EmbeddingRow> = pts.iter().enumerate().map(|(i, p)| row(&format!("{i:02}"), Modality::M2, 0, p.clone())).collect();
            let h: Vec<EmbeddingRow> = pts.iter().enumerate().map(|(i, p)| row(&format!("{i:02}"), Modality::M2, 0, moved(p))).collect();
            let a = rank(&q, &g.iter().collect::<Vec<_>>()).unwrap();
            let b = rank(&moved(&q), &h.iter().collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    fn spectrum(id: String, m: Modality, c: u32, v: Vec<f64>) -> Spectrum {
        Spectrum { values: v, modality: m, class_id: c, source_id: id }
    }

    #[test]
    fn identical_cross_modal_embeddings_score_perfectly() {
        let mut s = Vec::new();
        for c in 0..6u32 {
            for m in Modality::BOTH {
                for i in 0..2 {
                    s.push(spectrum(format!("{c}-{m}-{i}"), m, c, vec![c as f64, 0.0]));
                }
            }
        }
        let reports = evaluate(&RawEmbedder, &s, &DEFAULT_KS).unwrap();
        assert_eq!(reports.iter().map(|r| r.direction).collect::<Vec<_>>(), [Direction::M1ToM2, Direction::M2ToM1, Direction::Averaged]);
        for r in &reports {
            assert_eq!(r.recall_at.keys().copied().collect::<Vec<_>>(), vec![1, 3, 5]);
            assert!(r.recall_at.values().chain(r.map_at.values()).all(|&v| v == 1.0));
        }
    }

    #[test]
    fn random_embeddings_score_near_chance() {
        let classes = 30u32;
        let mut total = 0.0;
        for seed in 0..50 {
            let mut r = rng::stream(seed, "chance", 0);
            let s: Vec<Spectrum> = (0..classes)
                .flat_map(|c| Modality::BOTH.map(|m| (c, m)))
                .map(|(c, m)| spectrum(format!("{c}-{m}"), m, c, (0..4).map(|_| r.random_range(0.0..1.0)).collect()))
                .collect();
            total += evaluate(&RawEmbedder, &s, &[1]).unwrap()[2].recall1();
        }
        let mean = total / 50.0;
        // 3000 Bernoulli(1/30) trials: sd ≈ 0.0033
        assert!((mean - 1.0 / 30.0).abs() < 0.012, "{mean}");
    }
}
