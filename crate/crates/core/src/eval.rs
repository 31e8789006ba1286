//! Cosine ranking, CMC and mAP, with same-clothes / cross-clothes splits.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{PahError, Result};
use crate::model::{ModelInput, PahModel};
use crate::parallel::{map_range, Exec};

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(q: &[f64], g: &[f64]) -> Result<f64> {
    if q.len() != g.len() {
        return Err(PahError::Dimension(format!("descriptor lengths {} and {}", q.len(), g.len())));
    }
    let (nq, ng) = (norm(q), norm(g));
    if nq == 0.0 || ng == 0.0 {
        return Err(PahError::DegenerateDescriptor);
    }
    let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
    Ok((dot / (nq * ng)).clamp(-1.0, 1.0))
}

/// Gallery indices with similarities, most similar first; equal
/// similarities keep ascending gallery order.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
    if gallery.is_empty() {
        return Err(PahError::EmptyGallery);
    }
    let mut r = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| Ok((i, cosine_similarity(query, g)?)))
        .collect::<Result<Vec<_>>>()?;
    r.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(r)
}

/// Fraction of queries with a same-identity item among the first `k`
/// ranked identities. `k` is clamped to each ranking's length.
pub fn cmc_rank_k(rankings: &[Vec<usize>], query_ids: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(PahError::Contract("rank k must be >= 1".into()));
    }
    if rankings.len() != query_ids.len() {
        return Err(PahError::Dimension("rankings and query identities differ in length".into()));
    }
    if rankings.is_empty() {
        return Err(PahError::UndefinedMetric("no queries".into()));
    }
    let hits = rankings
        .iter()
        .zip(query_ids)
        .filter(|(r, &q)| r.iter().take(k).any(|&id| id == q))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Average precision of one ranked relevance list; `None` without relevant
/// items.
pub fn average_precision(relevant: impl IntoIterator<Item = bool>) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, rel) in relevant.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// mAP over queries with at least one relevant gallery item. `rankings`
/// hold gallery indices. Returns the mAP and the number of queries skipped.
pub fn mean_average_precision(
    rankings: &[Vec<usize>],
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<(f64, usize)> {
    if rankings.len() != query_ids.len() {
        return Err(PahError::Dimension("rankings and query identities differ in length".into()));
    }
    let mut total = 0.0;
    let mut valid = 0usize;
    for (r, &q) in rankings.iter().zip(query_ids) {
        if let Some(ap) = average_precision(r.iter().map(|&g| gallery_ids[g] == q)) {
            total += ap;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(PahError::UndefinedMetric("no query has a relevant gallery item".into()));
    }
    Ok((total / valid as f64, rankings.len() - valid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    General,
    /// Same identity must also wear the same clothes to count.
    Same,
    /// Same-identity gallery items in the query's clothes are removed.
    Cross,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::General, Scenario::Same, Scenario::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::General => "general",
            Scenario::Same => "same",
            Scenario::Cross => "cross",
        }
    }

    /// Whether a gallery item stays in the candidate list of a query.
    pub fn keeps(self, query: &ItemMeta, item: &ItemMeta) -> bool {
        let same_id = query.identity == item.identity;
        let same_clothes = query.clothes_id == item.clothes_id;
        match self {
            Scenario::General => true,
            Scenario::Same => !same_id || same_clothes,
            Scenario::Cross => !same_id || !same_clothes,
        }
    }
}

impl FromStr for Scenario {
    type Err = PahError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Scenario::General),
            "same" => Ok(Scenario::Same),
            "cross" => Ok(Scenario::Cross),
            _ => Err(PahError::Config(format!("unknown scenario {s:?} (general, same, cross)"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Labels carried alongside each descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemMeta {
    pub identity: usize,
    pub clothes_id: usize,
    pub camera_id: usize,
    pub sample_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub max_rank: usize,
    /// Drop gallery items with the query's `sample_id`.
    pub exclude_same_sample: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_rank: 20,
            exclude_same_sample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    /// `cmc[k - 1]` is Rank-k.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub queries: usize,
    pub gallery: usize,
    /// Queries left out because no relevant gallery item survived filtering.
    pub skipped_queries: usize,
}

impl ScenarioReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub splits: Vec<ScenarioReport>,
}

impl EvalReport {
    pub fn get(&self, s: Scenario) -> Option<&ScenarioReport> {
        self.splits.iter().find(|r| r.scenario == s)
    }

    /// `split,metric,value` rows.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "split,metric,value")?;
        for r in &self.splits {
            let s = r.scenario;
            for k in [1, 5, 10, 20] {
                if k <= r.cmc.len() {
                    writeln!(out, "{s},rank{k},{:?}", r.rank(k))?;
                }
            }
            writeln!(out, "{s},map,{:?}", r.map)?;
            writeln!(out, "{s},queries,{}", r.queries)?;
            writeln!(out, "{s},gallery,{}", r.gallery)?;
            writeln!(out, "{s},skipped_queries,{}", r.skipped_queries)?;
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8}\n",
            "split", "rank1", "rank5", "rank10", "mAP", "queries", "gallery"
        );
        for r in &self.splits {
            s += &format!(
                "{:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>8} {:>8}\n",
                r.scenario.name(),
                r.rank(1),
                r.rank(5),
                r.rank(10),
                r.map,
                r.queries - r.skipped_queries,
                r.gallery
            );
        }
        s
    }
}

/// Metrics for one split from precomputed descriptors.
pub fn evaluate_descriptors(
    queries: &[Vec<f64>],
    query_meta: &[ItemMeta],
    gallery: &[Vec<f64>],
    gallery_meta: &[ItemMeta],
    scenario: Scenario,
    opts: EvalOptions,
    exec: Exec,
) -> Result<ScenarioReport> {
    if queries.len() != query_meta.len() || gallery.len() != gallery_meta.len() {
        return Err(PahError::Dimension("descriptors and metadata differ in length".into()));
    }
    if gallery.is_empty() {
        return Err(PahError::EmptyGallery);
    }
    if opts.max_rank == 0 {
        return Err(PahError::Contract("max_rank must be >= 1".into()));
    }
    let ranked = map_range(exec, queries.len(), |qi| {
        let q = &query_meta[qi];
        rank_gallery(&queries[qi], gallery).map(|r| {
            r.into_iter()
                .map(|(gi, _)| gi)
                .filter(|&gi| {
                    let g = &gallery_meta[gi];
                    scenario.keeps(q, g) && !(opts.exclude_same_sample && g.sample_id == q.sample_id)
                })
                .collect::<Vec<usize>>()
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let gallery_ids: Vec<usize> = gallery_meta.iter().map(|m| m.identity).collect();
    let (mut kept, mut kept_ids) = (Vec::new(), Vec::new());
    for (r, q) in ranked.into_iter().zip(query_meta) {
        if r.iter().any(|&g| gallery_ids[g] == q.identity) {
            kept_ids.push(q.identity);
            kept.push(r);
        }
    }
    let skipped = queries.len() - kept.len();
    let (map, _) = mean_average_precision(&kept, &kept_ids, &gallery_ids)?;
    let id_rankings: Vec<Vec<usize>> = kept
        .iter()
        .map(|r| r.iter().map(|&g| gallery_ids[g]).collect())
        .collect();
    let cmc = (1..=opts.max_rank)
        .map(|k| cmc_rank_k(&id_rankings, &kept_ids, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioReport {
        scenario,
        cmc,
        map,
        queries: queries.len(),
        gallery: gallery.len(),
        skipped_queries: skipped,
    })
}

/// Extracts eval-mode descriptors and reports every requested split.
/// Splits in which no query has a relevant gallery item are left out.
pub fn evaluate(
    model: &PahModel,
    queries: &[(ModelInput, ItemMeta)],
    gallery: &[(ModelInput, ItemMeta)],
    scenarios: &[Scenario],
    opts: EvalOptions,
    exec: Exec,
) -> Result<EvalReport> {
    let qi: Vec<ModelInput> = queries.iter().map(|(x, _)| x.clone()).collect();
    let gi: Vec<ModelInput> = gallery.iter().map(|(x, _)| x.clone()).collect();
    let qd = model.descriptors(&qi, exec)?;
    let gd = model.descriptors(&gi, exec)?;
    let qm: Vec<ItemMeta> = queries.iter().map(|(_, m)| *m).collect();
    let gm: Vec<ItemMeta> = gallery.iter().map(|(_, m)| *m).collect();
    let mut splits = Vec::new();
    for &s in scenarios {
        match evaluate_descriptors(&qd, &qm, &gd, &gm, s, opts, exec) {
            Ok(r) => splits.push(r),
            Err(PahError::UndefinedMetric(m)) => log::warn!("split {s}: {m}"),
            Err(e) => return Err(e),
        }
    }
    if splits.is_empty() {
        return Err(PahError::UndefinedMetric("no split has a valid query".into()));
    }
    Ok(EvalReport { splits })
}
