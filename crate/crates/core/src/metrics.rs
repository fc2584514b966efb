//! Resolution-based keypoint association and precision/recall/F1/RMSE
//! reports.
//!
//! A ground-truth keypoint (GK) is matched when at least one predicted
//! keypoint (PK) lies within the resolution (inclusive). TP counts matched
//! GKs, not matches, so one PK may serve several GKs and extra PKs near one
//! GK count as false positives.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::acoustics::Point2D;
use crate::error::{Error, Result};
use crate::par;
use crate::represent::{Keypoint, KeypointRecord};

pub const REPORT_SCHEMA: &str = "ssl2d-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Counts and squared distances pooled over all samples.
    #[default]
    Micro,
    /// Per-sample scores averaged over samples.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub resolutions: Vec<f64>,
    #[serde(default)]
    pub averaging: Averaging,
    /// Optimal one-to-one assignment instead of resolution-based association.
    #[serde(default)]
    pub one_to_one: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![0.3, 1.0],
            averaging: Averaging::Micro,
            one_to_one: false,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::config("metrics.resolutions", "at least one resolution is required"));
        }
        if self.resolutions.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::config("metrics.resolutions", "resolutions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub gk: usize,
    pub pk: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// One entry per matched GK with its nearest qualifying PK.
    pub matched: Vec<Match>,
}

impl MatchResult {
    fn from_matches(n_gk: usize, n_pk: usize, matched: Vec<Match>) -> Self {
        let tp = matched.len();
        Self {
            tp,
            fp: n_pk - tp.min(n_pk),
            fn_: n_gk - tp,
            matched,
        }
    }
}

pub fn associate(gks: &[Point2D], pks: &[Keypoint], resolution: f64) -> MatchResult {
    let matched = gks
        .iter()
        .enumerate()
        .filter_map(|(gi, g)| {
            pks.iter()
                .enumerate()
                .map(|(pi, p)| (pi, g.distance(&p.position)))
                .filter(|(_, d)| *d <= resolution)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(pi, d)| Match {
                    gk: gi,
                    pk: pi,
                    distance: d,
                })
        })
        .collect();
    MatchResult::from_matches(gks.len(), pks.len(), matched)
}

/// Minimum-cost perfect assignment on a square cost matrix; returns the
/// column assigned to every row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// One-to-one association: the maximum number of GK/PK pairs within
/// `resolution`, with the smallest total distance among those.
pub fn associate_one_to_one(gks: &[Point2D], pks: &[Keypoint], resolution: f64) -> MatchResult {
    let n = gks.len().max(pks.len());
    if gks.is_empty() || pks.is_empty() {
        return MatchResult::from_matches(gks.len(), pks.len(), Vec::new());
    }
    // An unmatched pair costs more than any sum of feasible distances.
    let miss = 1.0 + resolution * n as f64;
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (gks.get(i), pks.get(j)) {
                    (Some(g), Some(p)) => {
                        let d = g.distance(&p.position);
                        if d <= resolution {
                            d
                        } else {
                            miss
                        }
                    }
                    _ => miss,
                })
                .collect()
        })
        .collect();
    let matched = hungarian(&cost)
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < gks.len() && j < pks.len() && cost[i][j] <= resolution)
        .map(|(i, j)| Match {
            gk: i,
            pk: j,
            distance: cost[i][j],
        })
        .collect();
    MatchResult::from_matches(gks.len(), pks.len(), matched)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn scores_from_counts(tp: usize, fp: usize, fn_: usize) -> Scores {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Scores {
        precision,
        recall,
        f1: f1(precision, recall),
    }
}

/// Precision, recall and F1; an empty denominator counts as 1.
pub fn scores(m: &MatchResult) -> Scores {
    scores_from_counts(m.tp, m.fp, m.fn_)
}

/// Root-mean-square GK-to-PK distance over matched GKs; `None` without any.
pub fn rmse_tp(m: &MatchResult) -> Option<f64> {
    if m.matched.is_empty() {
        return None;
    }
    let ss: f64 = m.matched.iter().map(|x| x.distance * x.distance).sum();
    Some((ss / m.matched.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionScores {
    pub resolution: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when nothing matched.
    pub rmse_tp: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    /// Ground-truth source count of the samples in this group.
    pub n_sources: usize,
    pub n_samples: usize,
    pub scores: Vec<ResolutionScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub averaging: Averaging,
    pub one_to_one: bool,
    /// Convention for empty denominators.
    pub empty_scene_convention: String,
    pub n_samples: usize,
    pub overall: Vec<ResolutionScores>,
    pub strata: Vec<Stratum>,
}

fn aggregate(results: &[&MatchResult], resolution: f64, averaging: Averaging) -> ResolutionScores {
    let tp: usize = results.iter().map(|m| m.tp).sum();
    let fp: usize = results.iter().map(|m| m.fp).sum();
    let fn_: usize = results.iter().map(|m| m.fn_).sum();
    let (s, rmse) = match averaging {
        Averaging::Micro => {
            let d: Vec<f64> = results.iter().flat_map(|m| m.matched.iter().map(|x| x.distance)).collect();
            let rmse = (!d.is_empty()).then(|| (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt());
            (scores_from_counts(tp, fp, fn_), rmse)
        }
        Averaging::Macro => {
            let n = results.len().max(1) as f64;
            let per: Vec<Scores> = results.iter().map(|m| scores(m)).collect();
            let p = per.iter().map(|s| s.precision).sum::<f64>() / n;
            let r = per.iter().map(|s| s.recall).sum::<f64>() / n;
            let f = per.iter().map(|s| s.f1).sum::<f64>() / n;
            let rm: Vec<f64> = results.iter().filter_map(|m| rmse_tp(m)).collect();
            let rmse = (!rm.is_empty()).then(|| rm.iter().sum::<f64>() / rm.len() as f64);
            (
                Scores {
                    precision: p,
                    recall: r,
                    f1: f,
                },
                rmse,
            )
        }
    };
    ResolutionScores {
        resolution,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        rmse_tp: rmse,
        tp,
        fp,
        fn_,
    }
}

/// Scores predictions against ground truth. Both lists are keyed by sample
/// id; every id must appear in both.
pub fn evaluate_dataset(
    predictions: &[KeypointRecord],
    ground_truths: &[(String, Vec<Point2D>)],
    cfg: &MetricConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let preds: BTreeMap<&str, &KeypointRecord> = predictions.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let gt_ids: BTreeSet<&str> = ground_truths.iter().map(|(id, _)| id.as_str()).collect();
    let missing: Vec<String> = gt_ids.iter().filter(|id| !preds.contains_key(*id)).map(|s| s.to_string()).collect();
    let unexpected: Vec<String> = preds.keys().filter(|id| !gt_ids.contains(*id)).map(|s| s.to_string()).collect();
    if !missing.is_empty() || !unexpected.is_empty() || preds.len() != predictions.len() {
        return Err(Error::SampleIdMismatch { missing, unexpected });
    }

    let samples: Vec<(&[Point2D], Vec<Keypoint>)> = ground_truths
        .iter()
        .map(|(id, g)| (g.as_slice(), preds[id.as_str()].keypoints()))
        .collect();
    let per_res: Vec<Vec<MatchResult>> = cfg
        .resolutions
        .iter()
        .map(|&res| {
            par::map_slice(&samples, |(g, p)| {
                if cfg.one_to_one {
                    associate_one_to_one(g, p, res)
                } else {
                    associate(g, p, res)
                }
            })
        })
        .collect();

    let collect = |filter: &dyn Fn(usize) -> bool| -> Vec<ResolutionScores> {
        cfg.resolutions
            .iter()
            .zip(&per_res)
            .map(|(&res, results)| {
                let chosen: Vec<&MatchResult> = results
                    .iter()
                    .zip(&samples)
                    .filter(|(_, (g, _))| filter(g.len()))
                    .map(|(m, _)| m)
                    .collect();
                aggregate(&chosen, res, cfg.averaging)
            })
            .collect()
    };

    let counts: BTreeSet<usize> = samples.iter().map(|(g, _)| g.len()).collect();
    let strata = counts
        .into_iter()
        .map(|k| Stratum {
            n_sources: k,
            n_samples: samples.iter().filter(|(g, _)| g.len() == k).count(),
            scores: collect(&|n| n == k),
        })
        .collect();

    Ok(MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        averaging: cfg.averaging,
        one_to_one: cfg.one_to_one,
        empty_scene_convention: "precision and recall with an empty denominator are 1".to_string(),
        n_samples: samples.len(),
        overall: collect(&|_| true),
        strata,
    })
}

fn fmt_row(out: &mut String, label: &str, n: usize, scores: &[ResolutionScores]) {
    let _ = write!(out, "{label:<8} {n:>7}");
    for s in scores {
        let rmse = s.rmse_tp.map_or_else(|| "-".to_string(), |r| format!("{r:.2}"));
        let _ = write!(out, " | {:>5.2} {:>5.2} {:>5.2} {:>5}", s.precision, s.recall, s.f1, rmse);
    }
    out.push('\n');
}

impl MetricsReport {
    /// Plain-text table: one row for all samples, one per source count.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8} {:>7}", "sources", "samples");
        for s in &self.overall {
            let _ = write!(out, " | {:^23}", format!("@{} m", s.resolution));
        }
        out.push('\n');
        let _ = write!(out, "{:<8} {:>7}", "", "");
        for _ in &self.overall {
            let _ = write!(out, " | {:>5} {:>5} {:>5} {:>5}", "Pre", "Rec", "F1", "RMSE");
        }
        out.push('\n');
        fmt_row(&mut out, "all", self.n_samples, &self.overall);
        for st in &self.strata {
            fmt_row(&mut out, &st.n_sources.to_string(), st.n_samples, &st.scores);
        }
        out
    }
}
