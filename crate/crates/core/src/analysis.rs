//! Baseline-relative drops, per-k tolerance curves, themed aggregation,
//! interaction additivity and paired statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor_space::{parse_tag, Axis, EnvConfig};
use crate::rollout_eval::EvalTable;

/// Resamples drawn by [`paired_test`].
pub const PAIRED_RESAMPLES: usize = 10_000;

/// Fixed seed of the sign-flip resampler.
pub const PAIRED_TEST_SEED: u64 = 0x9a1e_d5ee_d000_0001;

/// Default additivity tolerance, percentage points.
pub const DEFAULT_ADDITIVITY_TOL: f64 = 1.0;

pub const ACCURACY_HEADER: &str = "policy,tag,k,accuracy";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no baseline row {tag} for policy {policy}")]
    MissingBaseline { policy: String, tag: String },
    #[error("sequences differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("interaction needs at least one single-factor drop")]
    EmptySingles,
    #[error("p-value {0} outside (0, 1]")]
    BadPValue(f64),
    #[error("alpha {0} outside (0, 1)")]
    BadAlpha(f64),
    #[error("table: {0}")]
    Table(String),
}

/// One accuracy measurement in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub policy: String,
    pub config: EnvConfig,
    pub k: usize,
    pub accuracy: f64,
}

/// Accuracy per (policy, config), from an evaluation or a fixture file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyTable {
    /// Success rates of an evaluation table, expressed in percent.
    pub fn from_eval(table: &EvalTable) -> Result<Self, AnalysisError> {
        let rows = table
            .rows
            .iter()
            .map(|r| {
                let config = parse_tag(&r.tag).map_err(|e| AnalysisError::Table(e.to_string()))?;
                Ok(AccuracyRow { policy: r.policy.clone(), config, k: r.k, accuracy: 100.0 * r.success_rate })
            })
            .collect::<Result<_, AnalysisError>>()?;
        Ok(AccuracyTable { rows })
    }

    /// Parse `policy,tag,k,accuracy` text. Rows whose accuracy is `NA` are skipped.
    pub fn from_csv(text: &str) -> Result<Self, AnalysisError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| AnalysisError::Table(e.to_string()))?;
        if header.iter().collect::<Vec<_>>().join(",") != ACCURACY_HEADER {
            return Err(AnalysisError::Table(format!("expected header {ACCURACY_HEADER}")));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| AnalysisError::Table(e.to_string()))?;
            let line = i + 2;
            if rec.len() != 4 {
                return Err(AnalysisError::Table(format!("line {line}: expected 4 fields")));
            }
            if rec[3].eq_ignore_ascii_case("na") {
                continue;
            }
            let config = parse_tag(&rec[1]).map_err(|e| AnalysisError::Table(format!("line {line}: {e}")))?;
            let k = rec[2].parse().map_err(|_| AnalysisError::Table(format!("line {line}: bad k")))?;
            let accuracy: f64 = rec[3].parse().map_err(|_| AnalysisError::Table(format!("line {line}: bad accuracy")))?;
            if !accuracy.is_finite() {
                return Err(AnalysisError::Table(format!("line {line}: non-finite accuracy")));
            }
            rows.push(AccuracyRow { policy: rec[0].to_string(), config, k, accuracy });
        }
        Ok(AccuracyTable { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{ACCURACY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.4}", r.policy, r.config, r.k, r.accuracy);
        }
        out
    }

    /// Distinct policy ids in first-seen order.
    pub fn policies(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.policy) {
                seen.push(r.policy.clone());
            }
        }
        seen
    }

    pub fn get(&self, policy: &str, config: &EnvConfig) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.policy == policy && r.config == *config)
    }
}

/// Mean accuracy at one change level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerK {
    pub policy: String,
    pub k: usize,
    pub n: usize,
    pub mean_accuracy: f64,
    /// Mean drop relative to the baseline, when one is known.
    pub mean_drop: Option<f64>,
}

/// Unweighted per-(policy, k) mean accuracy over all rows.
pub fn per_k_means(table: &AccuracyTable) -> Vec<PerK> {
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    let policies = table.policies();
    for r in &table.rows {
        let p = policies.iter().position(|x| *x == r.policy).unwrap();
        let e = acc.entry((p, r.k)).or_insert((0.0, 0));
        e.0 += r.accuracy;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|((p, k), (sum, n))| PerK { policy: policies[p].clone(), k, n, mean_accuracy: sum / n as f64, mean_drop: None })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Additivity {
    SubAdditive,
    Additive,
    SuperAdditive,
}

impl Additivity {
    pub fn name(self) -> &'static str {
        match self {
            Additivity::SubAdditive => "sub_additive",
            Additivity::Additive => "additive",
            Additivity::SuperAdditive => "super_additive",
        }
    }
}

impl fmt::Display for Additivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sum of values, independent of their order.
fn ordered_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Compare a combined-shift drop against the sum of its single-factor drops.
pub fn classify_interaction(singles: &[f64], combo: f64, tol: f64) -> Result<Additivity, AnalysisError> {
    if singles.is_empty() {
        return Err(AnalysisError::EmptySingles);
    }
    let sum = ordered_sum(singles);
    Ok(if combo < sum - tol {
        Additivity::SubAdditive
    } else if combo > sum + tol {
        Additivity::SuperAdditive
    } else {
        Additivity::Additive
    })
}

/// Drop of a single row relative to its policy's baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRow {
    pub policy: String,
    pub config: EnvConfig,
    pub k: usize,
    pub value: f64,
    pub baseline: f64,
    /// Percentage points, positive when the row is worse than the baseline.
    pub drop: f64,
}

/// A shifted configuration seen as a set of changed axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub policy: String,
    pub config: EnvConfig,
    pub changed: Vec<Axis>,
    pub combo_drop: f64,
    /// Drops of the rows changing exactly one of the axes to the same level.
    /// Only filled for multi-axis changes; `None` when a component is missing.
    pub singles: Option<Vec<(Axis, f64)>>,
    pub class: Option<Additivity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub baseline: EnvConfig,
    pub tol: f64,
    pub rows: Vec<DropRow>,
    pub per_k: Vec<PerK>,
    pub interactions: Vec<Interaction>,
}

/// Drops relative to the `baseline` row of every policy in `table`.
pub fn drops(table: &AccuracyTable, baseline: &EnvConfig) -> Result<DropReport, AnalysisError> {
    drops_with_tol(table, baseline, DEFAULT_ADDITIVITY_TOL)
}

pub fn drops_with_tol(table: &AccuracyTable, baseline: &EnvConfig, tol: f64) -> Result<DropReport, AnalysisError> {
    let mut rows = Vec::new();
    let mut interactions = Vec::new();
    let mut per_k = Vec::new();
    for policy in table.policies() {
        let base = table.get(&policy, baseline).ok_or_else(|| AnalysisError::MissingBaseline {
            policy: policy.clone(),
            tag: baseline.tag(),
        })?;
        let base_value = base.accuracy;
        let mine: Vec<&AccuracyRow> = table.rows.iter().filter(|r| r.policy == policy).collect();
        let drop_of = |c: &EnvConfig| mine.iter().find(|r| r.config == *c).map(|r| base_value - r.accuracy);

        let mut by_k: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for r in &mine {
            let drop = base_value - r.accuracy;
            rows.push(DropRow { policy: policy.clone(), config: r.config, k: r.k, value: r.accuracy, baseline: base_value, drop });
            let e = by_k.entry(r.k).or_insert((0.0, 0.0, 0));
            e.0 += r.accuracy;
            e.1 += drop;
            e.2 += 1;

            let changed = baseline.differing_axes(&r.config);
            if changed.is_empty() {
                continue;
            }
            let (singles, class) = if changed.len() >= 2 {
                let singles: Option<Vec<(Axis, f64)>> =
                    changed.iter().map(|&a| drop_of(&baseline.with_axis_from(a, &r.config)).map(|d| (a, d))).collect();
                let class = match &singles {
                    Some(s) => {
                        let values: Vec<f64> = s.iter().map(|(_, d)| *d).collect();
                        Some(classify_interaction(&values, drop, tol)?)
                    }
                    None => None,
                };
                (singles, class)
            } else {
                (None, None)
            };
            interactions.push(Interaction { policy: policy.clone(), config: r.config, changed, combo_drop: drop, singles, class });
        }
        for (k, (acc, drop, n)) in by_k {
            per_k.push(PerK { policy: policy.clone(), k, n, mean_accuracy: acc / n as f64, mean_drop: Some(drop / n as f64) });
        }
    }
    Ok(DropReport { baseline: *baseline, tol, rows, per_k, interactions })
}

fn axes_label(axes: &[Axis]) -> String {
    axes.iter().map(|a| a.name()).collect::<Vec<_>>().join("+")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl DropReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("policy,tag,k,value,baseline,drop\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.4},{:.4},{:.4}", r.policy, r.config, r.k, r.value, r.baseline, r.drop);
        }
        out
    }

    pub fn per_k_csv(&self) -> String {
        per_k_csv(&self.per_k)
    }

    pub fn interactions_csv(&self) -> String {
        let mut out = String::from("policy,tag,changed,combo_drop,singles_sum,class\n");
        for i in &self.interactions {
            let sum = i.singles.as_ref().map(|s| ordered_sum(&s.iter().map(|(_, d)| *d).collect::<Vec<_>>()));
            let class = i.class.map_or("NA", Additivity::name);
            let _ = writeln!(out, "{},{},{},{:.4},{},{}", i.policy, i.config, axes_label(&i.changed), i.combo_drop, opt(sum), class);
        }
        out
    }
}

pub fn per_k_csv(per_k: &[PerK]) -> String {
    let mut out = String::from("policy,k,n,mean_accuracy,mean_drop\n");
    for p in per_k {
        let _ = writeln!(out, "{},{},{},{:.4},{}", p.policy, p.k, p.n, p.mean_accuracy, opt(p.mean_drop));
    }
    out
}

/// One shift contributing to a theme.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThemeMember {
    pub policy: String,
    pub config: EnvConfig,
    pub from: Vec<&'static str>,
    pub to: Vec<&'static str>,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThemeAggregate {
    pub theme: Vec<Axis>,
    pub members: Vec<ThemeMember>,
    pub mean_drop: Option<f64>,
}

/// Mean drop over the shifts whose changed axes are exactly `theme`.
pub fn theme_aggregate(report: &DropReport, theme: &[Axis]) -> ThemeAggregate {
    let mut theme = theme.to_vec();
    theme.sort();
    theme.dedup();
    let members: Vec<ThemeMember> = report
        .interactions
        .iter()
        .filter(|i| i.changed == theme)
        .map(|i| ThemeMember {
            policy: i.policy.clone(),
            config: i.config,
            from: theme.iter().map(|&a| report.baseline.level_label(a)).collect(),
            to: theme.iter().map(|&a| i.config.level_label(a)).collect(),
            drop: i.combo_drop,
        })
        .collect();
    let mean_drop = if members.is_empty() {
        None
    } else {
        Some(members.iter().map(|m| m.drop).sum::<f64>() / members.len() as f64)
    };
    ThemeAggregate { theme, members, mean_drop }
}

/// Every non-empty theme present in the report, with its aggregate.
pub fn all_themes(report: &DropReport) -> Vec<ThemeAggregate> {
    let mut themes: Vec<Vec<Axis>> = report.interactions.iter().map(|i| i.changed.clone()).collect();
    themes.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    themes.dedup();
    themes.iter().map(|t| theme_aggregate(report, t)).collect()
}

pub fn themes_csv(aggregates: &[ThemeAggregate]) -> String {
    let mut out = String::from("theme,policy,tag,from,to,drop\n");
    for a in aggregates {
        let theme = axes_label(&a.theme);
        for m in &a.members {
            let _ = writeln!(out, "{},{},{},{},{},{:.4}", theme, m.policy, m.config, m.from.join("+"), m.to.join("+"), m.drop);
        }
    }
    out
}

pub fn theme_means_csv(aggregates: &[ThemeAggregate]) -> String {
    let mut out = String::from("theme,members,mean_drop\n");
    for a in aggregates {
        let _ = writeln!(out, "{},{},{}", axes_label(&a.theme), a.members.len(), opt(a.mean_drop));
    }
    out
}

/// Two-sided paired sign-flip permutation test on `a[i] - b[i]`.
///
/// The statistic is the sum of differences; the p-value counts resampled
/// statistics at least as extreme as the observed one, plus one.
pub fn paired_test(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    paired_test_with(a, b, PAIRED_RESAMPLES, PAIRED_TEST_SEED)
}

pub fn paired_test_with(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed: f64 = diffs.iter().sum::<f64>().abs();
    // Ties up to rounding count as at least as extreme.
    let slack = 1e-9 * diffs.iter().map(|d| d.abs()).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = diffs.len().div_ceil(64);
    let mut signs = vec![0u64; words];
    let mut extreme = 0usize;
    for _ in 0..resamples {
        for w in signs.iter_mut() {
            *w = rng.next_u64();
        }
        let mut t = 0.0;
        for (i, d) in diffs.iter().enumerate() {
            if signs[i / 64] >> (i % 64) & 1 == 1 {
                t -= d;
            } else {
                t += d;
            }
        }
        if t.abs() >= observed - slack {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + resamples) as f64)
}

/// Holm step-down rejections at family level `alpha`, in input order.
pub fn holm(p_values: &[f64], alpha: f64) -> Result<Vec<bool>, AnalysisError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AnalysisError::BadAlpha(alpha));
    }
    if let Some(&p) = p_values.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(AnalysisError::BadPValue(p));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let mut reject = vec![false; m];
    for (rank, &i) in order.iter().enumerate() {
        if p_values[i] <= alpha / (m - rank) as f64 {
            reject[i] = true;
        } else {
            break;
        }
    }
    Ok(reject)
}

/// Paired comparison of two policies on one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub tag: String,
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Paired tests per configuration with Holm correction across configurations.
/// Each input maps a tag to per-episode outcomes aligned by episode index.
pub fn compare_paired(
    a: &BTreeMap<String, Vec<f64>>,
    b: &BTreeMap<String, Vec<f64>>,
    alpha: f64,
) -> Result<Vec<PairedRow>, AnalysisError> {
    let mut rows = Vec::new();
    for (tag, xa) in a {
        let Some(xb) = b.get(tag) else { continue };
        let p = paired_test(xa, xb)?;
        let mean = |x: &[f64]| if x.is_empty() { 0.0 } else { x.iter().sum::<f64>() / x.len() as f64 };
        rows.push(PairedRow { tag: tag.clone(), n: xa.len(), mean_a: mean(xa), mean_b: mean(xb), p_value: p, reject: false });
    }
    let p: Vec<f64> = rows.iter().map(|r| r.p_value).collect();
    for (r, flag) in rows.iter_mut().zip(holm(&p, alpha)?) {
        r.reject = flag;
    }
    Ok(rows)
}

pub fn paired_csv(rows: &[PairedRow]) -> String {
    let mut out = String::from("tag,n,mean_a,mean_b,p_value,holm_reject\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4},{:.4},{:.6},{}", r.tag, r.n, r.mean_a, r.mean_b, r.p_value, r.reject);
    }
    out
}
