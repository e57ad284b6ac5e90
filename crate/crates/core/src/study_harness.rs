//! Declarative experiment recipes: a policy grid crossed with ID supports and
//! trace budgets, all evaluated on shared suites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{all_themes, drops, themes_csv, AccuracyTable};
use crate::driving_sim::{SimParams, HORIZON};
use crate::factor_space::{parse_tag, EnvConfig, IdSupport};
use crate::policies::{ClipSpec, FrozenEncoder, Policy, PolicyKind};
use crate::rollout_eval::{evaluate, EvalOptions, EvalTable};
use crate::split_builder::{build_suite_with, SuiteOptions, TestSuite, DEFAULT_ROUTE_SET, MAX_SUITE_K};
use crate::trainer::{collect_demos, train, LossWeights, TrainConfig};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("study spec: {0}")]
    Spec(String),
    #[error("suite: {0}")]
    Suite(#[from] crate::split_builder::SuiteError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StudyId {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl FromStr for StudyId {
    type Err = StudyError;
    fn from_str(s: &str) -> Result<Self, StudyError> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(StudyId::S1),
            "S2" => Ok(StudyId::S2),
            "S3" => Ok(StudyId::S3),
            "S4" => Ok(StudyId::S4),
            "S5" => Ok(StudyId::S5),
            _ => Err(StudyError::Spec(format!("unknown study id {s:?}"))),
        }
    }
}

/// One entry of the policy grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: String,
    #[serde(default = "one")]
    pub frames: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Seed of the frozen encoder; required by the encoder-head tier.
    #[serde(default)]
    pub encoder_seed: Option<u64>,
}

fn one() -> usize {
    1
}

impl PolicySpec {
    pub fn kind(&self) -> Result<PolicyKind, StudyError> {
        self.kind.parse().map_err(StudyError::Spec)
    }

    pub fn clip(&self) -> Result<ClipSpec, StudyError> {
        ClipSpec::new(self.frames, self.stride).map_err(|e| StudyError::Spec(e.to_string()))
    }

    pub fn build(&self, seed: u64) -> Result<Policy, StudyError> {
        let encoder = self.encoder_seed.map(FrozenEncoder::new);
        Policy::new(self.kind()?, self.clip()?, encoder, seed).map_err(|e| StudyError::Spec(e.to_string()))
    }

    pub fn label(&self) -> String {
        match self.encoder_seed {
            Some(s) => format!("fenc{}-{}-T{}s{}", s, self.kind, self.frames, self.stride),
            None => format!("{}-T{}s{}", self.kind, self.frames, self.stride),
        }
    }
}

/// A study recipe as stored in a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub id: StudyId,
    #[serde(default)]
    pub description: String,
    pub policies: Vec<PolicySpec>,
    /// Each support is a list of tags.
    pub supports: Vec<Vec<String>>,
    pub traces: Vec<usize>,
    #[serde(default)]
    pub ks: Vec<usize>,
    pub episodes_per_config: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_route_set")]
    pub route_set: String,
    #[serde(default = "default_route_pool")]
    pub route_pool_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
}

fn default_route_set() -> String {
    DEFAULT_ROUTE_SET.to_string()
}

fn default_route_pool() -> usize {
    SuiteOptions::default().route_pool_size
}

fn default_lr() -> f64 {
    TrainConfig::default().learning_rate
}

fn default_epochs() -> usize {
    TrainConfig::default().max_epochs
}

impl StudySpec {
    pub fn from_toml(text: &str) -> Result<Self, StudyError> {
        let spec: StudySpec = toml::from_str(text).map_err(|e| StudyError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, StudyError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("study spec serializes")
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        if self.policies.is_empty() || self.supports.is_empty() || self.traces.is_empty() {
            return Err(StudyError::Spec("policy, support and trace grids must be non-empty".into()));
        }
        for p in &self.policies {
            let kind = p.kind()?;
            p.clip()?;
            if kind == PolicyKind::FrozenEncoderHead && p.encoder_seed.is_none() {
                return Err(StudyError::Spec(format!("policy {} needs encoder_seed", p.kind)));
            }
        }
        self.parsed_supports()?;
        if self.traces.contains(&0) {
            return Err(StudyError::Spec("trace budgets must be at least 1".into()));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k > MAX_SUITE_K) {
            return Err(StudyError::Spec(format!("k={k} exceeds {MAX_SUITE_K}")));
        }
        if self.episodes_per_config == 0 {
            return Err(StudyError::Spec("episodes_per_config must be at least 1".into()));
        }
        Ok(())
    }

    pub fn parsed_supports(&self) -> Result<Vec<IdSupport>, StudyError> {
        self.supports
            .iter()
            .map(|tags| {
                let members = tags
                    .iter()
                    .map(|t| parse_tag(t).map_err(|e| StudyError::Spec(format!("support tag {t:?}: {e}"))))
                    .collect::<Result<Vec<EnvConfig>, _>>()?;
                IdSupport::new(members).map_err(|e| StudyError::Spec(e.to_string()))
            })
            .collect()
    }

    /// Suite levels always include the ID row.
    pub fn suite_ks(&self) -> Vec<usize> {
        let mut ks = vec![0];
        ks.extend(self.ks.iter().copied().filter(|&k| k > 0));
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Settings that are not part of the recipe.
#[derive(Debug, Clone, Default)]
pub struct StudyOptions {
    pub jobs: usize,
    pub sim: SimParams,
}

/// Coordinates of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub index: usize,
    pub policy: PolicySpec,
    pub support: IdSupport,
    pub traces: usize,
}

impl GridPoint {
    pub fn dir_name(&self) -> String {
        format!("{:02}_{}_{}_{}t", self.index, self.policy.label(), self.support.label(), self.traces)
    }
}

/// Artifacts of a successful grid point.
#[derive(Debug, Clone)]
pub struct PointArtifacts {
    pub table: EvalTable,
    pub accuracy: AccuracyTable,
    pub policy_digest: String,
    pub train_digest: String,
    pub table_digest: String,
}

#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub point: GridPoint,
    pub result: Result<PointArtifacts, String>,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub spec: StudySpec,
    pub suites: BTreeMap<String, TestSuite>,
    pub points: Vec<PointOutcome>,
}

impl StudyResult {
    /// Outcomes keyed by support size, in grid order.
    pub fn by_support_arity(&self) -> BTreeMap<usize, Vec<&PointOutcome>> {
        let mut out: BTreeMap<usize, Vec<&PointOutcome>> = BTreeMap::new();
        for p in &self.points {
            out.entry(p.point.support.len()).or_default().push(p);
        }
        out
    }

    pub fn failures(&self) -> usize {
        self.points.iter().filter(|p| p.result.is_err()).count()
    }
}

/// Every grid point in policy-major, then support, then trace order.
pub fn grid(spec: &StudySpec) -> Result<Vec<GridPoint>, StudyError> {
    let supports = spec.parsed_supports()?;
    let mut out = Vec::new();
    for p in &spec.policies {
        for s in &supports {
            for &t in &spec.traces {
                out.push(GridPoint { index: out.len(), policy: p.clone(), support: s.clone(), traces: t });
            }
        }
    }
    Ok(out)
}

fn sha(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn run_point(
    spec: &StudySpec,
    point: &GridPoint,
    suite: &TestSuite,
    eval: &EvalOptions,
    dir: &Path,
) -> Result<PointArtifacts, String> {
    let policy = point.policy.build(spec.seed).map_err(|e| e.to_string())?;
    let data = collect_demos(&point.support, point.traces, policy.clip, spec.seed, &eval.sim);
    let cfg = TrainConfig { learning_rate: spec.learning_rate, max_epochs: spec.max_epochs, seed: spec.seed, ..TrainConfig::default() };
    let outcome = train(&policy, &data, &cfg, LossWeights::default()).map_err(|e| format!("train: {e}"))?;
    let mut trained = outcome.policy;
    trained.id = point.policy.label();
    let table = evaluate(&trained, suite, eval).map_err(|e| format!("eval: {e}"))?;
    let accuracy = AccuracyTable::from_eval(&table).map_err(|e| e.to_string())?;
    let report = drops(&accuracy, &point.support.members()[0]).map_err(|e| format!("analysis: {e}"))?;

    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let policy_json = trained.to_json();
    let eval_csv = table.to_csv();
    let files: [(&str, String); 8] = [
        ("policy.json", policy_json.clone()),
        ("train_manifest.txt", outcome.report.manifest()),
        ("eval.csv", eval_csv.clone()),
        ("episodes.csv", table.episodes_csv()),
        ("drops.csv", report.rows_csv()),
        ("per_k.csv", report.per_k_csv()),
        ("interactions.csv", report.interactions_csv()),
        ("themes.csv", themes_csv(&all_themes(&report))),
    ];
    for (name, body) in files {
        fs::write(dir.join(name), body).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(PointArtifacts {
        table,
        accuracy,
        policy_digest: sha(&policy_json),
        train_digest: outcome.report.digest,
        table_digest: sha(&eval_csv),
    })
}

/// Run every grid point of `spec`, writing per-point artifacts and a study
/// manifest under the recipe's output directory. A failing point is recorded
/// and does not stop the others.
pub fn run_study(spec: &StudySpec, opts: &StudyOptions) -> Result<StudyResult, StudyError> {
    spec.validate()?;
    let points = grid(spec)?;
    let suite_opts = SuiteOptions { route_set_id: spec.route_set.clone(), route_pool_size: spec.route_pool_size };
    let ks = spec.suite_ks();
    let mut suites: BTreeMap<String, TestSuite> = BTreeMap::new();
    for s in spec.parsed_supports()? {
        if let std::collections::btree_map::Entry::Vacant(e) = suites.entry(s.label()) {
            e.insert(build_suite_with(&s, &ks, spec.episodes_per_config, spec.seed, &suite_opts)?);
        }
    }

    let out = &spec.output_dir;
    fs::create_dir_all(out)?;
    for (label, suite) in &suites {
        fs::write(out.join(format!("suite_{label}.json")), suite.to_json())?;
    }

    let threads = if opts.jobs == 0 { rayon::current_num_threads() } else { opts.jobs };
    let outer = threads.min(points.len()).max(1);
    let eval = EvalOptions { sim: opts.sim.clone(), horizon: HORIZON, jobs: (threads / outer).max(1), timing: false, log_dir: None };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(outer)
        .build()
        .map_err(|e| StudyError::Spec(format!("thread pool: {e}")))?;
    let outcomes: Vec<PointOutcome> = pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let suite = &suites[&p.support.label()];
                let result = run_point(spec, p, suite, &eval, &out.join(p.dir_name()));
                PointOutcome { point: p.clone(), result }
            })
            .collect()
    });

    let result = StudyResult { spec: spec.clone(), suites, points: outcomes };
    fs::write(out.join("manifest.txt"), manifest(&result))?;
    Ok(result)
}

/// Plain-text record of every seed, digest and point status of a study run.
pub fn manifest(result: &StudyResult) -> String {
    let spec = &result.spec;
    let mut m = String::new();
    let _ = writeln!(m, "study {:?}", spec.id);
    let _ = writeln!(m, "spec_digest {}", spec.digest());
    let _ = writeln!(m, "seed {}", spec.seed);
    let _ = writeln!(m, "route_set {} pool {}", spec.route_set, spec.route_pool_size);
    let _ = writeln!(m, "episodes_per_config {}", spec.episodes_per_config);
    let ks: Vec<String> = spec.suite_ks().iter().map(|k| k.to_string()).collect();
    let _ = writeln!(m, "ks {}", ks.join(","));
    let w = LossWeights::default();
    let _ = writeln!(m, "loss_weights steer={} throttle={}", w.steer, w.throttle);
    for (label, suite) in &result.suites {
        let _ = writeln!(m, "suite {} configs {} digest {}", label, suite.config_count(), sha(&suite.to_json()));
    }
    for p in &result.points {
        match &p.result {
            Ok(a) => {
                let _ = writeln!(
                    m,
                    "point {} ok train_digest {} policy_digest {} table_digest {}",
                    p.point.dir_name(),
                    a.train_digest,
                    a.policy_digest,
                    a.table_digest
                );
            }
            Err(e) => {
                let _ = writeln!(m, "point {} failed {}", p.point.dir_name(), e.replace('\n', " "));
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dir: &Path) -> StudySpec {
        StudySpec::from_toml(&format!(
            r#"
id = "S4"
supports = [["RSuDDC"], ["RSuDDC", "RSuDNC"]]
traces = [1]
ks = []
episodes_per_config = 2
max_epochs = 2
output_dir = "{}"

[[policies]]
kind = "linear"
"#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn parses_and_validates() {
        let d = tempfile::tempdir().unwrap();
        let s = spec(d.path());
        assert_eq!(s.id, StudyId::S4);
        assert_eq!(s.suite_ks(), vec![0]);
        assert_eq!(grid(&s).unwrap().len(), 2);
        let mut bad = s.clone();
        bad.supports = vec![vec!["RXX".into()]];
        assert!(bad.validate().is_err());
        let mut bad = s.clone();
        bad.policies.clear();
        assert!(bad.validate().is_err());
        let mut bad = s.clone();
        bad.ks = vec![4];
        assert!(bad.validate().is_err());
        assert!(StudySpec::from_toml("id = \"S9\"").is_err());
        let back = StudySpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn empty_ks_gives_id_rows_only() {
        let d = tempfile::tempdir().unwrap();
        let s = spec(d.path());
        let r = run_study(&s, &StudyOptions { jobs: 2, ..StudyOptions::default() }).unwrap();
        assert_eq!(r.failures(), 0);
        let arity = r.by_support_arity();
        assert_eq!(arity.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        for p in &r.points {
            let t = &p.result.as_ref().unwrap().table;
            assert!(t.rows.iter().all(|row| row.k == 0));
            assert_eq!(t.rows.len(), p.point.support.len());
        }
        assert!(d.path().join("manifest.txt").exists());
    }

    #[test]
    fn failing_point_is_recorded() {
        let d = tempfile::tempdir().unwrap();
        let mut s = spec(d.path());
        s.policies.push(PolicySpec { kind: "frozen_encoder_head".into(), frames: 1, stride: 1, encoder_seed: Some(1) });
        s.validate().unwrap();
        // Diverging learning rate makes the encoder-head points fail.
        s.learning_rate = 1e300;
        let r = run_study(&s, &StudyOptions { jobs: 2, ..StudyOptions::default() }).unwrap();
        assert_eq!(r.points.len(), 4);
        assert!(r.failures() > 0);
        let m = fs::read_to_string(d.path().join("manifest.txt")).unwrap();
        assert!(m.contains("failed"));
    }
}
