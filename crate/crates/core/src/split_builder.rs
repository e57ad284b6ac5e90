//! Matched-budget ID/OOD evaluation suites.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor_space::{shell, Axis, EnvConfig, IdSupport};

/// Shell radii a suite may contain.
pub const MAX_SUITE_K: usize = 3;

/// Route pool used when a suite does not name one.
pub const DEFAULT_ROUTE_SET: &str = "routes-v1";

/// Domain tags keep evaluation seeds and demonstration seeds disjoint.
pub(crate) const EVAL_DOMAIN: &str = "eval";
pub(crate) const ROUTE_DOMAIN: &str = "route";

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("ID support must contain at least one configuration")]
    EmptySupport,
    #[error("shell radius {0} outside 0..={MAX_SUITE_K}")]
    BadRadius(usize),
    #[error("episode budget must be at least 1")]
    ZeroBudget,
    #[error("route pool must contain at least one route")]
    EmptyRoutePool,
    #[error("suite file: {0}")]
    Io(#[from] std::io::Error),
    #[error("suite file: {0}")]
    Format(#[from] serde_json::Error),
}

/// Stable 64-bit hash over a domain tag, a text key and an index.
pub fn stable_hash(domain: &str, key: &str, index: u64) -> u64 {
    let mut h = FnvHasher::default();
    h.write(domain.as_bytes());
    h.write(&[0xff]);
    h.write(key.as_bytes());
    h.write(&[0xff]);
    h.write(&index.to_le_bytes());
    // FNV alone mixes the trailing bytes weakly; finish with a splitmix round.
    let mut z = h.finish().wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An ID support plus per-k OOD shells with a common episode budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    pub id_support: IdSupport,
    /// Shell radius to configurations, each list in canonical tag order.
    pub shells: BTreeMap<usize, Vec<EnvConfig>>,
    pub episodes_per_config: usize,
    pub seed_base: u64,
    pub route_set_id: String,
    /// Number of distinct routes cycled through by episode index.
    pub route_pool_size: usize,
}

/// One scheduled episode of a suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSlot {
    pub config: EnvConfig,
    pub k: usize,
    pub episode: usize,
    pub seed: u64,
    pub route_seed: u64,
}

impl TestSuite {
    /// Episode seed for `config`, episode index `j`.
    pub fn episode_seed(&self, config: &EnvConfig, j: usize) -> u64 {
        self.seed_base ^ stable_hash(EVAL_DOMAIN, &config.tag(), j as u64)
    }

    /// Route seed for episode index `j`. Independent of the configuration so
    /// that every configuration is driven on the same route list.
    pub fn route_seed(&self, j: usize) -> u64 {
        let slot = (j % self.route_pool_size.max(1)) as u64;
        stable_hash(ROUTE_DOMAIN, &self.route_set_id, slot)
    }

    /// Every (config, episode) pair in shell order, then tag order, then episode index.
    pub fn slots(&self) -> Vec<EpisodeSlot> {
        let mut out = Vec::new();
        for (&k, configs) in &self.shells {
            for c in configs {
                for j in 0..self.episodes_per_config {
                    out.push(EpisodeSlot {
                        config: *c,
                        k,
                        episode: j,
                        seed: self.episode_seed(c, j),
                        route_seed: self.route_seed(j),
                    });
                }
            }
        }
        out
    }

    pub fn configs(&self) -> impl Iterator<Item = (usize, &EnvConfig)> {
        self.shells.iter().flat_map(|(k, cs)| cs.iter().map(move |c| (*k, c)))
    }

    pub fn config_count(&self) -> usize {
        self.shells.values().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("suite serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, SuiteError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SuiteError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SuiteError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Options beyond the required build inputs.
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub route_set_id: String,
    pub route_pool_size: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { route_set_id: DEFAULT_ROUTE_SET.to_string(), route_pool_size: 10 }
    }
}

pub fn build_suite(support: &IdSupport, ks: &[usize], budget: usize, seed_base: u64) -> Result<TestSuite, SuiteError> {
    build_suite_with(support, ks, budget, seed_base, &SuiteOptions::default())
}

pub fn build_suite_with(
    support: &IdSupport,
    ks: &[usize],
    budget: usize,
    seed_base: u64,
    opts: &SuiteOptions,
) -> Result<TestSuite, SuiteError> {
    if support.is_empty() {
        return Err(SuiteError::EmptySupport);
    }
    if budget == 0 {
        return Err(SuiteError::ZeroBudget);
    }
    if opts.route_pool_size == 0 {
        return Err(SuiteError::EmptyRoutePool);
    }
    let mut shells = BTreeMap::new();
    for &k in ks {
        if k > MAX_SUITE_K {
            return Err(SuiteError::BadRadius(k));
        }
        let mut members = shell(support, k);
        members.sort_by_key(EnvConfig::tag);
        shells.insert(k, members);
    }
    Ok(TestSuite {
        id_support: support.clone(),
        shells,
        episodes_per_config: budget,
        seed_base,
        route_set_id: opts.route_set_id.clone(),
        route_pool_size: opts.route_pool_size,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    /// An ID member placed in an OOD shell.
    IdInOod { tag: String, k: usize },
    /// A shell member whose distance to the support is not the shell radius.
    WrongDistance { tag: String, k: usize, distance: usize },
    /// A configuration listed in more than one shell.
    DuplicateAcrossShells { tag: String, shells: Vec<usize> },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::IdInOod { tag, k } => write!(f, "ID member {tag} appears in OOD shell k={k}"),
            Violation::WrongDistance { tag, k, distance } => {
                write!(f, "{tag} in shell k={k} is at distance {distance} from the support")
            }
            Violation::DuplicateAcrossShells { tag, shells } => write!(f, "{tag} listed in shells {shells:?}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LeakageReport {
    pub violations: Vec<Violation>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_leakage(suite: &TestSuite) -> LeakageReport {
    let mut violations = Vec::new();
    let mut seen: BTreeMap<EnvConfig, Vec<usize>> = BTreeMap::new();
    for (&k, configs) in &suite.shells {
        for c in configs {
            seen.entry(*c).or_default().push(k);
            if k >= 1 && suite.id_support.contains(c) {
                violations.push(Violation::IdInOod { tag: c.tag(), k });
                continue;
            }
            let distance = suite.id_support.distance(c);
            if distance != k {
                violations.push(Violation::WrongDistance { tag: c.tag(), k, distance });
            }
        }
    }
    for (c, ks) in seen {
        if ks.len() > 1 {
            violations.push(Violation::DuplicateAcrossShells { tag: c.tag(), shells: ks });
        }
    }
    LeakageReport { violations }
}

/// Partition the support by level on `axis`, keyed by level label.
pub fn stratify(support: &IdSupport, axis: Axis) -> BTreeMap<&'static str, Vec<EnvConfig>> {
    let mut parts: BTreeMap<&'static str, Vec<EnvConfig>> = BTreeMap::new();
    for m in support.members() {
        parts.entry(m.level_label(axis)).or_default().push(*m);
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_space::{enumerate_space, hamming, parse_tag};

    fn t(s: &str) -> EnvConfig {
        parse_tag(s).unwrap()
    }

    fn brute_force_distance(support: &[EnvConfig], c: &EnvConfig) -> usize {
        support.iter().map(|m| hamming(m, c)).min().unwrap()
    }

    fn support(tags: &[&str]) -> IdSupport {
        IdSupport::new(tags.iter().map(|s| t(s)).collect()).unwrap()
    }

    #[test]
    fn single_id_k1_suite() {
        let s = build_suite(&support(&["RSuDDC"]), &[1], 100, 7).unwrap();
        assert_eq!(s.shells[&1].len(), 8);
        assert_eq!(s.slots().len(), 800);
        assert!(check_leakage(&s).is_clean());
    }

    #[test]
    fn k0_suite_is_support() {
        let s = build_suite(&support(&["RSuDDC"]), &[0], 3, 0).unwrap();
        assert_eq!(s.shells.len(), 1);
        assert_eq!(s.shells[&0], vec![t("RSuDDC")]);
    }

    #[test]
    fn mixture_shell_excludes_members() {
        let members = ["RSuDDC", "RSuDNC", "USuDDC"];
        let sup = support(&members);
        let s = build_suite(&sup, &[1], 10, 0).unwrap();
        for m in members {
            assert!(!s.shells[&1].contains(&t(m)));
        }
        let expected: Vec<_> = {
            let mut v: Vec<_> = enumerate_space()
                .into_iter()
                .filter(|c| brute_force_distance(sup.members(), c) == 1)
                .collect();
            v.sort_by_key(EnvConfig::tag);
            v
        };
        assert_eq!(s.shells[&1], expected);
    }

    #[test]
    fn build_rejects_bad_inputs() {
        let sup = support(&["RSuDDC"]);
        assert!(matches!(build_suite(&sup, &[4], 1, 0), Err(SuiteError::BadRadius(4))));
        assert!(matches!(build_suite(&sup, &[1], 0, 0), Err(SuiteError::ZeroBudget)));
    }

    #[test]
    fn leakage_detects_id_in_ood() {
        let mut s = build_suite(&support(&["RSuDDC"]), &[1], 1, 0).unwrap();
        s.shells.get_mut(&1).unwrap().push(t("RSuDDC"));
        let r = check_leakage(&s);
        assert_eq!(r.violations, vec![Violation::IdInOod { tag: "RSuDDC".into(), k: 1 }]);
    }

    #[test]
    fn leakage_detects_wrong_distance() {
        let mut s = build_suite(&support(&["RSuDDC"]), &[1], 1, 0).unwrap();
        s.shells.get_mut(&1).unwrap().push(t("USuDNC"));
        let r = check_leakage(&s);
        assert_eq!(r.violations.len(), 1);
        assert!(matches!(&r.violations[0], Violation::WrongDistance { distance: 2, k: 1, .. }));
    }

    #[test]
    fn stratify_examples() {
        let parts = stratify(&support(&["RSuDDC", "USuDDC"]), Axis::Scene);
        assert_eq!(parts["rural"], vec![t("RSuDDC")]);
        assert_eq!(parts["urban"], vec![t("USuDDC")]);

        for axis in Axis::ALL {
            assert_eq!(stratify(&support(&["RSuDDC"]), axis).len(), 1);
        }

        let parts = stratify(&support(&["RSuDDC", "RSuDNC", "USuDDC"]), Axis::Time);
        assert_eq!(parts["day"].len(), 2);
        assert_eq!(parts["night"].len(), 1);
    }

    #[test]
    fn seeds_are_injective_within_suite() {
        let s = build_suite(&support(&["RSuDDC"]), &[0, 1, 2, 3], 50, 99).unwrap();
        let seeds: std::collections::BTreeSet<_> = s.slots().iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), s.slots().len());
    }

    #[test]
    fn json_roundtrip() {
        let s = build_suite(&support(&["RSuDDC", "RSuDNC"]), &[0, 1, 2], 5, 3).unwrap();
        let text = s.to_json();
        assert_eq!(TestSuite::from_json(&text).unwrap(), s);
        assert_eq!(build_suite(&support(&["RSuDDC", "RSuDNC"]), &[0, 1, 2], 5, 3).unwrap().to_json(), text);
    }
}
