//! The five-axis environment space, its compact tag codec, and Hamming shells.
//!
//! Every configuration is a tuple (scene, season, weather, time, agent). Tags
//! spell a configuration positionally, e.g. `RSuDDC` is rural, summer, dry,
//! day, car. Season is the only two-letter field (`Su`, `Sp`); the other
//! season codes (`W`, `F`) are single letters, and no weather code starts
//! with `u` or `p`, so the grammar decodes left to right without lookahead.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! level_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => ($code:literal, $label:literal)),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            /// Levels in canonical order.
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn code(self) -> &'static str {
                match self {
                    $($name::$variant => $code),+
                }
            }

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            /// Position of this level in canonical order.
            pub fn index(self) -> usize {
                Self::ALL.iter().position(|l| *l == self).unwrap()
            }

            pub fn from_label(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|l| l.label() == s)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

level_enum!(
    /// Scene type.
    Scene { Rural => ("R", "rural"), Urban => ("U", "urban") }
);
level_enum!(
    /// Season.
    Season {
        Summer => ("Su", "summer"),
        Winter => ("W", "winter"),
        Spring => ("Sp", "spring"),
        Fall => ("F", "fall"),
    }
);
level_enum!(
    /// Weather.
    Weather { Dry => ("D", "dry"), Rain => ("R", "rain"), Snow => ("S", "snow") }
);
level_enum!(
    /// Time of day.
    TimeOfDay { Day => ("D", "day"), Night => ("N", "night") }
);
level_enum!(
    /// Agents sharing the road with the ego vehicle.
    Agent { Car => ("C", "car"), Animal => ("A", "animal") }
);

/// One of the five factor axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Scene,
    Season,
    Weather,
    Time,
    Agent,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Scene, Axis::Season, Axis::Weather, Axis::Time, Axis::Agent];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Scene => "scene",
            Axis::Season => "season",
            Axis::Weather => "weather",
            Axis::Time => "time",
            Axis::Agent => "agent",
        }
    }

    /// Short key used in figure legends and theme names.
    pub fn key(self) -> &'static str {
        match self {
            Axis::Scene => "Sc",
            Axis::Season => "Se",
            Axis::Weather => "We",
            Axis::Time => "Ti",
            Axis::Agent => "Ag",
        }
    }

    /// Level labels of this axis in canonical order.
    pub fn levels(self) -> Vec<&'static str> {
        match self {
            Axis::Scene => Scene::ALL.iter().map(|l| l.label()).collect(),
            Axis::Season => Season::ALL.iter().map(|l| l.label()).collect(),
            Axis::Weather => Weather::ALL.iter().map(|l| l.label()).collect(),
            Axis::Time => TimeOfDay::ALL.iter().map(|l| l.label()).collect(),
            Axis::Agent => Agent::ALL.iter().map(|l| l.label()).collect(),
        }
    }

    pub fn cardinality(self) -> usize {
        self.levels().len()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Axis::ALL
            .iter()
            .copied()
            .find(|a| a.name() == lower || a.key().eq_ignore_ascii_case(s) || (lower == "agents" && *a == Axis::Agent))
            .ok_or_else(|| format!("unknown axis '{s}'"))
    }
}

/// Number of configurations in the full space.
pub const SPACE_SIZE: usize = 2 * 4 * 3 * 2 * 2;

/// One point of the environment space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnvConfig {
    pub scene: Scene,
    pub season: Season,
    pub weather: Weather,
    pub time: TimeOfDay,
    pub agent: Agent,
}

impl EnvConfig {
    pub const fn new(scene: Scene, season: Season, weather: Weather, time: TimeOfDay, agent: Agent) -> Self {
        EnvConfig { scene, season, weather, time, agent }
    }

    pub fn tag(&self) -> String {
        format_tag(self)
    }

    /// Canonical level index on the given axis.
    pub fn level_index(&self, axis: Axis) -> usize {
        match axis {
            Axis::Scene => self.scene.index(),
            Axis::Season => self.season.index(),
            Axis::Weather => self.weather.index(),
            Axis::Time => self.time.index(),
            Axis::Agent => self.agent.index(),
        }
    }

    pub fn level_label(&self, axis: Axis) -> &'static str {
        match axis {
            Axis::Scene => self.scene.label(),
            Axis::Season => self.season.label(),
            Axis::Weather => self.weather.label(),
            Axis::Time => self.time.label(),
            Axis::Agent => self.agent.label(),
        }
    }

    /// Axes on which `self` and `other` disagree, in canonical axis order.
    pub fn differing_axes(&self, other: &EnvConfig) -> Vec<Axis> {
        Axis::ALL
            .iter()
            .copied()
            .filter(|a| self.level_index(*a) != other.level_index(*a))
            .collect()
    }

    /// Copy of `self` with one axis taken from `other`.
    pub fn with_axis_from(&self, axis: Axis, other: &EnvConfig) -> EnvConfig {
        let mut c = *self;
        match axis {
            Axis::Scene => c.scene = other.scene,
            Axis::Season => c.season = other.season,
            Axis::Weather => c.weather = other.weather,
            Axis::Time => c.time = other.time,
            Axis::Agent => c.agent = other.agent,
        }
        c
    }
}

impl fmt::Display for EnvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_tag(self))
    }
}

impl FromStr for EnvConfig {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_tag(s)
    }
}

impl Serialize for EnvConfig {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_tag(self))
    }
}

impl<'de> Deserialize<'de> for EnvConfig {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_tag(&s).map_err(serde::de::Error::custom)
    }
}

/// Tag decode failure. Positions are 1-based character offsets into the tag.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("tag '{tag}': expected {field} code at position {position}, found end of tag")]
    Truncated { tag: String, field: Axis, position: usize },
    #[error("tag '{tag}': unknown {field} code at position {position}")]
    UnknownCode { tag: String, field: Axis, position: usize },
    #[error("tag '{tag}': trailing characters at position {position}")]
    Trailing { tag: String, position: usize },
}

impl TagError {
    pub fn position(&self) -> usize {
        match self {
            TagError::Truncated { position, .. }
            | TagError::UnknownCode { position, .. }
            | TagError::Trailing { position, .. } => *position,
        }
    }
}

struct Cursor<'a> {
    tag: &'a str,
    chars: Vec<char>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<L: Copy>(&mut self, field: Axis, table: &[L], code: impl Fn(L) -> &'static str) -> Result<L, TagError> {
        if self.pos >= self.chars.len() {
            return Err(TagError::Truncated { tag: self.tag.to_string(), field, position: self.pos + 1 });
        }
        // Longest match first so that `Su`/`Sp` win over a bare `S`.
        let mut best: Option<(L, usize)> = None;
        for &level in table {
            let c: Vec<char> = code(level).chars().collect();
            let end = self.pos + c.len();
            if end <= self.chars.len() && self.chars[self.pos..end] == c[..] && best.is_none_or(|(_, n)| c.len() > n) {
                best = Some((level, c.len()));
            }
        }
        match best {
            Some((level, n)) => {
                self.pos += n;
                Ok(level)
            }
            None => Err(TagError::UnknownCode { tag: self.tag.to_string(), field, position: self.pos + 1 }),
        }
    }
}

/// Decode a positional tag such as `RSuDDC` or `UFRNA`.
pub fn parse_tag(tag: &str) -> Result<EnvConfig, TagError> {
    let mut cur = Cursor { tag, chars: tag.chars().collect(), pos: 0 };
    let scene = cur.take(Axis::Scene, Scene::ALL, Scene::code)?;
    let season = cur.take(Axis::Season, Season::ALL, Season::code)?;
    let weather = cur.take(Axis::Weather, Weather::ALL, Weather::code)?;
    let time = cur.take(Axis::Time, TimeOfDay::ALL, TimeOfDay::code)?;
    let agent = cur.take(Axis::Agent, Agent::ALL, Agent::code)?;
    if cur.pos != cur.chars.len() {
        return Err(TagError::Trailing { tag: tag.to_string(), position: cur.pos + 1 });
    }
    Ok(EnvConfig { scene, season, weather, time, agent })
}

pub fn format_tag(config: &EnvConfig) -> String {
    let mut s = String::with_capacity(6);
    s.push_str(config.scene.code());
    s.push_str(config.season.code());
    s.push_str(config.weather.code());
    s.push_str(config.time.code());
    s.push_str(config.agent.code());
    s
}

/// Parse a comma- or `+`-separated list of tags.
pub fn parse_tag_list(list: &str) -> Result<Vec<EnvConfig>, TagError> {
    list.split([',', '+'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_tag)
        .collect()
}

/// Number of axes on which two configurations differ.
pub fn hamming(a: &EnvConfig, b: &EnvConfig) -> usize {
    Axis::ALL.iter().filter(|ax| a.level_index(**ax) != b.level_index(**ax)).count()
}

/// All 96 configurations, lexicographic in (scene, season, weather, time, agent).
pub fn enumerate_space() -> Vec<EnvConfig> {
    let mut out = Vec::with_capacity(SPACE_SIZE);
    for &scene in Scene::ALL {
        for &season in Season::ALL {
            for &weather in Weather::ALL {
                for &time in TimeOfDay::ALL {
                    for &agent in Agent::ALL {
                        out.push(EnvConfig { scene, season, weather, time, agent });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SupportError {
    #[error("ID support must contain at least one configuration")]
    Empty,
    #[error("ID support lists {0} more than once")]
    Duplicate(String),
}

/// The set of configurations a policy is trained on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<EnvConfig>", into = "Vec<EnvConfig>")]
pub struct IdSupport {
    members: Vec<EnvConfig>,
}

impl IdSupport {
    /// Members keep the caller's order; duplicates are rejected.
    pub fn new(members: Vec<EnvConfig>) -> Result<Self, SupportError> {
        if members.is_empty() {
            return Err(SupportError::Empty);
        }
        let mut seen = BTreeSet::new();
        for m in &members {
            if !seen.insert(*m) {
                return Err(SupportError::Duplicate(m.tag()));
            }
        }
        Ok(IdSupport { members })
    }

    pub fn single(config: EnvConfig) -> Self {
        IdSupport { members: vec![config] }
    }

    pub fn members(&self) -> &[EnvConfig] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, c: &EnvConfig) -> bool {
        self.members.contains(c)
    }

    /// Minimum Hamming distance from `c` to any member.
    pub fn distance(&self, c: &EnvConfig) -> usize {
        self.members.iter().map(|m| hamming(c, m)).min().unwrap_or(Axis::ALL.len())
    }

    /// Members joined with `+`, e.g. `RSuDDC+RSuDNC`.
    pub fn label(&self) -> String {
        self.members.iter().map(EnvConfig::tag).collect::<Vec<_>>().join("+")
    }
}

impl TryFrom<Vec<EnvConfig>> for IdSupport {
    type Error = SupportError;

    fn try_from(v: Vec<EnvConfig>) -> Result<Self, Self::Error> {
        IdSupport::new(v)
    }
}

impl From<IdSupport> for Vec<EnvConfig> {
    fn from(s: IdSupport) -> Self {
        s.members
    }
}

/// Configurations whose minimum distance to `support` is exactly `k`, in
/// canonical enumeration order.
pub fn shell(support: &IdSupport, k: usize) -> Vec<EnvConfig> {
    enumerate_space().into_iter().filter(|c| support.distance(c) == k).collect()
}
