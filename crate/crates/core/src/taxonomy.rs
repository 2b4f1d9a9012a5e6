//! Basic and compound expression label spaces.
//!
//! Both spaces have seven members. Basic expressions follow the classical
//! ordering with Neutral appended; compound expressions follow the challenge
//! table order, which is also the row order of rendered reports.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const NUM_BASIC: usize = 7;
pub const NUM_COMPOUND: usize = 7;

/// Floor added before taking logs of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BasicExpression {
    Anger,
    Happiness,
    Sadness,
    Surprise,
    Disgust,
    Fear,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CompoundExpression {
    AngrilySurprised,
    DisgustedlySurprised,
    FearfullySurprised,
    HappilySurprised,
    SadlyAngry,
    SadlyFearful,
    SadlySurprised,
}

impl BasicExpression {
    pub const ALL: [BasicExpression; NUM_BASIC] = [
        BasicExpression::Anger,
        BasicExpression::Happiness,
        BasicExpression::Sadness,
        BasicExpression::Surprise,
        BasicExpression::Disgust,
        BasicExpression::Fear,
        BasicExpression::Neutral,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BasicExpression::Anger => "Anger",
            BasicExpression::Happiness => "Happiness",
            BasicExpression::Sadness => "Sadness",
            BasicExpression::Surprise => "Surprise",
            BasicExpression::Disgust => "Disgust",
            BasicExpression::Fear => "Fear",
            BasicExpression::Neutral => "Neutral",
        }
    }
}

impl CompoundExpression {
    pub const ALL: [CompoundExpression; NUM_COMPOUND] = [
        CompoundExpression::AngrilySurprised,
        CompoundExpression::DisgustedlySurprised,
        CompoundExpression::FearfullySurprised,
        CompoundExpression::HappilySurprised,
        CompoundExpression::SadlyAngry,
        CompoundExpression::SadlyFearful,
        CompoundExpression::SadlySurprised,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CompoundExpression::AngrilySurprised => "Angrily Surprised",
            CompoundExpression::DisgustedlySurprised => "Disgustedly Surprised",
            CompoundExpression::FearfullySurprised => "Fearfully Surprised",
            CompoundExpression::HappilySurprised => "Happily Surprised",
            CompoundExpression::SadlyAngry => "Sadly Angry",
            CompoundExpression::SadlyFearful => "Sadly Fearful",
            CompoundExpression::SadlySurprised => "Sadly Surprised",
        }
    }

    /// The (modifier, head) pair of basic emotions named by this class.
    pub fn constituents(self) -> (BasicExpression, BasicExpression) {
        use BasicExpression::*;
        match self {
            CompoundExpression::AngrilySurprised => (Anger, Surprise),
            CompoundExpression::DisgustedlySurprised => (Disgust, Surprise),
            CompoundExpression::FearfullySurprised => (Fear, Surprise),
            CompoundExpression::HappilySurprised => (Happiness, Surprise),
            CompoundExpression::SadlyAngry => (Sadness, Anger),
            CompoundExpression::SadlyFearful => (Sadness, Fear),
            CompoundExpression::SadlySurprised => (Sadness, Surprise),
        }
    }
}

impl fmt::Display for BasicExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for CompoundExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which label space a label belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelKind {
    Basic,
    Compound,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Basic => "basic",
            LabelKind::Compound => "compound",
        }
    }
}

impl FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "basic" => Ok(LabelKind::Basic),
            "compound" => Ok(LabelKind::Compound),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Basic(BasicExpression),
    Compound(CompoundExpression),
}

impl Label {
    pub fn kind(self) -> LabelKind {
        match self {
            Label::Basic(_) => LabelKind::Basic,
            Label::Compound(_) => LabelKind::Compound,
        }
    }

    pub fn id(self) -> usize {
        match self {
            Label::Basic(b) => b.id(),
            Label::Compound(c) => c.id(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Basic(b) => b.name(),
            Label::Compound(c) => c.name(),
        }
    }

    pub fn from_kind_id(kind: LabelKind, id: usize) -> Option<Self> {
        match kind {
            LabelKind::Basic => BasicExpression::from_id(id).map(Label::Basic),
            LabelKind::Compound => CompoundExpression::from_id(id).map(Label::Compound),
        }
    }
}

fn normalize(s: &str) -> String {
    s.trim()
        .chars()
        .filter_map(|c| match c {
            ' ' | '_' | '-' => None,
            c => Some(c.to_ascii_lowercase()),
        })
        .collect()
}

/// Parses a class name or a kind-tagged numeric id (`basic:3`, `compound:0`).
///
/// Names are matched case-insensitively with spaces, underscores and hyphens
/// treated as interchangeable.
pub fn parse_label(s: &str) -> Result<Label> {
    if let Some((kind, id)) = s.split_once(':') {
        let kind: LabelKind = kind.parse()?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| Error::UnknownLabel(s.to_string()))?;
        return Label::from_kind_id(kind, id).ok_or_else(|| Error::UnknownLabel(s.to_string()));
    }
    let key = normalize(s);
    if key.is_empty() {
        return Err(Error::UnknownLabel(s.to_string()));
    }
    if let Some(b) = BasicExpression::ALL.iter().find(|b| normalize(b.name()) == key) {
        return Ok(Label::Basic(*b));
    }
    if let Some(c) = CompoundExpression::ALL
        .iter()
        .find(|c| normalize(c.name()) == key)
    {
        return Ok(Label::Compound(*c));
    }
    Err(Error::UnknownLabel(s.to_string()))
}

/// Binary compound-by-basic membership matrix: `M[c][b] = 1` iff basic `b`
/// is a constituent of compound `c`.
pub const COMPOUND_BASIC_MAP: [[f64; NUM_BASIC]; NUM_COMPOUND] = {
    let mut m = [[0.0; NUM_BASIC]; NUM_COMPOUND];
    // Anger, Happiness, Sadness, Surprise, Disgust, Fear, Neutral
    m[0][0] = 1.0;
    m[0][3] = 1.0;
    m[1][4] = 1.0;
    m[1][3] = 1.0;
    m[2][5] = 1.0;
    m[2][3] = 1.0;
    m[3][1] = 1.0;
    m[3][3] = 1.0;
    m[4][2] = 1.0;
    m[4][0] = 1.0;
    m[5][2] = 1.0;
    m[5][5] = 1.0;
    m[6][2] = 1.0;
    m[6][3] = 1.0;
    m
};

pub(crate) fn check_distribution(p: &[f64], tol: f64) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "entry {bad} is negative or not finite"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::InvalidDistribution(format!(
            "entries sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Prior over compound classes implied by a basic-expression distribution.
///
/// Each compound receives the summed mass of its two constituents and the
/// result is renormalized. All-zero mass (pure Neutral) yields the uniform
/// vector.
pub fn compound_prior(p_basic: &[f64]) -> Result<[f64; NUM_COMPOUND]> {
    if p_basic.len() != NUM_BASIC {
        return Err(Error::InvalidDistribution(format!(
            "expected {NUM_BASIC} entries, got {}",
            p_basic.len()
        )));
    }
    check_distribution(p_basic, 1e-6)?;
    let mut raw = [0.0; NUM_COMPOUND];
    for (c, row) in COMPOUND_BASIC_MAP.iter().enumerate() {
        raw[c] = row.iter().zip(p_basic).map(|(m, p)| m * p).sum();
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Ok([1.0 / NUM_COMPOUND as f64; NUM_COMPOUND]);
    }
    raw.iter_mut().for_each(|v| *v /= total);
    Ok(raw)
}
