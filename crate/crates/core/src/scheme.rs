//! Grouping schemes: which query block and which key/value block each
//! attention head uses.
//!
//! Every variant in the family (MHA, MQA, GQA-g, MKVA, GKVA-g,
//! GQKVA-a.b) is one [`GroupingScheme`]: a count of distinct query
//! projections, a count of distinct key/value projection pairs, and an
//! explicit head → (query-group, kv-group) pairing list.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator used to scale attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// `1 / sqrt(head_dim)`.
    #[default]
    HeadDim,
    /// `1 / sqrt(d)` with `d` the embedding size.
    EmbedDim,
}

impl ScaleMode {
    pub fn factor(self, d: usize, head_dim: usize) -> f64 {
        match self {
            ScaleMode::HeadDim => 1.0 / (head_dim as f64).sqrt(),
            ScaleMode::EmbedDim => 1.0 / (d as f64).sqrt(),
        }
    }
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "head-dim" => Ok(ScaleMode::HeadDim),
            "embed-dim" => Ok(ScaleMode::EmbedDim),
            other => Err(Error::Config(format!("unknown scale mode {other:?} (expected head-dim | embed-dim)"))),
        }
    }
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::HeadDim => "head-dim",
            ScaleMode::EmbedDim => "embed-dim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    Mha,
    Mqa,
    Gqa,
    Mkva,
    Gkva,
    Gqkva,
}

/// A scheme name before dimensions are attached, e.g. `gqkva-2.3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeSpec {
    Mha,
    Mqa,
    Mkva,
    /// Query heads split into `g` blocks, one K,V pair per block.
    Gqa(usize),
    /// Key/value heads split into `g` blocks, one query per block.
    Gkva(usize),
    /// Every combination of `q` query projections and `kv` K,V pairs.
    Gqkva {
        q: usize,
        kv: usize,
    },
}

pub const SCHEME_GRAMMAR: &str = "mha | mqa | mkva | gqa-<g> | gkva-<g> | gqkva-<g_q>.<g_kv>";

impl SchemeSpec {
    pub fn kind(self) -> SchemeKind {
        match self {
            SchemeSpec::Mha => SchemeKind::Mha,
            SchemeSpec::Mqa => SchemeKind::Mqa,
            SchemeSpec::Mkva => SchemeKind::Mkva,
            SchemeSpec::Gqa(_) => SchemeKind::Gqa,
            SchemeSpec::Gkva(_) => SchemeKind::Gkva,
            SchemeSpec::Gqkva { .. } => SchemeKind::Gqkva,
        }
    }

    /// Display label, e.g. `GQKVA-3.2`.
    pub fn label(self) -> String {
        match self {
            SchemeSpec::Mha => "MHA".into(),
            SchemeSpec::Mqa => "MQA".into(),
            SchemeSpec::Mkva => "MKVA".into(),
            SchemeSpec::Gqa(g) => format!("GQA-{g}"),
            SchemeSpec::Gkva(g) => format!("GKVA-{g}"),
            SchemeSpec::Gqkva { q, kv } => format!("GQKVA-{q}.{kv}"),
        }
    }

    pub fn build(self, d: usize, h: usize) -> Result<GroupingScheme> {
        if h == 0 || d == 0 {
            return Err(Error::Config(format!("d and h must be positive (d={d}, h={h})")));
        }
        if !d.is_multiple_of(h) {
            return Err(Error::Config(format!("d mod h must be 0 (d={d}, h={h})")));
        }
        let divides = |g: usize, what: &str| -> Result<()> {
            if g == 0 || !h.is_multiple_of(g) {
                Err(Error::Config(format!("{what}: h mod g must be 0 (h={h}, g={g})")))
            } else {
                Ok(())
            }
        };
        let (g_q, g_kv, pairing): (usize, usize, Vec<(usize, usize)>) = match self {
            SchemeSpec::Mha => (h, h, (0..h).map(|i| (i, i)).collect()),
            SchemeSpec::Mqa => (h, 1, (0..h).map(|i| (i, 0)).collect()),
            SchemeSpec::Mkva => (1, h, (0..h).map(|j| (0, j)).collect()),
            SchemeSpec::Gqa(g) => {
                divides(g, "gqa")?;
                (h, g, (0..h).map(|i| (i, i * g / h)).collect())
            }
            SchemeSpec::Gkva(g) => {
                divides(g, "gkva")?;
                (g, h, (0..h).map(|j| (j * g / h, j)).collect())
            }
            SchemeSpec::Gqkva { q, kv } => {
                if q == 0 || kv == 0 || q * kv != h {
                    return Err(Error::Config(format!("gqkva: g_q * g_kv must equal h ({q} * {kv} != {h})")));
                }
                (q, kv, (0..q).flat_map(|i| (0..kv).map(move |j| (i, j))).collect())
            }
        };
        let scheme = GroupingScheme {
            d,
            h,
            head_dim: d / h,
            g_q,
            g_kv,
            pairing,
            label: self.label(),
            scale: ScaleMode::HeadDim,
        };
        debug_assert!(scheme.validate().is_empty());
        Ok(scheme)
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeSpec::Mha => f.write_str("mha"),
            SchemeSpec::Mqa => f.write_str("mqa"),
            SchemeSpec::Mkva => f.write_str("mkva"),
            SchemeSpec::Gqa(g) => write!(f, "gqa-{g}"),
            SchemeSpec::Gkva(g) => write!(f, "gkva-{g}"),
            SchemeSpec::Gqkva { q, kv } => write!(f, "gqkva-{q}.{kv}"),
        }
    }
}

impl FromStr for SchemeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse scheme {s:?}; grammar: {SCHEME_GRAMMAR}"));
        let lower = s.trim().to_ascii_lowercase();
        let count = |t: &str| -> Result<usize> {
            if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            t.parse::<usize>().ok().filter(|&g| g > 0).ok_or_else(bad)
        };
        match lower.as_str() {
            "mha" => Ok(SchemeSpec::Mha),
            "mqa" => Ok(SchemeSpec::Mqa),
            "mkva" => Ok(SchemeSpec::Mkva),
            _ => {
                if let Some(rest) = lower.strip_prefix("gqkva-") {
                    let (q, kv) = rest.split_once('.').ok_or_else(bad)?;
                    Ok(SchemeSpec::Gqkva { q: count(q)?, kv: count(kv)? })
                } else if let Some(rest) = lower.strip_prefix("gqa-") {
                    Ok(SchemeSpec::Gqa(count(rest)?))
                } else if let Some(rest) = lower.strip_prefix("gkva-") {
                    Ok(SchemeSpec::Gkva(count(rest)?))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// The nine rows of the reference comparison table, in its row order.
pub fn table1_bundle() -> Vec<SchemeSpec> {
    vec![
        SchemeSpec::Mha,
        SchemeSpec::Gkva(3),
        SchemeSpec::Gkva(2),
        SchemeSpec::Mkva,
        SchemeSpec::Gqa(3),
        SchemeSpec::Gqa(2),
        SchemeSpec::Mqa,
        SchemeSpec::Gqkva { q: 2, kv: 3 },
        SchemeSpec::Gqkva { q: 3, kv: 2 },
    ]
}

/// Every distinct-named scheme buildable with `h` heads.
pub fn all_for_heads(h: usize) -> Vec<SchemeSpec> {
    let divisors: Vec<usize> = (1..=h).filter(|g| h.is_multiple_of(*g)).collect();
    let mut out = vec![SchemeSpec::Mha, SchemeSpec::Mqa, SchemeSpec::Mkva];
    out.extend(divisors.iter().map(|&g| SchemeSpec::Gqa(g)));
    out.extend(divisors.iter().map(|&g| SchemeSpec::Gkva(g)));
    out.extend(divisors.iter().map(|&q| SchemeSpec::Gqkva { q, kv: h / q }));
    out
}

/// Parses a comma-separated scheme list; `table1` and `all` expand to
/// bundles.
pub fn parse_scheme_list(s: &str, h: usize) -> Result<Vec<SchemeSpec>> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match item.to_ascii_lowercase().as_str() {
            "table1" => out.extend(table1_bundle()),
            "all" => out.extend(all_for_heads(h)),
            _ => out.push(item.parse()?),
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("empty scheme list; grammar: {SCHEME_GRAMMAR}")));
    }
    Ok(out)
}

/// One broken invariant of a [`GroupingScheme`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    IndivisibleEmbedding { d: usize, h: usize },
    HeadDimMismatch { head_dim: usize, expected: usize },
    GroupCountOutOfRange { which: &'static str, count: usize, h: usize },
    PairingLength { len: usize, h: usize },
    IndexOutOfRange { head: usize, pair: (usize, usize) },
    DuplicatePair { pair: (usize, usize) },
    UnusedGroup { which: &'static str, index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IndivisibleEmbedding { d, h } => write!(f, "embedding {d} not divisible by {h} heads"),
            Violation::HeadDimMismatch { head_dim, expected } => {
                write!(f, "head_dim {head_dim} != d / h = {expected}")
            }
            Violation::GroupCountOutOfRange { which, count, h } => {
                write!(f, "{which} group count {count} outside [1, {h}]")
            }
            Violation::PairingLength { len, h } => write!(f, "pairing has {len} entries, expected {h}"),
            Violation::IndexOutOfRange { head, pair } => {
                write!(f, "head {head} pair {pair:?} references a missing projection group")
            }
            Violation::DuplicatePair { pair } => write!(f, "duplicate pair {pair:?}"),
            Violation::UnusedGroup { which, index } => {
                write!(f, "unused projection group: {which} index {index}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingScheme {
    d: usize,
    h: usize,
    head_dim: usize,
    g_q: usize,
    g_kv: usize,
    pairing: Vec<(usize, usize)>,
    label: String,
    scale: ScaleMode,
}

impl GroupingScheme {
    /// Assembles a scheme from raw parts without checking it; call
    /// [`GroupingScheme::validate`] before use.
    pub fn from_parts(
        d: usize,
        h: usize,
        g_q: usize,
        g_kv: usize,
        pairing: Vec<(usize, usize)>,
        label: impl Into<String>,
    ) -> Self {
        GroupingScheme {
            d,
            h,
            head_dim: if h == 0 { 0 } else { d / h },
            g_q,
            g_kv,
            pairing,
            label: label.into(),
            scale: ScaleMode::HeadDim,
        }
    }

    pub fn with_scale(mut self, scale: ScaleMode) -> Self {
        self.scale = scale;
        self
    }

    /// Same scheme with the head order permuted: head `t` of the result is
    /// head `perm[t]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.pairing = perm.iter().map(|&p| self.pairing[p]).collect();
        out
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn heads(&self) -> usize {
        self.h
    }
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
    pub fn q_groups(&self) -> usize {
        self.g_q
    }
    pub fn kv_groups(&self) -> usize {
        self.g_kv
    }
    pub fn pairing(&self) -> &[(usize, usize)] {
        &self.pairing
    }
    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn scale_mode(&self) -> ScaleMode {
        self.scale
    }

    /// Lowercase grammar string, when the label names a canonical scheme
    /// whose pairing this scheme actually carries.
    pub fn spec(&self) -> Option<SchemeSpec> {
        let spec: SchemeSpec = self.label.parse().ok()?;
        let canonical = spec.build(self.d, self.h).ok()?;
        (canonical.pairing == self.pairing).then_some(spec)
    }

    /// Width of the fused q/k/v projection output: `(g_q + 2·g_kv)·head_dim`.
    pub fn qkv_width(&self) -> usize {
        (self.g_q + 2 * self.g_kv) * self.head_dim
    }

    /// Every broken invariant; empty when the scheme is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.h == 0 || !self.d.is_multiple_of(self.h) {
            out.push(Violation::IndivisibleEmbedding { d: self.d, h: self.h });
        } else if self.head_dim != self.d / self.h {
            out.push(Violation::HeadDimMismatch { head_dim: self.head_dim, expected: self.d / self.h });
        }
        for (which, count) in [("q", self.g_q), ("kv", self.g_kv)] {
            if count == 0 || count > self.h {
                out.push(Violation::GroupCountOutOfRange { which, count, h: self.h });
            }
        }
        if self.pairing.len() != self.h {
            out.push(Violation::PairingLength { len: self.pairing.len(), h: self.h });
        }
        let mut seen = HashSet::new();
        let mut reported = HashSet::new();
        for (head, &pair) in self.pairing.iter().enumerate() {
            if pair.0 >= self.g_q || pair.1 >= self.g_kv {
                out.push(Violation::IndexOutOfRange { head, pair });
            }
            if !seen.insert(pair) && reported.insert(pair) {
                out.push(Violation::DuplicatePair { pair });
            }
        }
        for index in 0..self.g_q {
            if !self.pairing.iter().any(|p| p.0 == index) {
                out.push(Violation::UnusedGroup { which: "q", index });
            }
        }
        for index in 0..self.g_kv {
            if !self.pairing.iter().any(|p| p.1 == index) {
                out.push(Violation::UnusedGroup { which: "kv", index });
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            return Ok(());
        }
        let joined: Vec<String> = violations.iter().map(ToString::to_string).collect();
        Err(Error::Config(format!("invalid scheme {}: {}", self.label, joined.join("; "))))
    }
}

/// Builds a scheme from a kind plus its optional group counts; `g_kv`
/// is the group count for GQA and `g_q` for GKVA.
pub fn make_scheme(
    kind: SchemeKind,
    d: usize,
    h: usize,
    g_q: Option<usize>,
    g_kv: Option<usize>,
) -> Result<GroupingScheme> {
    let need = |g: Option<usize>, name: &str| g.ok_or_else(|| Error::Config(format!("{kind:?} requires {name}")));
    let spec = match kind {
        SchemeKind::Mha => SchemeSpec::Mha,
        SchemeKind::Mqa => SchemeSpec::Mqa,
        SchemeKind::Mkva => SchemeSpec::Mkva,
        SchemeKind::Gqa => SchemeSpec::Gqa(need(g_kv, "g_kv")?),
        SchemeKind::Gkva => SchemeSpec::Gkva(need(g_q, "g_q")?),
        SchemeKind::Gqkva => SchemeSpec::Gqkva { q: need(g_q, "g_q")?, kv: need(g_kv, "g_kv")? },
    };
    spec.build(d, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mqa_pairs_every_query_with_kv_zero() {
        let s = make_scheme(SchemeKind::Mqa, 384, 6, None, None).unwrap();
        assert_eq!(s.pairing(), &[(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (5, 0)]);
        assert_eq!((s.q_groups(), s.kv_groups()), (6, 1));
        assert_eq!(s.head_dim(), 64);
    }

    #[test]
    fn gqkva_is_row_major_cartesian() {
        let s = make_scheme(SchemeKind::Gqkva, 384, 6, Some(2), Some(3)).unwrap();
        assert_eq!(s.pairing(), &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        let err = make_scheme(SchemeKind::Gqkva, 384, 6, Some(2), Some(2)).unwrap_err();
        assert!(err.to_string().contains("g_q * g_kv must equal h"), "{err}");
    }

    #[test]
    fn block_pairings_are_contiguous() {
        let gqa = SchemeSpec::Gqa(2).build(384, 6).unwrap();
        assert_eq!(gqa.pairing(), &[(0, 0), (1, 0), (2, 0), (3, 1), (4, 1), (5, 1)]);
        let gkva = SchemeSpec::Gkva(3).build(384, 6).unwrap();
        assert_eq!(gkva.pairing(), &[(0, 0), (0, 1), (1, 2), (1, 3), (2, 4), (2, 5)]);
        assert_eq!((gkva.q_groups(), gkva.kv_groups()), (3, 6));
        let mkva = SchemeSpec::Mkva.build(12, 3).unwrap();
        assert_eq!(mkva.pairing(), &[(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn divisibility_errors_name_the_constraint() {
        assert!(SchemeSpec::Mha.build(10, 3).unwrap_err().to_string().contains("d mod h"));
        assert!(SchemeSpec::Gqa(4).build(384, 6).unwrap_err().to_string().contains("h mod g"));
        assert!(make_scheme(SchemeKind::Gqa, 384, 6, None, None).is_err());
    }

    #[test]
    fn validate_reports_every_violation() {
        assert!(SchemeSpec::Mha.build(384, 6).unwrap().validate().is_empty());
        let dup = GroupingScheme::from_parts(4, 2, 1, 1, vec![(0, 0), (0, 0)], "dup");
        let v = dup.validate();
        assert!(v.iter().any(|x| x.to_string().contains("duplicate pair")), "{v:?}");
        let dead = GroupingScheme::from_parts(4, 2, 2, 2, vec![(0, 0), (0, 1)], "dead");
        let v = dead.validate();
        assert_eq!(v, vec![Violation::UnusedGroup { which: "q", index: 1 }]);
        assert!(v[0].to_string().contains("unused projection group"));
        let broken = GroupingScheme::from_parts(5, 2, 3, 1, vec![(0, 0), (0, 0), (4, 0)], "broken");
        let v = broken.validate();
        assert!(v.len() >= 4, "{v:?}");
        assert!(broken.ensure_valid().is_err());
    }

    #[test]
    fn grammar_parses_case_insensitively() {
        assert_eq!("GQKVA-3.2".parse::<SchemeSpec>().unwrap(), SchemeSpec::Gqkva { q: 3, kv: 2 });
        assert_eq!("Gqa-2".parse::<SchemeSpec>().unwrap(), SchemeSpec::Gqa(2));
        assert_eq!(" mkva ".parse::<SchemeSpec>().unwrap(), SchemeSpec::Mkva);
        for bad in ["gqa", "gqa-", "gqa-0", "gqkva-2", "gqkva-2.x", "mha2", "gqa-+2", ""] {
            let err = bad.parse::<SchemeSpec>().unwrap_err().to_string();
            assert!(err.contains("grammar"), "{bad}: {err}");
        }
        for spec in all_for_heads(6) {
            assert_eq!(spec.to_string().parse::<SchemeSpec>().unwrap(), spec);
        }
    }

    #[test]
    fn bundles_expand() {
        let t = parse_scheme_list("table1", 6).unwrap();
        let labels: Vec<String> = t.iter().map(|s| s.label()).collect();
        assert_eq!(labels, ["MHA", "GKVA-3", "GKVA-2", "MKVA", "GQA-3", "GQA-2", "MQA", "GQKVA-2.3", "GQKVA-3.2"]);
        assert_eq!(parse_scheme_list("mha, mqa", 6).unwrap().len(), 2);
        for spec in all_for_heads(6) {
            assert!(spec.build(24, 6).is_ok(), "{spec}");
        }
        assert!(parse_scheme_list(" , ", 6).is_err());
    }

    #[test]
    fn spec_round_trips_only_for_canonical_pairings() {
        let s = SchemeSpec::Gqa(3).build(24, 6).unwrap();
        assert_eq!(s.spec(), Some(SchemeSpec::Gqa(3)));
        assert_eq!(s.permuted(&[5, 4, 3, 2, 1, 0]).spec(), None);
    }
}
