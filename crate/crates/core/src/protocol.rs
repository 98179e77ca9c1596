//! Trial lists, keys and segment channel metadata.
//!
//! All files are UTF-8, LF-terminated, TAB-separated:
//!
//! - metadata: `segment_id<TAB>{tel|mic}`
//! - trial list: `enroll_id<TAB>test_id`
//! - key: `enroll_id<TAB>test_id<TAB>{target|nontarget}`
//!
//! Line numbers in errors are 1-based.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("line {0}: malformed line")]
    MalformedLine(usize),
    #[error("line {0}: unknown source type")]
    UnknownSourceType(usize),
    #[error("duplicate segment id `{0}`")]
    DuplicateSegment(String),
    #[error("line {line}: duplicate trial ({enroll}, {test})")]
    DuplicateTrial { line: usize, enroll: String, test: String },
    #[error("no channel metadata for segment `{0}`")]
    MissingMeta(String),
    #[error("line {0}: bad or missing label")]
    BadLabel(usize),
}

impl ProtocolError {
    /// 1-based line the error refers to, when it has one.
    pub fn line(&self) -> Option<usize> {
        match self {
            ProtocolError::MalformedLine(l)
            | ProtocolError::UnknownSourceType(l)
            | ProtocolError::BadLabel(l) => Some(*l),
            ProtocolError::DuplicateTrial { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Recording medium of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SourceType {
    Tel,
    Mic,
}

impl SourceType {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceType::Tel => "tel",
            SourceType::Mic => "mic",
        }
    }
}

impl FromStr for SourceType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tel" => Ok(SourceType::Tel),
            "mic" => Ok(SourceType::Mic),
            _ => Err(()),
        }
    }
}

impl fmt::Display for SourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered (enroll side, test side) source-type pair. `tel-mic` and
/// `mic-tel` are distinct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelPair {
    pub enroll_side: SourceType,
    pub test_side: SourceType,
}

impl ChannelPair {
    pub const ALL: [ChannelPair; 4] = [
        ChannelPair::new(SourceType::Tel, SourceType::Tel),
        ChannelPair::new(SourceType::Tel, SourceType::Mic),
        ChannelPair::new(SourceType::Mic, SourceType::Tel),
        ChannelPair::new(SourceType::Mic, SourceType::Mic),
    ];

    pub const fn new(enroll_side: SourceType, test_side: SourceType) -> Self {
        ChannelPair { enroll_side, test_side }
    }
}

impl fmt::Display for ChannelPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.enroll_side, self.test_side)
    }
}

impl FromStr for ChannelPair {
    type Err = ();

    /// Parses `tel-mic` style names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once('-').ok_or(())?;
        Ok(ChannelPair::new(a.parse()?, b.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMeta {
    pub segment_id: String,
    pub source_type: SourceType,
}

/// Segment id to metadata, ordered by id.
pub type MetaMap = BTreeMap<String, SegmentMeta>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Target,
    Nontarget,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Target => "target",
            Label::Nontarget => "nontarget",
        }
    }

    pub fn is_target(self) -> bool {
        self == Label::Target
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "target" => Ok(Label::Target),
            "nontarget" => Ok(Label::Nontarget),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: Option<Label>,
    pub channel_pair: Option<ChannelPair>,
}

impl Trial {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>) -> Self {
        Trial {
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            label: None,
            channel_pair: None,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_pair(mut self, pair: ChannelPair) -> Self {
        self.channel_pair = Some(pair);
        self
    }
}

/// Ordered trial list without duplicate (enroll, test) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialSet {
    trials: Vec<Trial>,
}

impl TrialSet {
    /// Builds a set, rejecting duplicate pairs. The reported line is the
    /// 1-based position of the second occurrence.
    pub fn new(trials: Vec<Trial>) -> Result<Self, ProtocolError> {
        let mut seen = HashSet::with_capacity(trials.len());
        for (i, t) in trials.iter().enumerate() {
            if t.enroll_id.is_empty() || t.test_id.is_empty() {
                return Err(ProtocolError::MalformedLine(i + 1));
            }
            if !seen.insert((t.enroll_id.as_str(), t.test_id.as_str())) {
                return Err(ProtocolError::DuplicateTrial {
                    line: i + 1,
                    enroll: t.enroll_id.clone(),
                    test: t.test_id.clone(),
                });
            }
        }
        Ok(TrialSet { trials })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trial> {
        self.trials.iter()
    }

    /// Labels of every trial, `None` if any trial is unlabelled.
    pub fn labels(&self) -> Option<Vec<Label>> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Channel pairs of every trial, `None` if any trial lacks one.
    pub fn channel_pairs(&self) -> Option<Vec<ChannelPair>> {
        self.trials.iter().map(|t| t.channel_pair).collect()
    }

    /// Fills every trial's channel pair from `meta`.
    pub fn attach_meta(&mut self, meta: &MetaMap) -> Result<(), ProtocolError> {
        let pairs = self
            .trials
            .iter()
            .map(|t| channel_pair_of(t, meta))
            .collect::<Result<Vec<_>, _>>()?;
        for (t, p) in self.trials.iter_mut().zip(pairs) {
            t.channel_pair = Some(p);
        }
        Ok(())
    }

    /// Copies labels from `key`, matched by (enroll, test). Every trial
    /// here must be present in the key.
    pub fn attach_key(&mut self, key: &TrialSet) -> Result<(), ProtocolError> {
        let index: std::collections::HashMap<(&str, &str), Label> = key
            .iter()
            .filter_map(|t| t.label.map(|l| ((t.enroll_id.as_str(), t.test_id.as_str()), l)))
            .collect();
        let mut labels = Vec::with_capacity(self.trials.len());
        for (i, t) in self.trials.iter().enumerate() {
            match index.get(&(t.enroll_id.as_str(), t.test_id.as_str())) {
                Some(&l) => labels.push(l),
                None => return Err(ProtocolError::BadLabel(i + 1)),
            }
        }
        for (t, l) in self.trials.iter_mut().zip(labels) {
            t.label = Some(l);
        }
        Ok(())
    }

    /// Serializes in the trial-list (or key, when labelled) format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&t.enroll_id);
            out.push('\t');
            out.push_str(&t.test_id);
            if let Some(l) = t.label {
                out.push('\t');
                out.push_str(l.as_str());
            }
            out.push('\n');
        }
        out
    }
}

impl<'a> IntoIterator for &'a TrialSet {
    type Item = &'a Trial;
    type IntoIter = std::slice::Iter<'a, Trial>;

    fn into_iter(self) -> Self::IntoIter {
        self.trials.iter()
    }
}

/// Splits text into numbered lines. A single trailing LF is allowed; any
/// other empty line is reported as malformed.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let empty = body.is_empty();
    body.split('\n')
        .enumerate()
        .filter(move |_| !empty)
        .map(|(i, l)| (i + 1, l))
}

pub fn parse_segment_meta(text: &str) -> Result<MetaMap, ProtocolError> {
    let mut map = MetaMap::new();
    for (line_no, line) in numbered_lines(text) {
        let mut cols = line.split('\t');
        let (Some(id), Some(kind), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(ProtocolError::MalformedLine(line_no));
        };
        if id.is_empty() {
            return Err(ProtocolError::MalformedLine(line_no));
        }
        let source_type = kind.parse().map_err(|_| ProtocolError::UnknownSourceType(line_no))?;
        if map.contains_key(id) {
            return Err(ProtocolError::DuplicateSegment(id.to_string()));
        }
        map.insert(
            id.to_string(),
            SegmentMeta {
                segment_id: id.to_string(),
                source_type,
            },
        );
    }
    Ok(map)
}

/// Serializes metadata in id order.
pub fn meta_to_text(meta: &MetaMap) -> String {
    meta.values()
        .map(|m| format!("{}\t{}\n", m.segment_id, m.source_type))
        .collect()
}

/// Parses a trial list (`key_present = false`, two columns) or a key
/// (`key_present = true`, three columns). With `meta`, channel pairs are
/// resolved for every trial.
pub fn parse_trials(
    text: &str,
    key_present: bool,
    meta: Option<&MetaMap>,
) -> Result<TrialSet, ProtocolError> {
    let mut trials = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (line_no, line) in numbered_lines(text) {
        let cols: Vec<&str> = line.split('\t').collect();
        let (enroll, test) = match cols.as_slice() {
            [e, t] | [e, t, _] if !e.is_empty() && !t.is_empty() => (*e, *t),
            _ => return Err(ProtocolError::MalformedLine(line_no)),
        };
        let label = match (key_present, cols.get(2)) {
            (true, Some(l)) => Some(l.parse().map_err(|_| ProtocolError::BadLabel(line_no))?),
            (true, None) => return Err(ProtocolError::BadLabel(line_no)),
            (false, Some(_)) => return Err(ProtocolError::MalformedLine(line_no)),
            (false, None) => None,
        };
        if !seen.insert((enroll.to_string(), test.to_string())) {
            return Err(ProtocolError::DuplicateTrial {
                line: line_no,
                enroll: enroll.to_string(),
                test: test.to_string(),
            });
        }
        let mut trial = Trial::new(enroll, test);
        trial.label = label;
        if let Some(meta) = meta {
            trial.channel_pair = Some(channel_pair_of(&trial, meta)?);
        }
        trials.push(trial);
    }
    Ok(TrialSet { trials })
}

/// Parses a trial list or key, deciding from the first line's column count.
pub fn parse_trials_detect(text: &str, meta: Option<&MetaMap>) -> Result<TrialSet, ProtocolError> {
    let key_present = text
        .lines()
        .next()
        .map(|l| l.split('\t').count() == 3)
        .unwrap_or(false);
    parse_trials(text, key_present, meta)
}

pub fn channel_pair_of(trial: &Trial, meta: &MetaMap) -> Result<ChannelPair, ProtocolError> {
    let side = |id: &str| {
        meta.get(id)
            .map(|m| m.source_type)
            .ok_or_else(|| ProtocolError::MissingMeta(id.to_string()))
    };
    Ok(ChannelPair::new(side(&trial.enroll_id)?, side(&trial.test_id)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta(entries: &[(&str, SourceType)]) -> MetaMap {
        entries
            .iter()
            .map(|(id, st)| {
                (
                    id.to_string(),
                    SegmentMeta {
                        segment_id: id.to_string(),
                        source_type: *st,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn segment_meta_parses() {
        let m = parse_segment_meta("u1\ttel\nu2\tmic\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m["u1"].source_type, SourceType::Tel);
        assert_eq!(m["u2"].source_type, SourceType::Mic);
        assert!(parse_segment_meta("").unwrap().is_empty());
    }

    #[test]
    fn segment_meta_errors() {
        assert_eq!(parse_segment_meta("u1\tsat\n"), Err(ProtocolError::UnknownSourceType(1)));
        assert_eq!(parse_segment_meta("u1\ttel\nu2\n"), Err(ProtocolError::MalformedLine(2)));
        assert_eq!(parse_segment_meta("u1\ttel\n\nu2\tmic\n"), Err(ProtocolError::MalformedLine(2)));
        assert_eq!(
            parse_segment_meta("u1\ttel\nu1\tmic\n"),
            Err(ProtocolError::DuplicateSegment("u1".into()))
        );
    }

    #[test]
    fn key_line_with_meta() {
        let m = meta(&[("e1", SourceType::Tel), ("t1", SourceType::Mic)]);
        let ts = parse_trials("e1\tt1\ttarget\n", true, Some(&m)).unwrap();
        assert_eq!(ts.len(), 1);
        let t = &ts.trials()[0];
        assert_eq!(t.label, Some(Label::Target));
        assert_eq!(t.channel_pair, Some(ChannelPair::new(SourceType::Tel, SourceType::Mic)));
    }

    #[test]
    fn trial_errors() {
        assert!(matches!(
            parse_trials("e1\tt1\ttarget\ne1\tt1\ttarget\n", true, None),
            Err(ProtocolError::DuplicateTrial { line: 2, .. })
        ));
        assert_eq!(parse_trials("e1\tt1\n", true, None), Err(ProtocolError::BadLabel(1)));
        assert_eq!(parse_trials("e1\tt1\tmaybe\n", true, None), Err(ProtocolError::BadLabel(1)));
        assert_eq!(parse_trials("e1\n", false, None), Err(ProtocolError::MalformedLine(1)));
        assert_eq!(parse_trials("e1\tt1\ttarget\n", false, None), Err(ProtocolError::MalformedLine(1)));
        let m = meta(&[("e1", SourceType::Tel)]);
        assert_eq!(
            parse_trials("e1\tt1\n", false, Some(&m)),
            Err(ProtocolError::MissingMeta("t1".into()))
        );
    }

    #[test]
    fn channel_pairs_are_ordered() {
        let m = meta(&[("a", SourceType::Tel), ("b", SourceType::Mic), ("c", SourceType::Tel)]);
        assert_eq!(
            channel_pair_of(&Trial::new("a", "c"), &m).unwrap(),
            ChannelPair::new(SourceType::Tel, SourceType::Tel)
        );
        let tm = channel_pair_of(&Trial::new("a", "b"), &m).unwrap();
        let mt = channel_pair_of(&Trial::new("b", "a"), &m).unwrap();
        assert_eq!(tm.to_string(), "tel-mic");
        assert_eq!(mt.to_string(), "mic-tel");
        assert_ne!(tm, mt);
        assert_eq!(
            channel_pair_of(&Trial::new("a", "zz"), &m),
            Err(ProtocolError::MissingMeta("zz".into()))
        );
    }

    #[test]
    fn pair_names_parse() {
        for p in ChannelPair::ALL {
            assert_eq!(p.to_string().parse::<ChannelPair>(), Ok(p));
        }
        assert!("tel-sat".parse::<ChannelPair>().is_err());
    }

    #[test]
    fn attach_key_matches_by_pair() {
        let key = parse_trials("a\tb\ttarget\nc\td\tnontarget\n", true, None).unwrap();
        let mut ts = parse_trials("c\td\na\tb\n", false, None).unwrap();
        ts.attach_key(&key).unwrap();
        assert_eq!(ts.labels().unwrap(), vec![Label::Nontarget, Label::Target]);
        let mut missing = parse_trials("x\ty\n", false, None).unwrap();
        assert_eq!(missing.attach_key(&key), Err(ProtocolError::BadLabel(1)));
    }

    fn id() -> impl Strategy<Value = String> {
        "[a-z0-9_]{1,6}"
    }

    proptest! {
        #[test]
        fn trial_text_round_trips(
            rows in proptest::collection::vec((id(), id(), any::<Option<bool>>()), 0..30),
            keyed in any::<bool>(),
        ) {
            let mut seen = HashSet::new();
            let mut text = String::new();
            for (e, t, l) in rows {
                if !seen.insert((e.clone(), t.clone())) {
                    continue;
                }
                text.push_str(&format!("{e}\t{t}"));
                if keyed {
                    text.push_str(if l == Some(true) { "\ttarget" } else { "\tnontarget" });
                }
                text.push('\n');
            }
            let ts = parse_trials(&text, keyed, None).unwrap();
            prop_assert_eq!(ts.to_text(), text);
        }

        #[test]
        fn parse_is_total(text in "[a-z\t\n]{0,40}") {
            // Either a value or a positioned error, never a panic.
            let _ = parse_trials(&text, true, None);
            let _ = parse_trials(&text, false, None);
            let _ = parse_segment_meta(&text);
        }
    }
}
