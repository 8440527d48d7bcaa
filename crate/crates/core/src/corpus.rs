//! Conversation data model, the line-delimited loader and the hashing featurizer.
//!
//! The interchange format is one JSON object per line:
//!
//! ```text
//! {"labels": ["neutral", "joy"], "neutral": "neutral"}
//! {"id": "d1", "utterances": [{"speaker": "A", "text": "hi there", "label": "joy"}]}
//! ```
//!
//! The header line is optional. Without it, the label set is the labels in
//! order of first appearance and no neutral class is declared. A missing
//! `speaker` field is replaced by alternating turns `A`/`B`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub tokens: Vec<String>,
    pub label: Option<usize>,
    pub feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    id: String,
    utterances: Vec<Utterance>,
}

impl Conversation {
    /// Builds a conversation, checking that it is non-empty and that the
    /// utterance indices run `0..N`.
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self> {
        let id = id.into();
        if utterances.is_empty() {
            return Err(Error::EmptyConversation(id));
        }
        for (pos, u) in utterances.iter().enumerate() {
            if u.index != pos {
                return Err(Error::invalid(format!(
                    "conversation `{id}`: utterance at position {pos} has index {}",
                    u.index
                )));
            }
        }
        Ok(Self { id, utterances })
    }

    /// Convenience constructor for unlabeled, featureless conversations.
    pub fn from_speakers<S: AsRef<str>>(id: impl Into<String>, speakers: &[S]) -> Result<Self> {
        let utterances = speakers
            .iter()
            .enumerate()
            .map(|(index, s)| Utterance {
                index,
                speaker: s.as_ref().to_string(),
                tokens: Vec::new(),
                label: None,
                feature: None,
            })
            .collect();
        Self::new(id, utterances)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.speaker.as_str()).collect()
    }

    /// Gold labels, failing on the first unlabeled utterance.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.utterances
            .iter()
            .map(|u| {
                u.label.ok_or_else(|| Error::Missing {
                    what: "label",
                    conversation: self.id.clone(),
                    utterance: u.index,
                })
            })
            .collect()
    }

    /// Feature vectors, failing on the first utterance without one.
    pub fn features(&self) -> Result<Vec<&[f64]>> {
        self.utterances
            .iter()
            .map(|u| {
                u.feature.as_deref().ok_or_else(|| Error::Missing {
                    what: "feature",
                    conversation: self.id.clone(),
                    utterance: u.index,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    conversations: Vec<Conversation>,
    label_set: Vec<String>,
    speaker_set: BTreeSet<String>,
    neutral_index: Option<usize>,
    d_feat: Option<usize>,
}

impl Corpus {
    /// Validates label indices and feature dimensions and collects the speaker set.
    pub fn new(
        conversations: Vec<Conversation>,
        label_set: Vec<String>,
        neutral_index: Option<usize>,
    ) -> Result<Self> {
        if let Some(n) = neutral_index {
            if n >= label_set.len() {
                return Err(Error::invalid(format!(
                    "neutral index {n} outside label set of size {}",
                    label_set.len()
                )));
            }
        }
        let mut speaker_set = BTreeSet::new();
        let mut d_feat = None;
        for conv in &conversations {
            for u in conv.utterances() {
                speaker_set.insert(u.speaker.clone());
                if let Some(label) = u.label {
                    if label >= label_set.len() {
                        return Err(Error::invalid(format!(
                            "conversation `{}` utterance {}: label index {label} outside label set",
                            conv.id, u.index
                        )));
                    }
                }
                if let Some(f) = &u.feature {
                    check_feature(f, &mut d_feat, &format!("conversation `{}`", conv.id))?;
                }
            }
        }
        Ok(Self {
            conversations,
            label_set,
            speaker_set,
            neutral_index,
            d_feat,
        })
    }

    pub fn conversations(&self) -> &[Conversation] {
        &self.conversations
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn n_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn speaker_set(&self) -> &BTreeSet<String> {
        &self.speaker_set
    }

    pub fn neutral_index(&self) -> Option<usize> {
        self.neutral_index
    }

    pub fn d_feat(&self) -> Option<usize> {
        self.d_feat
    }

    pub fn n_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    fn with_conversations(&self, conversations: Vec<Conversation>) -> Result<Self> {
        Self::new(conversations, self.label_set.clone(), self.neutral_index)
    }

    /// Holds out the last `n_val` conversations, in corpus order, for validation.
    pub fn split_tail(&self, n_val: usize) -> Result<(Corpus, Corpus)> {
        let n = self.conversations.len();
        if n_val == 0 || n_val >= n {
            return Err(Error::invalid(format!(
                "n_val must be in 1..{n}, got {n_val}"
            )));
        }
        let (train, val) = self.conversations.split_at(n - n_val);
        Ok((
            self.with_conversations(train.to_vec())?,
            self.with_conversations(val.to_vec())?,
        ))
    }

    /// Returns a copy with hashed features. Utterances that already carry a
    /// feature keep it unless `overwrite` is set.
    pub fn with_hashed_features(&self, d_feat: usize, salt: i64, overwrite: bool) -> Result<Corpus> {
        if !overwrite {
            if let Some(existing) = self.d_feat {
                if existing != d_feat {
                    return Err(Error::Dimension {
                        context: "existing features".into(),
                        expected: d_feat,
                        found: existing,
                    });
                }
            }
        }
        let mut conversations = self.conversations.clone();
        for conv in &mut conversations {
            for u in &mut conv.utterances {
                if overwrite || u.feature.is_none() {
                    let f = hash_featurize(&u.tokens, d_feat, salt).map_err(|_| Error::Missing {
                        what: "tokens",
                        conversation: conv.id.clone(),
                        utterance: u.index,
                    })?;
                    u.feature = Some(f);
                }
            }
        }
        self.with_conversations(conversations)
    }

    pub fn load(path: impl AsRef<Path>, expected_d_feat: Option<usize>) -> Result<Corpus> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, expected_d_feat)
    }

    /// Parses the line-delimited format. Errors carry 1-based line numbers.
    pub fn parse(text: &str, expected_d_feat: Option<usize>) -> Result<Corpus> {
        if expected_d_feat == Some(0) {
            return Err(Error::invalid("expected feature dimension must be positive"));
        }
        let mut header: Option<HeaderRecord> = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let is_header = value.get("labels").is_some() && value.get("utterances").is_none();
            if is_header {
                if header.is_some() || !records.is_empty() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "header must be the first record".into(),
                    });
                }
                header = Some(serde_json::from_value(value).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?);
            } else {
                let rec: ConversationRecord =
                    serde_json::from_value(value).map_err(|e| Error::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                records.push((line_no, rec));
            }
        }

        let declared = header.is_some();
        let (mut label_set, neutral) = match header {
            Some(h) => (h.labels, h.neutral),
            None => (Vec::new(), None),
        };
        let mut label_lookup: HashMap<String, usize> = label_set
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        if label_lookup.len() != label_set.len() {
            return Err(Error::Parse {
                line: 1,
                message: "duplicate label in header".into(),
            });
        }
        let neutral_index = match neutral {
            Some(n) => Some(*label_lookup.get(&n).ok_or(Error::UnknownLabel(n))?),
            None => None,
        };

        let mut d_feat = expected_d_feat;
        let mut conversations = Vec::with_capacity(records.len());
        for (line_no, rec) in records {
            if rec.utterances.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: Error::EmptyConversation(rec.id).to_string(),
                });
            }
            let mut utterances = Vec::with_capacity(rec.utterances.len());
            for (index, u) in rec.utterances.into_iter().enumerate() {
                let label = match u.label {
                    None => None,
                    Some(name) => match label_lookup.get(&name) {
                        Some(&i) => Some(i),
                        None if declared => {
                            return Err(Error::Parse {
                                line: line_no,
                                message: Error::UnknownLabel(name).to_string(),
                            })
                        }
                        None => {
                            let i = label_set.len();
                            label_set.push(name.clone());
                            label_lookup.insert(name, i);
                            Some(i)
                        }
                    },
                };
                if let Some(f) = &u.feature {
                    check_feature(f, &mut d_feat, &format!("line {line_no} utterance {index}"))
                        .map_err(|e| Error::Parse {
                            line: line_no,
                            message: e.to_string(),
                        })?;
                }
                let speaker = u
                    .speaker
                    .unwrap_or_else(|| if index % 2 == 0 { "A" } else { "B" }.to_string());
                utterances.push(Utterance {
                    index,
                    speaker,
                    tokens: u.text.as_deref().map(tokenize).unwrap_or_default(),
                    label,
                    feature: u.feature,
                });
            }
            conversations.push(Conversation::new(rec.id, utterances)?);
        }
        Corpus::new(conversations, label_set, neutral_index)
    }

    /// Serializes to the line-delimited format, always with a header line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = HeaderRecord {
            labels: self.label_set.clone(),
            neutral: self.neutral_index.map(|i| self.label_set[i].clone()),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for conv in &self.conversations {
            let rec = ConversationRecord {
                id: conv.id.clone(),
                utterances: conv
                    .utterances
                    .iter()
                    .map(|u| UtteranceRecord {
                        speaker: Some(u.speaker.clone()),
                        text: (!u.tokens.is_empty()).then(|| u.tokens.join(" ")),
                        label: u.label.map(|l| self.label_set[l].clone()),
                        feature: u.feature.clone(),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

fn check_feature(f: &[f64], d_feat: &mut Option<usize>, context: &str) -> Result<()> {
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    match *d_feat {
        Some(d) if d != f.len() => Err(Error::Dimension {
            context: context.to_string(),
            expected: d,
            found: f.len(),
        }),
        Some(_) => Ok(()),
        None if f.is_empty() => Err(Error::invalid(format!("{context}: empty feature vector"))),
        None => {
            *d_feat = Some(f.len());
            Ok(())
        }
    }
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Signed feature hashing. Each token lands in bucket
/// `fnv1a(salt ++ token) mod d_feat` with sign taken from the low bit of
/// `fnv1a(salt ++ 0xff ++ token)` (0 is positive); the bucket-count vector is
/// scaled by `1/sqrt(n_tokens)`. `salt` is hashed as 8 little-endian bytes.
pub fn hash_featurize<S: AsRef<str>>(tokens: &[S], d_feat: usize, salt: i64) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot featurize an empty token list"));
    }
    if d_feat == 0 {
        return Err(Error::invalid("feature dimension must be positive"));
    }
    let salt = salt.to_le_bytes();
    let mut v = vec![0.0; d_feat];
    for t in tokens {
        let t = t.as_ref().as_bytes();
        let mut h = FnvHasher::default();
        h.write(&salt);
        h.write(t);
        let bucket = (h.finish() % d_feat as u64) as usize;
        let mut s = FnvHasher::default();
        s.write(&salt);
        s.write(&[0xff]);
        s.write(t);
        v[bucket] += if s.finish() & 1 == 0 { 1.0 } else { -1.0 };
    }
    let scale = 1.0 / (tokens.len() as f64).sqrt();
    v.iter_mut().for_each(|x| *x *= scale);
    Ok(v)
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderRecord {
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neutral: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConversationRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    speaker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_CONVS: &str = r#"{"labels": ["neutral", "joy"], "neutral": "neutral"}
{"id": "c1", "utterances": [{"speaker": "A", "text": "Hello there", "label": "neutral"}, {"speaker": "B", "text": "yay", "label": "joy"}]}
{"id": "c2", "utterances": [{"speaker": "B", "text": "ok", "label": "joy"}]}
"#;

    #[test]
    fn minimal_record() {
        let c = Corpus::parse(r#"{"id": "x", "utterances": [{"speaker": "A"}]}"#, None).unwrap();
        assert_eq!(c.conversations().len(), 1);
        assert_eq!(c.conversations()[0].len(), 1);
        assert_eq!(c.d_feat(), None);
    }

    #[test]
    fn feature_dimension_mismatch_reports_line() {
        let text = "{\"id\": \"x\", \"utterances\": [{\"feature\": [1,2,3,4]}]}\n\
                    {\"id\": \"y\", \"utterances\": [{\"feature\": [1,2,3,4,5]}]}";
        match Corpus::parse(text, None) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("expected dimension 4"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Corpus::parse(text, Some(5)).is_err());
    }

    // Hand-written reading of TWO_CONVS, independent of the serde path.
    #[test]
    fn two_conversation_fixture_matches_hand_parse() {
        let c = Corpus::parse(TWO_CONVS, None).unwrap();
        let u = |index: usize, speaker: &str, tokens: &[&str], label: usize| Utterance {
            index,
            speaker: speaker.into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            label: Some(label),
            feature: None,
        };
        let expected = Corpus::new(
            vec![
                Conversation::new("c1", vec![u(0, "A", &["hello", "there"], 0), u(1, "B", &["yay"], 1)])
                    .unwrap(),
                Conversation::new("c2", vec![u(0, "B", &["ok"], 1)]).unwrap(),
            ],
            vec!["neutral".into(), "joy".into()],
            Some(0),
        )
        .unwrap();
        assert_eq!(c, expected);
        assert_eq!(c.label_set().len(), 2);
        assert_eq!(c.neutral_index(), Some(0));
    }

    #[test]
    fn unknown_label_and_empty_conversation() {
        let bad = "{\"labels\": [\"a\"]}\n{\"id\": \"x\", \"utterances\": [{\"label\": \"b\"}]}";
        assert!(matches!(Corpus::parse(bad, None), Err(Error::Parse { line: 2, .. })));
        let empty = "{\"id\": \"x\", \"utterances\": []}";
        assert!(matches!(Corpus::parse(empty, None), Err(Error::Parse { line: 1, .. })));
        let malformed = "{\"id\": \"x\", \"utterances\": [}";
        assert!(matches!(Corpus::parse(malformed, None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_speakers_alternate() {
        let c = Corpus::parse(
            r#"{"id": "dd", "utterances": [{"text": "a"}, {"text": "b"}, {"text": "c"}]}"#,
            None,
        )
        .unwrap();
        assert_eq!(c.conversations()[0].speakers(), vec!["A", "B", "A"]);
    }

    #[test]
    fn header_less_labels_in_first_appearance_order() {
        let c = Corpus::parse(
            r#"{"id": "x", "utterances": [{"label": "sad"}, {"label": "joy"}, {"label": "sad"}]}"#,
            None,
        )
        .unwrap();
        assert_eq!(c.label_set(), ["sad", "joy"]);
        assert_eq!(c.conversations()[0].labels().unwrap(), vec![0, 1, 0]);
        assert_eq!(c.neutral_index(), None);
    }

    #[test]
    fn hash_featurize_repeated_token() {
        for k in 1..6 {
            let tokens = vec!["same"; k];
            let v = hash_featurize(&tokens, 16, 3).unwrap();
            let nonzero: Vec<f64> = v.iter().copied().filter(|x| *x != 0.0).collect();
            assert_eq!(nonzero.len(), 1);
            assert!((nonzero[0].abs() - (k as f64).sqrt()).abs() < 1e-12);
        }
    }

    // Expected buckets computed by a standalone FNV-1a script:
    // "a" -> bucket 4, sign bit 1 (negative); "b" -> bucket 5, sign bit 0.
    #[test]
    fn hash_featurize_fixed_fixture() {
        let v = hash_featurize(&["a", "b"], 8, 0).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0, 0.0, -0.7071067811865475, 0.7071067811865475, 0.0, 0.0]);
    }

    #[test]
    fn hash_featurize_errors() {
        assert!(hash_featurize::<&str>(&[], 8, 0).is_err());
        assert!(hash_featurize(&["a"], 0, 0).is_err());
    }

    fn corpus_of(ids: &[&str]) -> Corpus {
        let convs = ids
            .iter()
            .map(|id| Conversation::from_speakers(*id, &["A", "B"]).unwrap())
            .collect();
        Corpus::new(convs, vec!["x".into()], None).unwrap()
    }

    #[test]
    fn split_tail_takes_suffix() {
        let c = corpus_of(&["a", "b", "c", "d", "e"]);
        let (train, val) = c.split_tail(2).unwrap();
        let ids = |c: &Corpus| c.conversations().iter().map(|c| c.id().to_string()).collect::<Vec<_>>();
        assert_eq!(ids(&train), ["a", "b", "c"]);
        assert_eq!(ids(&val), ["d", "e"]);
        assert!(c.split_tail(0).is_err());
        assert!(c.split_tail(5).is_err());
    }

    #[test]
    fn split_tail_holds_out_last_twenty() {
        let names: Vec<String> = (0..31).map(|i| format!("s{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let (train, val) = corpus_of(&refs).split_tail(20).unwrap();
        assert_eq!(train.conversations().len(), 11);
        assert_eq!(val.conversations().len(), 20);
        assert_eq!(val.conversations()[0].id(), "s11");
        assert_eq!(val.conversations()[19].id(), "s30");
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        let utt = (0usize..3, proptest::collection::vec("[a-z]{1,4}", 0..3), proptest::option::of(0usize..3));
        let conv = proptest::collection::vec(utt, 1..6);
        (proptest::collection::vec(conv, 1..5), proptest::option::of(0usize..3), any::<bool>()).prop_map(
            |(convs, neutral, with_features)| {
                let conversations = convs
                    .into_iter()
                    .enumerate()
                    .map(|(ci, us)| {
                        let utterances = us
                            .into_iter()
                            .enumerate()
                            .map(|(index, (s, tokens, label))| Utterance {
                                index,
                                speaker: format!("spk{s}"),
                                feature: with_features.then(|| vec![index as f64 * 0.1, -1.5e-3]),
                                tokens,
                                label,
                            })
                            .collect();
                        Conversation::new(format!("c{ci}"), utterances).unwrap()
                    })
                    .collect();
                Corpus::new(conversations, vec!["n".into(), "p".into(), "q".into()], neutral).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(c in arb_corpus()) {
            let text = c.to_jsonl().unwrap();
            let back = Corpus::parse(&text, None).unwrap();
            prop_assert_eq!(back, c);
        }

        #[test]
        fn hashing_is_pure(tokens in proptest::collection::vec("[a-z]{1,6}", 1..10), d in 1usize..64, salt in any::<i64>()) {
            let a = hash_featurize(&tokens, d, salt).unwrap();
            let b = hash_featurize(&tokens, d, salt).unwrap();
            prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn split_partitions(n in 2usize..30, k in 1usize..29) {
            prop_assume!(k < n);
            let names: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let c = corpus_of(&refs);
            let (train, val) = c.split_tail(k).unwrap();
            let mut joined: Vec<Conversation> = train.conversations().to_vec();
            joined.extend_from_slice(val.conversations());
            prop_assert_eq!(joined.as_slice(), c.conversations());
            prop_assert_eq!(val.conversations().len(), k);
        }
    }
}
