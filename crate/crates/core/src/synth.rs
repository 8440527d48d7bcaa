//! Synthetic dialogs whose labels need same-speaker context.
//!
//! Every utterance carries a bit token (`bit0`/`bit1`) and one filler word.
//! Its label is its own bit XOR the bit of the nearest earlier utterance by
//! the same speaker; a speaker's first turn is labeled with its own bit.
//! A classifier that sees one utterance at a time can only get first turns
//! and half of the rest right.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{hash_featurize, Conversation, Corpus, Utterance};
use crate::{Error, Result};

pub const BIT_TOKENS: [&str; 2] = ["bit0", "bit1"];
pub const LABELS: [&str; 2] = ["even", "odd"];

const FILLER: [&str; 24] = [
    "well", "so", "okay", "right", "hmm", "yeah", "maybe", "look", "listen", "honestly", "anyway",
    "sure", "really", "fine", "wait", "now", "then", "oh", "alright", "see", "hey", "yes", "no", "um",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_dialogs: usize,
    pub length: usize,
    pub n_speakers: usize,
    pub d_feat: usize,
    pub salt: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_dialogs: 2000,
            length: 8,
            n_speakers: 2,
            d_feat: 32,
            salt: 0,
            seed: 0,
        }
    }
}

fn bucket(token: &str, d_feat: usize, salt: i64) -> Result<usize> {
    let f = hash_featurize(&[token], d_feat, salt)?;
    Ok(f.iter().position(|&v| v != 0.0).unwrap_or(0))
}

/// Filler words whose hash bucket differs from both bit tokens, so the bit
/// is never cancelled in the hashed feature.
pub fn filler_vocabulary(d_feat: usize, salt: i64) -> Result<Vec<&'static str>> {
    let b0 = bucket(BIT_TOKENS[0], d_feat, salt)?;
    let b1 = bucket(BIT_TOKENS[1], d_feat, salt)?;
    if b0 == b1 {
        return Err(Error::invalid(format!(
            "bit tokens share a hash bucket at d_feat={d_feat}, salt={salt}"
        )));
    }
    let mut vocab = Vec::new();
    for w in FILLER {
        let b = bucket(w, d_feat, salt)?;
        if b != b0 && b != b1 {
            vocab.push(w);
        }
    }
    if vocab.is_empty() {
        return Err(Error::invalid("no filler word avoids the bit buckets"));
    }
    Ok(vocab)
}

/// XOR labels for one dialog.
pub fn xor_labels<S: PartialEq>(speakers: &[S], bits: &[usize]) -> Vec<usize> {
    (0..speakers.len())
        .map(|i| {
            let prev = (0..i).rev().find(|&j| speakers[j] == speakers[i]);
            bits[i] ^ prev.map_or(0, |j| bits[j])
        })
        .collect()
}

/// Generates the corpus with hashed features attached.
pub fn xor_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    if cfg.n_dialogs == 0 || cfg.length == 0 || cfg.n_speakers == 0 {
        return Err(Error::invalid("synthetic corpus sizes must be positive"));
    }
    let vocab = filler_vocabulary(cfg.d_feat, cfg.salt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = (0..cfg.n_speakers)
        .map(|s| char::from_u32('A' as u32 + s as u32).map_or(format!("S{s}"), String::from))
        .collect();
    let mut conversations = Vec::with_capacity(cfg.n_dialogs);
    for d in 0..cfg.n_dialogs {
        let speakers: Vec<usize> = (0..cfg.length).map(|_| rng.gen_range(0..cfg.n_speakers)).collect();
        let bits: Vec<usize> = (0..cfg.length).map(|_| rng.gen_range(0..2)).collect();
        let labels = xor_labels(&speakers, &bits);
        let utterances = (0..cfg.length)
            .map(|i| {
                let tokens = vec![
                    BIT_TOKENS[bits[i]].to_string(),
                    vocab[rng.gen_range(0..vocab.len())].to_string(),
                ];
                let feature = hash_featurize(&tokens, cfg.d_feat, cfg.salt)?;
                Ok(Utterance {
                    index: i,
                    speaker: names[speakers[i]].clone(),
                    tokens,
                    label: Some(labels[i]),
                    feature: Some(feature),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        conversations.push(Conversation::new(format!("xor-{d:05}"), utterances)?);
    }
    Corpus::new(conversations, LABELS.iter().map(|s| s.to_string()).collect(), None)
}

/// Splits a corpus into consecutive train/val/test blocks.
pub fn split3(corpus: &Corpus, n_train: usize, n_val: usize) -> Result<(Corpus, Corpus, Corpus)> {
    let n = corpus.conversations().len();
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::invalid(format!(
            "cannot split {n} conversations into {n_train} train, {n_val} val and a non-empty test set"
        )));
    }
    let (rest, test) = corpus.split_tail(n - n_train - n_val)?;
    let (train, val) = rest.split_tail(n_val)?;
    Ok((train, val, test))
}
