//! Classification metrics and the emotional-shift split.
//!
//! Zero-denominator precision, recall and F1 are 0.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::{Error, Result};

fn check_pair(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Dimension {
            context: "preds vs golds".into(),
            expected: golds.len(),
            found: preds.len(),
        });
    }
    if golds.is_empty() {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    if let Some(&bad) = preds.iter().chain(golds).find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!("class index {bad} out of range for {n_classes} classes")));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `counts[gold][pred]`.
pub fn confusion_matrix(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_pair(preds, golds, n_classes)?;
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        m[g][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn per_class(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Vec<ClassScores>> {
    let m = confusion_matrix(preds, golds, n_classes)?;
    Ok((0..n_classes)
        .map(|c| {
            let tp = m[c][c];
            let support: usize = m[c].iter().sum();
            let predicted: usize = m.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassScores {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<f64> {
    let total = golds.len() as f64;
    Ok(per_class(preds, golds, n_classes)?
        .iter()
        .map(|c| c.support as f64 / total * c.f1)
        .sum())
}

/// Micro F1 over every class except `excluded`.
pub fn micro_f1_excluding(preds: &[usize], golds: &[usize], excluded: usize) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Dimension {
            context: "preds vs golds".into(),
            expected: golds.len(),
            found: preds.len(),
        });
    }
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|&(&p, &g)| p == g && p != excluded)
        .count();
    let predicted = preds.iter().filter(|&&p| p != excluded).count();
    let gold = golds.iter().filter(|&&g| g != excluded).count();
    Ok(harmonic(ratio(correct, predicted), ratio(correct, gold)))
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() || golds.is_empty() {
        return Err(Error::invalid("accuracy needs equal, non-empty preds and golds"));
    }
    Ok(ratio(preds.iter().zip(golds).filter(|(p, g)| p == g).count(), golds.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftGroup {
    Shift,
    NoShift,
    /// No earlier utterance by the same speaker.
    Excluded,
}

/// Group of every utterance of one conversation, from speakers and gold labels.
pub fn shift_groups<S: PartialEq>(speakers: &[S], golds: &[usize]) -> Result<Vec<ShiftGroup>> {
    if speakers.len() != golds.len() {
        return Err(Error::Dimension {
            context: "shift split speakers vs golds".into(),
            expected: speakers.len(),
            found: golds.len(),
        });
    }
    Ok((0..speakers.len())
        .map(|i| match (0..i).rev().find(|&j| speakers[j] == speakers[i]) {
            None => ShiftGroup::Excluded,
            Some(j) if golds[j] != golds[i] => ShiftGroup::Shift,
            Some(_) => ShiftGroup::NoShift,
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub n_shift: usize,
    pub acc_shift: f64,
    pub n_noshift: usize,
    pub acc_noshift: f64,
    pub n_excluded: usize,
}

/// Accuracy inside the shift and no-shift groups. `preds[c]` holds the
/// predictions of conversation `c`.
pub fn shift_split(corpus: &Corpus, preds: &[Vec<usize>]) -> Result<ShiftReport> {
    let convs = corpus.conversations();
    if convs.len() != preds.len() {
        return Err(Error::Dimension {
            context: "shift split conversations".into(),
            expected: convs.len(),
            found: preds.len(),
        });
    }
    let mut counts = [[0usize; 2]; 3];
    for (conv, p) in convs.iter().zip(preds) {
        let golds = conv.labels()?;
        if p.len() != golds.len() {
            return Err(Error::Dimension {
                context: format!("shift split predictions of {}", conv.id()),
                expected: golds.len(),
                found: p.len(),
            });
        }
        for (i, g) in shift_groups(&conv.speakers(), &golds)?.into_iter().enumerate() {
            let slot = &mut counts[g as usize];
            slot[0] += 1;
            slot[1] += usize::from(p[i] == golds[i]);
        }
    }
    let [shift, noshift, excluded] = counts;
    Ok(ShiftReport {
        n_shift: shift[0],
        acc_shift: ratio(shift[1], shift[0]),
        n_noshift: noshift[0],
        acc_noshift: ratio(noshift[1], noshift[0]),
        n_excluded: excluded[0],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub per_class: Vec<ClassScores>,
    pub weighted_f1: f64,
    pub micro_f1_excl: Option<f64>,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub shift: ShiftReport,
}

impl EvalReport {
    /// Builds the full report for per-conversation predictions.
    pub fn compute(corpus: &Corpus, preds: &[Vec<usize>]) -> Result<Self> {
        let golds: Vec<usize> = corpus
            .conversations()
            .iter()
            .map(|c| c.labels())
            .collect::<Result<Vec<_>>>()?
            .concat();
        let flat = preds.concat();
        let n = corpus.n_classes();
        Ok(Self {
            labels: corpus.label_set().to_vec(),
            per_class: per_class(&flat, &golds, n)?,
            weighted_f1: weighted_f1(&flat, &golds, n)?,
            micro_f1_excl: corpus
                .neutral_index()
                .map(|e| micro_f1_excluding(&flat, &golds, e))
                .transpose()?,
            accuracy: accuracy(&flat, &golds)?,
            confusion: confusion_matrix(&flat, &golds, n)?,
            shift: shift_split(corpus, preds)?,
        })
    }

    /// Micro-F1 excluding neutral when a neutral class exists, otherwise weighted F1.
    pub fn headline(&self) -> f64 {
        self.micro_f1_excl.unwrap_or(self.weighted_f1)
    }

    pub fn headline_name(&self) -> &'static str {
        if self.micro_f1_excl.is_some() {
            "micro-F1 (excl. neutral)"
        } else {
            "weighted-F1"
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support")?;
        for (name, c) in self.labels.iter().zip(&self.per_class) {
            writeln!(
                f,
                "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                name, c.precision, c.recall, c.f1, c.support
            )?;
        }
        writeln!(f)?;
        writeln!(f, "accuracy                  {:.4}", self.accuracy)?;
        writeln!(f, "weighted-F1               {:.4}", self.weighted_f1)?;
        if let Some(m) = self.micro_f1_excl {
            writeln!(f, "micro-F1 (excl. neutral)  {m:.4}")?;
        }
        writeln!(
            f,
            "shift accuracy            {:.4} (n={})",
            self.shift.acc_shift, self.shift.n_shift
        )?;
        write!(
            f,
            "no-shift accuracy         {:.4} (n={})",
            self.shift.acc_noshift, self.shift.n_noshift
        )
    }
}
