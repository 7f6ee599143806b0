//! Corpus BLEU-4, ROUGE-L and CIDEr-D over tokenized candidates and references.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_synth::tokenize;
use crate::error::{Error, Result};

/// Separator between references in the second column of a metrics file.
pub const REFERENCE_SEPARATOR: &str = " ||| ";

pub const ROUGE_BETA_SQ: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;

type Ngram = Vec<String>;

/// One candidate with its references, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalEntry {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalEntry {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Self {
        EvalEntry {
            candidate,
            references,
        }
    }

    /// Tokenizes raw strings with the training tokenizer.
    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Self {
        EvalEntry {
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r.as_ref())).collect(),
        }
    }
}

pub type EvalCorpus = [EvalEntry];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

fn check_corpus(corpus: &EvalCorpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::contract("evaluation corpus is empty"));
    }
    if let Some(i) = corpus.iter().position(|e| e.references.is_empty()) {
        return Err(Error::contract(format!(
            "corpus entry {i} has no reference"
        )));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Intermediate quantities of corpus BLEU-4.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuParts {
    /// Clipped matches per order 1..=4.
    pub matches: [usize; 4],
    /// Candidate n-grams per order 1..=4.
    pub totals: [usize; 4],
    pub candidate_len: usize,
    /// Sum of closest reference lengths (ties go to the shorter reference).
    pub reference_len: usize,
    pub brevity_penalty: f64,
    pub score: f64,
}

pub fn bleu4_parts(corpus: &EvalCorpus) -> Result<BleuParts> {
    check_corpus(corpus)?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for e in corpus {
        let cl = e.candidate.len();
        c += cl;
        r += e
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&rl| (rl.abs_diff(cl), rl))
            .unwrap_or(0);
        for n in 1..=4 {
            let cand = ngram_counts(&e.candidate, n);
            let mut max_ref: BTreeMap<&Ngram, usize> = BTreeMap::new();
            let refs: Vec<_> = e.references.iter().map(|t| ngram_counts(t, n)).collect();
            for counts in &refs {
                for (g, &k) in counts {
                    let slot = max_ref.entry(g).or_insert(0);
                    *slot = (*slot).max(k);
                }
            }
            for (g, &k) in &cand {
                matches[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if matches.contains(&0) {
        0.0
    } else {
        let log_p: f64 = (0..4)
            .map(|i| (matches[i] as f64 / totals[i] as f64).ln())
            .sum::<f64>()
            / 4.0;
        100.0 * brevity_penalty * log_p.exp()
    };
    Ok(BleuParts {
        matches,
        totals,
        candidate_len: c,
        reference_len: r,
        brevity_penalty,
        score,
    })
}

/// Corpus-level BLEU-4 on a 0-100 scale, without smoothing.
pub fn bleu4(corpus: &EvalCorpus) -> Result<f64> {
    Ok(bleu4_parts(corpus)?.score)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one candidate against one reference, on a 0-1 scale.
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p)
}

/// Mean over entries of the best per-reference LCS F-measure, 0-100 scale.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    check_corpus(corpus)?;
    let total: f64 = corpus
        .iter()
        .map(|e| {
            e.references
                .iter()
                .map(|r| rouge_l_pair(&e.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(100.0 * total / corpus.len() as f64)
}

struct TfIdf {
    vecs: [BTreeMap<Ngram, f64>; 4],
    norms: [f64; 4],
    len: usize,
}

fn tfidf(tokens: &[String], df: &BTreeMap<Ngram, usize>, log_n: f64) -> TfIdf {
    let mut vecs: [BTreeMap<Ngram, f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    for n in 1..=4 {
        for (g, k) in ngram_counts(tokens, n) {
            let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
            let w = k as f64 * (log_n - d.ln());
            norms[n - 1] += w * w;
            vecs[n - 1].insert(g, w);
        }
        norms[n - 1] = norms[n - 1].sqrt();
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

#[allow(clippy::needless_range_loop)]
fn cider_sim(hyp: &TfIdf, reference: &TfIdf) -> [f64; 4] {
    let delta = hyp.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; 4];
    for n in 0..4 {
        let mut v = 0.0;
        for (g, &h) in &hyp.vecs[n] {
            if let Some(&r) = reference.vecs[n].get(g) {
                v += h.min(r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            v /= hyp.norms[n] * reference.norms[n];
        }
        out[n] = v * penalty;
    }
    out
}

/// Per-entry CIDEr-D scores; document frequencies come from the references.
pub fn cider_per_entry(corpus: &EvalCorpus) -> Result<Vec<f64>> {
    check_corpus(corpus)?;
    if corpus.len() < 2 {
        return Err(Error::DegenerateIdf(
            "CIDEr needs at least two entries to estimate document frequency; \
             score the pooled validation corpus instead"
                .into(),
        ));
    }
    let mut df: BTreeMap<Ngram, usize> = BTreeMap::new();
    for e in corpus {
        let mut seen: BTreeSet<Ngram> = BTreeSet::new();
        for r in &e.references {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    Ok(corpus
        .iter()
        .map(|e| {
            let hyp = tfidf(&e.candidate, &df, log_n);
            let mut sum = [0.0; 4];
            for r in &e.references {
                let s = cider_sim(&hyp, &tfidf(r, &df, log_n));
                for n in 0..4 {
                    sum[n] += s[n];
                }
            }
            let mean_n = sum.iter().sum::<f64>() / 4.0;
            10.0 * mean_n / e.references.len() as f64
        })
        .collect())
}

/// Corpus CIDEr-D: mean of the per-entry scores.
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    let per = cider_per_entry(corpus)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn score_all(corpus: &EvalCorpus) -> Result<Scores> {
    Ok(Scores {
        bleu4: bleu4(corpus)?,
        rouge_l: rouge_l(corpus)?,
        cider: cider(corpus)?,
    })
}

/// Parses `candidate<TAB>ref1 ||| ref2 ...` lines. Blank lines are skipped.
pub fn parse_tsv(text: &str) -> Result<Vec<EvalEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (cand, refs) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {}: expected a tab", i + 1)))?;
        let refs: Vec<&str> = refs.split(REFERENCE_SEPARATOR).collect();
        out.push(EvalEntry::from_text(cand, &refs));
    }
    Ok(out)
}

pub fn read_tsv(path: &Path) -> Result<Vec<EvalEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(c: &str, r: &[&str]) -> EvalEntry {
        EvalEntry::from_text(c, r)
    }

    #[test]
    fn bleu_self_match_and_zero() {
        let c = [e("the red cup is here", &["the red cup is here"])];
        assert!((bleu4(&c).unwrap() - 100.0).abs() < 1e-9);
        let c = [e("a b c d", &["a b c e"])];
        assert_eq!(bleu4(&c).unwrap(), 0.0);
        let c = [e("", &["a b"])];
        assert_eq!(bleu4(&c).unwrap(), 0.0);
    }

    #[test]
    fn closest_reference_prefers_shorter_on_tie() {
        let p = bleu4_parts(&[e("a b c", &["a b", "a b c d"])]).unwrap();
        assert_eq!(p.reference_len, 2);
    }

    #[test]
    fn rouge_pair_by_formula() {
        let f = rouge_l_pair(&tokenize("a b c d"), &tokenize("a c d e"));
        let (p, r) = (0.75, 0.75);
        assert!((f - 2.2 * p * r / (r + 1.2 * p)).abs() < 1e-12);
        assert_eq!(rouge_l(&[e("x y", &["z w"])]).unwrap(), 0.0);
    }

    #[test]
    fn cider_single_entry_is_degenerate() {
        assert!(matches!(
            cider(&[e("a", &["a"])]),
            Err(Error::DegenerateIdf(_))
        ));
    }

    #[test]
    fn cider_self_match_unique_profiles_is_ten() {
        let c = [
            e("red wool hat small", &["red wool hat small"]),
            e("blue steel pan large", &["blue steel pan large"]),
        ];
        assert!((cider(&c).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn empty_corpus_is_contract_error() {
        assert!(bleu4(&[]).is_err());
        assert!(rouge_l(&[e("a", &[])]).is_err());
    }

    #[test]
    fn tsv_parsing() {
        let v = parse_tsv("Red Cup!\tred cup ||| a red cup\n\nx\ty\n").unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].candidate, ["red", "cup"]);
        assert_eq!(v[0].references.len(), 2);
        assert!(parse_tsv("no tab here").is_err());
    }
}
