//! Word error rate, token-count similarity and correlation statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// NFC, lowercase, split on whitespace.
pub fn normalize_and_tokenize(text: &str) -> Vec<String> {
    let folded: String = text.nfc().collect::<String>().to_lowercase();
    folded.split_whitespace().map(str::to_string).collect()
}

/// Unit-cost Levenshtein distance over token sequences.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut curr = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        curr[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let substitute = prev[j] + usize::from(r != h);
            curr[j + 1] = substitute.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[hypothesis.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub edits: usize,
    pub ref_len: usize,
}

/// Corpus-level WER: total edits over total reference words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub total_ref_words: usize,
    pub total_edits: usize,
    pub wer: f64,
    pub per_utterance: Vec<UtteranceScore>,
}

pub fn wer(refs: &[(String, String)], hyps: &[(String, String)]) -> Result<WerReport> {
    let hyp_by_id: HashMap<&str, &str> = hyps
        .iter()
        .map(|(id, text)| (id.as_str(), text.as_str()))
        .collect();
    let mut per_utterance = Vec::with_capacity(refs.len());
    for (id, reference) in refs {
        let hyp = hyp_by_id
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no hypothesis for utterance `{id}`")))?;
        let r = normalize_and_tokenize(reference);
        let h = normalize_and_tokenize(hyp);
        per_utterance.push(UtteranceScore {
            id: id.clone(),
            edits: edit_distance(&r, &h),
            ref_len: r.len(),
        });
    }
    let total_ref_words: usize = per_utterance.iter().map(|u| u.ref_len).sum();
    let total_edits: usize = per_utterance.iter().map(|u| u.edits).sum();
    if total_ref_words == 0 {
        return Err(Error::InvalidArgument(
            "all references are empty after tokenization".into(),
        ));
    }
    Ok(WerReport {
        total_ref_words,
        total_edits,
        wer: total_edits as f64 / total_ref_words as f64,
        per_utterance,
    })
}

/// Merged-model WER against target-only WER; negative `delta_wer` means the
/// merge helped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub wer_target_only: f64,
    pub wer_merged: f64,
    pub delta_wer: f64,
}

impl ComparisonReport {
    pub fn new(wer_target_only: f64, wer_merged: f64) -> Self {
        ComparisonReport {
            wer_target_only,
            wer_merged,
            delta_wer: wer_merged - wer_target_only,
        }
    }
}

/// Token counts over a vocabulary shared with the vectors it is compared to.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCountVector {
    counts: BTreeMap<String, u64>,
    vocab_fingerprint: String,
}

impl TokenCountVector {
    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn get(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.counts.values().all(|&c| c == 0)
    }

    /// Every count multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        TokenCountVector {
            counts: self.counts.iter().map(|(t, c)| (t.clone(), c * factor)).collect(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        }
    }
}

/// Sorted union of tokens across corpora, fingerprinted so that vectors
/// built against different vocabularies are never compared.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: BTreeSet<String>,
    fingerprint: String,
}

impl Vocabulary {
    pub fn from_corpora<'a, I, C, S>(corpora: I) -> Self
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = &'a S>,
        S: AsRef<str> + 'a + ?Sized,
    {
        let tokens: BTreeSet<String> = corpora
            .into_iter()
            .flat_map(|c| c.into_iter().map(|t| t.as_ref().to_string()))
            .collect();
        let mut hasher = Sha256::new();
        for t in &tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        Vocabulary {
            tokens,
            fingerprint: hex::encode(hasher.finalize()),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn count<'a, S: AsRef<str> + 'a + ?Sized>(
        &self,
        tokens: impl IntoIterator<Item = &'a S>,
    ) -> Result<TokenCountVector> {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for t in tokens {
            let t = t.as_ref();
            if !self.tokens.contains(t) {
                return Err(Error::InvalidArgument(format!("token `{t}` is not in the vocabulary")));
            }
            *counts.entry(t.to_string()).or_default() += 1;
        }
        Ok(TokenCountVector {
            counts,
            vocab_fingerprint: self.fingerprint.clone(),
        })
    }
}

pub fn cosine_similarity(u: &TokenCountVector, v: &TokenCountVector) -> Result<f64> {
    if u.vocab_fingerprint != v.vocab_fingerprint {
        return Err(Error::InvalidArgument(
            "token count vectors were built over different vocabularies".into(),
        ));
    }
    if u.is_zero() || v.is_zero() {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let squared_norm = |w: &TokenCountVector| w.counts.values().map(|&c| (c as f64).powi(2)).sum::<f64>();
    let dot: f64 = u
        .counts
        .iter()
        .map(|(t, &c)| c as f64 * v.get(t) as f64)
        .sum();
    Ok((dot / (squared_norm(u) * squared_norm(v)).sqrt()).clamp(0.0, 1.0))
}

/// Correlation coefficient with its two-sided p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub coefficient: f64,
    pub p_value: f64,
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 pairs, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite sample".into()));
    }
    Ok(())
}

/// Two-sided p-value of `r` under the t approximation with `n − 2` degrees
/// of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(Correlation {
        coefficient: r,
        p_value: correlation_p_value(r, xs.len()),
    })
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn tokenizes() {
        assert_eq!(normalize_and_tokenize("  The   cat "), vec!["the", "cat"]);
        assert!(normalize_and_tokenize("").is_empty());
        assert_eq!(
            normalize_and_tokenize("e\u{301}"),
            normalize_and_tokenize("\u{e9}")
        );
        assert_eq!(normalize_and_tokenize("e\u{301}").len(), 1);
    }

    #[test]
    fn wer_examples() {
        let r = wer(&pairs(&[("1", "a b c")]), &pairs(&[("1", "a b c")])).unwrap();
        assert_eq!(r.wer, 0.0);

        let r = wer(&pairs(&[("1", "the cat sat")]), &pairs(&[("1", "the cat")])).unwrap();
        assert_eq!((r.total_edits, r.total_ref_words), (1, 3));
        assert!((r.wer - 1.0 / 3.0).abs() < 1e-15);

        let r = wer(&pairs(&[("1", "a")]), &pairs(&[("1", "b c")])).unwrap();
        assert_eq!(r.wer, 2.0);
    }

    #[test]
    fn corpus_wer_is_not_mean_of_utterance_wer() {
        // 1/1 and 0/9: corpus 1/10, mean of ratios 1/2
        let refs = pairs(&[("a", "x"), ("b", "one two three four five six seven eight nine")]);
        let hyps = pairs(&[("a", "y"), ("b", "one two three four five six seven eight nine")]);
        let r = wer(&refs, &hyps).unwrap();
        assert!((r.wer - 0.1).abs() < 1e-15);
        let mean: f64 = r
            .per_utterance
            .iter()
            .map(|u| u.edits as f64 / u.ref_len as f64)
            .sum::<f64>()
            / 2.0;
        assert!((mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wer_errors() {
        assert!(wer(&pairs(&[("1", "a")]), &pairs(&[("2", "a")])).is_err());
        assert!(wer(&pairs(&[("1", "   ")]), &pairs(&[("1", "a")])).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = ["a", "b"];
        let b = ["a"];
        let c = ["c"];
        let vocab = Vocabulary::from_corpora([&a[..], &b[..], &c[..]]);
        let u = vocab.count(a.iter().copied()).unwrap();
        let v = vocab.count(b.iter().copied()).unwrap();
        let w = vocab.count(c.iter().copied()).unwrap();
        assert!((cosine_similarity(&u, &v).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine_similarity(&u, &u).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&u, &w).unwrap(), 0.0);
        let scaled = cosine_similarity(&u.scaled(7), &v).unwrap();
        assert!((scaled - cosine_similarity(&u, &v).unwrap()).abs() < 1e-12);

        let other = Vocabulary::from_corpora([&a[..]]);
        let foreign = other.count(a.iter().copied()).unwrap();
        assert!(cosine_similarity(&u, &foreign).is_err());
        let empty = vocab.count(std::iter::empty::<&str>()).unwrap();
        assert!(cosine_similarity(&u, &empty).is_err());
        assert!(vocab.count(["zzz"].iter().copied()).is_err());
    }

    #[test]
    fn pearson_hand_expanded() {
        // means 2.5, 2.75; Σdxdy = 5.5, Σdx² = 5, Σdy² = 8.75
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0]).unwrap();
        let expected = 5.5 / (5.0f64 * 8.75).sqrt();
        assert!((r.coefficient - expected).abs() < 1e-12);
        // scipy.stats.pearsonr on the same data
        assert!((r.p_value - 0.1684781593797).abs() < 1e-9);
    }

    #[test]
    fn pearson_perfect_and_errors() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert_eq!(pearson(&xs, &xs).unwrap().coefficient, 1.0);
        assert_eq!(pearson(&xs, &xs).unwrap().p_value, 0.0);
        assert_eq!(pearson(&xs, &neg).unwrap().coefficient, -1.0);
        assert!(pearson(&xs, &[1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(pearson(&xs, &xs[..3]).is_err());
        assert!(pearson(&xs[..2], &xs[..2]).is_err());
    }

    #[test]
    fn spearman_examples() {
        let r = spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap();
        assert!((r.coefficient + 0.5).abs() < 1e-12);
        let xs = [0.1, 0.5, 0.7, 2.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| x.exp()).collect();
        assert_eq!(spearman(&xs, &ys).unwrap().coefficient, 1.0);
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert_eq!(spearman(&xs, &down).unwrap().coefficient, -1.0);
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn p_value_matches_reference_value() {
        // 2 * scipy.stats.t.sf(t, 22) with t = 0.52 * sqrt(22 / (1 - 0.52^2))
        let p = correlation_p_value(0.52, 24);
        assert!((p - 0.009197719807264294).abs() < 1e-9, "{p}");
    }
}
