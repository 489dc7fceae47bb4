//! Corpus-level BLEU, ROUGE-L and METEOR over token sequences.
//!
//! Corpus averages sum per-pair scores in sorted order, so every score is
//! independent of the order of the pairs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{invalid, Error, Result};

/// A token sequence with no empty tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    /// Builds a sequence, dropping empty tokens.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(
            tokens
                .into_iter()
                .map(Into::into)
                .filter(|t: &String| !t.is_empty())
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Built-in tokenizers. Text is NFC-normalized first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tokenizer {
    /// Split on Unicode whitespace.
    Whitespace,
    /// One token per Unicode scalar value, skipping whitespace.
    Character,
}

pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

pub fn tokenize(text: &str, scheme: Tokenizer) -> TokenSeq {
    let text = nfc(text);
    match scheme {
        Tokenizer::Whitespace => TokenSeq::new(text.split_whitespace()),
        Tokenizer::Character => TokenSeq::new(
            text.chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from),
        ),
    }
}

/// Hypothesis/reference pairs, one reference per hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pairs: Vec<(TokenSeq, TokenSeq)>,
}

impl Corpus {
    pub fn new(pairs: Vec<(TokenSeq, TokenSeq)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(TokenSeq, TokenSeq)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.into_iter().sum::<f64>() / n
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total hypothesis n-grams for one pair.
fn clipped(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(hyp, n);
    let ref_counts = ngram_counts(reference, n);
    let matched = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn check_order(max_n: usize) -> Result<()> {
    if (1..=4).contains(&max_n) {
        Ok(())
    } else {
        Err(invalid("max_n", alloc::format!("{max_n} is outside 1..=4")))
    }
}

fn brevity_penalty(ref_len: usize, hyp_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    }
}

/// Corpus BLEU with n-gram counts pooled across pairs and uniform weights.
/// Any zero pooled precision gives a score of zero.
pub fn bleu(corpus: &Corpus, max_n: usize) -> Result<f64> {
    check_order(max_n)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (hyp, reference) in &corpus.pairs {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let (m, t) = clipped(&hyp.0, &reference.0, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(matched[n] as f64 / total[n] as f64) / max_n as f64;
    }
    Ok(brevity_penalty(ref_len, hyp_len) * libm::exp(log_sum))
}

/// Sentence-level BLEU with add-one smoothing on orders two and above.
pub fn sentence_bleu(hyp: &TokenSeq, reference: &TokenSeq, max_n: usize) -> Result<f64> {
    check_order(max_n)?;
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = clipped(&hyp.0, &reference.0, n);
        let p = if n == 1 {
            if m == 0 {
                return Ok(0.0);
            }
            m as f64 / t as f64
        } else {
            (m + 1) as f64 / (t + 1) as f64
        };
        log_sum += libm::log(p) / max_n as f64;
    }
    Ok(brevity_penalty(reference.len(), hyp.len()) * libm::exp(log_sum))
}

/// Mean of [`sentence_bleu`] over the corpus.
pub fn mean_sentence_bleu(corpus: &Corpus, max_n: usize) -> Result<f64> {
    let scores = corpus
        .pairs
        .iter()
        .map(|(h, r)| sentence_bleu(h, r, max_n))
        .collect::<Result<Vec<_>>>()?;
    Ok(order_free_mean(scores))
}

/// Length of the longest common subsequence (two-row dynamic program).
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one pair; `beta` weights recall (1 gives F1).
pub fn rouge_l_pair(hyp: &TokenSeq, reference: &TokenSeq, beta: f64) -> f64 {
    let l = lcs_len(&hyp.0, &reference.0);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean per-pair ROUGE-L F1.
pub fn rouge_l(corpus: &Corpus) -> f64 {
    rouge_l_with_beta(corpus, 1.0)
}

pub fn rouge_l_with_beta(corpus: &Corpus, beta: f64) -> f64 {
    order_free_mean(
        corpus
            .pairs
            .iter()
            .map(|(h, r)| rouge_l_pair(h, r, beta))
            .collect(),
    )
}

/// METEOR parameters: `F = PR / (alpha P + (1 - alpha) R)`,
/// `penalty = gamma (chunks / matches)^beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Largest match count for which the minimum-chunk alignment is searched
    /// exhaustively; above it the greedy alignment is used.
    pub exhaustive_limit: usize,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
            exhaustive_limit: 10,
        }
    }
}

/// Exact-match unigram alignment: number of matches and chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Each hypothesis token, left to right, takes the leftmost unused
/// reference position holding the same token.
fn greedy_alignment(hyp: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut used = alloc::vec![false; reference.len()];
    hyp.iter()
        .map(|tok| {
            let j = (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok)?;
            used[j] = true;
            Some(j)
        })
        .collect()
}

fn count_chunks(links: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for link in links {
        match (*link, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *link;
    }
    chunks
}

struct ChunkSearch<'a> {
    hyp: &'a [String],
    reference: &'a [String],
    quota: BTreeMap<&'a str, usize>,
    remaining: BTreeMap<&'a str, usize>,
    used: Vec<bool>,
    best: usize,
}

impl ChunkSearch<'_> {
    /// Depth-first search over maximal alignments, pruned on chunk count.
    fn visit(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        if chunks >= self.best {
            return;
        }
        if i == self.hyp.len() {
            self.best = chunks;
            return;
        }
        let tok = self.hyp[i].as_str();
        let quota = self.quota.get(tok).copied().unwrap_or(0);
        let remaining = self.remaining.get(tok).copied().unwrap_or(0);
        *self.remaining.get_mut(tok).unwrap() -= 1;
        if quota > 0 {
            let mut candidates: Vec<usize> = (0..self.reference.len())
                .filter(|&j| !self.used[j] && self.reference[j] == tok)
                .collect();
            if let Some(p) = prev {
                if let Some(pos) = candidates.iter().position(|&j| j == p + 1) {
                    let j = candidates.remove(pos);
                    candidates.insert(0, j);
                }
            }
            for j in candidates {
                let extra = usize::from(prev != Some(j.wrapping_sub(1)) || j == 0);
                self.used[j] = true;
                *self.quota.get_mut(tok).unwrap() -= 1;
                self.visit(i + 1, Some(j), chunks + extra);
                *self.quota.get_mut(tok).unwrap() += 1;
                self.used[j] = false;
            }
        }
        // leaving this token unmatched must still allow the quota to be met
        if remaining > quota {
            self.visit(i + 1, None, chunks);
        }
        *self.remaining.get_mut(tok).unwrap() += 1;
    }
}

/// Exact-match alignment with the maximum number of matches. When that
/// number is at most `exhaustive_limit` the alignment with the fewest chunks
/// is found by search; otherwise the greedy left-to-right alignment is used.
pub fn align(hyp: &TokenSeq, reference: &TokenSeq, exhaustive_limit: usize) -> Alignment {
    let greedy = greedy_alignment(&hyp.0, &reference.0);
    let matches = greedy.iter().filter(|l| l.is_some()).count();
    let greedy_chunks = count_chunks(&greedy);
    if matches == 0 || matches > exhaustive_limit || greedy_chunks == 1 {
        return Alignment {
            matches,
            chunks: greedy_chunks,
        };
    }
    let mut hyp_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &hyp.0 {
        *hyp_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut ref_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &reference.0 {
        *ref_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let quota = hyp_counts
        .iter()
        .map(|(t, &c)| (*t, c.min(ref_counts.get(t).copied().unwrap_or(0))))
        .collect();
    let mut search = ChunkSearch {
        hyp: &hyp.0,
        reference: &reference.0,
        quota,
        remaining: hyp_counts,
        used: alloc::vec![false; reference.len()],
        best: greedy_chunks,
    };
    search.visit(0, None, 0);
    Alignment {
        matches,
        chunks: search.best,
    }
}

/// METEOR of one pair with exact unigram matching.
pub fn meteor_pair(hyp: &TokenSeq, reference: &TokenSeq, params: &MeteorParams) -> f64 {
    let Alignment { matches, chunks } = align(hyp, reference, params.exhaustive_limit);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = p * r / (params.alpha * p + (1.0 - params.alpha) * r);
    let penalty = params.gamma * libm::pow(chunks as f64 / m, params.beta);
    f_mean * (1.0 - penalty)
}

/// Mean per-pair METEOR with default parameters.
pub fn meteor(corpus: &Corpus) -> f64 {
    meteor_with(corpus, &MeteorParams::default())
}

pub fn meteor_with(corpus: &Corpus, params: &MeteorParams) -> f64 {
    order_free_mean(
        corpus
            .pairs
            .iter()
            .map(|(h, r)| meteor_pair(h, r, params))
            .collect(),
    )
}

/// All reported scores for a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge_l,
            self.meteor,
        ]
    }
}

pub fn score_report(corpus: &Corpus) -> MetricReport {
    MetricReport {
        bleu1: bleu(corpus, 1).expect("valid order"),
        bleu2: bleu(corpus, 2).expect("valid order"),
        bleu3: bleu(corpus, 3).expect("valid order"),
        bleu4: bleu(corpus, 4).expect("valid order"),
        rouge_l: rouge_l(corpus),
        meteor: meteor(corpus),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ws(s: &str) -> TokenSeq {
        tokenize(s, Tokenizer::Whitespace)
    }

    fn corpus(pairs: &[(&str, &str)]) -> Corpus {
        Corpus::new(pairs.iter().map(|(h, r)| (ws(h), ws(r))).collect()).unwrap()
    }

    #[test]
    fn tokenizers() {
        assert_eq!(ws("a b  c").tokens(), &["a", "b", "c"]);
        assert_eq!(tokenize("ab", Tokenizer::Character).tokens(), &["a", "b"]);
        assert!(ws("").is_empty());
        assert_eq!(
            tokenize("肺 野", Tokenizer::Character).tokens(),
            &["肺", "野"]
        );
        assert!(TokenSeq::new(["", "x"]).len() == 1);
    }

    #[test]
    fn nfc_normalizes_before_tokenizing() {
        // "e" + combining acute composes to a single scalar
        let decomposed = "e\u{301}";
        assert_eq!(
            tokenize(decomposed, Tokenizer::Character).tokens(),
            &["\u{e9}"]
        );
        // half-width katakana is not folded by NFC
        assert_eq!(tokenize("ｱ", Tokenizer::Character).tokens(), &["ｱ"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert_eq!(Corpus::new(vec![]), Err(Error::EmptyCorpus));
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&corpus(&[("a b c d", "a b c d")]), 4).unwrap(), 1.0);
        assert_eq!(bleu(&corpus(&[("a b", "c d")]), 1).unwrap(), 0.0);
        let b1 = bleu(&corpus(&[("the the the", "the cat")]), 1).unwrap();
        assert!((b1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(bleu(&corpus(&[("a", "a")]), 5).is_err());
        // hypothesis shorter than n has no 4-grams
        assert_eq!(bleu(&corpus(&[("a b", "a b")]), 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // c = 2, r = 4: p1 = 1, BP = exp(1 - 2)
        let b = bleu(&corpus(&[("a b", "a b c d")]), 1).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sentence_bleu_smoothing() {
        let s = sentence_bleu(&ws("a b"), &ws("a b"), 4).unwrap();
        // p1 = 1, p2 = 2/2, p3 = 1/1, p4 = 1/1 after add-one on empty orders
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(sentence_bleu(&ws("x"), &ws("y"), 2).unwrap(), 0.0);
    }

    #[test]
    fn lcs_small_cases() {
        let a: Vec<char> = "abcd".chars().collect();
        let b: Vec<char> = "acbd".chars().collect();
        assert_eq!(lcs_len(&a, &b), 3);
        assert_eq!(lcs_len::<char>(&[], &b), 0);
        assert_eq!(lcs_len(&a, &a), 4);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&corpus(&[("a b c", "a b c")])), 1.0);
        assert_eq!(rouge_l(&corpus(&[("a b", "c d")])), 0.0);
        assert!((rouge_l(&corpus(&[("a b c d", "a c b d")])) - 0.75).abs() < 1e-15);
        assert_eq!(rouge_l(&corpus(&[("", "a")])), 0.0);
    }

    #[test]
    fn rouge_beta_weights_recall() {
        // P = 1, R = 1/2
        let r = rouge_l_pair(&ws("a"), &ws("a b"), 2.0);
        assert!((r - 5.0 * 0.5 / (0.5 + 4.0)).abs() < 1e-15);
    }

    #[test]
    fn meteor_examples() {
        let id = meteor(&corpus(&[("a b c d", "a b c d")]));
        assert!((id - 0.9921875).abs() < 1e-15);
        assert_eq!(meteor(&corpus(&[("a b", "c d")])), 0.0);
        let axb = meteor(&corpus(&[("a x b", "a b")]));
        assert!((axb - 0.4761904761904762).abs() < 1e-15, "{axb}");
    }

    #[test]
    fn exhaustive_alignment_beats_greedy() {
        // greedy links the first "a" to ref 0, splitting "a b" into two chunks
        let hyp = ws("a x a b");
        let reference = ws("a b");
        assert_eq!(
            count_chunks(&greedy_alignment(hyp.tokens(), reference.tokens())),
            2
        );
        assert_eq!(
            align(&hyp, &reference, 10),
            Alignment {
                matches: 2,
                chunks: 1
            }
        );
        assert_eq!(
            align(&hyp, &reference, 1),
            Alignment {
                matches: 2,
                chunks: 2
            }
        );
    }

    #[test]
    fn repeated_tokens_align_in_one_chunk() {
        let s = ws("the the the the the the the the the the");
        assert_eq!(
            align(&s, &s, 10),
            Alignment {
                matches: 10,
                chunks: 1
            }
        );
    }

    #[test]
    fn report_identical_and_disjoint() {
        let same = score_report(&corpus(&[
            ("a b c d", "a b c d"),
            ("e f g h i", "e f g h i"),
        ]));
        assert_eq!(
            [same.bleu1, same.bleu2, same.bleu3, same.bleu4, same.rouge_l],
            [1.0; 5]
        );
        let disjoint = score_report(&corpus(&[("a b c d", "w x y z")]));
        assert_eq!(disjoint.values(), [0.0; 6]);
    }
}
