use std::collections::HashMap;

use crate::text::tokenize;

fn counts<'a>(tokens: impl IntoIterator<Item = &'a [String]>) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    if tokens.len() < n {
        return HashMap::new();
    }
    counts(tokens.windows(n))
}

fn clipped_overlap(hyp: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Bag-of-words F1 after the shared tokenizer, overlap clipped by multiplicity.
pub fn word_f1(hypothesis: &str, reference: &str) -> f64 {
    let h = tokenize(hypothesis);
    let r = tokenize(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let common = clipped_overlap(&ngrams(&h, 1), &ngrams(&r, 1));
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / h.len() as f64;
    let rec = common as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Per-order clipped n-gram counts behind a BLEU score.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuParts {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuParts {
    pub fn new(hypothesis: &[String], reference: &[String]) -> Self {
        let mut parts = BleuParts {
            matches: [0; 4],
            totals: [0; 4],
            hyp_len: hypothesis.len(),
            ref_len: reference.len(),
        };
        for n in 1..=4 {
            parts.matches[n - 1] = clipped_overlap(&ngrams(hypothesis, n), &ngrams(reference, n));
            parts.totals[n - 1] = hypothesis.len().saturating_sub(n - 1);
        }
        parts
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Precision per order; bigram and higher orders with no match use
    /// add-one counts.
    pub fn precisions(&self) -> [f64; 4] {
        let mut p = [0.0; 4];
        for k in 0..4 {
            p[k] = if self.matches[k] > 0 {
                self.matches[k] as f64 / self.totals[k] as f64
            } else {
                1.0 / (self.totals[k] + 1) as f64
            };
        }
        p
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.ref_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let log_mean = self.precisions().iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        self.brevity_penalty() * log_mean.exp()
    }
}

/// Cumulative 4-gram BLEU with uniform weights.
pub fn bleu4(hypothesis: &str, reference: &str) -> f64 {
    BleuParts::new(&tokenize(hypothesis), &tokenize(reference)).score()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f1_cases() {
        assert_eq!(word_f1("I like dogs.", "i like dogs ."), 1.0);
        assert_eq!(word_f1("red green", "blue"), 0.0);
        assert!((word_f1("i like dogs", "i like cats") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(word_f1("", "x"), 0.0);
        // "the the the" vs "the": one clipped match.
        assert!((word_f1("the the the", "the") - 2.0 * (1.0 / 3.0) / (1.0 / 3.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bleu_cases() {
        let ten = "a b c d e f g h i j";
        assert!((bleu4(ten, ten) - 1.0).abs() < 1e-12);
        assert_eq!(bleu4("x y z w", "a b c d"), 0.0);
        assert!(bleu4("a x y z", "a b c d") > 0.0);
        let bp = (1.0f64 - 5.0 / 4.0).exp();
        assert!((bleu4("a b c d", "a b c d e") - bp).abs() < 1e-12);
        assert!((bleu4("a b c d", "a b c d e") - 0.7788).abs() < 1e-4);
        assert_eq!(bleu4("", "a b"), 0.0);
    }

    proptest! {
        #[test]
        fn f1_symmetric(a in "[a-d ]{0,12}", b in "[a-d ]{0,12}") {
            prop_assert!((word_f1(&a, &b) - word_f1(&b, &a)).abs() < 1e-12);
            let f = word_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn bleu_bounded(a in "[a-c ]{0,16}", b in "[a-c ]{1,16}") {
            let s = bleu4(&a, &b);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        }
    }
}
