use crate::error::{Error, Result};
use crate::transmitter::argmax_stable;

/// 1 when `gold` holds the highest score, earliest index winning ties.
pub fn hits_at_1(scores: &[f64], gold: usize) -> Result<u8> {
    if gold >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "gold index {gold} out of range for {} candidates",
            scores.len()
        )));
    }
    Ok((argmax_stable(scores) == Some(gold)) as u8)
}

/// `exp` of the mean natural-log NLL over all tokens.
pub fn perplexity(nlls: &[f64]) -> Result<f64> {
    if nlls.is_empty() {
        return Err(Error::InvalidArgument("perplexity of no tokens".into()));
    }
    if let Some(bad) = nlls.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("token NLL {bad}")));
    }
    Ok((nlls.iter().sum::<f64>() / nlls.len() as f64).exp())
}

/// Indices sorted by descending score, stable.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mean over lists of the mean reciprocal rank of that list's relevant items.
pub fn mrr(ranked_lists: &[Vec<usize>], relevant_sets: &[Vec<usize>]) -> Result<f64> {
    if ranked_lists.len() != relevant_sets.len() {
        return Err(Error::InvalidArgument("one relevant set per ranked list".into()));
    }
    if ranked_lists.is_empty() {
        return Err(Error::InvalidArgument("no ranked lists".into()));
    }
    let mut total = 0.0;
    for (ranked, relevant) in ranked_lists.iter().zip(relevant_sets) {
        if relevant.is_empty() {
            return Err(Error::InvalidArgument("empty relevant set".into()));
        }
        let mut rr = 0.0;
        for item in relevant {
            let pos = ranked
                .iter()
                .position(|r| r == item)
                .ok_or_else(|| Error::InvalidArgument(format!("relevant item {item} not in ranked list")))?;
            rr += 1.0 / (pos + 1) as f64;
        }
        total += rr / relevant.len() as f64;
    }
    Ok(total / ranked_lists.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hits_cases() {
        assert_eq!(hits_at_1(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        let mut s = vec![0.0; 20];
        s[0] = 2.0;
        s[1] = 1.0;
        assert_eq!(hits_at_1(&s, 1).unwrap(), 0);
        assert_eq!(hits_at_1(&[1.0, 1.0], 0).unwrap(), 1);
        assert_eq!(hits_at_1(&[1.0, 1.0], 1).unwrap(), 0);
        assert!(hits_at_1(&[1.0], 3).is_err());
    }

    #[test]
    fn random_scorer_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 10_000;
        let mut hits = 0u32;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..32).map(|_| rng.gen()).collect();
            hits += hits_at_1(&scores, rng.gen_range(0..32)).unwrap() as u32;
        }
        let rate = hits as f64 / trials as f64;
        assert!((rate - 1.0 / 32.0).abs() < 0.01, "{rate}");
    }

    #[test]
    fn perplexity_cases() {
        assert!((perplexity(&[2f64.ln(); 5]).unwrap() - 2.0).abs() < 1e-12);
        assert!((perplexity(&[100f64.ln()]).unwrap() - 100.0).abs() < 1e-9);
        assert!((perplexity(&[2f64.ln(), 8f64.ln()]).unwrap() - 4.0).abs() < 1e-12);
        assert!(perplexity(&[]).is_err());
        assert!(perplexity(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn mrr_cases() {
        let ranked = vec![vec![3, 1, 2, 0]];
        assert_eq!(mrr(&ranked, &[vec![3]]).unwrap(), 1.0);
        assert_eq!(mrr(&ranked, &[vec![0]]).unwrap(), 0.25);
        assert!((mrr(&ranked, &[vec![3, 0]]).unwrap() - 0.625).abs() < 1e-15);
        assert!(mrr(&ranked, &[vec![]]).is_err());
        assert_eq!(rank_desc(&[0.1, 0.5, 0.5, 0.2]), vec![1, 2, 3, 0]);
    }
}
