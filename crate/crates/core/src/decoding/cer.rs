use crate::error::{Error, Result};

/// Minimum number of insertions, deletions and substitutions turning `a` into `b`.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn cer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("character error rate is undefined for an empty reference"));
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

/// Total edits over total reference length.
pub fn corpus_cer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let mut edits = 0;
    let mut total = 0;
    for (h, r) in pairs {
        if r.is_empty() {
            return Err(Error::invalid("empty reference in corpus"));
        }
        edits += levenshtein(h, r);
        total += r.len();
    }
    if total == 0 {
        return Err(Error::invalid("empty corpus"));
    }
    Ok(edits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn examples() {
        assert_eq!(cer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((cer(&[1, 2, 3], &[1, 2, 4]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer::<u8>(&[], &[1, 2]).unwrap(), 1.0);
        assert!(cer(&[1], &[]).is_err());
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(corpus_cer(&[(vec![1], vec![1, 2]), (vec![3, 3], vec![3, 3])]).unwrap(), 0.25);
    }

    proptest! {
        #[test]
        fn metric_properties(
            a in prop::collection::vec(0u8..4, 0..8),
            b in prop::collection::vec(0u8..4, 0..8),
            c in prop::collection::vec(0u8..4, 0..8),
        ) {
            let ab = levenshtein(&a, &b);
            prop_assert_eq!(ab, levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
            prop_assert_eq!(levenshtein(&a, &a), 0);
            prop_assert!(ab >= a.len().abs_diff(b.len()));
        }
    }
}
