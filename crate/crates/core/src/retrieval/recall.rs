use std::collections::BTreeSet;

use super::RetrievalError;

/// `|gold ∩ first k distinct retrieved pages| / |gold|`.
///
/// Repeated pages in `retrieved` (several sub-page units of one page) count
/// once and do not use up a slot.
pub fn recall_at_k(retrieved: &[u32], gold: &BTreeSet<u32>, k: usize) -> Result<f64, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if gold.is_empty() {
        return Err(RetrievalError::EmptyGold);
    }
    let mut seen = BTreeSet::new();
    for &p in retrieved {
        if seen.len() == k {
            break;
        }
        seen.insert(p);
    }
    Ok(gold.intersection(&seen).count() as f64 / gold.len() as f64)
}

/// Macro average of per-question Recall@k.
pub fn mean_recall_at_k(runs: &[(Vec<u32>, BTreeSet<u32>)], k: usize) -> Result<f64, RetrievalError> {
    if runs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (retrieved, gold) in runs {
        total += recall_at_k(retrieved, gold, k)?;
    }
    Ok(total / runs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let gold = BTreeSet::from([101, 105]);
        assert_eq!(recall_at_k(&[101, 105, 104, 108, 107], &gold, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[1, 2, 3], &BTreeSet::from([7]), 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[1, 2, 3], &BTreeSet::from([2, 9]), 3).unwrap(), 0.5);
    }

    #[test]
    fn duplicates_do_not_consume_slots() {
        let gold = BTreeSet::from([2]);
        assert_eq!(recall_at_k(&[1, 1, 1, 2], &gold, 2).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(recall_at_k(&[1], &BTreeSet::new(), 1), Err(RetrievalError::EmptyGold)));
        assert!(matches!(recall_at_k(&[1], &BTreeSet::from([1]), 0), Err(RetrievalError::InvalidK)));
    }
}
