use std::cmp::Ordering;

fn rank_order(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Indices of the `count` largest entries of `values`.
///
/// Ordered by descending value; equal values keep ascending index order, so
/// the result is fully determined by the input. `count` larger than the input
/// is clamped.
pub fn topk(values: &[f64], count: usize) -> Vec<usize> {
    let count = count.min(values.len());
    if count == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if count < idx.len() {
        idx.select_nth_unstable_by(count - 1, |&a, &b| rank_order(values, a, b));
        idx.truncate(count);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(values, a, b));
    idx
}

/// Position of the largest value, smallest index on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    (0..values.len()).min_by(|&a, &b| rank_order(values, a, b))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sort_oracle(values: &[f64], count: usize) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
        // stable sort on descending value preserves ascending index among ties
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        pairs.into_iter().take(count).map(|p| p.1).collect()
    }

    #[test]
    fn picks_largest() {
        assert_eq!(topk(&[5.0, 1.0, 9.0], 2), vec![2, 0]);
    }

    #[test]
    fn ties_prefer_smaller_index() {
        assert_eq!(topk(&[3.0, 3.0, 3.0], 2), vec![0, 1]);
    }

    #[test]
    fn count_is_clamped() {
        assert_eq!(topk(&[1.0, 2.0], 5), vec![1, 0]);
        assert!(topk(&[1.0], 0).is_empty());
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax(&[1.0, 4.0, 4.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(
            values in prop::collection::vec(-4i32..4, 0..256),
            count in 0usize..300,
        ) {
            // coarse integer grid guarantees plenty of ties
            let values: Vec<f64> = values.into_iter().map(f64::from).collect();
            prop_assert_eq!(topk(&values, count), sort_oracle(&values, count.min(values.len())));
        }
    }
}
