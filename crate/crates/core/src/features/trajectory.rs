use crate::error::{Error, Result};

/// Unifies a frame sequence to exactly `target` frames.
///
/// * equal length: returned unchanged;
/// * longer: frames `offset + k·stride` for `k in 0..target`, with
///   `stride = floor(len / target)` and the window of
///   `stride·(target − 1) + 1` frames centred in the sequence;
/// * shorter: frames repeated cyclically in order.
pub fn normalize_trajectory_length<T: Clone>(frames: &[T], target: usize) -> Result<Vec<T>> {
    if frames.is_empty() {
        return Err(Error::arg("cannot normalise an empty trajectory"));
    }
    if target == 0 {
        return Err(Error::arg("target trajectory length must be at least 1"));
    }
    let len = frames.len();
    let picked = if len == target {
        frames.to_vec()
    } else if len > target {
        let stride = len / target;
        let span = stride * (target - 1) + 1;
        let offset = (len - span) / 2;
        (0..target).map(|k| frames[offset + k * stride].clone()).collect()
    } else {
        frames.iter().cycle().take(target).cloned().collect()
    };
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_at_target_length() {
        let frames: Vec<usize> = (0..32).collect();
        assert_eq!(normalize_trajectory_length(&frames, 32).unwrap(), frames);
    }

    #[test]
    fn long_sequence_takes_even_frames() {
        let frames: Vec<usize> = (0..64).collect();
        let expected: Vec<usize> = (0..32).map(|k| 2 * k).collect();
        assert_eq!(normalize_trajectory_length(&frames, 32).unwrap(), expected);
    }

    #[test]
    fn window_is_centred() {
        // stride 2, span 5, offset (8 - 5) / 2 = 1
        let frames: Vec<usize> = (0..8).collect();
        assert_eq!(normalize_trajectory_length(&frames, 3).unwrap(), vec![1, 3, 5]);
    }

    #[test]
    fn short_sequence_repeats_cyclically() {
        assert_eq!(
            normalize_trajectory_length(&['a', 'b', 'c'], 5).unwrap(),
            vec!['a', 'b', 'c', 'a', 'b']
        );
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(normalize_trajectory_length::<u8>(&[], 4).is_err());
    }

    proptest! {
        #[test]
        fn idempotent_and_order_preserving(len in 1usize..200, target in 1usize..64) {
            let frames: Vec<usize> = (0..len).collect();
            let once = normalize_trajectory_length(&frames, target).unwrap();
            prop_assert_eq!(once.len(), target);
            let twice = normalize_trajectory_length(&once, target).unwrap();
            prop_assert_eq!(&once, &twice);
            if len >= target {
                prop_assert!(once.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
