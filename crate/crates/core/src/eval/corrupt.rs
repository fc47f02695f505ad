use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::SEP;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    First,
    Second,
}

/// Shuffles the non-reserved tokens of one segment of a `[a] SEP [b]`
/// sequence. `is_reserved` identifies tags and other special ids, which stay
/// in place.
pub fn corrupt_input(
    tokens: &[u32],
    segment: Segment,
    seed: u64,
    is_reserved: impl Fn(u32) -> bool,
) -> Result<Vec<u32>> {
    let seps: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == SEP)
        .map(|(i, _)| i)
        .collect();
    if seps.len() != 1 {
        return Err(Error::Invalid(format!(
            "expected exactly one SEP, found {}",
            seps.len()
        )));
    }
    let range = match segment {
        Segment::First => 0..seps[0],
        Segment::Second => seps[0] + 1..tokens.len(),
    };
    let positions: Vec<usize> = range.filter(|&i| !is_reserved(tokens[i])).collect();
    let mut values: Vec<u32> = positions.iter().map(|&i| tokens[i]).collect();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = tokens.to_vec();
    for (&i, v) in positions.iter().zip(values) {
        out[i] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TAG: u32 = 5;

    fn reserved(t: u32) -> bool {
        t <= TAG
    }

    #[test]
    fn only_chosen_segment_moves() {
        let seq = [TAG, 10, 11, 12, 13, SEP, TAG, 20, 21, 22, 23];
        let c = corrupt_input(&seq, Segment::Second, 3, reserved).unwrap();
        assert_eq!(&c[..7], &seq[..7]);
        let mut a = c[7..].to_vec();
        a.sort();
        assert_eq!(a, vec![20, 21, 22, 23]);
        assert_eq!(
            c,
            corrupt_input(&seq, Segment::Second, 3, reserved).unwrap()
        );
    }

    #[test]
    fn single_token_segment_unchanged() {
        let seq = [TAG, 10, SEP, TAG, 20, 21];
        assert_eq!(
            corrupt_input(&seq, Segment::First, 9, reserved).unwrap(),
            seq
        );
    }

    #[test]
    fn sep_count_checked() {
        assert!(corrupt_input(&[10, 11], Segment::First, 0, reserved).is_err());
        assert!(corrupt_input(&[10, SEP, 11, SEP], Segment::First, 0, reserved).is_err());
    }
}
