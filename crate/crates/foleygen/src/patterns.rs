//! Delay pattern between token grids and model step sequences.
//!
//! Stream k is shifted right by k steps so that at any step the model sees
//! stream k's token for a frame only after streams 0..k have emitted theirs.
//! Out-of-range slots hold the pad id (= codebook_size). A grid of L frames
//! with n_q streams becomes S = L + n_q - 1 steps.

use crate::error::{Error, Result};
use crate::rvq::TokenGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct StepSequence {
    /// steps[s][k] = token for stream k at step s.
    pub steps: Vec<Vec<u16>>,
    pub n_q: usize,
    pub codebook_size: usize,
    pub frame_rate_a: u32,
}

impl StepSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn pad_id(&self) -> u16 {
        self.codebook_size as u16
    }

    /// Frame count implied by the step count.
    pub fn n_frames(&self) -> usize {
        self.len() + 1 - self.n_q
    }
}

/// True where the delay pattern mandates a pad: stream k has no frame token
/// at step s unless 0 <= s - k < L.
pub fn is_mandated_pad(s: usize, k: usize, l: usize) -> bool {
    s < k || s - k >= l
}

pub fn apply_delay(g: &TokenGrid) -> Result<StepSequence> {
    let n_q = g.n_q();
    let l = g.len();
    if n_q == 0 || l == 0 {
        return Err(Error::Invalid("cannot delay an empty token grid".into()));
    }
    let pad = g.codebook_size as u16;
    let s_total = l + n_q - 1;
    let mut steps = vec![vec![pad; n_q]; s_total];
    for (k, stream) in g.codes.iter().enumerate() {
        if stream.len() != l {
            return Err(Error::Shape("ragged token grid".into()));
        }
        for (f, &code) in stream.iter().enumerate() {
            steps[f + k][k] = code;
        }
    }
    Ok(StepSequence { steps, n_q, codebook_size: g.codebook_size, frame_rate_a: g.frame_rate_a })
}

/// Inverts the delay. Strict mode errors on any pad inside the valid region
/// or non-pad code outside it; `lenient` substitutes code 0 for in-range pads
/// instead (for model output that ignored the pattern).
pub fn remove_delay(seq: &StepSequence, lenient: bool) -> Result<TokenGrid> {
    let n_q = seq.n_q;
    let s_total = seq.len();
    if n_q == 0 || s_total < n_q {
        return Err(Error::Shape(format!(
            "step sequence of {s_total} steps cannot hold {n_q} delayed streams"
        )));
    }
    let l = s_total + 1 - n_q;
    let pad = seq.pad_id();
    let mut codes = vec![vec![0u16; l]; n_q];
    for (s, tuple) in seq.steps.iter().enumerate() {
        if tuple.len() != n_q {
            return Err(Error::Shape("ragged step sequence".into()));
        }
        for (k, &tok) in tuple.iter().enumerate() {
            if is_mandated_pad(s, k, l) {
                if tok != pad && !lenient {
                    return Err(Error::Invalid(format!(
                        "expected pad at step {s} stream {k}, found code {tok}"
                    )));
                }
                continue;
            }
            let code = if tok == pad {
                if !lenient {
                    return Err(Error::Invalid(format!(
                        "unexpected pad at step {s} stream {k} (valid slot)"
                    )));
                }
                0
            } else if tok as usize > seq.codebook_size {
                if !lenient {
                    return Err(Error::Invalid(format!(
                        "invalid code {tok} at step {s} stream {k} (codebook size {})",
                        seq.codebook_size
                    )));
                }
                0
            } else {
                tok
            };
            codes[k][s - k] = code;
        }
    }
    Ok(TokenGrid { codes, codebook_size: seq.codebook_size, frame_rate_a: seq.frame_rate_a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(codes: Vec<Vec<u16>>, codebook_size: usize) -> TokenGrid {
        TokenGrid { codes, codebook_size, frame_rate_a: 50 }
    }

    #[test]
    fn worked_three_stream_example() {
        // n_q=3, L=4, codebook_size=64 -> pad 64, S=6
        let g = grid(
            vec![vec![11, 12, 13, 14], vec![21, 22, 23, 24], vec![31, 32, 33, 34]],
            64,
        );
        let seq = apply_delay(&g).unwrap();
        assert_eq!(seq.len(), 6);
        assert_eq!(seq.pad_id(), 64);
        let p = 64u16;
        assert_eq!(
            seq.steps,
            vec![
                vec![11, p, p],
                vec![12, 21, p],
                vec![13, 22, 31],
                vec![14, 23, 32],
                vec![p, 24, 33],
                vec![p, p, 34],
            ]
        );
        assert_eq!(remove_delay(&seq, false).unwrap(), g);
    }

    #[test]
    fn single_stream_is_identity() {
        let g = grid(vec![vec![5, 0, 3]], 8);
        let seq = apply_delay(&g).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.steps, vec![vec![5], vec![0], vec![3]]);
        assert_eq!(remove_delay(&seq, false).unwrap(), g);
    }

    #[test]
    fn mandated_pad_predicate_matches_layout() {
        let g = grid(vec![vec![1, 2], vec![3, 4], vec![5, 6]], 8);
        let seq = apply_delay(&g).unwrap();
        let l = g.len();
        for (s, tuple) in seq.steps.iter().enumerate() {
            for (k, &tok) in tuple.iter().enumerate() {
                assert_eq!(
                    tok == seq.pad_id(),
                    is_mandated_pad(s, k, l),
                    "disagreement at step {s} stream {k}"
                );
            }
        }
    }

    #[test]
    fn roundtrip_over_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n_q = rng.random_range(1..=6usize);
            let l = rng.random_range(1..=40usize);
            let cs = rng.random_range(2..=64usize);
            let codes: Vec<Vec<u16>> = (0..n_q)
                .map(|_| (0..l).map(|_| rng.random_range(0..cs as u16)).collect())
                .collect();
            let g = grid(codes, cs);
            let seq = apply_delay(&g).unwrap();
            assert_eq!(seq.len(), l + n_q - 1);
            assert_eq!(seq.n_frames(), l);
            assert_eq!(remove_delay(&seq, false).unwrap(), g);
        }
    }

    #[test]
    fn strict_mode_rejects_pad_in_valid_region() {
        let g = grid(vec![vec![1, 2], vec![3, 4]], 8);
        let mut seq = apply_delay(&g).unwrap();
        seq.steps[1][0] = seq.pad_id(); // step 1 stream 0 is in range
        let err = remove_delay(&seq, false).unwrap_err();
        assert!(err.to_string().contains("unexpected pad"), "{err}");
        // lenient substitutes code 0
        let fixed = remove_delay(&seq, true).unwrap();
        assert_eq!(fixed.codes[0], vec![1, 0]);
        assert_eq!(fixed.codes[1], vec![3, 4]);
    }

    #[test]
    fn strict_mode_rejects_code_in_pad_slot() {
        let g = grid(vec![vec![1, 2], vec![3, 4]], 8);
        let mut seq = apply_delay(&g).unwrap();
        seq.steps[0][1] = 3; // stream 1 has nothing at step 0
        assert!(remove_delay(&seq, false).is_err());
        // lenient ignores the stray token entirely
        assert_eq!(remove_delay(&seq, true).unwrap(), g);
    }

    #[test]
    fn strict_mode_rejects_out_of_vocab_code() {
        let g = grid(vec![vec![1, 2], vec![3, 4]], 8);
        let mut seq = apply_delay(&g).unwrap();
        seq.steps[1][0] = 9; // 8 is pad, 9 is bos territory: not a code
        assert!(remove_delay(&seq, false).is_err());
        let fixed = remove_delay(&seq, true).unwrap();
        assert_eq!(fixed.codes[0], vec![1, 0]);
    }

    #[test]
    fn too_short_sequences_rejected() {
        let seq = StepSequence {
            steps: vec![vec![0, 0]],
            n_q: 2,
            codebook_size: 4,
            frame_rate_a: 50,
        };
        assert!(remove_delay(&seq, false).is_err());
        let empty = grid(vec![], 4);
        assert!(apply_delay(&empty).is_err());
    }
}
