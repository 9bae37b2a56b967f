//! Deterministic seed derivation.
//!
//! Every stochastic component (noise injection, patch cropping, parameter
//! init, dropout-style draws) derives its own seed from a base seed plus a
//! purpose string and integer coordinates, so independent streams never share
//! state and any single draw can be reproduced without replaying the run.
//! The mix is FNV-1a over the concatenated fields: stable across platforms
//! and Rust versions, unlike `DefaultHasher`.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut state: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(FNV_PRIME);
    }
    state
}

/// Derives an independent seed from `(base, purpose, label, index)`.
///
/// `purpose` separates streams of different kinds ("frame-noise",
/// "patch-crop", ...), `label` carries an identifier such as a scene id, and
/// `index` a position such as a frame number or training step.
pub fn derive_seed(base: u64, purpose: &str, label: &str, index: u64) -> u64 {
    let mut state = fnv1a(FNV_OFFSET, &base.to_le_bytes());
    state = fnv1a(state, purpose.as_bytes());
    // Length prefix keeps ("ab", 1) and ("a", ...) style collisions apart.
    state = fnv1a(state, &(label.len() as u64).to_le_bytes());
    state = fnv1a(state, label.as_bytes());
    fnv1a(state, &index.to_le_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_value() {
        // Pinned output: changing the mix silently would invalidate every
        // recorded run, so the constant is asserted outright.
        assert_eq!(derive_seed(0, "frame-noise", "scene", 3), 0x0e6d90cef6a0cca3);
    }

    #[test]
    fn distinct_inputs_give_distinct_seeds() {
        let base = derive_seed(1, "p", "l", 0);
        assert_ne!(base, derive_seed(2, "p", "l", 0));
        assert_ne!(base, derive_seed(1, "q", "l", 0));
        assert_ne!(base, derive_seed(1, "p", "m", 0));
        assert_ne!(base, derive_seed(1, "p", "l", 1));
    }

    #[test]
    fn label_boundaries_do_not_collide() {
        assert_ne!(
            derive_seed(1, "p", "ab", 0),
            derive_seed(1, "pa", "b", 0),
        );
    }

    #[test]
    fn deterministic_across_calls() {
        for i in 0..64 {
            assert_eq!(
                derive_seed(9, "x", "scene_07", i),
                derive_seed(9, "x", "scene_07", i)
            );
        }
    }
}
