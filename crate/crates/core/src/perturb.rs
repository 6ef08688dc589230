//! Seeded bit-flip perturbation of text inputs.
//!
//! Intensity is a percentage. In [`PerturbMode::TokenBitflip`] it is the
//! share of whitespace tokens that receive a single flipped bit; in
//! [`PerturbMode::GlobalBitflip`] it is the share of all bits of the UTF-8
//! encoding that are flipped. The flipped bytes are decoded leniently, so
//! broken sequences become U+FFFD.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::token_spans;

pub const DEFAULT_INTENSITIES: [u32; 6] = [0, 1, 2, 3, 4, 5];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PerturbError {
    #[error("cannot perturb empty input")]
    EmptyInput,
    #[error("invalid perturbation plan: {0}")]
    BadPlan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    #[default]
    TokenBitflip,
    GlobalBitflip,
}

impl std::str::FromStr for PerturbMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token_bitflip" => Ok(PerturbMode::TokenBitflip),
            "global_bitflip" => Ok(PerturbMode::GlobalBitflip),
            other => Err(format!("unknown perturbation mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub intensities: Vec<u32>,
    pub global_seed: u64,
    #[serde(default)]
    pub mode: PerturbMode,
}

impl PerturbationPlan {
    pub fn new(intensities: Vec<u32>, global_seed: u64, mode: PerturbMode) -> Result<Self, PerturbError> {
        let plan = PerturbationPlan {
            intensities,
            global_seed,
            mode,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        match self.intensities.first() {
            Some(0) => {}
            Some(_) => return Err(PerturbError::BadPlan("first intensity must be 0".into())),
            None => return Err(PerturbError::BadPlan("no intensities".into())),
        }
        if self.intensities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PerturbError::BadPlan("intensities must be strictly increasing".into()));
        }
        Ok(())
    }
}

impl Default for PerturbationPlan {
    fn default() -> Self {
        PerturbationPlan {
            intensities: DEFAULT_INTENSITIES.to_vec(),
            global_seed: 0,
            mode: PerturbMode::TokenBitflip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedVariant {
    pub sample_id: String,
    pub intensity: u32,
    pub seed: u64,
    pub flips_applied: usize,
    pub perturbed_text: String,
}

/// Raw result of flipping bits, before lenient decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlippedBytes {
    pub bytes: Vec<u8>,
    pub flips_applied: usize,
}

/// Stable per-(run, sample, intensity) seed: the first eight bytes
/// (little-endian) of SHA-256 over `global_seed` (LE u64), `intensity`
/// (LE u32) and the UTF-8 sample id.
pub fn derive_seed(global_seed: u64, sample_id: &str, intensity: u32) -> u64 {
    let digest = Sha256::new()
        .chain_update(global_seed.to_le_bytes())
        .chain_update(intensity.to_le_bytes())
        .chain_update(sample_id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// `ceil(intensity% * population)`, at least one when intensity > 0,
/// never more than the population.
pub fn flip_budget(intensity: u32, population: usize) -> usize {
    if intensity == 0 || population == 0 {
        return 0;
    }
    let scaled = (intensity as u128 * population as u128).div_ceil(100);
    (scaled as usize).clamp(1, population)
}

/// Flip bits of `input` according to `mode` and return the raw bytes.
pub fn flip_bits(input: &str, intensity: u32, seed: u64, mode: PerturbMode) -> Result<FlippedBytes, PerturbError> {
    if input.is_empty() {
        return Err(PerturbError::EmptyInput);
    }
    let mut bytes = input.as_bytes().to_vec();
    if intensity == 0 {
        return Ok(FlippedBytes { bytes, flips_applied: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flips = match mode {
        PerturbMode::TokenBitflip => {
            let spans = token_spans(input);
            let budget = flip_budget(intensity, spans.len());
            let mut chosen = index::sample(&mut rng, spans.len(), budget).into_vec();
            chosen.sort_unstable();
            for &t in &chosen {
                let (start, end) = spans[t];
                let byte = rng.random_range(start..end);
                let bit = rng.random_range(0..8u32);
                bytes[byte] ^= 1 << bit;
            }
            chosen.len()
        }
        PerturbMode::GlobalBitflip => {
            let total_bits = bytes.len() * 8;
            let budget = flip_budget(intensity, total_bits);
            for pos in index::sample(&mut rng, total_bits, budget).iter() {
                bytes[pos / 8] ^= 1 << (pos % 8);
            }
            budget
        }
    };
    Ok(FlippedBytes {
        bytes,
        flips_applied: flips,
    })
}

/// Perturb `input_x` at `intensity` percent. Intensity 0 is the identity.
pub fn perturb(
    sample_id: &str,
    input_x: &str,
    intensity: u32,
    seed: u64,
    mode: PerturbMode,
) -> Result<PerturbedVariant, PerturbError> {
    let flipped = flip_bits(input_x, intensity, seed, mode)?;
    let perturbed_text = match String::from_utf8(flipped.bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    };
    Ok(PerturbedVariant {
        sample_id: sample_id.to_string(),
        intensity,
        seed,
        flips_applied: flipped.flips_applied,
        perturbed_text,
    })
}

/// Perturb one input at every intensity of `plan`, deriving per-intensity
/// seeds from the plan's global seed.
pub fn perturb_all(
    sample_id: &str,
    input_x: &str,
    plan: &PerturbationPlan,
) -> Result<Vec<PerturbedVariant>, PerturbError> {
    plan.intensities
        .iter()
        .map(|&k| perturb(sample_id, input_x, k, derive_seed(plan.global_seed, sample_id, k), plan.mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bit_distance(a: &[u8], b: &[u8]) -> u32 {
        a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
    }

    #[test]
    fn zero_intensity_is_identity() {
        let v = perturb("s", "hello world", 0, 42, PerturbMode::TokenBitflip).unwrap();
        assert_eq!(v.perturbed_text, "hello world");
        assert_eq!(v.flips_applied, 0);
        let v = perturb("s", "hello world", 0, 42, PerturbMode::GlobalBitflip).unwrap();
        assert_eq!(v.perturbed_text, "hello world");
    }

    #[test]
    fn half_of_two_tokens_flips_one_bit() {
        for seed in 0..50 {
            let f = flip_bits("hello world", 50, seed, PerturbMode::TokenBitflip).unwrap();
            assert_eq!(f.flips_applied, 1);
            assert_eq!(bit_distance(&f.bytes, b"hello world"), 1);
            let changed_tokens = [(0usize, 5usize), (6, 11)]
                .iter()
                .filter(|(s, e)| f.bytes[*s..*e] != b"hello world"[*s..*e])
                .count();
            assert_eq!(changed_tokens, 1);
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(
            perturb("s", "", 3, 1, PerturbMode::TokenBitflip).unwrap_err(),
            PerturbError::EmptyInput
        );
    }

    #[test]
    fn same_seed_same_output() {
        let text = "the quick brown fox jumps over the lazy dog ".repeat(20);
        let a = perturb("s", &text, 5, 7, PerturbMode::TokenBitflip).unwrap();
        let b = perturb("s", &text, 5, 7, PerturbMode::TokenBitflip).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn global_mode_flips_budgeted_bits() {
        let text = "abcdefghij";
        let f = flip_bits(text, 2, 9, PerturbMode::GlobalBitflip).unwrap();
        // 80 bits * 2% = 1.6, rounded up
        assert_eq!(f.flips_applied, 2);
        assert_eq!(bit_distance(&f.bytes, text.as_bytes()), 2);
    }

    #[test]
    fn invalid_utf8_is_replaced() {
        // Any flip of the high bit of an ASCII byte yields an invalid lone byte.
        let found = (0..200u64).any(|seed| {
            perturb("s", "a", 100, seed, PerturbMode::TokenBitflip)
                .unwrap()
                .perturbed_text
                == "\u{FFFD}"
        });
        assert!(found);
    }

    #[test]
    fn plan_validation() {
        assert!(PerturbationPlan::new(vec![0, 1, 2], 0, PerturbMode::TokenBitflip).is_ok());
        assert!(PerturbationPlan::new(vec![1, 2], 0, PerturbMode::TokenBitflip).is_err());
        assert!(PerturbationPlan::new(vec![0, 2, 2], 0, PerturbMode::TokenBitflip).is_err());
        assert!(PerturbationPlan::new(vec![], 0, PerturbMode::TokenBitflip).is_err());
        assert_eq!(PerturbationPlan::default().intensities, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(flip_budget(0, 300), 0);
        assert_eq!(flip_budget(1, 300), 3);
        assert_eq!(flip_budget(1, 301), 4);
        assert_eq!(flip_budget(1, 10), 1);
        assert_eq!(flip_budget(250, 10), 10);
    }

    #[test]
    fn derive_seed_is_deterministic_and_sensitive() {
        assert_eq!(derive_seed(1, "abc", 2), derive_seed(1, "abc", 2));
        assert_ne!(derive_seed(1, "abc", 1), derive_seed(1, "abc", 2));
        assert_ne!(derive_seed(1, "abc", 1), derive_seed(2, "abc", 1));
    }
}
