//! Salted small-domain encryption: `encrypt(k, m) = P_k(m || u)`.
//!
//! `P_k` is a Feistel network over `n + s` bit blocks. Odd block widths are
//! handled by alternating the half widths each round, so every round stays
//! invertible without padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::mask;

pub const MIN_ROUNDS: u32 = 4;
pub const MAX_ROUNDS: u32 = 32;
/// Blocks are held in a `u64`; keep headroom for shifts.
pub const MAX_BLOCK_BITS: u32 = 62;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{what} is {found} bits wide, expected at most {expected}")]
    Width {
        what: &'static str,
        expected: u32,
        found: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CryptoParams {
    /// Message bits.
    pub n: u32,
    /// Salt bits.
    pub s: u32,
    pub rounds: u32,
}

impl CryptoParams {
    pub fn new(n: u32, s: u32, rounds: u32) -> Result<Self, CryptoError> {
        let p = CryptoParams { n, s, rounds };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CryptoError> {
        if self.n == 0 || self.s == 0 {
            return Err(CryptoError::InvalidParams(format!(
                "n and s must be at least 1 (n={}, s={})",
                self.n, self.s
            )));
        }
        if !(MIN_ROUNDS..=MAX_ROUNDS).contains(&self.rounds) {
            return Err(CryptoError::InvalidParams(format!(
                "rounds must be in {MIN_ROUNDS}..={MAX_ROUNDS}, got {}",
                self.rounds
            )));
        }
        if self.n + self.s > MAX_BLOCK_BITS {
            return Err(CryptoError::InvalidParams(format!(
                "n + s must be at most {MAX_BLOCK_BITS}, got {}",
                self.n + self.s
            )));
        }
        Ok(())
    }

    pub fn block_bits(&self) -> u32 {
        self.n + self.s
    }

    pub fn key_bits(&self) -> u32 {
        self.block_bits()
    }

    pub fn msg_mask(&self) -> u64 {
        mask(self.n)
    }

    pub fn block_mask(&self) -> u64 {
        mask(self.block_bits())
    }

    /// Width of the high (left) half entering round `round`.
    pub fn left_bits(&self, round: u32) -> u32 {
        let w = self.block_bits();
        if round.is_multiple_of(2) {
            w.div_ceil(2)
        } else {
            w / 2
        }
    }

    fn check(&self, what: &'static str, value: u64, bits: u32) -> Result<(), CryptoError> {
        if value & !mask(bits) != 0 {
            Err(CryptoError::Width {
                what,
                expected: bits,
                found: 64 - value.leading_zeros(),
            })
        } else {
            Ok(())
        }
    }

    pub fn prp_forward(&self, key: &Key, block: u64) -> Result<u64, CryptoError> {
        self.check("block", block, self.block_bits())?;
        Ok(key.forward(block))
    }

    pub fn prp_inverse(&self, key: &Key, block: u64) -> Result<u64, CryptoError> {
        self.check("block", block, self.block_bits())?;
        Ok(key.inverse(block))
    }

    pub fn encrypt(&self, key: &Key, m: u64, salts: &mut SaltSource) -> Result<u64, CryptoError> {
        self.check("message", m, self.n)?;
        Ok(key.encrypt(m, salts.next_salt()))
    }

    pub fn decrypt(&self, key: &Key, c: u64) -> Result<u64, CryptoError> {
        self.check("ciphertext", c, self.block_bits())?;
        Ok(key.decrypt(c))
    }
}

impl Default for CryptoParams {
    fn default() -> Self {
        CryptoParams {
            n: 4,
            s: 4,
            rounds: MIN_ROUNDS,
        }
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-round subkey derived from the raw key material.
pub fn round_key(key_material: u64, round: u32) -> u64 {
    mix64(key_material ^ GOLDEN.wrapping_mul(u64::from(round) + 1))
}

/// Keyed Feistel round function, truncated to `out_bits`.
///
/// Also the semantics of the circuit IR's keyed-mix node, so hardware and
/// software agree bit for bit.
pub fn round_function(key_material: u64, round: u32, x: u64, out_bits: u32) -> u64 {
    mix_with_subkey(round_key(key_material, round), x, out_bits)
}

fn mix_with_subkey(subkey: u64, x: u64, out_bits: u32) -> u64 {
    mix64(subkey ^ x.wrapping_mul(GOLDEN)) & mask(out_bits)
}

/// One forward Feistel round on a `w`-bit block whose high half is `lw` bits.
pub fn feistel_round(key_material: u64, round: u32, block: u64, w: u32, lw: u32) -> u64 {
    round_with_subkey(round_key(key_material, round), block, w, lw)
}

/// Inverse of [`feistel_round`].
pub fn feistel_round_inverse(key_material: u64, round: u32, block: u64, w: u32, lw: u32) -> u64 {
    inverse_round_with_subkey(round_key(key_material, round), block, w, lw)
}

fn round_with_subkey(subkey: u64, block: u64, w: u32, lw: u32) -> u64 {
    let rw = w - lw;
    let l = block >> rw;
    let r = block & mask(rw);
    let new_low = l ^ mix_with_subkey(subkey, r, lw);
    (r << lw) | new_low
}

fn inverse_round_with_subkey(subkey: u64, block: u64, w: u32, lw: u32) -> u64 {
    let rw = w - lw;
    let r = block >> lw;
    let l = (block & mask(lw)) ^ mix_with_subkey(subkey, r, lw);
    (l << rw) | r
}

/// Key material plus the precomputed round schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Key {
    material: u64,
    seed: Option<u64>,
    params: CryptoParams,
    subkeys: [u64; MAX_ROUNDS as usize],
}

impl Key {
    pub fn new(params: CryptoParams, material: u64) -> Result<Key, CryptoError> {
        params.validate()?;
        params.check("key", material, params.key_bits())?;
        Ok(Key::build(params, material, None))
    }

    /// Draws uniform key material from a seeded generator.
    pub fn from_seed(params: CryptoParams, seed: u64) -> Result<Key, CryptoError> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let material = rng.gen::<u64>() & mask(params.key_bits());
        Ok(Key::build(params, material, Some(seed)))
    }

    fn build(params: CryptoParams, material: u64, seed: Option<u64>) -> Key {
        let mut subkeys = [0; MAX_ROUNDS as usize];
        for (i, sk) in subkeys.iter_mut().take(params.rounds as usize).enumerate() {
            *sk = round_key(material, i as u32);
        }
        Key {
            material,
            seed,
            params,
            subkeys,
        }
    }

    pub fn material(&self) -> u64 {
        self.material
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn params(&self) -> CryptoParams {
        self.params
    }

    fn schedule(&self) -> &[u64] {
        &self.subkeys[..self.params.rounds as usize]
    }

    pub(crate) fn forward(&self, mut block: u64) -> u64 {
        let w = self.params.block_bits();
        for (i, &sk) in self.schedule().iter().enumerate() {
            block = round_with_subkey(sk, block, w, self.params.left_bits(i as u32));
        }
        block
    }

    pub(crate) fn inverse(&self, mut block: u64) -> u64 {
        let w = self.params.block_bits();
        for (i, &sk) in self.schedule().iter().enumerate().rev() {
            block = inverse_round_with_subkey(sk, block, w, self.params.left_bits(i as u32));
        }
        block
    }

    /// `P_k(m || u)` with the message in the high bits.
    pub(crate) fn encrypt(&self, m: u64, salt: u64) -> u64 {
        self.forward(((m & self.params.msg_mask()) << self.params.s) | salt)
    }

    pub(crate) fn decrypt(&self, c: u64) -> u64 {
        self.inverse(c & self.params.block_mask()) >> self.params.s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaltMode {
    Fresh,
    Reused,
}

impl std::str::FromStr for SaltMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fresh" => Ok(SaltMode::Fresh),
            "reused" => Ok(SaltMode::Reused),
            other => Err(format!("unknown salt mode `{other}` (fresh|reused)")),
        }
    }
}

/// Seeded stand-in for the enclave's entropy source.
#[derive(Debug, Clone)]
pub struct SaltSource {
    mode: SaltMode,
    seed: u64,
    bits: u32,
    rng: ChaCha8Rng,
    last: Option<u64>,
}

impl SaltSource {
    pub fn new(mode: SaltMode, bits: u32, seed: u64) -> SaltSource {
        SaltSource {
            mode,
            seed,
            bits,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last: None,
        }
    }

    pub fn fresh(bits: u32, seed: u64) -> SaltSource {
        SaltSource::new(SaltMode::Fresh, bits, seed)
    }

    pub fn reused(bits: u32, seed: u64) -> SaltSource {
        SaltSource::new(SaltMode::Reused, bits, seed)
    }

    pub fn mode(&self) -> SaltMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn last(&self) -> Option<u64> {
        self.last
    }

    pub fn next_salt(&mut self) -> u64 {
        match (self.mode, self.last) {
            (SaltMode::Reused, Some(u)) => u,
            _ => {
                let u = self.rng.gen::<u64>() & mask(self.bits);
                self.last = Some(u);
                u
            }
        }
    }
}

/// Empirical advantage of a small family of distinguishers at telling
/// `encrypt(m0)` from `encrypt(m1)`.
///
/// Each trial the adversary sees four reference encryptions of each message
/// and a challenge encryption of `m_b` for a random bit `b`, all drawn from
/// `salts`. It guesses by exact match against the references first, then by
/// per-bit agreement with each reference set, then by coin flip. Returns
/// `|Pr[guess = b] - 1/2|`.
pub fn distinguishability_smoke(key: &Key, m0: u64, m1: u64, trials: u32, salts: &mut SaltSource, seed: u64) -> f64 {
    const REFS: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = key.params.block_bits();
    let mut correct = 0u64;
    for _ in 0..trials {
        let r0: [u64; REFS] = std::array::from_fn(|_| key.encrypt(m0, salts.next_salt()));
        let r1: [u64; REFS] = std::array::from_fn(|_| key.encrypt(m1, salts.next_salt()));
        let b = rng.gen::<bool>();
        let challenge = key.encrypt(if b { m1 } else { m0 }, salts.next_salt());
        let hit0 = r0.contains(&challenge);
        let hit1 = r1.contains(&challenge);
        let guess = if hit0 != hit1 {
            hit1
        } else {
            let score = |refs: &[u64; REFS]| -> i64 {
                refs.iter()
                    .map(|&r| i64::from(w) - i64::from((r ^ challenge).count_ones()))
                    .sum()
            };
            let (s0, s1) = (score(&r0), score(&r1));
            match s1.cmp(&s0) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => rng.gen::<bool>(),
            }
        };
        if guess == b {
            correct += 1;
        }
    }
    (correct as f64 / f64::from(trials.max(1)) - 0.5).abs()
}
