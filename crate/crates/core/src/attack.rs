//! Binary-search recovery of an encrypted secret through the `lt` BOP when
//! every encryption reuses the same salt.
//!
//! The attacker never decrypts. It builds a ciphertext of `true` once, then
//! for each guess runs `enc g; bop lt g secret` on the interpreter and
//! compares the resulting ciphertext bits with the reference. With a reused
//! salt, equal plaintexts give equal ciphertexts, so the comparison answers
//! `guess < secret`. With fresh salts it almost never matches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoParams, Key, SaltMode, SaltSource};
use crate::interp::{MachineState, Semantics, StateError, Stuck, Value};
use crate::lang::{mask, BopKind, Command, Program, Register};

/// Salt bits used by the attack harness.
pub const ATTACK_SALT_BITS: u32 = 8;
/// Ciphertexts of `true` and `false` built before the search.
pub const SETUP_ENCRYPTIONS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("width must be in 1..=32, got {0}")]
    Width(u32),
    #[error("secret {secret:#x} exceeds {width} bits")]
    Secret { secret: u64, width: u32 },
    #[error(transparent)]
    State(#[from] StateError),
    #[error("interpreter stuck: {0:?}")]
    Stuck(Stuck),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackResult {
    pub recovered: u64,
    /// `lt` probes against the secret.
    pub iterations: u32,
    /// Probes plus the two setup encryptions.
    pub oracle_queries: u32,
    pub success: bool,
    pub mode: SaltMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub width: u32,
    pub mode: SaltMode,
    pub trials: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub max_iterations: u32,
}

const R_TRUE: Register = Register::Gp(1);
const R_FALSE: Register = Register::Gp(2);
const R_SECRET: Register = Register::Gp(3);
const R_GUESS: Register = Register::Gp(4);
const R_TMP: Register = Register::Gp(5);

fn lt_program(lhs: Register, rhs: Register) -> Program {
    Program::new(vec![
        Command::Enc(lhs),
        Command::Enc(rhs),
        Command::Bop(BopKind::Lt, lhs, rhs),
    ])
    .expect("non-empty")
}

fn cipher_bits(st: &MachineState, r: Register) -> u64 {
    match st.get(r) {
        Value::Cipher(c) | Value::Plain(c) => c,
    }
}

/// Recovers `secret` (only ever held as a ciphertext) by binary search.
pub fn run_attack(width: u32, secret: u64, mode: SaltMode, seed: u64) -> Result<AttackResult, AttackError> {
    if !(1..=32).contains(&width) {
        return Err(AttackError::Width(width));
    }
    if secret & !mask(width) != 0 {
        return Err(AttackError::Secret { secret, width });
    }
    let params = CryptoParams::new(width, ATTACK_SALT_BITS, 4).map_err(StateError::from)?;
    let key = Key::from_seed(params, seed).map_err(StateError::from)?;
    let salts = SaltSource::new(mode, ATTACK_SALT_BITS, seed ^ 0xa77ac);
    let mut st = MachineState::new(params, 8, key.material(), salts)?;
    let sem = Semantics::default();
    let run = |st: &mut MachineState, p: &Program| sem.run(p, st).map(|_| ()).map_err(AttackError::Stuck);

    // Victim data: the harness encrypts the secret; the attacker sees only bits.
    let c = st.encrypt(secret).expect("key present");
    st.set(R_SECRET, Value::Cipher(c))?;

    // true = enc(0) < enc(1), false = enc(1) < enc(0); fits every width
    st.set(R_TRUE, Value::Plain(0))?;
    st.set(R_TMP, Value::Plain(1))?;
    run(&mut st, &lt_program(R_TRUE, R_TMP))?;
    st.set(R_FALSE, Value::Plain(1))?;
    st.set(R_TMP, Value::Plain(0))?;
    run(&mut st, &lt_program(R_FALSE, R_TMP))?;
    let truth = cipher_bits(&st, R_TRUE);

    let probe = Program::new(vec![
        Command::Enc(R_GUESS),
        Command::Bop(BopKind::Lt, R_GUESS, R_SECRET),
    ])
    .expect("non-empty");
    let (mut lo, mut hi) = (0u64, mask(width));
    let mut iterations = 0;
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        st.set(R_GUESS, Value::Plain(mid - 1))?;
        run(&mut st, &probe)?;
        iterations += 1;
        if cipher_bits(&st, R_GUESS) == truth {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(AttackResult {
        recovered: lo,
        iterations,
        oracle_queries: iterations + SETUP_ENCRYPTIONS,
        success: lo == secret,
        mode,
    })
}

/// Runs `trials` attacks on uniformly drawn secrets.
pub fn run_trials(width: u32, mode: SaltMode, trials: u32, seed: u64) -> Result<AttackSummary, AttackError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0;
    let mut max_iterations = 0;
    for _ in 0..trials {
        let secret = rng.gen::<u64>() & mask(width);
        let r = run_attack(width, secret, mode, rng.gen())?;
        successes += u32::from(r.success);
        max_iterations = max_iterations.max(r.iterations);
    }
    Ok(AttackSummary {
        width,
        mode,
        trials,
        successes,
        success_rate: if trials == 0 {
            0.0
        } else {
            f64::from(successes) / f64::from(trials)
        },
        max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reused_salt_recovers_every_8_bit_secret() {
        for secret in 0..256 {
            let r = run_attack(8, secret, SaltMode::Reused, secret * 7 + 1).unwrap();
            assert!(r.success, "{secret}");
            assert_eq!(r.recovered, secret);
            assert_eq!(r.iterations, 8);
            assert_eq!(r.oracle_queries, 10);
        }
    }

    #[test]
    fn zero_is_recovered() {
        let r = run_attack(8, 0, SaltMode::Reused, 3).unwrap();
        assert_eq!(r.recovered, 0);
        assert!(r.success);
    }

    #[test]
    fn wider_secrets_take_width_probes() {
        let r = run_attack(16, 0xbeef, SaltMode::Reused, 11).unwrap();
        assert_eq!((r.recovered, r.iterations), (0xbeef, 16));
        let r = run_attack(1, 1, SaltMode::Reused, 11).unwrap();
        assert_eq!((r.recovered, r.iterations), (1, 1));
    }

    #[test]
    fn fresh_salt_is_near_chance() {
        let s = run_trials(8, SaltMode::Fresh, 500, 42).unwrap();
        assert!(s.success_rate <= 0.02, "{s:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(run_attack(0, 0, SaltMode::Reused, 0), Err(AttackError::Width(0)));
        assert!(matches!(
            run_attack(4, 16, SaltMode::Reused, 0),
            Err(AttackError::Secret { .. })
        ));
    }
}
