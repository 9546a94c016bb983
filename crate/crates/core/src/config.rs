//! Flat `key = value` run configuration shared by every subcommand.
//!
//! ```text
//! # ISA level
//! n = 4
//! s = 4
//! cost.bop = 2
//! # RTL level
//! hw.cache_lines = 2
//! output = json
//! ```

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoParams, MAX_ROUNDS};
use crate::enclaves::EnclaveParams;
use crate::interp::CostTable;
use crate::lang::DEFAULT_R_MAX;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    #[default]
    Text,
    Json,
}

impl FromStr for OutputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(OutputMode::Text),
            "json" => Ok(OutputMode::Json),
            _ => Err(format!("expected text or json, got `{s}`")),
        }
    }
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputMode::Text => "text",
            OutputMode::Json => "json",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n: u32,
    pub s: u32,
    pub rounds: u32,
    pub key_seed: u64,
    pub salt_seed: u64,
    /// Seed for checkers and random suites.
    pub seed: u64,
    pub r_max: u8,
    pub costs: CostTable,
    pub hw_n: u32,
    pub hw_s: u32,
    pub hw_rounds: u32,
    pub hw_cache_lines: u32,
    pub hw_miss_latency: u32,
    pub hw_key: u64,
    pub output: OutputMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hw = EnclaveParams::default();
        RunConfig {
            n: 4,
            s: 4,
            rounds: 4,
            key_seed: 1,
            salt_seed: 2,
            seed: 0x5eed,
            r_max: DEFAULT_R_MAX,
            costs: CostTable::default(),
            hw_n: hw.n,
            hw_s: hw.s,
            hw_rounds: hw.rounds,
            hw_cache_lines: hw.cache_lines,
            hw_miss_latency: hw.miss_latency,
            hw_key: hw.key,
            output: OutputMode::Text,
        }
    }
}

/// Every key, in file order.
pub const KEYS: [&str; 18] = [
    "n",
    "s",
    "rounds",
    "key_seed",
    "salt_seed",
    "seed",
    "r_max",
    "cost.enc",
    "cost.bop",
    "cost.cmov",
    "cost.seq",
    "hw.n",
    "hw.s",
    "hw.rounds",
    "hw.cache_lines",
    "hw.miss_latency",
    "hw.key",
    "output",
];

fn parse_int<T: TryFrom<u64>>(v: &str) -> Result<T, String> {
    let v = v.replace('_', "");
    let n = if let Some(h) = v.strip_prefix("0x") {
        u64::from_str_radix(h, 16)
    } else if let Some(b) = v.strip_prefix("0b") {
        u64::from_str_radix(b, 2)
    } else {
        v.parse::<u64>()
    }
    .map_err(|e| e.to_string())?;
    T::try_from(n).map_err(|_| format!("{n} is out of range"))
}

impl RunConfig {
    pub fn crypto(&self) -> CryptoParams {
        CryptoParams {
            n: self.n,
            s: self.s,
            rounds: self.rounds,
        }
    }

    /// Enclave parameters at the given widths. The configured key is
    /// truncated to the block width.
    pub fn enclave(&self, n: u32, s: u32) -> EnclaveParams {
        EnclaveParams {
            n,
            s,
            rounds: self.hw_rounds,
            cache_lines: self.hw_cache_lines,
            miss_latency: self.hw_miss_latency,
            key: self.hw_key & crate::lang::mask(n + s),
        }
    }

    /// Enclave parameters at the configured `hw.n` and `hw.s`.
    pub fn hw_params(&self) -> EnclaveParams {
        self.enclave(self.hw_n, self.hw_s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.crypto().validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.costs.validate() {
            return bad(e);
        }
        if self.r_max == 0 {
            return bad("r_max must be at least 1".into());
        }
        if !(1..=MAX_ROUNDS).contains(&self.hw_rounds) {
            return bad(format!("hw.rounds must be in 1..={MAX_ROUNDS}"));
        }
        if let Err(e) = self.hw_params().validate() {
            return bad(e.to_string());
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        match key {
            "n" => self.n = parse_int(v)?,
            "s" => self.s = parse_int(v)?,
            "rounds" => self.rounds = parse_int(v)?,
            "key_seed" => self.key_seed = parse_int(v)?,
            "salt_seed" => self.salt_seed = parse_int(v)?,
            "seed" => self.seed = parse_int(v)?,
            "r_max" => self.r_max = parse_int(v)?,
            "cost.enc" => self.costs.enc = parse_int(v)?,
            "cost.bop" => self.costs.bop = parse_int(v)?,
            "cost.cmov" => self.costs.cmov = parse_int(v)?,
            "cost.seq" => self.costs.seq = parse_int(v)?,
            "hw.n" => self.hw_n = parse_int(v)?,
            "hw.s" => self.hw_s = parse_int(v)?,
            "hw.rounds" => self.hw_rounds = parse_int(v)?,
            "hw.cache_lines" => self.hw_cache_lines = parse_int(v)?,
            "hw.miss_latency" => self.hw_miss_latency = parse_int(v)?,
            "hw.key" => self.hw_key = parse_int(v)?,
            "output" => self.output = v.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn get(&self, key: &str) -> String {
        match key {
            "n" => self.n.to_string(),
            "s" => self.s.to_string(),
            "rounds" => self.rounds.to_string(),
            "key_seed" => self.key_seed.to_string(),
            "salt_seed" => self.salt_seed.to_string(),
            "seed" => format!("{:#x}", self.seed),
            "r_max" => self.r_max.to_string(),
            "cost.enc" => self.costs.enc.to_string(),
            "cost.bop" => self.costs.bop.to_string(),
            "cost.cmov" => self.costs.cmov.to_string(),
            "cost.seq" => self.costs.seq.to_string(),
            "hw.n" => self.hw_n.to_string(),
            "hw.s" => self.hw_s.to_string(),
            "hw.rounds" => self.hw_rounds.to_string(),
            "hw.cache_lines" => self.hw_cache_lines.to_string(),
            "hw.miss_latency" => self.hw_miss_latency.to_string(),
            "hw.key" => format!("{:#b}", self.hw_key),
            "output" => self.output.to_string(),
            _ => unreachable!("not a config key: {key}"),
        }
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn merge_str(mut self, text: &str) -> Result<RunConfig, ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("expected `key = value`, got `{body}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            match self.set(k, v) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: k.to_string(),
                    })
                }
                Err(msg) => {
                    return Err(ConfigError::Value {
                        line,
                        key: k.to_string(),
                        msg,
                    })
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::default().merge_str(&text)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RunConfig::default().merge_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.to_file_string().parse::<RunConfig>().unwrap(), c);
    }

    #[test]
    fn comments_hex_and_overrides() {
        let c: RunConfig = "# header\nn = 3 # trailing\nseed = 0xff\nhw.key = 0b101\noutput=json\n"
            .parse()
            .unwrap();
        assert_eq!((c.n, c.seed, c.hw_key, c.output), (3, 255, 5, OutputMode::Json));
        assert_eq!(c.s, RunConfig::default().s);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(
            "n = 2\nbogus = 1".parse::<RunConfig>(),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            "n 2".parse::<RunConfig>(),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            "n = x".parse::<RunConfig>(),
            Err(ConfigError::Value { line: 1, .. })
        ));
        assert!(matches!(
            "r_max = 300".parse::<RunConfig>(),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn invariants_enforced() {
        assert!(matches!("n = 0".parse::<RunConfig>(), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            "cost.bop = 0".parse::<RunConfig>(),
            Err(ConfigError::Invalid(_))
        ));
        "cost.seq = 0".parse::<RunConfig>().unwrap();
    }

    proptest! {
        #[test]
        fn round_trips(n in 1u32..20, s in 1u32..20, rounds in 4u32..=32, seed: u64, key_seed: u64,
                       enc in 1u64..9, bop in 1u64..9, cmov in 1u64..9, seq in 0u64..9,
                       r_max in 1u8..=16, hw_key: u64, json: bool) {
            let c = RunConfig {
                n, s, rounds, seed, key_seed,
                costs: CostTable { enc, bop, cmov, seq },
                r_max,
                hw_key,
                output: if json { OutputMode::Json } else { OutputMode::Text },
                ..RunConfig::default()
            };
            prop_assert_eq!(c.to_file_string().parse::<RunConfig>().unwrap(), c);
        }
    }
}
