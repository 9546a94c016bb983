//! The guide under `book/`, one module per chapter so doctest failures point
//! at the chapter they came from.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}
#[doc = include_str!("../../../book/src/isa.md")]
pub mod isa {}
#[doc = include_str!("../../../book/src/types.md")]
pub mod types {}
#[doc = include_str!("../../../book/src/crypto.md")]
pub mod crypto {}
#[doc = include_str!("../../../book/src/circuits.md")]
pub mod circuits {}
#[doc = include_str!("../../../book/src/enclaves.md")]
pub mod enclaves {}
#[doc = include_str!("../../../book/src/checking.md")]
pub mod checking {}
#[doc = include_str!("../../../book/src/attack.md")]
pub mod attack {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
