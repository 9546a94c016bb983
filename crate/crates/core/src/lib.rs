//! Noninterference and information-flow checking for a sequestered-encryption
//! enclave: an ISA-level interpreter with a security type system, and an
//! RTL-level circuit IR with taint and two-trace checkers.

pub mod attack;
pub mod config;
pub mod crypto;
pub mod enclaves;
pub mod hwir;
pub mod ift;
pub mod interp;
pub mod lang;
pub mod nicheck;
pub mod suite;
pub mod typecheck;
