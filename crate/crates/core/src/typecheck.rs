//! Two-point security type system over SE ISA programs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{Command, Program, Register};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Public,
    Private,
}

impl Label {
    pub fn join(self, other: Label) -> Label {
        self.max(other)
    }

    pub fn flows_to(self, other: Label) -> bool {
        self <= other
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Public => "public",
            Label::Private => "private",
        })
    }
}

/// `Γ`: every register is public except keyReg.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeEnv {
    r_max: u8,
}

impl TypeEnv {
    pub fn standard(r_max: u8) -> TypeEnv {
        TypeEnv { r_max }
    }

    pub fn r_max(&self) -> u8 {
        self.r_max
    }

    /// `None` outside the environment's domain.
    pub fn label(&self, r: Register) -> Option<Label> {
        match r {
            Register::KeyReg => Some(Label::Private),
            Register::Gp(i) if (1..=self.r_max).contains(&i) => Some(Label::Public),
            Register::Gp(_) => None,
        }
    }

    pub fn domain(&self) -> impl Iterator<Item = Register> {
        Register::all(self.r_max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subject {
    Program(String),
    Register(Register),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgmentKind {
    /// `Γ ⊢ e : ℓ`
    Value,
    /// `Γ ⊢ p : ℓ prog`
    Prog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub subject: Subject,
    pub label: Label,
    pub kind: JudgmentKind,
}

impl fmt::Display for Judgment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.subject, self.kind) {
            (Subject::Program(p), _) => write!(f, "⊢ {p} : {} prog", self.label),
            (Subject::Register(r), _) => write!(f, "⊢ {r} : {}", self.label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("command {command_index} (`{command}`): operand {register} must be {required}, found {found}")]
pub struct TypeError {
    pub command_index: usize,
    pub command: String,
    pub register: Register,
    pub required: Label,
    pub found: Label,
}

/// REG rule.
pub fn type_register(r: Register, env: &TypeEnv) -> Judgment {
    Judgment {
        subject: Subject::Register(r),
        label: env.label(r).unwrap_or(Label::Private),
        kind: JudgmentKind::Value,
    }
}

fn command_judgment(c: &Command, env: &TypeEnv) -> Result<Label, (Register, Label)> {
    // SKIP is public; ENC, BOP and CMOV require every operand public.
    for r in c.registers() {
        let j = type_register(r, env);
        if !j.label.flows_to(Label::Public) {
            return Err((r, j.label));
        }
    }
    Ok(Label::Public)
}

/// Derives `Γ ⊢ p : public prog`, or reports the first command whose
/// operand is not public.
pub fn typecheck(p: &Program, env: &TypeEnv) -> Result<Judgment, TypeError> {
    let mut label = Label::Public;
    for (i, c) in p.commands().iter().enumerate() {
        let l = command_judgment(c, env).map_err(|(register, found)| TypeError {
            command_index: i,
            command: c.to_string(),
            register,
            required: Label::Public,
            found,
        })?;
        // SEQ
        label = label.join(l);
    }
    Ok(Judgment {
        subject: Subject::Program(p.to_string()),
        label,
        kind: JudgmentKind::Prog,
    })
}

pub fn is_well_typed(p: &Program, env: &TypeEnv) -> bool {
    typecheck(p, env).is_ok()
}
