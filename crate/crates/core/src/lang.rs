//! Abstract syntax, parser and printer for SE ISA programs.
//!
//! The concrete `.se` syntax is line oriented:
//!
//! ```text
//! # comments run to end of line
//! enc r1
//! bop add r1 r2; skip
//! cmov r1 ? r2 <- r3 : r2 <- r4
//! ```
//!
//! Commands are separated by `;` or newlines. Registers are `r1..=rN`
//! (N defaults to [`DEFAULT_R_MAX`]) plus the distinguished `keyReg`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Register-file size used when none is configured.
pub const DEFAULT_R_MAX: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Register {
    /// `r<index>`, 1-based.
    Gp(u8),
    KeyReg,
}

impl Register {
    /// Dense slot index: `r1 -> 0`, ..., `keyReg -> r_max`.
    pub fn slot(self, r_max: u8) -> usize {
        match self {
            Register::Gp(i) => usize::from(i) - 1,
            Register::KeyReg => usize::from(r_max),
        }
    }

    pub fn from_slot(slot: usize, r_max: u8) -> Register {
        if slot == usize::from(r_max) {
            Register::KeyReg
        } else {
            Register::Gp(slot as u8 + 1)
        }
    }

    pub fn is_key(self) -> bool {
        matches!(self, Register::KeyReg)
    }

    /// All registers of a file of size `r_max`, general purpose first.
    pub fn all(r_max: u8) -> impl Iterator<Item = Register> {
        (1..=r_max).map(Register::Gp).chain(std::iter::once(Register::KeyReg))
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Register::Gp(i) => write!(f, "r{i}"),
            Register::KeyReg => f.write_str("keyReg"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BopKind {
    Add,
    Sub,
    Shl,
    Shr,
    And,
    Or,
    Xor,
    Lt,
    Eq,
}

impl BopKind {
    pub const ALL: [BopKind; 9] = [
        BopKind::Add,
        BopKind::Sub,
        BopKind::Shl,
        BopKind::Shr,
        BopKind::And,
        BopKind::Or,
        BopKind::Xor,
        BopKind::Lt,
        BopKind::Eq,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BopKind::Add => "add",
            BopKind::Sub => "sub",
            BopKind::Shl => "shl",
            BopKind::Shr => "shr",
            BopKind::And => "and",
            BopKind::Or => "or",
            BopKind::Xor => "xor",
            BopKind::Lt => "lt",
            BopKind::Eq => "eq",
        }
    }

    /// Applies the operator to two `width`-bit words.
    ///
    /// Arithmetic wraps, shift amounts are reduced modulo `width`, and the
    /// comparisons return all-ones for true and zero for false so their
    /// results can drive `cmov` directly.
    pub fn apply(self, a: u64, b: u64, width: u32) -> u64 {
        let mask = mask(width);
        let (a, b) = (a & mask, b & mask);
        let r = match self {
            BopKind::Add => a.wrapping_add(b),
            BopKind::Sub => a.wrapping_sub(b),
            BopKind::Shl => a << (b % u64::from(width)),
            BopKind::Shr => a >> (b % u64::from(width)),
            BopKind::And => a & b,
            BopKind::Or => a | b,
            BopKind::Xor => a ^ b,
            BopKind::Lt => bool_word(a < b, width),
            BopKind::Eq => bool_word(a == b, width),
        };
        r & mask
    }
}

impl fmt::Display for BopKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl FromStr for BopKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        BopKind::ALL.into_iter().find(|k| k.mnemonic() == s).ok_or(())
    }
}

/// Low `width` bits set.
pub fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

fn bool_word(b: bool, width: u32) -> u64 {
    if b {
        mask(width)
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    Skip,
    Enc(Register),
    Bop(BopKind, Register, Register),
    /// `if cond: dst <- src_true else dst <- src_false`. The single
    /// destination field is what enforces one assignment target.
    Cmov {
        cond: Register,
        dst: Register,
        src_true: Register,
        src_false: Register,
    },
}

impl Command {
    /// Every register the command reads or writes.
    pub fn registers(&self) -> Vec<Register> {
        match *self {
            Command::Skip => vec![],
            Command::Enc(r) => vec![r],
            Command::Bop(_, r1, r2) => vec![r1, r2],
            Command::Cmov {
                cond,
                dst,
                src_true,
                src_false,
            } => vec![cond, dst, src_true, src_false],
        }
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, Command::Skip)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Skip => f.write_str("skip"),
            Command::Enc(r) => write!(f, "enc {r}"),
            Command::Bop(k, a, b) => write!(f, "bop {k} {a} {b}"),
            Command::Cmov {
                cond,
                dst,
                src_true,
                src_false,
            } => write!(f, "cmov {cond} ? {dst} <- {src_true} : {dst} <- {src_false}"),
        }
    }
}

/// A non-empty, flat command sequence `c1; c2; ...; cn`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    commands: Vec<Command>,
}

impl Program {
    /// Returns `None` for an empty command list.
    pub fn new(commands: Vec<Command>) -> Option<Program> {
        (!commands.is_empty()).then_some(Program { commands })
    }

    pub fn single(c: Command) -> Program {
        Program { commands: vec![c] }
    }

    pub fn commands(&self) -> &[Command] {
        &self.commands
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The terminal configuration: a lone `skip`.
    pub fn is_terminal(&self) -> bool {
        self.commands == [Command::Skip]
    }

    pub fn mentions(&self, r: Register) -> bool {
        self.commands.iter().any(|c| c.registers().contains(&r))
    }

    /// Highest general-purpose register index used, if any.
    pub fn max_gp_index(&self) -> Option<u8> {
        self.commands
            .iter()
            .flat_map(|c| c.registers())
            .filter_map(|r| match r {
                Register::Gp(i) => Some(i),
                Register::KeyReg => None,
            })
            .max()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_program(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("empty program")]
    Empty,
    #[error("unknown instruction `{0}`")]
    UnknownInstruction(String),
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("`{instr}` expects {expected} operand(s), found {found}")]
    Arity {
        instr: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("cmov assigns `{first}` in one arm and `{second}` in the other")]
    CmovDestinationMismatch { first: Register, second: Register },
    #[error("malformed cmov, expected `cmov c ? d <- a : d <- b`")]
    MalformedCmov,
}

/// Parser settings; currently just the register-file size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Syntax {
    pub r_max: u8,
}

impl Default for Syntax {
    fn default() -> Self {
        Syntax { r_max: DEFAULT_R_MAX }
    }
}

/// Parses with the default register-file size.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    Syntax::default().parse(text)
}

pub fn format_program(p: &Program) -> String {
    p.commands.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("; ")
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

impl Syntax {
    pub fn parse(&self, text: &str) -> Result<Program, ParseError> {
        let mut commands = Vec::new();
        for (line_idx, raw_line) in text.lines().enumerate() {
            let line_no = line_idx + 1;
            let line = raw_line.split('#').next().unwrap_or("");
            let mut offset = 0;
            for segment in line.split(';') {
                let seg_start = offset;
                offset += segment.len() + 1;
                let tokens = tokenize(segment, seg_start);
                if tokens.is_empty() {
                    continue;
                }
                commands.push(self.parse_command(&tokens, line_no)?);
            }
        }
        Program::new(commands).ok_or(ParseError {
            line: 1,
            column: 1,
            kind: ParseErrorKind::Empty,
        })
    }

    fn parse_command(&self, tokens: &[Token<'_>], line: usize) -> Result<Command, ParseError> {
        let err = |column: usize, kind| ParseError { line, column, kind };
        let head = &tokens[0];
        let args = &tokens[1..];
        let arity = |instr: &'static str, expected: usize| {
            if args.len() == expected {
                Ok(())
            } else {
                Err(err(
                    head.column,
                    ParseErrorKind::Arity {
                        instr,
                        expected,
                        found: args.len(),
                    },
                ))
            }
        };
        match head.text {
            "skip" => {
                arity("skip", 0)?;
                Ok(Command::Skip)
            }
            "enc" => {
                arity("enc", 1)?;
                Ok(Command::Enc(self.register(&args[0], line)?))
            }
            "bop" => {
                arity("bop", 3)?;
                let kind = args[0].text.parse::<BopKind>().map_err(|_| {
                    err(
                        args[0].column,
                        ParseErrorKind::UnknownOperator(args[0].text.to_string()),
                    )
                })?;
                Ok(Command::Bop(
                    kind,
                    self.register(&args[1], line)?,
                    self.register(&args[2], line)?,
                ))
            }
            "cmov" => self.parse_cmov(head, args, line),
            other => Err(err(head.column, ParseErrorKind::UnknownInstruction(other.to_string()))),
        }
    }

    // cmov c ? d <- a : d <- b
    fn parse_cmov(&self, head: &Token<'_>, args: &[Token<'_>], line: usize) -> Result<Command, ParseError> {
        let shape = ["", "?", "", "<-", "", ":", "", "<-", ""];
        if args.len() != shape.len() {
            return Err(ParseError {
                line,
                column: head.column,
                kind: ParseErrorKind::MalformedCmov,
            });
        }
        for (tok, want) in args.iter().zip(shape) {
            if !want.is_empty() && tok.text != want {
                return Err(ParseError {
                    line,
                    column: tok.column,
                    kind: ParseErrorKind::MalformedCmov,
                });
            }
        }
        let cond = self.register(&args[0], line)?;
        let dst = self.register(&args[2], line)?;
        let src_true = self.register(&args[4], line)?;
        let dst2 = self.register(&args[6], line)?;
        let src_false = self.register(&args[8], line)?;
        if dst != dst2 {
            return Err(ParseError {
                line,
                column: args[6].column,
                kind: ParseErrorKind::CmovDestinationMismatch {
                    first: dst,
                    second: dst2,
                },
            });
        }
        Ok(Command::Cmov {
            cond,
            dst,
            src_true,
            src_false,
        })
    }

    fn register(&self, tok: &Token<'_>, line: usize) -> Result<Register, ParseError> {
        let unknown = || ParseError {
            line,
            column: tok.column,
            kind: ParseErrorKind::UnknownRegister(tok.text.to_string()),
        };
        if tok.text == "keyReg" {
            return Ok(Register::KeyReg);
        }
        let idx: u8 = tok
            .text
            .strip_prefix('r')
            .filter(|d| !d.starts_with('0') && d.chars().all(|c| c.is_ascii_digit()))
            .and_then(|d| d.parse().ok())
            .ok_or_else(unknown)?;
        if (1..=self.r_max).contains(&idx) {
            Ok(Register::Gp(idx))
        } else {
            Err(unknown())
        }
    }
}

/// Splits on whitespace, keeping `?`, `:` and `<-` as separate tokens even
/// when written without spaces. Columns are 1-based.
fn tokenize(segment: &str, base: usize) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let bytes = segment.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c == b'?' || c == b':' {
            i += 1;
        } else if c == b'<' && bytes.get(i + 1) == Some(&b'-') {
            i += 2;
        } else {
            while i < bytes.len() {
                let d = bytes[i];
                if d.is_ascii_whitespace() || d == b'?' || d == b':' || (d == b'<' && bytes.get(i + 1) == Some(&b'-')) {
                    break;
                }
                i += 1;
            }
        }
        out.push(Token {
            text: &segment[start..i],
            column: base + start + 1,
        });
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn arb_register(r_max: u8, allow_key: bool) -> impl Strategy<Value = Register> {
        let gp = (1..=r_max).prop_map(Register::Gp);
        if allow_key {
            prop_oneof![4 => gp, 1 => Just(Register::KeyReg)].boxed()
        } else {
            gp.boxed()
        }
    }

    pub(crate) fn arb_command(r_max: u8, allow_key: bool) -> impl Strategy<Value = Command> {
        let reg = move || arb_register(r_max, allow_key);
        prop_oneof![
            Just(Command::Skip),
            reg().prop_map(Command::Enc),
            (prop::sample::select(BopKind::ALL.to_vec()), reg(), reg()).prop_map(|(k, a, b)| Command::Bop(k, a, b)),
            (reg(), reg(), reg(), reg()).prop_map(|(cond, dst, src_true, src_false)| {
                Command::Cmov {
                    cond,
                    dst,
                    src_true,
                    src_false,
                }
            }),
        ]
    }

    pub(crate) fn arb_program(r_max: u8, allow_key: bool, max_len: usize) -> impl Strategy<Value = Program> {
        prop::collection::vec(arb_command(r_max, allow_key), 1..=max_len).prop_map(|cs| Program::new(cs).unwrap())
    }

    #[test]
    fn parses_single_enc() {
        let p = parse_program("enc r1").unwrap();
        assert_eq!(p.commands(), &[Command::Enc(Register::Gp(1))]);
    }

    #[test]
    fn parses_two_command_sequence() {
        let p = parse_program("enc r1; bop add r1 r2").unwrap();
        assert_eq!(
            p.commands(),
            &[
                Command::Enc(Register::Gp(1)),
                Command::Bop(BopKind::Add, Register::Gp(1), Register::Gp(2)),
            ]
        );
    }

    #[test]
    fn parses_cmov() {
        let p = parse_program("cmov r1 ? r2 <- r3 : r2 <- r4").unwrap();
        assert_eq!(
            p.commands(),
            &[Command::Cmov {
                cond: Register::Gp(1),
                dst: Register::Gp(2),
                src_true: Register::Gp(3),
                src_false: Register::Gp(4),
            }]
        );
        // tight spacing
        assert_eq!(parse_program("cmov r1?r2<-r3:r2<-r4").unwrap(), p);
    }

    #[test]
    fn cmov_destination_mismatch_is_rejected() {
        let e = parse_program("cmov r1 ? r2 <- r3 : r5 <- r4").unwrap_err();
        assert_eq!(e.line, 1);
        assert_eq!(e.column, 22);
        assert!(matches!(e.kind, ParseErrorKind::CmovDestinationMismatch { .. }));
    }

    #[test]
    fn formats_canonically() {
        assert_eq!(format_program(&Program::single(Command::Skip)), "skip");
        assert_eq!(
            format_program(&Program::single(Command::Enc(Register::KeyReg))),
            "enc keyReg"
        );
    }

    #[test]
    fn error_positions() {
        let e = parse_program("skip\n  enc r9").unwrap_err();
        assert_eq!((e.line, e.column), (2, 7));
        assert_eq!(e.kind, ParseErrorKind::UnknownRegister("r9".into()));

        let e = parse_program("bop add r1").unwrap_err();
        assert!(matches!(
            e.kind,
            ParseErrorKind::Arity {
                expected: 3,
                found: 2,
                ..
            }
        ));

        let e = parse_program("enc r1; jmp r2").unwrap_err();
        assert_eq!((e.line, e.column), (1, 9));

        let e = parse_program("bop mul r1 r2").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownOperator("mul".into()));

        assert_eq!(parse_program("# nothing\n\n").unwrap_err().kind, ParseErrorKind::Empty);
        assert!(parse_program("enc r0").is_err());
        assert!(parse_program("enc r01").is_err());
    }

    #[test]
    fn comments_and_newlines() {
        let p = parse_program("# header\nenc r1 # trailing\n\nskip;enc r2;").unwrap();
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn configurable_register_file() {
        let syntax = Syntax { r_max: 16 };
        assert!(syntax.parse("enc r16").is_ok());
        assert!(syntax.parse("enc r17").is_err());
    }

    #[test]
    fn bop_semantics() {
        assert_eq!(BopKind::Add.apply(3, 4, 4), 7);
        assert_eq!(BopKind::Add.apply(15, 1, 4), 0);
        assert_eq!(BopKind::Sub.apply(0, 1, 4), 15);
        assert_eq!(BopKind::Shl.apply(1, 5, 4), 2);
        assert_eq!(BopKind::Shr.apply(8, 7, 4), 1);
        assert_eq!(BopKind::Lt.apply(1, 2, 4), 15);
        assert_eq!(BopKind::Lt.apply(2, 1, 4), 0);
        assert_eq!(BopKind::Eq.apply(2, 2, 3), 7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn format_parse_round_trip(p in arb_program(DEFAULT_R_MAX, true, 8)) {
            prop_assert_eq!(parse_program(&format_program(&p)).unwrap(), p);
        }

        #[test]
        fn newline_separated_form_parses_the_same(p in arb_program(DEFAULT_R_MAX, true, 6)) {
            let text = p.commands().iter().map(|c| c.to_string()).collect::<Vec<_>>().join("\n");
            prop_assert_eq!(parse_program(&text).unwrap(), p);
        }
    }
}
