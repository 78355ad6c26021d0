//! Command implementations behind the `tea` binary.

pub mod cmd;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use tea_core::TeaError;

/// Name of the generator behind every seeded command.
pub const RNG_NAME: &str = "ChaCha8";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or unusable input; exit code 2.
    Usage(String),
    /// A check ran and did not pass, or training diverged; exit code 1.
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<TeaError> for CliError {
    fn from(e: TeaError) -> Self {
        match e {
            TeaError::Diverged { .. } | TeaError::NonFinite(_) => CliError::Failed(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Whether every check in the invoked suite passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }

    pub fn and(self, other: Outcome) -> Outcome {
        Outcome::from_bool(self == Outcome::Pass && other == Outcome::Pass)
    }
}

pub type CliResult = Result<Outcome, CliError>;

pub fn exit_code(r: &CliResult) -> i32 {
    match r {
        Ok(Outcome::Pass) => 0,
        Ok(Outcome::Fail) | Err(CliError::Failed(_)) => 1,
        Err(CliError::Usage(_)) => 2,
    }
}

/// `HxWxD` image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("expected HxWxD, got {s:?}"))?;
        match parts[..] {
            [h, w, d] if h > 0 && w > 0 && d > 0 => Ok(Size { h, w, d }),
            _ => Err(format!("expected HxWxD with positive sides, got {s:?}")),
        }
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.d)
    }
}

/// Comma separated list of positive integers.
pub fn parse_list(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("expected a list of positive integers, got {s:?}")))
        })
        .collect()
}

/// First line of every command's output.
pub fn header(out: &mut dyn Write, command: &str, seed: Option<u64>, extra: &str) -> std::io::Result<()> {
    match seed {
        Some(seed) => writeln!(out, "# tea {command} rng={RNG_NAME} seed={seed}{extra}"),
        None => writeln!(out, "# tea {command}{extra}"),
    }
}
