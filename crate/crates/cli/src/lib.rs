// SPDX-License-Identifier: Apache-2.0

//! `snpguard` command-line front end.
//!
//! Each command writes exactly one result to standard output (a hex line or
//! a JSON object) and diagnostics to standard error. Key material is only
//! ever read from files named on the command line.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;

use clap::Parser;
use serde_json::Value;

pub mod args;
mod cmd;
mod support;

pub use support::{resolve_addr, SpFile};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INPUT: i32 = 1;
    pub const TRANSPORT: i32 = 2;
    pub const VERIFICATION: i32 = 3;
    pub const UNLOCK: i32 = 4;
    pub const USAGE: i32 = 5;
}

/// A failed command: exit code, a diagnostic for stderr, and optionally a
/// machine-readable verdict for stdout.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
    pub report: Option<Value>,
}

impl Failure {
    pub fn new(code: i32, message: impl fmt::Display) -> Self {
        Failure {
            code,
            message: message.to_string(),
            report: None,
        }
    }

    pub fn input(message: impl fmt::Display) -> Self {
        Self::new(exit::INPUT, message)
    }

    pub fn usage(message: impl fmt::Display) -> Self {
        Self::new(exit::USAGE, message)
    }

    pub fn with_report(mut self, report: Value) -> Self {
        self.report = Some(report);
        self
    }
}

pub type CmdResult = Result<Output, Failure>;

/// What a successful command prints.
#[derive(Debug)]
pub enum Output {
    Hex(String),
    Json(Value),
}

/// Parses `argv` and runs the command, writing to the given streams.
/// Returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let text = e.render().to_string();
            let _ = if code == exit::OK {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match cmd::dispatch(&cli, stderr) {
        Ok(out) => {
            let _ = match out {
                Output::Hex(h) => writeln!(stdout, "{h}"),
                Output::Json(v) => writeln!(stdout, "{v}"),
            };
            exit::OK
        }
        Err(f) => {
            debug_assert_ne!(f.code, exit::OK);
            if let Some(report) = &f.report {
                let _ = writeln!(stdout, "{report}");
            }
            let _ = writeln!(stderr, "snpguard: {}", f.message);
            f.code
        }
    }
}
