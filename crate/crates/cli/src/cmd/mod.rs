// SPDX-License-Identifier: Apache-2.0

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::args::{Cli, Command, GuestCommand, OwnerCommand};
use crate::support::Trace;
use crate::CmdResult;

mod guest;
mod owner;
mod prep;

pub fn dispatch(cli: &Cli, stderr: &mut dyn Write) -> CmdResult {
    let mut trace = Trace::open(cli.trace.as_deref())?;
    match &cli.command {
        Command::Sp(c) => prep::sp(c),
        Command::Firmware(c) => prep::firmware(c),
        Command::Bundle(c) => prep::bundle(c),
        Command::Image(c) => prep::image(c),
        Command::Digest(a) => prep::digest(a),
        Command::Guest(GuestCommand::Boot(a)) => guest::boot(cli, a, &mut trace, stderr),
        Command::Guest(GuestCommand::Agent {
            bundle,
            sp,
            listen,
            max_sessions,
        }) => guest::agent(cli, bundle, sp, listen, *max_sessions, &mut trace, stderr),
        Command::Owner(OwnerCommand::Attest { addr, manifest }) => {
            owner::attest(cli, addr, manifest, &mut trace)
        }
        Command::Owner(OwnerCommand::Provision {
            addr,
            manifest,
            keyfile,
        }) => owner::provision(cli, addr, manifest, keyfile, &mut trace),
    }
}

/// `PREFIX.ext`, keeping any dots already in the prefix.
fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}
