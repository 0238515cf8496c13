// SPDX-License-Identifier: Apache-2.0

use std::net::TcpStream;
use std::path::Path;
use std::time::Duration;

use serde_json::json;
use snpguard_core::provision::{codes, run_owner_attest, run_owner_provision, Framed};
use snpguard_core::{BundleManifest, OwnerSession, ProvisionError};

use crate::args::Cli;
use crate::exit;
use crate::support::{self, addr_from_env, read_ark, read_key, Trace};
use crate::{CmdResult, Failure, Output};

const IO_TIMEOUT: Duration = Duration::from_secs(60);

pub fn exit_code(e: &ProvisionError) -> i32 {
    match e {
        ProvisionError::Rejected(_) | ProvisionError::WeakKey | ProvisionError::Authentication => {
            exit::VERIFICATION
        }
        ProvisionError::Unlock => exit::UNLOCK,
        ProvisionError::Remote { code, .. } => match *code {
            codes::UNLOCK_FAILED => exit::UNLOCK,
            codes::VERIFICATION_FAILED | codes::UNWRAP_FAILED => exit::VERIFICATION,
            _ => exit::TRANSPORT,
        },
        // Peer misbehaviour or a dead connection.
        ProvisionError::Wire(_)
        | ProvisionError::UnexpectedMessage { .. }
        | ProvisionError::SpUnavailable
        | ProvisionError::State { .. } => exit::TRANSPORT,
    }
}

struct Prepared {
    session: OwnerSession,
    channel: Framed<TcpStream>,
    expected: String,
}

fn prepare(cli: &Cli, addr: &str, manifest: &Path, trace: &mut Trace) -> Result<Prepared, Failure> {
    let text = support::read(manifest)?;
    let manifest = std::str::from_utf8(&text)
        .map_err(|e| Failure::input(format!("{}: {e}", manifest.display())))
        .and_then(|t| BundleManifest::from_json(t).map_err(Failure::input))?;
    let expected = manifest.launch_digest().map_err(Failure::input)?;
    let ark = read_ark(cli.ark.as_deref())?;
    let addr = addr_from_env(addr, cli.port)?;
    trace.event(json!({ "event": "connect", "addr": addr }));
    let stream = TcpStream::connect(&addr).map_err(|e| {
        Failure::new(exit::TRANSPORT, format!("connect {addr}: {e}"))
            .with_report(json!({ "verdict": "error", "reason": "transport" }))
    })?;
    stream
        .set_read_timeout(Some(IO_TIMEOUT))
        .map_err(|e| Failure::new(exit::TRANSPORT, e))?;
    Ok(Prepared {
        session: OwnerSession::new(expected, ark),
        channel: Framed(stream),
        expected: expected.to_hex(),
    })
}

fn failure(e: ProvisionError, trace: &mut Trace) -> Failure {
    let code = exit_code(&e);
    let verdict = if code == exit::VERIFICATION {
        "reject"
    } else {
        "error"
    };
    trace.event(json!({ "event": "verdict", "verdict": verdict, "reason": e.code() }));
    Failure::new(code, &e).with_report(json!({ "verdict": verdict, "reason": e.code() }))
}

pub fn attest(cli: &Cli, addr: &str, manifest: &Path, trace: &mut Trace) -> CmdResult {
    let mut p = prepare(cli, addr, manifest, trace)?;
    run_owner_attest(&mut p.channel, &mut p.session).map_err(|e| failure(e, trace))?;
    trace.event(json!({ "event": "verdict", "verdict": "accept" }));
    Ok(Output::Json(
        json!({ "verdict": "accept", "measurement": p.expected }),
    ))
}

pub fn provision(
    cli: &Cli,
    addr: &str,
    manifest: &Path,
    keyfile: &Path,
    trace: &mut Trace,
) -> CmdResult {
    let key = read_key(keyfile)?;
    let mut p = prepare(cli, addr, manifest, trace)?;
    run_owner_provision(&mut p.channel, &mut p.session, &key).map_err(|e| failure(e, trace))?;
    trace.event(json!({ "event": "verdict", "verdict": "provisioned" }));
    Ok(Output::Json(
        json!({ "verdict": "provisioned", "measurement": p.expected }),
    ))
}
