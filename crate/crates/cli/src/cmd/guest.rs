// SPDX-License-Identifier: Apache-2.0

use std::fs::File;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use snpguard_core::bootsim::Provisioning;
use snpguard_core::measurement::verify_first_stage;
use snpguard_core::provision::{serve_agent, Channel, Framed, Message, WireError};
use snpguard_core::{
    BootFailure, BootOutcome, Bundle, CertChain, FirmwareImage, GuestSession, SecondStageDisks,
    SpState, Stage,
};

use crate::args::{BootArgs, Cli, Mode};
use crate::exit;
use crate::support::{addr_from_env, read_opt, SpFile, Trace};
use crate::{CmdResult, Failure, Output};

const IO_TIMEOUT: Duration = Duration::from_secs(60);

fn load_bundle(dir: &Path) -> Result<Bundle, Failure> {
    Bundle::load(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))
}

fn bind(cli: &Cli, listen: &str, stderr: &mut dyn Write) -> Result<TcpListener, Failure> {
    let addr = addr_from_env(listen, cli.port)?;
    let listener = TcpListener::bind(&addr)
        .map_err(|e| Failure::new(exit::TRANSPORT, format!("bind {addr}: {e}")))?;
    let local = listener
        .local_addr()
        .map_err(|e| Failure::new(exit::TRANSPORT, e))?;
    let _ = writeln!(stderr, "listening on {local}");
    let _ = stderr.flush();
    Ok(listener)
}

/// Accepts the owner's connection on first use, so a guest that fails
/// before provisioning never takes a connection.
struct AcceptOnUse {
    listener: TcpListener,
    stream: Option<Framed<TcpStream>>,
}

impl AcceptOnUse {
    fn stream(&mut self) -> Result<&mut Framed<TcpStream>, WireError> {
        if self.stream.is_none() {
            let (s, _) = self.listener.accept()?;
            s.set_read_timeout(Some(IO_TIMEOUT))?;
            self.stream = Some(Framed(s));
        }
        Ok(self.stream.as_mut().expect("just set"))
    }
}

impl Channel for AcceptOnUse {
    fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        self.stream()?.send(msg)
    }

    fn recv(&mut self) -> Result<Message, WireError> {
        self.stream()?.recv()
    }
}

fn exit_code(outcome: &BootOutcome) -> i32 {
    match &outcome.stage {
        Stage::SecondStageRunning => exit::OK,
        Stage::BootFailed(BootFailure::Unlock) => exit::UNLOCK,
        Stage::BootFailed(BootFailure::Provisioning(code))
            if !matches!(
                code.as_str(),
                "verification_failed" | "unwrap_failed" | "weak_key"
            ) =>
        {
            exit::TRANSPORT
        }
        _ => exit::VERIFICATION,
    }
}

fn open_image(path: &Path) -> Result<Box<File>, Failure> {
    File::open(path)
        .map(Box::new)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn disks(args: &BootArgs) -> Result<SecondStageDisks, Failure> {
    Ok(match args.mode {
        Mode::Verity => SecondStageDisks::Verity {
            meta: read_opt(args.meta.as_deref(), "meta")?,
            tree: read_opt(args.tree.as_deref(), "tree")?,
            image: open_image(&args.image)?,
        },
        Mode::Encrypted => SecondStageDisks::Encrypted {
            header: read_opt(args.header.as_deref(), "header")?,
            tags: Box::new(read_opt(args.tags.as_deref(), "tags")?),
            cipher: open_image(&args.image)?,
        },
    })
}

pub fn boot(cli: &Cli, args: &BootArgs, trace: &mut Trace, stderr: &mut dyn Write) -> CmdResult {
    let bundle = load_bundle(&args.bundle)?;
    let disks = disks(args)?;
    let sp = args.sp.as_deref().map(SpFile::load).transpose()?;
    let listener = match (&args.listen, &sp) {
        (Some(l), Some(_)) => Some(bind(cli, l, stderr)?),
        (Some(_), None) => return Err(Failure::usage("--listen needs --sp")),
        (None, _) => None,
    };

    // Encrypted boots hand the listener to the provisioning channel; verity
    // boots keep it for the attestation agent.
    let (provisioning, agent_listener) = match (args.mode, listener) {
        (Mode::Encrypted, Some(listener)) => {
            let (sp, chain) = sp.clone().expect("checked with --listen");
            let channel = Box::new(AcceptOnUse {
                listener,
                stream: None,
            });
            (Some(Provisioning { sp, chain, channel }), None)
        }
        (Mode::Encrypted, None) => {
            return Err(Failure::usage("encrypted boot needs --listen and --sp"))
        }
        (Mode::Verity, listener) => (None, listener),
    };

    let (outcome, running) = snpguard_core::boot(&bundle, disks, provisioning);
    trace.raw(&outcome.transcript_jsonl());
    let mut report = outcome.to_json();
    let code = exit_code(&outcome);
    if code != exit::OK {
        let reason = outcome
            .failure()
            .map(|f| f.code())
            .unwrap_or_else(|| outcome.stage.name().into());
        return Err(Failure::new(code, format!("boot failed: {reason}")).with_report(report));
    }
    drop(running);

    if let (Some(listener), Some((sp, chain))) = (agent_listener, sp) {
        let results = attest_loop(&bundle, sp, chain, &listener, Some(args.sessions), trace)?;
        report["attestations"] = Value::from(results);
    }
    Ok(Output::Json(report))
}

/// Serves attestation sessions for the launched `bundle`; returns one
/// result code per session ("ok" or the failure code).
fn attest_loop(
    bundle: &Bundle,
    sp: Arc<SpState>,
    chain: CertChain,
    listener: &TcpListener,
    max: Option<usize>,
    trace: &mut Trace,
) -> Result<Vec<String>, Failure> {
    let fw = FirmwareImage::parse(bundle.firmware.clone())
        .map_err(|e| Failure::new(exit::VERIFICATION, e))?;
    let vcpu = bundle.manifest.vcpu().map_err(Failure::input)?;
    let results = Mutex::new(Vec::new());
    serve_agent(
        listener,
        max,
        || GuestSession::launched(sp.clone(), chain.clone(), &fw, &vcpu),
        |r| {
            let code = r.map_or_else(|e| e.code(), |_| "ok".to_string());
            results.lock().expect("results lock").push(code);
        },
    )
    .map_err(|e| Failure::new(exit::TRANSPORT, e))?;
    let results = results.into_inner().expect("results lock");
    for r in &results {
        trace.event(json!({ "event": "attestation_session", "result": r }));
    }
    Ok(results)
}

/// Attestation agent for an already launched first stage: the firmware
/// re-checks the components, then sessions are served until `max_sessions`.
pub fn agent(
    cli: &Cli,
    bundle: &Path,
    sp: &Path,
    listen: &str,
    max_sessions: Option<usize>,
    trace: &mut Trace,
    stderr: &mut dyn Write,
) -> CmdResult {
    let bundle = load_bundle(bundle)?;
    let (sp, chain) = SpFile::load(sp)?;
    let fw = FirmwareImage::parse(bundle.firmware.clone()).map_err(|e| {
        Failure::new(exit::VERIFICATION, format!("firmware: {e}"))
            .with_report(json!({ "stage": "firmware_failed", "reason": "firmware_failed" }))
    })?;
    let cmdline = bundle.manifest.cmdline.as_bytes();
    if let Err(component) = verify_first_stage(&fw, &bundle.kernel, &bundle.initramfs, cmdline) {
        let reason = BootFailure::ComponentMismatch(component).code();
        return Err(
            Failure::new(exit::VERIFICATION, format!("first stage: {reason}"))
                .with_report(json!({ "stage": "boot_failed", "reason": reason })),
        );
    }
    let listener = bind(cli, listen, stderr)?;
    let results = attest_loop(&bundle, sp, chain, &listener, max_sessions, trace)?;
    Ok(Output::Json(json!({
        "sessions": results.len(),
        "results": results,
    })))
}
