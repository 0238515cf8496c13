// SPDX-License-Identifier: Apache-2.0

//! Guest boot simulator.
//!
//! Drives one boot through the measured chain: firmware re-verifies the
//! injected component hashes, then early userspace either mounts a verity
//! root using the root hash from the measured command line, or pauses to
//! receive the disk key over a provisioning channel. Control finally passes
//! to `/init` on the second-stage root.
//!
//! Failures never panic; they end the boot in [`Stage::BootFailed`] with a
//! machine-readable reason. The root filesystem is read-only. Paths listed
//! as writable mounts live in an in-memory overlay that is discarded with
//! the [`RunningSystem`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{mpsc, Arc};

use rand::RngCore;
use serde::Serialize;
use thiserror::Error;

use crate::attestation::{CertChain, SpState};
use crate::blockdev::BlockSource;
use crate::cryptdisk::{self, CryptError, CryptHeader};
use crate::imaging::{
    self, parse_path_list, path_under, Archive, Bundle, INIT_PATH, REGENERATE_PATH, WRITABLE_PATH,
};
use crate::measurement::{verify_first_stage, Component, FirmwareImage};
use crate::provision::{serve_provisioning, Channel, GuestSession, UnlockRefused};
use crate::verity::{self, MerkleTree, VerityError, VerityMetadata};

/// Why a boot stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BootFailure {
    ComponentMismatch(Component),
    InvalidVcpuState,
    MissingRootHash,
    RootMismatch,
    IntegrityViolation { block: u64 },
    MalformedDisk(String),
    MissingInit,
    NoChannel,
    Provisioning(String),
    Unlock,
}

impl BootFailure {
    pub fn code(&self) -> String {
        match self {
            BootFailure::ComponentMismatch(c) => format!("{c}_mismatch"),
            BootFailure::InvalidVcpuState => "invalid_vcpu_state".into(),
            BootFailure::MissingRootHash => "missing_root_hash".into(),
            BootFailure::RootMismatch => "root_mismatch".into(),
            BootFailure::IntegrityViolation { .. } => "integrity_violation".into(),
            BootFailure::MalformedDisk(_) => "malformed_disk".into(),
            BootFailure::MissingInit => "missing_init".into(),
            BootFailure::NoChannel => "no_channel".into(),
            BootFailure::Provisioning(_) => "provisioning_failed".into(),
            BootFailure::Unlock => "unlock".into(),
        }
    }
}

impl fmt::Display for BootFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BootFailure::IntegrityViolation { block } => {
                write!(f, "integrity violation in block {block}")
            }
            BootFailure::MalformedDisk(d) => write!(f, "malformed disk: {d}"),
            BootFailure::Provisioning(d) => write!(f, "provisioning failed: {d}"),
            other => f.write_str(&other.code()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    FirmwareFailed,
    FirstStageVerified,
    Provisioned,
    SecondStageRunning,
    BootFailed(BootFailure),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::FirmwareFailed => "firmware_failed",
            Stage::FirstStageVerified => "first_stage_verified",
            Stage::Provisioned => "provisioned",
            Stage::SecondStageRunning => "second_stage_running",
            Stage::BootFailed(_) => "boot_failed",
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Stage::FirstStageVerified => 1,
            Stage::Provisioned => 2,
            Stage::SecondStageRunning => 3,
            Stage::FirmwareFailed | Stage::BootFailed(_) => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BootEvent {
    pub seq: u32,
    pub stage: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootOutcome {
    pub stage: Stage,
    pub regenerated_paths: Vec<String>,
    pub writable_paths: Vec<String>,
    pub transcript: Vec<BootEvent>,
}

impl BootOutcome {
    fn new() -> Self {
        BootOutcome {
            stage: Stage::FirstStageVerified,
            regenerated_paths: Vec::new(),
            writable_paths: Vec::new(),
            transcript: Vec::new(),
        }
    }

    pub fn is_running(&self) -> bool {
        self.stage == Stage::SecondStageRunning
    }

    pub fn failure(&self) -> Option<&BootFailure> {
        match &self.stage {
            Stage::BootFailed(f) => Some(f),
            _ => None,
        }
    }

    /// Advances the stage; the order never regresses.
    fn advance(&mut self, stage: Stage, message: impl Into<String>) {
        debug_assert!(stage.rank() >= self.stage.rank(), "stage regressed");
        self.log(stage.name(), message);
        self.stage = stage;
    }

    fn fail(&mut self, failure: BootFailure) {
        let msg = failure.to_string();
        self.advance(Stage::BootFailed(failure), msg);
    }

    fn log(&mut self, stage: &'static str, message: impl Into<String>) {
        self.transcript.push(BootEvent {
            seq: self.transcript.len() as u32,
            stage,
            message: message.into(),
        });
    }

    /// Summary object: stage, reason code, regenerated and writable paths.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "stage": self.stage.name(),
            "reason": self.failure().map(|f| f.code()),
            "detail": self.failure().map(|f| f.to_string()),
            "regenerated_paths": self.regenerated_paths,
            "writable_paths": self.writable_paths,
        })
    }

    /// Transcript as line-delimited JSON.
    pub fn transcript_jsonl(&self) -> String {
        self.transcript
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }
}

/// Second-stage disks as the hypervisor attaches them. Metadata and header
/// are raw bytes: the guest decodes them itself.
pub enum SecondStageDisks {
    Verity {
        meta: Vec<u8>,
        tree: Vec<u8>,
        image: Box<dyn BlockSource>,
    },
    Encrypted {
        header: Vec<u8>,
        cipher: Box<dyn BlockSource>,
        tags: Box<dyn BlockSource>,
    },
}

/// What the encrypted workflow needs to obtain its key: the platform's
/// secure processor and the channel the owner will connect on.
pub struct Provisioning {
    pub sp: Arc<SpState>,
    pub chain: CertChain,
    pub channel: Box<dyn Channel + Send>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0} is on a read-only mount")]
pub struct ReadOnlyViolation(pub String);

/// The booted second stage: a read-only root plus in-memory writable mounts.
#[derive(Debug)]
pub struct RunningSystem {
    root: Archive,
    overlay: BTreeMap<String, Vec<u8>>,
    writable: Vec<String>,
}

impl RunningSystem {
    pub fn root(&self) -> &Archive {
        &self.root
    }

    pub fn writable_mounts(&self) -> &[String] {
        &self.writable
    }

    pub fn is_writable(&self, path: &str) -> bool {
        self.writable.iter().any(|m| path_under(path, m))
    }

    pub fn write_file(&mut self, path: &str, bytes: &[u8]) -> Result<(), ReadOnlyViolation> {
        if !self.is_writable(path) {
            return Err(ReadOnlyViolation(path.to_string()));
        }
        self.overlay.insert(path.to_string(), bytes.to_vec());
        Ok(())
    }

    /// Overlay first, then the read-only root.
    pub fn read_file(&self, path: &str) -> Option<&[u8]> {
        self.overlay
            .get(path)
            .map(Vec::as_slice)
            .or_else(|| self.root.get(path))
    }

    pub fn init(&self) -> &[u8] {
        self.root.get(INIT_PATH).expect("running system has /init")
    }
}

/// Runs one boot. Returns the outcome and, if the second stage is running,
/// the system handle.
pub fn boot(
    bundle: &Bundle,
    disks: SecondStageDisks,
    provisioning: Option<Provisioning>,
) -> (BootOutcome, Option<RunningSystem>) {
    let mut outcome = BootOutcome::new();
    let running = boot_inner(bundle, disks, provisioning, &mut outcome);
    debug_assert_eq!(running.is_some(), outcome.is_running());
    (outcome, running)
}

fn boot_inner(
    bundle: &Bundle,
    disks: SecondStageDisks,
    provisioning: Option<Provisioning>,
    out: &mut BootOutcome,
) -> Option<RunningSystem> {
    let firmware = match FirmwareImage::parse(bundle.firmware.clone()) {
        Ok(fw) => fw,
        Err(e) => {
            out.advance(Stage::FirmwareFailed, e.to_string());
            return None;
        }
    };
    let cmdline = &bundle.manifest.cmdline;
    if let Err(component) = verify_first_stage(
        &firmware,
        &bundle.kernel,
        &bundle.initramfs,
        cmdline.as_bytes(),
    ) {
        out.fail(BootFailure::ComponentMismatch(component));
        return None;
    }
    out.advance(
        Stage::FirstStageVerified,
        "component hashes match firmware table",
    );

    let root = match disks {
        SecondStageDisks::Verity { meta, tree, image } => {
            mount_verity(cmdline, &meta, &tree, image, out)
        }
        SecondStageDisks::Encrypted {
            header,
            cipher,
            tags,
        } => {
            let Some(prov) = provisioning else {
                out.fail(BootFailure::NoChannel);
                return None;
            };
            let Ok(vcpu) = bundle.manifest.vcpu() else {
                out.fail(BootFailure::InvalidVcpuState);
                return None;
            };
            let session = GuestSession::launched(prov.sp, prov.chain, &firmware, &vcpu);
            mount_encrypted(&header, cipher, tags, session, prov.channel, out)
        }
    }?;
    switch_root(root, out)
}

fn mount_verity(
    cmdline: &str,
    meta: &[u8],
    tree: &[u8],
    image: Box<dyn BlockSource>,
    out: &mut BootOutcome,
) -> Option<(Archive, Vec<String>)> {
    let expected = match imaging::parse_verity_root(cmdline) {
        Some(Ok(root)) => root,
        _ => {
            out.fail(BootFailure::MissingRootHash);
            return None;
        }
    };
    let decoded =
        VerityMetadata::decode(meta).and_then(|m| MerkleTree::from_bytes(tree, &m).map(|t| (m, t)));
    let (meta, tree) = match decoded {
        Ok(v) => v,
        Err(e) => {
            out.fail(BootFailure::MalformedDisk(e.to_string()));
            return None;
        }
    };
    let reader = match verity::open_verified(meta, tree, image, &expected) {
        Ok(r) => r,
        Err(VerityError::RootMismatch) => {
            out.fail(BootFailure::RootMismatch);
            return None;
        }
        Err(e) => {
            out.fail(BootFailure::MalformedDisk(e.to_string()));
            return None;
        }
    };
    out.log(
        "verity",
        format!("opened verity root {}", hex::encode(expected)),
    );
    let bytes = match reader.read_all() {
        Ok(b) => b,
        Err(VerityError::IntegrityViolation { block }) => {
            out.fail(BootFailure::IntegrityViolation { block });
            return None;
        }
        Err(e) => {
            out.fail(BootFailure::MalformedDisk(e.to_string()));
            return None;
        }
    };
    match Archive::unpack_padded(&bytes) {
        Ok(root) => {
            let regenerate = root
                .get(REGENERATE_PATH)
                .map(parse_path_list)
                .unwrap_or_default();
            Some((root, regenerate))
        }
        Err(e) => {
            out.fail(BootFailure::MalformedDisk(e.to_string()));
            None
        }
    }
}

fn mount_encrypted(
    header: &[u8],
    cipher: Box<dyn BlockSource>,
    tags: Box<dyn BlockSource>,
    mut session: GuestSession,
    mut channel: Box<dyn Channel + Send>,
    out: &mut BootOutcome,
) -> Option<(Archive, Vec<String>)> {
    let header = match CryptHeader::decode(header) {
        Ok(h) => h,
        Err(e) => {
            out.fail(BootFailure::MalformedDisk(e.to_string()));
            return None;
        }
    };
    out.log("provisioning", "waiting for disk key");

    // The channel handler runs concurrently; the boot side owns the disk and
    // answers each delivered key with the unlock result.
    let (key_tx, key_rx) = mpsc::channel();
    let (ack_tx, ack_rx) = mpsc::channel::<bool>();
    let (handler_result, unlocked) = std::thread::scope(|scope| {
        let handler = scope.spawn(move || {
            serve_provisioning(&mut channel, &mut session, |key| {
                key_tx.send(key).map_err(|_| UnlockRefused)?;
                match ack_rx.recv() {
                    Ok(true) => Ok(()),
                    _ => Err(UnlockRefused),
                }
            })
        });
        let unlocked = match key_rx.recv() {
            Ok(key) => {
                let r = cryptdisk::open_encrypted(header, cipher, tags, &key);
                let _ = ack_tx.send(r.is_ok());
                Some(r)
            }
            Err(_) => None,
        };
        (
            handler.join().expect("provisioning handler panicked"),
            unlocked,
        )
    });

    let reader = match unlocked {
        Some(Ok(reader)) => reader,
        Some(Err(CryptError::UnlockFailed)) => {
            out.fail(BootFailure::Unlock);
            return None;
        }
        Some(Err(e)) => {
            out.fail(BootFailure::MalformedDisk(e.to_string()));
            return None;
        }
        None => {
            let detail = handler_result
                .err()
                .map(|e| e.code())
                .unwrap_or_else(|| "no key delivered".into());
            out.fail(BootFailure::Provisioning(detail));
            return None;
        }
    };
    if let Err(e) = handler_result {
        out.log("provisioning", format!("owner acknowledgement failed: {e}"));
    }
    out.advance(Stage::Provisioned, "disk unlocked");

    let bytes = match reader.read_all() {
        Ok(b) => b,
        Err(CryptError::Authentication { block }) => {
            out.fail(BootFailure::IntegrityViolation { block });
            return None;
        }
        Err(e) => {
            out.fail(BootFailure::MalformedDisk(e.to_string()));
            return None;
        }
    };
    match Archive::unpack(&bytes) {
        Ok(root) => Some((root, Vec::new())),
        Err(e) => {
            out.fail(BootFailure::MalformedDisk(e.to_string()));
            None
        }
    }
}

fn switch_root(
    (root, regenerate): (Archive, Vec<String>),
    out: &mut BootOutcome,
) -> Option<RunningSystem> {
    if !root.contains(INIT_PATH) {
        out.fail(BootFailure::MissingInit);
        return None;
    }
    let writable = root
        .get(WRITABLE_PATH)
        .map(parse_path_list)
        .unwrap_or_default();
    let mut overlay = BTreeMap::new();
    for path in &regenerate {
        let mut marker = vec![0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut marker);
        overlay.insert(path.clone(), marker);
        out.log("early_userspace", format!("regenerated {path}"));
    }
    out.regenerated_paths = regenerate;
    out.writable_paths = writable.clone();
    out.advance(
        Stage::SecondStageRunning,
        format!("switch_root to {INIT_PATH}"),
    );
    Some(RunningSystem {
        root,
        overlay,
        writable,
    })
}
