// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use snpguard_core::{CertChain, DiskKey, SpState};

use crate::Failure;

pub const PORT_ENV: &str = "SNPGUARD_PORT";

pub fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

pub fn read_opt(path: Option<&Path>, flag: &str) -> Result<Vec<u8>, Failure> {
    match path {
        Some(p) => read(p),
        None => Err(Failure::usage(format!(
            "--{flag} is required for this mode"
        ))),
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

/// Accepts 32 raw bytes or 64 hex characters (surrounding whitespace ignored).
fn decode_32(bytes: &[u8], what: &str, path: &Path) -> Result<[u8; 32], Failure> {
    if let Ok(raw) = <[u8; 32]>::try_from(bytes) {
        return Ok(raw);
    }
    let mut out = [0u8; 32];
    std::str::from_utf8(bytes)
        .ok()
        .and_then(|s| hex::decode_to_slice(s.trim(), &mut out).ok())
        .map(|_| out)
        .ok_or_else(|| Failure::input(format!("{}: not a 32-byte {what}", path.display())))
}

pub fn read_key(path: &Path) -> Result<DiskKey, Failure> {
    Ok(DiskKey::from_bytes(decode_32(
        &read(path)?,
        "disk key",
        path,
    )?))
}

/// Reads the key at `path`, or creates it (owner-only permissions) with a
/// fresh random key. Returns whether the file was created.
pub fn load_or_create_key(path: &Path) -> Result<(DiskKey, bool), Failure> {
    if path.exists() {
        return Ok((read_key(path)?, false));
    }
    let key = DiskKey::generate();
    let mut opts = OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    std::os::unix::fs::OpenOptionsExt::mode(&mut opts, 0o600);
    opts.open(path)
        .and_then(|mut f| f.write_all(key.as_bytes()))
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    Ok((key, true))
}

pub fn read_ark(path: Option<&Path>) -> Result<[u8; 32], Failure> {
    let path = path.ok_or_else(|| Failure::usage("--ark is required"))?;
    decode_32(&read(path)?, "ARK public key", path)
}

/// Simulated SP state as persisted by `sp init`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SpFile {
    pub chip_secret: String,
    pub tcb_version: u64,
    pub cert_chain: String,
}

impl SpFile {
    pub fn new(sp: &SpState, chain: &CertChain) -> Self {
        SpFile {
            chip_secret: hex::encode(sp.chip_secret()),
            tcb_version: sp.tcb_version(),
            cert_chain: hex::encode(chain.encode()),
        }
    }

    pub fn load(path: &Path) -> Result<(Arc<SpState>, CertChain), Failure> {
        let bad = |what: &str| Failure::input(format!("{}: {what}", path.display()));
        let file: SpFile = serde_json::from_slice(&read(path)?).map_err(|e| bad(&e.to_string()))?;
        let mut secret = [0u8; 32];
        hex::decode_to_slice(&file.chip_secret, &mut secret).map_err(|_| bad("bad chip_secret"))?;
        let chain = hex::decode(&file.cert_chain)
            .ok()
            .and_then(|b| CertChain::decode(&b).ok())
            .ok_or_else(|| bad("bad cert_chain"))?;
        Ok((Arc::new(SpState::new(secret, file.tcb_version)), chain))
    }
}

/// Applies the port override to `addr` (`host:port`). The environment
/// variable wins over the flag, which wins over the address itself.
pub fn resolve_addr(addr: &str, flag: Option<u16>, env: Option<&str>) -> Result<String, Failure> {
    let port = match env {
        Some(v) => Some(
            v.trim()
                .parse::<u16>()
                .map_err(|_| Failure::usage(format!("{PORT_ENV}={v:?} is not a port")))?,
        ),
        None => flag,
    };
    let Some((host, current)) = addr.rsplit_once(':') else {
        return Err(Failure::usage(format!(
            "address {addr:?} must be host:port"
        )));
    };
    if current.parse::<u16>().is_err() {
        return Err(Failure::usage(format!(
            "address {addr:?} has no valid port"
        )));
    }
    Ok(match port {
        Some(p) => format!("{host}:{p}"),
        None => addr.to_string(),
    })
}

pub fn addr_from_env(addr: &str, flag: Option<u16>) -> Result<String, Failure> {
    resolve_addr(addr, flag, std::env::var(PORT_ENV).ok().as_deref())
}

/// Line-delimited JSON event sink; a no-op without `--trace`.
pub struct Trace(Option<File>);

impl Trace {
    pub fn open(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Trace(None)),
            Some(p) => OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map(|f| Trace(Some(f)))
                .map_err(|e| Failure::input(format!("{}: {e}", p.display()))),
        }
    }

    pub fn event(&mut self, event: Value) {
        self.raw(&format!("{event}\n"));
    }

    pub fn raw(&mut self, lines: &str) {
        if let Some(f) = &mut self.0 {
            // Tracing is best effort and never changes the command outcome.
            let _ = f.write_all(lines.as_bytes());
        }
    }
}
