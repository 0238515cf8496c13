// SPDX-License-Identifier: Apache-2.0

//! Offline artifact preparation on the owner's side.
//!
//! Root filesystems are carried as a canonical archive: entries sorted by
//! path, each with a mode and content. An archive becomes a second-stage
//! disk either as a verity-protected plain image (SSH host keys scrubbed,
//! since the image is readable by the host) or as an encrypted image (left
//! intact). First-stage bundles combine the hash-patched firmware with the
//! kernel, initramfs and command line plus the expected launch digest.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockdev::valid_block_size;
use crate::cryptdisk::{self, CryptError, DiskKey, EncryptedImage};
use crate::measurement::{compute_launch_digest, inject_hashes, FirmwareImage, VcpuState};
use crate::verity::{self, Hash, MerkleTree, VerityError, VerityMetadata, DEFAULT_BLOCK_SIZE};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SNPGARC1";
/// Stage-two entry point.
pub const INIT_PATH: &str = "/init";
/// Newline-separated list of paths that are writable (in memory) at runtime.
pub const WRITABLE_PATH: &str = "/.snpguard/writable";
/// Newline-separated list of scrubbed paths the guest regenerates at boot.
pub const REGENERATE_PATH: &str = "/.snpguard/regenerate";
/// Kernel command-line parameter carrying the verity root hash.
pub const ROOT_HASH_PARAM: &str = "verity_root_hash";

pub const DEFAULT_SCRUB_PREFIXES: &[&str] = &["/etc/ssh"];
pub const DEFAULT_WRITABLE_MOUNTS: &[&str] = &["/home", "/tmp", "/var"];

pub const FIRMWARE_FILE: &str = "firmware.bin";
pub const KERNEL_FILE: &str = "kernel.bin";
pub const INITRAMFS_FILE: &str = "initramfs.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("duplicate archive path {0}")]
    DuplicatePath(String),
    #[error("invalid archive path {0:?}")]
    InvalidPath(String),
    #[error("malformed archive: {0}")]
    Malformed(&'static str),
    #[error("archive has no {INIT_PATH} entry")]
    MissingInit,
    #[error("image configuration mismatch: {0}")]
    ModeMismatch(&'static str),
    #[error(transparent)]
    Verity(#[from] VerityError),
    #[error(transparent)]
    Crypt(#[from] CryptError),
    #[error(transparent)]
    Firmware(#[from] crate::measurement::FirmwareError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchiveEntry {
    pub path: String,
    pub mode: u32,
    pub content: Vec<u8>,
}

impl ArchiveEntry {
    pub fn file(path: impl Into<String>, content: impl Into<Vec<u8>>) -> Self {
        ArchiveEntry {
            path: path.into(),
            mode: 0o644,
            content: content.into(),
        }
    }
}

/// Canonical archive. Iteration and serialization are in byte order of
/// the paths, so equal entry sets always pack to identical bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Archive {
    entries: BTreeMap<String, (u32, Vec<u8>)>,
}

fn check_path(path: &str) -> Result<(), ImagingError> {
    if !path.starts_with('/') || path.len() > u16::MAX as usize {
        return Err(ImagingError::InvalidPath(path.to_string()));
    }
    Ok(())
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I>(entries: I) -> Result<Self, ImagingError>
    where
        I: IntoIterator<Item = ArchiveEntry>,
    {
        let mut archive = Archive::new();
        for e in entries {
            check_path(&e.path)?;
            if archive.entries.contains_key(&e.path) {
                return Err(ImagingError::DuplicatePath(e.path));
            }
            archive.entries.insert(e.path, (e.mode, e.content));
        }
        Ok(archive)
    }

    /// Collects every regular file under `dir`. Paths become absolute,
    /// `/`-separated and relative to `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, ImagingError> {
        let mut entries = Vec::new();
        for item in walkdir::WalkDir::new(dir).follow_links(false) {
            let item = item.map_err(io::Error::from)?;
            if !item.file_type().is_file() {
                continue;
            }
            let rel = item
                .path()
                .strip_prefix(dir)
                .expect("walkdir yields paths under its root");
            let mut path = String::new();
            for part in rel.components() {
                let part = part
                    .as_os_str()
                    .to_str()
                    .ok_or_else(|| ImagingError::InvalidPath(rel.display().to_string()))?;
                path.push('/');
                path.push_str(part);
            }
            entries.push(ArchiveEntry {
                path,
                mode: file_mode(&item.metadata().map_err(io::Error::from)?),
                content: fs::read(item.path())?,
            });
        }
        Self::from_entries(entries)
    }

    /// Inserts or replaces an entry.
    pub fn insert(&mut self, entry: ArchiveEntry) -> Result<(), ImagingError> {
        check_path(&entry.path)?;
        self.entries.insert(entry.path, (entry.mode, entry.content));
        Ok(())
    }

    pub fn remove(&mut self, path: &str) -> Option<ArchiveEntry> {
        self.entries
            .remove_entry(path)
            .map(|(path, (mode, content))| ArchiveEntry {
                path,
                mode,
                content,
            })
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        self.entries.get(path).map(|(_, c)| c.as_slice())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = ArchiveEntry> + '_ {
        self.entries.iter().map(|(p, (m, c))| ArchiveEntry {
            path: p.clone(),
            mode: *m,
            content: c.clone(),
        })
    }

    /// magic ‖ count u32 ‖ (path_len u16 ‖ path ‖ mode u32 ‖ len u64 ‖ content)*
    pub fn pack(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (path, (mode, content)) in &self.entries {
            out.extend_from_slice(&(path.len() as u16).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&mode.to_le_bytes());
            out.extend_from_slice(&(content.len() as u64).to_le_bytes());
            out.extend_from_slice(content);
        }
        out
    }

    /// Strict decode: canonical order, unique paths, no trailing bytes.
    pub fn unpack(bytes: &[u8]) -> Result<Self, ImagingError> {
        let (archive, used) = Self::unpack_prefix(bytes)?;
        if used != bytes.len() {
            return Err(ImagingError::Malformed("trailing bytes"));
        }
        Ok(archive)
    }

    /// Decode that tolerates zero padding after the last entry, as found on
    /// a block-aligned disk image.
    pub fn unpack_padded(bytes: &[u8]) -> Result<Self, ImagingError> {
        let (archive, used) = Self::unpack_prefix(bytes)?;
        if bytes[used..].iter().any(|&b| b != 0) {
            return Err(ImagingError::Malformed("non-zero padding"));
        }
        Ok(archive)
    }

    fn unpack_prefix(bytes: &[u8]) -> Result<(Self, usize), ImagingError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != ARCHIVE_MAGIC {
            return Err(ImagingError::Malformed("bad magic"));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let path_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let path = std::str::from_utf8(r.take(path_len)?)
                .map_err(|_| ImagingError::Malformed("path is not UTF-8"))?
                .to_string();
            check_path(&path)?;
            let mode = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
            let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let len = usize::try_from(len).map_err(|_| ImagingError::Malformed("entry length"))?;
            let content = r.take(len)?.to_vec();
            if let Some(prev) = &last {
                if *prev == path {
                    return Err(ImagingError::DuplicatePath(path));
                }
                if prev.as_str() > path.as_str() {
                    return Err(ImagingError::Malformed("entries out of order"));
                }
            }
            last = Some(path.clone());
            entries.insert(path, (mode, content));
        }
        Ok((Archive { entries }, r.pos))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImagingError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or(ImagingError::Malformed("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

#[cfg(unix)]
fn file_mode(meta: &fs::Metadata) -> u32 {
    std::os::unix::fs::PermissionsExt::mode(&meta.permissions()) & 0o7777
}

#[cfg(not(unix))]
fn file_mode(meta: &fs::Metadata) -> u32 {
    if meta.permissions().readonly() {
        0o444
    } else {
        0o644
    }
}

pub fn pack_archive(entries: Vec<ArchiveEntry>) -> Result<Vec<u8>, ImagingError> {
    Ok(Archive::from_entries(entries)?.pack())
}

pub fn unpack_archive(bytes: &[u8]) -> Result<Vec<ArchiveEntry>, ImagingError> {
    Ok(Archive::unpack(bytes)?.entries().collect())
}

/// Component-wise prefix match: `/etc/ssh` covers `/etc/ssh` and
/// `/etc/ssh/...` but not `/etc/sshd_config`.
pub fn path_under(path: &str, prefix: &str) -> bool {
    let prefix = prefix.trim_end_matches('/');
    match path.strip_prefix(prefix) {
        Some(rest) => rest.is_empty() || rest.starts_with('/'),
        None => false,
    }
}

/// Drops every entry under any of `prefixes`; returns the removed paths.
pub fn scrub_paths<S: AsRef<str>>(archive: &Archive, prefixes: &[S]) -> (Archive, Vec<String>) {
    let mut kept = archive.clone();
    let removed: Vec<String> = archive
        .paths()
        .filter(|p| prefixes.iter().any(|pre| path_under(p, pre.as_ref())))
        .map(str::to_string)
        .collect();
    for p in &removed {
        kept.remove(p);
    }
    (kept, removed)
}

pub enum PrepMode {
    Verity { salt: Vec<u8> },
    Encrypted { key: DiskKey, uuid: [u8; 16] },
}

pub struct ImagePrepConfig {
    pub mode: PrepMode,
    pub scrub_prefixes: Vec<String>,
    pub writable_mounts: Vec<String>,
    pub block_size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Verity,
    Encrypted,
}

impl ImagePrepConfig {
    fn with_mode(mode: PrepMode) -> Self {
        ImagePrepConfig {
            mode,
            scrub_prefixes: DEFAULT_SCRUB_PREFIXES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            writable_mounts: DEFAULT_WRITABLE_MOUNTS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }

    pub fn verity(salt: Vec<u8>) -> Self {
        Self::with_mode(PrepMode::Verity { salt })
    }

    /// Encrypted mode with a random disk UUID.
    pub fn encrypted(key: DiskKey) -> Self {
        let mut uuid = [0u8; 16];
        rand::RngCore::fill_bytes(&mut rand::rngs::OsRng, &mut uuid);
        Self::with_mode(PrepMode::Encrypted { key, uuid })
    }

    /// Builds a config from loosely typed options, rejecting parameters that
    /// do not belong to the chosen mode.
    pub fn from_parts(
        kind: ModeKind,
        salt: Option<Vec<u8>>,
        key: Option<DiskKey>,
    ) -> Result<Self, ImagingError> {
        match (kind, salt, key) {
            (ModeKind::Verity, _, Some(_)) => Err(ImagingError::ModeMismatch(
                "a disk key is only used in encrypted mode",
            )),
            (ModeKind::Verity, salt, None) => Ok(Self::verity(salt.unwrap_or_default())),
            (ModeKind::Encrypted, Some(_), _) => Err(ImagingError::ModeMismatch(
                "a salt is only used in verity mode",
            )),
            (ModeKind::Encrypted, None, Some(key)) => Ok(Self::encrypted(key)),
            (ModeKind::Encrypted, None, None) => Err(ImagingError::ModeMismatch(
                "encrypted mode requires a disk key",
            )),
        }
    }

    pub fn kind(&self) -> ModeKind {
        match self.mode {
            PrepMode::Verity { .. } => ModeKind::Verity,
            PrepMode::Encrypted { .. } => ModeKind::Encrypted,
        }
    }
}

pub enum SecondStage {
    Verity {
        image: Vec<u8>,
        meta: VerityMetadata,
        tree: MerkleTree,
        scrubbed: Vec<String>,
    },
    Encrypted(EncryptedImage),
}

fn lines(paths: &[String]) -> Vec<u8> {
    paths.join("\n").into_bytes()
}

/// Parses a newline-separated path list as written by the image builder.
pub fn parse_path_list(bytes: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn build_second_stage(
    archive: &Archive,
    config: &ImagePrepConfig,
) -> Result<SecondStage, ImagingError> {
    if !valid_block_size(config.block_size) {
        return Err(VerityError::InvalidBlockSize(config.block_size).into());
    }
    match &config.mode {
        PrepMode::Verity { salt } => {
            let (mut root, scrubbed) = scrub_paths(archive, &config.scrub_prefixes);
            if !root.contains(INIT_PATH) {
                return Err(ImagingError::MissingInit);
            }
            root.insert(ArchiveEntry::file(
                WRITABLE_PATH,
                lines(&config.writable_mounts),
            ))?;
            root.insert(ArchiveEntry::file(REGENERATE_PATH, lines(&scrubbed)))?;
            let mut image = root.pack();
            let bs = config.block_size as usize;
            image.resize(image.len().div_ceil(bs) * bs, 0);
            let (meta, tree) = verity::build_tree(&image[..], config.block_size, salt)?;
            Ok(SecondStage::Verity {
                image,
                meta,
                tree,
                scrubbed,
            })
        }
        PrepMode::Encrypted { key, uuid } => {
            if !archive.contains(INIT_PATH) {
                return Err(ImagingError::MissingInit);
            }
            let mut root = archive.clone();
            root.insert(ArchiveEntry::file(
                WRITABLE_PATH,
                lines(&config.writable_mounts),
            ))?;
            let image = root.pack();
            Ok(SecondStage::Encrypted(cryptdisk::encrypt_image(
                &image[..],
                key,
                *uuid,
                config.block_size,
            )?))
        }
    }
}

/// Appends `verity_root_hash=<hex>` to a command line.
pub fn with_verity_root(cmdline: &str, root: &Hash) -> String {
    let param = format!("{ROOT_HASH_PARAM}={}", hex::encode(root));
    if cmdline.trim().is_empty() {
        param
    } else {
        format!("{} {param}", cmdline.trim_end())
    }
}

/// Extracts the verity root hash from a command line. `None` if the
/// parameter is absent, `Some(Err)` if present but not 32 hex bytes.
pub fn parse_verity_root(cmdline: &str) -> Option<Result<Hash, hex::FromHexError>> {
    let value = cmdline
        .split_ascii_whitespace()
        .filter_map(|tok| tok.strip_prefix(ROOT_HASH_PARAM)?.strip_prefix('='))
        .next_back()?;
    let mut out = [0u8; 32];
    Some(hex::decode_to_slice(value, &mut out).map(|_| out))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub firmware_path: String,
    pub kernel_path: String,
    pub initramfs_path: String,
    pub cmdline: String,
    pub vcpu_count: u32,
    pub policy: u64,
    /// Lowercase hex of the 48-byte launch digest.
    pub expected_launch_digest: String,
}

impl BundleManifest {
    pub fn vcpu(&self) -> Result<VcpuState, ImagingError> {
        Ok(VcpuState::new(self.vcpu_count, self.policy)?)
    }

    pub fn launch_digest(&self) -> Result<crate::measurement::LaunchDigest, ImagingError> {
        crate::measurement::LaunchDigest::from_hex(&self.expected_launch_digest)
            .map_err(|e| ImagingError::Manifest(format!("expected_launch_digest: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ImagingError> {
        serde_json::from_str(text).map_err(|e| ImagingError::Manifest(e.to_string()))
    }
}

/// Injects component hashes and records the resulting launch digest.
pub fn build_bundle(
    firmware: &FirmwareImage,
    kernel: &[u8],
    initramfs: &[u8],
    cmdline: &str,
    vcpu: VcpuState,
) -> (FirmwareImage, BundleManifest) {
    let patched = inject_hashes(firmware, kernel, initramfs, cmdline.as_bytes());
    let digest = compute_launch_digest(&patched, &vcpu);
    let manifest = BundleManifest {
        firmware_path: FIRMWARE_FILE.into(),
        kernel_path: KERNEL_FILE.into(),
        initramfs_path: INITRAMFS_FILE.into(),
        cmdline: cmdline.to_string(),
        vcpu_count: vcpu.vcpu_count(),
        policy: vcpu.policy(),
        expected_launch_digest: digest.to_hex(),
    };
    (patched, manifest)
}

/// A first-stage bundle as the hypervisor hands it to the VM. The firmware
/// is kept as raw bytes: nothing about it is trusted until launch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub firmware: Vec<u8>,
    pub kernel: Vec<u8>,
    pub initramfs: Vec<u8>,
}

impl Bundle {
    pub fn build(
        firmware: &FirmwareImage,
        kernel: Vec<u8>,
        initramfs: Vec<u8>,
        cmdline: &str,
        vcpu: VcpuState,
    ) -> Self {
        let (patched, manifest) = build_bundle(firmware, &kernel, &initramfs, cmdline, vcpu);
        Bundle {
            manifest,
            firmware: patched.into_bytes(),
            kernel,
            initramfs,
        }
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), ImagingError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(&self.manifest.firmware_path), &self.firmware)?;
        fs::write(dir.join(&self.manifest.kernel_path), &self.kernel)?;
        fs::write(dir.join(&self.manifest.initramfs_path), &self.initramfs)?;
        fs::write(dir.join(MANIFEST_FILE), self.manifest.to_json())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ImagingError> {
        let manifest = BundleManifest::from_json(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        Ok(Bundle {
            firmware: fs::read(dir.join(&manifest.firmware_path))?,
            kernel: fs::read(dir.join(&manifest.kernel_path))?,
            initramfs: fs::read(dir.join(&manifest.initramfs_path))?,
            manifest,
        })
    }
}
