// SPDX-License-Identifier: Apache-2.0

//! Firmware hash injection and launch-digest computation.
//!
//! The hypervisor writes the SHA-256 hashes of kernel, initramfs and command
//! line into a table inside the firmware image before launch. Because the
//! firmware is part of the launch measurement, those hashes end up covered by
//! the signed attestation report. At boot the firmware recomputes each hash
//! over what it was actually given and refuses to continue on mismatch.
//!
//! The hash table is located by the 16-byte [`MARKER`] and holds three
//! 32-byte slots in the order kernel, initramfs, cmdline.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha384};
use thiserror::Error;

pub const MARKER: &[u8; 16] = b"SNPGUARD-HASHES!";
pub const SLOT_LEN: usize = 32;
pub const SLOT_COUNT: usize = 3;
pub const TABLE_LEN: usize = SLOT_LEN * SLOT_COUNT;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FirmwareError {
    #[error("firmware has no hash-table marker")]
    MissingMarker,
    #[error("firmware has {0} hash-table markers, expected exactly one")]
    DuplicateMarker(usize),
    #[error("firmware ends inside the hash table")]
    Truncated,
    #[error("vcpu_count must be at least 1")]
    NoVcpus,
}

/// Boot component covered by one hash slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Kernel,
    Initramfs,
    Cmdline,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Kernel, Component::Initramfs, Component::Cmdline];

    pub fn name(&self) -> &'static str {
        match self {
            Component::Kernel => "kernel",
            Component::Initramfs => "initramfs",
            Component::Cmdline => "cmdline",
        }
    }

    fn slot(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A firmware blob with a located hash table.
#[derive(Clone, PartialEq, Eq)]
pub struct FirmwareImage {
    blob: Vec<u8>,
    table_offset: usize,
}

impl FirmwareImage {
    pub fn parse(blob: Vec<u8>) -> Result<Self, FirmwareError> {
        let hits: Vec<usize> = blob
            .windows(MARKER.len())
            .enumerate()
            .filter(|(_, w)| *w == MARKER)
            .map(|(i, _)| i)
            .collect();
        let marker = match hits.as_slice() {
            [] => return Err(FirmwareError::MissingMarker),
            [one] => *one,
            many => return Err(FirmwareError::DuplicateMarker(many.len())),
        };
        let table_offset = marker + MARKER.len();
        if blob.len() < table_offset + TABLE_LEN {
            return Err(FirmwareError::Truncated);
        }
        Ok(FirmwareImage { blob, table_offset })
    }

    /// Synthetic firmware of `size` bytes with the marker at
    /// `marker_offset` and zeroed slots. Filler bytes are random.
    pub fn synthetic(size: usize, marker_offset: usize) -> Result<Self, FirmwareError> {
        if marker_offset + MARKER.len() + TABLE_LEN > size {
            return Err(FirmwareError::Truncated);
        }
        let table = marker_offset + MARKER.len();
        // Random filler could in principle contain a second marker.
        loop {
            let mut blob = vec![0u8; size];
            rand::thread_rng().fill_bytes(&mut blob);
            blob[marker_offset..table].copy_from_slice(MARKER);
            blob[table..table + TABLE_LEN].fill(0);
            match Self::parse(blob) {
                Err(FirmwareError::DuplicateMarker(_)) => continue,
                other => return other,
            }
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.blob
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.blob
    }

    pub fn table_offset(&self) -> usize {
        self.table_offset
    }

    pub fn slot(&self, component: Component) -> [u8; SLOT_LEN] {
        let start = self.table_offset + component.slot() * SLOT_LEN;
        self.blob[start..start + SLOT_LEN].try_into().unwrap()
    }

    fn set_slot(&mut self, component: Component, hash: &[u8; SLOT_LEN]) {
        let start = self.table_offset + component.slot() * SLOT_LEN;
        self.blob[start..start + SLOT_LEN].copy_from_slice(hash);
    }
}

impl fmt::Debug for FirmwareImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FirmwareImage")
            .field("len", &self.blob.len())
            .field("table_offset", &self.table_offset)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VcpuState {
    vcpu_count: u32,
    policy: u64,
}

impl VcpuState {
    pub fn new(vcpu_count: u32, policy: u64) -> Result<Self, FirmwareError> {
        if vcpu_count == 0 {
            return Err(FirmwareError::NoVcpus);
        }
        Ok(VcpuState { vcpu_count, policy })
    }

    pub fn vcpu_count(&self) -> u32 {
        self.vcpu_count
    }

    pub fn policy(&self) -> u64 {
        self.policy
    }

    pub fn encode(&self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[..4].copy_from_slice(&self.vcpu_count.to_le_bytes());
        out[4..].copy_from_slice(&self.policy.to_le_bytes());
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct LaunchDigest(pub [u8; 48]);

impl LaunchDigest {
    pub fn as_bytes(&self) -> &[u8; 48] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut out = [0u8; 48];
        hex::decode_to_slice(s.trim(), &mut out)?;
        Ok(LaunchDigest(out))
    }
}

impl fmt::Debug for LaunchDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LaunchDigest({})", self.to_hex())
    }
}

impl fmt::Display for LaunchDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash_component(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// Returns a copy of `fw` with the three slots set to the SHA-256 of each
/// component. Only the 96 slot bytes change.
pub fn inject_hashes(
    fw: &FirmwareImage,
    kernel: &[u8],
    initramfs: &[u8],
    cmdline: &[u8],
) -> FirmwareImage {
    let mut patched = fw.clone();
    patched.set_slot(Component::Kernel, &hash_component(kernel));
    patched.set_slot(Component::Initramfs, &hash_component(initramfs));
    patched.set_slot(Component::Cmdline, &hash_component(cmdline));
    patched
}

/// SHA-384 over the firmware blob followed by the vCPU state encoding.
pub fn compute_launch_digest(fw: &FirmwareImage, vcpu: &VcpuState) -> LaunchDigest {
    let mut h = Sha384::new();
    h.update(fw.as_bytes());
    h.update(vcpu.encode());
    LaunchDigest(h.finalize().into())
}

/// Guest-side check performed by the firmware before handing over to the
/// kernel. Fails on the first component whose hash differs from its slot.
pub fn verify_first_stage(
    fw: &FirmwareImage,
    kernel: &[u8],
    initramfs: &[u8],
    cmdline: &[u8],
) -> Result<(), Component> {
    for (component, data) in Component::ALL.into_iter().zip([kernel, initramfs, cmdline]) {
        if hash_component(data) != fw.slot(component) {
            return Err(component);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fw() -> FirmwareImage {
        FirmwareImage::synthetic(4096, 1000).unwrap()
    }

    #[test]
    fn empty_input_hash() {
        assert_eq!(
            hex::encode(hash_component(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn appended_zero_changes_hash() {
        assert_ne!(hash_component(b"abc"), hash_component(b"abc\0"));
    }

    #[test]
    fn parse_rejects_bad_markers() {
        assert_eq!(
            FirmwareImage::parse(vec![0u8; 512]).unwrap_err(),
            FirmwareError::MissingMarker
        );
        let mut two = vec![0u8; 1024];
        two[10..26].copy_from_slice(MARKER);
        two[500..516].copy_from_slice(MARKER);
        assert_eq!(
            FirmwareImage::parse(two).unwrap_err(),
            FirmwareError::DuplicateMarker(2)
        );
        let mut short = vec![0u8; 100];
        short[0..16].copy_from_slice(MARKER);
        assert_eq!(
            FirmwareImage::parse(short).unwrap_err(),
            FirmwareError::Truncated
        );
    }

    #[test]
    fn synthetic_has_zero_slots() {
        let fw = fw();
        assert_eq!(fw.table_offset(), 1016);
        for c in Component::ALL {
            assert_eq!(fw.slot(c), [0u8; 32]);
        }
    }

    #[test]
    fn inject_sets_slots_and_nothing_else() {
        let fw = fw();
        let patched = inject_hashes(&fw, b"kernel", b"initrd", b"console=ttyS0");
        assert_eq!(patched.slot(Component::Kernel), hash_component(b"kernel"));
        assert_eq!(
            patched.slot(Component::Initramfs),
            hash_component(b"initrd")
        );
        assert_eq!(
            patched.slot(Component::Cmdline),
            hash_component(b"console=ttyS0")
        );
        let changed: Vec<usize> = fw
            .as_bytes()
            .iter()
            .zip(patched.as_bytes())
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();
        assert!(changed
            .iter()
            .all(|&i| (fw.table_offset()..fw.table_offset() + TABLE_LEN).contains(&i)));
        assert_eq!(
            inject_hashes(&fw, b"kernel", b"initrd", b"console=ttyS0"),
            patched
        );
    }

    #[test]
    fn verify_names_failing_component() {
        let patched = inject_hashes(&fw(), b"k", b"i", b"c");
        assert_eq!(verify_first_stage(&patched, b"k", b"i", b"c"), Ok(()));
        assert_eq!(
            verify_first_stage(&patched, b"k", b"j", b"c"),
            Err(Component::Initramfs)
        );
        assert_eq!(
            verify_first_stage(&patched, b"k", b"i", b"cc"),
            Err(Component::Cmdline)
        );
        assert_eq!(
            verify_first_stage(&patched, b"K", b"j", b"cc"),
            Err(Component::Kernel)
        );
    }

    #[test]
    fn digest_binds_cmdline_and_vcpus() {
        let fw = fw();
        let one = VcpuState::new(1, 0).unwrap();
        let a = compute_launch_digest(&inject_hashes(&fw, b"k", b"i", b"a"), &one);
        let b = compute_launch_digest(&inject_hashes(&fw, b"k", b"i", b"b"), &one);
        assert_ne!(a, b);
        assert_eq!(
            a,
            compute_launch_digest(&inject_hashes(&fw, b"k", b"i", b"a"), &one)
        );
        let two = VcpuState::new(2, 0).unwrap();
        assert_ne!(
            a,
            compute_launch_digest(&inject_hashes(&fw, b"k", b"i", b"a"), &two)
        );
        assert_eq!(VcpuState::new(0, 0).unwrap_err(), FirmwareError::NoVcpus);
    }

    #[test]
    fn digest_matches_direct_sha384() {
        let fw = fw();
        let vcpu = VcpuState::new(4, 0x30000).unwrap();
        let mut input = fw.as_bytes().to_vec();
        input.extend_from_slice(&4u32.to_le_bytes());
        input.extend_from_slice(&0x30000u64.to_le_bytes());
        let expected: [u8; 48] = Sha384::digest(&input).into();
        assert_eq!(compute_launch_digest(&fw, &vcpu).0, expected);
    }

    #[test]
    fn digest_hex_roundtrip() {
        let d = LaunchDigest([0xA5; 48]);
        assert_eq!(LaunchDigest::from_hex(&d.to_hex()).unwrap(), d);
        assert!(LaunchDigest::from_hex("00").is_err());
    }
}
