// SPDX-License-Identifier: Apache-2.0

//! Hardware-free model of the SEV-SNP confidential VM boot chain.
//!
//! The crate covers both guest-owner workflows:
//!
//! - **Integrity only.** The root filesystem is a read-only block image
//!   protected by a Merkle tree ([`verity`]). The tree's root hash travels on
//!   the kernel command line, which is hashed into the firmware
//!   ([`measurement`]) and therefore into the signed launch measurement
//!   ([`attestation`]).
//! - **Integrity and confidentiality.** The root filesystem is encrypted per
//!   block ([`cryptdisk`]). Early userspace pauses and obtains the disk key
//!   from the owner through a nonce-fresh Diffie-Hellman exchange bound into
//!   the attestation report ([`provision`]).
//!
//! [`imaging`] prepares the owner-side artifacts offline and [`bootsim`]
//! executes the guest boot against a simulated secure processor.

pub mod attestation;
pub mod blockdev;
pub mod bootsim;
pub mod cryptdisk;
pub mod imaging;
pub mod measurement;
pub mod provision;
pub mod verity;

mod kdf;

pub use attestation::{
    derive_vcek, issue_cert_chain, verify_chain, verify_report, verify_report_bytes,
    AttestationReport, CertChain, Certificate, RejectReason, ReportBody, SpState,
};
pub use blockdev::BlockSource;
pub use bootsim::{boot, BootFailure, BootOutcome, RunningSystem, SecondStageDisks, Stage};
pub use cryptdisk::{CryptError, CryptHeader, DiskKey, EncryptedImage, EncryptedReader};
pub use imaging::{Archive, ArchiveEntry, Bundle, BundleManifest, ImagePrepConfig, SecondStage};
pub use measurement::{Component, FirmwareImage, LaunchDigest, VcpuState};
pub use provision::{
    AttestationRequest, AttestationResponse, GuestSession, KeyInjection, Message, OwnerSession,
    ProvisionError, VerifyReject,
};
pub use verity::{MerkleTree, VerifiedReader, VerityError, VerityMetadata};
