// SPDX-License-Identifier: Apache-2.0

//! Attestation reports and the simulated secure-processor key hierarchy.
//!
//! The secure processor (SP) holds a chip-unique secret. From it and the
//! current TCB version it derives the VCEK, the key that signs attestation
//! reports. A root key (ARK) signs an intermediate key (ASK), which signs a
//! certificate for the VCEK. A verifier holding only the ARK public key can
//! therefore check any report end to end.
//!
//! All keys are Ed25519. A report encodes to [`REPORT_LEN`] bytes and a
//! certificate to [`CERT_LEN`] bytes, both little-endian.

use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::RngCore;
use thiserror::Error;
use zeroize::Zeroizing;

use crate::kdf::hkdf32;

/// Only report format version understood by this crate.
pub const REPORT_VERSION: u32 = 1;
/// Encoded report length: 4 + 8 + 8 + 48 + 64 + 32 + 64.
pub const REPORT_LEN: usize = 228;
/// Length of the signed prefix of an encoded report.
pub const SIGNED_LEN: usize = REPORT_LEN - SIGNATURE_LEN;
pub const SIGNATURE_LEN: usize = 64;
pub const MEASUREMENT_LEN: usize = 48;
pub const GUEST_DATA_LEN: usize = 64;
pub const REPORT_ID_LEN: usize = 32;

/// Algorithm id carried in every certificate (1 = Ed25519).
pub const ALG_ED25519: u8 = 1;
/// Encoded certificate length: alg u8, public key, tcb u64, signature.
pub const CERT_LEN: usize = 1 + 32 + 8 + SIGNATURE_LEN;
pub const CHAIN_LEN: usize = 3 * CERT_LEN;

const VCEK_CONTEXT: &[u8] = b"vcek-derivation";
const ASK_CONTEXT: &[u8] = b"ask-derivation";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestationError {
    #[error("expected {expected} bytes, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("unsupported report version {0}")]
    UnsupportedVersion(u32),
    #[error("field `{field}` must be {expected} bytes, got {actual}")]
    FieldLength {
        field: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported certificate algorithm {0}")]
    UnsupportedAlgorithm(u8),
    #[error("certificate carries an invalid public key")]
    InvalidPublicKey,
    #[error("secure processor unavailable")]
    SpUnavailable,
}

/// Why a report or certificate chain was rejected. Checks run in a fixed
/// order and the first failure wins.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    #[error("malformed report or certificate chain")]
    Malformed,
    #[error("chain root does not match the trusted ARK")]
    UntrustedRoot,
    #[error("{0} certificate signature is invalid")]
    BadCertificate(CertRole),
    #[error("report signature does not verify under the VCEK")]
    BadSignature,
    #[error("report TCB version differs from the VCEK certificate")]
    TcbMismatch,
}

impl RejectReason {
    /// Stable snake_case identifier used on the wire and in CLI output.
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::Malformed => "malformed",
            RejectReason::UntrustedRoot => "untrusted_root",
            RejectReason::BadCertificate(CertRole::Ark) => "bad_ark_certificate",
            RejectReason::BadCertificate(CertRole::Ask) => "bad_ask_certificate",
            RejectReason::BadCertificate(CertRole::Vcek) => "bad_vcek_certificate",
            RejectReason::BadSignature => "bad_signature",
            RejectReason::TcbMismatch => "tcb_mismatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CertRole {
    Ark,
    Ask,
    Vcek,
}

impl fmt::Display for CertRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CertRole::Ark => "ARK",
            CertRole::Ask => "ASK",
            CertRole::Vcek => "VCEK",
        })
    }
}

/// Every report field except the signature, in layout order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReportBody {
    pub version: u32,
    pub tcb_version: u64,
    pub policy: u64,
    pub measurement: [u8; MEASUREMENT_LEN],
    pub guest_data: [u8; GUEST_DATA_LEN],
    pub report_id: [u8; REPORT_ID_LEN],
}

impl ReportBody {
    /// Builds a version-1 body from untyped byte slices, checking each
    /// fixed-width field.
    pub fn from_slices(
        tcb_version: u64,
        policy: u64,
        measurement: &[u8],
        guest_data: &[u8],
        report_id: &[u8],
    ) -> Result<Self, AttestationError> {
        Ok(ReportBody {
            version: REPORT_VERSION,
            tcb_version,
            policy,
            measurement: fixed("measurement", measurement)?,
            guest_data: fixed("guest_data", guest_data)?,
            report_id: fixed("report_id", report_id)?,
        })
    }

    /// Canonical encoding of the signed region.
    pub fn encode(&self) -> [u8; SIGNED_LEN] {
        let mut out = [0u8; SIGNED_LEN];
        let mut w = Cursor::new(&mut out);
        w.put(&self.version.to_le_bytes());
        w.put(&self.tcb_version.to_le_bytes());
        w.put(&self.policy.to_le_bytes());
        w.put(&self.measurement);
        w.put(&self.guest_data);
        w.put(&self.report_id);
        out
    }
}

fn fixed<const N: usize>(field: &'static str, bytes: &[u8]) -> Result<[u8; N], AttestationError> {
    bytes.try_into().map_err(|_| AttestationError::FieldLength {
        field,
        expected: N,
        actual: bytes.len(),
    })
}

struct Cursor<'a> {
    buf: &'a mut [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a mut [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn put(&mut self, bytes: &[u8]) {
        self.buf[self.pos..self.pos + bytes.len()].copy_from_slice(bytes);
        self.pos += bytes.len();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttestationReport {
    pub version: u32,
    pub tcb_version: u64,
    pub policy: u64,
    pub measurement: [u8; MEASUREMENT_LEN],
    pub guest_data: [u8; GUEST_DATA_LEN],
    pub report_id: [u8; REPORT_ID_LEN],
    pub signature: [u8; SIGNATURE_LEN],
}

impl AttestationReport {
    pub fn body(&self) -> ReportBody {
        ReportBody {
            version: self.version,
            tcb_version: self.tcb_version,
            policy: self.policy,
            measurement: self.measurement,
            guest_data: self.guest_data,
            report_id: self.report_id,
        }
    }

    pub fn encode(&self) -> [u8; REPORT_LEN] {
        let mut out = [0u8; REPORT_LEN];
        out[..SIGNED_LEN].copy_from_slice(&self.body().encode());
        out[SIGNED_LEN..].copy_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, AttestationError> {
        if bytes.len() != REPORT_LEN {
            return Err(AttestationError::WrongLength {
                expected: REPORT_LEN,
                actual: bytes.len(),
            });
        }
        let version = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if version != REPORT_VERSION {
            return Err(AttestationError::UnsupportedVersion(version));
        }
        Ok(AttestationReport {
            version,
            tcb_version: u64::from_le_bytes(bytes[4..12].try_into().unwrap()),
            policy: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            measurement: bytes[20..68].try_into().unwrap(),
            guest_data: bytes[68..132].try_into().unwrap(),
            report_id: bytes[132..164].try_into().unwrap(),
            signature: bytes[164..228].try_into().unwrap(),
        })
    }
}

pub fn encode_report(report: &AttestationReport) -> [u8; REPORT_LEN] {
    report.encode()
}

pub fn decode_report(bytes: &[u8]) -> Result<AttestationReport, AttestationError> {
    AttestationReport::decode(bytes)
}

/// Derives the VCEK signing key for a chip secret at a given TCB version.
pub fn derive_vcek(chip_secret: &[u8; 32], tcb_version: u64) -> SigningKey {
    let seed = hkdf32(chip_secret, &[VCEK_CONTEXT, &tcb_version.to_le_bytes()]);
    SigningKey::from_bytes(&seed)
}

/// Simulated secure-processor state: fused chip secret, TCB version and the
/// VCEK derived from both.
pub struct SpState {
    chip_secret: Zeroizing<[u8; 32]>,
    tcb_version: u64,
    vcek: SigningKey,
    available: bool,
}

impl SpState {
    pub fn new(chip_secret: [u8; 32], tcb_version: u64) -> Self {
        let vcek = derive_vcek(&chip_secret, tcb_version);
        SpState {
            chip_secret: Zeroizing::new(chip_secret),
            tcb_version,
            vcek,
            available: true,
        }
    }

    /// Fresh random chip secret.
    pub fn generate(tcb_version: u64) -> Self {
        let mut secret = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut secret);
        Self::new(secret, tcb_version)
    }

    /// Returns an SP that refuses every report request (fault injection).
    pub fn unavailable(mut self) -> Self {
        self.available = false;
        self
    }

    pub fn chip_secret(&self) -> &[u8; 32] {
        &self.chip_secret
    }

    pub fn tcb_version(&self) -> u64 {
        self.tcb_version
    }

    pub fn vcek_public(&self) -> VerifyingKey {
        self.vcek.verifying_key()
    }

    /// Signs `body` with the VCEK. The body's fields are copied unchanged.
    pub fn sign_report(&self, body: &ReportBody) -> Result<AttestationReport, AttestationError> {
        if body.version != REPORT_VERSION {
            return Err(AttestationError::UnsupportedVersion(body.version));
        }
        let signature = self.vcek.sign(&body.encode()).to_bytes();
        Ok(AttestationReport {
            version: body.version,
            tcb_version: body.tcb_version,
            policy: body.policy,
            measurement: body.measurement,
            guest_data: body.guest_data,
            report_id: body.report_id,
            signature,
        })
    }

    /// Guest-facing report request: stamps the platform TCB and a random
    /// report id, then signs.
    pub fn request_report(
        &self,
        measurement: [u8; MEASUREMENT_LEN],
        guest_data: [u8; GUEST_DATA_LEN],
        policy: u64,
    ) -> Result<AttestationReport, AttestationError> {
        if !self.available {
            return Err(AttestationError::SpUnavailable);
        }
        let mut report_id = [0u8; REPORT_ID_LEN];
        rand::rngs::OsRng.fill_bytes(&mut report_id);
        self.sign_report(&ReportBody {
            version: REPORT_VERSION,
            tcb_version: self.tcb_version,
            policy,
            measurement,
            guest_data,
            report_id,
        })
    }
}

impl fmt::Debug for SpState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpState")
            .field("tcb_version", &self.tcb_version)
            .field("vcek_public", &hex::encode(self.vcek_public().as_bytes()))
            .field("available", &self.available)
            .finish_non_exhaustive()
    }
}

pub fn sign_report(sp: &SpState, body: &ReportBody) -> Result<AttestationReport, AttestationError> {
    sp.sign_report(body)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Certificate {
    pub alg: u8,
    pub public_key: [u8; 32],
    pub tcb_version: u64,
    pub signature: [u8; SIGNATURE_LEN],
}

impl Certificate {
    fn issue(issuer: &SigningKey, subject: &VerifyingKey, tcb_version: u64) -> Self {
        let mut cert = Certificate {
            alg: ALG_ED25519,
            public_key: subject.to_bytes(),
            tcb_version,
            signature: [0u8; SIGNATURE_LEN],
        };
        cert.signature = issuer.sign(&cert.tbs()).to_bytes();
        cert
    }

    /// The signed portion: alg ‖ public key ‖ tcb.
    fn tbs(&self) -> [u8; CERT_LEN - SIGNATURE_LEN] {
        let mut out = [0u8; CERT_LEN - SIGNATURE_LEN];
        out[0] = self.alg;
        out[1..33].copy_from_slice(&self.public_key);
        out[33..41].copy_from_slice(&self.tcb_version.to_le_bytes());
        out
    }

    pub fn encode(&self) -> [u8; CERT_LEN] {
        let mut out = [0u8; CERT_LEN];
        out[..41].copy_from_slice(&self.tbs());
        out[41..].copy_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, AttestationError> {
        if bytes.len() != CERT_LEN {
            return Err(AttestationError::WrongLength {
                expected: CERT_LEN,
                actual: bytes.len(),
            });
        }
        if bytes[0] != ALG_ED25519 {
            return Err(AttestationError::UnsupportedAlgorithm(bytes[0]));
        }
        Ok(Certificate {
            alg: bytes[0],
            public_key: bytes[1..33].try_into().unwrap(),
            tcb_version: u64::from_le_bytes(bytes[33..41].try_into().unwrap()),
            signature: bytes[41..].try_into().unwrap(),
        })
    }

    pub fn verifying_key(&self) -> Result<VerifyingKey, AttestationError> {
        VerifyingKey::from_bytes(&self.public_key).map_err(|_| AttestationError::InvalidPublicKey)
    }

    fn signed_by(&self, issuer: &VerifyingKey) -> bool {
        self.alg == ALG_ED25519
            && issuer
                .verify_strict(&self.tbs(), &Signature::from_bytes(&self.signature))
                .is_ok()
    }
}

/// ARK → ASK → VCEK. Serialized as the three certificates concatenated in
/// that order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CertChain {
    pub ark: Certificate,
    pub ask: Certificate,
    pub vcek: Certificate,
}

impl CertChain {
    pub fn encode(&self) -> [u8; CHAIN_LEN] {
        let mut out = [0u8; CHAIN_LEN];
        out[..CERT_LEN].copy_from_slice(&self.ark.encode());
        out[CERT_LEN..2 * CERT_LEN].copy_from_slice(&self.ask.encode());
        out[2 * CERT_LEN..].copy_from_slice(&self.vcek.encode());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, AttestationError> {
        if bytes.len() != CHAIN_LEN {
            return Err(AttestationError::WrongLength {
                expected: CHAIN_LEN,
                actual: bytes.len(),
            });
        }
        Ok(CertChain {
            ark: Certificate::decode(&bytes[..CERT_LEN])?,
            ask: Certificate::decode(&bytes[CERT_LEN..2 * CERT_LEN])?,
            vcek: Certificate::decode(&bytes[2 * CERT_LEN..])?,
        })
    }
}

fn ark_key(ark_seed: &[u8; 32]) -> SigningKey {
    SigningKey::from_bytes(ark_seed)
}

fn ask_key(ark_seed: &[u8; 32]) -> SigningKey {
    SigningKey::from_bytes(&hkdf32(ark_seed, &[ASK_CONTEXT]))
}

/// Public half of the root key for `ark_seed`; this is what verifiers pin.
pub fn ark_public(ark_seed: &[u8; 32]) -> [u8; 32] {
    ark_key(ark_seed).verifying_key().to_bytes()
}

pub fn issue_cert_chain(ark_seed: &[u8; 32], sp: &SpState) -> CertChain {
    let ark = ark_key(ark_seed);
    let ask = ask_key(ark_seed);
    CertChain {
        ark: Certificate::issue(&ark, &ark.verifying_key(), 0),
        ask: Certificate::issue(&ark, &ask.verifying_key(), 0),
        vcek: Certificate::issue(&ask, &sp.vcek_public(), sp.tcb_version()),
    }
}

/// Verifies VCEK ← ASK ← ARK against a pinned ARK public key and returns the
/// VCEK verifying key.
pub fn verify_chain(
    chain: &CertChain,
    trusted_ark: &[u8; 32],
) -> Result<VerifyingKey, RejectReason> {
    if chain.ark.public_key != *trusted_ark {
        return Err(RejectReason::UntrustedRoot);
    }
    let ark = chain
        .ark
        .verifying_key()
        .map_err(|_| RejectReason::Malformed)?;
    if !chain.ark.signed_by(&ark) {
        return Err(RejectReason::BadCertificate(CertRole::Ark));
    }
    let ask = chain
        .ask
        .verifying_key()
        .map_err(|_| RejectReason::Malformed)?;
    if !chain.ask.signed_by(&ark) {
        return Err(RejectReason::BadCertificate(CertRole::Ask));
    }
    let vcek = chain
        .vcek
        .verifying_key()
        .map_err(|_| RejectReason::Malformed)?;
    if !chain.vcek.signed_by(&ask) {
        return Err(RejectReason::BadCertificate(CertRole::Vcek));
    }
    Ok(vcek)
}

/// Full check: chain up to `trusted_ark`, report signature under the VCEK,
/// then TCB equality.
pub fn verify_report(
    report: &AttestationReport,
    chain: &CertChain,
    trusted_ark: &[u8; 32],
) -> Result<(), RejectReason> {
    let vcek = verify_chain(chain, trusted_ark)?;
    if report.version != REPORT_VERSION {
        return Err(RejectReason::Malformed);
    }
    let signature = Signature::from_bytes(&report.signature);
    vcek.verify_strict(&report.body().encode(), &signature)
        .map_err(|_| RejectReason::BadSignature)?;
    if report.tcb_version != chain.vcek.tcb_version {
        return Err(RejectReason::TcbMismatch);
    }
    Ok(())
}

/// [`verify_report`] over raw bytes; decode failures become
/// [`RejectReason::Malformed`].
pub fn verify_report_bytes(
    report: &[u8],
    chain: &[u8],
    trusted_ark: &[u8; 32],
) -> Result<AttestationReport, RejectReason> {
    let report = AttestationReport::decode(report).map_err(|_| RejectReason::Malformed)?;
    let chain = CertChain::decode(chain).map_err(|_| RejectReason::Malformed)?;
    verify_report(&report, &chain, trusted_ark)?;
    Ok(report)
}
