// SPDX-License-Identifier: Apache-2.0

//! Attested disk-key provisioning.
//!
//! ```text
//!   owner                                   guest
//!   ─────                                   ─────
//!   nonce ← random
//!            ── AttestationRequest{nonce} ──▶
//!                                            (sk_g, pk_g) ← X25519
//!                                            report ← SP(guest_data = nonce ‖ pk_g)
//!            ◀── AttestationResponse{report, chain} ──
//!   verify chain, signature, measurement, nonce
//!   k ← HKDF(DH(sk_o, pk_g), ctx ‖ nonce ‖ H(report))
//!   c ← AEAD(k, 0, aad = H(report), disk_key)
//!            ── KeyInjection{pk_o, c} ──▶
//!                                            k ← HKDF(DH(sk_g, pk_o), …)
//!                                            disk_key ← open(c), unlock disk
//!            ◀── Ack | Error ──
//! ```
//!
//! The owner is never authenticated directly: a forged injection either
//! fails AEAD authentication or yields a key that does not unlock the disk.

mod transport;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};
use zeroize::Zeroizing;

use crate::attestation::{
    verify_report, AttestationError, AttestationReport, CertChain, RejectReason, SpState,
    REPORT_LEN,
};
use crate::cryptdisk::DiskKey;
use crate::kdf::hkdf32;
use crate::measurement::{compute_launch_digest, FirmwareImage, LaunchDigest, VcpuState};

pub use transport::{
    loopback, run_owner_attest, run_owner_provision, serve_agent, serve_attestation,
    serve_provisioning, Channel, Framed, MemChannel, UnlockRefused,
};
pub use wire::{deframe, frame, WireError};

pub const NONCE_LEN: usize = 32;
pub const DH_PUBLIC_LEN: usize = 32;
pub const WRAPPED_LEN: usize = 32 + 16;
const KDF_CONTEXT: &[u8] = b"snpguard-provision-v1";

/// Error codes carried in [`Message::Error`].
pub mod codes {
    pub const SP_UNAVAILABLE: u16 = 1;
    pub const UNEXPECTED_MESSAGE: u16 = 2;
    pub const VERIFICATION_FAILED: u16 = 3;
    pub const UNWRAP_FAILED: u16 = 4;
    pub const UNLOCK_FAILED: u16 = 5;
    pub const NOT_PROVISIONING: u16 = 6;
    pub const SESSION_STATE: u16 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttestationRequest {
    pub nonce: [u8; NONCE_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttestationResponse {
    pub report: AttestationReport,
    pub chain: CertChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WrappedKey {
    pub owner_dh_public: [u8; DH_PUBLIC_LEN],
    /// Encrypted disk key followed by the 16-byte tag.
    pub ciphertext: [u8; WRAPPED_LEN],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyInjection {
    pub wrapped: WrappedKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Message {
    AttestationRequest(AttestationRequest),
    AttestationResponse(Box<AttestationResponse>),
    KeyInjection(KeyInjection),
    Ack,
    Error { code: u16, detail: String },
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::AttestationRequest(_) => "attestation_request",
            Message::AttestationResponse(_) => "attestation_response",
            Message::KeyInjection(_) => "key_injection",
            Message::Ack => "ack",
            Message::Error { .. } => "error",
        }
    }
}

/// Guest data layout: nonce ‖ guest DH public key.
pub fn guest_data(nonce: &[u8; NONCE_LEN], dh_public: &[u8; DH_PUBLIC_LEN]) -> [u8; 64] {
    let mut out = [0u8; 64];
    out[..32].copy_from_slice(nonce);
    out[32..].copy_from_slice(dh_public);
    out
}

pub fn split_guest_data(data: &[u8; 64]) -> ([u8; NONCE_LEN], [u8; DH_PUBLIC_LEN]) {
    (
        data[..32].try_into().unwrap(),
        data[32..].try_into().unwrap(),
    )
}

/// Owner-side verification failures, in check order.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerifyReject {
    #[error(transparent)]
    Report(#[from] RejectReason),
    #[error("report measurement differs from the expected launch digest")]
    MeasurementMismatch,
    #[error("report does not carry this session's nonce")]
    NonceMismatch,
}

impl VerifyReject {
    pub fn code(&self) -> &'static str {
        match self {
            VerifyReject::Report(r) => r.code(),
            VerifyReject::MeasurementMismatch => "measurement_mismatch",
            VerifyReject::NonceMismatch => "nonce_mismatch",
        }
    }
}

#[derive(Debug, Error)]
pub enum ProvisionError {
    #[error("session is {actual}, operation needs {expected}")]
    State {
        expected: SessionState,
        actual: SessionState,
    },
    #[error("attestation rejected: {0}")]
    Rejected(#[from] VerifyReject),
    #[error("peer DH public key is low-order")]
    WeakKey,
    #[error("wrapped key failed authentication")]
    Authentication,
    #[error("secure processor unavailable")]
    SpUnavailable,
    #[error("disk key did not unlock the disk")]
    Unlock,
    #[error("unexpected {got} message, wanted {want}")]
    UnexpectedMessage {
        want: &'static str,
        got: &'static str,
    },
    #[error("peer reported error {code}: {detail}")]
    Remote { code: u16, detail: String },
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl ProvisionError {
    /// Short machine-readable identifier.
    pub fn code(&self) -> String {
        match self {
            ProvisionError::State { .. } => "session_state".into(),
            ProvisionError::Rejected(r) => r.code().into(),
            ProvisionError::WeakKey => "weak_key".into(),
            ProvisionError::Authentication => "unwrap_failed".into(),
            ProvisionError::SpUnavailable => "sp_unavailable".into(),
            ProvisionError::Unlock => "unlock".into(),
            ProvisionError::UnexpectedMessage { .. } => "unexpected_message".into(),
            ProvisionError::Remote { code, .. } => match *code {
                codes::SP_UNAVAILABLE => "sp_unavailable".into(),
                codes::VERIFICATION_FAILED => "verification_failed".into(),
                codes::UNWRAP_FAILED => "unwrap_failed".into(),
                codes::UNLOCK_FAILED => "unlock".into(),
                codes::NOT_PROVISIONING => "not_provisioning".into(),
                other => format!("remote_{other}"),
            },
            ProvisionError::Wire(_) => "transport".into(),
        }
    }
}

impl From<AttestationError> for ProvisionError {
    fn from(e: AttestationError) -> Self {
        match e {
            AttestationError::SpUnavailable => ProvisionError::SpUnavailable,
            _ => ProvisionError::Rejected(VerifyReject::Report(RejectReason::Malformed)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionState {
    Fresh,
    Started,
    Verified,
    Completed,
    Failed,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionState::Fresh => "fresh",
            SessionState::Started => "started",
            SessionState::Verified => "verified",
            SessionState::Completed => "completed",
            SessionState::Failed => "failed",
        })
    }
}

fn expect_state(actual: SessionState, expected: SessionState) -> Result<(), ProvisionError> {
    if actual == expected {
        Ok(())
    } else {
        Err(ProvisionError::State { expected, actual })
    }
}

fn report_hash(report_bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(report_bytes).into()
}

/// Session AEAD key: HKDF(shared, ctx ‖ nonce ‖ SHA-256(report)).
pub fn derive_wrapping_key(
    shared: &[u8; 32],
    nonce: &[u8; NONCE_LEN],
    report_bytes: &[u8],
) -> Zeroizing<[u8; 32]> {
    hkdf32(shared, &[KDF_CONTEXT, nonce, &report_hash(report_bytes)])
}

fn shared_secret(
    secret: &StaticSecret,
    peer: &[u8; DH_PUBLIC_LEN],
) -> Result<Zeroizing<[u8; 32]>, ProvisionError> {
    let shared = secret.diffie_hellman(&PublicKey::from(*peer));
    if !shared.was_contributory() {
        return Err(ProvisionError::WeakKey);
    }
    Ok(Zeroizing::new(shared.to_bytes()))
}

fn fingerprint(key: &[u8; 32]) -> [u8; 32] {
    Sha256::digest([b"fingerprint".as_slice(), key].concat()).into()
}

/// Deterministic core of the owner's wrap step.
pub fn wrap_key(
    owner_secret: &StaticSecret,
    guest_public: &[u8; DH_PUBLIC_LEN],
    nonce: &[u8; NONCE_LEN],
    report_bytes: &[u8],
    disk_key: &DiskKey,
) -> Result<WrappedKey, ProvisionError> {
    let (wrapped, _) = wrap_key_inner(owner_secret, guest_public, nonce, report_bytes, disk_key)?;
    Ok(wrapped)
}

fn wrap_key_inner(
    owner_secret: &StaticSecret,
    guest_public: &[u8; DH_PUBLIC_LEN],
    nonce: &[u8; NONCE_LEN],
    report_bytes: &[u8],
    disk_key: &DiskKey,
) -> Result<(WrappedKey, [u8; 32]), ProvisionError> {
    let shared = shared_secret(owner_secret, guest_public)?;
    let key = derive_wrapping_key(&shared, nonce, report_bytes);
    let aead = ChaCha20Poly1305::new(Key::from_slice(key.as_ref()));
    let mut buf = *disk_key.as_bytes();
    let tag = aead
        .encrypt_in_place_detached(&Nonce::default(), &report_hash(report_bytes), &mut buf)
        .expect("32-byte message is within AEAD limits");
    let mut ciphertext = [0u8; WRAPPED_LEN];
    ciphertext[..32].copy_from_slice(&buf);
    ciphertext[32..].copy_from_slice(&tag);
    let wrapped = WrappedKey {
        owner_dh_public: PublicKey::from(owner_secret).to_bytes(),
        ciphertext,
    };
    Ok((wrapped, fingerprint(&key)))
}

/// Deterministic core of the guest's unwrap step.
pub fn unwrap_key(
    guest_secret: &StaticSecret,
    wrapped: &WrappedKey,
    nonce: &[u8; NONCE_LEN],
    report_bytes: &[u8],
) -> Result<DiskKey, ProvisionError> {
    unwrap_key_inner(guest_secret, wrapped, nonce, report_bytes).map(|(k, _)| k)
}

fn unwrap_key_inner(
    guest_secret: &StaticSecret,
    wrapped: &WrappedKey,
    nonce: &[u8; NONCE_LEN],
    report_bytes: &[u8],
) -> Result<(DiskKey, [u8; 32]), ProvisionError> {
    let shared = shared_secret(guest_secret, &wrapped.owner_dh_public)?;
    let key = derive_wrapping_key(&shared, nonce, report_bytes);
    let aead = ChaCha20Poly1305::new(Key::from_slice(key.as_ref()));
    let mut buf = Zeroizing::new([0u8; 32]);
    buf.copy_from_slice(&wrapped.ciphertext[..32]);
    aead.decrypt_in_place_detached(
        &Nonce::default(),
        &report_hash(report_bytes),
        buf.as_mut(),
        Tag::from_slice(&wrapped.ciphertext[32..]),
    )
    .map_err(|_| ProvisionError::Authentication)?;
    Ok((DiskKey::from_bytes(*buf), fingerprint(&key)))
}

fn random_secret() -> StaticSecret {
    StaticSecret::random_from_rng(rand::rngs::OsRng)
}

struct Verified {
    guest_public: [u8; DH_PUBLIC_LEN],
    report_bytes: [u8; REPORT_LEN],
}

/// Owner side of one provisioning run. Single use: completed and failed
/// are terminal.
pub struct OwnerSession {
    expected: LaunchDigest,
    trusted_ark: [u8; 32],
    dh_secret: Option<StaticSecret>,
    nonce: Option<[u8; NONCE_LEN]>,
    verified: Option<Verified>,
    key_fingerprint: Option<[u8; 32]>,
    state: SessionState,
}

impl OwnerSession {
    pub fn new(expected: LaunchDigest, trusted_ark: [u8; 32]) -> Self {
        OwnerSession {
            expected,
            trusted_ark,
            dh_secret: Some(random_secret()),
            nonce: None,
            verified: None,
            key_fingerprint: None,
            state: SessionState::Fresh,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn nonce(&self) -> Option<&[u8; NONCE_LEN]> {
        self.nonce.as_ref()
    }

    /// Hash of the derived AEAD key, available once the key was used.
    pub fn key_fingerprint(&self) -> Option<[u8; 32]> {
        self.key_fingerprint
    }

    fn fail<E: Into<ProvisionError>>(&mut self, e: E) -> ProvisionError {
        self.state = SessionState::Failed;
        self.dh_secret = None;
        e.into()
    }

    pub fn start(&mut self) -> Result<AttestationRequest, ProvisionError> {
        expect_state(self.state, SessionState::Fresh)?;
        let mut nonce = [0u8; NONCE_LEN];
        rand::rngs::OsRng.fill_bytes(&mut nonce);
        self.nonce = Some(nonce);
        self.state = SessionState::Started;
        Ok(AttestationRequest { nonce })
    }

    /// Accepts iff the report verifies under the pinned ARK, carries the
    /// expected measurement and echoes this session's nonce. Returns the
    /// guest's DH public key.
    pub fn verify(
        &mut self,
        response: &AttestationResponse,
    ) -> Result<[u8; DH_PUBLIC_LEN], ProvisionError> {
        expect_state(self.state, SessionState::Started)?;
        let report = &response.report;
        if let Err(r) = verify_report(report, &response.chain, &self.trusted_ark) {
            return Err(self.fail(VerifyReject::Report(r)));
        }
        if report.measurement != self.expected.0 {
            return Err(self.fail(VerifyReject::MeasurementMismatch));
        }
        let (nonce, guest_public) = split_guest_data(&report.guest_data);
        if Some(nonce) != self.nonce {
            return Err(self.fail(VerifyReject::NonceMismatch));
        }
        self.verified = Some(Verified {
            guest_public,
            report_bytes: report.encode(),
        });
        self.state = SessionState::Verified;
        Ok(guest_public)
    }

    /// Wraps `disk_key` for the verified guest. Erases the DH secret.
    pub fn wrap_disk_key(&mut self, disk_key: &DiskKey) -> Result<KeyInjection, ProvisionError> {
        expect_state(self.state, SessionState::Verified)?;
        let secret = self.dh_secret.take().expect("secret held until wrap");
        let verified = self.verified.as_ref().expect("verified state has data");
        let nonce = self.nonce.expect("started session has a nonce");
        match wrap_key_inner(
            &secret,
            &verified.guest_public,
            &nonce,
            &verified.report_bytes,
            disk_key,
        ) {
            Ok((wrapped, fp)) => {
                self.key_fingerprint = Some(fp);
                self.state = SessionState::Completed;
                Ok(KeyInjection { wrapped })
            }
            Err(e) => Err(self.fail(e)),
        }
    }

    /// Marks an attest-only session as done.
    pub fn finish(&mut self) -> Result<(), ProvisionError> {
        expect_state(self.state, SessionState::Verified)?;
        self.dh_secret = None;
        self.state = SessionState::Completed;
        Ok(())
    }
}

impl fmt::Debug for OwnerSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OwnerSession")
            .field("state", &self.state)
            .field("expected", &self.expected)
            .finish_non_exhaustive()
    }
}

/// Guest side of one provisioning run.
pub struct GuestSession {
    sp: Arc<SpState>,
    chain: CertChain,
    measurement: LaunchDigest,
    policy: u64,
    dh_secret: Option<StaticSecret>,
    nonce: Option<[u8; NONCE_LEN]>,
    report_bytes: Option<[u8; REPORT_LEN]>,
    key_fingerprint: Option<[u8; 32]>,
    state: SessionState,
}

impl GuestSession {
    pub fn new(sp: Arc<SpState>, chain: CertChain, measurement: LaunchDigest, policy: u64) -> Self {
        GuestSession {
            sp,
            chain,
            measurement,
            policy,
            dh_secret: None,
            nonce: None,
            report_bytes: None,
            key_fingerprint: None,
            state: SessionState::Fresh,
        }
    }

    /// Session for a VM launched from `firmware` with `vcpu`; the SP
    /// measures the launch.
    pub fn launched(
        sp: Arc<SpState>,
        chain: CertChain,
        firmware: &FirmwareImage,
        vcpu: &VcpuState,
    ) -> Self {
        let digest = compute_launch_digest(firmware, vcpu);
        Self::new(sp, chain, digest, vcpu.policy())
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn measurement(&self) -> &LaunchDigest {
        &self.measurement
    }

    pub fn key_fingerprint(&self) -> Option<[u8; 32]> {
        self.key_fingerprint
    }

    /// True while the DH private key is still held.
    pub fn holds_secret(&self) -> bool {
        self.dh_secret.is_some()
    }

    pub fn handle_request(
        &mut self,
        request: &AttestationRequest,
    ) -> Result<AttestationResponse, ProvisionError> {
        expect_state(self.state, SessionState::Fresh)?;
        let secret = random_secret();
        let public = PublicKey::from(&secret).to_bytes();
        let data = guest_data(&request.nonce, &public);
        let report = match self
            .sp
            .request_report(self.measurement.0, data, self.policy)
        {
            Ok(r) => r,
            Err(e) => {
                self.state = SessionState::Failed;
                return Err(e.into());
            }
        };
        self.dh_secret = Some(secret);
        self.nonce = Some(request.nonce);
        self.report_bytes = Some(report.encode());
        self.state = SessionState::Started;
        Ok(AttestationResponse {
            report,
            chain: self.chain.clone(),
        })
    }

    /// Recovers the disk key. The DH secret is erased whatever the outcome.
    pub fn unwrap(&mut self, injection: &KeyInjection) -> Result<DiskKey, ProvisionError> {
        expect_state(self.state, SessionState::Started)?;
        let secret = self.dh_secret.take().expect("secret held until unwrap");
        let nonce = self.nonce.expect("started session has a nonce");
        let report = self.report_bytes.expect("started session has a report");
        match unwrap_key_inner(&secret, &injection.wrapped, &nonce, &report) {
            Ok((key, fp)) => {
                self.key_fingerprint = Some(fp);
                self.state = SessionState::Completed;
                Ok(key)
            }
            Err(e) => {
                self.state = SessionState::Failed;
                Err(e)
            }
        }
    }

    /// Ends a session that was only attested.
    pub fn finish(&mut self) {
        self.dh_secret = None;
        if self.state == SessionState::Started {
            self.state = SessionState::Completed;
        }
    }
}

impl fmt::Debug for GuestSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuestSession")
            .field("state", &self.state)
            .field("measurement", &self.measurement)
            .finish_non_exhaustive()
    }
}

pub fn owner_start(session: &mut OwnerSession) -> Result<AttestationRequest, ProvisionError> {
    session.start()
}

pub fn guest_handle_request(
    session: &mut GuestSession,
    request: &AttestationRequest,
) -> Result<AttestationResponse, ProvisionError> {
    session.handle_request(request)
}

pub fn owner_verify(
    session: &mut OwnerSession,
    response: &AttestationResponse,
) -> Result<[u8; DH_PUBLIC_LEN], ProvisionError> {
    session.verify(response)
}

pub fn wrap_disk_key(
    session: &mut OwnerSession,
    disk_key: &DiskKey,
) -> Result<KeyInjection, ProvisionError> {
    session.wrap_disk_key(disk_key)
}

pub fn guest_unwrap(
    session: &mut GuestSession,
    injection: &KeyInjection,
) -> Result<DiskKey, ProvisionError> {
    session.unwrap(injection)
}
