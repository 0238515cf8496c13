// SPDX-License-Identifier: Apache-2.0

//! Length-prefixed framing: `len u32 LE ‖ type u8 ‖ payload`, where `len`
//! counts payload bytes only.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{AttestationRequest, AttestationResponse, KeyInjection, Message, WrappedKey};
use crate::attestation::{AttestationReport, CertChain, CHAIN_LEN, REPORT_LEN};

pub const MAX_PAYLOAD: usize = 1 << 24;
pub const HEADER_LEN: usize = 5;

pub const TYPE_ATT_REQ: u8 = 1;
pub const TYPE_ATT_RESP: u8 = 2;
pub const TYPE_KEY_INJECT: u8 = 3;
pub const TYPE_ACK: u8 = 4;
pub const TYPE_ERROR: u8 = 5;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame length field says {declared} payload bytes, found {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    Oversized(usize),
    #[error("malformed {0} payload")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn type_of(msg: &Message) -> u8 {
    match msg {
        Message::AttestationRequest(_) => TYPE_ATT_REQ,
        Message::AttestationResponse(_) => TYPE_ATT_RESP,
        Message::KeyInjection(_) => TYPE_KEY_INJECT,
        Message::Ack => TYPE_ACK,
        Message::Error { .. } => TYPE_ERROR,
    }
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    match msg {
        Message::AttestationRequest(req) => req.nonce.to_vec(),
        Message::AttestationResponse(resp) => {
            let mut out = Vec::with_capacity(REPORT_LEN + CHAIN_LEN);
            out.extend_from_slice(&resp.report.encode());
            out.extend_from_slice(&resp.chain.encode());
            out
        }
        Message::KeyInjection(inj) => {
            let mut out = Vec::with_capacity(32 + 48);
            out.extend_from_slice(&inj.wrapped.owner_dh_public);
            out.extend_from_slice(&inj.wrapped.ciphertext);
            out
        }
        Message::Ack => Vec::new(),
        Message::Error { code, detail } => {
            let mut out = code.to_le_bytes().to_vec();
            out.extend_from_slice(detail.as_bytes());
            out
        }
    }
}

fn decode_payload(ty: u8, payload: &[u8]) -> Result<Message, WireError> {
    match ty {
        TYPE_ATT_REQ => {
            let nonce = payload
                .try_into()
                .map_err(|_| WireError::Malformed("attestation request"))?;
            Ok(Message::AttestationRequest(AttestationRequest { nonce }))
        }
        TYPE_ATT_RESP => {
            if payload.len() != REPORT_LEN + CHAIN_LEN {
                return Err(WireError::Malformed("attestation response"));
            }
            let report = AttestationReport::decode(&payload[..REPORT_LEN])
                .map_err(|_| WireError::Malformed("attestation response"))?;
            let chain = CertChain::decode(&payload[REPORT_LEN..])
                .map_err(|_| WireError::Malformed("attestation response"))?;
            Ok(Message::AttestationResponse(Box::new(
                AttestationResponse { report, chain },
            )))
        }
        TYPE_KEY_INJECT => {
            if payload.len() != 80 {
                return Err(WireError::Malformed("key injection"));
            }
            Ok(Message::KeyInjection(KeyInjection {
                wrapped: WrappedKey {
                    owner_dh_public: payload[..32].try_into().unwrap(),
                    ciphertext: payload[32..].try_into().unwrap(),
                },
            }))
        }
        TYPE_ACK if payload.is_empty() => Ok(Message::Ack),
        TYPE_ACK => Err(WireError::Malformed("ack")),
        TYPE_ERROR => {
            if payload.len() < 2 {
                return Err(WireError::Malformed("error"));
            }
            let code = u16::from_le_bytes([payload[0], payload[1]]);
            let detail = std::str::from_utf8(&payload[2..])
                .map_err(|_| WireError::Malformed("error"))?
                .to_string();
            Ok(Message::Error { code, detail })
        }
        other => Err(WireError::UnknownType(other)),
    }
}

pub fn frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let payload = encode_payload(msg);
    if payload.len() > MAX_PAYLOAD {
        return Err(WireError::Oversized(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.push(type_of(msg));
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes exactly one complete frame.
pub fn deframe(bytes: &[u8]) -> Result<Message, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::LengthMismatch {
            declared: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let declared = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if declared > MAX_PAYLOAD {
        return Err(WireError::Oversized(declared));
    }
    let actual = bytes.len() - HEADER_LEN;
    if declared != actual {
        return Err(WireError::LengthMismatch { declared, actual });
    }
    decode_payload(bytes[4], &bytes[HEADER_LEN..])
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&frame(msg)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_message<R: Read>(r: &mut R) -> Result<Message, WireError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let len = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversized(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    decode_payload(header[4], &payload)
}
