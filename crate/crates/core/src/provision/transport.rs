// SPDX-License-Identifier: Apache-2.0

//! Message channels and the protocol drivers that run over them.

use std::io::{self, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc::{self, Receiver, Sender};
use std::time::Duration;

use super::wire::{self, WireError};
use super::{codes, GuestSession, Message, OwnerSession, ProvisionError, DH_PUBLIC_LEN};
use crate::cryptdisk::DiskKey;

/// Bidirectional, ordered message transport.
pub trait Channel {
    fn send(&mut self, msg: &Message) -> Result<(), WireError>;
    fn recv(&mut self) -> Result<Message, WireError>;
}

impl<C: Channel + ?Sized> Channel for Box<C> {
    fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        (**self).send(msg)
    }

    fn recv(&mut self) -> Result<Message, WireError> {
        (**self).recv()
    }
}

impl<C: Channel + ?Sized> Channel for &mut C {
    fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        (**self).send(msg)
    }

    fn recv(&mut self) -> Result<Message, WireError> {
        (**self).recv()
    }
}

/// Framed messages over any byte stream, typically a `TcpStream`.
#[derive(Debug)]
pub struct Framed<S>(pub S);

impl<S: Read + Write> Channel for Framed<S> {
    fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        wire::write_message(&mut self.0, msg)
    }

    fn recv(&mut self) -> Result<Message, WireError> {
        wire::read_message(&mut self.0)
    }
}

/// In-process channel end. Messages cross as encoded frames so the framing
/// code is exercised exactly as on a socket.
#[derive(Debug)]
pub struct MemChannel {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// A connected pair of in-process channel ends.
pub fn loopback() -> (MemChannel, MemChannel) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        MemChannel { tx: a_tx, rx: a_rx },
        MemChannel { tx: b_tx, rx: b_rx },
    )
}

impl Channel for MemChannel {
    fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        self.tx
            .send(wire::frame(msg)?)
            .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe).into())
    }

    fn recv(&mut self) -> Result<Message, WireError> {
        let bytes = self
            .rx
            .recv()
            .map_err(|_| WireError::Io(io::ErrorKind::UnexpectedEof.into()))?;
        wire::deframe(&bytes)
    }
}

fn unexpected(want: &'static str, got: &Message) -> ProvisionError {
    match got {
        Message::Error { code, detail } => ProvisionError::Remote {
            code: *code,
            detail: detail.clone(),
        },
        other => ProvisionError::UnexpectedMessage {
            want,
            got: other.name(),
        },
    }
}

fn send_error<C: Channel + ?Sized>(ch: &mut C, code: u16, detail: impl Into<String>) {
    // The peer may already be gone; the local error is what matters.
    let _ = ch.send(&Message::Error {
        code,
        detail: detail.into(),
    });
}

fn owner_attest_steps<C: Channel + ?Sized>(
    ch: &mut C,
    session: &mut OwnerSession,
) -> Result<[u8; DH_PUBLIC_LEN], ProvisionError> {
    let request = session.start()?;
    ch.send(&Message::AttestationRequest(request))?;
    let response = match ch.recv()? {
        Message::AttestationResponse(r) => r,
        other => return Err(unexpected("attestation_response", &other)),
    };
    session.verify(&response).map_err(|e| {
        send_error(ch, codes::VERIFICATION_FAILED, e.code());
        e
    })
}

/// Owner: attest only. Sends `Ack` after a successful verification.
pub fn run_owner_attest<C: Channel + ?Sized>(
    ch: &mut C,
    session: &mut OwnerSession,
) -> Result<[u8; DH_PUBLIC_LEN], ProvisionError> {
    let guest_public = owner_attest_steps(ch, session)?;
    session.finish()?;
    ch.send(&Message::Ack)?;
    Ok(guest_public)
}

/// Owner: attest, then deliver `disk_key`. Succeeds only when the guest
/// acknowledges that the key unlocked its disk.
pub fn run_owner_provision<C: Channel + ?Sized>(
    ch: &mut C,
    session: &mut OwnerSession,
    disk_key: &DiskKey,
) -> Result<(), ProvisionError> {
    owner_attest_steps(ch, session)?;
    let injection = session.wrap_disk_key(disk_key)?;
    ch.send(&Message::KeyInjection(injection))?;
    match ch.recv()? {
        Message::Ack => Ok(()),
        other => Err(unexpected("ack", &other)),
    }
}

fn guest_respond<C: Channel + ?Sized>(
    ch: &mut C,
    session: &mut GuestSession,
) -> Result<(), ProvisionError> {
    let request = match ch.recv()? {
        Message::AttestationRequest(r) => r,
        other => {
            send_error(
                ch,
                codes::UNEXPECTED_MESSAGE,
                "expected attestation request",
            );
            return Err(unexpected("attestation_request", &other));
        }
    };
    match session.handle_request(&request) {
        Ok(response) => Ok(ch.send(&Message::AttestationResponse(Box::new(response)))?),
        Err(e) => {
            let code = match e {
                ProvisionError::SpUnavailable => codes::SP_UNAVAILABLE,
                _ => codes::SESSION_STATE,
            };
            send_error(ch, code, e.code());
            Err(e)
        }
    }
}

/// Guest: answer one attestation request. Key injections are refused.
pub fn serve_attestation<C: Channel + ?Sized>(
    ch: &mut C,
    session: &mut GuestSession,
) -> Result<(), ProvisionError> {
    guest_respond(ch, session)?;
    let next = ch.recv();
    session.finish();
    match next {
        Ok(Message::Ack) => Ok(()),
        Err(WireError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(()),
        Ok(Message::KeyInjection(_)) => {
            send_error(
                ch,
                codes::NOT_PROVISIONING,
                "this agent does not accept keys",
            );
            Err(ProvisionError::UnexpectedMessage {
                want: "ack",
                got: "key_injection",
            })
        }
        Ok(other) => Err(unexpected("ack", &other)),
        Err(e) => Err(e.into()),
    }
}

/// Returned by an unlock callback when the delivered key does not open the
/// disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnlockRefused;

/// Guest: one full provisioning session. `unlock` receives the unwrapped
/// key; the owner is acknowledged only if it succeeds.
pub fn serve_provisioning<C, F>(
    ch: &mut C,
    session: &mut GuestSession,
    unlock: F,
) -> Result<(), ProvisionError>
where
    C: Channel + ?Sized,
    F: FnOnce(DiskKey) -> Result<(), UnlockRefused>,
{
    guest_respond(ch, session)?;
    let injection = match ch.recv()? {
        Message::KeyInjection(i) => i,
        other => {
            session.finish();
            return Err(unexpected("key_injection", &other));
        }
    };
    let key = session.unwrap(&injection).map_err(|e| {
        send_error(ch, codes::UNWRAP_FAILED, e.code());
        e
    })?;
    if unlock(key).is_err() {
        send_error(ch, codes::UNLOCK_FAILED, "disk key rejected");
        return Err(ProvisionError::Unlock);
    }
    Ok(ch.send(&Message::Ack)?)
}

/// Attestation agent: serves each accepted connection on its own thread
/// with a fresh session. Stops after `max_sessions` connections if given.
pub fn serve_agent<M, D>(
    listener: &TcpListener,
    max_sessions: Option<usize>,
    make_session: M,
    on_done: D,
) -> io::Result<usize>
where
    M: Fn() -> GuestSession + Sync,
    D: Fn(Result<(), ProvisionError>) + Sync,
{
    let mut served = 0usize;
    std::thread::scope(|scope| -> io::Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            stream.set_read_timeout(Some(Duration::from_secs(30)))?;
            let mut session = make_session();
            let on_done = &on_done;
            scope.spawn(move || {
                let mut ch = Framed(stream);
                on_done(serve_attestation(&mut ch, &mut session));
            });
            served += 1;
            if max_sessions.is_some_and(|m| served >= m) {
                break;
            }
        }
        Ok(())
    })?;
    Ok(served)
}
