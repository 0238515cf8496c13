// SPDX-License-Identifier: Apache-2.0

//! Helpers shared by the CLI integration tests and the acceptance suite:
//! a scratch world of artifacts built through the real binary, guest
//! processes, and a frame-level recording proxy.

#![allow(dead_code)]

use std::ffi::OsStr;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStderr, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde_json::Value;
use snpguard_core::provision::wire::{read_message, write_message};
use snpguard_core::provision::Message;
use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_snpguard");

#[derive(Debug)]
pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn json(&self) -> Value {
        serde_json::from_str(self.stdout.trim())
            .unwrap_or_else(|e| panic!("stdout is not one JSON object ({e}): {:?}", self.stdout))
    }
}

pub fn command<I, S>(args: I) -> Command
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("SNPGUARD_PORT");
    cmd
}

pub fn run<I, S>(args: I) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    finish(command(args).output().expect("spawn snpguard"))
}

fn finish(out: std::process::Output) -> Run {
    Run {
        code: out.status.code().expect("exited normally"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

/// Scratch directory with an SP, a firmware blob, first-stage components
/// and a small root filesystem tree.
pub struct World {
    pub dir: TempDir,
}

impl World {
    pub fn new() -> World {
        let w = World {
            dir: tempfile::tempdir().unwrap(),
        };
        let ok = |r: Run| assert_eq!(r.code, 0, "{r:?}");
        ok(w.run(&["sp", "init", "--out", "@sp"]));
        ok(w.run(&[
            "firmware",
            "synth",
            "--out",
            "@fw.bin",
            "--size",
            "16384",
            "--marker-offset",
            "1024",
        ]));
        fs::write(w.p("kernel"), b"simulated kernel image").unwrap();
        fs::write(w.p("initramfs"), b"simulated initramfs").unwrap();
        let root = w.p("rootfs");
        for (path, content) in [
            ("init", "#!/bin/sh\nexec /usr/bin/app\n"),
            ("usr/bin/app", "application binary"),
            ("etc/ssh/ssh_host_ed25519_key", "host private key"),
            ("etc/hostname", "guest"),
        ] {
            let full = root.join(path);
            fs::create_dir_all(full.parent().unwrap()).unwrap();
            fs::write(full, content).unwrap();
        }
        w
    }

    pub fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs the binary; arguments starting with `@` are paths in the world.
    pub fn run(&self, args: &[&str]) -> Run {
        run(self.args(args))
    }

    pub fn args(&self, args: &[&str]) -> Vec<PathBuf> {
        args.iter()
            .map(|a| match a.strip_prefix('@') {
                Some(rest) => self.p(rest),
                None => PathBuf::from(a),
            })
            .collect()
    }

    pub fn bundle(&self, out: &str, extra: &[&str]) -> Run {
        let mut args = vec![
            "bundle",
            "build",
            "--firmware",
            "@fw.bin",
            "--kernel",
            "@kernel",
            "--initramfs",
            "@initramfs",
            "--cmdline",
            "console=ttyS0",
            "--vcpus",
            "2",
            "--out",
        ];
        let out = format!("@{out}");
        args.push(&out);
        args.extend_from_slice(extra);
        self.run(&args)
    }

    /// Verity image `disk.*` and bundle `bundle/` carrying its root hash.
    pub fn verity(&self) {
        let r = self.run(&[
            "image",
            "build",
            "--mode",
            "verity",
            "--in",
            "@rootfs",
            "--out",
            "@disk",
            "--block-size",
            "512",
        ]);
        assert_eq!(r.code, 0, "{r:?}");
        let r = self.bundle("bundle", &["--verity-meta", "@disk.meta"]);
        assert_eq!(r.code, 0, "{r:?}");
    }

    /// Encrypted image `PREFIX.*` under key file `KEY`, and bundle `ebundle/`.
    pub fn encrypted(&self, prefix: &str, key: &str) {
        let (out, key) = (format!("@{prefix}"), format!("@{key}"));
        let r = self.run(&[
            "image",
            "build",
            "--mode",
            "encrypted",
            "--in",
            "@rootfs",
            "--out",
            &out,
            "--keyfile",
            &key,
            "--block-size",
            "512",
        ]);
        assert_eq!(r.code, 0, "{r:?}");
        if !self.p("ebundle").exists() {
            let r = self.bundle("ebundle", &[]);
            assert_eq!(r.code, 0, "{r:?}");
        }
    }

    pub fn verity_boot_args(&self) -> Vec<&'static str> {
        vec![
            "guest",
            "boot",
            "--bundle",
            "@bundle",
            "--mode",
            "verity",
            "--image",
            "@disk.img",
            "--meta",
            "@disk.meta",
            "--tree",
            "@disk.tree",
        ]
    }

    pub fn encrypted_boot_args(&self, prefix: &str) -> Vec<String> {
        [
            "guest",
            "boot",
            "--bundle",
            "@ebundle",
            "--mode",
            "encrypted",
            "--listen",
            "127.0.0.1:0",
            "--sp",
            "@sp/sp.json",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain(
            [
                "--image",
                &format!("@{prefix}.img"),
                "--header",
                &format!("@{prefix}.hdr"),
                "--tags",
                &format!("@{prefix}.tags"),
            ]
            .map(String::from),
        )
        .collect()
    }

    pub fn attest(&self, addr: &str, manifest: &str) -> Run {
        let manifest = format!("@{manifest}");
        self.run(&[
            "owner",
            "attest",
            "--addr",
            addr,
            "--manifest",
            &manifest,
            "--ark",
            "@sp/ark.pub",
        ])
    }

    pub fn provision(&self, addr: &str, key: &str) -> Run {
        let key = format!("@{key}");
        self.run(&[
            "owner",
            "provision",
            "--addr",
            addr,
            "--manifest",
            "@ebundle/manifest.json",
            "--ark",
            "@sp/ark.pub",
            "--keyfile",
            &key,
        ])
    }

    pub fn spawn(&self, args: &[&str]) -> Result<Guest, Run> {
        Guest::spawn(command(self.args(args)))
    }
}

/// A guest process that has announced its listening address.
pub struct Guest {
    child: Child,
    pub addr: String,
    stderr: BufReader<ChildStderr>,
    seen: String,
}

impl Guest {
    /// Starts `cmd` and waits for its "listening on" line. Returns the
    /// finished run if the process exits before listening.
    // The child moves into `Guest`, whose drop waits on it.
    #[allow(clippy::zombie_processes)]
    pub fn spawn(mut cmd: Command) -> Result<Guest, Run> {
        let mut child = cmd
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut stderr = BufReader::new(child.stderr.take().unwrap());
        let mut seen = String::new();
        loop {
            let mut line = String::new();
            if stderr.read_line(&mut line).unwrap() == 0 {
                let mut stdout = String::new();
                child
                    .stdout
                    .take()
                    .unwrap()
                    .read_to_string(&mut stdout)
                    .unwrap();
                let status = child.wait().unwrap();
                return Err(Run {
                    code: status.code().unwrap(),
                    stdout,
                    stderr: seen,
                });
            }
            seen.push_str(&line);
            if let Some(addr) = line.trim().strip_prefix("listening on ") {
                let addr = addr.to_string();
                return Ok(Guest {
                    child,
                    addr,
                    stderr,
                    seen,
                });
            }
        }
    }

    pub fn port(&self) -> u16 {
        self.addr.rsplit_once(':').unwrap().1.parse().unwrap()
    }

    pub fn wait(mut self) -> Run {
        let mut stdout = String::new();
        self.child
            .stdout
            .take()
            .unwrap()
            .read_to_string(&mut stdout)
            .unwrap();
        self.stderr.read_to_string(&mut self.seen).unwrap();
        let status = self.child.wait().unwrap();
        Run {
            code: status.code().unwrap(),
            stdout,
            stderr: std::mem::take(&mut self.seen),
        }
    }
}

impl Drop for Guest {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Message log of one proxied connection, in arrival order, tagged with the
/// direction (`true` = client to server).
pub type Transcript = Arc<Mutex<Vec<(bool, Message)>>>;

/// Forwards one connection to `upstream`, frame by frame, recording every
/// message.
pub fn recording_proxy(upstream: String) -> (String, Transcript, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let log: Transcript = Arc::default();
    let log2 = log.clone();
    let handle = thread::spawn(move || {
        let (client, _) = listener.accept().unwrap();
        let server = TcpStream::connect(upstream).unwrap();
        let pump = |mut from: TcpStream, mut to: TcpStream, dir: bool, log: Transcript| {
            while let Ok(msg) = read_message(&mut from) {
                log.lock().unwrap().push((dir, msg.clone()));
                if write_message(&mut to, &msg).is_err() {
                    break;
                }
            }
            let _ = to.shutdown(Shutdown::Write);
        };
        let (c2, s2) = (client.try_clone().unwrap(), server.try_clone().unwrap());
        let l = log2.clone();
        let up = thread::spawn(move || pump(c2, s2, true, l));
        pump(server, client, false, log2);
        up.join().unwrap();
    });
    (addr, log, handle)
}

/// Impersonates a guest: answers one attestation request with `response`
/// regardless of the nonce, then returns whatever the owner sends next.
pub fn replay_server(response: Message) -> (String, JoinHandle<Option<Message>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let _request = read_message(&mut s).ok()?;
        write_message(&mut s, &response).ok()?;
        read_message(&mut s).ok()
    });
    (addr, handle)
}

pub fn recorded(log: &Transcript, name: &str) -> Message {
    log.lock()
        .unwrap()
        .iter()
        .find(|(_, m)| m.name() == name)
        .map(|(_, m)| m.clone())
        .unwrap_or_else(|| panic!("no {name} recorded"))
}

/// A loopback port with nothing listening on it.
pub fn dead_port() -> u16 {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().port()
}

pub fn flip_bit(path: &Path, bit: usize) {
    let mut bytes = fs::read(path).unwrap();
    bytes[bit / 8] ^= 1 << (bit % 8);
    fs::write(path, bytes).unwrap();
}
