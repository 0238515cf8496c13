// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::net::TcpStream;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use serde_json::Value;
use sha2::{Digest, Sha256};
use snpguard_core::attestation::{ark_public, issue_cert_chain, verify_report_bytes};
use snpguard_core::cryptdisk::{decrypt_block, encrypt_image, open_encrypted};
use snpguard_core::imaging::{Archive, ArchiveEntry};
use snpguard_core::provision::wire::{read_message, write_message};
use snpguard_core::provision::{
    self, guest_data, loopback, run_owner_provision, serve_provisioning, unwrap_key, wrap_key,
    AttestationRequest, AttestationResponse, KeyInjection, Message,
};
use snpguard_core::verity::{build_tree, verify_block, VerityError};
use snpguard_core::{
    AttestationReport, CertChain, CryptHeader, DiskKey, GuestSession, LaunchDigest, OwnerSession,
    SpState, VerityMetadata,
};
use x25519_dalek::{PublicKey, StaticSecret};

use common::{flip_bit, recorded, recording_proxy, replay_server, Run, World};

const BUDGET: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}

fn reason(run: &Run) -> String {
    serde_json::from_str::<Value>(run.stdout.trim())
        .ok()
        .and_then(|v| v["reason"].as_str().map(String::from))
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// 1. Integrity-only workflow through the binary.

struct Gates {
    boot: Run,
    owner: Option<Run>,
}

impl Gates {
    fn accepted(&self) -> bool {
        self.boot.code == 0 && self.owner.as_ref().is_some_and(|o| o.code == 0)
    }

    /// The gate that rejected, if any: a verification failure at boot or at
    /// the owner.
    fn caught_by(&self) -> Option<String> {
        if self.boot.code == 3 {
            return Some(format!("boot:{}", reason(&self.boot)));
        }
        match &self.owner {
            Some(o) if o.code == 3 => Some(format!("owner:{}", reason(o))),
            _ => None,
        }
    }
}

/// Launches the guest from `bundle`/`disk` with an attestation listener and
/// runs the owner against the trusted manifest.
fn launch_and_attest(w: &World, bundle: &str, disk: &str) -> Gates {
    let args = [
        "guest",
        "boot",
        "--bundle",
        &format!("@{bundle}"),
        "--mode",
        "verity",
        "--image",
        &format!("@{disk}.img"),
        "--meta",
        &format!("@{disk}.meta"),
        "--tree",
        &format!("@{disk}.tree"),
        "--listen",
        "127.0.0.1:0",
        "--sp",
        "@sp/sp.json",
    ]
    .map(String::from);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    match w.spawn(&args) {
        Err(boot) => Gates { boot, owner: None },
        Ok(guest) => {
            let owner = w.attest(&guest.addr, "bundle/manifest.json");
            Gates {
                boot: guest.wait(),
                owner: Some(owner),
            }
        }
    }
}

fn integrity_workflow() -> Outcome {
    let w = World::new();
    w.verity();
    let honest = launch_and_attest(&w, "bundle", "disk");
    check(honest.accepted(), || {
        format!(
            "honest run rejected: boot {:?} owner {:?}",
            honest.boot, honest.owner
        )
    })?;

    let meta = VerityMetadata::decode(&fs::read(w.p("disk.meta")).unwrap()).unwrap();
    let blocks = meta.data_blocks as usize;
    let bs = meta.block_size as usize;
    let mut rng = StdRng::seed_from_u64(1);

    type Mutation = Box<dyn Fn(&World)>;
    let mutations: Vec<(&str, Mutation)> = vec![
        (
            "kernel",
            Box::new(|w: &World| flip_bit(&w.p("m/kernel.bin"), 7)),
        ),
        (
            "initramfs",
            Box::new(|w: &World| flip_bit(&w.p("m/initramfs.bin"), 11)),
        ),
        (
            "cmdline",
            Box::new(|w: &World| {
                let path = w.p("m/manifest.json");
                let mut m: Value =
                    serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
                let cmdline = m["cmdline"].as_str().unwrap();
                // Point the root hash somewhere else: flip its last hex digit.
                let last = cmdline.chars().last().unwrap();
                let swapped = if last == '0' { '1' } else { '0' };
                m["cmdline"] = Value::from(format!("{}{swapped}", &cmdline[..cmdline.len() - 1]));
                fs::write(path, m.to_string()).unwrap();
            }),
        ),
        ("data block", {
            let bit = rng.gen_range(0..blocks) * bs * 8 + rng.gen_range(0..8);
            Box::new(move |w: &World| flip_bit(&w.p("mdisk.img"), bit))
        }),
        ("tree node", {
            let tree_len = fs::read(w.p("disk.tree")).unwrap().len();
            let bit = rng.gen_range(0..tree_len * 8);
            Box::new(move |w: &World| flip_bit(&w.p("mdisk.tree"), bit))
        }),
    ];

    let mut caught = Vec::new();
    for (name, mutate) in &mutations {
        let _ = fs::remove_dir_all(w.p("m"));
        copy_dir(&w.p("bundle"), &w.p("m"));
        for ext in ["img", "meta", "tree"] {
            fs::copy(w.p(&format!("disk.{ext}")), w.p(&format!("mdisk.{ext}"))).unwrap();
        }
        mutate(&w);
        let gates = launch_and_attest(&w, "m", "mdisk");
        match gates.caught_by() {
            Some(gate) => caught.push(format!("{name}->{gate}")),
            None => {
                return Err(format!(
                    "{name} mutation not caught: boot {:?} owner {:?}",
                    gates.boot, gates.owner
                ))
            }
        }
    }
    Ok(format!(
        "6/6 scenarios, honest accepted; {}",
        caught.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 2. Encrypted workflow through the binary.

fn spawn_encrypted(w: &World, prefix: &str) -> Result<common::Guest, String> {
    let args = w.encrypted_boot_args(prefix);
    w.spawn(&args.iter().map(String::as_str).collect::<Vec<_>>())
        .map_err(|r| format!("guest did not listen: {r:?}"))
}

fn encrypted_workflow() -> Outcome {
    let w = World::new();
    w.encrypted("enc", "disk.key");
    w.encrypted("other", "other.key");

    // Honest, with the session recorded for the replay scenario.
    let guest = spawn_encrypted(&w, "enc")?;
    let (proxy, log, pump) = recording_proxy(guest.addr.clone());
    let owner = w.provision(&proxy, "disk.key");
    pump.join().unwrap();
    let boot = guest.wait();
    check(owner.code == 0 && boot.code == 0, || {
        format!("honest: owner {owner:?} boot {boot:?}")
    })?;
    let stage = boot.json()["stage"].clone();
    check(stage == "second_stage_running", || {
        format!("honest stage {stage}")
    })?;

    // Wrong key: unlock failure on both sides.
    let guest = spawn_encrypted(&w, "enc")?;
    let owner = w.provision(&guest.addr, "other.key");
    let boot = guest.wait();
    check(owner.code == 4 && boot.code == 4, || {
        format!("wrong key: owner {owner:?} boot {boot:?}")
    })?;

    // Replay of the recorded key injection into a fresh guest session.
    let guest = spawn_encrypted(&w, "enc")?;
    let mut s = TcpStream::connect(&guest.addr).map_err(|e| e.to_string())?;
    write_message(&mut s, &recorded(&log, "attestation_request")).unwrap();
    let fresh = read_message(&mut s).map_err(|e| e.to_string())?;
    check(matches!(fresh, Message::AttestationResponse(_)), || {
        format!("guest answered {fresh:?}")
    })?;
    write_message(&mut s, &recorded(&log, "key_injection")).unwrap();
    let reply = read_message(&mut s).map_err(|e| e.to_string())?;
    let boot = guest.wait();
    check(
        matches!(
            reply,
            Message::Error {
                code: provision::codes::UNWRAP_FAILED,
                ..
            }
        ) && boot.code == 3,
        || format!("injection replay: reply {reply:?} boot {boot:?}"),
    )?;

    // Replay of the recorded attestation response to a fresh owner session.
    let (addr, server) = replay_server(recorded(&log, "attestation_response"));
    let owner = w.provision(&addr, "disk.key");
    let last = server.join().unwrap();
    check(
        owner.code == 3
            && reason(&owner) == "nonce_mismatch"
            && !matches!(last, Some(Message::KeyInjection(_))),
        || format!("response replay: owner {owner:?}, server saw {last:?}"),
    )?;
    Ok("3/3 scenarios: honest=0, wrong key=4/4, replay=3 (unwrap_failed, nonce_mismatch)".into())
}

// ---------------------------------------------------------------------------
// 3. Merkle root against an independent recomputation.

/// Top-down recursive root over zero-padded, salted blocks.
fn naive_root(data: &[u8], bs: usize, salt: &[u8]) -> [u8; 32] {
    fn hash(salt: &[u8], payload: &[u8], bs: usize) -> [u8; 32] {
        let mut padded = payload.to_vec();
        padded.resize(bs, 0);
        Sha256::new()
            .chain_update(salt)
            .chain_update(&padded)
            .finalize()
            .into()
    }
    fn node(h: u32, start: usize, blocks: &[&[u8]], bs: usize, salt: &[u8]) -> [u8; 32] {
        if h == 0 {
            return hash(salt, blocks[start], bs);
        }
        let fanout = bs / 32;
        let span = fanout.pow(h - 1);
        let children: Vec<u8> = (0..fanout)
            .map(|k| start + k * span)
            .filter(|&s| s < blocks.len())
            .flat_map(|s| node(h - 1, s, blocks, bs, salt))
            .collect();
        hash(salt, &children, bs)
    }
    let blocks: Vec<&[u8]> = data.chunks(bs).collect();
    let mut height = 0;
    while (bs / 32).pow(height) < blocks.len() {
        height += 1;
    }
    node(height, 0, &blocks, bs, salt)
}

fn merkle_equivalence() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut flips = 0usize;
    for i in 0..50 {
        let bs = if i % 2 == 0 { 512 } else { 4096 };
        let len = rng.gen_range(1..=64 * bs);
        let mut data = vec![0u8; len];
        rng.fill_bytes(&mut data);
        let mut salt = vec![0u8; rng.gen_range(0..=32)];
        rng.fill_bytes(&mut salt);

        let (meta, tree) = build_tree(&data[..], bs as u32, &salt).map_err(|e| e.to_string())?;
        check(meta.root_hash == naive_root(&data, bs, &salt), || {
            format!("image {i}: root differs")
        })?;

        let target = rng.gen_range(0..meta.data_blocks);
        let start = target as usize * bs;
        let end = (start + bs).min(len);
        let sampled: Vec<usize> = (0..8).map(|_| rng.gen_range(start * 8..end * 8)).collect();
        for bit in start * 8..end * 8 {
            data[bit / 8] ^= 1 << (bit % 8);
            let r = verify_block(&meta, &tree, &data, target);
            check(
                matches!(r, Err(VerityError::IntegrityViolation { block }) if block == target),
                || format!("image {i}: flip {bit} gave {r:?}"),
            )?;
            // Exactly that block: every other block still verifies.
            if sampled.contains(&bit) {
                for other in (0..meta.data_blocks).filter(|&b| b != target) {
                    check(verify_block(&meta, &tree, &data, other).is_ok(), || {
                        format!("image {i}: flip {bit} broke block {other}")
                    })?;
                }
            }
            data[bit / 8] ^= 1 << (bit % 8);
            flips += 1;
        }
    }
    Ok(format!(
        "50/50 roots equal; {flips} single-bit flips each failed exactly their block"
    ))
}

// ---------------------------------------------------------------------------
// 4. Protocol key agreement.

fn protocol_properties() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let ark_seed: [u8; 32] = rng.gen();
    let sp = Arc::new(SpState::new(rng.gen(), 1));
    let chain = issue_cert_chain(&ark_seed, &sp);
    let ark = ark_public(&ark_seed);

    for i in 0..100 {
        let mut m = [0u8; 48];
        rng.fill_bytes(&mut m);
        let digest = LaunchDigest(m);
        let key = DiskKey::from_bytes(rng.gen());
        let (mut owner_end, mut guest_end) = loopback();
        let (sp, chain) = (sp.clone(), chain.clone());
        let guest = thread::spawn(move || {
            let mut session = GuestSession::new(sp, chain, digest, 0);
            let mut delivered = None;
            let r = serve_provisioning(&mut guest_end, &mut session, |k| {
                delivered = Some(k);
                Ok(())
            });
            (r, session.key_fingerprint(), delivered)
        });
        let mut owner = OwnerSession::new(digest, ark);
        let owner_result = run_owner_provision(&mut owner_end, &mut owner, &key);
        let (guest_result, guest_fp, delivered) = guest.join().unwrap();
        check(owner_result.is_ok() && guest_result.is_ok(), || {
            format!("session {i}: owner {owner_result:?} guest {guest_result:?}")
        })?;
        check(
            owner.key_fingerprint().is_some() && owner.key_fingerprint() == guest_fp,
            || format!("session {i}: derived keys differ"),
        )?;
        check(delivered.as_ref() == Some(&key), || {
            format!("session {i}: wrong disk key delivered")
        })?;
    }

    // Each session has its own guest secret, nonce and signed report; the
    // owner of session j wraps for the guest of session j.
    struct Session {
        guest: StaticSecret,
        nonce: [u8; 32],
        report: Vec<u8>,
    }
    let sessions: Vec<Session> = (0..5)
        .map(|_| {
            let guest = StaticSecret::random_from_rng(&mut rng);
            let nonce: [u8; 32] = rng.gen();
            let data = guest_data(&nonce, PublicKey::from(&guest).as_bytes());
            let report = sp
                .request_report([7; 48], data, 0)
                .unwrap()
                .encode()
                .to_vec();
            Session {
                guest,
                nonce,
                report,
            }
        })
        .collect();
    let key = DiskKey::from_bytes(rng.gen());
    let wrapped: Vec<_> = sessions
        .iter()
        .map(|s| {
            let owner = StaticSecret::random_from_rng(&mut rng);
            wrap_key(
                &owner,
                PublicKey::from(&s.guest).as_bytes(),
                &s.nonce,
                &s.report,
                &key,
            )
            .unwrap()
        })
        .collect();
    for (i, s) in sessions.iter().enumerate() {
        for (j, w) in wrapped.iter().enumerate() {
            let r = unwrap_key(&s.guest, w, &s.nonce, &s.report);
            let ok = matches!(&r, Ok(k) if *k == key);
            check(ok == (i == j), || {
                format!(
                    "matrix ({i},{j}) unwrap {}",
                    if ok { "succeeded" } else { "failed" }
                )
            })?;
        }
    }
    Ok("100/100 sessions agree on the AEAD key; 5x5 matrix unwraps only on the diagonal".into())
}

// ---------------------------------------------------------------------------
// 5. Report signature and chain soundness.

fn signature_soundness() -> Outcome {
    let mut rng = StdRng::seed_from_u64(5);
    let ark_seed: [u8; 32] = rng.gen();
    let sp = SpState::new(rng.gen(), rng.gen_range(1..100));
    let chain = issue_cert_chain(&ark_seed, &sp).encode();
    let ark = ark_public(&ark_seed);
    let (mut honest, mut rejected) = (0, 0);
    for i in 0..1000 {
        let mut measurement = [0u8; 48];
        let mut data = [0u8; 64];
        rng.fill_bytes(&mut measurement);
        rng.fill_bytes(&mut data);
        let report = sp
            .request_report(measurement, data, rng.gen())
            .unwrap()
            .encode();
        check(verify_report_bytes(&report, &chain, &ark).is_ok(), || {
            format!("honest report {i} rejected")
        })?;
        honest += 1;
        let mut bad = report;
        let bit = rng.gen_range(0..report.len() * 8);
        bad[bit / 8] ^= 1 << (bit % 8);
        check(verify_report_bytes(&bad, &chain, &ark).is_err(), || {
            format!("flip of bit {bit} accepted")
        })?;
        rejected += 1;
    }
    Ok(format!(
        "{rejected}/1000 flipped reports rejected, {honest}/1000 honest accepted"
    ))
}

// ---------------------------------------------------------------------------
// 6. Format stability against committed vectors.

fn golden_formats() -> Outcome {
    let v: Value =
        serde_json::from_str(include_str!("../../core/tests/golden/vectors.json")).unwrap();
    let b = |v: &Value| hex::decode(v.as_str().unwrap()).unwrap();
    let a32 = |v: &Value| -> [u8; 32] { b(v).try_into().unwrap() };
    let i = &v["inputs"];

    let sp = SpState::new(a32(&i["chip_secret"]), i["tcb_version"].as_u64().unwrap());
    let measurement: [u8; 48] = b(&i["measurement"]).try_into().unwrap();
    let data: [u8; 64] = b(&i["guest_data"]).try_into().unwrap();
    let body = snpguard_core::ReportBody::from_slices(
        sp.tcb_version(),
        i["policy"].as_u64().unwrap(),
        &measurement,
        &data,
        &b(&i["report_id"]),
    )
    .unwrap();
    let report = sp.sign_report(&body).unwrap().encode();
    check(
        report.len() == 228 && report.to_vec() == b(&v["report"]),
        || "report encoding".into(),
    )?;
    let chain = issue_cert_chain(&a32(&i["ark_seed"]), &sp);

    let (meta, _) = build_tree(
        &b(&i["verity_data"])[..],
        i["verity_block_size"].as_u64().unwrap() as u32,
        &b(&i["verity_salt"]),
    )
    .unwrap();
    check(meta.encode() == b(&v["verity_meta"]), || {
        "verity metadata header".into()
    })?;

    let img = encrypt_image(
        &b(&i["crypt_data"])[..],
        &DiskKey::from_bytes(a32(&i["crypt_key"])),
        b(&i["crypt_uuid"]).try_into().unwrap(),
        i["crypt_block_size"].as_u64().unwrap() as u32,
    )
    .unwrap();
    check(
        img.header.encode().to_vec() == b(&v["crypt_header"]),
        || "crypt header".into(),
    )?;
    check(CryptHeader::decode(&b(&v["crypt_header"])).is_ok(), || {
        "crypt header decode".into()
    })?;

    let entries = i["archive_entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| ArchiveEntry {
            path: e[0].as_str().unwrap().into(),
            mode: e[1].as_u64().unwrap() as u32,
            content: b(&e[2]),
        });
    check(
        Archive::from_entries(entries).unwrap().pack() == b(&v["archive"]),
        || "archive format".into(),
    )?;

    let nonce = a32(&i["provision_nonce"]);
    let owner = StaticSecret::from(a32(&i["owner_dh_secret"]));
    let guest = PublicKey::from(&StaticSecret::from(a32(&i["guest_dh_secret"])));
    let wrapped = wrap_key(
        &owner,
        guest.as_bytes(),
        &nonce,
        &report,
        &DiskKey::from_bytes(a32(&i["disk_key"])),
    )
    .unwrap();
    let frames = [
        (
            "attestation_request",
            Message::AttestationRequest(AttestationRequest { nonce }),
        ),
        (
            "attestation_response",
            Message::AttestationResponse(Box::new(AttestationResponse {
                report: AttestationReport::decode(&report).unwrap(),
                chain: CertChain::decode(&chain.encode()).unwrap(),
            })),
        ),
        (
            "key_injection",
            Message::KeyInjection(KeyInjection { wrapped }),
        ),
        ("ack", Message::Ack),
        (
            "error",
            Message::Error {
                code: provision::codes::VERIFICATION_FAILED,
                detail: "bad_signature".into(),
            },
        ),
    ];
    for (name, msg) in &frames {
        check(
            provision::frame(msg).unwrap() == b(&v["frames"][name]),
            || format!("{name} frame"),
        )?;
    }
    Ok("report (228 B), verity header, crypt header, archive, 5 wire frames byte-exact".into())
}

// ---------------------------------------------------------------------------
// 7. Encrypted blocks bound to their position.

fn disk_misplacement() -> Outcome {
    const BS: usize = 512;
    let mut rng = StdRng::seed_from_u64(7);
    let mut data = vec![0u8; 8 * BS];
    rng.fill_bytes(&mut data);
    let key = DiskKey::from_bytes(rng.gen());
    let img = encrypt_image(&data[..], &key, rng.gen(), BS as u32).unwrap();
    check(img.header.data_blocks == 8, || {
        "image is not 8 blocks".into()
    })?;

    let mut rejected = 0;
    for from in 0..8 {
        for to in (0..8).filter(|&t| t != from) {
            let (mut cipher, mut tags) = (img.cipher.clone(), img.tags.clone());
            cipher[to * BS..(to + 1) * BS].copy_from_slice(&img.cipher[from * BS..(from + 1) * BS]);
            tags[to * 16..(to + 1) * 16].copy_from_slice(&img.tags[from * 16..(from + 1) * 16]);
            let slot = decrypt_block(&img.header, &cipher, &tags, &key, to as u64);
            let whole =
                open_encrypted(img.header.clone(), &cipher, &tags, &key).and_then(|r| r.read_all());
            check(slot.is_err() && whole.is_err(), || {
                format!("block {from} accepted in slot {to}")
            })?;
            rejected += 1;
        }
    }
    Ok(format!("{rejected}/56 block moves rejected"))
}

fn main() {
    panic::set_hook(Box::new(|_| {}));
    let criteria: [Criterion; 7] = [
        ("1 integrity-only workflow", integrity_workflow),
        ("2 encrypted workflow", encrypted_workflow),
        ("3 merkle oracle equivalence", merkle_equivalence),
        ("4 protocol properties", protocol_properties),
        ("5 signature and chain soundness", signature_soundness),
        ("6 format stability", golden_formats),
        ("7 disk misplacement", disk_misplacement),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (name, criterion) in criteria {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail} ({secs:.2} s)"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail} ({secs:.2} s)");
            }
        }
    }
    let total = started.elapsed();
    let within = total < BUDGET;
    println!(
        "[{}] total runtime {:.1} s (budget {} s)",
        if within { "PASS" } else { "FAIL" },
        total.as_secs_f64(),
        BUDGET.as_secs()
    );
    if failed > 0 || !within {
        std::process::exit(1);
    }
}
