// SPDX-License-Identifier: Apache-2.0

//! Offline owner-side preparation: SP state, firmware, bundles, images.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use serde_json::json;
use snpguard_core::attestation::{ark_public, issue_cert_chain};
use snpguard_core::imaging::{
    self, build_second_stage, with_verity_root, ImagePrepConfig, ModeKind,
};
use snpguard_core::measurement::{compute_launch_digest, inject_hashes};
use snpguard_core::{
    Archive, Bundle, FirmwareImage, SecondStage, SpState, VcpuState, VerityMetadata,
};

use super::with_ext;
use crate::args::{
    BundleCommand, ComponentArgs, DigestArgs, FirmwareCommand, ImageCommand, Mode, SpCommand,
};
use crate::support::{self, load_or_create_key, SpFile};
use crate::{CmdResult, Failure, Output};

pub fn sp(cmd: &SpCommand) -> CmdResult {
    let SpCommand::Init { out, tcb } = cmd;
    let sp = SpState::generate(*tcb);
    let mut ark_seed = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut ark_seed);
    let chain = issue_cert_chain(&ark_seed, &sp);
    let ark = ark_public(&ark_seed);

    fs::create_dir_all(out).map_err(|e| Failure::input(format!("{}: {e}", out.display())))?;
    let sp_path = out.join("sp.json");
    let body = serde_json::to_vec_pretty(&SpFile::new(&sp, &chain)).expect("sp file serializes");
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    std::os::unix::fs::OpenOptionsExt::mode(&mut opts, 0o600);
    opts.open(&sp_path)
        .and_then(|mut f| f.write_all(&body))
        .map_err(|e| Failure::input(format!("{}: {e}", sp_path.display())))?;
    let ark_path = out.join("ark.pub");
    support::write(&ark_path, &ark)?;
    Ok(Output::Json(json!({
        "ark_public": hex::encode(ark),
        "tcb_version": tcb,
        "sp": sp_path,
        "ark": ark_path,
    })))
}

pub fn firmware(cmd: &FirmwareCommand) -> CmdResult {
    let FirmwareCommand::Synth {
        out,
        size,
        marker_offset,
    } = cmd;
    let fw = FirmwareImage::synthetic(*size, *marker_offset).map_err(Failure::usage)?;
    support::write(out, fw.as_bytes())?;
    Ok(Output::Json(json!({
        "firmware": out,
        "size": size,
        "table_offset": fw.table_offset(),
    })))
}

fn parse_firmware(path: &Path) -> Result<FirmwareImage, Failure> {
    FirmwareImage::parse(support::read(path)?)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn vcpu(count: u32, policy: u64) -> Result<VcpuState, Failure> {
    VcpuState::new(count, policy).map_err(Failure::usage)
}

pub fn bundle(cmd: &BundleCommand) -> CmdResult {
    let BundleCommand::Build {
        components: c,
        verity_meta,
        out,
    } = cmd;
    let fw = parse_firmware(&c.firmware)?;
    let mut cmdline = c.cmdline.clone();
    if let Some(path) = verity_meta {
        let meta = VerityMetadata::decode(&support::read(path)?)
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        cmdline = with_verity_root(&cmdline, &meta.root_hash);
    }
    let bundle = Bundle::build(
        &fw,
        support::read(&c.kernel)?,
        support::read(&c.initramfs)?,
        &cmdline,
        vcpu(c.vcpus, c.policy)?,
    );
    bundle
        .write_to(out)
        .map_err(|e| Failure::input(format!("{}: {e}", out.display())))?;
    Ok(Output::Json(json!({
        "bundle": out,
        "cmdline": cmdline,
        "launch_digest": bundle.manifest.expected_launch_digest,
    })))
}

pub fn image(cmd: &ImageCommand) -> CmdResult {
    let ImageCommand::Build {
        mode,
        input,
        out,
        scrub,
        writable,
        block_size,
        salt,
        keyfile,
    } = cmd;
    let archive = if input.is_dir() {
        Archive::from_dir(input)
    } else {
        Archive::unpack(&support::read(input)?)
    }
    .map_err(|e| Failure::input(format!("{}: {e}", input.display())))?;

    let (kind, salt, key) = match mode {
        Mode::Verity => {
            if keyfile.is_some() {
                return Err(Failure::usage("--keyfile is only used in encrypted mode"));
            }
            let salt = match salt {
                Some(h) => hex::decode(h).map_err(|e| Failure::usage(format!("--salt: {e}")))?,
                None => {
                    let mut s = vec![0u8; 32];
                    rand::rngs::OsRng.fill_bytes(&mut s);
                    s
                }
            };
            (ModeKind::Verity, Some(salt), None)
        }
        Mode::Encrypted => {
            let path = keyfile
                .as_deref()
                .ok_or_else(|| Failure::usage("encrypted mode requires --keyfile"))?;
            (ModeKind::Encrypted, None, Some(load_or_create_key(path)?))
        }
    };
    let key_created = key.as_ref().map(|(_, created)| *created);
    let mut config =
        ImagePrepConfig::from_parts(kind, salt, key.map(|(k, _)| k)).map_err(Failure::usage)?;
    if !scrub.is_empty() {
        config.scrub_prefixes = scrub.clone();
    }
    if !writable.is_empty() {
        config.writable_mounts = writable.clone();
    }
    config.block_size = *block_size;

    let stage = build_second_stage(&archive, &config).map_err(|e| match e {
        imaging::ImagingError::Io(_) => Failure::input(e),
        other => Failure::usage(other),
    })?;
    match stage {
        SecondStage::Verity {
            image,
            meta,
            tree,
            scrubbed,
        } => {
            let (img, meta_path, tree_path) = (
                with_ext(out, "img"),
                with_ext(out, "meta"),
                with_ext(out, "tree"),
            );
            support::write(&img, &image)?;
            support::write(&meta_path, &meta.encode())?;
            support::write(&tree_path, &tree.to_bytes())?;
            Ok(Output::Json(json!({
                "mode": "verity",
                "root_hash": meta.root_hex(),
                "block_size": meta.block_size,
                "data_blocks": meta.data_blocks,
                "scrubbed": scrubbed,
                "image": img,
                "meta": meta_path,
                "tree": tree_path,
            })))
        }
        SecondStage::Encrypted(enc) => {
            let (hdr, img, tags) = (
                with_ext(out, "hdr"),
                with_ext(out, "img"),
                with_ext(out, "tags"),
            );
            support::write(&hdr, &enc.header.encode())?;
            support::write(&img, &enc.cipher)?;
            support::write(&tags, &enc.tags)?;
            Ok(Output::Json(json!({
                "mode": "encrypted",
                "disk_uuid": enc.header.uuid_hex(),
                "block_size": enc.header.block_size,
                "data_blocks": enc.header.data_blocks,
                "key_created": key_created,
                "header": hdr,
                "image": img,
                "tags": tags,
            })))
        }
    }
}

pub fn digest(args: &DigestArgs) -> CmdResult {
    let (fw, kernel, initramfs, cmdline, vcpu) = match &args.bundle {
        Some(dir) => {
            let b =
                Bundle::load(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
            let fw = FirmwareImage::parse(b.firmware)
                .map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
            let vcpu = vcpu(b.manifest.vcpu_count, b.manifest.policy)?;
            (fw, b.kernel, b.initramfs, b.manifest.cmdline, vcpu)
        }
        None => {
            let need = |flag: &str| Failure::usage(format!("digest needs --bundle or --{flag}"));
            let c = ComponentArgs {
                firmware: args.firmware.clone().ok_or_else(|| need("firmware"))?,
                kernel: args.kernel.clone().ok_or_else(|| need("kernel"))?,
                initramfs: args.initramfs.clone().ok_or_else(|| need("initramfs"))?,
                cmdline: args.cmdline.clone().ok_or_else(|| need("cmdline"))?,
                vcpus: args.vcpus.ok_or_else(|| need("vcpus"))?,
                policy: args.policy,
            };
            (
                parse_firmware(&c.firmware)?,
                support::read(&c.kernel)?,
                support::read(&c.initramfs)?,
                c.cmdline,
                vcpu(c.vcpus, c.policy)?,
            )
        }
    };
    let patched = inject_hashes(&fw, &kernel, &initramfs, cmdline.as_bytes());
    Ok(Output::Hex(compute_launch_digest(&patched, &vcpu).to_hex()))
}
