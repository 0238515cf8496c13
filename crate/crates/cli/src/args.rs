// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Simulated confidential-VM workflows: image preparation, guest boot and
/// attestation, and owner-side verification and key provisioning.
///
/// Exit codes: 0 success, 1 unreadable or malformed input, 2 transport,
/// 3 verification or integrity failure, 4 disk unlock failure, 5 usage.
#[derive(Debug, Parser)]
#[command(name = "snpguard", version)]
pub struct Cli {
    /// Append line-delimited JSON events to FILE.
    #[arg(long, global = true, value_name = "FILE")]
    pub trace: Option<PathBuf>,

    /// Port for any listen or connect address. SNPGUARD_PORT takes
    /// precedence over this flag.
    #[arg(long, global = true)]
    pub port: Option<u16>,

    /// Pinned ARK public key (32 raw bytes or 64 hex characters).
    #[arg(long, global = true, value_name = "PATH")]
    pub ark: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulated secure-processor state.
    #[command(subcommand)]
    Sp(SpCommand),
    /// Synthetic firmware images.
    #[command(subcommand)]
    Firmware(FirmwareCommand),
    /// First-stage boot bundles.
    #[command(subcommand)]
    Bundle(BundleCommand),
    /// Second-stage disk images.
    #[command(subcommand)]
    Image(ImageCommand),
    /// Print the expected launch digest as lowercase hex.
    Digest(DigestArgs),
    /// Guest-side boot and attestation agent.
    #[command(subcommand)]
    Guest(GuestCommand),
    /// Owner-side attestation and key provisioning.
    #[command(subcommand)]
    Owner(OwnerCommand),
}

#[derive(Debug, Subcommand)]
pub enum SpCommand {
    /// Create a chip secret and certificate chain; writes sp.json and ark.pub.
    Init {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        tcb: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum FirmwareCommand {
    /// Random firmware blob with an empty hash table.
    Synth {
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 64 * 1024)]
        size: usize,
        #[arg(long, default_value_t = 4096)]
        marker_offset: usize,
    },
}

#[derive(Debug, Args)]
pub struct ComponentArgs {
    #[arg(long, value_name = "FILE")]
    pub firmware: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub kernel: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub initramfs: PathBuf,
    #[arg(long)]
    pub cmdline: String,
    #[arg(long)]
    pub vcpus: u32,
    #[arg(long, default_value_t = 0x30000)]
    pub policy: u64,
}

#[derive(Debug, Subcommand)]
pub enum BundleCommand {
    /// Inject component hashes into the firmware and write DIR.
    Build {
        #[command(flatten)]
        components: ComponentArgs,
        /// Append the root hash from this verity metadata to the cmdline.
        #[arg(long, value_name = "FILE")]
        verity_meta: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Verity,
    Encrypted,
}

#[derive(Debug, Subcommand)]
pub enum ImageCommand {
    /// Build a verity-protected or encrypted second-stage image.
    Build {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Archive file or directory tree.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Output prefix: PREFIX.{img,meta,tree} or PREFIX.{hdr,img,tags}.
        #[arg(long, value_name = "PREFIX")]
        out: PathBuf,
        /// Path prefix to remove before sealing (verity mode). Replaces the
        /// default list when given.
        #[arg(long, value_name = "PREFIX")]
        scrub: Vec<String>,
        /// Writable mount point. Replaces the default list when given.
        #[arg(long, value_name = "PATH")]
        writable: Vec<String>,
        #[arg(long, default_value_t = 4096)]
        block_size: u32,
        #[arg(long, value_name = "HEX", conflicts_with = "keyfile")]
        salt: Option<String>,
        /// Disk key file; created with a fresh key if it does not exist.
        #[arg(long, value_name = "PATH")]
        keyfile: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DigestArgs {
    /// Recompute from a bundle directory's component files.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["firmware", "kernel", "initramfs", "cmdline", "vcpus"])]
    pub bundle: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub firmware: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub kernel: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub initramfs: Option<PathBuf>,
    #[arg(long)]
    pub cmdline: Option<String>,
    #[arg(long)]
    pub vcpus: Option<u32>,
    #[arg(long, default_value_t = 0x30000)]
    pub policy: u64,
}

#[derive(Debug, Subcommand)]
pub enum GuestCommand {
    /// Boot a bundle against its second-stage disk.
    Boot(BootArgs),
    /// Serve attestation requests for a launched bundle.
    Agent {
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        #[arg(long, value_name = "FILE")]
        sp: PathBuf,
        #[arg(long, default_value = DEFAULT_LISTEN)]
        listen: String,
        #[arg(long)]
        max_sessions: Option<usize>,
    },
}

pub const DEFAULT_LISTEN: &str = "127.0.0.1:7415";

#[derive(Debug, Args)]
pub struct BootArgs {
    #[arg(long, value_name = "DIR")]
    pub bundle: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Data image (verity) or ciphertext (encrypted).
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub meta: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub tree: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub header: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub tags: Option<PathBuf>,
    /// Provisioning address (encrypted) or attestation agent address after
    /// boot (verity).
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub sp: Option<PathBuf>,
    /// Attestation sessions to serve after a verity boot.
    #[arg(long, default_value_t = 1)]
    pub sessions: usize,
}

#[derive(Debug, Subcommand)]
pub enum OwnerCommand {
    /// Attest a guest against a bundle manifest.
    Attest {
        #[arg(long)]
        addr: String,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
    },
    /// Attest a guest, then deliver the disk key.
    Provision {
        #[arg(long)]
        addr: String,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, value_name = "PATH")]
        keyfile: PathBuf,
    },
}
