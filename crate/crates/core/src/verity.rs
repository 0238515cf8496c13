// SPDX-License-Identifier: Apache-2.0

//! Block-level integrity in the style of dm-verity.
//!
//! A read-only image is split into fixed-size blocks. Each block is hashed
//! (salt prepended, last block zero-padded) into a leaf, and leaves are
//! grouped `block_size / 32` at a time into parent nodes until one node
//! remains: the root hash. A reader that trusts only the root hash can then
//! authenticate any block lazily, on read.
//!
//! The tree is stored leaves first, level after level. Kernel dm-verity
//! stores the root-most level first; this layout is not compatible with it.

use std::io::{self, Read};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blockdev::{block_count, read_block_padded, valid_block_size, BlockSource};

pub const MAGIC: &[u8; 8] = b"SNPGVRTY";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_BLOCK_SIZE: u32 = 4096;
pub const MAX_SALT_LEN: usize = 32;
pub const HASH_LEN: usize = 32;

pub type Hash = [u8; HASH_LEN];

#[derive(Debug, Error)]
pub enum VerityError {
    #[error("block size {0} is not a power of two >= 512")]
    InvalidBlockSize(u32),
    #[error("image is empty")]
    EmptyImage,
    #[error("salt is {0} bytes, at most 32 allowed")]
    SaltTooLong(usize),
    #[error("block {index} out of range ({blocks} blocks)")]
    IndexOutOfRange { index: u64, blocks: u64 },
    #[error("integrity violation in block {block}")]
    IntegrityViolation { block: u64 },
    #[error("root hash does not match the expected value")]
    RootMismatch,
    #[error("image holds {actual} blocks, metadata says {expected}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("malformed verity data: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum HashAlg {
    Sha256 = 1,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VerityMetadata {
    pub block_size: u32,
    pub data_blocks: u64,
    pub hash_alg: HashAlg,
    pub salt: Vec<u8>,
    pub root_hash: Hash,
    pub tree_levels: u32,
}

impl VerityMetadata {
    pub fn fanout(&self) -> usize {
        self.block_size as usize / HASH_LEN
    }

    pub fn root_hex(&self) -> String {
        hex::encode(self.root_hash)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 + 4 + 8 + 2 + self.salt.len() + HASH_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.block_size.to_le_bytes());
        out.extend_from_slice(&self.data_blocks.to_le_bytes());
        out.push(self.hash_alg as u8);
        out.push(self.salt.len() as u8);
        out.extend_from_slice(&self.salt);
        out.extend_from_slice(&self.root_hash);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, VerityError> {
        const FIXED: usize = 8 + 4 + 4 + 8 + 1 + 1;
        if bytes.len() < FIXED {
            return Err(VerityError::Malformed("metadata too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(VerityError::Malformed("bad magic"));
        }
        if u32::from_le_bytes(bytes[8..12].try_into().unwrap()) != FORMAT_VERSION {
            return Err(VerityError::Malformed("unsupported version"));
        }
        let block_size = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if !valid_block_size(block_size) {
            return Err(VerityError::InvalidBlockSize(block_size));
        }
        let data_blocks = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if data_blocks == 0 {
            return Err(VerityError::EmptyImage);
        }
        if bytes[24] != HashAlg::Sha256 as u8 {
            return Err(VerityError::Malformed("unknown hash algorithm"));
        }
        let salt_len = bytes[25] as usize;
        if salt_len > MAX_SALT_LEN {
            return Err(VerityError::SaltTooLong(salt_len));
        }
        if bytes.len() != FIXED + salt_len + HASH_LEN {
            return Err(VerityError::Malformed("metadata length"));
        }
        let salt = bytes[FIXED..FIXED + salt_len].to_vec();
        let root_hash = bytes[FIXED + salt_len..].try_into().unwrap();
        let tree_levels = level_sizes(data_blocks, block_size as usize / HASH_LEN).len() as u32;
        Ok(VerityMetadata {
            block_size,
            data_blocks,
            hash_alg: HashAlg::Sha256,
            salt,
            root_hash,
            tree_levels,
        })
    }
}

/// Node counts per level, leaves first, ending with the single root.
pub fn level_sizes(data_blocks: u64, fanout: usize) -> Vec<u64> {
    let mut sizes = vec![data_blocks];
    let mut n = data_blocks;
    while n > 1 {
        n = n.div_ceil(fanout as u64);
        sizes.push(n);
    }
    sizes
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MerkleTree {
    levels: Vec<Vec<Hash>>,
}

impl MerkleTree {
    pub fn levels(&self) -> &[Vec<Hash>] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Vec<Hash>] {
        &mut self.levels
    }

    pub fn root(&self) -> Hash {
        self.levels.last().expect("tree has at least one level")[0]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.levels.iter().flatten().flatten().copied().collect()
    }

    /// Splits a raw tree file according to the shape implied by `meta`.
    pub fn from_bytes(bytes: &[u8], meta: &VerityMetadata) -> Result<Self, VerityError> {
        let sizes = level_sizes(meta.data_blocks, meta.fanout());
        let total: u64 = sizes.iter().sum();
        if bytes.len() as u64 != total * HASH_LEN as u64 {
            return Err(VerityError::Malformed(
                "tree length does not match metadata",
            ));
        }
        let mut chunks = bytes
            .chunks_exact(HASH_LEN)
            .map(|c| Hash::try_from(c).unwrap());
        let levels = sizes
            .iter()
            .map(|&n| chunks.by_ref().take(n as usize).collect())
            .collect();
        Ok(MerkleTree { levels })
    }

    fn matches_shape(&self, meta: &VerityMetadata) -> bool {
        let sizes = level_sizes(meta.data_blocks, meta.fanout());
        sizes.len() == self.levels.len()
            && sizes
                .iter()
                .zip(&self.levels)
                .all(|(&n, level)| level.len() as u64 == n)
    }
}

fn hash_node(salt: &[u8], data: &[u8], block_size: usize) -> Hash {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(data);
    if data.len() < block_size {
        h.update(vec![0u8; block_size - data.len()]);
    }
    h.finalize().into()
}

fn hash_children(salt: &[u8], children: &[Hash], block_size: usize) -> Hash {
    let mut buf = Vec::with_capacity(block_size);
    for c in children {
        buf.extend_from_slice(c);
    }
    hash_node(salt, &buf, block_size)
}

/// Streams `image` once and builds the full tree.
pub fn build_tree<R: Read>(
    mut image: R,
    block_size: u32,
    salt: &[u8],
) -> Result<(VerityMetadata, MerkleTree), VerityError> {
    if !valid_block_size(block_size) {
        return Err(VerityError::InvalidBlockSize(block_size));
    }
    if salt.len() > MAX_SALT_LEN {
        return Err(VerityError::SaltTooLong(salt.len()));
    }
    let bs = block_size as usize;
    let mut leaves = Vec::new();
    let mut buf = vec![0u8; bs];
    loop {
        let n = read_full(&mut image, &mut buf)?;
        if n == 0 {
            break;
        }
        leaves.push(hash_node(salt, &buf[..n], bs));
        if n < bs {
            break;
        }
    }
    if leaves.is_empty() {
        return Err(VerityError::EmptyImage);
    }

    let fanout = bs / HASH_LEN;
    let mut levels = vec![leaves];
    while levels.last().unwrap().len() > 1 {
        let next = levels
            .last()
            .unwrap()
            .chunks(fanout)
            .map(|group| hash_children(salt, group, bs))
            .collect();
        levels.push(next);
    }
    let tree = MerkleTree { levels };
    let meta = VerityMetadata {
        block_size,
        data_blocks: tree.levels[0].len() as u64,
        hash_alg: HashAlg::Sha256,
        salt: salt.to_vec(),
        root_hash: tree.root(),
        tree_levels: tree.levels.len() as u32,
    };
    Ok((meta, tree))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Authenticates already-read block contents against the tree and root.
fn check_block(
    meta: &VerityMetadata,
    tree: &MerkleTree,
    block: &[u8],
    index: u64,
) -> Result<(), VerityError> {
    if !tree.matches_shape(meta) {
        return Err(VerityError::Malformed("tree shape does not match metadata"));
    }
    let bs = meta.block_size as usize;
    let fanout = meta.fanout();
    let violation = || VerityError::IntegrityViolation { block: index };

    let mut pos = index as usize;
    if hash_node(&meta.salt, block, bs) != tree.levels[0][pos] {
        return Err(violation());
    }
    for k in 0..tree.levels.len() - 1 {
        let parent = pos / fanout;
        let level = &tree.levels[k];
        let group = &level[parent * fanout..((parent + 1) * fanout).min(level.len())];
        if hash_children(&meta.salt, group, bs) != tree.levels[k + 1][parent] {
            return Err(violation());
        }
        pos = parent;
    }
    if tree.root() != meta.root_hash {
        return Err(violation());
    }
    Ok(())
}

pub fn verify_block<S: BlockSource + ?Sized>(
    meta: &VerityMetadata,
    tree: &MerkleTree,
    image: &S,
    index: u64,
) -> Result<(), VerityError> {
    if index >= meta.data_blocks {
        return Err(VerityError::IndexOutOfRange {
            index,
            blocks: meta.data_blocks,
        });
    }
    let (block, n) = read_block_padded(image, meta.block_size, index)?;
    check_block(meta, tree, &block[..n], index)
}

/// Opens `image` for verified reads if `meta` commits to `expected_root`.
pub fn open_verified<S: BlockSource>(
    meta: VerityMetadata,
    tree: MerkleTree,
    image: S,
    expected_root: &Hash,
) -> Result<VerifiedReader<S>, VerityError> {
    if meta.root_hash != *expected_root {
        return Err(VerityError::RootMismatch);
    }
    if !tree.matches_shape(&meta) {
        return Err(VerityError::Malformed("tree shape does not match metadata"));
    }
    let actual = block_count(image.len()?, meta.block_size);
    if actual != meta.data_blocks {
        return Err(VerityError::SizeMismatch {
            expected: meta.data_blocks,
            actual,
        });
    }
    Ok(VerifiedReader { meta, tree, image })
}

/// Read-only view over an image in which every read is authenticated.
/// Reads take `&self` and may run concurrently.
#[derive(Debug)]
pub struct VerifiedReader<S> {
    meta: VerityMetadata,
    tree: MerkleTree,
    image: S,
}

impl<S: BlockSource> VerifiedReader<S> {
    pub fn metadata(&self) -> &VerityMetadata {
        &self.meta
    }

    pub fn block_count(&self) -> u64 {
        self.meta.data_blocks
    }

    /// Reads and authenticates one block. The last block is returned
    /// without its zero padding.
    pub fn read_block(&self, index: u64) -> Result<Vec<u8>, VerityError> {
        if index >= self.meta.data_blocks {
            return Err(VerityError::IndexOutOfRange {
                index,
                blocks: self.meta.data_blocks,
            });
        }
        let (mut block, n) = read_block_padded(&self.image, self.meta.block_size, index)?;
        block.truncate(n);
        check_block(&self.meta, &self.tree, &block, index)?;
        Ok(block)
    }

    /// Reads the whole image, stopping at the first integrity violation.
    pub fn read_all(&self) -> Result<Vec<u8>, VerityError> {
        let mut out = Vec::new();
        for i in 0..self.meta.data_blocks {
            out.extend_from_slice(&self.read_block(i)?);
        }
        Ok(out)
    }
}
