// SPDX-License-Identifier: Apache-2.0

//! Per-block authenticated disk encryption.
//!
//! Every block is sealed independently with ChaCha20-Poly1305. The nonce and
//! associated data are both derived from the disk UUID and the block index,
//! so a ciphertext block moved to another position (or another disk) fails
//! authentication. Tags live in a separate region, 16 bytes per block.
//!
//! Nonces are deterministic, so a key must encrypt exactly one image. Never
//! re-encrypt with a key that has already been used.

use std::fmt;
use std::io::{self, Read};

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::blockdev::{valid_block_size, BlockSource};

pub const MAGIC: &[u8; 8] = b"SNPGCRPT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 16 + 1 + 8;
pub const TAG_LEN: usize = 16;
pub const KEY_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CryptError {
    #[error("block size {0} is not a power of two >= 512")]
    InvalidBlockSize(u32),
    #[error("plaintext image is empty")]
    EmptyImage,
    #[error("block {index} out of range ({blocks} blocks)")]
    IndexOutOfRange { index: u64, blocks: u64 },
    #[error("authentication failed for block {block}")]
    Authentication { block: u64 },
    #[error("disk key does not unlock this image")]
    UnlockFailed,
    #[error("malformed encrypted disk: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AeadAlg {
    ChaCha20Poly1305 = 1,
}

/// A 256-bit disk encryption key. Wiped on drop; `Debug` never prints it.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct DiskKey([u8; KEY_LEN]);

impl DiskKey {
    pub fn generate() -> Self {
        let mut key = [0u8; KEY_LEN];
        rand::rngs::OsRng.fill_bytes(&mut key);
        DiskKey(key)
    }

    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        DiskKey(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptError> {
        let key = bytes
            .try_into()
            .map_err(|_| CryptError::Malformed("disk key must be 32 bytes"))?;
        Ok(DiskKey(key))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for DiskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DiskKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CryptHeader {
    pub block_size: u32,
    pub data_blocks: u64,
    pub disk_uuid: [u8; 16],
    pub aead_alg: AeadAlg,
    /// Plaintext length in bytes; the last block is zero-padded.
    pub data_len: u64,
}

impl CryptHeader {
    pub fn uuid_hex(&self) -> String {
        hex::encode(self.disk_uuid)
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(MAGIC);
        out[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        out[12..16].copy_from_slice(&self.block_size.to_le_bytes());
        out[16..24].copy_from_slice(&self.data_blocks.to_le_bytes());
        out[24..40].copy_from_slice(&self.disk_uuid);
        out[40] = self.aead_alg as u8;
        out[41..49].copy_from_slice(&self.data_len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CryptError> {
        if bytes.len() != HEADER_LEN {
            return Err(CryptError::Malformed("header length"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CryptError::Malformed("bad magic"));
        }
        if u32::from_le_bytes(bytes[8..12].try_into().unwrap()) != FORMAT_VERSION {
            return Err(CryptError::Malformed("unsupported version"));
        }
        let block_size = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if !valid_block_size(block_size) {
            return Err(CryptError::InvalidBlockSize(block_size));
        }
        if bytes[40] != AeadAlg::ChaCha20Poly1305 as u8 {
            return Err(CryptError::Malformed("unknown AEAD algorithm"));
        }
        let header = CryptHeader {
            block_size,
            data_blocks: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            disk_uuid: bytes[24..40].try_into().unwrap(),
            aead_alg: AeadAlg::ChaCha20Poly1305,
            data_len: u64::from_le_bytes(bytes[41..49].try_into().unwrap()),
        };
        if header.data_blocks == 0
            || header.data_len.div_ceil(block_size as u64) != header.data_blocks
        {
            return Err(CryptError::Malformed("length fields disagree"));
        }
        Ok(header)
    }

    /// Bytes of real data in block `index`.
    fn block_data_len(&self, index: u64) -> usize {
        let start = index * self.block_size as u64;
        (self.data_len - start).min(self.block_size as u64) as usize
    }
}

/// Associated data for block `index`: uuid ‖ index (u64 LE).
pub fn block_aad(uuid: &[u8; 16], index: u64) -> [u8; 24] {
    let mut aad = [0u8; 24];
    aad[..16].copy_from_slice(uuid);
    aad[16..].copy_from_slice(&index.to_le_bytes());
    aad
}

/// First 12 bytes of SHA-256(uuid ‖ index LE).
pub fn block_nonce(uuid: &[u8; 16], index: u64) -> [u8; 12] {
    let digest = Sha256::digest(block_aad(uuid, index));
    digest[..12].try_into().unwrap()
}

pub struct EncryptedImage {
    pub header: CryptHeader,
    pub cipher: Vec<u8>,
    pub tags: Vec<u8>,
}

/// Encrypts `plain` block by block. `key` must be fresh for this image.
pub fn encrypt_image<R: Read>(
    mut plain: R,
    key: &DiskKey,
    uuid: [u8; 16],
    block_size: u32,
) -> Result<EncryptedImage, CryptError> {
    if !valid_block_size(block_size) {
        return Err(CryptError::InvalidBlockSize(block_size));
    }
    let aead = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
    let bs = block_size as usize;
    let mut cipher = Vec::new();
    let mut tags = Vec::new();
    let mut data_len = 0u64;
    let mut index = 0u64;
    loop {
        let mut block = vec![0u8; bs];
        let n = read_full(&mut plain, &mut block)?;
        if n == 0 {
            break;
        }
        data_len += n as u64;
        let tag = aead
            .encrypt_in_place_detached(
                Nonce::from_slice(&block_nonce(&uuid, index)),
                &block_aad(&uuid, index),
                &mut block,
            )
            .expect("block size is far below the AEAD message limit");
        cipher.extend_from_slice(&block);
        tags.extend_from_slice(&tag);
        index += 1;
        if n < bs {
            break;
        }
    }
    if index == 0 {
        return Err(CryptError::EmptyImage);
    }
    Ok(EncryptedImage {
        header: CryptHeader {
            block_size,
            data_blocks: index,
            disk_uuid: uuid,
            aead_alg: AeadAlg::ChaCha20Poly1305,
            data_len,
        },
        cipher,
        tags,
    })
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

fn decrypt_with<C, T>(
    aead: &ChaCha20Poly1305,
    header: &CryptHeader,
    cipher: &C,
    tags: &T,
    index: u64,
) -> Result<Vec<u8>, CryptError>
where
    C: BlockSource + ?Sized,
    T: BlockSource + ?Sized,
{
    if index >= header.data_blocks {
        return Err(CryptError::IndexOutOfRange {
            index,
            blocks: header.data_blocks,
        });
    }
    let bs = header.block_size as usize;
    let auth = || CryptError::Authentication { block: index };
    let mut block = vec![0u8; bs];
    if cipher.read_at(index * bs as u64, &mut block)? != bs {
        return Err(auth());
    }
    let mut tag = [0u8; TAG_LEN];
    if tags.read_at(index * TAG_LEN as u64, &mut tag)? != TAG_LEN {
        return Err(auth());
    }
    let uuid = &header.disk_uuid;
    if aead
        .decrypt_in_place_detached(
            Nonce::from_slice(&block_nonce(uuid, index)),
            &block_aad(uuid, index),
            &mut block,
            Tag::from_slice(&tag),
        )
        .is_err()
    {
        block.zeroize();
        return Err(auth());
    }
    block.truncate(header.block_data_len(index));
    Ok(block)
}

/// Decrypts one block. On failure no plaintext is released.
pub fn decrypt_block<C, T>(
    header: &CryptHeader,
    cipher: &C,
    tags: &T,
    key: &DiskKey,
    index: u64,
) -> Result<Vec<u8>, CryptError>
where
    C: BlockSource + ?Sized,
    T: BlockSource + ?Sized,
{
    let aead = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
    decrypt_with(&aead, header, cipher, tags, index)
}

/// Unlocks an encrypted disk. Block 0 is decrypted eagerly as the key
/// check; everything else is decrypted on read.
pub fn open_encrypted<C: BlockSource, T: BlockSource>(
    header: CryptHeader,
    cipher: C,
    tags: T,
    key: &DiskKey,
) -> Result<EncryptedReader<C, T>, CryptError> {
    let aead = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
    match decrypt_with(&aead, &header, &cipher, &tags, 0) {
        Ok(_) => {}
        Err(CryptError::Authentication { .. }) => return Err(CryptError::UnlockFailed),
        Err(e) => return Err(e),
    }
    Ok(EncryptedReader {
        header,
        cipher,
        tags,
        aead,
    })
}

/// Lazily decrypting reader. Reads take `&self` and may run concurrently.
pub struct EncryptedReader<C, T> {
    header: CryptHeader,
    cipher: C,
    tags: T,
    aead: ChaCha20Poly1305,
}

impl<C: BlockSource, T: BlockSource> EncryptedReader<C, T> {
    pub fn header(&self) -> &CryptHeader {
        &self.header
    }

    pub fn read_block(&self, index: u64) -> Result<Vec<u8>, CryptError> {
        decrypt_with(&self.aead, &self.header, &self.cipher, &self.tags, index)
    }

    pub fn read_all(&self) -> Result<Vec<u8>, CryptError> {
        let mut out = Vec::with_capacity(self.header.data_len as usize);
        for i in 0..self.header.data_blocks {
            out.extend_from_slice(&self.read_block(i)?);
        }
        Ok(out)
    }
}

impl<C, T> fmt::Debug for EncryptedReader<C, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncryptedReader")
            .field("header", &self.header)
            .finish_non_exhaustive()
    }
}
