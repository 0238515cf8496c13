// SPDX-License-Identifier: Apache-2.0

//! Positional, shared-reference access to disk images.

use std::fs::File;
use std::io;
use std::sync::Arc;

/// A read-only byte device addressed by offset. Reads take `&self` so a
/// single source can serve concurrent readers.
pub trait BlockSource: Send + Sync {
    fn len(&self) -> io::Result<u64>;

    /// Fills as much of `buf` as the device holds from `offset`; returns the
    /// number of bytes read (short only at end of device).
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<usize>;

    fn is_empty(&self) -> io::Result<bool> {
        Ok(self.len()? == 0)
    }
}

impl BlockSource for [u8] {
    fn len(&self) -> io::Result<u64> {
        Ok(<[u8]>::len(self) as u64)
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<usize> {
        let len = <[u8]>::len(self) as u64;
        if offset >= len {
            return Ok(0);
        }
        let start = offset as usize;
        let n = buf.len().min(<[u8]>::len(self) - start);
        buf[..n].copy_from_slice(&self[start..start + n]);
        Ok(n)
    }
}

impl BlockSource for Vec<u8> {
    fn len(&self) -> io::Result<u64> {
        BlockSource::len(self.as_slice())
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<usize> {
        self.as_slice().read_at(offset, buf)
    }
}

impl BlockSource for File {
    fn len(&self) -> io::Result<u64> {
        Ok(self.metadata()?.len())
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<usize> {
        let mut filled = 0;
        while filled < buf.len() {
            match read_at_once(self, &mut buf[filled..], offset + filled as u64) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(filled)
    }
}

#[cfg(unix)]
fn read_at_once(file: &File, buf: &mut [u8], offset: u64) -> io::Result<usize> {
    std::os::unix::fs::FileExt::read_at(file, buf, offset)
}

#[cfg(windows)]
fn read_at_once(file: &File, buf: &mut [u8], offset: u64) -> io::Result<usize> {
    std::os::windows::fs::FileExt::seek_read(file, buf, offset)
}

impl<T: BlockSource + ?Sized> BlockSource for Arc<T> {
    fn len(&self) -> io::Result<u64> {
        (**self).len()
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<usize> {
        (**self).read_at(offset, buf)
    }
}

impl<T: BlockSource + ?Sized> BlockSource for Box<T> {
    fn len(&self) -> io::Result<u64> {
        (**self).len()
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<usize> {
        (**self).read_at(offset, buf)
    }
}

impl<T: BlockSource + ?Sized> BlockSource for &T {
    fn len(&self) -> io::Result<u64> {
        (**self).len()
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<usize> {
        (**self).read_at(offset, buf)
    }
}

/// Reads block `index` into a `block_size` buffer, zero-padding past the end
/// of the device. Returns the buffer and the count of real bytes.
pub(crate) fn read_block_padded<S: BlockSource + ?Sized>(
    src: &S,
    block_size: u32,
    index: u64,
) -> io::Result<(Vec<u8>, usize)> {
    let mut buf = vec![0u8; block_size as usize];
    let n = src.read_at(index * block_size as u64, &mut buf)?;
    Ok((buf, n))
}

/// Number of `block_size` blocks needed to hold `len` bytes.
pub(crate) fn block_count(len: u64, block_size: u32) -> u64 {
    len.div_ceil(block_size as u64)
}

pub(crate) fn valid_block_size(block_size: u32) -> bool {
    block_size.is_power_of_two() && block_size >= 512
}
