//! Block storage.
//!
//! The ledger file is a sequence of `[u32 LE length][encoded block]` records,
//! append-only except for redaction, which overwrites preimage bytes in
//! place with zeros. A zeroed preimage keeps its length, so record framing
//! and file size never change after an append.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::codec::{Decode, DecodeError, Encode};
use crate::model::Block;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on ledger {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("block {number} at offset {offset} failed to decode: {source}")]
    Decode {
        number: u64,
        offset: u64,
        #[source]
        source: DecodeError,
    },
    #[error("block {0} not found")]
    MissingBlock(u64),
    #[error("block number {got} does not extend ledger of height {height}")]
    OutOfOrder { height: u64, got: u64 },
    #[error("preimage entry {entry} out of range in block {number}")]
    EntryOutOfRange { number: u64, entry: usize },
}

pub trait BlockStore {
    fn height(&self) -> u64;

    /// Appends the next block and returns the offset of its encoded bytes
    /// (just past the length prefix).
    fn append(&mut self, block: &Block) -> Result<u64, StoreError>;

    fn block(&self, number: u64) -> Result<Block, StoreError>;

    fn offset(&self, number: u64) -> Option<u64>;

    /// Overwrites the listed preimage entries of a stored block with zeros
    /// of equal length. Only the entry bytes are touched.
    fn zero_preimages(&mut self, number: u64, entries: &[usize]) -> Result<(), StoreError>;
}

impl<B: BlockStore + ?Sized> BlockStore for Box<B> {
    fn height(&self) -> u64 {
        (**self).height()
    }

    fn append(&mut self, block: &Block) -> Result<u64, StoreError> {
        (**self).append(block)
    }

    fn block(&self, number: u64) -> Result<Block, StoreError> {
        (**self).block(number)
    }

    fn offset(&self, number: u64) -> Option<u64> {
        (**self).offset(number)
    }

    fn zero_preimages(&mut self, number: u64, entries: &[usize]) -> Result<(), StoreError> {
        (**self).zero_preimages(number, entries)
    }
}

/// Concatenates every stored block in ledger-file format.
pub fn export_ledger(store: &dyn BlockStore) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    for n in 0..store.height() {
        let bytes = store.block(n)?.encode();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

/// In-memory block store with the same offset arithmetic as the file layout.
#[derive(Debug, Default, Clone)]
pub struct MemBlockStore {
    blocks: Vec<Block>,
    offsets: Vec<u64>,
    end: u64,
}

impl MemBlockStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block_ref(&self, number: u64) -> Option<&Block> {
        self.blocks.get(number as usize)
    }

    /// Serializes the whole store in ledger-file format.
    pub fn to_ledger_bytes(&self) -> Vec<u8> {
        export_ledger(self).expect("in-memory blocks are always readable")
    }
}

impl BlockStore for MemBlockStore {
    fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    fn append(&mut self, block: &Block) -> Result<u64, StoreError> {
        check_next(self.height(), block)?;
        let len = block.encode().len() as u64;
        let offset = self.end + 4;
        self.offsets.push(offset);
        self.end = offset + len;
        self.blocks.push(block.clone());
        Ok(offset)
    }

    fn block(&self, number: u64) -> Result<Block, StoreError> {
        self.blocks
            .get(number as usize)
            .cloned()
            .ok_or(StoreError::MissingBlock(number))
    }

    fn offset(&self, number: u64) -> Option<u64> {
        self.offsets.get(number as usize).copied()
    }

    fn zero_preimages(&mut self, number: u64, entries: &[usize]) -> Result<(), StoreError> {
        let block = self
            .blocks
            .get_mut(number as usize)
            .ok_or(StoreError::MissingBlock(number))?;
        for &i in entries {
            let entry = block
                .preimages
                .entries
                .get_mut(i)
                .ok_or(StoreError::EntryOutOfRange { number, entry: i })?;
            entry.fill(0);
        }
        Ok(())
    }
}

/// Append-only ledger file.
#[derive(Debug)]
pub struct FileBlockStore {
    path: PathBuf,
    file: File,
    offsets: Vec<u64>,
    lens: Vec<u32>,
    end: u64,
    sync: bool,
}

impl FileBlockStore {
    /// Opens (creating if needed) a ledger file and indexes its records.
    /// A torn final record, left by a crash mid-append, is truncated.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(io_err)?;
        let mut data = Vec::new();
        file.read_to_end(&mut data).map_err(io_err)?;

        let mut offsets = Vec::new();
        let mut lens = Vec::new();
        let mut pos = 0usize;
        while pos + 4 <= data.len() {
            let len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap());
            if pos + 4 + len as usize > data.len() {
                break;
            }
            offsets.push((pos + 4) as u64);
            lens.push(len);
            pos += 4 + len as usize;
        }
        if pos != data.len() {
            file.set_len(pos as u64).map_err(io_err)?;
        }
        Ok(FileBlockStore {
            path,
            file,
            offsets,
            lens,
            end: pos as u64,
            sync: false,
        })
    }

    /// fsync after every append and redaction.
    pub fn with_sync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len_bytes(&self) -> u64 {
        self.end
    }

    fn io(&self, source: io::Error) -> StoreError {
        StoreError::Io {
            path: self.path.clone(),
            source,
        }
    }

    fn read_raw(&self, number: u64) -> Result<Vec<u8>, StoreError> {
        let i = number as usize;
        let (offset, len) = match (self.offsets.get(i), self.lens.get(i)) {
            (Some(&o), Some(&l)) => (o, l),
            _ => return Err(StoreError::MissingBlock(number)),
        };
        let mut buf = vec![0u8; len as usize];
        let mut f = &self.file;
        f.seek(SeekFrom::Start(offset)).map_err(|e| self.io(e))?;
        f.read_exact(&mut buf).map_err(|e| self.io(e))?;
        Ok(buf)
    }
}

impl BlockStore for FileBlockStore {
    fn height(&self) -> u64 {
        self.offsets.len() as u64
    }

    fn append(&mut self, block: &Block) -> Result<u64, StoreError> {
        check_next(self.height(), block)?;
        let bytes = block.encode();
        let mut record = Vec::with_capacity(bytes.len() + 4);
        record.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        record.extend_from_slice(&bytes);

        let end = self.end;
        let result = (|| {
            self.file.seek(SeekFrom::Start(end))?;
            self.file.write_all(&record)?;
            if self.sync {
                self.file.sync_data()?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            // Drop whatever part of the record made it to disk.
            let _ = self.file.set_len(end);
            return Err(self.io(e));
        }
        let offset = end + 4;
        self.offsets.push(offset);
        self.lens.push(bytes.len() as u32);
        self.end = offset + bytes.len() as u64;
        Ok(offset)
    }

    fn block(&self, number: u64) -> Result<Block, StoreError> {
        let raw = self.read_raw(number)?;
        Block::decode(&raw).map_err(|source| StoreError::Decode {
            number,
            offset: self.offsets[number as usize],
            source,
        })
    }

    fn offset(&self, number: u64) -> Option<u64> {
        self.offsets.get(number as usize).copied()
    }

    fn zero_preimages(&mut self, number: u64, entries: &[usize]) -> Result<(), StoreError> {
        if entries.is_empty() {
            return Ok(());
        }
        let block = self.block(number)?;
        let base = self.offsets[number as usize];
        let ranges = block.preimage_entry_ranges();
        for &i in entries {
            let &(off, len) = ranges
                .get(i)
                .ok_or(StoreError::EntryOutOfRange { number, entry: i })?;
            let zeros = vec![0u8; len];
            let at = base + off as u64;
            let res = self
                .file
                .seek(SeekFrom::Start(at))
                .and_then(|_| self.file.write_all(&zeros));
            res.map_err(|e| self.io(e))?;
        }
        if self.sync {
            self.file.sync_data().map_err(|e| self.io(e))?;
        }
        Ok(())
    }
}

fn check_next(height: u64, block: &Block) -> Result<(), StoreError> {
    if block.number() != height {
        return Err(StoreError::OutOfOrder {
            height,
            got: block.number(),
        });
    }
    Ok(())
}

/// One framed record of a ledger file, decoded or not.
#[derive(Debug)]
pub struct LedgerRecord {
    pub index: u64,
    pub offset: u64,
    pub block: Result<Block, DecodeError>,
}

#[derive(Debug, Error)]
pub enum FramingError {
    #[error("record {index} at offset {offset} claims {len} bytes but only {available} remain")]
    Truncated {
        index: u64,
        offset: u64,
        len: u64,
        available: u64,
    },
    #[error("{0} stray bytes at end of ledger")]
    StrayTail(u64),
}

/// Splits ledger bytes into records, decoding each. A decode failure is
/// reported per record; a framing failure ends the scan.
pub fn scan_ledger(data: &[u8]) -> (Vec<LedgerRecord>, Option<FramingError>) {
    let mut out = Vec::new();
    let mut pos = 0usize;
    let mut index = 0u64;
    while pos < data.len() {
        if data.len() - pos < 4 {
            return (
                out,
                Some(FramingError::StrayTail((data.len() - pos) as u64)),
            );
        }
        let len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
        let start = pos + 4;
        if data.len() - start < len {
            return (
                out,
                Some(FramingError::Truncated {
                    index,
                    offset: start as u64,
                    len: len as u64,
                    available: (data.len() - start) as u64,
                }),
            );
        }
        out.push(LedgerRecord {
            index,
            offset: start as u64,
            block: Block::decode(&data[start..start + len]),
        });
        pos = start + len;
        index += 1;
    }
    (out, None)
}

pub fn read_ledger_file(path: &Path) -> io::Result<Vec<u8>> {
    std::fs::read(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Digest, PublicKey, Signature};
    use crate::model::{BlockHeader, PreimageSpace};

    fn block(n: u64, entries: Vec<Vec<u8>>) -> Block {
        Block {
            header: BlockHeader {
                number: n,
                prev_hash: Digest::ZERO,
                data_hash: Digest::ZERO,
            },
            transactions: vec![],
            preimages: PreimageSpace { entries },
            orderer: PublicKey([0; 32]),
            orderer_signature: Signature::EMPTY,
            validity_flags: vec![],
        }
    }

    #[test]
    fn file_store_appends_and_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.bin");
        let mut store = FileBlockStore::open(&path).unwrap();
        store.append(&block(0, vec![b"aaaa".to_vec()])).unwrap();
        store
            .append(&block(1, vec![b"bb".to_vec(), b"cccccc".to_vec()]))
            .unwrap();
        assert!(matches!(
            store.append(&block(3, vec![])),
            Err(StoreError::OutOfOrder { height: 2, got: 3 })
        ));
        drop(store);

        let store = FileBlockStore::open(&path).unwrap();
        assert_eq!(store.height(), 2);
        assert_eq!(
            store.block(1).unwrap(),
            block(1, vec![b"bb".to_vec(), b"cccccc".to_vec()])
        );
        assert!(matches!(store.block(2), Err(StoreError::MissingBlock(2))));
    }

    #[test]
    fn zeroing_is_in_place_and_length_preserving() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.bin");
        let mut store = FileBlockStore::open(&path).unwrap();
        store
            .append(&block(0, vec![b"secret-one".to_vec(), b"keep".to_vec()]))
            .unwrap();
        store.append(&block(1, vec![b"x".to_vec()])).unwrap();
        let before = std::fs::read(&path).unwrap();

        store.zero_preimages(0, &[0]).unwrap();
        let after = std::fs::read(&path).unwrap();
        assert_eq!(before.len(), after.len());
        let diff: Vec<usize> = (0..before.len())
            .filter(|&i| before[i] != after[i])
            .collect();
        assert_eq!(diff.len(), b"secret-one".len());
        assert_eq!(store.block(0).unwrap().preimages.entries[0], vec![0u8; 10]);
        assert_eq!(
            store.block(0).unwrap().preimages.entries[1],
            b"keep".to_vec()
        );
        assert_eq!(store.block(1).unwrap(), block(1, vec![b"x".to_vec()]));
        assert!(store.zero_preimages(0, &[5]).is_err());
    }

    #[test]
    fn torn_tail_is_truncated_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.bin");
        let mut store = FileBlockStore::open(&path).unwrap();
        store.append(&block(0, vec![])).unwrap();
        let good_len = store.len_bytes();
        drop(store);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[200, 0, 0, 0, 1, 2, 3]).unwrap();
        drop(f);

        let store = FileBlockStore::open(&path).unwrap();
        assert_eq!(store.height(), 1);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), good_len);
    }

    #[test]
    fn mem_store_offsets_match_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut file = FileBlockStore::open(dir.path().join("l.bin")).unwrap();
        let mut mem = MemBlockStore::new();
        for n in 0..4 {
            let b = block(n, vec![vec![n as u8; n as usize + 1]]);
            assert_eq!(file.append(&b).unwrap(), mem.append(&b).unwrap());
        }
        assert_eq!(std::fs::read(file.path()).unwrap(), mem.to_ledger_bytes());
    }

    #[test]
    fn scan_reports_framing_and_decode_errors() {
        let mut mem = MemBlockStore::new();
        mem.append(&block(0, vec![b"p".to_vec()])).unwrap();
        mem.append(&block(1, vec![])).unwrap();
        let mut bytes = mem.to_ledger_bytes();
        let (records, err) = scan_ledger(&bytes);
        assert!(err.is_none());
        assert_eq!(records.len(), 2);

        // Corrupt the validity-flag count of block 0 so it no longer decodes.
        let first_len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        bytes[4 + first_len - 1] = 9;
        let (records, _) = scan_ledger(&bytes);
        assert!(records[0].block.is_err());
        assert!(records[1].block.is_ok());

        bytes.extend_from_slice(&[1, 2]);
        let (_, err) = scan_ledger(&bytes);
        assert!(matches!(err, Some(FramingError::StrayTail(2))));
    }
}
