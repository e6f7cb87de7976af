//! Peer Transaction Manager: versioned world state plus the indexes used to
//! locate transactions for redaction.
//!
//! Each key maps to its latest committed entry. A key whose latest write had
//! its preimage redacted before this replica saw it is *crippled*: the
//! version is known, the value is not. The committer is the only writer;
//! endorsers read through [`StateView`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    put_bool, put_bytes, put_list, put_u32, put_u64, put_u8, Decode, DecodeError, DecodeErrorKind,
    Encode, Reader,
};
use crate::model::{TxId, Version};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStatus {
    Live,
    Crippled,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateEntry {
    pub key: Vec<u8>,
    /// Present only when `status == Live`.
    pub value: Option<Vec<u8>>,
    pub version: Version,
    pub status: KeyStatus,
}

/// How a committed write resolved against the block's preimage space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Value(Vec<u8>),
    /// The preimage was missing (redacted) when this replica committed.
    Crippled,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedWrite {
    pub tx_index: u32,
    pub key: Vec<u8>,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxLocation {
    pub block: u64,
    pub tx_index: u32,
    /// Offset of the containing block's bytes in the ledger file.
    pub file_offset: u64,
}

/// A transaction of the block being applied, for the locator indexes.
/// Every stored transaction is indexed, valid or not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedTx {
    pub txid: TxId,
    pub tx_index: u32,
    pub written_keys: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WriteBatch {
    pub block_number: u64,
    pub file_offset: u64,
    /// Writes of valid transactions, in block order.
    pub writes: Vec<ResolvedWrite>,
    pub transactions: Vec<IndexedTx>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("commit gap: expected block {expected}, got {got}")]
    CommitGap { expected: u64, got: u64 },
    #[error("write to {key:?} at {new} does not follow version {old}")]
    NonMonotonicVersion {
        key: Vec<u8>,
        old: Version,
        new: Version,
    },
    #[error("transaction {0} indexed twice")]
    DuplicateTxId(TxId),
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot decode: {0}")]
    Decode(#[from] DecodeError),
}

/// Read access to committed state.
pub trait StateView {
    fn get(&self, key: &[u8]) -> Option<&StateEntry>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateStore {
    entries: HashMap<Vec<u8>, StateEntry>,
    txids: HashMap<TxId, TxLocation>,
    key_index: HashMap<Vec<u8>, Vec<TxId>>,
    height: u64,
}

impl StateView for StateStore {
    fn get(&self, key: &[u8]) -> Option<&StateEntry> {
        self.entries.get(key)
    }
}

impl StateStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of blocks applied; the next batch must carry this number.
    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &[u8]) -> Option<&StateEntry> {
        self.entries.get(key)
    }

    pub fn version_of(&self, key: &[u8]) -> Option<Version> {
        self.entries.get(key).map(|e| e.version)
    }

    pub fn locate(&self, txid: &TxId) -> Option<TxLocation> {
        self.txids.get(txid).copied()
    }

    /// Every transaction that wrote `key`, in chain order. Redaction does
    /// not remove entries.
    pub fn lookup_user_txids(&self, key: &[u8]) -> Vec<TxId> {
        self.key_index.get(key).cloned().unwrap_or_default()
    }

    /// All keys ever written that start with `prefix`, sorted.
    pub fn indexed_keys_with_prefix(&self, prefix: &[u8]) -> Vec<Vec<u8>> {
        let mut keys: Vec<_> = self
            .key_index
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.sort();
        keys
    }

    /// State entries sorted by key.
    pub fn entries(&self) -> Vec<&StateEntry> {
        let mut v: Vec<_> = self.entries.values().collect();
        v.sort_by(|a, b| a.key.cmp(&b.key));
        v
    }

    pub fn key_index(&self) -> BTreeMap<Vec<u8>, Vec<TxId>> {
        self.key_index
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn tx_count(&self) -> usize {
        self.txids.len()
    }

    /// Applies one validated block's writes and index entries. Either the
    /// whole batch applies or nothing does.
    pub fn apply_write_batch(&mut self, batch: WriteBatch) -> Result<(), StateError> {
        if batch.block_number != self.height {
            return Err(StateError::CommitGap {
                expected: self.height,
                got: batch.block_number,
            });
        }
        let mut pending: HashMap<&[u8], Version> = HashMap::new();
        for w in &batch.writes {
            let new = Version::new(batch.block_number, w.tx_index);
            let old = pending
                .get(w.key.as_slice())
                .copied()
                .or_else(|| self.version_of(&w.key));
            if let Some(old) = old {
                if new <= old {
                    return Err(StateError::NonMonotonicVersion {
                        key: w.key.clone(),
                        old,
                        new,
                    });
                }
            }
            pending.insert(&w.key, new);
        }
        for tx in &batch.transactions {
            if self.txids.contains_key(&tx.txid) {
                return Err(StateError::DuplicateTxId(tx.txid));
            }
        }

        for w in batch.writes {
            let version = Version::new(batch.block_number, w.tx_index);
            let (value, status) = match w.resolution {
                Resolution::Value(v) => (Some(v), KeyStatus::Live),
                Resolution::Crippled => (None, KeyStatus::Crippled),
                Resolution::Delete => (None, KeyStatus::Deleted),
            };
            self.entries.insert(
                w.key.clone(),
                StateEntry {
                    key: w.key,
                    value,
                    version,
                    status,
                },
            );
        }
        for tx in batch.transactions {
            self.txids.insert(
                tx.txid,
                TxLocation {
                    block: batch.block_number,
                    tx_index: tx.tx_index,
                    file_offset: batch.file_offset,
                },
            );
            let mut seen: Vec<&[u8]> = Vec::new();
            for key in &tx.written_keys {
                if seen.contains(&key.as_slice()) {
                    continue;
                }
                seen.push(key);
                self.key_index.entry(key.clone()).or_default().push(tx.txid);
            }
        }
        self.height += 1;
        Ok(())
    }

    /// Writes the store to `path` atomically (temp file + rename).
    pub fn save_snapshot(&self, path: &Path) -> Result<(), SnapshotError> {
        let bytes = self.encode();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_data()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, SnapshotError> {
        let bytes = fs::read(path)?;
        Ok(StateStore::decode(&bytes)?)
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"RLSNAP01";

impl Encode for StateStore {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(SNAPSHOT_MAGIC);
        put_u64(out, self.height);

        let entries = self.entries();
        put_u32(out, entries.len() as u32);
        for e in entries {
            put_bytes(out, &e.key);
            put_u8(
                out,
                match e.status {
                    KeyStatus::Live => 0,
                    KeyStatus::Crippled => 1,
                    KeyStatus::Deleted => 2,
                },
            );
            e.version.encode_to(out);
            put_bool(out, e.value.is_some());
            if let Some(v) = &e.value {
                put_bytes(out, v);
            }
        }

        let mut locs: Vec<_> = self.txids.iter().collect();
        locs.sort_by_key(|(id, loc)| (loc.block, loc.tx_index, **id));
        put_u32(out, locs.len() as u32);
        for (id, loc) in locs {
            id.encode_to(out);
            put_u64(out, loc.block);
            put_u32(out, loc.tx_index);
            put_u64(out, loc.file_offset);
        }

        let index = self.key_index();
        put_u32(out, index.len() as u32);
        for (key, ids) in index {
            put_bytes(out, &key);
            put_list(out, &ids);
        }
    }
}

impl Decode for StateStore {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(DecodeError {
                offset: 0,
                kind: DecodeErrorKind::Invalid("snapshot magic"),
            });
        }
        let mut store = StateStore {
            height: r.u64()?,
            ..Default::default()
        };
        for _ in 0..r.count(4 + 1 + 12 + 1)? {
            let key = r.byte_vec()?;
            let status = match r.u8()? {
                0 => KeyStatus::Live,
                1 => KeyStatus::Crippled,
                2 => KeyStatus::Deleted,
                tag => {
                    return Err(r.error(DecodeErrorKind::InvalidTag {
                        what: "key status",
                        tag,
                    }))
                }
            };
            let version = Version::decode_from(r)?;
            let value = if r.bool()? { Some(r.byte_vec()?) } else { None };
            if value.is_some() != (status == KeyStatus::Live) {
                return Err(r.error(DecodeErrorKind::Invalid(
                    "value presence contradicts status",
                )));
            }
            store.entries.insert(
                key.clone(),
                StateEntry {
                    key,
                    value,
                    version,
                    status,
                },
            );
        }
        for _ in 0..r.count(32 + 20)? {
            let id = TxId::decode_from(r)?;
            let loc = TxLocation {
                block: r.u64()?,
                tx_index: r.u32()?,
                file_offset: r.u64()?,
            };
            store.txids.insert(id, loc);
        }
        for _ in 0..r.count(8)? {
            let key = r.byte_vec()?;
            let ids: Vec<TxId> = r.list(32)?;
            store.key_index.insert(key, ids);
        }
        Ok(store)
    }
}
