//! Validation phase of a peer: header checks, endorsement and redaction
//! policy, preimage matching, MVCC, then append, state update, and
//! redaction of earlier blocks.

use std::collections::HashSet;
use std::sync::{Arc, RwLock, RwLockReadGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest, PublicKey};
use crate::model::{Block, RedactionRequest, TxId, TxKind, ValidityFlag};
use crate::policy::ChannelPolicies;
use crate::state::{IndexedTx, Resolution, ResolvedWrite, StateError, StateStore, WriteBatch};
use crate::store::{BlockStore, StoreError};
use crate::validation::{
    check_preimages, mvcc_validate, redaction_entries, redaction_target_ok, resolve_value, Verdict,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitterConfig {
    pub policies: ChannelPolicies,
    /// Orderer keys whose block signatures are accepted.
    pub orderers: Vec<PublicKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockValidationReport {
    pub number: u64,
    pub preimage_redaction_counter: u32,
    pub hash_mismatch_counter: u32,
    pub flags: Vec<ValidityFlag>,
    pub verdict: Verdict,
    /// Transactions of this block with missing preimages.
    pub redacted_txs: Vec<TxId>,
    #[serde(skip)]
    matches: Vec<Vec<Option<usize>>>,
    #[serde(skip)]
    redactions: Vec<RedactionRequest>,
    #[serde(skip)]
    duplicates: Vec<bool>,
}

impl BlockValidationReport {
    /// Valid redaction requests carried by this block, in block order.
    pub fn redactions(&self) -> &[RedactionRequest] {
        &self.redactions
    }
}

#[derive(Debug, Error)]
pub enum CommitError {
    #[error("block number {got}, expected {expected}")]
    WrongNumber { expected: u64, got: u64 },
    #[error("block {0} does not link to the previous header")]
    BrokenLink(u64),
    #[error("block {0} data hash does not match its transactions")]
    DataHash(u64),
    #[error("block {0} signed by an untrusted orderer")]
    UntrustedOrderer(u64),
    #[error("block {0} orderer signature does not verify")]
    BadSignature(u64),
    #[error(
        "block {number} preimage validation failed: {preimage_redaction_counter} zeroed, \
         {hash_mismatch_counter} unmatched"
    )]
    Preimages {
        number: u64,
        preimage_redaction_counter: u32,
        hash_mismatch_counter: u32,
    },
    #[error("redaction target {0} is not a committed transaction")]
    UnknownTarget(TxId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    State(#[from] StateError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub validate: Duration,
    pub append: Duration,
    pub apply: Duration,
}

impl std::ops::AddAssign for PhaseTimings {
    fn add_assign(&mut self, o: Self) {
        self.validate += o.validate;
        self.append += o.append;
        self.apply += o.apply;
    }
}

pub struct Committer<S: BlockStore> {
    config: CommitterConfig,
    store: S,
    state: Arc<RwLock<StateStore>>,
    last_hash: Option<Digest>,
}

impl<S: BlockStore> Committer<S> {
    /// Opens a committer over `store`, rebuilding state by replaying any
    /// blocks already stored.
    pub fn new(config: CommitterConfig, store: S) -> Result<Self, CommitError> {
        Self::with_state(config, store, StateStore::new())
    }

    /// Like `new`, but starts from a saved state. The snapshot is used only
    /// if its height equals the store's; otherwise state is replayed.
    pub fn with_state(
        config: CommitterConfig,
        store: S,
        state: StateStore,
    ) -> Result<Self, CommitError> {
        let height = store.height();
        let usable = state.height() == height;
        let mut c = Committer {
            config,
            store,
            state: Arc::new(RwLock::new(if usable { state } else { StateStore::new() })),
            last_hash: None,
        };
        if usable {
            if height > 0 {
                c.last_hash = Some(c.store.block(height - 1)?.hash());
            }
        } else {
            for n in 0..height {
                let b = c.store.block(n)?;
                c.process(b, false)?;
            }
        }
        Ok(c)
    }

    pub fn config(&self) -> &CommitterConfig {
        &self.config
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn into_store(self) -> S {
        self.store
    }

    pub fn height(&self) -> u64 {
        self.store.height()
    }

    /// Shared handle for concurrent readers such as endorsers.
    pub fn state_handle(&self) -> Arc<RwLock<StateStore>> {
        Arc::clone(&self.state)
    }

    pub fn state(&self) -> RwLockReadGuard<'_, StateStore> {
        self.state.read().expect("state lock poisoned")
    }

    pub fn check_header(&self, block: &Block) -> Result<(), CommitError> {
        let n = block.number();
        let expected = self.state().height();
        if n != expected {
            return Err(CommitError::WrongNumber { expected, got: n });
        }
        if block.header.prev_hash != self.last_hash.unwrap_or(Digest::ZERO) {
            return Err(CommitError::BrokenLink(n));
        }
        if !self.config.orderers.contains(&block.orderer) {
            return Err(CommitError::UntrustedOrderer(n));
        }
        if !block.verify_signature() {
            return Err(CommitError::BadSignature(n));
        }
        if !block.data_hash_matches() {
            return Err(CommitError::DataHash(n));
        }
        Ok(())
    }

    /// Policy flags, preimage counters and MVCC flags for the next block.
    /// Does not look at the header.
    pub fn validate_block(&self, block: &Block) -> BlockValidationReport {
        let state = self.state();
        let n = block.transactions.len();
        let mut flags = vec![ValidityFlag::Valid; n];
        let mut duplicates = vec![false; n];
        let mut redactions = Vec::new();
        let mut seen: HashSet<TxId> = HashSet::with_capacity(n);

        for (i, tx) in block.transactions.iter().enumerate() {
            if !seen.insert(tx.txid) || state.locate(&tx.txid).is_some() {
                duplicates[i] = true;
                flags[i] = ValidityFlag::PolicyInvalid;
                continue;
            }
            match self.config.policies.check_transaction(tx) {
                Err(_) => flags[i] = ValidityFlag::PolicyInvalid,
                Ok(None) => {}
                Ok(Some(req)) => {
                    if self.target_committed(&state, &req) {
                        redactions.push(req);
                    } else {
                        flags[i] = ValidityFlag::PolicyInvalid;
                    }
                }
            }
        }

        let check = check_preimages(block);
        mvcc_validate(block, &*state, &mut flags);
        BlockValidationReport {
            number: block.number(),
            preimage_redaction_counter: check.preimage_redaction_counter,
            hash_mismatch_counter: check.hash_mismatch_counter,
            verdict: check.verdict(),
            redacted_txs: check
                .redacted
                .iter()
                .map(|&i| block.transactions[i].txid)
                .collect(),
            flags,
            matches: check.matches,
            redactions,
            duplicates,
        }
    }

    fn target_committed(&self, state: &StateStore, req: &RedactionRequest) -> bool {
        let Some(loc) = state.locate(&req.target) else {
            return false;
        };
        match self.store.block(loc.block) {
            Ok(b) => redaction_target_ok(&b, loc.tx_index as usize, req),
            Err(_) => false,
        }
    }

    /// Validates and commits the next block. Nothing changes unless the
    /// header and preimage checks pass and the block is durably appended.
    pub fn commit_block(&mut self, block: Block) -> Result<BlockValidationReport, CommitError> {
        self.process(block, true).map(|(r, _)| r)
    }

    pub fn commit_block_timed(
        &mut self,
        block: Block,
    ) -> Result<(BlockValidationReport, PhaseTimings), CommitError> {
        self.process(block, true)
    }

    fn process(
        &mut self,
        mut block: Block,
        append: bool,
    ) -> Result<(BlockValidationReport, PhaseTimings), CommitError> {
        let mut t = PhaseTimings::default();
        let start = Instant::now();
        self.check_header(&block)?;
        let report = self.validate_block(&block);
        if report.verdict != Verdict::Success {
            return Err(CommitError::Preimages {
                number: report.number,
                preimage_redaction_counter: report.preimage_redaction_counter,
                hash_mismatch_counter: report.hash_mismatch_counter,
            });
        }
        let batch = self.write_batch(&block, &report, 0);
        block.validity_flags = report.flags.clone();
        t.validate = start.elapsed();

        let start = Instant::now();
        let offset = if append {
            self.store.append(&block)?
        } else {
            self.store.offset(block.number()).unwrap_or(0)
        };
        t.append = start.elapsed();

        let start = Instant::now();
        let batch = WriteBatch {
            file_offset: offset,
            ..batch
        };
        self.state
            .write()
            .expect("state lock poisoned")
            .apply_write_batch(batch)?;
        self.last_hash = Some(block.hash());
        for req in &report.redactions {
            self.apply_redaction(req)?;
        }
        t.apply = start.elapsed();
        Ok((report, t))
    }

    fn write_batch(
        &self,
        block: &Block,
        report: &BlockValidationReport,
        offset: u64,
    ) -> WriteBatch {
        let mut writes = Vec::new();
        let mut transactions = Vec::with_capacity(block.transactions.len());
        for (i, tx) in block.transactions.iter().enumerate() {
            if report.duplicates[i] {
                continue;
            }
            transactions.push(IndexedTx {
                txid: tx.txid,
                tx_index: i as u32,
                written_keys: tx.write_set.iter().map(|w| w.key.clone()).collect(),
            });
            if report.flags[i] != ValidityFlag::Valid || tx.kind != TxKind::Endorsed {
                continue;
            }
            for (w, entry) in tx.write_set.iter().enumerate() {
                let resolution = if entry.is_delete() {
                    Resolution::Delete
                } else {
                    match resolve_value(block, tx, w, report.matches[i][w]) {
                        Some(v) => Resolution::Value(v.to_vec()),
                        None => Resolution::Crippled,
                    }
                };
                writes.push(ResolvedWrite {
                    tx_index: i as u32,
                    key: entry.key.clone(),
                    resolution,
                });
            }
        }
        WriteBatch {
            block_number: block.number(),
            file_offset: offset,
            writes,
            transactions,
        }
    }

    /// Zeroes the preimages of the request's target writes in this peer's
    /// ledger. State is left untouched. Returns the number of entries
    /// zeroed; already-zeroed entries are skipped.
    pub fn apply_redaction(&mut self, req: &RedactionRequest) -> Result<usize, CommitError> {
        let loc = self
            .state()
            .locate(&req.target)
            .ok_or(CommitError::UnknownTarget(req.target))?;
        let block = self.store.block(loc.block)?;
        let entries = redaction_entries(&block, loc.tx_index as usize, &req.keys);
        if !entries.is_empty() {
            self.store.zero_preimages(loc.block, &entries)?;
        }
        Ok(entries.len())
    }
}
