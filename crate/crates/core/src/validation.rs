//! Block-level checks shared by the orderer, committers and auditors:
//! preimage/digest matching with the redaction counters, MVCC, and
//! selection of preimage entries to zero for a redaction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Digest};
use crate::model::{
    Block, RedactionRequest, Transaction, TxKind, ValidityFlag, Version, WriteValue,
};
use crate::state::StateView;

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    ValidationError,
}

/// Outcome of matching a block's write digests against its preimage space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreimageCheck {
    /// Entries consisting only of zero bytes.
    pub preimage_redaction_counter: u32,
    /// Hashed writes with no matching non-zero preimage.
    pub hash_mismatch_counter: u32,
    /// Per transaction, per write: index of the preimage entry consumed by
    /// that write. `None` for deletions, inline values, and misses.
    pub matches: Vec<Vec<Option<usize>>>,
    /// Indices of transactions with at least one missing preimage.
    pub redacted: Vec<usize>,
}

impl PreimageCheck {
    pub fn verdict(&self) -> Verdict {
        if self.preimage_redaction_counter == self.hash_mismatch_counter {
            Verdict::Success
        } else {
            Verdict::ValidationError
        }
    }
}

/// Digest → preimage entry indices (in block order) as intrusive linked
/// lists, so that duplicate digests are consumed one entry at a time.
struct PreimageIndex {
    heads: HashMap<Digest, u32>,
    next: Vec<u32>,
}

impl PreimageIndex {
    fn take(&mut self, d: &Digest) -> Option<usize> {
        let head = self.heads.get_mut(d)?;
        if *head == NONE {
            return None;
        }
        let i = *head;
        *head = self.next[i as usize];
        Some(i as usize)
    }
}

/// Hashes every non-zero preimage and matches each transaction's hashed
/// writes against the resulting multiset in block order. A block is
/// consistent iff the number of zeroed entries equals the number of
/// unmatched digests.
pub fn check_preimages(block: &Block) -> PreimageCheck {
    let entries = &block.preimages.entries;
    let mut redaction_counter = 0u32;
    let mut index = PreimageIndex {
        heads: HashMap::with_capacity(entries.len()),
        next: vec![NONE; entries.len()],
    };
    // Walk backwards so each list ends up in ascending entry order.
    for (i, p) in entries.iter().enumerate().rev() {
        if p.iter().all(|&b| b == 0) {
            redaction_counter += 1;
            continue;
        }
        let d = crypto::hash(p);
        let slot = index.heads.entry(d).or_insert(NONE);
        index.next[i] = *slot;
        *slot = i as u32;
    }

    let mut mismatch_counter = 0u32;
    let mut matches = Vec::with_capacity(block.transactions.len());
    let mut redacted = Vec::new();
    for (t, tx) in block.transactions.iter().enumerate() {
        let mut row = Vec::with_capacity(tx.write_set.len());
        let mut missed = false;
        for w in &tx.write_set {
            let m = match w.preimage_digest() {
                Some(d) => {
                    let m = index.take(&d);
                    if m.is_none() {
                        mismatch_counter += 1;
                        missed = true;
                    }
                    m
                }
                None => None,
            };
            row.push(m);
        }
        if missed {
            redacted.push(t);
        }
        matches.push(row);
    }

    PreimageCheck {
        preimage_redaction_counter: redaction_counter,
        hash_mismatch_counter: mismatch_counter,
        matches,
        redacted,
    }
}

/// Flags each transaction whose incoming flag is `Valid` as valid or
/// MVCC-invalid, in block order. Writes of earlier valid transactions in
/// the same block count as committed for later ones.
pub fn mvcc_validate(block: &Block, state: &dyn StateView, flags: &mut [ValidityFlag]) {
    let number = block.number();
    let mut overlay: HashMap<&[u8], Version> = HashMap::new();
    for (i, tx) in block.transactions.iter().enumerate() {
        if flags[i] != ValidityFlag::Valid {
            continue;
        }
        let stale = tx.read_set.iter().any(|r| {
            let current = overlay
                .get(r.key.as_slice())
                .copied()
                .or_else(|| state.get(&r.key).map(|e| e.version));
            current != r.version
        });
        if stale {
            flags[i] = ValidityFlag::MvccInvalid;
            continue;
        }
        for w in &tx.write_set {
            overlay.insert(&w.key, Version::new(number, i as u32));
        }
    }
}

/// Preimage entries to zero in `block` when redacting the writes of
/// transaction `tx_index` to `keys` (all hashed writes if `keys` is empty).
/// Writes whose preimage is already gone contribute nothing, so the result
/// is empty on a second pass.
pub fn redaction_entries(block: &Block, tx_index: usize, keys: &[Vec<u8>]) -> Vec<usize> {
    let Some(tx) = block.transactions.get(tx_index) else {
        return Vec::new();
    };
    let check = check_preimages(block);
    let mut out: Vec<usize> = tx
        .write_set
        .iter()
        .zip(&check.matches[tx_index])
        .filter(|(w, _)| keys.is_empty() || keys.contains(&w.key))
        .filter_map(|(_, m)| *m)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// A redaction may only target an endorsed transaction, and every key it
/// names must be a hashed write of that transaction.
pub fn redaction_target_ok(block: &Block, tx_index: usize, req: &RedactionRequest) -> bool {
    let Some(tx) = block.transactions.get(tx_index) else {
        return false;
    };
    tx.txid == req.target
        && tx.kind == TxKind::Endorsed
        && req.keys.iter().all(|k| {
            tx.write_set
                .iter()
                .any(|w| w.key == *k && w.preimage_digest().is_some())
        })
}

/// The value a write installs given the matched preimage, or `None` if the
/// write is hashed and its preimage is missing.
pub fn resolve_value<'a>(
    block: &'a Block,
    tx: &'a Transaction,
    w_index: usize,
    matched: Option<usize>,
) -> Option<&'a [u8]> {
    match &tx.write_set[w_index].value {
        WriteValue::Inline(v) => Some(v),
        WriteValue::Delete => None,
        WriteValue::Digest(_) => {
            let entry = &block.preimages.entries[matched?];
            crypto::split_preimage(entry).ok().map(|(_, v)| v)
        }
    }
}
