//! Observer and late-joiner checks over a whole ledger file: header
//! linkage, orderer signatures, data hashes, preimage counters, and a
//! replay that rebuilds world state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::committer::{CommitError, Committer, CommitterConfig};
use crate::crypto::{Digest, PublicKey};
use crate::model::TxId;
use crate::state::StateStore;
use crate::store::{scan_ledger, MemBlockStore};
use crate::validation::{check_preimages, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAudit {
    /// Position of the record in the file.
    pub index: u64,
    /// Byte offset of the encoded block (just past its length prefix).
    pub offset: u64,
    pub number: Option<u64>,
    pub block_hash: Option<String>,
    pub linkage_ok: bool,
    pub trusted_orderer: bool,
    pub signature_ok: bool,
    pub data_hash_ok: bool,
    pub preimage_redaction_counter: u32,
    pub hash_mismatch_counter: u32,
    pub verdict: Option<Verdict>,
    pub redacted_txids: Vec<TxId>,
    /// Decode failure, if the record could not be parsed.
    pub malformed: Option<String>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub height: u64,
    pub blocks: Vec<BlockAudit>,
    /// Every transaction found with missing preimages, in chain order.
    pub redacted_txids: Vec<TxId>,
    pub framing_error: Option<String>,
    pub first_failure: Option<u64>,
    pub passed: bool,
}

/// Verifies every record of a ledger file against the orderer keys in
/// `anchors`. Never fails; problems are reported per block.
pub fn verify_chain(ledger: &[u8], anchors: &[PublicKey]) -> AuditReport {
    let (records, framing) = scan_ledger(ledger);
    let mut blocks = Vec::with_capacity(records.len());
    let mut redacted_txids = Vec::new();
    let mut prev_hash: Option<Digest> = Some(Digest::ZERO);

    for rec in records {
        let mut a = BlockAudit {
            index: rec.index,
            offset: rec.offset,
            number: None,
            block_hash: None,
            linkage_ok: false,
            trusted_orderer: false,
            signature_ok: false,
            data_hash_ok: false,
            preimage_redaction_counter: 0,
            hash_mismatch_counter: 0,
            verdict: None,
            redacted_txids: Vec::new(),
            malformed: None,
            ok: false,
        };
        match rec.block {
            Err(e) => {
                a.malformed = Some(e.to_string());
                prev_hash = None;
            }
            Ok(b) => {
                let hash = b.hash();
                a.number = Some(b.number());
                a.block_hash = Some(hash.to_hex());
                a.linkage_ok = b.number() == rec.index && prev_hash == Some(b.header.prev_hash);
                a.trusted_orderer = anchors.contains(&b.orderer);
                a.signature_ok = b.verify_signature();
                a.data_hash_ok = b.data_hash_matches();
                let check = check_preimages(&b);
                a.preimage_redaction_counter = check.preimage_redaction_counter;
                a.hash_mismatch_counter = check.hash_mismatch_counter;
                a.verdict = Some(check.verdict());
                a.ok = a.linkage_ok
                    && a.trusted_orderer
                    && a.signature_ok
                    && a.data_hash_ok
                    && check.verdict() == Verdict::Success;
                if a.ok {
                    a.redacted_txids = check
                        .redacted
                        .iter()
                        .map(|&i| b.transactions[i].txid)
                        .collect();
                    redacted_txids.extend_from_slice(&a.redacted_txids);
                }
                prev_hash = Some(hash);
            }
        }
        blocks.push(a);
    }

    let first_failure = blocks.iter().find(|b| !b.ok).map(|b| b.index);
    AuditReport {
        height: blocks.len() as u64,
        passed: first_failure.is_none() && framing.is_none(),
        first_failure,
        framing_error: framing.map(|f| f.to_string()),
        redacted_txids,
        blocks,
    }
}

#[derive(Debug, Error)]
pub enum RebuildError {
    #[error("ledger failed verification (first failing block: {first_failure:?})")]
    Verification {
        first_failure: Option<u64>,
        report: Box<AuditReport>,
    },
    #[error(transparent)]
    Commit(#[from] CommitError),
}

/// Replays a verified ledger from scratch the way a newly joining peer
/// would. Writes whose preimages are gone are installed as crippled.
pub fn rebuild_state(
    ledger: &[u8],
    config: &CommitterConfig,
) -> Result<(StateStore, AuditReport), RebuildError> {
    let (peer, report) = rebuild_peer(ledger, config)?;
    let state = peer.state().clone();
    Ok((state, report))
}

/// As `rebuild_state`, returning the replayed peer itself.
pub fn rebuild_peer(
    ledger: &[u8],
    config: &CommitterConfig,
) -> Result<(Committer<MemBlockStore>, AuditReport), RebuildError> {
    let report = verify_chain(ledger, &config.orderers);
    if !report.passed {
        return Err(RebuildError::Verification {
            first_failure: report.first_failure,
            report: Box::new(report),
        });
    }
    let (records, _) = scan_ledger(ledger);
    let mut peer = Committer::new(config.clone(), MemBlockStore::new())?;
    for rec in records {
        let block = rec.block.expect("verified ledger decodes");
        peer.commit_block(block)?;
    }
    Ok((peer, report))
}
