//! Execution phase: simulate a proposal on a state snapshot, replace each
//! written value by the digest of its salted preimage, and sign the result.
//!
//! Salts come from the client, one per hashed write, so that every endorser
//! of a proposal produces byte-identical write sets. The preimages travel
//! next to the signed portion but are not part of it.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::chaincode::{ChaincodeError, ChaincodeRegistry, SimContext};
use crate::codec::{put_bytes, put_list, put_u64, Decode, DecodeError, Encode, Reader};
use crate::crypto::{self, KeyPair, PublicKey, Salt, Signature};
use crate::model::{
    endorsement_payload, IdentitySignature, Layout, ReadEntry, RedactionRequest, Transaction, TxId,
    TxKind, WriteEntry,
};
use crate::policy::{PolicyFailure, ThresholdPolicy};
use crate::state::StateView;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub chaincode: String,
    pub args: Vec<Vec<u8>>,
    pub client: Vec<u8>,
    pub nonce: u64,
    /// One salt per written (non-deleted) key, consumed in write order.
    pub salts: Vec<Salt>,
}

impl Proposal {
    pub fn new(chaincode: &str, args: Vec<Vec<u8>>, client: &[u8], nonce: u64) -> Self {
        Proposal {
            chaincode: chaincode.to_string(),
            args,
            client: client.to_vec(),
            nonce,
            salts: Vec::new(),
        }
    }

    pub fn with_fresh_salts<R: RngCore + CryptoRng>(mut self, n: usize, rng: &mut R) -> Self {
        self.salts = (0..n).map(|_| Salt::random(rng)).collect();
        self
    }

    /// `hash(client ‖ nonce ‖ args)`.
    pub fn txid(&self) -> TxId {
        let mut buf = Vec::new();
        put_bytes(&mut buf, &self.client);
        put_u64(&mut buf, self.nonce);
        put_list(&mut buf, &self.args);
        crypto::hash(&buf).into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endorsement {
    pub txid: TxId,
    pub read_set: Vec<ReadEntry>,
    pub write_set: Vec<WriteEntry>,
    /// Aligned with `write_set`; `None` for deletions and inline writes.
    pub preimages: Vec<Option<Vec<u8>>>,
    pub endorser: PublicKey,
    pub signature: Signature,
}

impl Endorsement {
    pub fn signed_payload(&self) -> Vec<u8> {
        endorsement_payload(&self.txid, &self.read_set, &self.write_set)
    }
}

/// Everything the client sends to the ordering service for one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionEnvelope {
    pub transaction: Transaction,
    /// Preimages of the hashed writes, in write order.
    pub preimages: Vec<Vec<u8>>,
}

impl TransactionEnvelope {
    pub fn txid(&self) -> TxId {
        self.transaction.txid
    }

    pub fn encoded_size(&self) -> usize {
        self.transaction.encode().len() + self.preimages.iter().map(|p| p.len() + 4).sum::<usize>()
    }
}

impl Encode for TransactionEnvelope {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.transaction.encode_to(out);
        put_list(out, &self.preimages);
    }
}

impl Decode for TransactionEnvelope {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(TransactionEnvelope {
            transaction: Transaction::decode_from(r)?,
            preimages: r.list(4)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndorseError {
    #[error("unknown chaincode {0:?}")]
    UnknownChaincode(String),
    #[error("simulation aborted: read of crippled key {}", String::from_utf8_lossy(.0))]
    CrippledKey(Vec<u8>),
    #[error("chaincode error: {0}")]
    Chaincode(String),
    #[error("simulation wrote nothing")]
    EmptyWriteSet,
    #[error("proposal supplies {supplied} salts but {needed} values were written")]
    MissingSalt { needed: usize, supplied: usize },
    #[error("endorsements disagree on the signed read/write sets")]
    Mismatch,
    #[error("endorsement policy not met: {have} of {need}")]
    Policy { have: usize, need: usize },
}

impl From<ChaincodeError> for EndorseError {
    fn from(e: ChaincodeError) -> Self {
        match e {
            ChaincodeError::CrippledKey(k) => EndorseError::CrippledKey(k),
            ChaincodeError::Failed(m) => EndorseError::Chaincode(m),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Endorser {
    key: KeyPair,
    layout: Layout,
}

impl Endorser {
    pub fn new(key: KeyPair, layout: Layout) -> Self {
        Endorser { key, layout }
    }

    pub fn id(&self) -> PublicKey {
        self.key.public()
    }

    /// Runs the proposal's chaincode against `state` without mutating it.
    pub fn simulate(
        &self,
        proposal: &Proposal,
        registry: &ChaincodeRegistry,
        state: &dyn StateView,
    ) -> Result<Endorsement, EndorseError> {
        let code = registry
            .get(&proposal.chaincode)
            .ok_or_else(|| EndorseError::UnknownChaincode(proposal.chaincode.clone()))?;
        let mut ctx = SimContext::new(state);
        code.invoke(&mut ctx, &proposal.args)?;
        let (read_set, writes) = ctx.into_sets();
        if writes.is_empty() {
            return Err(EndorseError::EmptyWriteSet);
        }

        let needed = match self.layout {
            Layout::Redactable => writes.iter().filter(|(_, v)| v.is_some()).count(),
            Layout::Baseline => 0,
        };
        if proposal.salts.len() < needed {
            return Err(EndorseError::MissingSalt {
                needed,
                supplied: proposal.salts.len(),
            });
        }

        let mut salts = proposal.salts.iter();
        let mut write_set = Vec::with_capacity(writes.len());
        let mut preimages = Vec::with_capacity(writes.len());
        for (key, value) in writes {
            match (value, self.layout) {
                (None, _) => {
                    write_set.push(WriteEntry::delete(key));
                    preimages.push(None);
                }
                (Some(v), Layout::Baseline) => {
                    write_set.push(WriteEntry::inline(key, v));
                    preimages.push(None);
                }
                (Some(v), Layout::Redactable) => {
                    let salt = salts.next().expect("salt count checked");
                    let preimage = crypto::make_preimage(salt, &v);
                    write_set.push(WriteEntry::hashed(key, crypto::hash(&preimage)));
                    preimages.push(Some(preimage));
                }
            }
        }

        let txid = proposal.txid();
        let signature = self
            .key
            .sign(&endorsement_payload(&txid, &read_set, &write_set));
        Ok(Endorsement {
            txid,
            read_set,
            write_set,
            preimages,
            endorser: self.id(),
            signature,
        })
    }
}

/// Gathers endorsements from `endorsers` and assembles the envelope.
///
/// Endorsers whose simulation fails contribute nothing. All successful
/// endorsements must agree byte-for-byte on the signed portion; fewer than
/// `policy.threshold` of them is a policy error. If none succeed the first
/// simulation error is returned.
pub fn collect_endorsements(
    proposal: &Proposal,
    endorsers: &[Endorser],
    policy: &ThresholdPolicy,
    registry: &ChaincodeRegistry,
    state: &dyn StateView,
) -> Result<TransactionEnvelope, EndorseError> {
    let mut ok = Vec::new();
    let mut first_err = None;
    for e in endorsers {
        match e.simulate(proposal, registry, state) {
            Ok(en) => ok.push(en),
            Err(err) => {
                first_err.get_or_insert(err);
            }
        }
    }
    assemble_envelope(ok, policy).map_err(|e| match (e, first_err) {
        (EndorseError::Policy { have: 0, .. }, Some(sim)) => sim,
        (e, _) => e,
    })
}

/// Combines already-collected endorsements into an envelope.
pub fn assemble_envelope(
    endorsements: Vec<Endorsement>,
    policy: &ThresholdPolicy,
) -> Result<TransactionEnvelope, EndorseError> {
    let Some(first) = endorsements.first() else {
        return Err(EndorseError::Policy {
            have: 0,
            need: policy.threshold,
        });
    };
    let reference = first.signed_payload();
    if endorsements.iter().any(|e| e.signed_payload() != reference) {
        return Err(EndorseError::Mismatch);
    }

    let sigs: Vec<IdentitySignature> = endorsements
        .iter()
        .map(|e| IdentitySignature {
            signer: e.endorser,
            signature: e.signature,
        })
        .collect();
    if let Err(f) = policy.evaluate(&reference, &sigs) {
        return Err(match f {
            PolicyFailure::Unmet { have, need } => EndorseError::Policy { have, need },
            PolicyFailure::BadSignature(_) => EndorseError::Mismatch,
        });
    }

    let first = endorsements.into_iter().next().unwrap();
    Ok(TransactionEnvelope {
        transaction: Transaction {
            txid: first.txid,
            kind: TxKind::Endorsed,
            read_set: first.read_set,
            write_set: first.write_set,
            endorsements: sigs,
            payload: Vec::new(),
        },
        preimages: first.preimages.into_iter().flatten().collect(),
    })
}

/// Builds a signed redaction transaction. An empty `keys` list targets all
/// hashed writes of `target`.
pub fn build_redaction(
    target: TxId,
    keys: Vec<Vec<u8>>,
    nonce: u64,
    requesters: &[KeyPair],
) -> TransactionEnvelope {
    let mut req = RedactionRequest {
        target,
        keys,
        nonce,
        requesters: Vec::new(),
    };
    let msg = req.signing_payload();
    req.requesters = requesters
        .iter()
        .map(|k| IdentitySignature {
            signer: k.public(),
            signature: k.sign(&msg),
        })
        .collect();
    TransactionEnvelope {
        transaction: Transaction {
            txid: req.txid(),
            kind: TxKind::Redaction,
            read_set: Vec::new(),
            write_set: Vec::new(),
            endorsements: Vec::new(),
            payload: req.encode(),
        },
        preimages: Vec::new(),
    }
}
