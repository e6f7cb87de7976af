//! Single-sequencer ordering service: admission checks, batching, block
//! cutting and signing, plus the orderer's own copy of the ledger on which
//! it applies redactions.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{put_list, Decode, DecodeError, Encode, Reader};
use crate::crypto::{self, Digest, KeyPair};
use crate::endorser::TransactionEnvelope;
use crate::model::{
    compute_data_hash, Block, BlockHeader, PreimageSpace, RedactionRequest, TxId, TxKind,
};
use crate::policy::{ChannelPolicies, PolicyFailure, TxCheckError};
use crate::store::{BlockStore, StoreError};
use crate::validation::{redaction_entries, redaction_target_ok};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingConfig {
    pub max_txs_per_block: u32,
    pub max_block_bytes: u32,
    pub batch_timeout_ms: u64,
    pub policies: ChannelPolicies,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("max_txs_per_block must be at least 1")]
    MaxTxs,
    #[error("max_block_bytes must be at least 1")]
    MaxBytes,
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyConfigError),
}

impl OrderingConfig {
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.max_txs_per_block == 0 {
            return Err(ConfigError::MaxTxs);
        }
        if self.max_block_bytes == 0 {
            return Err(ConfigError::MaxBytes);
        }
        self.policies.check()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("bad signature")]
    BadSignature,
    #[error("policy unmet: {have} of {need} signatures")]
    PolicyUnmet { have: usize, need: usize },
    #[error("preimage {index} does not match its write digest")]
    PreimageMismatch { index: usize },
    #[error("unknown redaction target {0}")]
    UnknownRedactionTarget(TxId),
    #[error("duplicate transaction id {0}")]
    DuplicateTxId(TxId),
    #[error("redaction is not supported in baseline mode")]
    RedactionUnsupported,
    #[error("malformed envelope: {0}")]
    Malformed(String),
}

impl From<TxCheckError> for Rejection {
    fn from(e: TxCheckError) -> Self {
        match e {
            TxCheckError::Malformed(m) => Rejection::Malformed(m),
            TxCheckError::RedactionUnsupported(_) => Rejection::RedactionUnsupported,
            TxCheckError::Policy(PolicyFailure::BadSignature(_)) => Rejection::BadSignature,
            TxCheckError::Policy(PolicyFailure::Unmet { have, need }) => {
                Rejection::PolicyUnmet { have, need }
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum OrderingError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("unknown redaction target {0}")]
    UnknownTarget(TxId),
    #[error("stored block {0} does not link to its predecessor")]
    BrokenChain(u64),
}

/// Where a transaction sits in the orderer's chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Placement {
    block: u64,
    tx_index: u32,
}

pub struct Orderer<S: BlockStore> {
    key: KeyPair,
    config: OrderingConfig,
    store: S,
    pending: VecDeque<TransactionEnvelope>,
    pending_ids: HashSet<TxId>,
    pending_bytes: usize,
    /// Arrival time of the oldest pending envelope.
    oldest_ms: Option<u64>,
    placed: HashMap<TxId, Placement>,
    last_hash: Option<Digest>,
}

impl<S: BlockStore> Orderer<S> {
    /// Opens an orderer over `store`, indexing any blocks already in it.
    pub fn new(key: KeyPair, config: OrderingConfig, store: S) -> Result<Self, OrderingError> {
        let mut o = Orderer {
            key,
            config,
            store,
            pending: VecDeque::new(),
            pending_ids: HashSet::new(),
            pending_bytes: 0,
            oldest_ms: None,
            placed: HashMap::new(),
            last_hash: None,
        };
        for n in 0..o.store.height() {
            let b = o.store.block(n)?;
            let expected = o.last_hash.unwrap_or(Digest::ZERO);
            if b.header.prev_hash != expected {
                return Err(OrderingError::BrokenChain(n));
            }
            o.index_block(&b);
            o.last_hash = Some(b.hash());
        }
        Ok(o)
    }

    pub fn config(&self) -> &OrderingConfig {
        &self.config
    }

    pub fn public_key(&self) -> crypto::PublicKey {
        self.key.public()
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn height(&self) -> u64 {
        self.store.height()
    }

    pub fn pending(&self) -> impl Iterator<Item = &TransactionEnvelope> {
        self.pending.iter()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn index_block(&mut self, b: &Block) {
        for (i, tx) in b.transactions.iter().enumerate() {
            self.placed.entry(tx.txid).or_insert(Placement {
                block: b.number(),
                tx_index: i as u32,
            });
        }
    }

    /// Checks an envelope without enqueueing it.
    pub fn admit(&self, env: &TransactionEnvelope) -> Result<(), Rejection> {
        let tx = &env.transaction;
        if self.placed.contains_key(&tx.txid) || self.pending_ids.contains(&tx.txid) {
            return Err(Rejection::DuplicateTxId(tx.txid));
        }
        let req = self.config.policies.check_transaction(tx)?;
        match tx.kind {
            TxKind::Endorsed => check_preimages(env),
            TxKind::Redaction => {
                if !env.preimages.is_empty() {
                    return Err(Rejection::Malformed("redaction carries preimages".into()));
                }
                let req = req.expect("redaction request decoded");
                if self.target_ok(&req) {
                    Ok(())
                } else {
                    Err(Rejection::UnknownRedactionTarget(req.target))
                }
            }
            TxKind::Config => unreachable!("rejected by check_transaction"),
        }
    }

    fn target_ok(&self, req: &RedactionRequest) -> bool {
        let Some(p) = self.placed.get(&req.target) else {
            return false;
        };
        match self.store.block(p.block) {
            Ok(b) => redaction_target_ok(&b, p.tx_index as usize, req),
            Err(_) => false,
        }
    }

    /// Admits and enqueues an envelope, then cuts a block if a size
    /// threshold is reached.
    pub fn submit(
        &mut self,
        env: TransactionEnvelope,
        now_ms: u64,
    ) -> Result<Option<Block>, SubmitError> {
        self.admit(&env)?;
        self.enqueue(env, now_ms);
        Ok(self.cut_if_ready(now_ms)?)
    }

    /// Enqueues an envelope that has already passed `admit`.
    pub fn enqueue(&mut self, env: TransactionEnvelope, now_ms: u64) {
        self.pending_bytes += env.encoded_size();
        self.pending_ids.insert(env.txid());
        self.pending.push_back(env);
        self.oldest_ms.get_or_insert(now_ms);
    }

    /// Cuts when the count threshold, the byte threshold, or the batch
    /// timeout is reached, checked in that order.
    pub fn cut_if_ready(&mut self, now_ms: u64) -> Result<Option<Block>, OrderingError> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let by_count = self.pending.len() >= self.config.max_txs_per_block as usize;
        let by_bytes = self.pending_bytes >= self.config.max_block_bytes as usize;
        let by_time = self
            .oldest_ms
            .is_some_and(|t| now_ms.saturating_sub(t) >= self.config.batch_timeout_ms);
        if by_count || by_bytes || by_time {
            self.cut_block()
        } else {
            Ok(None)
        }
    }

    /// Cuts at most `max_txs_per_block` pending envelopes into a signed
    /// block, appends it, and applies any redactions it carries to the
    /// orderer's ledger.
    pub fn cut_block(&mut self) -> Result<Option<Block>, OrderingError> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        let n = self
            .pending
            .len()
            .min(self.config.max_txs_per_block as usize);
        let batch: Vec<_> = self.pending.drain(..n).collect();
        let mut transactions = Vec::with_capacity(n);
        let mut entries = Vec::new();
        for env in batch {
            self.pending_ids.remove(&env.txid());
            self.pending_bytes -= env.encoded_size();
            transactions.push(env.transaction);
            entries.extend(env.preimages);
        }
        if self.pending.is_empty() {
            self.oldest_ms = None;
        }

        let header = BlockHeader {
            number: self.store.height(),
            prev_hash: self.last_hash.unwrap_or(Digest::ZERO),
            data_hash: compute_data_hash(&transactions),
        };
        let orderer_signature = self.key.sign(&header.encode());
        let block = Block {
            header,
            transactions,
            preimages: PreimageSpace { entries },
            orderer: self.key.public(),
            orderer_signature,
            validity_flags: Vec::new(),
        };
        self.store.append(&block)?;
        self.index_block(&block);
        self.last_hash = Some(block.hash());

        for tx in &block.transactions {
            if let Some(Ok(req)) = tx.redaction_request() {
                self.apply_redaction_at_orderer(&req.target, &req.keys)?;
            }
        }
        Ok(Some(block))
    }

    /// Zeroes the preimages of `target`'s writes to `keys` (all hashed
    /// writes if empty) in the orderer's copy. Returns the number of
    /// entries zeroed; a repeated call zeroes nothing.
    pub fn apply_redaction_at_orderer(
        &mut self,
        target: &TxId,
        keys: &[Vec<u8>],
    ) -> Result<usize, OrderingError> {
        let p = *self
            .placed
            .get(target)
            .ok_or(OrderingError::UnknownTarget(*target))?;
        let block = self.store.block(p.block)?;
        let entries = redaction_entries(&block, p.tx_index as usize, keys);
        if !entries.is_empty() {
            self.store.zero_preimages(p.block, &entries)?;
        }
        Ok(entries.len())
    }
}

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("rejected: {0}")]
    Rejected(#[from] Rejection),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
}

impl SubmitError {
    pub fn rejection(&self) -> Option<&Rejection> {
        match self {
            SubmitError::Rejected(r) => Some(r),
            SubmitError::Ordering(_) => None,
        }
    }
}

/// Every hashed write needs a preimage hashing to its digest, in order;
/// nothing else may carry one.
fn check_preimages(env: &TransactionEnvelope) -> Result<(), Rejection> {
    let mut pre = env.preimages.iter().enumerate();
    for w in &env.transaction.write_set {
        if let Some(d) = w.preimage_digest() {
            match pre.next() {
                Some((_, p)) if p.len() >= crypto::SALT_LEN && crypto::hash(p) == d => {}
                Some((i, _)) => return Err(Rejection::PreimageMismatch { index: i }),
                None => {
                    return Err(Rejection::PreimageMismatch {
                        index: env.preimages.len(),
                    })
                }
            }
        }
    }
    if let Some((i, _)) = pre.next() {
        return Err(Rejection::PreimageMismatch { index: i });
    }
    Ok(())
}

/// Pending envelopes with the arrival time of the oldest, for orderers that
/// persist their queue between runs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PendingQueue {
    pub oldest_ms: Option<u64>,
    pub envelopes: Vec<TransactionEnvelope>,
}

impl<S: BlockStore> Orderer<S> {
    pub fn export_pending(&self) -> PendingQueue {
        PendingQueue {
            oldest_ms: self.oldest_ms,
            envelopes: self.pending.iter().cloned().collect(),
        }
    }

    /// Restores a queue saved by `export_pending`. Envelopes that no longer
    /// pass admission are dropped and returned with their reason.
    pub fn restore_pending(&mut self, q: PendingQueue) -> Vec<(TxId, Rejection)> {
        let mut dropped = Vec::new();
        for env in q.envelopes {
            match self.admit(&env) {
                Ok(()) => self.enqueue(env, q.oldest_ms.unwrap_or(0)),
                Err(r) => dropped.push((env.txid(), r)),
            }
        }
        if !self.pending.is_empty() {
            self.oldest_ms = q.oldest_ms.or(self.oldest_ms);
        }
        dropped
    }
}

impl Encode for PendingQueue {
    fn encode_to(&self, out: &mut Vec<u8>) {
        crate::codec::put_bool(out, self.oldest_ms.is_some());
        crate::codec::put_u64(out, self.oldest_ms.unwrap_or(0));
        put_list(out, &self.envelopes);
    }
}

impl Decode for PendingQueue {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let has = r.bool()?;
        let t = r.u64()?;
        Ok(PendingQueue {
            oldest_ms: has.then_some(t),
            envelopes: r.list(8)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaincode::ChaincodeRegistry;
    use crate::endorser::{build_redaction, collect_endorsements, Endorser, Proposal};
    use crate::model::Layout;
    use crate::policy::ThresholdPolicy;
    use crate::state::StateStore;
    use crate::store::MemBlockStore;
    use crate::validation::check_preimages as alg1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        endorsers: Vec<Endorser>,
        requester: KeyPair,
        orderer: Orderer<MemBlockStore>,
        rng: ChaCha20Rng,
        nonce: u64,
    }

    fn fixture(layout: Layout, max_txs: u32) -> Fixture {
        let endorsers: Vec<_> = (1..=3)
            .map(|i| Endorser::new(KeyPair::from_seed([i; 32]), layout))
            .collect();
        let requester = KeyPair::from_seed([40; 32]);
        let policies = ChannelPolicies {
            layout,
            endorsement: ThresholdPolicy::new(2, endorsers.iter().map(|e| e.id()).collect())
                .unwrap(),
            redaction: ThresholdPolicy::new(1, vec![requester.public()]).unwrap(),
        };
        let config = OrderingConfig {
            max_txs_per_block: max_txs,
            max_block_bytes: 1 << 20,
            batch_timeout_ms: 1000,
            policies,
        };
        Fixture {
            endorsers,
            requester,
            orderer: Orderer::new(KeyPair::from_seed([50; 32]), config, MemBlockStore::new())
                .unwrap(),
            rng: ChaCha20Rng::seed_from_u64(1),
            nonce: 0,
        }
    }

    impl Fixture {
        fn envelope(&mut self, kv: &[(&str, &str)]) -> TransactionEnvelope {
            let mut args = vec![b"put".to_vec()];
            for (k, v) in kv {
                args.push(k.as_bytes().to_vec());
                args.push(v.as_bytes().to_vec());
            }
            self.nonce += 1;
            let p = Proposal::new("kv", args, b"client", self.nonce)
                .with_fresh_salts(kv.len(), &mut self.rng);
            let policy = &self.orderer.config().policies.endorsement;
            collect_endorsements(
                &p,
                &self.endorsers,
                policy,
                &ChaincodeRegistry::with_builtins(),
                &StateStore::new(),
            )
            .unwrap()
        }
    }

    #[test]
    fn valid_envelope_is_admitted_and_flipped_preimage_is_not() {
        let mut f = fixture(Layout::Redactable, 10);
        let env = f.envelope(&[("a", "1")]);
        assert_eq!(f.orderer.admit(&env), Ok(()));
        let mut bad = env.clone();
        bad.preimages[0][32] ^= 1;
        assert_eq!(
            f.orderer.admit(&bad),
            Err(Rejection::PreimageMismatch { index: 0 })
        );
        let mut missing = env.clone();
        missing.preimages.clear();
        assert!(matches!(
            f.orderer.admit(&missing),
            Err(Rejection::PreimageMismatch { .. })
        ));
        let mut extra = env;
        extra.preimages.push(vec![1; 40]);
        assert_eq!(
            f.orderer.admit(&extra),
            Err(Rejection::PreimageMismatch { index: 1 })
        );
    }

    #[test]
    fn signature_and_threshold_failures() {
        let mut f = fixture(Layout::Redactable, 10);
        let env = f.envelope(&[("a", "1")]);
        let mut one = env.clone();
        one.transaction.endorsements.truncate(1);
        assert_eq!(
            f.orderer.admit(&one),
            Err(Rejection::PolicyUnmet { have: 1, need: 2 })
        );
        let mut forged = env;
        forged.transaction.endorsements[0].signature.0[5] ^= 1;
        assert_eq!(f.orderer.admit(&forged), Err(Rejection::BadSignature));
    }

    #[test]
    fn block_assembly_order_and_genesis() {
        let mut f = fixture(Layout::Redactable, 3);
        let envs: Vec<_> = (0..3)
            .map(|i| f.envelope(&[(&format!("k{i}a"), "x"), (&format!("k{i}b"), "y")]))
            .collect();
        let expected: Vec<Vec<u8>> = envs.iter().flat_map(|e| e.preimages.clone()).collect();
        assert!(f.orderer.submit(envs[0].clone(), 0).unwrap().is_none());
        assert!(f.orderer.submit(envs[1].clone(), 0).unwrap().is_none());
        let b = f
            .orderer
            .submit(envs[2].clone(), 0)
            .unwrap()
            .expect("count threshold");
        assert_eq!(b.number(), 0);
        assert_eq!(b.header.prev_hash, Digest::ZERO);
        assert_eq!(b.transactions.len(), 3);
        assert_eq!(b.preimages.entries, expected);
        assert!(b.verify_signature());
        assert!(b.data_hash_matches());

        let e = f.envelope(&[("z", "1")]);
        let b1 = f.orderer.submit(e, 0).unwrap();
        assert!(b1.is_none());
        let b1 = f.orderer.cut_block().unwrap().unwrap();
        assert_eq!(b1.header.prev_hash, b.hash());
    }

    #[test]
    fn thresholds_checked_count_then_bytes_then_time() {
        let mut f = fixture(Layout::Redactable, 100);
        let e = f.envelope(&[("a", "1")]);
        let size = e.encoded_size() as u32;
        f.orderer.config.max_block_bytes = size * 2;
        assert!(f.orderer.submit(e, 10).unwrap().is_none());
        assert!(f.orderer.cut_if_ready(500).unwrap().is_none());
        assert!(f.orderer.cut_if_ready(1010).unwrap().is_some());

        let e1 = f.envelope(&[("b", "1")]);
        let e2 = f.envelope(&[("c", "1")]);
        assert!(f.orderer.submit(e1, 2000).unwrap().is_none());
        let b = f.orderer.submit(e2, 2000).unwrap().expect("byte threshold");
        assert_eq!(b.transactions.len(), 2);
        assert_eq!(f.orderer.pending_len(), 0);
    }

    #[test]
    fn duplicate_txid_rejected_in_queue_and_chain() {
        let mut f = fixture(Layout::Redactable, 10);
        let env = f.envelope(&[("a", "1")]);
        f.orderer.submit(env.clone(), 0).unwrap();
        assert_eq!(
            f.orderer.admit(&env),
            Err(Rejection::DuplicateTxId(env.txid()))
        );
        f.orderer.cut_block().unwrap();
        assert_eq!(
            f.orderer.admit(&env),
            Err(Rejection::DuplicateTxId(env.txid()))
        );
    }

    #[test]
    fn redaction_zeroes_only_targeted_preimages_and_keeps_hashes() {
        let mut f = fixture(Layout::Redactable, 10);
        let env = f.envelope(&[("a", "1"), ("b", "2")]);
        let target = env.txid();
        f.orderer.submit(env, 0).unwrap();
        let b0 = f.orderer.cut_block().unwrap().unwrap();

        let unknown = build_redaction(TxId([9; 32]), vec![], 0, &[f.requester.clone()]);
        assert_eq!(
            f.orderer.admit(&unknown),
            Err(Rejection::UnknownRedactionTarget(TxId([9; 32])))
        );
        let wrong_key = build_redaction(target, vec![b"zz".to_vec()], 0, &[f.requester.clone()]);
        assert!(matches!(
            f.orderer.admit(&wrong_key),
            Err(Rejection::UnknownRedactionTarget(_))
        ));
        let outsider = build_redaction(target, vec![], 0, &[KeyPair::from_seed([77; 32])]);
        assert!(matches!(
            f.orderer.admit(&outsider),
            Err(Rejection::PolicyUnmet { .. })
        ));

        let red = build_redaction(target, vec![b"b".to_vec()], 0, &[f.requester.clone()]);
        f.orderer.submit(red, 0).unwrap();
        let b1 = f.orderer.cut_block().unwrap().unwrap();
        assert!(b1.preimages.is_empty());

        let stored = f.orderer.store().block(0).unwrap();
        assert_eq!(stored.hash(), b0.hash());
        assert!(stored.verify_signature());
        assert_eq!(stored.preimages.entries[0], b0.preimages.entries[0]);
        assert!(PreimageSpace::is_zeroed(&stored.preimages.entries[1]));
        assert_eq!(
            stored.preimages.entries[1].len(),
            b0.preimages.entries[1].len()
        );
        let c = alg1(&stored);
        assert_eq!(
            (c.preimage_redaction_counter, c.hash_mismatch_counter),
            (1, 1)
        );

        let before = f.orderer.store().to_ledger_bytes();
        assert_eq!(
            f.orderer
                .apply_redaction_at_orderer(&target, &[b"b".to_vec()])
                .unwrap(),
            0
        );
        assert_eq!(f.orderer.store().to_ledger_bytes(), before);
    }

    #[test]
    fn baseline_rejects_redaction() {
        let mut f = fixture(Layout::Baseline, 10);
        let env = f.envelope(&[("a", "1")]);
        assert!(env.preimages.is_empty());
        let target = env.txid();
        f.orderer.submit(env, 0).unwrap();
        f.orderer.cut_block().unwrap();
        let red = build_redaction(target, vec![], 0, &[f.requester.clone()]);
        assert_eq!(f.orderer.admit(&red), Err(Rejection::RedactionUnsupported));
    }

    #[test]
    fn reopening_recovers_chain_tip_and_index() {
        let mut f = fixture(Layout::Redactable, 10);
        let env = f.envelope(&[("a", "1")]);
        f.orderer.submit(env.clone(), 0).unwrap();
        let b0 = f.orderer.cut_block().unwrap().unwrap();
        let store = f.orderer.store().clone();
        let config = f.orderer.config().clone();
        let mut o = Orderer::new(KeyPair::from_seed([50; 32]), config, store).unwrap();
        assert_eq!(o.admit(&env), Err(Rejection::DuplicateTxId(env.txid())));
        let e2 = f.envelope(&[("b", "1")]);
        o.submit(e2, 0).unwrap();
        assert_eq!(o.cut_block().unwrap().unwrap().header.prev_hash, b0.hash());
    }

    #[test]
    fn pending_queue_round_trip() {
        let mut f = fixture(Layout::Redactable, 10);
        let env = f.envelope(&[("a", "1")]);
        f.orderer.submit(env, 42).unwrap();
        let q = f.orderer.export_pending();
        assert_eq!(PendingQueue::decode(&q.encode()).unwrap(), q);
        assert_eq!(q.oldest_ms, Some(42));
    }
}
