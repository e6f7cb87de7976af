//! Oracles and scenario generators shared by the integration suites. The
//! oracles deliberately avoid the library's validation code.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use redactable_ledger::crypto::{Digest, KeyPair, PublicKey, Signature};
use redactable_ledger::model::{
    compute_data_hash, endorsement_payload, Block, BlockHeader, IdentitySignature, Layout,
    PreimageSpace, Transaction, TxId, TxKind, ValidityFlag, Version, WriteEntry, WriteValue,
};
use redactable_ledger::network::{BatchParams, Network, NetworkConfig, NetworkKeys};
use redactable_ledger::state::{KeyStatus, StateStore};
use redactable_ledger::store::BlockStore;

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleVerdict {
    pub zeroed: u32,
    pub unmatched: u32,
    pub success: bool,
}

/// Maximum bipartite matching between the hashed writes of a block and its
/// non-zero preimage entries (edge iff the entry hashes to the digest),
/// by augmenting paths. The block is consistent iff the digests left
/// unmatched are exactly as many as the zeroed entries.
pub fn bijection_oracle(block: &Block) -> OracleVerdict {
    let digests: Vec<[u8; 32]> = block
        .transactions
        .iter()
        .flat_map(|t| &t.write_set)
        .filter_map(|w| match &w.value {
            WriteValue::Digest(d) => Some(d.0),
            _ => None,
        })
        .collect();
    let mut zeroed = 0;
    let mut live = Vec::new();
    for e in &block.preimages.entries {
        if e.iter().all(|&b| b == 0) {
            zeroed += 1;
        } else {
            live.push(sha256(e));
        }
    }
    let adj: Vec<Vec<usize>> = digests
        .iter()
        .map(|d| (0..live.len()).filter(|&j| live[j] == *d).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; live.len()];
    fn augment(
        u: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none() || augment(owner[v].unwrap(), adj, seen, owner) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut matched = 0;
    for u in 0..digests.len() {
        let mut seen = vec![false; live.len()];
        if augment(u, &adj, &mut seen, &mut owner) {
            matched += 1;
        }
    }
    let unmatched = (digests.len() - matched) as u32;
    OracleVerdict {
        zeroed,
        unmatched,
        success: unmatched == zeroed,
    }
}

/// Re-executes committed blocks one transaction at a time: a transaction
/// is valid iff every version it read is still current. Transactions the
/// committer rejected on policy grounds are passed through unchanged.
pub fn sequential_mvcc_oracle(blocks: &[Block]) -> Vec<Vec<ValidityFlag>> {
    let mut versions: HashMap<Vec<u8>, Version> = HashMap::new();
    let mut out = Vec::new();
    for b in blocks {
        let mut flags = Vec::new();
        for (i, tx) in b.transactions.iter().enumerate() {
            if b.validity_flags.get(i) == Some(&ValidityFlag::PolicyInvalid) {
                flags.push(ValidityFlag::PolicyInvalid);
                continue;
            }
            let fresh = tx
                .read_set
                .iter()
                .all(|r| versions.get(&r.key).copied() == r.version);
            if fresh {
                for w in &tx.write_set {
                    versions.insert(w.key.clone(), Version::new(b.header.number, i as u32));
                }
                flags.push(ValidityFlag::Valid);
            } else {
                flags.push(ValidityFlag::MvccInvalid);
            }
        }
        out.push(flags);
    }
    out
}

pub fn blocks_of(store: &dyn BlockStore) -> Vec<Block> {
    (0..store.height())
        .map(|n| store.block(n).unwrap())
        .collect()
}

/// A signed, unchained block of random writes whose preimage space is
/// consistent before any mutation.
pub fn random_block(rng: &mut ChaCha20Rng, endorser: &KeyPair, orderer: &KeyPair) -> Block {
    let ntx = rng.gen_range(1..=8);
    let mut transactions = Vec::new();
    let mut entries = Vec::new();
    let mut prior: Vec<Vec<u8>> = Vec::new();
    for _ in 0..ntx {
        let mut txid = [0u8; 32];
        rng.fill_bytes(&mut txid);
        let mut write_set = Vec::new();
        for k in 0..rng.gen_range(1..=4) {
            let key = format!("k{k}").into_bytes();
            if rng.gen_bool(0.1) {
                write_set.push(WriteEntry::delete(key));
                continue;
            }
            // Occasionally re-endorse an earlier preimage byte for byte so
            // that equal digests occur within one block.
            let p = if !prior.is_empty() && rng.gen_bool(0.1) {
                prior.choose(rng).unwrap().clone()
            } else {
                let mut p = vec![0u8; 32 + rng.gen_range(0..8)];
                rng.fill_bytes(&mut p);
                p
            };
            write_set.push(WriteEntry::hashed(key, Digest(sha256(&p))));
            prior.push(p.clone());
            entries.push(p);
        }
        let txid = TxId(txid);
        let sig = endorser.sign(&endorsement_payload(&txid, &[], &write_set));
        transactions.push(Transaction {
            txid,
            kind: TxKind::Endorsed,
            read_set: vec![],
            write_set,
            endorsements: vec![IdentitySignature {
                signer: endorser.public(),
                signature: sig,
            }],
            payload: vec![],
        });
    }
    let header = BlockHeader {
        number: 0,
        prev_hash: Digest::ZERO,
        data_hash: compute_data_hash(&transactions),
    };
    Block {
        orderer_signature: orderer.sign(&header_bytes(&header)),
        header,
        transactions,
        preimages: PreimageSpace { entries },
        orderer: orderer.public(),
        validity_flags: vec![],
    }
}

fn header_bytes(h: &BlockHeader) -> Vec<u8> {
    let mut out = h.number.to_le_bytes().to_vec();
    out.extend_from_slice(&h.prev_hash.0);
    out.extend_from_slice(&h.data_hash.0);
    out
}

pub const MUTATIONS: usize = 10;

/// Applies one random change to the preimage space and returns its kind.
pub fn mutate(block: &mut Block, rng: &mut ChaCha20Rng) -> usize {
    let e = &mut block.preimages.entries;
    let kind = rng.gen_range(0..MUTATIONS);
    if e.is_empty() && kind != 4 && kind != 5 {
        return mutate_append(e, rng);
    }
    let n = e.len();
    let i = rng.gen_range(0..n.max(1));
    match kind {
        // Redaction.
        0 => e[i].iter_mut().for_each(|b| *b = 0),
        // Replacement by unrelated bytes of equal length.
        1 => rng.fill_bytes(&mut e[i]),
        2 => {
            let j = rng.gen_range(0..n);
            e[i] = e[j].clone();
        }
        3 => {
            e.remove(i);
        }
        4 => return mutate_append(e, rng),
        5 => e.push(vec![0u8; 32 + rng.gen_range(0..8)]),
        6 => {
            let j = rng.gen_range(0..n);
            e.swap(i, j);
        }
        7 => {
            let at = rng.gen_range(0..e[i].len().max(1));
            if let Some(b) = e[i].get_mut(at) {
                *b ^= 1 << rng.gen_range(0..8);
            }
        }
        8 => {
            let c = e[i].clone();
            e.push(c);
        }
        _ => e[i].clear(),
    }
    kind
}

fn mutate_append(e: &mut Vec<Vec<u8>>, rng: &mut ChaCha20Rng) -> usize {
    let mut p = vec![0u8; 32 + rng.gen_range(0..8)];
    rng.fill_bytes(&mut p);
    e.push(p);
    4
}

pub fn network(seed: u64, endorsers: usize, batch: u32) -> Network {
    let keys = NetworkKeys::from_seed(seed, endorsers, 2);
    let config = keys
        .config(
            Layout::Redactable,
            endorsers.div_ceil(2),
            1,
            BatchParams {
                max_txs_per_block: batch,
                ..BatchParams::default()
            },
        )
        .unwrap();
    Network::in_memory(config, keys, 1, seed).unwrap()
}

pub fn config_of(net: &Network) -> NetworkConfig {
    net.config().clone()
}

/// Committed, endorsed transactions with at least one hashed write, as
/// `(txid, hashed keys)`.
pub fn redactable_targets(net: &Network) -> Vec<(TxId, Vec<Vec<u8>>)> {
    let mut out = Vec::new();
    for b in blocks_of(net.peer(0).store()) {
        for tx in &b.transactions {
            if tx.kind != TxKind::Endorsed {
                continue;
            }
            let keys: Vec<Vec<u8>> = tx
                .write_set
                .iter()
                .filter(|w| matches!(w.value, WriteValue::Digest(_)))
                .map(|w| w.key.clone())
                .collect();
            if !keys.is_empty() {
                out.push((tx.txid, keys));
            }
        }
    }
    out
}

/// Drives a random mix of writes, read-modify-writes, deletions, asset
/// transfers, stale (held back) envelopes and redactions through `net`.
/// Returns the number of redactions submitted.
pub fn random_activity(
    net: &mut Network,
    rng: &mut ChaCha20Rng,
    steps: usize,
    redact_p: f64,
) -> usize {
    const KEYS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
    let mut held = Vec::new();
    let mut redactions = 0;
    for _ in 0..steps {
        let roll: f64 = rng.gen();
        if roll < redact_p {
            let targets = redactable_targets(net);
            if let Some((t, keys)) = targets.choose(rng) {
                let chosen: Vec<Vec<u8>> = if rng.gen_bool(0.4) {
                    vec![]
                } else {
                    keys.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect()
                };
                net.redact(*t, chosen).unwrap();
                redactions += 1;
            }
            continue;
        }
        let k = KEYS.choose(rng).unwrap().as_bytes();
        let mut v = vec![0u8; 12];
        rng.fill_bytes(&mut v);
        let v = hex_str(&v);
        let env = match rng.gen_range(0..10) {
            0..=2 => net.endorse(
                "kv",
                vec![b"put".to_vec(), k.to_vec(), v.into_bytes()],
                b"c",
            ),
            3..=5 => net.endorse(
                "kv",
                vec![b"rmw".to_vec(), k.to_vec(), v.into_bytes()],
                b"c",
            ),
            6 => net.endorse("kv", vec![b"del".to_vec(), k.to_vec()], b"c"),
            7 => {
                let k2 = KEYS.choose(rng).unwrap().as_bytes();
                net.endorse(
                    "kv",
                    vec![
                        b"put".to_vec(),
                        k.to_vec(),
                        v.clone().into_bytes(),
                        k2.to_vec(),
                        v.into_bytes(),
                    ],
                    b"c",
                )
            }
            8 => net.endorse(
                "asset",
                vec![b"create".to_vec(), k.to_vec(), b"p0".to_vec()],
                b"c",
            ),
            _ => {
                let from = format!("p{}", rng.gen_range(0..3));
                let to = format!("p{}", rng.gen_range(0..3));
                net.endorse(
                    "asset",
                    vec![
                        b"transfer".to_vec(),
                        k.to_vec(),
                        from.into_bytes(),
                        to.into_bytes(),
                    ],
                    b"c",
                )
            }
        };
        // Simulation failures (crippled reads, failed chaincode checks) are
        // part of normal operation.
        let Ok(env) = env else { continue };
        if rng.gen_bool(0.25) {
            held.push(env);
        } else {
            net.submit(env).unwrap();
        }
        if !held.is_empty() && rng.gen_bool(0.2) {
            let i = rng.gen_range(0..held.len());
            net.submit(held.swap_remove(i)).unwrap();
        }
        if rng.gen_bool(0.1) {
            net.tick(rng.gen_range(0..3000)).unwrap();
        }
    }
    for env in held {
        net.submit(env).unwrap();
    }
    net.flush().unwrap();
    redactions
}

fn hex_str(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Differences between a live peer's state and a joiner's, beyond the one
/// allowed kind: a key the joiner holds as crippled that the live peer
/// holds as live at the same version.
pub fn divergences(live: &StateStore, joiner: &StateStore) -> Vec<String> {
    let l: BTreeMap<_, _> = live
        .entries()
        .into_iter()
        .map(|e| (e.key.clone(), e.clone()))
        .collect();
    let j: BTreeMap<_, _> = joiner
        .entries()
        .into_iter()
        .map(|e| (e.key.clone(), e.clone()))
        .collect();
    let mut out = Vec::new();
    if l.keys().ne(j.keys()) {
        out.push("key sets differ".to_string());
    }
    for (k, a) in &l {
        let Some(b) = j.get(k) else { continue };
        let key = String::from_utf8_lossy(k);
        if a.version != b.version {
            out.push(format!("{key}: version {} vs {}", a.version, b.version));
        }
        let status_ok = a.status == b.status
            || (a.status == KeyStatus::Live && b.status == KeyStatus::Crippled);
        if !status_ok {
            out.push(format!("{key}: status {:?} vs {:?}", a.status, b.status));
        }
        if let (Some(x), Some(y)) = (&a.value, &b.value) {
            if x != y {
                out.push(format!("{key}: values differ"));
            }
        }
    }
    out
}

pub fn keys(seed: u64) -> (KeyPair, KeyPair) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (KeyPair::generate(&mut rng), KeyPair::generate(&mut rng))
}

pub fn pk_sig_bytes(b: &Block) -> ([u8; 32], [u8; 64]) {
    let PublicKey(pk) = b.orderer;
    let Signature(sig) = b.orderer_signature;
    (pk, sig)
}
