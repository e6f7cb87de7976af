//! Deterministic single-process network: a set of endorsers, one orderer
//! and any number of committing peers, driven by a logical clock.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{rebuild_peer, RebuildError};
use crate::chaincode::ChaincodeRegistry;
use crate::committer::{BlockValidationReport, CommitError, Committer, CommitterConfig};
use crate::crypto::{KeyPair, PublicKey};
use crate::endorser::{
    build_redaction, collect_endorsements, EndorseError, Endorser, Proposal, TransactionEnvelope,
};
use crate::model::{Layout, TxId, TxKind};
use crate::ordering::{Orderer, OrderingConfig, OrderingError, Rejection, SubmitError};
use crate::policy::{ChannelPolicies, PolicyConfigError, ThresholdPolicy};
use crate::state::KeyStatus;
use crate::store::{export_ledger, BlockStore, MemBlockStore, StoreError};
use crate::validation::redaction_entries;

pub type DynStore = Box<dyn BlockStore + Send>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchParams {
    pub max_txs_per_block: u32,
    pub max_block_bytes: u32,
    pub batch_timeout_ms: u64,
}

impl Default for BatchParams {
    fn default() -> Self {
        BatchParams {
            max_txs_per_block: 10,
            max_block_bytes: 1 << 20,
            batch_timeout_ms: 2000,
        }
    }
}

/// Public network configuration shared by every node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub layout: Layout,
    pub orderer: PublicKey,
    pub endorsement: ThresholdPolicy,
    pub redaction: ThresholdPolicy,
    pub ordering: BatchParams,
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Policy(#[from] PolicyConfigError),
    #[error("invalid key material: {0}")]
    Key(String),
}

fn read_file(path: &Path) -> Result<String, ConfigFileError> {
    fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), ConfigFileError> {
    fs::write(path, text).map_err(|source| ConfigFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl NetworkConfig {
    pub fn policies(&self) -> ChannelPolicies {
        ChannelPolicies {
            layout: self.layout,
            endorsement: self.endorsement.clone(),
            redaction: self.redaction.clone(),
        }
    }

    pub fn ordering_config(&self) -> OrderingConfig {
        OrderingConfig {
            max_txs_per_block: self.ordering.max_txs_per_block,
            max_block_bytes: self.ordering.max_block_bytes,
            batch_timeout_ms: self.ordering.batch_timeout_ms,
            policies: self.policies(),
        }
    }

    pub fn committer_config(&self) -> CommitterConfig {
        CommitterConfig {
            policies: self.policies(),
            orderers: vec![self.orderer],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigFileError> {
        let c: NetworkConfig =
            toml::from_str(text).map_err(|e| ConfigFileError::Parse(e.to_string()))?;
        c.policies().check()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        Self::from_toml(&read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigFileError> {
        write_file(path, &self.to_toml())
    }
}

/// Secret keys of every role in a simulated network.
#[derive(Clone)]
pub struct NetworkKeys {
    pub orderer: KeyPair,
    pub endorsers: Vec<KeyPair>,
    pub requesters: Vec<KeyPair>,
}

#[derive(Serialize, Deserialize)]
struct KeysFile {
    orderer: String,
    endorsers: Vec<String>,
    requesters: Vec<String>,
}

fn seed_from_hex(s: &str) -> Result<KeyPair, ConfigFileError> {
    let bytes = hex::decode(s).map_err(|e| ConfigFileError::Key(e.to_string()))?;
    let seed: [u8; 32] = bytes
        .try_into()
        .map_err(|_| ConfigFileError::Key("seed must be 32 bytes".into()))?;
    Ok(KeyPair::from_seed(seed))
}

impl NetworkKeys {
    pub fn generate<R: RngCore + CryptoRng>(
        rng: &mut R,
        endorsers: usize,
        requesters: usize,
    ) -> Self {
        NetworkKeys {
            orderer: KeyPair::generate(rng),
            endorsers: (0..endorsers).map(|_| KeyPair::generate(rng)).collect(),
            requesters: (0..requesters).map(|_| KeyPair::generate(rng)).collect(),
        }
    }

    pub fn from_seed(seed: u64, endorsers: usize, requesters: usize) -> Self {
        Self::generate(&mut ChaCha20Rng::seed_from_u64(seed), endorsers, requesters)
    }

    pub fn config(
        &self,
        layout: Layout,
        endorsement_threshold: usize,
        redaction_threshold: usize,
        ordering: BatchParams,
    ) -> Result<NetworkConfig, PolicyConfigError> {
        Ok(NetworkConfig {
            layout,
            orderer: self.orderer.public(),
            endorsement: ThresholdPolicy::new(
                endorsement_threshold,
                self.endorsers.iter().map(|k| k.public()).collect(),
            )?,
            redaction: ThresholdPolicy::new(
                redaction_threshold,
                self.requesters.iter().map(|k| k.public()).collect(),
            )?,
            ordering,
        })
    }

    pub fn to_toml(&self) -> String {
        let f = KeysFile {
            orderer: hex::encode(self.orderer.seed()),
            endorsers: self
                .endorsers
                .iter()
                .map(|k| hex::encode(k.seed()))
                .collect(),
            requesters: self
                .requesters
                .iter()
                .map(|k| hex::encode(k.seed()))
                .collect(),
        };
        toml::to_string(&f).expect("keys serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigFileError> {
        let f: KeysFile =
            toml::from_str(text).map_err(|e| ConfigFileError::Parse(e.to_string()))?;
        Ok(NetworkKeys {
            orderer: seed_from_hex(&f.orderer)?,
            endorsers: f
                .endorsers
                .iter()
                .map(|s| seed_from_hex(s))
                .collect::<Result<_, _>>()?,
            requesters: f
                .requesters
                .iter()
                .map(|s| seed_from_hex(s))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        Self::from_toml(&read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigFileError> {
        write_file(path, &self.to_toml())
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Endorse(#[from] EndorseError),
    #[error("rejected by orderer: {0}")]
    Rejected(#[from] Rejection),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error(transparent)]
    Commit(#[from] CommitError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Rebuild(#[from] RebuildError),
    #[error("keys do not match configuration: {0}")]
    KeysMismatch(&'static str),
    #[error("network needs at least one peer")]
    NoPeers,
}

impl From<SubmitError> for NetworkError {
    fn from(e: SubmitError) -> Self {
        match e {
            SubmitError::Rejected(r) => NetworkError::Rejected(r),
            SubmitError::Ordering(o) => NetworkError::Ordering(o),
        }
    }
}

impl NetworkError {
    pub fn rejection(&self) -> Option<&Rejection> {
        match self {
            NetworkError::Rejected(r) => Some(r),
            _ => None,
        }
    }
}

/// What `forget_user` did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgetReport {
    /// Keys under the prefix that were ever written.
    pub keys: Vec<String>,
    /// Transaction deleting the keys that were still set, if any.
    pub deletion: Option<TxId>,
    /// Redacted transactions, in chain order.
    pub targets: Vec<TxId>,
    /// The redaction transactions issued, aligned with `targets`.
    pub redactions: Vec<TxId>,
}

pub struct Network {
    config: NetworkConfig,
    keys: NetworkKeys,
    orderer: Orderer<DynStore>,
    peers: Vec<Committer<DynStore>>,
    endorsers: Vec<Endorser>,
    registry: ChaincodeRegistry,
    rng: ChaCha20Rng,
    clock_ms: u64,
}

impl Network {
    /// Assembles a network from already-opened nodes.
    pub fn from_parts(
        config: NetworkConfig,
        keys: NetworkKeys,
        orderer: Orderer<DynStore>,
        peers: Vec<Committer<DynStore>>,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        if peers.is_empty() {
            return Err(NetworkError::NoPeers);
        }
        if keys.orderer.public() != config.orderer {
            return Err(NetworkError::KeysMismatch("orderer"));
        }
        let endorser_keys: Vec<PublicKey> = keys.endorsers.iter().map(|k| k.public()).collect();
        if endorser_keys != config.endorsement.members {
            return Err(NetworkError::KeysMismatch("endorsers"));
        }
        let endorsers = keys
            .endorsers
            .iter()
            .map(|k| Endorser::new(k.clone(), config.layout))
            .collect();
        Ok(Network {
            config,
            keys,
            orderer,
            peers,
            endorsers,
            registry: ChaincodeRegistry::with_builtins(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            clock_ms: 0,
        })
    }

    /// In-memory network with `peers` committing peers.
    pub fn in_memory(
        config: NetworkConfig,
        keys: NetworkKeys,
        peers: usize,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        let orderer = Orderer::new(
            keys.orderer.clone(),
            config.ordering_config(),
            Box::new(MemBlockStore::new()) as DynStore,
        )?;
        let peers = (0..peers)
            .map(|_| {
                Committer::new(
                    config.committer_config(),
                    Box::new(MemBlockStore::new()) as DynStore,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(config, keys, orderer, peers, seed)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn keys(&self) -> &NetworkKeys {
        &self.keys
    }

    pub fn orderer(&self) -> &Orderer<DynStore> {
        &self.orderer
    }

    pub fn orderer_mut(&mut self) -> &mut Orderer<DynStore> {
        &mut self.orderer
    }

    pub fn peer(&self, i: usize) -> &Committer<DynStore> {
        &self.peers[i]
    }

    pub fn peers(&self) -> &[Committer<DynStore>] {
        &self.peers
    }

    pub fn into_parts(self) -> (Orderer<DynStore>, Vec<Committer<DynStore>>) {
        (self.orderer, self.peers)
    }

    pub fn registry_mut(&mut self) -> &mut ChaincodeRegistry {
        &mut self.registry
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn set_clock_ms(&mut self, now: u64) {
        self.clock_ms = now;
    }

    /// Simulates a proposal on peer 0's state and collects endorsements
    /// from every endorser. Salts are drawn fresh, one per hashed write.
    pub fn endorse(
        &mut self,
        chaincode: &str,
        args: Vec<Vec<u8>>,
        client: &[u8],
    ) -> Result<TransactionEnvelope, NetworkError> {
        let handle = self.peers[0].state_handle();
        let state = handle.read().expect("state lock poisoned");
        let mut p = Proposal::new(chaincode, args, client, self.rng.next_u64());
        match self.endorsers[0].simulate(&p, &self.registry, &*state) {
            Err(EndorseError::MissingSalt { needed, .. }) => {
                p = p.with_fresh_salts(needed, &mut self.rng);
            }
            Err(e) => return Err(e.into()),
            Ok(_) => {}
        }
        Ok(collect_endorsements(
            &p,
            &self.endorsers,
            &self.config.endorsement,
            &self.registry,
            &*state,
        )?)
    }

    /// Endorses and submits; returns the transaction id.
    pub fn invoke(
        &mut self,
        chaincode: &str,
        args: &[&[u8]],
        client: &[u8],
    ) -> Result<TxId, NetworkError> {
        let env = self.endorse(chaincode, args.iter().map(|a| a.to_vec()).collect(), client)?;
        let id = env.txid();
        self.submit(env)?;
        Ok(id)
    }

    /// Submits to the orderer; a block cut by a size threshold is
    /// delivered to every peer and peer 0's report returned.
    pub fn submit(
        &mut self,
        env: TransactionEnvelope,
    ) -> Result<Option<BlockValidationReport>, NetworkError> {
        match self.orderer.submit(env, self.clock_ms)? {
            Some(b) => Ok(Some(self.deliver(b)?)),
            None => Ok(None),
        }
    }

    fn deliver(
        &mut self,
        block: crate::model::Block,
    ) -> Result<BlockValidationReport, NetworkError> {
        let mut first = None;
        for p in &mut self.peers {
            let r = p.commit_block(block.clone())?;
            first.get_or_insert(r);
        }
        Ok(first.expect("at least one peer"))
    }

    /// Advances the clock and cuts a block if the batch timeout expired.
    pub fn tick(&mut self, ms: u64) -> Result<Option<BlockValidationReport>, NetworkError> {
        self.clock_ms += ms;
        match self.orderer.cut_if_ready(self.clock_ms)? {
            Some(b) => Ok(Some(self.deliver(b)?)),
            None => Ok(None),
        }
    }

    /// Cuts and delivers blocks until nothing is pending.
    pub fn flush(&mut self) -> Result<Vec<BlockValidationReport>, NetworkError> {
        let mut out = Vec::new();
        while let Some(b) = self.orderer.cut_block()? {
            out.push(self.deliver(b)?);
        }
        Ok(out)
    }

    /// Builds a redaction request signed by the first `threshold`
    /// requesters and submits it.
    pub fn redact(&mut self, target: TxId, keys: Vec<Vec<u8>>) -> Result<TxId, NetworkError> {
        let signers = &self.keys.requesters[..self.config.redaction.threshold];
        let env = build_redaction(target, keys, self.rng.next_u64(), signers);
        let id = env.txid();
        self.submit(env)?;
        Ok(id)
    }

    /// Removes everything stored under `prefix`: first deletes the keys
    /// that are still set, then redacts, one request per transaction, every
    /// write to those keys whose preimage is still present.
    pub fn forget_user(&mut self, prefix: &[u8]) -> Result<ForgetReport, NetworkError> {
        let mut report = ForgetReport::default();
        let (keys, live) = {
            let state = self.peers[0].state();
            let keys = state.indexed_keys_with_prefix(prefix);
            let live: Vec<Vec<u8>> = keys
                .iter()
                .filter(|k| state.get(k).is_some_and(|e| e.status != KeyStatus::Deleted))
                .cloned()
                .collect();
            (keys, live)
        };
        report.keys = keys
            .iter()
            .map(|k| String::from_utf8_lossy(k).into_owned())
            .collect();
        if !live.is_empty() {
            let mut args: Vec<&[u8]> = vec![b"del"];
            args.extend(live.iter().map(Vec::as_slice));
            report.deletion = Some(self.invoke("kv", &args, b"forget-user")?);
            self.flush()?;
        }

        let mut targets: BTreeMap<(u64, u32), (TxId, Vec<Vec<u8>>)> = BTreeMap::new();
        {
            let peer = &self.peers[0];
            let state = peer.state();
            let mut blocks = BTreeMap::new();
            for key in &keys {
                for txid in state.lookup_user_txids(key) {
                    let Some(loc) = state.locate(&txid) else {
                        continue;
                    };
                    let block = match blocks.entry(loc.block) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => e.insert(peer.store().block(loc.block)?),
                    };
                    let tx = &block.transactions[loc.tx_index as usize];
                    if tx.kind != TxKind::Endorsed {
                        continue;
                    }
                    let key_list = std::slice::from_ref(key);
                    if redaction_entries(block, loc.tx_index as usize, key_list).is_empty() {
                        continue;
                    }
                    targets
                        .entry((loc.block, loc.tx_index))
                        .or_insert_with(|| (txid, Vec::new()))
                        .1
                        .push(key.clone());
                }
            }
        }
        for (_, (target, keys)) in targets {
            report.targets.push(target);
            report.redactions.push(self.redact(target, keys)?);
        }
        self.flush()?;
        Ok(report)
    }

    /// Ledger bytes of peer `i` in file format.
    pub fn ledger_bytes(&self, i: usize) -> Result<Vec<u8>, NetworkError> {
        Ok(export_ledger(self.peers[i].store())?)
    }

    /// A fresh peer that acquires peer 0's current ledger and replays it.
    pub fn join(&self) -> Result<Committer<MemBlockStore>, NetworkError> {
        let bytes = self.ledger_bytes(0)?;
        Ok(rebuild_peer(&bytes, &self.config.committer_config())?.0)
    }
}
