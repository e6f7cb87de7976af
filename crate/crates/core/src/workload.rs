//! Synthetic blind-write workloads and the commit-path benchmark.
//!
//! Generated transactions have no reads, so MVCC never rejects anything and
//! every write reaches the state store. Each transaction writes distinct
//! keys drawn uniformly from a fixed key space.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{put_u64, Decode, Encode};
use crate::committer::{CommitError, Committer, CommitterConfig, PhaseTimings};
use crate::crypto::{self, Digest, Salt};
use crate::model::{
    compute_data_hash, endorsement_payload, Block, BlockHeader, IdentitySignature, Layout,
    PreimageSpace, Transaction, TxId, TxKind, WriteEntry,
};
use crate::network::{BatchParams, NetworkKeys};
use crate::store::{scan_ledger, FileBlockStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub total_txs: u64,
    pub writes_per_tx: u32,
    pub key_space: u32,
    pub key_bytes: u32,
    pub value_bytes: u32,
    pub txs_per_block: u32,
    pub mode: Layout,
    /// Endorser signatures per transaction; all are checked at commit.
    pub endorsements_per_tx: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            total_txs: 100_000,
            writes_per_tx: 5,
            key_space: 10,
            key_bytes: 16,
            value_bytes: 32,
            txs_per_block: 100,
            mode: Layout::Redactable,
            endorsements_per_tx: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    Spec(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Commit(#[from] CommitError),
    #[error("generated ledger failed to decode at block {0}")]
    Decode(u64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl WorkloadSpec {
    pub fn check(&self) -> Result<(), WorkloadError> {
        let positive = [
            ("total_txs", self.total_txs),
            ("writes_per_tx", self.writes_per_tx as u64),
            ("key_space", self.key_space as u64),
            ("key_bytes", self.key_bytes as u64),
            ("value_bytes", self.value_bytes as u64),
            ("txs_per_block", self.txs_per_block as u64),
            ("endorsements_per_tx", self.endorsements_per_tx as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(WorkloadError::Spec(format!("{name} must be positive")));
            }
        }
        if self.writes_per_tx > self.key_space {
            return Err(WorkloadError::Spec(
                "writes_per_tx exceeds key_space (keys within a transaction are distinct)".into(),
            ));
        }
        let digits = (self.key_space - 1).to_string().len() as u32;
        if self.key_bytes < digits {
            return Err(WorkloadError::Spec(format!(
                "key_bytes must be at least {digits} for {} keys",
                self.key_space
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, WorkloadError> {
        let s: WorkloadSpec =
            toml::from_str(text).map_err(|e| WorkloadError::Spec(e.to_string()))?;
        s.check()?;
        Ok(s)
    }

    pub fn blocks(&self) -> u64 {
        self.total_txs.div_ceil(self.txs_per_block as u64)
    }

    fn key(&self, i: usize) -> Vec<u8> {
        format!("{:0>width$}", i, width = self.key_bytes as usize).into_bytes()
    }
}

/// A generated ledger plus what a peer needs to commit it.
pub struct GeneratedLedger {
    pub bytes: Vec<u8>,
    pub config: CommitterConfig,
    pub blocks: u64,
    pub transactions: u64,
    pub preimages: u64,
}

/// Generates a signed chain of blind-write blocks. Identical `(spec, seed)`
/// pairs yield identical bytes.
pub fn generate_blocks(spec: &WorkloadSpec, seed: u64) -> Result<GeneratedLedger, WorkloadError> {
    spec.check()?;
    let keys = NetworkKeys::from_seed(seed, spec.endorsements_per_tx as usize, 1);
    let net = keys
        .config(
            spec.mode,
            spec.endorsements_per_tx as usize,
            1,
            BatchParams {
                max_txs_per_block: spec.txs_per_block,
                ..BatchParams::default()
            },
        )
        .map_err(|e| WorkloadError::Spec(e.to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let key_names: Vec<Vec<u8>> = (0..spec.key_space as usize).map(|i| spec.key(i)).collect();

    let mut bytes = Vec::new();
    let mut prev = Digest::ZERO;
    let mut produced = 0u64;
    let mut preimage_count = 0u64;
    let mut number = 0u64;
    let mut value = vec![0u8; spec.value_bytes as usize];
    while produced < spec.total_txs {
        let n = (spec.total_txs - produced).min(spec.txs_per_block as u64);
        let mut transactions = Vec::with_capacity(n as usize);
        let mut entries = Vec::new();
        for _ in 0..n {
            let mut id = Vec::with_capacity(24);
            id.extend_from_slice(b"workload");
            put_u64(&mut id, seed);
            put_u64(&mut id, produced);
            let txid: TxId = crypto::hash(&id).into();
            produced += 1;

            let picks = sample(
                &mut rng,
                spec.key_space as usize,
                spec.writes_per_tx as usize,
            );
            let mut write_set = Vec::with_capacity(picks.len());
            for k in picks.iter() {
                rng.fill_bytes(&mut value);
                let key = key_names[k].clone();
                match spec.mode {
                    Layout::Baseline => write_set.push(WriteEntry::inline(key, value.clone())),
                    Layout::Redactable => {
                        let p = crypto::make_preimage(&Salt::random(&mut rng), &value);
                        write_set.push(WriteEntry::hashed(key, crypto::hash(&p)));
                        entries.push(p);
                    }
                }
            }
            let payload = endorsement_payload(&txid, &[], &write_set);
            let endorsements = keys
                .endorsers
                .iter()
                .map(|k| IdentitySignature {
                    signer: k.public(),
                    signature: k.sign(&payload),
                })
                .collect();
            transactions.push(Transaction {
                txid,
                kind: TxKind::Endorsed,
                read_set: Vec::new(),
                write_set,
                endorsements,
                payload: Vec::new(),
            });
        }
        preimage_count += entries.len() as u64;
        let header = BlockHeader {
            number,
            prev_hash: prev,
            data_hash: compute_data_hash(&transactions),
        };
        let block = Block {
            orderer_signature: keys.orderer.sign(&header.encode()),
            header,
            transactions,
            preimages: PreimageSpace { entries },
            orderer: keys.orderer.public(),
            validity_flags: Vec::new(),
        };
        prev = block.hash();
        let enc = block.encode();
        bytes.extend_from_slice(&(enc.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&enc);
        number += 1;
    }
    Ok(GeneratedLedger {
        bytes,
        config: net.committer_config(),
        blocks: number,
        transactions: produced,
        preimages: preimage_count,
    })
}

/// One timed pass of a ledger through a fresh peer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommitRun {
    pub txs: u64,
    pub elapsed: Duration,
    /// Decoding is counted in `phases.validate`.
    pub phases: PhaseTimings,
}

impl CommitRun {
    pub fn tps(&self) -> f64 {
        self.txs as f64 / self.elapsed.as_secs_f64()
    }
}

/// Feeds every block of `ledger` through decode, validate and commit of a
/// new peer whose ledger file is created at `ledger_path` and removed
/// afterwards.
pub fn bench_commit(
    ledger: &[u8],
    config: &CommitterConfig,
    ledger_path: &Path,
) -> Result<CommitRun, WorkloadError> {
    let (records, _) = scan_ledger(ledger);
    let mut spans = Vec::with_capacity(records.len());
    for r in &records {
        let start = r.offset as usize;
        let len = u32::from_le_bytes(ledger[start - 4..start].try_into().unwrap()) as usize;
        spans.push(&ledger[start..start + len]);
    }
    drop(records);

    let _ = fs::remove_file(ledger_path);
    let store = FileBlockStore::open(ledger_path)?;
    let mut peer = Committer::new(config.clone(), store)?;
    let mut phases = PhaseTimings::default();
    let mut txs = 0u64;
    let start = Instant::now();
    for (i, raw) in spans.iter().enumerate() {
        let t = Instant::now();
        let block = Block::decode(raw).map_err(|_| WorkloadError::Decode(i as u64))?;
        let decode = t.elapsed();
        txs += block.transactions.len() as u64;
        let (_, mut p) = peer.commit_block_timed(block)?;
        p.validate += decode;
        phases += p;
    }
    let elapsed = start.elapsed();
    drop(peer);
    let _ = fs::remove_file(ledger_path);
    Ok(CommitRun {
        txs,
        elapsed,
        phases,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub block_size: u32,
    pub mode: Layout,
    pub reps: u32,
    pub tps_mean: f64,
    pub tps_stddev: f64,
    pub parse_validate_ms: f64,
    pub append_ms: f64,
    pub apply_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub spec: WorkloadSpec,
    pub seed: u64,
    pub block_sizes: Vec<u32>,
    pub modes: Vec<Layout>,
    pub reps: u32,
    pub work_dir: PathBuf,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every (block size, mode) pair `reps` times. Within a block size,
/// repetitions of the different modes are interleaved so that drift in
/// machine load affects them alike.
pub fn run_bench(plan: &BenchPlan) -> Result<Vec<BenchRow>, WorkloadError> {
    fs::create_dir_all(&plan.work_dir)?;
    let mut rows = Vec::new();
    for &size in &plan.block_sizes {
        let ledgers = plan
            .modes
            .iter()
            .map(|&mode| {
                let spec = WorkloadSpec {
                    txs_per_block: size,
                    mode,
                    ..plan.spec.clone()
                };
                generate_blocks(&spec, plan.seed)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut runs: Vec<Vec<CommitRun>> = vec![Vec::new(); plan.modes.len()];
        for rep in 0..plan.reps {
            for (m, g) in ledgers.iter().enumerate() {
                let path = plan.work_dir.join(format!(
                    "bench-{}-{}-{m}-{rep}.ledger",
                    std::process::id(),
                    size
                ));
                runs[m].push(bench_commit(&g.bytes, &g.config, &path)?);
            }
        }
        for (m, rs) in runs.iter().enumerate() {
            let tps: Vec<f64> = rs.iter().map(CommitRun::tps).collect();
            let (tps_mean, tps_stddev) = mean_std(&tps);
            let per_rep = |f: fn(&PhaseTimings) -> Duration| {
                rs.iter()
                    .map(|r| f(&r.phases).as_secs_f64() * 1e3)
                    .sum::<f64>()
                    / rs.len() as f64
            };
            rows.push(BenchRow {
                block_size: size,
                mode: plan.modes[m],
                reps: plan.reps,
                tps_mean,
                tps_stddev,
                parse_validate_ms: per_rep(|p| p.validate),
                append_ms: per_rep(|p| p.append),
                apply_ms: per_rep(|p| p.apply),
            });
        }
    }
    Ok(rows)
}

/// `1 - tps(redactable) / tps(baseline)` per block size, and over the sum
/// of mean throughputs across all block sizes.
pub fn overhead(rows: &[BenchRow]) -> (Vec<(u32, f64)>, Option<f64>) {
    let mut per_size = Vec::new();
    let (mut base_sum, mut red_sum) = (0.0, 0.0);
    for b in rows.iter().filter(|r| r.mode == Layout::Baseline) {
        if let Some(r) = rows
            .iter()
            .find(|r| r.mode == Layout::Redactable && r.block_size == b.block_size)
        {
            per_size.push((b.block_size, 1.0 - r.tps_mean / b.tps_mean));
            base_sum += b.tps_mean;
            red_sum += r.tps_mean;
        }
    }
    let total = (!per_size.is_empty()).then(|| 1.0 - red_sum / base_sum);
    (per_size, total)
}

pub fn write_csv<W: io::Write>(rows: &[BenchRow], out: W) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
