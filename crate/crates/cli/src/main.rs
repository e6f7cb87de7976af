//! `redledger`: drives a file-backed single-process network (one orderer,
//! one committing peer), audits ledger files and runs the commit benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use redactable_ledger::audit::{rebuild_state, verify_chain};
use redactable_ledger::codec::{Decode, Encode};
use redactable_ledger::committer::{BlockValidationReport, Committer};
use redactable_ledger::crypto::PublicKey;
use redactable_ledger::endorser::TransactionEnvelope;
use redactable_ledger::model::{Layout, TxId, WriteValue};
use redactable_ledger::network::{BatchParams, DynStore, Network, NetworkConfig, NetworkKeys};
use redactable_ledger::ordering::{Orderer, PendingQueue};
use redactable_ledger::state::StateStore;
use redactable_ledger::store::{read_ledger_file, scan_ledger, FileBlockStore};
use redactable_ledger::workload::{overhead, run_bench, write_csv, BenchPlan, WorkloadSpec};

#[derive(Parser)]
#[command(
    name = "redledger",
    version,
    about = "Redactable permissioned ledger simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DirArg {
    /// Network directory created by `init`.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
}

#[derive(Args, Clone, Default)]
struct OrdererFlags {
    /// Cut a block once this many transactions are pending.
    #[arg(long)]
    max_txs: Option<u32>,
    /// Cut a block before pending envelopes exceed this many bytes.
    #[arg(long)]
    max_bytes: Option<u32>,
    /// Cut a block once the oldest pending envelope is this old.
    #[arg(long)]
    timeout_ms: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Create keys, configuration and empty ledgers in a new directory.
    Init {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long, default_value_t = 3)]
        endorsers: usize,
        #[arg(long, default_value_t = 2)]
        endorse_threshold: usize,
        #[arg(long, default_value_t = 1)]
        requesters: usize,
        #[arg(long, default_value_t = 1)]
        redact_threshold: usize,
        #[arg(long, default_value = "redactable")]
        layout: Layout,
        /// Derive keys from this seed instead of the OS generator.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        orderer: OrdererFlags,
    },
    /// Simulate a chaincode call, collect endorsements, write the envelope.
    Propose {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long, default_value = "client")]
        client: String,
        #[arg(long)]
        out: PathBuf,
        /// Chaincode id (`kv` or `asset`).
        chaincode: String,
        /// Chaincode arguments, e.g. `put key value`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// Submit envelope files to the orderer.
    Submit {
        #[command(flatten)]
        dir: DirArg,
        #[command(flatten)]
        orderer: OrdererFlags,
        #[arg(required = true)]
        envelopes: Vec<PathBuf>,
    },
    /// Endorse and submit a chaincode call in one step.
    Invoke {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long, default_value = "client")]
        client: String,
        chaincode: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// Cut every pending transaction into blocks and commit them.
    Commit {
        #[command(flatten)]
        dir: DirArg,
    },
    /// Request redaction of a committed transaction's values.
    Redact {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        txid: String,
        /// Comma-separated keys; all hashed writes of the target if absent.
        #[arg(long, value_delimiter = ',')]
        keys: Vec<String>,
        /// Leave the request pending instead of cutting it immediately.
        #[arg(long)]
        no_commit: bool,
    },
    /// Delete and redact every key under a prefix.
    ForgetUser {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        prefix: String,
    },
    /// Audit a ledger file.
    Verify {
        #[arg(long)]
        ledger: PathBuf,
        /// Comma-separated hex orderer keys, or a file with one per line.
        #[arg(long)]
        trust_anchors: String,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Replay a ledger file from scratch and print the resulting state.
    Rebuild {
        #[command(flatten)]
        dir: DirArg,
        /// Ledger to replay (default: the peer's).
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Save the rebuilt state as a snapshot.
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
    /// Commit-path throughput, redactable against baseline.
    Bench {
        /// TOML workload spec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// `redactable`, `baseline` or `both`.
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long, default_value_t = 5)]
        reps: u32,
        #[arg(long, value_delimiter = ',', default_value = "50,100,250,500")]
        block_sizes: Vec<u32>,
        #[arg(long)]
        total_txs: Option<u64>,
        /// CSV output (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scratch directory for ledger files.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Print blocks of a ledger file, or the peer's world state.
    Inspect {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        block: Option<u64>,
        /// Print the peer's world state instead of blocks.
        #[arg(long)]
        state: bool,
    },
}

struct Paths {
    config: PathBuf,
    keys: PathBuf,
    anchors: PathBuf,
    orderer_ledger: PathBuf,
    pending: PathBuf,
    peer_ledger: PathBuf,
    snapshot: PathBuf,
}

impl Paths {
    fn new(dir: &Path) -> Self {
        Paths {
            config: dir.join("network.toml"),
            keys: dir.join("keys.toml"),
            anchors: dir.join("trust-anchors.txt"),
            orderer_ledger: dir.join("orderer").join("ledger.bin"),
            pending: dir.join("orderer").join("pending.bin"),
            peer_ledger: dir.join("peer").join("ledger.bin"),
            snapshot: dir.join("peer").join("state.snap"),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn apply_flags(mut p: BatchParams, f: &OrdererFlags) -> BatchParams {
    if let Some(v) = f.max_txs {
        p.max_txs_per_block = v;
    }
    if let Some(v) = f.max_bytes {
        p.max_block_bytes = v;
    }
    if let Some(v) = f.timeout_ms {
        p.batch_timeout_ms = v;
    }
    p
}

fn open(dir: &Path, flags: &OrdererFlags) -> Result<Network> {
    let paths = Paths::new(dir);
    let mut config = NetworkConfig::load(&paths.config)
        .with_context(|| format!("{} is not an initialized network directory", dir.display()))?;
    config.ordering = apply_flags(config.ordering.clone(), flags);
    let keys = NetworkKeys::load(&paths.keys)?;

    let ostore: DynStore = Box::new(FileBlockStore::open(&paths.orderer_ledger)?);
    let mut orderer = Orderer::new(keys.orderer.clone(), config.ordering_config(), ostore)?;
    if paths.pending.exists() {
        let q = PendingQueue::decode(&fs::read(&paths.pending)?)
            .map_err(|e| anyhow!("pending queue: {e}"))?;
        for (txid, why) in orderer.restore_pending(q) {
            eprintln!("dropped pending {txid}: {why}");
        }
    }

    let pstore: DynStore = Box::new(FileBlockStore::open(&paths.peer_ledger)?);
    let snapshot = StateStore::load_snapshot(&paths.snapshot).unwrap_or_default();
    let peer = Committer::with_state(config.committer_config(), pstore, snapshot)?;

    let mut net = Network::from_parts(config, keys, orderer, vec![peer], rand::random())?;
    net.set_clock_ms(now_ms());
    Ok(net)
}

fn save(net: &Network, dir: &Path) -> Result<()> {
    let paths = Paths::new(dir);
    fs::write(&paths.pending, net.orderer().export_pending().encode())?;
    net.peer(0).state().save_snapshot(&paths.snapshot)?;
    Ok(())
}

fn report_json(r: &BlockValidationReport) -> Value {
    json!({
        "block": r.number,
        "verdict": format!("{:?}", r.verdict),
        "flags": r.flags.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>(),
        "redacted_txs": r.redacted_txs,
    })
}

fn print_reports(reports: &[BlockValidationReport]) {
    for r in reports {
        println!("{}", report_json(r));
    }
}

fn parse_anchors(arg: &str) -> Result<Vec<PublicKey>> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg)?
    } else {
        arg.replace(',', "\n")
    };
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| PublicKey::from_hex(l).map_err(|e| anyhow!("trust anchor {l:?}: {e}")))
        .collect()
}

fn show(bytes: &[u8]) -> Value {
    match std::str::from_utf8(bytes) {
        Ok(s) => json!(s),
        Err(_) => json!(format!("0x{}", hex::encode(bytes))),
    }
}

fn state_json(state: &StateStore) -> Value {
    let entries: Vec<Value> = state
        .entries()
        .into_iter()
        .map(|e| {
            json!({
                "key": show(&e.key),
                "value": e.value.as_deref().map(show),
                "version": e.version.to_string(),
                "status": e.status,
            })
        })
        .collect();
    json!({ "height": state.height(), "entries": entries })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Init {
            dir,
            endorsers,
            endorse_threshold,
            requesters,
            redact_threshold,
            layout,
            seed,
            orderer,
        } => {
            let paths = Paths::new(&dir.dir);
            if paths.config.exists() {
                bail!("{} already exists", paths.config.display());
            }
            fs::create_dir_all(dir.dir.join("orderer"))?;
            fs::create_dir_all(dir.dir.join("peer"))?;
            let keys = match seed {
                Some(s) => NetworkKeys::from_seed(s, endorsers, requesters),
                None => NetworkKeys::generate(&mut rand::rngs::OsRng, endorsers, requesters),
            };
            let params = apply_flags(BatchParams::default(), &orderer);
            let config = keys.config(layout, endorse_threshold, redact_threshold, params)?;
            config.ordering_config().check()?;
            config.save(&paths.config)?;
            keys.save(&paths.keys)?;
            fs::write(&paths.anchors, format!("{}\n", config.orderer.to_hex()))?;
            let net = open(&dir.dir, &OrdererFlags::default())?;
            save(&net, &dir.dir)?;
            println!("initialized {} network in {}", layout, dir.dir.display());
            println!("orderer {}", config.orderer);
        }
        Command::Propose {
            dir,
            client,
            out,
            chaincode,
            args,
        } => {
            let mut net = open(&dir.dir, &OrdererFlags::default())?;
            let args = args.into_iter().map(String::into_bytes).collect();
            let env = net.endorse(&chaincode, args, client.as_bytes())?;
            fs::write(&out, env.encode())?;
            println!("{}", env.txid());
        }
        Command::Submit {
            dir,
            orderer,
            envelopes,
        } => {
            let mut net = open(&dir.dir, &orderer)?;
            let mut reports = Vec::new();
            for path in &envelopes {
                let env = TransactionEnvelope::decode(&fs::read(path)?)
                    .map_err(|e| anyhow!("{}: {e}", path.display()))?;
                let id = env.txid();
                let r = net.submit(env);
                save(&net, &dir.dir)?;
                reports.extend(r.with_context(|| format!("submitting {id}"))?);
                println!("submitted {id}");
            }
            reports.extend(net.tick(0)?);
            save(&net, &dir.dir)?;
            print_reports(&reports);
        }
        Command::Invoke {
            dir,
            client,
            chaincode,
            args,
        } => {
            let mut net = open(&dir.dir, &OrdererFlags::default())?;
            let args = args.into_iter().map(String::into_bytes).collect();
            let env = net.endorse(&chaincode, args, client.as_bytes())?;
            let id = env.txid();
            let mut reports: Vec<_> = net.submit(env)?.into_iter().collect();
            reports.extend(net.tick(0)?);
            save(&net, &dir.dir)?;
            println!("submitted {id}");
            print_reports(&reports);
        }
        Command::Commit { dir } => {
            let mut net = open(&dir.dir, &OrdererFlags::default())?;
            let reports = net.flush()?;
            save(&net, &dir.dir)?;
            print_reports(&reports);
        }
        Command::Redact {
            dir,
            txid,
            keys,
            no_commit,
        } => {
            let mut net = open(&dir.dir, &OrdererFlags::default())?;
            let target = TxId::from_hex(&txid).map_err(|e| anyhow!("--txid: {e}"))?;
            let keys = keys.into_iter().map(String::into_bytes).collect();
            let id = match net.redact(target, keys) {
                Ok(id) => id,
                Err(e) => {
                    eprintln!("redaction rejected: {e}");
                    return Ok(ExitCode::from(2));
                }
            };
            let reports = if no_commit { Vec::new() } else { net.flush()? };
            save(&net, &dir.dir)?;
            println!("submitted {id}");
            print_reports(&reports);
        }
        Command::ForgetUser { dir, prefix } => {
            let mut net = open(&dir.dir, &OrdererFlags::default())?;
            let report = net.forget_user(prefix.as_bytes())?;
            save(&net, &dir.dir)?;
            println!(
                "{}",
                json!({
                    "keys": report.keys,
                    "deletion": report.deletion,
                    "targets": report.targets,
                    "redactions": report.redactions,
                })
            );
        }
        Command::Verify {
            ledger,
            trust_anchors,
            report_out,
        } => {
            let anchors = parse_anchors(&trust_anchors)?;
            let bytes = read_ledger_file(&ledger)
                .with_context(|| format!("reading {}", ledger.display()))?;
            let report = verify_chain(&bytes, &anchors);
            let text = serde_json::to_string_pretty(&report)?;
            match report_out {
                Some(p) => fs::write(p, text + "\n")?,
                None => println!("{text}"),
            }
            if report.passed {
                eprintln!(
                    "ok: {} blocks, {} redacted transactions",
                    report.height,
                    report.redacted_txids.len()
                );
            } else {
                eprintln!(
                    "FAILED at block {:?}{}",
                    report.first_failure,
                    report
                        .framing_error
                        .as_deref()
                        .map(|e| format!(" ({e})"))
                        .unwrap_or_default()
                );
                return Ok(ExitCode::from(1));
            }
        }
        Command::Rebuild {
            dir,
            ledger,
            state_out,
        } => {
            let paths = Paths::new(&dir.dir);
            let config = NetworkConfig::load(&paths.config)?;
            let ledger = ledger.unwrap_or(paths.peer_ledger);
            let bytes = read_ledger_file(&ledger)?;
            let (state, report) = rebuild_state(&bytes, &config.committer_config())?;
            if let Some(p) = state_out {
                state.save_snapshot(&p)?;
            }
            let mut out = state_json(&state);
            out["redacted_txids"] = json!(report.redacted_txids);
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Bench {
            spec,
            seed,
            mode,
            reps,
            block_sizes,
            total_txs,
            out,
            work_dir,
        } => {
            let mut spec = match spec {
                Some(p) => WorkloadSpec::from_toml(&fs::read_to_string(&p)?)?,
                None => WorkloadSpec::default(),
            };
            if let Some(n) = total_txs {
                spec.total_txs = n;
            }
            let modes = match mode.as_str() {
                "both" => vec![Layout::Baseline, Layout::Redactable],
                m => vec![m.parse::<Layout>().map_err(|e| anyhow!(e))?],
            };
            let tmp;
            let work_dir = match work_dir {
                Some(d) => d,
                None => {
                    tmp = std::env::temp_dir()
                        .join(format!("redledger-bench-{}", std::process::id()));
                    tmp.clone()
                }
            };
            let plan = BenchPlan {
                spec,
                seed,
                block_sizes,
                modes,
                reps,
                work_dir: work_dir.clone(),
            };
            let rows = run_bench(&plan);
            let _ = fs::remove_dir(&work_dir);
            let rows = rows?;
            match out {
                Some(p) => write_csv(&rows, fs::File::create(p)?)?,
                None => write_csv(&rows, std::io::stdout())?,
            }
            let (per_size, total) = overhead(&rows);
            for (size, o) in per_size {
                eprintln!("block size {size}: overhead {:.1}%", o * 100.0);
            }
            if let Some(t) = total {
                eprintln!("aggregate overhead {:.1}%", t * 100.0);
            }
        }
        Command::Inspect {
            dir,
            ledger,
            block,
            state,
        } => {
            let paths = Paths::new(&dir.dir);
            if state {
                let s = StateStore::load_snapshot(&paths.snapshot)?;
                println!("{}", serde_json::to_string_pretty(&state_json(&s))?);
                return Ok(ExitCode::SUCCESS);
            }
            let ledger = ledger.unwrap_or(paths.peer_ledger);
            let bytes = read_ledger_file(&ledger)?;
            let (records, framing) = scan_ledger(&bytes);
            for rec in records {
                if block.is_some_and(|n| n != rec.index) {
                    continue;
                }
                let b = match rec.block {
                    Ok(b) => b,
                    Err(e) => {
                        println!(
                            "{}",
                            json!({ "index": rec.index, "offset": rec.offset, "malformed": e.to_string() })
                        );
                        continue;
                    }
                };
                let txs: Vec<Value> = b
                    .transactions
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let writes: Vec<Value> = t
                            .write_set
                            .iter()
                            .map(|w| match &w.value {
                                WriteValue::Digest(d) => {
                                    json!({ "key": show(&w.key), "digest": d.to_hex() })
                                }
                                WriteValue::Inline(v) => {
                                    json!({ "key": show(&w.key), "value": show(v) })
                                }
                                WriteValue::Delete => {
                                    json!({ "key": show(&w.key), "delete": true })
                                }
                            })
                            .collect();
                        json!({
                            "txid": t.txid,
                            "kind": format!("{:?}", t.kind),
                            "flag": b.validity_flags.get(i).map(|f| format!("{f:?}")),
                            "reads": t.read_set.len(),
                            "writes": writes,
                        })
                    })
                    .collect();
                let zeroed = b
                    .preimages
                    .entries
                    .iter()
                    .filter(|e| redactable_ledger::model::PreimageSpace::is_zeroed(e))
                    .count();
                println!(
                    "{}",
                    json!({
                        "number": b.number(),
                        "offset": rec.offset,
                        "hash": b.hash().to_hex(),
                        "prev_hash": b.header.prev_hash.to_hex(),
                        "transactions": txs,
                        "preimages": b.preimages.entries.len(),
                        "zeroed_preimages": zeroed,
                    })
                );
            }
            if let Some(f) = framing {
                eprintln!("framing error: {f}");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
