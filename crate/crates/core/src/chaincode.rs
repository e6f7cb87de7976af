//! Deterministic in-process chaincode and the simulation context it runs in.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::model::ReadEntry;
use crate::state::{KeyStatus, StateView};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChaincodeError {
    #[error("read of crippled key {}", String::from_utf8_lossy(.0))]
    CrippledKey(Vec<u8>),
    #[error("chaincode failed: {0}")]
    Failed(String),
}

/// Records reads against a committed snapshot and buffers writes. Reads see
/// the snapshot only, not this simulation's own writes.
pub struct SimContext<'a> {
    state: &'a dyn StateView,
    reads: Vec<ReadEntry>,
    writes: Vec<(Vec<u8>, Option<Vec<u8>>)>,
}

impl<'a> SimContext<'a> {
    pub fn new(state: &'a dyn StateView) -> Self {
        SimContext {
            state,
            reads: Vec::new(),
            writes: Vec::new(),
        }
    }

    /// Reading a crippled key aborts the whole simulation.
    pub fn get_state(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, ChaincodeError> {
        let entry = self.state.get(key);
        if let Some(e) = entry {
            if e.status == KeyStatus::Crippled {
                return Err(ChaincodeError::CrippledKey(key.to_vec()));
            }
        }
        if !self.reads.iter().any(|r| r.key == key) {
            self.reads.push(ReadEntry {
                key: key.to_vec(),
                version: entry.map(|e| e.version),
            });
        }
        Ok(entry.and_then(|e| e.value.clone()))
    }

    pub fn put_state(&mut self, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) {
        self.buffer(key.into(), Some(value.into()));
    }

    pub fn del_state(&mut self, key: impl Into<Vec<u8>>) {
        self.buffer(key.into(), None);
    }

    fn buffer(&mut self, key: Vec<u8>, value: Option<Vec<u8>>) {
        match self.writes.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.writes.push((key, value)),
        }
    }

    /// Reads in first-read order; writes in first-write order, last value
    /// wins. `None` is a deletion.
    pub fn into_sets(self) -> (Vec<ReadEntry>, Vec<(Vec<u8>, Option<Vec<u8>>)>) {
        (self.reads, self.writes)
    }
}

pub trait Chaincode: Send + Sync {
    fn invoke(&self, ctx: &mut SimContext<'_>, args: &[Vec<u8>]) -> Result<(), ChaincodeError>;
}

impl<F> Chaincode for F
where
    F: Fn(&mut SimContext<'_>, &[Vec<u8>]) -> Result<(), ChaincodeError> + Send + Sync,
{
    fn invoke(&self, ctx: &mut SimContext<'_>, args: &[Vec<u8>]) -> Result<(), ChaincodeError> {
        self(ctx, args)
    }
}

#[derive(Clone, Default)]
pub struct ChaincodeRegistry {
    codes: HashMap<String, Arc<dyn Chaincode>>,
}

impl ChaincodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the built-in `kv` and `asset` chaincodes.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register("kv", KvChaincode);
        r.register("asset", AssetChaincode);
        r
    }

    pub fn register(&mut self, id: impl Into<String>, code: impl Chaincode + 'static) {
        self.codes.insert(id.into(), Arc::new(code));
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn Chaincode>> {
        self.codes.get(id)
    }
}

fn arg<'a>(args: &'a [Vec<u8>], i: usize, what: &str) -> Result<&'a [u8], ChaincodeError> {
    args.get(i)
        .map(Vec::as_slice)
        .ok_or_else(|| ChaincodeError::Failed(format!("missing argument {i} ({what})")))
}

/// Plain key-value operations.
///
/// * `put k1 v1 [k2 v2 ...]`: blind writes.
/// * `del k1 [k2 ...]`: deletions.
/// * `get k1 [k2 ...]`: reads only (fails: nothing written).
/// * `rmw k v`: reads `k`, then writes `v` to it.
pub struct KvChaincode;

impl Chaincode for KvChaincode {
    fn invoke(&self, ctx: &mut SimContext<'_>, args: &[Vec<u8>]) -> Result<(), ChaincodeError> {
        let op = arg(args, 0, "operation")?;
        let rest = &args[1..];
        match op {
            b"put" => {
                if rest.is_empty() || !rest.len().is_multiple_of(2) {
                    return Err(ChaincodeError::Failed("put takes key/value pairs".into()));
                }
                for kv in rest.chunks(2) {
                    ctx.put_state(kv[0].clone(), kv[1].clone());
                }
            }
            b"del" => {
                if rest.is_empty() {
                    return Err(ChaincodeError::Failed("del takes at least one key".into()));
                }
                for k in rest {
                    ctx.del_state(k.clone());
                }
            }
            b"get" => {
                for k in rest {
                    ctx.get_state(k)?;
                }
            }
            b"rmw" => {
                let k = arg(rest, 0, "key")?;
                let v = arg(rest, 1, "value")?;
                ctx.get_state(k)?;
                ctx.put_state(k.to_vec(), v.to_vec());
            }
            other => {
                return Err(ChaincodeError::Failed(format!(
                    "unknown kv operation {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
        Ok(())
    }
}

/// Asset ownership.
///
/// * `create asset owner`: `owner/<asset>` must be unset.
/// * `transfer asset from to`: `owner/<asset>` must equal `from`.
///
/// Both write `owner/<asset>` and a per-party record under
/// `party/<name>/<asset>`, so everything about one party sits under a common
/// key prefix.
pub struct AssetChaincode;

pub fn owner_key(asset: &[u8]) -> Vec<u8> {
    [b"owner/".as_slice(), asset].concat()
}

pub fn party_key(party: &[u8], asset: &[u8]) -> Vec<u8> {
    [b"party/".as_slice(), party, b"/", asset].concat()
}

impl Chaincode for AssetChaincode {
    fn invoke(&self, ctx: &mut SimContext<'_>, args: &[Vec<u8>]) -> Result<(), ChaincodeError> {
        match arg(args, 0, "operation")? {
            b"create" => {
                let asset = arg(args, 1, "asset")?;
                let owner = arg(args, 2, "owner")?;
                if ctx.get_state(&owner_key(asset))?.is_some() {
                    return Err(ChaincodeError::Failed("asset already exists".into()));
                }
                ctx.put_state(owner_key(asset), owner.to_vec());
                ctx.put_state(party_key(owner, asset), [b"created ", asset].concat());
            }
            b"transfer" => {
                let asset = arg(args, 1, "asset")?;
                let from = arg(args, 2, "from")?;
                let to = arg(args, 3, "to")?;
                let current = ctx.get_state(&owner_key(asset))?;
                if current.as_deref() != Some(from) {
                    return Err(ChaincodeError::Failed(format!(
                        "{} does not own {}",
                        String::from_utf8_lossy(from),
                        String::from_utf8_lossy(asset)
                    )));
                }
                ctx.put_state(owner_key(asset), to.to_vec());
                ctx.put_state(
                    party_key(from, asset),
                    [b"sold ", asset, b" to ", to].concat(),
                );
                ctx.put_state(
                    party_key(to, asset),
                    [b"bought ", asset, b" from ", from].concat(),
                );
            }
            other => {
                return Err(ChaincodeError::Failed(format!(
                    "unknown asset operation {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
        Ok(())
    }
}
