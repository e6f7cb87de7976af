//! Transactions, blocks and the per-block preimage space.
//!
//! Transactions carry only the digests of written values. The salted values
//! themselves (`salt ‖ value`) sit in the block's [`PreimageSpace`], which,
//! together with the committer-assigned validity flags, is left out of both
//! the block's data hash and the orderer's signature. Zeroing a preimage
//! therefore never changes any hash in the chain.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{
    put_bool, put_bytes, put_list, put_u32, put_u64, put_u8, Decode, DecodeError, DecodeErrorKind,
    Encode, Reader,
};
use crate::crypto::{self, Digest, PublicKey, Signature, DIGEST_LEN};

/// Where written values live.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Digests in transactions, salted values in the preimage space.
    #[default]
    Redactable,
    /// Plaintext values inline in the write set; no preimage space. The
    /// append-only comparison point; redaction is unsupported.
    Baseline,
}

impl std::str::FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "redactable" => Ok(Layout::Redactable),
            "baseline" => Ok(Layout::Baseline),
            other => Err(format!(
                "unknown layout {other:?} (expected redactable|baseline)"
            )),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Redactable => "redactable",
            Layout::Baseline => "baseline",
        })
    }
}

/// 32-byte transaction identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TxId(pub [u8; 32]);

impl TxId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, crypto::CryptoError> {
        Ok(TxId(Digest::from_hex(s)?.0))
    }
}

impl From<Digest> for TxId {
    fn from(d: Digest) -> Self {
        TxId(d.0)
    }
}

impl TryFrom<String> for TxId {
    type Error = crypto::CryptoError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        TxId::from_hex(&s)
    }
}

impl From<TxId> for String {
    fn from(t: TxId) -> String {
        t.to_hex()
    }
}

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TxId({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Position of a committed write: (block number, transaction index).
/// Ordering is lexicographic, block first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Version {
    pub block: u64,
    pub tx: u32,
}

impl Version {
    pub fn new(block: u64, tx: u32) -> Self {
        Version { block, tx }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.block, self.tx)
    }
}

/// A key read during simulation. `version == None` means the key had never
/// been written in the snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReadEntry {
    pub key: Vec<u8>,
    pub version: Option<Version>,
}

/// What a write puts on chain for its value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum WriteValue {
    /// `hash(salt ‖ value)`; the preimage lives in the block's preimage space.
    Digest(Digest),
    /// Key deletion. Encoded with the all-zero digest, has no preimage.
    Delete,
    /// Plaintext value, used only by the append-only baseline layout.
    Inline(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WriteEntry {
    pub key: Vec<u8>,
    pub value: WriteValue,
}

impl WriteEntry {
    pub fn hashed(key: impl Into<Vec<u8>>, digest: Digest) -> Self {
        WriteEntry {
            key: key.into(),
            value: WriteValue::Digest(digest),
        }
    }

    pub fn delete(key: impl Into<Vec<u8>>) -> Self {
        WriteEntry {
            key: key.into(),
            value: WriteValue::Delete,
        }
    }

    pub fn inline(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        WriteEntry {
            key: key.into(),
            value: WriteValue::Inline(value.into()),
        }
    }

    pub fn is_delete(&self) -> bool {
        matches!(self.value, WriteValue::Delete)
    }

    /// The on-chain digest: the value digest, or all-zero for deletions.
    /// `None` for inline (baseline) writes.
    pub fn value_digest(&self) -> Option<Digest> {
        match self.value {
            WriteValue::Digest(d) => Some(d),
            WriteValue::Delete => Some(Digest::ZERO),
            WriteValue::Inline(_) => None,
        }
    }

    /// The digest that must be matched by a preimage, if any.
    pub fn preimage_digest(&self) -> Option<Digest> {
        match self.value {
            WriteValue::Digest(d) => Some(d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Endorsed,
    Redaction,
    Config,
}

impl TxKind {
    fn tag(self) -> u8 {
        match self {
            TxKind::Endorsed => 0,
            TxKind::Redaction => 1,
            TxKind::Config => 2,
        }
    }
}

/// A signature by an identity over some signed portion of a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdentitySignature {
    pub signer: PublicKey,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub txid: TxId,
    pub kind: TxKind,
    pub read_set: Vec<ReadEntry>,
    pub write_set: Vec<WriteEntry>,
    pub endorsements: Vec<IdentitySignature>,
    /// Kind-specific bytes; an encoded [`RedactionRequest`] for redactions.
    pub payload: Vec<u8>,
}

impl Transaction {
    /// Bytes endorsers sign: `txid ‖ read_set ‖ write_set`.
    pub fn endorsement_payload(&self) -> Vec<u8> {
        endorsement_payload(&self.txid, &self.read_set, &self.write_set)
    }

    pub fn check_well_formed(&self) -> Result<(), &'static str> {
        match self.kind {
            TxKind::Endorsed if self.write_set.is_empty() => {
                Err("endorsed transaction with empty write set")
            }
            TxKind::Redaction if !self.read_set.is_empty() || !self.write_set.is_empty() => {
                Err("redaction transaction with non-empty read or write set")
            }
            _ => Ok(()),
        }
    }

    pub fn redaction_request(&self) -> Option<Result<RedactionRequest, DecodeError>> {
        (self.kind == TxKind::Redaction).then(|| RedactionRequest::decode(&self.payload))
    }

    /// Number of preimages this transaction contributes to its block.
    pub fn preimage_count(&self) -> usize {
        self.write_set
            .iter()
            .filter(|w| w.preimage_digest().is_some())
            .count()
    }
}

pub fn endorsement_payload(
    txid: &TxId,
    read_set: &[ReadEntry],
    write_set: &[WriteEntry],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 48 * (read_set.len() + write_set.len()));
    txid.encode_to(&mut out);
    put_list(&mut out, read_set);
    put_list(&mut out, write_set);
    out
}

/// Instruction to zero the preimages of `keys` written by `target`.
/// An empty key list targets every hashed write of the transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RedactionRequest {
    pub target: TxId,
    pub keys: Vec<Vec<u8>>,
    pub nonce: u64,
    pub requesters: Vec<IdentitySignature>,
}

impl RedactionRequest {
    /// Bytes requesters sign: `target ‖ keys ‖ nonce`.
    pub fn signing_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.target.encode_to(&mut out);
        put_list(&mut out, &self.keys);
        put_u64(&mut out, self.nonce);
        out
    }

    pub fn txid(&self) -> TxId {
        crypto::hash_parts(&[b"redaction", &self.signing_payload()]).into()
    }

    pub fn targets_key(&self, key: &[u8]) -> bool {
        self.keys.is_empty() || self.keys.iter().any(|k| k == key)
    }
}

/// Salted values of all hashed writes in a block, in transaction order then
/// write order. A redacted entry is replaced by zeros of the same length.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreimageSpace {
    pub entries: Vec<Vec<u8>>,
}

impl PreimageSpace {
    pub fn is_zeroed(entry: &[u8]) -> bool {
        entry.iter().all(|&b| b == 0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        4 + self.entries.iter().map(|e| 4 + e.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidityFlag {
    Valid,
    MvccInvalid,
    PolicyInvalid,
}

impl ValidityFlag {
    fn tag(self) -> u8 {
        match self {
            ValidityFlag::Valid => 0,
            ValidityFlag::MvccInvalid => 1,
            ValidityFlag::PolicyInvalid => 2,
        }
    }
}

pub const HEADER_LEN: usize = 8 + DIGEST_LEN + DIGEST_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub number: u64,
    pub prev_hash: Digest,
    pub data_hash: Digest,
}

impl BlockHeader {
    pub fn hash(&self) -> Digest {
        compute_block_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    pub transactions: Vec<Transaction>,
    pub preimages: PreimageSpace,
    pub orderer: PublicKey,
    pub orderer_signature: Signature,
    /// Committer-local; empty until a committer validates the block.
    pub validity_flags: Vec<ValidityFlag>,
}

impl Block {
    pub fn number(&self) -> u64 {
        self.header.number
    }

    pub fn hash(&self) -> Digest {
        compute_block_hash(&self.header)
    }

    /// Bytes the orderer signs. The header commits to the transactions
    /// through `data_hash`; preimages and flags are not covered.
    pub fn signing_payload(&self) -> Vec<u8> {
        self.header.encode()
    }

    pub fn verify_signature(&self) -> bool {
        crypto::verify(
            &self.orderer,
            &self.signing_payload(),
            &self.orderer_signature,
        )
    }

    pub fn data_hash_matches(&self) -> bool {
        compute_data_hash(&self.transactions) == self.header.data_hash
    }

    /// Byte range `(offset, len)` of every preimage entry's contents within
    /// this block's encoding.
    pub fn preimage_entry_ranges(&self) -> Vec<(usize, usize)> {
        let mut txs = Vec::new();
        put_list(&mut txs, &self.transactions);
        let mut offset = HEADER_LEN + txs.len() + 4;
        self.preimages
            .entries
            .iter()
            .map(|e| {
                offset += 4;
                let range = (offset, e.len());
                offset += e.len();
                range
            })
            .collect()
    }
}

/// `hash(encode(transactions))`; excludes preimages and validity flags.
pub fn compute_data_hash(transactions: &[Transaction]) -> Digest {
    let mut out = Vec::new();
    put_list(&mut out, transactions);
    crypto::hash(&out)
}

pub fn compute_block_hash(header: &BlockHeader) -> Digest {
    crypto::hash(&header.encode())
}

// ---- encoding -------------------------------------------------------------

impl Encode for TxId {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
}

impl Decode for TxId {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(TxId(r.array()?))
    }
}

impl Encode for Version {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u64(out, self.block);
        put_u32(out, self.tx);
    }
}

impl Decode for Version {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Version {
            block: r.u64()?,
            tx: r.u32()?,
        })
    }
}

impl Encode for ReadEntry {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_bytes(out, &self.key);
        match self.version {
            None => put_bool(out, false),
            Some(v) => {
                put_bool(out, true);
                v.encode_to(out);
            }
        }
    }
}

impl Decode for ReadEntry {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let key = r.byte_vec()?;
        let version = if r.bool()? {
            Some(Version::decode_from(r)?)
        } else {
            None
        };
        Ok(ReadEntry { key, version })
    }
}

const WRITE_DIGEST: u8 = 0;
const WRITE_DELETE: u8 = 1;
const WRITE_INLINE: u8 = 2;

impl Encode for WriteEntry {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_bytes(out, &self.key);
        match &self.value {
            WriteValue::Digest(d) => {
                put_u8(out, WRITE_DIGEST);
                d.encode_to(out);
            }
            WriteValue::Delete => {
                put_u8(out, WRITE_DELETE);
                Digest::ZERO.encode_to(out);
            }
            WriteValue::Inline(v) => {
                put_u8(out, WRITE_INLINE);
                put_bytes(out, v);
            }
        }
    }
}

impl Decode for WriteEntry {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let key = r.byte_vec()?;
        let at = r.position();
        let value = match r.u8()? {
            WRITE_DIGEST => WriteValue::Digest(Digest::decode_from(r)?),
            WRITE_DELETE => {
                if !Digest::decode_from(r)?.is_zero() {
                    return Err(DecodeError {
                        offset: at + 1,
                        kind: DecodeErrorKind::Invalid("deletion digest must be all-zero"),
                    });
                }
                WriteValue::Delete
            }
            WRITE_INLINE => WriteValue::Inline(r.byte_vec()?),
            tag => {
                return Err(DecodeError {
                    offset: at,
                    kind: DecodeErrorKind::InvalidTag {
                        what: "write value",
                        tag,
                    },
                })
            }
        };
        Ok(WriteEntry { key, value })
    }
}

impl Encode for TxKind {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u8(out, self.tag());
    }
}

impl Decode for TxKind {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(TxKind::Endorsed),
            1 => Ok(TxKind::Redaction),
            2 => Ok(TxKind::Config),
            tag => Err(DecodeError {
                offset: r.position() - 1,
                kind: DecodeErrorKind::InvalidTag {
                    what: "transaction kind",
                    tag,
                },
            }),
        }
    }
}

impl Encode for IdentitySignature {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.signer.encode_to(out);
        self.signature.encode_to(out);
    }
}

impl Decode for IdentitySignature {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(IdentitySignature {
            signer: PublicKey::decode_from(r)?,
            signature: Signature::decode_from(r)?,
        })
    }
}

impl Encode for Transaction {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.txid.encode_to(out);
        self.kind.encode_to(out);
        put_list(out, &self.read_set);
        put_list(out, &self.write_set);
        put_list(out, &self.endorsements);
        put_bytes(out, &self.payload);
    }
}

impl Decode for Transaction {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Transaction {
            txid: TxId::decode_from(r)?,
            kind: TxKind::decode_from(r)?,
            read_set: r.list(5)?,
            write_set: r.list(5)?,
            endorsements: r.list(96)?,
            payload: r.byte_vec()?,
        })
    }
}

impl Encode for RedactionRequest {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.target.encode_to(out);
        put_list(out, &self.keys);
        put_u64(out, self.nonce);
        put_list(out, &self.requesters);
    }
}

impl Decode for RedactionRequest {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(RedactionRequest {
            target: TxId::decode_from(r)?,
            keys: r.list(4)?,
            nonce: r.u64()?,
            requesters: r.list(96)?,
        })
    }
}

impl Encode for PreimageSpace {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_list(out, &self.entries);
    }
}

impl Decode for PreimageSpace {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(PreimageSpace {
            entries: r.list(4)?,
        })
    }
}

impl Encode for ValidityFlag {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u8(out, self.tag());
    }
}

impl Decode for ValidityFlag {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(ValidityFlag::Valid),
            1 => Ok(ValidityFlag::MvccInvalid),
            2 => Ok(ValidityFlag::PolicyInvalid),
            tag => Err(DecodeError {
                offset: r.position() - 1,
                kind: DecodeErrorKind::InvalidTag {
                    what: "validity flag",
                    tag,
                },
            }),
        }
    }
}

impl Encode for BlockHeader {
    fn encode_to(&self, out: &mut Vec<u8>) {
        put_u64(out, self.number);
        self.prev_hash.encode_to(out);
        self.data_hash.encode_to(out);
    }
}

impl Decode for BlockHeader {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(BlockHeader {
            number: r.u64()?,
            prev_hash: Digest::decode_from(r)?,
            data_hash: Digest::decode_from(r)?,
        })
    }
}

impl Encode for Block {
    fn encode_to(&self, out: &mut Vec<u8>) {
        self.header.encode_to(out);
        put_list(out, &self.transactions);
        self.preimages.encode_to(out);
        self.orderer.encode_to(out);
        self.orderer_signature.encode_to(out);
        put_list(out, &self.validity_flags);
    }
}

impl Decode for Block {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Block {
            header: BlockHeader::decode_from(r)?,
            transactions: r.list(32 + 1 + 4 * 4)?,
            preimages: PreimageSpace::decode_from(r)?,
            orderer: PublicKey::decode_from(r)?,
            orderer_signature: Signature::decode_from(r)?,
            validity_flags: r.list(1)?,
        })
    }
}
