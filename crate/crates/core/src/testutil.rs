//! Proptest strategies shared by unit tests.

use proptest::collection::vec;
use proptest::prelude::*;

use crate::crypto::{Digest, PublicKey, Signature};
use crate::model::*;

pub fn arb_bytes(max: usize) -> impl Strategy<Value = Vec<u8>> {
    vec(any::<u8>(), 0..max)
}

pub fn arb_digest() -> impl Strategy<Value = Digest> {
    any::<[u8; 32]>().prop_map(Digest)
}

pub fn arb_version() -> impl Strategy<Value = Version> {
    (any::<u64>(), any::<u32>()).prop_map(|(b, t)| Version::new(b, t))
}

pub fn arb_read() -> impl Strategy<Value = ReadEntry> {
    (arb_bytes(12), proptest::option::of(arb_version()))
        .prop_map(|(key, version)| ReadEntry { key, version })
}

pub fn arb_write() -> impl Strategy<Value = WriteEntry> {
    let value = prop_oneof![
        arb_digest().prop_map(WriteValue::Digest),
        Just(WriteValue::Delete),
        arb_bytes(40).prop_map(WriteValue::Inline),
    ];
    (arb_bytes(12), value).prop_map(|(key, value)| WriteEntry { key, value })
}

pub fn arb_idsig() -> impl Strategy<Value = IdentitySignature> {
    (any::<[u8; 32]>(), vec(any::<u8>(), 64)).prop_map(|(pk, sig)| IdentitySignature {
        signer: PublicKey(pk),
        signature: Signature(sig.try_into().unwrap()),
    })
}

pub fn arb_tx() -> impl Strategy<Value = Transaction> {
    (
        any::<[u8; 32]>(),
        prop_oneof![
            Just(TxKind::Endorsed),
            Just(TxKind::Redaction),
            Just(TxKind::Config)
        ],
        vec(arb_read(), 0..4),
        vec(arb_write(), 0..4),
        vec(arb_idsig(), 0..3),
        arb_bytes(30),
    )
        .prop_map(
            |(id, kind, read_set, write_set, endorsements, payload)| Transaction {
                txid: TxId(id),
                kind,
                read_set,
                write_set,
                endorsements,
                payload,
            },
        )
}

pub fn arb_flag() -> impl Strategy<Value = ValidityFlag> {
    prop_oneof![
        Just(ValidityFlag::Valid),
        Just(ValidityFlag::MvccInvalid),
        Just(ValidityFlag::PolicyInvalid)
    ]
}

pub fn arb_block() -> impl Strategy<Value = Block> {
    (
        any::<u64>(),
        arb_digest(),
        arb_digest(),
        vec(arb_tx(), 0..4),
        vec(arb_bytes(70), 0..6),
        any::<[u8; 32]>(),
        vec(any::<u8>(), 64),
        vec(arb_flag(), 0..4),
    )
        .prop_map(
            |(number, prev_hash, data_hash, transactions, entries, pk, sig, validity_flags)| {
                Block {
                    header: BlockHeader {
                        number,
                        prev_hash,
                        data_hash,
                    },
                    transactions,
                    preimages: PreimageSpace { entries },
                    orderer: PublicKey(pk),
                    orderer_signature: Signature(sig.try_into().unwrap()),
                    validity_flags,
                }
            },
        )
}
