//! A permissioned execute-order-validate ledger whose transactions carry
//! digests of salted values, so that the values themselves can later be
//! erased from the block file without breaking the hash chain.

pub mod audit;
pub mod chaincode;
pub mod codec;
pub mod committer;
pub mod crypto;
pub mod endorser;
pub mod model;
pub mod network;
pub mod ordering;
pub mod policy;
pub mod state;
pub mod store;
pub mod validation;
pub mod workload;

#[cfg(test)]
mod testutil;
