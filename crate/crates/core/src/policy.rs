//! t-of-n signature policies, used both for endorsements and for redaction
//! requests.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Decode;
use crate::crypto::{self, PublicKey};
use crate::model::{IdentitySignature, Layout, RedactionRequest, Transaction, TxKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub threshold: usize,
    pub members: Vec<PublicKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyConfigError {
    #[error("threshold {threshold} outside 1..={members}")]
    Threshold { threshold: usize, members: usize },
    #[error("duplicate policy member {0}")]
    DuplicateMember(PublicKey),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyFailure {
    #[error("signature by {0} does not verify")]
    BadSignature(PublicKey),
    #[error("{have} of {need} required member signatures")]
    Unmet { have: usize, need: usize },
}

impl ThresholdPolicy {
    pub fn new(threshold: usize, members: Vec<PublicKey>) -> Result<Self, PolicyConfigError> {
        let p = ThresholdPolicy { threshold, members };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<(), PolicyConfigError> {
        if self.threshold == 0 || self.threshold > self.members.len() {
            return Err(PolicyConfigError::Threshold {
                threshold: self.threshold,
                members: self.members.len(),
            });
        }
        let mut seen = HashSet::new();
        for m in &self.members {
            if !seen.insert(m) {
                return Err(PolicyConfigError::DuplicateMember(*m));
            }
        }
        Ok(())
    }

    pub fn is_member(&self, pk: &PublicKey) -> bool {
        self.members.contains(pk)
    }

    /// Every attached signature must verify; distinct members among the
    /// signers must reach the threshold. Signatures by non-members are
    /// verified but not counted.
    pub fn evaluate(&self, msg: &[u8], sigs: &[IdentitySignature]) -> Result<(), PolicyFailure> {
        let mut counted = HashSet::new();
        for s in sigs {
            if !crypto::verify(&s.signer, msg, &s.signature) {
                return Err(PolicyFailure::BadSignature(s.signer));
            }
            if self.is_member(&s.signer) {
                counted.insert(s.signer);
            }
        }
        if counted.len() < self.threshold {
            return Err(PolicyFailure::Unmet {
                have: counted.len(),
                need: self.threshold,
            });
        }
        Ok(())
    }
}

/// Policies every orderer and peer of a network agrees on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPolicies {
    pub layout: Layout,
    pub endorsement: ThresholdPolicy,
    /// Who may request redactions.
    pub redaction: ThresholdPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxCheckError {
    #[error("malformed transaction: {0}")]
    Malformed(String),
    #[error("redaction is not supported by the {0} layout")]
    RedactionUnsupported(Layout),
    #[error(transparent)]
    Policy(#[from] PolicyFailure),
}

impl ChannelPolicies {
    pub fn check(&self) -> Result<(), PolicyConfigError> {
        self.endorsement.check()?;
        self.redaction.check()
    }

    /// Structural and signature checks that need no chain state. Returns
    /// the decoded request for redaction transactions.
    pub fn check_transaction(
        &self,
        tx: &Transaction,
    ) -> Result<Option<RedactionRequest>, TxCheckError> {
        tx.check_well_formed()
            .map_err(|m| TxCheckError::Malformed(m.to_string()))?;
        match tx.kind {
            TxKind::Endorsed => {
                let layout_ok = tx.write_set.iter().all(|w| match self.layout {
                    Layout::Redactable => !matches!(w.value, crate::model::WriteValue::Inline(_)),
                    Layout::Baseline => !matches!(w.value, crate::model::WriteValue::Digest(_)),
                });
                if !layout_ok {
                    return Err(TxCheckError::Malformed(format!(
                        "write set does not match the {} layout",
                        self.layout
                    )));
                }
                self.endorsement
                    .evaluate(&tx.endorsement_payload(), &tx.endorsements)?;
                Ok(None)
            }
            TxKind::Redaction => {
                if self.layout == Layout::Baseline {
                    return Err(TxCheckError::RedactionUnsupported(self.layout));
                }
                let req = RedactionRequest::decode(&tx.payload)
                    .map_err(|e| TxCheckError::Malformed(format!("redaction payload: {e}")))?;
                if req.txid() != tx.txid {
                    return Err(TxCheckError::Malformed("redaction txid mismatch".into()));
                }
                self.redaction
                    .evaluate(&req.signing_payload(), &req.requesters)?;
                Ok(Some(req))
            }
            TxKind::Config => Err(TxCheckError::Malformed(
                "config transactions are not accepted".into(),
            )),
        }
    }
}
