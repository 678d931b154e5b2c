//! Checks over recorded output streams.

use std::collections::BTreeMap;

use fleet_core::protocol::{IterationOutput, Signature};
use serde::{Deserialize, Serialize};

/// Brute-force reference for the version filter: count every signature by
/// rescanning the whole bucket, take the largest, break ties on `current`.
pub fn oracle_accept(signatures: &[Signature], current: &Signature) -> Option<Signature> {
    let count = |s: &Signature| signatures.iter().filter(|x| *x == s).count();
    let best = signatures.iter().map(count).max()?;
    let mut tied: Vec<&Signature> = signatures.iter().filter(|s| count(s) == best).collect();
    tied.sort();
    tied.dedup();
    match tied.as_slice() {
        [only] => Some((*only).clone()),
        many => many.iter().find(|s| **s == current).map(|s| (*s).clone()),
    }
}

/// What one iteration looked like from the outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u64,
    /// Signature to number of results carrying it.
    pub groups: BTreeMap<Signature, u64>,
    pub accepted_signature: Option<Signature>,
    pub accepted_count: u64,
    pub discarded_count: u64,
    pub value: Option<f64>,
}

impl IterationTrace {
    pub fn of(o: &IterationOutput) -> Self {
        let mut groups = BTreeMap::new();
        for c in &o.contributions {
            *groups.entry(c.signature.clone()).or_insert(0) += 1;
        }
        Self {
            iteration: o.iteration,
            groups,
            accepted_signature: o.accepted_signature.clone(),
            accepted_count: o.accepted_count,
            discarded_count: o.discarded_count,
            value: o.value,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceCheck {
    /// Iterations whose accepted results carry more than one signature, or
    /// a signature other than the announced one.
    pub mixed: Vec<u64>,
    /// Iterations whose counts do not add up.
    pub miscounted: Vec<u64>,
    /// Iterations whose decision disagrees with the oracle under every
    /// candidate current signature.
    pub oracle_mismatch: Vec<u64>,
    /// Iterations missing or out of order.
    pub gaps: Vec<u64>,
}

impl TraceCheck {
    pub fn is_clean(&self) -> bool {
        self.mixed.is_empty()
            && self.miscounted.is_empty()
            && self.oracle_mismatch.is_empty()
            && self.gaps.is_empty()
    }
}

/// Checks the no-mixing invariant and the filter decision of every output.
/// `candidates` are the signatures the cloud may have held as current.
pub fn check_trace(outputs: &[IterationOutput], candidates: &[Signature]) -> TraceCheck {
    let mut check = TraceCheck::default();
    for (expected, o) in outputs.iter().enumerate() {
        if o.iteration != expected as u64 {
            check.gaps.push(expected as u64);
        }
        let accepted: Vec<&Signature> = o
            .contributions
            .iter()
            .filter(|c| c.accepted)
            .map(|c| &c.signature)
            .collect();
        let announced = o.accepted_signature.as_ref();
        if accepted.iter().any(|s| Some(*s) != announced) {
            check.mixed.push(o.iteration);
        }
        if accepted.len() as u64 != o.accepted_count
            || o.accepted_count + o.discarded_count != o.contributions.len() as u64
        {
            check.miscounted.push(o.iteration);
        }
        if !o.contributions.is_empty() {
            let sigs: Vec<Signature> = o
                .contributions
                .iter()
                .map(|c| c.signature.clone())
                .collect();
            let agrees = candidates
                .iter()
                .any(|cur| oracle_accept(&sigs, cur).as_ref() == announced);
            if !agrees {
                check.oracle_mismatch.push(o.iteration);
            }
        }
    }
    check
}

/// The `k` at which accepted signatures flip from `v1` to `v2`, when every
/// iteration before it carries `v1` and every one from it carries `v2`.
pub fn signature_boundary(
    outputs: &[IterationOutput],
    v1: &Signature,
    v2: &Signature,
) -> Option<u64> {
    let k = outputs
        .iter()
        .position(|o| o.accepted_signature.as_ref() != Some(v1))
        .unwrap_or(outputs.len());
    let clean = outputs[..k]
        .iter()
        .all(|o| o.accepted_signature.as_ref() == Some(v1))
        && outputs[k..]
            .iter()
            .all(|o| o.accepted_signature.as_ref() == Some(v2));
    clean.then_some(k as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_rules() {
        let a = Signature::of_code("a");
        let b = Signature::of_code("b");
        let c = Signature::of_code("c");
        assert_eq!(
            oracle_accept(&[a.clone(), a.clone(), b.clone()], &b),
            Some(a.clone())
        );
        assert_eq!(oracle_accept(&[a.clone(), b.clone()], &b), Some(b.clone()));
        assert_eq!(oracle_accept(&[a.clone(), b.clone()], &c), None);
        assert_eq!(oracle_accept(&[], &c), None);
    }
}
