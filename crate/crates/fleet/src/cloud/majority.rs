//! Per-iteration version filter.
//!
//! Results of one iteration are grouped by the signature of the module that
//! produced them. The largest group is accepted. A tie for largest is
//! resolved in favour of the group carrying the cloud's current signature;
//! if no tied group carries it, the whole iteration is discarded. Accepted
//! output never mixes signatures.

use std::collections::BTreeMap;

use fleet_core::protocol::{ResultRecord, Signature};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    Accepted {
        signature: Signature,
        accepted: Vec<ResultRecord>,
        discarded: Vec<ResultRecord>,
    },
    /// Unresolvable tie; every record is discarded.
    Discarded {
        tied: Vec<Signature>,
        discarded: Vec<ResultRecord>,
    },
}

impl FilterOutcome {
    pub fn accepted_signature(&self) -> Option<&Signature> {
        match self {
            FilterOutcome::Accepted { signature, .. } => Some(signature),
            FilterOutcome::Discarded { .. } => None,
        }
    }

    pub fn accepted(&self) -> &[ResultRecord] {
        match self {
            FilterOutcome::Accepted { accepted, .. } => accepted,
            FilterOutcome::Discarded { .. } => &[],
        }
    }

    pub fn discarded(&self) -> &[ResultRecord] {
        match self {
            FilterOutcome::Accepted { discarded, .. }
            | FilterOutcome::Discarded { discarded, .. } => discarded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("majority filter needs at least one result")]
    EmptyBucket,
    #[error("bucket mixes iterations {0} and {1}")]
    MixedIterations(u64, u64),
}

/// Splits one iteration's results into the accepted signature group and the rest.
pub fn majority_filter(
    bucket: &[ResultRecord],
    current: &Signature,
) -> Result<FilterOutcome, FilterError> {
    let first = bucket.first().ok_or(FilterError::EmptyBucket)?;
    if let Some(other) = bucket.iter().find(|r| r.iteration != first.iteration) {
        return Err(FilterError::MixedIterations(
            first.iteration,
            other.iteration,
        ));
    }
    let mut sizes: BTreeMap<&Signature, usize> = BTreeMap::new();
    for r in bucket {
        *sizes.entry(&r.signature).or_default() += 1;
    }
    let largest = sizes.values().copied().max().unwrap_or(0);
    let tied: Vec<&Signature> = sizes
        .iter()
        .filter(|(_, &n)| n == largest)
        .map(|(s, _)| *s)
        .collect();
    let winner = match tied.as_slice() {
        [only] => Some((*only).clone()),
        many => many.iter().find(|s| **s == current).map(|s| (*s).clone()),
    };
    Ok(match winner {
        Some(signature) => {
            let (accepted, discarded) = bucket
                .iter()
                .cloned()
                .partition(|r| r.signature == signature);
            FilterOutcome::Accepted {
                signature,
                accepted,
                discarded,
            }
        }
        None => FilterOutcome::Discarded {
            tied: tied.into_iter().cloned().collect(),
            discarded: bucket.to_vec(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(client: &str, sig: &Signature) -> ResultRecord {
        ResultRecord {
            assignment_id: "a".into(),
            client_id: client.into(),
            iteration: 0,
            value: 1.0,
            signature: sig.clone(),
            produced_at: 0,
        }
    }

    fn sigs() -> (Signature, Signature) {
        (
            Signature::of_code("mean(xs)"),
            Signature::of_code("max(xs)"),
        )
    }

    #[test]
    fn majority_wins() {
        let (a, b) = sigs();
        let out = majority_filter(&[rec("x", &a), rec("y", &a), rec("z", &b)], &b).unwrap();
        assert_eq!(out.accepted_signature(), Some(&a));
        assert_eq!(out.accepted().len(), 2);
        assert_eq!(out.discarded().len(), 1);
        assert_eq!(out.discarded()[0].client_id, "z");
    }

    #[test]
    fn tie_prefers_current_signature() {
        let (a, b) = sigs();
        let out = majority_filter(&[rec("x", &a), rec("y", &b)], &b).unwrap();
        assert_eq!(out.accepted_signature(), Some(&b));
        assert_eq!(out.accepted()[0].client_id, "y");
    }

    #[test]
    fn unresolved_tie_discards_everything() {
        let (a, b) = sigs();
        let c = Signature::of_code("min(xs)");
        let out = majority_filter(&[rec("x", &a), rec("y", &b)], &c).unwrap();
        assert!(matches!(&out, FilterOutcome::Discarded { tied, .. } if tied.len() == 2));
        assert_eq!(out.discarded().len(), 2);
        assert!(out.accepted().is_empty());
    }

    #[test]
    fn unanimity() {
        let (a, _) = sigs();
        let out = majority_filter(&[rec("x", &a), rec("y", &a), rec("z", &a)], &a).unwrap();
        assert_eq!(out.accepted().len(), 3);
        assert!(out.discarded().is_empty());
    }

    #[test]
    fn preconditions() {
        let (a, _) = sigs();
        assert_eq!(majority_filter(&[], &a), Err(FilterError::EmptyBucket));
        let mut late = rec("y", &a);
        late.iteration = 1;
        assert_eq!(
            majority_filter(&[rec("x", &a), late], &a),
            Err(FilterError::MixedIterations(0, 1))
        );
    }
}
