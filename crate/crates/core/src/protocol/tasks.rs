use std::collections::BTreeSet;

use super::types::{AssignmentSpec, TaskSpec};
use super::ProtocolError;

/// Splits an assignment into one task per targeted client.
///
/// An empty `target_clients` targets every client in `fleet`. Duplicate
/// targets collapse to a single task.
pub fn derive_tasks(
    spec: &AssignmentSpec,
    fleet: &[String],
) -> Result<Vec<TaskSpec>, ProtocolError> {
    if fleet.is_empty() {
        return Err(ProtocolError::validation("fleet", "no connected clients"));
    }
    let targets: Vec<&String> = if spec.target_clients.is_empty() {
        fleet.iter().collect()
    } else {
        let unknown: Vec<String> = spec
            .target_clients
            .iter()
            .filter(|c| !fleet.contains(c))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(ProtocolError::UnknownClients(unknown));
        }
        let mut seen = BTreeSet::new();
        spec.target_clients
            .iter()
            .filter(|c| seen.insert(c.as_str()))
            .collect()
    };
    Ok(targets
        .into_iter()
        .map(|client| TaskSpec {
            assignment_id: spec.assignment_id.clone(),
            task_id: format!("{}/{}", spec.assignment_id, client),
            user_id: spec.user_id.clone(),
            client_id: client.clone(),
            method: spec.method,
            custom_module: spec.custom_module.clone(),
            window_size: spec.window_size,
            iterations: spec.iterations,
            params: spec.params.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::protocol::{BuiltinMethod, Iterations, Method};
    use proptest::prelude::*;

    fn fleet() -> Vec<String> {
        vec!["x".into(), "y".into(), "z".into()]
    }

    fn spec(targets: &[&str]) -> AssignmentSpec {
        AssignmentSpec {
            assignment_id: "a1".into(),
            user_id: "u".into(),
            method: Method::Builtin(BuiltinMethod::Mean),
            custom_module: None,
            offboard_module: None,
            target_clients: targets.iter().map(|s| s.to_string()).collect(),
            iterations: Iterations::Finite(2),
            window_size: 5,
            params: BTreeMap::from([("n".to_string(), 3.0)]),
        }
    }

    #[test]
    fn whole_fleet() {
        let tasks = derive_tasks(&spec(&[]), &fleet()).unwrap();
        let clients: Vec<_> = tasks.iter().map(|t| t.client_id.as_str()).collect();
        assert_eq!(clients, ["x", "y", "z"]);
    }

    #[test]
    fn subset() {
        let tasks = derive_tasks(&spec(&["x"]), &fleet()).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].client_id, "x");
    }

    #[test]
    fn unknown_target_is_named() {
        let err = derive_tasks(&spec(&["w", "x"]), &fleet()).unwrap_err();
        assert!(matches!(&err, ProtocolError::UnknownClients(ids) if ids == &["w".to_string()]));
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn empty_fleet_is_rejected() {
        assert!(derive_tasks(&spec(&[]), &[]).is_err());
    }

    proptest! {
        #[test]
        fn projection_preserves_cardinality(mask in proptest::collection::vec(any::<bool>(), 3), window in 1u64..100) {
            let f = fleet();
            let targets: Vec<&str> = f.iter().zip(&mask).filter(|(_, m)| **m).map(|(c, _)| c.as_str()).collect();
            let mut s = spec(&targets);
            s.window_size = window;
            let tasks = derive_tasks(&s, &f).unwrap();
            let expected = if targets.is_empty() { f.len() } else { targets.len() };
            prop_assert_eq!(tasks.len(), expected);
            let ids: BTreeSet<_> = tasks.iter().map(|t| t.task_id.clone()).collect();
            prop_assert_eq!(ids.len(), tasks.len());
            for t in &tasks {
                prop_assert_eq!(t.window_size, s.window_size);
                prop_assert_eq!(t.iterations, s.iterations);
                prop_assert_eq!(&t.params, &s.params);
                prop_assert_eq!(&t.assignment_id, &s.assignment_id);
            }
        }
    }
}
