//! Ephemeral per-assignment handler.
//!
//! The handler owns the result buckets of one assignment. It is a plain
//! state machine: the cloud router feeds it results and clock readings and
//! forwards the events it returns. An iteration closes when every pending
//! client has answered (a result or an error) or when its timeout expires,
//! whichever comes first. Iterations close strictly in order.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use fleet_core::executor::{Executor, ModuleStore, WindowBatch};
use fleet_core::protocol::{
    AssignmentSpec, Contribution, IterationOutput, Method, ResultRecord, Signature, StatusRecord,
    StatusState,
};
use tracing::warn;

use super::majority::{majority_filter, FilterOutcome};

/// Events produced by a handler, in emission order.
#[derive(Debug, Clone, PartialEq)]
pub enum HandlerEvent {
    Output(IterationOutput),
    Status(StatusRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collected {
    Accepted,
    /// The iteration already closed.
    Late,
    /// A second result from the same client for the same iteration.
    Duplicate,
    /// The sender has no task in this assignment.
    UnknownClient,
    /// Iteration index beyond the assignment's length.
    OutOfRange,
}

#[derive(Debug)]
struct Bucket {
    records: Vec<ResultRecord>,
    responded: BTreeSet<String>,
    failures: Vec<String>,
    opened_at: Instant,
}

impl Bucket {
    fn new(now: Instant) -> Self {
        Self {
            records: Vec::new(),
            responded: BTreeSet::new(),
            failures: Vec::new(),
            opened_at: now,
        }
    }
}

/// What the handler needs to run off-board modules.
pub struct Offboard<'a> {
    pub store: &'a ModuleStore,
    pub executor: &'a dyn Executor,
}

pub struct AssignmentHandler {
    spec: AssignmentSpec,
    pending: BTreeSet<String>,
    lost: BTreeSet<String>,
    buckets: BTreeMap<u64, Bucket>,
    next_iteration: u64,
    current_signature: Signature,
    iteration_timeout: Duration,
    last_close: Instant,
    state: StatusState,
}

impl AssignmentHandler {
    pub fn new(
        spec: AssignmentSpec,
        pending: BTreeSet<String>,
        current_signature: Signature,
        iteration_timeout: Duration,
        now: Instant,
    ) -> Self {
        Self {
            spec,
            pending,
            lost: BTreeSet::new(),
            buckets: BTreeMap::new(),
            next_iteration: 0,
            current_signature,
            iteration_timeout,
            last_close: now,
            state: StatusState::Running,
        }
    }

    pub fn spec(&self) -> &AssignmentSpec {
        &self.spec
    }

    pub fn pending(&self) -> &BTreeSet<String> {
        &self.pending
    }

    pub fn state(&self) -> StatusState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.is_terminal()
    }

    pub fn next_iteration(&self) -> u64 {
        self.next_iteration
    }

    pub fn current_signature(&self) -> &Signature {
        &self.current_signature
    }

    /// The cloud learned of a newer deployment of this assignment's module.
    pub fn set_current_signature(&mut self, signature: Signature) {
        self.current_signature = signature;
    }

    /// Number of results buffered for `iteration`.
    pub fn bucket_len(&self, iteration: u64) -> usize {
        self.buckets.get(&iteration).map_or(0, |b| b.records.len())
    }

    pub fn collect_result(&mut self, record: ResultRecord, now: Instant) -> Collected {
        if !self.pending.contains(&record.client_id) {
            return Collected::UnknownClient;
        }
        if !self.spec.iterations.contains(record.iteration) {
            return Collected::OutOfRange;
        }
        if record.iteration < self.next_iteration || self.is_finished() {
            return Collected::Late;
        }
        let bucket = self
            .buckets
            .entry(record.iteration)
            .or_insert_with(|| Bucket::new(now));
        if !bucket.responded.insert(record.client_id.clone()) {
            return Collected::Duplicate;
        }
        bucket.records.push(record);
        Collected::Accepted
    }

    /// A client reported that it could not produce a result for `iteration`.
    pub fn record_failure(
        &mut self,
        client_id: &str,
        iteration: u64,
        reason: &str,
        now: Instant,
    ) -> Collected {
        if !self.pending.contains(client_id) {
            return Collected::UnknownClient;
        }
        if !self.spec.iterations.contains(iteration) {
            return Collected::OutOfRange;
        }
        if iteration < self.next_iteration || self.is_finished() {
            return Collected::Late;
        }
        let bucket = self
            .buckets
            .entry(iteration)
            .or_insert_with(|| Bucket::new(now));
        if !bucket.responded.insert(client_id.to_owned()) {
            return Collected::Duplicate;
        }
        bucket.failures.push(format!("{client_id}: {reason}"));
        Collected::Accepted
    }

    /// Marks a client as unreachable: iterations stop waiting for it.
    pub fn client_lost(&mut self, client_id: &str) {
        if self.pending.contains(client_id) {
            self.lost.insert(client_id.to_owned());
        }
    }

    pub fn client_regained(&mut self, client_id: &str) {
        self.lost.remove(client_id);
    }

    /// When the next open iteration times out.
    pub fn deadline(&self) -> Option<Instant> {
        if self.is_finished() {
            return None;
        }
        let base = self
            .buckets
            .get(&self.next_iteration)
            .map_or(self.last_close, |b| b.opened_at);
        Some(base + self.iteration_timeout)
    }

    fn is_complete(&self, iteration: u64) -> bool {
        let Some(bucket) = self.buckets.get(&iteration) else {
            return false;
        };
        self.pending
            .iter()
            .all(|c| bucket.responded.contains(c) || self.lost.contains(c))
            && !bucket.responded.is_empty()
    }

    /// Closes every iteration that is ready at `now`, in order.
    pub fn poll(&mut self, now: Instant, offboard: &Offboard<'_>) -> Vec<HandlerEvent> {
        let mut events = Vec::new();
        while !self.is_finished() {
            let ready =
                self.is_complete(self.next_iteration) || self.deadline().is_some_and(|d| now >= d);
            if !ready {
                break;
            }
            let iteration = self.next_iteration;
            let bucket = self
                .buckets
                .remove(&iteration)
                .unwrap_or_else(|| Bucket::new(now));
            self.close(iteration, bucket, offboard, &mut events);
            self.next_iteration += 1;
            self.last_close = now;
            if self.spec.iterations.is_last(iteration) {
                events.push(self.finish(
                    StatusState::Completed,
                    format!("{} iterations emitted", iteration + 1),
                ));
            }
        }
        events
    }

    fn close(
        &self,
        iteration: u64,
        bucket: Bucket,
        offboard: &Offboard<'_>,
        events: &mut Vec<HandlerEvent>,
    ) {
        let received = bucket.records.len() as u64;
        let missing_count = self.pending.len() as u64 - received;
        let mut output = IterationOutput {
            assignment_id: self.spec.assignment_id.clone(),
            iteration,
            accepted_signature: None,
            accepted_count: 0,
            discarded_count: 0,
            missing_count,
            value: None,
            cloud_signature: None,
            contributions: Vec::new(),
            error: None,
        };
        if bucket.records.is_empty() {
            output.error = Some(if bucket.failures.is_empty() {
                "no results before the iteration timeout".to_owned()
            } else {
                format!("no results: {}", bucket.failures.join("; "))
            });
            events.push(HandlerEvent::Output(output));
            return;
        }
        let outcome = match majority_filter(&bucket.records, &self.current_signature) {
            Ok(o) => o,
            Err(e) => {
                output.error = Some(e.to_string());
                events.push(HandlerEvent::Output(output));
                return;
            }
        };
        let mut contributions: Vec<Contribution> = bucket
            .records
            .iter()
            .map(|r| Contribution {
                client_id: r.client_id.clone(),
                signature: r.signature.clone(),
                value: r.value,
                accepted: outcome.accepted_signature() == Some(&r.signature),
            })
            .collect();
        contributions.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        output.contributions = contributions;
        output.discarded_count = outcome.discarded().len() as u64;
        match &outcome {
            FilterOutcome::Discarded { tied, .. } => {
                let tied: Vec<_> = tied.iter().map(|s| s.short().to_owned()).collect();
                let detail = format!(
                    "iteration {iteration}: tie between {} with no current signature",
                    tied.join(", ")
                );
                output.error = Some(detail.clone());
                events.push(HandlerEvent::Status(StatusRecord::assignment(
                    &self.spec.assignment_id,
                    StatusState::IterationDiscarded,
                    detail,
                )));
            }
            FilterOutcome::Accepted { signature, .. } => {
                output.accepted_signature = Some(signature.clone());
                output.accepted_count = outcome.accepted().len() as u64;
                // ordered by client id so the reduction is reproducible
                let values: Vec<f64> = output
                    .contributions
                    .iter()
                    .filter(|c| c.accepted)
                    .map(|c| c.value)
                    .collect();
                match self.aggregate(iteration, values, offboard) {
                    Ok((value, cloud_signature)) => {
                        output.value = Some(value);
                        output.cloud_signature = cloud_signature;
                    }
                    Err(e) => {
                        warn!(assignment = %self.spec.assignment_id, iteration, "off-board step failed: {e}");
                        output.error = Some(format!("FAILED: {e}"));
                    }
                }
            }
        }
        events.push(HandlerEvent::Output(output));
    }

    fn aggregate(
        &self,
        iteration: u64,
        values: Vec<f64>,
        offboard: &Offboard<'_>,
    ) -> Result<(f64, Option<Signature>), String> {
        match &self.spec.offboard_module {
            None => {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                Ok((mean, None))
            }
            Some(name) => {
                let module = offboard
                    .store
                    .load_module(&self.spec.user_id, name)
                    .map_err(|e| e.to_string())?;
                let batch = WindowBatch {
                    assignment_id: self.spec.assignment_id.clone(),
                    iteration,
                    values,
                };
                let result = offboard
                    .executor
                    .execute(&module, &batch, &self.spec.params)
                    .map_err(|e| e.to_string())?;
                Ok((result.value, Some(result.signature)))
            }
        }
    }

    pub fn cancel(&mut self, reason: &str) -> Option<HandlerEvent> {
        if self.is_finished() {
            return None;
        }
        Some(self.finish(StatusState::Cancelled, reason.to_owned()))
    }

    fn finish(&mut self, state: StatusState, detail: String) -> HandlerEvent {
        self.state = state;
        self.buckets.clear();
        HandlerEvent::Status(StatusRecord::assignment(
            &self.spec.assignment_id,
            state,
            detail,
        ))
    }
}

/// Signature a handler starts with: the builtin tag, or whatever the cloud
/// currently knows for the user's custom module.
pub fn initial_signature(spec: &AssignmentSpec, known: Option<Signature>) -> Signature {
    match spec.method {
        Method::Builtin(b) => b.signature(),
        Method::Custom => known.unwrap_or_else(|| Signature::builtin("unknown")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fleet_core::executor::ReferenceExecutor;
    use fleet_core::protocol::{BuiltinMethod, CodeModule, Iterations};

    struct Fixture {
        _dir: tempfile::TempDir,
        store: ModuleStore,
        executor: ReferenceExecutor,
    }

    impl Fixture {
        fn new() -> Self {
            let dir = tempfile::tempdir().unwrap();
            let store = ModuleStore::open(dir.path()).unwrap();
            Self {
                _dir: dir,
                store,
                executor: ReferenceExecutor::default(),
            }
        }

        fn offboard(&self) -> Offboard<'_> {
            Offboard {
                store: &self.store,
                executor: &self.executor,
            }
        }
    }

    fn spec(iterations: u64) -> AssignmentSpec {
        AssignmentSpec {
            assignment_id: "a1".into(),
            user_id: "u1".into(),
            method: Method::Builtin(BuiltinMethod::Mean),
            custom_module: None,
            offboard_module: None,
            target_clients: vec![],
            iterations: Iterations::Finite(iterations),
            window_size: 4,
            params: Default::default(),
        }
    }

    fn clients() -> BTreeSet<String> {
        ["x", "y", "z"].into_iter().map(String::from).collect()
    }

    fn rec(client: &str, iteration: u64, value: f64, sig: &Signature) -> ResultRecord {
        ResultRecord {
            assignment_id: "a1".into(),
            client_id: client.into(),
            iteration,
            value,
            signature: sig.clone(),
            produced_at: 0,
        }
    }

    fn outputs(events: &[HandlerEvent]) -> Vec<&IterationOutput> {
        events
            .iter()
            .filter_map(|e| match e {
                HandlerEvent::Output(o) => Some(o),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn closes_when_all_clients_answer() {
        let fx = Fixture::new();
        let sig = BuiltinMethod::Mean.signature();
        let t0 = Instant::now();
        let mut h =
            AssignmentHandler::new(spec(2), clients(), sig.clone(), Duration::from_secs(10), t0);
        assert_eq!(
            h.collect_result(rec("x", 0, 2.0, &sig), t0),
            Collected::Accepted
        );
        assert_eq!(h.bucket_len(0), 1);
        assert_eq!(
            h.collect_result(rec("y", 0, 4.0, &sig), t0),
            Collected::Accepted
        );
        assert!(h.poll(t0, &fx.offboard()).is_empty());
        h.collect_result(rec("z", 0, 6.0, &sig), t0);
        let ev = h.poll(t0, &fx.offboard());
        let out = outputs(&ev);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].value, Some(4.0));
        assert_eq!(out[0].accepted_count, 3);
        assert_eq!(out[0].missing_count, 0);
    }

    #[test]
    fn duplicates_and_late_results_are_dropped() {
        let fx = Fixture::new();
        let sig = BuiltinMethod::Mean.signature();
        let t0 = Instant::now();
        let mut h =
            AssignmentHandler::new(spec(3), clients(), sig.clone(), Duration::from_secs(10), t0);
        assert_eq!(
            h.collect_result(rec("x", 0, 1.0, &sig), t0),
            Collected::Accepted
        );
        assert_eq!(
            h.collect_result(rec("x", 0, 9.0, &sig), t0),
            Collected::Duplicate
        );
        assert_eq!(
            h.collect_result(rec("w", 0, 9.0, &sig), t0),
            Collected::UnknownClient
        );
        assert_eq!(
            h.collect_result(rec("y", 7, 9.0, &sig), t0),
            Collected::OutOfRange
        );
        h.collect_result(rec("y", 0, 1.0, &sig), t0);
        h.collect_result(rec("z", 0, 1.0, &sig), t0);
        h.poll(t0, &fx.offboard());
        assert_eq!(
            h.collect_result(rec("x", 0, 1.0, &sig), t0),
            Collected::Late
        );
    }

    #[test]
    fn timeout_closes_with_missing_clients() {
        let fx = Fixture::new();
        let sig = BuiltinMethod::Mean.signature();
        let t0 = Instant::now();
        let timeout = Duration::from_millis(100);
        let mut h = AssignmentHandler::new(spec(1), clients(), sig.clone(), timeout, t0);
        h.collect_result(rec("x", 0, 2.0, &sig), t0);
        assert!(h
            .poll(t0 + Duration::from_millis(50), &fx.offboard())
            .is_empty());
        assert_eq!(h.deadline(), Some(t0 + timeout));
        let ev = h.poll(t0 + timeout, &fx.offboard());
        let out = outputs(&ev);
        assert_eq!(out[0].accepted_count, 1);
        assert_eq!(out[0].discarded_count, 0);
        assert_eq!(out[0].missing_count, 2);
        assert!(
            matches!(ev.last(), Some(HandlerEvent::Status(s)) if s.state == StatusState::Completed)
        );
        assert!(h.is_finished());
        assert_eq!(h.deadline(), None);
    }

    #[test]
    fn empty_iteration_is_reported_after_timeout() {
        let fx = Fixture::new();
        let sig = BuiltinMethod::Mean.signature();
        let t0 = Instant::now();
        let mut h = AssignmentHandler::new(spec(2), clients(), sig, Duration::from_millis(10), t0);
        let ev = h.poll(t0 + Duration::from_millis(10), &fx.offboard());
        let out = outputs(&ev);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].value, None);
        assert_eq!(out[0].missing_count, 3);
        assert!(out[0].error.is_some());
        assert!(!h.is_finished());
    }

    #[test]
    fn failures_count_as_responses() {
        let fx = Fixture::new();
        let sig = BuiltinMethod::Mean.signature();
        let t0 = Instant::now();
        let mut h =
            AssignmentHandler::new(spec(1), clients(), sig.clone(), Duration::from_secs(10), t0);
        h.collect_result(rec("x", 0, 2.0, &sig), t0);
        h.collect_result(rec("y", 0, 4.0, &sig), t0);
        assert_eq!(
            h.record_failure("z", 0, "division by zero", t0),
            Collected::Accepted
        );
        let ev = h.poll(t0, &fx.offboard());
        let out = outputs(&ev);
        assert_eq!(out[0].value, Some(3.0));
        assert_eq!(out[0].missing_count, 1);
    }

    #[test]
    fn lost_clients_are_not_waited_for() {
        let fx = Fixture::new();
        let sig = BuiltinMethod::Mean.signature();
        let t0 = Instant::now();
        let mut h =
            AssignmentHandler::new(spec(1), clients(), sig.clone(), Duration::from_secs(10), t0);
        h.client_lost("z");
        h.collect_result(rec("x", 0, 2.0, &sig), t0);
        h.collect_result(rec("y", 0, 4.0, &sig), t0);
        assert_eq!(outputs(&h.poll(t0, &fx.offboard())).len(), 1);
    }

    #[test]
    fn iterations_close_in_order() {
        let fx = Fixture::new();
        let sig = BuiltinMethod::Mean.signature();
        let t0 = Instant::now();
        let mut h =
            AssignmentHandler::new(spec(3), clients(), sig.clone(), Duration::from_secs(10), t0);
        for c in ["x", "y", "z"] {
            h.collect_result(rec(c, 1, 1.0, &sig), t0);
        }
        assert!(
            h.poll(t0, &fx.offboard()).is_empty(),
            "iteration 1 must wait for 0"
        );
        for c in ["x", "y", "z"] {
            h.collect_result(rec(c, 0, 1.0, &sig), t0);
        }
        let ev = h.poll(t0, &fx.offboard());
        let iters: Vec<u64> = outputs(&ev).iter().map(|o| o.iteration).collect();
        assert_eq!(iters, [0, 1]);
    }

    #[test]
    fn mixed_versions_are_filtered_and_tie_uses_current() {
        let fx = Fixture::new();
        let v1 = Signature::of_code("mean(xs)");
        let v2 = Signature::of_code("max(xs)");
        let t0 = Instant::now();
        let mut s = spec(2);
        s.method = Method::Custom;
        s.custom_module = Some("agg".into());
        let two: BTreeSet<String> = ["x", "y"].into_iter().map(String::from).collect();
        let mut h = AssignmentHandler::new(s, two, v1.clone(), Duration::from_secs(10), t0);
        h.collect_result(rec("x", 0, 1.0, &v1), t0);
        h.collect_result(rec("y", 0, 5.0, &v2), t0);
        let ev = h.poll(t0, &fx.offboard());
        let out = outputs(&ev);
        assert_eq!(out[0].accepted_signature.as_ref(), Some(&v1));
        assert_eq!(out[0].value, Some(1.0));
        assert_eq!(out[0].discarded_count, 1);
        // a third signature matches neither tied group
        h.set_current_signature(Signature::of_code("min(xs)"));
        h.collect_result(rec("x", 1, 1.0, &v1), t0);
        h.collect_result(rec("y", 1, 5.0, &v2), t0);
        let ev = h.poll(t0, &fx.offboard());
        assert!(ev.iter().any(
            |e| matches!(e, HandlerEvent::Status(s) if s.state == StatusState::IterationDiscarded)
        ));
        let out = outputs(&ev);
        assert_eq!(out[0].accepted_signature, None);
        assert_eq!(out[0].value, None);
        assert_eq!(out[0].discarded_count, 2);
    }

    #[test]
    fn offboard_module_is_reloaded_each_iteration() {
        let fx = Fixture::new();
        fx.store
            .store_module(&CodeModule::new("u1", "reduce", "max(xs)"))
            .unwrap();
        let sig = BuiltinMethod::Mean.signature();
        let t0 = Instant::now();
        let mut s = spec(2);
        s.offboard_module = Some("reduce".into());
        let mut h = AssignmentHandler::new(s, clients(), sig.clone(), Duration::from_secs(10), t0);
        for (c, v) in [("x", 2.0), ("y", 4.0), ("z", 7.0)] {
            h.collect_result(rec(c, 0, v, &sig), t0);
        }
        let out = h.poll(t0, &fx.offboard());
        let o = outputs(&out)[0].clone();
        assert_eq!(o.value, Some(7.0));
        assert_eq!(o.cloud_signature, Some(Signature::of_code("max(xs)")));
        fx.store
            .store_module(&CodeModule::new("u1", "reduce", "min(xs)"))
            .unwrap();
        for (c, v) in [("x", 2.0), ("y", 4.0), ("z", 7.0)] {
            h.collect_result(rec(c, 1, v, &sig), t0);
        }
        let out = h.poll(t0, &fx.offboard());
        let o = outputs(&out)[0].clone();
        assert_eq!(o.value, Some(2.0));
        assert_eq!(o.cloud_signature, Some(Signature::of_code("min(xs)")));
    }

    #[test]
    fn offboard_failure_marks_iteration_and_continues() {
        let fx = Fixture::new();
        fx.store
            .store_module(&CodeModule::new(
                "u1",
                "reduce",
                "sum(xs) / (first(xs) - first(xs))",
            ))
            .unwrap();
        let sig = BuiltinMethod::Mean.signature();
        let t0 = Instant::now();
        let mut s = spec(2);
        s.offboard_module = Some("reduce".into());
        let mut h = AssignmentHandler::new(s, clients(), sig.clone(), Duration::from_secs(10), t0);
        for c in ["x", "y", "z"] {
            h.collect_result(rec(c, 0, 1.0, &sig), t0);
        }
        let ev = h.poll(t0, &fx.offboard());
        let out = outputs(&ev);
        assert!(out[0].error.as_deref().unwrap().starts_with("FAILED"));
        assert_eq!(out[0].value, None);
        assert!(!h.is_finished());
    }

    #[test]
    fn cancel_is_terminal_once() {
        let t0 = Instant::now();
        let mut s = spec(1);
        s.iterations = Iterations::Indefinite;
        let mut h = AssignmentHandler::new(
            s,
            clients(),
            BuiltinMethod::Mean.signature(),
            Duration::from_secs(1),
            t0,
        );
        assert!(
            matches!(h.cancel("user"), Some(HandlerEvent::Status(s)) if s.state == StatusState::Cancelled)
        );
        assert!(h.cancel("again").is_none());
    }
}
