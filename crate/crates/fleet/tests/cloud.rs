//! Cloud behaviour over real localhost sockets.

use std::time::Duration;

use fleet::frontend::{FrontendError, Reply, Request, Transport};
use fleet::harness::{run_assignment, Fleet, FleetOptions, LocalFleet};
use fleet_core::protocol::{
    AssignmentSpec, BuiltinMethod, CodeDeploymentSpec, CodeModule, DeployTarget, Iterations,
    Method, StatusState,
};
use tokio::time::{sleep, Instant};

fn spec(user: &str, method: Method, iterations: Iterations) -> AssignmentSpec {
    AssignmentSpec {
        assignment_id: String::new(),
        user_id: user.into(),
        method,
        custom_module: None,
        offboard_module: None,
        target_clients: vec![],
        iterations,
        window_size: 5,
        params: Default::default(),
    }
}

async fn eventually<F, Fut>(what: &str, mut f: F)
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let deadline = Instant::now() + Duration::from_secs(5);
    while !f().await {
        assert!(Instant::now() < deadline, "timed out waiting until {what}");
        sleep(Duration::from_millis(10)).await;
    }
}

fn remote_kind(err: FrontendError) -> String {
    match err {
        FrontendError::Remote(e) => e.error,
        other => panic!("expected a gateway error, got {other}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn handlers_exist_only_while_the_assignment_runs() {
    let fleet = LocalFleet::start(FleetOptions::default()).await.unwrap();
    let fe = fleet.frontend();
    let id = fe
        .submit_spec(spec(
            "u",
            Method::Builtin(BuiltinMethod::Mean),
            Iterations::Finite(4),
        ))
        .await
        .unwrap();
    eventually("every client runs a task", || async {
        fleet.clients().iter().all(|c| c.live_tasks() == 1)
    })
    .await;
    assert_eq!(fleet.cloud().handle().live_handlers().await.assignments, 1);
    let mut n = 0;
    let status = fe.watch(&id, |_| n += 1).await.unwrap();
    assert_eq!((status.state, n), (StatusState::Completed, 4));
    eventually("handlers are gone", || async {
        let live = fleet.cloud().handle().live_handlers().await;
        live.assignments == 0 && fleet.clients().iter().all(|c| c.live_tasks() == 0)
    })
    .await;
}

#[tokio::test(flavor = "multi_thread")]
async fn cancel_stops_an_indefinite_assignment() {
    let fleet = LocalFleet::start(FleetOptions::default()).await.unwrap();
    let fe = fleet.frontend();
    let id = fe
        .submit_spec(spec(
            "u",
            Method::Builtin(BuiltinMethod::Max),
            Iterations::Indefinite,
        ))
        .await
        .unwrap();
    let watcher = {
        let fe = fleet.frontend();
        let id = id.clone();
        tokio::spawn(async move { fe.watch(&id, |_| {}).await })
    };
    sleep(Duration::from_millis(150)).await;
    fe.cmd_cancel(&id, &mut Vec::new()).await.unwrap();
    let status = watcher.await.unwrap().unwrap();
    assert_eq!(status.state, StatusState::Cancelled);
    let again = fe.cmd_cancel(&id, &mut Vec::new()).await.unwrap_err();
    assert_eq!(remote_kind(again), "conflict");
    eventually("client tasks stop", || async {
        fleet.clients().iter().all(|c| c.live_tasks() == 0)
    })
    .await;
    let view = fe.assignment(&id).await.unwrap();
    assert_eq!(view.status.state, StatusState::Cancelled);
}

#[tokio::test(flavor = "multi_thread")]
async fn gateway_rejections() {
    let fleet = LocalFleet::start(FleetOptions {
        clients: 2,
        ..FleetOptions::default()
    })
    .await
    .unwrap();
    let fe = fleet.frontend();
    let t = fe.transport();

    let mut s = spec("u", Method::Custom, Iterations::Finite(1));
    s.custom_module = Some("never_deployed".into());
    assert_eq!(
        remote_kind(t.call(Request::Submit(s)).await.unwrap_err()),
        "not_found"
    );

    let mut s = spec(
        "u",
        Method::Builtin(BuiltinMethod::Sum),
        Iterations::Finite(2),
    );
    s.assignment_id = "fixed".into();
    assert!(matches!(
        t.call(Request::Submit(s.clone())).await,
        Ok(Reply::Submitted(_))
    ));
    assert_eq!(
        remote_kind(t.call(Request::Submit(s)).await.unwrap_err()),
        "conflict"
    );

    let bad = CodeDeploymentSpec {
        deployment_id: String::new(),
        user_id: "u".into(),
        target: DeployTarget::Both,
        target_clients: vec![],
        module: CodeModule::new("u", "agg", "mean(xs"),
    };
    assert_eq!(
        remote_kind(t.call(Request::Deploy(bad)).await.unwrap_err()),
        "invalid_code"
    );

    let orphan = CodeDeploymentSpec {
        deployment_id: String::new(),
        user_id: "u".into(),
        target: DeployTarget::Clients,
        target_clients: vec!["nobody".into()],
        module: CodeModule::new("u", "agg", "mean(xs)"),
    };
    assert_eq!(
        remote_kind(t.call(Request::Deploy(orphan)).await.unwrap_err()),
        "validation"
    );
    assert_eq!(
        remote_kind(fe.assignment("missing").await.unwrap_err()),
        "not_found"
    );
}

#[tokio::test(flavor = "multi_thread")]
async fn offboard_module_aggregates_on_the_cloud() {
    let fleet = LocalFleet::start(FleetOptions {
        clients: 3,
        ..FleetOptions::default()
    })
    .await
    .unwrap();
    let fe = fleet.frontend();
    let off = CodeModule::new("u", "total", "sum(xs)");
    fe.deploy_module(off.clone(), DeployTarget::Cloud, vec![])
        .await
        .unwrap();
    let mut s = spec(
        "u",
        Method::Builtin(BuiltinMethod::Mean),
        Iterations::Finite(2),
    );
    s.offboard_module = Some("total".into());
    let (outputs, status) = run_assignment(&fe, s).await.unwrap();
    assert_eq!(status.state, StatusState::Completed);
    for o in &outputs {
        assert_eq!(o.cloud_signature.as_ref(), Some(&off.signature));
        let sum: f64 = o
            .contributions
            .iter()
            .filter(|c| c.accepted)
            .map(|c| c.value)
            .sum();
        assert!((o.value.unwrap() - sum).abs() < 1e-9);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn a_lost_client_does_not_stall_iterations() {
    let options = FleetOptions {
        heartbeat_ms: 100,
        ..FleetOptions::default()
    };
    let mut fleet = LocalFleet::start(options).await.unwrap();
    let fe = fleet.frontend();
    let mut s = spec(
        "u",
        Method::Builtin(BuiltinMethod::Mean),
        Iterations::Finite(15),
    );
    s.window_size = 10;
    let id = fe.submit_spec(s).await.unwrap();
    sleep(Duration::from_millis(250)).await;
    assert!(fleet.kill_client("c4"));
    let mut outputs = Vec::new();
    let status = fe.watch(&id, |o| outputs.push(o.clone())).await.unwrap();
    assert_eq!(status.state, StatusState::Completed);
    assert_eq!(outputs.len(), 15);
    let last = outputs.last().unwrap();
    assert_eq!(last.accepted_count, 4);
    assert!(last.contributions.iter().all(|c| c.client_id != "c4"));
    let clients = fe.clients().await.unwrap();
    assert!(clients.iter().any(|c| c.client_id == "c4" && !c.connected));
}
