//! Client registration, heartbeat loss and reconnection.

use std::time::Duration;

use fleet::client::ClientNode;
use fleet::cloud::CloudNode;
use fleet::config::{ClientConfig, CloudConfig};
use fleet::harness::fleet::{wait_ready, READY_TIMEOUT};
use fleet_core::protocol::{encode_envelope, Envelope, Payload, RegisterClient};
use tokio::io::AsyncWriteExt;
use tokio::time::sleep;

fn cloud_config(root: &std::path::Path, client_port: u16, heartbeat_ms: u64) -> CloudConfig {
    CloudConfig {
        bind_host: "127.0.0.1".into(),
        client_port,
        gateway_port: 0,
        module_root: root.join("cloud"),
        heartbeat_ms,
        ..CloudConfig::default()
    }
}

async fn connected(cloud: &CloudNode, id: &str) -> Option<bool> {
    let clients = cloud.handle().clients().await;
    clients
        .iter()
        .find(|c| c.client_id == id)
        .map(|c| c.connected)
}

#[tokio::test(flavor = "multi_thread")]
async fn a_silent_client_is_marked_lost() {
    let root = tempfile::tempdir().unwrap();
    let cloud = CloudNode::start(cloud_config(root.path(), 0, 100))
        .await
        .unwrap();
    let mut sock = tokio::net::TcpStream::connect(cloud.handle().client_addr())
        .await
        .unwrap();
    let register = Envelope::new(
        "mute",
        1,
        Payload::RegisterClient(RegisterClient {
            client_id: "mute".into(),
        }),
    );
    sock.write_all(&encode_envelope(&register).unwrap())
        .await
        .unwrap();
    let gateway = cloud.handle().gateway_addr().to_string();
    wait_ready(&gateway, &["mute".into()], READY_TIMEOUT)
        .await
        .unwrap();
    sleep(Duration::from_millis(600)).await;
    assert_eq!(connected(&cloud, "mute").await, Some(false));
    drop(sock);
}

#[tokio::test(flavor = "multi_thread")]
async fn heartbeats_keep_a_client_registered() {
    let root = tempfile::tempdir().unwrap();
    let cloud = CloudNode::start(cloud_config(root.path(), 0, 60))
        .await
        .unwrap();
    let mut cc = ClientConfig::new("c0", cloud.handle().client_addr().to_string(), 1);
    cc.module_root = root.path().join("c0");
    cc.heartbeat_ms = 60;
    let client = ClientNode::spawn(cc).unwrap();
    let gateway = cloud.handle().gateway_addr().to_string();
    wait_ready(&gateway, &["c0".into()], READY_TIMEOUT)
        .await
        .unwrap();
    sleep(Duration::from_millis(600)).await;
    assert_eq!(connected(&cloud, "c0").await, Some(true));
    client.shutdown();
}

#[tokio::test(flavor = "multi_thread")]
async fn a_client_reconnects_when_the_cloud_comes_back() {
    let root = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cloud = CloudNode::start(cloud_config(root.path(), port, 100))
        .await
        .unwrap();
    let mut cc = ClientConfig::new("c0", format!("127.0.0.1:{port}"), 1);
    cc.module_root = root.path().join("c0");
    cc.backoff_initial_ms = 20;
    cc.backoff_max_ms = 200;
    let client = ClientNode::spawn(cc).unwrap();
    wait_ready(
        &cloud.handle().gateway_addr().to_string(),
        &["c0".into()],
        READY_TIMEOUT,
    )
    .await
    .unwrap();
    cloud.shutdown();
    sleep(Duration::from_millis(300)).await;
    let cloud = CloudNode::start(cloud_config(root.path(), port, 100))
        .await
        .unwrap();
    wait_ready(
        &cloud.handle().gateway_addr().to_string(),
        &["c0".into()],
        READY_TIMEOUT,
    )
    .await
    .unwrap();
    client.shutdown();
}
