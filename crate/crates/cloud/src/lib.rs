//! IoT cloud server stack built on `iotcloud-core`: the slot-store cluster,
//! MQTT broker, HTTP service, load balancer and benchmark harness, with the
//! sockets, processes and file formats they need.

pub mod balancer;
pub mod bench;
pub mod broker;
pub mod httpd;
pub mod mqtt_client;
pub mod store;
pub mod wire;

/// Installs a stderr log subscriber honouring `RUST_LOG` (default `info`).
pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}
