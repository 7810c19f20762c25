#![allow(dead_code)]

use std::path::PathBuf;

use parley_core::{store::read_log_file, EventRecord};
use parley_gateway::{start, Gateway, GatewayConfig};
use parley_simkit::AdminClient;

pub const ADMIN: &str = "admin-secret";

pub struct Server {
    pub gateway: Gateway,
    pub dir: tempfile::TempDir,
    pub admin: AdminClient,
}

pub async fn server() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let mut config = GatewayConfig::new(dir.path(), ADMIN);
    config.bind_address = "127.0.0.1:0".into();
    config.fsync = false;
    config.session_tick_ms = 50;
    let gateway = start(config).await.unwrap();
    let admin = AdminClient::new(&gateway.http_url(), ADMIN);
    Server { gateway, dir, admin }
}

impl Server {
    pub fn log_path(&self, session_id: &str) -> PathBuf {
        self.dir.path().join(format!("{session_id}.log"))
    }

    pub fn log(&self, session_id: &str) -> Vec<EventRecord> {
        read_log_file(&self.log_path(session_id)).unwrap()
    }
}

/// A port nothing listens on.
pub fn dead_address() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}
