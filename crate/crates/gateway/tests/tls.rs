use std::sync::Arc;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_rustls::rustls::pki_types::{CertificateDer, ServerName};
use tokio_rustls::rustls::{crypto, ClientConfig, RootCertStore};
use tokio_rustls::TlsConnector;

use parley_gateway::{start, GatewayConfig, GatewayError, TlsConfig};

#[tokio::test]
async fn serves_over_tls() {
    let dir = tempfile::tempdir().unwrap();
    let cert = rcgen::generate_simple_self_signed(vec!["localhost".to_string()]).unwrap();
    let cert_path = dir.path().join("cert.pem");
    let key_path = dir.path().join("key.pem");
    std::fs::write(&cert_path, cert.cert.pem()).unwrap();
    std::fs::write(&key_path, cert.key_pair.serialize_pem()).unwrap();

    let mut config = GatewayConfig::new(dir.path().join("data"), "admin");
    config.bind_address = "127.0.0.1:0".into();
    config.tls = Some(TlsConfig {
        cert: cert_path,
        key: key_path,
    });
    let gw = start(config).await.unwrap();
    assert!(gw.ws_url().starts_with("wss://"));

    let mut roots = RootCertStore::empty();
    roots.add(CertificateDer::from(cert.cert.der().to_vec())).unwrap();
    let client = ClientConfig::builder_with_provider(Arc::new(crypto::ring::default_provider()))
        .with_safe_default_protocol_versions()
        .unwrap()
        .with_root_certificates(roots)
        .with_no_client_auth();
    let tcp = TcpStream::connect(gw.local_addr()).await.unwrap();
    let mut tls = TlsConnector::from(Arc::new(client))
        .connect(ServerName::try_from("localhost").unwrap(), tcp)
        .await
        .unwrap();
    tls.write_all(b"GET /healthz HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut resp = String::new();
    tls.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.ends_with("ok"));
    gw.shutdown().await;
}

#[tokio::test]
async fn missing_certificate_fails_startup() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = GatewayConfig::new(dir.path(), "admin");
    config.bind_address = "127.0.0.1:0".into();
    config.tls = Some(TlsConfig {
        cert: dir.path().join("absent.pem"),
        key: dir.path().join("absent.key"),
    });
    assert!(matches!(start(config).await, Err(GatewayError::Tls(_))));
}
