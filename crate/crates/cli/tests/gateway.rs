use std::net::SocketAddr;
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use partsep::neural::{Arch, Model, ModelConfig};
use partsep::harness::SessionConfig;
use partsep_cli::gateway::{Gateway, UNKNOWN_SESSION};
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

fn small_model(arch: Arch) -> Model<f32> {
    let c = ModelConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        ffn: 16,
        ..ModelConfig::new(arch, 3)
    };
    Model::new(c, 4).unwrap()
}

async fn start(gateway: Arc<Gateway>) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, gateway.router()).await.unwrap() });
    addr
}

async fn create_session(addr: SocketAddr) -> String {
    // A bare HTTP/1.1 POST; the response body is a small JSON object.
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    let req = format!("POST /sessions HTTP/1.1\r\nHost: {addr}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut buf = String::new();
    stream.read_to_string(&mut buf).await.unwrap();
    assert!(buf.starts_with("HTTP/1.1 200"), "{buf}");
    let body = &buf[buf.find("\r\n\r\n").unwrap() + 4..];
    let v: Value = serde_json::from_str(body.trim()).unwrap();
    v["id"].as_str().unwrap().to_string()
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn ask(ws: &mut Ws, text: &str) -> Value {
    ws.send(Message::Text(text.into())).await.unwrap();
    match ws.next().await.unwrap().unwrap() {
        Message::Text(t) => serde_json::from_str(t.as_str()).unwrap(),
        other => panic!("unexpected {other:?}"),
    }
}

#[tokio::test]
async fn labels_notes_over_a_reserved_session() {
    let addr = start(Gateway::new(small_model(Arch::Lstm), SessionConfig::default()).unwrap()).await;
    let id = create_session(addr).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws")).await.unwrap();

    let reply = ask(&mut ws, r#"{"t":"note","ms":0,"pitch":60}"#).await;
    assert_eq!(reply["t"], "label");
    assert_eq!(reply["pitch"], 60);
    let scores: Vec<f64> = reply["scores"].as_array().unwrap().iter().map(|s| s.as_f64().unwrap()).collect();
    assert_eq!(scores.len(), 3);
    assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-5);

    // Switches get no reply; with one part left on, every note goes there.
    for part in [0, 2] {
        ws.send(Message::Text(format!(r#"{{"t":"switch","part":{part},"on":false}}"#).into())).await.unwrap();
    }
    for ms in [40, 60, 100] {
        let reply = ask(&mut ws, &format!(r#"{{"t":"note","ms":{ms},"pitch":64}}"#)).await;
        assert_eq!(reply["part"], 1);
    }

    let reply = ask(&mut ws, r#"{"t":"note","ms":10,"pitch":64}"#).await;
    assert_eq!(reply["t"], "err");
    let reply = ask(&mut ws, "not json").await;
    assert_eq!(reply["t"], "err");
    ws.send(Message::Binary(vec![1u8, 2].into())).await.unwrap();
    match ws.next().await.unwrap().unwrap() {
        Message::Text(t) => assert!(t.as_str().contains(r#""t":"err""#)),
        other => panic!("unexpected {other:?}"),
    }

    // After a reset the clock starts over and all parts are back on.
    ws.send(Message::Text(r#"{"t":"reset"}"#.into())).await.unwrap();
    let reply = ask(&mut ws, r#"{"t":"note","ms":0,"pitch":48}"#).await;
    assert_eq!(reply["t"], "label");
}

#[tokio::test]
async fn unknown_session_is_closed_with_4404() {
    let addr = start(Gateway::new(small_model(Arch::TransformerDec), SessionConfig::default()).unwrap()).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/nope/ws")).await.unwrap();
    match ws.next().await.unwrap().unwrap() {
        Message::Close(Some(frame)) => {
            assert_eq!(u16::from(frame.code), UNKNOWN_SESSION);
            assert_eq!(frame.reason.as_str(), "unknown session");
        }
        other => panic!("expected a close frame, got {other:?}"),
    }
}

#[tokio::test]
async fn a_session_can_be_attached_only_once() {
    let addr = start(Gateway::new(small_model(Arch::Lstm), SessionConfig::default()).unwrap()).await;
    let id = create_session(addr).await;
    let (_first, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws")).await.unwrap();
    let (mut second, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws")).await.unwrap();
    assert!(matches!(second.next().await.unwrap().unwrap(), Message::Close(Some(f)) if u16::from(f.code) == UNKNOWN_SESSION));
}

#[tokio::test]
async fn direct_connection_opens_a_fresh_session() {
    let addr = start(Gateway::new(small_model(Arch::Lstm), SessionConfig::default()).unwrap()).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let reply = ask(&mut ws, r#"{"t":"note","ms":5,"pitch":70}"#).await;
    assert_eq!(reply["t"], "label");
}

#[test]
fn offline_models_are_refused() {
    assert!(Gateway::new(small_model(Arch::BiLstm), SessionConfig::default()).is_err());
    assert!(Gateway::new(small_model(Arch::TransformerEnc), SessionConfig::default()).is_err());
}
