//! Every example line in protocol.md must decode and re-encode to the same bytes.

use parley_core::{decode_frame, encode_frame, ClientFrame, EventRecord, ServerFrame, WireFrame};

fn doc() -> String {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../protocol.md");
    std::fs::read_to_string(path).expect("protocol.md at the workspace root")
}

/// Lines of every fenced block whose info string is `json <tag>`.
fn examples(doc: &str, tag: &str) -> Vec<String> {
    let open = format!("```json {tag}");
    let mut out = Vec::new();
    let mut inside = false;
    for line in doc.lines() {
        if inside {
            if line.starts_with("```") {
                inside = false;
            } else if !line.is_empty() {
                out.push(line.to_owned());
            }
        } else if line.trim_end() == open {
            inside = true;
        }
    }
    out
}

fn round_trips<F: WireFrame>(tag: &str) -> Vec<F> {
    let lines = examples(&doc(), tag);
    assert!(!lines.is_empty(), "no `json {tag}` examples");
    lines
        .iter()
        .map(|line| {
            let frame: F = decode_frame(line.as_bytes()).unwrap_or_else(|e| panic!("{e}: {line}"));
            assert_eq!(String::from_utf8(encode_frame(&frame)).unwrap(), *line);
            frame
        })
        .collect()
}

#[test]
fn client_examples_are_canonical() {
    let frames: Vec<ClientFrame> = round_trips("client");
    let kinds: std::collections::BTreeSet<_> = frames
        .iter()
        .map(|f| f.to_json()["kind"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(kinds.len(), parley_core::ClientBody::KINDS.len(), "{kinds:?}");
}

#[test]
fn server_examples_are_canonical() {
    let frames: Vec<ServerFrame> = round_trips("server");
    let mut kinds: Vec<_> = frames.iter().map(|f| f.body.kind_name()).collect();
    kinds.sort();
    kinds.dedup();
    assert_eq!(kinds.len(), parley_core::ServerBody::KINDS.len(), "{kinds:?}");
}

#[test]
fn record_examples_are_canonical() {
    round_trips::<EventRecord>("record");
}

#[test]
fn bye_bytes_are_fixed() {
    let bye = ClientFrame {
        client_seq: 40,
        body: parley_core::ClientBody::Bye,
    };
    assert_eq!(encode_frame(&bye), br#"{"client_seq":40,"kind":"BYE","v":1}"#);
}
