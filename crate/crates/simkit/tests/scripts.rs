mod common;

use common::*;

use parley_core::{
    ChatMode, EventPayload, Identity, InputAction, LeaveReason, ParticipantKind, ServerBody, SessionId,
};
use parley_simkit::scenario::session;
use parley_simkit::{
    fold_keystrokes, run_script, simulate, Action, Category, ParticipantScript, RunOptions, Scenario, SimError,
    Target,
};

fn typed(text: &str) -> Action {
    Action::Type {
        text: text.into(),
        delay_ms: 20,
        jitter_ms: 0,
    }
}

fn subject(name: &str) -> ParticipantScript {
    ParticipantScript::new(name, ParticipantKind::Subject, vec![Identity::new(name, "")])
}

fn wizard(names: &[&str]) -> ParticipantScript {
    let ids = names.iter().map(|n| Identity::new(*n, "")).collect();
    ParticipantScript::new("wizard", ParticipantKind::Wizard, ids)
}

fn scenario(id: &str, mode: ChatMode, participants: Vec<ParticipantScript>) -> Scenario {
    Scenario {
        seed: 1,
        settle_ms: 200,
        session: session(id, mode, participants.len() as u32),
        participants,
    }
}

#[tokio::test]
async fn typed_message_is_echoed() {
    let s = server().await;
    let sc = scenario(
        "echo",
        ChatMode::QuasiSync,
        vec![subject("Sam").step(0, typed("hi")).step(0, Action::Submit), wizard(&["Ava"])],
    );
    let report = simulate(&s.admin, &sc, None).await.unwrap();
    let sam = report.transcript("Sam");
    let echoed: Vec<String> = sam
        .received()
        .filter_map(|(_, f)| match f.body {
            ServerBody::MessagePosted { message } => Some(message.text),
            _ => None,
        })
        .collect();
    assert_eq!(echoed, vec!["hi".to_string()]);
    assert_eq!(sam.echo_latencies().len(), 1);
    assert!(sam.order_violations().is_empty());
    // the token never reaches the transcript
    let issued = &report.participants[0];
    assert_eq!(issued.name, "Sam");
    assert!(serde_json::to_string(sam).unwrap().contains("<redacted>"));
}

#[tokio::test]
async fn sync_peers_see_each_others_keystrokes_in_order() {
    let s = server().await;
    let a = subject("Sam")
        .step(0, typed("helo"))
        .step(0, Action::Erase { count: 1, delay_ms: 20 })
        .step(0, typed("lo there"))
        .step(0, Action::Submit);
    let b = wizard(&["Ava"])
        .step(100, Action::Paste { text: "yes".into() })
        .step(100, typed("!?"))
        .step(100, Action::Erase { count: 1, delay_ms: 20 })
        .step(100, Action::Submit);
    let report = simulate(&s.admin, &scenario("sync", ChatMode::Sync, vec![a, b]), None)
        .await
        .unwrap();
    let (sam, ava) = (report.transcript("Sam"), report.transcript("wizard"));
    assert_eq!(ava.peer_keystrokes("Sam"), sam.sent_keystrokes());
    assert_eq!(sam.peer_keystrokes("Ava"), ava.sent_keystrokes());
    assert_eq!(fold_keystrokes(&ava.peer_keystrokes("Sam")).unwrap(), "hello there");
    assert_eq!(fold_keystrokes(&sam.peer_keystrokes("Ava")).unwrap(), "yes!");
    assert_eq!(sam.submitted(), vec!["hello there".to_string()]);
}

#[tokio::test]
async fn quasi_sync_relays_no_text_even_from_a_leaky_client() {
    let s = server().await;
    let mut leaky = subject("Sam").step(0, typed("zqxj")).step(0, Action::Submit);
    leaky.send_draft_text = true;
    let report = simulate(&s.admin, &scenario("leak", ChatMode::QuasiSync, vec![leaky, wizard(&["Ava"])]), None)
        .await
        .unwrap();
    let sent = report.transcript("Sam").sent_keystrokes();
    assert!(matches!(&sent[0], InputAction::KeyDown { text: Some(t), .. } if t == "z"));
    let ava = report.transcript("wizard");
    assert!(ava.peer_keystrokes("Sam").is_empty());
    let before_post: String = ava
        .received_text()
        .lines()
        .take_while(|l| !l.contains("MESSAGE_POSTED"))
        .collect();
    for c in ["\"z\"", "\"q\"", "zq"] {
        assert!(!before_post.contains(c), "{c} leaked");
    }
}

#[tokio::test]
async fn subject_switch_identity_is_rejected_before_connecting() {
    let target = Target {
        ws_url: "ws://127.0.0.1:9/ws".into(),
        session_id: SessionId::new("x"),
        token: "t".into(),
    };
    let script = subject("Sam").step(0, Action::SwitchIdentity { index: 0 });
    let err = run_script(&target, &script, &RunOptions::new(0), None).await.unwrap_err();
    assert_eq!(err.category(), Category::ScriptInvalid, "{err}");
}

#[tokio::test]
async fn unreachable_server_is_connect_failed() {
    let target = Target {
        ws_url: format!("{}/ws", dead_address().replace("http", "ws")),
        session_id: SessionId::new("x"),
        token: "t".into(),
    };
    let err = run_script(&target, &subject("Sam"), &RunOptions::new(0), None)
        .await
        .unwrap_err();
    assert!(matches!(err, SimError::ConnectFailed { .. }), "{err}");
    let err = simulate(
        &parley_simkit::AdminClient::new(&dead_address(), ADMIN),
        &scenario("dead", ChatMode::Sync, vec![subject("Sam"), wizard(&["Ava"])]),
        None,
    )
    .await
    .unwrap_err();
    assert_eq!(err.category(), Category::ConnectFailed);
}

#[tokio::test]
async fn bad_token_is_refused() {
    let s = server().await;
    s.admin
        .create_session(&scenario("tok", ChatMode::Sync, vec![subject("Sam"), wizard(&["Ava"])]).create_request())
        .await
        .unwrap();
    let target = Target {
        ws_url: s.gateway.ws_url(),
        session_id: SessionId::new("tok"),
        token: "nope".into(),
    };
    let err = run_script(&target, &subject("Sam"), &RunOptions::new(0), None)
        .await
        .unwrap_err();
    assert_eq!(err.category(), Category::Unauthorized, "{err}");

    let wrong_admin = parley_simkit::AdminClient::new(&s.gateway.http_url(), "wrong");
    let err = wrong_admin
        .create_session(&scenario("tok2", ChatMode::Sync, vec![subject("Sam"), wizard(&["Ava"])]).create_request())
        .await
        .unwrap_err();
    assert_eq!(err.category(), Category::Unauthorized);
}

#[tokio::test]
async fn abrupt_disconnect_logs_leave_and_reconnect_resumes() {
    let s = server().await;
    let sam = subject("Sam")
        .step(0, typed("ab"))
        .step(0, Action::Disconnect { abrupt: true })
        .step(300, Action::Reconnect)
        .step(300, typed("c"))
        .step(300, Action::Submit);
    let report = simulate(&s.admin, &scenario("drop", ChatMode::QuasiSync, vec![sam, wizard(&["Ava"])]), None)
        .await
        .unwrap();
    let log = s.log("drop");
    let leave = log
        .iter()
        .find(|r| matches!(r.payload, EventPayload::Leave { reason: LeaveReason::Disconnect, .. }))
        .expect("LEAVE DISCONNECT");
    let joins: Vec<_> = log
        .iter()
        .filter(|r| matches!(&r.payload, EventPayload::Join { participant_id, .. } if participant_id.as_str() == "subject-1"))
        .collect();
    assert_eq!(joins.len(), 2);
    assert!(leave.server_ts_ms <= joins[1].server_ts_ms);
    let sam_t = report.transcript("Sam");
    assert_eq!(sam_t.entries.last().unwrap().conn, 2);
    let state = parley_core::SessionState::replay(&log).unwrap();
    assert_eq!(state.messages[0].text_original, "abc");
    assert_eq!(state.messages[0].telemetry.keystroke_count, 3);
}

#[tokio::test]
async fn same_seed_same_client_stream() {
    let s = server().await;
    let run = |id: &'static str| {
        let mut sc = scenario(
            id,
            ChatMode::Sync,
            vec![
                subject("Sam")
                    .step(
                        0,
                        Action::Type {
                            text: "jittery words".into(),
                            delay_ms: 10,
                            jitter_ms: 30,
                        },
                    )
                    .step(0, Action::Submit),
                wizard(&["Ava"]),
            ],
        );
        sc.seed = 42;
        sc
    };
    let project = |log: &[parley_core::EventRecord]| -> Vec<String> {
        log.iter()
            .filter_map(|r| match &r.payload {
                EventPayload::InputEvent { participant_id, event } => Some(format!("{participant_id} {event:?}")),
                EventPayload::Message(m) => Some(format!("{} {:?}", m.text_original, m.telemetry)),
                _ => None,
            })
            .collect()
    };
    simulate(&s.admin, &run("rep1"), None).await.unwrap();
    simulate(&s.admin, &run("rep2"), None).await.unwrap();
    let (a, b) = (project(&s.log("rep1")), project(&s.log("rep2")));
    assert_eq!(a, b);
    let iki = |log: Vec<parley_core::EventRecord>| {
        log.iter()
            .find_map(|r| match &r.payload {
                EventPayload::Message(m) => Some(m.telemetry.iki_list_ms.clone()),
                _ => None,
            })
            .unwrap()
    };
    let ikis = iki(s.log("rep1"));
    assert!(ikis.iter().all(|d| (10..=40).contains(d)), "{ikis:?}");
    assert!(ikis.iter().any(|d| *d != ikis[0]), "jitter had no effect");

    simulate(&s.admin, &run("rep3"), Some(7)).await.unwrap();
    assert_ne!(project(&s.log("rep3")), a);
}
