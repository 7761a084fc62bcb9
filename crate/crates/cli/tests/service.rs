mod common;

use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

use charctl::server::{start, ServeOptions, ServerHandle};
use charctl_core::session::{read_trace, recorded_frames, replay, FrameMessage, TraceRecord};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn launch(dir: &std::path::Path, trace: Option<std::path::PathBuf>, max_ticks: Option<u64>) -> ServerHandle {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    start(
        listener,
        common::controller(dir),
        common::session(3),
        ServeOptions { trace, max_ticks },
    )
    .await
    .unwrap()
}

async fn connect(h: &ServerHandle) -> Ws {
    let (ws, _) = connect_async(format!("ws://{}/ws", h.addr)).await.unwrap();
    ws
}

async fn next_msg(ws: &mut Ws) -> Value {
    loop {
        let m = tokio::time::timeout(Duration::from_secs(5), ws.next())
            .await
            .expect("message within 5 s")
            .expect("stream open")
            .unwrap();
        if let Message::Text(t) = m {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn next_frame(ws: &mut Ws) -> Value {
    loop {
        let v = next_msg(ws).await;
        if v["type"] == "frame" {
            return v;
        }
    }
}

async fn send(ws: &mut Ws, text: &str) {
    ws.send(Message::Text(text.into())).await.unwrap();
}

fn models() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_models(dir.path());
    dir
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frame_schema_and_ordering() {
    let dir = models();
    let h = launch(dir.path(), None, None).await;
    let mut ws = connect(&h).await;
    let first = next_frame(&mut ws).await;
    for key in ["tick", "character", "objects", "active_policy", "active_object", "scores"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    for key in ["p", "theta", "v", "h", "a"] {
        assert!(first["character"].get(key).is_some(), "missing character.{key}");
    }
    let obj = &first["objects"][0];
    for key in ["id", "color", "p", "updot"] {
        assert!(obj.get(key).is_some(), "missing object.{key}");
    }
    assert_eq!(first["active_policy"], "facing");
    assert_eq!(first["active_object"], "red");
    let mut prev = first["tick"].as_u64().unwrap();
    for _ in 0..30 {
        let f = next_frame(&mut ws).await;
        let t = f["tick"].as_u64().unwrap();
        assert_eq!(t, prev + 1, "gap or reorder");
        prev = t;
        let _: FrameMessage = serde_json::from_value(f).unwrap();
    }
    h.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn two_clients_see_identical_frames() {
    let dir = models();
    let h = launch(dir.path(), None, None).await;
    let mut a = connect(&h).await;
    let mut b = connect(&h).await;
    let mut fa = Vec::new();
    let mut fb = Vec::new();
    for _ in 0..45 {
        fa.push(next_frame(&mut a).await);
        fb.push(next_frame(&mut b).await);
    }
    // Align on the later starting tick; from there both streams must agree.
    let start = fa[0]["tick"].as_u64().max(fb[0]["tick"].as_u64()).unwrap();
    let pick = |v: &Vec<Value>| -> Vec<Value> {
        v.iter().filter(|f| f["tick"].as_u64().unwrap() >= start).cloned().collect()
    };
    let (ca, cb) = (pick(&fa), pick(&fb));
    let n = ca.len().min(cb.len());
    assert!(n >= 40);
    assert_eq!(ca[..n], cb[..n]);
    h.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_messages_get_error_replies() {
    let dir = models();
    let h = launch(dir.path(), None, None).await;
    let mut ws = connect(&h).await;
    let _ = next_frame(&mut ws).await;
    for bad in ["not json", r#"{"type":"jump"}"#, r#"{"type":"task_command"}"#, r#"{"type":"skill_command","text":""}"#] {
        send(&mut ws, bad).await;
        loop {
            let v = next_msg(&mut ws).await;
            if v["type"] == "error" {
                assert!(v["msg"].as_str().is_some_and(|m| !m.is_empty()));
                break;
            }
        }
    }
    // The session is unaffected.
    let a = next_frame(&mut ws).await["tick"].as_u64().unwrap();
    let b = next_frame(&mut ws).await["tick"].as_u64().unwrap();
    assert_eq!(b, a + 1);
    h.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn task_command_switches_policy_and_disconnect_is_harmless() {
    let dir = models();
    let trace = dir.path().join("trace.jsonl");
    let h = launch(dir.path(), Some(trace.clone()), Some(150)).await;
    let mut a = connect(&h).await;
    let mut b = connect(&h).await;
    let last = next_frame(&mut a).await["tick"].as_u64().unwrap();
    send(&mut a, r#"{"type":"task_command","text":"knock over the blue block"}"#).await;
    let switched = loop {
        let f = next_frame(&mut a).await;
        if f["active_policy"] == "strike" {
            assert_eq!(f["active_object"], "blue");
            break f["tick"].as_u64().unwrap();
        }
    };
    assert!(switched <= last + 3, "switch at {switched}, command sent after {last}");
    a.close(None).await.unwrap();
    drop(a);
    let t0 = next_frame(&mut b).await["tick"].as_u64().unwrap();
    let t1 = next_frame(&mut b).await["tick"].as_u64().unwrap();
    assert_eq!(t1, t0 + 1);
    drop(b);
    h.wait().await.unwrap();

    // The command is applied exactly before the tick it is recorded against.
    let records = read_trace(std::io::BufReader::new(std::fs::File::open(&trace).unwrap())).unwrap();
    let before = records
        .iter()
        .find_map(|r| match r {
            TraceRecord::Command { before_tick, .. } => Some(*before_tick),
            _ => None,
        })
        .unwrap();
    let frames = recorded_frames(&records);
    let after = frames.iter().find(|f| f.tick == before + 1).unwrap();
    assert_eq!(after.active_policy, "strike");
    let prior = frames.iter().find(|f| f.tick == before).unwrap();
    assert_eq!(prior.active_policy, "facing");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn served_trace_replays_bit_exactly() {
    let dir = models();
    let trace = dir.path().join("trace.jsonl");
    let h = launch(dir.path(), Some(trace.clone()), Some(120)).await;
    let mut ws = connect(&h).await;
    let script = [
        r#"{"type":"task_command","text":"navigate to the green block"}"#,
        r#"{"type":"skill_command","text":"run forward fast"}"#,
        r#"{"type":"task_command","text":"knock over the orange block"}"#,
        r#"{"type":"skill_command","text":"crouch walk forward"}"#,
    ];
    for cmd in script {
        for _ in 0..10 {
            next_frame(&mut ws).await;
        }
        send(&mut ws, cmd).await;
    }
    drop(ws);
    h.wait().await.unwrap();

    let records = read_trace(std::io::BufReader::new(std::fs::File::open(&trace).unwrap())).unwrap();
    let served = recorded_frames(&records);
    assert_eq!(served.len(), 120);
    let n_cmds = records.iter().filter(|r| matches!(r, TraceRecord::Command { .. })).count();
    assert_eq!(n_cmds, script.len());
    let offline = replay(&common::controller(dir.path()), &records).unwrap();
    assert_eq!(offline.len(), served.len());
    for (s, o) in served.iter().zip(&offline) {
        assert_eq!(serde_json::to_string(s).unwrap(), serde_json::to_string(o).unwrap());
        assert_eq!(s, o);
    }
}
