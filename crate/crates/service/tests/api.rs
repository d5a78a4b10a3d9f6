mod common;

use std::time::{Duration, Instant};

use common::{assert_valid, demo_config, demo_dir, TestServer, TRAFFIC};
use empathyear_core::conversation::TurnRecord;
use empathyear_core::meta_response::parse_meta_response;
use empathyear_core::pipeline::consistency_check;
use empathyear_core::taxonomy::{sha256_hex, Taxonomy};
use empathyear_service::ServiceConfig;
use reqwest::multipart::{Form, Part};
use serde_json::Value;

async fn server() -> (tempfile::TempDir, TestServer) {
    server_with(|_| {}).await
}

async fn server_with(tweak: impl FnOnce(&mut ServiceConfig)) -> (tempfile::TempDir, TestServer) {
    let dir = tempfile::tempdir().unwrap();
    let mut config = demo_config(dir.path());
    tweak(&mut config);
    let s = TestServer::start(config).await;
    (dir, s)
}

fn steps(body: &Value) -> Vec<(u64, String)> {
    body["trace"]["steps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s["step"].as_u64().unwrap(), s["outcome"].as_str().unwrap().to_string()))
        .collect()
}

#[tokio::test]
async fn traffic_turn_follows_the_schema() {
    let (_dir, s) = server().await;
    let r = s.client.post(s.url("/api/sessions")).send().await.unwrap();
    assert_eq!(r.status(), 201);
    let created: Value = r.json().await.unwrap();
    assert_valid("CreateSessionResponse", &created);
    let id = created["session_id"].as_str().unwrap();

    let r = s.post_text(id, TRAFFIC).await;
    assert_eq!(r.status(), 200);
    let turn: Value = r.json().await.unwrap();
    assert_valid("TurnResponse", &turn);
    assert_eq!(turn["session_id"], id);
    assert_eq!(turn["turn_index"], 0);
    assert_eq!(turn["response_text"], "I hate traffic too, it makes me crazy!");
    assert_eq!(turn["meta"]["emotion_label"], "Angry");
    assert_eq!(turn["meta"]["agent_age"], "Young adults (25-40)");
    assert_eq!(turn["degraded"], false);
    assert_eq!(turn["audio"]["emotion"], "Angry");
    assert_eq!(turn["video"]["emotion"], "Angry");
    assert_eq!(steps(&turn).len(), 8);
    assert!(steps(&turn).iter().all(|(_, o)| o == "ok"));

    let transcript = s.transcript(id).await;
    assert_valid("Transcript", &transcript);
    let turns = transcript["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 1);
    assert_eq!(turns[0]["response"]["response_text"], turn["response_text"]);
    assert_eq!(turns[0]["response"]["audio"]["hash"], turn["audio"]["hash"]);
    assert_eq!(turns[0]["trace"], turn["trace"]);

    let record: TurnRecord = serde_json::from_value(turns[0].clone()).unwrap();
    let report = consistency_check(&record.trace, &record.meta);
    assert!(report.pass, "{report}");
}

#[tokio::test]
async fn trace_is_opt_in() {
    let (_dir, s) = server().await;
    let id = s.create_session().await;
    let form = Form::new().text("text", TRAFFIC);
    let turn: Value = s.post_form(&id, "", form).await.json().await.unwrap();
    assert!(turn.get("trace").is_none());
    assert_valid("TurnResponse", &turn);
}

#[tokio::test]
async fn media_round_trip() {
    let (_dir, s) = server().await;
    let id = s.create_session().await;
    let turn: Value = s.post_text(&id, TRAFFIC).await.json().await.unwrap();
    for (key, content_type) in [("audio", "audio/wav"), ("video", "image/gif")] {
        let art = &turn[key];
        let r = s.client.get(s.url(art["url"].as_str().unwrap())).send().await.unwrap();
        assert_eq!(r.status(), 200);
        assert_eq!(r.headers()["content-type"], content_type);
        assert!(r.headers()["cache-control"].to_str().unwrap().contains("immutable"));
        let bytes = r.bytes().await.unwrap();
        assert_eq!(sha256_hex(&bytes), art["hash"].as_str().unwrap());
    }
    let missing = s
        .client
        .get(s.url(&format!("/api/media/{}", "0".repeat(64))))
        .send()
        .await
        .unwrap();
    assert_eq!(missing.status(), 404);
    let bogus = s.client.get(s.url("/api/media/..%2F..%2Fetc")).send().await.unwrap();
    assert_eq!(bogus.status(), 404);
}

#[tokio::test]
async fn malformed_turns_are_rejected() {
    let (_dir, s) = server().await;
    let id = s.create_session().await;
    let cases = [
        (Form::new().text("text", "   "), "empty_input"),
        (Form::new().text("caption", "hi"), "bad_request"),
        (Form::new().text("text", "a").text("text", "b"), "bad_request"),
        (Form::new().part("text", Part::bytes(vec![0xff, 0xfe])), "bad_request"),
    ];
    for (form, code) in cases {
        let r = s.post_form(&id, "", form).await;
        assert_eq!(r.status(), 400);
        let body: Value = r.json().await.unwrap();
        assert_valid("Error", &body);
        assert_eq!(body["error"]["code"], code);
    }
    // a well-formed body with no parts at all
    let r = s
        .client
        .post(s.url(&format!("/api/sessions/{id}/turns")))
        .header("content-type", "multipart/form-data; boundary=XX")
        .body("--XX--\r\n")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["error"]["code"], "empty_input");
    assert_eq!(s.transcript(&id).await["turns"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn unknown_sessions_are_404() {
    let (_dir, s) = server().await;
    let r = s.client.get(s.url("/api/sessions/nope")).send().await.unwrap();
    assert_eq!(r.status(), 404);
    let body: Value = r.json().await.unwrap();
    assert_valid("Error", &body);
    assert_eq!(body["error"]["code"], "session_not_found");
    let r = s.post_text("0123456789abcdef0123456789abcdef", TRAFFIC).await;
    assert_eq!(r.status(), 404);
    let r = s.post_text("..%2Fescape", TRAFFIC).await;
    assert_eq!(r.status(), 404);
}

#[tokio::test]
async fn bearer_token_guards_the_api() {
    let (_dir, s) = server_with(|c| c.bearer_token = Some("s3cret".into())).await;
    let r = s.client.post(s.url("/api/sessions")).send().await.unwrap();
    assert_eq!(r.status(), 401);
    assert_eq!(r.headers()["www-authenticate"], "Bearer");
    assert_valid("Error", &r.json::<Value>().await.unwrap());
    let r = s
        .client
        .post(s.url("/api/sessions"))
        .bearer_auth("wrong")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 401);

    let r = s
        .client
        .post(s.url("/api/sessions"))
        .bearer_auth("s3cret")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 201);
    let id = r.json::<Value>().await.unwrap()["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let turn: Value = s
        .client
        .post(s.url(&format!("/api/sessions/{id}/turns")))
        .bearer_auth("s3cret")
        .multipart(Form::new().text("text", TRAFFIC))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let media = turn["audio"]["url"].as_str().unwrap();
    let r = s.client.get(s.url(media)).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let r = s
        .client
        .get(s.url(&format!("{media}?access_token=s3cret")))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    // the query token is for media only
    let r = s
        .client
        .get(s.url(&format!("/api/sessions/{id}?access_token=s3cret")))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 401);
    let r = s.client.get(s.url("/healthz")).send().await.unwrap();
    assert_eq!(r.status(), 200);
}

#[tokio::test]
async fn speech_failure_degrades_the_turn() {
    let (_dir, s) = server_with(|c| c.tts_url = "mock://fail".into()).await;
    let id = s.create_session().await;
    let r = s.post_text(&id, TRAFFIC).await;
    assert_eq!(r.status(), 200);
    let turn: Value = r.json().await.unwrap();
    assert_valid("TurnResponse", &turn);
    assert_eq!(turn["degraded"], true);
    assert_eq!(turn["response_text"], "I hate traffic too, it makes me crazy!");
    assert!(turn["audio"].is_null() && turn["video"].is_null());
    let outcomes = steps(&turn);
    assert_eq!(outcomes[4], (5, "failed".into()));
    assert_eq!(outcomes[5], (6, "skipped".into()));
    assert_eq!(outcomes[6], (7, "skipped".into()));
    assert_eq!(outcomes[7], (8, "ok".into()));
    let transcript = s.transcript(&id).await;
    assert_eq!(transcript["turns"][0]["response"]["degraded"], true);
}

#[tokio::test]
async fn face_failure_keeps_the_audio() {
    let (_dir, s) = server_with(|c| c.face_url = "mock://fail".into()).await;
    let id = s.create_session().await;
    let turn: Value = s.post_text(&id, TRAFFIC).await.json().await.unwrap();
    assert_eq!(turn["degraded"], true);
    assert!(turn["audio"].is_object());
    assert!(turn["video"].is_null());
    assert_eq!(steps(&turn)[6], (7, "failed".into()));
}

#[tokio::test]
async fn llm_failure_fails_the_turn_without_persisting() {
    let (_dir, s) = server_with(|c| c.llm_url = "mock://fail".into()).await;
    let id = s.create_session().await;
    let r = s.post_text(&id, TRAFFIC).await;
    assert_eq!(r.status(), 502);
    let body: Value = r.json().await.unwrap();
    assert_valid("Error", &body);
    assert_eq!(body["error"]["code"], "turn_failed");
    assert_eq!(body["error"]["step"], 3);
    assert_eq!(s.transcript(&id).await["turns"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn audio_turn_is_transcribed_into_the_prompt() {
    let (_dir, s) = server().await;
    let id = s.create_session().await;
    let wav = std::fs::read(demo_dir().join("inputs/traffic_voice.wav")).unwrap();
    let form = Form::new().part("audio", Part::bytes(wav.clone()).file_name("voice.wav"));
    let r = s.post_form(&id, "?trace=1", form).await;
    assert_eq!(r.status(), 200);
    let turn: Value = r.json().await.unwrap();
    let prompt = turn["trace"]["steps"][1]["detail"].as_str().unwrap();
    assert!(prompt.contains(TRAFFIC), "{prompt}");

    let transcript = s.transcript(&id).await;
    assert_valid("Transcript", &transcript);
    let input = &transcript["turns"][0]["input"];
    assert!(input["text"].is_null());
    assert!(input["surface"].as_str().unwrap().contains(TRAFFIC));
    assert_eq!(input["audio"]["format"], "wav");
    let stored = s
        .client
        .get(s.url(&format!("/api/media/{}", input["audio"]["hash"].as_str().unwrap())))
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap();
    assert_eq!(stored.as_ref(), wav.as_slice());
}

#[tokio::test]
async fn history_reaches_the_second_prompt() {
    let (_dir, s) = server().await;
    let id = s.create_session().await;
    s.post_text(&id, TRAFFIC).await;
    let second: Value = s
        .post_text(&id, "It took me two hours to get home.")
        .await
        .json()
        .await
        .unwrap();
    assert_eq!(second["turn_index"], 1);
    let prompt = second["trace"]["steps"][1]["detail"].as_str().unwrap();
    assert!(prompt.contains(&format!("User: {TRAFFIC}")), "{prompt}");
    assert!(
        prompt.contains("System: I hate traffic too, it makes me crazy!"),
        "{prompt}"
    );
}

#[tokio::test]
async fn meta_view_matches_a_fresh_parse() {
    let (_dir, s) = server().await;
    let id = s.create_session().await;
    let turn: Value = s.post_text(&id, TRAFFIC).await.json().await.unwrap();
    let transcript = s.transcript(&id).await;
    let record: TurnRecord = serde_json::from_value(transcript["turns"][0].clone()).unwrap();
    let rendered = empathyear_core::meta_response::render_meta_response(&record.meta);
    let reparsed = parse_meta_response(&rendered, Taxonomy::canonical()).unwrap();
    assert_eq!(reparsed.response_text, turn["meta"]["empathetic_response"]);
    assert_eq!(reparsed.emotion.label.as_str(), turn["meta"]["emotion_label"]);
}

#[tokio::test]
async fn one_session_is_serialized_while_sessions_run_in_parallel() {
    const DELAY_MS: u64 = 400;
    let (_dir, s) = server_with(|c| c.llm_url = format!("mock://local?delay_ms={DELAY_MS}")).await;
    let delay = Duration::from_millis(DELAY_MS);

    let a = s.create_session().await;
    let started = Instant::now();
    let (r1, r2) = tokio::join!(s.post_text(&a, TRAFFIC), s.post_text(&a, "Still angry about it."));
    let same_session = started.elapsed();
    let mut indices = vec![
        r1.json::<Value>().await.unwrap()["turn_index"].as_u64().unwrap(),
        r2.json::<Value>().await.unwrap()["turn_index"].as_u64().unwrap(),
    ];
    indices.sort();
    assert_eq!(indices, [0, 1]);
    assert!(
        same_session >= 2 * delay,
        "same-session turns overlapped: {same_session:?}"
    );

    let (b, c) = (s.create_session().await, s.create_session().await);
    let started = Instant::now();
    let (rb, rc) = tokio::join!(s.post_text(&b, TRAFFIC), s.post_text(&c, TRAFFIC));
    let parallel = started.elapsed();
    assert_eq!(rb.status(), 200);
    assert_eq!(rc.status(), 200);
    assert!(
        parallel < same_session,
        "parallel {parallel:?} vs serialized {same_session:?}"
    );

    // a reader is not blocked by a running turn
    let slow = s.post_text(&b, "And again.");
    let read = async {
        tokio::time::sleep(delay / 4).await;
        let t = Instant::now();
        let n = s.transcript(&b).await["turns"].as_array().unwrap().len();
        (n, t.elapsed())
    };
    let (_, (n, read_time)) = tokio::join!(slow, read);
    assert_eq!(n, 1);
    assert!(read_time < delay, "transcript read waited {read_time:?}");
}

#[tokio::test]
async fn static_dir_is_served_at_the_root() {
    let web = tempfile::tempdir().unwrap();
    std::fs::write(web.path().join("index.html"), "<!doctype html><title>ear</title>").unwrap();
    let root = web.path().to_path_buf();
    let (_dir, s) = server_with(move |c| c.static_dir = Some(root)).await;
    let r = s.client.get(s.url("/")).send().await.unwrap();
    assert_eq!(r.status(), 200);
    assert!(r.text().await.unwrap().contains("<title>ear</title>"));
    assert_eq!(s.client.get(s.url("/healthz")).send().await.unwrap().status(), 200);
}

#[tokio::test]
async fn index_page_without_static_dir() {
    let (_dir, s) = server().await;
    let text = s.client.get(s.url("/")).send().await.unwrap().text().await.unwrap();
    assert!(text.contains("POST /api/sessions"));
}
