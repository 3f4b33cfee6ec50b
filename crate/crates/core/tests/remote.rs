use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};
use vlprobe::exec::Executor;
use vlprobe::explain::relevancy;
use vlprobe::lexicon::Lexicon;
use vlprobe::model::remote::{RemoteBackend, ERR_MALFORMED, ERR_MODEL, ERR_UNKNOWN_OP};
use vlprobe::model::{itm_probability, predict_masked, ModelBackend, ReadoutTarget, TextInput};
use vlprobe::probing::{run_guided_masking, Condition, ProbeConfig};
use vlprobe::synthetic::{generate_synthetic_corpus, SyntheticCorpusSpec};
use vlprobe::text::{caption_from_words, mask_at, Vocabulary};
use vlprobe::visual::{BBox, RoiFeature, VisualInput};
use vlprobe::{Error, ErrorKind};

/// (connection number, raw request line)
type Log = Arc<Mutex<Vec<(usize, String)>>>;

/// Answers from a fixed script: the masked word is always ranked first.
fn respond(line: &str) -> Value {
    let req: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return json!({"id": 0, "error": {"code": ERR_MALFORMED, "message": e.to_string()}}),
    };
    let id = req["id"].as_u64().unwrap_or(0);
    let words: Vec<&str> = req["text"]
        .as_array()
        .map(|a| a.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    if words.first() == Some(&"liar") {
        return json!({"id": id + 1, "match_prob": 0.5});
    }
    match req["op"].as_str() {
        Some("info") => json!({"id": id, "model": "stub", "vocab_size": 5, "capabilities": ["mlm", "itm", "attn"]}),
        Some("mlm") => {
            let i = req["mask_index"].as_u64().unwrap() as usize;
            if words[i] == "explode" {
                return json!({"id": id, "error": {"code": ERR_MODEL, "message": "inference failed"}});
            }
            let mut topk = vec![json!({"token": words[i], "prob": 0.6})];
            for (w, p) in [("standing", 0.2), ("eating", 0.1)] {
                if w != words[i] {
                    topk.push(json!({"token": w, "prob": p}));
                }
            }
            topk.truncate(req["options"]["topk"].as_u64().unwrap_or(100) as usize);
            json!({"id": id, "topk": topk})
        }
        Some("itm") => json!({"id": id, "match_prob": if words.contains(&"sitting") { 0.9 } else { 0.1 }}),
        Some("attn") => {
            let n = words.len() + 2 + req["rois"].as_array().map_or(0, Vec::len);
            let eye: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
            json!({"id": id, "attention": [[eye]]})
        }
        _ => json!({"id": id, "error": {"code": ERR_UNKNOWN_OP, "message": "unknown op"}}),
    }
}

fn spawn_stub() -> (String, Log) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let log: Log = Default::default();
    let shared = log.clone();
    thread::spawn(move || {
        for (n, stream) in listener.incoming().enumerate() {
            let Ok(stream) = stream else { break };
            let log = shared.clone();
            thread::spawn(move || {
                let mut writer = stream.try_clone().unwrap();
                for line in BufReader::new(stream).lines() {
                    let Ok(line) = line else { break };
                    log.lock().unwrap().push((n, line.clone()));
                    let reply = respond(&line).to_string();
                    if writer.write_all(format!("{reply}\n").as_bytes()).is_err() {
                        break;
                    }
                }
            });
        }
    });
    (addr, log)
}

fn scene() -> VisualInput {
    VisualInput::new(
        "img",
        vec![RoiFeature {
            bbox: BBox::new(0.1, 0.2, 0.5, 0.9).unwrap(),
            feature: vec![0.1, 1.0, -2.5],
            label: "girl".into(),
            score: 0.9,
        }],
    )
    .unwrap()
}

#[test]
fn info_sets_capabilities() {
    let (addr, log) = spawn_stub();
    let b = RemoteBackend::connect(&addr, 3).unwrap();
    assert_eq!(b.name(), "remote:stub");
    assert_eq!(b.visual_dim(), 3);
    let caps = b.capabilities();
    assert!(caps.mlm && caps.itm);
    // the wire attn op carries no gradients
    assert!(!caps.attention_introspection);
    assert_eq!(log.lock().unwrap()[0].1, r#"{"id":1,"op":"info","options":{}}"#);
}

#[test]
fn mlm_request_and_distribution() {
    let (addr, log) = spawn_stub();
    let b = RemoteBackend::connect(&addr, 3).unwrap().with_topk(2);
    let vocab = Vocabulary::new(["girl", "sitting", "grass"]);
    let cap = caption_from_words(&["girl", "sitting", "on", "grass"], &vocab).unwrap();
    let masked = mask_at(&cap, 1).unwrap();
    let d = predict_masked(&b, &scene(), &masked).unwrap();
    let top: Vec<&str> = d.top_k_words(2).into_iter().map(|(w, _)| w).collect();
    assert_eq!(top, ["sitting", "standing"]);
    assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((d.prob("sitting") - 0.6).abs() < 1e-12);

    let expected = concat!(
        r#"{"id":2,"op":"mlm","text":["girl","sitting","on","grass"],"mask_index":1,"#,
        r#""rois":[{"bbox":[0.10000000149011612,0.20000000298023224,0.5,0.8999999761581421],"#,
        r#""feature":[0.10000000149011612,1.0,-2.5],"label":"girl","score":0.8999999761581421}],"#,
        r#""options":{"topk":2}}"#
    );
    assert_eq!(log.lock().unwrap()[1].1, expected);
}

#[test]
fn itm_and_attention() {
    let (addr, _) = spawn_stub();
    let b = RemoteBackend::connect(&addr, 3).unwrap();
    let vocab = Vocabulary::new(["girl", "sitting", "grass"]);
    let yes = caption_from_words(&["girl", "sitting"], &vocab).unwrap();
    let no = caption_from_words(&["girl", "running"], &vocab).unwrap();
    assert_eq!(itm_probability(&b, &scene(), &yes).unwrap(), 0.9);
    assert_eq!(itm_probability(&b, &scene(), &no).unwrap(), 0.1);
    let att = b.attention(&scene(), &yes).unwrap();
    assert_eq!(att.len(), 1);
    assert_eq!(att[0][0].len(), 5);
    let err = relevancy(&b, &scene(), TextInput::Plain(&yes), ReadoutTarget::ItmClass { class: 1 }).unwrap_err();
    assert!(matches!(err, Error::Capability("attention_introspection")));
}

#[test]
fn server_errors_carry_a_transcript_and_keep_the_connection() {
    let (addr, log) = spawn_stub();
    let b = RemoteBackend::connect(&addr, 3).unwrap();
    let vocab = Vocabulary::new(["girl"]);
    let cap = caption_from_words(&["girl", "explode"], &vocab).unwrap();
    let err = b.predict_masked(&scene(), &mask_at(&cap, 1).unwrap()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Backend);
    let Error::Backend { message, transcript } = err else { unreachable!() };
    assert!(message.contains("12"), "{message}");
    assert_eq!(transcript.len(), 2);
    assert!(transcript[0].starts_with("> ") && transcript[0].contains("explode"));
    assert!(transcript[1].starts_with("< ") && transcript[1].contains("inference failed"));

    let ok = caption_from_words(&["girl", "sitting"], &vocab).unwrap();
    b.predict_masked(&scene(), &mask_at(&ok, 1).unwrap()).unwrap();
    let log = log.lock().unwrap();
    assert!(log.iter().all(|(conn, _)| *conn == 0));
    assert_eq!(log.len(), 3);
}

#[test]
fn id_mismatch_is_rejected() {
    let (addr, _) = spawn_stub();
    let b = RemoteBackend::connect(&addr, 3).unwrap();
    let vocab = Vocabulary::new(["liar"]);
    let cap = caption_from_words(&["liar", "sitting"], &vocab).unwrap();
    let Err(Error::Backend { message, .. }) = b.itm_probability(&scene(), &cap) else {
        panic!("expected a backend error");
    };
    assert!(message.contains("does not echo"), "{message}");
}

#[test]
fn unreachable_endpoint_is_a_backend_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = RemoteBackend::connect(&format!("127.0.0.1:{port}"), 3).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Backend);
}

#[test]
fn stub_reports_malformed_and_unknown_ops() {
    assert_eq!(respond("{not json")["error"]["code"], ERR_MALFORMED);
    assert_eq!(respond(r#"{"id":4,"op":"dance"}"#)["error"]["code"], ERR_UNKNOWN_OP);
}

#[test]
fn parallel_workers_keep_per_connection_order() {
    let (addr, log) = spawn_stub();
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec {
        n_samples: 48,
        ..Default::default()
    })
    .unwrap();
    let b = RemoteBackend::connect(&addr, corpus.spec.d_v).unwrap();
    let config = ProbeConfig {
        k: 1,
        ..Default::default()
    };
    let lex = Lexicon::english();
    let run = run_guided_masking(&corpus.samples, &b, &config, &lex, &Executor::new(3).unwrap()).unwrap();
    for r in &run.results {
        assert_eq!(r.n_evaluated, 48, "{:?}", r.condition);
        assert_eq!(r.accuracy, 1.0);
    }
    let sequential = run_guided_masking(&corpus.samples, &b, &config, &lex, &Executor::sequential()).unwrap();
    assert_eq!(sequential, run);
    assert_eq!(run.result(Condition::TextOnly).unwrap().top_k_hits, 48);

    let log = log.lock().unwrap();
    assert_eq!(log.len(), 1 + 2 * 4 * 48);
    let conns = log.iter().map(|(c, _)| *c).max().unwrap() + 1;
    assert!(conns <= 4, "{conns} connections");
    for c in 0..conns {
        let ids: Vec<u64> = log
            .iter()
            .filter(|(n, _)| *n == c)
            .map(|(_, l)| serde_json::from_str::<Value>(l).unwrap()["id"].as_u64().unwrap())
            .collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]), "connection {c}: {ids:?}");
    }
}
