//! Client side of the line-delimited JSON protocol spoken by out-of-process
//! model servers.
//!
//! One request per line, one response per line, over TCP. Requests carry a
//! per-connection id that strictly increases; the response must echo it.
//! Error codes: 10 unknown op, 11 malformed record, 12 model failure.
//!
//! A server returns only the top-k of its distribution. The client turns that
//! into a [`PredictionDistribution`] over a per-response vocabulary (reserved
//! tokens, then the returned words in rank order) and books the mass outside
//! the top-k on `[PAD]`, which rankings never consider.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Capabilities, ModelBackend, PredictionDistribution};
use crate::error::{Error, Result};
use crate::text::{Caption, MaskedCaption, Vocabulary, PAD};
use crate::visual::VisualInput;

pub const ERR_UNKNOWN_OP: i64 = 10;
pub const ERR_MALFORMED: i64 = 11;
pub const ERR_MODEL: i64 = 12;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
/// Region values are widened to f64 on the wire so every f32 is printed with
/// enough digits to survive a round trip through any JSON reader.
pub struct WireRoi {
    pub bbox: [f64; 4],
    pub feature: Vec<f64>,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct WireOptions {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topk: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireRequest {
    pub id: u64,
    pub op: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub text: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rois: Vec<WireRoi>,
    #[serde(default)]
    pub options: WireOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireToken {
    pub token: String,
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireError {
    pub code: i64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<Vec<WireToken>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_prob: Option<f64>,
    /// `[layer][head]` square matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
    /// Anything else the server reports (`info` metadata lands here).
    #[serde(flatten)]
    pub extra: serde_json::Map<String, Value>,
}

pub fn wire_rois(image: &VisualInput) -> Vec<WireRoi> {
    image
        .rois
        .iter()
        .map(|r| WireRoi {
            bbox: r.bbox.as_array().map(f64::from),
            feature: r.feature.iter().map(|&v| f64::from(v)).collect(),
            label: r.label.clone(),
            score: f64::from(r.score),
        })
        .collect()
}

/// Checks a top-k list and converts it to a distribution.
pub fn topk_distribution(topk: &[WireToken]) -> Result<PredictionDistribution> {
    let mut prev = f64::INFINITY;
    let mut words = Vec::with_capacity(topk.len());
    for t in topk {
        if !(0.0..=1.0).contains(&t.prob) {
            return Err(Error::backend(format!("probability {} for {:?} outside [0,1]", t.prob, t.token)));
        }
        if t.prob > prev {
            return Err(Error::backend("top-k probabilities are not descending"));
        }
        prev = t.prob;
        words.push(t.token.to_lowercase());
    }
    let vocab = Vocabulary::new(&words);
    if vocab.len() != words.len() + crate::text::RESERVED.len() {
        return Err(Error::backend("top-k list repeats a token or names a reserved token"));
    }
    let mut probs = vec![0.0; vocab.len()];
    let mut total = 0.0;
    for (i, t) in topk.iter().enumerate() {
        probs[crate::text::RESERVED.len() + i] = t.prob;
        total += t.prob;
    }
    if total > 1.0 + PredictionDistribution::TOLERANCE {
        return Err(Error::backend(format!("top-k probabilities sum to {total}")));
    }
    probs[PAD as usize] = (1.0 - total).max(0.0);
    PredictionDistribution::new(probs, Arc::new(vocab))
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
}

impl Connection {
    fn open(endpoint: &str, timeout: Duration) -> Result<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::backend(format!("cannot resolve {endpoint}: {e}")))?
            .next()
            .ok_or_else(|| Error::backend(format!("no address for {endpoint}")))?;
        let stream = TcpStream::connect_timeout(&addr, timeout)
            .map_err(|e| Error::backend(format!("cannot connect to {endpoint}: {e}")))?;
        stream
            .set_read_timeout(Some(timeout))
            .and_then(|_| stream.set_write_timeout(Some(timeout)))
            .and_then(|_| stream.set_nodelay(true))
            .map_err(|e| Error::backend(e.to_string()))?;
        let writer = stream.try_clone().map_err(|e| Error::backend(e.to_string()))?;
        Ok(Connection {
            reader: BufReader::new(stream),
            writer,
            next_id: 1,
        })
    }

    fn call(&mut self, mut request: WireRequest) -> Result<WireResponse> {
        request.id = self.next_id;
        self.next_id += 1;
        let line = serde_json::to_string(&request).map_err(|e| Error::backend(e.to_string()))?;
        let fail = |message: String, response: Option<&str>| {
            let mut transcript = vec![format!("> {line}")];
            if let Some(r) = response {
                transcript.push(format!("< {r}"));
            }
            Error::Backend { message, transcript }
        };
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| fail(format!("send failed: {e}"), None))?;
        let mut reply = String::new();
        match self.reader.read_line(&mut reply) {
            Ok(0) => return Err(fail("connection closed".into(), None)),
            Ok(_) => {}
            Err(e) => return Err(fail(format!("receive failed: {e}"), None)),
        }
        let reply = reply.trim_end();
        let response: WireResponse =
            serde_json::from_str(reply).map_err(|e| fail(format!("unparseable response: {e}"), Some(reply)))?;
        if response.id != request.id {
            return Err(fail(
                format!("response id {} does not echo request id {}", response.id, request.id),
                Some(reply),
            ));
        }
        if let Some(err) = &response.error {
            return Err(fail(format!("server error {}: {}", err.code, err.message), Some(reply)));
        }
        Ok(response)
    }
}

/// Model served by another process. Connections are pooled so that parallel
/// workers each hold their own.
pub struct RemoteBackend {
    endpoint: String,
    timeout: Duration,
    pool: Mutex<Vec<Connection>>,
    capabilities: Capabilities,
    model: String,
    visual_dim: usize,
    topk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteInfo {
    pub model: String,
    pub vocab_size: Option<usize>,
    pub capabilities: Capabilities,
    pub visual_dim: Option<usize>,
}

impl RemoteBackend {
    pub const DEFAULT_TOPK: usize = 100;

    /// Connects and queries `info`. `visual_dim` is used when the server does
    /// not report one.
    pub fn connect(endpoint: &str, visual_dim: usize) -> Result<Self> {
        Self::connect_with_timeout(endpoint, visual_dim, Duration::from_secs(60))
    }

    pub fn connect_with_timeout(endpoint: &str, visual_dim: usize, timeout: Duration) -> Result<Self> {
        let mut conn = Connection::open(endpoint, timeout)?;
        let info = parse_info(conn.call(request("info"))?)?;
        Ok(RemoteBackend {
            endpoint: endpoint.to_string(),
            timeout,
            pool: Mutex::new(vec![conn]),
            capabilities: Capabilities {
                attention_introspection: false,
                ..info.capabilities
            },
            model: info.model,
            visual_dim: info.visual_dim.unwrap_or(visual_dim),
            topk: Self::DEFAULT_TOPK,
        })
    }

    pub fn with_topk(mut self, topk: usize) -> Self {
        self.topk = topk.max(1);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn call(&self, req: WireRequest) -> Result<WireResponse> {
        let conn = self.pool.lock().expect("connection pool poisoned").pop();
        let mut conn = match conn {
            Some(c) => c,
            None => Connection::open(&self.endpoint, self.timeout)?,
        };
        let result = conn.call(req);
        // A connection that failed at the transport level may be out of sync; drop it.
        let reusable = match &result {
            Ok(_) => true,
            Err(Error::Backend { transcript, .. }) => transcript.len() == 2,
            Err(_) => false,
        };
        if reusable {
            self.pool.lock().expect("connection pool poisoned").push(conn);
        }
        result
    }

    /// Raw attention maps, `[layer][head]`, when the server exposes them.
    pub fn attention(&self, image: &VisualInput, caption: &Caption) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
        let mut req = request("attn");
        req.text = caption.words.clone();
        req.rois = wire_rois(image);
        self.call(req)?
            .attention
            .ok_or_else(|| Error::backend("attn response without attention"))
    }
}

fn request(op: &str) -> WireRequest {
    WireRequest {
        id: 0,
        op: op.to_string(),
        text: Vec::new(),
        mask_index: None,
        rois: Vec::new(),
        options: WireOptions::default(),
    }
}

fn parse_info(resp: WireResponse) -> Result<RemoteInfo> {
    let mut map = resp.extra;
    map.entry("capabilities").or_insert(Value::Object(Default::default()));
    // Servers may list capabilities either as an object of flags or as names.
    if let Some(Value::Array(names)) = map.get("capabilities") {
        let has = |n: &str| names.iter().any(|v| v.as_str() == Some(n));
        let caps = Capabilities {
            mlm: has("mlm"),
            itm: has("itm"),
            attention_introspection: has("attn") || has("attention_introspection"),
        };
        map.insert("capabilities".into(), serde_json::to_value(caps).expect("plain struct"));
    }
    if let Some(Value::Object(caps)) = map.get_mut("capabilities") {
        for k in ["mlm", "itm", "attention_introspection"] {
            caps.entry(k).or_insert(Value::Bool(false));
        }
    }
    map.entry("model").or_insert(Value::String("remote".into()));
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::backend(format!("bad info response: {e}")))
}

impl ModelBackend for RemoteBackend {
    fn name(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    fn predict_masked(&self, image: &VisualInput, masked: &MaskedCaption) -> Result<PredictionDistribution> {
        let mut req = request("mlm");
        req.text = masked.base.words.clone();
        req.mask_index = Some(masked.mask_index);
        req.rois = wire_rois(image);
        req.options.topk = Some(self.topk);
        let resp = self.call(req)?;
        let topk = resp.topk.ok_or_else(|| Error::backend("mlm response without topk"))?;
        topk_distribution(&topk)
    }

    fn itm_probability(&self, image: &VisualInput, caption: &Caption) -> Result<f64> {
        let mut req = request("itm");
        req.text = caption.words.clone();
        req.rois = wire_rois(image);
        let p = self
            .call(req)?
            .match_prob
            .ok_or_else(|| Error::backend("itm response without match_prob"))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::backend(format!("match_prob {p} outside [0,1]")));
        }
        Ok(p)
    }
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("capabilities", &self.capabilities)
            .finish()
    }
}
