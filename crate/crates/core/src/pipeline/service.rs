//! Queue-driven detection service and its line-delimited JSON wire format.
//!
//! Inbound lines are `{"chat_id": .., "text": .., "meta": {..}}`; every line
//! produces exactly one outbound record, including lines that fail to parse.
//! Verdicts are cached by `chat_id`, so a redelivered message gets the same
//! record back.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::{Arc, Condvar, Mutex};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{Detector, Label, Verdict};
use crate::normalizer::RawChat;

/// Bounded multi-producer multi-consumer FIFO. `pop` returns `None` once the
/// queue is closed and drained.
#[derive(Debug)]
pub struct InProcQueue<T> {
    state: Mutex<(VecDeque<T>, bool)>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
}

impl<T> InProcQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new((VecDeque::new(), false)),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    /// Blocks while the queue is full. Returns the item back if the queue
    /// has been closed.
    pub fn push(&self, item: T) -> Result<(), T> {
        let mut s = self.state.lock().expect("queue lock");
        while s.0.len() >= self.capacity && !s.1 {
            s = self.not_full.wait(s).expect("queue lock");
        }
        if s.1 {
            return Err(item);
        }
        s.0.push_back(item);
        self.not_empty.notify_one();
        Ok(())
    }

    pub fn pop(&self) -> Option<T> {
        let mut s = self.state.lock().expect("queue lock");
        loop {
            if let Some(item) = s.0.pop_front() {
                self.not_full.notify_one();
                return Some(item);
            }
            if s.1 {
                return None;
            }
            s = self.not_empty.wait(s).expect("queue lock");
        }
    }

    /// No further pushes; consumers drain what is left.
    pub fn close(&self) {
        self.state.lock().expect("queue lock").1 = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("queue lock").0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pops everything currently queued without blocking.
    pub fn drain(&self) -> Vec<T> {
        let mut s = self.state.lock().expect("queue lock");
        let out = s.0.drain(..).collect();
        self.not_full.notify_all();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InboundMessage {
    pub chat_id: String,
    pub text: String,
    #[serde(default = "empty_object")]
    pub meta: serde_json::Value,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireLabel {
    NotProfane,
    ProfaneDirect,
    ProfaneLatent,
    ServiceError,
}

impl From<Label> for WireLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::NotProfane => WireLabel::NotProfane,
            Label::ProfaneDirect => WireLabel::ProfaneDirect,
            Label::ProfaneLatent => WireLabel::ProfaneLatent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutboundRecord {
    pub chat_id: String,
    pub label: WireLabel,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sim: Option<f32>,
    /// `prefilter`, `stage1`, `stage2`, or `intake` for messages that could
    /// not be read.
    pub stage: String,
    pub latency_us: u64,
    pub meta: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl OutboundRecord {
    pub fn from_verdict(v: &Verdict, meta: serde_json::Value) -> Self {
        let e = v.evidence.as_ref();
        Self {
            chat_id: v.chat_id.clone(),
            label: v.label.into(),
            token: e.map(|e| e.token.clone()),
            key: e.map(|e| e.key.clone()),
            sim: e.map(|e| e.sim),
            stage: v.stage.to_string(),
            latency_us: v.latency_us,
            meta,
            error: None,
        }
    }

    pub fn service_error(chat_id: String, stage: &str, error: String, meta: serde_json::Value) -> Self {
        Self {
            chat_id,
            label: WireLabel::ServiceError,
            token: None,
            key: None,
            sim: None,
            stage: stage.to_owned(),
            latency_us: 0,
            meta,
            error: Some(error),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Remembers verdicts by chat id, evicting the oldest beyond `capacity`.
#[derive(Debug)]
struct VerdictCache {
    map: HashMap<String, OutboundRecord>,
    order: VecDeque<String>,
    capacity: usize,
}

impl VerdictCache {
    /// Stores `record` unless the id is already known; returns the cached one.
    fn settle(&mut self, record: OutboundRecord) -> OutboundRecord {
        if let Some(r) = self.map.get(&record.chat_id) {
            return r.clone();
        }
        if self.capacity == 0 {
            return record;
        }
        if self.map.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            }
        }
        self.order.push_back(record.chat_id.clone());
        self.map.insert(record.chat_id.clone(), record.clone());
        record
    }
}

/// Detection workers between an inbound queue of raw lines and an outbound
/// queue of records.
#[derive(Debug)]
pub struct Service {
    detector: Arc<Detector>,
    workers: usize,
    cache: Mutex<VerdictCache>,
}

impl Service {
    pub fn new(detector: Arc<Detector>, workers: usize, dedup_capacity: usize) -> Self {
        Self {
            detector,
            workers: workers.max(1),
            cache: Mutex::new(VerdictCache {
                map: HashMap::new(),
                order: VecDeque::new(),
                capacity: dedup_capacity,
            }),
        }
    }

    pub fn detector(&self) -> &Arc<Detector> {
        &self.detector
    }

    fn cached(&self, chat_id: &str) -> Option<OutboundRecord> {
        self.cache.lock().expect("cache lock").map.get(chat_id).cloned()
    }

    /// Turns one inbound line into exactly one outbound record.
    pub fn handle_line(&self, line: &str) -> OutboundRecord {
        let msg: InboundMessage = match serde_json::from_str(line) {
            Ok(m) => m,
            Err(e) => {
                let partial: serde_json::Value = serde_json::from_str(line).unwrap_or_default();
                let chat_id = partial
                    .get("chat_id")
                    .and_then(|v| v.as_str())
                    .unwrap_or_default()
                    .to_owned();
                let meta = partial
                    .get("meta")
                    .filter(|m| m.is_object())
                    .cloned()
                    .unwrap_or_else(empty_object);
                warn!("malformed message: {e}");
                return OutboundRecord::service_error(chat_id, "intake", e.to_string(), meta);
            }
        };
        if let Some(mut hit) = self.cached(&msg.chat_id) {
            hit.meta = msg.meta;
            return hit;
        }
        let chat = RawChat {
            id: msg.chat_id.clone(),
            text: msg.text,
            meta: msg.meta.clone(),
        };
        match self.detector.detect(&chat) {
            Ok(v) => {
                let record = OutboundRecord::from_verdict(&v, msg.meta.clone());
                let mut settled = self.cache.lock().expect("cache lock").settle(record);
                settled.meta = msg.meta;
                settled
            }
            Err(e) => {
                warn!("chat {:?}: {e}", msg.chat_id);
                OutboundRecord::service_error(msg.chat_id, "detect", e.to_string(), msg.meta)
            }
        }
    }

    /// Runs the workers until `inbound` is closed and drained.
    pub fn run(&self, inbound: &InProcQueue<String>, outbound: &InProcQueue<OutboundRecord>) {
        std::thread::scope(|s| {
            for _ in 0..self.workers {
                s.spawn(|| {
                    while let Some(line) = inbound.pop() {
                        if line.trim().is_empty() {
                            continue;
                        }
                        if outbound.push(self.handle_line(&line)).is_err() {
                            warn!("outbound queue closed; dropping verdict");
                        }
                    }
                });
            }
        });
    }
}

/// Serves one line-oriented stream: reads requests from `input` and writes
/// one JSON record per line to `output`. Output order follows completion.
pub fn serve_lines<R, W>(service: &Service, input: R, output: W, capacity: usize) -> std::io::Result<()>
where
    R: BufRead + Send,
    W: Write + Send,
{
    let inbound = InProcQueue::new(capacity);
    let outbound: InProcQueue<OutboundRecord> = InProcQueue::new(capacity);
    std::thread::scope(|s| {
        let reader = s.spawn(|| {
            let mut result = Ok(());
            for line in input.lines() {
                match line {
                    Ok(l) => {
                        if inbound.push(l).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                }
            }
            inbound.close();
            result
        });
        let writer = s.spawn(|| {
            let mut output = output;
            let mut result = Ok(());
            while let Some(rec) = outbound.pop() {
                if result.is_ok() {
                    result = writeln!(output, "{}", rec.to_line()).and_then(|_| output.flush());
                }
            }
            result
        });
        service.run(&inbound, &outbound);
        outbound.close();
        let r = reader.join().expect("reader thread");
        let w = writer.join().expect("writer thread");
        r.and(w)
    })
}

/// Accepts connections forever, serving each with [`serve_lines`] on its
/// own thread.
pub fn serve_tcp(service: Arc<Service>, listener: TcpListener, capacity: usize) -> std::io::Result<()> {
    info!("listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let service = service.clone();
        std::thread::spawn(move || {
            let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
            let reader = match stream.try_clone() {
                Ok(r) => BufReader::new(r),
                Err(e) => {
                    warn!("{peer}: {e}");
                    return;
                }
            };
            if let Err(e) = serve_lines(&service, reader, stream, capacity) {
                warn!("{peer}: {e}");
            }
        });
    }
    Ok(())
}
