//! Client for external models served over a line-delimited JSON protocol
//! on a child process's stdin/stdout.
//!
//! Requests: `{"id", "op": "hello" | "topk" | "logprob_batch", ...}`.
//! Responses echo the id: `{"id", "ok", "result" | "error"}`. `hello` must be
//! the first request and returns `{vocab_size, protocol_version}`.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{check_k, check_token, LanguageModel, Prediction, Query};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

const MAX_MESSAGE_BYTES: usize = 16 * 1024 * 1024;

struct Connection {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    ok: bool,
    #[serde(default)]
    result: Value,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct Hello {
    vocab_size: usize,
    protocol_version: u32,
}

impl Connection {
    fn send(&mut self, mut request: Value) -> Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        request["id"] = json!(id);
        let line = serde_json::to_string(&request)?;
        if line.len() + 1 > MAX_MESSAGE_BYTES {
            return Err(Error::Protocol(format!(
                "request of {} bytes exceeds message limit",
                line.len()
            )));
        }
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Protocol("connection closed".into()))?;
        stdin.write_all(line.as_bytes())?;
        stdin.write_all(b"\n")?;
        Ok(id)
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(stdin) = self.stdin.as_mut() {
            stdin.flush()?;
        }
        Ok(())
    }

    fn receive(&mut self, id: u64) -> Result<Value> {
        let mut line = String::new();
        let n = Read::by_ref(&mut self.stdout)
            .take(MAX_MESSAGE_BYTES as u64 + 1)
            .read_line(&mut line)?;
        if n == 0 {
            return Err(Error::Protocol("server closed the stream".into()));
        }
        if n > MAX_MESSAGE_BYTES {
            return Err(Error::Protocol("response exceeds message limit".into()));
        }
        let resp: Response = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Protocol(format!("unparseable response: {e}")))?;
        if resp.id != id {
            return Err(Error::Protocol(format!(
                "response id {} does not match request id {id}",
                resp.id
            )));
        }
        if !resp.ok {
            return Err(Error::Protocol(
                resp.error.unwrap_or_else(|| "request failed".into()),
            ));
        }
        Ok(resp.result)
    }

    fn call(&mut self, request: Value) -> Result<Value> {
        let id = self.send(request)?;
        self.flush()?;
        self.receive(id)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        // Closing stdin lets the server exit cleanly.
        drop(self.stdin.take());
        let _ = self.child.wait();
    }
}

/// A [`LanguageModel`] answered by an external process.
///
/// Access is serialized per connection; open one adapter per worker for
/// parallel use.
pub struct AdapterModel {
    conn: Mutex<Connection>,
    vocab_size: usize,
}

impl AdapterModel {
    /// Runs `command` through `sh -c` and performs the handshake.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut conn = Connection {
            child,
            stdin: Some(BufWriter::new(stdin)),
            stdout: BufReader::new(stdout),
            next_id: 0,
        };
        let hello: Hello = serde_json::from_value(conn.call(json!({"op": "hello"}))?)
            .map_err(|e| Error::Protocol(format!("bad hello result: {e}")))?;
        if hello.protocol_version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "server speaks protocol {}, client {PROTOCOL_VERSION}",
                hello.protocol_version
            )));
        }
        if hello.vocab_size == 0 {
            return Err(Error::Protocol("server declared an empty vocabulary".into()));
        }
        Ok(Self {
            conn: Mutex::new(conn),
            vocab_size: hello.vocab_size,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn parse_ids(&self, v: Value, k: usize) -> Result<Vec<TokenId>> {
        let ids: Vec<TokenId> = serde_json::from_value(v)
            .map_err(|e| Error::Protocol(format!("bad topk result: {e}")))?;
        if ids.len() != k || ids.iter().any(|&t| t as usize >= self.vocab_size) {
            return Err(Error::Protocol(format!("topk result {ids:?} invalid for k={k}")));
        }
        Ok(ids)
    }

    fn parse_logprobs(v: Value, n: usize) -> Result<Vec<f64>> {
        let lps: Vec<f64> = serde_json::from_value(v)
            .map_err(|e| Error::Protocol(format!("bad logprob_batch result: {e}")))?;
        if lps.len() != n {
            return Err(Error::Protocol(format!(
                "logprob_batch returned {} values for {n} items",
                lps.len()
            )));
        }
        Ok(lps)
    }

    /// Scores `(context, token)` pairs in one request.
    pub fn logprob_batch(&self, items: &[(&[TokenId], TokenId)]) -> Result<Vec<f64>> {
        for &(_, t) in items {
            check_token(t, self.vocab_size)?;
        }
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let result = self
            .lock()
            .call(json!({"op": "logprob_batch", "items": items}))?;
        Self::parse_logprobs(result, items.len())
    }
}

impl LanguageModel for AdapterModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let items: Vec<(&[TokenId], TokenId)> =
            (0..self.vocab_size as TokenId).map(|t| (context, t)).collect();
        Ok(self
            .logprob_batch(&items)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    fn log_prob(&self, context: &[TokenId], token: TokenId) -> Result<f64> {
        Ok(self.logprob_batch(&[(context, token)])?[0])
    }

    fn top_k(&self, context: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
        check_k(k, self.vocab_size)?;
        let result = self
            .lock()
            .call(json!({"op": "topk", "context": context, "k": k}))?;
        self.parse_ids(result, k)
    }

    /// Pipelines one `topk` request per query, then scores every target and
    /// every top-1 token in a single `logprob_batch`.
    fn predict_batch(&self, queries: &[Query<'_>], k: usize) -> Result<Vec<Prediction>> {
        check_k(k, self.vocab_size)?;
        for q in queries {
            check_token(q.target, self.vocab_size)?;
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut conn = self.lock();
        let mut ids = Vec::with_capacity(queries.len());
        for q in queries {
            ids.push(conn.send(json!({"op": "topk", "context": q.context, "k": k}))?);
        }
        conn.flush()?;
        let mut ranked = Vec::with_capacity(queries.len());
        for id in ids {
            let v = conn.receive(id)?;
            ranked.push(self.parse_ids(v, k)?);
        }
        let mut items: Vec<(&[TokenId], TokenId)> = Vec::with_capacity(2 * queries.len());
        for (q, top) in queries.iter().zip(&ranked) {
            items.push((q.context, q.target));
            items.push((q.context, top[0]));
        }
        let lps = Self::parse_logprobs(
            conn.call(json!({"op": "logprob_batch", "items": items}))?,
            items.len(),
        )?;
        Ok(ranked
            .into_iter()
            .zip(lps.chunks_exact(2))
            .map(|(top_k, pair)| Prediction {
                top_k,
                target_log_prob: pair[0],
                top1_prob: pair[1].exp(),
            })
            .collect())
    }
}
