//! Client side of the line-oriented JSON embedding protocol.
//!
//! ```text
//! -> {"id":0,"op":"hello"}
//! <- {"id":0,"dim":384}
//! -> {"id":1,"op":"embed","texts":["a","b"]}
//! <- {"id":1,"embeddings":[[...],[...]]}
//! <- {"id":n,"error":"message"}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};

use serde_json::{json, Value};

use crate::error::{Error, Result};

pub struct SidecarClient {
    child: Option<Child>,
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
    dim: usize,
}

impl SidecarClient {
    /// Runs `command` via `sh -c` and performs the hello handshake.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot launch sidecar `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::handshake(Box::new(BufReader::new(stdout)), Box::new(stdin))?;
        client.child = Some(child);
        Ok(client)
    }

    /// Connects over arbitrary streams; used for in-process transports and tests.
    pub fn from_streams<R, W>(reader: R, writer: W) -> Result<Self>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::handshake(Box::new(reader), Box::new(writer))
    }

    fn handshake(reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>) -> Result<Self> {
        let mut c = SidecarClient { child: None, reader, writer, next_id: 0, dim: 0 };
        let reply = c.request(json!({"op": "hello"}))?;
        let dim = reply
            .get("dim")
            .and_then(Value::as_u64)
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Transport(format!("hello reply without dim: {reply}")))?;
        c.dim = dim as usize;
        Ok(c)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn request(&mut self, mut msg: Value) -> Result<Value> {
        let id = self.next_id;
        self.next_id += 1;
        // `id` goes first on the wire.
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), json!(id));
        if let Value::Object(rest) = msg.take() {
            obj.extend(rest);
        }
        let line = serde_json::to_string(&Value::Object(obj))?;
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Transport(format!("write to sidecar failed: {e}")))?;

        let mut buf = String::new();
        let n = self.reader.read_line(&mut buf).map_err(|e| Error::Transport(format!("read from sidecar failed: {e}")))?;
        if n == 0 {
            return Err(Error::Transport("sidecar closed its output".into()));
        }
        let reply: Value =
            serde_json::from_str(buf.trim_end()).map_err(|e| Error::Transport(format!("malformed sidecar reply: {e}")))?;
        if reply.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(Error::Transport(format!("reply id mismatch, expected {id}: {reply}")));
        }
        if let Some(err) = reply.get("error") {
            return Err(Error::Transport(format!("sidecar error: {err}")));
        }
        Ok(reply)
    }

    pub fn embed(&mut self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let reply = self.request(json!({"op": "embed", "texts": texts}))?;
        let rows = reply
            .get("embeddings")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Transport(format!("embed reply without embeddings: {reply}")))?;
        if rows.len() != texts.len() {
            return Err(Error::Transport(format!("asked for {} embeddings, got {}", texts.len(), rows.len())));
        }
        rows.iter()
            .map(|r| {
                let v: Vec<f32> = r
                    .as_array()
                    .ok_or_else(|| Error::Transport("embedding is not an array".into()))?
                    .iter()
                    .map(|x| x.as_f64().map(|f| f as f32))
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Transport("non-numeric embedding value".into()))?;
                if v.len() != self.dim {
                    return Err(Error::EmbedConfig(format!("sidecar sent length {} but declared dim {}", v.len(), self.dim)));
                }
                Ok(v)
            })
            .collect()
    }
}

impl Drop for SidecarClient {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            // Closing stdin lets the sidecar exit at EOF.
            self.writer = Box::new(std::io::sink());
            let _ = child.wait();
        }
    }
}
