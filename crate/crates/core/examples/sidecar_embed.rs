//! Talks to a text-embedding sidecar over the line-oriented JSON protocol.
//! Without arguments a toy sidecar runs in a thread on an in-process pipe;
//! with a command (for example `python embed_sidecar.py`) that process is
//! spawned instead.
//!
//! Usage: sidecar_embed [sidecar command]

use std::io::{BufRead, BufReader, Write};
use std::thread;

use serde_json::{json, Value};

use portal::embed::{fallback_embed, EmbedderHandle, SidecarClient};

const DIM: usize = 64;

/// Answers hello and embed requests with the hashing embedder.
fn toy_sidecar(input: impl BufRead, mut output: impl Write) -> anyhow::Result<()> {
    for line in input.lines() {
        let req: Value = match serde_json::from_str(&line?) {
            Ok(v) => v,
            Err(e) => {
                writeln!(output, "{}", json!({"id": null, "error": e.to_string()}))?;
                continue;
            }
        };
        let reply = match req["op"].as_str() {
            Some("hello") => json!({"id": req["id"], "dim": DIM}),
            Some("embed") => {
                let texts = req["texts"].as_array().cloned().unwrap_or_default();
                let vectors: Vec<Vec<f32>> = texts.iter().map(|t| fallback_embed(t.as_str().unwrap_or(""), DIM)).collect();
                json!({"id": req["id"], "embeddings": vectors})
            }
            _ => json!({"id": req["id"], "error": "unknown op"}),
        };
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (norm(a) * norm(b)).max(f64::MIN_POSITIVE)
}

fn main() -> anyhow::Result<()> {
    let embedder = match std::env::args().nth(1) {
        Some(command) => EmbedderHandle::spawn_sidecar(&command, None)?,
        None => {
            let (to_sidecar_rx, to_sidecar_tx) = std::io::pipe()?;
            let (from_sidecar_rx, from_sidecar_tx) = std::io::pipe()?;
            thread::spawn(move || toy_sidecar(BufReader::new(to_sidecar_rx), from_sidecar_tx));
            EmbedderHandle::sidecar(SidecarClient::from_streams(BufReader::new(from_sidecar_rx), to_sidecar_tx)?)
        }
    };
    println!("sidecar reports dimension {}", embedder.dim());
    let texts = ["Lisbon", "lisbon", "Porto", "a completely different sentence"];
    let vectors = embedder.embed_text(&texts)?;
    for (t, v) in texts.iter().zip(&vectors) {
        println!("{t:<32} cosine to `{}` {:.3}", texts[0], cosine(&vectors[0], v));
    }
    Ok(())
}
