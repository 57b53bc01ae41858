//! Online ranking over a stored embedding table, served as line-delimited
//! JSON over TCP.
//!
//! Request: `{"history": [ids], "candidates": [ids] | null, "k": n}` with an
//! optional `"cold_start_fallback": true` that drops unknown history ids
//! instead of failing. Response: `{"items": [{"id", "score"}], "latency_us"}`
//! or `{"error": {"code", "detail"}}`.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::eval::{EmbeddingScorer, Scorer};
use crate::ranker::{score_and_rank, RankerParams};
use crate::store::FeatureStore;

const MAX_LINE: usize = 1 << 20;
const POLL: Duration = Duration::from_millis(50);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRequest {
    pub history: Vec<u32>,
    #[serde(default)]
    pub candidates: Option<Vec<u32>>,
    pub k: usize,
    #[serde(default)]
    pub cold_start_fallback: bool,
}

/// Immutable state shared by every connection.
pub struct Snapshot {
    scorer: EmbeddingScorer,
}

impl Snapshot {
    pub fn new(scorer: EmbeddingScorer) -> Self {
        Self { scorer }
    }

    pub fn from_store(store: &FeatureStore, ranker: RankerParams) -> Result<Self> {
        Ok(Self::new(store.scorer(ranker)?))
    }

    pub fn scorer(&self) -> &EmbeddingScorer {
        &self.scorer
    }

    pub fn rank(&self, req: &RankRequest) -> Result<Vec<(u32, f64)>> {
        if req.k == 0 {
            return Err(Error::Input("k must be at least 1".into()));
        }
        let history: Vec<ItemId> = if req.cold_start_fallback {
            req.history.iter().copied().filter(|&id| self.scorer.row(id).is_some()).map(ItemId).collect()
        } else {
            req.history.iter().copied().map(ItemId).collect()
        };
        let u = self.scorer.user_vector(&history)?;
        match &req.candidates {
            None => score_and_rank(&u, self.scorer.rows(), req.k),
            Some(ids) => {
                let missing: Vec<u32> = ids.iter().copied().filter(|&id| self.scorer.row(id).is_none()).collect();
                if !missing.is_empty() {
                    return Err(Error::NotFound(missing));
                }
                let mut ids = ids.clone();
                ids.sort_unstable();
                ids.dedup();
                score_and_rank(&u, ids.iter().map(|&id| (id, self.scorer.row(id).expect("checked"))), req.k)
            }
        }
    }

    pub fn catalog_len(&self) -> usize {
        self.scorer.catalog().len()
    }
}

/// Rounds to 9 significant decimal digits.
pub fn nine_digits(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn error_line(code: &str, detail: String) -> serde_json::Value {
    json!({ "error": { "code": code, "detail": detail } })
}

/// Handles one request line and returns the response line (no newline).
pub fn respond(snapshot: &Snapshot, line: &str) -> String {
    let start = Instant::now();
    let req: RankRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return error_line("bad_request", e.to_string()).to_string(),
    };
    let out = match snapshot.rank(&req) {
        Ok(items) => {
            let items: Vec<_> = items
                .into_iter()
                .map(|(id, s)| json!({ "id": id, "score": nine_digits(s) }))
                .collect();
            json!({ "items": items, "latency_us": start.elapsed().as_micros() as u64 })
        }
        Err(Error::NotFound(ids)) => json!({
            "error": { "code": "not_found", "detail": format!("unknown item ids {ids:?}"), "ids": ids }
        }),
        Err(e @ (Error::Input(_) | Error::Shape(_))) => error_line("bad_request", e.to_string()),
        Err(e) => error_line("internal", e.to_string()),
    };
    out.to_string()
}

fn serve_connection(stream: TcpStream, snapshot: &Snapshot, stop: &AtomicBool) -> std::io::Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => return Ok(()),
            Ok(_) => {
                if buf.last() != Some(&b'\n') {
                    // final line without a newline, then EOF
                    let line = String::from_utf8_lossy(&buf).into_owned();
                    if !line.trim().is_empty() {
                        writeln!(writer, "{}", respond(snapshot, line.trim()))?;
                    }
                    return Ok(());
                }
                let line = String::from_utf8_lossy(&buf).into_owned();
                buf.clear();
                if line.trim().is_empty() {
                    continue;
                }
                let reply = respond(snapshot, line.trim());
                writer.write_all(reply.as_bytes())?;
                writer.write_all(b"\n")?;
                writer.flush()?;
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if buf.len() > MAX_LINE {
                    let reply = error_line("bad_request", format!("request line exceeds {MAX_LINE} bytes"));
                    writeln!(writer, "{reply}")?;
                    return Ok(());
                }
                if stop.load(Ordering::SeqCst) && buf.is_empty() {
                    return Ok(());
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}

/// A running server; dropping it without `shutdown` leaves it running
/// until the process exits.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, lets open connections finish their current
    /// request, and waits for every handler.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

pub fn serve(snapshot: Arc<Snapshot>, bind: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(bind).map_err(|e| Error::io(bind, e))?;
    let addr = listener.local_addr().map_err(|e| Error::io(bind, e))?;
    listener.set_nonblocking(true).map_err(|e| Error::io(bind, e))?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let accept = std::thread::spawn(move || {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let snap = snapshot.clone();
                    let f = flag.clone();
                    workers.push(std::thread::spawn(move || {
                        let _ = serve_connection(stream, &snap, &f);
                    }));
                    workers.retain(|w| !w.is_finished());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
                Err(_) => std::thread::sleep(POLL),
            }
        }
        for w in workers {
            let _ = w.join();
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
    })
}
