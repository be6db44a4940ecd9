//! Shared fixtures for the integration suites: a deterministic synthetic
//! trace generator and a local chat-completions stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

/// Small deterministic generator for fixture construction.
pub struct Xorshift(u64);

impl Xorshift {
    pub fn new(seed: u64) -> Self {
        Self(seed.max(1))
    }

    pub fn next(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }
}

/// Deterministic multi-step solution text with markers and a boxed answer;
/// step counts range 2..=10 and some steps begin with connectives.
pub fn synthetic_solution(idx: usize) -> (String, String) {
    let mut rng = Xorshift::new(0x9E37_79B9 ^ (idx as u64 + 1) * 0x5851_F42D);
    let a = 2 + rng.next() % 40;
    let b = 1 + rng.next() % 20;
    let answer = a * b;
    let question = format!("A shelf holds {a} books. How many books are on {b} shelves?");

    let n_middle = (rng.next() % 8) as usize; // 0..=7 middle steps
    let mut steps = vec![format!("Each shelf holds {a} books.")];
    for s in 0..n_middle {
        let step = match rng.next() % 4 {
            0 => format!("So the count grows by {a} again at shelf {}.", s + 1),
            1 => format!(
                "Then we add shelf {}: {} books so far.",
                s + 1,
                a * (s as u64 + 1)
            ),
            2 => format!("tally {}", a * (s as u64 + 1)),
            _ => format!(
                "Partial total is {a} * {} = <<{a}*{}={}>>{} books counted.",
                s + 1,
                s + 1,
                a * (s as u64 + 1),
                a * (s as u64 + 1)
            ),
        };
        steps.push(step);
    }
    steps.push(format!(
        "Therefore {a} * {b} = <<{a}*{b}={answer}>>{answer}.\nFinal Answer: \\boxed{{{answer}}}"
    ));
    (question, steps.join("\n\n"))
}

fn handle_request(mut stream: TcpStream) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            break;
        }
        if let Some(v) = trimmed
            .to_ascii_lowercase()
            .strip_prefix("content-length:")
            .map(str::trim)
            .and_then(|v| v.parse::<usize>().ok())
        {
            content_length = v;
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    // Identity rewrite: echo the embedded original solution verbatim.
    let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
    let content = request["messages"][0]["content"].as_str().unwrap_or("");
    let original = content
        .split_once("Original solution (model output):\n")
        .map(|(_, rest)| rest)
        .and_then(|rest| rest.split_once("\n\nNow output ONLY"))
        .map(|(original, _)| original)
        .unwrap_or("");
    let payload = serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": original}}]
    })
    .to_string();
    let response = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

/// Chat-completions stub serving identity rewrites until the process exits.
pub fn spawn_stub() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let hits_thread = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            hits_thread.fetch_add(1, Ordering::SeqCst);
            let _ = handle_request(stream);
        }
    });
    (format!("http://{addr}"), hits)
}
