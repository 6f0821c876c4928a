//! Minimal loopback HTTP/1.1 server for exercising the score client.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

#[derive(Debug, Clone)]
pub struct Seen {
    pub path: String,
    pub authorization: Option<String>,
    pub body: serde_json::Value,
}

pub enum Reply {
    Json(u16, String),
    /// Close the connection without answering.
    Drop,
    /// Wait, then answer.
    Delay(Duration, String),
}

type Handler = dyn Fn(usize, &serde_json::Value) -> Reply + Send + Sync;

pub struct MockServer {
    pub url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl MockServer {
    /// `handler` gets the 0-based request number and the parsed JSON body.
    pub fn start<F>(handler: F) -> MockServer
    where
        F: Fn(usize, &serde_json::Value) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let counter = Arc::new(Mutex::new(0usize));
        {
            let seen = seen.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (seen, handler, counter) = (seen.clone(), handler.clone(), counter.clone());
                    thread::spawn(move || serve(stream, &seen, handler.as_ref(), &counter));
                }
            });
        }
        MockServer { url, seen }
    }

    pub fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.seen.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, seen: &Mutex<Vec<Seen>>, handler: &Handler, counter: &Mutex<usize>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut content_length = 0usize;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
            if k == "content-length" {
                content_length = v.parse().unwrap_or(0);
            } else if k == "authorization" {
                authorization = Some(v);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let body: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);

    let n = {
        let mut c = counter.lock().unwrap();
        let n = *c;
        *c += 1;
        n
    };
    seen.lock().unwrap().push(Seen { path, authorization, body: body.clone() });

    let mut stream = stream;
    let (status, text) = match handler(n, &body) {
        Reply::Drop => return,
        Reply::Json(status, text) => (status, text),
        Reply::Delay(d, text) => {
            thread::sleep(d);
            (200, text)
        }
    };
    let reason = if status == 200 { "OK" } else { "ERR" };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = stream.flush();
}

/// Scores that depend only on the branch: mm prefers option 0, txt option 1.
pub fn branch_scores(body: &serde_json::Value) -> String {
    let k = body["options"].as_array().map_or(0, |a| a.len());
    let favorite = if body["branch"] == "txt" { 1 } else { 0 };
    let scores: Vec<f64> = (0..k).map(|i| if i == favorite { -0.1 } else { -3.0 }).collect();
    serde_json::json!({ "scores": scores }).to_string()
}
