//! A minimal scripted HTTP fixture server for exercising the OpenAI-style
//! backend without any network dependency. Records every request (method,
//! path, headers, body) and replies either from a scripted queue or with
//! auto-numbered chat completions.

// Each integration-test binary compiles this module separately and none of
// them uses every helper.
#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: HashMap<String, String>,
    pub body: String,
}

impl RecordedRequest {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).expect("request body should be JSON")
    }

    pub fn is_chat(&self) -> bool {
        self.method == "POST" && self.path.ends_with("/chat/completions")
    }
}

/// One scripted reply for the next chat-completions request.
#[derive(Debug, Clone)]
pub enum Script {
    /// 200 with this assistant message content.
    Reply(String),
    /// An arbitrary HTTP status with a stub body.
    Status(u16),
    /// Sleep this long, then reply 200 with the content.
    Delay(Duration, String),
}

pub struct FixtureServer {
    pub base_url: String,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    script: Arc<Mutex<VecDeque<Script>>>,
    models_status: Arc<AtomicU16>,
    shutdown: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
    handle: Option<JoinHandle<()>>,
}

impl FixtureServer {
    pub fn start() -> FixtureServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind fixture server");
        let addr = listener.local_addr().expect("local addr");
        let requests: Arc<Mutex<Vec<RecordedRequest>>> = Arc::default();
        let script: Arc<Mutex<VecDeque<Script>>> = Arc::default();
        let models_status = Arc::new(AtomicU16::new(200));
        let shutdown = Arc::new(AtomicBool::new(false));
        let counter = Arc::new(AtomicU64::new(0));

        let handle = {
            let requests = Arc::clone(&requests);
            let script = Arc::clone(&script);
            let models_status = Arc::clone(&models_status);
            let shutdown = Arc::clone(&shutdown);
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let requests = Arc::clone(&requests);
                    let script = Arc::clone(&script);
                    let models_status = Arc::clone(&models_status);
                    let counter = Arc::clone(&counter);
                    std::thread::spawn(move || {
                        serve_connection(stream, &requests, &script, &models_status, &counter);
                    });
                }
            })
        };

        FixtureServer {
            base_url: format!("http://{addr}"),
            requests,
            script,
            models_status,
            shutdown,
            addr,
            handle: Some(handle),
        }
    }

    /// Queue a scripted reply for a future chat request (FIFO).
    pub fn push_script(&self, s: Script) {
        self.script.lock().unwrap().push_back(s);
    }

    /// Status returned by `GET /models` (default 200).
    pub fn set_models_status(&self, status: u16) {
        self.models_status.store(status, Ordering::SeqCst);
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn chat_requests(&self) -> Vec<RecordedRequest> {
        self.requests().into_iter().filter(RecordedRequest::is_chat).collect()
    }
}

impl Drop for FixtureServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the accept loop so the thread can observe the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_connection(
    stream: TcpStream,
    requests: &Mutex<Vec<RecordedRequest>>,
    script: &Mutex<VecDeque<Script>>,
    models_status: &AtomicU16,
    counter: &AtomicU64,
) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    while let Some(request) = read_request(&mut reader) {
        // Record on arrival, before any scripted delay, so tests observe
        // requests in the order the client issued them.
        requests.lock().unwrap().push(request.clone());
        let response = if request.method == "GET" && request.path.ends_with("/models") {
            let status = models_status.load(Ordering::SeqCst);
            if status == 200 {
                http_response(200, r#"{"object":"list","data":[{"id":"fixture-model"}]}"#)
            } else {
                http_response(status, r#"{"error":"models unavailable"}"#)
            }
        } else if request.is_chat() {
            let action = script.lock().unwrap().pop_front();
            match action {
                Some(Script::Reply(content)) => chat_response(&content),
                Some(Script::Status(status)) => {
                    http_response(status, r#"{"error":"scripted failure"}"#)
                }
                Some(Script::Delay(wait, content)) => {
                    std::thread::sleep(wait);
                    chat_response(&content)
                }
                None => {
                    let n = counter.fetch_add(1, Ordering::SeqCst) + 1;
                    chat_response(&format!("fixture-reply-{n}"))
                }
            }
        } else {
            http_response(404, r#"{"error":"not found"}"#)
        };
        if writer.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}

fn read_request(reader: &mut BufReader<TcpStream>) -> Option<RecordedRequest> {
    let mut line = String::new();
    if reader.read_line(&mut line).ok()? == 0 {
        return None;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = HashMap::new();
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header).ok()? == 0 {
            return None;
        }
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            headers.insert(name.trim().to_ascii_lowercase(), value.trim().to_string());
        }
    }
    let len: usize = headers
        .get("content-length")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).ok()?;
    Some(RecordedRequest {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    })
}

fn chat_response(content: &str) -> String {
    let body = serde_json::json!({
        "id": "cmpl-fixture",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop"
        }]
    });
    http_response(200, &body.to_string())
}

fn http_response(status: u16, body: &str) -> String {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        404 => "Not Found",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: keep-alive\r\n\r\n{body}",
        body.len()
    )
}
