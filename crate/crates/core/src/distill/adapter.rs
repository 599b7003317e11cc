//! Newline-delimited JSON protocol spoken with an external model adapter,
//! over TCP (`tcp://host:port`) or a child process's stdio
//! (`stdio:<command> [args..]`).
//!
//! ```text
//! {"op":"hello"}                                   -> {"dim":512,"concurrent":true}
//! {"op":"embed","texts":["..."]}                   -> {"vectors":[[...]]}
//! {"op":"describe","prompt":"..","images":["<b64 png>"]} -> {"names":["..."]}
//! any failure                                      -> {"error":{"code":"..","message":".."}}
//! ```

use std::io::{BufRead, BufReader, Cursor, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::client::{ClientError, DescribeRequest, EmbeddingClient, VlmClient};
use crate::masks::Granularity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello,
    Embed {
        texts: Vec<String>,
    },
    Describe {
        prompt: String,
        images: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        track_id: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        granularity: Option<Granularity>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ErrorBody {
    Detailed { code: String, message: String },
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Error { error: ErrorBody },
    Hello { dim: usize, concurrent: bool },
    Vectors { vectors: Vec<Vec<f32>> },
    Names { names: Vec<String> },
}

/// Parses one response line; error objects become [`ClientError::Remote`].
pub fn parse_response(line: &str) -> Result<Response, ClientError> {
    let response: Response =
        serde_json::from_str(line.trim()).map_err(|e| ClientError::Protocol(format!("bad response: {e}")))?;
    match response {
        Response::Error { error: ErrorBody::Detailed { code, message } } => Err(ClientError::Remote { code, message }),
        Response::Error { error: ErrorBody::Text(message) } => Err(ClientError::Remote { code: "error".into(), message }),
        ok => Ok(ok),
    }
}

pub fn encode_png_base64(image: &RgbImage) -> String {
    let mut png = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .expect("encoding an RGB image to memory cannot fail");
    base64::engine::general_purpose::STANDARD.encode(png)
}

pub fn decode_png_base64(data: &str) -> Result<RgbImage, String> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(data).map_err(|e| e.to_string())?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map(|img| img.into_rgb8())
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, backoff: Duration::from_millis(200) }
    }
}

impl RetryPolicy {
    /// Runs `f` until it succeeds or the attempts are used up, doubling the
    /// pause after each failure.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut pause = self.backoff;
        let mut last = None;
        for attempt in 0..self.attempts.max(1) {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
            if attempt + 1 < self.attempts {
                std::thread::sleep(pause);
                pause *= 2;
            }
        }
        Err(last.expect("at least one attempt ran"))
    }
}

enum Transport {
    Tcp { reader: BufReader<TcpStream>, writer: TcpStream },
    Stdio { child: Child, reader: BufReader<ChildStdout>, writer: ChildStdin },
}

impl Transport {
    fn open(endpoint: &str) -> Result<Transport, ClientError> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            let stream = TcpStream::connect(addr).map_err(|e| ClientError::Unreachable(format!("{endpoint}: {e}")))?;
            stream.set_read_timeout(Some(Duration::from_secs(300))).ok();
            let reader = BufReader::new(stream.try_clone().map_err(|e| ClientError::Unreachable(e.to_string()))?);
            Ok(Transport::Tcp { reader, writer: stream })
        } else if let Some(cmd) = endpoint.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace();
            let program = parts.next().ok_or_else(|| ClientError::Unreachable("empty stdio command".into()))?;
            let mut child = Command::new(program)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| ClientError::Unreachable(format!("{endpoint}: {e}")))?;
            let writer = child.stdin.take().expect("stdin was piped");
            let reader = BufReader::new(child.stdout.take().expect("stdout was piped"));
            Ok(Transport::Stdio { child, reader, writer })
        } else {
            Err(ClientError::Unreachable(format!("unsupported endpoint `{endpoint}` (expected tcp://host:port or stdio:<command>)")))
        }
    }

    fn round_trip(&mut self, request: &Request) -> Result<Response, ClientError> {
        let mut line = serde_json::to_string(request).expect("requests serialize");
        line.push('\n');
        let (reader, writer): (&mut dyn BufRead, &mut dyn Write) = match self {
            Transport::Tcp { reader, writer } => (reader, writer),
            Transport::Stdio { reader, writer, .. } => (reader, writer),
        };
        let lost = |e: std::io::Error| ClientError::Unreachable(format!("adapter connection lost: {e}"));
        writer.write_all(line.as_bytes()).map_err(lost)?;
        writer.flush().map_err(lost)?;
        let mut reply = String::new();
        if reader.read_line(&mut reply).map_err(lost)? == 0 {
            return Err(ClientError::Unreachable("adapter closed the connection".into()));
        }
        parse_response(&reply)
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        if let Transport::Stdio { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Both model clients backed by one adapter connection. Calls are serialized
/// on the connection; `concurrent` only reports what the adapter declared.
pub struct AdapterClient {
    transport: Mutex<Transport>,
    dim: usize,
    concurrent: bool,
    retry: RetryPolicy,
}

impl AdapterClient {
    /// Connects and performs the handshake, retrying per `retry`.
    pub fn connect(endpoint: &str, retry: RetryPolicy) -> Result<AdapterClient, ClientError> {
        retry.run(|| {
            let mut transport = Transport::open(endpoint)?;
            match transport.round_trip(&Request::Hello)? {
                Response::Hello { dim, concurrent } => {
                    Ok(AdapterClient { transport: Mutex::new(transport), dim, concurrent, retry })
                }
                other => Err(ClientError::Protocol(format!("expected handshake, got {other:?}"))),
            }
        })
    }

    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        let mut transport = self.transport.lock().unwrap_or_else(|p| p.into_inner());
        transport.round_trip(request)
    }
}

impl EmbeddingClient for AdapterClient {
    fn dim(&self) -> usize {
        self.dim
    }

    fn concurrent(&self) -> bool {
        self.concurrent
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        let vectors = self.retry.run(|| match self.call(&Request::Embed { texts: texts.to_vec() })? {
            Response::Vectors { vectors } => Ok(vectors),
            other => Err(ClientError::Protocol(format!("expected vectors, got {other:?}"))),
        })?;
        if vectors.len() != texts.len() {
            return Err(ClientError::Protocol(format!("{} texts in, {} vectors out", texts.len(), vectors.len())));
        }
        Ok(vectors)
    }
}

impl VlmClient for AdapterClient {
    fn describe(&self, request: &DescribeRequest<'_>) -> Result<Vec<String>, ClientError> {
        let wire = Request::Describe {
            prompt: request.prompt.to_string(),
            images: request.images.iter().map(encode_png_base64).collect(),
            track_id: Some(request.track_id),
            granularity: Some(request.granularity),
        };
        match self.call(&wire)? {
            Response::Names { names } => Ok(names),
            other => Err(ClientError::Protocol(format!("expected names, got {other:?}"))),
        }
    }
}

fn error_response(code: &str, message: impl Into<String>) -> Response {
    Response::Error { error: ErrorBody::Detailed { code: code.into(), message: message.into() } }
}

/// Answers one request line with in-process clients.
pub fn handle_line(line: &str, vlm: &dyn VlmClient, embedder: &dyn EmbeddingClient) -> Response {
    let request: Request = match serde_json::from_str(line.trim()) {
        Ok(r) => r,
        Err(e) => return error_response("bad_request", e.to_string()),
    };
    match request {
        Request::Hello => Response::Hello { dim: embedder.dim(), concurrent: embedder.concurrent() },
        Request::Embed { texts } => match embedder.embed(&texts) {
            Ok(vectors) => Response::Vectors { vectors },
            Err(e) => error_response("embed", e.to_string()),
        },
        Request::Describe { prompt, images, track_id, granularity } => {
            let decoded: Result<Vec<RgbImage>, String> = images.iter().map(|s| decode_png_base64(s)).collect();
            let images = match decoded {
                Ok(images) => images,
                Err(e) => return error_response("bad_image", e),
            };
            let req = DescribeRequest {
                track_id: track_id.unwrap_or(0),
                granularity: granularity.unwrap_or(Granularity::Object),
                prompt: &prompt,
                images: &images,
            };
            match vlm.describe(&req) {
                Ok(names) => Response::Names { names },
                Err(e) => error_response("describe", e.to_string()),
            }
        }
    }
}

/// Serves the protocol until EOF: exactly one response line per request line.
pub fn serve<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    vlm: &dyn VlmClient,
    embedder: &dyn EmbeddingClient,
) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_line(&line, vlm, embedder);
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
