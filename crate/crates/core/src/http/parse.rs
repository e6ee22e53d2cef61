use alloc::string::{String, ToString};
use alloc::vec::Vec;
use bytes::Bytes;
use core::fmt::Write as _;

use super::service::reason_phrase;

/// Largest request or response head accepted.
pub const MAX_HEAD: usize = 16 * 1024;
/// Largest request body accepted.
pub const MAX_BODY: usize = 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
    Delete,
    Other(String),
}

impl Method {
    fn parse(token: &str) -> Method {
        match token {
            "GET" => Method::Get,
            "POST" => Method::Post,
            "DELETE" => Method::Delete,
            other => Method::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Delete => "DELETE",
            Method::Other(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum HttpError {
    #[error("malformed request")]
    BadRequest,
    #[error("request body requires Content-Length")]
    LengthRequired,
    #[error("request body too large")]
    PayloadTooLarge,
    #[error("header section too large")]
    HeaderTooLarge,
    #[error("unsupported HTTP version")]
    VersionNotSupported,
    #[error("malformed response")]
    BadResponse,
}

impl HttpError {
    /// Status to send before closing the connection.
    pub fn status(self) -> u16 {
        match self {
            HttpError::BadRequest | HttpError::BadResponse => 400,
            HttpError::LengthRequired => 411,
            HttpError::PayloadTooLarge => 413,
            HttpError::HeaderTooLarge => 431,
            HttpError::VersionNotSupported => 505,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: Method,
    /// Request target as sent, including any query string.
    pub target: String,
    /// 0 for HTTP/1.0, 1 for HTTP/1.1.
    pub minor_version: u8,
    pub headers: Vec<(String, String)>,
    pub body: Bytes,
}

impl Request {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// HTTP/1.1 defaults to keep-alive, HTTP/1.0 to close.
    pub fn keep_alive(&self) -> bool {
        match self.header("connection") {
            Some(v) if has_token(v, "close") => false,
            Some(v) if has_token(v, "keep-alive") => true,
            _ => self.minor_version >= 1,
        }
    }

    /// Serializes the request with an explicit Content-Length.
    pub fn encode(&self, out: &mut Vec<u8>) {
        let _ = write!(
            Buf(out),
            "{} {} HTTP/1.{}\r\n",
            self.method.as_str(),
            self.target,
            self.minor_version
        );
        for (name, value) in &self.headers {
            if name.eq_ignore_ascii_case("content-length") {
                continue;
            }
            let _ = write!(Buf(out), "{name}: {value}\r\n");
        }
        let _ = write!(Buf(out), "Content-Length: {}\r\n\r\n", self.body.len());
        out.extend_from_slice(&self.body);
    }
}

fn has_token(value: &str, token: &str) -> bool {
    value.split(',').any(|t| t.trim().eq_ignore_ascii_case(token))
}

fn find_head_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}

/// Parses one request from the front of `buf`; `Ok(None)` if incomplete.
pub fn parse_request(buf: &[u8]) -> Result<Option<(Request, usize)>, HttpError> {
    let Some(head_len) = find_head_end(&buf[..buf.len().min(MAX_HEAD + 4)]) else {
        if buf.len() > MAX_HEAD {
            return Err(HttpError::HeaderTooLarge);
        }
        return Ok(None);
    };
    let head = core::str::from_utf8(&buf[..head_len - 4]).map_err(|_| HttpError::BadRequest)?;
    let mut lines = head.split("\r\n");
    let request_line = lines.next().ok_or(HttpError::BadRequest)?;
    let mut parts = request_line.split(' ');
    let (Some(method), Some(target), Some(version), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(HttpError::BadRequest);
    };
    if method.is_empty() || !method.bytes().all(|b| b.is_ascii_uppercase()) || target.is_empty() {
        return Err(HttpError::BadRequest);
    }
    let minor_version = match version {
        "HTTP/1.1" => 1,
        "HTTP/1.0" => 0,
        v if v.starts_with("HTTP/") => return Err(HttpError::VersionNotSupported),
        _ => return Err(HttpError::BadRequest),
    };
    let headers = parse_headers(lines).ok_or(HttpError::BadRequest)?;
    let method = Method::parse(method);

    let mut content_length: Option<usize> = None;
    for (name, value) in &headers {
        if name.eq_ignore_ascii_case("transfer-encoding") {
            return Err(HttpError::LengthRequired);
        }
        if name.eq_ignore_ascii_case("content-length") {
            let n: usize = value.parse().map_err(|_| HttpError::BadRequest)?;
            if content_length.is_some_and(|prev| prev != n) {
                return Err(HttpError::BadRequest);
            }
            content_length = Some(n);
        }
    }
    let body_len = match (content_length, &method) {
        (Some(n), _) => n,
        (None, Method::Post) => return Err(HttpError::LengthRequired),
        (None, _) => 0,
    };
    if body_len > MAX_BODY {
        return Err(HttpError::PayloadTooLarge);
    }
    let Some(body) = buf.get(head_len..head_len + body_len) else {
        return Ok(None);
    };
    let request = Request {
        method,
        target: target.to_string(),
        minor_version,
        headers,
        body: Bytes::copy_from_slice(body),
    };
    Ok(Some((request, head_len + body_len)))
}

fn parse_headers<'a>(lines: impl Iterator<Item = &'a str>) -> Option<Vec<(String, String)>> {
    let mut headers = Vec::new();
    for line in lines {
        let (name, value) = line.split_once(':')?;
        if name.is_empty() || name.bytes().any(|b| b.is_ascii_whitespace()) {
            return None;
        }
        headers.push((name.to_string(), value.trim().to_string()));
    }
    Some(headers)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Bytes,
}

impl Response {
    pub fn new(status: u16) -> Self {
        Response { status, headers: Vec::new(), body: Bytes::new() }
    }

    pub fn with_body(status: u16, content_type: &str, body: impl Into<Bytes>) -> Self {
        Response {
            status,
            headers: alloc::vec![("Content-Type".to_string(), content_type.to_string())],
            body: body.into(),
        }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Writes status line, headers, Content-Length and body. 1xx and 204
    /// responses carry no Content-Length.
    pub fn encode(&self, keep_alive: bool, out: &mut Vec<u8>) {
        let _ = write!(Buf(out), "HTTP/1.1 {} {}\r\n", self.status, reason_phrase(self.status));
        for (name, value) in &self.headers {
            let _ = write!(Buf(out), "{name}: {value}\r\n");
        }
        if !matches!(self.status, 100..=199 | 204) {
            let _ = write!(Buf(out), "Content-Length: {}\r\n", self.body.len());
        }
        if !keep_alive {
            out.extend_from_slice(b"Connection: close\r\n");
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&self.body);
    }
}

struct Buf<'a>(&'a mut Vec<u8>);

impl core::fmt::Write for Buf<'_> {
    fn write_str(&mut self, s: &str) -> core::fmt::Result {
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

/// Status and framing of a response, enough to relay or skip its body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseHead {
    pub status: u16,
    pub head_len: usize,
    pub content_length: usize,
    pub keep_alive: bool,
}

impl ResponseHead {
    pub fn total_len(&self) -> usize {
        self.head_len + self.content_length
    }
}

/// Parses a response head. Responses must be Content-Length framed.
pub fn parse_response_head(buf: &[u8]) -> Result<Option<ResponseHead>, HttpError> {
    let Some(head_len) = find_head_end(&buf[..buf.len().min(MAX_HEAD + 4)]) else {
        if buf.len() > MAX_HEAD {
            return Err(HttpError::HeaderTooLarge);
        }
        return Ok(None);
    };
    let head = core::str::from_utf8(&buf[..head_len - 4]).map_err(|_| HttpError::BadResponse)?;
    let mut lines = head.split("\r\n");
    let status_line = lines.next().ok_or(HttpError::BadResponse)?;
    let mut parts = status_line.splitn(3, ' ');
    let version = parts.next().ok_or(HttpError::BadResponse)?;
    let status: u16 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or(HttpError::BadResponse)?;
    let minor = match version {
        "HTTP/1.1" => 1,
        "HTTP/1.0" => 0,
        _ => return Err(HttpError::BadResponse),
    };
    let headers = parse_headers(lines).ok_or(HttpError::BadResponse)?;
    let mut content_length = None;
    let mut keep_alive = minor >= 1;
    for (name, value) in &headers {
        if name.eq_ignore_ascii_case("content-length") {
            content_length = Some(value.parse().map_err(|_| HttpError::BadResponse)?);
        } else if name.eq_ignore_ascii_case("connection") {
            if has_token(value, "close") {
                keep_alive = false;
            } else if has_token(value, "keep-alive") {
                keep_alive = true;
            }
        }
    }
    let content_length = match (content_length, status) {
        (Some(n), _) => n,
        (None, 204 | 304) | (None, 100..=199) => 0,
        (None, _) => return Err(HttpError::BadResponse),
    };
    Ok(Some(ResponseHead { status, head_len, content_length, keep_alive }))
}
