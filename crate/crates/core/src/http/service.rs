//! Path-keyed resource semantics for GET, POST and DELETE.
//!
//! The service is split into [`plan`] and [`respond`] so that a store with
//! asynchronous access can sit between the two; [`handle_request`] glues
//! them together for a synchronous [`ResourceStore`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use bytes::Bytes;

use super::parse::{Method, Request, Response};
use crate::slot::crc16;

pub const BENCH_PAGE_PATH: &str = "/bench/page";

const BENCH_PAGE_LEN: usize = 1024;
const CHECKSUM_LINE_LEN: usize = 16;

/// The fixed 1024-byte benchmark page: a letter pattern broken into 64-byte
/// lines, ending with `checksum=0xHHHH\n` where HHHH is the CRC16 of the
/// preceding 1008 bytes.
pub const BENCH_PAGE: [u8; BENCH_PAGE_LEN] = build_bench_page();

const fn build_bench_page() -> [u8; BENCH_PAGE_LEN] {
    let mut page = [0u8; BENCH_PAGE_LEN];
    let body_len = BENCH_PAGE_LEN - CHECKSUM_LINE_LEN;
    let mut i = 0;
    while i < body_len {
        page[i] = if i % 64 == 63 { b'\n' } else { b'a' + ((i / 64 + i) % 26) as u8 };
        i += 1;
    }
    // crc16 is const but takes a slice; copy the body into its own array.
    let mut body = [0u8; BENCH_PAGE_LEN - CHECKSUM_LINE_LEN];
    let mut j = 0;
    while j < body_len {
        body[j] = page[j];
        j += 1;
    }
    let crc = crc16(&body);
    let prefix = b"checksum=0x";
    let mut k = 0;
    while k < prefix.len() {
        page[body_len + k] = prefix[k];
        k += 1;
    }
    let hex = b"0123456789abcdef";
    let mut n = 0;
    while n < 4 {
        page[body_len + prefix.len() + n] = hex[((crc >> (12 - 4 * n)) & 0xF) as usize];
        n += 1;
    }
    page[BENCH_PAGE_LEN - 1] = b'\n';
    page
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("path must be absolute")]
    NotAbsolute,
    #[error("path contains a '..' segment")]
    ParentSegment,
}

/// Strips the query, collapses repeated slashes and drops `.` segments.
pub fn normalize_path(target: &str) -> Result<String, PathError> {
    let path = target.split(['?', '#']).next().unwrap_or("");
    if !path.starts_with('/') {
        return Err(PathError::NotAbsolute);
    }
    let mut out = String::with_capacity(path.len());
    let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty() && *s != ".").collect();
    if segments.contains(&"..") {
        return Err(PathError::ParentSegment);
    }
    for segment in &segments {
        out.push('/');
        out.push_str(segment);
    }
    if out.is_empty() || (path.ends_with('/') && !segments.is_empty()) {
        out.push('/');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resource {
    pub body: Bytes,
    pub content_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreOp {
    Get(String),
    Put(String, Resource),
    Delete(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Plan {
    /// Answer without touching the store.
    Respond(Response),
    Store(StoreOp),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreOutcome {
    Fetched(Option<Resource>),
    Stored { replaced: bool },
    Removed { existed: bool },
}

pub fn plan(request: &Request) -> Plan {
    let path = match normalize_path(&request.target) {
        Ok(p) => p,
        Err(_) => return Plan::Respond(Response::new(400)),
    };
    match &request.method {
        Method::Get if path == BENCH_PAGE_PATH => {
            Plan::Respond(Response::with_body(200, "text/plain", Bytes::from_static(&BENCH_PAGE)))
        }
        Method::Get => Plan::Store(StoreOp::Get(path)),
        Method::Post => {
            let content_type = request
                .header("content-type")
                .unwrap_or("application/octet-stream")
                .to_string();
            Plan::Store(StoreOp::Put(path, Resource { body: request.body.clone(), content_type }))
        }
        Method::Delete => Plan::Store(StoreOp::Delete(path)),
        Method::Other(_) => {
            let mut resp = Response::new(405);
            resp.headers.push(("Allow".to_string(), "GET, POST, DELETE".to_string()));
            Plan::Respond(resp)
        }
    }
}

pub fn respond(outcome: StoreOutcome) -> Response {
    match outcome {
        StoreOutcome::Fetched(Some(resource)) => {
            Response::with_body(200, &resource.content_type, resource.body)
        }
        StoreOutcome::Fetched(None) | StoreOutcome::Removed { existed: false } => Response::new(404),
        StoreOutcome::Stored { replaced: false } => Response::new(201),
        StoreOutcome::Stored { replaced: true } => Response::new(200),
        StoreOutcome::Removed { existed: true } => Response::new(204),
    }
}

pub trait ResourceStore {
    fn get(&self, path: &str) -> Option<Resource>;
    /// Returns true if an existing resource was replaced.
    fn put(&mut self, path: String, resource: Resource) -> bool;
    /// Returns true if a resource was removed.
    fn delete(&mut self, path: &str) -> bool;
}

#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    resources: BTreeMap<String, Resource>,
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore::default()
    }

    pub fn len(&self) -> usize {
        self.resources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resources.is_empty()
    }
}

impl ResourceStore for MemoryStore {
    fn get(&self, path: &str) -> Option<Resource> {
        self.resources.get(path).cloned()
    }

    fn put(&mut self, path: String, resource: Resource) -> bool {
        self.resources.insert(path, resource).is_some()
    }

    fn delete(&mut self, path: &str) -> bool {
        self.resources.remove(path).is_some()
    }
}

pub fn execute<S: ResourceStore + ?Sized>(store: &mut S, op: StoreOp) -> StoreOutcome {
    match op {
        StoreOp::Get(path) => StoreOutcome::Fetched(store.get(&path)),
        StoreOp::Put(path, resource) => StoreOutcome::Stored { replaced: store.put(path, resource) },
        StoreOp::Delete(path) => StoreOutcome::Removed { existed: store.delete(&path) },
    }
}

pub fn handle_request<S: ResourceStore + ?Sized>(request: &Request, store: &mut S) -> Response {
    match plan(request) {
        Plan::Respond(response) => response,
        Plan::Store(op) => respond(execute(store, op)),
    }
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        201 => "Created",
        204 => "No Content",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        408 => "Request Timeout",
        411 => "Length Required",
        413 => "Payload Too Large",
        431 => "Request Header Fields Too Large",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        504 => "Gateway Timeout",
        505 => "HTTP Version Not Supported",
        _ => "Unknown",
    }
}
