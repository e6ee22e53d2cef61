//! HTTP/1.1 subset: incremental request/response-head parsing and the
//! path-keyed resource service.

mod parse;
mod service;

pub use parse::{
    parse_request, parse_response_head, HttpError, Method, Request, Response, ResponseHead,
    MAX_BODY, MAX_HEAD,
};
pub use service::{
    execute, handle_request, normalize_path, plan, reason_phrase, respond, MemoryStore, PathError, Plan,
    Resource, ResourceStore, StoreOp, StoreOutcome, BENCH_PAGE, BENCH_PAGE_PATH,
};
