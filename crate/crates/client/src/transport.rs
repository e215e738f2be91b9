// SPDX-License-Identifier: Apache-2.0

//! HTTP transport used by the clients and the benchmark driver.
//!
//! Every request opens a fresh TCP connection so connect time can be measured
//! separately, as the Apache benchmark tool does without keep-alive.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::header::{HeaderName, HeaderValue, CONNECTION, CONTENT_TYPE, HOST};
use hyper::Uri;
use hyper_util::rt::TokioIo;
use tokio::net::TcpStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub method: Method,
    /// Absolute URL, `http://host:port/path?query`.
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpRequest {
    pub fn get(url: impl Into<String>) -> Self {
        HttpRequest { method: Method::Get, url: url.into(), headers: Vec::new(), body: Vec::new() }
    }

    pub fn post_json(url: impl Into<String>, body: Vec<u8>) -> Self {
        HttpRequest {
            method: Method::Post,
            url: url.into(),
            headers: vec![("content-type".into(), "application/json".into())],
            body,
        }
    }

    pub fn header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.to_owned(), value.into()));
        self
    }

    pub fn path(&self) -> &str {
        let rest = self.url.split_once("://").map_or(self.url.as_str(), |(_, r)| r);
        rest.find('/').map_or("/", |i| &rest[i..])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub connect: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    pub timing: Timing,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn headers_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.headers.iter().filter(move |(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, req: HttpRequest) -> Result<HttpResponse, TransportError>;
}

#[derive(Debug, Clone)]
pub struct HyperTransport {
    timeout: Duration,
}

impl Default for HyperTransport {
    fn default() -> Self {
        HyperTransport { timeout: Duration::from_secs(30) }
    }
}

impl HyperTransport {
    pub fn with_timeout(timeout: Duration) -> Self {
        HyperTransport { timeout }
    }

    async fn exchange(&self, req: HttpRequest) -> Result<HttpResponse, TransportError> {
        let err = |e: &dyn std::fmt::Display| TransportError(e.to_string());
        let uri: Uri = req.url.parse().map_err(|e| err(&e))?;
        let authority = uri.authority().ok_or_else(|| TransportError(format!("no host in {}", req.url)))?.clone();
        let target = uri.path_and_query().map_or("/", |p| p.as_str()).to_owned();

        let start = Instant::now();
        let stream = TcpStream::connect(authority.as_str()).await.map_err(|e| err(&e))?;
        let connect = start.elapsed();
        stream.set_nodelay(true).map_err(|e| err(&e))?;
        let (mut sender, conn) =
            hyper::client::conn::http1::handshake(TokioIo::new(stream)).await.map_err(|e| err(&e))?;
        tokio::spawn(async move {
            let _ = conn.await;
        });

        let method = match req.method {
            Method::Get => hyper::Method::GET,
            Method::Post => hyper::Method::POST,
        };
        let mut builder = hyper::Request::builder()
            .method(method)
            .uri(target)
            .header(HOST, authority.as_str())
            .header(CONNECTION, "close");
        for (k, v) in &req.headers {
            let name = HeaderName::from_bytes(k.as_bytes()).map_err(|e| err(&e))?;
            let value = HeaderValue::from_str(v).map_err(|e| err(&e))?;
            builder = builder.header(name, value);
        }
        if req.method == Method::Post && !req.headers.iter().any(|(k, _)| k.eq_ignore_ascii_case("content-type")) {
            builder = builder.header(CONTENT_TYPE, "application/json");
        }
        let request = builder.body(Full::new(Bytes::from(req.body))).map_err(|e| err(&e))?;
        let response = sender.send_request(request).await.map_err(|e| err(&e))?;
        let status = response.status().as_u16();
        let headers = response
            .headers()
            .iter()
            .map(|(k, v)| (k.as_str().to_owned(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
            .collect();
        let body = response.into_body().collect().await.map_err(|e| err(&e))?.to_bytes().to_vec();
        Ok(HttpResponse { status, headers, body, timing: Timing { connect, total: start.elapsed() } })
    }
}

#[async_trait]
impl Transport for HyperTransport {
    async fn send(&self, req: HttpRequest) -> Result<HttpResponse, TransportError> {
        let url = req.url.clone();
        match tokio::time::timeout(self.timeout, self.exchange(req)).await {
            Ok(r) => r,
            Err(_) => Err(TransportError(format!("timed out: {url}"))),
        }
    }
}

/// One observed exchange.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub request: HttpRequest,
    pub response: Option<HttpResponse>,
}

type RequestHook = dyn Fn(&mut HttpRequest) + Send + Sync;
type ResponseHook = dyn Fn(&HttpRequest, &mut HttpResponse) + Send + Sync;

/// Test double around another transport: records every exchange and can
/// rewrite requests before sending and responses before returning them.
pub struct Interceptor<T> {
    inner: T,
    log: Mutex<Vec<Exchange>>,
    on_request: Option<Box<RequestHook>>,
    on_response: Option<Box<ResponseHook>>,
}

impl<T: Transport> Interceptor<T> {
    pub fn new(inner: T) -> Self {
        Interceptor { inner, log: Mutex::new(Vec::new()), on_request: None, on_response: None }
    }

    pub fn on_request(mut self, f: impl Fn(&mut HttpRequest) + Send + Sync + 'static) -> Self {
        self.on_request = Some(Box::new(f));
        self
    }

    pub fn on_response(mut self, f: impl Fn(&HttpRequest, &mut HttpResponse) + Send + Sync + 'static) -> Self {
        self.on_response = Some(Box::new(f));
        self
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().unwrap().clone()
    }

    /// Every request and response body seen so far, in order.
    pub fn wire_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for ex in self.log.lock().unwrap().iter() {
            out.extend_from_slice(ex.request.url.as_bytes());
            for (k, v) in &ex.request.headers {
                out.extend_from_slice(k.as_bytes());
                out.extend_from_slice(v.as_bytes());
            }
            out.extend_from_slice(&ex.request.body);
            if let Some(r) = &ex.response {
                for (k, v) in &r.headers {
                    out.extend_from_slice(k.as_bytes());
                    out.extend_from_slice(v.as_bytes());
                }
                out.extend_from_slice(&r.body);
            }
        }
        out
    }

    pub fn clear(&self) {
        self.log.lock().unwrap().clear();
    }
}

#[async_trait]
impl<T: Transport> Transport for Interceptor<T> {
    async fn send(&self, mut req: HttpRequest) -> Result<HttpResponse, TransportError> {
        if let Some(f) = &self.on_request {
            f(&mut req);
        }
        let sent = req.clone();
        let result = self.inner.send(req).await;
        let result = result.map(|mut resp| {
            if let Some(f) = &self.on_response {
                f(&sent, &mut resp);
            }
            resp
        });
        self.log.lock().unwrap().push(Exchange { request: sent, response: result.as_ref().ok().cloned() });
        result
    }
}

#[async_trait]
impl<T: Transport + ?Sized> Transport for Arc<T> {
    async fn send(&self, req: HttpRequest) -> Result<HttpResponse, TransportError> {
        (**self).send(req).await
    }
}
