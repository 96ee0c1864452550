#![allow(dead_code)]

use std::net::SocketAddr;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use livestyle::image::{decode_image, encode_image, EncodeFormat, RawImage};
use livestyle::synthetic::{gradient_scenes, shapes, textures, Shape};
use livestyle_server::{serve, Engine, JobService, ServiceConfig};
use reqwest::blocking::{multipart, Client};
use reqwest::StatusCode;
use serde_json::Value;

pub struct TestServer {
    pub base: String,
    pub service: JobService,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl TestServer {
    pub fn start(config: ServiceConfig) -> Self {
        Self::with_service(JobService::start(config, Engine::builtin()))
    }

    pub fn with_service(service: JobService) -> Self {
        let (addr_tx, addr_rx) = std::sync::mpsc::channel::<SocketAddr>();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let svc = service.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(listener, svc, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv_timeout(Duration::from_secs(10)).expect("server address");
        TestServer {
            base: format!("http://{addr}/api/v1"),
            service,
            stop: Some(stop_tx),
            thread: Some(thread),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    /// Sends only the headers and the first bytes of a multipart POST declaring
    /// `declared_len` bytes, returning the status line and headers of the reply.
    pub fn raw_oversized_post(&self, declared_len: usize) -> String {
        use std::io::{Read, Write};
        let addr = self.base.trim_start_matches("http://").trim_end_matches("/api/v1").to_string();
        let mut stream = std::net::TcpStream::connect(&addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let head = format!(
            "POST /api/v1/jobs HTTP/1.1\r\nHost: {addr}\r\nContent-Type: multipart/form-data; boundary=XYZ\r\nContent-Length: {declared_len}\r\n\r\n"
        );
        stream.write_all(head.as_bytes()).unwrap();
        let _ = stream.write_all(&vec![b'a'; 64 * 1024]);
        let mut reply = Vec::new();
        let mut buf = [0u8; 4096];
        while let Ok(n) = stream.read(&mut buf) {
            if n == 0 {
                break;
            }
            reply.extend_from_slice(&buf[..n]);
            if reply.windows(4).any(|w| w == b"\r\n\r\n") {
                break;
            }
        }
        String::from_utf8_lossy(&reply).into_owned()
    }

    pub fn submit(&self, client: &Client, model: &str, params: &str, content: &[u8], style: Option<&[u8]>) -> (StatusCode, Value) {
        let mut form = multipart::Form::new()
            .text("model", model.to_string())
            .text("params", params.to_string())
            .part("content", multipart::Part::bytes(content.to_vec()).file_name("content.png"));
        if let Some(style) = style {
            form = form.part("style", multipart::Part::bytes(style.to_vec()).file_name("style.png"));
        }
        let resp = client.post(self.url("/jobs")).multipart(form).send().expect("submit");
        let status = resp.status();
        (status, resp.json().unwrap_or(Value::Null))
    }

    pub fn job(&self, client: &Client, id: &str) -> (StatusCode, Value) {
        let resp = client.get(self.url(&format!("/jobs/{id}"))).send().expect("get job");
        let status = resp.status();
        (status, resp.json().unwrap_or(Value::Null))
    }

    pub fn wait_terminal(&self, client: &Client, id: &str, timeout: Duration) -> Value {
        let start = Instant::now();
        loop {
            let (_, job) = self.job(client, id);
            if matches!(job["status"].as_str(), Some("DONE") | Some("FAILED")) {
                return job;
            }
            assert!(start.elapsed() < timeout, "job {id} not finished: {job}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn result_png(&self, client: &Client, id: &str) -> (String, RawImage) {
        let resp = client.get(self.url(&format!("/jobs/{id}/result"))).send().expect("result");
        assert_eq!(resp.status(), StatusCode::OK);
        let ctype = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .map(|v| v.to_str().unwrap().to_string())
            .unwrap_or_default();
        let bytes = resp.bytes().unwrap();
        (ctype, decode_image(&bytes).expect("result decodes"))
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn scene_png(side: usize, seed: u64) -> Vec<u8> {
    encode_image(&gradient_scenes(1, side, seed)[0], EncodeFormat::Png).unwrap()
}

pub fn texture_png(side: usize, seed: u64) -> Vec<u8> {
    encode_image(&textures(1, side, seed)[0], EncodeFormat::Png).unwrap()
}

pub fn square_png(side: usize, seed: u64) -> Vec<u8> {
    encode_image(&shapes(Shape::Square, 1, side, seed)[0], EncodeFormat::Png).unwrap()
}

pub fn client() -> Client {
    Client::builder().timeout(Duration::from_secs(120)).build().unwrap()
}
