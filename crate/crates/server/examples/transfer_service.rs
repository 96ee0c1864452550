//! Start the job service in-process, submit one job per model over HTTP,
//! poll until done and save the PNG results.

use std::time::Duration;

use livestyle::image::{encode_image, EncodeFormat};
use livestyle::synthetic::{gradient_scenes, textures};
use livestyle_server::{serve, Engine, JobService, ServiceConfig};
use reqwest::blocking::{multipart, Client};
use serde_json::Value;

fn main() -> anyhow::Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}/api/v1", listener.local_addr()?);
    let svc = JobService::start(ServiceConfig::default(), Engine::builtin());
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = runtime.spawn(serve(listener, svc, async {
        let _ = stop_rx.await;
    }));

    let client = Client::new();
    let models: Value = client.get(format!("{base}/models")).send()?.json()?;
    println!("models: {}", models.as_array().map(|m| m.len()).unwrap_or(0));

    let content = encode_image(&gradient_scenes(1, 64, 1)[0], EncodeFormat::Png)?;
    let style = encode_image(&textures(1, 64, 2)[0], EncodeFormat::Png)?;
    for (model, params) in [("gatys", r#"{"iterations": 20}"#), ("ast", r#"{"strength": 0.7}"#), ("cyclegan", "{}")] {
        let form = multipart::Form::new()
            .text("model", model)
            .text("params", params)
            .part("content", multipart::Part::bytes(content.clone()).file_name("content.png"))
            .part("style", multipart::Part::bytes(style.clone()).file_name("style.png"));
        let submitted: Value = client.post(format!("{base}/jobs")).multipart(form).send()?.json()?;
        let id = submitted["job_id"].as_str().unwrap_or_default().to_string();
        let status = loop {
            let job: Value = client.get(format!("{base}/jobs/{id}")).send()?.json()?;
            match job["status"].as_str() {
                Some("DONE") | Some("FAILED") => break job,
                _ => std::thread::sleep(Duration::from_millis(50)),
            }
        };
        println!("{model}: {}", status);
        if status["status"] == "DONE" {
            let png = client.get(format!("{base}/jobs/{id}/result")).send()?.bytes()?;
            let path = std::env::temp_dir().join(format!("livestyle-examples-service-{model}.png"));
            std::fs::write(&path, &png)?;
            println!("  saved {} bytes to {}", png.len(), path.display());
        }
    }

    let health: Value = client.get(format!("{base}/health")).send()?.json()?;
    println!("health: {health}");
    let _ = stop_tx.send(());
    runtime.block_on(server)??;
    Ok(())
}
