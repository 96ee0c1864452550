mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{client, scene_png, texture_png, TestServer};
use livestyle::archive::WeightArchive;
use livestyle::ast::{
    all_pairs, ast_content_loss, ast_style_loss, blend_embeddings, content_loss_from_features, evaluate_ast,
    strength_blend, style_loss_from_grams, train_ast, AstModel, AstObjective, AstTrainConfig, BlendSpec,
    StyleEmbedding,
};
use livestyle::backbone::{gram_matrix, load_weights, BackboneModel, FeatureMap, GramMatrix, LayerSpec};
use livestyle::cyclegan::{
    adversarial_loss, cycle_consistency_loss, cyclegan_total_loss, train_cyclegan, CycleGanConfig, DomainDataset,
};
use livestyle::gatys::{content_loss, layer_style_error, run_gatys, style_loss, total_loss, GatysConfig, GatysObjective, Init};
use livestyle::image::{denormalize, normalize, ImageTensor, PreprocessSpec, ValueRange};
use livestyle::synthetic::{gradient_scenes, noise, shapes, textures, Shape};
use livestyle::tensor::Tensor;
use livestyle_server::ServiceConfig;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::StatusCode;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0)
}

fn random_map(rng: &mut ChaCha8Rng, channels: usize, spatial: usize) -> FeatureMap {
    let data = (0..channels * spatial).map(|_| rng.gen_range(-2.0..2.0)).collect();
    FeatureMap::new("l", channels, spatial, data).unwrap()
}

fn loss_oracles() -> Outcome {
    let fm = |v: Vec<f64>| FeatureMap::new("l", 1, v.len(), v).unwrap();
    let gm = |v: f64| GramMatrix::from_data(1, vec![v]).unwrap();
    let mut checked = 0;
    let mut check = |name: &str, got: f64, want: f64| -> Result<(), String> {
        checked += 1;
        if rel_close(got, want) {
            Ok(())
        } else {
            Err(format!("{name}: got {got}, want {want}"))
        }
    };

    check("content F=P", content_loss(&fm(vec![0.3, -2.0, 5.0]), &fm(vec![0.3, -2.0, 5.0])).unwrap(), 0.0)?;
    check("content [1,0]", content_loss(&fm(vec![1.0, 0.0]), &fm(vec![0.0, 0.0])).unwrap(), 0.5)?;
    check("content [2,1]", content_loss(&fm(vec![2.0, 1.0]), &fm(vec![0.0, 1.0])).unwrap(), 2.0)?;

    check("E_l identical", layer_style_error(&gm(2.0), &gm(2.0), 1, 1).unwrap(), 0.0)?;
    check("E_l [[2]] vs [[0]]", layer_style_error(&gm(2.0), &gm(0.0), 1, 1).unwrap(), 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for c in [0.5, 2.0, 3.0] {
        let (a, b) = (random_map(&mut rng, 5, 12), random_map(&mut rng, 5, 12));
        let scale = |f: &FeatureMap| FeatureMap::new("l", 5, 12, f.data.iter().map(|v| c * v).collect()).unwrap();
        let base = layer_style_error(&gram_matrix(&a), &gram_matrix(&b), 5, 12).unwrap();
        let scaled = layer_style_error(&gram_matrix(&scale(&a)), &gram_matrix(&scale(&b)), 5, 12).unwrap();
        check("E_l c^4 scaling", scaled, base * c.powi(4))?;
    }

    check("style zero weights", style_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0)?;
    check("style [1,2]", style_loss(&[1.0, 2.0], &[0.5, 0.5]).unwrap(), 1.5)?;
    let e = layer_style_error(&gm(3.0), &gm(1.0), 1, 1).unwrap();
    check("style single layer", style_loss(&[e], &[1.0]).unwrap(), e)?;

    check("total beta=0", total_loss(2.0, 3.0, 1.0, 0.0), 2.0)?;
    check("total alpha=0", total_loss(2.0, 3.0, 0.0, 1.0), 3.0)?;
    check("total arithmetic", total_loss(2.0, 3.0, 1.0, 10.0), 32.0)?;

    let model = BackboneModel::tiny(1);
    let layers = ["conv1_1", "conv2_1"];
    let img = |seed| normalize(&noise(16, seed), model.input_spec()).unwrap();
    let (x, y) = (img(1), img(2));
    check("ast style x=s", ast_style_loss(&x, &x, &model, &layers).unwrap(), 0.0)?;
    check("ast style grams", style_loss_from_grams(&[(gm(2.0), gm(0.0), 4)]).unwrap(), 1.0)?;
    let spec = vec![LayerSpec::conv("conv1_1", 3, 4)];
    let base = BackboneModel::random(&spec, PreprocessSpec::imagenet(32), 9).unwrap();
    let mut archive = WeightArchive::new();
    let w = base.to_archive().unwrap().tensor("conv1_1.weight").unwrap();
    archive.insert("conv1_1.weight", &w.map(|v| 2.0 * v)).unwrap();
    archive.insert("conv1_1.bias", &Tensor::zeros(&[4])).unwrap();
    let doubled = load_weights(&archive, &spec, PreprocessSpec::imagenet(32)).unwrap();
    let mut zero_bias = WeightArchive::new();
    zero_bias.insert("conv1_1.weight", &w).unwrap();
    zero_bias.insert("conv1_1.bias", &Tensor::zeros(&[4])).unwrap();
    let linear = load_weights(&zero_bias, &spec, PreprocessSpec::imagenet(32)).unwrap();
    let (a, b) = (
        normalize(&noise(16, 3), linear.input_spec()).unwrap(),
        normalize(&noise(16, 4), linear.input_spec()).unwrap(),
    );
    let l1 = ast_style_loss(&a, &b, &linear, &["conv1_1"]).unwrap();
    let l2 = ast_style_loss(&a, &b, &doubled, &["conv1_1"]).unwrap();
    check("ast style quartic", l2 / l1, 16.0)?;

    check("ast content x=c", ast_content_loss(&x, &x, &model, &layers).unwrap(), 0.0)?;
    let (f1, f0) = (fm(vec![1.0, 0.0]), fm(vec![0.0, 0.0]));
    check("ast content [1,0]", content_loss_from_features(&[(f1.clone(), f0.clone(), 2)]).unwrap(), 0.5)?;
    check(
        "ast content symmetric",
        ast_content_loss(&x, &y, &model, &layers).unwrap(),
        ast_content_loss(&y, &x, &model, &layers).unwrap(),
    )?;

    check("adv perfect real", adversarial_loss(&[1.0; 16], true), 0.0)?;
    check("adv perfect fake", adversarial_loss(&[0.0; 16], false), 0.0)?;
    check("adv half real", adversarial_loss(&[0.5; 16], true), 0.25)?;
    check("adv half fake", adversarial_loss(&[0.5; 16], false), 0.25)?;

    let zeros = ImageTensor::filled(8, 8, 0.0, ValueRange::Unit).unwrap();
    let ones = ImageTensor::filled(8, 8, 1.0, ValueRange::Unit).unwrap();
    let (p, q) = (noise(8, 5), noise(8, 6));
    check("cycle identical", cycle_consistency_loss(&p, &p).unwrap(), 0.0)?;
    check("cycle 0 vs 1", cycle_consistency_loss(&zeros, &ones).unwrap(), 1.0)?;
    check("cycle symmetric", cycle_consistency_loss(&p, &q).unwrap(), cycle_consistency_loss(&q, &p).unwrap())?;

    check("cyclegan lambda=0", cyclegan_total_loss(1.5, 2.0, 0.0), 1.5)?;
    check("cyclegan arithmetic", cyclegan_total_loss(1.0, 2.0, 10.0), 21.0)?;
    for lambda in [0.0, 1.0, 10.0, 1e4] {
        check("cyclegan cycle=0", cyclegan_total_loss(0.7, 0.0, lambda), 0.7)?;
    }
    Ok(format!("{checked} examples"))
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn gradient_checks() -> Outcome {
    const H: f64 = 1e-3;
    const AST_H: f64 = 1e-5;
    const COORDS: usize = 24;
    let mut worst: f64 = 0.0;

    let model = BackboneModel::tiny(3);
    let spec = model.input_spec().clone();
    let content = normalize(&noise(16, 1), &spec).unwrap();
    let style = normalize(&textures(1, 16, 2)[0], &spec).unwrap();
    let cfg = GatysConfig::tiny();
    let obj = GatysObjective::new(&model, &content, &style, &cfg).unwrap();
    let x = normalize(&noise(16, 7), &spec).unwrap().to_nchw();
    let (_, grad) = obj.loss_and_gradient(&x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..COORDS {
        let i = rng.gen_range(0..x.numel());
        let shifted = |d: f64| {
            let mut t = x.clone();
            t.data_mut()[i] += d;
            obj.loss(&t).unwrap().total
        };
        let n = (shifted(H) - shifted(-H)) / (2.0 * H);
        let err = relative_error(grad.data()[i], n);
        ensure!(err < 1e-3, "gatys pixel {i}: analytic {} numeric {n}", grad.data()[i]);
        worst = worst.max(err);
    }

    let model = BackboneModel::tiny(2);
    let cfg = AstTrainConfig::default();
    let ast = AstModel::new(4, 9);
    let (c, s) = all_pairs(&[noise(16, 1), noise(16, 2)], &textures(1, 16, 3)).unwrap();
    let obj = AstObjective::new(&model, &cfg).unwrap();
    let (_, pg, tg) = obj.gradients(&ast, &c, &s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < COORDS {
        let predictor_side = checked % 2 == 0;
        let grads = if predictor_side { &pg } else { &tg };
        let slot = rng.gen_range(0..grads.len());
        let idx = rng.gen_range(0..grads[slot].numel());
        let a = grads[slot].data()[idx];
        if a.abs() < 1e-6 {
            continue;
        }
        let shifted = |d: f64| {
            let mut m = ast.clone();
            let store = if predictor_side { m.predictor.params_mut() } else { m.transfer.params_mut() };
            store.get_mut(slot).data_mut()[idx] += d;
            obj.evaluate(&m, &c, &s).unwrap().total
        };
        let n = (shifted(AST_H) - shifted(-AST_H)) / (2.0 * AST_H);
        let err = relative_error(a, n);
        ensure!(err < 1e-3, "ast param slot {slot} idx {idx}: analytic {a} numeric {n}");
        worst = worst.max(err);
        checked += 1;
    }
    Ok(format!("{COORDS}+{COORDS} coordinates, worst relative error {worst:.2e}"))
}

fn gram_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut lowest = f64::INFINITY;
    for k in 0..1000 {
        let channels = rng.gen_range(1..=16);
        let spatial = rng.gen_range(1..=64);
        let f = random_map(&mut rng, channels, spatial);
        let g = gram_matrix(&f);
        for i in 0..channels {
            for j in 0..i {
                ensure!(g.get(i, j).to_bits() == g.get(j, i).to_bits(), "map {k}: asymmetric at ({i},{j})");
            }
        }
        let min = DMatrix::from_fn(channels, channels, |i, j| g.get(i, j)).symmetric_eigen().eigenvalues.min();
        ensure!(min >= -1e-5, "map {k}: eigenvalue {min}");
        lowest = lowest.min(min);
    }
    Ok(format!("1000 maps, lowest eigenvalue {lowest:.2e}"))
}

fn gatys_convergence() -> Outcome {
    let model = BackboneModel::tiny(0);
    let spec = model.input_spec();
    let content = normalize(&gradient_scenes(1, 64, 1)[0], spec).unwrap();
    let style = normalize(&textures(1, 64, 2)[0], spec).unwrap();
    let cfg = GatysConfig {
        iterations: 50,
        init: Init::Noise,
        ..GatysConfig::tiny()
    };
    let (_, trace) = run_gatys(&content, &style, &model, &cfg).unwrap();
    let totals = trace.totals();
    let ratio = totals[49] / totals[0];
    ensure!(trace.len() == 50 && ratio <= 0.2, "final/initial = {ratio}");

    let cfg = GatysConfig {
        iterations: 10,
        ..GatysConfig::tiny()
    };
    let (out, trace) = run_gatys(&content, &content, &model, &cfg).unwrap();
    ensure!(trace.losses[0].total == 0.0, "identity initial loss {}", trace.losses[0].total);
    let unit = denormalize(&content, spec).unwrap();
    let drift = out.data().iter().zip(unit.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    ensure!(drift <= 1.0 / 255.0, "identity output drifted by {drift}");
    Ok(format!("final/initial {ratio:.3}, identity drift {drift:.1e}"))
}

fn random_embedding(rng: &mut ChaCha8Rng, d: usize) -> StyleEmbedding {
    let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    StyleEmbedding::new(v(rng), v(rng)).unwrap()
}

fn max_gap(a: &StyleEmbedding, b: &StyleEmbedding) -> f64 {
    a.scales
        .iter()
        .zip(&b.scales)
        .chain(a.shifts.iter().zip(&b.shifts))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn ast_algebra_and_training() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..500 {
        let (a, b, c) = (random_embedding(&mut rng, 8), random_embedding(&mut rng, 8), random_embedding(&mut rng, 8));
        let (alpha, u, v): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let blend = |parts: Vec<(StyleEmbedding, f64)>| blend_embeddings(&BlendSpec::new(parts)).unwrap();
        let gaps = [
            max_gap(&strength_blend(&a, &b, 0.0).unwrap(), &a),
            max_gap(&strength_blend(&a, &b, 1.0).unwrap(), &b),
            max_gap(&strength_blend(&a, &a, alpha).unwrap(), &a),
            max_gap(&strength_blend(&a, &b, alpha).unwrap(), &blend(vec![(b.clone(), alpha), (a.clone(), 1.0 - alpha)])),
            max_gap(
                &blend(vec![(blend(vec![(a.clone(), u), (b.clone(), 1.0 - u)]), v), (c.clone(), 1.0 - v)]),
                &blend(vec![(a.clone(), v * u), (b.clone(), v * (1.0 - u)), (c.clone(), 1.0 - v)]),
            ),
        ];
        for (k, gap) in gaps.iter().enumerate() {
            ensure!(*gap <= 1e-6, "case {case} identity {k}: gap {gap}");
        }
    }

    let model = BackboneModel::tiny(0);
    let contents = gradient_scenes(8, 32, 1);
    let styles = textures(4, 32, 2);
    let cfg = AstTrainConfig::default();
    let init = AstModel::new(8, 0);
    let before = evaluate_ast(&init, &contents, &styles, &model, &cfg).unwrap();
    let (trained, trace) = train_ast(init, &contents, &styles, &model, &cfg).unwrap();
    let after = evaluate_ast(&trained, &contents, &styles, &model, &cfg).unwrap();
    let ratio = after.total / before.total;
    ensure!(trace.len() == 200 && ratio <= 0.5, "after/before = {ratio}");
    Ok(format!("500 blend cases, 200-step loss ratio {ratio:.3}"))
}

fn cyclegan_desk_scale() -> Outcome {
    let x = DomainDataset::new(shapes(Shape::Square, 100, 32, 1)).unwrap();
    let y = DomainDataset::new(shapes(Shape::Circle, 100, 32, 2)).unwrap();
    let cfg = CycleGanConfig {
        steps: 500,
        ..CycleGanConfig::default()
    };
    let (_, _, report) = train_cyclegan(&x, &y, &cfg).unwrap();
    let (lead, trail) = (report.mean_cycle(0..50), report.mean_cycle(450..500));
    ensure!(trail <= 0.5 * lead, "trailing {trail} vs leading {lead}");
    for &(adv, cycle) in &[(0.25, 0.5), (1.0, 2.0), (3.0, 0.125)] {
        let at0 = cyclegan_total_loss(adv, cycle, 0.0);
        for lambda in [0.5, 1.0, 2.0, 10.0, 64.0] {
            ensure!(cyclegan_total_loss(adv, cycle, lambda) == at0 + lambda * cycle, "not affine at {lambda}");
        }
    }
    Ok(format!("cycle loss {lead:.4} -> {trail:.4} (ratio {:.3})", trail / lead))
}

fn service_integration() -> Outcome {
    let server = TestServer::start(ServiceConfig {
        worker_count: 2,
        ..ServiceConfig::default()
    });
    let c = client();
    let (content, style) = (scene_png(64, 1), texture_png(64, 2));
    for model in ["gatys", "ast", "cyclegan"] {
        let (status, body) = server.submit(&c, model, r#"{}"#, &content, Some(&style));
        ensure!(status == StatusCode::ACCEPTED, "{model}: submit returned {status}");
        let id = body["job_id"].as_str().unwrap();
        let job = server.wait_terminal(&c, id, Duration::from_secs(120));
        ensure!(job["status"] == "DONE", "{model}: {job}");
        let (ctype, img) = server.result_png(&c, id);
        ensure!(ctype == "image/png" && (img.width, img.height) == (64, 64), "{model}: {ctype} {}x{}", img.width, img.height);
    }

    let (status, body) = server.submit(&c, "picasso9000", "{}", &content, Some(&style));
    ensure!(status == StatusCode::NOT_FOUND && body["error"] == "unknown model", "unknown model: {status} {body}");

    let reply = server.raw_oversized_post(server.service.config().max_upload_bytes + 1024 * 1024);
    ensure!(reply.starts_with("HTTP/1.1 413"), "oversized upload: {}", reply.lines().next().unwrap_or(""));

    let ids: Vec<String> = (0..10)
        .map(|i| {
            let (_, body) = server.submit(&c, "gatys", &format!(r#"{{"iterations": 30, "seed": {i}}}"#), &content, Some(&style));
            body["job_id"].as_str().unwrap_or_default().to_string()
        })
        .collect();
    let start = Instant::now();
    let views = loop {
        let busy = server.service.health().workers_busy;
        ensure!(busy <= 2, "{busy} workers busy");
        let views: Vec<Value> = ids.iter().map(|id| server.job(&c, id).1).collect();
        if views.iter().all(|v| v["status"] == "DONE" || v["status"] == "FAILED") {
            break views;
        }
        ensure!(start.elapsed() < Duration::from_secs(240), "concurrent jobs did not finish");
        std::thread::sleep(Duration::from_millis(10));
    };
    let stamp = |v: &Value, key: &str| v[key].as_str().unwrap_or_default().parse::<chrono::DateTime<chrono::Utc>>();
    let mut events = Vec::new();
    for v in &views {
        match (stamp(v, "started_at"), stamp(v, "finished_at")) {
            (Ok(s), Ok(f)) => events.extend([(s, 1), (f, -1)]),
            _ => return Err(format!("missing timestamps: {v}")),
        }
    }
    events.sort();
    let (mut running, mut peak) = (0, 0);
    for (_, d) in events {
        running += d;
        peak = peak.max(running);
    }
    ensure!(peak <= 2, "{peak} jobs RUNNING at once");
    Ok(format!("3 models round-tripped, 404/413 ok, 10 jobs peak concurrency {peak}"))
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let content = dir.path().join("content.png");
    let style = dir.path().join("style.png");
    std::fs::write(&content, scene_png(48, 1)).unwrap();
    std::fs::write(&style, texture_png(48, 2)).unwrap();
    for model in ["gatys", "ast", "cyclegan"] {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{model}-{run}.png"));
            let extra: &[&str] = if model == "gatys" { &["--iterations", "5", "--init", "noise", "--seed", "3"] } else { &[] };
            let status = Command::new(env!("CARGO_BIN_EXE_livestyle"))
                .args(["stylize", "--model", model])
                .args(extra)
                .arg("--content")
                .arg(&content)
                .arg("--style")
                .arg(&style)
                .arg("--out")
                .arg(&out)
                .env_remove("LIVESTYLE_CHECKPOINT_DIR")
                .output()
                .unwrap();
            ensure!(status.status.success(), "{model}: {}", String::from_utf8_lossy(&status.stderr));
            outputs.push(std::fs::read(&out).unwrap());
        }
        ensure!(outputs[0] == outputs[1], "{model}: outputs differ");
    }
    Ok("gatys, ast, cyclegan byte-identical".into())
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("loss-formula oracle suite", Duration::from_secs(5), loss_oracles),
        ("gradient checks", Duration::from_secs(60), gradient_checks),
        ("gram properties", Duration::from_secs(30), gram_properties),
        ("gatys convergence", Duration::from_secs(120), gatys_convergence),
        ("ast algebra and training", Duration::from_secs(180), ast_algebra_and_training),
        ("cyclegan desk-scale", Duration::from_secs(300), cyclegan_desk_scale),
        ("service integration", Duration::from_secs(300), service_integration),
        ("cli determinism", Duration::from_secs(300), cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; over budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {:>7.2}s  {detail}", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<28} {:>7.2}s  {why}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
