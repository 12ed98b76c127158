#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use primsketch::model::{Model, ModelConfig};
use primsketch::numerics::init_normal;
use primsketch::primitives::AbstractionConfig;
use primsketch::service::{router, Limits, ServiceConfig, ServiceState};
use primsketch::tokenizer::Vocabulary;
use primsketch::training::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn toy_config(classes: Option<usize>) -> ModelConfig {
    let vocab = Vocabulary::new(AbstractionConfig::default().orientations);
    ModelConfig {
        layers: 1,
        heads: 2,
        hidden: 16,
        max_seq_len: 96,
        num_classes: classes,
        dropout: 0.0,
        ..ModelConfig::desk(&vocab)
    }
}

pub fn toy_generator(seed: u64) -> Checkpoint<f32> {
    let mut ckpt = Checkpoint::new(
        Model::new(toy_config(None), seed).unwrap(),
        AbstractionConfig::default(),
    )
    .unwrap();
    ckpt.class_names = vec!["square".into()];
    ckpt
}

/// Classifier with a random head, so the ranking is not uniform.
pub fn toy_classifier(names: &[&str], seed: u64) -> Checkpoint<f32> {
    let mut model = Model::<f32>::new(toy_config(Some(names.len())), seed).unwrap();
    let id = model.params().find("classifier.weight").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .params_mut()
        .replace_value(id, init_normal(&[16, names.len()], 1.0, &mut rng))
        .unwrap();
    let mut ckpt = Checkpoint::new(model, AbstractionConfig::default()).unwrap();
    ckpt.class_names = names.iter().map(|s| s.to_string()).collect();
    ckpt
}

pub fn service_config() -> ServiceConfig {
    ServiceConfig {
        limits: Limits {
            max_num_samples: 4,
            max_prefix_points: 64,
            max_new_tokens: 24,
        },
        canvas_px: 64,
        ..ServiceConfig::default()
    }
}

/// Generator for `square` plus a seven-class classifier, all in memory.
pub fn toy_state() -> Arc<ServiceState> {
    let generators = BTreeMap::from([("square".to_string(), toy_generator(3))]);
    let classifier = toy_classifier(&["bus", "cat", "elephant", "flamingo", "owl", "square", "zigzag"], 4);
    Arc::new(ServiceState::from_checkpoints(
        service_config(),
        generators,
        Some(classifier),
    ))
}

pub fn single_class_state() -> Arc<ServiceState> {
    Arc::new(ServiceState::from_checkpoints(
        service_config(),
        BTreeMap::new(),
        Some(toy_classifier(&["owl"], 5)),
    ))
}

pub fn no_classifier_state() -> Arc<ServiceState> {
    let generators = BTreeMap::from([("square".to_string(), toy_generator(3))]);
    Arc::new(ServiceState::from_checkpoints(service_config(), generators, None))
}

/// Checkpoint paths that do not exist on disk.
pub fn missing_state(dir: &Path) -> Arc<ServiceState> {
    let mut config = service_config();
    config.checkpoints.insert("square".into(), dir.join("square.ckpt"));
    Arc::new(ServiceState::new(config).unwrap())
}

pub fn square_strokes() -> Value {
    json!([[0.0, 0.0, 0], [40.0, 0.0, 0], [0.0, 40.0, 0], [-40.0, 0.0, 1]])
}

pub async fn call(state: Arc<ServiceState>, method: &str, path: &str, body: Option<&Value>) -> (StatusCode, Value) {
    call_raw(state, method, path, body.map(|b| b.to_string())).await
}

pub async fn call_raw(state: Arc<ServiceState>, method: &str, path: &str, body: Option<String>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(path)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let response = router(state).oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

#[derive(Debug, Clone, Copy)]
pub enum Fixture {
    Toy,
    SingleClass,
    NoClassifier,
    Missing,
}

pub struct GoldenCase {
    pub name: &'static str,
    pub fixture: Fixture,
    pub method: &'static str,
    pub path: &'static str,
    /// JSON body, or a raw string sent verbatim when not valid JSON.
    pub body: Option<Result<Value, &'static str>>,
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let long_prefix: Vec<Value> = (0..60)
        .map(|i| json!([if i % 2 == 0 { 30.0 } else { -30.0 }, 5.0, if i == 59 { 1 } else { 0 }]))
        .collect();
    let too_many: Vec<Value> = (0..65)
        .map(|i| json!([1.0, 0.0, if i == 64 { 1 } else { 0 }]))
        .collect();
    let case = |name, fixture, method, path, body: Option<Result<Value, &'static str>>| GoldenCase {
        name,
        fixture,
        method,
        path,
        body,
    };
    vec![
        case("health_ok", Fixture::Toy, "GET", "/v1/health", None),
        case("health_missing_checkpoint", Fixture::Missing, "GET", "/v1/health", None),
        case(
            "complete_three_samples",
            Fixture::Toy,
            "POST",
            "/v1/complete",
            Some(Ok(
                json!({"class": "square", "strokes": square_strokes(), "num_samples": 3, "temperature": 1.0, "seed": 7}),
            )),
        ),
        case(
            "complete_unknown_class",
            Fixture::Toy,
            "POST",
            "/v1/complete",
            Some(Ok(json!({"class": "giraffe", "strokes": square_strokes(), "seed": 1}))),
        ),
        case(
            "complete_num_samples_over_limit",
            Fixture::Toy,
            "POST",
            "/v1/complete",
            Some(Ok(
                json!({"class": "square", "strokes": square_strokes(), "num_samples": 5, "seed": 1}),
            )),
        ),
        case(
            "complete_prefix_points_over_limit",
            Fixture::Toy,
            "POST",
            "/v1/complete",
            Some(Ok(json!({"class": "square", "strokes": too_many, "seed": 1}))),
        ),
        case(
            "complete_prefix_over_sequence_length",
            Fixture::Toy,
            "POST",
            "/v1/complete",
            Some(Ok(json!({"class": "square", "strokes": long_prefix, "seed": 1}))),
        ),
        case(
            "complete_bad_pen_value",
            Fixture::Toy,
            "POST",
            "/v1/complete",
            Some(Ok(
                json!({"class": "square", "strokes": [[0.0, 0.0, 0], [3.0, 1.0, 2]], "seed": 1}),
            )),
        ),
        case(
            "complete_strokes_not_triples",
            Fixture::Toy,
            "POST",
            "/v1/complete",
            Some(Ok(json!({"class": "square", "strokes": [[0.0, 0.0]], "seed": 1}))),
        ),
        case(
            "complete_checkpoint_not_loaded",
            Fixture::Missing,
            "POST",
            "/v1/complete",
            Some(Ok(json!({"class": "square", "strokes": square_strokes(), "seed": 1}))),
        ),
        case(
            "generate_two_samples",
            Fixture::Toy,
            "POST",
            "/v1/generate",
            Some(Ok(
                json!({"class": "square", "num_samples": 2, "temperature": 0.8, "seed": 11}),
            )),
        ),
        case(
            "generate_zero_temperature",
            Fixture::Toy,
            "POST",
            "/v1/generate",
            Some(Ok(json!({"class": "square", "temperature": 0.0, "seed": 1}))),
        ),
        case(
            "generate_unknown_class",
            Fixture::Toy,
            "POST",
            "/v1/generate",
            Some(Ok(json!({"class": "giraffe", "seed": 1}))),
        ),
        case(
            "generate_checkpoint_not_loaded",
            Fixture::Missing,
            "POST",
            "/v1/generate",
            Some(Ok(json!({"class": "square", "seed": 1}))),
        ),
        case(
            "classify_square",
            Fixture::Toy,
            "POST",
            "/v1/classify",
            Some(Ok(json!({"strokes": square_strokes()}))),
        ),
        case(
            "classify_single_class",
            Fixture::SingleClass,
            "POST",
            "/v1/classify",
            Some(Ok(json!({"strokes": square_strokes()}))),
        ),
        case(
            "classify_single_point",
            Fixture::Toy,
            "POST",
            "/v1/classify",
            Some(Ok(json!({"strokes": [[3.0, 4.0, 1]]}))),
        ),
        case(
            "classify_malformed_json",
            Fixture::Toy,
            "POST",
            "/v1/classify",
            Some(Err("{\"strokes\": [[0, 0, 1]")),
        ),
        case(
            "classify_no_classifier",
            Fixture::NoClassifier,
            "POST",
            "/v1/classify",
            Some(Ok(json!({"strokes": square_strokes()}))),
        ),
    ]
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub async fn run_case(case: &GoldenCase) -> (StatusCode, Value) {
    let state = match case.fixture {
        Fixture::Toy => toy_state(),
        Fixture::SingleClass => single_class_state(),
        Fixture::NoClassifier => no_classifier_state(),
        Fixture::Missing => missing_state(Path::new("no-such-dir")),
    };
    let body = case.body.as_ref().map(|b| match b {
        Ok(v) => v.to_string(),
        Err(raw) => raw.to_string(),
    });
    call_raw(state, case.method, case.path, body).await
}

/// Compares one case with its golden file, rewriting the file instead when
/// `UPDATE_GOLDEN` is set.
pub async fn check_golden(case: &GoldenCase) -> Result<(), String> {
    let (status, body) = run_case(case).await;
    let request = match &case.body {
        Some(Ok(v)) => v.clone(),
        Some(Err(raw)) => Value::String(raw.to_string()),
        None => Value::Null,
    };
    let record = json!({
        "request": {"method": case.method, "path": case.path, "body": request},
        "status": status.as_u16(),
        "body": body,
    });
    let path = golden_dir().join(format!("{}.json", case.name));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_dir()).map_err(|e| e.to_string())?;
        let text = serde_json::to_string_pretty(&record).unwrap() + "\n";
        std::fs::write(&path, text).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let expected: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected["status"] != record["status"] {
        return Err(format!(
            "{}: status {} but golden has {}",
            case.name, record["status"], expected["status"]
        ));
    }
    if expected["body"] != record["body"] {
        return Err(format!("{}: body differs from golden file", case.name));
    }
    Ok(())
}

/// Behaviour checks that a fixed golden body cannot express.
pub async fn contract_properties(scratch: &Path) -> Result<(), String> {
    let ensure = |ok: bool, what: &str| if ok { Ok(()) } else { Err(what.to_string()) };

    let request = json!({"class": "square", "strokes": square_strokes(), "num_samples": 2, "seed": 21});
    let (s1, a) = call(toy_state(), "POST", "/v1/complete", Some(&request)).await;
    let (s2, b) = call(toy_state(), "POST", "/v1/complete", Some(&request)).await;
    ensure(
        s1 == StatusCode::OK && s2 == StatusCode::OK,
        "seeded complete did not succeed",
    )?;
    ensure(a == b, "seeded complete is not reproducible")?;

    let gen = json!({"class": "square", "num_samples": 3, "temperature": 1.3, "seed": 5});
    let empty = json!({"class": "square", "strokes": [], "num_samples": 3, "temperature": 1.3, "seed": 5});
    let (_, g) = call(toy_state(), "POST", "/v1/generate", Some(&gen)).await;
    let (_, c) = call(toy_state(), "POST", "/v1/complete", Some(&empty)).await;
    ensure(g == c, "generate differs from complete with no strokes")?;

    let (status, chosen) = call(toy_state(), "POST", "/v1/generate", Some(&json!({"class": "square"}))).await;
    ensure(
        status == StatusCode::OK && chosen["seed"].is_u64(),
        "server-chosen seed not echoed",
    )?;
    let replay = json!({"class": "square", "seed": chosen["seed"]});
    let (_, again) = call(toy_state(), "POST", "/v1/generate", Some(&replay)).await;
    ensure(again == chosen, "echoed seed does not reproduce the response")?;

    let (_, three) = call(
        toy_state(),
        "POST",
        "/v1/complete",
        Some(&json!({"class": "square", "strokes": square_strokes(), "num_samples": 3, "seed": 2})),
    )
    .await;
    let completions = three["completions"].as_array().cloned().unwrap_or_default();
    ensure(completions.len() == 3, "num_samples=3 did not give three completions")?;
    for comp in &completions {
        let strokes = comp["strokes"].as_array().cloned().unwrap_or_default();
        let as_f64 = |v: &Value| -> Vec<Option<f64>> {
            v.as_array()
                .into_iter()
                .flatten()
                .flat_map(|p| p.as_array().cloned().unwrap_or_default())
                .map(|x| x.as_f64())
                .collect()
        };
        ensure(
            strokes.len() >= 4 && as_f64(&Value::Array(strokes[..4].to_vec())) == as_f64(&square_strokes()),
            "completion does not begin with the submitted strokes",
        )?;
        ensure(
            comp["svg"].as_str().is_some_and(|s| s.starts_with("<svg")),
            "completion lacks inline svg",
        )?;
    }

    let (_, ranked) = call(
        toy_state(),
        "POST",
        "/v1/classify",
        Some(&json!({"strokes": square_strokes()})),
    )
    .await;
    let probs: Vec<f64> = ranked["topk"]
        .as_array()
        .map(|a| a.iter().filter_map(|e| e["probability"].as_f64()).collect())
        .unwrap_or_default();
    ensure(
        probs.len() == 5 && ranked["k"] == 5,
        "classify did not return the top five",
    )?;
    ensure(
        probs.windows(2).all(|w| w[0] >= w[1]),
        "probabilities not sorted descending",
    )?;
    ensure(probs.iter().sum::<f64>() <= 1.0 + 1e-6, "probabilities sum above one")?;

    let (_, single) = call(
        single_class_state(),
        "POST",
        "/v1/classify",
        Some(&json!({"strokes": square_strokes()})),
    )
    .await;
    ensure(
        single["topk"][0]["class"] == "owl" && single["topk"][0]["probability"].as_f64() == Some(1.0),
        "single-class classifier is not certain",
    )?;

    // a checkpoint that appears after startup is picked up on the next request
    let state = missing_state(scratch);
    let (before, _) = call(state.clone(), "GET", "/v1/health", None).await;
    primsketch::training::save_checkpoint(&toy_generator(3), &scratch.join("square.ckpt"))
        .map_err(|e| e.to_string())?;
    let (after, health) = call(state, "GET", "/v1/health", None).await;
    ensure(
        before == StatusCode::SERVICE_UNAVAILABLE && after == StatusCode::OK,
        "health does not recover once the checkpoint exists",
    )?;
    ensure(
        health["versions"]["checkpoint_format"].is_u64(),
        "health lacks the format version",
    )?;
    std::fs::remove_file(scratch.join("square.ckpt")).map_err(|e| e.to_string())?;

    // concurrent requests match serial ones
    let state = toy_state();
    let bodies: Vec<Value> = (0..4)
        .map(|i| json!({"class": "square", "strokes": square_strokes(), "num_samples": 2, "seed": 100 + i}))
        .collect();
    let mut serial = Vec::new();
    for b in &bodies {
        serial.push(call(state.clone(), "POST", "/v1/complete", Some(b)).await.1);
    }
    let handles: Vec<_> = bodies
        .iter()
        .cloned()
        .map(|b| {
            let state = state.clone();
            tokio::spawn(async move { call(state, "POST", "/v1/complete", Some(&b)).await.1 })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(&serial) {
        ensure(
            &h.await.map_err(|e| e.to_string())? == want,
            "concurrent response differs from serial",
        )?;
    }
    Ok(())
}
