use super::*;
use proptest::prelude::*;
use std::fs;

fn solution(main_py: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let sol = dir.path().join("solution");
    fs::create_dir_all(&sol).unwrap();
    fs::write(sol.join("main.py"), main_py).unwrap();
    (dir, sol)
}

fn inputs(v: Value) -> Map<String, Value> {
    v.as_object().cloned().unwrap()
}

const DOUBLER: &str = "def predict(inputs):\n    return inputs[\"x\"] * 2\n";

#[test]
fn strategy_names_round_trip() {
    for s in DeployStrategy::ALL {
        assert_eq!(s.as_str().parse::<DeployStrategy>().unwrap(), s);
        assert_eq!(serde_json::to_value(s).unwrap(), Value::String(s.as_str().into()));
    }
    assert!("local".parse::<DeployStrategy>().is_ok());
    assert!("k8s".parse::<DeployStrategy>().is_err());
}

#[test]
fn callable_references() {
    assert_eq!(split_callable("main:predict").unwrap(), ("main", "predict"));
    assert_eq!(split_callable("pkg.mod:run").unwrap(), ("pkg.mod", "run"));
    for bad in ["main", "main:", ":predict", "main:a.b", "1x:f", "a-b:f"] {
        assert!(split_callable(bad).is_err(), "{bad}");
    }
}

#[test]
fn descriptor_invariants() {
    let local = |inv| RunInterfaceDescriptor { strategy: DeployStrategy::Local, invocation: inv, adapted_path: "x".into() };
    assert!(local(Invocation::Callable("main:predict".into())).validate().is_ok());
    assert!(local(Invocation::Endpoint("http://h/p".into())).validate().is_err());
    let docker = RunInterfaceDescriptor {
        strategy: DeployStrategy::Docker,
        invocation: Invocation::Endpoint(DEFAULT_DOCKER_ENDPOINT.into()),
        adapted_path: "x".into(),
    };
    assert!(docker.validate().is_ok());
}

#[test]
fn adapted_path_suffix() {
    assert_eq!(adapted_path_for(Path::new("/a/sol/"), DeployStrategy::Local), PathBuf::from("/a/sol_adapted_LOCAL"));
}

#[test]
fn unsupported_strategy_lists_available() {
    let (_d, sol) = solution(DOUBLER);
    let err = adapt_repository(&sol, "DOCKER", &AdaptOptions::default(), &AdapterRegistry::default()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("DOCKER") && msg.contains("LOCAL"), "{msg}");
    let err = adapt_repository(&sol, "nope", &AdaptOptions::default(), &AdapterRegistry::default()).unwrap_err();
    assert!(err.to_string().contains("LOCAL"));
}

#[test]
fn local_adapt_and_run() {
    let (_d, sol) = solution(DOUBLER);
    let reg = AdapterRegistry::default();
    let desc = adapt_repository(&sol, "LOCAL", &AdaptOptions::default(), &reg).unwrap();
    assert_eq!(desc.invocation, Invocation::Callable("main:predict".into()));
    assert!(desc.adapted_path.to_string_lossy().ends_with("_adapted_LOCAL"));
    assert!(!sol.join(SHIM_FILE).exists());
    assert_eq!(RunInterfaceDescriptor::load(&desc.adapted_path).unwrap(), desc);

    let handle = reg.handle(desc.clone()).unwrap();
    assert_eq!(handle.lifecycle(), Lifecycle::Created);
    assert!(handle.is_healthy());
    assert_eq!(handle.run(&inputs(json!({"x": 2}))), json!({"status": "success", "output": 4}));
    assert_eq!(handle.lifecycle(), Lifecycle::Started);
    assert!(!handle.logs().is_empty());

    let bad = handle.run(&inputs(json!({"y": 2})));
    assert_eq!(bad["status"], "error");
    assert!(is_normalized(&bad));
    assert!(handle.is_healthy());

    let err = adapt_repository(&sol, "LOCAL", &AdaptOptions::default(), &reg).unwrap_err();
    assert!(matches!(err, DeployError::Collision(_)));
}

#[test]
fn missing_entry_function_names_the_reference() {
    let (_d, sol) = solution("def other(inputs):\n    return 1\n");
    let reg = AdapterRegistry::default();
    let handle = reg.handle(adapt_repository(&sol, "LOCAL", &AdaptOptions::default(), &reg).unwrap()).unwrap();
    assert!(!handle.is_healthy());
    let r = handle.run(&inputs(json!({"x": 1})));
    assert_eq!(r["status"], "error");
    assert!(r["error"].as_str().unwrap().contains("main:predict"), "{r}");
}

#[test]
fn crash_and_unserializable_output_are_errors() {
    let (_d, sol) = solution("import os\ndef predict(inputs):\n    os._exit(3)\n");
    let reg = AdapterRegistry::default();
    let handle = reg.handle(adapt_repository(&sol, "LOCAL", &AdaptOptions::default(), &reg).unwrap()).unwrap();
    let r = handle.run(&Map::new());
    assert_eq!(r["status"], "error");
    assert!(is_normalized(&r));

    let (_d2, sol2) = solution("def predict(inputs):\n    print('noise')\n    return object()\n");
    let handle = reg.handle(adapt_repository(&sol2, "LOCAL", &AdaptOptions::default(), &reg).unwrap()).unwrap();
    let r = handle.run(&Map::new());
    assert_eq!(r["status"], "error");
}

#[test]
fn lifecycle_is_idempotent() {
    let (_d, sol) = solution(DOUBLER);
    let reg = AdapterRegistry::default();
    let handle = reg.handle(adapt_repository(&sol, "LOCAL", &AdaptOptions::default(), &reg).unwrap()).unwrap();
    handle.stop();
    assert_eq!(handle.lifecycle(), Lifecycle::Created);
    handle.start().unwrap();
    handle.start().unwrap();
    assert_eq!(handle.lifecycle(), Lifecycle::Started);
    assert_eq!(handle.logs().matches("started").count(), 1);
    handle.stop();
    handle.stop();
    assert_eq!(handle.lifecycle(), Lifecycle::Stopped);
    assert_eq!(handle.run(&Map::new())["status"], "error");
}

#[test]
fn custom_callable_reference() {
    let (_d, sol) = solution("def serve(inputs):\n    return {'sum': inputs['a'] + inputs['b']}\n");
    let reg = AdapterRegistry::default();
    let opts = AdaptOptions { callable: Some("main:serve".into()), endpoint: None };
    let handle = reg.handle(adapt_repository(&sol, "LOCAL", &opts, &reg).unwrap()).unwrap();
    assert_eq!(handle.run(&inputs(json!({"a": 1, "b": 2}))), json!({"status": "success", "output": {"sum": 3}}));
}

fn loopback(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<()>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/predict", server.server_addr().to_ip().unwrap());
    let t = std::thread::spawn(move || {
        for (code, body) in replies {
            let mut req = server.recv().unwrap();
            let mut incoming = String::new();
            req.as_reader().read_to_string(&mut incoming).unwrap();
            let body = body.replace("$BODY", &incoming);
            req.respond(tiny_http::Response::from_string(body).with_status_code(code)).unwrap();
        }
    });
    (url, t)
}

#[test]
fn endpoint_runner_normalizes_replies() {
    let (url, t) = loopback(vec![
        (200, r#"{"status":"success","output":4}"#.into()),
        (200, r#"{"echo":$BODY}"#.into()),
        (200, r#"{"status":"error","error":"bad input"}"#.into()),
        (500, "boom".into()),
        (200, "not json".into()),
    ]);
    let desc = RunInterfaceDescriptor {
        strategy: DeployStrategy::Docker,
        invocation: Invocation::Endpoint(url.clone()),
        adapted_path: "unused".into(),
    };
    let handle = SoftwareHandle::new(desc, Box::new(EndpointRunner::new(url)));
    let x = inputs(json!({"x": 2}));
    assert_eq!(handle.run(&x), json!({"status": "success", "output": 4}));
    assert_eq!(handle.run(&x), json!({"status": "success", "output": {"echo": {"x": 2}}}));
    assert_eq!(handle.run(&x), json!({"status": "error", "error": "bad input"}));
    for _ in 0..2 {
        let r = handle.run(&x);
        assert_eq!(r["status"], "error");
        assert!(is_normalized(&r));
    }
    t.join().unwrap();
}

fn arb_json() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i32>().prop_map(|i| json!(i)),
        "[a-z]{0,6}".prop_map(Value::String),
        prop_oneof![Just("success"), Just("error"), Just("other")].prop_map(|s| Value::String(s.into())),
    ];
    leaf.prop_recursive(3, 16, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map(prop_oneof![Just("status".to_string()), Just("error".to_string()), Just("output".to_string()), "[a-z]{1,4}".prop_map(String::from)], inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

proptest! {
    #[test]
    fn normalization_is_total(reply in arb_json()) {
        prop_assert!(is_normalized(&normalize_reply(reply)));
    }
}
