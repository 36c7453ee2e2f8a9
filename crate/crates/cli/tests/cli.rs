use std::path::PathBuf;
use std::process::{Command, Output};

use arrayad::interp::{eval_value, Env};
use arrayad::ir::{alpha_eq, parse_program, parse_term, Name};
use arrayad::reverse::grad_concrete;
use arrayad::tensor::ConcreteArray;
use serde_json::{json, Value};

fn program(name: &str) -> String {
    format!("{}/../core/programs/{name}.adl", env!("CARGO_MANIFEST_DIR"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("arrayad-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arrayad")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn check_prints_the_result_type() {
    let o = run(&["check", &program("dot")]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "f64 []");
}

#[test]
fn grad_of_dot_product() {
    let inputs = scratch("dot.json");
    std::fs::write(&inputs, r#"{"a": [1, 2, 3], "b": [4, 5, 6]}"#).unwrap();
    let o = run(&["grad", &program("dot"), "--inputs", inputs.to_str().unwrap(), "--ctg", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(j, json!({"a": [4.0, 5.0, 6.0], "b": [1.0, 2.0, 3.0]}));
}

#[test]
fn eval_accepts_typed_array_objects() {
    let inputs = scratch("dot-typed.json");
    std::fs::write(
        &inputs,
        r#"{"a": {"kind": "f64", "shape": [3], "data": [1, 2, 3]}, "b": [1, 1, 1]}"#,
    )
    .unwrap();
    let o = run(&["eval", &program("dot"), "--inputs", inputs.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(serde_json::from_str::<Value>(&stdout(&o)).unwrap(), json!(6.0));
}

#[test]
fn vectorize_self_convolution() {
    let o = run(&["vectorize", &program("t_sc")]);
    assert!(o.status.success());
    let p = parse_program(&stdout(&o)).unwrap();
    let want = parse_term(
        "(sumouter (op * (gather [3] a (lam [i] [i])) (gather [3] a (lam [i] [(op - (op - 3 1) i)]))))",
    )
    .unwrap();
    assert!(alpha_eq(&p.body, &want), "{}", stdout(&o));
    assert_eq!(stdout(&run(&["vectorize", &program("t_sc")])), stdout(&o));
}

#[test]
fn gradcheck_passes_on_self_convolution() {
    let o = run(&["gradcheck", &program("t_sc"), "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn gradcheck_reports_violations_with_exit_2() {
    let o = run(&["gradcheck", &program("logsumexp"), "--seed", "1", "--h", "0.1", "--tol", "1e-12"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compiled_gradient_matches_grad() {
    let out = scratch("mlp-grad.adl");
    let o = run(&["compile-grad", &program("mlp_layer"), "-o", out.to_str().unwrap()]);
    assert!(o.status.success());
    let compiled = parse_program(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let source = parse_program(&std::fs::read_to_string(program("mlp_layer")).unwrap()).unwrap();
    let mut env: Env = arrayad::oracle::gen_input(3, &source.params);
    let want = grad_concrete(&source, &env, &ConcreteArray::scalar_real(1.0)).unwrap();
    env.insert(Name::new("c"), ConcreteArray::scalar_real(1.0));
    let v = eval_value(&compiled.body, &env);
    let grads = v.tuple()[1].tuple();
    for (g, q) in grads.iter().zip(source.real_params()) {
        for (x, y) in g.array().as_real().iter().zip(want[&q.name].as_real()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-8), "{}: {x} vs {y}", q.name);
        }
    }
}

#[test]
fn type_errors_exit_1() {
    let bad = scratch("bad.adl");
    std::fs::write(&bad, "(params (a f64 [3]))\n(index a [1 2])").unwrap();
    let o = run(&["check", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rank"));

    std::fs::write(&bad, "(params (a f64 [3])\n(index a [1]").unwrap();
    assert_eq!(run(&["vectorize", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_1() {
    let inputs = scratch("partial.json");
    std::fs::write(&inputs, r#"{"a": [1, 2, 3]}"#).unwrap();
    let o = run(&["grad", &program("dot"), "--inputs", inputs.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selftest_on_a_small_corpus() {
    let o = run(&["selftest", "--seeds", "40"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("40 programs, 0 problems"));
}
