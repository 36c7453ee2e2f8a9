use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value as Json};

use arrayad::bot::{check_normal_form, normalize_program, Options, Strategy};
use arrayad::interp::{check_env, eval, eval_value, Env, Value};
use arrayad::ir::{check_program, parse_program, pretty_program, Name, Param, Program};
use arrayad::oracle::{finite_diff_grad, gen_input, gen_program, max_rel_err, rel_err};
use arrayad::reverse::grad_concrete;
use arrayad::symbolic::build_gradient_program;
use arrayad::tensor::{Buffer, ConcreteArray, Scalar};

#[derive(Parser)]
#[command(name = "arrayad", version, about = "Vectorise and differentiate array programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    OutsideIn,
    InsideOut,
}

#[derive(Subcommand)]
enum Command {
    /// Type-check a program and print its result type.
    Check { file: PathBuf },
    /// Evaluate a program on JSON inputs.
    Eval {
        file: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
    },
    /// Print the vectorised (build1-free) program.
    Vectorize {
        file: PathBuf,
        #[arg(long)]
        simplify: bool,
        #[arg(long, value_enum, default_value = "outside-in")]
        strategy: StrategyArg,
    },
    /// Gradient at the given inputs, as a JSON object keyed by parameter.
    Grad {
        file: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        ctg: f64,
    },
    /// Emit a standalone program computing the value and all gradients.
    CompileGrad {
        file: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare both gradient implementations with finite differences.
    Gradcheck {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Random corpus: vectorisation semantics, normal forms and gradcheck.
    Selftest {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 30)]
        budget: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Exit status 1: unusable input. Exit status 2: a check failed.
enum Failure {
    Input(String),
    Check(String),
}

type Outcome = Result<(), Failure>;

fn input<E: std::fmt::Display>(ctx: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Input(format!("{ctx}: {e}"))
}

fn load_program(path: &Path) -> Result<Program, Failure> {
    let text = fs::read_to_string(path).map_err(input(path.display()))?;
    let p = parse_program(&text).map_err(input(path.display()))?;
    check_program(&p).map_err(input(path.display()))?;
    Ok(p)
}

fn nested(a: &ConcreteArray) -> Json {
    fn go(dims: &[usize], items: &mut dyn Iterator<Item = Json>) -> Json {
        match dims.split_first() {
            None => items.next().unwrap_or(Json::Null),
            Some((&k, rest)) => Json::Array((0..k).map(|_| go(rest, items)).collect()),
        }
    }
    let mut items: Box<dyn Iterator<Item = Json>> = match a.buffer() {
        Buffer::Real(v) => Box::new(v.iter().map(|&x| json!(x))),
        Buffer::Int(v) => Box::new(v.iter().map(|&x| json!(x))),
        Buffer::Bool(v) => Box::new(v.iter().map(|&x| json!(x))),
    };
    go(a.shape().dims(), &mut items)
}

fn value_json(v: &Value) -> Json {
    match v {
        Value::Array(a) => nested(a),
        Value::Tuple(vs) => Json::Array(vs.iter().map(value_json).collect()),
    }
}

fn flatten(j: &Json, out: &mut Vec<Scalar>) -> Result<(), String> {
    match j {
        Json::Array(xs) => xs.iter().try_for_each(|x| flatten(x, out)),
        Json::Bool(b) => {
            out.push(Scalar::Bool(*b));
            Ok(())
        }
        Json::Number(n) => {
            out.push(match n.as_i64() {
                Some(i) => Scalar::Int(i),
                None => Scalar::Real(n.as_f64().unwrap_or(f64::NAN)),
            });
            Ok(())
        }
        other => Err(format!("unexpected {other}")),
    }
}

/// Inputs are either `{"kind", "shape", "data"}` objects or nested arrays
/// read at the parameter's declared type.
fn load_inputs(path: &Path, params: &[Param]) -> Result<Env, Failure> {
    let text = fs::read_to_string(path).map_err(input(path.display()))?;
    let j: Map<String, Json> = serde_json::from_str(&text).map_err(input(path.display()))?;
    let mut env = Env::new();
    for (k, v) in &j {
        let a = if v.get("kind").is_some() {
            serde_json::from_value::<ConcreteArray>(v.clone()).map_err(input(format!("input `{k}`")))?
        } else {
            let q = params
                .iter()
                .find(|q| q.name.as_str() == k)
                .ok_or_else(|| Failure::Input(format!("input `{k}` is not a parameter")))?;
            let mut xs = Vec::new();
            flatten(v, &mut xs).map_err(input(format!("input `{k}`")))?;
            ConcreteArray::from_scalars(q.ty.kind, q.ty.shape.clone(), &xs).map_err(input(format!("input `{k}`")))?
        };
        env.insert(Name::new(k), a);
    }
    Ok(env)
}

fn program_inputs(path: &Path, p: &Program) -> Result<Env, Failure> {
    let env = load_inputs(path, &p.params)?;
    check_env(p, &env).map_err(input(path.display()))?;
    Ok(env)
}

fn grads_json(g: &BTreeMap<Name, ConcreteArray>) -> Json {
    Json::Object(g.iter().map(|(k, v)| (k.to_string(), nested(v))).collect())
}

fn print_json(j: &Json) {
    println!("{}", serde_json::to_string_pretty(j).expect("json"));
}

struct GradReport {
    concrete_err: f64,
    symbolic_err: f64,
}

fn gradcheck(p: &Program, env: &Env, h: f64) -> Result<GradReport, String> {
    let one = ConcreteArray::scalar_real(1.0);
    let concrete = grad_concrete(p, env, &one).map_err(|e| e.to_string())?;
    let compiled = build_gradient_program(p).map_err(|e| e.to_string())?;
    let (_, symbolic) = compiled.run(env, 1.0);
    let fd = finite_diff_grad(p, env, h);
    Ok(GradReport { concrete_err: max_rel_err(&concrete, &fd, 1e-8), symbolic_err: max_rel_err(&symbolic, &fd, 1e-8) })
}

fn values_agree(a: &ConcreteArray, b: &ConcreteArray) -> bool {
    a.shape() == b.shape()
        && match (a.buffer(), b.buffer()) {
            (Buffer::Real(x), Buffer::Real(y)) => x.iter().zip(y).all(|(u, v)| rel_err(*u, *v, 1e-8) <= 1e-10),
            (x, y) => x == y,
        }
}

/// Problems found for one generated program.
fn selftest_one(seed: u64, budget: usize, tol: f64) -> Vec<String> {
    let p = gen_program(seed, budget);
    let mut problems = Vec::new();
    let normal = normalize_program(&p, Options::default());
    let rep = check_normal_form(&normal.body);
    if !rep.is_normal() {
        problems.push(format!("seed {seed}: not in normal form ({} build1, {:?})", rep.build1_count, rep.violations));
    }
    for k in 0..3 {
        let env = gen_input(seed.wrapping_mul(31).wrapping_add(k), &p.params);
        if !values_agree(&eval(&p.body, &env), &eval(&normal.body, &env)) {
            problems.push(format!("seed {seed}: vectorised program changes the value on input {k}"));
        }
    }
    let env = gen_input(seed, &p.params);
    match gradcheck(&p, &env, 1e-4) {
        Ok(r) if r.concrete_err <= tol && r.symbolic_err <= tol => {}
        Ok(r) => problems.push(format!(
            "seed {seed}: gradient error {:.2e} (dual arrays), {:.2e} (compiled)",
            r.concrete_err, r.symbolic_err
        )),
        Err(e) => problems.push(format!("seed {seed}: {e}")),
    }
    problems
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Check { file } => {
            let p = load_program(&file)?;
            println!("{}", check_program(&p).map_err(input(file.display()))?);
        }
        Command::Eval { file, inputs } => {
            let p = load_program(&file)?;
            let env = program_inputs(&inputs, &p)?;
            print_json(&value_json(&eval_value(&p.body, &env)));
        }
        Command::Vectorize { file, simplify, strategy } => {
            let p = load_program(&file)?;
            let strategy = match strategy {
                StrategyArg::OutsideIn => Strategy::OutsideIn,
                StrategyArg::InsideOut => Strategy::InsideOut,
            };
            print!("{}", pretty_program(&normalize_program(&p, Options { strategy, simplify })));
        }
        Command::Grad { file, inputs, ctg } => {
            let p = load_program(&file)?;
            let env = program_inputs(&inputs, &p)?;
            let g = grad_concrete(&p, &env, &ConcreteArray::scalar_real(ctg)).map_err(input(file.display()))?;
            print_json(&grads_json(&g));
        }
        Command::CompileGrad { file, output } => {
            let p = load_program(&file)?;
            let g = build_gradient_program(&p).map_err(input(file.display()))?;
            match output {
                Some(out) => fs::write(&out, g.source()).map_err(input(out.display()))?,
                None => print!("{}", g.source()),
            }
        }
        Command::Gradcheck { file, seed, h, tol, inputs } => {
            let p = load_program(&file)?;
            if h <= 0.0 {
                return Err(Failure::Input("--h must be positive".into()));
            }
            let env = match inputs {
                Some(path) => program_inputs(&path, &p)?,
                None => gen_input(seed, &p.params),
            };
            let r = gradcheck(&p, &env, h).map_err(|e| Failure::Input(format!("{}: {e}", file.display())))?;
            print_json(&json!({
                "dual_arrays_rel_err": r.concrete_err,
                "compiled_rel_err": r.symbolic_err,
                "tol": tol,
            }));
            if !(r.concrete_err <= tol && r.symbolic_err <= tol) {
                return Err(Failure::Check(format!("gradient error exceeds {tol:e}")));
            }
        }
        Command::Selftest { seeds, budget, tol } => {
            let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.max(1) as usize);
            let mut problems: Vec<(u64, String)> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..workers as u64)
                    .map(|w| {
                        s.spawn(move || {
                            (w..seeds)
                                .step_by(workers)
                                .flat_map(|seed| selftest_one(seed, budget, tol).into_iter().map(move |m| (seed, m)))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("selftest worker")).collect()
            });
            problems.sort();
            for (_, m) in &problems {
                println!("{m}");
            }
            println!("{seeds} programs, {} problems", problems.len());
            if !problems.is_empty() {
                return Err(Failure::Check("selftest failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(2)
        }
    }
}
