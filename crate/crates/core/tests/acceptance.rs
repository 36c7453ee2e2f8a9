//! Acceptance checks. Runs without the libtest harness and prints one line
//! per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use arrayad::bot::{check_normal_form, normalize_program, Options};
use arrayad::delta::{check_invariants, node_count, DVarName};
use arrayad::interp::{eval, eval_memo, eval_value, Env, Value};
use arrayad::ir::{alpha_eq, any_node, parse_program, parse_term, Name, Program, Term};
use arrayad::oracle::{corpus, doubling_chain, dot_program, finite_diff_grad, gen_input, gen_program, max_rel_err, rel_err, SUITE};
use arrayad::reverse::{grad_concrete, reverse_pass, reverse_pass_traced, Concrete};
use arrayad::symbolic::{
    build_gradient_program, dualize_concrete, dualize_count, dualize_symbolic, share_to_let, symbolic_gradient,
};
use arrayad::tensor::{Buffer, ConcreteArray, Shape};

const CORPUS_SIZE: usize = 500;
const CORPUS_BUDGET: usize = 30;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($c:expr, $($fmt:tt)+) => {
        if !$c {
            return Err(format!($($fmt)+));
        }
    };
}

fn agree(a: &ConcreteArray, b: &ConcreteArray, rtol: f64) -> Result<(), String> {
    if a.shape() != b.shape() || a.kind() != b.kind() {
        return Err(format!("shape or kind differs: {} vs {}", a.shape(), b.shape()));
    }
    match (a.buffer(), b.buffer()) {
        (Buffer::Real(x), Buffer::Real(y)) => {
            for (u, v) in x.iter().zip(y) {
                let e = rel_err(*u, *v, 1e-8);
                if !(e <= rtol) {
                    return Err(format!("{u} vs {v} (rel {e:e})"));
                }
            }
            Ok(())
        }
        _ if a.buffer() == b.buffer() => Ok(()),
        _ => Err(format!("{a} vs {b}")),
    }
}

fn value_agree(a: &Value, b: &Value, rtol: f64) -> Result<(), String> {
    match (a, b) {
        (Value::Array(x), Value::Array(y)) => agree(x, y, rtol),
        (Value::Tuple(xs), Value::Tuple(ys)) if xs.len() == ys.len() => {
            xs.iter().zip(ys).try_for_each(|(x, y)| value_agree(x, y, rtol))
        }
        _ => Err("value structure differs".into()),
    }
}

fn c1_scatter_golden() -> Outcome {
    let a = ConcreteArray::vector((1..=9).map(f64::from).collect());
    let r = a.scatter(&Shape::new(vec![6]), 1, &|i| vec![i[0].div_euclid(2)]);
    ensure!(r.as_real() == [3.0, 7.0, 11.0, 15.0, 9.0, 0.0], "got {r}");
    Ok(format!("{r}"))
}

fn c2_bot_goldens() -> Outcome {
    let p = parse_program("(params (a f64 [4]))\n(build1 4 (lam i (op + (index a [i]) 1.0)))").unwrap();
    let r = normalize_program(&p, Options::default());
    let want = parse_term("(op + (gather [4] a (lam [j] [j])) (replicate 4 1.0))").unwrap();
    ensure!(alpha_eq(&r.body, &want), "build1 example gave {}", r.body);

    let p = parse_program(include_str!("../programs/t_sc.adl")).unwrap();
    let r = normalize_program(&p, Options::default());
    let want = parse_term(
        "(sumouter (op * (gather [3] a (lam [i] [i])) (gather [3] a (lam [i] [(op - (op - 3 1) i)]))))",
    )
    .unwrap();
    ensure!(alpha_eq(&r.body, &want), "self-convolution gave {}", r.body);
    Ok("both alpha-equivalent".into())
}

fn c3_normal_forms(programs: &[Program]) -> Outcome {
    let mut violations = 0;
    let mut build1 = 0;
    for p in programs {
        let r = normalize_program(p, Options::default());
        let rep = check_normal_form(&r.body);
        build1 += rep.build1_count;
        violations += rep.violations.len();
    }
    ensure!(build1 == 0 && violations == 0, "{build1} build1 left, {violations} bad index heads");
    let before: usize = programs.iter().filter(|p| arrayad::ir::contains_build1(&p.body)).count();
    Ok(format!("{} programs ({before} with build1), 0 violations", programs.len()))
}

fn c4_semantics(programs: &[Program]) -> Outcome {
    let mut compared = 0;
    for (n, p) in programs.iter().enumerate() {
        let r = normalize_program(p, Options::default());
        for k in 0..3 {
            let env = gen_input(1000 * n as u64 + k, &p.params);
            agree(&eval(&p.body, &env), &eval(&r.body, &env), 1e-10)
                .map_err(|e| format!("program {n} input {k}: {e}\n{}", p.body))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} evaluations agree"))
}

fn c5_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for s in &SUITE {
        let p = s.program();
        for k in 0..5 {
            let env = gen_input(k, &p.params);
            let g = grad_concrete(&p, &env, &ConcreteArray::scalar_real(1.0)).map_err(|e| e.to_string())?;
            let fd = finite_diff_grad(&p, &env, 1e-4);
            let e = max_rel_err(&g, &fd, 1e-8);
            ensure!(e <= 1e-4, "{} input {k}: relative error {e:e}", s.name);
            worst = worst.max(e);
        }
    }
    Ok(format!("{} programs x 5 inputs, worst {worst:.1e}", SUITE.len()))
}

fn c6_symbolic_matches_concrete() -> Outcome {
    let mut worst: f64 = 0.0;
    for s in &SUITE {
        let p = s.program();
        let compiled = build_gradient_program(&p).map_err(|e| e.to_string())?;
        let calls = dualize_count();
        for k in 0..10 {
            let env = gen_input(100 + k, &p.params);
            let (primal, g) = compiled.run(&env, 1.0);
            let want = grad_concrete(&p, &env, &ConcreteArray::scalar_real(1.0)).map_err(|e| e.to_string())?;
            agree(&primal, &eval(&p.body, &env), 1e-12).map_err(|e| format!("{} primal: {e}", s.name))?;
            let e = max_rel_err(&g, &want, 1e-8);
            ensure!(e <= 1e-12, "{} input {k}: relative error {e:e}", s.name);
            worst = worst.max(e);
        }
        // grad_concrete dualizes once per input; the compiled program never does.
        ensure!(dualize_count() == calls + 10, "{}: compiled program re-differentiated", s.name);
    }
    Ok(format!("{} programs x 10 inputs from one compile each, worst {worst:.1e}", SUITE.len()))
}

fn c7_trace_size() -> Outcome {
    let mut counts = Vec::new();
    for n in [8, 64, 512] {
        let p = normalize_program(&dot_program(n), Options::default());
        let env = gen_input(n as u64, &p.params);
        let (_, d) = dualize_concrete(&p, &env).map_err(|e| e.to_string())?;
        let sym = dualize_symbolic(&p).map_err(|e| e.to_string())?;
        counts.push((node_count(&d), node_count(&sym.delta)));
    }
    ensure!(counts.iter().all(|c| *c == counts[0]), "node counts {counts:?}");
    Ok(format!("{} Delta nodes for every n", counts[0].0))
}

fn c8_doubling_chain() -> Outcome {
    let n = 30;
    let p = doubling_chain(n);
    let mut env = Env::new();
    env.insert(Name::new("x"), ConcreteArray::scalar_real(0.75));
    let (_, d) = dualize_concrete(&p, &env).map_err(|e| e.to_string())?;
    let s = reverse_pass_traced(&Concrete, ConcreteArray::scalar_real(1.0), &d);
    let g = s.grad[&DVarName { index: 1, shape: Shape::scalar() }].scalar_value_real();
    ensure!(g == (1u64 << 30) as f64, "gradient {g}");
    ensure!(s.visits <= 4 * n, "{} visits", s.visits);
    Ok(format!("gradient 2^30, {} visits", s.visits))
}

fn c9_share_discipline(programs: &[Program]) -> Outcome {
    let mut checked = 0;
    for (n, p) in programs.iter().enumerate() {
        let env = gen_input(7 * n as u64, &p.params);
        let (_, d) = dualize_concrete(&normalize_program(p, Options::default()), &env).map_err(|e| e.to_string())?;
        check_invariants(&d).map_err(|e| format!("program {n} concrete: {e}"))?;

        let g = symbolic_gradient(p).map_err(|e| format!("program {n}: {e}"))?;
        check_invariants(&g.delta).map_err(|e| format!("program {n} symbolic: {e}"))?;
        let mut env_c = env.clone();
        env_c.insert(g.cotangent.clone(), ConcreteArray::scalar_real(1.0));
        let (memo, counts) = eval_memo(&g.term, &env_c);
        ensure!(counts.values().all(|&c| c <= 1), "program {n}: a share was evaluated twice");
        let flat = share_to_let(&g.term).map_err(|e| e.to_string())?;
        ensure!(!any_node(&flat, &mut |t| matches!(t, Term::Share(..))), "program {n}: share left");
        value_agree(&memo, &eval_value(&flat, &env_c), 1e-12).map_err(|e| format!("program {n}: {e}"))?;
        checked += 1;
    }
    Ok(format!("{checked} programs"))
}

fn c10_gradient_golden() -> Outcome {
    let p = parse_program(include_str!("../programs/t_sc.adl")).unwrap();
    let rev = "(lam [i] [(op - (op - 3 1) i)])";
    let x1 = "(gather [3] a (lam [i] [i]))";
    let x2 = format!("(gather [3] a {rev})");
    let grad = format!(
        "(op + (scatter [3] (op * x2 shared1) (lam [i] [i])) (scatter [3] (op * x1 shared1) {rev}))"
    );

    let dual = dualize_symbolic(&normalize_program(&p, Options::default())).map_err(|e| e.to_string())?;
    let g = reverse_pass(&dual.carrier, Term::real(1.0), &dual.delta);
    let t = share_to_let(&g[&DVarName { index: 1, shape: Shape::new(vec![3]) }]).map_err(|e| e.to_string())?;
    let want = parse_term(&format!(
        "(let (x1 {x1}) (let (x2 {x2}) (let (shared1 (replicate 3 1.0)) {grad})))"
    ))
    .unwrap();
    ensure!(alpha_eq(&t, &want), "reverse pass gave {t}");

    let compiled = build_gradient_program(&p).map_err(|e| e.to_string())?;
    let want = parse_term(&format!(
        "(let (x1 {x1}) (let (x2 {x2}) (let (shared1 (replicate 3 c)) (tuple (sumouter (op * x1 x2)) (tuple {grad})))))"
    ))
    .unwrap();
    ensure!(alpha_eq(&compiled.program.body, &want), "compiled program\n{}", compiled.source());
    Ok("alpha-equivalent".into())
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let programs = corpus(CORPUS_SIZE, CORPUS_BUDGET);
    let corpus_time = t0.elapsed();
    let mut gradient_corpus: Vec<Program> = SUITE.iter().map(|s| s.program()).collect();
    gradient_corpus.extend((0..150).map(|s| gen_program(10_000 + s, CORPUS_BUDGET)));

    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("scatter golden", Duration::from_millis(1), Box::new(c1_scatter_golden)),
        ("vectorisation goldens", Duration::from_millis(10), Box::new(c2_bot_goldens)),
        ("normal forms", Duration::from_secs(30), Box::new(|| c3_normal_forms(&programs))),
        ("vectorisation preserves semantics", Duration::from_secs(60), Box::new(|| c4_semantics(&programs))),
        ("gradients match finite differences", Duration::from_secs(30), Box::new(c5_gradients)),
        ("compiled gradients match dual arrays", Duration::from_secs(10), Box::new(c6_symbolic_matches_concrete)),
        ("trace size independent of n", Duration::from_secs(5), Box::new(c7_trace_size)),
        ("doubling chain is linear", Duration::from_millis(100), Box::new(c8_doubling_chain)),
        ("share discipline", Duration::from_secs(30), Box::new(|| c9_share_discipline(&gradient_corpus))),
        ("gradient program golden", Duration::from_millis(10), Box::new(c10_gradient_golden)),
    ];

    println!("generated {CORPUS_SIZE} programs in {corpus_time:.2?}");
    let mut failed = 0;
    for (k, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        let r = match r {
            Ok(msg) if took > *limit => Err(format!("{msg}; took {took:.2?}, limit {limit:?}")),
            other => other,
        };
        match r {
            Ok(msg) => println!("criterion {:>2} PASS {name} ({took:.2?}): {msg}", k + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({took:.2?}): {msg}", k + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
