use arrayad::bot::{normalize_program, Options};
use arrayad::delta::{check_invariants, for_each_node, DeltaKind};
use arrayad::interp::eval;
use arrayad::ir::{alpha_eq, any_node, check_program, node_count, parse_program, parse_term, Term, Type};
use arrayad::oracle::{doubling_chain, gen_input, gen_program, SUITE};
use arrayad::reverse::grad_concrete;
use arrayad::symbolic::{
    build_gradient_program, dualize_symbolic, scale_payloads_are_references, share_to_let, unshare, ShareMap,
    UnshareError,
};
use arrayad::tensor::ConcreteArray;

#[test]
fn constant_program_has_zero_derivative() {
    let p = parse_program("(params (x f64 []))\n2.5").unwrap();
    let d = dualize_symbolic(&p).unwrap();
    assert!(matches!(d.delta.kind(), DeltaKind::Zero));
    let g = build_gradient_program(&p).unwrap();
    let want = parse_term("(tuple 2.5 (tuple 0.0))").unwrap();
    assert!(alpha_eq(&g.program.body, &want), "{}", g.source());
}

#[test]
fn identity_program_returns_the_cotangent() {
    let p = parse_program("(params (x f64 []))\nx").unwrap();
    let g = build_gradient_program(&p).unwrap();
    let want = parse_term("(tuple x (tuple c))").unwrap();
    assert!(alpha_eq(&g.program.body, &want), "{}", g.source());
}

#[test]
fn cotangent_name_avoids_parameters() {
    let p = parse_program("(params (c f64 []) (x f64 []))\n(op * c x)").unwrap();
    let g = build_gradient_program(&p).unwrap();
    assert_ne!(g.cotangent.as_str(), "c");
    assert!(check_program(&g.program).is_ok());
}

#[test]
fn doubling_chain_gradient_grows_linearly() {
    let size = |n| node_count(&build_gradient_program(&doubling_chain(n)).unwrap().program.body);
    let (a, b, c) = (size(10), size(20), size(40));
    assert_eq!(c - b, 2 * (b - a), "{a} {b} {c}");
}

#[test]
fn primal_is_disentangled_and_exact() {
    let mut programs: Vec<_> = SUITE.iter().map(|s| s.program()).collect();
    programs.extend((0..60).map(|s| gen_program(500 + s, 30)));
    for p in programs {
        let normal = normalize_program(&p, Options::default());
        let d = dualize_symbolic(&normal).unwrap();
        assert!(scale_payloads_are_references(&d.delta));
        check_invariants(&d.delta).unwrap();
        let n_real = p.real_params().count();
        for_each_node(&d.delta, |n| {
            if let DeltaKind::Input(v) = n.kind() {
                assert!(v.index >= 1 && v.index <= n_real);
            }
        });
        for k in 0..3 {
            let env = gen_input(k, &p.params);
            assert!(eval(&d.primal, &env).bit_eq(&eval(&normal.body, &env)), "{}", p.body);
        }
    }
}

#[test]
fn gradient_programs_are_share_free_and_well_scoped() {
    for s in &SUITE {
        let g = build_gradient_program(&s.program()).unwrap();
        assert!(!any_node(&g.program.body, &mut |t| matches!(t, Term::Share(..))), "{}", s.name);
        assert!(matches!(check_program(&g.program), Ok(Type::Tuple(_))), "{}", s.name);
        let reparsed = parse_program(&g.source()).unwrap();
        assert!(alpha_eq(&reparsed.body, &g.program.body), "{}", s.name);
    }
}

#[test]
fn dot_product_gradient_terms() {
    let p = SUITE.iter().find(|s| s.name == "dot").unwrap().program();
    let g = build_gradient_program(&p).unwrap();
    let env = gen_input(4, &p.params);
    let (_, got) = g.run(&env, 1.0);
    let want = grad_concrete(&p, &env, &ConcreteArray::scalar_real(1.0)).unwrap();
    for (k, v) in &want {
        assert!(got[k].bit_eq(v), "{k}");
    }
    let text = g.source();
    assert!(text.contains("scatter"), "{text}");
}

#[test]
fn unshare_binds_each_id_once() {
    let t = parse_term("(op + (share 1 (replicate 3 1.0)) (share 1))").unwrap();
    let mut m = ShareMap::new();
    let r = unshare(&mut m, &t).unwrap();
    assert_eq!(m.len(), 1);
    let (x, body) = &m[&arrayad::ir::ShareId(1)];
    assert!(alpha_eq(body, &parse_term("(replicate 3 1.0)").unwrap()));
    let want = Term::op2(arrayad::tensor::PrimOp::Add, Term::var(x.clone()), Term::var(x.clone()));
    assert!(alpha_eq(&r, &want), "{r}");
}

#[test]
fn unshare_leaves_share_free_terms_alone() {
    let c = parse_term("2.0").unwrap();
    let mut m = ShareMap::new();
    assert!(alpha_eq(&unshare(&mut m, &c).unwrap(), &c));
    assert!(m.is_empty());
    let t = parse_term("(op * (replicate 2 x) (gather [2] y (lam [i] [i])))").unwrap();
    assert!(alpha_eq(&share_to_let(&t).unwrap(), &t));
}

#[test]
fn unshare_rejects_binders_outside_payloads() {
    let t = parse_term("(build1 2 (lam i 1.0))").unwrap();
    assert_eq!(share_to_let(&t).unwrap_err(), UnshareError::Malformed("build1"));
    let t = parse_term("(let (x 1.0) x)").unwrap();
    assert_eq!(share_to_let(&t).unwrap_err(), UnshareError::Malformed("let"));
}

#[test]
fn lets_are_stacked_lowest_id_first() {
    let t = parse_term("(op + (share 2 (op * (share 1 (replicate 2 c)) y)) (share 1))").unwrap();
    let r = share_to_let(&t).unwrap();
    let want = parse_term("(let (s1 (replicate 2 c)) (let (s2 (op * s1 y)) (op + s2 s1)))").unwrap();
    assert!(alpha_eq(&r, &want), "{r}");
}
