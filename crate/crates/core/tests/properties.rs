use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use arrayad::bot::{check_normal_form, normalize_program, normalize_with, Options, Strategy as BotStrategy};
use arrayad::delta::{check_invariants, DVarName, Delta, DeltaKind};
use arrayad::interp::{eval, eval_memo, eval_value, Env};
use arrayad::ir::{any_node, NameGen, Program, Term};
use arrayad::oracle::{finite_diff_grad, gen_input, gen_program, max_rel_err, rel_err};
use arrayad::reverse::{grad_concrete, reverse_pass, Concrete};
use arrayad::symbolic::{build_gradient_program, dualize_concrete, share_to_let, symbolic_gradient};
use arrayad::tensor::{floor_div, floor_mod, inverse_permutation, ConcreteArray, Kind, Shape};

fn close(a: &ConcreteArray, b: &ConcreteArray, rtol: f64) -> bool {
    a.shape() == b.shape()
        && match a.kind() {
            Kind::Real => a.as_real().iter().zip(b.as_real()).all(|(u, v)| rel_err(*u, *v, 1e-8) <= rtol),
            _ => a.bit_eq(b),
        }
}

/// Forward evaluation of a concrete Delta on input tangents.
fn forward(d: &Delta<Concrete>, dx: &BTreeMap<DVarName, ConcreteArray>, memo: &mut HashMap<u64, ConcreteArray>) -> ConcreteArray {
    match d.kind() {
        DeltaKind::Zero => ConcreteArray::zeros(Kind::Real, d.shape().clone()),
        DeltaKind::Input(v) => dx[v].clone(),
        DeltaKind::Add(a, b) => {
            let (x, y) = (forward(a, dx, memo), forward(b, dx, memo));
            ConcreteArray::real(x.shape().clone(), x.as_real().iter().zip(y.as_real()).map(|(u, v)| u + v).collect())
        }
        DeltaKind::Scale(arr, e) => {
            let x = forward(e, dx, memo);
            ConcreteArray::real(x.shape().clone(), x.as_real().iter().zip(arr.as_real()).map(|(u, v)| u * v).collect())
        }
        DeltaKind::Share(id, e) => {
            if let Some(v) = memo.get(&id.0) {
                return v.clone();
            }
            let v = forward(e, dx, memo);
            memo.insert(id.0, v.clone());
            v
        }
        DeltaKind::Index(e, ix) => forward(e, dx, memo).index(ix),
        DeltaKind::SumOuter(e) => forward(e, dx, memo).sum_outer(),
        DeltaKind::Gather(sh, e, f) => forward(e, dx, memo).gather(sh, f.arity, &*f.f),
        DeltaKind::Scatter(sh, e, f) => forward(e, dx, memo).scatter(sh, f.arity, &*f.f),
        DeltaKind::LitArray(ds) => {
            let parts: Vec<_> = ds.iter().map(|e| forward(e, dx, memo)).collect();
            ConcreteArray::from_subarrays(&parts)
        }
        DeltaKind::Replicate(k, e) => forward(e, dx, memo).replicate(*k),
        DeltaKind::Transpose(perm, e) => forward(e, dx, memo).transpose(perm),
        DeltaKind::Reshape(sh, e) => forward(e, dx, memo).reshape(sh),
    }
}

fn dot_all(a: &BTreeMap<DVarName, ConcreteArray>, b: &BTreeMap<DVarName, ConcreteArray>) -> f64 {
    a.iter().map(|(k, x)| b.get(k).map_or(0.0, |y| x.dot(y))).sum()
}

fn shape_strategy(max_rank: usize) -> impl proptest::strategy::Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 0..=max_rank)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gather_and_scatter_are_transposes(
        src in shape_strategy(2),
        outer in shape_strategy(2),
        table_seed in any::<u64>(),
    ) {
        let src = Shape::new(src);
        let rest = Shape::new(vec![2]);
        let a_sh = src.concat(&rest);
        let out_sh = Shape::new(outer.clone()).concat(&rest);
        let m1 = outer.len();
        let m2 = src.rank();
        // index map that is sometimes out of range
        let f = move |ix: &[i64]| -> Vec<i64> {
            let h = ix.iter().fold(table_seed, |h, &i| h.wrapping_mul(6364136223846793005).wrapping_add(i as u64 + 1));
            (0..m2).map(|k| ((h >> (8 * k)) % 5) as i64 - 1).collect()
        };
        let x = ConcreteArray::real(a_sh.clone(), (0..a_sh.size()).map(|i| (i as f64 * 0.37).sin()).collect());
        let y = ConcreteArray::real(out_sh.clone(), (0..out_sh.size()).map(|i| (i as f64 * 0.61).cos()).collect());
        let gx = x.gather(&out_sh, m1, &f);
        let sy = y.scatter(&a_sh, m1, &f);
        let (l, r) = (gx.dot(&y), x.dot(&sy));
        prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs()), "{} vs {}", l, r);
    }

    #[test]
    fn transpose_inverse_and_reshape_roundtrip(dims in prop::collection::vec(1usize..4, 2..=3), seed in any::<u64>()) {
        let sh = Shape::new(dims.clone());
        let a = ConcreteArray::real(sh.clone(), (0..sh.size()).map(|i| i as f64).collect());
        let mut perm: Vec<usize> = (0..dims.len()).collect();
        perm.rotate_left((seed % dims.len() as u64) as usize);
        let t = a.transpose(&perm).transpose(&inverse_permutation(&perm));
        prop_assert!(t.bit_eq(&a));
        let flat = a.reshape(&Shape::new(vec![sh.size()]));
        prop_assert!(flat.reshape(&sh).bit_eq(&a));
    }

    #[test]
    fn floor_division_identity(a in -1000i64..1000, b in -20i64..20) {
        if b == 0 {
            prop_assert_eq!(floor_div(a, b), 0);
            prop_assert_eq!(floor_mod(a, b), 0);
        } else {
            prop_assert_eq!(floor_div(a, b) * b + floor_mod(a, b), a);
            let m = floor_mod(a, b);
            prop_assert!(m == 0 || (m > 0) == (b > 0));
        }
    }

    #[test]
    fn vectorisation_preserves_values_under_both_strategies(seed in any::<u64>()) {
        let p = gen_program(seed, 30);
        let env = gen_input(seed, &p.params);
        let want = eval(&p.body, &env);
        let mut results = Vec::new();
        for strategy in [BotStrategy::OutsideIn, BotStrategy::InsideOut] {
            let gen = NameGen::above(&p.body);
            let (r, _) = normalize_with(&p.body, &p.type_env(), Options { strategy, simplify: false }, &gen);
            prop_assert!(check_normal_form(&r).is_normal(), "{}", r);
            let got = eval(&r, &env);
            prop_assert!(close(&want, &got, 1e-10), "{:?}: {} vs {}", strategy, want, got);
            results.push(got);
        }
        prop_assert!(close(&results[0], &results[1], 1e-10));
    }

    #[test]
    fn simplify_preserves_values(seed in any::<u64>()) {
        let p = gen_program(seed, 30);
        let env = gen_input(seed ^ 1, &p.params);
        let a = normalize_program(&p, Options { strategy: BotStrategy::OutsideIn, simplify: true });
        prop_assert!(check_normal_form(&a.body).is_normal());
        prop_assert!(close(&eval(&p.body, &env), &eval(&a.body, &env), 1e-10));
    }

    #[test]
    fn reverse_pass_is_the_transpose_of_the_forward_derivative(seed in any::<u64>()) {
        let p = normalize_program(&gen_program(seed, 30), Options::default());
        let env = gen_input(seed, &p.params);
        let (_, d) = dualize_concrete(&p, &env).unwrap();
        prop_assert!(check_invariants(&d).is_ok());
        let tangents = gen_input(seed.wrapping_add(99), &p.params);
        let dx: BTreeMap<DVarName, ConcreteArray> = p
            .real_params()
            .enumerate()
            .map(|(k, q)| (DVarName { index: k + 1, shape: q.ty.shape.clone() }, tangents[&q.name].clone()))
            .collect();
        let jdx = forward(&d, &dx, &mut HashMap::new()).scalar_value_real();
        let c = 1.7;
        let g = reverse_pass(&Concrete, ConcreteArray::scalar_real(c), &d);
        let rhs = dot_all(&g, &dx);
        prop_assert!((jdx * c - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()), "{} vs {}", jdx * c, rhs);
    }

    #[test]
    fn gradients_are_linear_in_the_cotangent(seed in any::<u64>(), c in -3.0f64..3.0) {
        let p = gen_program(seed, 25);
        let env = gen_input(seed, &p.params);
        let one = grad_concrete(&p, &env, &ConcreteArray::scalar_real(1.0)).unwrap();
        let scaled = grad_concrete(&p, &env, &ConcreteArray::scalar_real(c)).unwrap();
        for (k, g) in &one {
            for (u, v) in g.as_real().iter().zip(scaled[k].as_real()) {
                prop_assert!((u * c - v).abs() <= 1e-10 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn generated_gradients_match_finite_differences(seed in any::<u64>()) {
        let p = gen_program(seed, 20);
        let env = gen_input(seed, &p.params);
        let g = grad_concrete(&p, &env, &ConcreteArray::scalar_real(1.0)).unwrap();
        let fd = finite_diff_grad(&p, &env, 1e-6);
        let e = max_rel_err(&g, &fd, 1e-8);
        prop_assert!(e <= 1e-4, "relative error {:e}\n{}", e, p.body);
    }

    #[test]
    fn compiled_gradients_match_dual_arrays(seed in any::<u64>()) {
        let p = gen_program(seed, 25);
        let compiled = build_gradient_program(&p).unwrap();
        for k in 0..2 {
            let env = gen_input(seed.wrapping_add(k), &p.params);
            let (primal, g) = compiled.run(&env, 0.5);
            prop_assert!(close(&primal, &eval(&p.body, &env), 1e-12));
            let want = grad_concrete(&p, &env, &ConcreteArray::scalar_real(0.5)).unwrap();
            prop_assert!(max_rel_err(&g, &want, 1e-8) <= 1e-12);
        }
    }

    #[test]
    fn share_to_let_agrees_with_memoised_evaluation(seed in any::<u64>()) {
        let p: Program = gen_program(seed, 25);
        let g = symbolic_gradient(&p).unwrap();
        prop_assert!(check_invariants(&g.delta).is_ok());
        let mut env = gen_input(seed, &p.params);
        env.insert(g.cotangent.clone(), ConcreteArray::scalar_real(1.0));
        let (memo, counts) = eval_memo(&g.term, &env);
        prop_assert!(counts.values().all(|&n| n <= 1));
        let flat = share_to_let(&g.term).unwrap();
        prop_assert!(!any_node(&flat, &mut |t| matches!(t, Term::Share(..))));
        let plain = eval_value(&flat, &env);
        let (m, f) = (memo.tuple(), plain.tuple());
        prop_assert!(close(m[0].array(), f[0].array(), 1e-12));
        for (x, y) in m[1].tuple().iter().zip(f[1].tuple()) {
            prop_assert!(close(x.array(), y.array(), 1e-12));
        }
    }
}

#[test]
fn empty_environment_is_rejected_by_dualization() {
    let p = gen_program(3, 10);
    assert!(dualize_concrete(&p, &Env::new()).is_err());
}
