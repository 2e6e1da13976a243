use choreo_core::gradcheck::{grad_check, relative_error};
use choreo_core::rng::rng_for;
use choreo_core::{Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[]);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect())
}

/// Entries bounded away from zero, for ops with a kink there.
fn off_kink(rows: usize, cols: usize, seed: u64) -> Tensor {
    rand_tensor(rows, cols, seed).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

/// Contracts an op's output against fixed weights so every output entry
/// carries a different upstream gradient.
fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let len = g.value(out).len();
    let w = g.constant(rand_tensor(1, len, seed ^ 0x5eed).reshape(&shape)?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn check(build: Build, point: Vec<Tensor>, seed: u64) -> f64 {
    let report = grad_check(
        |g, v| {
            let out = build(g, v)?;
            contract(g, out, seed)
        },
        &point,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures.first());
    report.max_rel_error
}

fn ops() -> Vec<(&'static str, Build, fn(usize, usize, u64) -> Vec<Tensor>)> {
    fn two(r: usize, c: usize, s: u64) -> Vec<Tensor> {
        vec![rand_tensor(r, c, s), rand_tensor(r, c, s + 1)]
    }
    fn one(r: usize, c: usize, s: u64) -> Vec<Tensor> {
        vec![rand_tensor(r, c, s)]
    }
    fn one_off(r: usize, c: usize, s: u64) -> Vec<Tensor> {
        vec![off_kink(r, c, s)]
    }
    fn mm(r: usize, c: usize, s: u64) -> Vec<Tensor> {
        vec![rand_tensor(r, c, s), rand_tensor(c, r + 1, s + 1)]
    }
    fn qkv(r: usize, c: usize, s: u64) -> Vec<Tensor> {
        vec![rand_tensor(r, c, s), rand_tensor(r, c, s + 1), rand_tensor(r, c + 1, s + 2)]
    }
    fn row(_: usize, c: usize, s: u64) -> Vec<Tensor> {
        vec![rand_tensor(1, c, s)]
    }
    vec![
        ("add", |g, v| g.add(v[0], v[1]), two),
        ("sub", |g, v| g.sub(v[0], v[1]), two),
        ("mul", |g, v| g.mul(v[0], v[1]), two),
        ("scale", |g, v| Ok(g.scale(v[0], -2.5)), one),
        ("matmul", |g, v| g.matmul(v[0], v[1]), mm),
        ("transpose", |g, v| g.transpose(v[0]), one),
        ("concat_last", |g, v| g.concat_last(&[v[0], v[1], v[0]]), two),
        ("concat_rows", |g, v| g.concat_rows(&[v[1], v[0]]), two),
        (
            "slice_last",
            |g, v| {
                let c = g.value(v[0]).cols();
                g.slice_last(v[0], c / 2, c)
            },
            one,
        ),
        (
            "slice_rows",
            |g, v| {
                let r = g.value(v[0]).rows();
                g.slice_rows(v[0], 0, r.div_ceil(2))
            },
            one,
        ),
        (
            "gather_rows",
            |g, v| {
                let r = g.value(v[0]).rows();
                g.gather_rows(v[0], &[r - 1, 0, r - 1])
            },
            one,
        ),
        ("tile_rows", |g, v| g.tile_rows(v[0], 3), row),
        ("softmax", |g, v| Ok(g.softmax(v[0])), one),
        ("log_softmax", |g, v| Ok(g.log_softmax(v[0])), one),
        ("relu", |g, v| Ok(g.relu(v[0])), one_off),
        ("sigmoid", |g, v| Ok(g.sigmoid(v[0])), one),
        ("tanh", |g, v| Ok(g.tanh(v[0])), one),
        ("mean_rows", |g, v| g.mean_rows(v[0]), one),
        ("layer_norm", |g, v| Ok(g.layer_norm(v[0], 1e-5)), one),
        ("abs_sum", |g, v| Ok(g.abs_sum(v[0])), one_off),
        ("local_attention", |g, v| Ok(g.local_attention(v[0], v[1], v[2], 2)?.0), qkv),
        ("local_attention_wide", |g, v| Ok(g.local_attention(v[0], v[1], v[2], 64)?.0), qkv),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(rows in 1usize..5, cols in 2usize..5, seed in 0u64..10_000) {
        for (name, build, inputs) in ops() {
            let worst = check(build, inputs(rows, cols, seed), seed);
            prop_assert!(worst < 1e-6, "{} worst {}", name, worst);
        }
    }
}

#[test]
fn composite_chain_matches_finite_differences() {
    let point = vec![rand_tensor(4, 3, 1), rand_tensor(3, 5, 2), rand_tensor(1, 5, 3)];
    let report = grad_check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let b = g.tile_rows(v[2], 4)?;
            let h = g.add(h, b)?;
            let h = g.tanh(h);
            let h = g.layer_norm(h, 1e-5);
            let s = g.log_softmax(h);
            let s = g.mul(s, h)?;
            Ok(g.sum(s))
        },
        &point,
        // the loss cancels heavily; smaller steps drown in roundoff
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_error);
    assert_eq!(report.checked, 12 + 15 + 5);
}

fn square_op(g: &mut Graph, x: Var, bias: f64) -> Var {
    let value = g.value(x).map(|v| v * v);
    g.custom(
        &[x],
        value,
        Box::new(move |up: &Tensor, ins: &[&Tensor]| {
            let d: Vec<f64> = ins[0].data().iter().zip(up.data()).map(|(x, u)| (2.0 * x + bias) * u).collect();
            vec![Tensor::new(ins[0].shape().to_vec(), d).unwrap()]
        }),
    )
}

#[test]
fn corrupted_backward_is_caught() {
    let point = vec![rand_tensor(3, 3, 4)];
    let good = grad_check(|g, v| {
        let y = square_op(g, v[0], 0.0);
        Ok(g.sum(y))
    }, &point, 1e-6, 1e-6).unwrap();
    assert!(good.passed(), "{}", good.max_rel_error);
    // off by a constant 1e-2 in every coordinate
    let bad = grad_check(|g, v| {
        let y = square_op(g, v[0], 1e-2);
        Ok(g.sum(y))
    }, &point, 1e-6, 1e-4).unwrap();
    assert_eq!(bad.failures.len(), 9);
    assert!(bad.max_rel_error > 1e-3);
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    // tiny values are compared absolutely against the floor
    assert!(relative_error(1e-9, 0.0) < 1e-5);
}

#[test]
fn backward_twice_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let a = g.param(rand_tensor(5, 4, 7));
        let b = g.param(rand_tensor(4, 4, 8));
        let h = g.matmul(a, b).unwrap();
        let h = g.softmax(h);
        let l = g.sum(h);
        let grads = g.backward(l).unwrap();
        (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
    };
    let (x, y) = run();
    let (p, q) = run();
    assert!(x.data().iter().zip(p.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    assert!(y.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
}
