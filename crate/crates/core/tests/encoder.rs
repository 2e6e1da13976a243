use choreo_core::attention::{attended_pairs, local_window};
use choreo_core::encoder::{encode, encode_values, init_params, positional_encoding, AttentionKind, EncoderConfig, EncoderVars};
use choreo_core::rng::rng_for;
use choreo_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;

type M = Vec<Vec<f64>>;

fn cfg(window: usize, attention: AttentionKind) -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        n_heads: 2,
        d_x: 3,
        d_z: 4,
        d_k: 2,
        d_v: 2,
        window,
        ffn_hidden: 3,
        attention,
        layer_norm: true,
        positional: false,
    }
}

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[]);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Initialized weights with every bias, gain and shift moved off its
/// default so each term of the layer shows up in the output.
fn store(c: &EncoderConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_params(c, &mut s, &mut rng_for(seed, &[])).unwrap();
    for (i, t) in s.tensors_mut().iter_mut().enumerate() {
        let shift = rand_tensor(t.rows(), t.cols(), seed * 100 + i as u64);
        for (v, d) in t.data_mut().iter_mut().zip(shift.data()) {
            *v += 0.3 * d;
        }
    }
    s
}

fn to_m(t: &Tensor) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matmul(a: &M, b: &M) -> M {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

fn add_row(a: &M, b: &[f64]) -> M {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn layer_norm(a: &M, gain: &[f64], bias: &[f64]) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, x)| (x - mean) / (var + 1e-5).sqrt() * gain[i] + bias[i])
                .collect()
        })
        .collect()
}

/// One encoder layer written out with plain loops over the summation
/// bounds `j = i - k/2 ..= i + k/2`, clipped to the sequence.
fn oracle(c: &EncoderConfig, s: &ParamStore, x: &Tensor) -> M {
    let p = |name: &str| to_m(s.get(name).unwrap());
    let n = x.rows();
    let half = (c.window / 2) as isize;
    let u = matmul(&to_m(x), &p("encoder.embed"));
    let mut heads: Vec<M> = Vec::new();
    for h in 0..c.n_heads {
        let q = matmul(&u, &p(&format!("encoder.layer0.head{h}.query")));
        let k = matmul(&u, &p(&format!("encoder.layer0.head{h}.key")));
        let v = matmul(&u, &p(&format!("encoder.layer0.head{h}.value")));
        let mut out = vec![vec![0.0; c.d_v]; n];
        for i in 0..n as isize {
            let js: Vec<usize> = (i - half..=i + half)
                .filter(|&j| j >= 0 && j < n as isize)
                .map(|j| j as usize)
                .collect();
            let e: Vec<f64> = js
                .iter()
                .map(|&j| q[i as usize].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (c.d_k as f64).sqrt())
                .collect();
            let z: f64 = e.iter().map(|x| x.exp()).sum();
            for (idx, &j) in js.iter().enumerate() {
                let a = e[idx].exp() / z;
                for d in 0..c.d_v {
                    out[i as usize][d] += a * v[j][d];
                }
            }
        }
        heads.push(out);
    }
    let cat: M = (0..n).map(|i| heads.iter().flat_map(|h| h[i].clone()).collect()).collect();
    let att = matmul(&cat, &p("encoder.layer0.out"));
    let h = layer_norm(&add(&u, &att), &p("encoder.layer0.norm1.gain")[0], &p("encoder.layer0.norm1.bias")[0]);
    let f = add_row(&matmul(&h, &p("encoder.layer0.ffn.w1")), &p("encoder.layer0.ffn.b1")[0]);
    let f: M = f.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect();
    let f = add_row(&matmul(&f, &p("encoder.layer0.ffn.w2")), &p("encoder.layer0.ffn.b2")[0]);
    layer_norm(&add(&h, &f), &p("encoder.layer0.norm2.gain")[0], &p("encoder.layer0.norm2.bias")[0])
}

#[test]
fn single_layer_matches_straight_line_oracle() {
    for (window, n) in [(2, 7), (3, 6), (4, 9), (1, 4), (40, 5)] {
        let c = cfg(window, AttentionKind::Local);
        let s = store(&c, 3 + window as u64);
        let x = rand_tensor(n, 3, 50 + n as u64);
        let got = encode_values(&c, &s, &x).unwrap();
        let want = oracle(&c, &s, &x);
        for i in 0..n {
            for d in 0..c.d_z {
                let (a, b) = (got.get(i, d), want[i][d]);
                assert!((a - b).abs() < 1e-12, "k={window} row {i} col {d}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn far_away_frames_do_not_reach_a_row_in_one_layer() {
    let c = cfg(4, AttentionKind::Local);
    let s = store(&c, 8);
    let x = rand_tensor(12, 3, 9);
    let mut y = x.clone();
    // rows 0..=2 only see frames up to index 4
    for t in 5..12 {
        for v in y.row_mut(t) {
            *v += 1.0;
        }
    }
    let a = encode_values(&c, &s, &x).unwrap();
    let b = encode_values(&c, &s, &y).unwrap();
    for i in 0..=2 {
        assert_eq!(a.row(i), b.row(i));
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn positional_table_values() {
    let pe = positional_encoding(3, 4);
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
    assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
    assert!((pe.get(2, 3) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
}

/// Counts pairs with `|i - j| <= k/2` directly.
fn brute_pairs(n: usize, k: usize) -> usize {
    let half = (k / 2) as isize;
    let mut count = 0;
    for i in 0..n as isize {
        for j in 0..n as isize {
            if (i - j).abs() <= half {
                count += 1;
            }
        }
    }
    count
}

#[test]
fn pair_count_scales_linearly() {
    let (a, b) = (attended_pairs(256, 16), attended_pairs(512, 16));
    assert_eq!(a, brute_pairs(256, 16));
    assert_eq!(b, brute_pairs(512, 16));
    let ratio = b as f64 / a as f64;
    assert!((1.9..=2.1).contains(&ratio), "{ratio}");
}

#[test]
fn encoder_reports_pairs_per_head_and_layer() {
    let mut c = cfg(4, AttentionKind::Local);
    c.n_layers = 2;
    let s = store(&c, 1);
    let mut g = Graph::new();
    let bound = s.bind(&mut g, false);
    let vars = EncoderVars::resolve(&c, &bound).unwrap();
    let x = g.constant(rand_tensor(10, 3, 2));
    let out = encode(&mut g, &c, &vars, x).unwrap();
    assert_eq!(out.pairs, 2 * 2 * brute_pairs(10, 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn wide_windows_equal_global_attention(n in 1usize..=32, extra in 0usize..8, seed in 0u64..1000) {
        let k = 2 * n + extra;
        let local = cfg(k, AttentionKind::Local);
        let global = cfg(k, AttentionKind::Global);
        let s = store(&local, seed);
        let x = rand_tensor(n, 3, seed + 1);
        let a = encode_values(&local, &s, &x).unwrap();
        let b = encode_values(&global, &s, &x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn pairs_bounded_and_exact(n in 1usize..300, k in 0usize..64) {
        let p = attended_pairs(n, k);
        prop_assert!(p <= n * (k + 1));
        prop_assert_eq!(p, brute_pairs(n, k));
        for i in [0, n / 2, n - 1] {
            let (lo, hi) = local_window(i, n, k);
            prop_assert!(lo <= i && i <= hi && hi < n);
            prop_assert!(hi - lo <= 2 * (k / 2));
        }
    }
}
