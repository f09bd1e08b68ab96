//! Per-operation finite-difference sweeps, shared between the gradcheck
//! test binary and the acceptance suite's gradient criterion.

use super::{gradcheck, seeded, weighted_sum, FdInput, FD_TOL};
use lexvq::tensor::{SparseMat, Tape};
use rand::Rng;
use std::rc::Rc;

pub fn add_sub_mul_scale() {
    let mut rng = seeded(100);
    for case in 0..20 {
        let n = rng.gen_range(2..8);
        let a = FdInput::random(&mut rng, &[n]);
        let b = FdInput::random(&mut rng, &[n]);
        let s: f64 = rng.gen_range(-2.0..2.0);
        let wrng = seeded(200 + case);
        gradcheck("add", &[a.clone(), b.clone()], FD_TOL, |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck("sub", &[a.clone(), b.clone()], FD_TOL, |t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck("mul", &[a.clone(), b.clone()], FD_TOL, |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck("scale", &[a], FD_TOL, |t, v| {
            let y = t.scale(v[0], s);
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

pub fn matmul_random_shapes() {
    let mut rng = seeded(101);
    for case in 0..20 {
        let (m, k, n) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let a = FdInput::random(&mut rng, &[m, k]);
        let b = FdInput::random(&mut rng, &[k, n]);
        let wrng = seeded(300 + case);
        gradcheck("matmul", &[a, b], FD_TOL, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

pub fn matmul_4x5_5x3_tight_tolerance() {
    let mut rng = seeded(102);
    let a = FdInput::random(&mut rng, &[4, 5]);
    let b = FdInput::random(&mut rng, &[5, 3]);
    let wrng = seeded(303);
    gradcheck("matmul-4x5x3", &[a, b], 1e-6, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, y, &mut wrng.clone())
    });
}

pub fn conv2d_random_geometries() {
    let mut rng = seeded(103);
    let mut done = 0;
    while done < 20 {
        let batch = rng.gen_range(1..3);
        let c_in = rng.gen_range(1..3);
        let c_out = rng.gen_range(1..3);
        let k = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..2);
        let h = rng.gen_range(k.max(2)..7);
        let w = rng.gen_range(k.max(2)..7);
        if (h + 2 * padding) < k
            || (w + 2 * padding) < k
            || (h + 2 * padding - k) % stride != 0
            || (w + 2 * padding - k) % stride != 0
        {
            continue;
        }
        done += 1;
        let input = FdInput::random(&mut rng, &[batch, c_in, h, w]);
        let kernel = FdInput::random(&mut rng, &[c_out, c_in, k, k]);
        let wrng = seeded(400 + done);
        gradcheck("conv2d", &[input, kernel], FD_TOL, move |t, v| {
            let y = t.conv2d(v[0], v[1], stride, padding).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

pub fn conv2d_matches_loop_reference_and_fd() {
    // The spec-pinned geometry: 2x3x8x8 input, 4x3x3x3 kernel, stride 2, pad 1.
    let mut rng = seeded(104);
    let input = FdInput::random(&mut rng, &[2, 3, 8, 8]);
    let kernel = FdInput::random(&mut rng, &[4, 3, 3, 3]);

    let mut tape = Tape::new();
    let iv = tape.leaf_parts(input.data.clone(), &input.shape.clone(), false);
    let kv = tape.leaf_parts(kernel.data.clone(), &kernel.shape, false);
    let out = tape.conv2d(iv, kv, 2, 1).unwrap();
    let reference = super::conv2d_reference(&input.data, &kernel.data, 2, 3, 8, 8, 4, 3, 2, 1);
    let got = tape.value(out);
    assert_eq!(got.len(), reference.len());
    for (g, r) in got.iter().zip(&reference) {
        assert!((g - r).abs() < 1e-12, "forward mismatch: {g} vs {r}");
    }

    let wrng = seeded(404);
    gradcheck("conv2d-pinned", &[input, kernel], 1e-5, |t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1).unwrap();
        weighted_sum(t, y, &mut wrng.clone())
    });
}

pub fn relu_away_from_kink() {
    let mut rng = seeded(105);
    for case in 0..20 {
        let n = rng.gen_range(2..10);
        let x = FdInput::random_off_zero(&mut rng, &[n]);
        let wrng = seeded(500 + case);
        gradcheck("relu", &[x], FD_TOL, |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

pub fn reductions_sum_and_mse() {
    let mut rng = seeded(106);
    for _ in 0..20 {
        let n = rng.gen_range(2..10);
        let a = FdInput::random(&mut rng, &[n]);
        let b = FdInput::random(&mut rng, &[n]);
        gradcheck("sum", &[a.clone()], FD_TOL, |t, v| t.sum(v[0]));
        gradcheck("mse", &[a, b], FD_TOL, |t, v| t.mse(v[0], v[1]).unwrap());
    }
}

pub fn shape_ops_reshape_split_concat_upsample_slice() {
    let mut rng = seeded(107);
    for case in 0..20 {
        let (b, c2, h, w) = (
            rng.gen_range(1..3),
            rng.gen_range(1..3) * 2,
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let x = FdInput::random(&mut rng, &[b, c2, h, w]);
        let wrng = seeded(600 + case);

        gradcheck("reshape", &[x.clone()], FD_TOL, |t, v| {
            let y = t.reshape(v[0], &[b * c2 * h * w]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck("channel_split", &[x.clone()], FD_TOL, |t, v| {
            let (lo, hi) = t.channel_split(v[0]).unwrap();
            let sl = weighted_sum(t, lo, &mut wrng.clone());
            let sh = weighted_sum(t, hi, &mut seeded(700 + case));
            t.add(sl, sh).unwrap()
        });
        gradcheck("upsample2x", &[x.clone()], FD_TOL, |t, v| {
            let y = t.upsample_nearest2x(v[0]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });

        let other = FdInput::random(&mut rng, &[b, 3, h, w]);
        gradcheck("channel_concat", &[x.clone(), other], FD_TOL, |t, v| {
            let y = t.channel_concat(v[0], v[1]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });

        let rows = rng.gen_range(2..6);
        let d = rng.gen_range(1..4);
        let mat = FdInput::random(&mut rng, &[rows, d]);
        let start = rng.gen_range(0..rows);
        let len = rng.gen_range(1..=rows - start);
        gradcheck("slice_rows", &[mat], FD_TOL, |t, v| {
            let y = t.slice_rows(v[0], start, len).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

pub fn bias_broadcast_ops() {
    let mut rng = seeded(108);
    for case in 0..20 {
        let (n, d) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let mat = FdInput::random(&mut rng, &[n, d]);
        let row = FdInput::random(&mut rng, &[d]);
        let wrng = seeded(800 + case);
        gradcheck("add_rows", &[mat, row], FD_TOL, |t, v| {
            let y = t.add_rows(v[0], v[1]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });

        let (b, c, h, w) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..3),
            rng.gen_range(1..3),
        );
        let map = FdInput::random(&mut rng, &[b, c, h, w]);
        let bias = FdInput::random(&mut rng, &[c]);
        gradcheck("add_channel_bias", &[map, bias], FD_TOL, |t, v| {
            let y = t.add_channel_bias(v[0], v[1]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

pub fn spmm_against_constant_sparse_matrices() {
    let mut rng = seeded(109);
    for case in 0..20 {
        let n = rng.gen_range(2..6);
        let d = rng.gen_range(1..4);
        let mut m = SparseMat::new(n);
        for i in 0..n {
            m.push(i, i, rng.gen_range(0.2..1.0));
            for j in 0..n {
                if i != j && rng.gen_bool(0.4) {
                    m.push(i, j, rng.gen_range(-1.0..1.0));
                }
            }
        }
        let m = Rc::new(m);
        let h = FdInput::random(&mut rng, &[n, d]);
        let wrng = seeded(900 + case);
        gradcheck("spmm", &[h], FD_TOL, |t, v| {
            let y = t.spmm(&m, v[0]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

pub fn lookup_rows_table_gradient() {
    let mut rng = seeded(110);
    for case in 0..20 {
        let k = rng.gen_range(2..6);
        let d = rng.gen_range(1..4);
        let (b, h, w) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
        let table = FdInput::random(&mut rng, &[k, d]);
        let indices: Rc<Vec<usize>> =
            Rc::new((0..b * h * w).map(|_| rng.gen_range(0..k)).collect());
        let wrng = seeded(1000 + case);
        gradcheck("lookup_rows", &[table], FD_TOL, |t, v| {
            let y = t.lookup_rows(v[0], Rc::clone(&indices), b, h, w).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

pub fn graph_conv_composition() {
    // a_hat * h * W + bias as used by the graph layers, FD over all three.
    let mut rng = seeded(111);
    for case in 0..20 {
        let n = rng.gen_range(2..6);
        let (d_in, d_out) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let mut m = SparseMat::new(n);
        for i in 0..n {
            m.push(i, i, rng.gen_range(0.2..1.0));
            for j in 0..n {
                if i != j && rng.gen_bool(0.3) {
                    m.push(i, j, rng.gen_range(-0.8..0.8));
                }
            }
        }
        let m = Rc::new(m);
        let h = FdInput::random(&mut rng, &[n, d_in]);
        let wt = FdInput::random(&mut rng, &[d_in, d_out]);
        let bias = FdInput::random(&mut rng, &[d_out]);
        let wrng = seeded(1100 + case);
        gradcheck("graph_conv", &[h, wt, bias], FD_TOL, |t, v| {
            let p = t.spmm(&m, v[0]).unwrap();
            let proj = t.matmul(p, v[1]).unwrap();
            let y = t.add_rows(proj, v[2]).unwrap();
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

pub fn stop_gradient_contributes_exactly_zero() {
    let mut rng = seeded(112);
    for _ in 0..20 {
        let n = rng.gen_range(2..8);
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf_parts(data.clone(), &[n], true);

        // loss = sum(sg(x) * x) must yield grad exactly x (single live path)
        let sg = tape.stop_gradient(x);
        let prod = tape.mul(sg, x).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let grad = tape.grad(x).unwrap();
        for (g, v) in grad.iter().zip(&data) {
            assert_eq!(g.to_bits(), v.to_bits(), "sg leaked gradient");
        }
    }
}

/// Runs every per-op sweep; the acceptance gradient criterion.
pub fn run_all() {
    add_sub_mul_scale();
    matmul_random_shapes();
    matmul_4x5_5x3_tight_tolerance();
    conv2d_random_geometries();
    conv2d_matches_loop_reference_and_fd();
    relu_away_from_kink();
    reductions_sum_and_mse();
    shape_ops_reshape_split_concat_upsample_slice();
    bias_broadcast_ops();
    spmm_against_constant_sparse_matrices();
    lookup_rows_table_gradient();
    graph_conv_composition();
    stop_gradient_contributes_exactly_zero();
}
