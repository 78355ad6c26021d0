use std::cell::RefCell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::oracle;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn image(h: usize, w: usize, d: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[h, w, d], -1.0, 1.0, &mut rng(seed))
}

#[test]
fn single_token_returns_value() {
    let mut r = rng(1);
    let x = Tensor::<f64>::uniform(&[1, 4], -3.0, 3.0, &mut r);
    let p = AttnParams::random(4, 3, &mut r);
    let out = self_attention(&x, &p).unwrap();
    let v = crate::ops::linear_project(&x, &p.w_v).unwrap();
    assert_eq!(out, v);
}

#[test]
fn identical_rows_are_fixed_points() {
    let row = [0.3, -1.2, 0.7];
    let x = Tensor::<f64>::from_fn(&[5, 3], |i| row[i[1]]);
    let out = self_attention(&x, &AttnParams::identity(3, 1)).unwrap();
    for i in 0..5 {
        for c in 0..3 {
            assert!((out.row(i)[c] - row[c]).abs() < 1e-15);
        }
    }
}

#[test]
fn sa_matches_oracle() {
    let mut r = rng(2);
    let x = Tensor::<f64>::uniform(&[5, 4], -1.0, 1.0, &mut r);
    let p = AttnParams::random(4, 3, &mut r);
    let got = self_attention(&x, &p).unwrap();
    assert!(got.rel_err(&oracle::self_attention(&x, &p).unwrap()).unwrap() <= 1e-12);
}

#[test]
fn sa_ignores_row_order() {
    let mut r = rng(3);
    let x = Tensor::<f64>::uniform(&[6, 4], -1.0, 1.0, &mut r);
    let p = AttnParams::random(4, 3, &mut r);
    let q = Tensor::<f64>::uniform(&[1, 4], -1.0, 1.0, &mut r);
    // query row fixed in front, remaining rows reversed
    let stack = |order: &[usize]| {
        let mut data = q.data().to_vec();
        for &i in order {
            data.extend_from_slice(x.row(i));
        }
        Tensor::new(vec![7, 4], data).unwrap()
    };
    let a = self_attention(&stack(&[0, 1, 2, 3, 4, 5]), &p).unwrap();
    let b = self_attention(&stack(&[5, 4, 3, 2, 1, 0]), &p).unwrap();
    for c in 0..4 {
        assert!((a.row(0)[c] - b.row(0)[c]).abs() < 1e-14);
    }
}

#[test]
fn skv_matches_oracle() {
    let mut r = rng(4);
    let x = image(16, 16, 4, 40);
    let p = AttnParams::random(4, 3, &mut r);
    for spec in [SlideSpec::new(7, 2, 3, 16).unwrap(), SlideSpec::new(5, 3, 3, 4).unwrap()] {
        let got = skv_sa(&x, &p, &spec).unwrap();
        assert!(got.rel_err(&oracle::skv_sa(&x, &p, &spec).unwrap()).unwrap() <= 1e-12);
    }
}

#[test]
fn full_window_reduces_to_sa() {
    let mut r = rng(5);
    let x = image(7, 7, 4, 50);
    let p = AttnParams::random(4, 3, &mut r);
    let spec = SlideSpec::new(7, 1, 3, 1).unwrap();
    let got = skv_sa(&x, &p, &spec).unwrap();
    let sa = self_attention(&x.reshape(&[49, 4]).unwrap(), &p).unwrap();
    assert!(got.reshape(&[49, 4]).unwrap().rel_err(&sa).unwrap() <= 1e-10);
}

#[test]
fn constant_input_constant_output() {
    let mut r = rng(6);
    let x = Tensor::<f64>::from_fn(&[16, 16, 4], |i| [0.2, -0.5, 0.9, 0.1][i[2]]);
    let p = AttnParams::random(4, 3, &mut r);
    let spec = SlideSpec::new(7, 2, 3, 16).unwrap();
    for out in [
        skv_sa(&x, &p, &spec).unwrap(),
        askv_sa(&x, &p, &spec).unwrap().out,
        tea(&x, &p, &spec).unwrap(),
    ] {
        let first = out.pixel(0, 0).to_vec();
        for h in 0..16 {
            for w in 0..16 {
                for c in 0..4 {
                    assert!((out.pixel(h, w)[c] - first[c]).abs() < 1e-14);
                }
            }
        }
    }
}

#[test]
fn zero_kernel_gives_base_grid() {
    let x = image(6, 5, 3, 7);
    let coords = adaptive_offsets(&x, &OffsetGen::zeros(3, 3), &SlideSpec::new(1, 1, 3, 1).unwrap()).unwrap();
    for h in 0..6 {
        for w in 0..5 {
            assert_eq!(coords.pixel(h, w), &[h as f64, w as f64]);
        }
    }
}

#[test]
fn constant_offset_shifts_rows() {
    // one channel of value 1, kernel summing to 2 on it, reduction onto rows
    let x = Tensor::<f64>::full(&[8, 8, 1], 1.0);
    let gen = OffsetGen {
        kernel: Tensor::from_fn(&[3, 3, 1], |i| if i[0] == 1 && i[1] == 1 { 2.0 } else { 0.0 }),
        reduce: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
    };
    let coords = adaptive_offsets(&x, &gen, &SlideSpec::new(1, 1, 3, 1).unwrap()).unwrap();
    assert_eq!(coords.pixel(3, 4), &[5.0, 4.0]);
}

#[test]
fn offset_field_moves_with_input() {
    let mut r = rng(8);
    let x = image(12, 12, 3, 80);
    let gen = OffsetGen::random(3, 3, 1.0, &mut r);
    let spec = SlideSpec::new(1, 1, 3, 1).unwrap();
    let (dy, dx) = (2usize, 3usize);
    let shifted = Tensor::from_fn(&[12, 12, 3], |i| x.at3((i[0] + 12 - dy) % 12, (i[1] + 12 - dx) % 12, i[2]));
    let a = adaptive_offsets(&x, &gen, &spec).unwrap();
    let b = adaptive_offsets(&shifted, &gen, &spec).unwrap();
    for h in 1 + dy..11 {
        for w in 1 + dx..11 {
            let (pa, pb) = (a.pixel(h - dy, w - dx), b.pixel(h, w));
            assert!((pb[0] - pa[0] - dy as f64).abs() < 1e-12);
            assert!((pb[1] - pa[1] - dx as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn askv_matches_oracle_and_degenerates() {
    let mut r = rng(9);
    let spec = SlideSpec::new(7, 2, 3, 16).unwrap();
    let x = image(16, 16, 4, 90);
    let p = AttnParams::random(4, 3, &mut r).with_offset_scale(8.0);
    let got = askv_sa(&x, &p, &spec).unwrap();
    let (out, ks, vs) = oracle::askv_sa(&x, &p, &spec).unwrap();
    assert!(got.out.rel_err(&out).unwrap() <= 1e-12);
    assert_eq!(got.k_shuf, ks);
    assert_eq!(got.v_shuf, vs);

    let flat = p.with_zero_offsets();
    assert_eq!(askv_sa(&x, &flat, &spec).unwrap().out, skv_sa(&x, &flat, &spec).unwrap());
}

#[test]
fn dsa_matches_oracle_and_identity_pool_is_sa() {
    let mut r = rng(10);
    let spec = SlideSpec::new(3, 1, 3, 16).unwrap();
    let x = image(8, 8, 4, 100);
    let p = AttnParams::random(4, 3, &mut r);
    let k = Tensor::<f64>::uniform(&[8, 8, 4], -1.0, 1.0, &mut r);
    let v = Tensor::<f64>::uniform(&[8, 8, 4], -1.0, 1.0, &mut r);
    let got = dsa(&x, &k, &v, &p, &spec).unwrap();
    assert!(got.rel_err(&oracle::dsa(&x, &k, &v, &p, &spec).unwrap()).unwrap() <= 1e-12);

    let small = image(4, 4, 4, 101);
    let kk = crate::ops::linear_project(&small.reshape(&[16, 4]).unwrap(), &p.w_k).unwrap();
    let vv = crate::ops::linear_project(&small.reshape(&[16, 4]).unwrap(), &p.w_v).unwrap();
    let got = dsa(&small, &kk.reshape(&[4, 4, 4]).unwrap(), &vv.reshape(&[4, 4, 4]).unwrap(), &p, &spec).unwrap();
    let sa = self_attention(&small.reshape(&[16, 4]).unwrap(), &p).unwrap();
    assert!(got.reshape(&[16, 4]).unwrap().rel_err(&sa).unwrap() <= 1e-10);
}

#[test]
fn max_pool_dsa_matches_oracle() {
    let mut r = rng(11);
    let spec = SlideSpec::new(3, 1, 3, 9).unwrap().with_pool(crate::ops::Pool::Max);
    let x = image(7, 8, 4, 110);
    let p = AttnParams::random(4, 3, &mut r);
    let got = dsa(&x, &x, &x, &p, &spec).unwrap();
    assert!(got.rel_err(&oracle::dsa(&x, &x, &x, &p, &spec).unwrap()).unwrap() <= 1e-12);
}

#[test]
fn tea_branches() {
    let mut r = rng(12);
    let spec = SlideSpec::new(7, 2, 3, 16).unwrap();
    let x = image(16, 16, 4, 120);
    let p = AttnParams::random(4, 3, &mut r).with_offset_scale(4.0);
    let both = tea(&x, &p, &spec).unwrap();
    assert!(both.rel_err(&oracle::tea(&x, &p, &spec).unwrap()).unwrap() <= 1e-12);

    let a = askv_sa(&x, &p, &spec).unwrap();
    assert_eq!(tea(&x, &p.clone().with_alphas(1.0, 0.0), &spec).unwrap(), a.out);
    let d = dsa(&x, &a.k_shuf, &a.v_shuf, &p, &spec).unwrap();
    assert_eq!(tea(&x, &p.clone().with_alphas(0.0, 1.0), &spec).unwrap(), d);
}

#[test]
fn probe_sees_normalized_weights() {
    let mut r = rng(13);
    let spec = SlideSpec::new(5, 1, 3, 4).unwrap();
    let x = image(8, 8, 4, 130);
    let p = AttnParams::random(4, 3, &mut r);
    let rows = Rc::new(RefCell::new(0usize));
    let seen = Rc::clone(&rows);
    evaluate(
        &x,
        &p,
        Some(Box::new(move |_, _, w: &[f64]| {
            *seen.borrow_mut() += 1;
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        })),
        |t, x, v| graph::tea(t, x, v, &spec),
    )
    .unwrap();
    // 64 sliding queries plus 64 pooled queries
    assert_eq!(*rows.borrow(), 128);
}

#[test]
fn spec_violation_is_reported() {
    let mut r = rng(14);
    let x = image(12, 16, 4, 140);
    let p = AttnParams::random(4, 3, &mut r);
    let spec = SlideSpec::new(7, 2, 3, 16).unwrap();
    assert!(matches!(skv_sa(&x, &p, &spec), Err(crate::error::TeaError::Spec(_))));
    assert!(tea(&x, &p, &spec).is_err());
}

#[test]
fn f32_path_tracks_f64() {
    let mut r = rng(15);
    let spec = SlideSpec::new(5, 2, 3, 4).unwrap();
    let x = image(12, 12, 4, 150);
    let p = AttnParams::<f64>::random(4, 3, &mut r);
    let p32 = AttnParams::<f32> {
        w_q: p.w_q.cast(),
        w_k: p.w_k.cast(),
        w_v: p.w_v.cast(),
        offset_k: OffsetGen { kernel: p.offset_k.kernel.cast(), reduce: p.offset_k.reduce.cast() },
        offset_v: OffsetGen { kernel: p.offset_v.kernel.cast(), reduce: p.offset_v.reduce.cast() },
        alpha_s: 1.0,
        alpha_d: 1.0,
    };
    let a = skv_sa(&x, &p, &spec).unwrap();
    let b = skv_sa(&x.cast::<f32>(), &p32, &spec).unwrap().cast::<f64>();
    assert!(b.rel_err(&a).unwrap() < 1e-5);
}

#[test]
fn tea_gradients_match_finite_differences() {
    use crate::gradcheck::grad_check_many;
    let mut r = rng(16);
    let spec = SlideSpec::new(3, 2, 3, 4).unwrap();
    let x = image(8, 8, 4, 160);
    let p = AttnParams::<f64>::random(4, 3, &mut r).with_offset_scale(4.0);
    let readout = Tensor::<f64>::uniform(&[8, 8, 4], -1.0, 1.0, &mut r);
    let mut inputs = vec![x];
    let mut q = p.clone();
    q.visit_mut(|_, t| inputs.push(t.clone()));
    let reports = grad_check_many(
        |t, v| {
            let vars = AttnVars {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                offset_k_kernel: v[4],
                offset_k_reduce: v[5],
                offset_v_kernel: v[6],
                offset_v_reduce: v[7],
                alpha_s: v[8],
                alpha_d: v[9],
            };
            let out = graph::tea(t, v[0], &vars, &spec)?;
            t.dot_const(out, &readout)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    for rep in &reports {
        assert!(rep.max_rel_err <= 1e-3, "{reports:?}");
    }
}
