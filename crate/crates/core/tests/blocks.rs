mod common;

use aa_nowcast::blocks::{Cbam, Conv, ConvKind, DoubleConv, Dsc, Msa, NormKind, PatchEmbed, TransformerLayer, TransformerStack};
use aa_nowcast::gradcheck::{all_elements, check_param_gradients};
use aa_nowcast::params::{Builder, Ctx, Mode, ParamStore};
use common::{conv_oracle, dense_oracle, rand_t, sigmoid};
use tencore::{Tensor, Var};

fn declare(seed: u64, f: impl FnOnce(&mut Builder)) -> (ParamStore, ParamStore) {
    let mut b = Builder::new(seed);
    f(&mut b);
    (b.params, b.buffers)
}

/// Replace every parameter with uniform noise so biases and gains matter.
fn randomize(params: &mut ParamStore, seed: u64) {
    for i in 0..params.len() {
        let shape = params.tensor(i).shape().to_vec();
        *params.tensor_mut(i) = rand_t(&shape, seed + i as u64);
    }
}

fn zero(params: &mut ParamStore, paths: &[&str]) {
    for p in paths {
        let shape = params.get(p).unwrap().shape().to_vec();
        params.set(p, Tensor::zeros(shape)).unwrap();
    }
}

fn run(params: &ParamStore, buffers: &ParamStore, mode: Mode, f: impl FnOnce(&mut Ctx) -> Var) -> Tensor {
    let mut ctx = Ctx::new(params, buffers, mode, 0);
    let v = f(&mut ctx);
    ctx.value(v).clone()
}

fn weighted_loss(ctx: &mut Ctx, out: Var, seed: u64) -> Var {
    let r = ctx.tape.constant(rand_t(ctx.tape.shape(out), seed));
    let p = ctx.tape.mul(out, r).unwrap();
    ctx.tape.sum_all(p).unwrap()
}

fn max_grad_error(params: &ParamStore, buffers: &ParamStore, mode: Mode, loss: impl Fn(&mut Ctx) -> Var) -> f64 {
    check_param_gradients(params, buffers, mode, 3, &all_elements(params), 1e-5, |ctx| Ok(loss(ctx)))
        .unwrap()
        .iter()
        // gradients that vanish identically leave only rounding noise in the
        // central difference
        .filter(|s| s.analytic.abs().max(s.numeric.abs()) > 1e-8)
        .map(|s| s.rel_error())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- CBAM

fn cbam_fixture(seed: u64) -> (Cbam, ParamStore, ParamStore) {
    let cbam = Cbam::new(8, 4, 3).unwrap();
    let (mut p, b) = declare(seed, |b| cbam.declare(b, "cbam").unwrap());
    randomize(&mut p, seed);
    (cbam, p, b)
}

/// CBAM recomposed from pooling, dense and convolution oracles.
fn cbam_oracle(f: &Tensor, p: &ParamStore, k: usize) -> (Vec<f64>, Tensor, Tensor) {
    let (b, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
    let plane = h * w;
    let mlp = |v: &[f64]| {
        let hid = dense_oracle(v, p.get("cbam.mlp.fc1.weight").unwrap(), p.get("cbam.mlp.fc1.bias").unwrap());
        let hid: Vec<f64> = hid.into_iter().map(|x| x.max(0.0)).collect();
        dense_oracle(&hid, p.get("cbam.mlp.fc2.weight").unwrap(), p.get("cbam.mlp.fc2.bias").unwrap())
    };
    let mut mc = vec![0.0; b * c];
    let mut refined = f.clone();
    for n in 0..b {
        let chan = |i: usize| &f.data()[(n * c + i) * plane..(n * c + i + 1) * plane];
        let avg: Vec<f64> = (0..c).map(|i| chan(i).iter().sum::<f64>() / plane as f64).collect();
        let max: Vec<f64> = (0..c).map(|i| chan(i).iter().copied().fold(f64::MIN, f64::max)).collect();
        let (ma, mm) = (mlp(&avg), mlp(&max));
        for i in 0..c {
            mc[n * c + i] = sigmoid(ma[i] + mm[i]);
            for v in &mut refined.data_mut()[(n * c + i) * plane..(n * c + i + 1) * plane] {
                *v *= mc[n * c + i];
            }
        }
    }
    let mut pooled = Tensor::zeros([b, 2, h, w]);
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..c).map(|i| refined.at(&[n, i, y, x])).collect();
                pooled.set(&[n, 0, y, x], vals.iter().sum::<f64>() / c as f64);
                pooled.set(&[n, 1, y, x], vals.iter().copied().fold(f64::MIN, f64::max));
            }
        }
    }
    let ms = conv_oracle(&pooled, p.get("cbam.spatial.weight").unwrap(), None, k / 2).map(sigmoid);
    let mut out = refined.clone();
    for n in 0..b {
        for i in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(&[n, i, y, x], refined.at(&[n, i, y, x]) * ms.at(&[n, 0, y, x]));
                }
            }
        }
    }
    (mc, ms, out)
}

#[test]
fn cbam_matches_composed_oracle() {
    for seed in 0..5 {
        let (cbam, p, b) = cbam_fixture(seed * 100);
        let f = rand_t(&[2, 8, 5, 6], seed);
        let (mc, ms, want) = cbam_oracle(&f, &p, 3);
        let got_mc = run(&p, &b, Mode::eval(), |ctx| {
            let x = ctx.input(f.clone());
            cbam.channel_attention(ctx, "cbam", x).unwrap()
        });
        assert_eq!(got_mc.shape(), &[2, 8, 1, 1]);
        for (g, w) in got_mc.data().iter().zip(&mc) {
            assert!((g - w).abs() < 1e-12);
        }
        let got = run(&p, &b, Mode::eval(), |ctx| {
            let x = ctx.input(f.clone());
            cbam.forward(ctx, "cbam", x).unwrap()
        });
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert!(ms.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn cbam_zero_parameters_gate_at_one_half() {
    let cbam = Cbam::new(8, 4, 7).unwrap();
    let (mut p, b) = declare(1, |b| cbam.declare(b, "cbam").unwrap());
    zero(
        &mut p,
        &["cbam.mlp.fc1.weight", "cbam.mlp.fc2.weight", "cbam.spatial.weight"],
    );
    let f = rand_t(&[1, 8, 4, 4], 2);
    let mc = run(&p, &b, Mode::eval(), |ctx| {
        let x = ctx.input(f.clone());
        cbam.channel_attention(ctx, "cbam", x).unwrap()
    });
    assert!(mc.data().iter().all(|&v| v == 0.5));
    let ms = run(&p, &b, Mode::eval(), |ctx| {
        let x = ctx.input(f.clone());
        cbam.spatial_attention(ctx, "cbam", x).unwrap()
    });
    assert_eq!(ms.shape(), &[1, 1, 4, 4]);
    assert!(ms.data().iter().all(|&v| v == 0.5));
    let out = run(&p, &b, Mode::eval(), |ctx| {
        let x = ctx.input(f.clone());
        cbam.forward(ctx, "cbam", x).unwrap()
    });
    assert!(out.max_abs_diff(&f.map(|v| v / 4.0)) < 1e-15);
}

#[test]
fn cbam_constant_input_doubles_the_mlp_logit() {
    let (cbam, p, b) = cbam_fixture(7);
    let f = Tensor::full([1, 8, 3, 3], 0.7);
    let mc = run(&p, &b, Mode::eval(), |ctx| {
        let x = ctx.input(f.clone());
        cbam.channel_attention(ctx, "cbam", x).unwrap()
    });
    let v = vec![0.7; 8];
    let hid = dense_oracle(&v, p.get("cbam.mlp.fc1.weight").unwrap(), p.get("cbam.mlp.fc1.bias").unwrap());
    let hid: Vec<f64> = hid.into_iter().map(|x| x.max(0.0)).collect();
    let logit = dense_oracle(&hid, p.get("cbam.mlp.fc2.weight").unwrap(), p.get("cbam.mlp.fc2.bias").unwrap());
    for (g, l) in mc.data().iter().zip(logit) {
        assert!((g - sigmoid(2.0 * l)).abs() < 1e-12);
    }
}

#[test]
fn cbam_saturated_gates_pass_input_through() {
    let cbam = Cbam::new(4, 2, 3).unwrap();
    let (mut p, b) = declare(1, |b| cbam.declare(b, "cbam").unwrap());
    zero(&mut p, &["cbam.mlp.fc1.weight", "cbam.mlp.fc2.weight"]);
    p.set("cbam.mlp.fc2.bias", Tensor::full([4], 40.0)).unwrap();
    p.set("cbam.spatial.weight", Tensor::zeros([1, 2, 3, 3])).unwrap();
    // the spatial conv has no bias; saturate it through a huge constant
    // weight on the channel-max map of a positive input
    let mut w = Tensor::zeros([1, 2, 3, 3]);
    w.set(&[0, 1, 1, 1], 100.0);
    p.set("cbam.spatial.weight", w).unwrap();
    let f = rand_t(&[1, 4, 4, 4], 3).map(|v| v.abs() + 1.0);
    let out = run(&p, &b, Mode::eval(), |ctx| {
        let x = ctx.input(f.clone());
        cbam.forward(ctx, "cbam", x).unwrap()
    });
    assert!(out.max_abs_diff(&f) < 1e-12);
}

#[test]
fn spatial_gate_ignores_channel_order() {
    let (cbam, p, b) = cbam_fixture(11);
    let f = rand_t(&[1, 8, 5, 5], 4);
    let mut perm = f.clone();
    let order = [3, 1, 7, 0, 5, 2, 6, 4];
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..25 {
            perm.data_mut()[dst * 25 + i] = f.data()[src * 25 + i];
        }
    }
    let gate = |t: &Tensor| {
        run(&p, &b, Mode::eval(), |ctx| {
            let x = ctx.input(t.clone());
            cbam.spatial_attention(ctx, "cbam", x).unwrap()
        })
    };
    assert!(gate(&f).max_abs_diff(&gate(&perm)) < 1e-15);
}

#[test]
fn cbam_rejects_indivisible_channels_and_counts_params() {
    assert!(Cbam::new(6, 4, 7).is_err());
    assert!(Cbam::new(8, 4, 6).is_err());
    let cbam = Cbam::new(16, 4, 7).unwrap();
    let (p, _) = declare(0, |b| cbam.declare(b, "cbam").unwrap());
    // fc1 16->4, fc2 4->16, spatial 2x7x7
    assert_eq!(cbam.param_count(), 16 * 4 + 4 + 4 * 16 + 16 + 98);
    assert_eq!(p.scalar_count(), cbam.param_count());
}

#[test]
fn cbam_gradients_match_finite_differences() {
    let (cbam, p, b) = cbam_fixture(21);
    let f = rand_t(&[2, 8, 4, 4], 5);
    let err = max_grad_error(&p, &b, Mode::eval(), |ctx| {
        let x = ctx.input(f.clone());
        let y = cbam.forward(ctx, "cbam", x).unwrap();
        weighted_loss(ctx, y, 9)
    });
    assert!(err < 1e-4, "{err:e}");
}

// ---------------------------------------------------------------- DSC

#[test]
fn dsc_parameter_counts() {
    assert_eq!(Dsc::new(64, 128, 3).param_count(), 8_960);
    assert_eq!(Conv::new(64, 128, 3).param_count(), 73_856);
    let ratio: f64 = 8_960.0 / 73_856.0;
    assert!((ratio - 0.121).abs() < 5e-4);
    let dsc = Dsc::new(5, 3, 3);
    let (p, _) = declare(0, |b| dsc.declare(b, "d").unwrap());
    assert_eq!(p.scalar_count(), dsc.param_count());
}

/// The standard kernel `w[o, i] = pw[o, i] · dw[i]` built element by element.
fn expanded_kernel(p: &ParamStore, cin: usize, cout: usize, k: usize) -> (Tensor, Tensor) {
    let (dw, db) = (p.get("d.depthwise.weight").unwrap(), p.get("d.depthwise.bias").unwrap());
    let (pw, pb) = (p.get("d.pointwise.weight").unwrap(), p.get("d.pointwise.bias").unwrap());
    let mut w = Tensor::zeros([cout, cin, k, k]);
    let mut b = pb.clone();
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    w.set(&[o, i, ky, kx], pw.at(&[o, i, 0, 0]) * dw.at(&[i, 0, ky, kx]));
                }
            }
            b.data_mut()[o] += pw.at(&[o, i, 0, 0]) * db.data()[i];
        }
    }
    (w, b)
}

#[test]
fn dsc_equals_expanded_standard_convolution() {
    let (cin, cout, k) = (3, 4, 3);
    let dsc = Dsc::new(cin, cout, k);
    for seed in 0..20 {
        let (mut p, b) = declare(seed, |b| dsc.declare(b, "d").unwrap());
        randomize(&mut p, seed * 7);
        let x = rand_t(&[2, cin, 6, 5], seed + 1000);
        let got = run(&p, &b, Mode::eval(), |ctx| {
            let xv = ctx.input(x.clone());
            dsc.forward(ctx, "d", xv).unwrap()
        });
        let (w, bias) = expanded_kernel(&p, cin, cout, k);
        let want = conv_oracle(&x, &w, Some(&bias), k / 2);
        assert!(got.max_abs_diff(&want) <= 1e-12, "seed {seed}");
        let (ew, eb) = dsc.expand(
            p.get("d.depthwise.weight").unwrap(),
            p.get("d.depthwise.bias").unwrap(),
            p.get("d.pointwise.weight").unwrap(),
            p.get("d.pointwise.bias").unwrap(),
        );
        assert!(ew.max_abs_diff(&w) < 1e-15 && eb.max_abs_diff(&bias) < 1e-15);
    }
}

#[test]
fn dsc_with_unit_kernel_is_two_scalar_maps() {
    let dsc = Dsc::new(1, 1, 1);
    let (mut p, b) = declare(0, |b| dsc.declare(b, "d").unwrap());
    randomize(&mut p, 3);
    let x = rand_t(&[1, 1, 3, 3], 4);
    let got = run(&p, &b, Mode::eval(), |ctx| {
        let xv = ctx.input(x.clone());
        dsc.forward(ctx, "d", xv).unwrap()
    });
    let s = |n: &str| p.get(n).unwrap().data()[0];
    let want = x.map(|v| s("d.pointwise.weight") * (s("d.depthwise.weight") * v + s("d.depthwise.bias")) + s("d.pointwise.bias"));
    assert!(got.max_abs_diff(&want) < 1e-15);
}

// ---------------------------------------------------------------- double conv

#[test]
fn double_conv_preserves_spatial_shape() {
    for kind in [ConvKind::Standard, ConvKind::Dsc] {
        let block = DoubleConv::new(1, 2, 2, kind, NormKind::Batch, None).unwrap();
        let (p, b) = declare(0, |b| block.declare(b, "blk").unwrap());
        assert_eq!(p.scalar_count(), block.param_count());
        let x = rand_t(&[1, 1, 288, 288], 1);
        let y = run(&p, &b, Mode::train(0.0), |ctx| {
            let xv = ctx.input(x.clone());
            block.forward(ctx, "blk", xv).unwrap()
        });
        assert_eq!(y.shape(), &[1, 2, 288, 288]);
    }
}

#[test]
fn double_conv_gradients_match_finite_differences() {
    let cases = [
        (ConvKind::Standard, NormKind::Batch, false),
        (ConvKind::Dsc, NormKind::Batch, true),
        (ConvKind::Dsc, NormKind::Group { groups: 2 }, true),
        (ConvKind::Standard, NormKind::None, false),
    ];
    for (i, (kind, norm, with_cbam)) in cases.into_iter().enumerate() {
        let cbam = with_cbam.then(|| Cbam::new(4, 2, 3).unwrap());
        let block = DoubleConv::new(2, 4, 4, kind, norm, cbam).unwrap();
        let (mut p, b) = declare(i as u64, |b| block.declare(b, "blk").unwrap());
        randomize(&mut p, 50 + i as u64);
        assert_eq!(p.scalar_count(), block.param_count());
        let x = rand_t(&[2, 2, 5, 5], 60 + i as u64);
        let err = max_grad_error(&p, &b, Mode::train(0.0), |ctx| {
            let xv = ctx.input(x.clone());
            let y = block.forward(ctx, "blk", xv).unwrap();
            weighted_loss(ctx, y, 70)
        });
        assert!(err < 1e-4, "case {i}: {err:e}");
    }
}

#[test]
fn batch_norm_eval_uses_running_statistics() {
    let block = DoubleConv::new(1, 2, 2, ConvKind::Standard, NormKind::Batch, None).unwrap();
    let (p, b) = declare(4, |b| block.declare(b, "blk").unwrap());
    assert!(b.get("blk.norm1.running_mean").is_some());
    let x = rand_t(&[3, 1, 4, 4], 2);
    let run_mode = |m| {
        let mut ctx = Ctx::new(&p, &b, m, 0);
        let xv = ctx.input(x.clone());
        let y = block.forward(&mut ctx, "blk", xv).unwrap();
        (ctx.value(y).clone(), ctx.batch_stats().len())
    };
    let (train, n_train) = run_mode(Mode::train(0.0));
    let (eval, n_eval) = run_mode(Mode::eval());
    assert_eq!((n_train, n_eval), (2, 0));
    assert!(train.max_abs_diff(&eval) > 1e-6);
}

// ---------------------------------------------------------------- patch embedding

#[test]
fn patch_embedding_token_counts() {
    let whole = PatchEmbed::new(3, 4, 2, 2).unwrap();
    assert_eq!(whole.tokens(), 1);
    let pe = PatchEmbed::new(1, 8, 16, 32).unwrap();
    assert_eq!(pe.tokens(), 4);
    assert!(PatchEmbed::new(1, 8, 5, 32).is_err());
    let (p, b) = declare(0, |b| pe.declare(b, "pe").unwrap());
    assert_eq!(p.scalar_count(), pe.param_count());
    let x = rand_t(&[2, 1, 32, 32], 1);
    let y = run(&p, &b, Mode::eval(), |ctx| {
        let xv = ctx.input(x.clone());
        pe.forward(ctx, "pe", xv).unwrap()
    });
    assert_eq!(y.shape(), &[2, 4, 8]);
}

#[test]
fn zero_projection_leaves_position_embeddings() {
    let pe = PatchEmbed::new(2, 6, 2, 4).unwrap();
    let (mut p, b) = declare(3, |b| pe.declare(b, "pe").unwrap());
    zero(&mut p, &["pe.proj.weight"]);
    let x = rand_t(&[1, 2, 4, 4], 1);
    let y = run(&p, &b, Mode::eval(), |ctx| {
        let xv = ctx.input(x.clone());
        pe.forward(ctx, "pe", xv).unwrap()
    });
    assert_eq!(y.data(), p.get("pe.pos_embed").unwrap().data());
}

#[test]
fn patch_embedding_matches_tile_oracle() {
    let pe = PatchEmbed::new(2, 3, 2, 4).unwrap();
    let (mut p, b) = declare(3, |b| pe.declare(b, "pe").unwrap());
    randomize(&mut p, 8);
    let x = rand_t(&[1, 2, 4, 4], 9);
    let y = run(&p, &b, Mode::eval(), |ctx| {
        let xv = ctx.input(x.clone());
        pe.forward(ctx, "pe", xv).unwrap()
    });
    let (w, bias, pos) = (
        p.get("pe.proj.weight").unwrap(),
        p.get("pe.proj.bias").unwrap(),
        p.get("pe.pos_embed").unwrap(),
    );
    for gy in 0..2 {
        for gx in 0..2 {
            // flatten in (channel, row, col) order
            let mut tile = Vec::new();
            for c in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        tile.push(x.at(&[0, c, 2 * gy + dy, 2 * gx + dx]));
                    }
                }
            }
            let proj = dense_oracle(&tile, w, bias);
            let n = gy * 2 + gx;
            for d in 0..3 {
                assert!((y.at(&[0, n, d]) - proj[d] - pos.at(&[n, d])).abs() < 1e-13);
            }
        }
    }
}

// ---------------------------------------------------------------- attention

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let msa = Msa::new(4, 2).unwrap();
    let (mut p, b) = declare(0, |b| msa.declare(b, "a").unwrap());
    randomize(&mut p, 1);
    let z = rand_t(&[1, 1, 4], 2);
    let mut ctx = Ctx::new(&p, &b, Mode::eval(), 0);
    let zv = ctx.input(z.clone());
    let (out, weights) = msa.forward_with_weights(&mut ctx, "a", zv).unwrap();
    assert!(ctx.value(weights).data().iter().all(|&w| w == 1.0));
    let v = dense_oracle(z.data(), p.get("a.value.weight").unwrap(), p.get("a.value.bias").unwrap());
    let want = dense_oracle(&v, p.get("a.out.weight").unwrap(), p.get("a.out.bias").unwrap());
    for (g, w) in ctx.value(out).data().iter().zip(want) {
        assert!((g - w).abs() < 1e-13);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let msa = Msa::new(8, 4).unwrap();
    let (p, b) = declare(5, |b| msa.declare(b, "a").unwrap());
    let z = rand_t(&[2, 5, 8], 3);
    let mut ctx = Ctx::new(&p, &b, Mode::eval(), 0);
    let zv = ctx.input(z);
    let (out, weights) = msa.forward_with_weights(&mut ctx, "a", zv).unwrap();
    assert_eq!(ctx.value(out).shape(), &[2, 5, 8]);
    let w = ctx.value(weights);
    assert_eq!(w.shape(), &[8, 5, 5]);
    for row in w.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn single_head_two_token_closed_form() {
    let msa = Msa::new(3, 1).unwrap();
    let (mut p, b) = declare(0, |b| msa.declare(b, "a").unwrap());
    randomize(&mut p, 4);
    let z = rand_t(&[1, 2, 3], 5);
    let y = run(&p, &b, Mode::eval(), |ctx| {
        let zv = ctx.input(z.clone());
        msa.forward(ctx, "a", zv).unwrap()
    });
    let proj = |name: &str| {
        dense_oracle(
            z.data(),
            p.get(&format!("a.{name}.weight")).unwrap(),
            p.get(&format!("a.{name}.bias")).unwrap(),
        )
    };
    let (q, k, v) = (proj("query"), proj("key"), proj("value"));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / 3f64.sqrt();
    let mut mixed = Vec::new();
    for i in 0..2 {
        let s0 = dot(&q[i * 3..i * 3 + 3], &k[0..3]);
        let s1 = dot(&q[i * 3..i * 3 + 3], &k[3..6]);
        // two-way softmax is a logistic in the score gap
        let a1 = sigmoid(s1 - s0);
        let a0 = 1.0 - a1;
        for d in 0..3 {
            mixed.push(a0 * v[d] + a1 * v[3 + d]);
        }
    }
    let want = dense_oracle(&mixed, p.get("a.out.weight").unwrap(), p.get("a.out.bias").unwrap());
    for (g, w) in y.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- transformer

fn layer_fixture(seed: u64) -> (TransformerLayer, ParamStore, ParamStore) {
    let layer = TransformerLayer::new(8, 2, 16).unwrap();
    let (mut p, b) = declare(seed, |b| layer.declare(b, "t").unwrap());
    randomize(&mut p, seed);
    (layer, p, b)
}

#[test]
fn zeroed_output_projections_make_an_identity_layer() {
    let (layer, mut p, b) = layer_fixture(1);
    zero(
        &mut p,
        &["t.attn.out.weight", "t.attn.out.bias", "t.mlp.fc2.weight", "t.mlp.fc2.bias"],
    );
    let z = rand_t(&[2, 3, 8], 4);
    let y = run(&p, &b, Mode::eval(), |ctx| {
        let zv = ctx.input(z.clone());
        layer.forward(ctx, "t", zv).unwrap()
    });
    assert_eq!(y, z);
    assert_eq!(p.scalar_count(), layer.param_count());
}

#[test]
fn transformer_layer_gradients_match_finite_differences() {
    let (layer, p, b) = layer_fixture(2);
    let z = rand_t(&[2, 3, 8], 6);
    // scores shift uniformly along a softmax row with the key bias
    let mut ctx = Ctx::new(&p, &b, Mode::train(0.3), 3);
    let zv = ctx.input(z.clone());
    let y = layer.forward(&mut ctx, "t", zv).unwrap();
    let l = weighted_loss(&mut ctx, y, 8);
    let grads = ctx.gradients(l).unwrap();
    let kb = p.position("t.attn.key.bias").unwrap();
    assert!(grads[kb].data().iter().all(|g| g.abs() < 1e-12));
    let err = max_grad_error(&p, &b, Mode::train(0.3), |ctx| {
        let zv = ctx.input(z.clone());
        let y = layer.forward(ctx, "t", zv).unwrap();
        weighted_loss(ctx, y, 8)
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn transformer_stack_composes_layers() {
    let layer = TransformerLayer::new(8, 2, 16).unwrap();
    let z = rand_t(&[1, 4, 8], 1);

    let empty = TransformerStack::default();
    let (p0, b0) = declare(0, |b| empty.declare(b, "s").unwrap());
    assert!(p0.is_empty());
    let y = run(&p0, &b0, Mode::eval(), |ctx| {
        let zv = ctx.input(z.clone());
        empty.forward(ctx, "s", zv).unwrap()
    });
    assert_eq!(y, z);

    let stack = TransformerStack {
        layers: vec![layer.clone(); 3],
    };
    let (mut p, b) = declare(0, |b| stack.declare(b, "s").unwrap());
    randomize(&mut p, 3);
    assert_eq!(p.scalar_count(), stack.param_count());
    let y = run(&p, &b, Mode::eval(), |ctx| {
        let zv = ctx.input(z.clone());
        stack.forward(ctx, "s", zv).unwrap()
    });
    let composed = run(&p, &b, Mode::eval(), |ctx| {
        let mut h = ctx.input(z.clone());
        for i in 0..3 {
            h = layer.forward(ctx, &format!("s.{i}"), h).unwrap();
        }
        h
    });
    assert_eq!(y, composed);

    let single = TransformerStack {
        layers: vec![layer.clone()],
    };
    let y1 = run(&p, &b, Mode::eval(), |ctx| {
        let zv = ctx.input(z.clone());
        single.forward(ctx, "s", zv).unwrap()
    });
    let direct = run(&p, &b, Mode::eval(), |ctx| {
        let zv = ctx.input(z.clone());
        layer.forward(ctx, "s.0", zv).unwrap()
    });
    assert_eq!(y1, direct);
}

#[test]
fn dropout_with_fixed_seed_is_reproducible() {
    let (layer, p, b) = layer_fixture(9);
    let z = rand_t(&[1, 4, 8], 1);
    let go = |seed| {
        let mut ctx = Ctx::new(&p, &b, Mode::train(0.5), seed);
        let zv = ctx.input(z.clone());
        let y = layer.forward(&mut ctx, "t", zv).unwrap();
        ctx.value(y).clone()
    };
    assert_eq!(go(1), go(1));
    assert_ne!(go(1), go(2));
}
