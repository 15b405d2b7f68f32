//! Library-level criteria. Each returns a one-line summary or panics.

use aa_nowcast::blocks::Dsc;
use aa_nowcast::dataio::{
    binarize_cloud, compute_normalizer, filter_dataset, make_windows, normalize, synth_generate, FilterScope,
    FrameSequence, SampleWindow, SynthConfig, SynthKind, TargetMode, WindowSpec,
};
use aa_nowcast::evaluate::{
    binarize, evaluate_models, metrics, pixel_moments, ttd, uncertainty_curve, EvalOptions, Predictor, TtdOptions,
    DEFAULT_SAMPLES,
};
use aa_nowcast::gradcheck::{check_param_gradients, GradSample};
use aa_nowcast::models::{Model, ModelConfig, ModelKind, ParamReport, REFERENCE_REDUCTION_PERCENT};
use aa_nowcast::params::{Builder, Ctx, Mode};
use aa_nowcast::trainer::{train, Decision, EarlyStopper, PlateauScheduler, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use tencore::check::{gradient_check, DEFAULT_STEP};
use tencore::{NormLayout, PoolKind, Result as TResult, Tape, Tensor, Var};

use crate::oracles::{self, rand_t, rng};

// ---------------------------------------------------------------- 1

fn primitive_error(shapes: &[&[usize]], op: &dyn Fn(&mut Tape, &[Var]) -> TResult<Var>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| rand_t(s, seed * 31 + i as u64)).collect();
        let err = gradient_check(
            &inputs,
            |tape, vars| {
                let out = op(tape, vars)?;
                let r = tape.constant(rand_t(tape.shape(out), seed ^ 0x5eed));
                let p = tape.mul(out, r)?;
                tape.sum_all(p)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

type Op = Box<dyn Fn(&mut Tape, &[Var]) -> TResult<Var>>;

fn primitives() -> Vec<(&'static str, Vec<&'static [usize]>, Op)> {
    vec![
        ("add", vec![&[2, 3, 4], &[3, 1]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![&[2, 3], &[2, 3]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![&[2, 3, 4], &[4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![&[5]], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("matmul", vec![&[2, 3, 4], &[2, 4, 5]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_shared", vec![&[2, 3, 4], &[4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("reshape", vec![&[2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("permute", vec![&[2, 3, 4]], Box::new(|t, v| t.permute(v[0], &[1, 2, 0]))),
        ("transpose", vec![&[2, 3, 4]], Box::new(|t, v| t.transpose(v[0], 1, 2))),
        ("concat", vec![&[2, 3, 2], &[2, 1, 2]], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("narrow", vec![&[2, 5, 3]], Box::new(|t, v| t.narrow(v[0], 1, 1, 3))),
        ("relu", vec![&[4, 6]], Box::new(|t, v| t.relu(v[0]))),
        ("gelu", vec![&[4, 6]], Box::new(|t, v| t.gelu(v[0]))),
        ("sigmoid", vec![&[4, 6]], Box::new(|t, v| t.sigmoid(v[0]))),
        ("softmax", vec![&[2, 4, 3]], Box::new(|t, v| t.softmax(v[0], 1))),
        ("layer_norm", vec![&[3, 6], &[6], &[6]], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        (
            "batch_norm",
            vec![&[3, 2, 2, 2]],
            Box::new(|t, v| Ok(t.standardize(v[0], NormLayout::Channels { channels: 2, inner: 4 }, 1e-5)?.0)),
        ),
        (
            "group_norm",
            vec![&[2, 2, 3, 3]],
            Box::new(|t, v| Ok(t.standardize(v[0], NormLayout::Chunks { size: 9 }, 1e-5)?.0)),
        ),
        ("linear", vec![&[2, 3, 4], &[4, 5], &[5]], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        (
            "conv3x3",
            vec![&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        ("conv7x7", vec![&[1, 2, 6, 6], &[1, 2, 7, 7]], Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, 3))),
        (
            "depthwise",
            vec![&[2, 3, 5, 5], &[3, 1, 3, 3], &[3]],
            Box::new(|t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        ("max_pool", vec![&[2, 2, 4, 4]], Box::new(|t, v| t.pool2d(v[0], PoolKind::Max, 2, 2))),
        ("avg_pool", vec![&[2, 2, 4, 4]], Box::new(|t, v| t.pool2d(v[0], PoolKind::Avg, 2, 2))),
        ("global_max", vec![&[2, 3, 3, 3]], Box::new(|t, v| t.global_pool(v[0], PoolKind::Max))),
        ("global_avg", vec![&[2, 3, 3, 3]], Box::new(|t, v| t.global_pool(v[0], PoolKind::Avg))),
        ("max_axis", vec![&[2, 4, 3]], Box::new(|t, v| t.max_axis(v[0], 1))),
        ("mean_axis", vec![&[2, 4, 3]], Box::new(|t, v| t.mean_axis(v[0], 1))),
        ("upsample", vec![&[2, 2, 3, 4]], Box::new(|t, v| t.upsample_bilinear2x(v[0]))),
        (
            "dropout",
            vec![&[4, 5]],
            Box::new(|t, v| t.dropout(v[0], 0.4, true, &mut rng(77))),
        ),
        ("mse", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.mse(v[0], v[1]))),
    ]
}

/// Model scalars drawn uniformly over every parameter.
fn uniform_samples(model: &Model, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let params = model.params();
    let mut offsets = Vec::new();
    let mut acc = 0;
    for i in 0..params.len() {
        offsets.push(acc);
        acc += params.tensor(i).numel();
    }
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let flat = r.random_range(0..acc);
            let i = offsets.partition_point(|&o| o <= flat) - 1;
            (i, flat - offsets[i])
        })
        .collect()
}

pub fn gradients() -> String {
    let mut worst_prim: f64 = 0.0;
    let ops = primitives();
    for (name, shapes, op) in &ops {
        let err = primitive_error(shapes, op.as_ref());
        assert!(err < 1e-4, "{name}: relative error {err:e}");
        worst_prim = worst_prim.max(err);
    }

    let mut model = Model::build(ModelKind::AaTransunet, &ModelConfig::tiny(), 0).unwrap();
    for (i, path) in ["decoder.head.weight", "decoder.head.bias"].into_iter().enumerate() {
        let shape = model.params().get(path).unwrap().shape().to_vec();
        model.params_mut().set(path, rand_t(&shape, 1 + i as u64).map(|v| v * 0.5)).unwrap();
    }
    let x = rand_t(&[2, 4, 64, 64], 2).map(f64::abs);
    let target = rand_t(&[2, 1, 64, 64], 3).map(f64::abs);
    let samples = uniform_samples(&model, 150, 4);
    let checked = check_param_gradients(model.params(), model.buffers(), Mode::train(0.0), 0, &samples, 1e-5, |ctx| {
        let xv = ctx.input(x.clone());
        let y = model.forward_var(ctx, xv)?;
        let t = ctx.tape.constant(target.clone());
        Ok(ctx.tape.mse(y, t).unwrap())
    })
    .unwrap();
    // attention key biases carry identically zero gradient
    let live: Vec<_> = checked.iter().filter(|s| s.analytic.abs().max(s.numeric.abs()) > 1e-9).collect();
    let (kinked, smooth): (Vec<&GradSample>, Vec<&GradSample>) = live.iter().partition(|s| s.crosses_kink(1e-3));
    assert!(kinked.len() * 20 <= live.len(), "{} of {} samples straddle a kink", kinked.len(), live.len());
    let worst_model = smooth.iter().map(|s| s.rel_error()).fold(0.0, f64::max);
    assert!(smooth.len() >= 100, "only {} checked samples", smooth.len());
    assert!(worst_model < 1e-3, "tiny model relative error {worst_model:e}");
    format!(
        "{} primitives max rel err {worst_prim:.1e}; tiny model {} params max rel err {worst_model:.1e} ({} straddling a kink skipped)",
        ops.len(),
        smooth.len(),
        kinked.len()
    )
}

// ---------------------------------------------------------------- 2

pub fn dsc_equivalence() -> String {
    let (cin, cout, k) = (3, 4, 3);
    let dsc = Dsc::new(cin, cout, k);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut b = Builder::new(seed);
        dsc.declare(&mut b, "d").unwrap();
        let (mut params, buffers) = (b.params, b.buffers);
        for i in 0..params.len() {
            let shape = params.tensor(i).shape().to_vec();
            *params.tensor_mut(i) = rand_t(&shape, seed * 7 + i as u64);
        }
        let x = rand_t(&[2, cin, 6, 5], seed + 1000);
        let mut ctx = Ctx::new(&params, &buffers, Mode::eval(), 0);
        let xv = ctx.input(x.clone());
        let y = dsc.forward(&mut ctx, "d", xv).unwrap();
        let got = ctx.value(y).clone();

        // w[o, i] = pointwise[o, i] * depthwise[i], bias folded through
        let dw = params.get("d.depthwise.weight").unwrap();
        let db = params.get("d.depthwise.bias").unwrap();
        let pw = params.get("d.pointwise.weight").unwrap();
        let mut w = Tensor::zeros([cout, cin, k, k]);
        let mut bias = params.get("d.pointwise.bias").unwrap().clone();
        for o in 0..cout {
            for i in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        w.set(&[o, i, ky, kx], pw.at(&[o, i, 0, 0]) * dw.at(&[i, 0, ky, kx]));
                    }
                }
                bias.data_mut()[o] += pw.at(&[o, i, 0, 0]) * db.data()[i];
            }
        }
        let want = oracles::conv(&x, &w, &bias, k / 2);
        let err = got.max_abs_diff(&want);
        assert!(err <= 1e-12, "draw {seed}: {err:e}");
        worst = worst.max(err);
    }
    format!("20 draws, max abs err {worst:.1e}")
}

// ---------------------------------------------------------------- 3

pub fn parameter_accounting() -> String {
    for cfg in [ModelConfig::tiny(), ModelConfig::precipitation(), ModelConfig::cloud()] {
        for kind in ModelKind::ALL {
            let report = ParamReport::of(&Model::build(kind, &cfg, 0).unwrap());
            let (enc, dec) = oracles::param_counts(kind, &cfg);
            assert_eq!((report.encoder, report.decoder), (enc, dec), "{kind} at {}", cfg.image_size);
            assert_eq!(report.total, enc + dec);
        }
    }
    let mut parts = Vec::new();
    for (label, cfg) in [("default", ModelConfig::precipitation()), ("tiny", ModelConfig::tiny())] {
        let aa = ParamReport::of(&Model::build(ModelKind::AaTransunet, &cfg, 0).unwrap());
        let tu = ParamReport::of(&Model::build(ModelKind::Transunet, &cfg, 0).unwrap());
        let reduction = aa.decoder_reduction_percent(&tu);
        assert!(reduction >= 60.0, "{label}: decoder reduction {reduction:.2}%");
        parts.push(format!("{label} decoder {} vs {} ({reduction:.2}% fewer)", aa.decoder, tu.decoder));
    }
    format!("{}; reference {REFERENCE_REDUCTION_PERCENT}%", parts.join(", "))
}

// ---------------------------------------------------------------- 4

fn advecting_windows(seed: u64, sequences: usize, gap: usize) -> Vec<SampleWindow> {
    let cfg = SynthConfig {
        cells: (24, 32),
        frames: 18,
        ..SynthConfig::new(SynthKind::Blobs, seed, sequences, 64)
    };
    let spec = WindowSpec { input_frames: 4, gap, output_frames: 1, target_mode: TargetMode::Last };
    let mut out = Vec::new();
    for s in synth_generate(&cfg).unwrap() {
        out.extend(make_windows(&s, &spec).unwrap());
    }
    out
}

pub fn overfit() -> String {
    let mut windows: Vec<SampleWindow> = advecting_windows(1, 2, 0).into_iter().take(20).collect();
    assert_eq!(windows.len(), 20);
    let n = compute_normalizer(&windows).unwrap();
    normalize(&mut windows, n);
    let mut model = Model::build(ModelKind::AaTransunet, &ModelConfig::tiny(), 0).unwrap();
    let cfg = TrainConfig { max_epochs: 200, ..TrainConfig::precipitation() };
    let history = train(&mut model, &windows, &[], &cfg, |_| {}).unwrap();
    let first = history.epochs[0].train_loss;
    let hit = history.epochs.iter().position(|e| e.train_loss < 0.1 * first);
    let best = history.epochs.iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
    let hit = hit.unwrap_or_else(|| panic!("best train loss {best:e} is {:.3} of epoch 0", best / first));
    format!("below 10% of epoch-0 loss at epoch {hit}; best ratio {:.4} over {} epochs", best / first, history.epochs.len())
}

// ---------------------------------------------------------------- 5

pub fn beats_persistence() -> String {
    // lead of 6 frames (30 minutes); train, validation and test sequences
    // come from disjoint seeds
    let gap = 5;
    let mut tr = advecting_windows(10, 12, gap);
    let mut val = advecting_windows(20, 2, gap);
    let mut test = advecting_windows(30, 3, gap);
    let n = compute_normalizer(&tr).unwrap();
    normalize(&mut tr, n);
    normalize(&mut val, n);
    normalize(&mut test, n);
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let mut model = Model::build(ModelKind::AaTransunet, &ModelConfig::tiny(), seed).unwrap();
        let cfg = TrainConfig { max_epochs: 45, seed, ..TrainConfig::precipitation() };
        train(&mut model, &tr, &val, &cfg, |_| {}).unwrap();
        let rows = evaluate_models(&[Predictor::Model { name: "aa", model: &model }], &test, "test", &EvalOptions::default())
            .unwrap();
        ratios.push(rows[0].mse / rows[1].mse);
    }
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    assert!(ratios.iter().all(|&r| r <= 0.95), "model/persistence MSE ratios {shown:?}");
    format!("model/persistence MSE ratios {}", shown.join(", "))
}

// ---------------------------------------------------------------- 6

pub fn metric_oracle() -> String {
    let mut r = rng(11);
    let levels = [0.0, 0.25, 0.5, 0.5000001, 0.75, 1.0];
    let mut pixels = 0;
    for case in 0..1000 {
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let bias = [0.0, 0.5, 1.0][case % 3];
        let mut draw = || if r.random::<f64>() < bias { levels[r.random_range(0..levels.len())] } else { 0.0 };
        let p: Vec<f64> = (0..h * w).map(|_| draw()).collect();
        let q: Vec<f64> = (0..h * w).map(|_| draw()).collect();
        let rep = metrics(
            &Tensor::new([1, 1, h, w], p.clone()).unwrap(),
            &Tensor::new([1, 1, h, w], q.clone()).unwrap(),
            0.5,
        )
        .unwrap();
        let (counts, ratios) = oracles::confusion(&p, &q);
        let c = rep.counts;
        assert_eq!([c.tp, c.fp, c.tn, c.fn_], counts, "pair {case}");
        for (got, want) in [rep.accuracy, rep.precision, rep.recall, rep.f1].into_iter().zip(ratios) {
            assert!((got - want).abs() <= 1e-12, "pair {case}: {got} vs {want}");
        }
        pixels += h * w;
    }
    let edge = Tensor::new([4], vec![0.5, 0.5 + 1e-12, 0.5 - 1e-12, 1.0]).unwrap();
    assert_eq!(binarize(&edge, 0.5), [false, true, false, true]);
    format!("1000 pairs ({pixels} pixels) match; 0.5 maps to background")
}

// ---------------------------------------------------------------- 7

fn run_machines(losses: &[f64], plateau: usize, stop: usize) -> (Vec<f64>, Option<usize>) {
    let mut sched = PlateauScheduler::new(1e-3, 0.1, plateau);
    let mut stopper = EarlyStopper::new(stop);
    let mut lrs = Vec::new();
    let mut stop_at = None;
    for (i, &l) in losses.iter().enumerate() {
        lrs.push(sched.observe(l));
        if stopper.observe(l) == Decision::Stop && stop_at.is_none() {
            stop_at = Some(i);
        }
    }
    (lrs, stop_at)
}

fn check_trace(pattern: &[bool]) {
    let losses = oracles::losses_for(pattern);
    for (plateau, stop) in [(4, 20), (1, 2), (3, 5)] {
        let (lm, sm) = run_machines(&losses, plateau, stop);
        let (lh, sh) = oracles::schedule(&losses, plateau, stop);
        assert_eq!(sm, sh, "stop epoch for {pattern:?}");
        for (a, b) in lm.iter().zip(&lh) {
            assert!((a - b).abs() <= 1e-12 * b, "{pattern:?}: {lm:?} vs {lh:?}");
        }
    }
}

pub fn schedules() -> String {
    let mut traces = 0;
    for len in 1..=16 {
        for bits in 0u32..(1 << len) {
            let pattern: Vec<bool> = (0..len).map(|k| bits >> k & 1 == 1).collect();
            check_trace(&pattern);
            traces += 1;
        }
    }
    // length 30 with at most three improvements, or at most three stale epochs
    let n = 30;
    for a in 0..=n {
        for b in a..=n {
            for c in b..=n {
                let mut sparse = vec![false; n];
                let mut dense = vec![true; n];
                for k in [a, b, c] {
                    if k < n {
                        sparse[k] = true;
                        dense[k] = false;
                    }
                }
                check_trace(&sparse);
                check_trace(&dense);
                traces += 2;
            }
        }
    }
    let (lrs, _) = run_machines(&[1.0, 0.9, 0.9, 0.9, 0.9, 0.9], 4, 20);
    assert_eq!(&lrs[..5], &[1e-3; 5]);
    assert!((lrs[5] - 1e-4).abs() < 1e-18, "{lrs:?}");
    let mut flat = vec![true];
    flat.extend([false; 29]);
    let (_, stop) = run_machines(&oracles::losses_for(&flat), 4, 20);
    assert_eq!(stop, Some(20));
    format!("{traces} traces agree; 1e-3 -> 1e-4 after 4 stale epochs; stop after 20")
}

// ---------------------------------------------------------------- 8

pub fn ttd_properties() -> String {
    assert_eq!(DEFAULT_SAMPLES, 20);
    assert_eq!(TtdOptions::default().k, 20);
    let cfg = ModelConfig { in_frames: 4, out_frames: 6, ..ModelConfig::smoke() };
    let mut model = Model::build(ModelKind::AaTransunet, &cfg, 5).unwrap();
    for (i, path) in ["decoder.head.weight", "decoder.head.bias"].into_iter().enumerate() {
        let shape = model.params().get(path).unwrap().shape().to_vec();
        model.params_mut().set(path, rand_t(&shape, 40 + i as u64)).unwrap();
    }
    let x = rand_t(&[4, 32, 32], 1).map(f64::abs);
    let off = ttd(&model, &x, &TtdOptions { k: 20, p: 0.0, seed: 9 }).unwrap();
    let det = model.infer(&x.clone().reshape([1, 4, 32, 32]).unwrap()).unwrap().index_first(0);
    assert_eq!(off.mean, det, "p=0 mean differs from the deterministic forecast");
    assert!(off.variance.data().iter().all(|&v| v == 0.0));

    let on = TtdOptions { k: 20, p: 0.5, seed: 3 };
    let r = ttd(&model, &x, &on).unwrap();
    assert!(r.variance.data().iter().all(|&v| v >= 0.0));
    assert!(r.variance.max() > 0.0);
    let xb = x.clone().reshape([1, 4, 32, 32]).unwrap();
    let mut passes: Vec<Tensor> = on
        .pass_seeds()
        .into_iter()
        .map(|s| model.predict(&xb, Mode::sampling(0.5), s).unwrap().index_first(0))
        .collect();
    let mut shuffler = rng(8);
    for _ in 0..5 {
        passes.shuffle(&mut shuffler);
        let (mean, var) = pixel_moments(&passes).unwrap();
        assert_eq!(mean, r.mean, "mean depends on pass order");
        assert_eq!(var, r.variance, "variance depends on pass order");
    }

    let seq = &synth_generate(&SynthConfig::new(SynthKind::Clouds, 3, 1, 32)).unwrap()[0];
    let spec = WindowSpec::cloud();
    let ws: Vec<SampleWindow> = make_windows(seq, &spec).unwrap().into_iter().take(2).collect();
    let leads = spec.lead_minutes(15);
    let curve = uncertainty_curve(&model, &ws, &leads, &TtdOptions { k: 4, ..on }).unwrap();
    assert_eq!(curve.len(), 6);
    let got: Vec<u32> = curve.iter().map(|p| p.lead_minutes).collect();
    assert_eq!(got, [15, 30, 45, 60, 75, 90]);
    format!("p=0 bit-exact, order-invariant moments, k default 20, {} curve rows", curve.len())
}

// ---------------------------------------------------------------- 9

fn random_sequences(r: &mut impl Rng) -> Vec<FrameSequence> {
    (0..r.random_range(1..4))
        .map(|i| {
            let len = r.random_range(0..10);
            let frames = (0..len)
                .map(|_| {
                    let data = (0..16).map(|_| if r.random_bool(0.5) { 0.0 } else { r.random_range(0.01..5.0) }).collect();
                    Tensor::new([4, 4], data).unwrap()
                })
                .collect();
            FrameSequence::new(format!("s{i}"), frames, 0, 5).unwrap()
        })
        .collect()
}

pub fn pipeline_fixtures() -> String {
    let codes = Tensor::new([3, 5], (1..=15).map(f64::from).collect()).unwrap();
    let mask = binarize_cloud(&codes).unwrap();
    let want: Vec<f64> = (1..=15).map(|c| if c <= 4 { 0.0 } else { 1.0 }).collect();
    assert_eq!(mask.data(), &want[..]);

    let mut r = rng(5);
    let spec = WindowSpec { input_frames: 2, gap: 1, output_frames: 1, target_mode: TargetMode::Last };
    let mut subsets = 0;
    for _ in 0..300 {
        let seqs = random_sequences(&mut r);
        for scope in [FilterScope::Target, FilterScope::All] {
            let keys = |t| -> Vec<(String, usize)> {
                filter_dataset(&seqs, &spec, Some(t), scope).unwrap().into_iter().map(|w| (w.source, w.start)).collect()
            };
            let (nl50, nl20) = (keys(0.5), keys(0.2));
            assert!(nl50.iter().all(|k| nl20.contains(k)), "{nl50:?} not within {nl20:?}");
            subsets += 1;
        }
    }

    let mut windows: Vec<SampleWindow> = (0..10)
        .map(|i| SampleWindow {
            input: Tensor::rand_uniform(vec![3, 4, 4], 0.0, 9.0, &mut r),
            target: Tensor::rand_uniform(vec![1, 4, 4], 0.0, 9.0, &mut r),
            source: "r".into(),
            start: i,
        })
        .collect();
    let brute = windows.iter().flat_map(|w| w.input.data().iter().chain(w.target.data())).copied().fold(0.0, f64::max);
    let n = compute_normalizer(&windows).unwrap();
    assert_eq!(n, brute);
    normalize(&mut windows, n);
    let max = windows.iter().map(|w| w.input.max().max(w.target.max())).fold(0.0, f64::max);
    assert_eq!(max, 1.0);

    // frame t holds the value t so each window is identified by its first input
    for spec in [WindowSpec::precipitation(), WindowSpec::cloud()] {
        for len in 0..30 {
            let frames = (0..len).map(|t| Tensor::full([2, 2], t as f64)).collect();
            let seq = FrameSequence::new("c", frames, 0, 5).unwrap();
            let got: Vec<usize> = make_windows(&seq, &spec).unwrap().iter().map(|w| w.input.data()[0] as usize).collect();
            let mut want = Vec::new();
            let mut start = 0;
            while start + spec.input_frames + spec.gap + spec.output_frames <= len {
                want.push(start);
                start += 1;
            }
            assert_eq!(got, want, "length {len}");
        }
    }
    format!("15 codes, {subsets} NL-50 within NL-20 checks, normalizer {n:.4}, window counts for lengths 0..30")
}
