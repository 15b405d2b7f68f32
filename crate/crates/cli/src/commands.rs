use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use aa_nowcast::dataio::{
    read_dataset, synth_generate, write_dataset, DatasetMeta, FilterScope, PrepareMode, PrepareOptions, Prepared,
    SampleWindow, Split, SynthConfig, SynthKind, TargetMode,
};
use aa_nowcast::evaluate::{
    evaluate_models, metrics_csv, render_table, ttd, uncertainty_csv, uncertainty_curve, write_pgm, Averaging,
    EvalOptions, MetricsReport, Predictor, TtdOptions, METRICS_HEADER,
};
use aa_nowcast::models::{
    human_count, load_checkpoint, save_checkpoint, Model, ModelKind, ParamReport, REFERENCE_AA_DECODER,
    REFERENCE_REDUCTION_PERCENT, REFERENCE_TRANSUNET_DECODER,
};
use aa_nowcast::trainer::{train, RunHistory};
use anyhow::{Context, Result};
use serde_json::json;

use crate::args::{
    EvalArgs, FormatArg, KindArg, ModeArg, ParamsArgs, PrepareArgs, ScopeArg, SplitArg, SweepArgs, SynthArgs,
    TargetArg, TrainArgs, UncertaintyArgs,
};
use crate::config::{model_kind, resolve_model, resolve_recipe, Recipe};
use crate::run::{usage, write_atomic, Run};

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    Ok(Prepared::load(dir)?)
}

fn split_windows(data: &Prepared, s: SplitArg) -> Result<Vec<SampleWindow>> {
    let ws = data.windows(split(s))?;
    if ws.is_empty() {
        return Err(crate::run::data(format!("the {} split has no windows", split(s).name())));
    }
    Ok(ws)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::Blobs => SynthKind::Blobs,
        KindArg::Fronts => SynthKind::Fronts,
        KindArg::Clouds => SynthKind::Clouds,
    };
    let mut cfg = SynthConfig::new(kind, a.seed, a.n, a.size);
    if let Some(f) = a.frames {
        cfg.frames = f;
    }
    if let Some(c) = a.cells {
        cfg.cells = c;
    }
    cfg.zero_motion = a.still;
    cfg.validate()?;
    let mut run = Run::in_dir("synth", &a.out)?;
    run.config(&cfg)?;
    run.manifest.seed = Some(a.seed);
    let seqs = synth_generate(&cfg)?;
    let units = if kind == SynthKind::Clouds { "cloud type code" } else { "mm/h" };
    let meta = DatasetMeta::new(format!("synth-{kind}"), units, cfg.step_minutes, [a.size, a.size]);
    write_dataset(&a.out, &meta, &seqs)?;
    run.output(&a.out);
    eprintln!("wrote {} sequences of {} frames to {}", seqs.len(), cfg.frames, a.out.display());
    run.finish()
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Precip => PrepareMode::Precip,
        ModeArg::Cloud => PrepareMode::Cloud,
    };
    let mut opts = PrepareOptions::new(mode);
    opts.threshold = a.threshold;
    opts.scope = match a.scope {
        ScopeArg::Target => FilterScope::Target,
        ScopeArg::All => FilterScope::All,
    };
    opts.crop = a.crop;
    if let Some(v) = a.input_frames {
        opts.window.input_frames = v;
    }
    if let Some(v) = a.gap {
        opts.window.gap = v;
    }
    if let Some(v) = a.output_frames {
        opts.window.output_frames = v;
    }
    if let Some(t) = a.target {
        opts.window.target_mode = match t {
            TargetArg::Last => TargetMode::Last,
            TargetArg::All => TargetMode::All,
        };
    }
    if let Some(v) = a.val_fraction {
        opts.val_fraction = v;
    }
    if let Some(v) = a.test_fraction {
        opts.test_fraction = v;
    }
    opts.seed = a.seed;
    let (meta, seqs) = read_dataset(&a.input)?;
    let mut run = Run::in_dir("prepare", &a.out)?;
    run.config(&opts)?;
    run.manifest.seed = Some(a.seed);
    run.input(&a.input);
    let prepared = aa_nowcast::dataio::prepare(&meta, &seqs, &opts)?;
    prepared.save(&a.out)?;
    run.output(&a.out);
    let c = &prepared.meta.counts;
    eprintln!(
        "windows: {} train, {} val, {} test (normalizer {})",
        c.train, c.val, c.test, prepared.meta.normalizer
    );
    run.finish()
}

fn history_csv(h: &RunHistory) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for e in &h.epochs {
        let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{val},{}", e.epoch, e.train_loss, e.lr);
    }
    out
}

/// Trains `recipe` on the prepared data and writes the best checkpoint,
/// `run.json`, `history.csv` and `config.json` into `out`.
fn train_into(recipe: &Recipe, data: &Prepared, out: &Path, verbose: bool, run: &mut Run) -> Result<Model> {
    let tr = split_windows(data, SplitArg::Train)?;
    let val = data.windows(Split::Val)?;
    let mut model = Model::build(recipe.kind, &recipe.model, recipe.train.seed)?;
    let history = train(&mut model, &tr, &val, &recipe.train, |e| {
        if verbose {
            let v = e.val_loss.map_or("-".into(), |v| format!("{v:.6}"));
            eprintln!("epoch {:>3}  train {:.6}  val {v}  lr {:e}", e.epoch, e.train_loss, e.lr);
        }
    })?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&model, &ckpt)?;
    history.without_timing().save(out.join("run.json"))?;
    write_atomic(&out.join("history.csv"), history_csv(&history))?;
    write_atomic(&out.join("config.json"), serde_json::to_string_pretty(recipe)? + "\n")?;
    let seconds: Vec<f64> = history.epochs.iter().map(|e| e.seconds).collect();
    let timing = &mut run.manifest.timing;
    if timing.is_null() {
        *timing = json!({});
    }
    timing[out.display().to_string()] = json!({ "epoch_seconds": seconds });
    run.output(&ckpt);
    eprintln!(
        "{}: {} epochs, best epoch {:?} (loss {:?}), stop: {:?}",
        recipe.kind,
        history.epochs.len(),
        history.best_epoch,
        history.best_loss,
        history.stop_reason
    );
    Ok(model)
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let data = load_prepared(&a.recipe.data)?;
    let recipe = resolve_recipe(model_kind(a.model), &a.recipe, a.depth, &data)?;
    let mut run = Run::in_dir("train", &a.out)?;
    run.config(&recipe)?;
    run.manifest.seed = Some(recipe.train.seed);
    run.input(&a.recipe.data);
    train_into(&recipe, &data, &a.out, a.recipe.verbose, &mut run)?;
    run.finish()
}

fn dataset_label(data: &Prepared, s: SplitArg) -> String {
    format!("{}:{}", data.dataset.name, split(s).name())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !a.names.is_empty() && a.names.len() != a.checkpoints.len() {
        return Err(usage(format!(
            "{} names for {} checkpoints",
            a.names.len(),
            a.checkpoints.len()
        )));
    }
    let data = load_prepared(&a.data)?;
    let windows = split_windows(&data, a.split)?;
    let models: Vec<Model> = a.checkpoints.iter().map(load_checkpoint).collect::<Result<_, _>>()?;
    let names: Vec<String> = if a.names.is_empty() {
        let mut seen = Vec::new();
        models
            .iter()
            .map(|m| {
                let base = m.kind().name().to_string();
                let n = seen.iter().filter(|s| **s == base).count();
                seen.push(base.clone());
                if n == 0 { base } else { format!("{base}#{}", n + 1) }
            })
            .collect()
    } else {
        a.names.clone()
    };
    let preds: Vec<Predictor> = names
        .iter()
        .zip(&models)
        .map(|(name, model)| Predictor::Model { name, model })
        .collect();
    let opts = EvalOptions {
        threshold: a.threshold,
        averaging: if a.per_image { Averaging::PerImage } else { Averaging::Pooled },
        batch_size: a.batch_size,
    };
    let mut run = Run::for_file("eval", &a.out)?;
    run.config(&json!({
        "checkpoints": a.checkpoints,
        "names": names,
        "split": split(a.split).name(),
        "threshold": opts.threshold,
        "averaging": opts.averaging,
        "batch_size": opts.batch_size,
    }))?;
    run.input(&a.data);
    for c in &a.checkpoints {
        run.input(c);
    }
    let reports = evaluate_models(&preds, &windows, &dataset_label(&data, a.split), &opts)?;
    write_atomic(&a.out, metrics_csv(&reports))?;
    let table = render_table(&reports);
    write_atomic(&a.out.with_extension("txt"), &table)?;
    run.output(&a.out);
    print!("{table}");
    run.finish()
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let data = load_prepared(&a.recipe.data)?;
    let kind = model_kind(a.model);
    let recipes: Vec<Recipe> = a
        .depths
        .iter()
        .map(|&d| resolve_recipe(kind, &a.recipe, Some(d), &data))
        .collect::<Result<_>>()?;
    let windows = split_windows(&data, a.split)?;
    let mut run = Run::in_dir("sweep-layers", &a.out)?;
    run.config(&json!({ "depths": a.depths, "split": split(a.split).name(), "runs": recipes }))?;
    run.manifest.seed = recipes.first().map(|r| r.train.seed);
    run.input(&a.recipe.data);
    let label = dataset_label(&data, a.split);
    let mut rows: Vec<(u64, MetricsReport)> = Vec::new();
    for (&d, recipe) in a.depths.iter().zip(&recipes) {
        let dir = a.out.join(format!("depth_{d}"));
        train_into(recipe, &data, &dir, a.recipe.verbose, &mut run)?;
        // score the stored weights, as `eval` would
        let model = load_checkpoint(dir.join("checkpoint"))?;
        let name = kind.name();
        let mut reports = evaluate_models(
            &[Predictor::Model { name, model: &model }],
            &windows,
            &label,
            &EvalOptions::default(),
        )?;
        rows.push((d, reports.swap_remove(0)));
    }
    let mut csv = format!("depth,{METRICS_HEADER}\n");
    for (d, r) in &rows {
        let line = metrics_csv(std::slice::from_ref(r));
        let body = line.lines().nth(1).expect("one row");
        let _ = writeln!(csv, "{d},{body}");
    }
    let path = a.out.join("sweep.csv");
    write_atomic(&path, &csv)?;
    run.output(&path);
    print!("{csv}");
    run.finish()
}

pub fn uncertainty(a: &UncertaintyArgs) -> Result<()> {
    let opts = TtdOptions {
        k: a.k,
        p: a.p,
        seed: a.seed,
    };
    opts.validate().map_err(|e| usage(e.to_string()))?;
    if a.p == 0.0 {
        eprintln!("warning: dropout probability 0 makes every pass identical; variance will be 0");
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let data = load_prepared(&a.data)?;
    let mut windows = split_windows(&data, a.split)?;
    if let Some(n) = a.max_windows {
        windows.truncate(n.max(1));
    }
    let leads = data.lead_minutes();
    let mut run = Run::in_dir("uncertainty", &a.out)?;
    run.config(&json!({ "ttd": opts, "split": split(a.split).name(), "windows": windows.len(), "lead_minutes": leads }))?;
    run.manifest.seed = Some(a.seed);
    run.input(&a.checkpoint);
    run.input(&a.data);
    let curve = uncertainty_curve(&model, &windows, &leads, &opts)?;
    let csv_path = a.out.join("uncertainty.csv");
    write_atomic(&csv_path, uncertainty_csv(&curve, &opts))?;
    run.output(&csv_path);

    // maps for the first window
    let maps = ttd(&model, &windows[0].input, &opts)?;
    for (name, t) in [("mean", &maps.mean), ("variance", &maps.variance)] {
        let p = a.out.join(format!("{name}.t32"));
        t.save(&p).map_err(|e| crate::run::data(format!("{}: {e}", p.display())))?;
        run.output(&p);
        for (i, lead) in leads.iter().enumerate() {
            let png = a.out.join(format!("{name}_{lead}min.pgm"));
            write_pgm(&png, &t.index_first(i))?;
        }
    }
    for pt in &curve {
        let v = pt.log10_mean_variance.map_or("missing".into(), |v| format!("{v:.4}"));
        println!("lead {:>4} min  log10 mean variance {v}", pt.lead_minutes);
    }
    run.finish()
}

fn params_text(reports: &[(ModelKind, ParamReport)]) -> String {
    let mut out = format!(
        "{:<14} {:>12} {:>12} {:>12} {:>12}\n",
        "model", "encoder", "decoder", "decoder_cbam", "total"
    );
    for (k, r) in reports {
        let _ = writeln!(
            out,
            "{:<14} {:>12} {:>12} {:>12} {:>12}",
            k.name(),
            r.encoder,
            format!("{} ({})", r.decoder, human_count(r.decoder)),
            r.decoder_cbam,
            r.total
        );
    }
    let find = |k| reports.iter().find(|(x, _)| *x == k).map(|(_, r)| r);
    if let (Some(aa), Some(tu)) = (find(ModelKind::AaTransunet), find(ModelKind::Transunet)) {
        let _ = writeln!(
            out,
            "decoder reduction aa_transunet vs transunet: {:.2}% (reference {REFERENCE_REDUCTION_PERCENT}%, {REFERENCE_TRANSUNET_DECODER} -> {REFERENCE_AA_DECODER})",
            aa.decoder_reduction_percent(tu)
        );
    }
    out
}

fn params_csv(reports: &[(ModelKind, ParamReport)]) -> String {
    let mut out = String::from("model,group,count\n");
    for (k, r) in reports {
        for line in r.to_csv().lines().skip(1) {
            let _ = writeln!(out, "{},{line}", k.name());
        }
    }
    out
}

pub fn params(a: &ParamsArgs) -> Result<()> {
    let cfg = resolve_model(a.template, a.config.as_deref(), a.depth)?;
    let kinds: Vec<ModelKind> = match a.model {
        Some(m) => vec![model_kind(m)],
        None => ModelKind::ALL.to_vec(),
    };
    let reports: Vec<(ModelKind, ParamReport)> = kinds
        .iter()
        .map(|&k| Ok((k, ParamReport::of(&Model::build(k, &cfg, 0)?))))
        .collect::<Result<_>>()?;
    let text = match a.format {
        FormatArg::Text => params_text(&reports),
        FormatArg::Csv => params_csv(&reports),
    };
    print!("{text}");
    if let Some(out) = &a.out {
        let mut run = Run::for_file("params", out)?;
        run.config(&json!({ "kinds": kinds, "model": cfg }))?;
        write_atomic(out, &text)?;
        run.output(out);
        run.finish()?;
    }
    Ok(())
}
