//! Subcommand implementations. Reports go to `out`; progress to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use latent_align_core::curation::{self, CurationResult};
use latent_align_core::embedding::align_pairs;
use latent_align_core::eval::{
    self, CandidateSet, ClassifierSpec, SegAccumulator, SegClasses, SegOptions, Upsample,
};
use latent_align_core::kernels::{self, KernelSpec, PairScore};
use latent_align_core::projector::{
    init_stack, GlobalKind, ProjectorStack, SlotKind, StackDims, StackLayout, TokenBundle,
};
use latent_align_core::synthetic::{self, SweepResult, WorldConfig};
use latent_align_core::trainer::{
    self, LinearFitConfig, LinearInit, OptimizerKind, TrainConfig, TrainCorpus, TrainError,
};
use latent_align_core::{EmbeddingSet, Manifest, Matrix};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::cli::*;
use crate::io::{self as lio, BundleSet, Side};

pub fn dispatch(cmd: &Command, ctx: &Ctx, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Cka(a) => cka(a, out),
        Command::RankPairs(a) => rank_pairs(a, out),
        Command::ToySweep(a) => toy_sweep(a, ctx, out),
        Command::FitLinear(a) => fit_linear(a, out),
        Command::Train(a) => train(a, ctx, out),
        Command::Curate(a) => curate(a, ctx, out),
        Command::EvalClassify(a) => eval_classify(a, out),
        Command::EvalRetrieve(a) => eval_retrieve(a, out),
        Command::EvalSegment(a) => eval_segment(a, ctx, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn kernel_spec(k: &KernelOpts) -> KernelSpec {
    match k.kernel {
        KernelArg::Linear => KernelSpec::Linear,
        KernelArg::Rbf => KernelSpec::Rbf {
            gamma: k.gamma.expect("clap requires --gamma with rbf"),
        },
        KernelArg::RbfMedian => KernelSpec::RbfMedian,
    }
}

/// Both sets, with B reordered to A's ids when `align` is set.
fn load_pair(a: &Path, b: &Path, align: bool) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let (sa, ma) = lio::read_embedding(a)?;
    let (sb, mb) = lio::read_embedding(b)?;
    if align {
        let corpus = align_pairs((&sa, &ma), (&sb, &mb)).context("aligning B to A")?;
        return Ok((corpus.image_set().clone(), corpus.text_set().clone()));
    }
    if sa.count() != sb.count() {
        bail!(
            "A has {} rows and B has {}; pass --align to match by item id",
            sa.count(),
            sb.count()
        );
    }
    Ok((sa, sb))
}

fn cka(args: &CkaArgs, out: &mut dyn Write) -> Result<()> {
    let (a, b) = load_pair(&args.a, &args.b, args.align)?;
    let spec = kernel_spec(&args.kernel);
    let score = if args.gram {
        kernels::cka_gram(&a, &b, spec)?
    } else {
        kernels::cka(&a, &b, spec)?
    };
    let route = if args.gram || spec != KernelSpec::Linear {
        "gram"
    } else {
        "frobenius"
    };
    emit(
        out,
        &json!({ "cka": score.value, "n": score.n, "kernel": args.kernel.kernel, "route": route }),
    )
}

fn named_path(s: &str) -> Result<(String, &Path)> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), Path::new(path)))
        }
        _ => Err(UsageError(format!("expected NAME=PATH, got {s:?}")).into()),
    }
}

fn rank_pairs(args: &RankPairsArgs, out: &mut dyn Write) -> Result<()> {
    let mut reference: Option<Manifest> = None;
    let mut load = |spec: &String| -> Result<(String, EmbeddingSet)> {
        let (name, path) = named_path(spec)?;
        let (set, manifest) = lio::read_embedding(path)?;
        let set = match &reference {
            None => {
                reference = Some(manifest);
                set
            }
            Some(r) => lio::reorder_rows(&set, &manifest, r)
                .with_context(|| format!("aligning {name} to the first candidate's ids"))?,
        };
        Ok((name, set))
    };
    let vision = args
        .vision
        .iter()
        .map(&mut load)
        .collect::<Result<Vec<_>>>()?;
    let text = args
        .text
        .iter()
        .map(&mut load)
        .collect::<Result<Vec<_>>>()?;
    let spec = kernel_spec(&args.kernel);
    let mut scores: Vec<PairScore> = vision
        .par_iter()
        .flat_map_iter(|(vn, vs)| {
            let vm = vs.to_matrix();
            text.iter().map(move |(tn, ts)| {
                kernels::cka_matrices(&vm, &ts.to_matrix(), spec).map(|s| PairScore {
                    vision: vn.clone(),
                    text: tn.clone(),
                    cka: s.value,
                    n: s.n,
                })
            })
        })
        .collect::<Result<_, _>>()?;
    kernels::sort_pair_scores(&mut scores);
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rank", "vision", "text", "cka", "n"])?;
        for (i, s) in scores.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                s.vision.clone(),
                s.text.clone(),
                s.cka.to_string(),
                s.n.to_string(),
            ])?;
        }
        w.flush()?;
    }
    emit(
        out,
        &json!({ "kernel": args.kernel.kernel, "pairs": scores }),
    )
}

pub fn world_config(args: &ToySweepArgs) -> WorldConfig {
    let base = args
        .seed
        .map_or_else(WorldConfig::default, WorldConfig::seeded);
    WorldConfig {
        n: args.n,
        d: args.d,
        hidden: args.hidden.unwrap_or(16 * args.d),
        noise_seed: args.noise_seed.unwrap_or(base.noise_seed),
        weight_seed: args.weight_seed.unwrap_or(base.weight_seed),
        instances: args.instances,
    }
}

fn toy_sweep(args: &ToySweepArgs, ctx: &Ctx, out: &mut dyn Write) -> Result<()> {
    let cfg = world_config(args);
    cfg.validate()?;
    ctx.note(format!(
        "sweeping {} instances (n={}, d={})",
        cfg.instances, cfg.n, cfg.d
    ));
    let rows = (0..cfg.instances as u64)
        .into_par_iter()
        .map(|i| synthetic::sweep_row(&cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    let result = SweepResult::from_rows(rows);
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
        w.write_record(["instance_index", "cka", "min_loss", "final_loss"])?;
        for r in &result.rows {
            w.write_record([
                r.instance.to_string(),
                r.cka.to_string(),
                r.min_loss.to_string(),
                r.final_loss.to_string(),
            ])?;
        }
        w.flush()?;
    }
    emit(
        out,
        &json!({
            "config": cfg,
            "instances": result.rows.len(),
            "pearson": result.pearson,
            "spearman": result.spearman,
            "decile_mean_min_loss": result.decile_means(),
            "decile_inversions": result.decile_inversions(),
        }),
    )
}

fn fit_linear(args: &FitLinearArgs, out: &mut dyn Write) -> Result<()> {
    let (a, b) = load_pair(&args.a, &args.b, args.align)?;
    if a.dim() != b.dim() {
        bail!(
            "A has dim {} and B has dim {}; the linear map is square",
            a.dim(),
            b.dim()
        );
    }
    let cfg = LinearFitConfig {
        iterations: args.iterations,
        lr: args.lr,
        temperature: args.temperature,
        init: match args.init {
            InitArg::Identity => LinearInit::Identity,
            InitArg::Uniform => LinearInit::Uniform { seed: args.seed },
        },
    };
    let fit = trainer::fit_linear_map(&a.to_matrix(), &b.to_matrix(), &cfg)?;
    if let Some(path) = &args.out_map {
        lio::write_embf(path, &EmbeddingSet::from_matrix(&fit.w, false)?)?;
    }
    emit(
        out,
        &json!({
            "n": a.count(),
            "dim": a.dim(),
            "iterations": cfg.iterations,
            "initial_loss": fit.initial_loss,
            "final_loss": fit.final_loss,
            "min_loss": fit.min_loss,
        }),
    )
}

fn slot(s: SlotArg) -> SlotKind {
    match s {
        SlotArg::Identity => SlotKind::Identity,
        SlotArg::Mlp => SlotKind::Mlp,
        SlotArg::Token => SlotKind::Token,
    }
}

fn training_sets(args: &TrainArgs) -> Result<(BundleSet, BundleSet)> {
    if let Some(dir) = &args.pairs {
        let corpus = lio::read_pairs_dir(dir)?;
        let v = BundleSet {
            bundles: lio::pooled_bundles(corpus.image_set(), Side::Vision),
            manifest: corpus.manifest().clone(),
        };
        let t = BundleSet {
            bundles: lio::pooled_bundles(corpus.text_set(), Side::Text),
            manifest: corpus.manifest().clone(),
        };
        return Ok((v, t));
    }
    let (vp, tp) = (
        args.tokens_vision.as_ref().expect("clap requires an input"),
        args.tokens_text
            .as_ref()
            .expect("clap pairs the token inputs"),
    );
    let v = lio::read_bundles(vp, Side::Vision)?;
    let t = lio::read_bundles(tp, Side::Text)?
        .aligned_to(&v.manifest)
        .context("aligning text bundles to vision item ids")?;
    Ok((v, t))
}

fn train(args: &TrainArgs, ctx: &Ctx, out: &mut dyn Write) -> Result<()> {
    let (v, t) = training_sets(args)?;
    let dv = v.dim().context("empty vision input")?;
    let dt = t.dim().context("empty text input")?;
    let dims = StackDims {
        hidden: args.hidden.unwrap_or(2 * args.d_out),
        ..StackDims::new(dv, dt, args.d_out)
    };
    let layout = StackLayout {
        vision_local: slot(args.vision_local),
        vision_cls: slot(args.vision_cls),
        text_local: slot(args.text_local),
        text_global: match args.text_global {
            GlobalArg::Identity => GlobalKind::Identity,
            GlobalArg::Mlp => GlobalKind::Mlp,
        },
    };
    let stack = init_stack(dims, layout, args.pooled_only, args.seed)?;
    let cfg = TrainConfig {
        batch_size: args.batch,
        epochs: args.epochs,
        peak_lr: args.lr,
        warmup_epochs: args.warmup_epochs,
        optimizer: match args.optimizer {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adamw => OptimizerKind::AdamW,
        },
        seed: args.seed,
        freeze_temperature: args.freeze_temperature,
        weight_decay: args.weight_decay,
        ..TrainConfig::default()
    };
    let corpus = TrainCorpus::new(v.bundles, t.bundles)?;
    ctx.note(format!(
        "training {} trainable parameters on {} pairs for {} epochs",
        stack.num_params(),
        corpus.len(),
        cfg.epochs
    ));
    let mut save_err: Option<anyhow::Error> = None;
    let result = trainer::train_projectors_with(&corpus, stack, &cfg, |e, stack, temp| {
        ctx.note(format!(
            "epoch {:>3}  loss {:.5}  temperature {:.4}  lr {:.2e}",
            e.epoch + 1,
            e.mean_loss,
            e.temperature,
            e.last_lr
        ));
        let ck = Checkpoint {
            stack: stack.clone(),
            temperature: *temp,
        };
        if let Err(err) = ck.save(&args.out_checkpoint) {
            save_err.get_or_insert(err.into());
        }
    });
    if let Some(err) = save_err {
        return Err(err.context("writing per-epoch checkpoint"));
    }
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::NonFinite {
            epoch,
            step,
            source,
            last_good,
        }) => {
            let (stack, temperature) = *last_good;
            Checkpoint { stack, temperature }.save(&args.out_checkpoint)?;
            bail!(
                "training stopped at epoch {epoch}, step {step}: {source}; last good parameters kept in {}",
                args.out_checkpoint.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    Checkpoint {
        stack: outcome.stack.clone(),
        temperature: outcome.temperature,
    }
    .save(&args.out_checkpoint)?;
    if let Some(path) = &args.best_checkpoint {
        let (stack, temperature) = outcome.best.clone();
        Checkpoint { stack, temperature }.save(path)?;
    }
    let report = json!({
        "pairs": corpus.len(),
        "trainable_params": outcome.stack.num_params(),
        "config": cfg,
        "final_temperature": outcome.temperature.temperature(),
        "report": outcome.report,
    });
    if let Some(path) = &args.report_json {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| path.display().to_string())?;
    }
    emit(out, &report)
}

fn read_few_shot(dir: &Path) -> Result<BTreeMap<String, EmbeddingSet>> {
    let mut map = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| dir.display().to_string())? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "embf") {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .context("concept file name is not UTF-8")?
                .to_string();
            map.insert(id, lio::read_embf(&path)?);
        }
    }
    if map.is_empty() {
        bail!("{}: no .embf concept files", dir.display());
    }
    Ok(map)
}

#[derive(Serialize)]
struct ConceptAssignment<'a> {
    concept_id: &'a str,
    rarity: f64,
    rows: &'a [usize],
    item_ids: Vec<&'a str>,
}

fn curate(args: &CurateArgs, ctx: &Ctx, out: &mut dyn Write) -> Result<()> {
    let few = read_few_shot(&args.few_shot)?;
    let (mut pool, manifest) = lio::read_embedding(&args.pool)?;
    if !pool.is_normalized() {
        if !args.normalize_pool {
            bail!("pool rows are not flagged as normalized; pass --normalize-pool");
        }
        pool = pool.l2_normalize_rows()?;
    }
    let protos = curation::build_prototypes(&few, args.support_cap)?;
    ctx.note(format!(
        "{} concepts against {} pool rows",
        protos.len(),
        pool.count()
    ));
    let rarity = curation::concept_rarity(&protos, &pool, args.top_k)?;
    let CurationResult {
        assignments,
        quota,
        selected_total,
    } = curation::collect_balanced(&protos, &pool, args.quota, args.top_k)?;
    let score: BTreeMap<&str, f64> = rarity
        .iter()
        .map(|r| (r.concept_id.as_str(), r.score))
        .collect();
    let detailed: Vec<ConceptAssignment> = assignments
        .iter()
        .map(|(id, rows)| ConceptAssignment {
            concept_id: id,
            rarity: score[id.as_str()],
            rows,
            item_ids: rows
                .iter()
                .map(|&r| manifest.entries[r].item_id.as_str())
                .collect(),
        })
        .collect();
    if let Some(path) = &args.rarity_csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["concept_id", "rarity", "support", "selected"])?;
        for (p, r) in protos.iter().zip(&rarity) {
            let selected = assignments
                .iter()
                .find(|(id, _)| *id == p.concept_id)
                .map_or(0, |(_, rows)| rows.len());
            w.write_record([
                p.concept_id.clone(),
                r.score.to_string(),
                p.support.to_string(),
                selected.to_string(),
            ])?;
        }
        w.flush()?;
    }
    let summary = json!({
        "concepts": protos.len(),
        "pool_rows": pool.count(),
        "quota": quota,
        "top_k": args.top_k,
        "selected_total": selected_total,
        "order": detailed.iter().map(|c| json!({"concept_id": c.concept_id, "rarity": c.rarity, "selected": c.rows.len()})).collect::<Vec<_>>(),
    });
    match &args.assignments {
        Some(path) => {
            fs::write(path, serde_json::to_string_pretty(&detailed)? + "\n")
                .with_context(|| path.display().to_string())?;
            emit(out, &summary)
        }
        None => emit(out, &json!({ "summary": summary, "assignments": detailed })),
    }
}

/// The checkpoint's stack, or an identity stack over equal input dims.
fn eval_stack(checkpoint: Option<&Path>, dv: usize, dt: usize) -> Result<ProjectorStack> {
    match checkpoint {
        Some(p) => Ok(Checkpoint::load(p)?.stack),
        None => {
            if dv != dt {
                bail!("vision dim {dv} differs from text dim {dt}; an identity stack needs a --checkpoint");
            }
            Ok(init_stack(
                StackDims::new(dv, dt, dv),
                StackLayout::all_identity(),
                false,
                0,
            )?)
        }
    }
}

fn bundle_dim(set: &BundleSet, what: &str) -> Result<usize> {
    set.dim().with_context(|| format!("{what} input is empty"))
}

fn eval_classify(args: &EvalClassifyArgs, out: &mut dyn Write) -> Result<()> {
    let images = lio::read_bundles(&args.images, Side::Vision)?;
    let prompts = lio::read_bundles(&args.prompts, Side::Text)?;
    let stack = eval_stack(
        args.checkpoint.as_deref(),
        bundle_dim(&images, "image")?,
        bundle_dim(&prompts, "prompt")?,
    )?;

    let mut classes: Vec<(String, Vec<TokenBundle>)> = Vec::new();
    for (b, e) in prompts.bundles.into_iter().zip(&prompts.manifest.entries) {
        let label = e
            .label
            .as_deref()
            .with_context(|| format!("prompt {:?} has no label", e.item_id))?;
        match classes.iter_mut().find(|(id, _)| id == label) {
            Some((_, v)) => v.push(b),
            None => classes.push((label.to_string(), vec![b])),
        }
    }
    let spec = ClassifierSpec::new(classes)?;
    let labels: Vec<&str> = images
        .manifest
        .entries
        .iter()
        .map(|e| {
            e.label
                .as_deref()
                .with_context(|| format!("image {:?} has no label", e.item_id))
        })
        .collect::<Result<_>>()?;
    let report = eval::zero_shot_classify(&images.bundles, &labels, &spec, &stack)?;
    if let Some(path) = &args.per_item {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["item_id", "label", "predicted", "correct"])?;
        for ((e, l), &p) in images
            .manifest
            .entries
            .iter()
            .zip(&labels)
            .zip(&report.predictions)
        {
            let pred = &spec.classes[p].0;
            w.write_record([
                e.item_id.as_str(),
                l,
                pred,
                if pred == l { "1" } else { "0" },
            ])?;
        }
        w.flush()?;
    }
    emit(
        out,
        &json!({
            "task": "classification",
            "classes": spec.len(),
            "total": report.total,
            "correct": report.correct,
            "top1": report.top1,
            "per_class": report.per_class,
        }),
    )
}

fn eval_retrieve(args: &EvalRetrieveArgs, out: &mut dyn Write) -> Result<()> {
    let (v, t) = match &args.pairs {
        Some(dir) => {
            let corpus = lio::read_pairs_dir(dir)?;
            (
                BundleSet {
                    bundles: lio::pooled_bundles(corpus.image_set(), Side::Vision),
                    manifest: corpus.manifest().clone(),
                },
                BundleSet {
                    bundles: lio::pooled_bundles(corpus.text_set(), Side::Text),
                    manifest: corpus.manifest().clone(),
                },
            )
        }
        None => {
            let v = lio::read_bundles(args.vision.as_ref().expect("clap"), Side::Vision)?;
            let t = lio::read_bundles(args.text.as_ref().expect("clap"), Side::Text)?
                .aligned_to(&v.manifest)?;
            (v, t)
        }
    };
    if args.ks.iter().any(|&k| k == 0) {
        return Err(UsageError("--ks values must be positive".into()).into());
    }
    let stack = eval_stack(
        args.checkpoint.as_deref(),
        bundle_dim(&v, "vision")?,
        bundle_dim(&t, "text")?,
    )?;
    let project = |set: &BundleSet, side: Side| -> Result<Matrix> {
        let rows = set
            .bundles
            .par_iter()
            .map(|b| match side {
                Side::Vision => stack.project_vision(b),
                Side::Text => stack.project_text(b),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        Ok(Matrix::from_rows(&refs))
    };
    let sim = project(&v, Side::Vision)?.matmul_t(&project(&t, Side::Text)?);
    let report = eval::recall_from_similarity(&sim, &args.ks);
    if let Some(path) = &args.per_item {
        let n = sim.rows();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["item_id", "i2t_rank", "t2i_rank"])?;
        for (i, e) in v.manifest.entries.iter().enumerate() {
            let i2t = eval::partner_rank(sim.row(i).iter().copied(), i);
            let t2i = eval::partner_rank((0..n).map(|r| sim[(r, i)]), i);
            w.write_record([
                e.item_id.clone(),
                (i2t + 1).to_string(),
                (t2i + 1).to_string(),
            ])?;
        }
        w.flush()?;
    }
    emit(
        out,
        &json!({ "task": "retrieval", "n": report.n, "i2t": report.i2t, "t2i": report.t2i }),
    )
}

fn eval_segment(args: &EvalSegmentArgs, ctx: &Ctx, out: &mut dyn Write) -> Result<()> {
    let images = lio::read_seg_dir(&args.images)?;
    let class_set = lio::read_bundles(&args.classes, Side::Text)?;
    let dv = images
        .first()
        .map(|(_, s)| s.cls.cols())
        .context("no images")?;
    let stack = eval_stack(
        args.checkpoint.as_deref(),
        dv,
        bundle_dim(&class_set, "class")?,
    )?;

    let mut texts: Vec<(u32, Vec<TokenBundle>)> = Vec::new();
    for (b, e) in class_set
        .bundles
        .into_iter()
        .zip(&class_set.manifest.entries)
    {
        let label = e
            .label
            .as_deref()
            .with_context(|| format!("class prompt {:?} has no label", e.item_id))?;
        let id: u32 = label
            .parse()
            .with_context(|| format!("class label {label:?} is not a numeric id"))?;
        match texts.iter_mut().find(|(c, _)| *c == id) {
            Some((_, v)) => v.push(b),
            None => texts.push((id, vec![b])),
        }
    }
    let classes = SegClasses::new(&texts, &stack)?;
    let opts = SegOptions {
        candidates: if args.all_classes {
            CandidateSet::AllClasses
        } else {
            CandidateSet::ImageClasses
        },
        upsample: if args.bilinear {
            Upsample::Bilinear
        } else {
            Upsample::Nearest
        },
        background: args.background,
    };
    ctx.note(format!("segmenting {} images", images.len()));
    let results = images
        .par_iter()
        .map(|(id, input)| {
            eval::segment_zero_shot(input, &classes, &stack, &opts)
                .with_context(|| format!("image {id:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = SegAccumulator::default();
    for r in &results {
        acc.add(r);
    }
    if let Some(path) = &args.per_item {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["item_id", "miou", "classes"])?;
        for ((id, _), r) in images.iter().zip(&results) {
            w.write_record([
                id.clone(),
                r.miou.to_string(),
                r.per_class.len().to_string(),
            ])?;
        }
        w.flush()?;
    }
    let mean_image = results.iter().map(|r| r.miou).sum::<f64>() / results.len() as f64;
    emit(
        out,
        &json!({
            "task": "segmentation",
            "images": results.len(),
            "options": opts,
            "miou": acc.miou(),
            "mean_image_miou": mean_image,
            "per_class": acc.per_class(),
        }),
    )
}

fn embf_summary(set: &EmbeddingSet) -> serde_json::Value {
    let norms: Vec<f64> = (0..set.count()).map(|i| set.row_norm(i)).collect();
    let (lo, hi) = norms
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &n| {
            (lo.min(n), hi.max(n))
        });
    json!({
        "count": set.count(),
        "dim": set.dim(),
        "normalized": set.is_normalized(),
        "row_norm_min": (set.count() > 0).then_some(lo),
        "row_norm_max": (set.count() > 0).then_some(hi),
    })
}

fn inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let path = &args.path;
    if path.is_dir() {
        let mut files = serde_json::Map::new();
        let mut names: Vec<_> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        names.sort();
        for p in names {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let value = if p.extension().is_some_and(|e| e == "embf") {
                embf_summary(&lio::read_embf(&p)?)
            } else if p.extension().is_some_and(|e| e == "jsonl") {
                json!({ "lines": fs::read_to_string(&p)?.lines().filter(|l| !l.trim().is_empty()).count() })
            } else {
                json!({ "bytes": fs::metadata(&p)?.len() })
            };
            files.insert(name, value);
        }
        return emit(out, &json!({ "kind": "directory", "files": files }));
    }
    let bytes = fs::read(path).with_context(|| path.display().to_string())?;
    match bytes.get(..4) {
        Some(m) if m == latent_align_core::embf::MAGIC => {
            let set = latent_align_core::embf::decode(&bytes)?;
            let mpath = lio::sidecar_manifest_path(path);
            let manifest = mpath
                .exists()
                .then(|| lio::read_manifest(&mpath))
                .transpose()?;
            let mut v = embf_summary(&set);
            v["kind"] = json!("embf");
            v["manifest_entries"] = json!(manifest.map(|m| m.len()));
            emit(out, &v)
        }
        Some(m) if m == crate::checkpoint::MAGIC => {
            let ck = Checkpoint::decode(&bytes)?;
            emit(
                out,
                &json!({
                    "kind": "checkpoint",
                    "trainable_params": ck.stack.num_params(),
                    "temperature": ck.temperature.temperature(),
                    "header": ck.header(),
                }),
            )
        }
        _ => bail!(
            "{}: not an EMBF file, checkpoint or directory",
            path.display()
        ),
    }
}
