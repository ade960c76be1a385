use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;

use tdml::dataio::{
    export_csv, generate_clusters, import_csv, load_checkpoint, read_embeddings, save_checkpoint, write_embeddings,
    ClusterSpec,
};
use tdml::metrics::{evaluate_with, EvalOptions, GtmScope, MetricsReport};
use tdml::model::{embed, init_params};
use tdml::trainer::{train_from, TrainHistory};
use tdml::{
    build_index, pca_fit, pca_transform, AdamConfig, Dataset, EmbeddingRecord, InputKind, Matrix, ModelConfig,
    Normalization, Split, TrainConfig,
};

use crate::manifest::{self, Manifest};
use crate::{usage, Cli, Command, ConvertArgs, EmbedArgs, EvaluateArgs, GenDataArgs, PcaArgs, TrainArgs};

const EMBED_CHUNK: usize = 512;

pub fn dispatch(cli: &Cli, recorded: &Manifest) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, recorded),
        Command::ImportCsv(a) => import(a, recorded),
        Command::ExportCsv(a) => export(a, recorded),
        Command::Train(a) => train(a, recorded),
        Command::Embed(a) => embed_cmd(a, recorded),
        Command::Pca(a) => pca(a, recorded),
        Command::Evaluate(a) => evaluate(a, recorded),
        Command::Rerun(a) => {
            let text = std::fs::read_to_string(&a.manifest)
                .with_context(|| format!("reading manifest {}", a.manifest.display()))?;
            let parsed = Manifest::parse(&text)?;
            crate::execute(manifest::to_argv(&parsed, a.out.as_deref())?)
        }
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `<file>.manifest` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

fn parse_map_shape(spec: &str) -> anyhow::Result<(usize, usize)> {
    let parsed = spec
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse::<usize>().ok()?, w.trim().parse::<usize>().ok()?)));
    match parsed {
        Some((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(usage(format!("--map expects HxW with positive sizes, got {spec:?}"))),
    }
}

fn gen_data(a: &GenDataArgs, recorded: &Manifest) -> anyhow::Result<()> {
    if a.classes < 2 || a.per_class < 2 || a.dim == 0 {
        return Err(usage("--classes and --per-class must be at least 2 and --dim positive"));
    }
    if !(a.split > 0.0 && a.split < 1.0) {
        return Err(usage(format!("--split must lie strictly between 0 and 1, got {}", a.split)));
    }
    let spec = ClusterSpec {
        num_classes: a.classes,
        per_class: a.per_class,
        dim: a.dim,
        separation: a.separation,
        spread: a.spread,
        seed: a.seed,
        split_fraction: a.split,
    };
    let (train, test) = generate_clusters(&spec)?;
    create_dir(&a.out)?;
    write_embeddings(&a.out.join("train.tdml"), &train.to_embedding_records())?;
    write_embeddings(&a.out.join("test.tdml"), &test.to_embedding_records())?;
    recorded.write(&a.out.join("manifest.txt"))?;
    eprintln!("wrote {} train and {} test records to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn import(a: &ConvertArgs, recorded: &Manifest) -> anyhow::Result<()> {
    let records = import_csv(&a.input)?;
    write_embeddings(&a.out, &records)?;
    recorded.write(&sidecar(&a.out))
}

fn export(a: &ConvertArgs, recorded: &Manifest) -> anyhow::Result<()> {
    let records = read_embeddings(&a.input)?;
    export_csv(&a.out, &records)?;
    recorded.write(&sidecar(&a.out))
}

fn render_history(history: &TrainHistory) -> String {
    let mut out = String::from("epoch,mean_loss,active_fraction,batches\n");
    for e in &history.epochs {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.mean_loss, e.active_fraction, e.batches);
    }
    out
}

fn train(a: &TrainArgs, recorded: &Manifest) -> anyhow::Result<()> {
    let normalization: Normalization = a.normalization.parse().map_err(|e: tdml::Error| usage(e.to_string()))?;
    if a.samples_per_class < 2 || !a.batch.is_multiple_of(a.samples_per_class) || a.batch / a.samples_per_class < 2 {
        return Err(usage(format!(
            "--batch {} must be a multiple of --samples-per-class {} covering at least 2 classes of at least 2",
            a.batch, a.samples_per_class
        )));
    }
    if a.conv.is_some() && a.map.is_none() {
        return Err(usage("--conv needs --map HxW"));
    }
    let map = a.map.as_deref().map(parse_map_shape).transpose()?;

    let mut dataset = Dataset::load(&a.data, Split::Train)?;
    if dataset.is_empty() {
        anyhow::bail!("{} holds no records", a.data.display());
    }
    let dim = dataset.records[0].payload.len();
    let input = match map {
        Some((h, w)) => {
            if dim % (h * w) != 0 {
                return Err(usage(format!("--map {h}x{w} does not divide the input dimension {dim}")));
            }
            dataset = dataset.reshape_to_maps(h, w)?;
            InputKind::Map { channels: dim / (h * w) }
        }
        None => InputKind::Vector { dim },
    };
    let model = ModelConfig {
        input,
        conv_channels: a.conv,
        dense_dims: a.dense.clone(),
        fc_reduction: a.fc_reduce,
    };
    model.validate().map_err(|e| usage(e.to_string()))?;

    let config = TrainConfig {
        margin: a.margin,
        adam: AdamConfig {
            learning_rate: a.lr,
            ..AdamConfig::default()
        },
        epochs: a.epochs,
        classes_per_batch: a.batch / a.samples_per_class,
        samples_per_class: a.samples_per_class,
        normalization,
        seed: a.seed,
        augment: !a.no_augment,
        log_progress: true,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;

    let mut params = init_params(&model, a.seed)?;
    if let Some(base) = &a.init_from {
        let ck = load_checkpoint(base)?;
        let copied = params.warm_start_from(&ck.params);
        if copied == 0 {
            anyhow::bail!("no layer of {} matches the requested architecture", base.display());
        }
        log::info!("copied {copied} layer(s) from {}", base.display());
    }

    create_dir(&a.out)?;
    let every = a.checkpoint_every;
    let (params, history) = train_from(&dataset, params, &config, |stats, p| {
        if every > 0 && stats.epoch % every == 0 {
            save_checkpoint(&a.out.join(format!("checkpoint-epoch-{:04}.tdck", stats.epoch)), p, None)?;
        }
        Ok(())
    })?;
    save_checkpoint(&a.out.join("checkpoint.tdck"), &params, None)?;
    std::fs::write(a.out.join("history.csv"), render_history(&history)).context("writing history.csv")?;
    recorded.write(&a.out.join("manifest.txt"))
}

fn embed_cmd(a: &EmbedArgs, recorded: &Manifest) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut dataset = Dataset::load(&a.data, Split::Test)?;
    match (ck.params.config().input, a.map.as_deref()) {
        (InputKind::Map { .. }, Some(spec)) => {
            let (h, w) = parse_map_shape(spec)?;
            dataset = dataset.reshape_to_maps(h, w)?;
        }
        (InputKind::Map { .. }, None) => return Err(usage("this checkpoint takes feature maps; pass --map HxW")),
        (InputKind::Vector { .. }, Some(_)) => return Err(usage("this checkpoint takes vectors; drop --map")),
        (InputKind::Vector { .. }, None) => {}
    }
    let mut vectors = Vec::with_capacity(dataset.len());
    for chunk in dataset.records.chunks(EMBED_CHUNK) {
        let e = embed(&ck.params, chunk)?;
        vectors.extend(e.iter_rows().map(<[f64]>::to_vec));
    }
    if let Some(pca) = &ck.pca {
        let m = Matrix::from_rows(&vectors)?;
        let reduced = pca_transform(pca, &m, true)?;
        vectors = reduced.iter_rows().map(<[f64]>::to_vec).collect();
    }
    let records: Vec<EmbeddingRecord> = dataset
        .records
        .iter()
        .zip(vectors)
        .map(|(r, v)| EmbeddingRecord::new(r.id.clone(), r.label.clone(), v))
        .collect();
    write_embeddings(&a.out, &records)?;
    recorded.write(&sidecar(&a.out))
}

fn to_matrix(records: &[EmbeddingRecord]) -> anyhow::Result<Matrix> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.vector.as_slice()).collect();
    Ok(Matrix::from_rows(&rows)?)
}

fn pca(a: &PcaArgs, recorded: &Manifest) -> anyhow::Result<()> {
    let fit = read_embeddings(&a.fit)?;
    let dim = fit.first().map_or(0, |r| r.vector.len());
    if a.k == 0 || a.k > dim {
        return Err(usage(format!("--k must lie in 1..={dim} for {dim}-dimensional input, got {}", a.k)));
    }
    let model = pca_fit(&to_matrix(&fit)?, a.k)?;

    let mut inputs = vec![a.fit.clone()];
    inputs.extend(a.apply.iter().filter(|p| **p != a.fit).cloned());
    let mut names = HashSet::new();
    for p in &inputs {
        let name = p.file_name().ok_or_else(|| usage(format!("{} has no file name", p.display())))?;
        if !names.insert(name.to_owned()) {
            return Err(usage(format!("two inputs share the file name {}", name.to_string_lossy())));
        }
    }

    create_dir(&a.out)?;
    for p in &inputs {
        let records = if *p == a.fit { fit.clone() } else { read_embeddings(p)? };
        let reduced = pca_transform(&model, &to_matrix(&records)?, !a.no_renorm)
            .with_context(|| format!("projecting {}", p.display()))?;
        let out: Vec<EmbeddingRecord> = records
            .into_iter()
            .zip(reduced.iter_rows())
            .map(|(r, v)| EmbeddingRecord::new(r.id, r.label, v.to_vec()))
            .collect();
        write_embeddings(&a.out.join(p.file_name().expect("checked above")), &out)?;
    }
    recorded.write(&a.out.join("manifest.txt"))
}

fn report_json(report: &MetricsReport) -> serde_json::Value {
    let p_at: serde_json::Map<String, serde_json::Value> =
        report.p_at.iter().map(|(k, v)| (format!("P@{k}"), json!(v))).collect();
    let per_class: serde_json::Map<String, serde_json::Value> =
        report.per_class_anmrr.iter().map(|(c, v)| (c.clone(), json!(v))).collect();
    json!({
        "ANMRR": report.anmrr,
        "mAP": report.map,
        "precision": p_at,
        "per_class_ANMRR": per_class,
        "queries": report.queries,
        "gtm": report.gtm,
    })
}

fn evaluate(a: &EvaluateArgs, recorded: &Manifest) -> anyhow::Result<()> {
    let database = read_embeddings(&a.data)?;
    let queries = match &a.queries {
        Some(q) => read_embeddings(q)?,
        None => database.clone(),
    };
    let index = build_index(&database)?;
    let options = EvalOptions {
        gtm: a.gtm.map_or(GtmScope::QuerySet, GtmScope::Fixed),
        ..EvalOptions::default()
    };
    let report = evaluate_with(&index, &queries, &options)?;
    let text = if a.json {
        let mut s = serde_json::to_string_pretty(&report_json(&report))?;
        s.push('\n');
        s
    } else {
        report.to_text()
    };
    match &a.out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            recorded.write(&sidecar(path))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
