use std::path::{Path, PathBuf};

use lexvq::analysis;
use lexvq::config::{resolved_train_kv, train_config_from, ConfigMap};
use lexvq::graph::ModifyingGraph;
use lexvq::io::atomic_write_string;
use lexvq::model::{self, ppm, Arch, TrainOutputs, Variant};
use lexvq::nn::{load_params, write_tensors};
use lexvq::tensor::Tensor;
use lexvq::vq::tokens_to_csv;
use lexvq::{Error, Result};

use crate::manifest::write_manifest;

/// `word\tv0\tv1...` per row.
fn words_tsv(words: &[String], matrix: &Tensor) -> String {
    let mut out = String::new();
    for (i, word) in words.iter().enumerate() {
        out.push_str(word);
        for v in matrix.row(i) {
            out.push_str(&format!("\t{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn ingest(map: &ConfigMap, out_dir: &Path) -> Result<()> {
    let cfg = train_config_from(map)?;
    if matches!(cfg.variant, Variant::Baseline { .. }) {
        return Err(Error::Config(
            "ingest needs variant=vqct (the baseline has no word priors)".into(),
        ));
    }
    let (cb, _lex, graph) = model::load_priors(&cfg)?;

    let adj_path = out_dir.join("plm_adj.tsv");
    let noun_path = out_dir.join("plm_noun.tsv");
    let graph_path = out_dir.join("graph.tsv");
    atomic_write_string(&adj_path, &words_tsv(&cb.adj_words, &cb.r_adj))?;
    atomic_write_string(&noun_path, &words_tsv(&cb.noun_words, &cb.r_noun))?;
    atomic_write_string(&graph_path, &graph_tsv(&graph, &cb))?;

    write_manifest(
        out_dir,
        "ingest",
        &resolved_train_kv(&cfg),
        &[(
            "edges",
            graph.edge_count().to_string(),
        )],
        &[adj_path, noun_path, graph_path],
    )
}

fn graph_tsv(graph: &ModifyingGraph, cb: &lexvq::priors::PlmCodebooks) -> String {
    graph.to_tsv(cb)
}

pub fn train(map: &ConfigMap, out_dir: &Path) -> Result<()> {
    let cfg = train_config_from(map)?;
    let report = model::train(&cfg, Some(out_dir))?;

    let mut outputs = vec![
        out_dir.join(TrainOutputs::METRICS),
        out_dir.join(TrainOutputs::FINAL_CHECKPOINT),
    ];
    for snapshot in &report.snapshots {
        outputs.push(out_dir.join(TrainOutputs::checkpoint_name(snapshot.epoch)));
    }
    write_manifest(out_dir, "train", &resolved_train_kv(&cfg), &[], &outputs)
}

pub fn eval(
    map: &ConfigMap,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    images: Option<&Path>,
) -> Result<()> {
    let cfg = train_config_from(map)?;
    let checkpoint: PathBuf = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(map.require("eval_checkpoint")?),
    };
    let images_dir: PathBuf = match images {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(map.require("eval_images")?),
    };
    let (arch, mut store) = model::build_model(&cfg)?;
    load_params(&checkpoint, &mut store)?;
    let images = ppm::read_ppm_dir(&images_dir)?;
    if images.is_empty() {
        return Err(Error::Invalid(format!(
            "no .ppm images in {}",
            images_dir.display()
        )));
    }

    let mut outputs = Vec::new();
    let mut csv = String::from("image,psnr,l1,l2\n");
    let mut sums = (0.0f64, 0.0f64);
    for (name, img) in &images {
        let batch = model::stack_images(&[img])?;
        let fwd = arch.forward(&store, &batch)?;
        let mut x_hat = fwd.tape.to_tensor(fwd.x_hat);
        for v in x_hat.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let (psnr, l1, l2) = analysis::pixel_metrics(&batch, &x_hat)?;
        csv.push_str(&format!("{name},{psnr},{l1},{l2}\n"));
        sums.0 += l1;
        sums.1 += l2;

        let grids = fwd.quant.grids();
        let named: Vec<(&str, usize, &lexvq::vq::IndexGrid)> = grids
            .iter()
            .enumerate()
            .map(|(i, (label, grid))| {
                (*label, fwd.tape.shape(fwd.codebook_vars[i])[0], *grid)
            })
            .collect();
        let token_path = out_dir.join("tokens").join(format!("{name}.tokens.csv"));
        atomic_write_string(&token_path, &tokens_to_csv(&named))?;
        outputs.push(token_path);
    }
    let n = images.len() as f64;
    let mean_l2 = sums.1 / n;
    csv.push_str(&format!(
        "mean,{},{},{}\n",
        analysis::psnr_from_l2(mean_l2),
        sums.0 / n,
        mean_l2
    ));
    let recon_path = out_dir.join("recon.csv");
    atomic_write_string(&recon_path, &csv)?;
    outputs.push(recon_path);

    write_manifest(
        out_dir,
        "eval",
        &resolved_train_kv(&cfg),
        &[
            ("eval_checkpoint", checkpoint.display().to_string()),
            ("eval_images", images_dir.display().to_string()),
        ],
        &outputs,
    )
}

/// Checkpoints of a run directory, ascending by epoch.
fn discover_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    for entry in entries.filter_map(|e| e.ok()) {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name
            .strip_prefix("checkpoint-")
            .and_then(|s| s.strip_suffix(".ckpt"))
        {
            if let Ok(epoch) = stem.parse::<usize>() {
                found.push((epoch, entry.path()));
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn analyze(map: &ConfigMap, out_dir: &Path, run_dir: &Path) -> Result<()> {
    let cfg = train_config_from(map)?;
    let checkpoints = discover_checkpoints(run_dir)?;
    if checkpoints.len() < 2 {
        return Err(Error::Invalid(format!(
            "{} holds {} checkpoints; similarity drift needs at least 2",
            run_dir.display(),
            checkpoints.len()
        )));
    }
    let (arch, mut store) = model::build_model(&cfg)?;
    let mut series = Vec::new();
    for (_, path) in &checkpoints {
        load_params(path, &mut store)?;
        series.push(arch.codebook_matrices(&store)?);
    }
    // store now holds the last (highest-epoch) checkpoint
    let images = model::load_dataset(&cfg)?;
    let util = analysis::utilization(&arch, &store, &images, cfg.batch_size)?;

    let n_probes = map.get_usize("probes", 10)?;
    let probes = analysis::pick_live_probes(&util.counts, n_probes, cfg.seed);
    let drift = analysis::similarity_drift(&series, &probes)?;

    let mut util_csv = String::from("codebook,code,count\n");
    for (ci, histogram) in util.counts.iter().enumerate() {
        for (code, &count) in histogram.iter().enumerate() {
            util_csv.push_str(&format!("{ci},{code},{count}\n"));
        }
    }
    let util_path = out_dir.join("utilization.csv");
    atomic_write_string(&util_path, &util_csv)?;

    let mut drift_csv = String::from("epoch,drift\n");
    for ((epoch, _), d) in checkpoints.iter().zip(&drift.drifts) {
        drift_csv.push_str(&format!("{epoch},{d}\n"));
    }
    let drift_path = out_dir.join("drift.csv");
    atomic_write_string(&drift_path, &drift_csv)?;

    let mut extras = vec![
        ("run_dir", run_dir.display().to_string()),
        ("probes", format!("{probes:?}")),
        (
            "combined_used_fraction",
            util.combined_used_fraction.to_string(),
        ),
    ];
    for (i, (u, p)) in util
        .used_fraction
        .iter()
        .zip(&util.perplexity)
        .enumerate()
    {
        extras.push(("used_fraction", format!("codebook{i}={u}")));
        extras.push(("perplexity", format!("codebook{i}={p}")));
    }
    write_manifest(
        out_dir,
        "analyze",
        &resolved_train_kv(&cfg),
        &extras,
        &[util_path, drift_path],
    )
}

pub fn toy2d(map: &ConfigMap, out_dir: &Path, steps: usize) -> Result<()> {
    let seed = map.get_u64("seed", 0)?;
    let run = analysis::toy2d(steps, seed)?;
    let traj_path = out_dir.join("trajectory.csv");
    let sel_path = out_dir.join("selections.csv");
    atomic_write_string(&traj_path, &analysis::toy2d_to_csv(&run))?;
    atomic_write_string(&sel_path, &analysis::toy2d_selections_to_csv(&run))?;
    let mut resolved = ConfigMap::new();
    resolved.set("seed", &seed.to_string());
    write_manifest(
        out_dir,
        "toy2d",
        &resolved,
        &[("steps", steps.to_string())],
        &[traj_path, sel_path],
    )
}

pub fn export_codebook(map: &ConfigMap, out_dir: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = train_config_from(map)?;
    let (arch, mut store) = model::build_model(&cfg)?;
    load_params(checkpoint, &mut store)?;
    let matrices = arch.codebook_matrices(&store)?;

    let mut outputs = Vec::new();
    let bin_path = out_dir.join("codebooks.ckpt");
    match &arch {
        Arch::Vqct(m) => {
            write_tensors(
                &bin_path,
                &[
                    ("codebook.adj".to_string(), matrices[0].clone()),
                    ("codebook.noun".to_string(), matrices[1].clone()),
                ],
            )?;
            let adj_path = out_dir.join("codebook_adj.tsv");
            let noun_path = out_dir.join("codebook_noun.tsv");
            atomic_write_string(&adj_path, &words_tsv(&m.priors.adj_words, &matrices[0]))?;
            atomic_write_string(&noun_path, &words_tsv(&m.priors.noun_words, &matrices[1]))?;
            outputs.extend([adj_path, noun_path]);
        }
        Arch::Baseline(m) => {
            write_tensors(
                &bin_path,
                &[("codebook.e".to_string(), matrices[0].clone())],
            )?;
            let labels: Vec<String> = (0..m.k).map(|i| format!("code_{i:03}")).collect();
            let tsv_path = out_dir.join("codebook.tsv");
            atomic_write_string(&tsv_path, &words_tsv(&labels, &matrices[0]))?;
            outputs.push(tsv_path);
        }
    }
    outputs.push(bin_path);

    write_manifest(
        out_dir,
        "export-codebook",
        &resolved_train_kv(&cfg),
        &[("checkpoint", checkpoint.display().to_string())],
        &outputs,
    )
}
