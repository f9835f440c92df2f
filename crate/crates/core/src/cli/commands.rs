//! Implementations of the six subcommands and their file outputs.

use super::config::RunConfig;
use super::CliError;
use crate::bench::{les_scaling_ratio, time_score_batch, timing_batch};
use crate::bo::{lso_run, LsoError, LsoHistory, LsoParams, Method};
use crate::grammar::{self, TokenSequence};
use crate::scores::{
    auroc_summary, eval_scores_protocol, les, ScoreKind, ScoreRow, TrainLatentCache,
};
use crate::vae::{train, EpochLoss, TrainConfig, VaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<VaeModel, CliError> {
    VaeModel::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Vec<TokenSequence>, CliError> {
    let data = grammar::read_dataset(path).map_err(|e| CliError::Data(e.to_string()))?;
    if data.is_empty() {
        return Err(CliError::Data(format!(
            "dataset {} is empty",
            path.display()
        )));
    }
    Ok(data)
}

pub fn cmd_gen_data(
    cfg: &RunConfig,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    if cfg.data_n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    if cfg.data_max_tokens == 0 || cfg.data_max_tokens > grammar::SEQ_LEN {
        return Err(CliError::Usage(format!(
            "--max-tokens must be in 1..={}",
            grammar::SEQ_LEN
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let mut data = Vec::with_capacity(cfg.data_n);
    for _ in 0..cfg.data_n {
        data.push(
            grammar::sample_expression(&mut rng, cfg.data_max_tokens)
                .map_err(|e| CliError::Numerical(e.to_string()))?,
        );
    }
    grammar::write_dataset(out, &data).map_err(|e| CliError::Data(e.to_string()))?;
    let distinct: HashSet<&TokenSequence> = data.iter().collect();
    if !quiet {
        println!(
            "wrote {} expressions ({} distinct) to {}",
            data.len(),
            distinct.len(),
            out.display()
        );
    }
    Ok(())
}

fn write_loss_csv(path: &Path, losses: &[EpochLoss]) -> Result<(), CliError> {
    let mut csv = String::from("epoch,ce,kl,total\n");
    for l in losses {
        csv.push_str(&format!("{},{},{},{}\n", l.epoch, l.ce, l.kl, l.total));
    }
    write_file(path, &csv)
}

pub fn cmd_train_vae(cfg: &RunConfig, out_dir: &Path, quiet: bool) -> Result<(), CliError> {
    let dataset = load_dataset(&cfg.path_dataset)?;
    ensure_dir(out_dir)?;
    let train_cfg = TrainConfig {
        beta: cfg.vae_beta,
        epochs: cfg.vae_epochs,
        learning_rate: cfg.vae_lr,
        batch_size: cfg.vae_batch,
        seed: cfg.data_seed,
        latent_dim: cfg.vae_latent_dim,
        hidden_width: cfg.vae_hidden,
    };
    let (model, losses) = train(&dataset, &train_cfg).map_err(|e| match e {
        crate::vae::VaeError::EmptyDataset | crate::vae::VaeError::InvalidTrainingExample { .. } => {
            CliError::Data(e.to_string())
        }
        other => CliError::Numerical(other.to_string()),
    })?;
    let ckpt_path = out_dir.join("model.ckpt");
    model
        .save(&ckpt_path)
        .map_err(|e| CliError::Data(e.to_string()))?;
    write_loss_csv(&out_dir.join("loss.csv"), &losses)?;
    if !quiet {
        let last = losses.last().expect("at least one epoch");
        let per_token = last.ce / grammar::SEQ_LEN as f64;
        println!(
            "final cross-entropy {:.4} per sequence ({:.4} nats/token), kl {:.4}",
            last.ce, per_token, last.kl
        );
        println!("checkpoint: {}", ckpt_path.display());
    }
    Ok(())
}

fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut csv = String::from("group,valid,les,les_capped,likelihood,prior,polarity,train_distance\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.group.name(),
            r.valid,
            r.les.value,
            r.les.capped,
            r.likelihood,
            r.prior,
            r.polarity.value,
            r.train_distance
        ));
    }
    csv
}

pub fn cmd_eval_auroc(cfg: &RunConfig, out_dir: &Path, quiet: bool) -> Result<(), CliError> {
    let model = load_model(&cfg.path_checkpoint)?;
    let dataset = load_dataset(&cfg.path_dataset)?;
    ensure_dir(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let cache = TrainLatentCache::build(&model, &dataset, &mut rng);
    let rows = eval_scores_protocol(
        &model,
        &cache,
        &dataset,
        cfg.scores_n_per_group,
        cfg.scores_ood_std,
        &mut rng,
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    write_file(&out_dir.join("scores.csv"), &scores_csv(&rows))?;

    let n_valid = rows.iter().filter(|r| r.valid).count();
    let n_invalid = rows.len() - n_valid;
    let summary = auroc_summary(&rows).map_err(|e| {
        CliError::Data(format!(
            "{e}; group composition: {n_valid} valid vs {n_invalid} invalid across \
             train/prior/ood samples"
        ))
    })?;
    let mut csv = String::from("score,auroc,n_valid,n_invalid\n");
    for (kind, value) in &summary {
        csv.push_str(&format!("{},{},{},{}\n", kind.name(), value, n_valid, n_invalid));
    }
    write_file(&out_dir.join("auroc.csv"), &csv)?;
    if !quiet {
        println!("{:<16} auroc", "score");
        for (kind, value) in &summary {
            println!("{:<16} {:.4}", kind.name(), value);
        }
        println!("labels: {n_valid} valid / {n_invalid} invalid");
    }
    Ok(())
}

fn history_csv(history: &LsoHistory) -> String {
    let mut csv = String::from("seed,method,lambda,iter,batch_idx,objective,valid,les,capped\n");
    for r in &history.records {
        let objective = r.objective.map_or(String::new(), |v| format!("{v}"));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            history.seed,
            history.method.name(),
            history.lambda,
            r.iteration,
            r.batch_idx,
            objective,
            r.valid,
            r.les.value,
            r.les.capped
        ));
    }
    csv
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

struct SeedStats {
    per_seed: Vec<f64>,
}

impl SeedStats {
    fn new(per_seed: Vec<f64>) -> Self {
        SeedStats { per_seed }
    }

    fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }

    fn stderr(&self) -> f64 {
        let n = self.per_seed.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let var = self
            .per_seed
            .iter()
            .map(|v| (v - m) * (v - m))
            .sum::<f64>()
            / (n - 1) as f64;
        (var / n as f64).sqrt()
    }

    fn to_json(&self) -> serde_json::Value {
        json!({ "mean": self.mean(), "stderr": self.stderr(), "per_seed": self.per_seed })
    }
}

pub fn cmd_run_lso(cfg: &RunConfig, out_dir: &Path, quiet: bool) -> Result<(), CliError> {
    let model = load_model(&cfg.path_checkpoint)?;
    ensure_dir(out_dir)?;
    let method: Method = cfg
        .lso_method
        .parse()
        .map_err(|e: String| CliError::Usage(e))?;
    if cfg.lso_seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let started = Instant::now();
    let seeds: Vec<u64> = (1..=cfg.lso_seeds as u64).collect();
    let results: Vec<(u64, Result<LsoHistory, LsoError>)> = seeds
        .par_iter()
        .map(|&seed| {
            let params = LsoParams {
                method,
                lambda: cfg.lso_lambda,
                eta: cfg.lso_eta,
                seed,
                init_n: cfg.lso_init_n,
                budget: cfg.lso_budget,
                batch: cfg.lso_batch,
                ..LsoParams::default()
            };
            (seed, lso_run(&model, &params))
        })
        .collect();

    // Write every history first (failed seeds flush their partial runs),
    // then aggregate over the completed ones.
    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(history) => {
                write_file(
                    &out_dir.join(format!("history_seed{seed}.csv")),
                    &history_csv(&history),
                )?;
                completed.push(history);
            }
            Err(LsoError::Aborted {
                iteration,
                message,
                partial,
            }) => {
                write_file(
                    &out_dir.join(format!("history_seed{seed}.csv")),
                    &history_csv(&partial),
                )?;
                failures.push(format!("seed {seed} aborted at iteration {iteration}: {message}"));
            }
        }
    }
    if completed.is_empty() {
        return Err(CliError::Numerical(format!(
            "all seeds failed: {}",
            failures.join("; ")
        )));
    }

    let best = SeedStats::new(
        completed
            .iter()
            .map(|h| h.best_proposed_objective().unwrap_or(f64::NEG_INFINITY))
            .collect(),
    );
    let top20 = SeedStats::new(
        completed
            .iter()
            .map(|h| h.top_k_mean(20).unwrap_or(f64::NEG_INFINITY))
            .collect(),
    );
    let valid = SeedStats::new(completed.iter().map(|h| h.valid_fraction()).collect());
    let best_initial = SeedStats::new(
        completed
            .iter()
            .map(|h| h.best_initial_objective().unwrap_or(f64::NEG_INFINITY))
            .collect(),
    );
    let aggregate = json!({
        "method": method.name(),
        "lambda": cfg.lso_lambda,
        "seeds": completed.iter().map(|h| h.seed).collect::<Vec<u64>>(),
        "best_objective": best.to_json(),
        "top20_mean": top20.to_json(),
        "valid_fraction": valid.to_json(),
        "best_initial": best_initial.to_json(),
        "failures": failures,
    });
    write_file(
        &out_dir.join("aggregate.json"),
        &serde_json::to_string_pretty(&aggregate).expect("serializable"),
    )?;

    let manifest = json!({
        "command": "run-lso",
        "config": {
            "method": method.name(),
            "lambda": cfg.lso_lambda,
            "eta": cfg.lso_eta,
            "seeds": cfg.lso_seeds,
            "init_n": cfg.lso_init_n,
            "budget": cfg.lso_budget,
            "batch": cfg.lso_batch,
            "checkpoint": cfg.path_checkpoint.display().to_string(),
        },
        "model_checksum": format!("sha256:{}", file_sha256(&cfg.path_checkpoint)?),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
    });
    write_file(
        &out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("serializable"),
    )?;

    if !quiet {
        println!(
            "method {} lambda {}: best {:.4} +- {:.4}, top-20 {:.4}, valid fraction {:.3}",
            method.name(),
            cfg.lso_lambda,
            best.mean(),
            best.stderr(),
            top20.mean(),
            valid.mean()
        );
        for f in &failures {
            eprintln!("warning: {f}");
        }
    }
    Ok(())
}

pub fn cmd_bench(
    cfg: &RunConfig,
    out: Option<&Path>,
    stub_scaling: bool,
    quiet: bool,
) -> Result<(), CliError> {
    let model = load_model(&cfg.path_checkpoint)?;
    let batch = timing_batch(model.latent_dim, 20, cfg.data_seed);
    let reps = 5;
    let kinds = [
        ScoreKind::Les,
        ScoreKind::Likelihood,
        ScoreKind::Prior,
        ScoreKind::Polarity,
    ];
    let mut rows = Vec::new();
    for kind in kinds {
        let secs = time_score_batch(&model, &batch, kind, reps);
        rows.push((kind, secs));
    }
    let mut csv = String::from("score,batch_seconds,per_point_seconds\n");
    for (kind, secs) in &rows {
        csv.push_str(&format!("{},{},{}\n", kind.name(), secs, secs / 20.0));
    }
    if !quiet {
        println!("{:<12} {:>14} {:>16}", "score", "batch seconds", "per-point seconds");
        for (kind, secs) in &rows {
            println!("{:<12} {:>14.6} {:>16.8}", kind.name(), secs, secs / 20.0);
        }
    }
    if stub_scaling {
        let (t25, t50) = les_scaling_ratio(25, 50, reps);
        if !quiet {
            println!(
                "les scaling probe: d=25 {:.6}s, d=50 {:.6}s, ratio {:.2}",
                t25,
                t50,
                t50 / t25
            );
        }
        csv.push_str(&format!("les_stub_d25,{t25},{}\n", t25 / 20.0));
        csv.push_str(&format!("les_stub_d50,{t50},{}\n", t50 / 20.0));
    }
    if let Some(path) = out {
        write_file(path, &csv)?;
    }
    Ok(())
}

/// Anchor input for the grid command: explicit latents or expressions to
/// encode.
pub enum GridAnchor {
    Latent(Vec<f64>),
    Expression(String),
}

fn resolve_anchor(model: &VaeModel, anchor: &GridAnchor) -> Result<Vec<f64>, CliError> {
    match anchor {
        GridAnchor::Latent(z) => {
            if z.len() != model.latent_dim {
                return Err(CliError::Usage(format!(
                    "anchor has dimension {}, model expects {}",
                    z.len(),
                    model.latent_dim
                )));
            }
            Ok(z.clone())
        }
        GridAnchor::Expression(text) => {
            let seq = TokenSequence::from_text(text)
                .map_err(|e| CliError::Usage(format!("bad anchor expression: {e}")))?;
            Ok(model.encode_mean(&seq))
        }
    }
}

pub fn cmd_grid(
    cfg: &RunConfig,
    anchor_a: &GridAnchor,
    anchor_b: &GridAnchor,
    grid_size: usize,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    if grid_size < 2 {
        return Err(CliError::Usage("--grid-size must be at least 2".into()));
    }
    let model = load_model(&cfg.path_checkpoint)?;
    let za = resolve_anchor(&model, anchor_a)?;
    let zb = resolve_anchor(&model, anchor_b)?;
    let norm_a: f64 = za.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b: f64 = zb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a < 1e-10 || norm_b < 1e-10 {
        return Err(CliError::Usage(
            "anchor points must be nonzero to span a plane through the origin".into(),
        ));
    }
    let dot: f64 = za.iter().zip(&zb).map(|(a, b)| a * b).sum();
    if (dot / (norm_a * norm_b)).abs() > 1.0 - 1e-10 {
        return Err(CliError::Usage(
            "anchor points are collinear; they do not span a plane".into(),
        ));
    }

    // Plane through the origin and both anchors: P(u, v) = u a + v b over
    // the unit square, so (1, 0) and (0, 1) land exactly on the anchors.
    let m = grid_size;
    let coords: Vec<f64> = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
    let cells: Vec<(f64, f64)> = coords
        .iter()
        .flat_map(|&u| coords.iter().map(move |&v| (u, v)))
        .collect();
    let rows: Vec<String> = cells
        .par_iter()
        .map(|(u, v)| {
            let z: Vec<f64> = za
                .iter()
                .zip(&zb)
                .map(|(a, b)| u * a + v * b)
                .collect();
            let decoded = model.decode(&z);
            let valid = grammar::is_valid(&decoded.tokens);
            let s = les(&model, &z).expect("finite grid point");
            format!("{u},{v},{},{valid}", s.value)
        })
        .collect();
    let mut csv = String::from("u,v,les,valid\n");
    for row in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    write_file(out, &csv)?;
    if !quiet {
        println!("wrote {} grid cells to {}", m * m, out.display());
    }
    Ok(())
}
