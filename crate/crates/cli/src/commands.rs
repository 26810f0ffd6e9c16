use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use grf::chem::{
    canonical_set, canonical_smiles, check_validity, compute_metrics, load_dataset, Molecule,
    ValenceTable,
};
use grf::flow::GrfModel;
use grf::graph::{pad_graph, quantize, GraphSpec, MolGraph};
use grf::inversion::{encode, generate, invert_flow, reconstruction_error, InversionConfig};
use grf::latent::latent_grid;
use grf::likelihood::{full_logp_with, LogDetConfig, LogDetMethod};
use grf::seed::derive_seed;
use grf::selfcheck::{run_selfcheck, SelfcheckConfig};
use grf::train::Trainer;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{Command, Common};

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train {
            common,
            dataset,
            ckpt,
            epochs,
        } => train(&common, &dataset, ckpt.as_deref(), epochs),
        Command::Sample {
            common,
            ckpt,
            count,
            tx,
            ta,
            truncate,
            dataset,
        } => sample(&common, &ckpt, count, tx, ta, truncate, dataset.as_deref()),
        Command::Reconstruct {
            common,
            ckpt,
            dataset,
            iterations,
            count,
        } => reconstruct(&common, &ckpt, &dataset, &iterations, count),
        Command::Eval {
            common,
            ckpt,
            dataset,
            count,
            exact,
        } => eval(&common, &ckpt, &dataset, count, exact),
        Command::LatentGrid {
            common,
            ckpt,
            dataset,
            size,
            step,
        } => grid(&common, &ckpt, &dataset, size, step),
        Command::Selfcheck {
            common,
            instances,
            inject_over_budget,
        } => selfcheck(&common, instances, inject_over_budget),
    }
}

struct Setup {
    config: RunConfig,
    seed: u64,
    table: ValenceTable,
    out: PathBuf,
}

fn setup(common: &Common) -> Result<Setup, CliError> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let config = RunConfig::load(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(config.train.rng_seed);
    let table = match &common.valence_table {
        Some(p) => ValenceTable::from_json_file(p)?,
        None => ValenceTable::default(),
    };
    fs::create_dir_all(&common.out)?;
    Ok(Setup {
        config,
        seed,
        table,
        out: common.out.clone(),
    })
}

fn graphs(
    path: &Path,
    spec: &GraphSpec,
    count: Option<usize>,
) -> Result<(Vec<Molecule>, Vec<MolGraph>), CliError> {
    let mut mols = load_dataset(path)?;
    if let Some(n) = count {
        mols.truncate(n);
    }
    let gs = mols
        .iter()
        .enumerate()
        .map(|(i, m)| {
            pad_graph(m, spec).map_err(|e| {
                grf::Error::Data(format!("{} molecule {}: {e}", path.display(), i + 1))
            })
        })
        .collect::<grf::Result<Vec<_>>>()?;
    Ok((mols, gs))
}

fn smiles_of(g: &MolGraph, spec: &GraphSpec, table: &ValenceTable) -> Option<String> {
    let mol = g.to_molecule(spec);
    check_validity(&mol, table)
        .then(|| canonical_smiles(&mol).expect("valid molecules are connected"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn train(
    common: &Common,
    dataset: &Path,
    ckpt: Option<&Path>,
    epochs: Option<usize>,
) -> Result<(), CliError> {
    let s = setup(common)?;
    let mut trainer = match ckpt {
        Some(p) => Trainer::load(p)?,
        None => {
            let mut cfg = s.config.train.clone();
            cfg.rng_seed = s.seed;
            Trainer::new(GrfModel::new(s.config.model.clone(), s.seed)?, cfg)?
        }
    };
    if let Some(e) = epochs {
        trainer.config.epochs = e;
    }
    let (_, data) = graphs(dataset, trainer.model.spec(), None)?;
    let every = trainer.config.checkpoint_every;
    let out = s.out.clone();
    trainer.train(&data, |t| {
        let nll = grf::train::epoch_mean_nll(&t.history);
        eprintln!(
            "epoch {} mean nll {:.6}",
            t.epochs_completed,
            nll.last().copied().unwrap_or(f64::NAN)
        );
        if every > 0 && t.epochs_completed % every == 0 {
            t.save(&out.join(format!("checkpoint_epoch{:04}.json", t.epochs_completed)))?;
        }
        Ok(())
    })?;

    let mut w = csv::Writer::from_path(s.out.join("loss_history.csv"))?;
    for row in &trainer.history {
        w.serialize(row)?;
    }
    w.flush()?;
    trainer.model.save(&s.out.join("model.json"))?;
    trainer.save(&s.out.join("trainer.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct SampleSummary {
    temperature_x: f64,
    temperature_a: f64,
    truncate: bool,
    seed: u64,
    #[serde(flatten)]
    metrics: grf::chem::MetricsReport,
}

fn sample(
    common: &Common,
    ckpt: &Path,
    count: usize,
    tx: f64,
    ta: f64,
    truncate: bool,
    dataset: Option<&Path>,
) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let s = setup(common)?;
    let model = GrfModel::load(ckpt)?;
    let spec = model.spec().clone();
    let training = match dataset {
        Some(p) => canonical_set(&load_dataset(p)?),
        None => Default::default(),
    };
    let samples = generate(&model, count, tx, ta, truncate, &s.config.inversion, s.seed)?;
    let mols: Vec<Molecule> = samples.iter().map(|g| g.to_molecule(&spec)).collect();
    let metrics = compute_metrics(&mols, &training, None, &s.table)?;

    let mut w = BufWriter::new(File::create(s.out.join("samples.smi"))?);
    for g in &samples {
        writeln!(
            w,
            "{}",
            smiles_of(g, &spec, &s.table).unwrap_or_else(|| "invalid".into())
        )?;
    }
    w.flush()?;
    write_json(
        &s.out.join("metrics.json"),
        &SampleSummary {
            temperature_x: tx,
            temperature_a: ta,
            truncate,
            seed: s.seed,
            metrics,
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReconstructionRow {
    iterations: usize,
    molecules: usize,
    mean_normalized_l2: f64,
    reconstruction_rate: f64,
}

fn reconstruct(
    common: &Common,
    ckpt: &Path,
    dataset: &Path,
    iterations: &[usize],
    count: usize,
) -> Result<(), CliError> {
    if iterations.is_empty() {
        return Err(CliError::Usage(
            "--iterations needs at least one value".into(),
        ));
    }
    let s = setup(common)?;
    let model = GrfModel::load(ckpt)?;
    let (_, data) = graphs(dataset, model.spec(), Some(count))?;
    if data.is_empty() {
        return Err(grf::Error::Empty("reconstruction dataset").into());
    }
    let per_mol = data
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let (dq, z) = encode(&model, g, derive_seed(s.seed, i as u64))?;
            iterations
                .iter()
                .map(|&n| {
                    let back = invert_flow(&model, &z, &InversionConfig::fixed(n))?;
                    Ok((
                        reconstruction_error(&dq, &back),
                        quantize(&back.adjacency_c, &back.features_c) == *g,
                    ))
                })
                .collect::<grf::Result<Vec<_>>>()
        })
        .collect::<grf::Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(s.out.join("reconstruction.csv"))?;
    for (k, &n) in iterations.iter().enumerate() {
        let err: f64 = per_mol.iter().map(|r| r[k].0).sum::<f64>() / data.len() as f64;
        let exact = per_mol.iter().filter(|r| r[k].1).count();
        w.serialize(ReconstructionRow {
            iterations: n,
            molecules: data.len(),
            mean_normalized_l2: err,
            reconstruction_rate: exact as f64 / data.len() as f64,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceRecord {
    index: usize,
    smiles: String,
    total_logp: f64,
    prior_logp: f64,
    logdet_total: f64,
    adjacency_logdets: Vec<f64>,
    feature_logdets: Vec<f64>,
}

#[derive(Serialize)]
struct EvalSummary {
    molecules: usize,
    method: &'static str,
    mean_nll: f64,
    mean_nll_per_dim: f64,
    seed: u64,
}

fn eval(
    common: &Common,
    ckpt: &Path,
    dataset: &Path,
    count: usize,
    exact: bool,
) -> Result<(), CliError> {
    let s = setup(common)?;
    let model = GrfModel::load(ckpt)?;
    let (mols, data) = graphs(dataset, model.spec(), Some(count))?;
    if data.is_empty() {
        return Err(grf::Error::Empty("evaluation dataset").into());
    }
    let method = if exact {
        LogDetMethod::Exact
    } else {
        LogDetMethod::Series(LogDetConfig {
            rng_seed: s.seed,
            ..LogDetConfig::evaluation()
        })
    };
    let traces = data
        .par_iter()
        .enumerate()
        .map(|(i, g)| full_logp_with(&model, g, &method, derive_seed(s.seed, i as u64)))
        .collect::<grf::Result<Vec<_>>>()?;
    let records: Vec<TraceRecord> = traces
        .iter()
        .zip(&mols)
        .enumerate()
        .map(|(i, (t, m))| TraceRecord {
            index: i,
            smiles: canonical_smiles(m).unwrap_or_default(),
            total_logp: t.total_logp,
            prior_logp: t.prior_logp,
            logdet_total: t.logdet_total(),
            adjacency_logdets: t.adjacency_logdets.clone(),
            feature_logdets: t.feature_logdets.clone(),
        })
        .collect();
    write_jsonl(&s.out.join("traces.jsonl"), &records)?;
    let mean_nll = -traces.iter().map(|t| t.total_logp).sum::<f64>() / traces.len() as f64;
    let summary = EvalSummary {
        molecules: traces.len(),
        method: if exact { "exact" } else { "series" },
        mean_nll,
        mean_nll_per_dim: mean_nll / model.spec().latent_dim() as f64,
        seed: s.seed,
    };
    write_json(&s.out.join("eval.json"), &summary)?;
    println!(
        "mean nll {:.6} over {} molecules",
        summary.mean_nll, summary.molecules
    );
    Ok(())
}

#[derive(Serialize)]
struct GridRecord {
    row: usize,
    col: usize,
    offset: [f64; 2],
    smiles: Option<String>,
}

fn grid(
    common: &Common,
    ckpt: &Path,
    dataset: &Path,
    size: usize,
    step: f64,
) -> Result<(), CliError> {
    let s = setup(common)?;
    let model = GrfModel::load(ckpt)?;
    let (_, data) = graphs(dataset, model.spec(), None)?;
    let g = latent_grid(&model, &data, size, step, &s.config.inversion, s.seed)?;
    let records: Vec<GridRecord> = g
        .cells
        .iter()
        .map(|c| GridRecord {
            row: c.row,
            col: c.col,
            offset: c.offset,
            smiles: smiles_of(&c.graph, model.spec(), &s.table),
        })
        .collect();
    write_jsonl(&s.out.join("latent_grid.jsonl"), &records)?;
    println!(
        "query molecule {} ({}), axis variances {:.6e} {:.6e}",
        g.query,
        smiles_of(&data[g.query], model.spec(), &s.table).unwrap_or_else(|| "invalid".into()),
        g.plane.variances[0],
        g.plane.variances[1]
    );
    Ok(())
}

fn selfcheck(common: &Common, instances: usize, inject_over_budget: bool) -> Result<(), CliError> {
    let s = setup(common)?;
    let cfg = SelfcheckConfig {
        seed: s.seed,
        product_norm_instances: instances,
        spectrum_instances: instances,
        lipschitz_instances: instances,
        inject_over_budget,
        ..SelfcheckConfig::default()
    };
    let report = run_selfcheck(&cfg);
    let text = report.render();
    print!("{text}");
    fs::write(s.out.join("selfcheck.txt"), &text)?;
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .suites
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.as_str())
            .collect();
        Err(CliError::CheckFailed(format!(
            "failed suites: {}",
            failed.join(", ")
        )))
    }
}
