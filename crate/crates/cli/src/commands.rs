use std::io::{self, Write};

use log::info;
use mohn::data::{gen_clusters, write_csv};
use mohn::gradcheck::{self, GradCheckConfig, TOLERANCE};
use mohn::numeric::{l2_normalize, norm};
use mohn::trainer::{evaluate_knn, Checkpoint, DataSource, TrainConfig, TrainData, Trainer, METRICS_HEADER};

use crate::{EvalKnnArgs, Failure, GenDataArgs, GradCheckArgs, InspectArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn io_failure(e: io::Error) -> Failure {
    Failure { code: 3, message: format!("i/o failure: {e}") }
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let ds = gen_clusters(a.classes, a.per_class, a.dim, a.spread, a.seed)?;
    write_csv(&ds, &a.out)?;
    info!("wrote {} items ({} classes, dim {}) to {}", ds.len(), ds.class_count, a.dim, a.out.display());
    println!("items={}", ds.len());
    Ok(())
}

/// Sets `path` (dotted) in `table` to the TOML value `raw`; bare words that
/// do not parse as TOML are taken as strings.
fn set_dotted(table: &mut toml::Table, path: &str, raw: &str) -> Result<(), Failure> {
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Failure::usage(format!("bad key `{path}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Failure::usage(format!("`{p}` in `{path}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn build_config(a: &TrainArgs, base: Option<&TrainConfig>) -> Result<Option<TrainConfig>, Failure> {
    let mut table: toml::Table = match (&a.config, base) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(mohn::Error::MissingFile(path.clone()).into());
            }
            let text = std::fs::read_to_string(path).map_err(io_failure)?;
            text.parse().map_err(|e: toml::de::Error| Failure::usage(format!("invalid config: {}", e.message())))?
        }
        (None, Some(cfg)) => cfg.to_toml_string().parse().expect("serialized config parses"),
        (None, None) => return Err(Failure::usage("--config is required unless --resume is given")),
    };
    let mut flags: Vec<(&str, String)> = Vec::new();
    macro_rules! flag {
        ($field:ident) => {
            if let Some(v) = &a.$field {
                flags.push((stringify!($field), format!("{v:?}")));
            }
        };
    }
    flag!(learning_rate);
    flag!(sgd_momentum);
    flag!(weight_decay);
    flag!(epochs);
    flag!(batch_size);
    flag!(queue_capacity);
    flag!(momentum_coefficient);
    flag!(seed);
    flag!(eval_interval);
    flag!(checkpoint_interval);
    flag!(output_dir);
    for (k, v) in flags {
        set_dotted(&mut table, k, &v)?;
    }
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        set_dotted(&mut table, k.trim(), v.trim())?;
    }
    let text = toml::to_string(&table).map_err(|e| Failure::usage(e.to_string()))?;
    Ok(Some(TrainConfig::from_toml_str(&text)?))
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let cfg = if a.has_overrides() { build_config(&a, Some(&ckpt.config))? } else { None };
            info!("resuming from {} at step {}", path.display(), ckpt.step);
            Trainer::resume(ckpt, cfg)?
        }
        None => Trainer::new(build_config(&a, None)?.expect("config built"))?,
    };
    let cfg = &trainer.state().config;
    info!(
        "training {} epochs x {} steps (batch {}, queue {}, encoder {:?}) -> {}",
        cfg.epochs,
        trainer.steps_per_epoch(),
        cfg.batch_size,
        cfg.queue_capacity,
        cfg.encoder.layer_dims,
        cfg.output_dir.display()
    );
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if !a.quiet {
        writeln!(out, "{METRICS_HEADER}").map_err(io_failure)?;
    }
    let mut write_err = None;
    let outcome = trainer.run_with(|row| {
        if !a.quiet && write_err.is_none() {
            if let Err(e) = writeln!(out, "{}", row.to_csv_line()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_failure(e));
    }
    info!(
        "done: {} steps, metrics {}, checkpoint {}",
        outcome.steps,
        outcome.metrics_path.display(),
        outcome.final_checkpoint.display()
    );
    if let Some(acc) = outcome.last_knn {
        info!("final knn_top1 = {acc:.4}");
    }
    Ok(())
}

pub fn eval_knn(a: EvalKnnArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    cfg.data.path = Some(a.data.clone());
    cfg.data.source = if a.data.is_dir() {
        match cfg.data.source {
            DataSource::Cifar100 => DataSource::Cifar100,
            _ => DataSource::Cifar10,
        }
    } else {
        DataSource::Csv
    };
    let data = TrainData::prepare(&cfg)?;
    if data.test.is_empty() {
        return Err(Failure::usage("held-out split is empty; set data.test_fraction > 0"));
    }
    let mut knn = cfg.knn;
    if let Some(t) = a.tau {
        knn.temperature = t;
    }
    match a.k {
        Some(k) => {
            knn.neighbors = k;
            if k > data.train.len() {
                return Err(mohn::Error::KTooLarge { k, n: data.train.len() }.into());
            }
        }
        None => knn = knn.clamped_to(data.train.len()),
    }
    info!(
        "evaluating {} test items against {} train items, k = {}, tau = {}",
        data.test.len(),
        data.train.len(),
        knn.neighbors,
        knn.temperature
    );
    let acc = evaluate_knn(&ckpt.query, &data, &knn)?;
    println!("knn_top1={acc:.4}");
    Ok(())
}

pub fn grad_check(a: GradCheckArgs) -> CmdResult {
    let cfg = GradCheckConfig {
        seed: a.seed,
        dim: a.dim,
        batch: a.batch,
        queue: a.queue,
        activation: a.activation.into(),
        corrupt: a.corrupt_gradient,
        ..GradCheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    info!(
        "checked {} entries of a [{}, {}, {}] encoder; max abs error {:e}",
        report.checked,
        a.dim,
        2 * a.dim,
        a.dim,
        report.max_abs_error
    );
    println!("max_rel_error={:e}", report.max_rel_error);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::numeric(format!("max relative error {:e} exceeds {TOLERANCE:e}", report.max_rel_error)))
    }
}

pub fn inspect(a: InspectArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let bank = &ckpt.bank;
    let probe = match &a.probe {
        Some(text) => {
            let v = text
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::usage(format!("bad --probe: {e}")))?;
            if v.len() != bank.dim() {
                return Err(mohn::Error::DimensionMismatch { expected: bank.dim(), got: v.len() }.into());
            }
            l2_normalize(&v)?
        }
        None => {
            if a.probe_row >= bank.filled() {
                return Err(Failure::usage(format!(
                    "--probe-row {} outside the {} filled rows",
                    a.probe_row,
                    bank.filled()
                )));
            }
            bank.row(a.probe_row).to_vec()
        }
    };
    info!(
        "bank: capacity {}, dim {}, write_ptr {}, filled {}, step {}",
        bank.capacity(),
        bank.dim(),
        bank.write_ptr(),
        bank.filled(),
        ckpt.step
    );
    let sims = bank.similarities(&probe)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "row,norm,similarity").map_err(io_failure)?;
    for (i, (row, s)) in bank.active_rows().zip(sims).enumerate() {
        writeln!(out, "{i},{},{s}", norm(row)).map_err(io_failure)?;
    }
    Ok(())
}
