//! The four verbs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use flatvae::data::{
    csv_load, csv_save, mnist_load, pendulum_dataset, CsvOptions, Dataset, PendulumSpec,
    MNIST_TRAIN_FILES, MNIST_TRAIN_SPLIT,
};
use flatvae::nets::LatentDecoder;
use flatvae::riemann::{
    mean_smoothness, metric_statistics, random_pairs, ratio_table, smoothness, straight_line,
    AnalysisReport, BoundingBox, GeodesicGraph, GridField, GridSpec,
};
use flatvae::trainer::{derive_seed, init_model, Checkpoint, LogRecord, LogWriter, TrainState};
use flatvae::vhp::sample_prior;

use crate::config::{DataSource, RunConfig};
use crate::{AnalyzeArgs, Cli, CliError, Command, GenDataArgs, InterpolateArgs, TrainArgs};

const TAG_PRIOR: u64 = 10;
const TAG_GRAPH: u64 = 11;
const TAG_PAIRS: u64 = 12;

pub const CHECKPOINT_FILE: &str = "checkpoint.flatvae";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.json";

/// Latent coordinates given on the command line as `a,b,...`.
#[derive(Clone, Debug, PartialEq)]
pub struct Point(pub Vec<f64>);

pub fn parse_point(s: &str) -> Result<Point, String> {
    s.split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|e| format!("{c:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(Point)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let preset = match &cli.command {
        Command::Train(a) => a.preset.as_deref(),
        _ => None,
    };
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), preset)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    fs::create_dir_all(&cfg.out)?;
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Analyze(a) => analyze(cfg, a),
        Command::Interpolate(a) => interpolate(cfg, a),
    }
}

fn echo(cfg: &RunConfig, verb: &str) -> Result<(), CliError> {
    fs::write(cfg.out.join(format!("{verb}.config.toml")), cfg.to_toml())?;
    Ok(())
}

fn gen_data(mut cfg: RunConfig, args: GenDataArgs) -> Result<(), CliError> {
    if args.kind != "pendulum" {
        return Err(CliError::Usage(format!(
            "unknown generator {:?}; expected \"pendulum\"",
            args.kind
        )));
    }
    cfg.data.source = DataSource::Pendulum;
    cfg.data.path = None;
    if let Some(n) = args.count {
        cfg.data.count = n;
    }
    if let Some(s) = args.noise_std {
        cfg.data.noise_std = s;
    }
    let ds = load_dataset(&cfg)?;
    let path = cfg.out.join(&args.file);
    csv_save(&ds, &path, b',')?;
    echo(&cfg, "gen-data")?;
    println!("wrote {} samples to {}", ds.len(), path.display());
    Ok(())
}

/// Name of a trailing metadata column in the header of `path`, if any.
fn detect_metadata_column(path: &Path, delimiter: char) -> Result<Option<String>, CliError> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    let last = first.trim_end().rsplit(delimiter).next().unwrap_or("").trim();
    let is_data = last.parse::<f64>().is_ok()
        || (last.starts_with('x') && last.len() > 1 && last[1..].bytes().all(|b| b.is_ascii_digit()));
    Ok((!is_data && !last.is_empty()).then(|| last.to_string()))
}

fn load_csv(path: &Path, cfg: &RunConfig) -> Result<Dataset, CliError> {
    let delimiter = u8::try_from(cfg.data.delimiter)
        .map_err(|_| CliError::Usage("data.delimiter must be an ASCII character".into()))?;
    let metadata_column = match &cfg.data.metadata_column {
        Some(c) => Some(c.clone()),
        None => detect_metadata_column(path, cfg.data.delimiter)?,
    };
    Ok(csv_load(
        path,
        &CsvOptions {
            delimiter,
            metadata_column,
        },
    )?)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    match (d.source, &d.path) {
        (DataSource::Pendulum, None) => {
            if d.count == 0 {
                return Err(CliError::Usage("count must be at least 1".into()));
            }
            Ok(pendulum_dataset(&PendulumSpec {
                count: d.count,
                noise_std: d.noise_std,
                seed: cfg.seed,
            })?)
        }
        (DataSource::Pendulum | DataSource::Csv, Some(path)) => load_csv(path, cfg),
        (DataSource::Csv, None) => Err(CliError::Usage("data.source = \"csv\" needs data.path".into())),
        (DataSource::Mnist, Some(dir)) => {
            let ds = mnist_load(
                &dir.join(MNIST_TRAIN_FILES.0),
                &dir.join(MNIST_TRAIN_FILES.1),
                Some(d.threshold),
            )?;
            if ds.len() > MNIST_TRAIN_SPLIT {
                Ok(ds.split_at(MNIST_TRAIN_SPLIT)?.0)
            } else {
                Ok(ds)
            }
        }
        (DataSource::Mnist, None) => Err(CliError::Usage(
            "data.source = \"mnist\" needs data.path pointing at the IDX directory".into(),
        )),
    }
}

fn data_override(cfg: &mut RunConfig, path: Option<PathBuf>) {
    if let Some(p) = path {
        cfg.data.source = DataSource::Csv;
        cfg.data.path = Some(p);
    }
}

fn train(mut cfg: RunConfig, args: TrainArgs) -> Result<(), CliError> {
    data_override(&mut cfg, args.data);
    if let Some(s) = args.steps {
        cfg.train.max_steps = s;
    }
    if let Some(e) = args.eta {
        cfg.train.eta = e;
    }
    if let Some(b) = args.beta_init {
        cfg.train.beta_init = b;
    }
    if args.no_mixup {
        cfg.train.mixup_enabled = false;
    }
    if let Some(c) = args.fixed_c2 {
        cfg.train.fixed_c2 = Some(c);
    }
    cfg.train.validate()?;
    let dataset = load_dataset(&cfg)?;

    let log_path = cfg.out.join(LOG_FILE);
    let (mut model, mut state, config, mut log) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let config = flatvae::trainer::TrainConfig {
                max_steps: cfg.train.max_steps,
                ..ck.config
            };
            cfg.architecture = ck.model.arch.clone();
            cfg.train = config.clone();
            let file = OpenOptions::new().create(true).append(true).open(&log_path)?;
            let fresh = file.metadata()?.len() == 0;
            let w = BufWriter::new(file);
            let log = if fresh { LogWriter::new(w)? } else { LogWriter::append(w) };
            (ck.model, ck.state, config, log)
        }
        None => {
            let mut model = init_model(cfg.architecture.clone(), &cfg.train)?;
            let state = TrainState::new(&mut model, &cfg.train);
            let log = LogWriter::new(BufWriter::new(File::create(&log_path)?))?;
            (model, state, cfg.train.clone(), log)
        }
    };
    echo(&cfg, "train")?;

    let every = (config.max_steps / 20).max(1);
    let mut last: Option<LogRecord> = None;
    let result = flatvae::trainer::fit(&mut model, &dataset, &config, &mut state, |r| {
        log.write(r)?;
        if r.step % every == 0 {
            eprintln!(
                "step {:>7}  beta {:.3e}  c_hat {:.5}  C {:.5}  F {:.4}  R {:.4e}  c2 {:.4e}",
                r.step, r.beta, r.c_hat, r.constraint, r.kl_bound, r.flat_penalty, r.c_squared
            );
        }
        last = Some(r.clone());
        Ok(())
    });
    log.flush()?;
    // The state is only advanced by successful steps, so it is saved either way.
    let ck_path = cfg.out.join(CHECKPOINT_FILE);
    Checkpoint {
        config,
        model,
        state,
    }
    .save(&ck_path)?;
    result?;
    if let Some(r) = last {
        println!(
            "trained to step {}: beta {:.4e} c_hat {:.5} C {:.5} F {:.4} R {:.4e} c2 {:.4e}",
            r.step, r.beta, r.c_hat, r.constraint, r.kl_bound, r.flat_penalty, r.c_squared
        );
    }
    println!("checkpoint {}", ck_path.display());
    Ok(())
}

fn analyze(mut cfg: RunConfig, args: AnalyzeArgs) -> Result<(), CliError> {
    let a = &mut cfg.analysis;
    if let Some(v) = args.samples {
        a.samples = v;
    }
    if let Some(v) = args.pairs {
        a.pairs = v;
    }
    if let Some(v) = args.graph_nodes {
        a.graph_nodes = v;
    }
    if let Some(v) = args.graph_neighbours {
        a.graph_neighbours = v;
    }
    if let Some(v) = args.segments {
        a.segments = v;
    }
    if let Some(v) = args.grid {
        a.grid_resolution = v;
    }
    if !args.centres.is_empty() {
        a.centres = args.centres.into_iter().map(|p| p.0).collect();
    }
    let use_data = args.data.is_some();
    data_override(&mut cfg, args.data);
    echo(&cfg, "analyze")?;
    let a = &cfg.analysis;

    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = &ck.model;
    if a.grid_resolution > 0 && model.latent_dim() != 2 {
        return Err(flatvae::Error::UnsupportedDimension {
            expected: 2,
            found: model.latent_dim(),
        }
        .into());
    }
    let mut report = AnalysisReport::default();

    let prior_count = if use_data { a.samples } else { a.samples.max(2) };
    let prior = sample_prior(model, prior_count, derive_seed(cfg.seed, TAG_PRIOR))?;
    if a.samples > 0 {
        report.set_metric_statistics(metric_statistics(model, &prior.z, a.jacobian_step)?);
    }

    let points = if use_data {
        model.encode_mean(load_dataset(&cfg)?.samples())?
    } else {
        prior.z.clone()
    };
    let need_box = a.pairs > 0 || a.grid_resolution > 0;
    let bbox = if need_box {
        Some(BoundingBox::around(&points, a.margin)?)
    } else {
        None
    };

    if a.pairs > 0 {
        let bbox = bbox.as_ref().expect("box built for pairs");
        let graph = GeodesicGraph::build(
            model,
            bbox,
            a.graph_nodes,
            a.graph_neighbours,
            derive_seed(cfg.seed, TAG_GRAPH),
        )?;
        let pairs = random_pairs(&points, a.pairs, derive_seed(cfg.seed, TAG_PAIRS))?;
        let table = ratio_table(model, &graph, &pairs, a.segments)?;
        let smooth = smoothness(model, &pairs, a.segments)?;
        report.pairs = pairs.len();
        report.graph_nodes = a.graph_nodes;
        report.graph_neighbours = a.graph_neighbours;
        report.ratio_observation = Some(table.observation_stats);
        report.ratio_latent = Some(table.latent_stats);
        report.smoothness_mean = Some(mean_smoothness(&smooth));
        report.smoothness = smooth;
    }

    if a.grid_resolution > 0 {
        let bbox = bbox.as_ref().expect("box built for grid");
        let spec = GridSpec {
            resolution: a.grid_resolution,
            centres: a.centres.clone(),
            stencil_radius: a.stencil_radius,
            jacobian_step: a.jacobian_step,
        };
        let fields = flatvae::riemann::grid_fields(model, bbox, &spec)?;
        let write = |name: &str, f: &GridField| f.write_csv(&cfg.out.join(name));
        write("field_mf.csv", &fields.mf)?;
        write("field_speed_z1.csv", &fields.speed_z1)?;
        write("field_speed_z2.csv", &fields.speed_z2)?;
        for (i, d) in fields.distance.iter().enumerate() {
            write(&format!("field_distance_{i}.csv"), d)?;
        }
    }

    let path = cfg.out.join(REPORT_FILE);
    report.write_json(&path)?;
    if let (Some(c), Some(m)) = (&report.condition_summary, &report.normalised_mf_summary) {
        println!(
            "condition number median {:.4} (IQR {:.4}); normalised MF IQR {:.4}",
            c.median,
            c.iqr(),
            m.iqr()
        );
    }
    if let (Some(o), Some(l)) = (&report.ratio_observation, &report.ratio_latent) {
        println!(
            "ratio observation {:.3} ± {:.3}; latent {:.3} ± {:.3}; smoothness {:.4}",
            o.mean,
            o.std,
            l.mean,
            l.std,
            report.smoothness_mean.unwrap_or(f64::NAN)
        );
    }
    println!("report {}", path.display());
    Ok(())
}

fn interpolate(mut cfg: RunConfig, args: InterpolateArgs) -> Result<(), CliError> {
    data_override(&mut cfg, args.data.clone());
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = &ck.model;
    let nz = model.latent_dim();

    let encoded = match (args.from_index, args.to_index) {
        (None, None) => None,
        _ => {
            if args.data.is_none() && cfg.data.path.is_none() && cfg.data.source != DataSource::Pendulum {
                return Err(CliError::Usage("endpoint indices need --data".into()));
            }
            Some(load_dataset(&cfg)?)
        }
    };
    let endpoint = |point: &Option<Point>, index: Option<usize>, which: &str| -> Result<Vec<f64>, CliError> {
        match (point, index, &encoded) {
            (Some(Point(p)), None, _) => {
                if p.len() != nz {
                    return Err(CliError::Usage(format!(
                        "--{which} has {} coordinates, the latent space has {nz}",
                        p.len()
                    )));
                }
                Ok(p.clone())
            }
            (None, Some(i), Some(ds)) => {
                if i >= ds.len() {
                    return Err(CliError::Usage(format!(
                        "--{which}-index {i} is out of range for {} samples",
                        ds.len()
                    )));
                }
                Ok(model.encode_mean(&ds.batch(&[i]))?.row(0).to_vec())
            }
            (Some(_), Some(_), _) => Err(CliError::Usage(format!(
                "give either --{which} or --{which}-index, not both"
            ))),
            _ => Err(CliError::Usage(format!("missing --{which} or --{which}-index"))),
        }
    };
    let a = endpoint(&args.from, args.from_index, "from")?;
    let b = endpoint(&args.to, args.to_index, "to")?;
    if args.segments == 0 {
        return Err(CliError::Usage("--segments must be at least 1".into()));
    }
    let path = straight_line(&a, &b, args.segments)?;
    let decoded = model.decode(&path.as_tensor())?;

    let mut header: Vec<String> = vec!["t".into()];
    header.extend((1..=nz).map(|i| format!("z{i}")));
    header.extend((0..decoded.cols()).map(|j| format!("x{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..=args.segments).map(|k| {
        let mut r = vec![k as f64 / args.segments as f64];
        r.extend_from_slice(&path.waypoints[k]);
        r.extend_from_slice(decoded.row(k));
        r
    });
    let out = cfg.out.join(&args.file);
    flatvae::data::write_table(BufWriter::new(File::create(&out)?), &header, rows)?;
    echo(&cfg, "interpolate")?;
    println!("wrote {} waypoints to {}", args.segments + 1, out.display());
    Ok(())
}
