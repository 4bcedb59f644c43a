//! Command-line front end.
//!
//! Every subcommand reads and writes the crate's binary artifacts; logs go
//! to standard error and results only to files. The effective parameters of
//! each run are echoed into its output: the `.csrg` metadata, the `.ckpt`
//! config block, a `<file>.meta` sidecar for `.fmat` and ranking outputs,
//! and the `config` field of metric reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::anchors::{augment_features, AnchorModel, DEFAULT_ANCHORS, DEFAULT_SUPPORT};
use crate::dataio::{
    content_hash, generate_toy, hex, read_ckpt, read_csrg, read_fmat, write_ckpt, write_csrg, write_fmat,
    Checkpoint, FeatureMatrix, GraphFile,
};
use crate::diffusion::{self, DEFAULT_ALPHA, DEFAULT_TPG_STEPS};
use crate::error::{Error, Result};
use crate::graph::{build_mutual_knn, AffinityGraph, SimilarityMetric};
use crate::metrics::{bullseye_report, map_report, GroundTruth};
use crate::model::{embed, ModelParams};
use crate::retrieval::{qfe_iterate, read_rankings_csv, retrieve, write_rankings_csv, write_rankings_jsonl, Ranking};
use crate::training::{TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "gradnet", version, about = "Manifold-aware retrieval with graph diffusion networks")]
pub struct Cli {
    /// Worker threads for parallel kernels; 1 gives bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the 2-D "PAMI" point cloud.
    GenToy {
        #[arg(long, default_value_t = 375)]
        per_letter: usize,
        #[arg(long, default_value_t = crate::dataio::toy::DEFAULT_NOISE)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the mutual k-NN affinity graph of a feature file.
    BuildGraph {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 15)]
        k: usize,
        #[arg(long, default_value = "inv_euclidean")]
        metric: SimilarityMetric,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit k-means anchors and write the sparse codes.
    Anchors {
        #[arg(long)]
        features: PathBuf,
        /// Number of anchors.
        #[arg(long = "B", default_value_t = DEFAULT_ANCHORS)]
        b: usize,
        /// Anchors per code.
        #[arg(long = "c", default_value_t = DEFAULT_SUPPORT)]
        c: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// k-means iteration cap.
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Codes, as a `.csrg` file.
        #[arg(long)]
        out: PathBuf,
        /// Anchor features, as a `.fmat` file.
        #[arg(long)]
        anchors_out: Option<PathBuf>,
    },
    /// Rank with a classical diffusion baseline.
    Diffuse {
        #[arg(long)]
        graph: PathBuf,
        /// Comma-separated node indices.
        #[arg(long, value_delimiter = ',', required = true)]
        queries: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = DiffuseMode::Closed)]
        mode: DiffuseMode,
        /// Tensor-product iterations.
        #[arg(long = "T", default_value_t = DEFAULT_TPG_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = 1000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        topk: Option<usize>,
        /// Supplies node ids for the output.
        #[arg(long)]
        features: Option<PathBuf>,
        /// `.csv` or `.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides a config key, e.g. `--set epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training log (JSON lines); standard error when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute learned features for every graph node.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Anchor codes; defaults to the path recorded in the checkpoint.
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve for unseen queries via query feature expansion.
    Query {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Original database descriptors the checkpoint was trained on.
        #[arg(long)]
        features: PathBuf,
        /// Query descriptors (`.fmat`).
        #[arg(long)]
        query_file: PathBuf,
        #[arg(long, default_value_t = 10)]
        qfe_k: usize,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long, default_value_t = 100)]
        topk: usize,
        #[arg(long, default_value = "inv_euclidean")]
        metric: SimilarityMetric,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rankings.
    Eval {
        #[arg(long)]
        rankings: PathBuf,
        /// Labeled `.fmat`, or text: `query_id,instance_id[,junk]` lines for
        /// mAP, `instance_id,label` lines for bullseye.
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMetric::Map)]
        metric: EvalMetric,
        #[arg(long = "K", default_value_t = 20)]
        k: usize,
        /// Report (JSON).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiffuseMode {
    Iterate,
    Closed,
    Tpg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMetric {
    Map,
    Bullseye,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenToy {
            per_letter,
            noise,
            seed,
            out,
        } => {
            let x = generate_toy(per_letter, noise, seed)?;
            write_fmat(&x, &out)?;
            write_meta(
                &out,
                &[("per_letter", per_letter.to_string()), ("noise", noise.to_string()), ("seed", seed.to_string())],
            )?;
            info!("wrote {} points to {}", x.n(), out.display());
            Ok(())
        }
        Command::BuildGraph { features, k, metric, out } => {
            let x = read_fmat(&features)?;
            let g = build_mutual_knn(&x, k, metric)?;
            let mut file = g.to_file();
            file.meta = format!("{};features={}", file.meta, hex(&content_hash(&std::fs::read(&features)?)));
            write_csrg(&file, &out)?;
            info!("graph over {} nodes with {} edges", g.n(), g.edge_count());
            Ok(())
        }
        Command::Anchors {
            features,
            b,
            c,
            seed,
            iters,
            out,
            anchors_out,
        } => {
            let x = read_fmat(&features)?;
            let model = AnchorModel::fit(&x, b, c, seed, iters)?;
            let meta = format!("B={b};c={c};seed={seed};iters={iters}");
            write_csrg(&GraphFile::new(model.codes.clone(), meta), &out)?;
            if let Some(path) = anchors_out {
                let anchors = FeatureMatrix::with_index_ids(model.anchors.clone(), None)?;
                write_fmat(&anchors, &path)?;
                write_meta(&path, &[("B", b.to_string()), ("c", c.to_string()), ("seed", seed.to_string())])?;
            }
            Ok(())
        }
        Command::Diffuse {
            graph,
            queries,
            alpha,
            mode,
            steps,
            max_iters,
            tol,
            topk,
            features,
            out,
        } => {
            let ids = match &features {
                Some(p) => Some(read_fmat(p)?.ids().to_vec()),
                None => None,
            };
            let g = AffinityGraph::from_file(&read_csrg(&graph)?, ids)?;
            let rankings = diffuse(&g, &queries, alpha, mode, steps, max_iters, tol, topk)?;
            write_rankings(&rankings, &out)?;
            write_meta(
                &out,
                &[
                    ("mode", format!("{mode:?}").to_lowercase()),
                    ("alpha", alpha.to_string()),
                    ("T", steps.to_string()),
                    ("max_iters", max_iters.to_string()),
                    ("tol", tol.to_string()),
                ],
            )
        }
        Command::Train {
            config,
            overrides,
            resume,
            log,
            out,
        } => train(config.as_deref(), &overrides, resume.as_deref(), log.as_deref(), &out),
        Command::Embed {
            ckpt,
            features,
            graph,
            codes,
            out,
        } => {
            let ckpt = read_ckpt(&ckpt)?;
            let (x, hash) = read_features_hashed(&features)?;
            if hash != ckpt.feature_hash {
                return Err(Error::State(format!(
                    "{} does not match the features the checkpoint was trained on",
                    features.display()
                )));
            }
            let codes = codes.or_else(|| ckpt.config_value("codes").map(PathBuf::from));
            let x_aug = augmented(&x, codes.as_deref())?;
            let g = AffinityGraph::from_file(&read_csrg(&graph)?, Some(x.ids().to_vec()))?;
            let cfg = TrainConfig::from_pairs(&ckpt.config)?;
            let params = ModelParams::from_checkpoint(&ckpt, cfg.leaky_slope, cfg.dropout)?;
            let h = embed(x_aug.data(), g.transition(), &params)?;
            let (_, ids, labels) = x.into_parts();
            write_fmat(&FeatureMatrix::new(h, ids, labels)?, &out)?;
            let mut meta = ckpt.config.clone();
            meta.push(("checkpoint_features".into(), hex(&ckpt.feature_hash)));
            write_meta_pairs(&out, &meta)
        }
        Command::Query {
            ckpt,
            embeddings,
            features,
            query_file,
            qfe_k,
            rounds,
            topk,
            metric,
            out,
        } => {
            let ckpt = read_ckpt(&ckpt)?;
            let (x, hash) = read_features_hashed(&features)?;
            if hash != ckpt.feature_hash {
                return Err(Error::State(format!(
                    "{} does not match the features the checkpoint was trained on",
                    features.display()
                )));
            }
            let h = read_fmat(&embeddings)?;
            if h.n() != x.n() || h.ids() != x.ids() {
                return Err(Error::Data("embeddings and features list different instances".into()));
            }
            let queries = read_fmat(&query_file)?;
            let mut rankings = Vec::with_capacity(queries.n());
            for (qi, qid) in queries.ids().iter().enumerate() {
                let hq = qfe_iterate(queries.row(qi), &x, h.data(), qfe_k, metric, rounds)?;
                let mut r = retrieve(&hq, h.data(), topk)?.with_ids(h.ids());
                r.query_id = qid.clone();
                rankings.push(r);
            }
            write_rankings(&rankings, &out)?;
            write_meta(
                &out,
                &[
                    ("qfe_k", qfe_k.to_string()),
                    ("rounds", rounds.to_string()),
                    ("topk", topk.to_string()),
                    ("metric", metric.to_string()),
                ],
            )
        }
        Command::Eval {
            rankings,
            ground_truth,
            metric,
            k,
            out,
        } => {
            let ranks = read_rankings_csv(BufReader::new(open(&rankings)?))?;
            let mut report = match metric {
                EvalMetric::Map => map_report(&ranks, &load_ground_truth(&ground_truth, &ranks)?)?,
                EvalMetric::Bullseye => bullseye_report(&ranks, &load_labels(&ground_truth)?, k)?,
            };
            report.config = BTreeMap::from([
                ("rankings".to_string(), rankings.display().to_string()),
                ("ground_truth".to_string(), ground_truth.display().to_string()),
                ("metric".to_string(), format!("{metric:?}").to_lowercase()),
                ("K".to_string(), k.to_string()),
            ]);
            let mut w = BufWriter::new(create(&out)?);
            serde_json::to_writer_pretty(&mut w, &report).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w)?;
            w.flush()?;
            info!("{} = {:.4}", report.metric, report.aggregate);
            Ok(())
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn write_meta(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let owned: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    write_meta_pairs(path, &owned)
}

fn write_meta_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(create(&meta_path(path))?);
    for (k, v) in pairs {
        writeln!(w, "{k}={v}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_rankings(rankings: &[Ranking], out: &Path) -> Result<()> {
    let mut w = BufWriter::new(create(out)?);
    if out.extension().is_some_and(|e| e == "jsonl") {
        write_rankings_jsonl(rankings, &mut w)?;
    } else {
        write_rankings_csv(rankings, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_features_hashed(path: &Path) -> Result<(FeatureMatrix, [u8; 32])> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let x = crate::dataio::fmat::decode_fmat(&bytes)?;
    Ok((x, content_hash(&bytes)))
}

/// Features with the anchor codes appended, or unchanged without codes.
fn augmented(x: &FeatureMatrix, codes: Option<&Path>) -> Result<FeatureMatrix> {
    match codes {
        Some(p) => augment_features(x, &read_csrg(p)?.matrix),
        None => Ok(x.clone()),
    }
}

#[allow(clippy::too_many_arguments)]
fn diffuse(
    g: &AffinityGraph,
    queries: &[usize],
    alpha: f64,
    mode: DiffuseMode,
    steps: usize,
    max_iters: usize,
    tol: f64,
    topk: Option<usize>,
) -> Result<Vec<Ranking>> {
    if let Some(&q) = queries.iter().find(|&&q| q >= g.n()) {
        return Err(Error::param(format!("query {q} out of range for {} nodes", g.n())));
    }
    let tpg = match mode {
        DiffuseMode::Tpg => {
            let s = g.transition().to_dense().cast::<f64>();
            let a0 = g.affinity().to_dense().cast::<f64>();
            Some(diffusion::tpg_iterate(&s, &a0, steps)?)
        }
        _ => None,
    };
    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        let f = match mode {
            DiffuseMode::Iterate => {
                let f0 = diffusion::initial_state(g.n(), &[q])?;
                diffusion::random_walk_iterate(g.transition(), &f0, alpha, max_iters, tol)?.0
            }
            DiffuseMode::Closed => {
                let f0 = diffusion::initial_state(g.n(), &[q])?;
                diffusion::random_walk_closed(g.transition(), &f0, alpha)?
            }
            DiffuseMode::Tpg => tpg.as_ref().expect("computed above").row(q).to_vec(),
        };
        let mut r = diffusion::rank_from_state(&f, &[q]).with_ids(g.node_ids());
        r.query_id = g.node_ids()[q].clone();
        if let Some(k) = topk {
            r = r.truncate(k);
        }
        out.push(r);
    }
    Ok(out)
}

fn train(config: Option<&Path>, overrides: &[String], resume: Option<&Path>, log: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Param(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let features = cfg
        .features
        .clone()
        .ok_or_else(|| Error::Param("config must name a features file".into()))?;
    let graph_path = cfg
        .graph
        .clone()
        .ok_or_else(|| Error::Param("config must name a graph file".into()))?;
    let (x, hash) = read_features_hashed(Path::new(&features))?;
    let x_aug = augmented(&x, cfg.codes.as_deref().map(Path::new))?;
    let g = AffinityGraph::from_file(&read_csrg(&graph_path)?, Some(x.ids().to_vec()))?;

    let mut trainer = match resume {
        Some(p) => {
            let ckpt = read_ckpt(p)?;
            if ckpt.feature_hash != hash {
                return Err(Error::State("resume checkpoint was trained on different features".into()));
            }
            Trainer::resume(x_aug.data(), &g, cfg.clone(), &ckpt)?
        }
        None => Trainer::new(x_aug.data(), &g, cfg.clone())?,
    };

    let mut sink: Box<dyn Write> = match log {
        Some(p) => Box::new(BufWriter::new(create(p)?)),
        None => Box::new(std::io::stderr()),
    };
    let mut io_err = None;
    let mut log_line = |r: &crate::training::LogRecord| {
        let line = serde_json::to_string(r).expect("log records serialize");
        if let Err(e) = writeln!(sink, "{line}") {
            io_err.get_or_insert(e);
        }
    };
    let every = cfg.checkpoint_every;
    let mut periodic = |t: &Trainer<'_>| -> Result<()> {
        if every > 0 && t.epoch() % every == 0 && !t.is_done() {
            write_ckpt(&t.checkpoint(hash), suffixed(out, &format!("epoch{}", t.epoch())))?;
        }
        Ok(())
    };
    let result = trainer.run(&mut log_line, &mut periodic);
    drop(log_line);
    if let Err(e) = result {
        if matches!(e, Error::Numerical(_)) {
            let dump = suffixed(out, "failed");
            write_ckpt(&trainer.checkpoint(hash), &dump)?;
            log::error!("training state written to {}", dump.display());
        }
        return Err(e);
    }
    if let Some(e) = io_err {
        return Err(e.into());
    }
    sink.flush()?;
    let ckpt: Checkpoint = trainer.checkpoint(hash);
    write_ckpt(&ckpt, out)?;
    info!("trained {} epochs, checkpoint at {}", trainer.epoch(), out.display());
    Ok(())
}

/// `model.ckpt` → `model.<tag>.ckpt`
fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into());
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

fn load_labels(path: &Path) -> Result<HashMap<String, i64>> {
    if path.extension().is_some_and(|e| e == "fmat") {
        let x = read_fmat(path)?;
        let labels = x
            .labels()
            .ok_or_else(|| Error::Metric(format!("{} has no labels", path.display())))?;
        return Ok(x.ids().iter().cloned().zip(labels.iter().map(|&l| l as i64)).collect());
    }
    let mut out = HashMap::new();
    for (no, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Metric(format!("line {}: expected instance_id,label", no + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Metric(format!("line {}: bad label {label:?}", no + 1)))?;
        out.insert(id.trim().to_string(), label);
    }
    Ok(out)
}

/// Positives from shared labels (`.fmat`) or from explicit pair lines.
fn load_ground_truth(path: &Path, rankings: &[Ranking]) -> Result<HashMap<String, GroundTruth>> {
    if path.extension().is_some_and(|e| e == "fmat") {
        let labels = load_labels(path)?;
        let mut by_label: HashMap<i64, HashSet<String>> = HashMap::new();
        for (id, &l) in &labels {
            by_label.entry(l).or_default().insert(id.clone());
        }
        let mut out = HashMap::new();
        for r in rankings {
            let l = labels
                .get(&r.query_id)
                .ok_or_else(|| Error::Metric(format!("no label for query {:?}", r.query_id)))?;
            let mut positives = by_label[l].clone();
            positives.remove(&r.query_id);
            out.insert(
                r.query_id.clone(),
                GroundTruth {
                    positives,
                    junk: HashSet::from([r.query_id.clone()]),
                },
            );
        }
        return Ok(out);
    }
    let mut out: HashMap<String, GroundTruth> = HashMap::new();
    for (no, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let entry = out.entry(fields[0].to_string()).or_default();
        match fields.as_slice() {
            [_, id] | [_, id, "pos"] => entry.positives.insert(id.to_string()),
            [_, id, "junk"] => entry.junk.insert(id.to_string()),
            _ => return Err(Error::Metric(format!("line {}: expected query_id,instance_id[,junk]", no + 1))),
        };
    }
    Ok(out)
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        log::debug!("thread pool already configured: {e}");
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

