//! Command implementations behind the `stereo-consistency` binary.
//!
//! Layout under the output directory:
//! `data/{train,test}/` (gen-data), `checkpoint.bin`, `train_log.jsonl`,
//! `config.toml`, `provenance.json` (train), `metrics.csv`, `summary.csv`
//! (eval), `diagnose/` and `plot/`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Ablation, ExperimentConfig};
use crate::data::manifest::{load_split, write_sample, Manifest};
use crate::error::{Error, Result};
use crate::experiment::{self, Split, SummaryRow};
use crate::metrics::CSV_HEADER;
use crate::autodiff::Tape;
use crate::net::{self, Checkpoint, ParamVars};
use crate::params::ParamSet;
use crate::ssw;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const CORPUS_FILE: &str = "corpus.json";

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::HashMismatch { .. } => 4,
        Error::Config(_) | Error::InvalidArgument(_) | Error::StyleOutOfRange { .. } => 2,
        _ => 3,
    }
}

/// Parses `baseline`, `C`, `C+M`, `W`, `C+M+W`, ... (order-insensitive).
pub fn parse_ablation(label: &str) -> Result<Ablation> {
    let mut a = Ablation {
        contrastive: false,
        momentum: false,
        whitening: false,
    };
    if label.eq_ignore_ascii_case("baseline") || label.eq_ignore_ascii_case("none") {
        return Ok(a);
    }
    for part in label.split('+') {
        match part.trim().to_ascii_uppercase().as_str() {
            "C" => a.contrastive = true,
            "M" => a.momentum = true,
            "W" => a.whitening = true,
            other => return Err(Error::Config(format!("unknown ablation component `{other}` in `{label}`"))),
        }
    }
    if a.momentum && !a.contrastive {
        return Err(Error::Config("the momentum encoder (M) needs the contrastive loss (C)".into()));
    }
    Ok(a)
}

/// A resolved configuration plus the trail of where its values came from.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub provenance: Vec<String>,
    /// Corpus location; `<output_dir>/data` unless given explicitly.
    pub data_dir: PathBuf,
}

/// Config file (or defaults) → output-root env → `--output` → `--set` →
/// `--ablation`, validated at the end.
pub fn resolve_config(
    path: Option<&Path>,
    output: Option<&Path>,
    data_dir: Option<&Path>,
    overrides: &[String],
    ablation: Option<&str>,
) -> Result<Resolved> {
    let mut provenance = Vec::new();
    let mut cfg = match path {
        Some(p) => {
            provenance.push(format!("file:{}", p.display()));
            ExperimentConfig::load(p)?
        }
        None => {
            provenance.push("defaults".into());
            ExperimentConfig::default()
        }
    };
    if let Some(root) = std::env::var_os(crate::config::OUTPUT_ROOT_ENV) {
        provenance.push(format!("env:{}={}", crate::config::OUTPUT_ROOT_ENV, Path::new(&root).display()));
        cfg = cfg.with_env_output();
    }
    if let Some(o) = output {
        provenance.push(format!("flag:--output={}", o.display()));
        cfg.output_dir = o.to_path_buf();
    }
    for o in overrides {
        cfg.apply_override(o)?;
        provenance.push(format!("flag:--set {o}"));
    }
    if let Some(label) = ablation {
        cfg.set_ablation(parse_ablation(label)?);
        provenance.push(format!("flag:--ablation {label}"));
    }
    cfg.validate()?;
    let data_dir = match data_dir {
        Some(d) => {
            provenance.push(format!("flag:--data-dir={}", d.display()));
            d.to_path_buf()
        }
        None => cfg.output_dir.join("data"),
    };
    Ok(Resolved {
        cfg,
        provenance,
        data_dir,
    })
}

impl Resolved {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let data_dir = cfg.output_dir.join("data");
        Self {
            cfg,
            provenance: vec!["api".into()],
            data_dir,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

/// Identity of the on-disk corpus: everything in the config that shapes it.
pub fn corpus_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_vec(&(cfg.seed, &cfg.data)).expect("serializable");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CorpusInfo {
    corpus_hash: String,
    seed: u64,
    version: String,
    train: usize,
    test: usize,
}

/// Writes both splits (training split already in the training style).
pub fn cmd_gen_data(r: &Resolved) -> Result<PathBuf> {
    let cfg = &r.cfg;
    let root = r.data_dir.clone();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.name());
        let samples = experiment::generate_split(cfg, split)?;
        let entries = samples.iter().map(|s| write_sample(&dir, s)).collect::<Result<Vec<_>>>()?;
        Manifest { entries }.write(&dir)?;
    }
    let info = CorpusInfo {
        corpus_hash: corpus_hash(cfg),
        seed: cfg.seed,
        version: VERSION.into(),
        train: cfg.data.train_scenes,
        test: cfg.data.test_scenes,
    };
    write_file(&root.join(CORPUS_FILE), to_json(&info).as_bytes())?;
    Ok(root)
}

/// Loads a split written by [`cmd_gen_data`], refusing corpora generated
/// from a different data configuration.
pub fn load_corpus(r: &Resolved, split: Split) -> Result<Vec<crate::data::StereoSample>> {
    let cfg = &r.cfg;
    let root = &r.data_dir;
    let info_path = root.join(CORPUS_FILE);
    let text = std::fs::read_to_string(&info_path)
        .map_err(|_| Error::Data(format!("missing corpus at {} (run gen-data first)", root.display())))?;
    let info: CorpusInfo = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", info_path.display())))?;
    if info.corpus_hash != corpus_hash(cfg) {
        return Err(Error::Data(format!(
            "corpus at {} was generated from a different data config ({} vs {}); rerun gen-data",
            root.display(),
            info.corpus_hash,
            corpus_hash(cfg)
        )));
    }
    load_split(&root.join(split.name()))
}

#[derive(Serialize)]
struct LogHeader<'a> {
    kind: &'static str,
    config_hash: String,
    seed: u64,
    version: &'static str,
    variant: String,
    provenance: &'a [String],
}

#[derive(Serialize)]
struct LogStep<'a> {
    kind: &'static str,
    #[serde(flatten)]
    record: &'a crate::train::StepRecord,
}

#[derive(Serialize)]
struct Provenance<'a> {
    config_hash: String,
    seed: u64,
    version: &'static str,
    sources: &'a [String],
}

/// Trains on the on-disk training split; writes checkpoint, log, the
/// effective config and its provenance.
pub fn cmd_train(r: &Resolved) -> Result<PathBuf> {
    let cfg = &r.cfg;
    let samples = load_corpus(r, Split::Train)?;
    let prepared = experiment::prepare(cfg, &samples)?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let prov = Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: VERSION,
        sources: &r.provenance,
    };
    write_file(&cfg.output_dir.join("provenance.json"), to_json(&prov).as_bytes())?;

    let log_path = cfg.output_dir.join(TRAIN_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut line = |text: String| -> Result<()> {
        writeln!(log, "{text}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))
    };
    line(to_json(&LogHeader {
        kind: "header",
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: VERSION,
        variant: experiment::variant_label(cfg),
        provenance: &r.provenance,
    }))?;
    let mut trainer = Trainer::new(cfg, prepared.len())?;
    trainer.run(&prepared, samples.first(), |rec| line(to_json(&LogStep { kind: "step", record: rec })))?;
    let ckpt_path = cfg.output_dir.join(CHECKPOINT_FILE);
    trainer.checkpoint().write(&ckpt_path)?;
    Ok(ckpt_path)
}

/// Reads a checkpoint and refuses it unless it was produced by `cfg`.
pub fn load_checkpoint(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
    if !path.exists() {
        return Err(Error::Data(format!("missing checkpoint {} (run train first)", path.display())));
    }
    let ckpt = Checkpoint::read(&path)?;
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::HashMismatch {
            checkpoint: ckpt.config_hash,
            config: cfg.hash(),
        });
    }
    Ok(ckpt)
}

/// Per-sample and per-style metrics on the held-out split under every
/// evaluation style.
pub fn cmd_eval(r: &Resolved, checkpoint: Option<&Path>) -> Result<Vec<SummaryRow>> {
    let cfg = &r.cfg;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let test = load_corpus(r, Split::Test)?;
    let evals = experiment::evaluate(cfg, &ckpt.query, &test)?;

    let mut text = format!("# config_hash={} seed={} version={VERSION}\n{CSV_HEADER}\n", cfg.hash(), cfg.seed);
    for e in &evals {
        for row in e.samples.iter().chain(std::iter::once(&e.aggregate)) {
            text.push_str(&row.csv_row());
            text.push('\n');
        }
    }
    write_file(&cfg.output_dir.join("metrics.csv"), text.as_bytes())?;

    let rows = experiment::summary_rows(cfg, &evals);
    write_csv(&cfg.output_dir.join("summary.csv"), &rows)?;
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    write_file(path, &bytes)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Minimal `.npy` (version 1.0, little-endian f64, C order).
pub fn npy_bytes(shape: &[usize], data: &[f64]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_txt = if dims.len() == 1 { format!("({},)", dims[0]) } else { format!("({})", dims.join(", ")) };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_txt}, }}");
    // Magic (6) + version (2) + length (2) + header must be a multiple of 64.
    let pad = 64 - (10 + header.len() + 1) % 64;
    header.push_str(&" ".repeat(pad % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 8 * data.len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Instance-normalized activations `(stage, X̂)` of one image.
pub fn normalized_stages(image: &crate::grid::Image, params: &ParamSet, cfg: &net::NetworkConfig) -> Result<Vec<(usize, Tensor)>> {
    let mut tape = Tape::new();
    let pv = ParamVars::new(&mut tape, params, false)?;
    let x = tape.constant(net::normalize_image(image));
    let out = net::encode(&mut tape, &pv, x, cfg)?;
    Ok(out.normalized.iter().map(|&(s, v)| (s, tape.value(v).clone())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub variant: String,
    pub style: String,
    pub mean_cosine: Option<f64>,
    pub mean_cosine_unmasked: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRow {
    pub config_hash: String,
    pub variant: String,
    pub style: String,
    pub channel: usize,
    pub mean_abs_diff: f64,
}

pub struct Diagnosis {
    pub cosine: Vec<CosineRow>,
    pub channels: Vec<ChannelRow>,
    /// `(stage, V, mask)` for every whitened stage.
    pub variance: Vec<(usize, Tensor, ssw::ChannelMask)>,
}

/// Cosine consistency by style, per-channel inconsistency vectors, and the
/// left/right covariance-variance matrix with its selective mask.
pub fn cmd_diagnose(r: &Resolved, checkpoint: Option<&Path>) -> Result<Diagnosis> {
    let cfg = &r.cfg;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    if !cfg.net.uses_encoder() {
        return Err(Error::Config("diagnose needs a feature encoder (volume_kind = rgb has none)".into()));
    }
    let test = load_corpus(r, Split::Test)?;
    let evals = experiment::evaluate(cfg, &ckpt.query, &test)?;
    let hash = cfg.hash();
    let variant = experiment::variant_label(cfg);
    let cosine: Vec<CosineRow> = evals
        .iter()
        .map(|e| CosineRow {
            config_hash: hash.clone(),
            seed: cfg.seed,
            version: VERSION.into(),
            variant: variant.clone(),
            style: e.style.clone(),
            mean_cosine: e.aggregate.mean_cosine,
            mean_cosine_unmasked: e.aggregate.mean_cosine_unmasked,
        })
        .collect();
    let channels: Vec<ChannelRow> = evals
        .iter()
        .flat_map(|e| {
            e.aggregate.per_channel_abs_diff.iter().enumerate().map(|(channel, &v)| ChannelRow {
                config_hash: hash.clone(),
                variant: variant.clone(),
                style: e.style.clone(),
                channel,
                mean_abs_diff: v,
            })
        })
        .collect();

    // V over the training corpus, for every instance-normalized stage.
    let train = load_corpus(r, Split::Train)?;
    let mut covs: BTreeMap<usize, (Vec<Tensor>, Vec<Tensor>)> = BTreeMap::new();
    for s in &train {
        let l = normalized_stages(&s.left, &ckpt.query, &cfg.net)?;
        let r = normalized_stages(&s.right, &ckpt.query, &cfg.net)?;
        for ((stage, xl), (_, xr)) in l.iter().zip(&r) {
            let e = covs.entry(*stage).or_default();
            e.0.push(ssw::covariance(xl)?);
            e.1.push(ssw::covariance(xr)?);
        }
    }
    let variance = covs
        .into_iter()
        .map(|(stage, (l, r))| {
            let v = ssw::variance_matrix(&l, &r)?;
            let mask = ssw::select_mask(&v, cfg.ssw.params.clusters)?;
            Ok((stage, v, mask))
        })
        .collect::<Result<Vec<_>>>()?;

    let dir = cfg.output_dir.join("diagnose");
    write_csv(&dir.join("cosine_by_style.csv"), &cosine)?;
    write_csv(&dir.join("per_channel.csv"), &channels)?;
    for (stage, v, mask) in &variance {
        write_file(&dir.join(format!("variance_stage{stage}.npy")), &npy_bytes(v.shape(), v.data()))?;
        let c = v.dim(0);
        let m: Vec<f64> = (0..c * c).map(|i| mask.get(i / c, i % c) as u8 as f64).collect();
        write_file(&dir.join(format!("mask_stage{stage}.npy")), &npy_bytes(&[c, c], &m))?;
    }
    Ok(Diagnosis {
        cosine,
        channels,
        variance,
    })
}

/// Consistency against momentum for the contrastive runs: one row per
/// momentum value, mean cosine per style averaged over runs (seeds).
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumTable {
    pub styles: Vec<String>,
    /// `(momentum, runs, cosine per style)`.
    pub rows: Vec<(f64, usize, Vec<Option<f64>>)>,
}

pub fn momentum_table(rows: &[SummaryRow]) -> MomentumTable {
    let mut styles: Vec<String> = Vec::new();
    for r in rows {
        if !styles.contains(&r.style) {
            styles.push(r.style.clone());
        }
    }
    let mut groups: BTreeMap<u64, Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.variant.starts_with('C')) {
        groups.entry(r.momentum.to_bits()).or_default().push(r);
    }
    let mut out: Vec<(f64, usize, Vec<Option<f64>>)> = groups
        .into_values()
        .map(|g| {
            let runs = g.iter().map(|r| (&r.config_hash, r.seed)).collect::<std::collections::BTreeSet<_>>().len();
            let per_style = styles
                .iter()
                .map(|s| {
                    let vals: Vec<f64> = g.iter().filter(|r| &r.style == s).filter_map(|r| r.mean_cosine).collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            (g[0].momentum, runs, per_style)
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    MomentumTable { styles, rows: out }
}

/// Mean >3px error and D1 by (variant, volume kind, style).
pub fn error_table(rows: &[SummaryRow]) -> Vec<(String, String, String, usize, f64, f64)> {
    let mut groups: BTreeMap<(String, String, String), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.variant.clone(), r.volume_kind.clone(), r.style.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((v, k, s), g)| {
            let n = g.len() as f64;
            let e3 = g.iter().map(|r| r.err_gt_3px).sum::<f64>() / n;
            let d1 = g.iter().map(|r| r.d1_all).sum::<f64>() / n;
            (v, k, s, g.len(), e3, d1)
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Plot-ready tables from eval summaries and diagnose channel files.
pub fn cmd_plot(summaries: &[PathBuf], channels: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for p in summaries {
        rows.extend(read_csv::<SummaryRow>(p)?);
    }
    let mut written = Vec::new();
    if !rows.is_empty() {
        let table = momentum_table(&rows);
        let mut text = format!("momentum,runs,{}\n", table.styles.join(","));
        for (m, runs, vals) in &table.rows {
            let cells: Vec<String> = vals.iter().map(|v| fmt_opt(*v)).collect();
            text.push_str(&format!("{m},{runs},{}\n", cells.join(",")));
        }
        let path = out.join("momentum_consistency.csv");
        write_file(&path, text.as_bytes())?;
        written.push(path);

        let mut text = String::from("variant,volume_kind,style,runs,err_gt_3px,d1_all\n");
        for (v, k, s, n, e3, d1) in error_table(&rows) {
            text.push_str(&format!("{v},{k},{s},{n},{e3:.6},{d1:.6}\n"));
        }
        let path = out.join("error_vs_style.csv");
        write_file(&path, text.as_bytes())?;
        written.push(path);
    }
    if !channels.is_empty() {
        let mut bars: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
        for p in channels {
            for r in read_csv::<ChannelRow>(p)? {
                bars.entry((r.variant, r.style, r.channel)).or_default().push(r.mean_abs_diff);
            }
        }
        let mut text = String::from("variant,style,channel,mean_abs_diff\n");
        for ((v, s, c), vals) in bars {
            text.push_str(&format!("{v},{s},{c},{:.9}\n", vals.iter().sum::<f64>() / vals.len() as f64));
        }
        let path = out.join("per_channel_bars.csv");
        write_file(&path, text.as_bytes())?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::InvalidArgument("plot needs at least one --summary or --channels file".into()));
    }
    Ok(written)
}

/// Rows of a metrics CSV written by [`cmd_eval`] (comment line skipped).
pub fn read_metrics_csv(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.starts_with('#')).skip(1).map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_labels_round_trip() {
        for label in ["baseline", "C", "C+M", "W", "C+W", "C+M+W"] {
            let mut cfg = ExperimentConfig::default();
            cfg.set_ablation(parse_ablation(label).unwrap());
            assert_eq!(experiment::variant_label(&cfg), label);
        }
        assert!(parse_ablation("M").is_err());
        assert!(parse_ablation("X").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        let e = Error::HashMismatch {
            checkpoint: "a".into(),
            config: "b".into(),
        };
        assert_eq!(exit_code(&e), 4);
    }

    #[test]
    fn npy_header_is_aligned() {
        let b = npy_bytes(&[2, 3], &[0.0; 6]);
        let hlen = u16::from_le_bytes([b[8], b[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(b.len(), 10 + hlen + 48);
        assert_eq!(b[10 + hlen - 1], b'\n');
    }

    fn row(variant: &str, m: f64, style: &str, cos: f64, seed: u64) -> SummaryRow {
        SummaryRow {
            config_hash: format!("{variant}{m}{seed}"),
            seed,
            variant: variant.into(),
            momentum: m,
            volume_kind: "correlation".into(),
            style: style.into(),
            mean_cosine: Some(cos),
            mean_cosine_unmasked: Some(cos),
            err_gt_1px: 0.0,
            err_gt_2px: 0.0,
            err_gt_3px: 10.0,
            d1_all: 5.0,
            pixel_count: 1,
            version: VERSION.into(),
        }
    }

    #[test]
    fn momentum_table_has_one_row_per_value() {
        let mut rows = Vec::new();
        for (seed, bump) in [(0, 0.0), (1, 0.1)] {
            for m in [0.0, 0.9, 0.999, 0.9999] {
                let v = if m == 0.0 { "C" } else { "C+M" };
                rows.push(row(v, m, "in-style", 0.5 + bump, seed));
                rows.push(row(v, m, "shifted", 0.4 + bump, seed));
            }
        }
        rows.push(row("baseline", 0.0, "shifted", 0.1, 0));
        let t = momentum_table(&rows);
        assert_eq!(t.styles, vec!["in-style", "shifted"]);
        assert_eq!(t.rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0.0, 0.9, 0.999, 0.9999]);
        for (_, runs, vals) in &t.rows {
            assert_eq!(*runs, 2);
            assert!((vals[1].unwrap() - 0.45).abs() < 1e-12);
        }
    }
}
