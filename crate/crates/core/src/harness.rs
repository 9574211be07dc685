//! Run configuration and the command implementations behind the CLI:
//! train, attack, transfer, analyze and dump-examples. Every command writes
//! its fully resolved configuration next to its outputs.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::attack::{self, AdversarialBatch, AttackConfig, AttackMethod};
use crate::checkpoint::{self, Provenance};
use crate::data::{self, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::nn::{build_mnist_net, Activation, ModelGraph};
use crate::optim::{self, PgdTrainConfig, TrainConfig};
use crate::report::{ReportRow, RobustnessReport, Threat};
use crate::risk;
use crate::tensor::Tensor;

/// Model variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Org,
    Bn,
    Adv,
    Tent,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "org" => Ok(Variant::Org),
            "bn" => Ok(Variant::Bn),
            "adv" => Ok(Variant::Adv),
            "tent" => Ok(Variant::Tent),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Org => "org",
            Variant::Bn => "bn",
            Variant::Adv => "adv",
            Variant::Tent => "tent",
        }
    }
}

/// Per-attack overrides on top of the documented defaults.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackOverride {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eps: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step_size: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub random_start: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overshoot: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confidence: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inner_lr: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub binary_search_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub initial_c: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inner_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau_shrink: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub outer_steps: Option<usize>,
}

impl AttackOverride {
    pub fn resolve(&self, seed: u64) -> Result<AttackConfig> {
        let method = AttackMethod::parse(&self.method)?;
        let mut cfg = AttackConfig::new(method);
        cfg.seed = seed;
        if let Some(v) = self.eps {
            cfg.eps = v;
        }
        if let Some(v) = self.step_size {
            cfg.step_size = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = self.random_start {
            cfg.random_start = v;
        }
        if let Some(v) = self.overshoot {
            cfg.overshoot = v;
        }
        if let Some(v) = self.confidence {
            cfg.confidence = v;
        }
        if let Some(v) = self.inner_lr {
            cfg.inner_lr = v;
        }
        if let Some(v) = self.binary_search_steps {
            cfg.binary_search_steps = v;
        }
        if let Some(v) = self.initial_c {
            cfg.initial_c = v;
        }
        if let Some(v) = self.inner_iterations {
            cfg.inner_iterations = v;
        }
        if let Some(v) = self.tau_shrink {
            cfg.tau_shrink = v;
        }
        if let Some(v) = self.outer_steps {
            cfg.outer_steps = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One run's configuration; JSON documents with unknown keys are rejected.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub variant: Variant,
    pub delta_weight_decay: f32,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Evaluation subset: the first n test samples; full test set when absent.
    pub subset: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Scaled-protocol knob: each epoch touches only the first n samples of
    /// the epoch's shuffled order.
    pub train_subset: Option<usize>,
    pub adversarial: Option<PgdTrainConfig>,
    /// Attacks to run; empty means all six with default constants.
    pub attacks: Vec<AttackOverride>,
    /// Model checkpoint consumed by attack/analyze/dump commands.
    pub checkpoint: Option<PathBuf>,
    /// Archive directory produced by `attack`, consumed by transfer/dump.
    pub archive_dir: Option<PathBuf>,
    /// Sample indices for dump-examples.
    pub indices: Vec<usize>,
    /// Additional checkpoints for the analyze comparison table.
    pub analyze_checkpoints: Vec<PathBuf>,
    /// Ball radius r in the known-space edge a = v + r.
    pub ball_radius: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            variant: Variant::Bn,
            delta_weight_decay: 0.0,
            seed: 0,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/out"),
            subset: None,
            epochs: 40,
            batch_size: 100,
            learning_rate: 0.001,
            train_subset: None,
            adversarial: None,
            attacks: Vec::new(),
            checkpoint: None,
            archive_dir: None,
            indices: Vec::new(),
            analyze_checkpoints: Vec::new(),
            ball_radius: 1.0,
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<RunConfig> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(out_dir.join("resolved_config.json"), json)?;
        Ok(())
    }

    fn resolved_attacks(&self) -> Result<Vec<AttackConfig>> {
        if self.attacks.is_empty() {
            Ok(AttackMethod::ALL
                .iter()
                .map(|m| {
                    let mut c = AttackConfig::new(*m);
                    c.seed = self.seed;
                    c
                })
                .collect())
        } else {
            self.attacks.iter().map(|o| o.resolve(self.seed)).collect()
        }
    }
}

/// Locate an MNIST file, accepting a .gz sibling.
fn data_file(dir: &Path, name: &str) -> Result<PathBuf> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Config(format!("missing dataset file {} (or .gz) in {}", name, dir.display())))
}

pub fn load_train_dataset(dir: &Path) -> Result<Dataset> {
    data::load_dataset(
        &data_file(dir, "train-images-idx3-ubyte")?,
        &data_file(dir, "train-labels-idx1-ubyte")?,
        SplitTag::Train,
    )
}

pub fn load_test_dataset(dir: &Path) -> Result<Dataset> {
    data::load_dataset(
        &data_file(dir, "t10k-images-idx3-ubyte")?,
        &data_file(dir, "t10k-labels-idx1-ubyte")?,
        SplitTag::Test,
    )
}

pub fn build_variant(variant: Variant) -> ModelGraph {
    match variant {
        Variant::Org => build_mnist_net(Activation::Relu, false),
        Variant::Bn | Variant::Adv => build_mnist_net(Activation::Relu, true),
        Variant::Tent => build_mnist_net(Activation::Tent, true),
    }
}

/// Row label in the reports, matching the weight-decay annotation style.
pub fn model_display_name(p: &Provenance) -> String {
    match p.variant.as_str() {
        "tent" => {
            if p.delta_weight_decay == 0.0 {
                "MNIST-Net tent (0)".to_string()
            } else {
                format!("MNIST-Net tent ({:.2})", p.delta_weight_decay)
            }
        }
        v => format!("MNIST-Net {v}"),
    }
}

/// Train the configured variant, select the best validation epoch, and write
/// the checkpoint plus metrics. Returns the checkpoint path.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.write_resolved(&cfg.out_dir)?;
    let full = load_train_dataset(&cfg.data_dir)?;
    let (train, val) = data::split_train_val(&full, cfg.seed)?;
    drop(full);

    let mut graph = build_variant(cfg.variant);
    graph.init_weights(cfg.seed);

    let adversarial = match cfg.variant {
        Variant::Adv => Some(cfg.adversarial.unwrap_or_default()),
        _ => cfg.adversarial,
    };
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        delta_weight_decay: if cfg.variant == Variant::Tent { cfg.delta_weight_decay } else { 0.0 },
        adversarial,
        seed: cfg.seed,
        learning_rate: cfg.learning_rate,
        train_subset: cfg.train_subset,
    };
    let outcome = optim::train_model(&mut graph, &train, &val, &train_cfg)?;

    let mut metrics = String::from("epoch,train_loss,train_acc,val_acc\n");
    let mut timing = String::from("epoch,wall_seconds\n");
    for m in &outcome.metrics {
        metrics.push_str(&format!("{},{:.6},{:.6},{:.6}\n", m.epoch, m.train_loss, m.train_acc, m.val_acc));
        timing.push_str(&format!("{},{:.3}\n", m.epoch, m.wall_seconds));
    }
    fs::write(cfg.out_dir.join("metrics.csv"), metrics)?;
    fs::write(cfg.out_dir.join("timing.csv"), timing)?;

    let provenance = Provenance {
        variant: cfg.variant.name().to_string(),
        seed: cfg.seed,
        delta_weight_decay: train_cfg.delta_weight_decay,
        epochs: cfg.epochs,
        best_epoch: outcome.best_epoch,
        adversarial: train_cfg.adversarial,
        train_subset: cfg.train_subset,
    };
    let path = cfg.out_dir.join("model.ckpt");
    checkpoint::save_checkpoint(&path, &graph, &provenance)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// adversarial-example archives

pub const ARCHIVE_MAGIC: [u8; 4] = *b"TADV";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ArchiveHeader {
    attack: AttackConfig,
    source_model: String,
    indices: Vec<u32>,
    labels: Vec<u8>,
    clean_pred: Vec<u32>,
    adv_pred: Vec<u32>,
    l2: Vec<f32>,
    linf: Vec<f32>,
    zero_grad: Vec<bool>,
    failed: Vec<bool>,
}

/// Stored adversarial examples with their bookkeeping, reloadable for
/// transfer evaluation and image dumps.
pub struct Archive {
    pub attack: AttackConfig,
    pub source_model: String,
    pub indices: Vec<u32>,
    pub labels: Vec<u8>,
    pub clean_pred: Vec<u32>,
    pub adv_pred: Vec<u32>,
    pub l2: Vec<f32>,
    pub linf: Vec<f32>,
    pub zero_grad: Vec<bool>,
    pub failed: Vec<bool>,
    pub perturbed: Tensor,
}

pub fn save_archive(
    path: &Path,
    batch: &AdversarialBatch,
    attack: &AttackConfig,
    source_model: &str,
    indices: &[usize],
) -> Result<()> {
    let header = ArchiveHeader {
        attack: attack.clone(),
        source_model: source_model.to_string(),
        indices: indices.iter().map(|&i| i as u32).collect(),
        labels: batch.labels.clone(),
        clean_pred: batch.clean_pred.iter().map(|&p| p as u32).collect(),
        adv_pred: batch.adv_pred.iter().map(|&p| p as u32).collect(),
        l2: batch.l2.clone(),
        linf: batch.linf.clone(),
        zero_grad: batch.zero_grad.clone(),
        failed: batch.failed.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    checkpoint::write_blob(&mut out, &batch.perturbed);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || bytes[..4] != ARCHIVE_MAGIC {
        return Err(Error::format(0, "bad archive magic, want \"TADV\""));
    }
    let mut cur = Cursor::new(&bytes[..]);
    cur.set_position(4);
    let mut b4 = [0u8; 4];
    std::io::Read::read_exact(&mut cur, &mut b4)
        .map_err(|_| Error::format(4, "truncated archive version"))?;
    let version = u32::from_le_bytes(b4);
    if version != ARCHIVE_VERSION {
        return Err(Error::format(4, format!("archive version {version}, want {ARCHIVE_VERSION}")));
    }
    std::io::Read::read_exact(&mut cur, &mut b4)
        .map_err(|_| Error::format(8, "truncated archive header length"))?;
    let header_len = u32::from_le_bytes(b4) as usize;
    let start = cur.position() as usize;
    if start + header_len > bytes.len() {
        return Err(Error::format(start as u64, "truncated archive header"));
    }
    let header: ArchiveHeader = serde_json::from_slice(&bytes[start..start + header_len])?;
    cur.set_position((start + header_len) as u64);
    let perturbed = checkpoint::read_blob(&mut cur)?;
    Ok(Archive {
        attack: header.attack,
        source_model: header.source_model,
        indices: header.indices,
        labels: header.labels,
        clean_pred: header.clean_pred,
        adv_pred: header.adv_pred,
        l2: header.l2,
        linf: header.linf,
        zero_grad: header.zero_grad,
        failed: header.failed,
        perturbed,
    })
}

fn samples_csv(batch: &AdversarialBatch, indices: &[usize]) -> String {
    let mut out = String::from("index,true_label,clean_pred,adv_pred,l2,linf\n");
    for i in 0..batch.len() {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            indices[i], batch.labels[i], batch.clean_pred[i], batch.adv_pred[i], batch.l2[i], batch.linf[i]
        ));
    }
    out
}

fn eval_subset(cfg: &RunConfig, test: &Dataset) -> Dataset {
    match cfg.subset {
        Some(n) => test.head(n),
        None => test.clone(),
    }
}

fn clean_accuracy(graph: &ModelGraph, set: &Dataset, batch_size: usize) -> Result<f64> {
    Ok(optim::evaluate_accuracy(graph, set, batch_size)? as f64)
}

/// Run the configured attacks against a checkpoint; writes the report table,
/// its CSV, one archive per attack and per-attack sample CSVs.
pub fn cmd_attack(cfg: &RunConfig) -> Result<RobustnessReport> {
    cfg.write_resolved(&cfg.out_dir)?;
    let ckpt_path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("attack requires a checkpoint path".into()))?;
    let (graph, provenance) = checkpoint::load_checkpoint(ckpt_path)?;
    let test = load_test_dataset(&cfg.data_dir)?;
    let set = eval_subset(cfg, &test);
    let indices: Vec<usize> = (0..set.len()).collect();

    let archive_dir = cfg.out_dir.join("archives");
    fs::create_dir_all(&archive_dir)?;

    let model_name = model_display_name(&provenance);
    let clean = clean_accuracy(&graph, &set, cfg.batch_size)? * 100.0;
    let mut cells = [0.0f64; 6];
    let mut zero_grad = [0.0f64; 6];
    for attack_cfg in cfg.resolved_attacks()? {
        let (acc, batch) =
            attack::evaluate_under_attack(&graph, &set.images, &set.labels, &attack_cfg, cfg.batch_size)?;
        let slot = AttackMethod::ALL.iter().position(|m| *m == attack_cfg.method).unwrap();
        cells[slot] = acc * 100.0;
        zero_grad[slot] = batch.zero_grad_fraction();
        save_archive(
            &archive_dir.join(format!("{}.tadv", attack_cfg.method.name())),
            &batch,
            &attack_cfg,
            &model_name,
            &indices,
        )?;
        fs::write(
            cfg.out_dir.join(format!("samples_{}.csv", attack_cfg.method.name())),
            samples_csv(&batch, &indices),
        )?;
    }
    let mut report = RobustnessReport::default();
    report.push(ReportRow { model: model_name, threat: Threat::WhiteBox, clean, cells, zero_grad });
    fs::write(cfg.out_dir.join("report.txt"), report.to_table())?;
    fs::write(cfg.out_dir.join("report.csv"), report.to_csv())?;
    Ok(report)
}

/// Evaluate a target checkpoint on stored perturbed examples: the black-box
/// (transfer) rows.
pub fn cmd_transfer(cfg: &RunConfig) -> Result<RobustnessReport> {
    cfg.write_resolved(&cfg.out_dir)?;
    let ckpt_path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("transfer requires a target checkpoint".into()))?;
    let archive_dir = cfg
        .archive_dir
        .as_ref()
        .ok_or_else(|| Error::Config("transfer requires an archive directory".into()))?;
    let (graph, provenance) = checkpoint::load_checkpoint(ckpt_path)?;
    let test = load_test_dataset(&cfg.data_dir)?;

    let mut cells = [f64::NAN; 6];
    let zero_grad = [0.0f64; 6];
    let mut subset_len = None;
    for method in AttackMethod::ALL {
        let path = archive_dir.join(format!("{}.tadv", method.name()));
        if !path.exists() {
            continue;
        }
        let archive = load_archive(&path)?;
        if archive.perturbed.shape()[1..] != graph.input_shape()[..] {
            return Err(Error::format(
                0,
                format!(
                    "archive input shape {:?} does not match model {:?}",
                    &archive.perturbed.shape()[1..],
                    graph.input_shape()
                ),
            ));
        }
        let preds = crate::nn::predict(&graph, &archive.perturbed)?;
        let correct = preds
            .iter()
            .zip(archive.labels.iter())
            .filter(|(&p, &l)| p == l as usize)
            .count();
        let slot = AttackMethod::ALL.iter().position(|m| *m == method).unwrap();
        cells[slot] = correct as f64 / archive.labels.len() as f64 * 100.0;
        subset_len = Some(archive.labels.len());
    }
    let n = subset_len.ok_or_else(|| Error::Config("no archives found in archive_dir".into()))?;
    let set = test.head(n);
    let clean = clean_accuracy(&graph, &set, cfg.batch_size)? * 100.0;

    let mut report = RobustnessReport::default();
    report.push(ReportRow {
        model: model_display_name(&provenance),
        threat: Threat::BlackBox,
        clean,
        cells: cells.map(|c| if c.is_nan() { 0.0 } else { c }),
        zero_grad,
    });
    fs::write(cfg.out_dir.join("transfer_report.txt"), report.to_table())?;
    fs::write(cfg.out_dir.join("transfer_report.csv"), report.to_csv())?;
    Ok(report)
}

/// Activation-input histograms, range-shift metrics and risk curves for one
/// or more checkpoints. Adversarial counterparts come from the first
/// configured attack (PGD with defaults when none is given).
pub fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    cfg.write_resolved(&cfg.out_dir)?;
    let primary = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("analyze requires a checkpoint".into()))?;
    let mut ckpts = vec![primary.clone()];
    ckpts.extend(cfg.analyze_checkpoints.iter().cloned());

    let test = load_test_dataset(&cfg.data_dir)?;
    let set = match cfg.subset {
        Some(n) => test.head(n),
        None => test.head(1000),
    };
    let full_train = load_train_dataset(&cfg.data_dir)?;
    let (train, _) = data::split_train_val(&full_train, cfg.seed)?;
    drop(full_train);
    let train_for_v = match cfg.train_subset {
        Some(n) => train.head(n),
        None => train,
    };

    let attack_cfg = match cfg.attacks.first() {
        Some(o) => o.resolve(cfg.seed)?,
        None => {
            let mut c = AttackConfig::new(AttackMethod::Pgd);
            c.seed = cfg.seed;
            c
        }
    };

    let mut comparison: Vec<(String, f64)> = Vec::new();
    for (idx, path) in ckpts.iter().enumerate() {
        let (graph, provenance) = checkpoint::load_checkpoint(path)?;
        let name = model_display_name(&provenance);
        let tag = if idx == 0 { String::new() } else { format!("_{idx}") };

        let (_, adv_batch) =
            attack::evaluate_under_attack(&graph, &set.images, &set.labels, &attack_cfg, cfg.batch_size)?;
        let hists = risk::activation_histograms(&graph, &set.images, &adv_batch.perturbed, 100)?;

        let mut hist_csv = String::from("layer,bin_lo,bin_hi,clean_count,adv_count,delta\n");
        let mut shift_csv = String::from("layer,clean_p999_abs,adv_p999_abs,range_shift,delta\n");
        for h in &hists {
            let delta_str = h
                .deltas
                .as_ref()
                .map(|d| format_sig6(d[0] as f64))
                .unwrap_or_default();
            for b in 0..h.bins() {
                let (lo, hi) = h.edges(b);
                hist_csv.push_str(&format!(
                    "{},{:.6},{:.6},{},{},{}\n",
                    h.layer_index, lo, hi, h.clean_counts[b], h.adv_counts[b], delta_str
                ));
            }
            shift_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                h.layer_index,
                format_sig6(h.clean_p999_abs),
                format_sig6(h.adv_p999_abs),
                format_sig6(risk::range_shift_metric(h)),
                delta_str
            ));
        }
        fs::write(cfg.out_dir.join(format!("histograms{tag}.csv")), hist_csv)?;
        fs::write(cfg.out_dir.join(format!("range_shift{tag}.csv")), shift_csv)?;

        // known-space edge from the maximum |pre-activation| over training data
        let v = max_abs_preactivation(&graph, &train_for_v.images, cfg.batch_size)?;
        let a = v + cfg.ball_radius;
        let delta = hists
            .iter()
            .rev()
            .find_map(|h| h.deltas.as_ref().map(|d| d[0] as f64))
            .unwrap_or(1.0);
        let grid: Vec<f64> = [0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1000.0].iter().map(|o| a + o).collect();
        let rep = risk::risk_divergence_report(a, &grid, delta)?;
        let mut risk_csv = String::from("z,relu_value,tent_value\n");
        for i in 0..grid.len() {
            risk_csv.push_str(&format!(
                "{},{},{}\n",
                format_sig6(grid[i]),
                format_sig6(rep.relu.values[i]),
                format_sig6(rep.tent.values[i])
            ));
        }
        risk_csv.push_str(&format!("# a={} verdict: {}\n", format_sig6(a), risk::verdict_line(&rep)));
        fs::write(cfg.out_dir.join(format!("risk_curves{tag}.csv")), risk_csv)?;

        let top_shift = hists.last().map(risk::range_shift_metric).unwrap_or(f64::NAN);
        comparison.push((name, top_shift));
    }

    // models ordered by top-layer range shift, largest (least stable) first
    comparison.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut cmp_csv = String::from("model,top_layer_range_shift\n");
    for (name, v) in &comparison {
        cmp_csv.push_str(&format!("{},{}\n", name, format_sig6(*v)));
    }
    fs::write(cfg.out_dir.join("comparison.csv"), cmp_csv)?;
    Ok(())
}

/// Greatest |pre-activation| over a set, streamed in batches.
fn max_abs_preactivation(graph: &ModelGraph, images: &Tensor, batch_size: usize) -> Result<f64> {
    let n = images.shape()[0];
    let row: usize = images.shape()[1..].iter().product();
    let mut v = 0.0f32;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::from_vec(shape, images.data()[start * row..end * row].to_vec())?;
        let (_, trace) = crate::nn::model_forward_eval(graph, &chunk)?;
        for (_, pre, _) in trace.pre_activations(graph) {
            for &x in pre.data() {
                v = v.max(x.abs());
            }
        }
        start = end;
    }
    Ok(v as f64)
}

/// Decimal with 6 significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

/// 8-bit binary PGM with max value 255; pixel byte = round(x*255) half-up.
pub fn write_pgm(path: &Path, image: &[f32], width: usize, height: usize) -> Result<()> {
    let mut out = Vec::with_capacity(32 + width * height);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    for &v in image {
        let byte = (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
        out.push(byte);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write clean and perturbed images as PGM files named
/// `{index}_{attack}_{true}_{pred}.pgm`.
pub fn cmd_dump_examples(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.write_resolved(&cfg.out_dir)?;
    let archive_dir = cfg
        .archive_dir
        .as_ref()
        .ok_or_else(|| Error::Config("dump-examples requires an archive directory".into()))?;
    let test = load_test_dataset(&cfg.data_dir)?;
    let (h, w) = (test.images.shape()[2], test.images.shape()[3]);
    let row = h * w;
    let mut written = Vec::new();
    for &index in &cfg.indices {
        if index >= test.len() {
            return Err(Error::domain(format!("sample index {index} out of range")));
        }
        let mut clean_written = false;
        for method in AttackMethod::ALL {
            let path = archive_dir.join(format!("{}.tadv", method.name()));
            if !path.exists() {
                continue;
            }
            let archive = load_archive(&path)?;
            let pos = archive
                .indices
                .iter()
                .position(|&i| i as usize == index)
                .ok_or_else(|| Error::domain(format!("index {index} not in {} archive", method.name())))?;
            if !clean_written {
                let label = archive.labels[pos];
                let pred = archive.clean_pred[pos];
                let p = cfg.out_dir.join(format!("{index}_clean_{label}_{pred}.pgm"));
                write_pgm(&p, &test.images.data()[index * row..(index + 1) * row], w, h)?;
                written.push(p);
                clean_written = true;
            }
            let label = archive.labels[pos];
            let pred = archive.adv_pred[pos];
            let p = cfg.out_dir.join(format!("{index}_{}_{label}_{pred}.pgm", method.name()));
            write_pgm(&p, &archive.perturbed.data()[pos * row..(pos + 1) * row], w, h)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_keys_rejected() {
        let json = r#"{"variant":"bn","bogus_key":1}"#;
        assert!(RunConfig::from_json(json).is_err());
    }

    #[test]
    fn config_roundtrip_defaults() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(back.epochs, 40);
        assert_eq!(back.batch_size, 100);
        assert_eq!(back.variant, Variant::Bn);
    }

    #[test]
    fn attack_override_resolution() {
        let o = AttackOverride {
            method: "pgd".into(),
            eps: Some(0.2),
            max_iter: Some(7),
            ..AttackOverride::default()
        };
        let cfg = o.resolve(5).unwrap();
        assert_eq!(cfg.method, AttackMethod::Pgd);
        assert_eq!(cfg.eps, 0.2);
        assert_eq!(cfg.max_iter, 7);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.step_size, 0.1);
    }

    #[test]
    fn display_names() {
        let mut p = Provenance {
            variant: "tent".into(),
            seed: 0,
            delta_weight_decay: 0.12,
            epochs: 1,
            best_epoch: 0,
            adversarial: None,
            train_subset: None,
        };
        assert_eq!(model_display_name(&p), "MNIST-Net tent (0.12)");
        p.delta_weight_decay = 0.0;
        assert_eq!(model_display_name(&p), "MNIST-Net tent (0)");
        p.variant = "bn".into();
        assert_eq!(model_display_name(&p), "MNIST-Net bn");
    }

    #[test]
    fn pgm_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.pgm");
        write_pgm(&p, &[0.0, 1.0, 0.5, 0.25], 2, 2).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8, 255, 128, 64]);
    }

    #[test]
    fn pgm_all_zero_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zero.pgm");
        write_pgm(&p, &vec![0.0; 784], 28, 28).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n28 28\n255\n";
        assert_eq!(bytes.len(), header.len() + 784);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1.00000");
        assert_eq!(format_sig6(0.233700), "0.233700");
        assert_eq!(format_sig6(499999.5), "500000");
        assert_eq!(format_sig6(0.05), "0.0500000");
    }
}
