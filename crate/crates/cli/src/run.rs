//! Resolved run configuration plus the train / quantize / eval commands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use pa_core::net::checkpoint;
use pa_core::net::data::{load_cifar10, load_mnist, Dataset};
use pa_core::net::layers::{global_avg_pool_forward, maxpool2_forward};
use pa_core::net::train::{predictions, train, TrainConfig};
use pa_core::net::{build_net, ActOp, Mode, Net, NetConfig, Op, QuantPolicy};
use pa_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::hist;
use crate::paq;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pa_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{0}")]
    Usage(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Train,
    Quantize,
    Eval,
    Analyze,
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SchemeKind {
    /// Full-precision baseline.
    Full,
    /// Piecewise multiple-binary quantization.
    Pa,
    /// Single sign binarization.
    Sign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Scheme settings shared by train/quantize/eval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeSettings {
    pub kind: SchemeKind,
    pub m: usize,
    pub n: usize,
    pub lambda_w: f32,
    pub lambda_a: f32,
    pub lambda_delta: Option<f32>,
}

impl SchemeSettings {
    pub fn policy(&self) -> QuantPolicy {
        match self.kind {
            SchemeKind::Full => QuantPolicy::Real,
            SchemeKind::Pa => QuantPolicy::Pa {
                m: self.m,
                n: self.n,
            },
            SchemeKind::Sign => QuantPolicy::SignBinary,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            SchemeKind::Full => "full".into(),
            SchemeKind::Pa => format!("pa M={} N={}", self.m, self.n),
            SchemeKind::Sign => "sign-binary".into(),
        }
    }
}

/// Everything a subcommand run needs, resolved from the command line.
/// Fields irrelevant to the chosen action stay `None`.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub action: Action,
    pub arch: Option<String>,
    pub scheme: Option<SchemeSettings>,
    pub dataset: Option<DatasetKind>,
    pub data_dir: Option<PathBuf>,
    /// Train: warm-start checkpoint. Quantize: input checkpoint.
    /// Eval: model file (checkpoint or quantized export).
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub limit_train: usize,
    pub limit_test: usize,
    pub calibrate: usize,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub histogram: Option<PathBuf>,
    pub split: Split,
    pub verify: bool,
}

impl RunConfig {
    /// Cross-field consistency; per-value checks live with the values.
    pub fn validate(&self) -> CliResult<()> {
        match self.action {
            Action::Train => {
                required(&self.arch, "--arch")?;
                required(&self.data_dir, "--data")?;
                required(&self.scheme, "--scheme")?;
                self.train.validate()?;
            }
            Action::Quantize => {
                required(&self.checkpoint, "--checkpoint")?;
                required(&self.arch, "--arch")?;
                if let Some(s) = &self.scheme {
                    if s.kind != SchemeKind::Pa {
                        return Err(CliError::Usage(
                            "only the piecewise scheme can be exported; pass --scheme pa".into(),
                        ));
                    }
                }
            }
            Action::Eval => {
                required(&self.checkpoint, "--model")?;
                required(&self.data_dir, "--data")?;
            }
            Action::Analyze => {
                required(&self.arch, "--arch")?;
            }
            Action::Bench => {}
        }
        Ok(())
    }
}

fn required<'a, T>(opt: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    opt.as_ref()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required for this command")))
}

fn net_config(scheme: &SchemeSettings, seed: u64) -> NetConfig {
    NetConfig {
        policy: scheme.policy(),
        lambda_w: scheme.lambda_w,
        lambda_a: scheme.lambda_a,
        lambda_delta: scheme.lambda_delta,
        seed,
    }
}

fn truncate(set: Dataset, limit: usize) -> Dataset {
    if limit == 0 || limit >= set.len() {
        return set;
    }
    let idx: Vec<usize> = (0..limit).collect();
    let (images, labels) = set.gather(&idx);
    Dataset::new(images, labels).expect("subset of a consistent dataset")
}

fn load_sets(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    let dir = required(&cfg.data_dir, "--data")?;
    let kind = match (cfg.dataset, cfg.arch.as_deref()) {
        (Some(k), _) => k,
        (None, Some("lenet")) => DatasetKind::Mnist,
        (None, Some("resnet20")) => DatasetKind::Cifar10,
        _ => {
            return Err(CliError::Usage(
                "cannot infer the dataset layout; pass --dataset".into(),
            ))
        }
    };
    let (train_set, test_set) = match kind {
        DatasetKind::Mnist => load_mnist(dir)?,
        DatasetKind::Cifar10 => load_cifar10(dir)?,
    };
    Ok((
        truncate(train_set, cfg.limit_train),
        truncate(test_set, cfg.limit_test),
    ))
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let arch = required(&cfg.arch, "--arch")?.clone();
    let scheme = *required(&cfg.scheme, "--scheme")?;
    let out = required(&cfg.out, "--out")?.clone();
    let metrics_path = required(&cfg.metrics, "--metrics")?.clone();

    let (train_set, test_set) = load_sets(cfg)?;
    println!(
        "{arch} [{}]: {} train / {} test samples",
        scheme.label(),
        train_set.len(),
        test_set.len()
    );

    let mut net = build_net(&arch, &net_config(&scheme, cfg.train.seed))?;
    if let Some(path) = &cfg.checkpoint {
        let records = checkpoint::load(path)?;
        net.load_records(&records, false)?;
        println!("warm start from {}", path.display());
    }

    let mut writer = BufWriter::new(File::create(&metrics_path)?);
    let stats = train(
        &mut net,
        &train_set,
        Some(&test_set),
        &cfg.train,
        Some(&mut writer),
    )?;
    writer.flush()?;

    for s in &stats {
        let test = s
            .test_accuracy
            .map(|a| format!("{:.2}%", a * 100.0))
            .unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  train {:.2}%  test {test}  ({:.1}s)",
            s.epoch,
            s.lr,
            s.train_loss,
            s.train_accuracy * 100.0,
            s.seconds
        );
    }

    checkpoint::save(&out, &net.state_records())?;
    println!(
        "wrote {} and {}",
        out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn uninitialized_acts(net: &Net) -> Vec<String> {
    net.nodes
        .iter()
        .filter_map(|node| match &node.op {
            Op::Act(ActOp::Pa(p)) if p.state.is_none() => Some(node.name.clone()),
            _ => None,
        })
        .collect()
}

/// Inference-shaped forward that still calibrates activation quantizers:
/// batch norm runs on running statistics, activations in training mode.
fn calibrate(net: &mut Net, x: &Tensor) -> Result<()> {
    let count = net.nodes.len();
    let mut values: Vec<Option<Tensor>> = vec![None; count];
    for idx in 0..count {
        let inputs = net.nodes[idx].inputs.clone();
        let out = match &mut net.nodes[idx].op {
            Op::Input => x.clone(),
            Op::Conv(c) => c.forward(paq::val(&values, inputs[0]))?,
            Op::Fc(f) => f.forward(paq::val(&values, inputs[0]))?,
            Op::Bn(b) => b.forward(paq::val(&values, inputs[0]), Mode::Eval)?,
            Op::Act(a) => a.forward(paq::val(&values, inputs[0]), Mode::Train)?,
            Op::MaxPool2 => maxpool2_forward(paq::val(&values, inputs[0]))?,
            Op::GlobalAvgPool => global_avg_pool_forward(paq::val(&values, inputs[0]))?,
            Op::Add => paq::add_same_shape(
                paq::val(&values, inputs[0]),
                paq::val(&values, inputs[1]),
            )?,
        };
        values[idx] = Some(out);
    }
    Ok(())
}

fn synthetic_batch(arch: &str, seed: u64) -> CliResult<Tensor> {
    let shape = match arch {
        "lenet" => [8, 1, 28, 28],
        "resnet20" => [8, 3, 32, 32],
        other => {
            return Err(CliError::Usage(format!(
                "no fixed verification batch for architecture {other:?}"
            )))
        }
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7061_7131);
    let len = shape.iter().product();
    Ok(Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..2.0)).collect())?)
}

pub fn cmd_quantize(cfg: &RunConfig) -> CliResult<()> {
    let ckpt_path = required(&cfg.checkpoint, "--checkpoint")?;
    let arch = required(&cfg.arch, "--arch")?.clone();
    let out = required(&cfg.out, "--out")?.clone();
    let scheme = cfg.scheme.as_ref().copied().ok_or_else(|| {
        CliError::Usage(
            "the checkpoint does not say how to quantize; pass --scheme pa --M <pieces> --N <pieces>"
                .into(),
        )
    })?;
    let QuantPolicy::Pa { m, n } = scheme.policy() else {
        return Err(CliError::Usage(
            "only the piecewise scheme can be exported; pass --scheme pa".into(),
        ));
    };

    let records = checkpoint::load(ckpt_path)?;
    let mut net = build_net(&arch, &net_config(&scheme, cfg.train.seed))?;
    net.load_records(&records, false)?;

    let missing = uninitialized_acts(&net);
    if !missing.is_empty() {
        if cfg.data_dir.is_none() {
            return Err(CliError::Usage(format!(
                "activation quantizers {missing:?} are uncalibrated (real-valued checkpoint?); \
                 pass --data <dir> to calibrate from training samples"
            )));
        }
        let (train_set, _) = load_sets(cfg)?;
        let k = cfg.calibrate.clamp(1, train_set.len());
        let idx: Vec<usize> = (0..k).collect();
        let (x, _) = train_set.gather(&idx);
        calibrate(&mut net, &x)?;
        println!(
            "calibrated {} activation quantizers on {k} samples",
            missing.len()
        );
    }

    let bytes = paq::export(&mut net, &arch, m, n)?;
    std::fs::write(&out, &bytes)?;
    println!("wrote {} ({} bytes)", out.display(), bytes.len());

    // Fig-style summaries: dense weight distribution next to its handful of
    // quantized levels, per exported layer.
    let mut csv = format!("{}\n", hist::CSV_HEADER);
    for node in net.nodes.iter_mut() {
        let name = node.name.clone();
        let pair = match &mut node.op {
            Op::Conv(c) if matches!(c.policy, QuantPolicy::Pa { .. }) => {
                Some((c.weight.clone(), c.quantized_weights()?))
            }
            Op::Fc(f) if matches!(f.policy, QuantPolicy::Pa { .. }) => {
                Some((f.weight.clone(), f.quantized_weights()?))
            }
            _ => None,
        };
        let Some((w, wbar)) = pair else { continue };
        let (edges, counts) = hist::binned_histogram(w.data(), 33);
        let levels = hist::level_histogram(wbar.data());
        print!("{}", hist::render_bins(&format!("{name} weights (real)"), &edges, &counts));
        print!("{}", hist::render_levels(&format!("{name} weights (quantized)"), &levels));
        hist::csv_bins(&mut csv, &name, "real", &edges, &counts);
        hist::csv_levels(&mut csv, &name, "quantized", &levels);
    }
    if let Some(path) = &cfg.histogram {
        std::fs::write(path, csv)?;
        println!("wrote {}", path.display());
    }

    // Round-trip check: the written file, read back, must reproduce the
    // in-memory forward bit for bit.
    let mut model = paq::import(&bytes)?;
    if (model.m, model.n) != (m, n) {
        return Err(CliError::Verify(format!(
            "export header says M={} N={}, expected M={m} N={n}",
            model.m, model.n
        )));
    }
    let x = synthetic_batch(&arch, cfg.train.seed)?;
    let tape = net.forward(&x, Mode::Eval)?;
    let want = net.output_of(&tape);
    let got = model.forward(&x)?;
    for (i, (a, b)) in want.data().iter().zip(got.data()).enumerate() {
        if a.to_bits() != b.to_bits() {
            return Err(CliError::Verify(format!(
                "round-trip forward diverged at output {i}: {a} vs {b}"
            )));
        }
    }
    println!(
        "round-trip verification: bit-exact on a {:?} batch",
        x.shape()
    );
    Ok(())
}

enum EvalModel {
    Net(Box<Net>),
    Paq(Box<paq::PaqModel>),
}

impl EvalModel {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            EvalModel::Net(net) => {
                let tape = net.forward(x, Mode::Eval)?;
                Ok(net.output_of(&tape).clone())
            }
            EvalModel::Paq(model) => model.forward(x),
        }
    }

    fn forward_binary(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            EvalModel::Net(net) => {
                let tape = net.forward_binary(x)?;
                Ok(net.output_of(&tape).clone())
            }
            EvalModel::Paq(model) => model.forward_binary(x),
        }
    }
}

fn load_model(cfg: &RunConfig) -> CliResult<EvalModel> {
    let path = required(&cfg.checkpoint, "--model")?;
    let bytes = std::fs::read(path)?;
    match bytes.get(..4) {
        Some(magic) if magic == checkpoint::MAGIC.as_slice() => {
            let arch = required(&cfg.arch, "--arch").map_err(|_| {
                CliError::Usage(
                    "a .pack checkpoint carries no architecture; pass --arch and --scheme".into(),
                )
            })?;
            let scheme = cfg.scheme.as_ref().ok_or_else(|| {
                CliError::Usage(
                    "a .pack checkpoint carries no scheme; pass --scheme matching the training run"
                        .into(),
                )
            })?;
            let mut net = build_net(arch, &net_config(scheme, cfg.train.seed))?;
            let records = checkpoint::decode(&bytes)?;
            net.load_records(&records, true)?;
            Ok(EvalModel::Net(Box::new(net)))
        }
        Some(magic) if magic == paq::MAGIC.as_slice() => {
            Ok(EvalModel::Paq(Box::new(paq::import(&bytes)?)))
        }
        _ => Err(CliError::Usage(format!(
            "{} is neither a checkpoint nor a quantized export",
            path.display()
        ))),
    }
}

fn top5_hit(logits: &[f32], label: usize) -> bool {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_unstable_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx[..logits.len().min(5)].contains(&label)
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    let mut model = load_model(cfg)?;
    let mut resolved = cfg.clone();
    if let EvalModel::Paq(m) = &model {
        println!("quantized export: {} [pa M={} N={}]", m.arch, m.m, m.n);
        resolved.arch.get_or_insert_with(|| m.arch.clone());
    }
    let (train_set, test_set) = load_sets(&resolved)?;
    let set = match cfg.split {
        Split::Train => train_set,
        Split::Test => test_set,
    };
    if set.is_empty() {
        return Err(CliError::Usage("the evaluation split is empty".into()));
    }

    let batch = cfg.train.eval_batch.max(1);
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let indices: Vec<usize> = (0..set.len()).collect();
    for (batch_no, chunk) in indices.chunks(batch).enumerate() {
        let (x, labels) = set.gather(chunk);
        let logits = model.forward(&x)?;
        if cfg.verify {
            let alt = model.forward_binary(&x)?;
            let scale = logits.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
            for (a, b) in logits.data().iter().zip(alt.data()) {
                if (a - b).abs() > 1e-3 * scale {
                    return Err(CliError::Verify(format!(
                        "dense and bit-kernel paths disagree in batch {batch_no}: {a} vs {b}"
                    )));
                }
            }
        }
        let classes = logits.len() / chunk.len();
        for (i, (&label, pred)) in labels.iter().zip(predictions(&logits)).enumerate() {
            if pred == label as usize {
                top1 += 1;
            }
            let row = &logits.data()[i * classes..(i + 1) * classes];
            if top5_hit(row, label as usize) {
                top5 += 1;
            }
        }
    }

    let samples = set.len();
    let t1 = top1 as f64 / samples as f64;
    let t5 = top5 as f64 / samples as f64;
    println!(
        "top-1 {:.2}%  top-5 {:.2}%  ({samples} samples)",
        t1 * 100.0,
        t5 * 100.0
    );
    if cfg.verify {
        println!("dual-path verification: dense and bit-kernel outputs agree");
    }
    if let Some(path) = &cfg.out {
        let report = serde_json::json!({
            "top1": t1,
            "top5": t5,
            "samples": samples,
            "verified": cfg.verify,
        });
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(action: Action) -> RunConfig {
        RunConfig {
            action,
            arch: Some("lenet".into()),
            scheme: Some(SchemeSettings {
                kind: SchemeKind::Pa,
                m: 8,
                n: 7,
                lambda_w: 1.0,
                lambda_a: 1.0,
                lambda_delta: None,
            }),
            dataset: Some(DatasetKind::Mnist),
            data_dir: Some(PathBuf::from("/tmp")),
            checkpoint: Some(PathBuf::from("model.pack")),
            train: TrainConfig::default(),
            limit_train: 0,
            limit_test: 0,
            calibrate: 256,
            out: Some(PathBuf::from("out.pack")),
            metrics: Some(PathBuf::from("metrics.jsonl")),
            histogram: None,
            split: Split::Test,
            verify: false,
        }
    }

    #[test]
    fn validate_flags_missing_pieces() {
        let mut cfg = base(Action::Train);
        cfg.data_dir = None;
        assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));

        let mut cfg = base(Action::Quantize);
        cfg.scheme = Some(SchemeSettings {
            kind: SchemeKind::Sign,
            ..cfg.scheme.unwrap()
        });
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("piecewise"), "{err}");

        assert!(base(Action::Eval).validate().is_ok());
    }

    #[test]
    fn scheme_labels_and_policies() {
        let s = SchemeSettings {
            kind: SchemeKind::Pa,
            m: 4,
            n: 5,
            lambda_w: 1.0,
            lambda_a: 1.0,
            lambda_delta: None,
        };
        assert_eq!(s.policy(), QuantPolicy::Pa { m: 4, n: 5 });
        assert_eq!(s.label(), "pa M=4 N=5");
        assert_eq!(SchemeSettings { kind: SchemeKind::Full, ..s }.policy(), QuantPolicy::Real);
    }

    #[test]
    fn top5_uses_index_order_for_ties() {
        let logits = [0.1, 0.9, 0.9, 0.9, 0.9, 0.9, 0.05];
        assert!(top5_hit(&logits, 5));
        assert!(!top5_hit(&logits, 0));
        assert!(!top5_hit(&logits, 6));
    }

    #[test]
    fn truncate_keeps_prefix() {
        let images = Tensor::new([4, 1, 1, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let set = Dataset::new(images, vec![0, 1, 2, 3]).unwrap();
        let cut = truncate(set, 2);
        assert_eq!(cut.len(), 2);
        assert_eq!(cut.labels, vec![0, 1]);
    }
}
