use std::fmt::Display;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use deep_taylor::dataio::{
    find_idx_pair, load_idx, load_model, load_pairs, save_model, save_pairs, synthesize_pairs, ModelArchive,
    PairArchive, PairConfig, PairedSample,
};
use deep_taylor::diagnostics::{
    evaluate, export_histogram, export_scatter, export_summary, verdict_table, ConsistencyReport, Heatmapper, Method,
};
use deep_taylor::network::{train_sgd, Network, Preset, TrainConfig};
use deep_taylor::relevance::{minmax_samples, train_minmax, MinMaxInit};
use deep_taylor::tensor::Tensor;
use log::info;

use crate::args::{CompareArgs, EvaluateArgs, ExplainArgs, ModelArgs, SampleArgs, SourceArgs, SynthArgs, TrainArgs};
use crate::images::{write_pgm, write_relevance_csv, write_sidecar};

const DEFAULT_EXPLAIN_COUNT: usize = 10;

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, unreadable inputs or invalid specs; exit code 1.
    Config(anyhow::Error),
    /// The pipeline failed after its inputs were accepted; exit code 2.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Self::Config(e) | Self::Runtime(e) => e,
        }
    }
}

pub type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn config(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Outcome<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn config_error(msg: impl Display) -> Failure {
    Failure::Config(anyhow!("{msg}"))
}

fn synthesize(source: &SourceArgs) -> Outcome<Vec<PairedSample>> {
    let dir = &source.data_dir;
    let (images, labels) = find_idx_pair(dir)
        .ok_or_else(|| config_error(format!("{}: no MNIST image/label IDX files found", dir.display())))?;
    let dataset = load_idx(&images, &labels).config()?;
    let cfg = PairConfig {
        count: source.count,
        seed: source.seed,
        translate: !source.no_translate,
        ..PairConfig::default()
    };
    info!("synthesizing {} pairs from {} digits", cfg.count, dataset.len());
    synthesize_pairs(&dataset, &cfg).config()
}

fn load_samples(args: &SampleArgs) -> Outcome<Vec<PairedSample>> {
    match &args.pairs {
        Some(path) => Ok(load_pairs(path).config()?.samples),
        None => synthesize(&args.source),
    }
}

struct Loaded {
    archive: ModelArchive,
    samples: Vec<PairedSample>,
}

fn load_inputs(args: &ModelArgs) -> Outcome<Loaded> {
    let archive = load_model(&args.model).config()?;
    let mut samples = load_samples(&args.samples)?;
    if let Some(limit) = args.limit {
        samples.truncate(limit);
    }
    Ok(Loaded { archive, samples })
}

fn create_dir(path: &Path) -> Outcome<()> {
    fs::create_dir_all(path)
        .with_context(|| format!("{}: cannot create output directory", path.display()))
        .runtime()
}

pub fn synth(args: &SynthArgs) -> Outcome<()> {
    let samples = synthesize(&args.source)?;
    let positives = samples.iter().filter(|s| s.meta.is_positive()).count();
    let mut archive = PairArchive {
        samples,
        metadata: Default::default(),
    };
    for (k, v) in [
        ("synth.seed", args.source.seed.to_string()),
        ("synth.translate", (!args.source.no_translate).to_string()),
    ] {
        archive.metadata.insert(k.into(), v);
    }
    save_pairs(&archive, &args.out).runtime()?;
    println!(
        "wrote {} samples ({positives} positive) to {}",
        archive.samples.len(),
        args.out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Outcome<()> {
    let preset = Preset::from(args.preset);
    if args.minmax && preset != Preset::MnistTwoLayer {
        return Err(config_error(
            "--minmax needs a network with two blocks (mnist-two-layer)",
        ));
    }
    let cfg = TrainConfig {
        iterations: args.iterations,
        minibatch_size: args.minibatch,
        learning_rate: args.learning_rate,
        weight_init_std: args.init_std,
        seed: args.train_seed,
    };
    cfg.validate().config()?;
    let samples = load_samples(&args.samples)?;
    let net = Network::preset(preset, args.init_std, args.train_seed).config()?;
    info!("training {} for {} iterations", preset.name(), cfg.iterations);
    let (net, report) = train_sgd(&net, &samples, &cfg).runtime()?;
    println!("initial train MSE: {:.6}", report.initial_mse);
    println!("final train MSE: {:.6}", report.final_mse);

    let mut archive = ModelArchive::new(net);
    let mut meta = vec![
        ("train.preset", preset.name().to_string()),
        ("train.iterations", cfg.iterations.to_string()),
        ("train.minibatch_size", cfg.minibatch_size.to_string()),
        ("train.learning_rate", cfg.learning_rate.to_string()),
        ("train.weight_init_std", cfg.weight_init_std.to_string()),
        ("train.seed", cfg.seed.to_string()),
        ("train.samples", samples.len().to_string()),
        ("train.final_mse", report.final_mse.to_string()),
    ];
    if args.minmax {
        let inputs: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let mm_samples = minmax_samples(&archive.network, 0, &inputs).runtime()?;
        let mm_cfg = TrainConfig {
            iterations: args.minmax_iterations,
            learning_rate: args.minmax_learning_rate,
            ..cfg.clone()
        };
        let init = MinMaxInit::from(args.minmax_init);
        info!("fitting min-max model for {} iterations", mm_cfg.iterations);
        let (model, mm_report) = train_minmax(&archive.network, 0, &mm_samples, &mm_cfg, &init).runtime()?;
        println!(
            "min-max fit MSE: {:.6} -> {:.6}",
            mm_report.initial_mse, mm_report.final_mse
        );
        meta.extend([
            ("minmax.iterations", mm_cfg.iterations.to_string()),
            ("minmax.learning_rate", mm_cfg.learning_rate.to_string()),
            ("minmax.final_mse", mm_report.final_mse.to_string()),
        ]);
        archive.minmax = Some(model);
    }
    for (k, v) in meta {
        archive.metadata.insert(k.into(), v);
    }
    save_model(&archive, &args.out).runtime()?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn bind<'a>(spec: &str, archive: &'a ModelArchive) -> Outcome<impl Heatmapper + 'a> {
    let method: Method = spec.parse().config()?;
    method.bind(&archive.network, archive.minmax.as_ref()).config()
}

pub fn explain(args: &ExplainArgs) -> Outcome<()> {
    let Loaded { archive, samples } = load_inputs(&args.input)?;
    let spec = match &args.rules {
        Some(rules) => format!("deep-taylor={rules}"),
        None => args.method.clone(),
    };
    let heatmapper = bind(&spec, &archive)?;
    let indices: Vec<usize> = if args.indices.is_empty() {
        let n = args.input.limit.unwrap_or(DEFAULT_EXPLAIN_COUNT).min(samples.len());
        (0..n).collect()
    } else {
        args.indices.clone()
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= samples.len()) {
        return Err(config_error(format!(
            "sample index {bad} out of range; {} samples loaded",
            samples.len()
        )));
    }
    if indices.is_empty() {
        return Err(config_error("no samples to explain"));
    }
    create_dir(&args.out)?;
    for i in indices {
        let h = heatmapper
            .heatmap(&samples[i].image)
            .with_context(|| format!("sample {i}"))
            .runtime()?;
        let stem = args.out.join(format!("sample_{i:05}"));
        let scale = write_pgm(&stem.with_extension("pgm"), &h.relevance)
            .and_then(|s| write_sidecar(&stem.with_extension("scale.txt"), &s).map(|_| s))
            .and_then(|s| write_relevance_csv(&stem.with_extension("csv"), &h.relevance).map(|_| s))
            .with_context(|| format!("{}: cannot write heatmap", stem.display()))
            .runtime()?;
        let relative = if h.output.abs() > 0.0 {
            h.conservation_gap() / h.output.abs()
        } else {
            h.conservation_gap()
        };
        println!(
            "sample {i}: f(x)={:.6} sum_r={:.6} gap={:.3e} relative_gap={:.3e} range=[{:.3e}, {:.3e}]",
            h.output,
            h.total(),
            h.conservation_gap(),
            relative,
            scale.min,
            scale.max
        );
    }
    Ok(())
}

fn report_text(r: &ConsistencyReport) -> String {
    let mut out = verdict_table(std::slice::from_ref(r));
    out.push_str(&format!(
        "samples: {} evaluated, {} failed\nmean f(x): {:.6}\nmean sum_r: {:.6}\nmean relative error: {:.3e}\nnegative mass fraction: {:.3e}\nmin relevance: {:.3e}\nnear-conservative: {}\n",
        r.records.len(),
        r.failures.len(),
        r.mean_output,
        r.mean_total,
        r.mean_relative_error,
        r.negative_mass_fraction,
        r.min_relevance,
        if r.verdicts.near_conservative { "yes" } else { "no" },
    ));
    for g in &r.layer_gaps {
        out.push_str(&format!(
            "layer {} max relative gap: {:.3e}\n",
            g.layer, g.max_relative_gap
        ));
    }
    if let Some(f) = r.failures.first() {
        out.push_str(&format!("first failure: sample {}: {}\n", f.index, f.message));
    }
    out
}

fn inputs(samples: &[PairedSample]) -> Vec<Tensor> {
    samples.iter().map(|s| s.image.clone()).collect()
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn write_report_files(r: &ConsistencyReport, out: &Path, prefix: &str, bins: usize) -> Outcome<()> {
    export_scatter(r, &out.join(format!("{prefix}scatter.csv"))).runtime()?;
    export_histogram(r, &out.join(format!("{prefix}histogram.csv")), bins).runtime()
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Outcome<()> {
    let Loaded { archive, samples } = load_inputs(&args.input)?;
    let heatmapper = bind(&args.method, &archive)?;
    if args.tolerances.bins == 0 {
        return Err(config_error("--bins must be positive"));
    }
    let xs = inputs(&samples);
    let report = evaluate(&heatmapper, &xs, args.tolerances.tolerances()).config()?;
    create_dir(&args.out)?;
    write_report_files(&report, &args.out, "", args.tolerances.bins)?;
    export_summary(std::slice::from_ref(&report), &args.out.join("summary.csv")).runtime()?;
    let text = report_text(&report);
    fs::write(args.out.join("report.txt"), &text)
        .context("cannot write report")
        .runtime()?;
    print!("{text}");
    Ok(())
}

/// Every deep Taylor variant and baseline that applies to `archive`.
pub fn default_methods(archive: &ModelArchive) -> Vec<String> {
    let epsilon = if archive.network.num_blocks() == 1 { 10 } else { 3 };
    let mut methods: Vec<String> = [
        "deep-taylor=w2",
        "deep-taylor",
        "sensitivity",
        "sensitivity-raw",
        "nearest-root",
        "lrp-alphabeta=2:1",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    methods.push(format!("lrp-epsilon={epsilon}"));
    if archive.minmax.is_some() {
        methods.insert(2, "minmax".into());
    }
    methods
}

pub fn compare(args: &CompareArgs) -> Outcome<()> {
    let Loaded { archive, samples } = load_inputs(&args.input)?;
    let specs = if args.methods.is_empty() {
        default_methods(&archive)
    } else {
        args.methods.clone()
    };
    if args.tolerances.bins == 0 {
        return Err(config_error("--bins must be positive"));
    }
    let bound = specs.iter().map(|s| bind(s, &archive)).collect::<Outcome<Vec<_>>>()?;
    let xs = inputs(&samples);
    if xs.is_empty() {
        return Err(config_error("no samples to evaluate"));
    }
    create_dir(&args.out)?;
    let mut reports = Vec::new();
    for h in &bound {
        info!("evaluating {}", h.label());
        let r = evaluate(h, &xs, args.tolerances.tolerances()).runtime()?;
        write_report_files(&r, &args.out, &format!("{}.", slug(&r.method)), args.tolerances.bins)?;
        reports.push(r);
    }
    export_summary(&reports, &args.out.join("summary.csv")).runtime()?;
    let table = verdict_table(&reports);
    fs::write(args.out.join("table.txt"), &table)
        .context("cannot write verdict table")
        .runtime()?;
    print!("{table}");
    Ok(())
}
