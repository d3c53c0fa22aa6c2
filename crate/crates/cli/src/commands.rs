use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bpo_core::boundary::{sweep_interpolation, transition_interval, write_sweep_csv, SweepCurve};
use bpo_core::embed::{Vocab, DEFAULT_DIM, DEFAULT_VOCAB_SIZE};
use bpo_core::endpoint::{ModelEndpoint, ProviderConfig};
use bpo_core::model_sim::DEFAULT_FAMILY_SEED;
use bpo_core::pipeline::{run_pipeline, PipelineArtifact};
use bpo_core::rng::derive_seed;
use bpo_core::suffix_opt::AttackConfig;
use bpo_core::verify::{
    config_digest, evaluate_prompt, fresh_user_seed, owner_phase, run_benchmark_kinds, user_phase, write_bench_csv,
    BenchmarkReport, ConsistencyReport, Method, PromptKind, VerificationPackage, Verdict, VerifyConfig,
};
use bpo_core::{build_family, default_family, BpoError, ModelRegistry};
use bpo_service::{HttpEndpoint, ProvidersFile, ServiceState};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::{io_err, CliError, Result};

const SWEEP_STREAM: u64 = 0x7377_6570;
const TARGET_REPORT_STREAM: u64 = 0x7472_7074;

/// Where the model family comes from.
#[derive(Args, Clone, Debug)]
pub struct FamilySource {
    /// Registry JSON written by `bpo family`. Without it the default family is built.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Seed of the default family.
    #[arg(long, default_value_t = DEFAULT_FAMILY_SEED)]
    pub family_seed: u64,
}

impl FamilySource {
    pub fn load(&self) -> Result<ModelRegistry> {
        Ok(match &self.registry {
            Some(path) => ModelRegistry::read(path)?,
            None => default_family(self.family_seed)?,
        })
    }
}

/// Attack and protocol settings shared by pipeline, bench, ablate and owner.
#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    #[arg(long, default_value_t = 8)]
    pub suffix_len: usize,
    /// Iteration cap K for each suffix search.
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Candidates B per search step.
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub top_k: usize,
    /// Generations per flip check.
    #[arg(long, default_value_t = 5)]
    pub votes: usize,
    #[arg(long, default_value_t = 0.001)]
    pub epsilon: f64,
    /// Images N per consistency score.
    #[arg(long, default_value_t = 10)]
    pub n_images: usize,
    /// Pipeline runs kept per benign prompt.
    #[arg(long, default_value_t = 10)]
    pub candidates: usize,
    #[arg(long, default_value_t = 3)]
    pub retry_budget: usize,
    #[arg(long = "seed", visible_alias = "master-seed", default_value_t = 0)]
    pub master_seed: u64,
    /// Benign prompts, one per line. Defaults to the registry's list.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Use only the first COUNT benign prompts.
    #[arg(long, value_name = "COUNT")]
    pub prompt_count: Option<usize>,
}

impl RunArgs {
    pub fn verify_config(&self) -> VerifyConfig {
        VerifyConfig {
            attack: AttackConfig {
                suffix_len: self.suffix_len,
                max_iters: self.max_iters,
                batch_size: self.batch_size,
                top_k: self.top_k,
                votes: self.votes,
                seed: self.master_seed,
                enumerate: false,
            },
            epsilon: self.epsilon,
            n_images: self.n_images,
            per_prompt_candidates: self.candidates,
            retry_budget: self.retry_budget,
            master_seed: self.master_seed,
        }
    }

    /// Replaces the family's benign prompts per `--prompts` / `--prompt-count`.
    pub fn apply_prompts(&self, family: &mut ModelRegistry) -> Result<()> {
        if let Some(path) = &self.prompts {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            family.benign_prompts = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        }
        if let Some(count) = self.prompt_count {
            if count == 0 || count > family.benign_prompts.len() {
                return Err(CliError::Usage(format!(
                    "--prompt-count {count} outside 1..={}",
                    family.benign_prompts.len()
                )));
            }
            family.benign_prompts.truncate(count);
        }
        if family.benign_prompts.is_empty() {
            return Err(CliError::Usage("no benign prompts".into()));
        }
        for p in &family.benign_prompts {
            family.tokenize(p)?;
        }
        Ok(())
    }
}

/// Everything that determines a run's output; its digest tags every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub registry_digest: String,
    pub family_seed: u64,
    pub verify: VerifyConfig,
    pub benign_prompts: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<Method>,
}

impl RunConfig {
    fn new(command: &str, family: &ModelRegistry, verify: &VerifyConfig, methods: Vec<Method>) -> Result<Self> {
        Ok(RunConfig {
            command: command.into(),
            registry_digest: config_digest(&family.to_json()?)?,
            family_seed: family.family_seed,
            verify: verify.clone(),
            benign_prompts: family.benign_prompts.clone(),
            methods,
        })
    }

    pub fn digest(&self) -> Result<String> {
        Ok(config_digest(self)?)
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(BpoError::from)?;
    text.push('\n');
    write_text(path, &text)
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Target => "target",
        Verdict::NotTarget => "not_target",
    }
}

fn timed<T>(what: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    log::info!("{what} took {:.2?}", start.elapsed());
    out
}

// ---------------------------------------------------------------- family

#[derive(Args, Clone, Debug)]
pub struct FamilyArgs {
    #[arg(long, default_value_t = DEFAULT_FAMILY_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub models: usize,
    #[arg(long, default_value_t = 8)]
    pub concepts: usize,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
    /// Images per grid point in the divergence summary.
    #[arg(long, default_value_t = 1000)]
    pub summary_images: usize,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub margin_shift: f64,
    pub temperature: f64,
    pub transition_interval: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub a: String,
    pub b: String,
    /// Largest endpoint difference of the two transition intervals.
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family_seed: u64,
    pub path_from: String,
    pub path_to: String,
    pub models: Vec<ModelSummary>,
    pub pairs: Vec<PairGap>,
}

fn interval_gap(a: Option<(f64, f64)>, b: Option<(f64, f64)>) -> Option<f64> {
    let (a, b) = (a?, b?);
    Some((a.0 - b.0).abs().max((a.1 - b.1).abs()))
}

fn default_path(family: &ModelRegistry) -> (String, String) {
    (
        format!("a photo of a {}", family.concepts[0].label),
        format!("a photo of a {}", family.concepts[1].label),
    )
}

/// Sweeps every listed model along `from → to` with the origin of `from`.
pub fn sweep_models(
    family: &ModelRegistry,
    model_ids: &[String],
    from: &str,
    to: &str,
    step: f64,
    n_images: usize,
    seed: u64,
) -> Result<Vec<SweepCurve>> {
    let a = family.tokenize(from)?;
    let b = family.tokenize(to)?;
    let first = family.model(&model_ids[0])?;
    let origin = family.origin_concept(first, &a)?;
    model_ids
        .iter()
        .map(|id| {
            let m = family.model(id)?;
            let seed_base = derive_seed(&[seed, SWEEP_STREAM]);
            Ok(sweep_interpolation(family, m, &m.encode(&a)?, &m.encode(&b)?, origin, step, n_images, seed_base)?)
        })
        .collect()
}

pub fn intervals(curves: &[SweepCurve]) -> Result<Vec<Option<(f64, f64)>>> {
    curves.iter().map(|c| Ok(transition_interval(c, 0.05, 0.95)?)).collect()
}

fn pair_gaps(ids: &[String], iv: &[Option<(f64, f64)>]) -> Vec<PairGap> {
    let mut pairs = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            pairs.push(PairGap { a: ids[i].clone(), b: ids[j].clone(), gap: interval_gap(iv[i], iv[j]) });
        }
    }
    pairs
}

fn fmt_interval(iv: Option<(f64, f64)>) -> String {
    match iv {
        Some((a, b)) => format!("[{a:.2}, {b:.2}]"),
        None => "none".into(),
    }
}

pub fn cmd_family(args: &FamilyArgs) -> Result<FamilySummary> {
    let vocab = Vocab::builtin(args.vocab_size)?;
    let family = timed("family build", || Ok(build_family(args.seed, args.models, args.concepts, args.dim, &vocab)?))?;
    prepare_dir(&args.output_dir)?;
    family.write(&args.output_dir.join("registry.json"))?;

    let ids: Vec<String> = family.models.iter().map(|m| m.id.clone()).collect();
    let (from, to) = default_path(&family);
    let curves = sweep_models(&family, &ids, &from, &to, 0.05, args.summary_images, args.seed)?;
    let iv = intervals(&curves)?;
    let summary = FamilySummary {
        family_seed: args.seed,
        models: family
            .models
            .iter()
            .zip(&iv)
            .map(|(m, &iv)| ModelSummary {
                model_id: m.id.clone(),
                margin_shift: m.margin_shift,
                temperature: m.temperature,
                transition_interval: iv,
            })
            .collect(),
        pairs: pair_gaps(&ids, &iv),
        path_from: from,
        path_to: to,
    };
    write_json(&args.output_dir.join("family_summary.json"), &summary)?;
    println!("transition intervals along {:?} -> {:?}:", summary.path_from, summary.path_to);
    for m in &summary.models {
        println!("  {}  delta={:+.3} tau={:.3}  {}", m.model_id, m.margin_shift, m.temperature, fmt_interval(m.transition_interval));
    }
    let min_gap = summary.pairs.iter().filter_map(|p| p.gap).fold(f64::INFINITY, f64::min);
    println!("smallest pairwise endpoint gap: {min_gap:.2}");
    Ok(summary)
}

// ---------------------------------------------------------------- sweep

#[derive(Args, Clone, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub family: FamilySource,
    /// Comma-separated model ids; all models by default.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Start prompt; its concept is the origin. Defaults to the first concept.
    #[arg(long)]
    pub from: Option<String>,
    #[arg(long)]
    pub to: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = 10)]
    pub n_images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub from: String,
    pub to: String,
    pub step: f64,
    pub n_images: usize,
    pub seed: u64,
    pub intervals: Vec<(String, Option<(f64, f64)>)>,
    pub pairs: Vec<PairGap>,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepSummary> {
    let family = args.family.load()?;
    let ids = if args.models.is_empty() {
        family.models.iter().map(|m| m.id.clone()).collect()
    } else {
        args.models.clone()
    };
    let (def_from, def_to) = default_path(&family);
    let from = args.from.clone().unwrap_or(def_from);
    let to = args.to.clone().unwrap_or(def_to);
    let curves = timed("sweep", || sweep_models(&family, &ids, &from, &to, args.step, args.n_images, args.seed))?;
    prepare_dir(&args.output_dir)?;
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &curves)?;
    fs::write(args.output_dir.join("sweep.csv"), csv).map_err(io_err(&args.output_dir))?;
    let iv = intervals(&curves)?;
    let summary = SweepSummary {
        intervals: ids.iter().cloned().zip(iv.iter().copied()).collect(),
        pairs: pair_gaps(&ids, &iv),
        from,
        to,
        step: args.step,
        n_images: args.n_images,
        seed: args.seed,
    };
    write_json(&args.output_dir.join("sweep_summary.json"), &summary)?;
    for (id, iv) in &summary.intervals {
        println!("{id}  {}", fmt_interval(*iv));
    }
    Ok(summary)
}

// ---------------------------------------------------------------- pipeline

#[derive(Args, Clone, Debug)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub family: FamilySource,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "model-0")]
    pub model: String,
    /// Benign prompt; defaults to the first benign prompt of the family.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub config_digest: String,
    pub run_config: RunConfig,
    pub artifact: PipelineArtifact,
    /// P_v scored on the target itself.
    pub target_report: ConsistencyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineFailure {
    pub config_digest: String,
    pub model_id: String,
    pub benign_prompt: String,
    pub stage: String,
    pub error_kind: String,
    pub message: String,
}

fn failure_kind(e: &BpoError) -> Option<(&'static str, &'static str)> {
    match e {
        BpoError::NotFound(_) => Some(("stage1", "not_found")),
        BpoError::InitialPromptFlipped => Some(("stage1", "initial_prompt_flipped")),
        BpoError::EndpointsAgree => Some(("stage2", "endpoints_agree")),
        _ => None,
    }
}

pub fn cmd_pipeline(args: &PipelineArgs) -> Result<PipelineOutput> {
    let mut family = args.family.load()?;
    args.run.apply_prompts(&mut family)?;
    let cfg = args.run.verify_config();
    cfg.validate(family.vocab.len())?;
    let model = family.model(&args.model)?.clone();
    let text = args.prompt.clone().unwrap_or_else(|| family.benign_prompts[0].clone());
    let benign = family.tokenize(&text)?;
    let run_config = RunConfig::new("pipeline", &family, &cfg, Vec::new())?;
    let digest = run_config.digest()?;
    prepare_dir(&args.output_dir)?;

    let run = match timed("pipeline", || Ok(run_pipeline(&family, &model, &benign, &cfg.attack, cfg.epsilon)?)) {
        Ok(run) => run,
        Err(CliError::Core(e)) => {
            if let Some((stage, kind)) = failure_kind(&e) {
                let record = PipelineFailure {
                    config_digest: digest,
                    model_id: model.id.clone(),
                    benign_prompt: text,
                    stage: stage.into(),
                    error_kind: kind.into(),
                    message: e.to_string(),
                };
                write_json(&args.output_dir.join("pipeline_failure.json"), &record)?;
            }
            return Err(e.into());
        }
        Err(e) => return Err(e),
    };
    let artifact = PipelineArtifact::new(&run, &model, &benign, &cfg.attack, cfg.epsilon, &family.vocab);
    let endpoint = ModelEndpoint::new(&family, &model);
    let target_report = evaluate_prompt(
        &endpoint,
        &family,
        &artifact.verification_prompt.text,
        &artifact.origin_concept,
        cfg.n_images,
        derive_seed(&[cfg.master_seed, TARGET_REPORT_STREAM]),
    )?;
    let out = PipelineOutput { config_digest: digest, run_config, artifact, target_report };
    write_json(&args.output_dir.join("pipeline.json"), &out)?;
    println!(
        "{}: flip at iteration {}, boundary alpha {:.4}, P_v {:?}, C_t {}",
        model.id, out.artifact.flip_iter, out.artifact.boundary.alpha_star, out.artifact.verification_prompt.text, out.target_report.c
    );
    Ok(out)
}

// ---------------------------------------------------------------- bench

/// `A..B` or `A..B:STEP`, inclusive.
pub fn parse_range(s: &str, default_step: usize) -> Result<Vec<usize>> {
    let bad = || CliError::Usage(format!("bad range {s:?}, expected A..B or A..B:STEP"));
    let (span, step) = match s.split_once(':') {
        Some((span, step)) => (span, step.parse::<usize>().map_err(|_| bad())?),
        None => (s, default_step),
    };
    let (a, b) = span.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let (a, b) = (a.parse::<usize>().map_err(|_| bad())?, b.parse::<usize>().map_err(|_| bad())?);
    if step == 0 || a == 0 || a > b {
        return Err(bad());
    }
    Ok((a..=b).step_by(step).collect())
}

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub family: FamilySource,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "normal,random,greedy,bpo")]
    pub methods: Vec<Method>,
    /// Also rerun with N images over a range, e.g. `5..20` (step 5).
    #[arg(long, value_name = "RANGE")]
    pub sweep_n: Option<String>,
    /// Also rerun with suffix lengths over a range, e.g. `5..10` (step 1).
    #[arg(long, value_name = "RANGE")]
    pub sweep_suffix: Option<String>,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub config_digest: String,
    pub run_config: RunConfig,
    pub reports: Vec<BenchmarkReport>,
    /// Package files written for this run, relative to the output directory.
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyPoint {
    pub value: usize,
    pub config_digest: String,
    pub reports: Vec<BenchmarkReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub parameter: String,
    pub points: Vec<StudyPoint>,
}

fn bench_reports(family: &ModelRegistry, methods: &[Method], cfg: &VerifyConfig) -> Result<Vec<BenchmarkReport>> {
    let mut reports = Vec::new();
    for &method in methods {
        let mut r = timed(&format!("bench {method}"), || {
            Ok(run_benchmark_kinds(family, method, &[PromptKind::PV], cfg)?)
        })?;
        reports.append(&mut r);
    }
    Ok(reports)
}

fn write_packages(dir: &Path, reports: &[BenchmarkReport]) -> Result<Vec<String>> {
    let pkg_dir = dir.join("packages");
    prepare_dir(&pkg_dir)?;
    let mut paths = Vec::new();
    for rep in reports {
        for row in &rep.rows {
            if let Some(pkg) = &row.package {
                let name = format!("packages/{}-{}-{}.json", rep.method, rep.prompt_kind, row.target);
                write_text(&dir.join(&name), &pkg.to_json()?)?;
                paths.push(name);
            }
        }
    }
    Ok(paths)
}

fn csv_of(reports: &[BenchmarkReport]) -> Result<String> {
    let mut buf = Vec::new();
    write_bench_csv(&mut buf, reports)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

fn print_averages(reports: &[BenchmarkReport]) {
    for rep in reports {
        match &rep.average {
            Some(m) => println!(
                "{:<7} {:<6} acc {:.2}  prec {:.2}  rec {:.2}  f1 {:.2}  failed targets {}",
                rep.method, rep.prompt_kind, m.accuracy, m.precision, m.recall, m.f1, rep.failed_targets
            ),
            None => println!("{:<7} {:<6} no successful target", rep.method, rep.prompt_kind),
        }
    }
}

fn run_study(
    family: &ModelRegistry,
    methods: &[Method],
    base: &VerifyConfig,
    parameter: &str,
    values: &[usize],
    dir: &Path,
) -> Result<Study> {
    let mut points = Vec::new();
    let mut csv = format!("{parameter},");
    for &v in values {
        let mut cfg = base.clone();
        match parameter {
            "n_images" => cfg.n_images = v,
            _ => cfg.attack.suffix_len = v,
        }
        let rc = RunConfig::new("bench", family, &cfg, methods.to_vec())?;
        let reports = bench_reports(family, methods, &cfg)?;
        let body = csv_of(&reports)?;
        let mut lines = body.lines();
        if points.is_empty() {
            csv.push_str(lines.next().unwrap_or_default());
            csv.push('\n');
        } else {
            lines.next();
        }
        for line in lines {
            csv.push_str(&format!("{v},{line}\n"));
        }
        points.push(StudyPoint { value: v, config_digest: rc.digest()?, reports });
    }
    let study = Study { parameter: parameter.into(), points };
    let stem = if parameter == "n_images" { "sweep_n" } else { "sweep_suffix" };
    write_json(&dir.join(format!("{stem}.json")), &study)?;
    write_text(&dir.join(format!("{stem}.csv")), &csv)?;
    Ok(study)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchOutput> {
    if args.methods.is_empty() {
        return Err(CliError::Usage("no methods given".into()));
    }
    let mut family = args.family.load()?;
    args.run.apply_prompts(&mut family)?;
    let cfg = args.run.verify_config();
    cfg.validate(family.vocab.len())?;
    let sweep_n = args.sweep_n.as_deref().map(|s| parse_range(s, 5)).transpose()?;
    let sweep_suffix = args.sweep_suffix.as_deref().map(|s| parse_range(s, 1)).transpose()?;
    prepare_dir(&args.output_dir)?;

    let run_config = RunConfig::new("bench", &family, &cfg, args.methods.clone())?;
    let reports = bench_reports(&family, &args.methods, &cfg)?;
    let artifacts = write_packages(&args.output_dir, &reports)?;
    let out = BenchOutput { config_digest: run_config.digest()?, run_config, reports, artifacts };
    write_json(&args.output_dir.join("bench.json"), &out)?;
    write_text(&args.output_dir.join("bench.csv"), &csv_of(&out.reports)?)?;
    print_averages(&out.reports);

    if let Some(values) = sweep_n {
        run_study(&family, &args.methods, &cfg, "n_images", &values, &args.output_dir)?;
    }
    if let Some(values) = sweep_suffix {
        run_study(&family, &args.methods, &cfg, "suffix_len", &values, &args.output_dir)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------- ablate

#[derive(Args, Clone, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub family: FamilySource,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "out")]
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    pub config_digest: String,
    pub run_config: RunConfig,
    pub reports: Vec<BenchmarkReport>,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationOutput> {
    let mut family = args.family.load()?;
    args.run.apply_prompts(&mut family)?;
    let cfg = args.run.verify_config();
    cfg.validate(family.vocab.len())?;
    prepare_dir(&args.output_dir)?;
    let run_config = RunConfig::new("ablate", &family, &cfg, vec![Method::Bpo])?;
    let reports = timed("ablation", || Ok(run_benchmark_kinds(&family, Method::Bpo, &PromptKind::ALL, &cfg)?))?;
    let out = AblationOutput { config_digest: run_config.digest()?, run_config, reports };
    write_json(&args.output_dir.join("ablation.json"), &out)?;
    write_text(&args.output_dir.join("ablation.csv"), &csv_of(&out.reports)?)?;
    print_averages(&out.reports);
    Ok(out)
}

// ---------------------------------------------------------------- owner

#[derive(Args, Clone, Debug)]
pub struct OwnerArgs {
    #[command(flatten)]
    pub family: FamilySource,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "model-0")]
    pub model: String,
    #[arg(long, default_value = "bpo")]
    pub method: Method,
    #[arg(long, default_value = "out/package.json")]
    pub output: PathBuf,
}

pub fn cmd_owner(args: &OwnerArgs) -> Result<VerificationPackage> {
    let mut family = args.family.load()?;
    args.run.apply_prompts(&mut family)?;
    let cfg = args.run.verify_config();
    let model = family.model(&args.model)?.clone();
    let pkg = timed("owner phase", || Ok(owner_phase(&family, &model, args.method, &family.benign_prompts, &cfg)?))?;
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    write_text(&args.output, &pkg.to_json()?)?;
    println!("{}: {:?} C_t {}", pkg.target_model_id, pkg.verification_prompt.text, pkg.c_t);
    Ok(pkg)
}

// ---------------------------------------------------------------- serve

#[derive(Args, Clone, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub family: FamilySource,
    /// JSON file `{"providers": [{name, claimed_model_id, actual_model_id}]}`.
    /// Without it every model gets an honest provider named after it.
    #[arg(long)]
    pub providers: Option<PathBuf>,
    #[arg(long, env = "BPO_BIND", default_value = "127.0.0.1:8080")]
    pub bind: String,
}

pub fn service_state(family: ModelRegistry, providers: Option<&Path>) -> Result<ServiceState> {
    let list = match providers {
        Some(path) => ProvidersFile::read(path)?.providers,
        None => family.models.iter().map(|m| ProviderConfig::honest(&m.id, &m.id)).collect(),
    };
    Ok(ServiceState::new(Arc::new(family), list)?)
}

pub fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let state = service_state(args.family.load()?, args.providers.as_deref())?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(io_err(Path::new("runtime")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.bind).await.map_err(io_err(Path::new(&args.bind)))?;
        let addr = listener.local_addr().map_err(io_err(Path::new(&args.bind)))?;
        log::info!("serving on http://{addr}");
        bpo_service::serve(listener, state, bpo_service::shutdown_signal()).await?;
        log::info!("shut down");
        Ok(())
    })
}

// ---------------------------------------------------------------- verify

#[derive(Args, Clone, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub family: FamilySource,
    #[arg(long)]
    pub package: PathBuf,
    /// Provider URL, e.g. `http://127.0.0.1:8080/providers/acme`.
    #[arg(long)]
    pub endpoint: String,
    /// User seed; the seed schedule is derived from it, the target and the endpoint.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10.0)]
    pub timeout_secs: f64,
    /// Also write the consistency report here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutput {
    pub endpoint: String,
    pub target_model_id: String,
    pub verdict: Verdict,
    pub c_v: f64,
    pub c_t: f64,
    pub report: ConsistencyReport,
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<VerifyOutput> {
    let family = args.family.load()?;
    let text = fs::read_to_string(&args.package).map_err(io_err(&args.package))?;
    let pkg = VerificationPackage::from_json(&text)?;
    if !(args.timeout_secs > 0.0) {
        return Err(CliError::Usage("--timeout-secs must be positive".into()));
    }
    let endpoint = HttpEndpoint::with_timeout(&args.endpoint, Duration::from_secs_f64(args.timeout_secs));
    let seed = fresh_user_seed(args.seed, &pkg.target_model_id, &args.endpoint);
    let (verdict, report) = timed("user phase", || Ok(user_phase(&pkg, &endpoint, &family, seed)?))?;
    let out = VerifyOutput {
        endpoint: args.endpoint.clone(),
        target_model_id: pkg.target_model_id.clone(),
        verdict,
        c_v: report.c,
        c_t: pkg.c_t,
        report,
    };
    if let Some(path) = &args.output {
        write_json(path, &out)?;
    }
    println!("{} c_v={} c_t={}", verdict_name(verdict), out.c_v, out.c_t);
    Ok(out)
}
