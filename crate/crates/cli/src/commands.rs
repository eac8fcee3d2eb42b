use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use madec::generation::{read_traces_jsonl, replay_check, DecodingTrace};
use madec::harness::{
    build_suite, evaluate, gamma_sweep, prompt_robustness, weight_distribution_report, LatencyReport, LatencyRow, Suite, DEFAULT_GAMMAS,
};
use madec::numeric::LogitVector;
use madec::provider::wire::{serve, ServeOptions};
use madec::provider::{Context, LogitProvider, ModalityConfig, RandomSpecShape, RemoteOptions, RemoteProvider, SynthModelSpec, SynthProvider};
use madec::rng::SplitMix64;
use madec::vocab::{TokenId, Vocabulary};
use madec::Result as CoreResult;

use crate::config::{LoadedConfig, ProviderKind};
use crate::exit::{CliError, ACCEPTANCE};
use crate::output::{Manifest, RunDir};

pub const SPEC_FILE: &str = "suite.json";
pub const PARITY_TOLERANCE: f64 = 1e-9;

fn build(cfg: &LoadedConfig) -> Result<Suite, CliError> {
    Ok(build_suite(&cfg.suite_config())?)
}

fn remote_options(cfg: &LoadedConfig, vocab: usize) -> RemoteOptions {
    RemoteOptions {
        timeout: Duration::from_millis(cfg.config.provider.timeout_ms),
        expected_vocab: Some(vocab),
        ..RemoteOptions::default()
    }
}

/// The configured provider for `suite`. A bridge command may refer to the
/// suite's spec file as `{spec}`.
pub fn open_provider(cfg: &LoadedConfig, suite: &Suite, spec_path: &Path) -> Result<Box<dyn LogitProvider>, CliError> {
    let p = &cfg.config.provider;
    let opts = remote_options(cfg, suite.spec().vocab().len());
    Ok(match p.kind {
        ProviderKind::Synth => Box::new(suite.provider()),
        ProviderKind::Bridge => match (&p.command, &p.address) {
            (Some(cmd), _) => {
                let spec = spec_path.to_string_lossy();
                let cmd: Vec<String> = cmd.iter().map(|a| a.replace("{spec}", &spec)).collect();
                Box::new(RemoteProvider::spawn(&cmd, opts)?)
            }
            (None, Some(addr)) => Box::new(RemoteProvider::connect_tcp(addr, opts)?),
            (None, None) => return Err(CliError::config("provider: bridge without command or address")),
        },
    })
}

fn spec_json(suite: &Suite) -> Result<String, CliError> {
    serde_json::to_string(suite.spec()).map_err(|e| CliError::new(crate::exit::INTERNAL, e.to_string()))
}

fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item).expect("records serialize"));
        s.push('\n');
    }
    s
}

fn traces_jsonl(traces: &[DecodingTrace]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    for t in traces {
        t.without_timing().write_jsonl(&mut buf).map_err(|e| CliError::io("writing traces", e))?;
    }
    Ok(buf)
}

/// Replays one trace per category (the first of each). Returns
/// `(checked, diverged task ids)`.
fn replay_sample(provider: &dyn LogitProvider, suite: &Suite, cfg: &LoadedConfig, traces: &[DecodingTrace], all: bool) -> Result<(usize, Vec<u64>), CliError> {
    let limits = cfg.eval_options().limits;
    let mut seen = Vec::new();
    let mut diverged = Vec::new();
    let mut checked = 0;
    for t in traces {
        let task = suite
            .task(t.question_id)
            .ok_or_else(|| CliError::acceptance(format!("trace for unknown task {}", t.question_id)))?;
        if !all && seen.contains(&task.category) {
            continue;
        }
        seen.push(task.category);
        let ctx = Context::generation(task.id, task.question.tokens.clone());
        let outcome = replay_check(t, provider, &cfg.params, &ctx, &limits)?;
        checked += 1;
        if !outcome.is_match() {
            diverged.push(task.id);
        }
    }
    Ok((checked, diverged))
}

pub fn run(config: &Path, output: Option<&Path>) -> Result<PathBuf, CliError> {
    let cfg = LoadedConfig::read(config)?;
    let suite = build(&cfg)?;
    let mut dir = RunDir::create(&cfg.output_dir(output))?;
    dir.write(SPEC_FILE, spec_json(&suite)?)?;
    let provider = open_provider(&cfg, &suite, &dir.file(SPEC_FILE))?;
    let e = evaluate(provider.as_ref(), &suite, &cfg.params, &cfg.eval_options())?;

    dir.write("metrics.csv", e.metrics.to_csv())?;
    dir.write("metrics.md", format!("# {}\n\n{}", cfg.params.strategy, e.metrics.to_markdown()))?;
    dir.write("tasks.jsonl", jsonl(e.results.iter().map(|r| madec::harness::TaskResult { ms: None, ..r.clone() })))?;
    dir.write("traces.jsonl", traces_jsonl(&e.traces)?)?;
    let latency = LatencyReport {
        rows: vec![LatencyRow::from_evaluation(&cfg.params, &e)?],
    };
    dir.write("latency.csv", latency.to_csv())?;

    let (checked, diverged) = replay_sample(provider.as_ref(), &suite, &cfg, &e.traces, false)?;
    let manifest = Manifest::new("run", &cfg.text, cfg.config.seed)
        .note("strategy", cfg.params.strategy.to_string())
        .note("gamma", cfg.params.gamma)
        .note("tasks", suite.len())
        .note("accuracy", e.metrics.accuracy())
        .note("replay_checked", checked)
        .note("replay_diverged", diverged.clone());
    let path = dir.finish(manifest)?;
    println!("{}: accuracy {:.4} over {} tasks", path.display(), e.metrics.accuracy(), suite.len());
    if !diverged.is_empty() {
        return Err(CliError::acceptance(format!("replay diverged for tasks {diverged:?}")));
    }
    Ok(path)
}

pub fn sweep(config: &Path, gammas: Option<Vec<f64>>, output: Option<&Path>) -> Result<PathBuf, CliError> {
    let cfg = LoadedConfig::read(config)?;
    let gammas = gammas.unwrap_or_else(|| DEFAULT_GAMMAS.to_vec());
    if gammas.is_empty() {
        return Err(CliError::config("--gammas: empty list"));
    }
    if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        return Err(CliError::config(format!("--gammas: {g} is not a finite value >= 0")));
    }
    let suite = build(&cfg)?;
    let mut dir = RunDir::create(&cfg.output_dir(output))?;
    dir.write(SPEC_FILE, spec_json(&suite)?)?;
    let provider = open_provider(&cfg, &suite, &dir.file(SPEC_FILE))?;
    let table = gamma_sweep(provider.as_ref(), &suite, &cfg.params, &gammas, &cfg.eval_options())?;
    dir.write("sweep.csv", table.to_csv())?;
    dir.write("sweep.md", table.to_markdown())?;
    let manifest = Manifest::new("sweep", &cfg.text, cfg.config.seed)
        .note("strategy", cfg.params.strategy.to_string())
        .note("gammas", gammas.clone())
        .note("tasks", suite.len());
    let path = dir.finish(manifest)?;
    print!("{}", table.to_markdown());
    Ok(path)
}

pub fn weights(config: &Path, output: Option<&Path>) -> Result<PathBuf, CliError> {
    let cfg = LoadedConfig::read(config)?;
    let suite = build(&cfg)?;
    let mut dir = RunDir::create(&cfg.output_dir(output))?;
    dir.write(SPEC_FILE, spec_json(&suite)?)?;
    let provider = open_provider(&cfg, &suite, &dir.file(SPEC_FILE))?;
    let prompt = cfg.prompts.get(cfg.config.decoding.prompt)?;
    let report = weight_distribution_report(provider.as_ref(), &suite, prompt)?;
    let robust = prompt_robustness(provider.as_ref(), &suite, &cfg.prompts, &cfg.params, &cfg.eval_options())?;
    dir.write("weights.csv", report.to_csv())?;
    dir.write("weights.md", report.to_markdown())?;
    dir.write("prompts.csv", robust.to_csv())?;
    dir.write("prompts.md", robust.to_markdown())?;
    let manifest = Manifest::new("weights", &cfg.text, cfg.config.seed)
        .note("pattern_holds", report.pattern_holds())
        .note("prompt_std", robust.std)
        .note("tasks", suite.len());
    let path = dir.finish(manifest)?;
    print!("{}\n{}", report.to_markdown(), robust.to_markdown());
    Ok(path)
}

pub fn suite_check(config: &Path) -> Result<(), CliError> {
    let cfg = LoadedConfig::read(config)?;
    let suite = build(&cfg)?;
    let bad = suite.verify()?;
    for (id, why) in &bad {
        eprintln!("task {id}: {why}");
    }
    if bad.is_empty() {
        println!("{} tasks, all certificates hold", suite.len());
        Ok(())
    } else {
        Err(CliError::acceptance(format!("{} of {} tasks fail their certificate", bad.len(), suite.len())))
    }
}

pub fn replay(run_dir: &Path, all: bool) -> Result<(), CliError> {
    let manifest_path = run_dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&format!("reading {}", manifest_path.display()), e))?;
    let manifest: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", manifest_path.display())))?;
    let config_text = manifest["config"]
        .as_str()
        .ok_or_else(|| CliError::config("manifest has no config text"))?;
    let cfg = LoadedConfig::parse(config_text)?;
    let suite = build(&cfg)?;
    let traces_path = run_dir.join("traces.jsonl");
    let file = File::open(&traces_path).map_err(|e| CliError::io(&format!("reading {}", traces_path.display()), e))?;
    let traces = read_traces_jsonl(BufReader::new(file))?;
    let provider = open_provider(&cfg, &suite, &run_dir.join(SPEC_FILE))?;
    let (checked, diverged) = replay_sample(provider.as_ref(), &suite, &cfg, &traces, all)?;
    if diverged.is_empty() {
        println!("replayed {checked} traces, all match");
        Ok(())
    } else {
        Err(CliError::acceptance(format!("replay diverged for tasks {diverged:?}")))
    }
}

pub fn load_spec(seed: u64, spec: Option<&Path>) -> Result<SynthModelSpec, CliError> {
    match spec {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
        }
        None => Ok(SynthModelSpec::random(seed, RandomSpecShape::default())?),
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParityReport {
    pub pairs: usize,
    pub max_deviation: f64,
    pub argmax_mismatches: usize,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= PARITY_TOLERANCE && self.argmax_mismatches == 0
    }
}

/// `n` seeded (configuration, context) pairs over `spec`: random question,
/// configuration, short prefix, and one in four in query mode.
pub fn parity_pairs(spec: &SynthModelSpec, n: usize, seed: u64, prompts: u32) -> Vec<(ModalityConfig, Context)> {
    let mut g = SplitMix64::new(seed);
    let content = spec.vocab().content_ids();
    let eos = spec.vocab().eos();
    let nq = spec.questions().len() as u64;
    (0..n)
        .map(|_| {
            let q = &spec.questions()[g.below(nq) as usize];
            let cfg = ModalityConfig::ALL[g.below(4) as usize];
            let len = g.below(4);
            let mut prefix: Vec<TokenId> = (0..len).map(|_| content[g.below(content.len() as u64) as usize]).collect();
            if g.below(5) == 0 {
                prefix.push(eos);
            }
            let ctx = Context::generation(q.id, q.tokens.clone())
                .with_prefix(prefix, eos)
                .expect("EOS only at the end");
            if prompts > 0 && g.below(4) == 0 {
                (ModalityConfig::CLEAN, ctx.modality_query(g.below(prompts as u64) as u32))
            } else {
                (cfg, ctx)
            }
        })
        .collect()
}

pub fn parity_check(local: &dyn LogitProvider, remote: &dyn LogitProvider, pairs: &[(ModalityConfig, Context)]) -> CoreResult<ParityReport> {
    let mut report = ParityReport {
        pairs: pairs.len(),
        max_deviation: 0.0,
        argmax_mismatches: 0,
    };
    for (cfg, ctx) in pairs {
        let a = local.logits(*cfg, ctx)?;
        let b = remote.logits(*cfg, ctx)?;
        if a.len() != b.len() {
            return Err(madec::ProviderError::Malformed(format!("expected {} logits, got {}", a.len(), b.len())).into());
        }
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            report.max_deviation = report.max_deviation.max((x - y).abs());
        }
        if a.argmax()? != b.argmax()? {
            report.argmax_mismatches += 1;
        }
    }
    Ok(report)
}

pub struct ParityArgs<'a> {
    pub command: &'a [String],
    pub address: Option<&'a str>,
    pub n: usize,
    pub seed: u64,
    pub spec: Option<&'a Path>,
    pub timeout: Duration,
}

pub fn parity(args: ParityArgs<'_>) -> Result<ParityReport, CliError> {
    let spec = load_spec(args.seed, args.spec)?;
    let opts = RemoteOptions {
        timeout: args.timeout,
        expected_vocab: Some(spec.vocab().len()),
        ..RemoteOptions::default()
    };
    let remote = match (args.command.is_empty(), args.address) {
        (false, None) => RemoteProvider::spawn(args.command, opts)?,
        (true, Some(addr)) => RemoteProvider::connect_tcp(addr, opts)?,
        _ => return Err(CliError::config("parity needs exactly one of --address or a bridge command after --")),
    };
    let prompts = spec.questions().iter().map(|q| q.meta_jitter.len()).min().unwrap_or(0).max(1) as u32;
    let pairs = parity_pairs(&spec, args.n, args.seed, prompts);
    let local = SynthProvider::new(spec);
    let report = parity_check(&local, &remote, &pairs)?;
    println!(
        "{} pairs, max deviation {:e}, argmax mismatches {}",
        report.pairs, report.max_deviation, report.argmax_mismatches
    );
    if report.passed() {
        Ok(report)
    } else {
        Err(CliError::new(ACCEPTANCE, format!("parity failed: {report:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Announce one token more than the spec has.
    WrongVocab,
    /// Drop the last logit of every response.
    Truncate,
    /// Never answer a logits request.
    Stall,
}

struct FaultyProvider {
    inner: SynthProvider,
    vocab: Vocabulary,
    fault: Option<Fault>,
}

impl FaultyProvider {
    fn new(spec: SynthModelSpec, fault: Option<Fault>) -> CoreResult<Self> {
        let vocab = match fault {
            Some(Fault::WrongVocab) => Vocabulary::placeholder(spec.vocab().len() + 1, spec.vocab().special())?,
            _ => spec.vocab().clone(),
        };
        Ok(Self {
            inner: SynthProvider::new(spec),
            vocab,
            fault,
        })
    }
}

impl LogitProvider for FaultyProvider {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> CoreResult<LogitVector> {
        let out = self.inner.logits(cfg, ctx)?;
        match self.fault {
            Some(Fault::Truncate) => {
                let mut v = out.into_inner();
                v.pop();
                LogitVector::new(v)
            }
            Some(Fault::Stall) => loop {
                std::thread::sleep(Duration::from_secs(3600));
            },
            _ => Ok(out),
        }
    }

    fn calls(&self) -> u64 {
        self.inner.calls()
    }
}

fn serve_one<R: BufRead, W: Write>(spec: &SynthModelSpec, fault: Option<Fault>, input: R, output: W) -> Result<(), CliError> {
    let provider = FaultyProvider::new(spec.clone(), fault)?;
    serve(&provider, |t| spec.question_by_tokens(t), input, output, &ServeOptions::default())?;
    Ok(())
}

/// Serves a synthetic spec over stdio, or over TCP when `listen` is set.
pub fn mock_bridge(seed: u64, spec: Option<&Path>, fault: Option<Fault>, listen: Option<&str>) -> Result<(), CliError> {
    let spec = Arc::new(load_spec(seed, spec)?);
    match listen {
        None => serve_one(&spec, fault, io::stdin().lock(), io::stdout().lock()),
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| CliError::io(&format!("binding {addr}"), e))?;
            eprintln!("listening on {}", listener.local_addr().map_err(|e| CliError::io("local address", e))?);
            for stream in listener.incoming() {
                let stream = stream.map_err(|e| CliError::io("accepting", e))?;
                let spec = spec.clone();
                std::thread::spawn(move || {
                    let reader = match stream.try_clone() {
                        Ok(s) => BufReader::new(s),
                        Err(_) => return,
                    };
                    if let Err(e) = serve_one(&spec, fault, reader, stream) {
                        eprintln!("connection closed: {e}");
                    }
                });
            }
            Ok(())
        }
    }
}
