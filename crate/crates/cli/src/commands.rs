use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};

use retouch_core::assessment::{assess as rank, AssessmentConfig};
use retouch_core::backends::Backends;
use retouch_core::diffusion::{DiffusionSchedule, RetouchConfig};
use retouch_core::io::{read_image, write_atomic, write_image, write_mask};
use retouch_core::mask_gen::{generate_mask, MaskGenConfig};
use retouch_core::metrics::{evaluate_manifest, load_manifest, VariantSpec};
use retouch_core::pipeline::{edit_region, region_for, PipelineConfig, Stage, StageError};
use retouch_core::protocol::{serve as serve_stream, serve_listener};
use retouch_core::{Error, Image, TextPrompt};

use crate::{AssessArgs, AssessOpts, EvalArgs, GenOpts, MaskArgs, MaskOpts, RunArgs, ServeArgs};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NO_MATCH: u8 = 3;
pub const EXIT_BACKEND: u8 = 4;
pub const EXIT_RETOUCH: u8 = 5;
pub const EXIT_ASSESS: u8 = 6;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: anyhow::Error) -> Self {
        Self { code: EXIT_USAGE, error }
    }

    fn stage(e: StageError) -> Self {
        let code = match (&e.source, e.stage) {
            (Error::NoMatchingEntity, _) => EXIT_NO_MATCH,
            (_, Stage::Retouch) => EXIT_RETOUCH,
            (_, Stage::Assess) => EXIT_ASSESS,
            (src, Stage::Mask) if src.is_backend() => EXIT_BACKEND,
            _ => EXIT_USAGE,
        };
        Self { code, error: e.into() }
    }
}

type CmdResult = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(context: &'static str) -> impl FnOnce(E) -> Failure {
    move |e| Failure::usage(e.into().context(context))
}

fn backends(selector: Option<&str>, sched: &DiffusionSchedule) -> Result<Backends, Failure> {
    Backends::resolve_default(selector, sched).map_err(|e| {
        let code = if matches!(e, Error::InvalidArgument(_)) { EXIT_USAGE } else { EXIT_BACKEND };
        Failure { code, error: anyhow::Error::new(e).context("backend unavailable") }
    })
}

fn backend_json(b: &Backends) -> Value {
    json!({ "descriptor": b.descriptor, "identifiers": b.identifiers })
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn mask_config(opts: &MaskOpts) -> MaskGenConfig {
    let mut c = MaskGenConfig { fixed_tau: opts.fixed_tau, crop_to_bbox: opts.crop_to_bbox, ..Default::default() };
    if let Some(f) = opts.floor {
        c.floor = f;
    }
    c
}

fn assessment_config(opts: &AssessOpts) -> Result<AssessmentConfig, Failure> {
    let mut c = AssessmentConfig { enable_cma: !opts.no_cma, enable_iqa: !opts.no_iqa, ..Default::default() };
    if let Some(a) = opts.alpha {
        c.alpha = a;
    }
    c.validate().map_err(usage("invalid assessment settings"))?;
    Ok(c)
}

/// Config file first, then explicit flags. Giving `--m` or `--seed`
/// regenerates the seed list as `seed, seed + 1, ...`.
fn retouch_config(opts: &GenOpts) -> Result<RetouchConfig, Failure> {
    let mut c = match &opts.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(usage("reading --config"))?;
            serde_json::from_str(&text).map_err(usage("parsing --config"))?
        }
        None => RetouchConfig::default(),
    };
    if opts.proposals.is_some() || opts.seed.is_some() {
        let m = opts.proposals.unwrap_or(c.proposals);
        let base = opts.seed.unwrap_or_else(|| c.seeds.first().copied().unwrap_or(0));
        let seeded = RetouchConfig::with_base_seed(m, base);
        c.proposals = seeded.proposals;
        c.seeds = seeded.seeds;
    }
    if let Some(t) = opts.steps {
        c.steps = t;
    }
    if let Some(eta) = opts.eta {
        c.eta = eta;
    }
    c.validate().map_err(usage("invalid retouch settings"))?;
    Ok(c)
}

fn pipeline_config(mask: &MaskOpts, gen: &GenOpts) -> Result<PipelineConfig, Failure> {
    Ok(PipelineConfig {
        mask: mask_config(mask),
        retouch: retouch_config(gen)?,
        assessment: assessment_config(&gen.assess)?,
    })
}

fn prompt(text: &str, query: bool) -> Result<TextPrompt, Failure> {
    let p = if query { TextPrompt::query(text) } else { TextPrompt::conditional(text) };
    p.map_err(usage("invalid prompt"))
}

fn load(path: &Path) -> Result<Image, Failure> {
    read_image(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::usage)
}

fn io_failure(e: anyhow::Error) -> Failure {
    Failure::usage(e)
}

pub fn mask(args: &MaskArgs, backend: Option<&str>) -> CmdResult {
    let config = mask_config(&args.mask);
    let query = prompt(&args.query, true)?;
    let image = load(&args.image)?;
    let b = backends(backend, &DiffusionSchedule::default())?;
    let outcome = generate_mask(&image, &query, b.segmenter.as_ref(), b.text.as_ref(), b.image.as_ref(), &config)
        .map_err(|source| Failure::stage(StageError { stage: Stage::Mask, source }))?;

    let report_path = args.out.with_extension("json");
    let mut artifacts = json!({ "report": file_name(&report_path) });
    if let Some(region) = &outcome.region {
        write_mask(region, &args.out)
            .with_context(|| format!("writing {}", args.out.display()))
            .map_err(io_failure)?;
        artifacts["mask"] = json!(file_name(&args.out));
    }
    let report = json!({
        "command": "mask",
        "input": { "image": args.image, "image_hash": image.content_hash(), "query": args.query },
        "config": config,
        "backend": backend_json(&b),
        "mask": outcome.report,
        "artifacts": artifacts,
    });
    write_json(&report_path, &report).map_err(io_failure)?;
    if outcome.region.is_none() {
        return Err(Failure { code: EXIT_NO_MATCH, error: anyhow!("no entity matched {:?}", args.query) });
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn run(args: &RunArgs, backend: Option<&str>) -> CmdResult {
    let config = pipeline_config(&args.mask, &args.gen)?;
    let query = prompt(&args.query, true)?;
    let text = prompt(&args.text, false)?;
    let image = load(&args.image)?;
    let sched = config.retouch.schedule().map_err(usage("invalid schedule"))?;
    let b = backends(backend, &sched)?;

    let started = Instant::now();
    let (mask, region) = region_for(&image, &query, &b, &config.mask).map_err(Failure::stage)?;
    let mask_ms = started.elapsed().as_secs_f64() * 1e3;
    let started = Instant::now();
    let (outcome, selection) =
        edit_region(&image, &region, &text, &b, &config.retouch, &config.assessment).map_err(Failure::stage)?;
    let edit_ms = started.elapsed().as_secs_f64() * 1e3;

    let ext = args.format.as_str();
    let proposals_dir = args.out_dir.join("proposals");
    std::fs::create_dir_all(&proposals_dir)
        .with_context(|| format!("creating {}", proposals_dir.display()))
        .map_err(io_failure)?;

    let mut proposal_rows = Vec::new();
    for p in &outcome.proposals {
        let rel = format!("proposals/proposal_{:02}.{ext}", p.index);
        write_image(&p.image, args.out_dir.join(&rel)).context("writing proposal").map_err(io_failure)?;
        let score = selection.scores.iter().find(|s| s.proposal_index == p.index);
        proposal_rows.push(json!({
            "index": p.index,
            "seed": p.seed,
            "path": rel,
            "image_hash": p.image.content_hash(),
            "score": score,
        }));
    }
    let mask_rel = "mask.png";
    write_mask(&region, args.out_dir.join(mask_rel)).context("writing mask").map_err(io_failure)?;
    let output_rel = format!("output.{ext}");
    let chosen = outcome.proposals.iter().find(|p| p.index == selection.chosen).expect("chosen proposal exists");
    write_image(&chosen.image, args.out_dir.join(&output_rel)).context("writing output").map_err(io_failure)?;

    let mut report = json!({
        "command": "run",
        "input": {
            "image": args.image,
            "image_hash": image.content_hash(),
            "query": args.query,
            "text": args.text,
        },
        "config": config,
        "backend": backend_json(&b),
        "mask": mask.report,
        "proposals": proposal_rows,
        "failures": outcome.failures,
        "selection": selection,
        "artifacts": {
            "output": output_rel,
            "mask": mask_rel,
            "proposals": outcome.proposals.iter().map(|p| format!("proposals/proposal_{:02}.{ext}", p.index)).collect::<Vec<_>>(),
            "report": "report.json",
        },
    });
    if args.timings {
        report["timings_ms"] = json!({ "mask": mask_ms, "retouch_and_assess": edit_ms });
    }
    write_json(&args.out_dir.join("report.json"), &report).map_err(io_failure)?;
    println!("{}", args.out_dir.join(&output_rel).display());
    Ok(())
}

fn proposal_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "ppm")
                )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        anyhow::bail!("no .png or .ppm proposals in {}", dir.display());
    }
    Ok(files)
}

pub fn assess(args: &AssessArgs, backend: Option<&str>) -> CmdResult {
    let config = assessment_config(&args.assess)?;
    let text = prompt(&args.text, false)?;
    let original = load(&args.original)?;
    let files = proposal_files(&args.proposals).map_err(Failure::usage)?;
    let images = files.iter().map(|f| load(f)).collect::<Result<Vec<_>, _>>()?;
    let b = backends(backend, &DiffusionSchedule::default())?;
    let candidates: Vec<(usize, &Image)> = images.iter().enumerate().collect();
    let selection = rank(&original, &candidates, &text, b.text.as_ref(), b.image.as_ref(), &config).map_err(|e| {
        Failure { code: EXIT_ASSESS, error: anyhow::Error::new(e).context("assessment failed") }
    })?;
    let report = json!({
        "command": "assess",
        "input": { "original": args.original, "text": args.text },
        "proposals": files,
        "backend": backend_json(&b),
        "selection": selection,
        "chosen_path": files[selection.chosen],
        "artifacts": { "report": args.out.as_ref().map(|p| file_name(p)) },
    });
    match &args.out {
        Some(p) => write_json(p, &report).map_err(io_failure)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("serialisable report")),
    }
    Ok(())
}

pub fn eval(args: &EvalArgs, backend: Option<&str>) -> CmdResult {
    let entries = load_manifest(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))
        .map_err(Failure::usage)?;
    let variants = VariantSpec::parse(&args.variants).map_err(usage("invalid --variants"))?;
    let config = pipeline_config(&args.mask, &args.gen)?;
    let sched = config.retouch.schedule().map_err(usage("invalid schedule"))?;
    let b = backends(backend, &sched)?;
    let reports = evaluate_manifest(&entries, &b, &config, &variants).map_err(usage("evaluation failed"))?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(io_failure)?;
    let mut written = Vec::new();
    for r in &reports {
        let name = format!("report_{}.json", r.variant.name);
        write_json(&args.out.join(&name), r).map_err(io_failure)?;
        written.push(name);
        if args.csv {
            let name = format!("report_{}.csv", r.variant.name);
            let csv = r.to_csv().map_err(usage("csv"))?;
            write_atomic(&args.out.join(&name), csv.as_bytes()).map_err(usage("writing csv"))?;
            written.push(name);
        }
    }
    written.push("index.json".into());
    let index = json!({
        "command": "eval",
        "manifest": args.manifest,
        "entries": entries.len(),
        "variants": variants,
        "config": config,
        "backend": backend_json(&b),
        "artifacts": written,
    });
    write_json(&args.out.join("index.json"), &index).map_err(io_failure)?;
    Ok(())
}

pub fn serve(args: &ServeArgs, backend: Option<&str>) -> CmdResult {
    let sched = RetouchConfig { steps: args.steps, ..RetouchConfig::default() }
        .schedule()
        .map_err(usage("invalid schedule"))?;
    let b = backends(backend, &sched)?;
    if args.stdio {
        let stdin = std::io::stdin().lock();
        let stdout = std::io::stdout().lock();
        return serve_stream(&b, stdin, stdout)
            .map_err(|e| Failure { code: EXIT_BACKEND, error: anyhow::Error::new(e).context("serving stdio") });
    }
    let addr = args.listen.as_deref().unwrap_or("127.0.0.1:0");
    let listener = std::net::TcpListener::bind(addr).with_context(|| format!("binding {addr}")).map_err(Failure::usage)?;
    let local = listener.local_addr().map_err(usage("local address"))?;
    println!("tcp://{local}");
    use std::io::Write;
    let _ = std::io::stdout().flush();
    serve_listener(listener, b).map_err(|e| Failure { code: EXIT_BACKEND, error: e.into() })
}
