use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use serde_json::json;
use wavediff::diffusion::{sample as draw, write_loss_csv, DiffusionCheckpoint, Trainer};
use wavediff::ingest::{
    filter_complete_days, generate_reference_dataset, parse_minute_bars, write_minute_bars,
    write_rejections, FilterPolicy, TradingDay,
};
use wavediff::metrics::{build_report, write_report_tables, write_svg_charts, StylizedFactsReport, Verdict};
use wavediff::pipeline::{decode_images, prepare as prepare_days, read_day_set, write_synthetic_bars};
use wavediff::preprocess::NormalizationManifest;
use wavediff::wavelet::{export_png, read_images, write_images, CoefficientImage};

use crate::config::PipelineConfig;
use crate::workspace::{read_json, short, write_atomic, write_json, Workspace};
use crate::CliError;

const DAYS: &str = "data/days.csv";
const REJECTIONS: &str = "data/rejections.csv";
const DATA_SUMMARY: &str = "data/summary.json";
const MANIFEST: &str = "prepared/manifest.json";
const IMAGES: &str = "prepared/images.wdimg";
const PREVIEW: &str = "prepared/preview.png";
const PREPARE_SUMMARY: &str = "prepared/summary.json";
const CHECKPOINT: &str = "model/checkpoint.wdckpt";
const LOSS: &str = "model/loss.csv";
const SAMPLES: &str = "synthetic/images.wdimg";
const SYNTHETIC: &str = "synthetic/days.csv";
const SYNTHETIC_SUMMARY: &str = "synthetic/summary.json";
const REPORT_DIR: &str = "report";
const REPORT: &str = "report/report.json";

pub struct Context {
    pub cfg: PipelineConfig,
    pub digest: String,
    pub ws: Workspace,
    pub force: bool,
}

fn open(path: &std::path::Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn policy(ctx: &Context) -> FilterPolicy {
    FilterPolicy {
        reject_zero_volume: ctx.cfg.ingest.reject_zero_volume,
    }
}

fn store_days(ctx: &Context, days: &[TradingDay], summary: serde_json::Value) -> Result<(), CliError> {
    write_atomic(&ctx.ws.path(DAYS), |f| write_minute_bars(days, BufWriter::new(f)))?;
    let mut s = summary;
    s["config_digest"] = json!(ctx.digest);
    s["days"] = json!(days.len());
    s["first_date"] = json!(days.first().map(|d| d.date().to_string()));
    s["last_date"] = json!(days.last().map(|d| d.date().to_string()));
    write_json(&ctx.ws.path(DATA_SUMMARY), &s)
}

pub fn ingest(ctx: &Context, input: Option<PathBuf>) -> Result<(), CliError> {
    let path = input
        .or_else(|| ctx.cfg.paths.input.clone())
        .ok_or_else(|| CliError::Usage("no input CSV: pass a path or set paths.input".into()))?;
    let file = File::open(&path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let parsed = parse_minute_bars(BufReader::new(file), &ctx.cfg.ingest.columns)?;
    for e in parsed.errors.iter().take(5) {
        log::warn!("skipped row: {e}");
    }
    let (days, rejected) = filter_complete_days(parsed.candidates, policy(ctx));
    write_atomic(&ctx.ws.path(REJECTIONS), |f| write_rejections(&rejected, BufWriter::new(f)))?;
    if days.is_empty() {
        return Err(CliError::Runtime(format!(
            "no complete trading days in {} ({} rejected, {} malformed rows)",
            path.display(),
            rejected.len(),
            parsed.errors.len()
        )));
    }
    store_days(
        ctx,
        &days,
        json!({
            "source": path.display().to_string(),
            "rejected_days": rejected.len(),
            "malformed_rows": parsed.errors.len(),
        }),
    )?;
    println!(
        "retained {} days ({} .. {}), rejected {}, malformed rows {}",
        days.len(),
        days[0].date(),
        days[days.len() - 1].date(),
        rejected.len(),
        parsed.errors.len()
    );
    Ok(())
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let days = generate_reference_dataset(&ctx.cfg.simulate)?;
    write_atomic(&ctx.ws.path(REJECTIONS), |f| write_rejections(&[], BufWriter::new(f)))?;
    store_days(ctx, &days, json!({ "source": "simulator", "rejected_days": 0, "malformed_rows": 0 }))?;
    println!("simulated {} days", days.len());
    Ok(())
}

fn load_days(ctx: &Context) -> Result<Vec<TradingDay>, CliError> {
    ctx.ws.check_lineage(DATA_SUMMARY, &ctx.digest, ctx.force)?;
    let parsed = parse_minute_bars(open(&ctx.ws.path(DAYS))?, &Default::default())?;
    if let Some(e) = parsed.errors.first() {
        return Err(CliError::Runtime(format!("{DAYS}: {e}")));
    }
    let (days, rejected) = filter_complete_days(parsed.candidates, policy(ctx));
    if !rejected.is_empty() {
        return Err(CliError::Runtime(format!("{DAYS} holds {} incomplete days", rejected.len())));
    }
    Ok(days)
}

pub fn prepare(ctx: &Context) -> Result<(), CliError> {
    let days = load_days(ctx)?;
    let cfg = &ctx.cfg;
    let prepared = prepare_days(&days, &cfg.prepare, cfg.train.validation_fraction, cfg.seed)?;
    let m = &prepared.manifest;
    write_atomic(&ctx.ws.path(MANIFEST), |f| {
        use std::io::Write;
        f.write_all(m.to_json().as_bytes())?;
        Ok(())
    })?;
    write_atomic(&ctx.ws.path(IMAGES), |f| {
        write_images(
            BufWriter::new(f),
            &prepared.images,
            cfg.prepare.codec,
            cfg.prepare.row_fill,
            &m.digest(),
            Some(&ctx.digest),
        )
    })?;
    write_atomic(&ctx.ws.path(PREVIEW), |f| export_png(&prepared.images[0], BufWriter::new(f)))?;
    write_json(
        &ctx.ws.path(PREPARE_SUMMARY),
        &json!({
            "config_digest": ctx.digest,
            "manifest_digest": m.digest(),
            "images": prepared.images.len(),
            "train_days": prepared.train_indices.len(),
            "validation_days": prepared.validation_indices.len(),
            "clamp": prepared.clamp,
        }),
    )?;
    println!(
        "encoded {} days as {:?} images (manifest {}); {}",
        prepared.images.len(),
        prepared.images[0].shape(),
        short(&m.digest()),
        prepared.clamp.summary()
    );
    Ok(())
}

fn load_images(ctx: &Context, rel_or_path: &std::path::Path) -> Result<Vec<CoefficientImage>, CliError> {
    let (header, images) = read_images(open(rel_or_path)?)?;
    if header.config_digest.as_deref() != Some(ctx.digest.as_str()) {
        let msg = format!(
            "{} was produced by config {}, current config is {}",
            rel_or_path.display(),
            short(header.config_digest.as_deref().unwrap_or("none")),
            short(&ctx.digest)
        );
        if !ctx.force {
            return Err(CliError::Runtime(format!("{msg} (rerun the stage or pass --force)")));
        }
        log::warn!("{msg}; continuing (--force)");
    }
    if images.is_empty() {
        return Err(CliError::Runtime(format!("{} holds no images", rel_or_path.display())));
    }
    Ok(images)
}

fn load_manifest(ctx: &Context) -> Result<NormalizationManifest, CliError> {
    let path = ctx.ws.path(MANIFEST);
    if !path.exists() {
        return Err(CliError::Runtime(format!("{} not found; run prepare first", path.display())));
    }
    Ok(NormalizationManifest::load(&path)?)
}

pub fn train(ctx: &Context, stop_after: Option<usize>) -> Result<(), CliError> {
    let images = load_images(ctx, &ctx.ws.path(IMAGES))?;
    let ck_path = ctx.ws.path(CHECKPOINT);
    let mut trainer = if ck_path.exists() && !ctx.force {
        let ck = DiffusionCheckpoint::load(&ck_path)?;
        if ck.config_digest.as_deref() != Some(ctx.digest.as_str()) {
            return Err(CliError::Runtime(format!(
                "{} belongs to config {}, current config is {} (pass --force to start over)",
                ck_path.display(),
                short(ck.config_digest.as_deref().unwrap_or("none")),
                short(&ctx.digest)
            )));
        }
        log::info!("resuming from epoch {}", ck.epoch);
        Trainer::resume(ck, &images)?
    } else {
        let mut t = Trainer::new(&images, &ctx.cfg.train, &ctx.cfg.model)?;
        t.state_mut().config_digest = Some(ctx.digest.clone());
        t
    };
    let loss_path = ctx.ws.path(LOSS);
    let mut ran = 0;
    while !trainer.is_done() && stop_after.is_none_or(|n| ran < n) {
        let rec = trainer.run_epoch()?;
        ran += 1;
        println!(
            "epoch {}/{}: train {:.5} validation {:.5}",
            rec.epoch, ctx.cfg.train.epochs, rec.train_loss, rec.val_loss
        );
        let state = trainer.state_mut();
        std::fs::create_dir_all(ck_path.parent().expect("has parent")).map_err(wavediff::Error::from)?;
        state.save(&ck_path)?;
        write_atomic(&loss_path, |f| write_loss_csv(&state.history, BufWriter::new(f)))?;
    }
    let state = trainer.state();
    if state.history.is_empty() {
        return Err(CliError::Runtime("no epochs were run".into()));
    }
    write_json(
        &ctx.ws.path("model/summary.json"),
        &json!({
            "config_digest": ctx.digest,
            "epochs": state.epoch,
            "complete": trainer.is_done(),
            "history": state.history,
        }),
    )?;
    if trainer.is_done() {
        println!("training complete after {} epochs", state.epoch);
    } else {
        println!("stopped at epoch {}; run train again to resume", state.epoch);
    }
    Ok(())
}

fn write_synthetic(ctx: &Context, images: &[CoefficientImage], extra: serde_json::Value) -> Result<(), CliError> {
    let manifest = load_manifest(ctx)?;
    let decoded = decode_images(images, &manifest)?;
    let floored = decoded.floored_volumes;
    let mut negative = 0;
    write_atomic(&ctx.ws.path(SYNTHETIC), |f| {
        negative = write_synthetic_bars(&decoded, BufWriter::new(f))?;
        Ok(())
    })?;
    let mut s = extra;
    s["config_digest"] = json!(ctx.digest);
    s["days"] = json!(images.len());
    s["floored_volumes"] = json!(floored);
    s["negative_spreads"] = json!(negative);
    write_json(&ctx.ws.path(SYNTHETIC_SUMMARY), &s)?;
    println!(
        "decoded {} synthetic days; {floored} negative volumes floored at 0, {negative} negative spreads",
        images.len()
    );
    Ok(())
}

pub fn sample(ctx: &Context, count: Option<usize>) -> Result<(), CliError> {
    let n = count.unwrap_or(ctx.cfg.sample.count);
    if n == 0 {
        return Err(CliError::Usage("sample count must be >= 1".into()));
    }
    let ck_path = ctx.ws.path(CHECKPOINT);
    if !ck_path.exists() {
        return Err(CliError::Runtime(format!("{} not found; run train first", ck_path.display())));
    }
    let mut ck = DiffusionCheckpoint::load(&ck_path)?;
    if ck.config_digest.as_deref() != Some(ctx.digest.as_str()) && !ctx.force {
        return Err(CliError::Runtime(format!(
            "{} belongs to another configuration (pass --force to sample anyway)",
            ck_path.display()
        )));
    }
    if ck.epoch < ck.train_config.epochs {
        log::warn!("checkpoint is at epoch {} of {}", ck.epoch, ck.train_config.epochs);
    }
    let manifest = load_manifest(ctx)?;
    manifest.verify_digest(&ck.manifest_digest)?;
    let seed = ctx.cfg.sample_seed();
    let images = draw(&mut ck, n, seed)?;
    write_atomic(&ctx.ws.path(SAMPLES), |f| {
        write_images(BufWriter::new(f), &images, ck.codec, ck.row_fill, &ck.manifest_digest, Some(&ctx.digest))
    })?;
    write_synthetic(ctx, &images, json!({ "sample_seed": seed, "checkpoint_epoch": ck.epoch }))
}

pub fn decode(ctx: &Context, images: Option<PathBuf>) -> Result<(), CliError> {
    let path = images.unwrap_or_else(|| ctx.ws.path(SAMPLES));
    let images = load_images(ctx, &path)?;
    write_synthetic(ctx, &images, json!({ "images": path.display().to_string() }))
}

fn verdict(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "OK",
        Verdict::Fail => "NG",
        Verdict::NotEvaluated => "-",
    }
}

fn print_report(r: &StylizedFactsReport) {
    println!("{} ({} days) vs {} ({} days)", r.real.id, r.real.days, r.synthetic.id, r.synthetic.days);
    for row in &r.rows {
        println!("  {:<18} {:<3} {}", row.row, verdict(row.verdict), row.detail);
    }
}

pub fn evaluate(ctx: &Context, svg: bool) -> Result<(), CliError> {
    ctx.ws.check_lineage(DATA_SUMMARY, &ctx.digest, ctx.force)?;
    ctx.ws.check_lineage(SYNTHETIC_SUMMARY, &ctx.digest, ctx.force)?;
    let real = read_day_set("real", open(&ctx.ws.path(DAYS))?)?;
    let synthetic = read_day_set("synthetic", open(&ctx.ws.path(SYNTHETIC))?)?;
    let report = build_report(&real, &synthetic, &ctx.cfg.metrics)?;
    let dir = ctx.ws.path(REPORT_DIR);
    write_report_tables(&report, &dir)?;
    if svg {
        write_svg_charts(&report, &dir)?;
    }
    let json = report.to_json()?;
    write_atomic(&ctx.ws.path(REPORT), |f| {
        use std::io::Write;
        f.write_all(json.as_bytes())?;
        Ok(())
    })?;
    write_json(
        &ctx.ws.path("report/summary.json"),
        &json!({
            "config_digest": ctx.digest,
            "rows": report.rows,
        }),
    )?;
    print_report(&report);
    Ok(())
}

pub fn report(ctx: &Context) -> Result<(), CliError> {
    let path = ctx.ws.path(REPORT);
    if !path.exists() {
        return Err(CliError::Runtime(format!("{} not found; run evaluate first", path.display())));
    }
    let r: StylizedFactsReport = read_json(&path)?;
    print_report(&r);
    for c in &r.correlations {
        println!(
            "  corr({}, {}): real {:.3} synthetic {:.3}",
            c.pair[0].name(),
            c.pair[1].name(),
            c.real,
            c.synthetic
        );
    }
    if let (Some(a), Some(b)) = (r.real.returns_excess_kurtosis, r.synthetic.returns_excess_kurtosis) {
        println!("  returns excess kurtosis: real {a:.2} synthetic {b:.2}");
    }
    Ok(())
}
