use std::collections::BTreeSet;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ovsg_core::evaluation::{evaluate as score, render_table, EvalConfig, EvalReport, Partition, Protocol};
use ovsg_core::prompt::build_prompt_with_budget;
use ovsg_core::retention::{finetune as run_finetune, FinetuneConfig, SyntheticWorld, WorldConfig};
use ovsg_core::splits::{filter_detection_graph, filter_training_graph, make_split, Census, Setting, SplitSpec};
use ovsg_core::weak::{ingest_synthesized_reader, load_lexicon, serialize_synthesized, CaptionParser, CaptionRecord};
use ovsg_core::{for_each_image, validate_graph, ConceptSpace, Dataset, DatasetWriter, Violation};

use crate::files::{open_input, write_atomic, write_json_atomic, AtomicFile, ManifestGuard};
use crate::{EvaluateArgs, FinetuneArgs, IngestArgs, ParseCaptionsArgs, PromptArgs, ReportArgs, SplitArgs, ValidateArgs};

/// Runs `body` between writing and finalizing a manifest.
fn with_manifest<F>(path: Option<PathBuf>, command: &str, config: serde_json::Value, seed: Option<u64>, inputs: &[&Path], body: F) -> Result<u8>
where
    F: FnOnce(&mut ManifestGuard) -> Result<u8>,
{
    let mut guard = ManifestGuard::start(path, command, config, seed, inputs)?;
    let outcome = body(&mut guard);
    guard.finish(&outcome)?;
    outcome
}

/// Writes to `path` atomically, or to stdout.
fn emit(path: Option<&Path>, guard: &mut ManifestGuard, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => {
            write_atomic(p, bytes)?;
            guard.output(p)?;
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let reader = open_input(path)?;
    serde_json::from_reader(reader)
        .map_err(|e| ovsg_core::Error::schema(format!("{}: {e}", path.display())).into())
}

#[derive(Serialize)]
struct ValidationReport {
    images: usize,
    invalid_images: usize,
    violations: Vec<Violation>,
}

pub fn validate(a: ValidateArgs, manifest: Option<PathBuf>) -> Result<u8> {
    let cs = a.lexicon.as_deref().map(load_lexicon).transpose()?;
    let mut inputs = vec![a.dataset.as_path()];
    inputs.extend(a.lexicon.as_deref());
    with_manifest(manifest, "validate", json!({}), None, &inputs, |guard| {
        let mut report = ValidationReport { images: 0, invalid_images: 0, violations: Vec::new() };
        let mut ids = std::collections::HashSet::new();
        for_each_image(open_input(&a.dataset)?, |g| {
            report.images += 1;
            let mut v = validate_graph(&g, cs.as_ref());
            if !ids.insert(g.image_id.clone()) {
                v.push(Violation { image_id: g.image_id.clone(), field: "image_id".into(), rule: "duplicate".into() });
            }
            report.invalid_images += usize::from(!v.is_empty());
            report.violations.extend(v);
            Ok(())
        })?;
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        emit(a.report.as_deref(), guard, &bytes)?;
        if report.violations.is_empty() {
            log::info!("{} images, no violations", report.images);
            Ok(0)
        } else {
            eprintln!("{} violation(s) in {} of {} images", report.violations.len(), report.invalid_images, report.images);
            Ok(1)
        }
    })
}

/// Vocabulary built from the names a dataset uses.
fn dataset_vocabulary(path: &Path) -> Result<ConceptSpace> {
    let mut objects = BTreeSet::new();
    let mut relations = BTreeSet::new();
    for_each_image(open_input(path)?, |g| {
        objects.extend(g.nodes.iter().map(|n| n.category.clone()));
        relations.extend(g.edges.iter().map(|e| e.predicate.clone()));
        Ok(())
    })?;
    let o: Vec<&str> = objects.iter().map(String::as_str).collect();
    let r: Vec<&str> = relations.iter().map(String::as_str).collect();
    Ok(ConceptSpace::synthetic(&o, &r, 8, 0)?)
}

pub fn split(a: SplitArgs, manifest: Option<PathBuf>) -> Result<u8> {
    let spec = match (&a.split_file, &a.setting) {
        (Some(f), setting) => {
            let spec = SplitSpec::load(f)?;
            if let Some(s) = setting {
                let s: Setting = s.parse()?;
                if s != spec.setting {
                    return Err(ovsg_core::Error::contract(format!("--setting {:?} disagrees with the split file ({:?})", s, spec.setting)).into());
                }
            }
            spec
        }
        (None, Some(s)) => {
            let setting: Setting = s.parse()?;
            let cs = match &a.lexicon {
                Some(l) => load_lexicon(l)?,
                None => dataset_vocabulary(&a.dataset)?,
            };
            make_split(&cs, setting, a.seed)?
        }
        (None, None) => bail!(ovsg_core::Error::contract("give --setting or --split-file")),
    };

    let manifest = manifest.or_else(|| Some(a.out_dir.join("manifest.json")));
    let mut inputs = vec![a.dataset.as_path()];
    inputs.extend(a.split_file.as_deref());
    inputs.extend(a.lexicon.as_deref());
    let config = serde_json::to_value(&spec)?;
    with_manifest(manifest, "split", config, Some(spec.seed), &inputs, |guard| {
        std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
        let rel_path = a.out_dir.join("relation.json");
        let det_path = a.out_dir.join("detection.json");
        let mut rel = DatasetWriter::new(AtomicFile::create(&rel_path)?)?;
        let mut det = DatasetWriter::new(AtomicFile::create(&det_path)?)?;
        let mut census = Census::default();
        for_each_image(open_input(&a.dataset)?, |g| {
            let d = filter_detection_graph(&g, &spec);
            match filter_training_graph(&g, &spec) {
                Some(r) => {
                    census.images += 1;
                    census.nodes += r.nodes.len();
                    census.edges += r.edges.len();
                    rel.push(&r)?;
                }
                None => census.detection_only_images += usize::from(!d.nodes.is_empty()),
            }
            if !d.nodes.is_empty() {
                det.push(&d)?;
            }
            Ok(())
        })?;
        rel.finish()?.commit()?;
        det.finish()?.commit()?;
        let spec_path = a.out_dir.join("split.json");
        write_atomic(&spec_path, spec.to_json().as_bytes())?;
        let census_path = a.out_dir.join("census.json");
        write_json_atomic(&census_path, &census)?;
        for p in [&rel_path, &det_path, &spec_path, &census_path] {
            guard.output(p)?;
        }
        println!("{}", serde_json::to_string(&census)?);
        Ok(0)
    })
}

const CAPTION_CHUNK: usize = 4096;

#[derive(Serialize)]
struct ParsedLine<'a> {
    image_id: &'a str,
    triplets: &'a [ovsg_core::weak::UngroundedTriplet],
}

pub fn parse_captions(a: ParseCaptionsArgs, manifest: Option<PathBuf>) -> Result<u8> {
    let cs = load_lexicon(&a.lexicon)?;
    let parser = CaptionParser::new(&cs);
    let inputs = [a.corpus.as_path(), a.lexicon.as_path()];
    with_manifest(manifest, "parse-captions", json!({}), None, &inputs, |guard| {
        let mut file_out = a.out.as_deref().map(AtomicFile::create).transpose()?;
        let mut stdout = BufWriter::new(io::stdout().lock());
        // Stream the corpus in chunks so memory stays bounded; within a chunk
        // captions parse in parallel and are written back in input order.
        let mut lines = open_input(&a.corpus)?.lines().enumerate();
        let mut chunk: Vec<CaptionRecord> = Vec::with_capacity(CAPTION_CHUNK);
        let mut total = 0usize;
        loop {
            chunk.clear();
            for (lineno, line) in lines.by_ref() {
                let line = line.map_err(|e| ovsg_core::Error::io(&a.corpus, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CaptionRecord = serde_json::from_str(&line)
                    .map_err(|e| ovsg_core::Error::schema(format!("{} line {}: {e}", a.corpus.display(), lineno + 1)))?;
                chunk.push(rec);
                if chunk.len() == CAPTION_CHUNK {
                    break;
                }
            }
            if chunk.is_empty() {
                break;
            }
            let parsed: Vec<_> = chunk.par_iter().map(|r| parser.parse(&r.caption)).collect();
            for (r, t) in chunk.iter().zip(&parsed) {
                let line = serde_json::to_string(&ParsedLine { image_id: &r.image_id, triplets: t })?;
                let w: &mut dyn Write = match file_out.as_mut() {
                    Some(f) => f,
                    None => &mut stdout,
                };
                writeln!(w, "{line}")?;
                total += t.len();
            }
        }
        stdout.flush()?;
        if let (Some(f), Some(p)) = (file_out, &a.out) {
            f.commit()?;
            guard.output(p)?;
        }
        log::info!("{total} triplets");
        Ok(0)
    })
}

pub fn ingest_synth(a: IngestArgs, manifest: Option<PathBuf>) -> Result<u8> {
    with_manifest(manifest, "ingest-synth", json!({}), None, &[a.file.as_path()], |guard| {
        let report = ingest_synthesized_reader(open_input(&a.file)?)?;
        let mut text = serialize_synthesized(&report.records);
        text.push('\n');
        emit(a.out.as_deref(), guard, text.as_bytes())?;
        match &a.errors {
            Some(p) => {
                write_json_atomic(p, &report.errors)?;
                guard.output(p)?;
            }
            None => {
                for e in &report.errors {
                    eprintln!("record {} ({}): {}", e.index, e.image_id.as_deref().unwrap_or("?"), e.reason);
                }
            }
        }
        let low_trust = report.records.iter().filter(|r| r.low_trust_boxes()).count();
        log::info!("{} records kept, {} rejected, {} without trusted boxes", report.records.len(), report.errors.len(), low_trust);
        Ok(u8::from(!report.errors.is_empty()))
    })
}

pub fn prompt(a: PromptArgs, manifest: Option<PathBuf>) -> Result<u8> {
    let cs = load_lexicon(&a.lexicon)?;
    let config = json!({ "positives": a.positives, "m": a.m, "budget": a.budget });
    with_manifest(manifest, "prompt", config, Some(a.seed), &[a.lexicon.as_path()], |guard| {
        let positives: Vec<&str> = a.positives.iter().map(String::as_str).filter(|s| !s.trim().is_empty()).collect();
        let p = build_prompt_with_budget(&positives, &cs, a.m, a.seed, a.budget)?;
        let mut bytes = if a.json { serde_json::to_vec_pretty(&p)? } else { p.text().into_bytes() };
        bytes.push(b'\n');
        emit(a.out.as_deref(), guard, &bytes)?;
        Ok(0)
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FinetuneFile {
    world: WorldConfig,
    finetune: FinetuneConfig,
}

pub fn finetune(a: FinetuneArgs, manifest: Option<PathBuf>) -> Result<u8> {
    let mut cfg: FinetuneFile = match &a.config {
        Some(p) => read_json(p)?,
        None => FinetuneFile::default(),
    };
    if let Some(s) = a.seed {
        cfg.world.seed = s;
        cfg.finetune.seed = s;
    }
    if let Some(l) = a.lambda {
        cfg.finetune.lambda = l;
    }
    if let Some(n) = a.steps {
        cfg.finetune.steps = n;
    }
    if let Some(s) = a.step_size {
        cfg.finetune.step_size = s;
    }
    let manifest = manifest.or_else(|| Some(a.out_dir.join("manifest.json")));
    let inputs: Vec<&Path> = a.config.as_deref().into_iter().collect();
    let config = serde_json::to_value(&cfg)?;
    with_manifest(manifest, "finetune", config, Some(cfg.finetune.seed), &inputs, |guard| {
        std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
        let world = SyntheticWorld::generate(&cfg.world)?;
        let run = run_finetune(&world, &cfg.finetune)?;
        let outputs = [
            ("trajectory.json", serde_json::to_value(&run.trajectory)?),
            ("student.json", serde_json::to_value(run.student.to_checkpoint())?),
            ("teacher.json", serde_json::to_value(world.teacher.to_checkpoint())?),
        ];
        for (name, value) in outputs {
            let p = a.out_dir.join(name);
            write_json_atomic(&p, &value)?;
            guard.output(&p)?;
        }
        if let Some(last) = run.trajectory.last() {
            println!(
                "step {}: base recall {}, novel recall {}",
                last.step,
                fmt_opt(last.base_recall),
                fmt_opt(last.novel_recall)
            );
        }
        Ok(0)
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn evaluate(a: EvaluateArgs, manifest: Option<PathBuf>) -> Result<u8> {
    let mut cfg: EvalConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    if let Some(p) = &a.protocol {
        cfg.protocol = match p.as_str() {
            "sgdet" => Protocol::Sgdet,
            "predcls" => Protocol::Predcls,
            other => bail!(ovsg_core::Error::contract(format!("unknown protocol '{other}'"))),
        };
    }
    if let Some(ks) = &a.ks {
        cfg.ks = ks.clone();
    }
    cfg.micro |= a.micro;
    let partitions: Vec<Partition> = match a.partition.as_str() {
        "all" => Partition::ALL.to_vec(),
        other => vec![serde_json::from_value(json!(other))
            .map_err(|_| ovsg_core::Error::contract(format!("unknown partition '{other}'")))?],
    };
    cfg.check()?;

    let spec = match &a.split {
        Some(p) => SplitSpec::load(p)?,
        None => SplitSpec::closed(),
    };
    let cs = a.lexicon.as_deref().map(load_lexicon).transpose()?;
    let mut inputs = vec![a.gt.as_path(), a.pred.as_path()];
    inputs.extend(a.split.as_deref());
    inputs.extend(a.lexicon.as_deref());
    let config = serde_json::to_value(&cfg)?;
    with_manifest(manifest, "evaluate", config, None, &inputs, |guard| {
        let gt = Dataset::from_reader(open_input(&a.gt)?)?;
        let pred = Dataset::from_reader(open_input(&a.pred)?)?;
        let reports = partitions
            .iter()
            .map(|&partition| {
                let c = EvalConfig { partition, ..cfg.clone() };
                score(&gt, &pred, &spec, &c, cs.as_ref())
            })
            .collect::<ovsg_core::Result<Vec<_>>>()?;
        if let Some(p) = &a.out {
            write_json_atomic(p, &reports)?;
            guard.output(p)?;
        }
        print!("{}", render_table(&reports));
        for r in &reports {
            if !r.missing.is_empty() {
                log::warn!("{}: {} ground-truth images have no prediction", r.partition.label(), r.missing.len());
            }
        }
        Ok(0)
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    Many(Vec<EvalReport>),
    One(Box<EvalReport>),
}

pub fn report(a: ReportArgs) -> Result<u8> {
    let mut reports = Vec::new();
    for p in &a.reports {
        match read_json::<OneOrMany>(p)? {
            OneOrMany::Many(v) => reports.extend(v),
            OneOrMany::One(r) => reports.push(*r),
        }
    }
    let table = render_table(&reports);
    match &a.out {
        Some(p) => write_atomic(p, table.as_bytes())?,
        None => print!("{table}"),
    }
    Ok(0)
}
