use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use placemap::bundle::{self, BundleLock};
use placemap::descfile::{self, DescriptorContainer, DescriptorKind};
use placemap::engine::{Engine, Frame, FrameMeta};
use placemap::simulator::{evaluate, Recording, Scenario};
use placemap::{GlobalDescriptor, LocalFeatureSet, UpdateMode};

use crate::records::{read_matches, read_truth, write_matches, write_truth};
use crate::{usage, BundleArg, Cli, Command};

const DEFAULT_BUNDLE: &str = "map.slmb";

fn bundle_path(data_dir: &Path, arg: &BundleArg) -> PathBuf {
    arg.bundle.clone().unwrap_or_else(|| data_dir.join(DEFAULT_BUNDLE))
}

/// Writes through a buffered file, or stdout when `path` is `None`.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let result = f(&mut io::stdout().lock());
            // A closed pipe (`| head`) is not an error.
            let closed = |e: &anyhow::Error| {
                e.chain().any(|c| {
                    let io = c
                        .downcast_ref::<io::Error>()
                        .or_else(|| match c.downcast_ref::<csv::Error>()?.kind() {
                            csv::ErrorKind::Io(e) => Some(e),
                            _ => None,
                        });
                    io.is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
                })
            };
            match result {
                Err(e) if closed(&e) => {}
                other => other?,
            }
        }
    }
    Ok(())
}

fn read_frames(path: &Path) -> Result<DescriptorContainer> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.is_empty() {
        return Err(usage(format!("{} is empty", path.display())));
    }
    let c = descfile::decode_any(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    if c.is_empty() {
        return Err(usage(format!("{} holds no frames", path.display())));
    }
    Ok(c)
}

fn labels(truth: Option<&Path>, frames: usize) -> Result<Vec<FrameMeta>> {
    let Some(path) = truth else {
        return Ok(Vec::new());
    };
    let places = read_truth(path)?;
    if places.len() != frames {
        return Err(usage(format!(
            "{} lists {} frames, expected {frames}",
            path.display(),
            places.len()
        )));
    }
    Ok(places
        .into_iter()
        .map(|p| FrameMeta {
            timestamp: None,
            label: Some(p as u64),
        })
        .collect())
}

fn local_sets(c: &DescriptorContainer) -> Result<Vec<LocalFeatureSet>> {
    Ok(c.to_local()?)
}

/// Global descriptors of a container, embedding local features with the
/// bundle's model.
fn descriptors(engine: &Engine, c: &DescriptorContainer) -> Result<Vec<GlobalDescriptor>> {
    match c.kind {
        DescriptorKind::Global => Ok(c.to_globals()?),
        DescriptorKind::LocalFeatures => Ok(engine.embed(&local_sets(c)?)?),
    }
}

fn attach(descriptors: Vec<GlobalDescriptor>, meta: &[FrameMeta]) -> Vec<Frame> {
    descriptors
        .into_iter()
        .enumerate()
        .map(|(i, descriptor)| Frame {
            descriptor,
            meta: meta.get(i).copied().unwrap_or_default(),
        })
        .collect()
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let data_dir = cli.data_dir;
    match cli.command {
        Command::Init {
            bundle,
            frames,
            truth,
            force,
            params,
        } => {
            let path = bundle_path(&data_dir, &bundle);
            if path.exists() && !force {
                return Err(usage(format!("{} exists; pass --force to replace it", path.display())));
            }
            let params = params.resolve();
            params.validate().map_err(|e| usage(e.to_string()))?;
            let c = read_frames(&frames)?;
            let meta = labels(truth.as_deref(), c.len())?;
            let engine = match c.kind {
                DescriptorKind::Global => Engine::init(&attach(c.to_globals()?, &meta), params)?,
                DescriptorKind::LocalFeatures => Engine::init_from_local_with(&local_sets(&c)?, &meta, params)?,
            };
            let _lock = BundleLock::acquire(&path)?;
            bundle::save(&engine, &path)?;
            println!("{}", engine.stats());
        }
        Command::Ingest {
            bundle,
            frames,
            truth,
            append_only,
            matches,
        } => {
            let path = bundle_path(&data_dir, &bundle);
            let _lock = BundleLock::acquire(&path)?;
            let mut engine = bundle::load(&path)?;
            let c = read_frames(&frames)?;
            let meta = labels(truth.as_deref(), c.len())?;
            let batch = attach(descriptors(&engine, &c)?, &meta);
            let mode = if append_only {
                UpdateMode::AppendOnly
            } else {
                UpdateMode::Compress
            };
            let (loc, report) = engine.ingest(&batch, mode)?;
            engine.audit()?;
            bundle::save(&engine, &path)?;
            if let Some(m) = matches {
                with_output(Some(&m), |w| write_matches(w, &loc.matches))?;
            }
            println!("{report}");
        }
        Command::Query { bundle, frames, out } => {
            let engine = bundle::load(&bundle_path(&data_dir, &bundle))?;
            let c = read_frames(&frames)?;
            let loc = engine.query(&descriptors(&engine, &c)?)?;
            with_output(out.as_deref(), |w| write_matches(w, &loc.matches))?;
        }
        Command::Stats { bundle } => {
            let engine = bundle::load(&bundle_path(&data_dir, &bundle))?;
            println!("{}", engine.stats());
            for (i, r) in engine.history().iter().enumerate() {
                println!("update[{i}] {r}");
            }
        }
        Command::Simulate { scenario, out_dir } => {
            let spec = load_scenario(&scenario)?;
            let (_, traversals) = spec.run()?;
            let dir = out_dir.unwrap_or(data_dir);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for t in &traversals {
                let container = match &t.recording {
                    Recording::Global(d) => DescriptorContainer::from_globals(d),
                    Recording::Local(s) => DescriptorContainer::from_local(s),
                };
                let frames = dir.join(format!("{}.sldx", t.name));
                descfile::write_file(&frames, &container)?;
                let truth = dir.join(format!("{}.truth.csv", t.name));
                with_output(Some(&truth), |w| write_truth(w, &t.places))?;
                println!("{}\t{} frames", frames.display(), t.places.len());
            }
        }
        Command::Evaluate {
            bundle,
            matches,
            truth,
            scenario,
            tolerance,
            per_frame,
        } => {
            let engine = bundle::load(&bundle_path(&data_dir, &bundle))?;
            let world = load_scenario(&scenario)?.build_world()?;
            let records = read_matches(&matches)?;
            let truth = read_truth(&truth)?;
            if records.len() != truth.len() {
                return Err(usage(format!(
                    "{} match records for {} truth rows",
                    records.len(),
                    truth.len()
                )));
            }
            let corpus = &engine.map().corpus;
            let report = evaluate(
                &records,
                &truth,
                |n| corpus.majority_label(n).map(|l| l as usize),
                &world,
                tolerance,
            )?;
            println!("accuracy={}", report.accuracy);
            println!("acceptance_rate={}", report.acceptance_rate);
            println!("support={}", report.support);
            println!("mean_lag={}", report.mean_lag);
            if let Some(p) = per_frame {
                with_output(Some(&p), |w| {
                    let mut out = csv::Writer::from_writer(w);
                    out.write_record(["frame", "truth", "estimate", "accepted", "hops", "correct"])?;
                    for (t, f) in report.frames.iter().enumerate() {
                        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
                        out.write_record([
                            t.to_string(),
                            f.truth.to_string(),
                            opt(f.estimate),
                            f.accepted.to_string(),
                            opt(f.hops),
                            f.correct.to_string(),
                        ])?;
                    }
                    out.flush()?;
                    Ok(())
                })?;
            }
        }
        Command::ExportGraph { bundle, out } => {
            let engine = bundle::load(&bundle_path(&data_dir, &bundle))?;
            let dot = engine.map().graph.to_dot();
            with_output(out.as_deref(), |w| Ok(w.write_all(dot.as_bytes())?))?;
        }
    }
    Ok(())
}
