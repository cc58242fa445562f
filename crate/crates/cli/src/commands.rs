use crate::config::{self, DatasetIndex, RunConfig};
use crate::error::CliError;
use anyhow::Context as _;
use sigshot::attention;
use sigshot::dtw::{self, DtwMode};
use sigshot::encoder;
use sigshot::episode::Sample;
use sigshot::model::FusionModel;
use sigshot::rng;
use sigshot::sig::{self, ImageKind};
use sigshot::skeleton::{self, default_ntu_topology, SynthManifest};
use sigshot::train::{self, Checkpoint, EvalOptions, EvalReport};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const THREADS_ENV: &str = "SIGSHOT_THREADS";

pub fn parse_resolution(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("bad dimension {v:?} in {s:?}")),
    };
    Ok([parse(h)?, parse(w)?])
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Data)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::Data)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn read_manifest(path: &Path) -> Result<SynthManifest, CliError> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))
        .map_err(CliError::Data)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn synth(manifest: &SynthManifest, out: &Path) -> Result<(), CliError> {
    let items = config::synthesize(manifest)?;
    create_dir(out)?;
    for (entry, seq) in &items {
        write(&out.join(&entry.file), skeleton::write_ntu_skeleton(seq))?;
    }
    let index = DatasetIndex {
        frames: manifest.frames,
        entries: items.into_iter().map(|(e, _)| e).collect(),
    };
    write(&out.join("manifest.json"), to_json(manifest))?;
    write(&out.join("index.json"), to_json(&index))?;
    println!("wrote {} sequences to {}", index.entries.len(), out.display());
    Ok(())
}

fn skeleton_files(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))
        .map_err(CliError::Data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "skeleton"))
        .collect();
    files.sort();
    Ok(files)
}

fn render(seq: &skeleton::SkeletonSequence, kind: ImageKind, res: Option<[usize; 2]>) -> anyhow::Result<sig::SignalImage> {
    let topo = default_ntu_topology();
    let img = match kind {
        ImageKind::Position => sig::position_image(seq),
        ImageKind::Orientation => sig::orientation_image(seq, &topo)?,
        ImageKind::Fused => {
            let p = sig::position_image(seq);
            let o = sig::orientation_image(seq, &topo)?;
            let [h, w] = res.unwrap_or([p.height() + o.height(), p.width()]);
            return Ok(sig::early_fuse(&p, &o, h, w)?);
        }
    };
    Ok(match res {
        Some([h, w]) => sig::resize_bilinear(&img, h, w)?,
        None => img,
    })
}

pub fn transform(input: &Path, kind: ImageKind, res: Option<[usize; 2]>, out: &Path) -> Result<(), CliError> {
    let files = skeleton_files(input)?;
    if files.is_empty() {
        return Err(CliError::Data(anyhow::anyhow!("no .skeleton files in {}", input.display())));
    }
    create_dir(out)?;
    for f in files {
        let seq = config::read_skeleton(&f)?;
        let img = render(&seq, kind, res).map_err(|e| CliError::Data(e.context(f.display().to_string())))?;
        let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let name = format!("{id}_{}_{}x{}.ppm", kind.as_str(), img.height(), img.width());
        write(&out.join(&name), sig::write_ppm(&img, &id))?;
        println!("{name}");
    }
    Ok(())
}

/// A loaded config with command-line overrides applied.
pub struct Run {
    pub cfg: RunConfig,
    pub base: PathBuf,
    pub out: PathBuf,
}

impl Run {
    pub fn load(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, CliError> {
        let path = config.ok_or_else(|| CliError::Usage("this command needs --config".into()))?;
        let (mut cfg, base) = RunConfig::load(path)?;
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        let out = out
            .or_else(|| cfg.out_dir.as_ref().map(|d| base.join(d)))
            .ok_or_else(|| CliError::Usage("no output directory: pass --out or set out_dir".into()))?;
        create_dir(&out)?;
        Ok(Self { cfg, base, out })
    }

    fn eval_options(&self, episodes: Option<usize>) -> EvalOptions {
        let t = &self.cfg.train;
        EvalOptions {
            episodes: episodes.unwrap_or(t.test_episodes),
            way: t.way,
            shot: t.shot,
            queries: t.queries,
            seed: rng::sub_seed(t.seed, "test"),
            threads: threads_from_env(),
        }
    }
}

fn threads_from_env() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}");
            None
        }
    }
}

struct Trained {
    outcome: train::TrainOutcome,
    test: sigshot::episode::ImageDataset,
}

fn train_once(cfg: &RunConfig, base: &Path) -> Result<Trained, CliError> {
    let res = cfg.train.resolution;
    let template = FusionModel::init(&cfg.model, res[0], cfg.train.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let [tr, va, te] = config::load_splits(cfg, base, res, &template.required_kinds())?;
    log::info!(
        "training on {} classes ({} sequences), {} iterations",
        tr.num_classes(),
        tr.len(),
        cfg.train.iterations
    );
    let val = (!va.is_empty()).then_some(&va);
    let outcome = train::train(&tr, val, &cfg.train, &template)?;
    Ok(Trained { outcome, test: te })
}

pub fn train(run: &Run) -> Result<(), CliError> {
    let t = train_once(&run.cfg, &run.base)?;
    let res = run.cfg.train.resolution;
    write(&run.out.join("history.csv"), train::history_csv(&t.outcome.history))?;
    write(
        &run.out.join("checkpoint.json"),
        Checkpoint::new(t.outcome.model.clone(), res).to_json(),
    )?;
    if let Some((best, acc, it)) = &t.outcome.best {
        write(&run.out.join("checkpoint_best.json"), Checkpoint::new(best.clone(), res).to_json())?;
        println!("best validation accuracy {acc:.4} at iteration {it}");
    }
    if let Some(last) = t.outcome.history.last() {
        println!("final loss {:.6}, running accuracy {:.4}", last.loss, last.running_accuracy);
    }
    Ok(())
}

fn report_line(r: &EvalReport) -> String {
    format!(
        "accuracy {:.4} ± {:.4} over {} episodes ({} queries)",
        r.accuracy, r.ci95, r.episodes, r.queries
    )
}

pub fn eval(run: &Run, checkpoint: &Path, episodes: Option<usize>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))
        .map_err(CliError::Data)?;
    let ckpt = Checkpoint::from_json(&text).map_err(|e| CliError::Data(e.into()))?;
    let [_, _, test] = config::load_splits(&run.cfg, &run.base, ckpt.resolution, &ckpt.model.required_kinds())?;
    let report = train::evaluate(&test, &ckpt.model, &run.eval_options(episodes))?;
    write(&run.out.join("eval.json"), to_json(&report))?;
    println!("{}", report_line(&report));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Alpha,
    Resolution,
    Lambda,
}

impl Sweep {
    fn name(self) -> &'static str {
        match self {
            Sweep::Alpha => "alpha",
            Sweep::Resolution => "resolution",
            Sweep::Lambda => "lambda",
        }
    }
}

pub fn sweep(run: &Run, param: Sweep, values: &[f64], episodes: Option<usize>) -> Result<(), CliError> {
    let opts = run.eval_options(episodes);
    let mut csv = String::from("value,accuracy,ci95\n");
    let mut row = |value: &dyn std::fmt::Display, r: &EvalReport| {
        println!("{}={value}: {}", param.name(), report_line(r));
        let _ = writeln!(csv, "{value},{},{}", r.accuracy, r.ci95);
    };
    match param {
        Sweep::Alpha => {
            if let Some(a) = values.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
                return Err(CliError::Usage(format!("alpha must be finite and >= 0, got {a}")));
            }
            if run.cfg.model.mode != sigshot::model::FusionMode::Late {
                log::warn!("alpha only affects late fusion; the configured mode ignores it");
            }
            let t = train_once(&run.cfg, &run.base)?;
            for &a in values {
                let mut m = t.outcome.model.clone();
                m.alpha = a;
                row(&a, &train::evaluate(&t.test, &m, &opts)?);
            }
        }
        Sweep::Lambda => {
            for &l in values {
                let mut cfg = run.cfg.clone();
                cfg.train.lambda = l;
                cfg.validate()?;
                let t = train_once(&cfg, &run.base)?;
                row(&l, &train::evaluate(&t.test, &t.outcome.model, &opts)?);
            }
        }
        Sweep::Resolution => {
            for &v in values {
                if !(v >= 1.0 && v.fract() == 0.0) {
                    return Err(CliError::Usage(format!("resolution must be a positive integer, got {v}")));
                }
                let side = v as usize;
                let mut cfg = run.cfg.clone();
                cfg.train.resolution = [side, side];
                let t = train_once(&cfg, &run.base)?;
                row(&side, &train::evaluate(&t.test, &t.outcome.model, &opts)?);
            }
        }
    }
    write(&run.out.join(format!("sweep_{}.csv", param.name())), csv)
}

pub fn inspect(checkpoint: &Path, support: &Path, query: &Path, secondary: bool, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))
        .map_err(CliError::Data)?;
    let ckpt = Checkpoint::from_json(&text).map_err(|e| CliError::Data(e.into()))?;
    let stream = if secondary {
        ckpt.model
            .secondary
            .as_ref()
            .ok_or_else(|| CliError::Usage("checkpoint has no secondary stream".into()))?
    } else {
        &ckpt.model.primary
    };
    let [h, w] = ckpt.resolution;
    let topo = default_ntu_topology();
    let encode = |path: &Path| -> Result<encoder::Representation, CliError> {
        let mut seq = config::read_skeleton(path)?;
        seq.label = Some(seq.label.unwrap_or(1));
        let sample = Sample::render(&path.display().to_string(), &seq, &topo, (h, w), &[stream.input])
            .map_err(|e| CliError::Data(e.into()))?;
        Ok(stream.encode(&sample)?)
    };
    let (rs, rq) = (encode(support)?, encode(query)?);
    let att = attention::cross_attend(&rq, &rs, &stream.csa).map_err(|e| CliError::Data(e.into()))?;
    let (q, p) = if stream.use_csa {
        (att.query.matrix(), att.support.matrix())
    } else {
        (rq.matrix(), rs.matrix())
    };
    let cost = dtw::local_costs(q, p).map_err(|e| CliError::Data(e.into()))?;
    let warp = dtw::dtw(&cost, stream.tau, DtwMode::Hard).map_err(|e| CliError::Data(e.into()))?;
    create_dir(out)?;
    write(&out.join("attention.csv"), attention::weights_csv(&att.query_weights))?;
    write(&out.join("attention.pgm"), attention::weights_pgm(&att.query_weights))?;
    write(&out.join("attention_support.csv"), attention::weights_csv(&att.support_weights))?;
    write(&out.join("dtw_table.csv"), dtw::table_csv(&warp.cumulative))?;
    write(&out.join("dtw_path.csv"), dtw::path_csv(warp.path.as_deref().unwrap_or_default()))?;
    println!(
        "dtw distance {} (normalized {}), path length {}",
        warp.distance,
        warp.normalized_distance(),
        warp.path.as_ref().map_or(0, Vec::len)
    );
    Ok(())
}
