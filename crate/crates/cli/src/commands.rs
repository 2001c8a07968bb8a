//! Subcommand implementations. Every stage reads and writes under `--out`:
//!
//! ```text
//! <out>/models/<method>/<contrast>.json        (fit; RAVEL adds <contrast>.test.json)
//! <out>/normalized/<norm>/<id>/<contrast>.nii.gz  (apply, plus audit.json)
//! <out>/synth/<norm>/<task>/<kind>.model       (synth)
//! <out>/synth/<norm>/<task>/<kind>/<id>.nii.gz (synth, test subjects)
//! <out>/report/                                (evaluate)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use mrnorm::manifest::{Cohort, CohortManifest, LoadedSubject};
use mrnorm::metrics::{consistent_winner, MetricRow, QualityReport};
use mrnorm::normalize::{load_model, save_model, Audit, NormalizerModel};
use mrnorm::phantom::{generate_cohort, write_cohort};
use mrnorm::pipeline::{
    fit_for_split, normalize_subject, raw_subject, score, split_subjects, train_synth, EvalSettings, NormSettings,
    Normalization, SynthInput, SynthSettings, RAW,
};
use mrnorm::synth::{predict_volume, save_regression};
use mrnorm::{nifti, par, Contrast, Volume};

use crate::cli::PhantomArgs;
use crate::config::PipelineConfig;
use crate::failure::Failure;

type Outcome = Result<(), Failure>;

fn mkdir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

pub fn phantom(cfg: &PipelineConfig, args: &PhantomArgs) -> Outcome {
    let mut spec = cfg.phantom.clone();
    if let Some(n) = args.subjects {
        spec.n_subjects = n;
    }
    if let Some(d) = &args.dims {
        spec.dims = parse_dims(d)?;
    }
    spec.outlier |= args.outlier;
    let subjects = generate_cohort(&spec)?;
    mkdir(&cfg.out)?;
    let manifest = write_cohort(&subjects, &cfg.out)?;
    println!(
        "wrote {} subjects ({} train, {} test) to {}",
        manifest.subjects.len(),
        manifest.train.len(),
        manifest.test.len(),
        cfg.out.join("manifest.json").display()
    );
    Ok(())
}

fn parse_dims(s: &str) -> Result<[usize; 3], Failure> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::contract(format!("--dims must be N or X,Y,Z, got '{s}'")))?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(Failure::contract(format!("--dims must be N or X,Y,Z, got '{s}'"))),
    }
}

/// The loaded cohort plus the effective split.
struct Study {
    cohort: Cohort,
    train: Vec<String>,
    test: Vec<String>,
}

impl Study {
    fn open(cfg: &PipelineConfig) -> Result<Self, Failure> {
        let cohort = CohortManifest::load(cfg.manifest()?)?;
        let train = cfg.train.clone().unwrap_or_else(|| cohort.train().to_vec());
        let test = cfg.test.clone().unwrap_or_else(|| cohort.test().to_vec());
        Ok(Study { cohort, train, test })
    }

    /// Loads every subject in the split with the contrasts the pairs need,
    /// plus T1 for the masks derived from it.
    fn load(&self, cfg: &PipelineConfig) -> Result<Vec<LoadedSubject>, Failure> {
        let mut contrasts = contrasts(cfg);
        if !contrasts.contains(&Contrast::T1) {
            contrasts.push(Contrast::T1);
        }
        let ids: Vec<&String> = self.train.iter().chain(&self.test).collect();
        let loaded = par::map_slice(&ids, |id| self.cohort.load_contrasts(id, &contrasts));
        loaded.into_iter().map(|r| r.map_err(Failure::from)).collect()
    }

    fn brain(&self, id: &str) -> Result<mrnorm::Mask, Failure> {
        let entry = self.cohort.manifest.entry(id)?;
        Ok(nifti::load_mask(self.cohort.resolve(&entry.brain))?)
    }
}

fn contrasts(cfg: &PipelineConfig) -> Vec<Contrast> {
    let mut c: Vec<Contrast> = cfg.pairs.iter().flat_map(|p| [p.source, p.target]).collect();
    c.sort();
    c.dedup();
    c
}

fn norm_settings(cfg: &PipelineConfig) -> NormSettings {
    NormSettings {
        params: cfg.params.clone(),
        wm_from: cfg.wm_from,
    }
}

fn model_path(out: &Path, norm: Normalization, c: Contrast, test: bool) -> PathBuf {
    let name = if test { format!("{c}.test.json") } else { format!("{c}.json") };
    out.join("models").join(norm.as_str()).join(name)
}

fn normalized_path(out: &Path, norm: Normalization, id: &str, c: Contrast) -> PathBuf {
    out.join("normalized").join(norm.as_str()).join(id).join(format!("{c}.nii.gz"))
}

fn synth_dir(out: &Path, norm: Normalization, task: &str) -> PathBuf {
    out.join("synth").join(norm.as_str()).join(task)
}

pub fn fit(cfg: &PipelineConfig) -> Outcome {
    let study = Study::open(cfg)?;
    let subjects = study.load(cfg)?;
    let (train, test) = split_subjects(&subjects, &study.train, &study.test)?;
    let contrasts = contrasts(cfg);
    let settings = norm_settings(cfg);
    for &norm in &cfg.normalizations {
        if norm == Normalization::Raw {
            continue;
        }
        info!("fitting {norm}");
        let fitted = fit_for_split(norm, &train, &test, &contrasts, &settings)?;
        let sets = std::iter::once((false, &fitted.train)).chain(fitted.test.as_ref().map(|t| (true, t)));
        for (is_test, models) in sets {
            for (&c, model) in models {
                let path = model_path(&cfg.out, norm, c, is_test);
                mkdir(path.parent().expect("model dir"))?;
                save_model(model, &path)?;
            }
        }
        println!("{norm}: fitted {} contrast(s) on {} subjects", contrasts.len(), train.len());
    }
    Ok(())
}

fn load_models(cfg: &PipelineConfig, norm: Normalization, test: bool) -> Result<BTreeMap<Contrast, NormalizerModel>, Failure> {
    contrasts(cfg)
        .into_iter()
        .map(|c| Ok((c, load_model(model_path(&cfg.out, norm, c, test))?)))
        .collect()
}

pub fn apply(cfg: &PipelineConfig) -> Outcome {
    let study = Study::open(cfg)?;
    let subjects = study.load(cfg)?;
    let (train, test) = split_subjects(&subjects, &study.train, &study.test)?;
    let contrasts = contrasts(cfg);
    let settings = norm_settings(cfg);
    for &norm in &cfg.normalizations {
        let (train_models, test_models) = match norm {
            Normalization::Raw => (BTreeMap::new(), BTreeMap::new()),
            Normalization::Method(m) => {
                let tr = load_models(cfg, norm, false)?;
                let te = if m == mrnorm::normalize::Method::Ravel {
                    load_models(cfg, norm, true)?
                } else {
                    tr.clone()
                };
                (tr, te)
            }
        };
        let jobs: Vec<_> = train
            .iter()
            .map(|s| (*s, &train_models))
            .chain(test.iter().map(|s| (*s, &test_models)))
            .collect();
        let results = par::map_slice(&jobs, |&(s, models)| -> Outcome {
            let n = match norm {
                Normalization::Raw => raw_subject(s, &contrasts)?,
                Normalization::Method(_) => normalize_subject(models, s, &settings)?,
            };
            for (&c, v) in &n.volumes {
                let path = normalized_path(&cfg.out, norm, &n.id, c);
                mkdir(path.parent().expect("subject dir"))?;
                nifti::save_volume(v, &path)?;
            }
            if !n.audits.is_empty() {
                let audits: BTreeMap<String, &Audit> = n.audits.iter().map(|(c, a)| (c.to_string(), a)).collect();
                let path = cfg.out.join("normalized").join(norm.as_str()).join(&n.id).join("audit.json");
                let text = serde_json::to_string_pretty(&audits).expect("audit json");
                std::fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
            }
            Ok(())
        });
        results.into_iter().collect::<Outcome>()?;
        println!("{norm}: normalized {} subjects", jobs.len());
    }
    Ok(())
}

fn load_normalized(cfg: &PipelineConfig, norm: Normalization, id: &str, c: Contrast) -> Result<Volume, Failure> {
    Ok(nifti::load_volume(normalized_path(&cfg.out, norm, id, c))?.with_contrast(c))
}

pub fn synth(cfg: &PipelineConfig) -> Outcome {
    let study = Study::open(cfg)?;
    let settings = SynthSettings {
        samples_per_image: cfg.samples_per_image,
        forest: cfg.forest,
        seed: cfg.seed,
        ..SynthSettings::default()
    };
    let brains: BTreeMap<&str, mrnorm::Mask> = study
        .train
        .iter()
        .chain(&study.test)
        .map(|id| Ok((id.as_str(), study.brain(id)?)))
        .collect::<Result<_, Failure>>()?;
    for &norm in &cfg.normalizations {
        for pair in &cfg.pairs {
            let task = pair.label();
            let load_pair = |id: &String| -> Result<(Volume, Volume), Failure> {
                Ok((
                    load_normalized(cfg, norm, id, pair.source)?,
                    load_normalized(cfg, norm, id, pair.target)?,
                ))
            };
            let train: Vec<(Volume, Volume)> = study.train.iter().map(load_pair).collect::<Result<_, _>>()?;
            let inputs: Vec<SynthInput<'_>> = study
                .train
                .iter()
                .zip(&train)
                .map(|(id, (s, t))| (id.as_str(), s, t, &brains[id.as_str()]))
                .collect();
            let dir = synth_dir(&cfg.out, norm, &task);
            mkdir(&dir)?;
            for &kind in &cfg.models {
                let model = train_synth(kind, *pair, norm.as_str(), &inputs, &settings)?;
                save_regression(&model, dir.join(format!("{kind}.model")))?;
                let pred_dir = dir.join(kind.as_str());
                mkdir(&pred_dir)?;
                let results = par::map_slice(&study.test, |id| -> Outcome {
                    let src = load_normalized(cfg, norm, id, pair.source)?;
                    let pred = predict_volume(&model, &src, &brains[id.as_str()])?;
                    nifti::save_volume(&pred, pred_dir.join(format!("{id}.nii.gz")))?;
                    Ok(())
                });
                results.into_iter().collect::<Outcome>()?;
                println!("{norm} {task} {kind}: trained on {} subjects, predicted {}", train.len(), study.test.len());
            }
        }
    }
    Ok(())
}

pub fn evaluate(cfg: &PipelineConfig) -> Outcome {
    if !cfg.normalizations.contains(&Normalization::Raw) {
        return Err(Failure::contract("evaluate compares against the raw baseline; include `raw` in --method"));
    }
    let study = Study::open(cfg)?;
    let eval = EvalSettings::default();
    let mut rows = Vec::new();
    for &norm in &cfg.normalizations {
        for pair in &cfg.pairs {
            let task = pair.label();
            let dir = synth_dir(&cfg.out, norm, &task);
            for &kind in &cfg.models {
                let scores = par::map_slice(&study.test, |id| {
                    let b = study.brain(id)?;
                    let pred = nifti::load_volume(dir.join(kind.as_str()).join(format!("{id}.nii.gz")))?;
                    let target = load_normalized(cfg, norm, id, pair.target)?;
                    Ok::<_, Failure>(score(&pred, &target, &b, &eval)?)
                });
                for (id, sc) in study.test.iter().zip(scores) {
                    for (metric, value) in sc? {
                        rows.push(MetricRow {
                            task: task.clone(),
                            synth: kind.to_string(),
                            method: norm.to_string(),
                            subject: id.clone(),
                            metric,
                            value,
                        });
                    }
                }
            }
        }
    }
    let report = QualityReport::build(rows, RAW, cfg.resamples, cfg.seed)?;
    let dir = cfg.out.join("report");
    report.write_dir(&dir)?;
    println!("wrote {} metric rows to {}", report.rows.len(), dir.display());
    Ok(())
}

pub fn report(cfg: &PipelineConfig) -> Outcome {
    let report = QualityReport::read_json(cfg.out.join("report").join("quality.json"))?;
    println!("{:<10} {:<3} {:<12} {:<6} {:>3} {:>10} {:>22}", "task", "syn", "method", "metric", "n", "mean", "95% interval");
    for s in &report.summaries {
        println!(
            "{:<10} {:<3} {:<12} {:<6} {:>3} {:>10.4} [{:>9.4}, {:>9.4}]",
            s.task, s.synth, s.method, s.metric.as_str(), s.n, s.mean, s.ci_lo, s.ci_hi
        );
    }
    println!();
    println!("paired signed-rank tests against {}:", report.baseline);
    for c in report.comparisons.iter().filter(|c| c.baseline == report.baseline) {
        let note = if c.tested { "" } else { " (not tested)" };
        println!(
            "{:<10} {:<3} {:<6} {:<12} diff {:>+10.4}  p {:.4}{note}",
            c.task, c.synth, c.metric.as_str(), c.method, c.mean_difference, c.p_value
        );
    }
    println!();
    let mut cells: Vec<(&str, &str)> = report.summaries.iter().map(|s| (s.task.as_str(), s.synth.as_str())).collect();
    cells.sort();
    cells.dedup();
    for (task, synth) in cells {
        match consistent_winner(&report, task, synth, 0.05) {
            Some(m) => println!("{task} {synth}: {m} beats every other method on every metric"),
            None => println!("{task} {synth}: no method beats every other on every metric"),
        }
    }
    Ok(())
}
