use std::fs;
use std::path::{Path, PathBuf};

use advmos_core::attack::{
    batch_attack_manifest, read_adversarial, summarize, write_adversarial, write_summary_csv, ClipAttack,
};
use advmos_core::corpus::{ingest_directory, synth_corpus, write_rejections, SplitRule, MANIFEST_FILE};
use advmos_core::defense::{adv_train, build_labeled, compute_errors, AdversarialSet, RobustnessPair};
use advmos_core::predictor::{load_model, save_model, train_predictor, TrainingMetadata};
use advmos_core::signal::{apply, peak_normalize};
use advmos_core::spectral::stft;
use advmos_core::study::{study_summary, HumanStudyTable};
use advmos_core::wav::load_wav;
use advmos_core::{Error, Manifest, Result, Split, StftConfig};
use serde::Serialize;

use crate::config::RunConfig;

const BUNDLED_STUDY: &str = include_str!("../data/human_study.csv");

/// Default artifact locations under the run directory.
pub struct Layout {
    pub out: PathBuf,
    pub corpus_id: String,
}

impl Layout {
    pub fn manifest(&self) -> PathBuf {
        self.out.join("corpus").join(&self.corpus_id).join(MANIFEST_FILE)
    }

    pub fn teacher(&self) -> PathBuf {
        self.out.join("models").join("f.aqpm")
    }

    pub fn student(&self) -> PathBuf {
        self.out.join("models").join("g.aqpm")
    }

    pub fn attacks(&self, split: &str) -> PathBuf {
        self.out.join("attacks").join(split)
    }
}

pub struct Context {
    pub config: RunConfig,
    pub layout: Layout,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    parent_dir(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn create_file(path: &Path) -> Result<fs::File> {
    parent_dir(path)?;
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn load_clips(manifest: &Manifest, split: Split) -> Result<Vec<(String, advmos_core::Waveform)>> {
    manifest
        .split(split)
        .map(|e| Ok((e.clip_id.clone(), manifest.load_clip(e)?)))
        .collect()
}

pub fn synth(ctx: &Context) -> Result<()> {
    let manifest = synth_corpus(&ctx.config.synth, ctx.layout.out.join("corpus"))?;
    println!(
        "synthesized corpus '{}': {} train, {} test clips -> {}",
        manifest.corpus_id,
        manifest.split(Split::Train).count(),
        manifest.split(Split::Test).count(),
        ctx.layout.manifest().display()
    );
    Ok(())
}

pub fn train(ctx: &Context, manifest: Option<PathBuf>, model: Option<PathBuf>) -> Result<()> {
    let manifest = Manifest::read(manifest.unwrap_or_else(|| ctx.layout.manifest()))?;
    let corpus = manifest
        .split(Split::Train)
        .map(|e| {
            let label = e
                .label
                .ok_or_else(|| Error::InvalidData(format!("training clip '{}' has no label", e.clip_id)))?;
            Ok((manifest.load_clip(e)?, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = ctx.config.train;
    let outcome = train_predictor(&corpus, &cfg)?;
    let path = model.unwrap_or_else(|| ctx.layout.teacher());
    parent_dir(&path)?;
    let meta = TrainingMetadata {
        seed: cfg.seed,
        epochs: cfg.epochs,
        corpus_id: manifest.corpus_id.clone(),
    };
    save_model(&outcome.model, &meta, &path)?;
    let mut trace = String::from("step,mse\n");
    for (i, l) in outcome.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{l}\n"));
    }
    write_text(&path.with_extension("loss.csv"), &trace)?;
    println!(
        "trained predictor on {} clips, final batch mse {:.4} -> {}",
        corpus.len(),
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }

    fn admits(self, split: Split) -> bool {
        match self {
            SplitArg::Train => split == Split::Train,
            SplitArg::Test => split == Split::Test,
            SplitArg::All => true,
        }
    }
}

pub struct AttackArgs {
    pub model: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub input_dir: Option<PathBuf>,
    pub split: SplitArg,
    pub dest: Option<PathBuf>,
}

pub fn attack(ctx: &Context, args: AttackArgs) -> Result<()> {
    let model = load_model(args.model.unwrap_or_else(|| ctx.layout.teacher()))?;
    let dest = args.dest.unwrap_or_else(|| ctx.layout.attacks(args.split.name()));
    create_dir(&dest)?;
    let manifest = match (&args.input_dir, args.manifest) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --manifest or --input-dir, not both".into())),
        (Some(dir), None) => {
            let (m, rejected) = ingest_directory(dir, SplitRule::All(Split::Test))?;
            if !rejected.is_empty() {
                write_rejections(dest.join("rejected.tsv"), &rejected)?;
            }
            m
        }
        (None, m) => Manifest::read(m.unwrap_or_else(|| ctx.layout.manifest()))?,
    };
    let split = if args.input_dir.is_some() {
        SplitArg::All
    } else {
        args.split
    };
    let cfg = ctx.config.attack;
    let entries: Vec<_> = manifest.entries.iter().filter(|e| split.admits(e.split)).collect();
    let items = batch_attack_manifest(&manifest, entries.iter().copied(), &model, &cfg);
    for (entry, item) in entries.iter().zip(&items) {
        if let Ok(r) = &item.result {
            write_adversarial(&dest, &item.clip_id, &manifest.load_clip(entry)?, r)?;
        }
    }
    write_summary_csv(&items, create_file(&dest.join("summary.csv"))?)?;
    let summary = summarize(&items);
    write_json(&dest.join("summary.json"), &summary)?;
    let worst_db = items
        .iter()
        .filter_map(|c| c.result.as_ref().ok())
        .map(|r| r.db)
        .fold(f64::NEG_INFINITY, f64::max);
    println!(
        "attacked {} clips ({} failed): success rate {:.3}, mean deviation {:.4} (initial {:.4}), loudest {:.2} dB -> {}",
        summary.clips,
        summary.failed,
        summary.success_rate,
        summary.mean_deviation,
        summary.mean_initial_deviation,
        worst_db,
        dest.display()
    );
    Ok(())
}

fn read_sidecars(dir: &Path, ids: impl Iterator<Item = String>) -> Vec<ClipAttack> {
    ids.map(|clip_id| {
        let path = dir.join(format!("{clip_id}.adv.json"));
        let result = read_adversarial(&path).map_err(|e| e.to_string());
        ClipAttack { clip_id, result }
    })
    .collect()
}

pub struct AdvTrainArgs {
    pub model: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub adv_dir: Option<PathBuf>,
    pub student: Option<PathBuf>,
}

pub fn advtrain(ctx: &Context, args: AdvTrainArgs) -> Result<()> {
    let teacher = load_model(args.model.unwrap_or_else(|| ctx.layout.teacher()))?;
    let manifest = Manifest::read(args.manifest.unwrap_or_else(|| ctx.layout.manifest()))?;
    let adv_dir = args.adv_dir.unwrap_or_else(|| ctx.layout.attacks("train"));
    let (clean, failed) = build_labeled(load_clips(&manifest, Split::Train)?, &teacher);
    if let Some((id, e)) = failed.first() {
        return Err(Error::InvalidData(format!("teacher cannot label '{id}': {e}")));
    }
    let results = read_sidecars(&adv_dir, clean.clips.iter().map(|c| c.clip_id.clone()));
    if let Some(missing) = results.iter().find(|r| r.result.is_err()) {
        return Err(Error::InvalidData(format!(
            "no usable attack result for '{}' in {}",
            missing.clip_id,
            adv_dir.display()
        )));
    }
    let adversarial = AdversarialSet::from_results(&clean, results)?;
    let cfg = ctx.config.advtrain;
    let outcome = adv_train(&teacher, &clean, &adversarial, &cfg)?;
    let path = args.student.unwrap_or_else(|| ctx.layout.student());
    parent_dir(&path)?;
    let meta = TrainingMetadata {
        seed: cfg.seed,
        epochs: cfg.epochs,
        corpus_id: manifest.corpus_id.clone(),
    };
    save_model(&outcome.model, &meta, &path)?;
    let mut log = String::from("epoch,adversarial_loss,forgetting_loss\n");
    for e in &outcome.log {
        log.push_str(&format!("{},{},{}\n", e.epoch, e.adversarial_loss, e.forgetting_loss));
    }
    write_text(&path.with_extension("advtrain.csv"), &log)?;
    let (first, last) = (outcome.log[0], outcome.log[outcome.log.len() - 1]);
    println!(
        "adversarial training on {} + {} clips: adversarial loss {:.5} -> {:.5}, forgetting {:.5} -> {:.5} -> {}",
        clean.len(),
        adversarial.len(),
        first.adversarial_loss,
        last.adversarial_loss,
        first.forgetting_loss,
        last.forgetting_loss,
        path.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub adv_dir: Option<PathBuf>,
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<()> {
    let f = load_model(args.teacher.unwrap_or_else(|| ctx.layout.teacher()))?;
    let g = load_model(args.student.unwrap_or_else(|| ctx.layout.student()))?;
    let manifest = Manifest::read(args.manifest.unwrap_or_else(|| ctx.layout.manifest()))?;
    let adv_dir = args.adv_dir.unwrap_or_else(|| ctx.layout.attacks("test"));
    let pairs = load_clips(&manifest, Split::Test)?
        .into_iter()
        .map(|(id, x)| {
            let r = read_adversarial(adv_dir.join(format!("{id}.adv.json")))?;
            RobustnessPair::from_result(id, x, &r)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = compute_errors(&f, &g, &pairs)?;
    let dir = ctx.layout.out.join("eval");
    write_json(&dir.join("robustness.json"), &report)?;
    report.write_csv(create_file(&dir.join("robustness.csv"))?)?;
    println!("robustness over {} held-out clips", report.n);
    println!("{:<6} {:>9} {:>9} {:>9} {:>9}", "", "E_f", "E_g", "F_g", "pass");
    let rates = report.pass_rate();
    for (j, name) in advmos_core::QualityScore::NAMES.iter().enumerate() {
        println!(
            "{name:<6} {:>9.5} {:>9.5} {:>9.5} {:>9.3}",
            report.e_f[j], report.e_g[j], report.f_g[j], rates[j]
        );
    }
    Ok(())
}

pub fn stats(ctx: &Context, table: Option<PathBuf>) -> Result<()> {
    let table = match table {
        Some(p) => HumanStudyTable::read_csv(fs::File::open(&p).map_err(|e| Error::io(&p, e))?)?,
        None => HumanStudyTable::read_csv(BUNDLED_STUDY.as_bytes())?,
    };
    let summary = study_summary(&table)?;
    write_json(&ctx.layout.out.join("stats").join("study_summary.json"), &summary)?;
    let counts = summary.participant_stats.iter().map(|p| p.correct);
    let (lo, hi) = (counts.clone().min().unwrap_or(0), counts.max().unwrap_or(0));
    let most_b = summary.pair_stats.iter().map(|p| p.b_count).max().unwrap_or(0);
    println!(
        "{} participants x {} pairs: correct answers {lo}..{hi}, max z {:.4}, min one-tailed p {:.4}",
        summary.participants, summary.pairs, summary.max_z, summary.min_p
    );
    println!(
        "at most {most_b} of {} chose B on any pair: at least {:.2}% believed it identical",
        summary.participants,
        100.0 * (summary.participants - most_b) as f64 / summary.participants as f64
    );
    Ok(())
}

pub fn spectrogram(ctx: &Context, input: PathBuf, adversarial: Option<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let mut x = peak_normalize(&load_wav(&input)?)?;
    if let Some(side) = &adversarial {
        x = apply(&x, &read_adversarial(side)?.delta())?;
    }
    let spec = stft(&x, StftConfig::default())?;
    let output = output.unwrap_or_else(|| {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
        let suffix = if adversarial.is_some() { ".adv" } else { "" };
        ctx.layout.out.join("spectrograms").join(format!("{stem}{suffix}.csv"))
    });
    let file = create_file(&output)?;
    spec.write_magnitude_csv(std::io::BufWriter::new(file))
        .map_err(|e| Error::io(&output, e))?;
    println!(
        "{} frames x {} bins -> {}",
        spec.frames(),
        spec.bins(),
        output.display()
    );
    Ok(())
}
