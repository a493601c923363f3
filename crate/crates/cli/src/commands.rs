//! One function per subcommand. Each writes into a fresh run directory whose
//! `config.txt` holds the resolved configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eclf_core::classifier::{encode_all, extract_features, train_baseline, train_final, ClassifierModel, EvalRow, EVAL_HEADER};
use eclf_core::eclfcs::explain_cs;
use eclf_core::explainer::{explain, ExplanationQuery, Models, ReferenceSet};
use eclf_core::metrics::{decomposition_check, run_sweep, synth_alignment};
use eclf_core::synthleaf::{generate_dataset, ingest_folder, load_dataset, save_dataset, Dataset, LabeledSample, Split};
use eclf_core::vae::{metric_csv, val_csv, Checkpoint, Mode, TrainedVae, Trainer};
use eclf_core::{EclfError, Result};

use crate::config::RunConfig;
use crate::runs::{self, CLASSIFIER_FILE, CONFIG_FILE, DATASET_DIR, VAE_FILE};

/// Inputs shared by all commands.
pub struct Context {
    pub cfg: RunConfig,
    pub root: PathBuf,
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

fn start(ctx: &Context, command: &str) -> Result<PathBuf> {
    let dir = runs::new_run_dir(&ctx.root, command)?;
    let p = dir.join(CONFIG_FILE);
    std::fs::write(&p, ctx.cfg.render()).map_err(|e| EclfError::io(&p, e))?;
    Ok(dir)
}

fn write(path: PathBuf, text: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| EclfError::io(&path, e))?;
    out.push(path);
    Ok(())
}

fn dataset(ctx: &Context, explicit: Option<&Path>) -> Result<Dataset> {
    let dir = runs::resolve(explicit, &ctx.root, DATASET_DIR, "dataset", "gen-data` or `eclf ingest")?;
    load_dataset(&dir)
}

fn vae(ctx: &Context, explicit: Option<&Path>) -> Result<TrainedVae> {
    let p = runs::resolve(explicit, &ctx.root, VAE_FILE, "VAE checkpoint", "train-vae")?;
    TrainedVae::from_checkpoint(&Checkpoint::load(&p)?, ctx.cfg.vae.selection)
}

fn classifier(ctx: &Context, explicit: Option<&Path>) -> Result<ClassifierModel> {
    let p = runs::resolve(explicit, &ctx.root, CLASSIFIER_FILE, "classifier checkpoint", "train-cls")?;
    ClassifierModel::from_checkpoint(&Checkpoint::load(&p)?)
}

fn dataset_name(data: &Dataset) -> String {
    data.preset.to_string()
}

pub fn gen_data(ctx: &Context) -> Result<Outcome> {
    let spec = ctx.cfg.data.dataset_spec()?;
    let data = generate_dataset(&spec)?;
    let dir = start(ctx, "gen-data")?;
    let ds = dir.join(DATASET_DIR);
    save_dataset(&data, &ds)?;
    Ok(Outcome {
        run_dir: dir,
        artifacts: vec![ds],
    })
}

pub fn ingest(ctx: &Context, folder: &Path) -> Result<Outcome> {
    let data = ingest_folder(folder, &ctx.cfg.data.ingest_spec())?;
    let dir = start(ctx, "ingest")?;
    let ds = dir.join(DATASET_DIR);
    save_dataset(&data, &ds)?;
    Ok(Outcome {
        run_dir: dir,
        artifacts: vec![ds],
    })
}

pub fn train_vae(ctx: &Context, data_dir: Option<&Path>, resume: Option<&Path>) -> Result<Outcome> {
    let data = dataset(ctx, data_dir)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&data, &Checkpoint::load(p)?)?,
        None => Trainer::new(&data, ctx.cfg.vae.clone(), ctx.cfg.heads.clone())?,
    };
    let dir = start(ctx, "train-vae")?;
    let ck_path = dir.join(VAE_FILE);
    let result = trainer.run(|it, ck| {
        log::info!("checkpoint at iteration {it}");
        ck.save(&ck_path)
    });
    let outcome = match result {
        Ok(o) => o,
        Err(EclfError::Diverged { iteration, reason, last_good }) => {
            let p = dir.join("vae.last_good.ckpt");
            last_good.save(&p)?;
            return Err(EclfError::Invalid(format!(
                "training diverged at iteration {iteration} ({reason}); last good state saved to {}",
                p.display()
            )));
        }
        Err(e) => return Err(e),
    };
    outcome.checkpoint.save(&ck_path)?;
    let mut artifacts = vec![ck_path];
    write(dir.join("metrics.csv"), &metric_csv(&outcome.metric_log), &mut artifacts)?;
    write(dir.join("val.csv"), &val_csv(&outcome.val_log), &mut artifacts)?;
    Ok(Outcome { run_dir: dir, artifacts })
}

fn eval_rows(name: &str, model: &str, seed: u64, rows: &[(&str, f64)]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for (split, acc) in rows {
        let r = EvalRow {
            dataset: name.to_string(),
            model: model.to_string(),
            split: split.to_string(),
            accuracy: *acc,
            seed,
        };
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn train_cls(ctx: &Context, data_dir: Option<&Path>, vae_path: Option<&Path>) -> Result<Outcome> {
    let data = dataset(ctx, data_dir)?;
    let model = vae(ctx, vae_path)?;
    let feats = |s: Split| extract_features(data.split(s), &model.vae);
    let (tr, va) = (feats(Split::Train)?, feats(Split::Val)?);
    let clf = train_final(
        &tr,
        &data.labels(Split::Train),
        &va,
        &data.labels(Split::Val),
        data.classes(),
        &ctx.cfg.classifier,
    )?;
    let dir = start(ctx, "train-cls")?;
    let mut ck = Checkpoint::new();
    clf.save_into(&mut ck);
    let ck_path = dir.join(CLASSIFIER_FILE);
    ck.save(&ck_path)?;
    let mut artifacts = vec![ck_path];
    let val = clf.accuracy(&va, &data.labels(Split::Val))?;
    let csv = eval_rows(&dataset_name(&data), &model.mode().to_string(), ctx.cfg.classifier.seed, &[("val", val)]);
    write(dir.join("classifier.csv"), &csv, &mut artifacts)?;
    Ok(Outcome { run_dir: dir, artifacts })
}

fn pick_queries<'a>(data: &'a Dataset, ids: &[String]) -> Result<Vec<&'a LabeledSample>> {
    let test = data.split(Split::Test);
    if ids.is_empty() {
        // One query per class: the first test image of each.
        return Ok((0..data.classes()).filter_map(|c| test.iter().find(|s| s.class_id == c)).collect());
    }
    ids.iter()
        .map(|id| {
            test.iter()
                .find(|s| &s.id == id)
                .or_else(|| id.parse::<usize>().ok().and_then(|i| test.get(i)))
                .ok_or_else(|| EclfError::Invalid(format!("no test sample with id or index {id:?}")))
        })
        .collect()
}

pub fn explain_cmd(ctx: &Context, data_dir: Option<&Path>, vae_path: Option<&Path>, cls_path: Option<&Path>, ids: &[String]) -> Result<Outcome> {
    let data = dataset(ctx, data_dir)?;
    let model = vae(ctx, vae_path)?;
    let clf = classifier(ctx, cls_path)?;
    let train = data.split(Split::Train);
    let post = encode_all(train, &model.vae)?;
    let reference = ReferenceSet {
        posteriors: (0..post.len()).map(|i| post.get(i)).collect(),
        labels: data.labels(Split::Train),
    };
    let queries = pick_queries(&data, ids)?;
    let qpost = encode_all(&queries.iter().map(|s| (*s).clone()).collect::<Vec<_>>(), &model.vae)?;
    let names = if data.class_names.is_empty() {
        model.class_names.clone()
    } else {
        data.class_names.clone()
    };
    let models = Models {
        vae: &model.vae,
        classifier: &clf,
        mode: model.mode(),
        class_names: &names,
    };
    let dir = start(ctx, "explain")?;
    let out_dir = dir.join("explanations");
    let mut artifacts = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let query = ExplanationQuery {
            id: q.id.clone(),
            posterior: qpost.get(i),
        };
        let report = match model.mode() {
            Mode::Eclf => explain(&query, &models, &reference, &ctx.cfg.explain)?,
            Mode::EclfCs => explain_cs(&query, &models, &reference, &ctx.cfg.explain)?,
        };
        artifacts.extend(report.write(&out_dir)?);
    }
    Ok(Outcome { run_dir: dir, artifacts })
}

pub fn eval(ctx: &Context, data_dir: Option<&Path>, vae_path: Option<&Path>, cls_path: Option<&Path>, baseline: bool) -> Result<Outcome> {
    let data = dataset(ctx, data_dir)?;
    let model = vae(ctx, vae_path)?;
    let clf = classifier(ctx, cls_path)?;
    let name = dataset_name(&data);
    let seed = ctx.cfg.classifier.seed;
    let dir = start(ctx, "eval")?;
    let mut artifacts = Vec::new();

    let acc = |s: Split| clf.accuracy(&extract_features(data.split(s), &model.vae)?, &data.labels(s));
    let mut csv = eval_rows(
        &name,
        &model.mode().to_string(),
        seed,
        &[("val", acc(Split::Val)?), ("test", acc(Split::Test)?)],
    );
    if baseline {
        let b = train_baseline(data.split(Split::Train), data.split(Split::Val), data.classes(), &ctx.cfg.classifier)?;
        let rows = eval_rows(
            &name,
            "baseline",
            seed,
            &[("val", b.val_accuracy), ("test", b.accuracy(data.split(Split::Test))?)],
        );
        csv.push_str(rows.split_once('\n').map_or("", |(_, body)| body));
    }
    write(dir.join("eval.csv"), &csv, &mut artifacts)?;

    let test = data.split(Split::Test);
    let post = encode_all(test, &model.vae)?;
    let mut summary = String::new();
    let dec = decomposition_check(&post, 10_000, 64, seed)?;
    let _ = writeln!(
        summary,
        "decomposition expected_kl {:.6} index_mi {:.6} tc {:.6} dkl {:.6} residual {:.6}",
        dec.expected_kl,
        dec.terms.index_mi,
        dec.terms.tc,
        dec.terms.dkl,
        dec.residual()
    );
    if let Some(records) = test.iter().map(|s| s.factors.clone()).collect::<Option<Vec<_>>>() {
        let align = synth_alignment(&post.mu.cast::<f64>(), &records)?;
        write(dir.join("alignment.csv"), &align.to_csv()?, &mut artifacts)?;
        for ((f, (dim, score)), name) in align.best_per_factor().into_iter().enumerate().zip(&align.factors) {
            let _ = writeln!(summary, "factor {f} {name} best_dim {dim} spearman {score:.4}");
        }
    }
    write(dir.join("summary.txt"), &summary, &mut artifacts)?;
    Ok(Outcome { run_dir: dir, artifacts })
}

pub fn sweep(ctx: &Context, data_dir: Option<&Path>) -> Result<Outcome> {
    let data = dataset(ctx, data_dir)?;
    let c = &ctx.cfg;
    let result = run_sweep(&data, &c.sweep, &c.vae, &c.heads, &c.classifier)?;
    let dir = start(ctx, "sweep")?;
    let mut artifacts = Vec::new();
    write(dir.join("sweep.csv"), &result.to_csv()?, &mut artifacts)?;
    write(dir.join("summary.txt"), &result.summary()?, &mut artifacts)?;
    Ok(Outcome { run_dir: dir, artifacts })
}
