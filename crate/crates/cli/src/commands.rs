use std::fs;
use std::path::{Path, PathBuf};

use roiformer::attention::export_scores;
use roiformer::checkpoint::Checkpoint;
use roiformer::data::{
    center_segment, encode_phenotype, generate_synthetic, load_dataset, load_phenotypic_table,
    load_subject_series, split_train_val, write_dataset, PhenoStats, Subject, SyntheticSpec,
    PHENOTYPIC_FILE,
};
use roiformer::metrics::MetricsReport;
use roiformer::model::{init_parameters, model_forward};
use roiformer::rng::{RngStream, Stream};
use roiformer::train::{evaluate, train, write_history};
use roiformer::{Error, Graph, Mode, Result};
use serde::{Deserialize, Serialize};

use crate::run_config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.tsv";
pub const VALIDATION_FILE: &str = "validation.tsv";
pub const MANIFEST_FILE: &str = "manifest.toml";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io(path))
}

/// What `synth` records next to the generated files.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub synthetic: SyntheticSpec,
}

pub fn synth(spec: &SyntheticSpec, out: &Path) -> Result<Vec<Subject>> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let subjects = generate_synthetic(spec)?;
    write_dataset(out, &subjects)?;
    let manifest = Manifest {
        synthetic: spec.clone(),
    };
    write(
        &out.join(MANIFEST_FILE),
        toml::to_string(&manifest).expect("manifest serializes"),
    )?;
    Ok(subjects)
}

pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub best_epoch: usize,
    pub validation: MetricsReport,
}

pub fn train_run(cfg: &RunConfig) -> Result<TrainSummary> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let model = &cfg.model;
    let subjects = load_dataset(
        &cfg.data.series_dir,
        &cfg.data.phenotypic,
        cfg.train.segment_length,
    )?;
    if let Some(s) = subjects.iter().find(|s| s.series.n_rois() != model.n_rois) {
        return Err(Error::Data(format!(
            "subject {} has {} ROIs but model.n_rois = {}",
            s.series.subject_id,
            s.series.n_rois(),
            model.n_rois
        )));
    }
    let ids: Vec<String> = subjects.iter().map(|s| s.series.subject_id.clone()).collect();
    let (train_ids, val_ids) = split_train_val(&ids, cfg.train.val_fraction, cfg.train.seed)
        .map_err(|e| Error::Data(e.to_string()))?;
    let (train_set, val_set): (Vec<Subject>, Vec<Subject>) = subjects
        .into_iter()
        .partition(|s| train_ids.contains(&s.series.subject_id));
    let stats = PhenoStats::from_records(train_set.iter().map(|s| &s.record).collect::<Vec<_>>());

    let out = &cfg.data.out_dir;
    fs::create_dir_all(out).map_err(io(out))?;
    write(&out.join(CONFIG_FILE), cfg.to_toml())?;

    let params = init_parameters(model, cfg.train.seed);
    let outcome = train(
        params,
        &train_set,
        &val_set,
        &stats,
        model,
        &cfg.train,
        |r| {
            let loss = r.train_loss.map_or("-".to_string(), |l| format!("{l:.5}"));
            let auc = r.val.auc.map_or("nan".to_string(), |a| format!("{a:.4}"));
            eprintln!("epoch {:>3}  loss {loss}  val acc {:.4}  auc {auc}", r.epoch, r.val.acc);
        },
    )?;

    let ck = Checkpoint {
        config: model.clone(),
        epoch: outcome.best_epoch,
        params: outcome.best_params,
        validation: Some(outcome.best_val.clone()),
        pheno_stats: stats,
        train_ids,
        val_ids,
    };
    ck.save(&out.join(CHECKPOINT_FILE))?;
    write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    write(&out.join(VALIDATION_FILE), outcome.best_val.to_tsv())?;
    Ok(TrainSummary {
        out_dir: out.clone(),
        best_epoch: outcome.best_epoch,
        validation: outcome.best_val,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

fn check_rois(found: usize, ck: &Checkpoint, what: &str) -> Result<()> {
    if found != ck.config.n_rois {
        return Err(Error::Data(format!(
            "{what} has {found} ROIs but the checkpoint expects n_rois = {}",
            ck.config.n_rois
        )));
    }
    Ok(())
}

pub fn eval(
    ck: &Checkpoint,
    series_dir: &Path,
    phenotypic: &Path,
    split: Split,
    out: &Path,
) -> Result<MetricsReport> {
    let len = ck.config.seq_len;
    let subjects = load_dataset(series_dir, phenotypic, len)?;
    if let Some(s) = subjects.first() {
        check_rois(s.series.n_rois(), ck, &format!("subject {}", s.series.subject_id))?;
    }
    // The checkpoint's splits keep their recorded order.
    let ids: Vec<&String> = match split {
        Split::All => subjects.iter().map(|s| &s.series.subject_id).collect(),
        Split::Train => ck.train_ids.iter().collect(),
        Split::Val => ck.val_ids.iter().collect(),
    };
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let s = subjects
            .iter()
            .find(|s| &s.series.subject_id == id)
            .ok_or_else(|| Error::Data(format!("subject {id} from the checkpoint is not in the data")))?;
        samples.push(s.center_sample(len, &ck.pheno_stats)?);
    }
    if samples.is_empty() {
        return Err(Error::Data("no subjects to evaluate".into()));
    }
    let report = evaluate(&ck.params, &ck.config, &samples)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    write(out, report.to_tsv())?;
    Ok(report)
}

pub fn export_attention(
    ck: &Checkpoint,
    series_dir: &Path,
    phenotypic: &Path,
    subject: &str,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let records = load_phenotypic_table(phenotypic)?;
    let record = records
        .iter()
        .find(|r| r.subject_id == subject)
        .ok_or_else(|| Error::Data(format!("subject {subject} not in {}", phenotypic.display())))?;
    let series = load_subject_series(&series_dir.join(format!("{subject}.tsv")))?;
    check_rois(series.n_rois(), ck, &format!("subject {subject}"))?;
    let segment = center_segment(&series.values, ck.config.seq_len)?;
    let pheno = encode_phenotype(record, &ck.pheno_stats);

    let mut g = Graph::new();
    let bound = ck.params.bind(&mut g);
    let mut rng = RngStream::new(0, Stream::Dropout);
    let f = model_forward(&mut g, &bound, &ck.config, &segment, &pheno, Mode::Eval, &mut rng, true)?;
    export_scores(&f.captured, out)
}

/// Data locations for `eval`/`export-attention`: explicit flags win over
/// the config file, which wins over a dataset directory layout.
pub fn data_paths(
    config: Option<&RunConfig>,
    series_dir: Option<PathBuf>,
    phenotypic: Option<PathBuf>,
    data_dir: Option<PathBuf>,
) -> (PathBuf, PathBuf) {
    let from_dir = data_dir.map(|d| (d.join(roiformer::data::SERIES_DIR), d.join(PHENOTYPIC_FILE)));
    let base = from_dir
        .or_else(|| config.map(|c| (c.data.series_dir.clone(), c.data.phenotypic.clone())))
        .unwrap_or_else(|| {
            let d = crate::run_config::DataConfig::default();
            (d.series_dir, d.phenotypic)
        });
    (series_dir.unwrap_or(base.0), phenotypic.unwrap_or(base.1))
}
