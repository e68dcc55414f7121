//! Command-line interface.
//!
//! Exit codes: 0 success, 2 usage or contract violation, 3 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{gen_synthetic, SyntheticSpec};
use crate::io::{self, ModelFile};
use crate::metrics::{histogram, make_report, ReportInputs};
use crate::scoring::{self, ScoreSource};
use crate::trainer::{self, EpochRecord, StepDiagnostics, TrainConfig, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "palm", version, about = "Mixture-of-prototypes training and OOD scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic vMF dataset (train, test and OOD splits).
    Gen(GenArgs),
    /// Convert a CSV file (`v1,...,vD[,label]` per line) to an embedding file.
    Import(ImportArgs),
    /// Train an encoder and prototype bank.
    Train(TrainArgs),
    /// Score samples with a trained model.
    Score(ScoreArgs),
    /// Compute detection metrics from ID and OOD score files.
    Eval(EvalArgs),
    /// Export the ID/OOD score histograms.
    Hist(HistArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Spec JSON; missing keys take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output stem; writes `<stem>.train.palm`, `<stem>.test.palm`,
    /// `<stem>.ood.palm` and `<stem>.manifest.json`.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// The last column holds integer labels.
    #[arg(long)]
    labeled: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config JSON; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data (embedding file, or `.csv`).
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-epoch CSV log (default: the model path with extension `log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Optional per-step diagnostics CSV.
    #[arg(long)]
    steps_log: Option<PathBuf>,
    /// CSV training data carries a trailing label column.
    #[arg(long)]
    csv_labeled: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_metric)]
    metric: ScoreSource,
    /// Neighbor rank for the KNN score.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Reference set for the KNN score (embedded with the model).
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv_labeled: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Model whose bank is used for compactness and far-ID fraction.
    #[arg(long, requires = "id_data")]
    model: Option<PathBuf>,
    /// ID inputs for compactness and far-ID fraction.
    #[arg(long, requires = "model")]
    id_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    far_threshold: f64,
}

#[derive(Args, Debug)]
struct HistArgs {
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<ScoreSource, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Import(a) => cmd_import(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Hist(a) => cmd_hist(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::InvalidConfiguration(format!("{}: {e}", p.display()))),
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let base = stem
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let base = base.strip_suffix(".palm").unwrap_or(&base);
    stem.with_file_name(format!("{base}.{suffix}"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut spec: SyntheticSpec = read_json(a.spec.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let data = gen_synthetic(&spec)?;
    let mut files = serde_json::Map::new();
    for (split, set) in [
        ("train", &data.id_train),
        ("test", &data.id_test),
        ("ood", &data.ood_test),
    ] {
        let path = with_suffix(&a.out, &format!("{split}.palm"));
        let bytes = io::encode_embeddings(set)?;
        io::write_atomic(&path, &bytes)?;
        files.insert(
            split.into(),
            json!({
                "path": path.file_name().map(|n| n.to_string_lossy()),
                "records": set.len(),
                "labeled": set.is_labeled(),
                "sha256": sha256_hex(&bytes),
            }),
        );
    }
    let dirs = |v: &[crate::geometry::UnitVector]| v.iter().map(|u| u.as_slice().to_vec()).collect::<Vec<_>>();
    let manifest = json!({
        "spec": spec,
        "files": files,
        "mode_directions": dirs(&data.mode_directions),
        "ood_directions": dirs(&data.ood_directions),
    });
    io::write_atomic(
        &with_suffix(&a.out, "manifest.json"),
        (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes(),
    )
}

fn cmd_import(a: &ImportArgs) -> Result<()> {
    let data = io::parse_csv_dataset(&fs::read_to_string(&a.csv)?, a.labeled)?;
    io::write_embeddings(&a.out, &data)
}

fn step_csv(steps: &[StepDiagnostics]) -> String {
    let mut s = String::from(
        "epoch,batch,batch_len,lr,loss,mle,proto_contrast,swapped,assignment_entropy,sinkhorn_residual,prototype_drift\n",
    );
    for d in steps {
        let term = |n: &str| d.terms.get(n).map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            d.epoch,
            d.batch,
            d.batch_len,
            d.lr,
            d.loss,
            term("mle"),
            term("proto_contrast"),
            term("swapped"),
            d.assignment_entropy,
            d.sinkhorn_residual,
            d.prototype_drift
        );
    }
    s
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut config: TrainConfig = read_json(a.config.as_deref())?;
    if let Some(mode) = a.mode {
        config.mode = mode;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let data = io::read_dataset(&a.train, a.csv_labeled)?;
    if config.mode == TrainMode::Supervised && !data.is_labeled() {
        return Err(Error::InvalidInput(format!(
            "{} is unlabeled; supervised mode needs labels",
            a.train.display()
        )));
    }
    let outcome = trainer::train(&config, &data)?;
    let gaussian = match trainer::fit_features(&outcome.checkpoint, &data) {
        Ok(fit) => Some(fit),
        Err(e) => {
            eprintln!("warning: no Gaussian fit stored ({e})");
            None
        }
    };
    let file = ModelFile {
        checkpoint: outcome.checkpoint,
        gaussian,
    };
    io::write_model(&a.out, &file)?;

    let mut log = String::from(EpochRecord::CSV_HEADER);
    log.push('\n');
    for r in &outcome.epochs {
        log.push_str(&r.csv_row());
        log.push('\n');
    }
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.csv"));
    io::write_atomic(&log_path, log.as_bytes())?;
    if let Some(p) = &a.steps_log {
        io::write_atomic(p, step_csv(&outcome.steps).as_bytes())?;
    }
    Ok(())
}

fn check_input_dim(model: &ModelFile, data: &Dataset, what: &Path) -> Result<()> {
    let want = model.checkpoint.model.input_dim();
    if data.dim() != want {
        return Err(Error::InvalidInput(format!(
            "{} has dimension {}, model expects {want}",
            what.display(),
            data.dim()
        )));
    }
    Ok(())
}

/// Scores `data` with a loaded model, as the `score` command does.
pub fn score_dataset(
    model: &ModelFile,
    data: &Dataset,
    metric: ScoreSource,
    k: usize,
    reference: Option<&Dataset>,
) -> Result<Vec<f64>> {
    let ck = &model.checkpoint;
    let series = match metric {
        ScoreSource::Mahalanobis => {
            let fit = model
                .gaussian
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("model has no Gaussian fit".into()))?;
            let h = trainer::features(ck, data.inputs.view())?;
            scoring::mahalanobis_scores(fit, h.view())?
        }
        ScoreSource::Knn => {
            let reference = reference.ok_or_else(|| Error::InvalidInput("knn needs a --train reference set".into()))?;
            let train_z = ck.model.forward(reference.inputs.view())?.z;
            let z = ck.model.forward(data.inputs.view())?.z;
            scoring::knn_scores(train_z.view(), z.view(), k)?
        }
        ScoreSource::Posterior => {
            let z = ck.model.forward(data.inputs.view())?.z;
            scoring::posterior_scores(&ck.bank, z.view(), ck.config.tau)?
        }
    };
    Ok(series.values)
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let model = io::read_model(&a.model)?;
    let data = io::read_dataset(&a.data, a.csv_labeled)?;
    check_input_dim(&model, &data, &a.data)?;
    let reference = match &a.train {
        Some(p) => {
            let r = io::read_dataset(p, a.csv_labeled)?;
            check_input_dim(&model, &r, p)?;
            Some(r)
        }
        None => None,
    };
    let values = score_dataset(&model, &data, a.metric, a.k, reference.as_ref())?;
    io::write_atomic(&a.out, io::format_scores(&values).as_bytes())
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    io::parse_scores(&fs::read_to_string(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let id = read_scores(&a.id)?;
    let ood = read_scores(&a.ood)?;
    let (mut compactness, mut far, mut hash) = (None, None, None);
    if let (Some(mp), Some(dp)) = (&a.model, &a.id_data) {
        let model = io::read_model(mp)?;
        let data = io::read_dataset(dp, false)?;
        check_input_dim(&model, &data, dp)?;
        let ck = &model.checkpoint;
        let z = ck.model.forward(data.inputs.view())?.z;
        compactness = Some(scoring::compactness(z.view(), &ck.bank)?);
        far = Some(scoring::far_id_fraction(z.view(), &ck.bank, a.far_threshold)?);
        hash = Some(ck.config_hash.clone());
    }
    let report = make_report(&ReportInputs {
        id_scores: &id,
        ood_scores: &ood,
        bins: a.bins,
        compactness,
        far_id_fraction: far,
        config_hash: hash,
    })?;
    io::write_atomic(&a.out, report.to_json()?.as_bytes())?;
    println!("AUROC {}", report.auroc);
    println!("FPR95 {}", report.fpr95);
    Ok(())
}

fn cmd_hist(a: &HistArgs) -> Result<()> {
    let id = read_scores(&a.id)?;
    let ood = read_scores(&a.ood)?;
    let h = histogram(&id, &ood, a.bins)?;
    let mut s = String::from("bin_left,bin_right,p_id,p_ood,min\n");
    for b in 0..a.bins {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            h.edges[b],
            h.edges[b + 1],
            h.p_id[b],
            h.p_ood[b],
            h.p_id[b].min(h.p_ood[b])
        );
    }
    let _ = writeln!(s, "# overlap_area={}", h.overlap());
    io::write_atomic(&a.out, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("palm").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&[]), EXIT_USAGE);
        assert_eq!(run_args(&["frobnicate"]), EXIT_USAGE);
        assert_eq!(run_args(&["score", "--model", "m"]), EXIT_USAGE);
        assert_eq!(run_args(&["--help"]), EXIT_OK);
    }

    #[test]
    fn suffix_paths() {
        assert_eq!(
            with_suffix(Path::new("d/x.palm"), "train.palm"),
            PathBuf::from("d/x.train.palm")
        );
        assert_eq!(
            with_suffix(Path::new("x"), "manifest.json"),
            PathBuf::from("x.manifest.json")
        );
    }

    #[test]
    fn eval_and_hist_on_toy_scores() {
        let dir = tempfile::tempdir().unwrap();
        let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
        fs::write(p("id.csv"), io::format_scores(&[3.0, 4.0])).unwrap();
        fs::write(p("ood.csv"), io::format_scores(&[1.0, 2.0])).unwrap();
        assert_eq!(
            run_args(&[
                "eval",
                "--id",
                &p("id.csv"),
                "--ood",
                &p("ood.csv"),
                "--out",
                &p("r.json")
            ]),
            EXIT_OK
        );
        let report = crate::metrics::EvalReport::from_json(&fs::read_to_string(p("r.json")).unwrap()).unwrap();
        assert_eq!(report.auroc, 1.0);

        assert_eq!(
            run_args(&[
                "hist",
                "--id",
                &p("id.csv"),
                "--ood",
                &p("ood.csv"),
                "--bins",
                "1",
                "--out",
                &p("h.csv")
            ]),
            EXIT_OK
        );
        let text = fs::read_to_string(p("h.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.ends_with("# overlap_area=1\n"), "{text}");

        fs::write(p("bad.csv"), "index,score\n0,1\n1,oops\n").unwrap();
        assert_eq!(
            run_args(&[
                "eval",
                "--id",
                &p("bad.csv"),
                "--ood",
                &p("ood.csv"),
                "--out",
                &p("r2.json")
            ]),
            EXIT_USAGE
        );
        fs::write(p("c.csv"), io::format_scores(&[1.0])).unwrap();
        assert_eq!(
            run_args(&["hist", "--id", &p("c.csv"), "--ood", &p("c.csv"), "--out", &p("h2.csv")]),
            EXIT_USAGE
        );
    }
}
