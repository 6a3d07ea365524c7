use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ctsan::concept::{top_k, write_detections, Detection};
use ctsan::corpus::{generate_synthetic, Dataset, Sample, Split, SyntheticSpec};
use ctsan::eval::{accuracy, bleu, median_rank, recall_at_k, MetricReport};
use ctsan::kv::KeyValues;
use ctsan::models::{Head, SimilarityMatrix, Task, TaskModel};
use ctsan::train::{
    average_matrices, ensemble_blank, ensemble_caption, ensemble_choice, evaluate, gradcheck_config, load_trained,
    tiny_train_config, train, TrainConfig,
};
use ctsan::{Error, Precision, Result, Scalar};
use serde_json::{json, Value};

use crate::meta::run_meta;
use crate::{Cli, Command, Metric, SplitArg};

/// 1 for usage errors, 2 for data and format errors.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Unsupported(_) => 1,
        _ => 2,
    }
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| Error::usage(format!("missing --{flag}")))
}

fn load_kv(cli: &Cli) -> Result<KeyValues> {
    let mut kv = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::usage(format!("cannot read config {}: {e}", p.display())))?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::default(),
    };
    for o in &cli.overrides {
        kv.set_pair(o)?;
    }
    Ok(kv)
}

/// Writes `text` to `--out` when given, otherwise to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn report_line(mut r: MetricReport, run: &Value) -> Result<String> {
    r.run = Some(run.clone());
    Ok(serde_json::to_string(&r)? + "\n")
}

fn samples(dataset: &Dataset, s: SplitArg, limit: Option<usize>) -> Result<Vec<&Sample>> {
    let mut v = dataset.split(split(s));
    if v.is_empty() {
        return Err(Error::usage(format!("split {s:?} of the dataset is empty")));
    }
    if let Some(n) = limit {
        v.truncate(n.max(1));
    }
    Ok(v)
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let precision = cli.precision;
    macro_rules! typed {
        ($f:ident, $p:expr $(, $arg:expr)*) => {
            match $p {
                Precision::F32 => $f::<f32>(cli $(, $arg)*),
                Precision::F64 => $f::<f64>(cli $(, $arg)*),
            }
        };
    }
    let p = precision.unwrap_or(Precision::F32);
    match &cli.command {
        Command::Gen => gen(cli),
        Command::Train { task, data } => {
            let config = train_config(cli, *task)?;
            typed!(train_cmd, config.precision, config.clone(), data)
        }
        Command::Detect { model, data, split, k } => typed!(detect, p, model, data, *split, *k),
        Command::Eval { .. } => typed!(eval_cmd, p),
        Command::Ensemble { .. } => typed!(ensemble_cmd, p),
        Command::Gradcheck { model } => gradcheck(cli, *model),
        Command::Simmatrix { model, data, split, limit } => typed!(simmatrix, p, model, data, *split, *limit),
    }
}

fn gen(cli: &Cli) -> Result<ExitCode> {
    let out = required(&cli.out, "out")?;
    let mut spec = SyntheticSpec::from_kv(&load_kv(cli)?)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let text = spec.to_kv().to_text();
    let corpus = generate_synthetic(&spec)?;
    corpus.dataset.save(out)?;
    fs::write(out.join("spec.txt"), &text)?;
    let run = run_meta("gen", spec.seed, &text);
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    println!(
        "{}",
        json!({ "samples": corpus.dataset.samples.len(), "vocab": corpus.dataset.vocab.len(), "run": run })
    );
    Ok(ExitCode::SUCCESS)
}

fn train_config(cli: &Cli, task: Task) -> Result<TrainConfig> {
    let mut kv = load_kv(cli)?;
    kv.set("task", task);
    let mut c = TrainConfig::from_kv(&kv)?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(t) = cli.threads {
        c.threads = t;
    }
    if let Some(p) = cli.precision {
        c.precision = p;
    }
    c.validate()?;
    Ok(c)
}

fn train_cmd<T: Scalar>(cli: &Cli, config: TrainConfig, data: &Path) -> Result<ExitCode> {
    let out = required(&cli.out, "out")?;
    let dataset = Dataset::load(data)?;
    let outcome = train::<T>(&dataset, &config)?;
    let text = config.to_kv().to_text();
    let run = run_meta("train", config.seed, &text);
    outcome.save(out, &run)?;
    let best = outcome.best.as_ref().map(|b| json!({ "metric": b.metric, "value": b.value }));
    println!("{}", json!({ "task": config.task.name(), "best_epoch": outcome.best_epoch, "best": best, "run": run }));
    Ok(ExitCode::SUCCESS)
}

fn load_model<T: Scalar>(dir: &Path, dataset: &Dataset) -> Result<(TaskModel<T>, TrainConfig, String)> {
    let (model, config) = load_trained::<T>(dir, dataset)?;
    let text = config.to_kv().to_text();
    Ok((model, config, text))
}

fn detect<T: Scalar>(cli: &Cli, model: &Path, data: &Path, s: SplitArg, k: Option<usize>) -> Result<ExitCode> {
    let dataset = Dataset::load(data)?;
    let (model, config, text) = load_model::<T>(model, &dataset)?;
    let k = k.unwrap_or(config.k);
    let mut dets = Vec::new();
    for sample in samples(&dataset, s, None)? {
        let out = model.detect(&sample.clip)?;
        let set = top_k(&out.confidence, k)?;
        dets.push(Detection::new(&sample.id, &set, &dataset.candidates));
    }
    let run = run_meta("detect", cli.seed.unwrap_or(config.seed), &text);
    let mut buf = Vec::new();
    write_detections(&mut buf, &dets, Some(&run))?;
    emit(cli.out.as_deref(), &String::from_utf8(buf).expect("JSON is UTF-8"))?;
    Ok(ExitCode::SUCCESS)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

fn tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

fn bleu_from_files(pred: &Path, refs: &[PathBuf], n: usize) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::usage("bleu needs at least one --refs file"));
    }
    let cands: Vec<Vec<String>> = read_lines(pred)?.iter().map(|l| tokens(l)).collect();
    let ref_sets: Vec<Vec<String>> = refs.iter().map(|p| read_lines(p)).collect::<Result<_>>()?;
    if ref_sets.iter().any(|r| r.len() != cands.len()) {
        return Err(Error::input("reference files and predictions differ in line count"));
    }
    let references: Vec<Vec<Vec<String>>> =
        (0..cands.len()).map(|i| ref_sets.iter().map(|r| tokens(&r[i])).collect()).collect();
    bleu(&cands, &references, n)
}

fn eval_cmd<T: Scalar>(cli: &Cli) -> Result<ExitCode> {
    let Command::Eval { metric, k, n, matrix, pred, gold, refs, model, data, split: s } = &cli.command else {
        unreachable!()
    };
    let (k, n) = (k.unwrap_or(1), n.unwrap_or(4));
    let mut config_text = String::new();
    let mut seed = cli.seed.unwrap_or(0);
    let value = if let Some(dir) = model {
        let dataset = Dataset::load(required(data, "data")?)?;
        let (model, config, text) = load_model::<T>(dir, &dataset)?;
        config_text = text;
        seed = cli.seed.unwrap_or(config.seed);
        model_metric(&model, &config, &dataset, *metric, *s, k, n)?
    } else {
        match metric {
            Metric::Acc => {
                let p = read_lines(required(pred, "pred")?)?;
                let g = read_lines(required(gold, "gold")?)?;
                accuracy(&p, &g)?
            }
            Metric::Recall => recall_at_k(&SimilarityMatrix::load(required(matrix, "matrix")?)?, k)?,
            Metric::Medr => median_rank(&SimilarityMatrix::load(required(matrix, "matrix")?)?)? as f64,
            Metric::Bleu => bleu_from_files(required(pred, "pred")?, refs, n)?,
        }
    };
    let mut r = MetricReport::new(metric_name(*metric), value);
    match metric {
        Metric::Recall => r.k = Some(k),
        Metric::Bleu => r.n = Some(n),
        _ => {}
    }
    let run = run_meta("eval", seed, &config_text);
    emit(cli.out.as_deref(), &report_line(r, &run)?)?;
    Ok(ExitCode::SUCCESS)
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Acc => "acc",
        Metric::Recall => "recall",
        Metric::Medr => "medr",
        Metric::Bleu => "bleu",
    }
}

fn model_metric<T: Scalar>(
    model: &TaskModel<T>,
    config: &TrainConfig,
    dataset: &Dataset,
    metric: Metric,
    s: SplitArg,
    k: usize,
    n: usize,
) -> Result<f64> {
    let mismatch = || Error::usage(format!("metric {} does not apply to a {} model", metric_name(metric), model.task));
    match (metric, &model.head) {
        (Metric::Acc, Head::Fib(_) | Head::Mc(_)) | (Metric::Recall, Head::Detector) => {
            Ok(evaluate(model, dataset, split(s), config, None)?.value)
        }
        (Metric::Recall | Metric::Medr, Head::Retrieval(_) | Head::Mc(_)) => {
            let clips = samples(dataset, s, Some(config.eval_candidates))?;
            let m = model.similarity(&clips, &clips, &dataset.vocab, None)?;
            if metric == Metric::Recall {
                recall_at_k(&m, k)
            } else {
                Ok(median_rank(&m)? as f64)
            }
        }
        (Metric::Bleu, Head::Description(h)) => {
            let mut cands = Vec::new();
            let mut refs = Vec::new();
            for sample in samples(dataset, s, None)? {
                let mut tape = ctsan::Tape::new();
                let enc = model.encode(&mut tape, &sample.clip, ctsan::models::ConceptSource::Live)?;
                let g = h.generate(&mut tape, model, &enc, config.max_len)?;
                cands.push(g.words().iter().map(|&i| dataset.vocab.word(i).to_string()).collect());
                refs.push(vec![sample.caption.clone()]);
            }
            bleu(&cands, &refs, n)
        }
        _ => Err(mismatch()),
    }
}

fn ensemble_cmd<T: Scalar>(cli: &Cli) -> Result<ExitCode> {
    let Command::Ensemble { matrices, models, data, split: s } = &cli.command else { unreachable!() };
    match (matrices.is_empty(), models.is_empty()) {
        (false, true) => {
            let out = required(&cli.out, "out")?;
            let ms: Vec<SimilarityMatrix> = matrices.iter().map(SimilarityMatrix::load).collect::<Result<_>>()?;
            let avg = average_matrices(&ms)?;
            let names: Vec<String> = matrices.iter().map(|p| p.display().to_string()).collect();
            let run = run_meta("ensemble", cli.seed.unwrap_or(0), &names.join("\n"));
            avg.save(out, Some(&run))?;
            println!("{}", json!({ "members": ms.len(), "rows": avg.rows(), "cols": avg.cols(), "run": run }));
            Ok(ExitCode::SUCCESS)
        }
        (true, false) => ensemble_models::<T>(cli, models, required(data, "data")?, *s),
        _ => Err(Error::usage("ensemble takes either --matrix files or --model directories")),
    }
}

fn ensemble_models<T: Scalar>(cli: &Cli, dirs: &[PathBuf], data: &Path, s: SplitArg) -> Result<ExitCode> {
    let dataset = Dataset::load(data)?;
    let mut members = Vec::new();
    let mut texts = Vec::new();
    let mut configs = Vec::new();
    for d in dirs {
        let (m, c, t) = load_model::<T>(d, &dataset)?;
        members.push(m);
        configs.push(c);
        texts.push(t);
    }
    let task = members[0].task;
    if members.iter().any(|m| m.task != task) {
        return Err(Error::usage("ensemble members must share one task"));
    }
    let refs: Vec<&TaskModel<T>> = members.iter().collect();
    let vocab = &dataset.vocab;
    let items = samples(&dataset, s, None)?;
    let report = match task {
        Task::Description => {
            let max_len = configs[0].max_len;
            let mut cands = Vec::new();
            let mut golds = Vec::new();
            for sample in &items {
                let words = ensemble_caption(&refs, sample, max_len)?;
                cands.push(words.iter().map(|&i| vocab.word(i).to_string()).collect::<Vec<_>>());
                golds.push(vec![sample.caption.clone()]);
            }
            let mut r = MetricReport::new("bleu", bleu(&cands, &golds, 4)?);
            r.n = Some(4);
            r
        }
        Task::Fib => {
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for sample in &items {
                preds.push(ensemble_blank(&refs, sample, vocab)?.1);
                golds.push(vocab.id_or_unk(&sample.fib.as_ref().expect("blank checked by ensemble_blank").answer));
            }
            MetricReport::new("acc", accuracy(&preds, &golds)?)
        }
        Task::Mc => {
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for sample in &items {
                preds.push(ensemble_choice(&refs, sample, vocab)?);
                golds.push(sample.mc.as_ref().expect("choices checked by ensemble_choice").answer);
            }
            MetricReport::new("acc", accuracy(&preds, &golds)?)
        }
        Task::Retrieval => {
            let clips: Vec<&Sample> = items.iter().copied().take(configs[0].eval_candidates.max(1)).collect();
            let ms: Vec<SimilarityMatrix> =
                refs.iter().map(|m| m.similarity(&clips, &clips, vocab, None)).collect::<Result<_>>()?;
            MetricReport::new("medr", median_rank(&average_matrices(&ms)?)? as f64)
        }
        Task::Detector => return Err(Error::usage("detector models are not ensembled")),
    };
    let run = run_meta("ensemble", cli.seed.unwrap_or(configs[0].seed), &texts.join("\n"));
    emit(cli.out.as_deref(), &report_line(report, &run)?)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(cli: &Cli, task: Task) -> Result<ExitCode> {
    if cli.precision == Some(Precision::F32) {
        return Err(Error::usage("gradient checks run in f64"));
    }
    let mut config = tiny_train_config(task);
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let report = gradcheck_config(&config)?;
    let run = run_meta("gradcheck", config.seed, &config.to_kv().to_text());
    let mut text = String::new();
    for p in &report.params {
        text.push_str(&format!("{:<28} {:>6} {:.3e}\n", p.name, p.numel, p.max_rel_err));
    }
    text.push_str(&serde_json::to_string(&json!({
        "task": task.name(),
        "max_rel_err": report.max_rel_err(),
        "tolerance": report.tolerance,
        "passed": report.passed(),
        "run": run,
    }))?);
    text.push('\n');
    emit(cli.out.as_deref(), &text)?;
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn simmatrix<T: Scalar>(cli: &Cli, model: &Path, data: &Path, s: SplitArg, limit: Option<usize>) -> Result<ExitCode> {
    let out = required(&cli.out, "out")?;
    let dataset = Dataset::load(data)?;
    let (model, config, text) = load_model::<T>(model, &dataset)?;
    let clips = samples(&dataset, s, limit)?;
    let m = model.similarity(&clips, &clips, &dataset.vocab, None)?;
    let run = run_meta("simmatrix", cli.seed.unwrap_or(config.seed), &text);
    m.save(out, Some(&run))?;
    println!("{}", json!({ "rows": m.rows(), "cols": m.cols(), "run": run }));
    Ok(ExitCode::SUCCESS)
}
