use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ssmocr_core::bench::{
    growth_table, measure_latency, runtime_cache_bytes, step_latency, BenchGuard, LATENCY_CSV_HEADER,
    STEP_CSV_HEADER,
};
use ssmocr_core::checkpoint::Checkpoint;
use ssmocr_core::config::RunConfig;
use ssmocr_core::decoders::Vocabulary;
use ssmocr_core::metrics::{EvalReport, Normalize};
use ssmocr_core::model::{ModelConfig, ModelKind, OcrModel, Preset};
use ssmocr_core::synth::dataset::{load_sentences, synth_sample};
use ssmocr_core::synth::{load_manifest, make_dataset, read_pgm, rover_combine, to_ink};
use ssmocr_core::train::{load_samples, TrainEvent, Trainer};
use ssmocr_core::{Error, Result, Tensor};

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        io(dir, fs::create_dir_all(dir))?;
    }
    io(path, fs::write(path, text))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::defaults(ModelKind::MambaCtc, Preset::Desk)),
    }
}

pub fn synth(config: Option<&Path>, out: Option<PathBuf>, samples: Option<usize>, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(o) = out {
        cfg.data.out_dir = o;
    }
    if let Some(n) = samples {
        cfg.data.samples = n;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
        if let Some(spec) = cfg.data.augment.as_mut() {
            spec.seed = s;
        }
    }
    let summary = make_dataset(&cfg.data, &Vocabulary::default_latin())?;
    println!(
        "wrote {} train, {} valid, {} test samples to {}",
        summary.train,
        summary.valid,
        summary.test,
        cfg.data.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(config: &Path, out: Option<PathBuf>, resume: Option<&Path>, quiet: bool) -> Result<ExitCode> {
    let mut run = RunConfig::load(config)?;
    if let Some(o) = out {
        run.train.out_dir = o;
    }
    let manifest = run.train.manifest.clone().unwrap_or_else(|| run.data.out_dir.join("train.tsv"));
    let eval_manifest = run.train.eval_manifest.clone().or_else(|| {
        let v = run.data.out_dir.join("valid.tsv");
        v.exists().then_some(v)
    });
    let train_set = load_samples(&manifest)?;
    let eval_set = match &eval_manifest {
        Some(m) => load_samples(m)?,
        None => Vec::new(),
    };
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&run, &Checkpoint::load(p)?, train_set, eval_set)?,
        None => Trainer::new(&run, train_set, eval_set)?,
    };
    let dir = run.train.out_dir.clone();
    io(&dir, fs::create_dir_all(&dir))?;
    let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
        let path = dir.join(name);
        let fresh = resume.is_none() || !path.exists();
        let f = io(&path, fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&path))?;
        let mut w = BufWriter::new(f);
        if fresh {
            io(&path, writeln!(w, "{header}"))?;
        }
        Ok(w)
    };
    let mut loss_log = open("train_log.csv", "step,loss,grad_norm")?;
    let mut eval_log = open("eval_log.csv", "step,cer,best")?;
    let mut write_err = None;
    let outcome = trainer.run(|e| {
        let r = match e {
            TrainEvent::Step { step, loss, grad_norm } => {
                if !quiet && step % 50 == 0 {
                    eprintln!("step {step} loss {loss:.5}");
                }
                writeln!(loss_log, "{step},{loss:?},{grad_norm:?}")
            }
            TrainEvent::Eval { step, cer, best } => {
                if !quiet {
                    eprintln!("step {step} eval CER {cer:.3}%{}", if *best { " (best)" } else { "" });
                }
                writeln!(eval_log, "{step},{cer:?},{best}")
            }
        };
        if let Err(e) = r {
            write_err.get_or_insert(e);
        }
    });
    for (name, w) in [("train_log.csv", &mut loss_log), ("eval_log.csv", &mut eval_log)] {
        io(&dir.join(name), w.flush())?;
    }
    if let Some(e) = write_err {
        return Err(Error::Io { path: dir, source: e });
    }
    let outcome = outcome?;
    trainer.checkpoint().save(&dir.join("last.ckpt"))?;
    let best = outcome.best.unwrap_or_else(|| trainer.checkpoint());
    best.save(&dir.join("best.ckpt"))?;
    let best_cer = outcome.best_cer.map(|c| format!("{c:.3}%")).unwrap_or_else(|| "n/a".into());
    println!("trained {} steps, last loss {:.5}, best CER {best_cer}", outcome.steps, outcome.last_loss);
    Ok(ExitCode::SUCCESS)
}

pub fn eval(checkpoint: &Path, manifest: &Path, out: &Path, lowercase: bool, collapse_whitespace: bool) -> Result<ExitCode> {
    let model: OcrModel<f32> = Checkpoint::load(checkpoint)?.restore_model()?;
    let samples = load_manifest(manifest)?;
    if samples.is_empty() {
        return Err(Error::Usage(format!("{} has no samples", manifest.display())));
    }
    let norm = Normalize { lowercase, collapse_whitespace };
    let mut report = EvalReport::new();
    let mut failures = 0;
    for s in &samples {
        let id = s.image.display().to_string();
        let missing: String = model.vocab.missing(&s.transcript).into_iter().collect();
        if !missing.is_empty() {
            eprintln!("warning: {id}: characters outside the vocabulary: {missing:?}");
        }
        match read_pgm(&s.image).and_then(|img| model.decode_image(&img)) {
            Ok(hyp) => report.add(id, &s.transcript, &hyp, norm)?,
            Err(e) => {
                eprintln!("error: {id}: {e}");
                failures += 1;
            }
        }
    }
    write_file(&out.join("eval.csv"), &report.to_csv())?;
    let summary = report.summary();
    write_file(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn decode(checkpoint: &Path, images: &[PathBuf]) -> Result<ExitCode> {
    let model: OcrModel<f32> = Checkpoint::load(checkpoint)?.restore_model()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut failed = false;
    for path in images {
        let line = match read_pgm(path).and_then(|img| model.decode_image(&img)) {
            Ok(text) => text.replace('\n', "\\n"),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                failed = true;
                String::new()
            }
        };
        io(Path::new("<stdout>"), writeln!(out, "{line}"))?;
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn bench_models(run: &RunConfig, checkpoints: &[PathBuf]) -> Result<Vec<(OcrModel<f32>, &'static str)>> {
    let vocab = Vocabulary::default_latin();
    let context = run.bench.prefill + run.bench.lengths.last().copied().unwrap_or(0) + 1;
    let mut models = Vec::new();
    for p in checkpoints {
        models.push((Checkpoint::load(p)?.restore_model()?, "checkpoint"));
    }
    for kind in ModelKind::ALL {
        if models.iter().any(|(m, _)| m.cfg.kind == kind) {
            continue;
        }
        let mut cfg = ModelConfig { kind, ..run.model.clone() };
        cfg.attn_max_context = cfg.attn_max_context.max(context);
        models.push((OcrModel::new(cfg, vocab.clone(), run.train.seed)?, "random"));
    }
    for (m, _) in &mut models {
        m.cfg.attn_max_context = m.cfg.attn_max_context.max(context);
        if let ssmocr_core::model::Head::Attn(d) = &mut m.head {
            d.cfg.max_context = d.cfg.max_context.max(context);
        }
    }
    Ok(models)
}

pub fn bench(config: Option<&Path>, out: Option<PathBuf>, checkpoints: &[PathBuf]) -> Result<ExitCode> {
    drop(BenchGuard::acquire()?);
    let run = load_config(config)?;
    let b = &run.bench;
    let dir = out.unwrap_or_else(|| b.out_dir.clone());
    let models = bench_models(&run, checkpoints)?;
    let ar: Vec<&OcrModel<f32>> = models
        .iter()
        .map(|(m, _)| m)
        .filter(|m| matches!(m.cfg.kind, ModelKind::MambaAr | ModelKind::AttnArBaseline))
        .collect();

    let cfgs: Vec<ModelConfig> = ar.iter().map(|m| m.cfg.clone()).collect();
    let table = growth_table(&cfgs, b.prefill, &b.lengths)?;
    for m in &ar {
        for &len in &b.lengths {
            let measured = runtime_cache_bytes(m, b.prefill, len)?;
            let row = table.rows.iter().find(|r| r.model == m.cfg.kind.name() && r.length == len);
            if row.map(|r| r.bytes) != Some(measured) {
                return Err(Error::Argument(format!("{} cache accounting disagrees at length {len}", m.cfg.kind)));
            }
        }
    }
    write_file(&dir.join("growth.csv"), &table.to_csv())?;
    write_file(&dir.join("growth.dat"), &table.to_plot_data())?;

    let mut steps_csv = format!("{STEP_CSV_HEADER}\n");
    for m in &ar {
        let s = step_latency(m, b.prefill, b.latency_steps, b.warmup, b.repeats)?;
        println!(
            "{}: step latency {:.2} us + {:.5} us/token (slope/intercept {:.4})",
            s.model,
            s.fit.intercept,
            s.fit.slope,
            s.fit.slope / s.fit.intercept
        );
        steps_csv.push_str(&s.csv_rows());
    }
    write_file(&dir.join("steps.csv"), &steps_csv)?;

    let sentences = load_sentences(None, &Vocabulary::default_latin())?;
    let mut data = run.data.clone();
    data.augment = None;
    data.max_lines = 1;
    let inputs: Vec<Tensor<f32>> = (0..4)
        .map(|i| synth_sample(&data, &sentences, i).map(|(_, img)| to_ink(&img)))
        .collect::<Result<_>>()?;
    let inputs: Vec<Tensor<f32>> = inputs
        .into_iter()
        .map(|x| {
            let (h, w) = x.dims2().expect("ink images are 2-D");
            let width = b.image_width.max(1);
            Tensor::from_fn([h, width], |i| if i % width < w { x.data()[i / width * w + i % width] } else { 0.0 })
        })
        .collect();
    let mut latency_csv = format!("{LATENCY_CSV_HEADER},weights\n");
    for (m, weights) in &models {
        let rec = measure_latency(m, &inputs, b.warmup, b.repeats)?;
        println!("{}: {:.3} ms/image (MAD {:.3}), weights {weights}", rec.model, rec.latency_ms, rec.mad_ms);
        latency_csv.push_str(&format!("{},{weights}\n", rec.csv_row()));
    }
    write_file(&dir.join("latency.csv"), &latency_csv)?;
    for r in &table.rows {
        println!("{} length {}: {} bytes ({:.2}x)", r.model, r.length, r.bytes, r.factor);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn rover(files: &[PathBuf], weights: Option<Vec<f64>>) -> Result<ExitCode> {
    let weights = weights.unwrap_or_else(|| vec![1.0; files.len()]);
    if weights.len() != files.len() {
        return Err(Error::Usage(format!("{} weights for {} files", weights.len(), files.len())));
    }
    let texts: Vec<String> = files.iter().map(|f| io(f, fs::read_to_string(f))).collect::<Result<_>>()?;
    let lines: Vec<Vec<&str>> = texts.iter().map(|t| t.lines().collect()).collect();
    let n = lines[0].len();
    if let Some(k) = lines.iter().position(|l| l.len() != n) {
        return Err(Error::Argument(format!(
            "line counts differ: {} has {n}, {} has {}",
            files[0].display(),
            files[k].display(),
            lines[k].len()
        )));
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for i in 0..n {
        let hyps: Vec<&str> = lines.iter().map(|l| l[i]).collect();
        let combined = rover_combine(&hyps, &weights)?;
        io(Path::new("<stdout>"), writeln!(out, "{combined}"))?;
    }
    Ok(ExitCode::SUCCESS)
}
