use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use concreteness_core::corpus::{read_annotations, shard, CorpusReader, RecordWriter};
use concreteness_core::curate::{emit_distillation_set, plan_epochs, select_files, split_corpus};
use concreteness_core::fusion::{binarize_labels, fit_fusion, fuse_corpus, LabeledPoint};
use concreteness_core::gateway::{attach_scores, connect, serve, stub_score, GatewayOptions, TableScorer};
use concreteness_core::metrics::correlate;
use concreteness_core::standardize::{standardize_corpus, standardized_name, StandardizerConfig, StandardizerFit};
use concreteness_core::{
    CaptionRecord, Endpoint, FitConfig, FusionParams, ReadMode, SelectionSpec, StandardizationModel, TrainingBudget,
};

use crate::shards::{expand, part_path, rewrite_shards, Records, ShardTally};
use crate::{
    Command, EmitDistillArgs, EvalCorrArgs, FilterArgs, FuseApplyArgs, FuseFitArgs, PlanEpochsArgs, ScoreArgs,
    ShardArgs, SplitArgs, StandardizeApplyArgs, StandardizeFitArgs, StubScorerArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Score(args) => score(args),
        Command::StandardizeFit(args) => standardize_fit(args),
        Command::StandardizeApply(args) => standardize_apply(args),
        Command::FuseFit(args) => fuse_fit(args),
        Command::FuseApply(args) => fuse_apply(args),
        Command::Filter(args) => filter(args),
        Command::EvalCorr(args) => eval_corr(args),
        Command::EmitDistill(args) => emit_distill(args),
        Command::Split(args) => split(args),
        Command::Shard(args) => reshard(args),
        Command::PlanEpochs(args) => plan(args),
        Command::StubScorer(args) => stub_scorer(args),
    }
}

fn check_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    check_workers(args.workers)?;
    if !(args.timeout > 0.0 && args.timeout.is_finite()) {
        bail!("--timeout must be a positive number of seconds");
    }
    let endpoint = Endpoint::parse(&args.endpoint)?;
    let options = GatewayOptions {
        timeout: Duration::from_secs_f64(args.timeout),
        max_in_flight: args.max_in_flight,
    };
    let mode = args.mode.mode();
    let paths = expand(&args.input)?;
    let failures = args.failures.clone().unwrap_or_else(|| {
        let mut name = args.output.as_os_str().to_owned();
        name.push(".failures.jsonl");
        PathBuf::from(name)
    });
    let failure_parts: Vec<PathBuf> = (0..paths.len()).map(|i| part_path(&failures, i)).collect();

    let result = rewrite_shards(&paths, &args.output, args.workers, |index, path, out| {
        let mut failed = RecordWriter::create(&failure_parts[index])?;
        let mut reader = CorpusReader::open(path, mode)?;
        let mut scorer = connect(&endpoint, options)?;
        let summary = attach_scores(
            reader.by_ref(),
            scorer.as_mut(),
            &args.score,
            args.batch_size,
            |record| out.write(&record).map_err(Into::into),
            |failure| failed.write_value(&failure).map_err(Into::into),
        )
        .with_context(|| path.display().to_string())?;
        failed.finish()?;
        Ok(ShardTally {
            written: 0,
            skipped: summary.failed,
            malformed: reader.skipped(),
        })
    })
    .and_then(|tally| {
        concat(&failure_parts, &failures)?;
        Ok(tally)
    });
    for part in &failure_parts {
        let _ = fs::remove_file(part);
    }
    let tally = result?;
    println!("score={}", args.score);
    println!("scored={}", tally.written);
    println!("failed={}", tally.skipped);
    println!("malformed={}", tally.malformed);
    println!("failures={}", failures.display());
    Ok(())
}

fn concat(parts: &[PathBuf], output: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(output).with_context(|| output.display().to_string())?);
    for part in parts {
        let mut input = File::open(part).with_context(|| part.display().to_string())?;
        io::copy(&mut input, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

fn standardize_fit(args: StandardizeFitArgs) -> Result<()> {
    check_workers(args.workers)?;
    let config = StandardizerConfig {
        transform: args.transform.into(),
        target_mu: args.target_mu,
        target_sigma: args.target_sigma,
        clamp_eps: args.clamp_eps,
        min_bucket_count: args.min_bucket_count,
        length_unit: args.length_unit.into(),
    };
    config.validate()?;
    let mode = args.mode.mode();
    let paths = expand(&args.input)?;

    let partials = concreteness_core::curate::run_indexed(paths.len(), args.workers, |i| -> Result<_> {
        let mut fit = StandardizerFit::new(config)?;
        let mut missing = 0usize;
        let mut reader = CorpusReader::open(&paths[i], mode)?;
        for record in reader.by_ref() {
            let record = record?;
            let Some(p) = record.score(&args.score) else {
                if mode == ReadMode::Lenient {
                    missing += 1;
                    continue;
                }
                bail!("record {:?} has no score {:?}", record.id, args.score);
            };
            let length = config.length_unit.measure(&record.caption).max(1);
            fit.push(length, p).with_context(|| format!("record {:?}", record.id))?;
        }
        Ok((fit, missing, reader.skipped()))
    })?;

    let mut fit = StandardizerFit::new(config)?;
    let (mut missing, mut malformed) = (0, 0);
    for (part, m, s) in &partials {
        fit.merge(part);
        missing += m;
        malformed += s;
    }
    let model = fit.finish()?;
    model.write(&args.output)?;

    let pooled = model
        .buckets
        .values()
        .filter(|b| b.count < model.config.min_bucket_count)
        .count();
    println!("score={}", args.score);
    println!("samples={}", model.global.count);
    println!("buckets={}", model.buckets.len());
    println!("pooled_buckets={pooled}");
    println!("global_mean_t={}", model.global.mean_t);
    println!("global_std_t={}", model.global.std_t);
    println!("missing_score={missing}");
    println!("malformed={malformed}");
    println!("model={}", args.output.display());
    Ok(())
}

fn standardize_apply(args: StandardizeApplyArgs) -> Result<()> {
    check_workers(args.workers)?;
    let model = StandardizationModel::read(&args.model)?;
    let mode = args.mode.mode();
    let paths = expand(&args.input)?;
    let tally = rewrite_shards(&paths, &args.output, args.workers, |_, path, out| {
        let mut records = Records::new(vec![path.to_path_buf()], mode);
        let mut stream = standardize_corpus(records.by_ref(), &args.score, &model, mode);
        for record in stream.by_ref() {
            out.write(&record?)?;
        }
        let skipped = stream.skipped();
        Ok(ShardTally {
            written: 0,
            skipped,
            malformed: records.finish()?,
        })
    })?;
    println!("score={}", standardized_name(&args.score));
    println!("records={}", tally.written);
    println!("missing_score={}", tally.skipped);
    println!("malformed={}", tally.malformed);
    Ok(())
}

fn fuse_fit(args: FuseFitArgs) -> Result<()> {
    let annotations = read_annotations(&args.annotations)?;
    let (labels, cut) = binarize_labels(&annotations, args.binarize)?;
    let mode = args.mode.mode();

    let mut found: HashMap<String, (f64, f64)> = HashMap::new();
    let mut missing = 0usize;
    let mut records = Records::new(expand(&args.input)?, mode);
    for record in records.by_ref() {
        if !labels.contains_key(&record.id) {
            continue;
        }
        match (record.score(&args.vba), record.score(&args.sba)) {
            (Some(vba), Some(sba)) => {
                found.insert(record.id, (vba, sba));
            }
            _ if mode == ReadMode::Lenient => missing += 1,
            _ => bail!("annotated record {:?} lacks {:?} or {:?}", record.id, args.vba, args.sba),
        }
    }
    let malformed = records.finish()?;

    let mut points = Vec::with_capacity(found.len());
    let mut unmatched = 0usize;
    for (id, &label) in &labels {
        match found.get(id) {
            Some(&(vba, sba)) => points.push(LabeledPoint { vba, sba, label }),
            None => unmatched += 1,
        }
    }
    if unmatched > 0 && mode == ReadMode::Strict {
        bail!("{unmatched} annotated ids have no scored record in the corpus (use --lenient to skip them)");
    }
    let config = FitConfig {
        max_iters: args.max_iters,
        tol: args.tol,
        l2: args.l2,
        binarize: args.binarize,
    };
    let outcome = fit_fusion(&points, &config)?;
    outcome.params.write(&args.output)?;

    let p = outcome.params;
    println!("a={}", p.a);
    println!("b={}", p.b);
    println!("c={}", p.c);
    println!("points={}", points.len());
    println!("positives={}", points.iter().filter(|p| p.label == 1).count());
    println!("cut={cut}");
    println!("iterations={}", outcome.iterations);
    println!("converged={}", outcome.converged);
    println!("gradient_steps={}", outcome.gradient_steps);
    if let Some(loss) = outcome.loss_trace.last() {
        println!("loss={loss}");
    }
    println!("unmatched={}", unmatched + missing);
    println!("malformed={malformed}");
    if outcome.warning() {
        println!("warning=solver stopped at max_iters={} without converging", args.max_iters);
    }
    println!("params={}", args.output.display());
    Ok(())
}

fn fuse_apply(args: FuseApplyArgs) -> Result<()> {
    check_workers(args.workers)?;
    let params = FusionParams::load(&args.params)?;
    let mode = args.mode.mode();
    let paths = expand(&args.input)?;
    let tally = rewrite_shards(&paths, &args.output, args.workers, |_, path, out| {
        let mut records = Records::new(vec![path.to_path_buf()], mode);
        let mut stream = fuse_corpus(records.by_ref(), params, &args.vba, &args.sba, &args.out, mode);
        for record in stream.by_ref() {
            out.write(&record?)?;
        }
        let skipped = stream.skipped();
        Ok(ShardTally {
            written: 0,
            skipped,
            malformed: records.finish()?,
        })
    })?;
    println!("score={}", args.out);
    println!("a={}", params.a);
    println!("b={}", params.b);
    println!("c={}", params.c);
    println!("records={}", tally.written);
    println!("missing_score={}", tally.skipped);
    println!("malformed={}", tally.malformed);
    Ok(())
}

fn filter(args: FilterArgs) -> Result<()> {
    check_workers(args.workers)?;
    let spec = match (&args.spec, args.method) {
        (Some(path), _) => SelectionSpec::read(path)?,
        (None, Some(method)) => {
            let spec = SelectionSpec {
                method: method.into(),
                score_name: args.score.clone().unwrap_or_default(),
                k: args.k,
                theta: args.theta,
                seed: args.seed,
                prefilter: None,
            };
            spec.validate()?;
            spec
        }
        (None, None) => bail!("either --spec or --method is required"),
    };
    let paths = expand(&args.input)?;
    let outcome = select_files(&paths, &spec, args.mode.mode(), args.workers)?;
    let mut writer = RecordWriter::create(&args.output)?;
    for record in &outcome.records {
        writer.write(record)?;
    }
    writer.finish()?;

    println!("selected={}", outcome.records.len());
    println!("missing_score={}", outcome.missing_score);
    println!("malformed={}", outcome.malformed);
    for warning in &outcome.warnings {
        println!("warning={warning}");
    }
    Ok(())
}

fn eval_corr(args: EvalCorrArgs) -> Result<()> {
    let annotations = read_annotations(&args.annotations)?;
    let mode = args.mode.mode();
    let mut scores: HashMap<String, f64> = HashMap::with_capacity(annotations.len());
    let mut missing = 0usize;
    let mut records = Records::new(expand(&args.input)?, mode);
    for record in records.by_ref() {
        if annotations.get(&record.id).is_none() {
            continue;
        }
        match record.score(&args.score) {
            Some(s) => {
                scores.insert(record.id, s);
            }
            None if mode == ReadMode::Lenient => missing += 1,
            None => bail!("annotated record {:?} has no score {:?}", record.id, args.score),
        }
    }
    let malformed = records.finish()?;

    let (mut xs, mut ys) = (Vec::with_capacity(scores.len()), Vec::with_capacity(scores.len()));
    let mut unmatched = 0usize;
    for (id, &label) in annotations.labels() {
        match scores.get(id) {
            Some(&s) => {
                xs.push(s);
                ys.push(label);
            }
            None => unmatched += 1,
        }
    }
    if unmatched > 0 && mode == ReadMode::Strict {
        bail!("{unmatched} annotated ids are absent from the corpus (use --lenient to skip them)");
    }
    let report = correlate(&xs, &ys)?;
    println!("score={}", args.score);
    println!("n={}", report.n);
    println!("pearson={}", report.pearson);
    println!("spearman={}", report.spearman);
    println!("kendall={}", report.kendall);
    println!("unmatched={unmatched}");
    println!("missing_score={missing}");
    println!("malformed={malformed}");
    Ok(())
}

fn emit_distill(args: EmitDistillArgs) -> Result<()> {
    let mode = args.mode.mode();
    let mut records = Records::new(expand(&args.input)?, mode);
    let meta = emit_distillation_set(records.by_ref(), &args.score, args.target.into(), &args.output, mode)?;
    let malformed = records.finish()?;
    println!("score={}", meta.target_score);
    println!(
        "target={}",
        serde_json::to_value(meta.target_space)?.as_str().unwrap_or_default()
    );
    println!("pairs={}", meta.count);
    println!("missing_score={}", meta.skipped);
    println!("malformed={malformed}");
    Ok(())
}

fn split(args: SplitArgs) -> Result<()> {
    let mut records = Records::new(expand(&args.input)?, args.mode.mode());
    let all: Vec<CaptionRecord> = records.by_ref().collect();
    let malformed = records.finish()?;
    let total = all.len();
    let parts = split_corpus(all, &args.fractions, args.seed)?;
    fs::create_dir_all(&args.output).with_context(|| args.output.display().to_string())?;
    println!("records={total}");
    for (i, part) in parts.iter().enumerate() {
        let path = args.output.join(format!("part-{i}.jsonl"));
        concreteness_core::corpus::write_corpus(part, &path)?;
        println!("part_{i}={}", part.len());
    }
    println!("malformed={malformed}");
    Ok(())
}

fn reshard(args: ShardArgs) -> Result<()> {
    let mut records = Records::new(expand(&args.input)?, args.mode.mode());
    let manifest = shard(records.by_ref(), args.shard_size, &args.output)?;
    let malformed = records.finish()?;
    println!("shards={}", manifest.shard_paths.len());
    println!("records={}", manifest.total);
    println!("malformed={malformed}");
    Ok(())
}

fn plan(args: PlanEpochsArgs) -> Result<()> {
    let budget = TrainingBudget {
        dataset_size: args.dataset_size,
        iterations: args.iterations,
        batch_size: args.batch_size,
    };
    let plan = plan_epochs(&budget, args.selected)?;
    println!("epochs={}", plan.epochs);
    println!("steps={}", plan.steps);
    Ok(())
}

fn stub_scorer(args: StubScorerArgs) -> Result<()> {
    let table = args.table.as_ref().map(TableScorer::from_file).transpose()?;
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve(stdin.lock(), stdout.lock(), |request| match &table {
        Some(table) => {
            let response = table.lookup(&request.id);
            response.score.ok_or_else(|| response.error.unwrap_or_default())
        }
        None => Ok(stub_score(&request.caption)),
    })
    .map_err(|e| anyhow!("stub scorer i/o: {e}"))?;
    Ok(())
}
