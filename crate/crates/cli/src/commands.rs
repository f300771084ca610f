use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use quantlaw::formats::BlockFormat;
use quantlaw::laws::{self, ExperimentPoint, FitResult, LawKind, LawParams, Target};
use quantlaw::model::{
    enumerate_sites, init_random, load_checkpoint, read_tokens, sample_tokens, save_checkpoint,
    tokens_digest, uniform_tokens, write_tokens, Checkpoint, Granularity, ModelConfig,
    ModelEvaluator,
};
use quantlaw::search::{estimate, run_search, RunHeader, SearchSpec};
use quantlaw::util::{format_sig9, Fnv1a};
use quantlaw::{oracle, store, Error, Result};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::{
    ExportArgs, FitArgs, InitArgs, ModelSource, PlanArgs, PredictArgs, SearchArgs, SynthArgs,
    TokensArgs,
};

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn resolve_config(model: &str) -> Result<(String, ModelConfig)> {
    if let Some(cfg) = ModelConfig::preset(model) {
        return Ok((model.to_string(), cfg));
    }
    let path = Path::new(model);
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "{model:?} is neither a preset nor a config file"
        )));
    }
    let cfg: ModelConfig = read_json(path)?;
    cfg.validate()?;
    let id = path
        .file_stem()
        .map_or_else(|| model.to_string(), |s| s.to_string_lossy().into_owned());
    Ok((id, cfg))
}

fn load_model(src: &ModelSource) -> Result<(String, Checkpoint)> {
    let (id, cfg) = resolve_config(&src.model)?;
    let ckpt = match (&src.ckpt, src.init_seed) {
        (Some(path), _) => load_checkpoint(path)?,
        (None, Some(seed)) => init_random(&cfg, seed)?,
        (None, None) => return Err(Error::InvalidInput("need --ckpt or --init-seed".into())),
    };
    if ckpt.config != cfg {
        return Err(Error::InvalidInput(format!(
            "checkpoint config does not match model {:?}",
            src.model
        )));
    }
    Ok((id, ckpt))
}

fn run_id(deterministic: bool, parts: &[&str]) -> String {
    let mut h = Fnv1a::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update(b"\0");
    }
    if deterministic {
        format!("run-{:016x}", h.finish())
    } else {
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos());
        format!("run-{nanos}-{:08x}", h.finish() as u32)
    }
}

pub(crate) fn search(a: SearchArgs) -> Result<()> {
    let method: BlockFormat = a.method.parse()?;
    let granularity: Granularity = a.granularity.parse()?;
    let qb = a.qb.unwrap_or(method.block_size());
    let (model_id, ckpt) = load_model(&a.source)?;
    let tokens = read_tokens(&a.tokens)?;
    let model_digest = ckpt.digest();
    let tok_digest = tokens_digest(&tokens);
    let evaluator = ModelEvaluator::new(&ckpt, &tokens)?;
    let sites = enumerate_sites(&ckpt.config, granularity)?;
    let n_params = ckpt.config.non_embedding_params() as f64 / 1e9;
    let specs =
        a.qr.iter()
            .map(|&qr| {
                let spec = SearchSpec {
                    qr_target: qr,
                    qb,
                    granularity,
                    method,
                    weight_and_activation: !a.weight_only,
                    trials: a.trials,
                    seed: a.seed,
                    ratio_tolerance: a.ratio_tolerance,
                };
                spec.validate().map(|_| spec)
            })
            .collect::<Result<Vec<_>>>()?;

    let baseline = evaluator.loss(None)?;
    println!("model {model_id} digest {model_digest} tokens {tok_digest}");
    println!("baseline_loss {}", format_sig9(baseline));
    for spec in specs {
        let id = run_id(
            a.deterministic,
            &[
                &model_digest,
                &tok_digest,
                &method.to_string(),
                &granularity.to_string(),
                &format!("{:?}", spec.qr_target),
                &spec.weight_and_activation.to_string(),
                &spec.trials.to_string(),
                &spec.seed.to_string(),
            ],
        );
        let header = RunHeader {
            run_id: id,
            model_id: model_id.clone(),
            model_digest: model_digest.clone(),
            tokens_digest: tok_digest.clone(),
            n_params,
            baseline_loss: baseline,
            source: "search".into(),
            extra: Default::default(),
        };
        info!(
            "searching qr={} with {} trials",
            spec.qr_target, spec.trials
        );
        let set = run_search(&evaluator, &sites, &spec, header, a.jobs)?;
        store::append_run(&a.out, &set)?;
        let est = estimate(&set)?;
        println!(
            "qr {} delta_opt {} delta_mu {} trials {} failed {}",
            format_sig9(spec.qr_target),
            format_sig9(est.delta_opt),
            format_sig9(est.delta_mu),
            est.n,
            set.failed()
        );
    }
    Ok(())
}

fn read_all_runs(inputs: &[std::path::PathBuf]) -> Result<Vec<quantlaw::search::TrialSet>> {
    let mut runs = Vec::new();
    for p in inputs {
        runs.extend(store::read_runs(p)?);
    }
    Ok(runs)
}

pub(crate) fn fit(a: FitArgs) -> Result<()> {
    let law: LawKind = a.law.parse()?;
    let target: Target = a.target.parse()?;
    let table = store::build_contour(&read_all_runs(&a.inputs)?)?;
    let result = laws::fit_law(&table.points(target), law, target)?;
    let text = serde_json::to_string_pretty(&result).expect("fit result serializes");
    fs::write(&a.out, text + "\n")?;
    let p = &result.params;
    println!(
        "law {} target {} points {} dropped {}",
        p.law, p.target, result.n_points, result.n_dropped_nonpositive
    );
    println!(
        "C {} A {} gamma_n {} d {} gamma_c {}",
        format_sig9(p.c),
        format_sig9(p.a_ratio),
        format_sig9(p.gamma_n),
        format_sig9(p.d_shift),
        format_sig9(p.gamma_c)
    );
    println!(
        "r2_log {} r2_linear {}",
        format_sig9(result.r2_log),
        format_sig9(result.r2_linear)
    );
    Ok(())
}

fn load_fit(path: &Path) -> Result<LawParams> {
    let fit: FitResult = read_json(path)?;
    Ok(fit.params)
}

pub(crate) fn predict(a: PredictArgs) -> Result<()> {
    let p = load_fit(&a.fit)?;
    let delta = laws::eval_law(&p, &ExperimentPoint::new(a.n, a.qr, a.qb))?;
    if a.json {
        println!(
            "{}",
            json!({"n_params": a.n, "q_r": a.qr, "q_b": a.qb, "delta": delta})
        );
    } else {
        println!("delta {delta:?}");
    }
    Ok(())
}

pub(crate) fn plan(a: PlanArgs) -> Result<()> {
    let p = load_fit(&a.fit)?;
    let (key, value) = match (a.n, a.qr) {
        (Some(n), _) => ("max_ratio", laws::max_ratio(&p, n, a.qb, a.budget)?),
        (None, Some(qr)) => ("min_n", laws::min_n(&p, qr, a.qb, a.budget)?),
        (None, None) => return Err(Error::InvalidInput("need --n or --qr".into())),
    };
    if a.json {
        println!("{}", json!({ key: value, "budget": a.budget, "q_b": a.qb }));
    } else {
        println!("{key} {value:?}");
    }
    Ok(())
}

pub(crate) fn synth(a: SynthArgs) -> Result<()> {
    let params: LawParams = read_json(&a.params)?;
    let grid: Vec<ExperimentPoint> = read_json(&a.grid)?;
    let method: BlockFormat = a.method.parse()?;
    let data = oracle::gen_dataset(&params, &grid, a.sigma, a.seed)?;
    let runs = oracle::synthetic_runs(&data, method, a.seed)?;
    for run in &runs {
        store::append_run(&a.out, run)?;
    }
    println!("wrote {} synthetic runs", runs.len());
    Ok(())
}

pub(crate) fn export_contour(a: ExportArgs) -> Result<()> {
    let table = store::build_contour(&read_all_runs(&a.inputs)?)?;
    store::export_csv(&table, &a.out)?;
    println!("wrote {} rows", table.rows.len());
    Ok(())
}

pub(crate) fn init(a: InitArgs) -> Result<()> {
    let (_, cfg) = resolve_config(&a.model)?;
    let ckpt = init_random(&cfg, a.seed)?;
    save_checkpoint(&ckpt, &a.out)?;
    println!("digest {}", ckpt.digest());
    Ok(())
}

pub(crate) fn tokens(a: TokensArgs) -> Result<()> {
    let (_, ckpt) = load_model(&a.source)?;
    let toks = if a.uniform {
        uniform_tokens(ckpt.config.vocab_size, a.count, a.seed)
    } else {
        sample_tokens(&ckpt, a.count, a.seed)?
    };
    write_tokens(&a.out, &toks)?;
    println!("digest {}", tokens_digest(&toks));
    Ok(())
}
