mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;
use reserving::baseline::{aggregate_to_triangle, fit_factors, project_reserve};
use reserving::domain::ClaimantFile;
use reserving::eval::{evaluate, export_figures, Predictions, SIMULATED_PANELS};
use reserving::io::{create_with_header, read_portfolio, read_predictions, write_ground_truth, write_portfolio, write_predictions};
use reserving::net::PredictMode;
use reserving::persist::{load, save, SavedModel};
use reserving::preprocess::{default_stratum, encode, stratified_split, Split};
use reserving::synthgen::generate;
use reserving::tail::{
    adjust_predictions, default_threshold, exceedance_cells, excesses_over, fit_exceedance_glm, fit_gpd,
    mean_excess_curve, pp_qq_points, stability_scan, zero_run_reference, AdjustmentConfig, ExceedanceGlm, GpdFit,
    PeriodGrouping,
};
use reserving::train::select_alpha;
use reserving::{Error, Result};

#[derive(Parser)]
#[command(name = "reserve", version, about = "Micro-level claims reserving with a recurrent network")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed that drives the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic portfolio with its hidden truth.
    Simulate,
    /// Stratified train/validation/test split of a portfolio.
    Split {
        #[arg(long)]
        portfolio: Option<PathBuf>,
    },
    /// Train the network.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Overrides the configured loss scale.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Choose the loss scale on backdated data.
    SelectAlpha {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<f64>>,
        #[arg(long)]
        backdate_offset: Option<u32>,
    },
    /// Predict future payments of every file.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        portfolio: Option<PathBuf>,
    },
    /// Chain-ladder triangle, factors and reserves.
    Chainladder {
        #[arg(long)]
        portfolio: Option<PathBuf>,
        /// Portfolio used to fit the factors; the projected one by default.
        #[arg(long)]
        factors_from: Option<PathBuf>,
        #[arg(long)]
        censor: Option<f64>,
    },
    /// Threshold diagnostics, GPD and exceedance GLM.
    TailFit {
        #[arg(long)]
        portfolio: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Model used for the zero-run reference.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Apply the large-claim adjustment to predictions.
    Adjust {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        portfolio: Option<PathBuf>,
        #[arg(long)]
        tail: PathBuf,
        #[arg(long, value_parser = parse_zeta)]
        zeta: Option<f64>,
    },
    /// Metrics and figure data against the hidden truth.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        portfolio: Option<PathBuf>,
        #[arg(long)]
        censor: Option<f64>,
    },
    /// Full scenario with comparison table.
    Report,
}

fn parse_zeta(s: &str) -> std::result::Result<f64, String> {
    reserving::tail::parse_zeta(s).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize, serde::Deserialize)]
struct TailParams {
    threshold: f64,
    gpd: GpdFit,
    glm: ExceedanceGlm,
    zero_run_reference: Option<f64>,
}

struct Ctx {
    cfg: RunConfig,
    /// Seed driving the current subcommand, stamped into every output.
    seed: u64,
    hash: String,
    out: PathBuf,
}

impl Ctx {
    fn header(&self, seed: u64) -> String {
        format!("config_hash={} seed={seed}", self.hash)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn csv(&self, name: &str, seed: u64) -> Result<std::io::BufWriter<std::fs::File>> {
        create_with_header(&self.path(name), Some(&self.header(seed)))
    }

    fn json<T: Serialize>(&self, name: &str, seed: u64, body: &T) -> Result<()> {
        let s = serde_json::to_string_pretty(&Stamped { config_hash: &self.hash, seed, body })?;
        std::fs::write(self.path(name), s + "\n")?;
        Ok(())
    }

    fn or_out(&self, given: &Option<PathBuf>, fallback: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path(fallback))
    }

    fn portfolio_path(&self, given: &Option<PathBuf>) -> PathBuf {
        given
            .clone()
            .or_else(|| self.cfg.paths.portfolio.clone())
            .unwrap_or_else(|| self.path("portfolio"))
    }

    fn model_path(&self, given: &Option<PathBuf>) -> PathBuf {
        given
            .clone()
            .or_else(|| self.cfg.paths.model.clone())
            .unwrap_or_else(|| self.path("model.rsv"))
    }
}

fn predict(model: &SavedModel, files: &[ClaimantFile]) -> Result<Predictions> {
    let batch = encode(files, &model.encoding);
    let seq = model.network.predict_sequence(&batch, &PredictMode::Inference)?;
    Ok(Predictions::from_sequence(&seq, &model.encoding.scaling))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    let seed_flag = cli.common.seed;
    // The seed flag becomes part of the effective configuration.
    if let Some(seed) = seed_flag {
        match cli.command {
            Command::Simulate | Command::Report => cfg.generator.seed = seed,
            Command::Split { .. } => cfg.split.seed = seed,
            _ => {
                cfg.model.optimizer.seed = seed;
                cfg.model.init_seed = seed;
            }
        }
    }
    let out = cli
        .common
        .out_dir
        .clone()
        .or_else(|| cfg.paths.outputs.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    let seed = match cli.command {
        Command::Simulate | Command::Report => cfg.generator.seed,
        Command::Split { .. } => cfg.split.seed,
        _ => cfg.model.optimizer.seed,
    };
    let ctx = Ctx { hash: cfg.hash()?, cfg, seed, out };
    let cfg = &ctx.cfg;

    match &cli.command {
        Command::Simulate => {
            let seed = ctx.seed;
            let (p, truth) = generate(&cfg.generator)?;
            write_portfolio(&p, &ctx.path("portfolio"), Some(&ctx.header(seed)))?;
            write_ground_truth(&truth, ctx.csv("ground_truth.csv", seed)?)?;
            eprintln!("simulated {} files", p.len());
        }
        Command::Split { portfolio } => {
            let seed = ctx.seed;
            let p = read_portfolio(&ctx.portfolio_path(portfolio), true)?;
            let assignment = stratified_split(&p, cfg.split.proportions, default_stratum, seed)?;
            let mut w = ctx.csv("split.csv", seed)?;
            writeln!(w, "claim_id,split")?;
            for f in &p.files {
                let s = assignment.split_of(f.claim_id()).expect("every file is assigned");
                writeln!(w, "{},{}", f.claim_id(), s.as_str())?;
            }
            w.flush()?;
            for s in Split::ALL {
                write_portfolio(&assignment.select(&p, s), &ctx.path(s.as_str()), Some(&ctx.header(seed)))?;
            }
        }
        Command::Train { train, val, alpha } => {
            let setup = cfg.model.clone();
            let seed = ctx.seed;
            let tr = read_portfolio(&ctx.or_out(train, "train"), false)?;
            let va = read_portfolio(&ctx.or_out(val, "validation"), false)?;
            let alpha = alpha.unwrap_or(cfg.alpha);
            let model = setup.train(&tr.schema, tr.n, &tr.files, &va.files, alpha)?;
            model.log.write_csv(ctx.csv("training_log.csv", seed)?)?;
            ctx.json("encoding.json", seed, &model.context)?;
            let saved = SavedModel { network: model.network, encoding: model.context, alpha, seed };
            save(&saved, &ctx.model_path(&None))?;
        }
        Command::SelectAlpha { train, val, candidates, backdate_offset } => {
            let setup = cfg.model.clone();
            let seed = ctx.seed;
            let tr = read_portfolio(&ctx.or_out(train, "train"), false)?;
            let va = read_portfolio(&ctx.or_out(val, "validation"), false)?;
            let grid = candidates.clone().unwrap_or_else(|| cfg.alpha_candidates.clone());
            let offset = backdate_offset.unwrap_or(cfg.backdate_offset);
            let sel = select_alpha(&grid, &setup, &tr.schema, tr.n, &tr.files, &va.files, offset)?;
            let mut w = ctx.csv("alpha_selection.csv", seed)?;
            writeln!(w, "alpha,rr,ru,criterion")?;
            for r in &sel.rows {
                writeln!(w, "{},{},{},{}", r.alpha, r.rr, r.ru, r.criterion)?;
            }
            w.flush()?;
            ctx.json("alpha_selection.json", seed, &sel)?;
            println!("{}", sel.alpha);
        }
        Command::Predict { model, portfolio } => {
            let m = load(&ctx.model_path(model))?;
            let p = read_portfolio(&ctx.portfolio_path(portfolio), false)?;
            let preds = predict(&m, &p.files)?;
            write_predictions(&preds, ctx.csv("predictions.csv", m.seed)?)?;
        }
        Command::Chainladder { portfolio, factors_from, censor } => {
            let seed = ctx.seed;
            let p = read_portfolio(&ctx.portfolio_path(portfolio), false)?;
            let fit_on = match factors_from {
                Some(path) => read_portfolio(path, false)?,
                None => p.clone(),
            };
            let triangle = aggregate_to_triangle(&p.files, p.n, *censor);
            let factors = fit_factors(&aggregate_to_triangle(&fit_on.files, fit_on.n, *censor))?;
            let reserves = project_reserve(&triangle, &factors);
            triangle.write_csv(ctx.csv("triangle.csv", seed)?)?;
            let mut w = ctx.csv("factors.csv", seed)?;
            writeln!(w, "from_period,factor")?;
            for (j, f) in factors.factors.iter().enumerate() {
                writeln!(w, "{},{f}", j + 1)?;
            }
            w.flush()?;
            reserves.write_csv(ctx.csv("chainladder_reserves.csv", seed)?)?;
            println!("{}", reserves.total);
        }
        Command::TailFit { portfolio, threshold, model } => {
            let seed = ctx.seed;
            let p = read_portfolio(&ctx.portfolio_path(portfolio), false)?;
            let payments: Vec<f64> = p.files.iter().flat_map(|f| f.records.iter().map(|r| r.payment)).collect();
            let u = threshold
                .or(cfg.tail.threshold)
                .or_else(|| default_threshold(&payments))
                .ok_or_else(|| Error::Empty("no payments".into()))?;
            let mut positive: Vec<f64> = payments.iter().copied().filter(|&y| y > 0.0).collect();
            positive.sort_by(f64::total_cmp);
            let grid: Vec<f64> = [0.9, 0.95, 0.975, 0.99, 0.995, 0.998]
                .iter()
                .map(|&q| reserving::eval::quantile_sorted(&positive, q))
                .collect();
            let mut grid_unique = grid.clone();
            grid_unique.dedup();

            let mut w = ctx.csv("mean_excess.csv", seed)?;
            writeln!(w, "threshold,count,mean_excess,lower,upper")?;
            for m in mean_excess_curve(&payments, &grid_unique) {
                writeln!(w, "{},{},{},{},{}", m.threshold, m.count, m.mean_excess, m.lower, m.upper)?;
            }
            w.flush()?;
            let mut w = ctx.csv("stability.csv", seed)?;
            writeln!(w, "threshold,shape,shape_lower,shape_upper,scale,scale_lower,scale_upper,error")?;
            for r in stability_scan(&payments, &grid_unique, &cfg.tail.gpd)? {
                let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
                let f = r.fit.as_ref();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    r.threshold,
                    cell(f.map(|f| f.params.shape)),
                    cell(f.and_then(|f| f.shape_ci).map(|c| c.0)),
                    cell(f.and_then(|f| f.shape_ci).map(|c| c.1)),
                    cell(f.map(|f| f.params.scale)),
                    cell(f.and_then(|f| f.scale_ci).map(|c| c.0)),
                    cell(f.and_then(|f| f.scale_ci).map(|c| c.1)),
                    r.error.unwrap_or_default().replace(',', ";"),
                )?;
            }
            w.flush()?;

            let excesses = excesses_over(&payments, u);
            let gpd = fit_gpd(&excesses, u, &cfg.tail.gpd)?;
            let (pp, qq) = pp_qq_points(&excesses, &gpd.params);
            let mut w = ctx.csv("pp.csv", seed)?;
            writeln!(w, "empirical,model")?;
            for x in pp {
                writeln!(w, "{},{}", x.empirical, x.model)?;
            }
            w.flush()?;
            let mut w = ctx.csv("qq.csv", seed)?;
            writeln!(w, "model,empirical,lower,upper")?;
            for x in qq {
                writeln!(w, "{},{},{},{}", x.model, x.empirical, x.lower, x.upper)?;
            }
            w.flush()?;

            let grouping = PeriodGrouping { n: p.n, first_alone: true, width: cfg.tail.grouping_width, merge_from: cfg.tail.merge_from };
            let glm = fit_exceedance_glm(&exceedance_cells(&p.files, u), grouping, cfg.tail.zero_run_term)?;
            let zero_run_reference = match model {
                Some(path) => {
                    let m = load(path)?;
                    Some(zero_run_reference(&predict(&m, &p.files)?, &p.files)?)
                }
                None => None,
            };
            ctx.json("tail.json", seed, &TailParams { threshold: u, gpd, glm, zero_run_reference })?;
        }
        Command::Adjust { predictions, portfolio, tail, zeta } => {
            let seed = ctx.seed;
            let preds = read_predictions(predictions)?;
            let p = read_portfolio(&ctx.portfolio_path(portfolio), false)?;
            let params: TailParams = serde_json::from_str(&std::fs::read_to_string(tail)?)?;
            let reference = cfg
                .adjustment
                .zero_run_reference
                .or(params.zero_run_reference)
                .ok_or_else(|| Error::InvalidConfig("zero-run reference missing: run tail-fit with --model or set adjustment.zero_run_reference".into()))?;
            let adj = AdjustmentConfig {
                threshold: params.threshold,
                zeta: zeta.unwrap_or(cfg.adjustment.zeta),
                zero_run_reference: reference,
                zero_run_band: cfg.tail.zero_run_band,
            };
            let out = adjust_predictions(&preds, &p.files, &params.glm, &params.gpd.params, &adj)?;
            write_predictions(&out, ctx.csv("adjusted_predictions.csv", seed)?)?;
        }
        Command::Evaluate { predictions, portfolio, censor } => {
            let seed = ctx.seed;
            let preds = read_predictions(predictions)?;
            let p = read_portfolio(&ctx.portfolio_path(portfolio), true)?;
            let report = evaluate("evaluation", &preds, &p.files, *censor, &SIMULATED_PANELS)?;
            ctx.json("metrics.json", seed, &report)?;
            export_figures(&report, &preds, &p.files, &ctx.path("figures"), Some(&format!("# {}", ctx.header(seed))))?;
        }
        Command::Report => {
            let seed = ctx.seed;
            let outcome = reserving::experiment::run_scenario(&cfg.scenario())?;
            ctx.json("report.json", seed, &outcome.report)?;
            let table = outcome.report.table();
            std::fs::write(ctx.path("report.md"), format!("<!-- {} -->\n{table}", ctx.header(seed)))?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(2)
        }
    }
}
