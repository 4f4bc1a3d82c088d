use std::time::Instant;

use reserving::experiment::{run_scenario, ScenarioConfig, TailSettings};
use reserving::synthgen::{generate, truth_reserve, GeneratorConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let files: f64 = args.get(1).map_or(10_000.0, |s| s.parse().unwrap());
    let seed: u64 = args.get(2).map_or(2005, |s| s.parse().unwrap());
    let kind = args.get(3).map_or("plain", |s| s.as_str());
    let mut g = GeneratorConfig::desk(files, seed);
    match kind {
        "trend" => g.trend_strength = 0.2,
        "tail" => {
            g.tail_prob = 0.005;
            g.severity_median = 1000.0;
        }
        _ => {}
    }
    let mut cfg = ScenarioConfig::desk(kind, g);
    if kind == "tail" {
        cfg.tail = Some(TailSettings { threshold: Some(32_000.0), merge_from: Some(4), ..Default::default() });
    }
    if let Some(e) = args.get(4) {
        cfg.setup.optimizer.max_epochs = e.parse().unwrap();
    }
    let t = Instant::now();
    let out = run_scenario(&cfg).unwrap();
    println!("{}", out.report.table());
    println!("epochs {} best {:?} in {:.0}s", out.report.training.epochs_run, out.report.training.best_epoch, t.elapsed().as_secs_f64());
    println!("{:?}", out.report.lstm.per_period);
    let (_, truth) = generate(&cfg.generator).unwrap();
    let expected: f64 = out.test.files.iter().map(|f| truth_reserve(&truth, f.claim_id(), f.t_k).unwrap()).sum();
    let agg = out.report.lstm.aggregate.unwrap();
    println!(
        "expected {expected:.0} observed/expected {:.4} lstm/expected {:.4} cl/expected {:.4}",
        agg.observed_reserve / expected,
        agg.predicted_reserve / expected,
        out.report.chain_ladder.predicted_reserve / expected
    );
}
