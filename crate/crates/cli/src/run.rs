//! The `train`, `verify` and `bench` commands.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use hbp::data::eval_subset;
use hbp::engine::curvature_blocks;
use hbp::network::{forward_pass, gradient_pass};
use hbp::oracle::{verification_suite, VerificationReport};
use hbp::train::{aggregate, aggregate_csv, metrics_csv, train_run};
use hbp::Network;

use crate::config::RunConfig;
use crate::CliError;

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::write(dir.join(name), contents).map_err(|e| CliError::Io(format!("writing {}: {e}", dir.join(name).display())))
}

/// Creates the output directory and echoes the effective config into it.
pub fn prepare_out(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::Io(format!("creating {}: {e}", cfg.out_dir.display())))?;
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    write(&cfg.out_dir, "effective_config.json", &(json + "\n"))
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let (train, test) = cfg.datasets()?;
    let subset_size = cfg.eval_subset.unwrap_or_else(|| test.as_ref().map_or(train.len(), |t| t.len()));
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut net = Network::from_spec(&cfg.network, seed)?;
        let mut opt = cfg.optimizer()?;
        let eval = train.samples(&eval_subset(train.len(), subset_size, seed));
        let rows = train_run(&mut net, &mut opt, &train, &eval, test.as_ref(), &cfg.settings(), seed)?;
        let last = rows.last().expect("initial row");
        eprintln!(
            "seed {seed}: train loss {:.6} after {} iterations ({:.2}s)",
            last.train_loss_subset, last.iteration, last.wall_time_s
        );
        write(&cfg.out_dir, &format!("metrics_seed_{seed}.csv"), &metrics_csv(&rows))?;
        runs.push(rows);
    }
    write(&cfg.out_dir, "aggregate.csv", &aggregate_csv(&aggregate(&runs)))
}

pub fn verify(cfg: &RunConfig) -> Result<(), CliError> {
    let (train, _) = cfg.datasets()?;
    let n = cfg.verify_samples.min(train.len());
    let data = train.samples(&(0..n).collect::<Vec<_>>());
    let mut report = VerificationReport::default();
    for &seed in &cfg.seeds {
        let net = Network::from_spec(&cfg.network, seed)?;
        for mut row in verification_suite(&net, &data, &cfg.tolerances())?.rows {
            row.block = format!("seed{seed}/{}", row.block);
            report.rows.push(row);
        }
    }
    report.write(&cfg.out_dir).map_err(|e| CliError::Io(e.to_string()))?;
    eprint!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("{} of {} checks failed", report.failures(), report.rows.len())))
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const BENCH_HEADER: &str = "pass,mode,kind,batch_size,repetitions,median_s,min_s,max_s";

/// Times the forward, gradient and curvature passes of the first
/// `batch_size` training samples for every configured batch mode. The
/// curvature pass includes one product with every block.
pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let (train, _) = cfg.datasets()?;
    let n = cfg.batch_size.min(train.len());
    let batch = train.samples(&(0..n).collect::<Vec<_>>());
    let net = Network::from_spec(&cfg.network, cfg.seeds[0])?;
    let mut csv = format!("{BENCH_HEADER}\n");
    for &mode in &cfg.bench_modes {
        let mut times = [Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..cfg.bench_repetitions {
            let t = Instant::now();
            let mut trace = forward_pass(&net, &batch)?;
            times[0].push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            gradient_pass(&net, &mut trace)?;
            times[1].push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            for b in curvature_blocks(&net, &trace, cfg.kind, mode, cfg.memory_cap)? {
                let ones = vec![1.0; b.dim()];
                std::hint::black_box(b.apply(&ones));
            }
            times[2].push(t.elapsed().as_secs_f64());
        }
        for (pass, t) in ["forward", "gradient", "curvature"].iter().zip(&mut times) {
            let (lo, hi) = t.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            let med = median(t);
            let _ =
                writeln!(csv, "{pass},{},{},{n},{},{med:e},{lo:e},{hi:e}", mode.name(), cfg.kind.name(), cfg.bench_repetitions);
        }
    }
    eprint!("{csv}");
    write(&cfg.out_dir, "bench.csv", &csv)
}
