use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nmslope::analysis::{
    flop_model, inference_memory_ratio, listed_training_bits, theorem1_check, theorem1_error_curve,
    training_memory_bits, BitBudget, EstimatorStats, MaskFamily,
};
use nmslope::nm::{lemma1_analytic, lemma1_monte_carlo};
use nmslope::rng::{derive_seed, rng_from_seed};
use nmslope::sparse::bench::bench_spmm;
use nmslope::train::report::{report_csv, summary_json, write_checkpoint};
use nmslope::train::{content_hash, Dataset, RunReport, TrainConfig, Trainer};
use nmslope::{DenseMatrix, Dtype, NmPattern, Scalar};

use crate::{CliError, Command, Common};

type CliResult<T> = Result<T, CliError>;

pub(crate) fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Train {
            config,
            common,
            no_checkpoint,
        } => train(&config, &common, !no_checkpoint),
        Command::VerifyLemma {
            patterns,
            trials,
            side,
            common,
        } => verify_lemma(&patterns, trials, side, &common),
        Command::VerifyTheorem {
            pattern,
            pairs,
            size,
            samples,
            common,
        } => verify_theorem(pattern, pairs, size, samples, &common),
        Command::ReportMemory {
            pattern,
            rank,
            d_in,
            d_out,
            weight_bits,
            mask_bits,
            common,
        } => report_memory(pattern, rank, d_in, d_out, weight_bits, mask_bits, &common),
        Command::ReportFlops {
            pattern,
            rank,
            batch,
            d_in,
            d_out,
            common,
        } => report_flops(pattern, rank, batch, d_in, d_out, &common),
        Command::BenchSpmm {
            pattern,
            rank,
            batch,
            d_in,
            d_out,
            reps,
            common,
        } => bench(pattern, rank, batch, d_in, d_out, reps, &common),
        Command::SweepMixedNm { config, common } => sweep(&config, &common),
    }
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(&format!("creating {}", dir.display()), e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&format!("writing {}", path.display()), e))
}

/// Header, rows, then the `# config-hash` footer over `identity`.
fn csv(header: &str, rows: &[String], identity: &str) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 2));
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    let _ = writeln!(out, "# config-hash {}", content_hash(identity));
    out
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(&format!("reading {}", path.display()), e))?;
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run_typed<T: Scalar>(cfg: &TrainConfig, checkpoint: Option<&Path>) -> CliResult<RunReport> {
    let data = Arc::new(Dataset::<T>::for_config(cfg)?);
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    trainer.run_until(cfg.train.iterations)?;
    let report = trainer.finish()?;
    if let Some(dir) = checkpoint {
        write_checkpoint(trainer.model(), &report.config_hash, report.iterations, dir)?;
    }
    Ok(report)
}

fn run_config(cfg: &TrainConfig, checkpoint: Option<&Path>) -> CliResult<RunReport> {
    match cfg.train.dtype {
        Dtype::F32 => run_typed::<f32>(cfg, checkpoint),
        Dtype::F64 => run_typed::<f64>(cfg, checkpoint),
    }
}

fn train(config: &Path, common: &Common, checkpoint: bool) -> CliResult<()> {
    let cfg = load_config(config, common.seed)?;
    let ckpt = common.out.join("checkpoint");
    let report = run_config(&cfg, checkpoint.then_some(ckpt.as_path()))?;
    write_artifact(&common.out, "loss.csv", &report_csv(&report))?;
    write_artifact(&common.out, "summary.json", &summary_json(&report))?;
    println!(
        "final_train_loss={} final_val_loss={} config_hash={}",
        report.final_train_loss, report.final_val_loss, report.config_hash
    );
    Ok(())
}

fn verify_lemma(patterns: &[NmPattern], trials: usize, side: usize, common: &Common) -> CliResult<()> {
    if patterns.is_empty() || trials == 0 {
        return Err(CliError::config("verify-lemma needs at least one pattern and one trial"));
    }
    let seed = common.seed.unwrap_or(0);
    let mut rows = Vec::with_capacity(patterns.len());
    for &p in patterns {
        // keyed by the pattern so a result does not depend on list order
        let mc = lemma1_monte_carlo(p, side, trials, derive_seed(seed, (p.n() << 8 | p.m()) as u64))?;
        let analytic = lemma1_analytic(p);
        rows.push(format!("{p},{analytic},{},{},{}", mc.mean, mc.std_error, mc.z_score(analytic)));
    }
    let list: Vec<String> = patterns.iter().map(|p| p.to_string()).collect();
    let identity = format!("verify-lemma patterns={} trials={trials} side={side} seed={seed}", list.join(","));
    let text = csv("pattern,analytic,empirical,std_error,z_score", &rows, &identity);
    write_artifact(&common.out, "lemma.csv", &text)?;
    print!("{text}");
    Ok(())
}

fn family_name(f: MaskFamily) -> &'static str {
    match f {
        MaskFamily::Bernoulli => "bernoulli",
        MaskFamily::Structured => "structured",
    }
}

fn stats_row(pair: usize, s: &EstimatorStats) -> String {
    format!(
        "{pair},{},{},{},{},{},{},{}",
        family_name(s.family),
        s.samples,
        s.rel_error,
        s.max_rel_error,
        s.max_z,
        s.beyond_4se,
        s.elements
    )
}

/// Roughly half-decade sample counts ending at `samples`.
fn curve_counts(samples: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = [100, 30, 10, 3]
        .iter()
        .map(|d| samples / d)
        .filter(|&c| c > 0)
        .collect();
    counts.push(samples);
    counts.dedup();
    counts
}

fn verify_theorem(pattern: NmPattern, pairs: usize, size: usize, samples: usize, common: &Common) -> CliResult<()> {
    if pairs == 0 || size == 0 || samples == 0 {
        return Err(CliError::config("verify-theorem needs positive --pairs, --size and --samples"));
    }
    pattern.check_divisible(size)?;
    let seed = common.seed.unwrap_or(0);
    let counts = curve_counts(samples);
    let mut rows = Vec::with_capacity(2 * pairs);
    let mut curve_rows = Vec::with_capacity(counts.len() * pairs);
    let mut slopes = Vec::with_capacity(pairs);
    let mut beyond = 0;
    for pair in 0..pairs {
        let pair_seed = derive_seed(seed, pair as u64);
        let mut rng = rng_from_seed(pair_seed);
        let w = DenseMatrix::<f64>::random_normal(size, size, 1.0, &mut rng);
        let dy = DenseMatrix::<f64>::random_normal(size, size, 1.0, &mut rng);
        let report = theorem1_check(&w, &dy, pattern, samples, derive_seed(pair_seed, 1))?;
        beyond += report.bernoulli.beyond_4se;
        rows.push(stats_row(pair, &report.bernoulli));
        rows.push(stats_row(pair, &report.structured));
        let curve = theorem1_error_curve(&w, &dy, pattern, MaskFamily::Bernoulli, &counts, derive_seed(pair_seed, 2))?;
        for (c, e) in curve.counts.iter().zip(&curve.errors) {
            curve_rows.push(format!("{pair},{c},{e},{}", curve.slope));
        }
        slopes.push(curve.slope);
    }
    let identity = format!("verify-theorem pattern={pattern} pairs={pairs} size={size} samples={samples} seed={seed}");
    write_artifact(
        &common.out,
        "theorem.csv",
        &csv("pair,family,samples,rel_error,max_rel_error,max_z,beyond_4se,elements", &rows, &identity),
    )?;
    write_artifact(&common.out, "theorem_curve.csv", &csv("pair,samples,rel_error,slope", &curve_rows, &identity))?;
    let mean_slope = slopes.iter().sum::<f64>() / slopes.len() as f64;
    println!("bernoulli elements beyond 4 SE: {beyond} of {}", pairs * size * size);
    println!("mean log-error/log-samples slope: {mean_slope}");
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[allow(clippy::too_many_arguments)]
fn report_memory(
    pattern: NmPattern,
    rank: usize,
    d_in: usize,
    d_out: usize,
    weight_bits: u32,
    mask_bits: u32,
    common: &Common,
) -> CliResult<()> {
    if weight_bits == 0 {
        return Err(CliError::config("--weight-bits must be positive"));
    }
    let budget = BitBudget {
        weight_bits,
        grad_bits: weight_bits,
        mask_bits,
        ..BitBudget::default()
    };
    let per_value = training_memory_bits(&budget, pattern);
    let listed = listed_training_bits(&budget, pattern);
    let inference = inference_memory_ratio(pattern, d_in, d_out, rank, weight_bits)?;
    let row = |q: &str, s: Option<f64>, d: Option<f64>, r: f64, note: &str| {
        format!("{q},{},{},{r},{note}", opt(s), opt(d))
    };
    let rows = vec![
        row(
            "training_per_value",
            Some(per_value.sparse_total),
            Some(per_value.dense_total),
            per_value.ratio,
            "bits per group of m; n values per compressed copy",
        ),
        row(
            "training_as_listed",
            Some(listed.sparse_total),
            Some(listed.dense_total),
            listed.ratio,
            "bits per group of m; one value per compressed copy",
        ),
        row("training_reference_68pct_as_factor", None, None, 0.68, "68% read as the remaining footprint"),
        row("training_reference_68pct_as_saving", None, None, 0.32, "68% read as the amount removed"),
        row(
            "inference",
            None,
            None,
            inference,
            &format!("{d_out}x{d_in} rank {rank}; values plus indices plus adapters"),
        ),
        row("inference_reference_54pct_as_saving", None, None, 0.46, "54% read as the amount removed"),
        row("inference_reference_54pct_as_factor", None, None, 0.54, "54% read as the remaining footprint"),
    ];
    let identity = format!(
        "report-memory pattern={pattern} rank={rank} d_in={d_in} d_out={d_out} weight_bits={weight_bits} mask_bits={mask_bits}"
    );
    let text = csv("quantity,sparse_bits,dense_bits,ratio,note", &rows, &identity);
    write_artifact(&common.out, "memory.csv", &text)?;
    print!("{text}");
    Ok(())
}

fn report_flops(pattern: NmPattern, rank: usize, batch: usize, d_in: usize, d_out: usize, common: &Common) -> CliResult<()> {
    if rank > d_in.min(d_out) {
        return Err(CliError::config(format!("rank {rank} exceeds min({d_in}, {d_out})")));
    }
    let r = flop_model(batch, d_in, d_out, pattern, rank)?;
    let rows = vec![format!(
        "{pattern},{rank},{batch},{d_in},{d_out},{},{},{},{},{},{},{}",
        r.dense_flops,
        r.sparse_flops,
        r.adapter_flops,
        r.ratio,
        r.dense_intensity,
        r.sparse_intensity,
        r.adapter_intensity
    )];
    let identity = format!("report-flops pattern={pattern} rank={rank} batch={batch} d_in={d_in} d_out={d_out}");
    let text = csv(
        "pattern,rank,batch,d_in,d_out,dense_flops,sparse_flops,adapter_flops,ratio,dense_intensity,sparse_intensity,adapter_intensity",
        &rows,
        &identity,
    );
    write_artifact(&common.out, "flops.csv", &text)?;
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench(
    pattern: NmPattern,
    rank: usize,
    batch: usize,
    d_in: usize,
    d_out: usize,
    reps: usize,
    common: &Common,
) -> CliResult<()> {
    if rank > d_in.min(d_out) {
        return Err(CliError::config(format!("rank {rank} exceeds min({d_in}, {d_out})")));
    }
    let seed = common.seed.unwrap_or(0);
    let rows: Vec<String> = bench_spmm(batch, d_out, d_in, pattern, rank, reps, seed)?
        .into_iter()
        .map(|r| format!("{},{},{},{}", r.op, r.shape, r.pattern, r.median_ns))
        .collect();
    let identity =
        format!("bench-spmm pattern={pattern} rank={rank} batch={batch} d_in={d_in} d_out={d_out} reps={reps} seed={seed}");
    let text = csv("op,shape,pattern,median_ns", &rows, &identity);
    write_artifact(&common.out, "bench.csv", &text)?;
    print!("{text}");
    Ok(())
}

/// The three mixed-pattern variants: label, first-half and second-half pattern.
pub fn sweep_variants() -> [(&'static str, NmPattern, NmPattern); 3] {
    let p24 = NmPattern::new(2, 4).expect("valid");
    let p28 = NmPattern::new(2, 8).expect("valid");
    [("2:4-2:4", p24, p24), ("2:4-2:8", p24, p28), ("2:8-2:4", p28, p24)]
}

struct SweepRow {
    label: &'static str,
    density: f64,
    report: RunReport,
}

/// Label of the first (densest) row of a sweep table body.
pub fn densest_label(table: &str) -> Option<&str> {
    table.lines().nth(1).and_then(|l| l.split(',').next())
}

fn sweep(config: &Path, common: &Common) -> CliResult<()> {
    let base = load_config(config, common.seed)?;
    let blocks = base.model.layers;
    if !blocks.is_multiple_of(2) {
        return Err(CliError::config(format!(
            "sweep-mixed-nm needs an even block count, got model.layers = {blocks}"
        )));
    }
    let mut results = Vec::with_capacity(3);
    for (label, first, second) in sweep_variants() {
        let mut cfg = base.clone();
        cfg.sparsity.first_half = Some(first);
        cfg.sparsity.second_half = Some(second);
        let report = run_config(&cfg, None)?;
        results.push(SweepRow {
            label,
            density: (first.density() + second.density()) / 2.0,
            report,
        });
    }
    // densest first, then lower final loss
    results.sort_by(|a, b| {
        b.density
            .partial_cmp(&a.density)
            .unwrap_or(Ordering::Equal)
            .then(a.report.final_train_loss.total_cmp(&b.report.final_train_loss))
    });
    let rows: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{}",
                r.label, r.density, r.report.final_train_loss, r.report.final_val_loss, r.report.config_hash, r.report.iterations
            )
        })
        .collect();
    let mut text = String::from("config,density,final_train_loss,final_val_loss,run_hash,iterations\n");
    for r in &rows {
        text.push_str(r);
        text.push('\n');
    }
    let _ = writeln!(text, "# densest {}", results[0].label);
    let _ = writeln!(text, "# config-hash {}", content_hash(&format!("sweep-mixed-nm\n{}", base.canonical_text())));
    write_artifact(&common.out, "sweep.csv", &text)?;
    print!("{text}");
    Ok(())
}
