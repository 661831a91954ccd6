//! `dualkv`: verification suites, analytic reports, CPU benchmarks and
//! rollout packing.
//!
//! Exit codes: 0 success, 1 check failure or runtime error, 2 usage error.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dualkv::bench::{run_bench, BenchConfig, BenchReport};
use dualkv::costmodel::{analyze, mb, CostReport, MemoryCoefficients, ModelDims, Scenario};
use dualkv::packing::{pack, plan_micro_batches, PackedBatch, PackingMode};
use dualkv::rollout::{group_samples, read_rollouts};
use dualkv::verify::{self, Suite, VerifyOptions};
use dualkv::Precision;

#[derive(Parser, Debug)]
#[command(name = "dualkv", version, about = "Shared-prompt attention: verify, analyze, bench, pack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Records,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteArg {
    Kernel,
    Layer,
    Pipeline,
    Precision,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Kernel => Suite::Kernel,
            SuiteArg::Layer => Suite::Layer,
            SuiteArg::Pipeline => Suite::Pipeline,
            SuiteArg::Precision => Suite::Precision,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
    Bf16,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F64 => Precision::F64,
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::Bf16 => Precision::Bf16Emu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Standard,
    Dualkv,
}

impl From<ModeArg> for PackingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Standard => PackingMode::Standard,
            ModeArg::Dualkv => PackingMode::DualKV,
        }
    }
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be positive".into()),
        Ok(v) => Ok(v),
        Err(_) => Err(format!("`{s}` is not a non-negative integer")),
    }
}

fn non_negative(s: &str) -> std::result::Result<usize, String> {
    s.parse::<usize>().map_err(|_| format!("`{s}` is not a non-negative integer"))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run randomized property suites against independent oracles.
    Verify {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "20", value_parser = positive)]
        cases: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Token, FLOP and memory figures for one prompt group.
    Analyze {
        #[arg(long, value_parser = positive)]
        n: usize,
        #[arg(long, value_parser = positive)]
        p: usize,
        /// one response length, or N comma-separated lengths
        #[arg(long, required = true, value_delimiter = ',', value_parser = positive, num_args = 1..)]
        r: Vec<usize>,
        /// micro-batch size for the memory model (default N)
        #[arg(long, value_parser = positive)]
        mb: Option<usize>,
        /// qwen3-8b or llama3.1-8b
        #[arg(long, default_value = "qwen3-8b")]
        dims: String,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Time the baseline kernel against the two-call shared-prompt path.
    Bench {
        #[arg(long, value_parser = positive)]
        n: usize,
        #[arg(long, value_parser = non_negative)]
        p: usize,
        #[arg(long, value_parser = positive)]
        r: usize,
        /// key tile size
        #[arg(long, default_value = "64", value_parser = positive)]
        bn: usize,
        #[arg(long, default_value = "8", value_parser = positive)]
        heads: usize,
        #[arg(long, default_value = "2", value_parser = positive)]
        kvheads: usize,
        #[arg(long, default_value = "64", value_parser = positive)]
        dim: usize,
        #[arg(long, default_value = "5", value_parser = positive)]
        reps: usize,
        #[arg(long, default_value = "2", value_parser = non_negative)]
        warmup: usize,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// refuse configurations whose estimated working set exceeds this
        #[arg(long, default_value = "8", value_parser = positive)]
        memory_limit_gib: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Group rollouts by prompt and write one manifest line per micro-batch.
    Pack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_parser = positive)]
        mb: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn run(command: Command) -> Result<ExitCode> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::Verify { suite, seed, cases, format } => {
            let checks = verify::run(suite.into(), VerifyOptions { seed, cases })?;
            for c in &checks {
                match format {
                    Format::Table => writeln!(out, "{c}")?,
                    Format::Records => writeln!(out, "{}", json!({"record": "check", "passed": c.passed(), "check": c}))?,
                }
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if format == Format::Table {
                writeln!(out, "{} checks, {} failed", checks.len(), failed)?;
            }
            Ok(ExitCode::from(u8::from(failed > 0)))
        }
        Command::Analyze { n, p, r, mb: micro, dims, format } => {
            let dims: ModelDims = match dims.parse() {
                Ok(d) => d,
                Err(e) => return Ok(usage(e)),
            };
            let r = match r.len() {
                1 => vec![r[0]; n],
                len if len == n => r,
                len => return Ok(usage(format!("--r takes 1 or N={n} lengths, got {len}"))),
            };
            let scn = Scenario {
                n,
                p,
                r,
                mb: micro.unwrap_or(n),
                dims,
                bytes_per_elem: 2,
            };
            let report = analyze(&scn, MemoryCoefficients::default())?;
            match format {
                Format::Table => writeln!(out, "{report}")?,
                Format::Records => write_cost_records(&mut out, &report)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            n,
            p,
            r,
            bn,
            heads,
            kvheads,
            dim,
            reps,
            warmup,
            precision,
            seed,
            memory_limit_gib,
            format,
        } => {
            if heads % kvheads != 0 {
                return Ok(usage("--heads must be a multiple of --kvheads"));
            }
            let cfg = BenchConfig {
                tile: bn,
                heads,
                kv_heads: kvheads,
                head_dim: dim,
                reps,
                warmup,
                precision: precision.into(),
                seed,
                memory_limit: (memory_limit_gib as u64) << 30,
                ..BenchConfig::new(n, p, r)
            };
            let report = run_bench(&cfg)?;
            match format {
                Format::Table => write_bench_table(&mut out, &report)?,
                Format::Records => writeln!(out, "{}", json!({"record": "bench", "report": report}))?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Pack { input, mode, mb: capacity, out: path } => {
            let file = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let samples = read_rollouts(BufReader::new(file))?;
            let groups = group_samples(&samples)?;
            let mode: PackingMode = mode.into();
            let plans = plan_micro_batches(&groups, mode, capacity)?;
            let mut writer = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            for (i, mb_groups) in plans.iter().enumerate() {
                let batch = pack(mb_groups, mode)?;
                writeln!(writer, "{}", manifest(i, &batch))?;
                writeln!(
                    out,
                    "micro-batch {i}: {} group(s), {} sequences, T={} rho={:.4}",
                    batch.groups.len(),
                    batch.groups.iter().map(|g| g.n()).sum::<usize>(),
                    batch.total_tokens,
                    batch.rho()
                )?;
            }
            writer.flush()?;
            writeln!(out, "wrote {} manifest(s) to {}", plans.len(), path.display())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// The packed batch plus derived fields; `batch` alone deserializes back
/// into a `PackedBatch`.
fn manifest(index: usize, batch: &PackedBatch) -> serde_json::Value {
    json!({
        "micro_batch": index,
        "mode": batch.mode,
        "total_tokens": batch.total_tokens,
        "rho": batch.rho(),
        "cu_seqlens": batch.global_cu_seqlens(),
        "batch": batch,
    })
}

/// Reads manifests written by `pack` back into batches.
#[cfg_attr(not(test), allow(dead_code))]
fn read_manifests(reader: impl BufRead) -> Result<Vec<PackedBatch>> {
    reader
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(&line?)?;
            Ok(serde_json::from_value(v["batch"].clone())?)
        })
        .collect()
}

fn write_cost_records(out: &mut impl Write, r: &CostReport) -> io::Result<()> {
    let rows = [
        json!({"record": "scenario", "n": r.n, "p": r.p, "r_mean": r.r_mean, "mb": r.mb}),
        json!({"record": "tokens", "t_std": r.t_std, "t_dk": r.t_dk, "rho": r.rho}),
        json!({"record": "attention_flops", "standard": r.attn_flops_std.to_string(), "dualkv": r.attn_flops_dk.to_string()}),
        json!({"record": "speedup_attn", "formula": r.speedup_attn, "exact_pairs": r.speedup_attn_pairs,
               "disagree": (r.speedup_attn - r.speedup_attn_pairs).abs() / r.speedup_attn_pairs > 0.05}),
        json!({"record": "kernel_memory_saved_per_layer", "kv_bytes": r.kv_mem_saved, "q_bytes": r.q_mem_saved,
               "lse_bytes": r.lse_mem_saved, "total_bytes": r.total_kernel_mem_saved_per_layer,
               "total_mb": mb(r.total_kernel_mem_saved_per_layer)}),
        json!({"record": "memory_model_gb", "dualkv": r.mem_dualkv_pred, "fa2": r.mem_fa2_pred}),
    ];
    for row in rows {
        writeln!(out, "{row}")?;
    }
    Ok(())
}

fn write_bench_table(out: &mut impl Write, r: &BenchReport) -> io::Result<()> {
    let c = &r.config;
    writeln!(
        out,
        "config            N={} P={} R={} tile={} H={} H_k={} d={} {} reps={} warmup={}",
        c.n, c.p, c.r, c.tile, c.heads, c.kv_heads, c.head_dim, c.precision, c.reps, c.warmup
    )?;
    writeln!(out, "{:<18}{:>12}{:>12}{:>12}{:>10}", "", "fwd (s)", "bwd (s)", "total (s)", "bwd/fwd")?;
    for (name, t) in [("fa2", r.fa2), ("dualkv", r.dualkv)] {
        writeln!(out, "{:<18}{:>12.4}{:>12.4}{:>12.4}{:>10.2}", name, t.fwd, t.bwd, t.total(), t.bwd_fwd_ratio())?;
    }
    writeln!(out, "measured speedup  fwd {:.2}x  bwd {:.2}x  total {:.2}x", r.speedup_fwd, r.speedup_bwd, r.speedup_total)?;
    writeln!(out, "predicted speedup tokens (rho) {:.2}x  attention pairs {:.2}x", r.predicted_tokens, r.predicted_pairs)?;
    writeln!(out, "note              CPU timings; not comparable to GPU measurements")
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualkv::packing::{pack_dualkv, Response, RolloutGroup};

    #[test]
    fn manifest_round_trips() {
        let g = RolloutGroup::new(
            "x",
            vec![1, 2, 3],
            vec![
                Response {
                    tokens: vec![4],
                    advantage: 0.5,
                },
                Response {
                    tokens: vec![5, 6],
                    advantage: -1.0,
                },
            ],
        )
        .unwrap();
        let batch = pack_dualkv(&[g]).unwrap();
        let line = manifest(0, &batch).to_string();
        let back = read_manifests(io::Cursor::new(format!("{line}\n\n"))).unwrap();
        assert_eq!(back, vec![batch]);
    }

    #[test]
    fn numeric_parsers() {
        assert_eq!(positive("3"), Ok(3));
        assert!(positive("0").is_err() && positive("-4").is_err());
        assert_eq!(non_negative("0"), Ok(0));
        assert!(non_negative("-1").is_err());
    }
}
