use std::path::PathBuf;
use std::time::Instant;

use abis_core::eval::write_json;
use abis_core::fusion::WeightProfile;
use abis_core::index::{DEFAULT_K, DEFAULT_SHARD_ROWS};
use abis_core::template::TEMPLATE_DIM;
use abis_core::{Gallery, MultiBiometricTemplate, SearchParams};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::error::{require_file, CliError, Result};
use crate::manifest::{create_out_dir, RunManifest};

pub const BENCH_FILE: &str = "bench.json";

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    /// Probe templates in gallery format; gallery rows are reused when unset.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 1000])]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub threads: usize,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Each batch size searches at least this many probes in total.
    #[arg(long, default_value_t = 50)]
    pub min_probes: usize,
    #[arg(long, default_value_t = DEFAULT_SHARD_ROWS)]
    pub shard_rows: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub batch_size: usize,
    pub batches: usize,
    pub probes: usize,
    pub seconds: f64,
    pub probes_per_second: f64,
    pub per_probe_ms: f64,
    /// Gallery bytes streamed per second, counting one full pass per batch.
    pub gb_per_second: f64,
    /// Multiply-adds of the raw scan, two flops each.
    pub gflop_per_second: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub gallery_rows: usize,
    pub dim: usize,
    pub threads: usize,
    pub k: usize,
    pub rows: Vec<BenchRow>,
    /// Per-probe time at the smallest batch over that at the largest.
    pub speedup: f64,
}

/// Times batched searches of `probes` (cycled as needed) at each batch size.
pub fn measure(
    gallery: &Gallery,
    probes: &[MultiBiometricTemplate],
    batch_sizes: &[usize],
    min_probes: usize,
    params: &SearchParams,
) -> Result<Vec<BenchRow>> {
    let weights = WeightProfile::adult().weights;
    let bytes_per_pass = (gallery.len() * TEMPLATE_DIM * 4) as f64;
    let mut rows = Vec::new();
    let mut cursor = 0usize;
    for &b in batch_sizes {
        let batches = min_probes.div_ceil(b).max(1);
        let mut seconds = 0.0;
        for _ in 0..batches {
            let batch: Vec<MultiBiometricTemplate> = (0..b).map(|i| probes[(cursor + i) % probes.len()].clone()).collect();
            cursor = (cursor + b) % probes.len();
            let start = Instant::now();
            let lists = gallery.search(&batch, &weights, params)?;
            seconds += start.elapsed().as_secs_f64();
            std::hint::black_box(lists);
        }
        let n = batches * b;
        rows.push(BenchRow {
            batch_size: b,
            batches,
            probes: n,
            seconds,
            probes_per_second: n as f64 / seconds,
            per_probe_ms: 1e3 * seconds / n as f64,
            gb_per_second: bytes_per_pass * batches as f64 / seconds / 1e9,
            gflop_per_second: 2.0 * (gallery.len() * TEMPLATE_DIM) as f64 * n as f64 / seconds / 1e9,
        });
    }
    Ok(rows)
}

pub fn run(args: &BenchArgs) -> Result<()> {
    if args.batch_sizes.is_empty() || args.batch_sizes.contains(&0) {
        return Err(CliError::Usage("batch sizes must be positive".into()));
    }
    if args.threads == 0 || args.k == 0 || args.shard_rows == 0 {
        return Err(CliError::Usage("--threads, --k and --shard-rows must be positive".into()));
    }
    require_file(&args.gallery)?;
    if let Some(p) = &args.probes {
        require_file(p)?;
    }
    let mut manifest = RunManifest::new(
        "bench",
        None,
        json!({
            "batch_sizes": args.batch_sizes,
            "threads": args.threads,
            "k": args.k,
            "min_probes": args.min_probes,
            "shard_rows": args.shard_rows,
        }),
    );
    let gallery = Gallery::load(&args.gallery, args.shard_rows)?;
    if gallery.is_empty() {
        return Err(CliError::Usage(format!("gallery {} is empty", args.gallery.display())));
    }
    manifest.input(&args.gallery)?;
    let probes: Vec<MultiBiometricTemplate> = match &args.probes {
        Some(p) => {
            manifest.input(p)?;
            let g = Gallery::load(p, DEFAULT_SHARD_ROWS)?;
            g.rows().map(|r| g.template(r.id).expect("row id resolves")).collect()
        }
        None => gallery.rows().take(1024).map(|r| gallery.template(r.id).expect("row id resolves")).collect(),
    };
    if probes.is_empty() {
        return Err(CliError::Usage("no probes to search".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let params = SearchParams::with_k(args.k);
    let rows = manifest.time("bench", || pool.install(|| measure(&gallery, &probes, &args.batch_sizes, args.min_probes, &params)))?;
    let first = rows.first().expect("at least one batch size");
    let last = rows.last().expect("at least one batch size");
    let report = BenchReport {
        gallery_rows: gallery.len(),
        dim: TEMPLATE_DIM,
        threads: args.threads,
        k: args.k,
        speedup: first.per_probe_ms / last.per_probe_ms,
        rows,
    };
    create_out_dir(&args.out)?;
    let path = args.out.join(BENCH_FILE);
    write_json(std::fs::File::create(&path)?, &report)?;
    manifest.output(&path)?;
    manifest.write(&args.out)?;
    for r in &report.rows {
        eprintln!(
            "bench: batch {:>5}: {:.1} probes/s, {:.3} ms/probe, {:.2} GB/s, {:.1} GFLOP/s",
            r.batch_size, r.probes_per_second, r.per_probe_ms, r.gb_per_second, r.gflop_per_second
        );
    }
    Ok(())
}
