use std::path::{Path, PathBuf};

use abis_core::eval::{
    combination_study, default_subsets, det_curve, emit_report, gallery_size_sweep, identify, observed_thresholds,
    operating_point, operating_point_at, write_json, LabeledProbe, ModalitySubset, OperatingPoint, ReportFormat,
};
use abis_core::fusion::WeightProfile;
use abis_core::index::{ScanDepth, DEFAULT_K, DEFAULT_SHARD_ROWS};
use abis_core::synth::{load_probes, read_probe_truth};
use abis_core::{Gallery, SearchParams};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::error::{require_file, CliError, Result};
use crate::manifest::{create_out_dir, RunManifest};

pub const REPORT_FILE: &str = "report.json";
pub const DET_FILE: &str = "det.csv";
pub const COMBINATION_FILE: &str = "combination.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Gallery, labelled probes and search settings shared by evaluation commands.
#[derive(Debug, Args)]
pub struct EvalInputs {
    #[arg(long)]
    pub gallery: PathBuf,
    /// Probe templates in gallery format.
    #[arg(long)]
    pub probes: PathBuf,
    /// Probe truth JSONL; defaults to `probes_truth.jsonl` beside the probes.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Weight profile TOML; the adult profile when unset.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Candidate list length; mates ranked below it count as misses.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Rescore every comparable row instead of an overscanned shortlist.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub quality_adaptive: bool,
    #[arg(long, default_value_t = DEFAULT_SHARD_ROWS)]
    pub shard_rows: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub struct Loaded {
    pub gallery: Gallery,
    pub mated: Vec<LabeledProbe>,
    pub nonmated: Vec<LabeledProbe>,
    pub profile: WeightProfile,
    pub params: SearchParams,
}

impl EvalInputs {
    fn truth_path(&self) -> PathBuf {
        self.truth.clone().unwrap_or_else(|| {
            self.probes
                .parent()
                .unwrap_or(Path::new("."))
                .join(crate::synth::TRUTH_FILE)
        })
    }

    fn parameters(&self) -> serde_json::Value {
        json!({
            "k": self.k,
            "exhaustive": self.exhaustive,
            "quality_adaptive": self.quality_adaptive,
            "shard_rows": self.shard_rows,
        })
    }

    pub fn load(&self, manifest: &mut RunManifest) -> Result<Loaded> {
        let truth_path = self.truth_path();
        for p in [&self.gallery, &self.probes, &truth_path] {
            require_file(p)?;
        }
        if let Some(w) = &self.weights {
            require_file(w)?;
        }
        if self.k == 0 {
            return Err(CliError::Usage("--k must be at least 1".into()));
        }
        if self.shard_rows == 0 {
            return Err(CliError::Usage("--shard-rows must be at least 1".into()));
        }
        let profile = match &self.weights {
            Some(w) => WeightProfile::load(w)?,
            None => WeightProfile::adult(),
        };
        let gallery = manifest.time("load", || Gallery::load(&self.gallery, self.shard_rows))?;
        if gallery.is_empty() {
            return Err(CliError::Usage(format!("gallery {} is empty", self.gallery.display())));
        }
        let truth = read_probe_truth(&truth_path)?;
        let (mated, nonmated) = load_probes(&self.probes, &truth).map_err(|e| CliError::Data(e.to_string()))?;
        for p in [&self.gallery, &self.probes, &truth_path] {
            manifest.input(p)?;
        }
        if let Some(w) = &self.weights {
            manifest.input(w)?;
        }
        let params = SearchParams {
            k: self.k,
            scan_depth: if self.exhaustive { ScanDepth::Exhaustive } else { SearchParams::default().scan_depth },
            quality_adaptive: self.quality_adaptive,
            row_limit: None,
        };
        Ok(Loaded {
            gallery,
            mated,
            nonmated,
            profile,
            params,
        })
    }
}

#[derive(Debug, Args)]
pub struct DedupEvalArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    /// FPIR operating points to report; repeatable.
    #[arg(long = "target-fpir", default_values_t = [0.001])]
    pub target_fpir: Vec<f64>,
    /// Also report metrics at this fixed threshold.
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Modality subset for the combination study, e.g. `face,irides`; repeatable.
    #[arg(long = "subset")]
    pub subsets: Vec<String>,
    /// Run the combination study over the built-in subsets.
    #[arg(long)]
    pub all_subsets: bool,
}

#[derive(Serialize)]
struct Report<'a> {
    gallery_rows: usize,
    shard_count: usize,
    weight_profile: &'a str,
    k: usize,
    n_mated: usize,
    n_nonmated: usize,
    operating_points: Vec<OperatingPoint>,
    fixed_threshold: Option<OperatingPoint>,
    combination: Vec<abis_core::eval::CombinationRow>,
    det_points: usize,
}

fn check_fpir(targets: &[f64]) -> Result<()> {
    match targets.iter().find(|t| !(0.0..1.0).contains(*t)) {
        Some(t) => Err(CliError::Usage(format!("target FPIR {t} outside [0, 1)"))),
        None => Ok(()),
    }
}

fn check_threshold(tau: Option<f32>) -> Result<()> {
    match tau {
        Some(t) if !(-1.0..=1.0).contains(&t) => Err(CliError::Usage(format!("threshold {t} outside [-1, 1]"))),
        _ => Ok(()),
    }
}

pub fn dedup_eval(args: &DedupEvalArgs) -> Result<()> {
    check_fpir(&args.target_fpir)?;
    check_threshold(args.threshold)?;
    let mut subsets = if args.all_subsets { default_subsets() } else { Vec::new() };
    for spec in &args.subsets {
        let s = ModalitySubset::parse(spec)?;
        if !subsets.contains(&s) {
            subsets.push(s);
        }
    }
    let mut params = args.inputs.parameters();
    params["target_fpir"] = json!(args.target_fpir);
    params["threshold"] = json!(args.threshold);
    params["subsets"] = json!(subsets);
    let mut manifest = RunManifest::new("dedup-eval", None, params);
    let data = args.inputs.load(&mut manifest)?;
    params_profile(&mut manifest, &data.profile);
    if data.mated.is_empty() || data.nonmated.is_empty() {
        return Err(CliError::Usage("evaluation needs both mated and non-mated probes".into()));
    }

    let weights = &data.profile.weights;
    let (mated, nonmated) = manifest.time("search", || -> Result<_> {
        Ok((
            identify(&data.gallery, &data.mated, weights, &data.params)?,
            identify(&data.gallery, &data.nonmated, weights, &data.params)?,
        ))
    })?;
    let k = data.params.k;
    let operating_points = args
        .target_fpir
        .iter()
        .map(|&t| operating_point(&mated, &nonmated, t, k))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let fixed_threshold = args
        .threshold
        .map(|t| operating_point_at(&mated, &nonmated, t, k))
        .transpose()?;
    let det = det_curve(&mated, &nonmated, &observed_thresholds(&mated, &nonmated, k), k)?;

    let combination = match subsets.is_empty() {
        true => Vec::new(),
        false => {
            let target = args.target_fpir[0];
            manifest.time("combination", || {
                combination_study(&data.gallery, &data.mated, &data.nonmated, &subsets, weights, &data.params, target)
            })?
        }
    };

    let out = &args.inputs.out;
    create_out_dir(out)?;
    let report = Report {
        gallery_rows: data.gallery.len(),
        shard_count: data.gallery.shard_count(),
        weight_profile: &data.profile.name,
        k,
        n_mated: mated.len(),
        n_nonmated: nonmated.len(),
        operating_points,
        fixed_threshold,
        combination: combination.clone(),
        det_points: det.len(),
    };
    let report_path = out.join(REPORT_FILE);
    write_json(std::fs::File::create(&report_path)?, &report)?;
    emit_report(&det, &out.join(DET_FILE), ReportFormat::Csv)?;
    manifest.output(&report_path)?;
    manifest.output(&out.join(DET_FILE))?;
    if !combination.is_empty() {
        emit_report(&combination, &out.join(COMBINATION_FILE), ReportFormat::Csv)?;
        manifest.output(&out.join(COMBINATION_FILE))?;
    }
    manifest.write(out)?;
    for op in &report.operating_points {
        eprintln!(
            "dedup-eval: FPIR {:.6} FNIR {:.6} at threshold {:.5} (target FPIR {})",
            op.fpir, op.fnir, op.threshold, op.target_fpir
        );
    }
    Ok(())
}

fn params_profile(manifest: &mut RunManifest, profile: &WeightProfile) {
    manifest.parameters["weight_profile"] = json!(profile.name);
    manifest.parameters["weights"] = json!(profile.weights.as_array());
    manifest.config_sha256 = crate::manifest::sha256_hex(manifest.parameters.to_string().as_bytes());
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: EvalInputs,
    /// Nested gallery sizes: the first N rows of the gallery file.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub threshold: f32,
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    check_threshold(Some(args.threshold))?;
    let mut sizes = args.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes != args.sizes {
        eprintln!("warning: gallery sizes reordered to {sizes:?}");
    }
    let mut params = args.inputs.parameters();
    params["sizes"] = json!(sizes);
    params["threshold"] = json!(args.threshold);
    let mut manifest = RunManifest::new("sweep", None, params);
    let data = args.inputs.load(&mut manifest)?;
    params_profile(&mut manifest, &data.profile);
    if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n > data.gallery.len()) {
        return Err(CliError::Usage(format!("size {n} outside 1..={}", data.gallery.len())));
    }
    let rows = manifest.time("sweep", || {
        gallery_size_sweep(
            &data.gallery,
            &data.mated,
            &data.nonmated,
            &sizes,
            args.threshold,
            &data.profile.weights,
            &data.params,
        )
    })?;
    let out = &args.inputs.out;
    create_out_dir(out)?;
    let path = out.join(SWEEP_FILE);
    emit_report(&rows, &path, ReportFormat::Csv)?;
    manifest.output(&path)?;
    manifest.write(out)?;
    for r in &rows {
        eprintln!("sweep: n={} FPIR {:.6} FNIR {:.6}", r.gallery_size, r.fpir, r.fnir);
    }
    Ok(())
}
