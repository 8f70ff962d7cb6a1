use std::path::{Path, PathBuf};

use abis_core::eval::{write_json, LabeledProbe};
use abis_core::synth::{
    calibrate_all, save_probes, write_probe_truth, write_registry, Generator, ModalityKappas, SynthConfig,
};
use clap::Args;
use serde_json::json;

use crate::error::{require_file, CliError, Result};
use crate::manifest::{create_out_dir, RunManifest};

pub const GALLERY_FILE: &str = "gallery.bgal";
pub const REGISTRY_FILE: &str = "registry.jsonl";
pub const PROBES_FILE: &str = "probes.bgal";
pub const TRUTH_FILE: &str = "probes_truth.jsonl";
pub const HOLDOUT_FILE: &str = "holdout.bgal";
pub const HOLDOUT_TRUTH_FILE: &str = "holdout_truth.jsonl";
pub const CONFIG_FILE: &str = "synth.toml";
pub const KAPPA_FILE: &str = "kappa.json";
pub const CALIBRATION_FILE: &str = "calibration.json";

/// Probe-set seed offset of the holdout set; the main set uses 0.
const HOLDOUT_PROBE_SEED: u64 = 1;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthesis config TOML; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Gallery size.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub mated: Option<usize>,
    #[arg(long)]
    pub nonmated: Option<usize>,
    /// Mated probes come from the first N gallery identities.
    #[arg(long)]
    pub mate_pool: Option<usize>,
    /// Extra non-mated probes kept apart for threshold calibration.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long)]
    pub shard_rows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub missing_face_rate: Option<f64>,
    /// Probability that an identity lacks both irides.
    #[arg(long)]
    pub missing_iris_rate: Option<f64>,
    /// Probability that an identity lacks all ten fingers.
    #[arg(long)]
    pub missing_fingers_rate: Option<f64>,
    /// Probability that each remaining finger is missing.
    #[arg(long)]
    pub missing_finger_rate: Option<f64>,
    /// Fixed noise concentrations; skips calibration. Give all three.
    #[arg(long)]
    pub kappa_face: Option<f64>,
    #[arg(long)]
    pub kappa_iris: Option<f64>,
    #[arg(long)]
    pub kappa_finger: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_config(path: Option<&Path>) -> Result<SynthConfig> {
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(SynthConfig::from_toml_str(&std::fs::read_to_string(p)?)?)
        }
        None => Ok(SynthConfig::default()),
    }
}

impl SynthArgs {
    fn resolve(&self) -> Result<SynthConfig> {
        let mut c = read_config(self.config.as_deref())?;
        if let Some(n) = self.n {
            if n == 0 {
                return Err(CliError::Usage("--n must be at least 1".into()));
            }
            c.gallery_size = n;
        }
        if let Some(v) = self.mated {
            c.mated_probes = v;
        }
        if let Some(v) = self.nonmated {
            c.nonmated_probes = v;
        }
        if self.mate_pool.is_some() {
            c.mate_pool = self.mate_pool;
        }
        if let Some(v) = self.shard_rows {
            c.shard_rows = v;
        }
        let m = &mut c.missing;
        for (flag, slot) in [
            (self.missing_face_rate, &mut m.face),
            (self.missing_iris_rate, &mut m.iris),
            (self.missing_fingers_rate, &mut m.fingers),
            (self.missing_finger_rate, &mut m.finger),
        ] {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        match (self.kappa_face, self.kappa_iris, self.kappa_finger) {
            (None, None, None) => {}
            (Some(face), Some(iris), Some(finger)) => c.kappa = Some(ModalityKappas { finger, face, iris }),
            _ => return Err(CliError::Usage("give all of --kappa-face, --kappa-iris, --kappa-finger or none".into())),
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn run(args: &SynthArgs) -> Result<()> {
    let config = args.resolve()?;
    create_out_dir(&args.out)?;
    let out = |name: &str| args.out.join(name);

    let mut manifest = RunManifest::new("synth", Some(args.seed), json!({ "holdout": args.holdout }));
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    let generator = manifest.time("calibrate", || Generator::new(config, args.seed))?;

    // Record the concentrations actually used so the run can be repeated
    // without recalibrating.
    let mut resolved = generator.config().clone();
    resolved.kappa = Some(*generator.kappas());
    let resolved_toml = resolved.to_toml_string();
    manifest.parameters = json!({ "config": resolved, "holdout": args.holdout });
    manifest.config_sha256 = crate::manifest::sha256_hex(resolved_toml.as_bytes());

    let (gallery, registry) = manifest.time("gallery", || generator.generate_gallery(resolved.gallery_size))?;
    let sets = manifest.time("probes", || {
        generator.generate_probe_sets(&registry, resolved.mated_probes, resolved.nonmated_probes, resolved.mate_pool, 0)
    })?;

    let mut written = Vec::new();
    manifest.time("write", || -> Result<()> {
        gallery.save(&out(GALLERY_FILE))?;
        write_registry(&out(REGISTRY_FILE), &registry)?;
        let probes: Vec<&LabeledProbe> = sets.mated.iter().chain(&sets.nonmated).collect();
        save_probes(&out(PROBES_FILE), &probes)?;
        write_probe_truth(&out(TRUTH_FILE), &sets.truth)?;
        written.extend([GALLERY_FILE, REGISTRY_FILE, PROBES_FILE, TRUTH_FILE]);
        if args.holdout > 0 {
            let holdout = generator.generate_probe_sets(&registry, 0, args.holdout, None, HOLDOUT_PROBE_SEED)?;
            save_probes(&out(HOLDOUT_FILE), &holdout.nonmated.iter().collect::<Vec<_>>())?;
            write_probe_truth(&out(HOLDOUT_TRUTH_FILE), &holdout.truth)?;
            written.extend([HOLDOUT_FILE, HOLDOUT_TRUTH_FILE]);
        }
        std::fs::write(out(CONFIG_FILE), &resolved_toml)?;
        write_json(
            std::fs::File::create(out(KAPPA_FILE))?,
            &json!({ "kappa": generator.kappas(), "calibration": generator.calibrations() }),
        )?;
        written.extend([CONFIG_FILE, KAPPA_FILE]);
        Ok(())
    })?;
    for name in written {
        manifest.output(&out(name))?;
    }
    manifest.write(&args.out)?;
    eprintln!(
        "synth: {} gallery rows, {} mated and {} non-mated probes in {}",
        gallery.len(),
        sets.mated.len(),
        sets.nonmated.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Synthesis config TOML supplying targets and sample budget.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Calibrates noise concentrations to the configured verification targets.
pub fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let config = read_config(args.config.as_deref())?;
    create_out_dir(&args.out)?;
    let mut manifest = RunManifest::new(
        "calibrate",
        Some(args.seed),
        json!({ "targets": config.targets, "calibration": config.calibration }),
    );
    if let Some(p) = &args.config {
        manifest.input(p)?;
    }
    let (kappas, details) = manifest.time("calibrate", || calibrate_all(&config.targets, &config.calibration, args.seed))?;
    let path = args.out.join(CALIBRATION_FILE);
    write_json(
        std::fs::File::create(&path)?,
        &json!({ "kappa": kappas, "finger": details[0], "face": details[1], "iris": details[2] }),
    )?;
    manifest.output(&path)?;
    manifest.write(&args.out)?;
    Ok(())
}
