use std::path::PathBuf;

use abis_service::ServiceConfig;
use clap::Args;

use crate::error::{require_file, CliError, Result};

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service config TOML; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

impl ServeArgs {
    fn resolve(&self) -> Result<ServiceConfig> {
        let mut config = match &self.config {
            Some(p) => {
                require_file(p)?;
                ServiceConfig::load(p)?
            }
            None => ServiceConfig::default(),
        };
        if let Some(b) = &self.bind {
            config.bind = b.clone();
        }
        if self.gallery.is_some() {
            config.gallery_path = self.gallery.clone();
        }
        if self.state_dir.is_some() {
            config.state_dir = self.state_dir.clone();
        }
        if self.ui_dir.is_some() {
            config.ui_dir = self.ui_dir.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn run(args: &ServeArgs) -> Result<()> {
    let config = args.resolve()?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async {
        let (listener, engine) = abis_service::start(&config).await?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        eprintln!("serving {} gallery rows on http://{addr}", engine.gallery_size());
        abis_service::run(listener, engine, &config, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
