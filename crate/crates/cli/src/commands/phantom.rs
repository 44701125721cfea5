use std::fs;

use log::info;

use segkit::dataset::{generate_phantom, write_case, PhantomConfig};

use crate::cli::PhantomArgs;
use crate::config::RunConfig;
use crate::error::{Classify, CliResult};

pub fn run_phantom(cfg: &RunConfig, args: &PhantomArgs) -> CliResult<()> {
    let root = args
        .dataset
        .clone()
        .unwrap_or_else(|| cfg.dataset_root.clone());
    fs::create_dir_all(&root).or_data(format!("creating {}", root.display()))?;
    let dims: [usize; 3] = args
        .dims
        .clone()
        .try_into()
        .expect("clap enforces three values");
    for i in 0..args.count {
        let pc = PhantomConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            dims,
            blob_radius: args.radius,
            num_specks: args.specks,
        };
        let (mm, labels) = generate_phantom(&pc).or_usage("phantom parameters")?;
        write_case(&root, &format!("phantom_{i:03}"), &mm, &labels)
            .or_data("writing phantom case")?;
    }
    info!("wrote {} phantom cases to {}", args.count, root.display());
    Ok(())
}
