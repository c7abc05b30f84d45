//! File-based pipeline: dataset directories, weight and statistics files,
//! two runs written as CSV traces and a comparison table.

use std::path::PathBuf;

use datta::engine::{MethodConfig, Variant};
use datta::experiment::{compare, extract_stats_stage, gen_dataset_stage, run_experiment, train_source_stage, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("datta_csv_reports"), PathBuf::from);
    let mut cfg = ExperimentConfig::from_toml(
        r#"
        [dataset]
        n_train = 2000
        n_test = 1000

        [stream]
        batch_size = 64
        ordering = { kind = "dirichlet", delta = 0.1 }

        [[stream.domains]]
        budget = 1000
        corruption = { kind = "gaussian_noise", severity = 5 }
        "#,
    )?;
    cfg.data.train_dir = root.join("data/train");
    cfg.data.test_dir = root.join("data/test");
    cfg.data.weights = root.join("artifacts/weights.datt");
    cfg.data.stats = root.join("artifacts/stats.datt");

    gen_dataset_stage(&cfg, &root.join("data"))?;
    train_source_stage(&cfg, &cfg.data.weights)?;
    extract_stats_stage(&cfg, &cfg.data.stats)?;

    let mut dirs = Vec::new();
    for variant in [Variant::Source, Variant::Ttbn, Variant::DaEm] {
        cfg.method = MethodConfig::with_variant(variant);
        let out = root.join("runs").join(variant.name());
        run_experiment(&cfg, &out)?;
        dirs.push(out);
    }
    print!("{}", compare(&dirs)?);
    println!("traces under {}", root.join("runs").display());
    Ok(())
}
