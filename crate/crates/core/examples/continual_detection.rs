//! Continual adaptation over gaussian noise then contrast, with and without
//! the domain-shift detector.

use datta::corrupt::{CorruptionKind, CorruptionSpec};
use datta::detector::DetectorConfig;
use datta::experiment::{DeskSetup, ExperimentConfig};
use datta::stream::DomainSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut base = ExperimentConfig::default();
    base.dataset.n_train = 2000;
    base.dataset.n_test = 2560;
    base.stream.domains = vec![
        DomainSpec {
            corruption: CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, 0),
            budget: 2560,
        },
        DomainSpec {
            corruption: CorruptionSpec::new(CorruptionKind::Contrast, 5, 1),
            budget: 2560,
        },
    ];
    let setup = DeskSetup::build(&base)?;

    for detector in [None, Some(DetectorConfig::default())] {
        let cfg = ExperimentConfig {
            detector: detector.clone(),
            ..base.clone()
        };
        let trace = setup.run(&cfg)?;
        let per: Vec<String> = trace
            .domains
            .iter()
            .map(|d| format!("{} {:.2}%", d.corruption, d.error_pct()))
            .collect();
        println!(
            "detector {:<5} mean error {:.2}%  [{}]  resets at batches {:?}",
            detector.is_some(),
            trace.error_pct(),
            per.join(", "),
            trace.detections()
        );
    }
    println!("domain boundary at batch {}", 2560 / 64);
    Ok(())
}
