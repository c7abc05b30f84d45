//! Generate the synthetic dataset, train the source model, extract source
//! statistics and round-trip both artifacts through their binary files.

use std::path::PathBuf;

use datta::data::{generate, SynthConfig};
use datta::model::{ArchSpec, ModelGraph};
use datta::source::{compute_source_stats, train_source, SourceStats, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth = SynthConfig::default();
    let train = generate(&synth, 2000, 1);
    let test = generate(&synth, 1000, 2);
    let arch = ArchSpec::default();

    let model = train_source(&train, &arch, &TrainConfig::default())?;
    for (name, ds) in [("train", &train), ("test", &test)] {
        let pred = model.predict(ds.images())?;
        let correct = pred.iter().zip(ds.labels()).filter(|(p, y)| p == y).count();
        println!("{name} accuracy: {:.1}%", 100.0 * correct as f64 / ds.len() as f64);
    }

    let stats = compute_source_stats(&model, &train, 256)?;
    for l in &stats.layers {
        let m = l.m_bar.iter().sum::<f32>() / l.m_bar.len() as f32;
        let d = l.d2_bar.iter().sum::<f32>() / l.d2_bar.len() as f32;
        println!("bn{}: {} channels, mean m_bar {m:.4}, mean d2_bar {d:.4}", l.layer, l.m_bar.len());
    }

    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, PathBuf::from);
    let (wp, sp) = (dir.join("datta_weights.datt"), dir.join("datta_stats.datt"));
    model.save_weights(&wp)?;
    stats.save(&sp)?;
    let reloaded = ModelGraph::load_weights(&wp, &arch)?;
    assert_eq!(reloaded.to_records(), model.to_records());
    assert_eq!(SourceStats::load_for(&sp, &reloaded)?, stats);
    println!("wrote {} and {}", wp.display(), sp.display());
    Ok(())
}
