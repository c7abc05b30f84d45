//! Source, TTBN, DAOnly and DAEM on gaussian noise, i.i.d. versus a
//! label-correlated (delta = 0.1) stream.

use datta::engine::{MethodConfig, Variant};
use datta::experiment::{DeskSetup, ExperimentConfig};
use datta::stream::StreamOrdering;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut base = ExperimentConfig::default();
    base.dataset.n_train = 2000;
    base.dataset.n_test = 2000;
    let setup = DeskSetup::build(&base)?;

    println!("{:<8} {:>8} {:>12}", "method", "iid", "delta=0.1");
    for variant in [Variant::Source, Variant::Ttbn, Variant::DaOnly, Variant::DaEm] {
        let mut row = Vec::new();
        for ordering in [StreamOrdering::Iid, StreamOrdering::Dirichlet { delta: 0.1 }] {
            let mut cfg = base.clone();
            cfg.method = MethodConfig::with_variant(variant);
            cfg.stream.ordering = ordering;
            row.push(setup.run(&cfg)?.error_pct());
        }
        println!("{:<8} {:>7.2}% {:>11.2}%", variant.name(), row[0], row[1]);
    }
    Ok(())
}
