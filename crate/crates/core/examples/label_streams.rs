//! Label statistics of i.i.d., Dirichlet and sorted evaluation streams.

use datta::corrupt::{CorruptionKind, CorruptionSpec};
use datta::data::{generate, SynthConfig};
use datta::stream::{make_stream, max_class_fraction, shannon_label_entropy, DomainSpec, StreamOrdering, StreamSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate(&SynthConfig::default(), 2000, 3);
    let mut orderings = vec![("iid".to_string(), StreamOrdering::Iid)];
    for delta in [10.0, 1.0, 0.1, 0.01] {
        orderings.push((format!("dirichlet {delta}"), StreamOrdering::Dirichlet { delta }));
    }
    orderings.push(("sorted".to_string(), StreamOrdering::Sorted));

    println!("{:<16} {:>14} {:>18}", "ordering", "mean entropy", "mean max fraction");
    for (name, ordering) in orderings {
        let spec = StreamSpec {
            ordering,
            batch_size: 64,
            domains: vec![DomainSpec {
                corruption: CorruptionSpec::new(CorruptionKind::Brightness, 1, 0),
                budget: 2000,
            }],
            seed: 11,
        };
        let batches = make_stream(&ds, &spec)?;
        let (mut h, mut f) = (0.0, 0.0);
        for b in &batches {
            h += shannon_label_entropy(b.labels.as_slice())?;
            f += max_class_fraction(b.labels.as_slice())?;
        }
        let n = batches.len() as f64;
        println!("{name:<16} {:>14.3} {:>18.3}", h / n, f / n);
    }
    println!("(ln 10 = {:.3})", 10f64.ln());
    Ok(())
}
