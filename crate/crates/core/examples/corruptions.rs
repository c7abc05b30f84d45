//! Apply every corruption at every severity to one synthetic image and print
//! how far each moves the pixels.

use datta::corrupt::{corrupt, CorruptionKind, CorruptionSpec};
use datta::data::{generate, SynthConfig};
use datta::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate(&SynthConfig::default(), 1, 0);
    let image = Tensor::new(ds.sample_shape().to_vec(), ds.sample(0).to_vec())?;
    println!("{:<16} RMS change at severity 1..5", "corruption");
    for kind in CorruptionKind::ALL {
        let rms: Vec<String> = (1..=5)
            .map(|s| {
                let out = corrupt(&image, &CorruptionSpec::new(kind, s, 42)).expect("valid image");
                let se: f64 = out
                    .data()
                    .iter()
                    .zip(image.data())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                format!("{:.4}", (se / image.len() as f64).sqrt())
            })
            .collect();
        println!("{:<16} {}", kind.name(), rms.join("  "));
    }
    Ok(())
}
