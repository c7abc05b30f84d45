//! Compare the analytic gradient of the combined DA + EM loss with central
//! finite differences on a small randomly initialized network.

use datta::engine::{AdaptationState, MethodConfig, Variant};
use datta::model::{ArchSpec, ModelGraph};
use datta::source::{SourceLayerStats, SourceStats};
use datta::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arch = ArchSpec {
        height: 8,
        width: 8,
        ..ArchSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = ModelGraph::new(&arch, 7)?;
    let images = Tensor::new(
        arch.input_shape(6).to_vec(),
        (0..6 * 3 * 64).map(|_| rng.random::<f32>()).collect(),
    )?;

    // reference statistics well away from the captured ones keep the L1 terms smooth
    let layers = arch
        .conv_channels
        .iter()
        .enumerate()
        .map(|(layer, &c)| SourceLayerStats {
            layer,
            m_bar: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            d2_bar: (0..c).map(|_| rng.random_range(2.0..3.0)).collect(),
        })
        .collect();
    let stats = SourceStats {
        layers,
        population: Vec::new(),
    };

    let method = MethodConfig {
        theta: 0.0,
        ..MethodConfig::with_variant(Variant::DaEm)
    };
    let mut state = AdaptationState::new(model, method, &stats)?;
    state.init_adaptation(&images)?;
    let (_, report, grads) = state.losses_and_grads(&images)?;
    println!("L_DA = {:.5}  L_EM = {:.5}  L_final = {:.5}", report.l_da, report.l_em, report.l_final);

    let base = state.model().affine_snapshot();
    let h = 1e-2f32;
    let mut rels = Vec::new();
    for (layer, (gamma, beta)) in base.iter().enumerate() {
        for (which, len) in [(0, gamma.len()), (1, beta.len())] {
            for j in 0..len {
                let mut eval = |delta: f32| -> Result<f64, Box<dyn std::error::Error>> {
                    let mut p = base.clone();
                    let slot = if which == 0 { &mut p[layer].0 } else { &mut p[layer].1 };
                    slot[j] += delta;
                    state.model_mut().restore_affine(&p);
                    Ok(state.losses_and_grads(&images)?.1.l_final as f64)
                };
                let numeric = (eval(h)? - eval(-h)?) / (2.0 * h as f64);
                let analytic = grads[2 * layer + which].data()[j] as f64;
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                rels.push(rel);
            }
        }
    }
    state.model_mut().restore_affine(&base);
    // f32 differences are noisy, and a ReLU flipping inside [-h, h] adds a few outliers
    rels.sort_by(f64::total_cmp);
    let at = |q: f64| rels[((rels.len() - 1) as f64 * q) as usize];
    println!(
        "relative error over {} parameters (f32 losses, h = {h}): median {:.2e}, p90 {:.2e}, max {:.2e}",
        rels.len(),
        at(0.5),
        at(0.9),
        at(1.0)
    );
    Ok(())
}
