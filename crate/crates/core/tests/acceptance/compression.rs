use rand::Rng;
use rwprune_core::report::{compression_rates, CompressionModel, LayerBits};
use rwprune_core::seed::rng_from;

use crate::common::{ensure, Ctx, Outcome};

fn layer(bits: u32, nonzero: u64, total: u64) -> LayerBits {
    LayerBits { bits, nonzero, total }
}

/// Pruning rate × 32 / effective bits per surviving weight.
fn oracle(model: &CompressionModel) -> (f64, f64) {
    let total: f64 = model.layers.iter().map(|l| l.total as f64).sum();
    let nnz: f64 = model.layers.iter().map(|l| l.nonzero as f64).sum();
    let bits: f64 = model.layers.iter().map(|l| l.bits as f64 * l.nonzero as f64).sum::<f64>() / nnz;
    let pruning = total / nnz;
    (pruning * 32.0 / bits, pruning * 32.0 / (bits + model.index_bits as f64))
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs()
}

pub fn run(_: &mut Ctx) -> Outcome {
    // 385x pruning; 3-bit conv and 2-bit fc nonzeros mixed 4:1 give 2.80 bits.
    let t6 = CompressionModel::new(vec![layer(3, 800, 308_000), layer(2, 200, 77_000)]);
    let r6 = compression_rates(&t6)?;
    ensure!(close(r6.data_rate, 4403.0, 0.01), "385x at 2.80 bits gives {:.1}x, expected 4403x", r6.data_rate);
    // 34x pruning; 5-bit and 3-bit nonzeros mixed 37:63 give 3.74 bits.
    let t7 = CompressionModel::new(vec![layer(5, 370, 12_580), layer(3, 630, 21_420)]);
    let r7 = compression_rates(&t7)?;
    ensure!(close(r7.data_rate, 291.0, 0.01), "34x at 3.74 bits gives {:.1}x, expected 291x", r7.data_rate);

    let mut rng = rng_from(0xc0de);
    let trials = 10_000;
    for _ in 0..trials {
        let layers: Vec<LayerBits> = (0..rng.random_range(1..=6))
            .map(|_| {
                let total = rng.random_range(1..=1_000_000u64);
                layer(rng.random_range(1..=32), rng.random_range(0..=total), total)
            })
            .collect();
        let mut model = CompressionModel::new(layers);
        if model.layers.iter().all(|l| l.nonzero == 0) {
            model.layers[0].nonzero = 1;
        }
        model.index_bits = rng.random_range(0..=8);
        let r = compression_rates(&model)?;
        let (data, index) = oracle(&model);
        ensure!(
            close(r.data_rate, data, 1e-12) && close(r.model_rate, index, 1e-12),
            "{model:?}: {r:?} vs oracle ({data}, {index})"
        );
        ensure!(r.model_rate <= r.data_rate, "{model:?}: model rate above data rate");
        let c = rng.random_range(2..=1000u64);
        let mut scaled = model.clone();
        for l in &mut scaled.layers {
            l.nonzero *= c;
            l.total *= c;
        }
        let s = compression_rates(&scaled)?;
        ensure!(
            close(s.data_rate, r.data_rate, 1e-12) && close(s.model_rate, r.model_rate, 1e-12),
            "{model:?}: rates change when every count is scaled by {c}"
        );
    }
    Ok(format!(
        "4403x case {:.1}x, 291x case {:.1}x; {trials} random models scale-consistent with model <= data rate",
        r6.data_rate, r7.data_rate
    ))
}
