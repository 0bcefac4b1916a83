use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Layer, ModelGraph};
use crate::diffcore::Real;

/// He (Kaiming) normal initialization: weights ~ N(0, 2 / fan_in) with
/// fan_in = C_in·K² for convs and F for linear layers. Biases and BN shifts
/// are zeroed, BN scales set to one and running statistics reset.
pub fn he_init<T: Real>(model: &mut ModelGraph<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.layers {
        match layer {
            Layer::Conv(c) => {
                let fan_in: usize = c.weight.shape()[1..].iter().product();
                fill_normal(c.weight.data_mut(), (2.0 / fan_in as f64).sqrt(), &mut rng);
                c.bias.data_mut().fill(T::zero());
            }
            Layer::Linear(l) => {
                let f = l.weight.shape()[1];
                fill_normal(l.weight.data_mut(), (2.0 / f as f64).sqrt(), &mut rng);
                l.bias.data_mut().fill(T::zero());
            }
            Layer::BatchNorm(b) => {
                b.gamma.data_mut().fill(T::one());
                b.beta.data_mut().fill(T::zero());
                b.running_mean.fill(T::zero());
                b.running_var.fill(T::one());
            }
            _ => {}
        }
    }
}

fn fill_normal<T: Real>(out: &mut [T], std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in out {
        *v = T::lit(dist.sample(rng));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::build_vgg19;

    #[test]
    fn conv_std_matches_fan_in() {
        // the 64<-3 conv has 1728 weights; pool six seeds for >= 10^4 samples
        let mut m = build_vgg19::<f64>(10, 1.0).unwrap();
        let mut samples = Vec::new();
        for seed in 0..6 {
            he_init(&mut m, seed);
            let Layer::Conv(c) = &m.layers[0] else { panic!() };
            samples.extend_from_slice(c.weight.data());
        }
        assert!(samples.len() >= 10_000);
        let var: f64 = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
        let ratio = var.sqrt() / (2.0f64 / 27.0).sqrt();
        assert!((ratio - 1.0).abs() < 0.05, "std ratio {ratio}");
    }

    #[test]
    fn seeding_is_deterministic() {
        let mut a = build_vgg19::<f32>(10, 0.125).unwrap();
        let mut b = a.clone();
        let mut c = a.clone();
        he_init(&mut a, 5);
        he_init(&mut b, 5);
        he_init(&mut c, 6);
        assert_eq!(a, b);
        let diff = a.params().iter().zip(c.params()).flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
            .fold(0f32, f32::max);
        assert!(diff > 0.0);
    }
}
