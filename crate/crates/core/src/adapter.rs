//! Fuses a heat map with its image into the one-channel gland prompt:
//! `prompt = heat + f(concat(heat, image))` with
//! `f = conv → BN → relu → conv → BN → relu`.

use gradeprompt_autograd::nn::{BatchNorm2d, Conv2d};
use gradeprompt_autograd::{impl_module, Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub mid_channels: usize,
    pub kernel_size: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            mid_channels: 8,
            kernel_size: 3,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("adapter kernel_size {} must be odd", self.kernel_size)));
        }
        if self.mid_channels == 0 {
            return Err(Error::Config("adapter mid_channels must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adapter<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
}

impl_module!(Adapter<T> { conv1, bn1, conv2, bn2 });

impl<T: Scalar> Adapter<T> {
    pub fn new(prefix: &str, cfg: &AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (k, m) = (cfg.kernel_size, cfg.mid_channels);
        Ok(Self {
            conv1: Conv2d::new(&format!("{prefix}.conv1"), 4, m, k, 1, k / 2, false, rng),
            bn1: BatchNorm2d::new(&format!("{prefix}.bn1"), m),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), m, 1, k, 1, k / 2, false, rng),
            bn2: BatchNorm2d::new(&format!("{prefix}.bn2"), 1),
        })
    }

    fn check(g: &Graph<T>, heat: Var, image: Var) -> Result<()> {
        let (h, i) = (g.shape(heat), g.shape(image));
        let ok = h.len() == 4 && i.len() == 4 && h[1] == 1 && i[1] == 3 && h[0] == i[0] && h[2..] == i[2..];
        if !ok {
            return Err(Error::Shape {
                op: "adapter heat map vs image",
                expected: h.to_vec(),
                got: i.to_vec(),
            });
        }
        Ok(())
    }

    /// Training-mode pass: in a training graph batch-norm uses batch
    /// statistics and updates its running estimates.
    pub fn forward_train(&mut self, g: &mut Graph<T>, heat: Var, image: Var) -> Result<Var> {
        Self::check(g, heat, image)?;
        let x = g.concat(&[heat, image], 1);
        let x = self.conv1.forward(g, x);
        let x = self.bn1.forward(g, x);
        let x = g.relu(x);
        let x = self.conv2.forward(g, x);
        let x = self.bn2.forward(g, x);
        let f = g.relu(x);
        Ok(g.add(heat, f))
    }

    /// Pass with frozen batch-norm statistics.
    pub fn forward(&self, g: &mut Graph<T>, heat: Var, image: Var) -> Result<Var> {
        Self::check(g, heat, image)?;
        let f = self.branch(g, heat, image);
        Ok(g.add(heat, f))
    }

    /// The pre-residual branch `f` with frozen statistics.
    pub fn branch(&self, g: &mut Graph<T>, heat: Var, image: Var) -> Var {
        let x = g.concat(&[heat, image], 1);
        let x = self.conv1.forward(g, x);
        let x = self.bn1.forward_frozen(g, x);
        let x = g.relu(x);
        let x = self.conv2.forward(g, x);
        let x = self.bn2.forward_frozen(g, x);
        g.relu(x)
    }

    /// Evaluation on tensors: heat `[N,1,H,W]`, image `[N,3,H,W]`.
    pub fn adapt_prompt(&self, heat: &Tensor<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let h = g.input(heat.clone());
        let i = g.input(image.clone());
        let out = self.forward(&mut g, h, i)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradeprompt_autograd::{Graph64, Module, Tensor64};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor64 {
        let mut r = rng(seed);
        Tensor64::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
    }

    fn randomise_bn(bn: &mut BatchNorm2d<f64>, seed: u64) {
        let mut r = rng(seed);
        for p in [&mut bn.weight, &mut bn.bias, &mut bn.running_mean] {
            p.value_mut().data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        }
        bn.running_var.value_mut().data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.5..2.0));
    }

    fn adapter(seed: u64) -> Adapter<f64> {
        let mut a = Adapter::new("adapter", &AdapterConfig::default(), &mut rng(seed)).unwrap();
        randomise_bn(&mut a.bn1, seed + 1);
        randomise_bn(&mut a.bn2, seed + 2);
        // make the second BN mostly positive so relu does not swallow f
        a.bn2.bias.value_mut().data_mut()[0] = 0.7;
        a.bn2.weight.value_mut().data_mut()[0] = 1.3;
        a
    }

    /// Direct zero-padded cross-correlation, `[C,H,W]` → `[O,H,W]`.
    fn dense_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; o * h * w];
        for oc in 0..o {
            for r in 0..h {
                for col in 0..w {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let (y, xx) = (r as isize + dy as isize - p, col as isize + dx as isize - p);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                s += x[(ic * h + y as usize) * w + xx as usize] * wt[((oc * c + ic) * k + dy) * k + dx];
                            }
                        }
                    }
                    out[(oc * h + r) * w + col] = s;
                }
            }
        }
        out
    }

    fn bn_relu(x: &mut [f64], bn: &BatchNorm2d<f64>, plane: usize) {
        for (ch, chunk) in x.chunks_mut(plane).enumerate() {
            let m = bn.running_mean.value().data()[ch];
            let v = bn.running_var.value().data()[ch];
            let (gm, bt) = (bn.weight.value().data()[ch], bn.bias.value().data()[ch]);
            for e in chunk {
                *e = ((*e - m) / (v + bn.eps).sqrt() * gm + bt).max(0.0);
            }
        }
    }

    #[test]
    fn zeroed_branch_is_identity() {
        let mut a = adapter(1);
        a.visit_mut(&mut |p| {
            if !p.is_buffer() {
                p.value_mut().data_mut().fill(0.0);
            }
        });
        let heat = random(&[1, 1, 8, 8], 2);
        let out = a.adapt_prompt(&heat, &random(&[1, 3, 8, 8], 3)).unwrap();
        assert_eq!(out, heat);
    }

    #[test]
    fn zero_heat_and_final_conv_give_zero() {
        let mut a = Adapter::<f64>::new("adapter", &AdapterConfig::default(), &mut rng(4)).unwrap();
        a.conv2.weight.value_mut().data_mut().fill(0.0);
        let out = a.adapt_prompt(&Tensor64::zeros([1, 1, 8, 8]), &random(&[1, 3, 8, 8], 5)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_dense_convolution_oracle() {
        let a = adapter(6);
        let heat = random(&[1, 1, 8, 8], 7);
        let image = random(&[1, 3, 8, 8], 8);
        let got = a.adapt_prompt(&heat, &image).unwrap();
        let mut x = heat.data().to_vec();
        x.extend_from_slice(image.data());
        let mut h1 = dense_conv(&x, 4, 8, 8, a.conv1.weight.value().data(), 8, 3);
        bn_relu(&mut h1, &a.bn1, 64);
        let mut h2 = dense_conv(&h1, 8, 8, 8, a.conv2.weight.value().data(), 1, 3);
        bn_relu(&mut h2, &a.bn2, 64);
        let want: Vec<f64> = h2.iter().zip(heat.data()).map(|(f, h)| f + h).collect();
        assert_eq!(got.shape(), &[1, 1, 8, 8]);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(h2.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn branch_is_translation_equivariant_inside() {
        let a = adapter(9);
        let (heat, image) = (random(&[1, 1, 12, 12], 10), random(&[1, 3, 12, 12], 11));
        let shift = |t: &Tensor64, ch: usize| {
            Tensor64::from_fn([1, ch, 12, 12], |i| {
                let (c, r, col) = (i / 144, (i / 12) % 12, i % 12);
                if col == 0 { 0.0 } else { t.data()[c * 144 + r * 12 + col - 1] }
            })
        };
        let run = |a: &Adapter<f64>, h: &Tensor64, im: &Tensor64| {
            let mut g = Graph64::inference();
            let (hv, iv) = (g.input(h.clone()), g.input(im.clone()));
            let f = a.branch(&mut g, hv, iv);
            g.value(f).clone()
        };
        let base = run(&a, &heat, &image);
        let moved = run(&a, &shift(&heat, 1), &shift(&image, 3));
        // two 3×3 convs see 2 pixels; stay 3 away from every edge
        for r in 3..9 {
            for c in 3..9 {
                assert!((moved.data()[r * 12 + c + 1] - base.data()[r * 12 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let a = adapter(12);
        assert!(a.adapt_prompt(&Tensor64::zeros([1, 1, 8, 8]), &Tensor64::zeros([1, 3, 8, 9])).is_err());
        assert!(a.adapt_prompt(&Tensor64::zeros([1, 2, 8, 8]), &Tensor64::zeros([1, 3, 8, 8])).is_err());
    }

    #[test]
    fn training_pass_updates_running_stats_only_when_asked() {
        let mut a = adapter(13);
        let before = a.named_tensors();
        let mut g = Graph64::new(true);
        let (h, i) = (g.input(random(&[2, 1, 6, 6], 14)), g.input(random(&[2, 3, 6, 6], 15)));
        a.forward(&mut g, h, i).unwrap();
        assert_eq!(a.named_tensors(), before);
        a.forward_train(&mut g, h, i).unwrap();
        assert_ne!(a.named_tensors(), before);
    }

    #[test]
    fn gradients_reach_both_inputs() {
        let a = adapter(16);
        let heat = random(&[1, 1, 6, 6], 17);
        let image = random(&[1, 3, 6, 6], 18);
        let probe = random(&[1, 1, 6, 6], 19);
        let loss = |h: &Tensor64, im: &Tensor64| -> f64 {
            let out = a.adapt_prompt(h, im).unwrap();
            out.data().iter().zip(probe.data()).map(|(o, p)| o * p).sum()
        };
        let mut g = Graph64::inference();
        let (hv, iv) = (g.input(heat.clone()), g.input(image.clone()));
        g.watch(hv);
        g.watch(iv);
        let out = a.forward(&mut g, hv, iv).unwrap();
        let grads = g.backward_with(out, probe.clone());
        for (var, which) in [(hv, 0), (iv, 1)] {
            let analytic = grads.get(var).expect("gradient reaches input");
            let base = if which == 0 { &heat } else { &image };
            let eps = 1e-6;
            let mut worst: f64 = 0.0;
            let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(scale > 0.0);
            for idx in 0..base.numel() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.data_mut()[idx] += eps;
                minus.data_mut()[idx] -= eps;
                let num = if which == 0 {
                    (loss(&plus, &image) - loss(&minus, &image)) / (2.0 * eps)
                } else {
                    (loss(&heat, &plus) - loss(&heat, &minus)) / (2.0 * eps)
                };
                worst = worst.max((num - analytic.data()[idx]).abs() / scale);
            }
            assert!(worst <= 1e-4, "input {which}: relative error {worst}");
        }
    }
}
