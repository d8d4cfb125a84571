//! Low-rank adapters for fine-tuning a frozen network.
//!
//! A conv kernel `[kh,kw,cin,cout]` flattens to a `(kh·kw·cin) x cout`
//! matrix, so the adapter update is the usual `W + (α/r)·B·A` with
//! `A: [r, in]`, `B: [out, r]`. B starts at zero, making the adapted
//! network exactly the base network until the first update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{Tape, Tensor, Var};

/// Which layers to adapt.
#[derive(Debug, Clone)]
pub enum TargetSelect {
    /// Every conv weight wide enough for the rank.
    Auto,
    /// Explicit parameter entry names (e.g. `enc0.conv1.weight`).
    Named(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f32,
    pub dropout_p: f32,
    pub targets: Vec<String>,
    /// Per target: (A: [rank, in], B: [out, rank]).
    pub pairs: Vec<(Tensor, Tensor)>,
}

/// (in, out) dimensions of a conv weight viewed as a matrix.
fn matrix_dims(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape.as_slice() {
        [kh, kw, cin, cout] => Some((kh * kw * cin, *cout)),
        _ => None,
    }
}

impl LoraAdapter {
    pub fn new(
        base: &ModelParams,
        select: &TargetSelect,
        rank: usize,
        alpha: f32,
        dropout_p: f32,
        seed: u64,
    ) -> Result<LoraAdapter> {
        if rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout {dropout_p} outside [0, 1)")));
        }
        let targets: Vec<String> = match select {
            TargetSelect::Named(names) => {
                for name in names {
                    let t = base
                        .get(name)
                        .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
                    let (r#in, out) = matrix_dims(t)
                        .ok_or_else(|| Error::UnknownLayer(format!("{name} is not a conv weight")))?;
                    if rank > r#in.min(out) {
                        return Err(Error::RankTooLarge { rank, max: r#in.min(out) });
                    }
                }
                names.clone()
            }
            TargetSelect::Auto => {
                let mut widest = 0;
                let mut names = Vec::new();
                for (name, t) in &base.entries {
                    if let Some((r#in, out)) = matrix_dims(t) {
                        widest = widest.max(r#in.min(out));
                        if rank <= r#in.min(out) {
                            names.push(name.clone());
                        }
                    }
                }
                if names.is_empty() {
                    return Err(Error::RankTooLarge { rank, max: widest });
                }
                names
            }
        };

        let mut rng = derive_rng(seed, "lora-init", &[]);
        let pairs = targets
            .iter()
            .map(|name| {
                let (r#in, out) = matrix_dims(base.get(name).unwrap()).unwrap();
                let a = Tensor::he_uniform(&[rank, r#in], r#in, &mut rng);
                let b = Tensor::zeros(&[out, rank]);
                (a, b)
            })
            .collect();
        Ok(LoraAdapter { rank, alpha, dropout_p, targets, pairs })
    }

    /// Parameter nodes for an adapted forward pass: target weights become
    /// `base + (α/r)·B·A` with only A and B tracked; everything else is a
    /// frozen leaf. Returns the nodes in entry order plus the (A, B) leaf
    /// pairs. `dropout_rng` enables train-time column dropout on A.
    pub fn insert_adapted(
        &self,
        tape: &mut Tape,
        base: &ModelParams,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<Var>, Vec<(Var, Var)>)> {
        let mut vars = Vec::with_capacity(base.entries.len());
        let mut ab = Vec::with_capacity(self.pairs.len());
        for (name, tensor) in &base.entries {
            let Some(t) = self.targets.iter().position(|n| n == name) else {
                vars.push(tape.leaf(tensor, false));
                continue;
            };
            let (a, b) = &self.pairs[t];
            let base_leaf = tape.leaf(tensor, false);
            let a_var = tape.leaf(a, true);
            let b_var = tape.leaf(b, true);
            ab.push((a_var, b_var));

            // Dropout zeroes whole input columns of A (inverted scaling),
            // mirroring dropout on the adapter's input features.
            let a_eff = match dropout_rng.as_deref_mut() {
                Some(rng) if self.dropout_p > 0.0 => {
                    let cols = a.shape[1];
                    let keep = 1.0 / (1.0 - self.dropout_p);
                    let col_mask: Vec<f32> =
                        (0..cols).map(|_| if rng.gen::<f32>() < self.dropout_p { 0.0 } else { keep }).collect();
                    let mask: Vec<f32> = (0..a.numel()).map(|i| col_mask[i % cols]).collect();
                    let mask_var = tape.constant(&a.shape, mask)?;
                    tape.mul(a_var, mask_var)?
                }
                _ => a_var,
            };

            let ba = tape.matmul(b_var, a_eff)?; // [out, in]
            let scaled = tape.mul_scalar(ba, self.alpha / self.rank as f32)?;
            let delta = tape.transpose2d(scaled)?; // [in, out] = flat kernel
            let delta = tape.reshape(delta, &tensor.shape)?;
            vars.push(tape.add(base_leaf, delta)?);
        }
        Ok((vars, ab))
    }

    /// Fold the adapter into plain parameters (for inference/checkpoints).
    pub fn merged(&self, base: &ModelParams) -> Result<ModelParams> {
        let mut out = base.clone();
        for (t, name) in self.targets.iter().enumerate() {
            let entry = out
                .entries
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            let (a, b) = &self.pairs[t];
            let (r#in, cout) = matrix_dims(&entry.1).unwrap();
            let scale = self.alpha / self.rank as f32;
            // Kernel data is row-major [in, out]; add (α/r)·(B·A)^T.
            for i in 0..r#in {
                for o in 0..cout {
                    let mut acc = 0.0f32;
                    for k in 0..self.rank {
                        acc += b.data[o * self.rank + k] * a.data[k * r#in + i];
                    }
                    entry.1.data[i * cout + o] += scale * acc;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agreement::Source;
    use crate::data::Image;
    use crate::models::{SegNet, SegNetConfig};

    fn net() -> SegNet {
        SegNet::new(SegNetConfig {
            base_channels: 4,
            depth: 1,
            num_classes: 2,
            input_size: (8, 8),
        })
        .unwrap()
    }

    fn test_image() -> Image {
        Image { h: 8, w: 8, pixels: (0..64).map(|i| (i % 9) as f32 / 8.0).collect() }
    }

    #[test]
    fn zero_init_adapter_is_the_identity() {
        let net = net();
        let base = net.init_params(2);
        let adapter = LoraAdapter::new(&base, &TargetSelect::Auto, 2, 4.0, 0.0, 9).unwrap();

        let mut tape = Tape::new();
        let plain = net.insert_params(&mut tape, &base, false);
        let base_logits = net.forward(&mut tape, &plain, &test_image()).unwrap();
        let (adapted, _) = adapter.insert_adapted(&mut tape, &base, None).unwrap();
        let lora_logits = net.forward(&mut tape, &adapted, &test_image()).unwrap();
        assert_eq!(tape.value(base_logits), tape.value(lora_logits));

        let merged = adapter.merged(&base).unwrap();
        for ((_, t), (_, m)) in base.entries.iter().zip(&merged.entries) {
            assert_eq!(t.data, m.data);
        }
    }

    #[test]
    fn gradients_reach_only_the_adapter() {
        let net = net();
        let base = net.init_params(3);
        let adapter = LoraAdapter::new(&base, &TargetSelect::Auto, 2, 4.0, 0.0, 9).unwrap();
        let mut tape = Tape::new();
        let (vars, ab) = adapter.insert_adapted(&mut tape, &base, None).unwrap();
        let logits = net.forward(&mut tape, &vars, &test_image()).unwrap();
        let sq = tape.mul(logits, logits).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss).unwrap();

        for &(a, b) in &ab {
            assert!(tape.grad(a).is_some());
            // B is zero, so dL/dA = B^T·(…) = 0, but dL/dB is live.
            assert!(tape.grad(b).unwrap().iter().any(|&g| g != 0.0));
        }
        // Non-target entries (here: all biases) are frozen base leaves.
        let mut frozen_checked = 0;
        for (i, (name, _)) in base.entries.iter().enumerate() {
            if !adapter.targets.contains(name) {
                assert!(tape.grad(vars[i]).is_none(), "frozen layer {name} got a gradient");
                frozen_checked += 1;
            }
        }
        assert!(frozen_checked > 0);
    }

    #[test]
    fn trained_low_rank_delta_recovers_a_full_rank_target() {
        // With r = min(in, out) the adapter can represent any delta; fit
        // B·A to a known offset by gradient descent and compare.
        let mut rng = derive_rng(77, "lora-fit", &[]);
        let w_base = Tensor::he_uniform(&[1, 1, 4, 4], 4, &mut rng);
        let w_target = Tensor::he_uniform(&[1, 1, 4, 4], 4, &mut rng);
        let base = ModelParams {
            entries: vec![("head.weight".into(), w_base.clone())],
            arch_fingerprint: 0,
        };
        let mut adapter =
            LoraAdapter::new(&base, &TargetSelect::Named(vec!["head.weight".into()]), 4, 4.0, 0.0, 5)
                .unwrap();

        for _ in 0..400 {
            let mut tape = Tape::new();
            let (vars, ab) = adapter.insert_adapted(&mut tape, &base, None).unwrap();
            let target = tape.leaf(&w_target, false);
            let target_flat = tape.reshape(target, &[4, 4]).unwrap();
            let eff = tape.reshape(vars[0], &[4, 4]).unwrap();
            let neg = tape.mul_scalar(target_flat, -1.0).unwrap();
            let diff = tape.add(eff, neg).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let loss = tape.mean(sq).unwrap();
            tape.backward(loss).unwrap();
            let (a_var, b_var) = ab[0];
            let (a, b) = &mut adapter.pairs[0];
            for (p, g) in a.data.iter_mut().zip(tape.grad(a_var).unwrap()) {
                *p -= 0.5 * g;
            }
            for (p, g) in b.data.iter_mut().zip(tape.grad(b_var).unwrap()) {
                *p -= 0.5 * g;
            }
        }
        let merged = adapter.merged(&base).unwrap();
        let eff = &merged.get("head.weight").unwrap().data;
        for (e, t) in eff.iter().zip(&w_target.data) {
            assert!((e - t).abs() < 1e-3, "{e} vs {t}");
        }
    }

    #[test]
    fn rank_and_name_validation() {
        let base = net().init_params(0);
        assert!(matches!(
            LoraAdapter::new(&base, &TargetSelect::Named(vec!["nope.weight".into()]), 2, 4.0, 0.0, 0),
            Err(Error::UnknownLayer(_))
        ));
        // head.weight is [1,1,4,2]: min(in, out) = 2.
        assert!(matches!(
            LoraAdapter::new(&base, &TargetSelect::Named(vec!["head.weight".into()]), 3, 4.0, 0.0, 0),
            Err(Error::RankTooLarge { rank: 3, max: 2 })
        ));
        // Auto skips too-narrow layers instead of failing.
        let auto = LoraAdapter::new(&base, &TargetSelect::Auto, 3, 4.0, 0.0, 0).unwrap();
        assert!(!auto.targets.contains(&"head.weight".to_string()));
        // Rank-16 / alpha-32 / dropout-0.1 is accepted when layers are wide
        // enough (base 16, depth 1 has several 16+-wide kernels).
        let wide = SegNet::new(SegNetConfig {
            base_channels: 16,
            depth: 1,
            num_classes: 2,
            input_size: (8, 8),
        })
        .unwrap()
        .init_params(0);
        let rank16 = LoraAdapter::new(&wide, &TargetSelect::Auto, 16, 32.0, 0.1, 0).unwrap();
        assert!(!rank16.targets.is_empty());
    }

    #[test]
    fn dropout_zeroes_input_rows_of_the_delta() {
        let base = net().init_params(1);
        let target = "enc0.conv1.weight"; // [3,3,1,4]: 9 input dims, 4 outputs
        let mut adapter =
            LoraAdapter::new(&base, &TargetSelect::Named(vec![target.into()]), 2, 4.0, 0.5, 3)
                .unwrap();
        adapter.pairs[0].1.data.fill(1.0); // nonzero B so the delta is visible

        let delta_of = |dropout_rng: Option<&mut ChaCha8Rng>| -> Vec<f32> {
            let mut tape = Tape::new();
            let (vars, _) = adapter.insert_adapted(&mut tape, &base, dropout_rng).unwrap();
            let idx = base.entries.iter().position(|(n, _)| n == target).unwrap();
            let w = base.get(target).unwrap();
            tape.value(vars[idx]).iter().zip(&w.data).map(|(e, b)| e - b).collect()
        };
        let plain = delta_of(None);
        let mut rng = derive_rng(11, "drop", &[]);
        let dropped = delta_of(Some(&mut rng));

        // Each input dimension's 4-wide row is either fully dropped or
        // scaled by 1/(1-p) = 2 relative to the no-dropout delta.
        let (mut zeros, mut scaled) = (0, 0);
        for row in 0..9 {
            let d = &dropped[row * 4..(row + 1) * 4];
            let p = &plain[row * 4..(row + 1) * 4];
            if d.iter().all(|&v| v == 0.0) {
                zeros += 1;
            } else {
                assert!(d.iter().zip(p).all(|(a, b)| (a - 2.0 * b).abs() < 1e-5));
                scaled += 1;
            }
        }
        assert!(zeros > 0 && scaled > 0, "{zeros} dropped / {scaled} kept");
    }
}
