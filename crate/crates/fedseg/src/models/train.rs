//! Mini-batch gradient training for full networks and adapters.

use rand::seq::SliceRandom;

use super::lora::LoraAdapter;
use super::{ModelParams, SegNet};
use crate::data::{Image, Mask};
use crate::error::{Error, Result};
use crate::losses::supervised_ce;
use crate::rng::derive_rng;
use crate::tensor::{Tape, Tensor};

/// Update rule for gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer `{other}` (expected sgd or adamw)"
            ))),
        }
    }
}

/// Optimizer state: nothing for SGD, per-parameter moments for AdamW
/// (β1 = 0.9, β2 = 0.999, ε = 1e-8, decoupled weight decay 0.01).
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Optimizer {
        Optimizer { kind, lr, step: 0, moments: Vec::new() }
    }

    /// Apply one update; `grads[i]` pairs with `params[i]` across calls.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f32]>]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        for (w, &d) in p.data.iter_mut().zip(*g) {
                            *w -= self.lr * d;
                        }
                    }
                }
            }
            OptimizerKind::AdamW => {
                const B1: f32 = 0.9;
                const B2: f32 = 0.999;
                const EPS: f32 = 1e-8;
                const WD: f32 = 0.01;
                self.step += 1;
                if self.moments.is_empty() {
                    self.moments =
                        params.iter().map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()])).collect();
                }
                let c1 = 1.0 - B1.powi(self.step as i32);
                let c2 = 1.0 - B2.powi(self.step as i32);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
                    let Some(g) = g else { continue };
                    for i in 0..p.data.len() {
                        m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                        v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                        p.data[i] -= self.lr * (update + WD * p.data[i]);
                    }
                }
            }
        }
    }
}

/// Deterministic per-epoch visit order.
fn epoch_order(n: usize, seed: u64, domain: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, domain, &[epoch as u64]));
    order
}

/// Train every parameter of `net` against ground-truth masks.
/// Returns the updated parameters and the mean loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    net: &SegNet,
    mut params: ModelParams,
    data: &[(&Image, &Mask)],
    epochs: usize,
    batch_size: usize,
    lr: f32,
    opt: OptimizerKind,
    seed: u64,
) -> Result<(ModelParams, Vec<f32>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let mut optimizer = Optimizer::new(opt, lr);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = epoch_order(data.len(), seed, "sup-epoch", epoch);
        let mut total = 0.0f64;
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            let vars = net.insert_params(&mut tape, &params, true);
            let mut loss = None;
            for &i in chunk {
                let logits = net.forward(&mut tape, &vars, data[i].0)?;
                let term = supervised_ce(&mut tape, logits, data[i].1)?;
                loss = Some(match loss {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let loss = tape.mul_scalar(loss.unwrap(), 1.0 / chunk.len() as f32)?;
            tape.backward(loss)?;
            total += tape.value(loss)[0] as f64 * chunk.len() as f64;

            let grads: Vec<Option<&[f32]>> = vars.iter().map(|&v| tape.grad(v)).collect();
            let mut tensors: Vec<&mut Tensor> =
                params.entries.iter_mut().map(|(_, t)| t).collect();
            optimizer.apply(&mut tensors, &grads);
        }
        epoch_losses.push((total / data.len() as f64) as f32);
    }
    Ok((params, epoch_losses))
}

/// Fine-tune only a LoRA adapter over a frozen base network.
/// Returns the trained adapter and the mean loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_lora(
    net: &SegNet,
    base: &ModelParams,
    mut adapter: LoraAdapter,
    data: &[(&Image, &Mask)],
    epochs: usize,
    batch_size: usize,
    lr: f32,
    opt: OptimizerKind,
    seed: u64,
) -> Result<(LoraAdapter, Vec<f32>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let mut optimizer = Optimizer::new(opt, lr);
    let mut dropout_rng = derive_rng(seed, "lora-dropout", &[]);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = epoch_order(data.len(), seed, "lora-epoch", epoch);
        let mut total = 0.0f64;
        for chunk in order.chunks(batch_size) {
            let mut tape = Tape::new();
            let (vars, ab) = adapter.insert_adapted(&mut tape, base, Some(&mut dropout_rng))?;
            let mut loss = None;
            for &i in chunk {
                let logits = net.forward(&mut tape, &vars, data[i].0)?;
                let term = supervised_ce(&mut tape, logits, data[i].1)?;
                loss = Some(match loss {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let loss = tape.mul_scalar(loss.unwrap(), 1.0 / chunk.len() as f32)?;
            tape.backward(loss)?;
            total += tape.value(loss)[0] as f64 * chunk.len() as f64;

            let grads: Vec<Option<&[f32]>> =
                ab.iter().flat_map(|&(a, b)| [tape.grad(a), tape.grad(b)]).collect();
            let mut tensors: Vec<&mut Tensor> = adapter
                .pairs
                .iter_mut()
                .flat_map(|(a, b)| [a, b])
                .collect();
            optimizer.apply(&mut tensors, &grads);
        }
        epoch_losses.push((total / data.len() as f64) as f32);
    }
    Ok((adapter, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Style};
    use crate::metrics;
    use crate::models::lora::TargetSelect;
    use crate::models::SegNetConfig;

    fn toy_net(base: usize) -> SegNet {
        SegNet::new(SegNetConfig {
            base_channels: base,
            depth: 1,
            num_classes: 2,
            input_size: (16, 16),
        })
        .unwrap()
    }

    fn toy_data(n: usize, seed: u64) -> Vec<(Image, Mask)> {
        generate_synthetic(n, 16, Style::Blob, 0.05, seed).unwrap()
    }

    fn as_refs(data: &[(Image, Mask)]) -> Vec<(&Image, &Mask)> {
        data.iter().map(|(i, m)| (i, m)).collect()
    }

    #[test]
    fn single_image_overfits() {
        let net = toy_net(4);
        let data = toy_data(1, 21);
        let (_, losses) = train_supervised(
            &net,
            net.init_params(0),
            &as_refs(&data),
            50,
            1,
            0.2,
            OptimizerKind::Sgd,
            0,
        )
        .unwrap();
        assert!(losses[49] < losses[0] * 0.5, "loss {} -> {}", losses[0], losses[49]);
    }

    #[test]
    fn zero_lr_keeps_params_fixed() {
        let net = toy_net(4);
        let data = toy_data(2, 22);
        let init = net.init_params(1);
        let (after, _) = train_supervised(
            &net,
            init.clone(),
            &as_refs(&data),
            2,
            2,
            0.0,
            OptimizerKind::Sgd,
            0,
        )
        .unwrap();
        for ((_, a), (_, b)) in init.entries.iter().zip(&after.entries) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let net = toy_net(4);
        assert!(matches!(
            train_supervised(&net, net.init_params(0), &[], 1, 1, 0.1, OptimizerKind::Sgd, 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn training_is_reproducible() {
        let net = toy_net(4);
        let data = toy_data(4, 23);
        let run = || {
            train_supervised(
                &net,
                net.init_params(5),
                &as_refs(&data),
                3,
                2,
                0.1,
                OptimizerKind::Sgd,
                9,
            )
            .unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        for ((_, ta), (_, tb)) in a.entries.iter().zip(&b.entries) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn adamw_also_learns() {
        let net = toy_net(4);
        let data = toy_data(2, 24);
        let (_, losses) = train_supervised(
            &net,
            net.init_params(2),
            &as_refs(&data),
            20,
            2,
            0.01,
            OptimizerKind::AdamW,
            1,
        )
        .unwrap();
        assert!(losses[19] < losses[0], "loss {} -> {}", losses[0], losses[19]);
    }

    #[test]
    fn lora_training_moves_only_the_adapter() {
        let net = toy_net(8);
        let data = toy_data(3, 25);
        let base = net.init_params(3);
        let adapter = LoraAdapter::new(&base, &TargetSelect::Auto, 2, 4.0, 0.1, 7).unwrap();
        let (trained, losses) = train_lora(
            &net,
            &base,
            adapter,
            &as_refs(&data),
            8,
            2,
            0.1,
            OptimizerKind::Sgd,
            3,
        )
        .unwrap();
        assert!(losses[7] < losses[0]);
        assert!(trained.pairs.iter().any(|(_, b)| b.data.iter().any(|&v| v != 0.0)));
        // The frozen base is shared by value; verify the merged model
        // differs from the base only in the adapted weights.
        let merged = trained.merged(&base).unwrap();
        for ((name, t), (_, m)) in base.entries.iter().zip(&merged.entries) {
            if trained.targets.contains(name) {
                assert!(t.data != m.data, "{name} unchanged after fine-tune");
            } else {
                assert_eq!(t.data, m.data);
            }
        }
    }

    #[test]
    fn wider_net_segments_no_worse_than_narrow() {
        // The capacity premise behind teacher-guided pseudo-labeling, at
        // the smallest scale that shows it.
        let data = toy_data(24, 26);
        let train: Vec<(&Image, &Mask)> = data[..16].iter().map(|(i, m)| (i, m)).collect();
        let mut mean = [0.0f64; 2];
        for seed in 0..3u64 {
            for (slot, base) in [(0usize, 4usize), (1, 16)] {
                let net = toy_net(base);
                let (params, _) = train_supervised(
                    &net,
                    net.init_params(seed),
                    &train,
                    12,
                    4,
                    0.12,
                    OptimizerKind::Sgd,
                    seed,
                )
                .unwrap();
                for (img, mask) in &data[16..] {
                    let pred = net.predict_mask(&params, img).unwrap();
                    mean[slot] += metrics::dice(&pred, mask, 1).unwrap();
                }
            }
        }
        assert!(
            mean[1] >= mean[0] - 1e-9,
            "wide {} vs narrow {}",
            mean[1] / 24.0,
            mean[0] / 24.0
        );
    }
}
