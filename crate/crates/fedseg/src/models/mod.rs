//! Capacity-parameterized encoder–decoder segmentation nets.
//!
//! One architecture family covers the teacher, the server's global model,
//! and every client: conv3x3–relu pairs per stage, 2x average-pool
//! downsampling, nearest-neighbor upsampling with channel-concat skips,
//! and a 1x1 head producing per-pixel logits. Capacity is the
//! (base_channels, depth) pair, which is all that separates a "large"
//! teacher from a "small" client at this scale.

pub mod checkpoint;
pub mod lora;
pub mod train;

use crate::agreement::{ProbMap, Source};
use crate::data::{Image, Mask};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, fnv1a64};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture description; two models can exchange parameters only if
/// their fingerprints match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub input_size: (usize, usize),
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.depth == 0 || self.depth > 4 {
            return Err(Error::InvalidConfig(format!(
                "depth {} outside the supported 1..=4,",
                self.depth
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::InvalidConfig(format!(
                "num_classes {} outside 2..=255",
                self.num_classes
            )));
        }
        let (h, w) = self.input_size;
        let stride = 1usize << self.depth;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} not divisible by 2^depth = {stride}"
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        let text = format!(
            "segnet:b={},d={},n={},h={},w={}",
            self.base_channels, self.depth, self.num_classes, self.input_size.0, self.input_size.1
        );
        fnv1a64(text.as_bytes())
    }

    /// Recover the config from checkpointed parameters plus the intended
    /// input size, cross-checked against the stored fingerprint.
    pub fn infer(params: &ModelParams, input_size: (usize, usize)) -> Result<SegNetConfig> {
        let depth = (0..)
            .take_while(|i| params.get(&format!("enc{i}.conv1.weight")).is_some())
            .count();
        let base = params
            .get("enc0.conv1.weight")
            .map(|t| t.shape[3])
            .ok_or_else(|| Error::MalformedCheckpoint("missing enc0.conv1.weight".into()))?;
        let num_classes = params
            .get("head.weight")
            .map(|t| t.shape[3])
            .ok_or_else(|| Error::MalformedCheckpoint("missing head.weight".into()))?;
        let cfg = SegNetConfig { base_channels: base, depth, num_classes, input_size };
        cfg.validate()?;
        if cfg.fingerprint() != params.arch_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: params.arch_fingerprint,
                got: cfg.fingerprint(),
            });
        }
        Ok(cfg)
    }
}

/// Named, ordered parameter tensors for one model instance.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub entries: Vec<(String, Tensor)>,
    pub arch_fingerprint: u64,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

struct ConvSpec {
    name: String,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
}

/// A built network: validated config plus the layer plan shared by
/// initialization and the forward pass.
#[derive(Debug, Clone)]
pub struct SegNet {
    pub cfg: SegNetConfig,
}

impl SegNet {
    pub fn new(cfg: SegNetConfig) -> Result<SegNet> {
        cfg.validate()?;
        Ok(SegNet { cfg })
    }

    fn ch(&self, level: usize) -> usize {
        self.cfg.base_channels << level
    }

    /// Every conv layer in parameter (and forward) order.
    fn conv_layers(&self) -> Vec<ConvSpec> {
        let d = self.cfg.depth;
        let mut layers = Vec::new();
        let mut push = |name: String, kh: usize, cin: usize, cout: usize| {
            layers.push(ConvSpec { name, kh, kw: kh, cin, cout });
        };
        let mut prev = 1;
        for i in 0..d {
            push(format!("enc{i}.conv1"), 3, prev, self.ch(i));
            push(format!("enc{i}.conv2"), 3, self.ch(i), self.ch(i));
            prev = self.ch(i);
        }
        push("bottleneck.conv1".into(), 3, self.ch(d - 1), self.ch(d));
        push("bottleneck.conv2".into(), 3, self.ch(d), self.ch(d));
        for i in (0..d).rev() {
            push(format!("dec{i}.conv1"), 3, self.ch(i + 1) + self.ch(i), self.ch(i));
            push(format!("dec{i}.conv2"), 3, self.ch(i), self.ch(i));
        }
        push("head".into(), 1, self.ch(0), self.cfg.num_classes);
        layers
    }

    /// Seeded parameters: He-uniform conv weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = derive_rng(seed, "segnet-init", &[]);
        let mut entries = Vec::new();
        for conv in self.conv_layers() {
            let shape = [conv.kh, conv.kw, conv.cin, conv.cout];
            let fan_in = conv.kh * conv.kw * conv.cin;
            entries.push((
                format!("{}.weight", conv.name),
                Tensor::he_uniform(&shape, fan_in, &mut rng),
            ));
            entries.push((format!("{}.bias", conv.name), Tensor::zeros(&[conv.cout])));
        }
        ModelParams { entries, arch_fingerprint: self.cfg.fingerprint() }
    }

    /// Put every parameter on the tape, in entry order.
    pub fn insert_params(&self, tape: &mut Tape, params: &ModelParams, tracked: bool) -> Vec<Var> {
        params.entries.iter().map(|(_, t)| tape.leaf(t, tracked)).collect()
    }

    /// Run the network over one image; `vars` must be the parameter nodes
    /// in entry order (weight/bias alternating). Returns `[H,W,N]` logits.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], image: &Image) -> Result<Var> {
        let (h, w) = self.cfg.input_size;
        if image.h != h || image.w != w {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} for a {}x{} network",
                image.h, image.w, h, w
            )));
        }
        let expected = self.conv_layers().len() * 2;
        if vars.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter nodes, expected {expected}",
                vars.len()
            )));
        }
        let d = self.cfg.depth;
        let mut k = 0; // conv cursor: vars[2k] = weight, vars[2k+1] = bias
        let conv_relu = |tape: &mut Tape, x: Var, k: usize| -> Result<Var> {
            let y = tape.conv2d_same(x, vars[2 * k])?;
            let y = tape.bias_add(y, vars[2 * k + 1])?;
            tape.relu(y)
        };

        let mut x = tape.constant(&[h, w, 1], image.pixels.clone())?;
        let mut skips = Vec::with_capacity(d);
        for _ in 0..d {
            x = conv_relu(tape, x, k)?;
            x = conv_relu(tape, x, k + 1)?;
            k += 2;
            skips.push(x);
            x = tape.downsample2x_avg(x)?;
        }
        x = conv_relu(tape, x, k)?;
        x = conv_relu(tape, x, k + 1)?;
        k += 2;
        for skip in skips.into_iter().rev() {
            x = tape.upsample2x_nearest(x)?;
            x = tape.concat_channels(x, skip)?;
            x = conv_relu(tape, x, k)?;
            x = conv_relu(tape, x, k + 1)?;
            k += 2;
        }
        let logits = tape.conv2d_same(x, vars[2 * k])?;
        tape.bias_add(logits, vars[2 * k + 1])
    }

    /// Inference-only softmax probabilities for one image.
    pub fn prob_map(&self, params: &ModelParams, image: &Image, source: Source) -> Result<ProbMap> {
        let mut tape = Tape::new();
        let vars = self.insert_params(&mut tape, params, false);
        let logits = self.forward(&mut tape, &vars, image)?;
        let probs = tape.softmax_channels(logits)?;
        ProbMap::from_softmax_var(&tape, probs, source)
    }

    /// Inference-only argmax segmentation for one image.
    pub fn predict_mask(&self, params: &ModelParams, image: &Image) -> Result<Mask> {
        let map = self.prob_map(params, image, Source::Client)?;
        Ok(Mask { h: map.h, w: map.w, labels: crate::agreement::hard_labels(&map) })
    }
}
