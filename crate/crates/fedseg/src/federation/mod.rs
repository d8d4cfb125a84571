//! Server/client orchestration: teacher and client pretraining on the
//! public set, per-round confidence-weighted self-training on private
//! unlabeled data, and the two aggregation regimes — data-weighted
//! parameter averaging for identical architectures, Dice-weighted
//! soft-label condensation plus a KL fusion step when architectures
//! differ.

pub mod report;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::agreement::{agreement_rate, export_agreement_image, fuse, ProbMap, PseudoLabelSet, Source};
use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic, partition, Image, Mask, Sample, Style};
use crate::error::{Error, Result};
use crate::losses::{kl_fusion_loss, weighted_ce};
use crate::metrics::{self, MetricResult};
use crate::models::lora::{LoraAdapter, TargetSelect};
use crate::models::train::{train_lora, train_supervised, Optimizer, OptimizerKind};
use crate::models::{ModelParams, SegNet};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{Tape, Tensor};

pub use report::{ClientRow, RoundReport};

/// Whether every client shares one architecture (parameter averaging)
/// or architectures differ (soft-label condensation and fusion).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Homogeneous,
    Heterogeneous,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "homogeneous" => Ok(Mode::Homogeneous),
            "heterogeneous" => Ok(Mode::Heterogeneous),
            other => Err(Error::InvalidConfig(format!(
                "mode `{other}` (expected homogeneous or heterogeneous)"
            ))),
        }
    }
}

/// Which predictions drive the per-pixel training targets. `Agreement`
/// is the full mechanism; the other two are its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoPolicy {
    /// Fused teacher/client labels with consensus-aware weights.
    Agreement,
    /// The client supervises itself; the teacher is ignored.
    ClientOnly,
    /// Teacher argmax and confidence, no client input.
    TeacherOnly,
}

impl PseudoPolicy {
    pub fn parse(s: &str) -> Result<PseudoPolicy> {
        match s {
            "agreement" => Ok(PseudoPolicy::Agreement),
            "client-only" => Ok(PseudoPolicy::ClientOnly),
            "teacher-only" => Ok(PseudoPolicy::TeacherOnly),
            other => Err(Error::InvalidConfig(format!(
                "pseudo_policy `{other}` (expected agreement, client-only, or teacher-only)"
            ))),
        }
    }
}

/// One participant: its private unlabeled images, held-out labeled
/// splits for evaluation only, and the teacher predictions cached for
/// those images at initialization.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: String,
    pub index: usize,
    pub net: SegNet,
    pub params: ModelParams,
    pub unlabeled: Vec<Image>,
    pub cached_teacher_maps: Vec<ProbMap>,
    /// Latest training targets per unlabeled image; regenerated from the
    /// current model at the start of every local round.
    pub pseudo: Vec<PseudoLabelSet>,
    pub val: Vec<(Image, Mask)>,
    pub test: Vec<(Image, Mask)>,
    pub n_samples: usize,
}

/// Server-side assets: the LoRA-tuned teacher, the public-set-trained
/// global model, and the shared labeled public data.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub teacher_net: SegNet,
    pub teacher_base: ModelParams,
    pub teacher_adapter: LoraAdapter,
    /// Base with the adapter folded in; what clients receive.
    pub teacher_params: ModelParams,
    pub global_net: SegNet,
    pub global_params: ModelParams,
    pub public_data: Vec<(Image, Mask)>,
    pub mode: Mode,
    pub round: usize,
}

/// Everything a run needs: configuration, server, clients.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

/// Per-client numbers gathered during one round of local training.
#[derive(Debug, Clone)]
pub struct RoundStats {
    pub mean_lambda: f64,
    pub agreement_rate: f64,
    /// Mean per-image loss of each local epoch; the last entry is what
    /// reports show as `unsup_loss`.
    pub epoch_losses: Vec<f64>,
}

/// Copyable slice of the config that a client round needs.
#[derive(Debug, Clone, Copy)]
pub struct RoundHyper {
    pub policy: PseudoPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub opt: OptimizerKind,
    pub seed: u64,
}

impl RoundHyper {
    pub fn from_config(cfg: &ExperimentConfig) -> RoundHyper {
        RoundHyper {
            policy: cfg.pseudo_policy,
            epochs: cfg.epochs_per_round,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            opt: cfg.optimizer,
            seed: cfg.seed,
        }
    }
}

/// Build the experiment: generate and partition the synthetic pool,
/// pretrain the teacher (then LoRA-tune it), train the global model,
/// pretrain every client on the public set, and cache teacher
/// predictions for each client's unlabeled images.
pub fn initialize(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;

    // Oversample the pool by half of the client demand so the skewed
    // per-style draws never exhaust a pool.
    let client_total: usize = cfg.client_counts.iter().sum();
    let pool_total = cfg.public_count + client_total + client_total.div_ceil(2);
    let per_style = pool_total.div_ceil(Style::ALL.len());
    let mut samples = Vec::with_capacity(per_style * Style::ALL.len());
    for (si, &style) in Style::ALL.iter().enumerate() {
        let pairs = generate_synthetic(
            per_style,
            cfg.image_size,
            style,
            cfg.noise_sd,
            derive_seed(cfg.seed, "style-pool", &[si as u64]),
        )?;
        samples.extend(pairs.into_iter().map(|(image, mask)| Sample { image, mask, style }));
    }
    let part = partition(&samples, &cfg.partition_spec(), derive_seed(cfg.seed, "partition", &[]))?;
    if part.public.is_empty() {
        return Err(Error::EmptyPublicSet);
    }
    let public_data: Vec<(Image, Mask)> = part
        .public
        .iter()
        .map(|&i| (samples[i].image.clone(), samples[i].mask.clone()))
        .collect();
    let public_refs: Vec<(&Image, &Mask)> = public_data.iter().map(|(i, m)| (i, m)).collect();

    let teacher_net = SegNet::new(cfg.teacher_net())?;
    let init = teacher_net.init_params(derive_seed(cfg.seed, "teacher-init", &[]));
    let (teacher_base, _) = train_supervised(
        &teacher_net,
        init,
        &public_refs,
        cfg.teacher_pretrain_epochs,
        cfg.batch_size,
        cfg.lr,
        cfg.optimizer,
        derive_seed(cfg.seed, "teacher-pretrain", &[]),
    )?;
    let adapter = LoraAdapter::new(
        &teacher_base,
        &TargetSelect::Auto,
        cfg.lora_rank,
        cfg.lora_alpha,
        cfg.lora_dropout,
        derive_seed(cfg.seed, "teacher-adapter", &[]),
    )?;
    let (teacher_adapter, _) = train_lora(
        &teacher_net,
        &teacher_base,
        adapter,
        &public_refs,
        cfg.teacher_finetune_epochs,
        cfg.batch_size,
        cfg.lr,
        cfg.optimizer,
        derive_seed(cfg.seed, "teacher-finetune", &[]),
    )?;
    let teacher_params = teacher_adapter.merged(&teacher_base)?;

    let client_cfgs = cfg.client_nets();
    let global_net = SegNet::new(client_cfgs[0])?;
    let global_init = global_net.init_params(derive_seed(cfg.seed, "global-init", &[]));
    let (global_params, _) = train_supervised(
        &global_net,
        global_init,
        &public_refs,
        cfg.global_epochs,
        cfg.batch_size,
        cfg.lr,
        cfg.optimizer,
        derive_seed(cfg.seed, "global-train", &[]),
    )?;

    // Clients with the same architecture get the same derived seed, so
    // their pretraining coincides; run it once per fingerprint.
    let mut pretrained: BTreeMap<u64, ModelParams> = BTreeMap::new();
    let mut clients = Vec::with_capacity(client_cfgs.len());
    for (ci, (net_cfg, split)) in client_cfgs.iter().zip(&part.clients).enumerate() {
        let net = SegNet::new(*net_cfg)?;
        let fp = net.cfg.fingerprint();
        let params = match pretrained.get(&fp) {
            Some(p) => p.clone(),
            None => {
                let init = net.init_params(derive_seed(cfg.seed, "client-init", &[fp]));
                let (p, _) = train_supervised(
                    &net,
                    init,
                    &public_refs,
                    cfg.client_pretrain_epochs,
                    cfg.batch_size,
                    cfg.lr,
                    cfg.optimizer,
                    derive_seed(cfg.seed, "client-pretrain", &[fp]),
                )?;
                pretrained.insert(fp, p.clone());
                p
            }
        };
        // Evaluation pairs go through an 8-bit round trip so that metrics
        // computed in-run match metrics recomputed from exported PGMs
        // bit for bit.
        let pick = |idx: &[usize]| -> Vec<(Image, Mask)> {
            idx.iter()
                .map(|&i| {
                    let img = &samples[i].image;
                    (Image::from_bytes(img.w, img.h, &img.to_bytes()), samples[i].mask.clone())
                })
                .collect()
        };
        let unlabeled: Vec<Image> = split.train.iter().map(|&i| samples[i].image.clone()).collect();
        let n_samples = unlabeled.len();
        clients.push(ClientState {
            id: format!("C{}", ci + 1),
            index: ci,
            net,
            params,
            unlabeled,
            cached_teacher_maps: Vec::new(),
            pseudo: Vec::new(),
            val: pick(&split.val),
            test: pick(&split.test),
            n_samples,
        });
    }

    let mut exp = Experiment {
        cfg: cfg.clone(),
        server: ServerState {
            teacher_net,
            teacher_base,
            teacher_adapter,
            teacher_params,
            global_net,
            global_params,
            public_data,
            mode: cfg.mode,
            round: 0,
        },
        clients,
    };
    let (server, clients) = (&exp.server, &mut exp.clients);
    clients.par_iter_mut().try_for_each(|c| -> Result<()> {
        c.cached_teacher_maps = c
            .unlabeled
            .iter()
            .map(|img| server.teacher_net.prob_map(&server.teacher_params, img, Source::Teacher))
            .collect::<Result<_>>()?;
        c.pseudo = refresh_pseudo(c, cfg.pseudo_policy)?;
        Ok(())
    })?;
    Ok(exp)
}

/// Regenerates every image's training targets from the client's current
/// parameters and the cached teacher maps, per policy.
fn refresh_pseudo(c: &ClientState, policy: PseudoPolicy) -> Result<Vec<PseudoLabelSet>> {
    c.unlabeled
        .iter()
        .zip(&c.cached_teacher_maps)
        .map(|(img, tm)| match policy {
            PseudoPolicy::TeacherOnly => Ok(PseudoLabelSet::from_single(tm)),
            PseudoPolicy::ClientOnly => {
                let m = c.net.prob_map(&c.params, img, Source::Client)?;
                Ok(PseudoLabelSet::from_single(&m))
            }
            PseudoPolicy::Agreement => {
                let m = c.net.prob_map(&c.params, img, Source::Client)?;
                fuse(tm, &m)
            }
        })
        .collect()
}

impl Experiment {
    /// Same initialized state under a different pseudo-label policy;
    /// lets ablations share one (expensive) initialization.
    pub fn with_policy(&self, policy: PseudoPolicy) -> Result<Experiment> {
        let mut e = self.clone();
        e.cfg.pseudo_policy = policy;
        for c in &mut e.clients {
            c.pseudo = refresh_pseudo(c, policy)?;
        }
        Ok(e)
    }
}

/// One round of local self-training. First every image's pixel targets
/// are regenerated from the current model (and the cached teacher maps,
/// per policy); the model then descends the confidence-weighted loss
/// against those fixed targets for `epochs` passes. Returns stats over
/// the refreshed targets.
pub fn client_round(c: &mut ClientState, hp: &RoundHyper, round: usize) -> Result<RoundStats> {
    let n = c.unlabeled.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if c.cached_teacher_maps.len() != n || c.pseudo.len() != n {
        return Err(Error::NotInitialized);
    }
    if hp.epochs == 0 {
        return Err(Error::InvalidConfig("epochs_per_round must be >= 1".into()));
    }
    c.pseudo = refresh_pseudo(c, hp.policy)?;
    let batch = hp.batch_size.max(1);
    let mut optimizer = Optimizer::new(hp.opt, hp.lr);
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut derive_rng(
                hp.seed,
                "round-order",
                &[round as u64, c.index as u64, epoch as u64],
            ));
        }
        let mut total = 0.0f64;
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let vars = c.net.insert_params(&mut tape, &c.params, true);
            let mut loss = None;
            for &i in chunk {
                let logits = c.net.forward(&mut tape, &vars, &c.unlabeled[i])?;
                let term = weighted_ce(&mut tape, logits, &c.pseudo[i])?;
                loss = Some(match loss {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let loss = tape.mul_scalar(loss.unwrap(), 1.0 / chunk.len() as f32)?;
            tape.backward(loss)?;
            total += tape.value(loss)[0] as f64 * chunk.len() as f64;
            let grads: Vec<Option<&[f32]>> = vars.iter().map(|&v| tape.grad(v)).collect();
            let mut tensors: Vec<&mut Tensor> = c.params.entries.iter_mut().map(|(_, t)| t).collect();
            optimizer.apply(&mut tensors, &grads);
        }
        epoch_losses.push(total / n as f64);
    }
    let mut mean_lambda = 0.0f64;
    let mut agree = 0.0f64;
    for pl in &c.pseudo {
        let npx = pl.weights.len() as f64;
        mean_lambda += pl.weights.iter().map(|&w| w as f64).sum::<f64>() / npx;
        agree += agreement_rate(pl);
    }
    Ok(RoundStats {
        mean_lambda: mean_lambda / n as f64,
        agreement_rate: agree / n as f64,
        epoch_losses,
    })
}

/// Data-weighted parameter average: each value becomes
/// `Σ_c (n_c/Σn)·θ_c`, accumulated in f64 in client order.
pub fn fedavg(params: &[&ModelParams], weights: &[u64]) -> Result<ModelParams> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter sets with {} weights",
            params.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w == 0) {
        return Err(Error::ZeroWeight);
    }
    let fp = params[0].arch_fingerprint;
    for p in params {
        if p.arch_fingerprint != fp {
            return Err(Error::FingerprintMismatch { expected: fp, got: p.arch_fingerprint });
        }
    }
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut out = params[0].clone();
    for (e, (name, tensor)) in out.entries.iter_mut().enumerate() {
        let mut acc = vec![0.0f64; tensor.data.len()];
        for (p, &w) in params.iter().zip(weights) {
            let (other_name, other) = &p.entries[e];
            if other_name != name || other.data.len() != acc.len() {
                return Err(Error::ShapeMismatch(format!("entry {e} differs across clients")));
            }
            let wf = w as f64;
            for (a, &v) in acc.iter_mut().zip(&other.data) {
                *a += wf * v as f64;
            }
        }
        for (dst, &a) in tensor.data.iter_mut().zip(&acc) {
            *dst = (a / total) as f32;
        }
        tensor.grad = None;
    }
    Ok(out)
}

/// Combine one image's client probability maps into a server soft
/// label: weighted per-pixel average, renormalized. All-zero weights
/// fall back to a uniform average.
pub fn condense(maps: &[&ProbMap], weights: &[f64]) -> Result<ProbMap> {
    if maps.is_empty() || maps.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps with {} weights",
            maps.len(),
            weights.len()
        )));
    }
    let (h, w, n) = (maps[0].h, maps[0].w, maps[0].n);
    for m in maps {
        if m.h != h || m.w != w || m.n != n {
            return Err(Error::ShapeMismatch("probability map dims differ across clients".into()));
        }
    }
    if weights.iter().any(|&wt| !wt.is_finite() || wt < 0.0) {
        return Err(Error::InvalidProbability("negative or non-finite Dice weight".into()));
    }
    let uniform = weights.iter().sum::<f64>() <= 0.0;
    let mut acc = vec![0.0f64; h * w * n];
    for (m, &wt) in maps.iter().zip(weights) {
        let wt = if uniform { 1.0 } else { wt };
        if wt == 0.0 {
            continue;
        }
        for (a, &p) in acc.iter_mut().zip(&m.probs) {
            *a += wt * p as f64;
        }
    }
    let mut probs = vec![0.0f32; h * w * n];
    for px in 0..h * w {
        let row = &acc[px * n..(px + 1) * n];
        let sum: f64 = row.iter().sum();
        for k in 0..n {
            probs[px * n + k] = (row[k] / sum) as f32;
        }
    }
    ProbMap::new(h, w, n, probs, Source::Teacher)
}

/// Mean foreground Dice of `pred` against `gt` (classes 1..N), used to
/// weight a client's vote on a public image.
fn foreground_dice(pred: &Mask, gt: &Mask, num_classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    for class in 1..num_classes {
        sum += metrics::dice(pred, gt, class as u8)?;
    }
    Ok(sum / (num_classes - 1) as f64)
}

/// Server-side condensation: for every public image, ensemble the
/// clients' probability maps weighted by their Dice against the public
/// ground truth on that image.
pub fn regularity_condensation(
    clients: &[ClientState],
    public_data: &[(Image, Mask)],
    num_classes: usize,
) -> Result<Vec<ProbMap>> {
    if clients.is_empty() {
        return Err(Error::EmptyDataset);
    }
    public_data
        .par_iter()
        .map(|(img, gt)| {
            let mut maps = Vec::with_capacity(clients.len());
            let mut weights = Vec::with_capacity(clients.len());
            for c in clients {
                let map = c.net.prob_map(&c.params, img, Source::Client)?;
                let pred = map_argmax(&map);
                weights.push(foreground_dice(&pred, gt, num_classes)?);
                maps.push(map);
            }
            let refs: Vec<&ProbMap> = maps.iter().collect();
            condense(&refs, &weights)
        })
        .collect()
}

fn map_argmax(map: &ProbMap) -> Mask {
    Mask { h: map.h, w: map.w, labels: crate::agreement::hard_labels(map) }
}

/// Client-side fusion: gradient steps on `β · KL(server ‖ client)` over
/// the public images. `β = 0` is an exact no-op.
#[allow(clippy::too_many_arguments)]
pub fn regularity_fusion(
    c: &mut ClientState,
    public_data: &[(Image, Mask)],
    soft_labels: &[ProbMap],
    beta: f32,
    epochs: usize,
    batch_size: usize,
    lr: f32,
    opt: OptimizerKind,
    seed: u64,
    round: usize,
) -> Result<()> {
    if soft_labels.len() != public_data.len() {
        return Err(Error::MissingSoftLabels);
    }
    if beta == 0.0 || epochs == 0 || public_data.is_empty() {
        // A zero objective must leave parameters untouched; skipping also
        // avoids AdamW's decoupled weight decay acting on a constant loss.
        return Ok(());
    }
    let batch = batch_size.max(1);
    let mut optimizer = Optimizer::new(opt, lr);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..public_data.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut derive_rng(
                seed,
                "fusion-order",
                &[round as u64, c.index as u64, epoch as u64],
            ));
        }
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let vars = c.net.insert_params(&mut tape, &c.params, true);
            let mut loss = None;
            for &i in chunk {
                let logits = c.net.forward(&mut tape, &vars, &public_data[i].0)?;
                let probs = tape.softmax_channels(logits)?;
                let term = kl_fusion_loss(&mut tape, probs, &soft_labels[i])?;
                loss = Some(match loss {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let loss = tape.mul_scalar(loss.unwrap(), beta / chunk.len() as f32)?;
            tape.backward(loss)?;
            let grads: Vec<Option<&[f32]>> = vars.iter().map(|&v| tape.grad(v)).collect();
            let mut tensors: Vec<&mut Tensor> = c.params.entries.iter_mut().map(|(_, t)| t).collect();
            optimizer.apply(&mut tensors, &grads);
        }
    }
    Ok(())
}

/// Mean metrics of a model over labeled pairs.
pub fn evaluate_model(
    net: &SegNet,
    params: &ModelParams,
    pairs: &[(Image, Mask)],
    num_classes: usize,
) -> Result<MetricResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut dice = 0.0;
    let mut hd95 = 0.0;
    for (img, gt) in pairs {
        let pred = net.predict_mask(params, img)?;
        let m = metrics::evaluate(&pred, gt, num_classes)?;
        dice += m.dice;
        hd95 += m.hd95;
    }
    let n = pairs.len() as f64;
    Ok(MetricResult { dice: dice / n, hd95: hd95 / n })
}

/// Mean KL(soft ‖ client) over the public images — the quantity the
/// fusion step descends; exposed for inspection and tests.
pub fn mean_public_kl(
    c: &ClientState,
    public_data: &[(Image, Mask)],
    soft_labels: &[ProbMap],
) -> Result<f64> {
    if soft_labels.len() != public_data.len() {
        return Err(Error::MissingSoftLabels);
    }
    let mut total = 0.0f64;
    for ((img, _), soft) in public_data.iter().zip(soft_labels) {
        let mut tape = Tape::new();
        let vars = c.net.insert_params(&mut tape, &c.params, false);
        let logits = c.net.forward(&mut tape, &vars, img)?;
        let probs = tape.softmax_channels(logits)?;
        let kl = kl_fusion_loss(&mut tape, probs, soft)?;
        total += tape.value(kl)[0] as f64;
    }
    Ok(total / public_data.len() as f64)
}

/// Execute `rounds` rounds: parallel client training, an aggregation
/// barrier (parameter averaging or condensation+fusion), post-
/// aggregation evaluation on each client's test split, and optional
/// agreement-mask snapshots under `artifacts/agreement/`.
pub fn run_rounds(
    exp: &mut Experiment,
    rounds: usize,
    artifacts: Option<&Path>,
) -> Result<Vec<RoundReport>> {
    if let Some(dir) = artifacts {
        std::fs::create_dir_all(dir.join("agreement"))?;
    }
    let mut reports = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let hp = RoundHyper::from_config(&exp.cfg);
        let stats: Vec<RoundStats> = exp
            .clients
            .par_iter_mut()
            .map(|c| client_round(c, &hp, round))
            .collect::<Result<Vec<_>>>()?;

        match exp.cfg.mode {
            Mode::Homogeneous => {
                let refs: Vec<&ModelParams> = exp.clients.iter().map(|c| &c.params).collect();
                let weights: Vec<u64> = exp.clients.iter().map(|c| c.n_samples as u64).collect();
                let avg = fedavg(&refs, &weights)?;
                for c in &mut exp.clients {
                    c.params = avg.clone();
                }
                exp.server.global_params = avg;
            }
            Mode::Heterogeneous => {
                let soft = regularity_condensation(
                    &exp.clients,
                    &exp.server.public_data,
                    exp.cfg.num_classes,
                )?;
                let public = &exp.server.public_data;
                let cfg = &exp.cfg;
                exp.clients.par_iter_mut().try_for_each(|c| {
                    regularity_fusion(
                        c,
                        public,
                        &soft,
                        cfg.beta,
                        cfg.rf_epochs,
                        cfg.batch_size,
                        cfg.lr,
                        cfg.optimizer,
                        cfg.seed,
                        round,
                    )
                })?;
            }
        }
        exp.server.round = round;

        let mut rows = Vec::with_capacity(exp.clients.len());
        for (c, s) in exp.clients.iter().zip(&stats) {
            let m = evaluate_model(&c.net, &c.params, &c.test, exp.cfg.num_classes)?;
            rows.push(ClientRow {
                round,
                client: c.id.clone(),
                dice: m.dice,
                hd95: m.hd95,
                mean_lambda: s.mean_lambda,
                agreement_rate: s.agreement_rate,
                unsup_loss: *s.epoch_losses.last().unwrap_or(&0.0),
            });
        }
        if let Some(dir) = artifacts {
            for c in &exp.clients {
                let name = format!("round{round}_client{}.pgm", c.index + 1);
                export_agreement_image(&c.pseudo[0], &dir.join("agreement").join(name))?;
            }
        }
        reports.push(RoundReport::new(round, rows));
    }
    Ok(reports)
}

/// Initialize and run the configured number of rounds.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    artifacts: Option<&Path>,
) -> Result<(Experiment, Vec<RoundReport>)> {
    let mut exp = initialize(cfg)?;
    let reports = run_rounds(&mut exp, cfg.rounds, artifacts)?;
    Ok((exp, reports))
}
