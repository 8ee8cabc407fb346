//! The training engine: dual-network mutual learning with agreement-gated
//! small-loss selection, gradient-descent label correction, and the
//! four-stage schedule (warm-up, one-shot curriculum computation, joint
//! correction, fine-tune). A single-network baseline shares the same
//! plumbing.
//!
//! Parameter gradients flow only through selected samples; label-logit
//! gradients are accumulated for every batch sample from both networks and
//! applied to curriculum-unlocked rows. One batch is one atomic step: both
//! networks and the store observe the same pre-step state.

pub mod checkpoint;
mod schedule;
mod select;

pub use schedule::{MemorySchedule, Stage, StagePlan};
pub use select::{agreement_set, select_small_loss, training_subsets};

use ndarray::{Array2, ArrayView2};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{Method, RunConfig, SelectionMode};
use crate::curriculum::{self, CurriculumPlan};
use crate::data::{Augment, Batch, NoisyDataset, Split};
use crate::error::{Error, Result};
use crate::labels::LabelStore;
use crate::losses::{self, LossWeights};
use crate::metrics::{acc_class, acc_label, MetricsRecord, MetricsWriter};
use crate::nn::{build_backbone, SequentialNet, SgdMomentum};
use crate::util::{mix_seed, onehot_rows, softmax_rows_f64};

const STREAM_NET: u64 = 0x6e65;
const STREAM_SHUFFLE: u64 = 0x7368;

/// Two identically-structured classifiers with independent initialization
/// and optimizer state.
pub struct ClassifierPair {
    pub net1: SequentialNet,
    pub net2: SequentialNet,
    pub opt1: SgdMomentum,
    pub opt2: SgdMomentum,
}

impl ClassifierPair {
    pub fn new(config: &RunConfig, ds: &NoisyDataset, seed1: u64, seed2: u64) -> Result<Self> {
        let (c, h, w) = ds.image_shape();
        let classes = ds.num_classes();
        let net1 = build_backbone(&config.model.backbone, c, (h, w), config.model.width, classes, seed1)?;
        let net2 = build_backbone(&config.model.backbone, c, (h, w), config.model.width, classes, seed2)?;
        let mk_opt = || {
            SgdMomentum::new(
                config.optimizer.lr as f32,
                config.optimizer.momentum as f32,
                config.weight_decay() as f32,
            )
            .with_clip(config.optimizer.clip_grad_norm)
        };
        Ok(ClassifierPair {
            net1,
            net2,
            opt1: mk_opt(),
            opt2: mk_opt(),
        })
    }
}

/// Aggregates logged once per epoch.
#[derive(Debug, Default, Clone)]
pub struct EpochStats {
    pub l_c: f64,
    pub l_o: Option<f64>,
    pub l_e: Option<f64>,
    pub batches: usize,
    pub skipped_batches: usize,
    pub selected: usize,
    pub seen: usize,
}

impl EpochStats {
    fn mean_l_c(&self) -> Option<f64> {
        (self.batches > 0).then(|| self.l_c / self.batches as f64)
    }
    fn mean_l_o(&self) -> Option<f64> {
        self.l_o.map(|v| v / self.batches.max(1) as f64)
    }
    fn mean_l_e(&self) -> Option<f64> {
        self.l_e.map(|v| v / self.batches.max(1) as f64)
    }
}

/// Shared per-run state threaded through the stage epochs.
pub struct Ctx<'a> {
    ds: &'a NoisyDataset,
    /// dataset id -> label-store row (train ids ascending).
    store_row: Vec<usize>,
    batch_size: usize,
    seed: u64,
    augment: Augment,
    sched: MemorySchedule,
    mode: SelectionMode,
    weights: LossWeights,
    stage4_entropy: bool,
}

impl<'a> Ctx<'a> {
    fn build(config: &RunConfig, ds: &'a NoisyDataset) -> Result<Self> {
        let mut store_row = vec![usize::MAX; ds.len()];
        for (row, id) in ds.ids(Split::Train).into_iter().enumerate() {
            store_row[id] = row;
        }
        Ok(Ctx {
            ds,
            store_row,
            batch_size: config.schedule.batch_size,
            seed: config.seed,
            augment: config.augment(),
            sched: MemorySchedule {
                e_k: config.schedule.e_k,
                tau: config.tau(),
            },
            mode: config.curriculum.selection_mode,
            weights: LossWeights {
                alpha: config.alpha(),
                beta: config.label.beta,
            },
            stage4_entropy: config.label.stage4_entropy,
        })
    }

    fn epoch_batches(&self, epoch: usize) -> impl Iterator<Item = Batch> + 'a {
        self.ds.batches(
            Split::Train,
            self.batch_size,
            mix_seed(self.seed, STREAM_SHUFFLE, epoch as u64),
            self.augment,
        )
    }
}

fn logits_to_probs_f64(logits: ArrayView2<f32>) -> Array2<f64> {
    let up = logits.mapv(|v| v as f64);
    softmax_rows_f64(up.view())
}

fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

fn row_weights(selection: &[usize], len: usize) -> Vec<f64> {
    let mut w = vec![0.0; len];
    if !selection.is_empty() {
        let inv = 1.0 / selection.len() as f64;
        for &pos in selection {
            w[pos] = inv;
        }
    }
    w
}

/// One warm-up epoch: cross-entropy against observed labels, each network
/// stepped on the small-loss agreement subset chosen per the selection
/// mode. The label store is untouched by construction.
pub fn stage1_epoch(
    pair: &mut ClassifierPair,
    ctx: &Ctx,
    epoch: usize,
) -> Result<EpochStats> {
    let mut stats = EpochStats::default();
    let rate = ctx.sched.memory_rate(epoch);
    for batch in ctx.epoch_batches(epoch) {
        let x = batch.images.view();
        let (tape1, tape2) = rayon::join(|| pair.net1.forward(x), || pair.net2.forward(x));
        let p1 = logits_to_probs_f64(tape1.logits());
        let p2 = logits_to_probs_f64(tape2.logits());
        if !p1.iter().all(|v| v.is_finite()) || !p2.iter().all(|v| v.is_finite()) {
            log::warn!("epoch {epoch}: non-finite predictions, batch skipped");
            stats.skipped_batches += 1;
            continue;
        }
        let agree = agreement_set(p1.view(), p2.view());
        let ce1 = losses::ce_hard_per_sample(p1.view(), &batch.noisy_labels)?;
        let ce2 = losses::ce_hard_per_sample(p2.view(), &batch.noisy_labels)?;
        let at = |v: &ndarray::Array1<f64>| -> Vec<f64> {
            agree.iter().map(|&i| v[i]).collect()
        };
        let (sel1, sel2) = training_subsets(&agree, &at(&ce1), &at(&ce2), rate, ctx.mode);

        let w1 = row_weights(&sel1, batch.ids.len());
        let w2 = row_weights(&sel2, batch.ids.len());
        let d1 = to_f32(&losses::ce_grad_logits(p1.view(), &batch.noisy_labels, &w1)?);
        let d2 = to_f32(&losses::ce_grad_logits(p2.view(), &batch.noisy_labels, &w2)?);
        let (g1, g2) = rayon::join(
            || pair.net1.backward(&tape1, d1),
            || pair.net2.backward(&tape2, d2),
        );
        if !sel1.is_empty() {
            pair.net1.sgd_step(&mut pair.opt1, &g1);
        }
        if !sel2.is_empty() {
            pair.net2.sgd_step(&mut pair.opt2, &g2);
        }

        stats.l_c += (ce1.mean().unwrap_or(0.0) + ce2.mean().unwrap_or(0.0)) / 2.0;
        stats.batches += 1;
        stats.selected += sel1.len() + sel2.len();
        stats.seen += 2 * batch.ids.len();
    }
    Ok(stats)
}

/// One correction epoch: parameters follow the composite soft loss on the
/// selected subset; label-logit gradients from every batch sample of both
/// networks are summed and applied to unlocked store rows.
pub fn stage3_epoch(
    pair: &mut ClassifierPair,
    store: &mut LabelStore,
    ctx: &Ctx,
    epoch: usize,
) -> Result<EpochStats> {
    soft_epoch(pair, store, ctx, epoch, true)
}

/// One fine-tune epoch: soft classification loss against the frozen label
/// distributions, same selection flow, store bit-unchanged.
pub fn stage4_epoch(
    pair: &mut ClassifierPair,
    store: &mut LabelStore,
    ctx: &Ctx,
    epoch: usize,
) -> Result<EpochStats> {
    soft_epoch(pair, store, ctx, epoch, false)
}

fn soft_epoch(
    pair: &mut ClassifierPair,
    store: &mut LabelStore,
    ctx: &Ctx,
    epoch: usize,
    correct_labels: bool,
) -> Result<EpochStats> {
    let mut stats = EpochStats {
        l_o: correct_labels.then_some(0.0),
        l_e: Some(0.0),
        ..Default::default()
    };
    let rate = ctx.sched.memory_rate(epoch);
    let classes = ctx.ds.num_classes();
    let beta_params = if correct_labels || ctx.stage4_entropy {
        ctx.weights.beta
    } else {
        0.0
    };
    for batch in ctx.epoch_batches(epoch) {
        let x = batch.images.view();
        let (tape1, tape2) = rayon::join(|| pair.net1.forward(x), || pair.net2.forward(x));
        let p1 = logits_to_probs_f64(tape1.logits());
        let p2 = logits_to_probs_f64(tape2.logits());
        if !p1.iter().all(|v| v.is_finite()) || !p2.iter().all(|v| v.is_finite()) {
            log::warn!("epoch {epoch}: non-finite predictions, batch skipped");
            stats.skipped_batches += 1;
            continue;
        }
        let rows: Vec<usize> = batch.ids.iter().map(|&id| ctx.store_row[id]).collect();
        let yd = store.distributions(&rows);

        let agree = agreement_set(p1.view(), p2.view());
        let kl1 = losses::kl_flipped_per_sample(p1.view(), yd.view())?;
        let kl2 = losses::kl_flipped_per_sample(p2.view(), yd.view())?;
        let at = |v: &ndarray::Array1<f64>| -> Vec<f64> {
            agree.iter().map(|&i| v[i]).collect()
        };
        let (sel1, sel2) = training_subsets(&agree, &at(&kl1), &at(&kl2), rate, ctx.mode);

        let w1 = row_weights(&sel1, batch.ids.len());
        let w2 = row_weights(&sel2, batch.ids.len());
        let d1 = to_f32(&losses::soft_grad_logits(p1.view(), yd.view(), beta_params, &w1)?);
        let d2 = to_f32(&losses::soft_grad_logits(p2.view(), yd.view(), beta_params, &w2)?);
        let (g1, g2) = rayon::join(
            || pair.net1.backward(&tape1, d1),
            || pair.net2.backward(&tape2, d2),
        );

        // label-gradient contributions from ALL batch samples, both
        // networks, against the same pre-step distribution snapshot.
        // Each network's label objective is the composite loss divided by
        // the class count: the published correction-rate table is
        // calibrated against that compensated objective (the 2-class and
        // 10-class entries differ by the class-count factor).
        if correct_labels {
            let onehot = onehot_rows(&batch.noisy_labels, classes);
            let comp = 1.0 / classes as f64;
            let mut lg1 =
                losses::stage3_grad_label_logits(p1.view(), yd.view(), onehot.view(), ctx.weights)?;
            let mut lg2 =
                losses::stage3_grad_label_logits(p2.view(), yd.view(), onehot.view(), ctx.weights)?;
            lg1.mapv_inplace(|v| v * comp);
            lg2.mapv_inplace(|v| v * comp);
            store.apply_label_gradient(&rows, lg1.view(), lg2.view())?;
        }

        if !sel1.is_empty() {
            pair.net1.sgd_step(&mut pair.opt1, &g1);
        }
        if !sel2.is_empty() {
            pair.net2.sgd_step(&mut pair.opt2, &g2);
        }

        stats.l_c += (kl1.mean().unwrap_or(0.0) + kl2.mean().unwrap_or(0.0)) / 2.0;
        if correct_labels {
            let onehot = onehot_rows(&batch.noisy_labels, classes);
            *stats.l_o.as_mut().unwrap() += losses::compat_loss(onehot.view(), yd.view())?;
        }
        *stats.l_e.as_mut().unwrap() += (losses::entropy_loss(p1.view())
            + losses::entropy_loss(p2.view()))
            / 2.0;
        stats.batches += 1;
        stats.selected += sel1.len() + sel2.len();
        stats.seen += 2 * batch.ids.len();
    }
    Ok(stats)
}

/// Argmax predictions of one network over a split, ascending id order.
pub fn predict_split(net: &SequentialNet, ds: &NoisyDataset, split: Split) -> Vec<u16> {
    let mut out = Vec::with_capacity(ds.split_len(split));
    for batch in ds.eval_batches(split, 256) {
        let logits = net.logits(batch.images.view());
        for row in logits.rows() {
            out.push(crate::util::argmax_f32(row.to_slice().expect("contiguous")) as u16);
        }
    }
    out
}

fn eval_acc(net: &SequentialNet, ds: &NoisyDataset, split: Split) -> Result<Option<f64>> {
    if ds.split_len(split) == 0 {
        return Ok(None);
    }
    let preds = predict_split(net, ds, split);
    Ok(Some(acc_class(&preds, &ds.clean_labels_of(split))?))
}

/// Everything a finished run leaves behind.
pub struct RunOutput {
    pub run_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    /// 0 or 1: network reported in the summary (best validation accuracy,
    /// test accuracy when no validation split exists).
    pub report_net: usize,
    pub final_test_acc: f64,
    pub final_acc_label: Option<f64>,
}

/// Build the experiment dataset from the config: load, split or carve
/// validation, subsample, inject noise.
pub fn prepare_dataset(config: &RunConfig) -> Result<NoisyDataset> {
    let root = config.data_root();
    let mut ds = match config.dataset.name.as_str() {
        "synth-digits" => NoisyDataset::synth_digits(
            config.dataset.synth_train.unwrap_or(60_000),
            config.dataset.synth_test.unwrap_or(10_000),
            config.dataset.seed,
        ),
        "mnist" => NoisyDataset::load("mnist", &root)?,
        "folder" => {
            let folder = NoisyDataset::image_folder(&root, config.dataset.image_size)?;
            let ratios = config.dataset.split.unwrap_or([0.8, 0.1, 0.1]);
            folder.split_dataset(ratios, config.dataset.seed)?
        }
        other => return Err(Error::config(format!("unknown dataset '{other}'"))),
    };
    // optional validation carve for datasets with file-defined test splits
    if config.dataset.name.as_str() != "folder" {
        if let Some([r_train, r_val, _]) = config.dataset.split {
            if r_val > 0.0 {
                ds = carve_validation(&ds, r_val / (r_train + r_val), config.dataset.seed)?;
            }
        }
    }
    if let Some(keep) = config.dataset.subset_train {
        ds = ds.subsample_train(keep, mix_seed(config.dataset.seed, 0x5b5, 0))?;
    }
    ds = ds.inject_noise(&config.noise_spec())?;
    Ok(ds)
}

/// Move a seeded fraction of train samples to the validation split.
fn carve_validation(ds: &NoisyDataset, frac: f64, seed: u64) -> Result<NoisyDataset> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let train = ds.ids(Split::Train);
    let n_val = (frac * train.len() as f64).floor() as usize;
    let mut order = train;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7a1, 0));
    order.shuffle(&mut rng);
    let mut out = ds.clone();
    out.move_to_validation(&order[..n_val]);
    Ok(out)
}

/// Execute a full run into `run_dir` (created if needed): resolved config,
/// noise manifest, per-epoch metrics, checkpoints, and for the dual-network
/// method the curriculum audit and final label store.
pub fn run(config: &RunConfig, run_dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(
        run_dir.join("config.resolved.toml"),
        config.resolved()?.to_toml_string()?,
    )?;
    let ds = prepare_dataset(config)?;
    ds.write_noise_manifest(&run_dir.join("noise_manifest.csv"))?;
    log::info!(
        "dataset {}: {} train / {} val / {} test, realized noise {:.4}",
        ds.name,
        ds.split_len(Split::Train),
        ds.split_len(Split::Validation),
        ds.split_len(Split::Test),
        ds.realized_noise_rate()
    );
    match config.method {
        Method::Cocorrecting => run_cocorrecting(config, &ds, run_dir),
        Method::Standard => run_standard(config, &ds, run_dir),
    }
}

fn run_cocorrecting(config: &RunConfig, ds: &NoisyDataset, run_dir: &Path) -> Result<RunOutput> {
    let plan_epochs = StagePlan {
        stage1: config.schedule.epochs_stage1,
        stage3: config.schedule.epochs_stage3,
        stage4: config.schedule.epochs_stage4,
    };
    let lambda = if config.schedule.epochs_stage3 > 0 {
        config.lambda()?
    } else {
        0.0
    };
    let mut pair = ClassifierPair::new(
        config,
        ds,
        mix_seed(config.seed, STREAM_NET, 1),
        mix_seed(config.seed, STREAM_NET, 2),
    )?;
    let train_labels = ds.noisy_labels_of(Split::Train);
    let clean_train = ds.clean_labels_of(Split::Train);
    let mut store = LabelStore::new(&train_labels, ds.num_classes(), config.label.k_init, lambda)?;
    let ctx = Ctx::build(config, ds)?;
    let mut plan: Option<CurriculumPlan> = None;

    let mut start_epoch = 0;
    if let Some(ref ckpt_path) = config.resume_from {
        let ckpt = checkpoint::load(ckpt_path)?;
        if ckpt.net_params.len() != 2 {
            return Err(Error::config(format!(
                "checkpoint holds {} networks, expected 2",
                ckpt.net_params.len()
            )));
        }
        checkpoint::restore_net(&mut pair.net1, &ckpt.net_params[0], &ckpt.buffers[0])?;
        checkpoint::restore_net(&mut pair.net2, &ckpt.net_params[1], &ckpt.buffers[1])?;
        pair.opt1.set_velocity(ckpt.velocities[0].clone());
        pair.opt2.set_velocity(ckpt.velocities[1].clone());
        if let Some(s) = ckpt.store {
            store = s.into_store();
        }
        plan = ckpt.plan.map(|p| p.into_plan());
        start_epoch = ckpt.epoch;
        log::info!("resumed from {} at epoch {start_epoch}", ckpt_path.display());
    }

    let mut writer = MetricsWriter::create(&run_dir.join("metrics.csv"))?;
    let mut records = Vec::new();
    let total = plan_epochs.total();

    for epoch in start_epoch..total {
        let t0 = Instant::now();
        let stage = plan_epochs.stage_of(epoch);

        if stage == Stage::Correction && plan.is_none() {
            // Stage II: computed once, between warm-up and correction
            let built = curriculum::build_plan(
                &pair.net1,
                &pair.net2,
                ds,
                config.curriculum.k_percentile,
                config.curriculum.pca_dim,
                ctx.batch_size,
                plan_epochs.stage3_range(),
            )
            .map_err(|e| Error::Runtime(format!("curriculum build failed: {e}")))?;
            built.export_csv(&run_dir.join("curriculum_audit.csv"))?;
            log::info!(
                "curriculum tiers {:?}, unlock epochs {:?}",
                built.tier_sizes(),
                built.unlock_epoch
            );
            plan = Some(built);
        }

        if stage == Stage::Correction && !config.curriculum.locked {
            if let Some(ref p) = plan {
                let unlocking = p.unlocking_at(epoch);
                if !unlocking.is_empty() {
                    let rows: Vec<usize> =
                        unlocking.iter().map(|&id| ctx.store_row[id]).collect();
                    store.unlock(&rows);
                    log::info!(
                        "epoch {epoch}: unlocked {} samples ({} total)",
                        rows.len(),
                        store.updatable_count()
                    );
                }
            }
        }

        let stats = match stage {
            Stage::Warmup => stage1_epoch(&mut pair, &ctx, epoch)?,
            Stage::Correction => stage3_epoch(&mut pair, &mut store, &ctx, epoch)?,
            Stage::FineTune => stage4_epoch(&mut pair, &mut store, &ctx, epoch)?,
        };

        let (acc_t1, acc_t2) = rayon::join(
            || eval_acc(&pair.net1, ds, Split::Test),
            || eval_acc(&pair.net2, ds, Split::Test),
        );
        let (acc_v1, acc_v2) = rayon::join(
            || eval_acc(&pair.net1, ds, Split::Validation),
            || eval_acc(&pair.net2, ds, Split::Validation),
        );
        let label_acc = acc_label(&store.hard_labels(), &clean_train)?;

        let record = MetricsRecord {
            epoch,
            stage: stage.id(),
            acc_test_net1: acc_t1?,
            acc_test_net2: acc_t2?,
            acc_val_net1: acc_v1?,
            acc_val_net2: acc_v2?,
            acc_label: Some(label_acc),
            l_c: stats.mean_l_c(),
            l_o: stats.mean_l_o(),
            l_e: stats.mean_l_e(),
            r_t: Some(ctx.sched.memory_rate(epoch)),
            unlocked: Some(store.updatable_count()),
            dirty: Some(store.dirty_count()),
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} stage {}: acc_test {:?}/{:?}, acc_label {:.4}, selected {}/{} ({:.0}%)",
            stage.id(),
            record.acc_test_net1,
            record.acc_test_net2,
            label_acc,
            stats.selected,
            stats.seen,
            100.0 * stats.selected as f64 / stats.seen.max(1) as f64
        );
        writer.append(&record)?;
        records.push(record);

        let save_points = epoch + 1 == plan_epochs.stage1
            || epoch + 1 == total
            || (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0);
        if save_points {
            let name = if epoch + 1 == plan_epochs.stage1 {
                "ckpt_stage1.bin".to_string()
            } else if epoch + 1 == total {
                "ckpt_final.bin".to_string()
            } else {
                format!("ckpt_epoch{}.bin", epoch + 1)
            };
            checkpoint::save(
                &run_dir.join(name),
                epoch + 1,
                &[&pair.net1, &pair.net2],
                &[&pair.opt1, &pair.opt2],
                Some(&store),
                plan.as_ref(),
            )?;
        }
    }

    store.export_csv(&run_dir.join("label_store.csv"), total)?;
    let last = records
        .last()
        .ok_or_else(|| Error::Runtime("run produced no epochs".to_string()))?;
    // report network: best final validation accuracy, else test accuracy
    let (c1, c2) = match (last.acc_val_net1, last.acc_val_net2) {
        (Some(a), Some(b)) => (a, b),
        _ => (
            last.acc_test_net1.unwrap_or(0.0),
            last.acc_test_net2.unwrap_or(0.0),
        ),
    };
    let report_net = usize::from(c2 > c1);
    let final_test_acc = [last.acc_test_net1, last.acc_test_net2][report_net].unwrap_or(0.0);
    Ok(RunOutput {
        run_dir: run_dir.to_path_buf(),
        final_acc_label: last.acc_label,
        report_net,
        final_test_acc,
        records,
    })
}

fn run_standard(config: &RunConfig, ds: &NoisyDataset, run_dir: &Path) -> Result<RunOutput> {
    let total = config.total_epochs();
    let (c, h, w) = ds.image_shape();
    let mut net = build_backbone(
        &config.model.backbone,
        c,
        (h, w),
        config.model.width,
        ds.num_classes(),
        mix_seed(config.seed, STREAM_NET, 1),
    )?;
    let mut opt = SgdMomentum::new(
        config.optimizer.lr as f32,
        config.optimizer.momentum as f32,
        config.weight_decay() as f32,
    )
    .with_clip(config.optimizer.clip_grad_norm);
    let mut start_epoch = 0;
    if let Some(ref ckpt_path) = config.resume_from {
        let ckpt = checkpoint::load(ckpt_path)?;
        checkpoint::restore_net(&mut net, &ckpt.net_params[0], &ckpt.buffers[0])?;
        opt.set_velocity(ckpt.velocities[0].clone());
        start_epoch = ckpt.epoch;
    }
    let mut writer = MetricsWriter::create(&run_dir.join("metrics.csv"))?;
    let mut records = Vec::new();

    for epoch in start_epoch..total {
        let t0 = Instant::now();
        let mut stats = EpochStats::default();
        for batch in ds.batches(
            Split::Train,
            config.schedule.batch_size,
            mix_seed(config.seed, STREAM_SHUFFLE, epoch as u64),
            config.augment(),
        ) {
            let tape = net.forward(batch.images.view());
            let p = logits_to_probs_f64(tape.logits());
            if !p.iter().all(|v| v.is_finite()) {
                stats.skipped_batches += 1;
                continue;
            }
            let b = batch.ids.len();
            let w_rows = vec![1.0 / b as f64; b];
            let d = to_f32(&losses::ce_grad_logits(p.view(), &batch.noisy_labels, &w_rows)?);
            let grads = net.backward(&tape, d);
            net.sgd_step(&mut opt, &grads);
            stats.l_c += losses::ce_hard(p.view(), &batch.noisy_labels)?;
            stats.batches += 1;
            stats.seen += b;
        }
        let record = MetricsRecord {
            epoch,
            stage: 1,
            acc_test_net1: eval_acc(&net, ds, Split::Test)?,
            acc_val_net1: eval_acc(&net, ds, Split::Validation)?,
            l_c: stats.mean_l_c(),
            seconds: t0.elapsed().as_secs_f64(),
            ..Default::default()
        };
        log::info!(
            "epoch {epoch} standard: acc_test {:?}",
            record.acc_test_net1
        );
        writer.append(&record)?;
        records.push(record);
        if epoch + 1 == total
            || (config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0)
        {
            let name = if epoch + 1 == total {
                "ckpt_final.bin".to_string()
            } else {
                format!("ckpt_epoch{}.bin", epoch + 1)
            };
            checkpoint::save(&run_dir.join(name), epoch + 1, &[&net], &[&opt], None, None)?;
        }
    }

    let last = records
        .last()
        .ok_or_else(|| Error::Runtime("run produced no epochs".to_string()))?;
    Ok(RunOutput {
        run_dir: run_dir.to_path_buf(),
        final_test_acc: last.acc_test_net1.unwrap_or(0.0),
        final_acc_label: None,
        report_net: 0,
        records,
    })
}

/// Evaluate a checkpoint against the config's dataset; returns per-network
/// test accuracy.
pub fn eval_checkpoint(config: &RunConfig, ckpt_path: &Path) -> Result<Vec<f64>> {
    let ds = prepare_dataset(config)?;
    let ckpt = checkpoint::load(ckpt_path)?;
    let (c, h, w) = ds.image_shape();
    let mut out = Vec::new();
    for (params, bufs) in ckpt.net_params.iter().zip(ckpt.buffers.iter()) {
        let mut net = build_backbone(
            &config.model.backbone,
            c,
            (h, w),
            config.model.width,
            ds.num_classes(),
            0,
        )?;
        checkpoint::restore_net(&mut net, params, bufs)?;
        out.push(
            eval_acc(&net, &ds, Split::Test)?
                .ok_or_else(|| Error::Runtime("dataset has no test split".to_string()))?,
        );
    }
    Ok(out)
}
