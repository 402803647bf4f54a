use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use smallify_core::gc::CollectReport;
use smallify_core::objective::add_penalty_gradients;
use smallify_core::{
    collect, cross_entropy, smallify_loss, AdamState64, Dataset64, Error, LossBreakdown, Mode, Network64, ParamId,
    ParamKind, PlateauSchedule, Result, SeededRng, SizeHistory, Splits, SwitchInit, Tensor64,
};

use crate::config::TrainConfig;

/// A network, its optimizer state and the step/epoch mechanics.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network64,
    pub adam: AdamState64,
    cfg: TrainConfig,
    freeze_switches: bool,
}

impl Trainer {
    /// Builds the architecture from `cfg.seed`. With pruning disabled the
    /// switches start at one and stay frozen, so they are an exact identity.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let init = if cfg.pruning_disabled() {
            SwitchInit::Ones
        } else {
            SwitchInit::Normal
        };
        let net = cfg.arch.build(&mut SeededRng::new(cfg.seed).split(0), init)?;
        Self::with_network(cfg, net)
    }

    pub fn with_network(cfg: TrainConfig, net: Network64) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            adam: AdamState64::new(cfg.lr),
            freeze_switches: cfg.pruning_disabled(),
            net,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer update on a batch; returns the loss before the update.
    pub fn step(&mut self, x: &Tensor64, labels: &[usize]) -> Result<LossBreakdown<f64>> {
        let (logits, tape) = self.net.forward(x, Mode::Train)?;
        let (task, g) = cross_entropy(&logits, labels)?;
        let loss = smallify_loss(task, &self.net, &self.cfg.penalty)?;
        let (_, mut grads) = self.net.backward(&tape, &g)?;
        add_penalty_gradients(&self.net, &self.cfg.penalty, &mut grads);
        let switches = self.net.switch_indices();
        if self.freeze_switches {
            for &idx in &switches {
                grads.remove(&ParamId::new(idx, ParamKind::Beta));
            }
        }
        self.net.mask_inactive_grads(&mut grads);
        self.adam.step(self.net.params_mut(), &grads)?;
        self.net.clamp_inactive();
        for idx in switches {
            self.net
                .switch_mut(idx)
                .expect("switch index")
                .observe_signs(&self.cfg.screener);
        }
        Ok(loss)
    }

    /// Screens all switches and removes what they flag.
    pub fn collect_garbage(&mut self) -> Result<CollectReport> {
        collect(&mut self.net, Some(&mut self.adam), &self.cfg.screener)
    }
}

/// Fraction of rows whose argmax logit matches the label (eval mode).
pub fn accuracy(net: &Network64, ds: &Dataset64) -> Result<f64> {
    let n = ds.len();
    let mut right = 0usize;
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(2048) {
        let x = shaped_batch(net, ds, chunk)?;
        let pred = net.predict(&x)?.argmax_rows();
        right += pred.iter().zip(chunk).filter(|(p, &i)| **p == ds.labels[i]).count();
    }
    Ok(right as f64 / n as f64)
}

/// Gathers rows and reshapes them to the network's per-sample input shape.
fn shaped_batch(net: &Network64, ds: &Dataset64, rows: &[usize]) -> Result<Tensor64> {
    let x = ds.features.gather_rows(rows)?;
    if net.input_shape().len() == 1 {
        return Ok(x);
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(net.input_shape());
    x.reshape(shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean penalized loss over the epoch's batches.
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub sizes: Vec<usize>,
    pub params: usize,
    pub removed: usize,
    pub size_converged: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Network at the selected epoch, switches included.
    pub checkpoint: Network64,
    pub selected_epoch: usize,
    /// False when no epoch reached size convergence and the fallback was used.
    pub size_converged: bool,
    pub warning: Option<String>,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub history: SizeHistory,
    pub wall_clock_s: f64,
}

fn check_data(cfg: &TrainConfig, splits: &Splits<f64>) -> Result<()> {
    let d = splits.train.num_features();
    let want: usize = cfg.arch.input.iter().product();
    if want != d {
        return Err(Error::Config(format!(
            "architecture input {:?} needs {want} features, dataset has {d}",
            cfg.arch.input
        )));
    }
    if splits.val.is_none() {
        return Err(Error::Config("training needs a non-empty validation split".into()));
    }
    Ok(())
}

pub fn train(cfg: &TrainConfig, splits: &Splits<f64>) -> Result<TrainOutcome> {
    train_with(cfg, splits, |_| {})
}

/// Runs epochs until the schedule stops or `max_epochs`, calling `on_epoch` after each.
///
/// The returned checkpoint is the best-validation epoch among size-converged
/// epochs; if none converged, the best of the last `window` epochs.
pub fn train_with(
    cfg: &TrainConfig,
    splits: &Splits<f64>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let start = Instant::now();
    check_data(cfg, splits)?;
    let val = splits.val.as_ref().expect("checked");
    let mut trainer = Trainer::new(cfg.clone())?;
    let classes = trainer.net.output_shape();
    if classes != [splits.train.num_classes()] {
        return Err(Error::Config(format!(
            "network outputs {classes:?}, dataset has {} classes",
            splits.train.num_classes()
        )));
    }

    let mut order_rng = SeededRng::new(cfg.seed).split(1);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut schedule = PlateauSchedule::new(cfg.schedule);
    let mut history = SizeHistory::new();
    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut best: Option<(usize, f64, Network64)> = None;
    let mut recent: VecDeque<(usize, f64, Network64)> = VecDeque::new();

    for epoch in 0..cfg.max_epochs {
        let lr = trainer.adam.lr;
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let x = shaped_batch(&trainer.net, &splits.train, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| splits.train.labels[i]).collect();
            loss_sum += trainer.step(&x, &y)?.total;
            batches += 1;
        }
        let report = trainer.collect_garbage()?;
        let sizes: Vec<usize> = history
            .record(&trainer.net, epoch)
            .iter()
            .map(|r| r.active_channels)
            .collect();
        let val_accuracy = accuracy(&trainer.net, val)?;
        let converged = epoch + 1 >= cfg.window
            && epochs[epochs.len() + 1 - cfg.window..]
                .iter()
                .all(|e: &EpochLog| e.sizes == sizes);
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_accuracy,
            lr,
            sizes,
            params: trainer.net.param_count(false),
            removed: report.params_removed,
            size_converged: converged,
        };
        on_epoch(&log);
        epochs.push(log);

        if converged && best.as_ref().is_none_or(|b| val_accuracy > b.1) {
            best = Some((epoch, val_accuracy, trainer.net.clone()));
        }
        recent.push_back((epoch, val_accuracy, trainer.net.clone()));
        if recent.len() > cfg.window {
            recent.pop_front();
        }

        let (new_lr, stop) = schedule.update(val_accuracy, lr);
        trainer.adam.lr = new_lr;
        if stop {
            break;
        }
    }

    let (size_converged, warning, (selected_epoch, val_accuracy, checkpoint)) = match best {
        Some(b) => (true, None, b),
        None => {
            let pick = recent
                .into_iter()
                .fold(None::<(usize, f64, Network64)>, |acc, r| match acc {
                    Some(a) if a.1 >= r.1 => Some(a),
                    _ => Some(r),
                })
                .expect("at least one epoch");
            (
                false,
                Some(format!(
                    "layer sizes never stayed fixed for {} epochs; selected the best of the last {} epochs",
                    cfg.window, cfg.window
                )),
                pick,
            )
        }
    };
    let test_accuracy = splits.test.as_ref().map(|t| accuracy(&checkpoint, t)).transpose()?;
    Ok(TrainOutcome {
        checkpoint,
        selected_epoch,
        size_converged,
        warning,
        val_accuracy,
        test_accuracy,
        epochs,
        history,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use smallify_core::{ArchSpec, PenaltyConfig, SyntheticSpec};

    fn splits(seed: u64, n: usize, d: usize, k: usize) -> Splits<f64> {
        SyntheticSpec {
            samples: n,
            features: d,
            informative: k,
            classes: 3,
            label_noise: 0.0,
            seed,
        }
        .generate::<f64>()
        .unwrap()
        .split_standardize([0.7, 0.15, 0.15], seed)
        .unwrap()
    }

    #[test]
    fn rejects_shape_mismatch() {
        let s = splits(0, 100, 5, 2);
        let cfg = TrainConfig::new(ArchSpec::mlp(4, &[8], 3, true));
        assert!(matches!(train(&cfg, &s), Err(Error::Config(_))));
        let cfg = TrainConfig::new(ArchSpec::mlp(5, &[8], 2, true));
        assert!(matches!(train(&cfg, &s), Err(Error::Config(_))));
    }

    #[test]
    fn disabled_pruning_keeps_every_channel() {
        let s = splits(1, 300, 6, 2);
        let mut cfg = TrainConfig::new(ArchSpec::mlp(6, &[10, 8], 3, true));
        cfg.screener.threshold = f64::INFINITY;
        cfg.max_epochs = 8;
        let out = train(&cfg, &s).unwrap();
        let first = out.epochs[0].params;
        assert!(out.epochs.iter().all(|e| e.params == first && e.sizes == vec![10, 8]));
        assert!(out.history.is_non_increasing());
        for idx in out.checkpoint.switch_indices() {
            assert!(out
                .checkpoint
                .switch(idx)
                .unwrap()
                .beta
                .data()
                .iter()
                .all(|&b| b == 1.0));
        }
    }

    #[test]
    fn selection_is_best_converged_epoch() {
        let s = splits(2, 400, 6, 2);
        let mut cfg = TrainConfig::new(ArchSpec::mlp(6, &[12], 3, true));
        cfg.penalty = PenaltyConfig::new(1e-2, 1e-4, 2.0).unwrap();
        cfg.lr = 1e-2;
        cfg.max_epochs = 15;
        let out = train(&cfg, &s).unwrap();
        assert!(out.history.is_non_increasing());
        let conv: Vec<&EpochLog> = out.epochs.iter().filter(|e| e.size_converged).collect();
        if out.size_converged {
            let best = conv.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
            assert_eq!(out.val_accuracy, best);
            let first = conv.iter().find(|e| e.val_accuracy == best).unwrap();
            assert_eq!(out.selected_epoch, first.epoch);
        } else {
            assert!(out.warning.is_some());
        }
        assert_eq!(out.checkpoint.switch_widths(), out.epochs[out.selected_epoch].sizes);
    }

    #[test]
    fn fallback_without_convergence_sets_warning() {
        let s = splits(3, 200, 4, 2);
        let mut cfg = TrainConfig::new(ArchSpec::mlp(4, &[6], 3, true));
        cfg.window = 50;
        cfg.max_epochs = 4;
        let out = train(&cfg, &s).unwrap();
        assert!(!out.size_converged);
        assert!(out.warning.is_some());
        let best = out.epochs.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(out.val_accuracy, best);
    }

    #[test]
    fn same_seed_same_run() {
        let s = splits(4, 200, 4, 2);
        let mut cfg = TrainConfig::new(ArchSpec::mlp(4, &[6], 3, true));
        cfg.penalty.lambda = 1e-3;
        cfg.max_epochs = 3;
        let a = train(&cfg, &s).unwrap();
        let b = train(&cfg, &s).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.checkpoint, b.checkpoint);
    }
}
