//! Neural garbage collection: physically deleting switched-off channels.
//!
//! Removing channel `i` behind a switch touches:
//!
//! - the producing linear (row `i` and `b[i]`) or conv layer (filter `i` and its bias),
//! - every batchnorm between producer and consumer (`gamma`, `shift`, running stats),
//! - the switch itself (`beta[i]` and its sign statistics),
//! - the consuming linear layer (column `i`, or the block `[i·h·w, (i+1)·h·w)`
//!   when a flatten sits in between) or conv layer (input channel `i` of every filter),
//! - the matching Adam moments.
//!
//! Removed channels must already carry `beta = 0`, so the network's outputs
//! do not change.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, ParamId, ParamKind};
use crate::network::Network;
use crate::optim::{AdamState, RemovalSpec};
use crate::scalar::Scalar;
use crate::switch::ScreenerConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEdit {
    pub param: ParamId,
    pub spec: RemovalSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalPlan {
    pub switch: usize,
    pub channels: Vec<usize>,
    pub edits: Vec<ParamEdit>,
    /// Batchnorm and switch layers whose per-channel buffers shrink too.
    pub channel_layers: Vec<usize>,
    fingerprint: Vec<(ParamId, Vec<usize>)>,
}

impl RemovalPlan {
    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Scalars the plan deletes from the parameter set.
    pub fn removed_params(&self, include_switches: bool) -> usize {
        self.edits
            .iter()
            .filter(|e| include_switches || e.param.kind != ParamKind::Beta)
            .map(|e| {
                let shape = self
                    .fingerprint
                    .iter()
                    .find(|(id, _)| *id == e.param)
                    .map(|(_, s)| s.as_slice())
                    .unwrap_or(&[]);
                e.spec.removed_len(shape)
            })
            .sum()
    }

    pub fn edit(&self, param: ParamId) -> Option<&RemovalSpec> {
        self.edits.iter().find(|e| e.param == param).map(|e| &e.spec)
    }
}

fn fingerprint<S: Scalar>(net: &Network<S>) -> Vec<(ParamId, Vec<usize>)> {
    net.params()
        .into_iter()
        .map(|(id, t)| (id, t.shape().to_vec()))
        .collect()
}

/// Derives every tensor edit needed to delete `channels` behind the switch at layer `switch`.
pub fn plan_removal<S: Scalar>(net: &Network<S>, switch: usize, channels: &[usize]) -> Result<RemovalPlan> {
    let sw = net
        .switch(switch)
        .ok_or_else(|| Error::arg(format!("layer {switch} is not a switch")))?;
    let mut channels = channels.to_vec();
    channels.sort_unstable();
    if channels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::arg("channel listed twice"));
    }
    if let Some(&bad) = channels.iter().find(|&&c| c >= sw.channels()) {
        return Err(Error::arg(format!(
            "channel {bad} out of range for switch of width {}",
            sw.channels()
        )));
    }
    let fingerprint = fingerprint(net);
    if channels.is_empty() {
        return Ok(RemovalPlan {
            switch,
            channels,
            edits: vec![],
            channel_layers: vec![],
            fingerprint,
        });
    }
    if channels.len() == sw.channels() {
        return Err(Error::Refused(format!(
            "removing all {} channels of switch {switch}; a layer keeps at least one",
            sw.channels()
        )));
    }

    let site = net.switch_site(switch)?;
    let consumer = site.consumer.ok_or_else(|| {
        Error::Refused(format!(
            "switch {switch} feeds the network output; output units are never removed"
        ))
    })?;
    let producer = site.producer.ok_or_else(|| {
        Error::Refused(format!(
            "switch {switch} scales network inputs; there is no producing layer to shrink"
        ))
    })?;

    if let Some(&bn) = site.per_channel.iter().find(|&&b| b > switch) {
        return Err(Error::Refused(format!(
            "batchnorm at layer {bn} follows switch {switch} and maps removed channels to constants"
        )));
    }

    let rows = RemovalSpec::rows(channels.clone());
    let mut edits = vec![
        ParamEdit {
            param: ParamId::new(producer, ParamKind::Weight),
            spec: rows.clone(),
        },
        ParamEdit {
            param: ParamId::new(producer, ParamKind::Bias),
            spec: rows.clone(),
        },
    ];
    let mut channel_layers = Vec::new();
    for &bn in &site.per_channel {
        for kind in [ParamKind::Gamma, ParamKind::Shift] {
            edits.push(ParamEdit {
                param: ParamId::new(bn, kind),
                spec: rows.clone(),
            });
        }
        channel_layers.push(bn);
    }
    edits.push(ParamEdit {
        param: ParamId::new(switch, ParamKind::Beta),
        spec: rows.clone(),
    });
    channel_layers.push(switch);
    channel_layers.sort_unstable();

    let consumer_cols = match &net.layers()[consumer] {
        Layer::Linear(_) => channels
            .iter()
            .flat_map(|&c| c * site.block..(c + 1) * site.block)
            .collect(),
        _ => channels.clone(),
    };
    edits.push(ParamEdit {
        param: ParamId::new(consumer, ParamKind::Weight),
        spec: RemovalSpec::cols(consumer_cols),
    });

    Ok(RemovalPlan {
        switch,
        channels,
        edits,
        channel_layers,
        fingerprint,
    })
}

/// Applies a plan to the network and, when given, to the optimizer state.
pub fn apply_removal<S: Scalar>(
    net: &mut Network<S>,
    plan: &RemovalPlan,
    adam: Option<&mut AdamState<S>>,
) -> Result<()> {
    if fingerprint(net) != plan.fingerprint {
        return Err(Error::state(
            "removal plan is stale: parameter shapes changed since planning",
        ));
    }
    if plan.is_empty() {
        return Ok(());
    }
    let sw = net.switch(plan.switch).expect("fingerprinted switch");
    if let Some(&c) = plan.channels.iter().find(|&&c| sw.beta.data()[c] != S::zero()) {
        return Err(Error::state(format!(
            "channel {c} of switch {} still has nonzero beta; deactivate before removal",
            plan.switch
        )));
    }

    let mut shrunk = Vec::with_capacity(plan.edits.len());
    for e in &plan.edits {
        let t = net
            .param(e.param)
            .ok_or_else(|| Error::state(format!("plan references missing parameter {}", e.param)))?;
        shrunk.push(t.remove_indices(e.spec.axis, &e.spec.indices)?);
    }
    for (e, t) in plan.edits.iter().zip(shrunk) {
        *net.param_mut(e.param).expect("checked above") = t;
    }
    for &k in &plan.channel_layers {
        match &mut net.layers_vec_mut()[k] {
            Layer::BatchNorm(bn) => {
                bn.running_mean = bn.running_mean.remove_indices(0, &plan.channels)?;
                bn.running_var = bn.running_var.remove_indices(0, &plan.channels)?;
            }
            Layer::Switch(s) => s.remove_channel_state(&plan.channels),
            other => {
                return Err(Error::state(format!(
                    "layer {k} ({}) has no per-channel state",
                    other.name()
                )))
            }
        }
    }
    if let Some(adam) = adam {
        for e in &plan.edits {
            adam.shrink(e.param, &e.spec)?;
        }
    }
    net.validate()
}

/// Outcome of one collection pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectReport {
    /// `(switch layer, removed channel indices as numbered before removal)`
    pub removed: Vec<(usize, Vec<usize>)>,
    pub params_removed: usize,
}

/// Screens every removable switch, deactivates the flagged channels (always
/// sparing the last active one) and deletes all inactive channels.
pub fn collect<S: Scalar>(
    net: &mut Network<S>,
    mut adam: Option<&mut AdamState<S>>,
    cfg: &ScreenerConfig,
) -> Result<CollectReport> {
    let mut report = CollectReport::default();
    for idx in net.switch_indices() {
        let site = net.switch_site(idx)?;
        if site.consumer.is_none() || site.producer.is_none() || site.per_channel.iter().any(|&b| b > idx) {
            continue;
        }
        let sw = net.switch_mut(idx).expect("switch index");
        let mut flagged = sw.screen(cfg);
        if !flagged.is_empty() && flagged.len() == sw.active_count() {
            let keep = flagged
                .iter()
                .copied()
                .min_by(|&a, &b| sw.ema_var[a].total_cmp(&sw.ema_var[b]))
                .expect("non-empty");
            flagged.retain(|&c| c != keep);
        }
        sw.deactivate(&flagged)?;
        let inactive: Vec<usize> = (0..sw.channels()).filter(|&c| !sw.active[c]).collect();
        if inactive.is_empty() {
            continue;
        }
        let plan = plan_removal(net, idx, &inactive)?;
        report.params_removed += plan.removed_params(false);
        apply_removal(net, &plan, adam.as_deref_mut())?;
        report.removed.push((idx, inactive));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRow {
    pub epoch: usize,
    /// Position of the switched layer among all switched layers.
    pub layer: usize,
    pub active_channels: usize,
}

/// Per-epoch, per-layer active channel counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeHistory {
    pub rows: Vec<SizeRow>,
}

impl SizeHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the current widths and returns them.
    pub fn record<S: Scalar>(&mut self, net: &Network<S>, epoch: usize) -> Vec<SizeRow> {
        let rows: Vec<SizeRow> = net
            .switch_widths()
            .into_iter()
            .enumerate()
            .map(|(layer, active_channels)| SizeRow {
                epoch,
                layer,
                active_channels,
            })
            .collect();
        self.rows.extend_from_slice(&rows);
        rows
    }

    /// Widths recorded for `epoch`, in layer order.
    pub fn widths_at(&self, epoch: usize) -> Vec<usize> {
        let mut rows: Vec<&SizeRow> = self.rows.iter().filter(|r| r.epoch == epoch).collect();
        rows.sort_by_key(|r| r.layer);
        rows.into_iter().map(|r| r.active_channels).collect()
    }

    /// True when no layer ever grows between consecutive recorded epochs.
    pub fn is_non_increasing(&self) -> bool {
        let mut last: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
        let mut rows = self.rows.clone();
        rows.sort_by_key(|r| (r.epoch, r.layer));
        for r in rows {
            if let Some(&(_, prev)) = last.get(&r.layer) {
                if r.active_channels > prev {
                    return false;
                }
            }
            last.insert(r.layer, (r.epoch, r.active_channels));
        }
        true
    }

    /// CSV with header `epoch,layer,active_channels`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<SizeRow>, _>>()
            .map_err(csv_err)?;
        Ok(SizeHistory { rows })
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}
