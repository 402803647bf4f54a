//! Sequential networks: shape validation, forward/backward over the whole
//! stack, and the channel topology around each switch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Cache, Layer, Mode, ParamId, ParamKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Network<S> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<S>>,
}

/// Per-layer caches from a forward pass; consumed by [`Network::backward`].
pub struct Tape<S> {
    caches: Vec<Cache<S>>,
    kinds: Vec<&'static str>,
    output_shape: Vec<usize>,
    unbatched: bool,
}

impl<S> Tape<S> {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<S> {
    map: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn new() -> Self {
        Gradients { map: BTreeMap::new() }
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor<S>> {
        self.map.get(id)
    }

    pub fn get_mut(&mut self, id: &ParamId) -> Option<&mut Tensor<S>> {
        self.map.get_mut(id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<S>) {
        self.map.insert(id, g);
    }

    pub fn remove(&mut self, id: &ParamId) -> Option<Tensor<S>> {
        self.map.remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// How a switch's scale can be folded into a neighbouring layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldTarget {
    /// Into the linear, conv or batchnorm layer directly before the switch.
    Previous(usize),
    /// Into the input columns (or input channels) of the consumer, reached
    /// through nothing but a flatten.
    Consumer(usize),
}

/// Layers that share a switch's channel axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchSite {
    pub switch: usize,
    /// Linear/conv layer that creates the channels.
    pub producer: Option<usize>,
    /// Per-channel layers (batchnorm) between producer and consumer, excluding the switch.
    pub per_channel: Vec<usize>,
    /// Linear/conv layer that reads the channels.
    pub consumer: Option<usize>,
    /// Consumer inputs per channel: `h·w` when a flatten sits in between, else 1.
    pub block: usize,
    pub fold: FoldTarget,
}

impl<S: Scalar> Network<S> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<S>>) -> Result<Self> {
        let net = Network { input_shape, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    /// Direct layer access. Callers must keep shapes consistent; run
    /// [`Network::validate`] after structural edits.
    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn layer(&self, idx: usize) -> Option<&Layer<S>> {
        self.layers.get(idx)
    }

    /// Per-sample input shape of every layer, followed by the network output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (k, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().expect("non-empty"))
                .map_err(|e| Error::dim(format!("layer {k}: {e}")))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().expect("validated network").pop().expect("non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {:?} must be non-empty with positive extents",
                self.input_shape
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let r = match layer {
                Layer::BatchNorm(b) => b.check(),
                Layer::Switch(s) => s.check(),
                Layer::Linear(l) => crate::layers::Linear::new(l.weight.clone(), l.bias.clone()).map(|_| ()),
                Layer::Conv2d(c) => {
                    crate::layers::Conv2d::new(c.weight.clone(), c.bias.clone(), c.stride, c.padding).map(|_| ())
                }
                _ => Ok(()),
            };
            r.map_err(|e| Error::Config(format!("layer {k} ({}): {e}", layer.name())))?;
        }
        self.shapes()?;
        for idx in self.switch_indices() {
            self.switch_site(idx)?;
        }
        Ok(())
    }

    pub fn switch_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Switch(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn switch(&self, idx: usize) -> Option<&crate::switch::SwitchLayer<S>> {
        match self.layers.get(idx) {
            Some(Layer::Switch(s)) => Some(s),
            _ => None,
        }
    }

    pub fn switch_mut(&mut self, idx: usize) -> Option<&mut crate::switch::SwitchLayer<S>> {
        match self.layers.get_mut(idx) {
            Some(Layer::Switch(s)) => Some(s),
            _ => None,
        }
    }

    /// Channel topology around the switch at layer `idx`.
    pub fn switch_site(&self, idx: usize) -> Result<SwitchSite> {
        if self.switch(idx).is_none() {
            return Err(Error::arg(format!("layer {idx} is not a switch")));
        }
        let shapes = self.shapes()?;

        let mut producer = None;
        let mut per_channel = Vec::new();
        for j in (0..idx).rev() {
            match &self.layers[j] {
                Layer::Linear(_) | Layer::Conv2d(_) => {
                    producer = Some(j);
                    break;
                }
                Layer::BatchNorm(_) => per_channel.push(j),
                Layer::Relu | Layer::MaxPool2d(_) => {}
                Layer::Flatten => break,
                Layer::Switch(_) => {
                    return Err(Error::Config(format!(
                        "switches at layers {j} and {idx} scale the same channels"
                    )))
                }
            }
        }
        per_channel.reverse();

        let mut consumer = None;
        let mut block = 1;
        let mut flattened = false;
        let mut only_flatten = true;
        for (j, layer) in self.layers.iter().enumerate().skip(idx + 1) {
            match layer {
                Layer::Linear(_) | Layer::Conv2d(_) => {
                    consumer = Some(j);
                    break;
                }
                Layer::Flatten => {
                    if !flattened {
                        block = shapes[j][1..].iter().product();
                        flattened = true;
                    }
                }
                Layer::BatchNorm(_) if !flattened => {
                    per_channel.push(j);
                    only_flatten = false;
                }
                Layer::Relu => only_flatten = false,
                Layer::MaxPool2d(_) if !flattened => only_flatten = false,
                _ => break,
            }
        }

        let fold = match idx.checked_sub(1).map(|j| &self.layers[j]) {
            Some(Layer::Linear(_) | Layer::Conv2d(_) | Layer::BatchNorm(_)) => FoldTarget::Previous(idx - 1),
            _ => match consumer {
                Some(c) if only_flatten => FoldTarget::Consumer(c),
                _ => {
                    return Err(Error::Config(format!(
                        "switch at layer {idx} cannot be folded: place it directly after a \
                         linear/conv/batchnorm layer or directly before a linear/conv layer"
                    )))
                }
            },
        };

        Ok(SwitchSite {
            switch: idx,
            producer,
            per_channel,
            consumer,
            block,
            fold,
        })
    }

    fn batch_input(&self, x: &Tensor<S>) -> Result<(Tensor<S>, bool)> {
        if x.shape() == self.input_shape.as_slice() {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            return Ok((x.clone().reshape(shape)?, true));
        }
        if x.rank() == self.input_shape.len() + 1 && x.shape()[1..] == self.input_shape[..] {
            return Ok((x.clone(), false));
        }
        Err(Error::dim(format!(
            "input {:?} does not match network input {:?} (optionally batched)",
            x.shape(),
            self.input_shape
        )))
    }

    fn unbatch(y: Tensor<S>, unbatched: bool) -> Tensor<S> {
        if unbatched {
            let shape = y.shape()[1..].to_vec();
            y.reshape(shape).expect("drop unit batch axis")
        } else {
            y
        }
    }

    /// Forward pass recording a tape. Train mode updates batchnorm running statistics.
    ///
    /// `x` is either one sample shaped like the input or a batch `(n, ...input)`.
    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, Tape<S>)> {
        let (mut h, unbatched) = self.batch_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (next, cache) = layer.forward(&h, mode);
            caches.push(cache);
            h = next;
        }
        let tape = Tape {
            caches,
            kinds: self.layers.iter().map(|l| l.name()).collect(),
            output_shape: h.shape().to_vec(),
            unbatched,
        };
        Ok((Self::unbatch(h, unbatched), tape))
    }

    /// Eval-mode forward; no tape, no state changes.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (mut h, unbatched) = self.batch_input(x)?;
        for layer in &self.layers {
            h = layer.infer(&h);
        }
        Ok(Self::unbatch(h, unbatched))
    }

    /// Backpropagates `grad_out` through the recorded tape.
    pub fn backward(&self, tape: &Tape<S>, grad_out: &Tensor<S>) -> Result<(Tensor<S>, Gradients<S>)> {
        let kinds: Vec<&str> = self.layers.iter().map(|l| l.name()).collect();
        if kinds != tape.kinds {
            return Err(Error::state("tape was recorded on a different network"));
        }
        let mut g = if tape.unbatched {
            let mut shape = vec![1];
            shape.extend_from_slice(grad_out.shape());
            grad_out.clone().reshape(shape)?
        } else {
            grad_out.clone()
        };
        if g.shape() != tape.output_shape.as_slice() {
            return Err(Error::dim(format!(
                "output gradient {:?} does not match forward output {:?}",
                grad_out.shape(),
                tape.output_shape
            )));
        }
        let mut grads = Gradients::new();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (dx, pgrads) = layer.backward(&tape.caches[k], &g)?;
            for (kind, t) in pgrads {
                grads.insert(ParamId::new(k, kind), t);
            }
            g = dx;
        }
        Ok((Self::unbatch(g, tape.unbatched), grads))
    }

    pub fn params(&self) -> Vec<(ParamId, &Tensor<S>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| l.params().into_iter().map(move |(kind, t)| (ParamId::new(k, kind), t)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Tensor<S>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(k, l)| {
                l.params_mut()
                    .into_iter()
                    .map(move |(kind, t)| (ParamId::new(k, kind), t))
            })
            .collect()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.layers
            .get(id.layer)?
            .params()
            .into_iter()
            .find(|(k, _)| *k == id.kind)
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<S>> {
        self.layers.get_mut(id.layer)?.param_mut(id.kind)
    }

    /// Number of trainable floats. Batchnorm running statistics are buffers, not parameters.
    pub fn param_count(&self, include_switches: bool) -> usize {
        self.params()
            .iter()
            .filter(|(id, _)| include_switches || id.kind != ParamKind::Beta)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Active channel count of each switch, in layer order.
    pub fn switch_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Switch(s) => Some(s.active_count()),
                _ => None,
            })
            .collect()
    }

    /// Zeroes `beta` gradients of inactive channels.
    pub fn mask_inactive_grads(&self, grads: &mut Gradients<S>) {
        for idx in self.switch_indices() {
            let sw = self.switch(idx).expect("switch index");
            if let Some(g) = grads.get_mut(&ParamId::new(idx, ParamKind::Beta)) {
                for (v, &a) in g.data_mut().iter_mut().zip(&sw.active) {
                    if !a {
                        *v = S::zero();
                    }
                }
            }
        }
    }

    pub fn clamp_inactive(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Switch(s) = layer {
                s.clamp_inactive();
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub(crate) fn layers_vec_mut(&mut self) -> &mut Vec<Layer<S>> {
        &mut self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNorm, Conv2d, Linear, MaxPool2d};
    use crate::rng::SeededRng;
    use crate::switch::SwitchLayer;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn empty_network_is_identity() {
        let mut net = Network::<f64>::new(vec![3], vec![]).unwrap();
        let x = t(&[3], &[1.0, -2.0, 3.0]);
        let (y, tape) = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(y, x);
        let g = t(&[3], &[0.5, 0.25, -1.0]);
        let (gx, grads) = net.backward(&tape, &g).unwrap();
        assert_eq!(gx, g);
        assert!(grads.is_empty());
    }

    #[test]
    fn identity_linear_then_relu() {
        let lin = Linear::new(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), Tensor::zeros(&[2])).unwrap();
        let net = Network::new(vec![2], vec![Layer::Linear(lin), Layer::Relu]).unwrap();
        assert_eq!(net.predict(&t(&[2], &[-1.0, 2.0])).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut rng = SeededRng::new(1);
        let lin = Linear::<f64>::init(3, 2, &mut rng);
        let mut net = Network::new(vec![3], vec![Layer::Linear(lin)]).unwrap();
        let x = t(&[3], &[1.0, 2.0, -1.0]);
        let g = t(&[2], &[0.5, -2.0]);
        let (_, tape) = net.forward(&x, Mode::Train).unwrap();
        let (_, grads) = net.backward(&tape, &g).unwrap();
        let dw = grads.get(&ParamId::new(0, ParamKind::Weight)).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(dw.data()[o * 3 + i], g.data()[o] * x.data()[i]);
            }
        }
        assert_eq!(grads.get(&ParamId::new(0, ParamKind::Bias)).unwrap(), &g);
    }

    #[test]
    fn shape_mismatch_names_layer_and_shapes() {
        let mut rng = SeededRng::new(1);
        let err = Network::<f64>::new(
            vec![4],
            vec![
                Layer::Linear(Linear::init(4, 3, &mut rng)),
                Layer::Linear(Linear::init(5, 2, &mut rng)),
            ],
        )
        .unwrap_err()
        .to_string();
        assert!(
            err.contains("layer 1") && err.contains("[5]") && err.contains("[3]"),
            "{err}"
        );

        let net = Network::<f64>::new(vec![4], vec![Layer::Linear(Linear::init(4, 3, &mut rng))]).unwrap();
        assert!(matches!(net.predict(&Tensor::zeros(&[2, 5])), Err(Error::Dimension(_))));
    }

    #[test]
    fn param_counts() {
        let mut rng = SeededRng::new(2);
        let net = Network::<f64>::new(vec![4], vec![Layer::Linear(Linear::init(4, 3, &mut rng))]).unwrap();
        assert_eq!(net.param_count(false), 15);
        let net = Network::<f64>::new(
            vec![2, 5, 5],
            vec![Layer::Conv2d(Conv2d::init(2, 4, 3, 1, 0, &mut rng))],
        )
        .unwrap();
        assert_eq!(net.param_count(false), 76);
    }

    #[test]
    fn switch_counted_only_on_request() {
        let mut rng = SeededRng::new(2);
        let net = Network::<f64>::new(
            vec![4],
            vec![
                Layer::Linear(Linear::init(4, 3, &mut rng)),
                Layer::Switch(SwitchLayer::init(3, &mut rng)),
                Layer::Relu,
                Layer::Linear(Linear::init(3, 2, &mut rng)),
            ],
        )
        .unwrap();
        assert_eq!(net.param_count(false), 15 + 8);
        assert_eq!(net.param_count(true), 15 + 8 + 3);
    }

    #[test]
    fn two_switches_on_one_producer_rejected() {
        let mut rng = SeededRng::new(2);
        let r = Network::<f64>::new(
            vec![4],
            vec![
                Layer::Linear(Linear::init(4, 3, &mut rng)),
                Layer::Switch(SwitchLayer::init(3, &mut rng)),
                Layer::Switch(SwitchLayer::init(3, &mut rng)),
                Layer::Linear(Linear::init(3, 2, &mut rng)),
            ],
        );
        assert!(r.is_err());
    }

    #[test]
    fn unfoldable_switch_rejected() {
        let mut rng = SeededRng::new(2);
        let r = Network::<f64>::new(
            vec![4],
            vec![
                Layer::Linear(Linear::init(4, 3, &mut rng)),
                Layer::Relu,
                Layer::Switch(SwitchLayer::init(3, &mut rng)),
                Layer::Relu,
                Layer::Linear(Linear::init(3, 2, &mut rng)),
            ],
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn site_through_flatten() {
        let mut rng = SeededRng::new(3);
        let net = Network::<f64>::new(
            vec![2, 6, 6],
            vec![
                Layer::Conv2d(Conv2d::init(2, 4, 3, 1, 1, &mut rng)),
                Layer::BatchNorm(BatchNorm::new(4)),
                Layer::Switch(SwitchLayer::init(4, &mut rng)),
                Layer::Relu,
                Layer::MaxPool2d(MaxPool2d { window: 3, stride: 3 }),
                Layer::Flatten,
                Layer::Linear(Linear::init(16, 5, &mut rng)),
            ],
        )
        .unwrap();
        let site = net.switch_site(2).unwrap();
        assert_eq!(site.producer, Some(0));
        assert_eq!(site.per_channel, vec![1]);
        assert_eq!(site.consumer, Some(6));
        assert_eq!(site.block, 4);
        assert_eq!(site.fold, FoldTarget::Previous(1));
    }

    #[test]
    fn eval_forward_is_side_effect_free_and_train_touches_only_running_stats() {
        let mut rng = SeededRng::new(4);
        let mut net = Network::<f64>::new(
            vec![3],
            vec![
                Layer::Linear(Linear::init(3, 4, &mut rng)),
                Layer::BatchNorm(BatchNorm::new(4)),
                Layer::Switch(SwitchLayer::init(4, &mut rng)),
                Layer::Relu,
                Layer::Linear(Linear::init(4, 2, &mut rng)),
            ],
        )
        .unwrap();
        let x = rng.normal_tensor::<f64>(&[5, 3]);
        let before = net.clone();
        let a = net.predict(&x).unwrap();
        let (b, _) = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(net, before);

        net.forward(&x, Mode::Train).unwrap();
        let mut changed = net.clone();
        if let (Layer::BatchNorm(n), Layer::BatchNorm(o)) = (&mut changed.layers[1], &before.layers[1]) {
            assert_ne!(n.running_mean, o.running_mean);
            n.running_mean = o.running_mean.clone();
            n.running_var = o.running_var.clone();
        }
        assert_eq!(changed, before);
    }

    #[test]
    fn flatten_keeps_channel_blocks_contiguous() {
        let net = Network::<f64>::new(vec![3, 2, 2], vec![Layer::Flatten]).unwrap();
        let x = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let y = net.predict(&x).unwrap();
        for c in 0..3 {
            assert!(y.data()[c * 4..(c + 1) * 4].iter().all(|&v| (v as usize) / 4 == c));
        }
    }
}
