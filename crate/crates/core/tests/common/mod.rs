#![allow(dead_code)]

use smallify_core::{ArchSpec, LayerSpec, Mode, Network64, SeededRng, SwitchInit, Tensor64};

/// Random MLP with every hidden layer switched, the switch either right after
/// the linear layer or right after its relu.
pub fn random_mlp(rng: &mut SeededRng) -> ArchSpec {
    let input = 2 + rng.below(5);
    let mut layers = Vec::new();
    for _ in 0..1 + rng.below(3) {
        layers.push(LayerSpec::Linear { out: 2 + rng.below(7) });
        if rng.below(2) == 0 {
            layers.extend([LayerSpec::Switch, LayerSpec::Relu]);
        } else {
            layers.extend([LayerSpec::Relu, LayerSpec::Switch]);
        }
    }
    layers.push(LayerSpec::Linear { out: 2 + rng.below(3) });
    ArchSpec {
        input: vec![input],
        layers,
    }
}

/// Random conv stack ending in `flatten -> linear` so removals cross the flatten.
pub fn random_conv(rng: &mut SeededRng) -> ArchSpec {
    let side = 5 + rng.below(4);
    let mut layers = Vec::new();
    let mut h = side;
    for block in 0..1 + rng.below(2) {
        let kernel = [1, 3][rng.below(2)];
        let padding = if kernel == 3 && h >= 3 {
            rng.below(2)
        } else if kernel == 3 {
            1
        } else {
            0
        };
        layers.push(LayerSpec::Conv2d {
            out: 2 + rng.below(4),
            kernel,
            stride: 1,
            padding,
        });
        h = h + 2 * padding + 1 - kernel;
        if rng.below(2) == 0 {
            layers.push(LayerSpec::BatchNorm {
                eps: 1e-5,
                momentum: 0.1,
            });
        }
        layers.extend([LayerSpec::Switch, LayerSpec::Relu]);
        if block == 0 && h >= 4 && rng.below(2) == 0 {
            layers.push(LayerSpec::MaxPool2d {
                window: 2,
                stride: None,
            });
            h /= 2;
        }
    }
    layers.push(LayerSpec::Flatten);
    if rng.below(2) == 0 {
        layers.extend([
            LayerSpec::Linear { out: 3 + rng.below(4) },
            LayerSpec::Switch,
            LayerSpec::Relu,
        ]);
    }
    layers.push(LayerSpec::Linear { out: 2 + rng.below(3) });
    ArchSpec {
        input: vec![1 + rng.below(3), side, side],
        layers,
    }
}

pub fn random_arch(rng: &mut SeededRng) -> ArchSpec {
    if rng.below(2) == 0 {
        random_mlp(rng)
    } else {
        random_conv(rng)
    }
}

pub fn batch_shape(net: &Network64, n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(net.input_shape());
    s
}

/// Builds the network and runs a few train-mode batches so batchnorm
/// running statistics are no longer at their defaults.
pub fn warmed(spec: &ArchSpec, rng: &mut SeededRng) -> Network64 {
    let mut net = spec.build::<f64>(rng, SwitchInit::Normal).unwrap();
    for _ in 0..3 {
        let x: Tensor64 = rng.normal_tensor(&batch_shape(&net, 6));
        net.forward(&x, Mode::Train).unwrap();
    }
    net
}
