mod common;

use snnforge_core::ann::Checkpoint;
use snnforge_core::ann::{backward_all, relu_gates, Gradients};
use snnforge_core::conversion::*;
use snnforge_core::data::{BatchTarget, Dataset, LabelMap, Sample, Target};
use snnforge_core::finetune::*;
use snnforge_core::network::{NetworkBuilder, Task};
use snnforge_core::optim::OptimizerConfig;
use snnforge_core::snn::simulate;
use snnforge_core::stats::collect_stats;
use snnforge_core::tensor::{conv2d_backward_params, Tensor};

fn flatten(g: &Gradients) -> Vec<f64> {
    g.values().flat_map(|p| p.kernel.data().iter().chain(p.bias.data()).copied()).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// conv3x3(1->3) relu, conv3x3(3->2) linear.
fn two_conv(seed: u64, v_max: f64, thresholds: usize) -> (SpikingNetwork, Vec<Tensor>) {
    let mut b = NetworkBuilder::new(1);
    let a = b.conv("a", 0, 3, 3, true);
    b.conv("out", a, 2, 3, false);
    let mut ck = Checkpoint::init(b.finish().unwrap(), common::meta(seed)).unwrap();
    // Channel 0 is always on and channel 1 always off, so both sit far from
    // the gate kink; channel 2 keeps its random mix.
    let p = ck.params.get_mut(&a).unwrap();
    let k = p.kernel.data_mut();
    k[..9].iter_mut().for_each(|v| *v = v.abs());
    k[9..18].iter_mut().for_each(|v| *v = -v.abs());
    p.bias.data_mut().copy_from_slice(&[0.5, -0.1, 0.1]);
    let xs = common::inputs(4, 1, 12, 12, seed + 1);
    let stats = collect_stats(&ck, &xs, 100.0).unwrap();
    let cfg = ConversionConfig { thresholds, v_max, ..ConversionConfig::default() };
    (convert(&ck, &stats, &cfg).unwrap(), xs)
}

fn labels_for(x: &Tensor) -> Vec<usize> {
    x.data().iter().map(|&v| usize::from(v > 0.5)).collect()
}

#[test]
fn zero_gradient_in_gives_zero_gradient_out() {
    let (net, xs) = two_conv(1, 1.0, 4);
    let tr = simulate(&net, &xs[0], 10).unwrap();
    let g = asf_backward(&tr, &net, &Tensor::zeros(tr.final_flow().shape())).unwrap();
    assert!(flatten(&g).iter().all(|&v| v == 0.0));
}

#[test]
fn single_linear_layer_matches_conv_backward() {
    let mut b = NetworkBuilder::new(2);
    b.conv("out", 0, 3, 3, false);
    let ck = Checkpoint::init(b.finish().unwrap(), common::meta(2)).unwrap();
    let xs = common::inputs(2, 2, 6, 6, 3);
    let stats = collect_stats(&ck, &xs, 99.9).unwrap();
    let net = convert(&ck, &stats, &ConversionConfig::default()).unwrap();
    let steps = 7;
    let tr = simulate(&net, &xs[0], steps).unwrap();
    let g = Tensor::from_fn(tr.final_flow().shape(), |i| ((i * 37) % 11) as f64 - 5.0);
    let asf = asf_backward(&tr, &net, &g).unwrap();
    let conv = conv2d_backward_params(&xs[0].scale(steps as f64), &net.params[&1], &g).unwrap();
    assert!(asf[&1].kernel.sub(&conv.kernel).unwrap().max_abs() < 1e-9);
    assert!(asf[&1].bias.sub(&conv.bias.scale(steps as f64)).unwrap().max_abs() < 1e-9);
}

#[test]
fn gradient_matches_finite_differences_through_simulation() {
    let steps = 50;
    let (net, xs) = two_conv(4, 1.2, 4);
    let x = Tensor::stack_batch(&xs.iter().collect::<Vec<_>>()).unwrap();
    let labels = labels_for(&x);
    let loss_of = |n: &SpikingNetwork| {
        let tr = simulate(n, &x, steps).unwrap();
        loss_segmentation(&tr.final_flow().scale(1.0 / steps as f64), &labels).unwrap().0
    };
    let tr = simulate(&net, &x, steps).unwrap();
    let (_, g) = loss_segmentation(&tr.final_flow().scale(1.0 / steps as f64), &labels).unwrap();
    let grads = asf_backward(&tr, &net, &g.scale(1.0 / steps as f64)).unwrap();

    let margin = 0.05 * steps as f64;
    let a = 1;
    let acc = &tr.input_flow[&a];
    let plane = acc.len() / (x.shape()[0] * 3);
    // A hidden weight qualifies when every neuron of its output channel is far from the gate kink.
    let clear = |o: usize| {
        (0..x.shape()[0]).all(|b| acc.data()[(b * 3 + o) * plane..][..plane].iter().all(|v| v.abs() > margin))
    };
    let mut checked = 0;
    for (&id, p) in &net.params {
        let hidden = id == a;
        let h = if hidden { 2e-2 } else { 1e-5 };
        let per = p.kernel.len() / p.out_channels();
        for k in 0..p.kernel.len() {
            if hidden && !clear(k / per) {
                continue;
            }
            let mut plus = net.clone();
            plus.params.get_mut(&id).unwrap().kernel.data_mut()[k] += h;
            let mut minus = net.clone();
            minus.params.get_mut(&id).unwrap().kernel.data_mut()[k] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = grads[&id].kernel.data()[k];
            let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(err <= 0.05, "layer {id} weight {k}: fd {fd} analytic {an}");
            checked += 1;
        }
    }
    assert!(checked > 18, "only {checked} weights qualified");
}

#[test]
fn converges_to_relu_gradient() {
    let steps = 200;
    let (net, xs) = two_conv(5, 1.2, 6);
    let x = Tensor::stack_batch(&xs.iter().collect::<Vec<_>>()).unwrap();
    let labels = labels_for(&x);
    let analog = net.analog_forward(&x).unwrap();
    let (_, g) = loss_segmentation(analog.last().unwrap(), &labels).unwrap();
    let gates = relu_gates(&net.spec, &analog);
    let ann = backward_all(&net.spec, &net.params, &analog, &gates, &g, 1.0).unwrap();

    let tr = simulate(&net, &x, steps).unwrap();
    let (_, gs) = loss_segmentation(&tr.final_flow().scale(1.0 / steps as f64), &labels).unwrap();
    let asf = asf_backward(&tr, &net, &gs.scale(1.0 / steps as f64)).unwrap();
    let err = rel_err(&flatten(&asf), &flatten(&ann));
    assert!(err <= 0.10, "relative error {err}");
}

#[test]
fn gates_mask_gradient_contributions() {
    let (net, xs) = two_conv(6, 1.0, 4);
    let mut tr = simulate(&net, &xs[0], 20).unwrap();
    let g = Tensor::full(tr.final_flow().shape(), 0.1);
    let base = asf_backward(&tr, &net, &g).unwrap();
    let gate = tr.gates.get_mut(&1).unwrap();
    gate.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let closed = asf_backward(&tr, &net, &g).unwrap();
    assert!(closed[&1].kernel.data().iter().all(|&v| v == 0.0));
    assert!(closed[&1].bias.data().iter().all(|&v| v == 0.0));
    assert!(base[&1].kernel.max_abs() > 0.0);
    // The output layer reads the gated flow, so it sees no input either.
    assert_eq!(closed[&2].kernel.max_abs(), 0.0);
}

fn toy_dataset() -> Dataset {
    let xs = common::inputs(1, 1, 8, 8, 20);
    let labels = labels_for(&xs[0]);
    Dataset {
        task: Task::Segmentation,
        num_classes: 2,
        samples: vec![Sample { input: xs[0].clone(), target: Target::Labels(LabelMap::new(8, 8, labels).unwrap()) }],
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let (net, _) = two_conv(7, 1.0, 4);
    let cfg = FinetuneConfig { optimizer: OptimizerConfig::adam(0.0), epochs: 2, ..FinetuneConfig::default() };
    let (out, rep) = finetune(&net, &toy_dataset(), &cfg).unwrap();
    assert_eq!(out.params, net.params);
    assert_eq!(rep.step_losses.len(), 2);
}

#[test]
fn overfits_one_sample() {
    let (net, _) = two_conv(8, 1.0, 4);
    let cfg = FinetuneConfig { optimizer: OptimizerConfig::adam(1e-2), epochs: 200, ..FinetuneConfig::default() };
    let (_, rep) = finetune(&net, &toy_dataset(), &cfg).unwrap();
    let first = rep.step_losses[0];
    let best = rep.step_losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(best <= 0.5 * first, "{first} -> {best}");
}

#[test]
fn task_mismatch_and_denoise_loss() {
    let (net, _) = two_conv(9, 1.0, 4);
    let cfg = FinetuneConfig { task: Some(Task::Denoising), ..FinetuneConfig::default() };
    assert!(finetune(&net, &toy_dataset(), &cfg).is_err());
    let noise = Tensor::full(&[1, 1, 2, 2], 0.25);
    let (l, _) = loss_denoise(&noise.scale(10.0), 10, &noise).unwrap();
    assert_eq!(l, 0.0);
    let (l, _) = loss_denoise(&Tensor::zeros(&[1, 1, 2, 2]), 10, &noise).unwrap();
    assert!((l - 0.25).abs() < 1e-15);
    let trace = simulate(&net, &Tensor::zeros(&[1, 1, 2, 2]), 3).unwrap();
    assert!(flow_loss(&trace, &BatchTarget::Labels(vec![0; 4])).is_ok());
}
