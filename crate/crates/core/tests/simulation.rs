mod common;

use snnforge_core::ann::Checkpoint;
use snnforge_core::conversion::*;
use snnforge_core::network::NetworkBuilder;
use snnforge_core::neuron::ThresholdSchedule;
use snnforge_core::snn::*;
use snnforge_core::stats::collect_stats;
use snnforge_core::tensor::{argmax_channels, conv2d_forward, ConvParams, Tensor};

fn converted(ck: &Checkpoint, xs: &[Tensor], cfg: ConversionConfig) -> SpikingNetwork {
    let stats = collect_stats(ck, xs, 100.0).unwrap();
    convert(ck, &stats, &cfg).unwrap()
}

fn with_bias_scaled(p: &ConvParams, f: f64) -> ConvParams {
    let mut q = p.clone();
    q.bias = q.bias.scale(f);
    q
}

#[test]
fn single_neuron_constant_current() {
    let mut b = NetworkBuilder::new(1);
    let a = b.conv("a", 0, 1, 1, true);
    b.conv("out", a, 1, 1, false);
    let spec = b.finish().unwrap();
    let mut ck = Checkpoint::init(spec, common::meta(1)).unwrap();
    ck.params.get_mut(&a).unwrap().kernel.data_mut()[0] = 1.0;
    ck.params.get_mut(&a).unwrap().bias.data_mut()[0] = 0.0;
    let x = Tensor::full(&[1, 1, 1, 1], 0.3);
    let mut net = converted(&ck, &[x.clone()], ConversionConfig::default());
    // Undo normalisation so the neuron sees exactly 0.3 per step.
    net.params.insert(a, ck.params[&a].clone());
    net.schedules.insert(a, ThresholdSchedule::new(vec![1.0]).unwrap());
    let tr = simulate(&net, &x, 10).unwrap();
    assert!((tr.output_flow[a].data()[0] - 3.0).abs() < 1e-12);
    assert_eq!(tr.layer_spikes(a), 3);
}

#[test]
fn zero_input_zero_bias_is_silent() {
    let mut ck = common::chain(2, 2);
    for p in ck.params.values_mut() {
        p.bias = Tensor::zeros(p.bias.shape());
    }
    let xs = common::inputs(4, 1, 8, 8, 3);
    let net = converted(&ck, &xs, ConversionConfig::default());
    let tr = simulate(&net, &Tensor::zeros(&[1, 1, 8, 8]), 20).unwrap();
    assert_eq!(tr.total_spikes(), 0);
    assert!(tr.output_flow.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn flow_identity() {
    let (ck, _) = common::skip_disparity(4);
    let xs = common::inputs(2, 1, 8, 8, 5);
    let net = converted(&ck, &xs, ConversionConfig::default());
    let steps = 30;
    let tr = simulate(&net, &xs[0], steps).unwrap();
    for (&id, p) in &net.params {
        let src = net.spec.layers[id].inputs[0];
        let expected = conv2d_forward(&tr.output_flow[src], &with_bias_scaled(p, steps as f64)).unwrap();
        let got = &tr.input_flow[&id];
        assert!(got.sub(&expected).unwrap().max_abs() < 1e-9, "layer {id}");
    }
    assert_eq!(tr.final_flow(), &tr.input_flow[&net.spec.output()]);
}

#[test]
fn rates_track_analog_activations() {
    let ck = common::chain(2, 6);
    let xs = common::inputs(4, 1, 8, 8, 7);
    let net = converted(&ck, &xs, ConversionConfig::default());
    let mut prev = f64::INFINITY;
    for steps in [10, 50, 100, 200] {
        let (mut total, mut count, mut worst) = (0.0, 0usize, 0.0f64);
        for x in &xs {
            let analog = net.analog_forward(x).unwrap();
            let tr = simulate(&net, x, steps).unwrap();
            for id in net.spec.relu_layers() {
                for (f, a) in tr.output_flow[id].data().iter().zip(analog[id].data()) {
                    let d = (f / steps as f64 - a).abs();
                    total += d;
                    count += 1;
                    worst = worst.max(d);
                }
            }
        }
        let mean = total / count as f64;
        assert!(mean <= prev + 1e-12, "T={steps}: mean {mean} after {prev}");
        prev = mean;
        if steps == 100 {
            assert!(worst <= 1.0 / 16.0 + 1e-3, "worst {worst}");
        }
    }
}

#[test]
fn deterministic_traces() {
    let ck = common::chain(2, 8);
    let xs = common::inputs(2, 1, 8, 8, 9);
    let net = converted(&ck, &xs, ConversionConfig::default());
    let x = Tensor::stack_batch(&[&xs[0], &xs[1]]).unwrap();
    assert_eq!(simulate(&net, &x, 25).unwrap(), simulate(&net, &x, 25).unwrap());
}

#[test]
fn segmentation_decode_matches_analog_argmax() {
    let ck = common::chain(3, 10);
    let xs = common::inputs(8, 1, 8, 8, 11);
    let net = converted(&ck, &xs, ConversionConfig::default());
    let (mut agree, mut total) = (0, 0);
    for x in &xs {
        let analog = net.analog_forward(x).unwrap();
        let expected = argmax_channels(analog.last().unwrap()).unwrap();
        let got = decode_segmentation(&simulate(&net, x, 100).unwrap()).unwrap();
        agree += got[0].labels.iter().zip(&expected).filter(|(a, b)| a == b).count();
        total += expected.len();
    }
    assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
}

#[test]
fn decode_tie_breaks_low() {
    let flow = Tensor::full(&[1, 2, 2, 2], 1.5);
    let maps = logits_to_labels(&flow).unwrap();
    assert!(maps[0].labels.iter().all(|&l| l == 0));
    assert!(logits_to_labels(&Tensor::zeros(&[1, 1, 2, 2])).is_err());
}

#[test]
fn denoise_decode_approaches_analog() {
    let ck = common::chain(1, 12);
    let xs = common::inputs(2, 1, 8, 8, 13);
    let cfg = ConversionConfig::default();
    let net = converted(&ck, &xs, cfg.clone());
    let out = &net.params[&net.spec.output()];
    let resolution = 1.0 / (1u64 << cfg.thresholds) as f64;
    let co = out.out_channels();
    let per = out.kernel.len() / co;
    let bound = (0..co)
        .map(|o| out.kernel.data()[o * per..][..per].iter().map(|w| w.abs()).sum::<f64>() * resolution)
        .fold(0.0, f64::max);
    for x in &xs {
        let analog = net.analog_forward(x).unwrap();
        let decoded = decode_denoise(&simulate(&net, x, 200).unwrap());
        let diff = decoded.sub(analog.last().unwrap()).unwrap().max_abs();
        assert!(diff <= 2.0 * bound, "{diff} vs bound {bound}");
    }
}

#[test]
fn denoise_decode_is_scale_free() {
    let ck = common::chain(1, 14);
    let xs = common::inputs(1, 1, 4, 4, 15);
    let net = converted(&ck, &xs, ConversionConfig::default());
    let tr = simulate(&net, &xs[0], 10).unwrap();
    let mut doubled = tr.clone();
    doubled.steps = 20;
    let last = doubled.output_flow.len() - 1;
    doubled.output_flow[last] = tr.final_flow().scale(2.0);
    assert_eq!(decode_denoise(&tr), decode_denoise(&doubled));
    assert!(simulate(&net, &xs[0], 0).is_err());
}
