mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnforge_core::ann::Checkpoint;
use snnforge_core::conversion::{convert, ConversionConfig};
use snnforge_core::energy::*;
use snnforge_core::network::{build_unet, LayerKind, NetworkSpec, Task};
use snnforge_core::snn::simulate;
use snnforge_core::stats::collect_stats;
use snnforge_core::tensor::*;

/// Number of MAC reads caused by one unit at `pos` of layer `id`, found by
/// pushing an indicator through the graph and convolving with all-ones kernels.
fn brute_fan_out(spec: &NetworkSpec, h: usize, w: usize, id: usize, pos: usize) -> u64 {
    let channels = spec.channels().unwrap();
    let sizes = spec.spatial(h, w).unwrap();
    let n = spec.layers.len();
    let mut ind: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
    let shape = |l: usize| [1, channels[l], sizes[l].0, sizes[l].1];
    let mut one = Tensor::zeros(&shape(id));
    one.data_mut()[pos] = 1.0;
    ind[id] = Some(one);
    let binary = |t: Tensor| t.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
    let mut total = 0.0;
    for l in id + 1..n {
        let layer = &spec.layers[l];
        let get = |k: usize| ind[layer.inputs[k]].clone().unwrap_or_else(|| Tensor::zeros(&shape(layer.inputs[k])));
        if layer.inputs.iter().all(|&s| ind[s].is_none()) {
            continue;
        }
        match &layer.kind {
            LayerKind::Conv { out_channels, kernel, stride, padding, .. } => {
                let src = get(0);
                let p = ConvParams::new(
                    Tensor::full(&[*out_channels, channels[layer.inputs[0]], *kernel, *kernel], 1.0),
                    Tensor::zeros(&[*out_channels]),
                    *stride,
                    *padding,
                )
                .unwrap();
                total += conv2d_forward(&src, &p).unwrap().sum();
            }
            LayerKind::AvgPool { window } => ind[l] = Some(binary(avgpool2d_forward(&get(0), *window).unwrap())),
            LayerKind::Upsample2x => ind[l] = Some(binary(upsample2x_forward(&get(0)).unwrap())),
            LayerKind::Concat => ind[l] = Some(concat_channels(&get(0), &get(1)).unwrap()),
            LayerKind::Input { .. } => {}
        }
    }
    total as u64
}

#[test]
fn fan_out_matches_indicator_propagation() {
    let spec = build_unet(1.0 / 32.0, 1, 2, Task::Segmentation).unwrap();
    let (h, w) = (16, 16);
    let maps = fan_out_maps(&spec, h, w).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for id in spec.relu_layers() {
        for _ in 0..6 {
            let pos = rng.random_range(0..maps[id].len());
            assert_eq!(maps[id][pos], brute_fan_out(&spec, h, w, id, pos), "layer {} pos {pos}", spec.layers[id].name);
        }
        // Corners hit the border handling.
        assert_eq!(maps[id][0], brute_fan_out(&spec, h, w, id, 0));
    }
}

#[test]
fn snn_counts_match_per_spike_oracle() {
    let spec = build_unet(1.0 / 32.0, 1, 2, Task::Segmentation).unwrap();
    let ck = Checkpoint::init(spec, common::meta(2)).unwrap();
    let xs = common::inputs(2, 1, 16, 16, 3);
    let stats = collect_stats(&ck, &xs, 99.9).unwrap();
    let net = convert(&ck, &stats, &ConversionConfig::default()).unwrap();
    let tr = simulate(&net, &xs[0], 5).unwrap();
    let counts = count_snn_flops(&tr, &net).unwrap();
    let mut expected = 0u64;
    for (&id, c) in &tr.spike_counts {
        for (pos, &k) in c.iter().enumerate() {
            if k > 0 {
                expected += k as u64 * brute_fan_out(&net.spec, 16, 16, id, pos);
            }
        }
    }
    assert_eq!(counts.op_spikes, expected);
    assert_eq!(counts.spikes, tr.total_spikes());
    // Only enc1_conv1 reads the input: 2 channels x 16 x 16 positions x 9 taps.
    assert_eq!(counts.op_input_layer, 2 * 16 * 16 * 9);
}

#[test]
fn unet_flops_closed_form() {
    let (h, w, c0) = (64u64, 64u64, 4u64);
    let spec = build_unet(1.0 / 16.0, 1, 3, Task::Segmentation).unwrap();
    let conv = |cin: u64, cout: u64, k: u64, s: u64| cin * cout * k * k * s * s;
    let mut expected = 0;
    let mut cin = 1;
    for stage in 0..4u32 {
        let (c, s) = (c0 << stage, h >> stage);
        expected += conv(cin, c, 3, s) + conv(c, c, 3, s) + c * (s / 2) * (s / 2) * 4;
        cin = c;
    }
    let cb = c0 << 4;
    expected += conv(cin, cb, 3, h / 16) + conv(cb, cb, 3, h / 16);
    let mut below = cb;
    for stage in (0..4u32).rev() {
        let (c, s) = (c0 << stage, h >> stage);
        expected += conv(below, c, 2, s) + conv(2 * c, c, 3, s) + conv(c, c, 3, s);
        below = c;
    }
    expected += conv(c0, 3, 1, h);
    assert_eq!(h, w);
    assert_eq!(ann_flops(&spec, 64, 64).unwrap(), expected);
}

#[test]
fn snn_work_grows_with_time_window() {
    let spec = build_unet(1.0 / 32.0, 1, 2, Task::Segmentation).unwrap();
    let ck = Checkpoint::init(spec, common::meta(4)).unwrap();
    let xs = common::inputs(2, 1, 16, 16, 5);
    let stats = collect_stats(&ck, &xs, 99.9).unwrap();
    let net = convert(&ck, &stats, &ConversionConfig::default()).unwrap();
    let mut prev = 0;
    for t in [5, 10, 20, 40] {
        let c = count_snn_flops(&simulate(&net, &xs[1], t).unwrap(), &net).unwrap();
        assert!(c.op_spikes >= prev);
        prev = c.op_spikes;
    }
    assert!(prev > 0);
}

#[test]
fn energy_reports_add_up() {
    let m = EnergyModel::default();
    let counts = SnnCounts { op_spikes: 1000, op_input_layer: 10, spikes: 50, samples: 2 };
    let r = snn_energy(&counts, 100, &m);
    assert!((r.ops_energy - (1000.0 * 0.9 + 10.0 * 4.6) * 1e-12).abs() < 1e-24);
    assert!((r.memory_accesses - 1110.0).abs() < 1e-12);
    assert!((r.total_energy - r.ops_energy - r.memory_energy).abs() < 1e-24);
    let a = ann_energy(65_500_000_000, 0, &m);
    assert!((a.ops_energy / 3.01e-1 - 1.0).abs() < 0.01);
    assert_eq!(counts.per_sample().op_spikes, 500);
}
