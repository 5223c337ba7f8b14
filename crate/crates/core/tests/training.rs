use std::cell::RefCell;
use std::collections::VecDeque;

use vanishnet::candle_core::{DType, Device, Tensor};
use vanishnet::config::{desk_model, desk_train};
use vanishnet::data::{grid_target, synth_dataset, SynthConfig};
use vanishnet::heads::logit;
use vanishnet::nn::ParamGroup;
use vanishnet::training::{collate, parameter_snapshot, resize_all, train_step, Sgd};
use vanishnet::{
    decode, evaluate, fit, Detector, GridPrediction, ImageSample, LossConfig, ModelConfig, Point, Result,
    TrainConfig, Trainer, VpNet, VpPrediction,
};

fn synth(n: usize, seed: u64) -> Vec<ImageSample> {
    synth_dataset(n, seed, SynthConfig::default())
        .unwrap()
        .into_iter()
        .map(|s| s.sample)
        .collect()
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        augment: true,
        ..desk_train()
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let data = synth(6, 11);
    let model = desk_model();
    let loss = LossConfig::default();
    let straight = fit(&data, &model, &small_train(4), &loss).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("half.safetensors");
    fit(&data, &model, &small_train(2), &loss).unwrap().save(&ckpt).unwrap();
    let mut resumed = Trainer::load(&ckpt).unwrap();
    assert_eq!(resumed.epoch(), 2);
    resumed.set_epochs(4);
    resumed.fit(&data).unwrap();

    assert_eq!(straight.history(), resumed.history());
    assert_eq!(
        parameter_snapshot(straight.model()).unwrap(),
        parameter_snapshot(resumed.model()).unwrap()
    );
}

fn batch_for(model: &VpNet, data: &[ImageSample]) -> vanishnet::training::Batch {
    let cfg = model.config();
    let resized = resize_all(data, cfg.input_size()).unwrap();
    let refs: Vec<&ImageSample> = resized.iter().collect();
    collate(&refs, None, cfg.input_size(), 3.0, cfg.grid_scale, &Device::Cpu).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let net = VpNet::seeded(&desk_model(), DType::F32, 1).unwrap();
    let batch = batch_for(&net, &synth(4, 2));
    let before = parameter_snapshot(&net).unwrap();
    let mut opt = Sgd::new(net.store(), 0.9, 0.0);
    for _ in 0..3 {
        train_step(&net, &mut opt, &batch, &LossConfig::default(), (0.0, 0.0)).unwrap();
    }
    assert_eq!(before, parameter_snapshot(&net).unwrap());
}

#[test]
fn backbone_rate_only_touches_backbone_parameters() {
    let net = VpNet::seeded(&desk_model(), DType::F32, 1).unwrap();
    let batch = batch_for(&net, &synth(4, 2));
    let before = parameter_snapshot(&net).unwrap();
    let mut opt = Sgd::new(net.store(), 0.9, 0.0);
    train_step(&net, &mut opt, &batch, &LossConfig::default(), (1e-3, 0.0)).unwrap();
    let after = parameter_snapshot(&net).unwrap();
    let groups: Vec<ParamGroup> = net.store().params().into_iter().map(|(_, p)| p.group).collect();
    let mut moved_backbone = 0;
    for (((name, a), (_, b)), group) in before.iter().zip(&after).zip(groups) {
        match group {
            ParamGroup::Backbone => moved_backbone += usize::from(a != b),
            ParamGroup::Rest => assert_eq!(a, b, "{name} moved with a zero rate"),
        }
    }
    assert!(moved_backbone > 0);
}

#[test]
fn every_parameter_is_in_exactly_one_group() {
    let net = VpNet::seeded(&ModelConfig::default(), DType::F32, 0).unwrap();
    for (name, p) in net.store().params() {
        let backbone = name.starts_with("backbone.");
        assert_eq!(backbone, p.group == ParamGroup::Backbone, "{name}");
    }
}

#[test]
fn fifty_steps_on_one_batch_reduce_the_loss() {
    let net = VpNet::seeded(&desk_model(), DType::F32, 3).unwrap();
    let batch = batch_for(&net, &synth(4, 5));
    let mut opt = Sgd::new(net.store(), 0.9, 0.0);
    let loss = LossConfig::default();
    let first = train_step(&net, &mut opt, &batch, &loss, (1e-3, 1e-2)).unwrap().total;
    let mut last = first;
    for _ in 0..49 {
        last = train_step(&net, &mut opt, &batch, &loss, (1e-3, 1e-2)).unwrap().total;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn identical_inputs_give_identical_steps() {
    let data = synth(4, 6);
    let run = || {
        let net = VpNet::seeded(&desk_model(), DType::F32, 4).unwrap();
        let batch = batch_for(&net, &data);
        let mut opt = Sgd::new(net.store(), 0.9, 0.0);
        let b = train_step(&net, &mut opt, &batch, &LossConfig::default(), (1e-3, 1e-2)).unwrap();
        (b, parameter_snapshot(&net).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn history_has_one_row_per_epoch() {
    let t = fit(&synth(3, 7), &desk_model(), &small_train(3), &LossConfig::default()).unwrap();
    let epochs: Vec<usize> = t.history().iter().map(|h| h.epoch).collect();
    assert_eq!(epochs, [0, 1, 2]);
    assert!(t.history().iter().all(|h| h.total.is_finite()));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.safetensors");
    fit(&synth(2, 8), &desk_model(), &small_train(1), &LossConfig::default())
        .unwrap()
        .save(&ckpt)
        .unwrap();
    let bytes = std::fs::read(&ckpt).unwrap();
    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() / 2);
    std::fs::write(&ckpt, truncated).unwrap();
    assert!(Trainer::load(&ckpt).is_err());
}

/// Encodes each queued truth as a saturated grid and decodes it with the
/// production decoder.
struct Oracle {
    size: usize,
    truths: RefCell<VecDeque<Point>>,
}

impl Detector for Oracle {
    fn input_size(&self) -> usize {
        self.size
    }

    fn detect(&self, images: &Tensor) -> Result<Vec<VpPrediction>> {
        let cells = self.size / 2;
        (0..images.dim(0)?)
            .map(|_| {
                let vp = self.truths.borrow_mut().pop_front().expect("one truth per image");
                let t = grid_target(vp, 2.0, self.size)?;
                let mut p = GridPrediction::filled(cells, cells, -30.0, 0.0);
                let i = t.cell.0 * cells + t.cell.1;
                p.confidence[i] = 30.0;
                p.offset_x[i] = logit(t.offsets.0);
                p.offset_y[i] = logit(t.offsets.1);
                decode(&p, 2.0)
            })
            .collect()
    }
}

fn intersect((a, b): (Point, Point), (c, d): (Point, Point)) -> Point {
    let (r, s) = ((b.x - a.x, b.y - a.y), (d.x - c.x, d.y - c.y));
    let den = r.0 * s.1 - r.1 * s.0;
    let t = ((c.x - a.x) * s.1 - (c.y - a.y) * s.0) / den;
    Point::new(a.x + t * r.0, a.y + t * r.1)
}

#[test]
fn oracle_prediction_lands_on_the_edge_intersection() {
    let set = synth_dataset(12, 21, SynthConfig::default()).unwrap();
    let size = 320;
    let samples: Vec<ImageSample> = set.iter().map(|s| s.sample.clone()).collect();
    let resized = resize_all(&samples, size).unwrap();
    let oracle = Oracle {
        size,
        truths: RefCell::new(resized.iter().map(|s| s.vp).collect()),
    };
    let report = evaluate(&oracle, &samples, &Device::Cpu).unwrap();
    for (s, r) in set.iter().zip(&report.records) {
        let x = intersect(s.edges[0], s.edges[1]);
        assert!(r.pred.dist(x) < 0.5, "{}: {:?} vs {x:?}", r.id, r.pred);
    }
}
