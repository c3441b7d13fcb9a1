mod common;

use common::*;
use modalnet::attention::Linear;
use modalnet::cost::{attention_overhead, cost_report, count_flops, count_params};
use modalnet::graph::AttentionMode;
use modalnet::model::{apply_attention, apply_table_peers, parse_architecture, AttentionSharing, ModalityInputs, Model, ModelConfig, DEFAULT_TABLE};
use modalnet::params::{read_manifest, ParamClass, ParamStore, Ratio};
use modalnet::tape::{CostKind, Tape};
use modalnet::tensor::{Shape, Tensor};

fn table_model(mode: Option<AttentionMode>, config: &ModelConfig) -> Model {
    let table = parse_architecture(DEFAULT_TABLE).unwrap();
    let mut graph = table.graph(config).unwrap();
    match mode {
        Some(m) => apply_attention(&mut graph, m).unwrap(),
        None => apply_table_peers(&mut graph, &table).unwrap(),
    }
    Model::from_graph(graph, config, table.num_classes, None).unwrap()
}

fn inputs_for(model: &Model, batch: usize, frames: usize, seed: u64) -> ModalityInputs {
    let (h, w) = (model.config.height, model.config.width);
    let mut r = rng(seed);
    let objects = model.config.object_channels.unwrap_or(151);
    ModalityInputs {
        rgb: Some(random(Shape::new(batch, frames, h, w, 3), &mut r)),
        flow: Some(random(Shape::new(batch, frames, h, w, 2), &mut r)),
        object: Some(random(Shape::new(batch, frames, h, w, objects), &mut r)),
    }
}

fn instrumented(model: &Model, inputs: &ModalityInputs) -> Tape {
    let mut tape = Tape::new();
    model.forward(&mut tape, inputs).unwrap();
    tape
}

fn small() -> ModelConfig {
    ModelConfig { depth_scale: Ratio::new(1, 2).unwrap(), frames: 2, batch: 2, ..ModelConfig::default() }
}

#[test]
fn static_counts_equal_instrumented_forward() {
    let config = small();
    let per_dest = ModelConfig { sharing: AttentionSharing::PerDestination, ..small() };
    let cases = [
        table_model(Some(AttentionMode::None), &config),
        table_model(Some(AttentionMode::Static), &config),
        table_model(Some(AttentionMode::SelfAttention), &config),
        table_model(Some(AttentionMode::OneShot), &config),
        table_model(None, &config),
        table_model(None, &per_dest),
        table_model(Some(AttentionMode::OneShot), &config).prune_attention().unwrap(),
    ];
    for model in &cases {
        let tape = instrumented(model, &inputs_for(model, 2, 3, 1));
        let counted = count_flops(model, 2, 3);
        for kind in CostKind::ALL {
            assert_eq!(tape.flops().get(kind), counted[&kind], "{kind:?} for {:?}", model.slots.first().map(|s| s.mode));
        }
    }
    let (model, inputs, _) = tiny_model(3);
    let tape = instrumented(&model, &inputs);
    let counted = count_flops(&model, 2, 3);
    assert_eq!(tape.flops().total(), counted.values().sum::<u64>());
}

#[test]
fn head_parameter_formula() {
    let mut store = ParamStore::new();
    let fc = Linear::new(&mut store, "fc", ParamClass::AttentionHead, Tensor::zeros(Shape::new(1, 1, 1, 64, 32)), Tensor::zeros(Shape::vector(32)));
    assert_eq!(fc.param_count(), 2080);
    assert_eq!(store.total_elements(), 2080);
}

#[test]
fn pointwise_conv_costs_spatial_extent_times_fc() {
    use modalnet::blocks::ConvLayer;
    use modalnet::tape::ConvGeometry;
    let mut store = ParamStore::new();
    let c = 24;
    let conv = ConvLayer::new(&mut store, "pw", ParamClass::Conv, [1, 1, 1], c, c, ConvGeometry::UNIT, 1.0, &mut rng(1));
    let fc = Linear::new(&mut store, "fc", ParamClass::AttentionHead, Tensor::zeros(Shape::new(1, 1, 1, c, c)), Tensor::zeros(Shape::vector(c)));
    let (t, h, w) = (4, 7, 9);
    assert_eq!(conv.flops(t, h, w), (h * w) as u64 * fc.flops(t));
}

#[test]
fn object_block_is_free() {
    let model = table_model(Some(AttentionMode::None), &small());
    assert_eq!(model.blocks[&4].param_count(), 0);
    assert!(model.params.iter().all(|(_, p)| !p.name.starts_with("block4.")));
}

#[test]
fn totals_and_ratios_are_consistent() {
    for mode in [AttentionMode::None, AttentionMode::OneShot] {
        let model = table_model(Some(mode), &small());
        let report = cost_report(&model, 2, 4);
        assert_eq!(report.total_params, report.components.values().map(|c| c.params).sum::<u64>());
        assert_eq!(report.total_flops, report.components.values().map(|c| c.flops).sum::<u64>());
        assert_eq!(report.total_params, model.params.total_elements() as u64);
        assert!((0.0..=1.0).contains(&report.attention_param_ratio));
        assert!((0.0..=1.0).contains(&report.attention_flops_ratio));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["total_params"], report.total_params);
    }
}

#[test]
fn params_agree_with_the_checkpoint_manifest() {
    let model = table_model(Some(AttentionMode::OneShot), &small());
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), "m").unwrap();
    let manifest = read_manifest(dir.path(), "m").unwrap();
    let listed: u64 = manifest.params.values().map(|e| e.shape.iter().product::<usize>() as u64).sum();
    assert_eq!(listed, count_params(&model).values().sum::<u64>());
    assert_eq!(manifest.total_elements as u64, listed);
}

#[test]
fn flops_scale_with_batch_and_params_do_not() {
    let model = table_model(None, &small());
    let one = cost_report(&model, 1, 4);
    let two = cost_report(&model, 2, 4);
    assert_eq!(two.total_flops, 2 * one.total_flops);
    assert_eq!(two.total_params, one.total_params);
    for (name, c) in &one.components {
        assert_eq!(two.components[name].flops, 2 * c.flops);
    }
}

#[test]
fn attention_head_flops_ignore_spatial_size() {
    let heads = |size: usize| {
        let config = ModelConfig { height: size, width: size, ..small() };
        count_flops(&table_model(None, &config), 1, 4)[&CostKind::Attention]
    };
    let base = heads(16);
    assert!(base > 0);
    assert_eq!(heads(32), base);
    assert_eq!(heads(64), base);
}

#[test]
fn overhead_of_identical_models_is_zero_and_mismatches_are_refused() {
    let plain = table_model(Some(AttentionMode::None), &small());
    assert_eq!(attention_overhead(&plain, &plain, 1, 4).unwrap(), (0.0, 0.0));
    let other = Model::from_graph(plain.graph().densify(), &plain.config, plain.num_classes, None).unwrap();
    assert!(attention_overhead(&other, &plain, 1, 4).is_err());
    let peers = table_model(None, &small());
    let (p, f) = attention_overhead(&peers, &plain, 1, 4).unwrap();
    assert!(p > 0.0 && f > 0.0);
}
