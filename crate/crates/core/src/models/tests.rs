use super::*;
use crate::gradcheck::check_model;
use crate::layers::{count_layer_params, Conv3dSpec};
use crate::tensor::{Rng, Tensor};
use proptest::prelude::*;

fn small(arch: Architecture) -> ModelConfig {
    let base = ModelConfig::reference(arch);
    match arch {
        Architecture::Convnet3d => ModelConfig { widths: vec![4, 6], head_hidden: vec![5], ..base },
        Architecture::Resnet3d => ModelConfig {
            widths: vec![4, 8, 8, 12],
            stem_width: Some(4),
            ..base
        },
        Architecture::Convnext3d => ModelConfig { widths: vec![4, 8, 8], depthwise_kernel: 3, ..base },
    }
}

fn input(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::rand_normal(shape, 0.0, 1.0, &mut Rng::new(seed, 9)).unwrap()
}

fn tiny_plan(nodes: Vec<PlanNode>) -> Plan {
    Plan { config: ModelConfig::reference(Architecture::Convnet3d), nodes }
}

#[test]
fn forward_shape_and_range_for_every_architecture() {
    for arch in Architecture::ALL {
        let mut model = Model::<f32>::build(&small(arch), 1).unwrap();
        let x = input(&[1, 3, 32, 64, 64], 2);
        for training in [false, true] {
            let y = model.forward(&x, training).unwrap();
            assert_eq!(y.shape(), &[1, 1], "{arch}");
            let s = y.data()[0];
            assert!(s > 0.0 && s < 1.0, "{arch}: {s}");
        }
    }
}

#[test]
fn builders_check_the_architecture() {
    let cfg = small(Architecture::Resnet3d);
    assert!(build_convnet3d::<f32>(&cfg, 0).is_err());
    assert!(build_resnet3d::<f32>(&cfg, 0).is_ok());
    assert!(build_convnext3d::<f32>(&cfg, 0).is_err());
    let bad = ModelConfig { widths: vec![4, 6, 8], ..small(Architecture::Convnet3d) };
    let err = build_convnet3d::<f32>(&bad, 0).unwrap_err();
    assert_eq!(err.kind(), crate::ErrorKind::Usage);
}

#[test]
fn doubling_widths_increases_count() {
    for arch in Architecture::ALL {
        let cfg = ModelConfig::reference(arch);
        let doubled = ModelConfig {
            widths: cfg.widths.iter().map(|w| w * 2).collect(),
            stem_width: cfg.stem_width.map(|w| w * 2),
            ..cfg.clone()
        };
        assert!(build_plan(&doubled).unwrap().count_parameters() > build_plan(&cfg).unwrap().count_parameters());
    }
}

#[test]
fn conv_plus_linear_counts_1329() {
    let plan = tiny_plan(vec![
        PlanNode::Layer { name: "conv".into(), spec: LayerSpec::Conv3d(Conv3dSpec::cubic(3, 16, 3, 1, 1)) },
        PlanNode::Layer { name: "pool".into(), spec: LayerSpec::GlobalAvgPool },
        PlanNode::Layer { name: "fc".into(), spec: LayerSpec::Linear { in_features: 16, out_features: 1 } },
    ]);
    assert_eq!(plan.count_parameters(), 1329);
    let model = Model::<f32>::from_plan(plan, 0).unwrap();
    assert_eq!(count_parameters(&model), 1329);
    assert_eq!(count_parameters(&model), count_parameters(&model));

    let linear = tiny_plan(vec![PlanNode::Layer {
        name: "fc".into(),
        spec: LayerSpec::Linear { in_features: 64, out_features: 1 },
    }]);
    assert_eq!(Model::<f32>::from_plan(linear, 0).map(|m| count_parameters(&m)).unwrap(), 65);
}

#[test]
fn two_point_enumeration_by_hand() {
    // conv 3->w (k=3) then linear w->1: 3*w*27 + w + w + 1.
    let count = |w: usize| {
        tiny_plan(vec![
            PlanNode::Layer { name: "conv".into(), spec: LayerSpec::Conv3d(Conv3dSpec::cubic(3, w, 3, 1, 1)) },
            PlanNode::Layer { name: "fc".into(), spec: LayerSpec::Linear { in_features: w, out_features: 1 } },
        ])
        .count_parameters()
    };
    assert_eq!(count(8), 665);
    assert_eq!(count(16), 1329);
    let hit: Vec<usize> = [8, 16].into_iter().filter(|&w| count(w) == 1329).collect();
    assert_eq!(hit, vec![16]);
}

#[test]
fn model_count_equals_layer_sum() {
    for arch in Architecture::ALL {
        let cfg = small(arch);
        let plan = build_plan(&cfg).unwrap();
        let model = Model::<f32>::from_plan(plan.clone(), 3).unwrap();
        let layer_sum: usize = model.layers().iter().map(|l| count_layer_params(l.spec())).sum();
        assert_eq!(count_parameters(&model), layer_sum);
        assert_eq!(plan.count_parameters(), layer_sum);
        assert_eq!(plan.stage_counts().iter().map(|s| s.1).sum::<usize>(), layer_sum);
    }
}

#[test]
fn registry_names_are_unique_and_exclude_buffers() {
    let model = Model::<f32>::build(&small(Architecture::Resnet3d), 0).unwrap();
    let mut names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
    let n = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), n);
    assert!(names.iter().all(|n| !n.contains("running")));
    assert!(model.buffers().iter().all(|b| b.name.contains("running")));
}

#[test]
fn reference_resnet_has_eight_conv_blocks_and_six_bottlenecks() {
    let plan = build_plan(&ModelConfig::reference(Architecture::Resnet3d)).unwrap();
    let bottlenecks = plan.nodes.iter().filter(|n| matches!(n, PlanNode::Residual { .. })).count();
    assert_eq!(bottlenecks, 6);
    let plain_blocks = plan
        .nodes
        .iter()
        .filter(|n| matches!(n, PlanNode::Layer { name, spec: LayerSpec::Conv3d(_) } if !name.starts_with("head.")))
        .count();
    assert_eq!(plain_blocks + bottlenecks, 8);
}

#[test]
fn convnext_expansion_structure() {
    let cfg = ModelConfig { widths: vec![64, 64, 64], ..ModelConfig::reference(Architecture::Convnext3d) };
    let layers = build_plan(&cfg).unwrap().layers();
    let spec_of = |name: &str| layers.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone()).unwrap();
    match spec_of("stage1.b0.expand") {
        LayerSpec::Conv3d(c) => assert_eq!((c.in_channels, c.out_channels, c.kernel), (64, 256, [1, 1, 1])),
        other => panic!("{other:?}"),
    }
    match spec_of("stage1.b0.project") {
        LayerSpec::Conv3d(c) => assert_eq!((c.in_channels, c.out_channels, c.kernel), (256, 64, [1, 1, 1])),
        other => panic!("{other:?}"),
    }
    match spec_of("stage1.b0.dwconv") {
        LayerSpec::Conv3d(c) => assert_eq!(c.groups, 64),
        other => panic!("{other:?}"),
    }
}

fn zero_branches(model: &mut Model<f64>) {
    fn walk(nodes: &mut [Node<f64>], inside: bool) {
        for n in nodes {
            match n {
                Node::Layer(l) if inside => l.params_mut().iter_mut().for_each(|p| p.value.fill(0.0)),
                Node::Layer(_) => {}
                Node::Residual(r) => {
                    walk(&mut r.branch, true);
                    walk(&mut r.shortcut, inside);
                }
            }
        }
    }
    walk(model.nodes_mut(), false);
}

#[test]
fn zeroed_residual_branches_leave_skip_path() {
    for arch in [Architecture::Resnet3d, Architecture::Convnext3d] {
        let mut model = Model::<f64>::build(&small(arch), 5).unwrap();
        zero_branches(&mut model);
        let mut skip_only = model.without_residual_branches();
        let x = Tensor::<f64>::rand_normal(&[2, 3, 8, 16, 16], 0.0, 1.0, &mut Rng::new(4, 4)).unwrap();
        let a = model.predict(&x).unwrap();
        let b = skip_only.predict(&x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5, "{arch}");
    }
}

#[test]
fn inference_is_deterministic_per_sample() {
    for arch in Architecture::ALL {
        let mut model = Model::<f32>::build(&small(arch), 6).unwrap();
        let one = input(&[1, 3, 8, 16, 16], 7);
        let two = Tensor::stack(&[&one.index_axis0(0).unwrap(), &one.index_axis0(0).unwrap()]).unwrap();
        let y = model.predict(&two).unwrap();
        assert_eq!(y.data()[0], y.data()[1]);
        assert_eq!(model.predict(&two).unwrap(), y);
    }
}

#[test]
fn training_differs_only_through_batch_stats_and_dropout() {
    let cfg = ModelConfig { dropout: 0.0, ..small(Architecture::Convnet3d) };
    let mut model = Model::<f64>::build(&cfg, 8).unwrap();
    let x = Tensor::<f64>::rand_normal(&[2, 3, 8, 16, 16], 0.0, 1.0, &mut Rng::new(1, 1)).unwrap();
    let infer = model.predict(&x).unwrap();
    let train = model.forward(&x, true).unwrap();
    assert!(infer.max_abs_diff(&train).unwrap() > 0.0);
    // Replace batch norms by their training statistics: with dropout off the
    // modes then agree.
    let plan = model.plan().clone();
    let stripped: Vec<PlanNode> = plan
        .nodes
        .iter()
        .filter(|n| !matches!(n, PlanNode::Layer { spec: LayerSpec::Batchnorm3d { .. }, .. }))
        .cloned()
        .collect();
    let mut plain = Model::<f64>::from_plan(Plan { nodes: stripped, ..plan }, 8).unwrap();
    let a = plain.predict(&x).unwrap();
    let b = plain.forward(&x, true).unwrap();
    assert_eq!(a, b);
}

#[test]
fn crop_changes_prediction() {
    let mut model = Model::<f32>::build(&small(Architecture::Convnet3d), 9).unwrap();
    let x = input(&[1, 3, 32, 149, 149], 10);
    let mut crop = Tensor::<f32>::zeros(&[1, 3, 16, 64, 64]).unwrap();
    for c in 0..3 {
        for d in 0..16 {
            for h in 0..64 {
                for w in 0..64 {
                    crop.set(&[0, c, d, h, w], x.at(&[0, c, d + 8, h + 42, w + 42]));
                }
            }
        }
    }
    let full = model.predict(&x).unwrap().data()[0];
    let cropped = model.predict(&crop).unwrap().data()[0];
    assert_ne!(full, cropped);
}

#[test]
fn wrong_channel_count_is_shape_error() {
    let mut model = Model::<f32>::build(&small(Architecture::Convnet3d), 0).unwrap();
    let x = input(&[1, 2, 8, 16, 16], 0);
    assert!(matches!(model.predict(&x), Err(crate::Error::Shape(_))));
}

#[test]
fn geometry_errors_name_the_stage() {
    let cfg = ModelConfig { kernel_size: 5, ..small(Architecture::Convnet3d) };
    let plan = build_plan(&cfg).unwrap();
    let mut nodes = plan.nodes.clone();
    if let PlanNode::Layer { spec: LayerSpec::Conv3d(c), .. } = &mut nodes[3] {
        c.padding = [0, 0, 0];
    }
    let mut model = Model::<f32>::from_plan(Plan { nodes, ..plan }, 0).unwrap();
    let err = model.predict(&input(&[1, 3, 4, 4, 4], 0)).unwrap_err().to_string();
    assert!(err.contains("block2"), "{err}");
}

#[test]
fn non_finite_layer_is_named() {
    let mut model = Model::<f32>::build(&small(Architecture::Convnet3d), 0).unwrap();
    model.set_tensor("block2.conv.bias", Tensor::new(&[6], f32::INFINITY).unwrap()).unwrap();
    let name = model.find_non_finite_layer(&input(&[2, 3, 8, 16, 16], 0), true).unwrap();
    assert!(name.contains("block2.conv"), "{name}");
    assert!(model.set_tensor("nope", Tensor::new(&[1], 0.0).unwrap()).is_err());
    assert!(model.set_tensor("block2.conv.bias", Tensor::new(&[5], 0.0).unwrap()).is_err());
}

#[test]
fn convnet_gradient_matches_finite_differences() {
    let mut model = Model::<f32>::build(&small(Architecture::Convnet3d), 11).unwrap();
    let x = input(&[1, 3, 8, 16, 16], 12);
    let report = check_model(&mut model, &x, &[1.0], true, 20, 13, 1e-6).unwrap();
    assert!(report.max_error() <= 1e-3, "{report:?}");
}

#[test]
fn search_finds_exact_convnet_hit() {
    let space = SearchSpace {
        base: ModelConfig { head_hidden: Vec::new(), ..ModelConfig::reference(Architecture::Convnet3d) },
        width_choices: vec![4, 8],
        stem_choices: Vec::new(),
        max_head_hidden: 16,
    };
    let planted = ModelConfig { widths: vec![4, 8], head_hidden: vec![7], ..space.base.clone() };
    let target = build_plan(&planted).unwrap().count_parameters();
    let report = search_widths(&space, target).unwrap();
    let exact = report.exact.clone().expect("exact hit");
    assert_eq!(build_plan(&exact.config).unwrap().count_parameters(), target);
    assert_eq!(exact.gap, 0);
}

#[test]
fn unreachable_target_reports_nearest_miss() {
    let space = SearchSpace {
        width_choices: vec![8, 16],
        max_head_hidden: 32,
        ..SearchSpace::default_for(Architecture::Convnet3d)
    };
    let report = search_widths(&space, 1_000_000_000_000).unwrap();
    assert!(report.exact.is_none());
    let best = report.best().unwrap();
    assert!(best.gap < 0);
    assert_eq!(best.parameters as i64 - best.gap, 1_000_000_000_000);
    assert_eq!(build_plan(&best.config).unwrap().count_parameters(), best.parameters);
    let gaps: Vec<u64> = report.nearest.iter().map(|c| c.gap.unsigned_abs()).collect();
    assert!(gaps.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn empty_space_is_parameter_error() {
    let space = SearchSpace { width_choices: Vec::new(), ..SearchSpace::default_for(Architecture::Convnet3d) };
    assert!(matches!(search_widths(&space, 10), Err(crate::Error::Parameter(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn planted_targets_are_found(
        arch_i in 0usize..3,
        choices in proptest::collection::btree_set(1usize..6, 1..4),
        pick in proptest::collection::vec(any::<proptest::sample::Index>(), 4),
        hidden in 0usize..12,
    ) {
        let arch = Architecture::ALL[arch_i];
        let ratio = 4;
        let choices: Vec<usize> = choices.into_iter().map(|c| c * ratio).collect();
        let stages = match arch { Architecture::Convnet3d => 2, Architecture::Resnet3d => 4, Architecture::Convnext3d => 3 };
        let mut widths: Vec<usize> = pick[..stages].iter().map(|i| *i.get(&choices)).collect();
        widths.sort_unstable();
        let base = ModelConfig { head_hidden: Vec::new(), depthwise_kernel: 3, ..ModelConfig::reference(arch) };
        let space = SearchSpace {
            base: base.clone(),
            width_choices: choices.clone(),
            stem_choices: if arch == Architecture::Resnet3d { vec![8] } else { Vec::new() },
            max_head_hidden: 12,
        };
        let planted = ModelConfig {
            widths,
            head_hidden: if hidden == 0 { Vec::new() } else { vec![hidden] },
            stem_width: if arch == Architecture::Resnet3d { Some(8) } else { base.stem_width },
            ..base
        };
        let target = build_plan(&planted).unwrap().count_parameters();
        let report = search_widths(&space, target).unwrap();
        let exact = report.exact.expect("planted config is in the space");
        prop_assert_eq!(build_plan(&exact.config).unwrap().count_parameters(), target);
    }
}

