//! Randomized structural and optimizer properties.

use nestnet::optim::default_tolerance;
use nestnet::{
    normalize_gradient, orthogonalize, per_task_gradients, train_step, NestedNetwork, NestingMode,
    OptimizerConfig, OptimizerState, PriorityOrder, StagePlan, Strategy as Opt, TaskGradient, Tensor,
};
use proptest::prelude::*;

fn any_mode() -> impl Strategy<Value = NestingMode> {
    prop::sample::select(NestingMode::ALL.to_vec())
}

prop_compose! {
    fn any_plan(max_stages: usize)(
        mode in any_mode(),
        n in 1..=max_stages,
        w in 1usize..=3,
        k in 1usize..=2,
        classes in 2usize..=4,
        input in 1usize..=3,
    ) -> StagePlan {
        StagePlan::new(mode, n, w, k, classes, input)
    }
}

prop_compose! {
    fn net_and_input(max_stages: usize, rows: usize)(plan in any_plan(max_stages), seed in any::<u64>())(
        data in prop::collection::vec(-3.0f64..3.0, rows * plan.input_dim),
        plan in Just(plan),
        seed in Just(seed),
    ) -> (NestedNetwork, Tensor) {
        let x = Tensor::new(vec![rows, plan.input_dim], data).unwrap();
        (NestedNetwork::build(&plan, seed).unwrap(), x)
    }
}

fn labels_for(rows: usize, classes: usize) -> Vec<usize> {
    (0..rows).map(|i| (i * 7 + 3) % classes).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_grow_strictly_and_cover_trunk(plan in any_plan(5), seed in any::<u64>()) {
        let net = NestedNetwork::build(&plan, seed).unwrap();
        let mask = net.mask();
        for s in 1..plan.num_stages {
            let (a, b) = (mask.mask(s), mask.mask(s + 1));
            prop_assert!(a.iter().zip(&b).all(|(&x, &y)| !x || y));
            prop_assert!(mask.popcount(s) < mask.popcount(s + 1));
        }
        prop_assert_eq!(mask.popcount(plan.num_stages), mask.trunk_len());
    }

    #[test]
    fn stage_ignores_parameters_outside_its_mask((net, x) in net_and_input(4, 8), bump in 0.5f64..5.0) {
        for s in 1..=net.num_stages() {
            let base = net.forward_stage(s, &x).unwrap();
            let mut moved = net.clone();
            for (slot, p) in moved.params_mut().iter_mut().enumerate() {
                if !net.is_visible(s, slot) {
                    *p += bump;
                }
            }
            let after = moved.forward_stage(s, &x).unwrap();
            prop_assert!(base.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn standalone_matches_nested((net, x) in net_and_input(4, 100)) {
        for s in 1..=net.num_stages() {
            let alone = net.extract_standalone(s).unwrap();
            prop_assert_eq!(alone.param_count(), net.stage_dim(s));
            let a = net.forward_stage(s, &x).unwrap();
            let b = alone.forward(&x).unwrap();
            let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-12, "stage {s}: {diff}");
        }
    }

    #[test]
    fn shared_forward_matches_per_stage((net, x) in net_and_input(4, 6)) {
        let every = net.forward_every_stage(&x).unwrap();
        for (i, logits) in every.iter().enumerate() {
            prop_assert_eq!(logits, &net.forward_stage(i + 1, &x).unwrap());
        }
    }

    #[test]
    fn interlaced_offsets_are_powers_of_two(plan in any_plan(5), seed in any::<u64>()) {
        prop_assume!(plan.mode.is_interlaced());
        let net = NestedNetwork::build(&plan, seed).unwrap();
        let w = net.wiring();
        for s in 1..=plan.num_stages {
            let layers = plan.stage_layers(s);
            let stride = if layers.len() > 1 { layers[1] - layers[0] } else { 1 };
            prop_assert!(stride.is_power_of_two());
            let relative = |l: usize| if l == 0 { Some(0) } else if (l - 1) % stride == 0 { Some((l - 1) / stride + 1) } else { None };
            for e in &w.edges {
                if e.owner > s {
                    continue;
                }
                let (src, dst) = (relative(w.groups[e.src].layer), relative(w.groups[e.dst].layer));
                let (Some(src), Some(dst)) = (src, dst) else {
                    prop_assert!(false, "stage {s} edge touches a layer outside the stage");
                    unreachable!()
                };
                prop_assert!(dst > src && (dst - src).is_power_of_two(), "stage {s}: {src} -> {dst}");
            }
        }
    }

    #[test]
    fn edges_flow_forward_and_never_downward_in_stage(plan in any_plan(5), seed in any::<u64>()) {
        let net = NestedNetwork::build(&plan, seed).unwrap();
        let w = net.wiring();
        for e in &w.edges {
            let (src, dst) = (&w.groups[e.src], &w.groups[e.dst]);
            prop_assert!(src.layer < dst.layer);
            prop_assert!(e.owner >= src.owner && e.owner >= dst.owner);
            if !plan.mode.is_interlaced() {
                // Width stripes never feed an earlier stripe of the next layer.
                prop_assert!(src.owner <= dst.owner);
            }
        }
    }

    #[test]
    fn costs_strictly_increase(plan in any_plan(5), seed in any::<u64>()) {
        let net = NestedNetwork::build(&plan, seed).unwrap();
        let flops: Vec<u64> = (1..=plan.num_stages).map(|s| net.flops(s).unwrap()).collect();
        let cumulative: Vec<u64> = (1..=plan.num_stages).map(|s| net.cumulative_macs(s).unwrap()).collect();
        prop_assert!(flops.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(cumulative.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(flops.iter().zip(&cumulative).all(|(f, c)| f <= c));
    }

    #[test]
    fn pruned_counts_match_brute_force(mode in prop::sample::select(vec![NestingMode::Width, NestingMode::EvenWidth]), n in 1usize..=5, w in 1usize..=3, k in 1usize..=3) {
        let plan = StagePlan::new(mode, n, w, k, 3, 2);
        let net = NestedNetwork::with_params(&plan, None).unwrap();
        prop_assert_eq!(net.pruned_weight_count(), brute_force_pruned(&plan));
    }

    #[test]
    fn even_width_prunes_more_than_power_of_two(n in 3usize..=5, w in 1usize..=6, k in 2usize..=3) {
        let final_width = w << (n - 1);
        prop_assume!(final_width % n == 0);
        let even = StagePlan::new(NestingMode::EvenWidth, n, final_width / n, k, 3, 2);
        let pow2 = StagePlan::new(NestingMode::Width, n, w, k, 3, 2);
        prop_assert!(brute_force_pruned(&even) > brute_force_pruned(&pow2));
        let count = |p: &StagePlan| NestedNetwork::with_params(p, None).unwrap().pruned_weight_count();
        prop_assert!(count(&even) > count(&pow2));
    }
}

/// Hidden-to-hidden unit pairs whose source stripe is newer than the target's.
fn brute_force_pruned(plan: &StagePlan) -> usize {
    let n = plan.num_stages;
    let width = plan.stage_width(n);
    let stripe_of = |unit: usize| (1..=n).find(|&s| unit < plan.stage_width(s)).unwrap();
    let mut per_pair = 0;
    for src in 0..width {
        for dst in 0..width {
            if stripe_of(src) > stripe_of(dst) {
                per_pair += 1;
            }
        }
    }
    per_pair * (plan.stage_depth(n) - 1)
}

fn random_grads(seed: u64, n: usize, len: usize) -> Vec<TaskGradient> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (1..=n)
        .map(|stage| TaskGradient {
            stage,
            values: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            dim: len,
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projections_are_pairwise_orthogonal(
        seed in any::<u64>(),
        len in 3usize..40,
        perm in Just(vec![1usize, 2, 3]).prop_shuffle(),
    ) {
        let grads = random_grads(seed, 3, len);
        let order = PriorityOrder::new(perm.clone()).unwrap();
        let out = orthogonalize(&grads, &order, default_tolerance(len)).unwrap();
        let lead = perm[0] - 1;
        prop_assert_eq!(&out[lead].values, &grads[lead].values);
        for i in 0..3 {
            for j in i + 1..3 {
                let (a, b) = (&out[i].values, &out[j].values);
                prop_assert!(dot(a, b).abs() <= 1e-8 * norm(a) * norm(b));
            }
        }
    }

    #[test]
    fn normalize_is_idempotent(seed in any::<u64>(), len in 1usize..50, c in 0.01f64..10.0) {
        let g = random_grads(seed, 1, len).remove(0);
        let tol = default_tolerance(len);
        let (once, _) = normalize_gradient(&g, c, tol);
        let (twice, _) = normalize_gradient(&once, c, tol);
        for (a, b) in once.values.iter().zip(&twice.values) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
        prop_assert!((norm(&once.values) - (len as f64).sqrt() * c).abs() <= 1e-12 * (len as f64).sqrt() * c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sgd_update_is_weighted_mean_of_task_gradients(
        (net, x) in net_and_input(4, 12),
        raw in prop::collection::vec(0.0f64..3.0, 4),
    ) {
        let n = net.num_stages();
        let mut weights = raw[..n].to_vec();
        if weights.iter().all(|&w| w == 0.0) {
            weights[0] = 1.0;
        }
        let labels = labels_for(12, net.plan().num_classes);
        let (_, grads) = per_task_gradients(&net, &x, &labels).unwrap();
        let total: f64 = weights.iter().sum();
        let expected: Vec<f64> = (0..net.num_params())
            .map(|j| grads.iter().zip(&weights).map(|(g, k)| k * g.values[j]).sum::<f64>() / total)
            .collect();
        let mut config = OptimizerConfig::with_strategy(Opt::Sgd);
        config.loss_weights = weights;
        let mut moved = net.clone();
        train_step(&mut moved, &x, &labels, &config, 1.0, &mut OptimizerState::default()).unwrap();
        for (j, e) in expected.iter().enumerate() {
            let got = net.params()[j] - moved.params()[j];
            prop_assert!((got - e).abs() <= 1e-10, "slot {j}: {got} vs {e}");
        }
    }

    #[test]
    fn stage_exclusive_coordinates_survive_projection((net, x) in net_and_input(4, 12)) {
        let n = net.num_stages();
        prop_assume!(n >= 2);
        let labels = labels_for(12, net.plan().num_classes);
        let (_, grads) = per_task_gradients(&net, &x, &labels).unwrap();
        let out = orthogonalize(&grads, &PriorityOrder::identity(n), default_tolerance(net.num_params())).unwrap();
        // Projecting g_s onto earlier (smaller-mask) gradients cannot touch
        // coordinates those gradients do not see, so s's exclusive block is intact.
        for s in 1..=n {
            for j in 0..net.num_params() {
                if net.is_owned_by(s, j) && (1..s).all(|t| !net.is_visible(t, j)) {
                    prop_assert_eq!(out[s - 1].values[j].to_bits(), grads[s - 1].values[j].to_bits());
                }
            }
        }
    }

    #[test]
    fn training_steps_are_deterministic((net, x) in net_and_input(3, 10), pick in 0usize..4) {
        let strategy = [Opt::Sgd, Opt::NormSgd, Opt::Osgd, Opt::OsgdNorm][pick];
        let labels = labels_for(10, net.plan().num_classes);
        let config = OptimizerConfig::with_strategy(strategy);
        let run = || {
            let mut m = net.clone();
            let mut state = OptimizerState::default();
            for _ in 0..5 {
                train_step(&mut m, &x, &labels, &config, 0.05, &mut state).unwrap();
            }
            m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
