mod common;

use std::sync::OnceLock;

use bayes_adapt::adapt::{adapt, adaptable_param_count, make_output_mask, AdapterKind};
use bayes_adapt::harness::{
    cell_train_config, eval_speaker, run_plan, train_base, ExperimentConfig, Method,
};
use bayes_adapt::hier::{
    adapt_hier, build_tree, tags_from_groups, EmbeddingView, HierConfig, HierTarget, SenoneTree,
};
use bayes_adapt::net::{frame_error_rate, mean_cross_entropy, Network, Objective, TrainConfig};
use bayes_adapt::prior::{
    adapt_kld, adapt_map, adapted_weights, harvest_speaker_transforms, map_loss, GaussianPrior,
    KldConfig, MapConfig,
};
use bayes_adapt::sim::{
    forgetting_probe, gen_base_corpus, gen_speaker, AdaptationBudget, BaseCorpus, ShiftSpec,
    SpeakerShift,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Setup {
    cfg: ExperimentConfig,
    corpus: BaseCorpus,
    base: Network,
}

fn setup() -> &'static Setup {
    static CELL: OnceLock<Setup> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let corpus = gen_base_corpus(&cfg.corpus).unwrap();
        let base = train_base(&cfg, &corpus).unwrap();
        Setup { cfg, corpus, base }
    })
}

fn identity_spec(s: &Setup) -> ShiftSpec {
    ShiftSpec {
        strength: 0.0,
        bias_scale: 0.0,
        noise_scale: 0.0,
        ..s.cfg.shift.clone()
    }
}

#[test]
fn lhn_lowers_adaptation_cross_entropy() {
    let s = setup();
    let (data, _) = eval_speaker(&s.cfg, &s.corpus, 20, 0).unwrap();
    let train = cell_train_config(&s.cfg, 0);
    let adapted = adapt(
        &s.base,
        &data.adapt,
        &train,
        AdapterKind::Lhn,
        &mut Objective::cross_entropy(),
    )
    .unwrap();
    let before = mean_cross_entropy(&s.base, &data.adapt).unwrap();
    let after = mean_cross_entropy(&adapted, &data.adapt).unwrap();
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn adapting_on_matched_data_stays_near_baseline() {
    let s = setup();
    let spec = identity_spec(s);
    let dim = s.cfg.corpus.feature_dim;
    let budget = AdaptationBudget::full(40, s.cfg.corpus.class_count).unwrap();
    let mut diff = 0.0;
    for seed in 0..5u64 {
        let data = gen_speaker(
            &s.corpus,
            &spec,
            &SpeakerShift::identity(dim, seed),
            &budget,
            0,
        )
        .unwrap();
        let adapted = adapt(
            &s.base,
            &data.adapt,
            &cell_train_config(&s.cfg, seed),
            AdapterKind::Lhn,
            &mut Objective::cross_entropy(),
        )
        .unwrap();
        diff += frame_error_rate(&adapted, &data.test).unwrap()
            - frame_error_rate(&s.base, &data.test).unwrap();
    }
    assert!((diff / 5.0).abs() <= 0.02, "mean change {}", diff / 5.0);
}

#[test]
fn harvest_on_matched_data_stays_near_identity() {
    let s = setup();
    let spec = identity_spec(s);
    let dim = s.cfg.corpus.feature_dim;
    let budget = AdaptationBudget::full(4, s.cfg.corpus.class_count).unwrap();
    let conditions: Vec<(u32, _)> = (0..8u32)
        .map(|i| {
            let shift = SpeakerShift::identity(dim, 100 + i as u64);
            (
                i,
                gen_speaker(&s.corpus, &spec, &shift, &budget, i)
                    .unwrap()
                    .adapt,
            )
        })
        .collect();
    let train = TrainConfig {
        learning_rate: 1e-6,
        ..cell_train_config(&s.cfg, 0)
    };
    let harvest =
        harvest_speaker_transforms(&s.base, &conditions, &train, AdapterKind::Lhn).unwrap();
    assert_eq!(harvest.samples.len(), 8);
    assert!(harvest.skipped.is_empty());
    let d = s.base.output_layer().in_dim();
    for sample in &harvest.samples {
        assert_eq!(sample.w.len(), d * d + d);
        for (m, w) in sample.w.iter().enumerate() {
            let id = if m < d * d && m / d == m % d {
                1.0
            } else {
                0.0
            };
            assert!((w - id).abs() < 1e-3, "entry {m}: {w}");
        }
    }
}

#[test]
fn overwhelming_prior_pins_weights_to_its_mean() {
    let s = setup();
    let (data, _) = eval_speaker(&s.cfg, &s.corpus, 5, 1).unwrap();
    let len = adaptable_param_count(&s.base, AdapterKind::Lhn);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mean: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var = vec![0.5; len];
    let prior = GaussianPrior::new(AdapterKind::Lhn, mean.clone(), var, 1e-6).unwrap();
    let cfg = MapConfig {
        lambda: 1e9,
        train: cell_train_config(&s.cfg, 1),
    };
    let adapted = adapt_map(&s.base, &data.adapt, &prior, &cfg, AdapterKind::Lhn).unwrap();
    let w = adapted_weights(&adapted, AdapterKind::Lhn).unwrap();
    assert!(common::max_abs_diff(&w, &mean) < 1e-3);
}

#[test]
fn kld_with_full_interpolation_does_not_move() {
    let s = setup();
    let (data, _) = eval_speaker(&s.cfg, &s.corpus, 10, 2).unwrap();
    let cfg = KldConfig {
        rho: 1.0,
        train: cell_train_config(&s.cfg, 2),
    };
    let adapted = adapt_kld(&s.base, &data.adapt, &cfg, AdapterKind::Lhn).unwrap();
    let probe = forgetting_probe(&s.base, &adapted, &data.test, &[]).unwrap();
    assert!(probe.mean_kl <= 1e-20, "kl {}", probe.mean_kl);
    let before = s.base.posteriors(data.adapt.frames()).unwrap();
    let after = adapted.posteriors(data.adapt.frames()).unwrap();
    assert!(common::max_abs_diff(before.as_slice(), after.as_slice()) < 1e-12);
}

#[test]
fn map_penalty_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prior = common::random_prior(&mut rng, AdapterKind::Lin, 8);
    let w: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lambda = 1.7;
    let grad = bayes_adapt::prior::map_gradient(&w, &prior, lambda, &[0.0; 8]).unwrap();
    for m in 0..8 {
        let mut up = w.clone();
        let mut down = w.clone();
        up[m] += common::FD_EPS;
        down[m] -= common::FD_EPS;
        let numeric = (map_loss(&up, &prior, lambda, 0.0) - map_loss(&down, &prior, lambda, 0.0))
            / (2.0 * common::FD_EPS);
        assert!(common::rel_err(grad[m], numeric) < 1e-6, "entry {m}");
    }
}

fn within_cluster_variance(emb: &EmbeddingView, tree: &SenoneTree) -> f64 {
    let mut total = 0.0;
    for members in tree.members() {
        let dim = emb.dim();
        let mut mean = vec![0.0; dim];
        for &s in &members {
            for (m, v) in mean.iter_mut().zip(emb.row(s)) {
                *m += v / members.len() as f64;
            }
        }
        for &s in &members {
            total += emb
                .row(s)
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m).powi(2))
                .sum::<f64>();
        }
    }
    total
}

#[test]
fn strong_tree_prior_tightens_clusters() {
    let s = setup();
    let (data, _) = eval_speaker(&s.cfg, &s.corpus, 5, 3).unwrap();
    let before = EmbeddingView::from_network(&s.base);
    let tree = build_tree(&tags_from_groups(&s.cfg.corpus.groups()), 0.0, 1e3, &before).unwrap();
    let cfg = HierConfig {
        train: cell_train_config(&s.cfg, 3),
        target: HierTarget::OutputRows,
        flat_prior: None,
    };
    let out = adapt_hier(&s.base, &data.adapt, &tree, &cfg).unwrap();
    let after = EmbeddingView::from_network(&out.net);
    assert!(within_cluster_variance(&after, &tree) < within_cluster_variance(&before, &tree));
    assert_eq!(make_output_mask(&out.net).indices(), &[out.net.depth() - 1]);
}

// Shapes of the reference acoustic model: a 216-unit last hidden layer,
// 2022 output units and 130 parent nodes.

#[test]
fn reference_scale_adapter_shapes() {
    let net = Network::new(4, &[8, 216], 2022, 0).unwrap();
    assert_eq!(
        adaptable_param_count(&net, AdapterKind::Lhn),
        216 * 216 + 216
    );
    assert_eq!(
        adaptable_param_count(&net, AdapterKind::LonDirect),
        216 * 2022 + 2022
    );
    assert_eq!(make_output_mask(&net).cardinality(&net), 216 * 2022 + 2022);
    let groups: Vec<usize> = (0..2022).map(|j| j * 130 / 2022).collect();
    let tree = build_tree(
        &tags_from_groups(&groups),
        0.01,
        1.0,
        &EmbeddingView::from_network(&net),
    )
    .unwrap();
    assert_eq!(tree.parent_count(), 130);
    assert_eq!(tree.leaf_count(), 2022);
}

#[test]
fn budget_sweep_plan_has_one_cell_per_method_budget_and_seed() {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.feature_dim = 4;
    cfg.corpus.class_count = 6;
    cfg.corpus.group_count = 2;
    cfg.corpus.frames_per_class = 20;
    cfg.corpus.dev_frames_per_class = 5;
    cfg.network.hidden = vec![8, 5];
    cfg.base_training.epochs = 2;
    cfg.shift.sentence_frames = 5;
    cfg.shift.test_frames_per_class = 4;
    cfg.adaptation.epochs = 1;
    cfg.adaptation.prior_speakers = 8;
    cfg.adaptation.prior_sentences = 4;
    cfg.plan.methods = vec![Method::Lhn, Method::MapLhn];
    cfg.plan.budgets = vec![5, 10, 20, 40];
    cfg.plan.seeds = vec![0, 1, 2];
    let out = run_plan(&cfg, None).unwrap();
    assert_eq!(out.table.rows.len(), 2 * 4 * 3);
    assert_eq!(out.table.failed_count(), 0);
}
