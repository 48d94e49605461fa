use std::sync::OnceLock;

use bayes_adapt::adapt::AdapterKind;
use bayes_adapt::harness::{
    apply_method, cell_train_config, eval_speaker, prepare_artifacts, train_base, Artifacts,
    ExperimentConfig, Method, Setting,
};
use bayes_adapt::linalg::dot;
use bayes_adapt::net::{frame_error_rate, Network};
use bayes_adapt::sim::{
    forgetting_probe, gen_base_corpus, gen_speaker, AdaptationBudget, BaseCorpus, ShiftSpec,
    SpeakerShift,
};

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

fn unadapted_error(s: &Setup, spec: &ShiftSpec, shift: &SpeakerShift) -> f64 {
    let budget = AdaptationBudget::full(1, s.cfg.corpus.class_count).unwrap();
    let data = gen_speaker(&s.corpus, spec, shift, &budget, 0).unwrap();
    frame_error_rate(&s.base, &data.test).unwrap()
}

#[test]
fn benchmark_base_net_is_accurate() {
    let s = setup();
    let dev = frame_error_rate(&s.base, &s.corpus.dev).unwrap();
    assert!(dev < 0.05, "dev error {dev}");
}

#[test]
fn identity_speaker_matches_dev_error() {
    let s = setup();
    let dev = frame_error_rate(&s.base, &s.corpus.dev).unwrap();
    let spec = ShiftSpec {
        strength: 0.0,
        bias_scale: 0.0,
        noise_scale: 0.0,
        ..s.cfg.shift.clone()
    };
    let dim = s.cfg.corpus.feature_dim;
    let mean: f64 = (0..10u64)
        .map(|seed| unadapted_error(s, &spec, &SpeakerShift::identity(dim, seed)))
        .sum::<f64>()
        / 10.0;
    assert!((mean - dev).abs() <= 0.02, "speaker {mean} vs dev {dev}");
}

#[test]
fn strong_shift_hurts_the_base_net() {
    let s = setup();
    let dev = frame_error_rate(&s.base, &s.corpus.dev).unwrap();
    let spec = ShiftSpec {
        strength: 0.4,
        bias_scale: 1.0,
        ..s.cfg.shift.clone()
    };
    for seed in 0..5 {
        let shift = SpeakerShift::sample(s.cfg.corpus.feature_dim, &spec, seed);
        let e = unadapted_error(s, &spec, &shift);
        assert!(e > dev, "seed {seed}: {e} vs {dev}");
    }
}

#[test]
fn benchmark_mismatch_is_in_the_calibrated_band() {
    let s = setup();
    let dev = frame_error_rate(&s.base, &s.corpus.dev).unwrap();
    let mean: f64 = (0..10u64)
        .map(|seed| {
            let (data, _) = eval_speaker(&s.cfg, &s.corpus, 1, seed).unwrap();
            frame_error_rate(&s.base, &data.test).unwrap()
        })
        .sum::<f64>()
        / 10.0;
    let ratio = mean / dev;
    assert!((1.5..=3.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn class_means_are_group_structured() {
    let s = setup();
    let m = &s.corpus.class_means;
    let spec = &s.cfg.corpus;
    let dist = |a: usize, b: usize| {
        let d: Vec<f64> = m.row(a).iter().zip(m.row(b)).map(|(x, y)| x - y).collect();
        dot(&d, &d).sqrt()
    };
    let (mut within, mut between) = (Vec::new(), Vec::new());
    for a in 0..spec.class_count {
        for b in a + 1..spec.class_count {
            if spec.group_of(a) == spec.group_of(b) {
                within.push(dist(a, b));
            } else {
                between.push(dist(a, b));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&within) < mean(&between));
    // Every class is nearer, on average, to its own group than to any other.
    for a in 0..spec.class_count {
        let to_group = |g: usize| {
            let d: Vec<f64> = (0..spec.class_count)
                .filter(|&b| b != a && spec.group_of(b) == g)
                .map(|b| dist(a, b))
                .collect();
            mean(&d)
        };
        let own = to_group(spec.group_of(a));
        for g in (0..spec.group_count).filter(|&g| g != spec.group_of(a)) {
            assert!(own < to_group(g), "class {a} group {g}");
        }
    }
}

fn half_coverage_artifacts() -> (ExperimentConfig, Artifacts) {
    let s = setup();
    let mut cfg = s.cfg.clone();
    cfg.plan.coverage = 0.5;
    cfg.plan.methods = vec![Method::Lhn, Method::MapLhn];
    let art = prepare_artifacts(
        &cfg,
        &s.corpus,
        Some(Artifacts {
            base: s.base.clone(),
            priors: Default::default(),
            tree: None,
        }),
    )
    .unwrap();
    assert!(art.priors.contains_key(&AdapterKind::Lhn));
    (cfg, art)
}

#[test]
fn forgetting_shows_on_uncovered_classes() {
    let s = setup();
    let (cfg, art) = half_coverage_artifacts();
    let mut forgets = 0;
    let mut map_closer = 0;
    for seed in 0..10 {
        let (data, uncovered) = eval_speaker(&cfg, &s.corpus, 40, seed).unwrap();
        assert!(data.adapt.targets().iter().all(|t| !uncovered.contains(t)));
        let train = cell_train_config(&cfg, seed);
        let lhn =
            apply_method(Method::Lhn, Setting::None, &art, &data.adapt, &cfg, &train).unwrap();
        let map = apply_method(
            Method::MapLhn,
            Setting::Lambda(cfg.adaptation.lambdas[0]),
            &art,
            &data.adapt,
            &cfg,
            &train,
        )
        .unwrap();
        let p_lhn = forgetting_probe(&art.base, &lhn, &data.test, &uncovered).unwrap();
        let p_map = forgetting_probe(&art.base, &map, &data.test, &uncovered).unwrap();
        if p_lhn.uncovered_delta.unwrap() >= p_lhn.covered_delta.unwrap() {
            forgets += 1;
        }
        if p_map.mean_kl <= p_lhn.mean_kl {
            map_closer += 1;
        }
    }
    assert!(
        forgets >= 8,
        "uncovered delta >= covered delta in {forgets}/10"
    );
    assert!(map_closer >= 8, "MAP KL <= LHN KL in {map_closer}/10");
}
