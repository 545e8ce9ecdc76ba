use preflab::data::{self, GenSpec, PreferenceTriple};
use preflab::metrics::{self, RewardForm};
use preflab::objectives::{self, ObjectiveConfig, ObjectiveKind, ScoredTriple};
use preflab::policy::{softmax, TabularPolicy, Token, Vocab};
use preflab::seed::rng_for;
use preflab::trainer::{self, Schedule, TrainConfig};
use proptest::prelude::*;

fn seq(vocab: u32, lo: usize, hi: usize) -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec(0..vocab, lo..=hi)
}

fn triple(vocab: u32) -> impl Strategy<Value = PreferenceTriple> {
    (seq(vocab, 0, 3), seq(vocab, 1, 8), seq(vocab, 1, 8))
        .prop_filter("distinct responses", |(_, c, r)| c != r)
        .prop_map(|(p, c, r)| PreferenceTriple::new(p, c, r))
}

fn policy(vocab: usize, order: usize, seed: u64, scale: f64) -> TabularPolicy {
    TabularPolicy::random(Vocab::new(vocab, None).unwrap(), order, scale, &mut rng_for(seed, "prop", 0)).unwrap()
}

fn scored() -> impl Strategy<Value = ScoredTriple> {
    (-40.0..-0.01f64, -40.0..-0.01f64, -40.0..-0.01f64, -40.0..-0.01f64, 1usize..20, 1usize..20).prop_map(
        |(u_w, u_l, v_w, v_l, len_w, len_l)| ScoredTriple {
            u_w,
            u_l,
            v_w,
            v_l,
            len_w,
            len_l,
            kl_w: None,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spearman_bounded_and_rank_invariant(
        pairs in prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 2..40)
    ) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(rho) = metrics::spearman_rho(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&rho));
            let tx: Vec<f64> = xs.iter().map(|x| x * x * x + 2.0 * x).collect();
            let ty: Vec<f64> = ys.iter().map(|y| (y / 50.0).exp()).collect();
            let again = metrics::spearman_rho(&tx, &ty).unwrap();
            prop_assert!((rho - again).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-50.0..50.0f64, 1..20)) {
        let total: f64 = softmax(&row).iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn row_shift_leaves_scores_unchanged(
        t in triple(5), seed in 0u64..1000, ctx in 0usize..36, shift in -20.0..20.0f64
    ) {
        let p = policy(5, 2, seed, 1.0);
        let mut q = p.clone();
        q.row_mut(ctx).iter_mut().for_each(|x| *x += shift);
        let a = p.seq_log_prob(&t.prompt, &t.chosen).unwrap();
        let b = q.seq_log_prob(&t.prompt, &t.chosen).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn uniform_average_is_length_neutral(len in 1usize..=10, v in 2usize..12) {
        let p = TabularPolicy::uniform(Vocab::new(v, None).unwrap(), 1).unwrap();
        let y: Vec<Token> = (0..len).map(|i| (i % v) as Token).collect();
        let a = p.avg_log_prob(&[], &y).unwrap();
        prop_assert!((a + (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn swap_negates_the_sigmoid_argument(s in scored(), beta in 0.01..5.0f64) {
        for kind in [ObjectiveKind::Simpo, ObjectiveKind::Dpo] {
            let mut cfg = ObjectiveConfig::new(kind);
            cfg.beta = beta;
            cfg.gamma = 0.0;
            let z = objectives::bt_argument(&cfg, &s).unwrap();
            let z_swapped = objectives::bt_argument(&cfg, &s.swapped()).unwrap();
            prop_assert_eq!(z_swapped, -z);
        }
    }

    #[test]
    fn dpo_ln_with_uniform_reference_is_simpo(t in triple(6), seed in 0u64..1000, beta in 0.1..5.0f64) {
        let p = policy(6, 1, seed, 1.5);
        let uniform = TabularPolicy::uniform(p.vocab().clone(), 1).unwrap();
        let mut ln = ObjectiveConfig::new(ObjectiveKind::DpoLn);
        ln.beta = beta;
        let mut simpo = ObjectiveConfig::new(ObjectiveKind::Simpo);
        simpo.beta = beta;
        simpo.gamma = 0.0;
        let (a, ga) = objectives::loss_grad(&ln, &p, Some(&uniform), &t, None).unwrap();
        let (b, gb) = objectives::loss_grad(&simpo, &p, None, &t, None).unwrap();
        prop_assert!((a.loss - b.loss).abs() <= 1e-12);
        for (x, y) in ga.values().iter().zip(gb.values()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn dpo_gamma_zero_is_dpo_bitwise(s in scored(), beta in 0.01..5.0f64) {
        let mut g = ObjectiveConfig::new(ObjectiveKind::DpoGamma);
        g.beta = beta;
        g.gamma = 0.0;
        let mut d = ObjectiveConfig::new(ObjectiveKind::Dpo);
        d.beta = beta;
        let (a, b) = (objectives::loss(&g, &s, None).unwrap(), objectives::loss(&d, &s, None).unwrap());
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        prop_assert_eq!(a.dl_du_w.to_bits(), b.dl_du_w.to_bits());
        prop_assert_eq!(a.dl_du_l.to_bits(), b.dl_du_l.to_bits());
    }

    #[test]
    fn implicit_margin_identity(s in scored(), beta in 0.01..5.0f64) {
        prop_assert!(objectives::check_implicit_margin(&s, beta, 1e-12).is_ok());
    }

    #[test]
    fn sigmoid_losses_positive_and_decreasing(z in -30.0..30.0f64, dz in 0.01..5.0f64) {
        let (a, b) = (objectives::neg_log_sigmoid(z), objectives::neg_log_sigmoid(z + dz));
        prop_assert!(a > 0.0 && b > 0.0);
        prop_assert!(b < a);
    }

    #[test]
    fn simpo_reward_agrees_with_average_likelihood(t in triple(6), seed in 0u64..1000, beta in 0.01..10.0f64) {
        let p = policy(6, 1, seed, 2.0);
        let (u_w, u_l) = (p.seq_log_prob(&t.prompt, &t.chosen).unwrap(), p.seq_log_prob(&t.prompt, &t.rejected).unwrap());
        let by_reward = objectives::simpo_reward(u_w, t.chosen.len(), beta).unwrap()
            > objectives::simpo_reward(u_l, t.rejected.len(), beta).unwrap();
        let by_likelihood = p.avg_log_prob(&t.prompt, &t.chosen).unwrap() > p.avg_log_prob(&t.prompt, &t.rejected).unwrap();
        prop_assert_eq!(by_reward, by_likelihood);
    }

    #[test]
    fn contingency_cells_sum_to_n(
        data in prop::collection::vec(triple(5), 1..60), seed in 0u64..1000, beta in 0.01..5.0f64
    ) {
        let p = policy(5, 1, seed, 1.0);
        let r = policy(5, 1, seed + 1, 1.0);
        let dpo = metrics::contingency(&p, &r, &data, beta).unwrap();
        prop_assert_eq!(dpo.total(), data.len() as u64);
        let simpo = metrics::contingency_with(RewardForm::Simpo { beta }, &p, None, &data).unwrap();
        prop_assert_eq!(simpo.off_diagonal(), 0);
    }

    #[test]
    fn kl_nonnegative_and_zero_at_reference(
        data in prop::collection::vec(triple(5), 1..30), seed in 0u64..1000
    ) {
        let p = policy(5, 1, seed, 1.0);
        let r = policy(5, 1, seed + 7, 1.0);
        let kl = metrics::mean_kl_to_ref(&p, &r, &data).unwrap();
        prop_assert!(kl.per_sequence >= 0.0 && kl.per_token >= 0.0);
        prop_assert_eq!(metrics::mean_kl_to_ref(&r, &r, &data).unwrap().per_sequence, 0.0);
    }

    #[test]
    fn reward_accuracy_ignores_beta_scale(
        data in prop::collection::vec(triple(5), 1..40), seed in 0u64..1000, beta in 0.01..5.0f64, k in 0.1..20.0f64
    ) {
        let p = policy(5, 1, seed, 1.0);
        let r = policy(5, 1, seed + 3, 1.0);
        for kind in [ObjectiveKind::Simpo, ObjectiveKind::Dpo] {
            let mut a = ObjectiveConfig::new(kind);
            a.beta = beta;
            let mut b = a;
            b.beta = beta * k;
            prop_assert_eq!(
                metrics::reward_accuracy(&a, &p, Some(&r), &data).unwrap(),
                metrics::reward_accuracy(&b, &p, Some(&r), &data).unwrap()
            );
        }
    }

    #[test]
    fn lr_schedule_stays_in_range(total in 1usize..500, warmup in 0.0..0.9f64, frac in 0.0..1.0f64) {
        let cfg = TrainConfig { lr: 0.3, warmup_frac: warmup, schedule: Schedule::Cosine, ..Default::default() };
        let step = ((total as f64 - 1.0) * frac) as usize;
        let lr = trainer::lr_at(step, total, &cfg).unwrap();
        prop_assert!((0.0..=0.3).contains(&lr));
    }

    #[test]
    fn split_partitions_the_data(n in 2usize..80, frac in 0.05..0.95f64, seed in 0u64..100) {
        let data: Vec<PreferenceTriple> = (0..n as u32)
            .map(|i| PreferenceTriple::new(vec![i], vec![0], vec![1]))
            .collect();
        let (a, b) = data::split(&data, frac, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), n);
        let mut ids: Vec<u32> = a.iter().chain(&b).map(|t| t.prompt[0]).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..n as u32).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_winners_never_score_lower(seed in 0u64..10_000, b in -2.0..2.0f64, w in 0.0..2.0f64) {
        let spec = GenSpec { n_examples: 100, length_bias: b, good_token_weight: w, seed, ..Default::default() };
        let r = TabularPolicy::random(spec.vocab().unwrap(), 1, 1.0, &mut rng_for(seed, "ref", 0)).unwrap();
        for t in data::generate(&spec, &r).unwrap().triples {
            prop_assert!(spec.planted_reward(&t.chosen) >= spec.planted_reward(&t.rejected));
        }
    }

    #[test]
    fn training_leaves_the_reference_untouched(seed in 0u64..1000) {
        let spec = GenSpec { vocab_size: 6, n_examples: 40, length_bias: 1.0, seed, ..Default::default() };
        let r = TabularPolicy::random(spec.vocab().unwrap(), 1, 1.0, &mut rng_for(seed, "ref", 0)).unwrap();
        let before = r.to_checkpoint_string();
        let data = data::generate(&spec, &r).unwrap().triples;
        let cfg = TrainConfig { batch_size: 16, epochs: 2, ..Default::default() };
        for kind in [ObjectiveKind::Dpo, ObjectiveKind::Kto, ObjectiveKind::Ipo] {
            trainer::train(&r, Some(&r), &data, &ObjectiveConfig::new(kind), &cfg).unwrap();
        }
        prop_assert_eq!(before, r.to_checkpoint_string());
    }
}
