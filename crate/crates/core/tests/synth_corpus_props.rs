use dictmlm_core::corpus::{temperature_weights, Corpus, SamplingPolicy};
use dictmlm_core::lang::LangId;
use dictmlm_core::synthlang::{Relatedness, SynthConfig, SynthWorld};
use proptest::prelude::*;

fn synth_config() -> impl Strategy<Value = SynthConfig> {
    (50usize..120, 2usize..4, any::<bool>(), 0.0f64..=1.0, any::<u64>()).prop_map(|(n, l, far, c, seed)| SynthConfig {
        lemma_count: n,
        languages: ["aa", "bb", "cc"][..l].iter().map(|s| s.to_string()).collect(),
        relatedness: if far { Relatedness::Far } else { Relatedness::Near },
        sentences_per_language: 30,
        coverage: c,
        eval_pairs: 10,
        seed,
        ..SynthConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dictionary_is_a_bijection_on_covered_lemmas(cfg in synth_config()) {
        let world = SynthWorld::generate(cfg.clone()).unwrap();
        let lex = world.lexicon();
        let langs: Vec<LangId> = world.registry.ids().collect();
        for k in 0..cfg.lemma_count {
            for &a in &langs {
                let syns = lex.lookup(world.surface(a, k), a);
                if !world.covered[k] {
                    prop_assert!(syns.is_empty());
                    continue;
                }
                prop_assert_eq!(syns.len(), langs.len() - 1);
                for s in syns {
                    prop_assert!(s.lang != a);
                    prop_assert_eq!(s.word.as_str(), world.surface(s.lang, k));
                }
            }
        }
    }

    #[test]
    fn worlds_are_reproducible(cfg in synth_config()) {
        let a = SynthWorld::generate(cfg.clone()).unwrap();
        let b = SynthWorld::generate(cfg).unwrap();
        prop_assert_eq!(a.lexicon().pairs(), b.lexicon().pairs());
        for l in a.registry.ids() {
            prop_assert_eq!(a.corpus(l, 1), b.corpus(l, 3));
        }
        prop_assert_eq!(a.parallel_pairs(LangId(0), LangId(1)), b.parallel_pairs(LangId(0), LangId(1)));
    }

    #[test]
    fn temperature_weights_are_a_distribution(sizes in prop::collection::vec(1.0f64..1e6, 1..8), t in 1.0f64..50.0) {
        let w = temperature_weights(&sizes, t).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // flattening never reverses the size order
        for i in 0..sizes.len() {
            for j in 0..sizes.len() {
                if sizes[i] > sizes[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
        let wide = temperature_weights(&sizes, 1e6).unwrap();
        let u = 1.0 / sizes.len() as f64;
        prop_assert!(wide.iter().all(|x| (x - u).abs() < 1e-4));
    }

    #[test]
    fn plans_are_worker_independent(counts in prop::collection::vec(1usize..30, 1..4), n in 0usize..9000, seed in any::<u64>(), workers in 2usize..5) {
        let per_lang: Vec<(LangId, Vec<String>)> = counts
            .iter()
            .enumerate()
            .map(|(l, &c)| (LangId(l as u16), (0..c).map(|i| format!("s{l}_{i}")).collect()))
            .collect();
        let corpus = Corpus::from_sentences(per_lang).unwrap();
        let policy = SamplingPolicy { temperature: 5.0, seed };
        let a = corpus.plan(&policy, n, 1).unwrap();
        let b = corpus.plan(&policy, n, workers).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert_eq!(a, b);
    }
}
