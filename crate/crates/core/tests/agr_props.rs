use agr_lab::agr::{agr_batch, agr_predict, top_k_candidates, LogitModel, RefineConfig, RefineTrace, ScoreSpace};
use agr_lab::Result;
use proptest::prelude::*;

/// Logits looked up from a random table keyed by the last two tokens.
struct TableModel {
    vocab: usize,
    block: usize,
    table: Vec<f64>,
    shift: f64,
}

impl TableModel {
    fn new(vocab: usize, block: usize, seed: u64) -> Self {
        let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
        let table = (0..vocab * vocab * vocab)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
            })
            .collect();
        TableModel { vocab, block, table, shift: 0.0 }
    }
}

impl LogitModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn block_size(&self) -> usize {
        self.block
    }

    fn final_logits(&self, contexts: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        Ok(contexts
            .iter()
            .map(|c| {
                let a = c[c.len() - 1] as usize;
                let b = if c.len() > 1 { c[c.len() - 2] as usize } else { 0 };
                let row = (b * self.vocab + a) * self.vocab;
                self.table[row..row + self.vocab].iter().map(|x| x + self.shift).collect()
            })
            .collect())
    }
}

fn setup() -> impl Strategy<Value = (usize, u64, Vec<u32>, usize, usize)> {
    (2usize..9, any::<u64>(), 1usize..30, 1usize..10, 2usize..5)
        .prop_flat_map(|(v, seed, n, k, l)| (Just(v), Just(seed), proptest::collection::vec(0..v as u32, n), Just(k.min(v)), Just(l)))
}

fn run(v: usize, seed: u64, ctx: &[u32], k: usize, l: usize, w: f64) -> RefineTrace {
    let f_n = TableModel::new(v, 16, seed);
    let f_s = TableModel::new(v, 12, seed ^ 1);
    let cfg = RefineConfig { k, w, l, ..Default::default() };
    agr_predict(&f_n, &f_s, ctx, &cfg).unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn chosen_token_is_a_candidate((v, seed, ctx, k, l) in setup(), w in 0.0f64..5.0) {
        let tr = run(v, seed, &ctx, k, l, w);
        if tr.fallback {
            prop_assert_eq!(tr.chosen, tr.plain);
        } else {
            let ids: Vec<u32> = tr.candidates.iter().map(|c| c.id).collect();
            prop_assert!(ids.contains(&tr.chosen));
            prop_assert_eq!(ids[0], tr.plain);
            let f_n = TableModel::new(v, 16, seed);
            let tail = &ctx[ctx.len().saturating_sub(16)..];
            prop_assert_eq!(ids, top_k_candidates(&f_n.final_logits(&[tail]).unwrap()[0], k));
        }
    }

    #[test]
    fn zero_boost_keeps_plain_argmax((v, seed, ctx, k, l) in setup()) {
        let tr = run(v, seed, &ctx, k, l, 0.0);
        prop_assert_eq!(tr.chosen, tr.plain);
    }

    #[test]
    fn logit_shift_does_not_change_choice((v, seed, ctx, k, l) in setup(), w in 0.0f64..2.0, shift in -50.0f64..50.0) {
        let mut f_n = TableModel::new(v, 16, seed);
        let f_s = TableModel::new(v, 12, seed ^ 1);
        let cfg = RefineConfig { k, w, l, ..Default::default() };
        let base = agr_predict(&f_n, &f_s, &ctx, &cfg).unwrap().0;
        f_n.shift = shift;
        prop_assert_eq!(agr_predict(&f_n, &f_s, &ctx, &cfg).unwrap().0, base);
    }

    #[test]
    fn a_verified_choice_survives_larger_boosts((v, seed, ctx, k, l) in setup(), w1 in 0.0f64..1.0, extra in 0.0f64..3.0) {
        let lo = run(v, seed, &ctx, k, l, w1);
        let hi = lo.choose(w1 + extra, ScoreSpace::Logit);
        let verified = |id: u32| lo.candidates.iter().any(|c| c.id == id && c.verdict);
        if !lo.fallback && verified(lo.chosen) {
            prop_assert_eq!(hi, lo.chosen);
        }
        if !lo.fallback && !verified(hi) {
            prop_assert_eq!(hi, lo.plain);
        }
    }

    #[test]
    fn probability_space_agrees_with_logit_space((v, seed, ctx, k, l) in setup(), w in 0.0f64..3.0) {
        let tr = run(v, seed, &ctx, k, l, w);
        let p = tr.choose(w, ScoreSpace::Probability);
        if p != tr.chosen {
            // only a rounding-level tie may separate the two
            let s = |id: u32| tr.candidates.iter().find(|c| c.id == id).unwrap().score(w, ScoreSpace::Probability);
            prop_assert!((s(p) - s(tr.chosen)).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_matches_one_at_a_time() {
    let v = 7;
    let f_n = TableModel::new(v, 10, 3);
    let f_s = TableModel::new(v, 9, 4);
    let cfg = RefineConfig { k: 4, w: 0.3, l: 3, ..Default::default() };
    let mut state = 11u32;
    let contexts: Vec<Vec<u32>> = (0..300)
        .map(|i| {
            (0..1 + i % 23)
                .map(|_| {
                    state = state.wrapping_mul(1_103_515_245).wrapping_add(12345);
                    (state >> 16) % v as u32
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[u32]> = contexts.iter().map(|c| c.as_slice()).collect();
    let probes: Vec<u32> = contexts.iter().map(|c| c[0]).collect();
    let batched = agr_batch(&f_n, &f_s, &refs, Some(&probes), &cfg).unwrap();
    for ((ctx, tr), probe) in contexts.iter().zip(&batched).zip(&probes) {
        let single = agr_batch(&f_n, &f_s, &[ctx.as_slice()], Some(&[*probe]), &cfg).unwrap();
        assert_eq!(&single[0], tr);
        assert_eq!(agr_predict(&f_n, &f_s, ctx, &cfg).unwrap().0, tr.chosen);
    }
}
