use nalgebra::DMatrix;
use proptest::prelude::*;

use daestruct::numlin::{pivoted_qr, svd_rank};
use daestruct::structure::{solve_offsets, SignatureMatrix, StructureError};

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

fn entry() -> impl Strategy<Value = i32> {
    prop_oneof![Just(i32::MIN), 0..=3i32]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn offsets_are_feasible_and_reach_the_transversal(rows in (1usize..=4).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(entry(), n), n))) {
        let sig = SignatureMatrix::from_rows(&rows);
        let best = permutations(rows.len()).iter().filter_map(|p| sig.transversal_value(p)).max();
        match (best, solve_offsets(&sig)) {
            (None, r) => prop_assert_eq!(r, Err(StructureError::NoPerfectMatching)),
            (Some(best), Ok(off)) => {
                prop_assert!(off.is_feasible_for(&sig));
                prop_assert_eq!(off.delta, best);
                // canonical offsets: some equation needs no differentiation
                prop_assert_eq!(off.c.iter().min().copied(), Some(0));
            }
            (Some(_), Err(e)) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn svd_and_qr_agree_on_products(n in 2usize..8, m in 2usize..8, k in 1usize..8, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let k = k.min(n).min(m);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0)) * DMatrix::from_fn(k, m, |_, _| rng.gen_range(-1.0..1.0));
        prop_assert_eq!(svd_rank(&a, 1e-8).unwrap().rank, k);
        prop_assert_eq!(pivoted_qr(&a, 1e-8).unwrap().rank, k);
    }
}
