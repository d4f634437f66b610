//! Multiply-accumulate layers against big-integer and exact-rational oracles.

mod oracle;

use dfpq::engine::AccumulatorKind;
use oracle::mac::{check_case, random_case};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_layers_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut kinds = Vec::new();
    for case_index in 0..40 {
        let case = random_case(&mut rng, 2000);
        let outcome = check_case(&case, &mut rng);
        assert!(outcome.totals_exact, "case {case_index}: totals differ ({} terms)", case.terms);
        assert!(outcome.requantize_exact, "case {case_index}: requantized codes differ");
        kinds.push(outcome.kind);
    }
    for kind in [AccumulatorKind::Int64, AccumulatorKind::Buckets] {
        assert!(kinds.contains(&kind), "{kind:?} never exercised");
    }
}
