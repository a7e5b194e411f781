use std::path::Path;

use proptest::prelude::*;

use retro_cli::config::ExperimentConfig;
use retro_core::forward_sim::parse_snapshots_csv;

fn corpus(target: &str) -> Vec<String> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| std::fs::read_to_string(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    assert!(!out.is_empty(), "{}", dir.display());
    out
}

#[test]
fn config_seeds_parse_or_reject_cleanly() {
    let seeds = corpus("fuzz_config");
    let ok = seeds.iter().filter(|s| ExperimentConfig::parse(s).is_ok()).count();
    assert!(ok >= seeds.len() - 1, "only {ok} of {} seeds parse", seeds.len());
}

#[test]
fn snapshot_seeds_parse_or_reject_cleanly() {
    let seeds = corpus("fuzz_snapshot_csv");
    let ok = seeds.iter().filter(|s| parse_snapshots_csv(s).is_ok()).count();
    assert!(ok >= 3);
}

fn mutate(seed: &str, cuts: &[(usize, u8)]) -> String {
    let mut bytes = seed.as_bytes().to_vec();
    for &(pos, b) in cuts {
        if bytes.is_empty() {
            break;
        }
        let i = pos % bytes.len();
        match b % 3 {
            0 => bytes[i] = b,
            1 => {
                bytes.remove(i);
            }
            _ => bytes.insert(i, b),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

proptest! {
    #[test]
    fn mutated_configs_never_panic(pick in 0usize..64, cuts in prop::collection::vec((0usize..4096, any::<u8>()), 0..8)) {
        let seeds = corpus("fuzz_config");
        let _ = ExperimentConfig::parse(&mutate(&seeds[pick % seeds.len()], &cuts));
    }

    #[test]
    fn mutated_snapshots_never_panic(pick in 0usize..64, cuts in prop::collection::vec((0usize..4096, any::<u8>()), 0..8)) {
        let seeds = corpus("fuzz_snapshot_csv");
        let _ = parse_snapshots_csv(&mutate(&seeds[pick % seeds.len()], &cuts));
    }
}
