#![no_main]

use libfuzzer_sys::fuzz_target;
use retro_core::forward_sim::{parse_snapshots_csv, write_snapshots_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(snaps) = parse_snapshots_csv(s) else { return };
    // Whatever parses must survive a write/parse round trip.
    let mut buf = Vec::new();
    write_snapshots_csv(&snaps, &mut buf).unwrap();
    let again = parse_snapshots_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(snaps.len(), again.len());
    for (a, b) in snaps.iter().zip(&again) {
        assert_eq!(a.positions(), b.positions());
    }
});
