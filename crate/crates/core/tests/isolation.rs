// Copyright 2026 The hmvcc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Interleaved histories checked against every serial order of their
//! committed transactions.

#[path = "support/histories.rs"]
mod histories;

use histories::{execute, random_history, sweep, write_skew};
use hmvcc::engine::{AbortReasonKind, CommitOutcome, EngineMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn write_skew_under_si_and_serializable() {
    let si = write_skew(EngineMode::HomogeneousSi);
    assert!(si.iter().all(CommitOutcome::committed), "{si:?}");
    for mode in [
        EngineMode::HomogeneousSerializable,
        EngineMode::HeterogeneousSerializable,
    ] {
        let s = write_skew(mode);
        assert_eq!(
            s.iter().filter(|o| o.committed()).count(),
            1,
            "{mode}: {s:?}"
        );
        assert_eq!(
            s[1],
            CommitOutcome::Aborted(AbortReasonKind::Serializability)
        );
    }
}

#[test]
fn random_histories_serializable() {
    for mode in [
        EngineMode::HomogeneousSerializable,
        EngineMode::HeterogeneousSerializable,
    ] {
        let (failures, aborts) = sweep(mode, 0x5eed, 500);
        assert_eq!(failures, 0, "{mode}");
        assert!(aborts > 0, "{mode}: contention never produced an abort");
    }
}

#[test]
fn snapshot_isolation_admits_anomalies() {
    let (witnesses, _) = sweep(EngineMode::HomogeneousSi, 0x5eed, 500);
    assert!(witnesses > 0);
}

#[test]
fn failing_history_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut value = 100;
    let mut found = None;
    for i in 0..500 {
        let rows = rng.gen_range(1..=8);
        let h = random_history(&mut rng, rows, &mut value);
        if !execute(EngineMode::HomogeneousSi, rows, &h).serializable {
            // Replaying the same history serializably must be accepted.
            assert!(execute(EngineMode::HomogeneousSerializable, rows, &h).serializable);
            found = Some(i);
            break;
        }
    }
    assert!(found.is_some());
}
