// SPDX-License-Identifier: Apache-2.0

mod support;

use support::{engine, micro_instances, reference, Instance, MicroJob, Shape};

#[test]
fn engine_matches_minute_stepped_reference() {
    let all = micro_instances(2, 200);
    let mut bad = Vec::new();
    for inst in &all {
        let (a, b) = (engine(inst), reference(inst));
        if a.is_none() || a != b {
            bad.push((inst.clone(), a, b));
        }
    }
    assert!(bad.is_empty(), "{} of {} differ; first: {:?}", bad.len(), all.len(), bad.first());
}

#[test]
fn hold_and_block_retry_cycle() {
    // 3 GPUs on one server force the second 2-GPU job through a timeout,
    // a backoff and a retry before the first job frees a GPU at minute 6
    let inst = Instance {
        shape: Shape { racks: 1, servers_per_rack: 1, gpus: 3 },
        quotas: vec![3],
        jobs: vec![
            MicroJob { vc: 0, demand: 2, submit: 0, dur: 6 },
            MicroJob { vc: 0, demand: 2, submit: 0, dur: 1 },
        ],
    };
    let want = Some(vec![(0, 6), (6, 7)]);
    assert_eq!(reference(&inst), want);
    assert_eq!(engine(&inst), want);
}
