mod common;

use nanopipe::oracle::analytic_oracle;
use nanopipe::pipeline::{pipeline_run, Mode, PipelineConfig, Stage, STEADY_STATE_SKIP};

use common::{permutations, shapes};
use nanopipe::vnode::{camera_stream, CameraConfig};

#[test]
fn simulated_period_matches_both_oracles() {
    let mut cases = 0;
    for k in [2, 3] {
        for d in permutations(k) {
            for (shape, stages) in shapes(&d) {
                for pool in [1, 2, 3] {
                    for mode in [Mode::Serialized, Mode::Pipelined] {
                        let cfg = PipelineConfig::new(stages.clone(), mode, pool, common::PERIOD_FRAMES);
                        let sim = pipeline_run(&cfg).unwrap().steady_period_us(STEADY_STATE_SKIP).unwrap();
                        let closed = analytic_oracle(&stages, mode, pool).unwrap();
                        let rec = common::maxplus_period(&stages, mode, pool, common::PERIOD_FRAMES, STEADY_STATE_SKIP);
                        assert!(
                            (sim - closed).abs() <= 1.0 && (sim - rec).abs() < 1e-9,
                            "{shape} {d:?} pool={pool} {mode:?}: sim {sim}, closed form {closed}, recurrence {rec}"
                        );
                        cases += 1;
                    }
                }
            }
        }
    }
    assert_eq!(cases, (20 + 60 * 2) * 3 * 2);
}

#[test]
fn drop_law_on_a_grid() {
    let frames = 400;
    for period in [10_000u64, 20_000] {
        for readout in [4_000u64, 10_000] {
            for hold in [2_000u64, 8_000, 10_000, 16_000, 25_000] {
                for pool in [1usize, 2, 3] {
                    let mut cam = CameraConfig::streaming(160, 96, period);
                    cam.readout_us = readout.min(period);
                    let consumer = Stage::new("consumer", "cluster", hold);
                    let s = camera_stream(&cam, pool, std::slice::from_ref(&consumer), frames).unwrap();
                    // The same system on a 10x finer clock.
                    let mut fine = cam.clone();
                    fine.frame_period_us *= 10;
                    fine.readout_us *= 10;
                    let mut c10 = consumer;
                    c10.timing.occupancy_us *= 10;
                    let f = camera_stream(&fine, pool, &[c10], frames).unwrap();
                    let law = common::drop_free(period, cam.readout_us, hold, pool as u64);
                    let case = format!("period={period} readout={} hold={hold} pool={pool}", cam.readout_us);
                    assert_eq!(s.dropped == 0, law, "{case}: {} drops", s.dropped);
                    assert_eq!(s.dropped, f.dropped, "{case}: tick refinement changed drops");
                    if s.dropped == 0 {
                        assert_eq!(s.jitter_us, 0, "{case}");
                    }
                }
            }
        }
    }
}
