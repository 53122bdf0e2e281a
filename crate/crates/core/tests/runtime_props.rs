mod common;

use std::time::Duration;

use proptest::prelude::*;

use rnnt::decoder::{decode_utterance, DecodeParams, NoFusion};
use rnnt::runtime::{run_pipeline, FaultInjection, Mode, PipelineConfig};

use common::{micro_model, random_features};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Capacity-1 queues with adversarial per-stage delays still finish and
    /// give the sequential result.
    #[test]
    fn pipelined_output_is_config_independent(
        frames in 1usize..30,
        seed in any::<u64>(),
        caps in (1usize..4, 1usize..4),
        delays in prop::array::uniform3(0u64..200),
    ) {
        let model = micro_model(4, seed);
        let f = random_features(frames, 3, seed ^ 8);
        let p = DecodeParams::default();
        let (seq, t_seq) = run_pipeline(&model, &f, &p, &NoFusion, &PipelineConfig::sequential()).unwrap();
        let config = PipelineConfig {
            mode: Mode::Pipelined,
            queue_capacity: [caps.0, caps.1],
            faults: FaultInjection { delays: delays.map(Duration::from_micros), ..FaultInjection::default() },
        };
        let (pipe, t_pipe) = run_pipeline(&model, &f, &p, &NoFusion, &config).unwrap();
        prop_assert_eq!(&pipe, &seq);
        prop_assert_eq!(&seq, &decode_utterance(&model, &f, &p, &NoFusion).unwrap());
        let busy = |t: &rnnt::runtime::UttTiming| t.busy_s.iter().sum::<f64>();
        prop_assert!(busy(&t_seq) <= t_seq.proc_s * (1.0 + 1e-9));
        prop_assert!(busy(&t_pipe) <= 3.0 * t_pipe.proc_s);
    }
}
