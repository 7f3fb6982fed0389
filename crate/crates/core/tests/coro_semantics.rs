mod common;

use proptest::prelude::*;

#[test]
fn immediate_resume_on_completed_event() {
    common::check_immediate_resume().unwrap();
}

#[test]
fn transition_table_is_exhaustive() {
    common::check_transitions().unwrap();
}

proptest! {
    #[test]
    fn waiters_resume_exactly_once(n in 1usize..40) {
        prop_assert_eq!(common::check_exactly_once(n), Ok(()));
    }

    #[test]
    fn waiters_resume_in_fifo_order(n in 1usize..40) {
        prop_assert_eq!(common::check_fifo(n), Ok(()));
    }

    #[test]
    fn completion_fans_out_at_one_instant(n in 1usize..40, at in 0u64..1_000_000) {
        prop_assert_eq!(common::check_fan_out(n, at), Ok(()));
    }
}
