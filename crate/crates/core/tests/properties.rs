mod common;

use common::invariants::{self, CASES};

#[test]
fn outcome_and_treatment_are_absorbing() {
    invariants::absorbing_processes(CASES).unwrap();
}

#[test]
fn mortality_split_adds_up() {
    invariants::split_additivity(CASES).unwrap();
}

#[test]
fn results_do_not_depend_on_worker_count() {
    invariants::worker_determinism(CASES).unwrap();
}

#[test]
fn rule_strategies_are_pure_and_monotone() {
    invariants::strategy_purity_and_monotonicity(CASES).unwrap();
}

#[test]
fn simulator_entry_points_agree() {
    invariants::simulator_entry_points_agree(200).unwrap();
}
