use nmrpc::model_check::{check_rings, check_rings_with, ReleaseOrder};

#[test]
fn two_slot_rings_are_safe_for_several_requests() {
    for rpcs in 1..=6 {
        let r = check_rings(2, rpcs);
        assert!(r.ok(), "K={rpcs}: {:?}", r.violations);
        assert!(r.terminal_states >= 1);
        assert!(
            r.transitions >= r.states - 1,
            "graph is connected from the initial state"
        );
    }
}

#[test]
fn four_slot_rings_are_safe() {
    let r = check_rings(4, 5);
    assert!(r.ok(), "{:?}", r.violations);
}

#[test]
fn state_space_grows_with_requests() {
    let small = check_rings(2, 2).states;
    let large = check_rings(2, 4).states;
    assert!(large > small);
}

#[test]
fn exploration_is_deterministic() {
    assert_eq!(check_rings(2, 3), check_rings(2, 3));
}

#[test]
fn out_of_order_release_is_detected() {
    let r = check_rings_with(2, 4, ReleaseOrder::Any);
    assert!(!r.ok());
    assert!(!r.violations.is_empty());
}
