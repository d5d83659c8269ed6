use ross_core::selfcheck::loss_oracle_checks;

#[test]
fn loss_values_match_direct_oracles() {
    let rows = loss_oracle_checks(0x1055);
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!(r.passed, "{}: {}", r.name, r.detail);
        assert!(r.points > 0);
    }
    let hand = rows.iter().find(|r| r.name == "disc_gen_hand_values").unwrap();
    assert_eq!(hand.max_rel_err, 0.0);
}
