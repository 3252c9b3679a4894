import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from strategies import programs

from sbleak.dsl import (Addr, AttackProgram, Encode, FaultClass, Load, SetReg, Store, Symbol,
                        canonical_msbds_program)
from sbleak.engine import (LEAKING_FAULTS, AttemptResult, MachineConfig, UnboundSymbol,
                           bind_program, expected_success_probability, forward_decision,
                           new_machine, run_attempt, run_experiment)
from sbleak.machine import (AccessOutcome, Prep, StoreBufferEntry, StoreSplitUnsupported,
                            TimingModel, get_profile)

SECRET = bytes(range(0x20, 0x60))  # 64 bytes


def machine_for(rev, **timing):
    return new_machine(MachineConfig(get_profile(rev), TimingModel(**timing)))


def live_entry():
    return StoreBufferEntry(0x5000_0123, 0x123, b"\x41" * 8, 8, 100, 400)


# --- forward_decision ------------------------------------------------------


def test_forward_on_vulnerable_microcode():
    assert forward_decision(AccessOutcome.FAULT_US, True, get_profile(0x48).forwarding_mitigated,
                            250, live_entry())


def test_no_forward_on_fixed_microcode():
    assert not forward_decision(AccessOutcome.FAULT_US, True,
                                get_profile(0x66).forwarding_mitigated, 250, live_entry())


@pytest.mark.parametrize("fault", [AccessOutcome.FAULT_NP, AccessOutcome.OK])
def test_no_forward_without_permission_fault(fault):
    assert not forward_decision(fault, True, False, 250, live_entry())


@pytest.mark.parametrize("t", [99, 400, 401])
def test_no_forward_outside_residency(t):
    assert not forward_decision(AccessOutcome.FAULT_PK, True, False, t, live_entry())


def test_no_forward_without_alias():
    assert not forward_decision(AccessOutcome.FAULT_PK, False, False, 250, live_entry())
    assert not forward_decision(AccessOutcome.FAULT_PK, True, False, 250, None)


# --- run_attempt -----------------------------------------------------------


def _bound(rev, program):
    m = machine_for(rev)
    bind_program(m, program)
    return m


def test_lockinc_us_leaks_planted_byte():
    p = canonical_msbds_program(Prep.LOCKINC, FaultClass.US)
    r = run_attempt(_bound(0x32, p), p, jitter=0, secret=0x41)
    assert r.fault is AccessOutcome.FAULT_US
    assert r.forwarded
    assert r.transient_touches == frozenset({0x41})


def test_secret_argument_overrides_program_value():
    p = canonical_msbds_program(Prep.LOCKINC, FaultClass.PK)
    r = run_attempt(_bound(0x48, p), p, jitter=10, secret=0xC3)
    assert r.fault is AccessOutcome.FAULT_PK
    assert r.transient_touches == frozenset({0xC3})


def test_mitigated_microcode_touches_nothing():
    p = canonical_msbds_program(Prep.LOCKINC, FaultClass.US)
    r = run_attempt(_bound(0x86, p), p, jitter=0, secret=0x41)
    assert r.fault is AccessOutcome.FAULT_US
    assert not r.forwarded and r.transient_touches == frozenset()


def test_late_check_misses_the_store():
    p = canonical_msbds_program(Prep.LOCKINC, FaultClass.US)
    r = run_attempt(_bound(0x32, p), p, jitter=300, secret=0x41)
    assert not r.forwarded


def test_no_store_no_forward():
    syms = (Symbol("B", "page", FaultClass.US), Symbol("P", "probe"))
    p = AttackProgram((Load(2, Addr("B", 0x120)), Encode("P", 2)), syms)
    r = run_attempt(_bound(0x32, p), p)
    assert r.fault is AccessOutcome.FAULT_US and not r.forwarded


def test_np_page_never_forwards():
    p = canonical_msbds_program(Prep.LOCKINC, FaultClass.NP)
    r = run_attempt(_bound(0x32, p), p, jitter=0)
    assert r.fault is AccessOutcome.FAULT_NP and not r.forwarded


def test_unbound_symbol():
    p = canonical_msbds_program()
    with pytest.raises(UnboundSymbol):
        run_attempt(machine_for(0x32), p)


def test_line_straddling_store():
    p = AttackProgram((SetReg(1, 7), Store(Addr("A", 0x13C), 1, 8)), (Symbol("A", "page"),))
    with pytest.raises(StoreSplitUnsupported):
        run_attempt(_bound(0x32, p), p)


def test_architectural_state_identical_across_microcode():
    p = canonical_msbds_program(Prep.LOCKINC, FaultClass.US)
    states = []
    for rev in (0x32, 0x86):
        m = _bound(rev, p)
        r = run_attempt(m, p, jitter=0, secret=0x41)
        states.append((m.architectural_state(), r.cycles_consumed))
    assert states[0] == states[1]


@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(programs(), st.sampled_from([0x32, 0x48, 0x86]), st.integers(0, 300))
def test_attempt_result_invariants(program, rev, jitter):
    m = _bound(rev, program)
    before = m.clock
    try:
        r = run_attempt(m, program, jitter)
    except StoreSplitUnsupported:
        return
    assert isinstance(r, AttemptResult)
    assert r.cycles_consumed == m.clock - before >= 0
    if r.forwarded:
        assert r.fault in LEAKING_FAULTS
        assert not m.profile.forwarding_mitigated
    else:
        assert r.transient_touches == frozenset()
    assert all(0 <= t < 256 for t in r.transient_touches)


# --- run_experiment --------------------------------------------------------


def test_experiment_recovers_secret_on_vulnerable_part():
    p = canonical_msbds_program(Prep.LOCKINC, FaultClass.US)
    rep = run_experiment(machine_for(0x32), p, SECRET, 3 * 10**7, seed=1)
    assert rep.recovered_bytes() == SECRET
    assert rep.rate > 0


def test_experiment_mitigated_leaks_nothing():
    p = canonical_msbds_program(Prep.LOCKINC, FaultClass.US)
    rep = run_experiment(machine_for(0x66), p, SECRET, 3 * 10**7, seed=1)
    assert rep.recovered == {} and rep.correct == 0 and rep.rate == 0
    assert rep.attempts > 0


def test_zero_budget():
    rep = run_experiment(machine_for(0x32), canonical_msbds_program(), SECRET, 0)
    assert rep.attempts == 0 and rep.rate == 0


@pytest.mark.parametrize("prep", list(Prep))
def test_success_fraction_matches_closed_form(prep):
    p = canonical_msbds_program(prep, FaultClass.US)
    rep = run_experiment(machine_for(0x32), p, SECRET, 2 * 10**8, seed=3)
    q = expected_success_probability(TimingModel(), prep)
    n = rep.attempts
    sigma = np.sqrt(n * q * (1 - q))
    assert abs(rep.correct - n * q) <= 4 * sigma + 1


def test_closed_form_values():
    tm = TimingModel()
    assert expected_success_probability(tm, Prep.NONE) == pytest.approx(1 / 301)
    assert expected_success_probability(tm, Prep.CLFLUSH) == pytest.approx(195 / 301)
    assert expected_success_probability(tm, Prep.LOCKINC) == pytest.approx(295 / 301)


def test_rate_monotone_in_residency():
    p = canonical_msbds_program(Prep.NONE, FaultClass.US)
    rates = [run_experiment(machine_for(0x32, drain_cached=d), p, SECRET, 5 * 10**7, seed=9).rate
             for d in (5, 40, 80, 120, 160, 199)]
    assert rates == sorted(rates)
    assert rates[-1] > rates[0]


def test_experiment_deterministic():
    p = canonical_msbds_program(Prep.CLFLUSH, FaultClass.PK)
    a = run_experiment(machine_for(0x48), p, SECRET, 10**7, seed=5)
    b = run_experiment(machine_for(0x48), p, SECRET, 10**7, seed=5)
    assert a == b
