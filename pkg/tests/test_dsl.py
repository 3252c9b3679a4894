import itertools

import pytest
from hypothesis import given, settings

from strategies import programs

from sbleak.dsl import (Addr, AttackProgram, DslSyntaxError, Encode, FaultClass, FaultPolicy,
                        Fence, Flush, InvalidProgram, Load, LockInc, MultipleFaultingLoads,
                        SetReg, Store, Symbol, UnknownSymbol, canonical_msbds_program,
                        parse_program, serialize_program)
from sbleak.machine import Prep

HEADER = "page A\npage B fault=us\nprobe P\n"


def test_parse_store_line():
    p = parse_program(HEADER + "store A+0x123, r1, 8\n")
    assert p.instructions == (Store(Addr("A", 0x123), 1, 8),)


def test_parse_empty_text():
    p = parse_program("")
    assert p.instructions == () and p.symbols == ()


def test_parse_unbound_symbol():
    with pytest.raises(UnknownSymbol):
        parse_program(HEADER + "load r2, Q\n")


def test_parse_full_listing():
    text = """
    # store, disturb the line, faulting aliased load, encode
    policy abort
    page A
    page B fault=pk
    probe P
    setreg r1, 65
    store A+0x120, r1, 8
    clflush A+0x120
    lockinc A+288
    fence
    load r2, B+0x120
    encode P, r2
    """
    p = parse_program(text)
    assert p.fault_policy is FaultPolicy.ABORT
    assert p.symbols[1] == Symbol("B", "page", FaultClass.PK)
    assert p.instructions == (
        SetReg(1, 65), Store(Addr("A", 0x120), 1, 8), Flush(Addr("A", 0x120)),
        LockInc(Addr("A", 0x120)), Fence(), Load(2, Addr("B", 0x120), 1), Encode("P", 2))


@pytest.mark.parametrize("text,line", [
    ("page A\nstore A, r1\n", 2),
    ("page A\n\nfrobnicate A\n", 3),
    ("page A\nsetreg r16, 1\n", 2),
    ("page A\nstore A+0x1000, r1, 8\n", 2),
    ("page A\nstore A, r1, 9\n", 2),
    ("page A fault=xx\n", 1),
    ("page A\npage A\n", 2),
    ("page A\nprobe P\nencode P, r3\n", 3),
    ("page A\nsetreg r1, zz\n", 2),
])
def test_syntax_errors_carry_line(text, line):
    with pytest.raises(DslSyntaxError) as exc:
        parse_program(text)
    assert exc.value.line == line


def test_multiple_faulting_loads():
    with pytest.raises(MultipleFaultingLoads):
        parse_program(HEADER + "load r2, B\nload r3, B+8\n")


def test_encode_requires_a_load():
    with pytest.raises(InvalidProgram):
        AttackProgram((SetReg(2, 1), Encode("P", 2)), (Symbol("P", "probe"),))


def test_serialize_fence_line():
    p = AttackProgram((Fence(),), ())
    assert serialize_program(p) == "fence\n"


def test_serialize_empty():
    assert serialize_program(AttackProgram()) == ""


def test_canonical_round_trip():
    p = canonical_msbds_program(Prep.LOCKINC)
    assert parse_program(serialize_program(p)) == p


def test_canonical_text():
    text = serialize_program(canonical_msbds_program(Prep.CLFLUSH, FaultClass.PK))
    assert text == (
        "page A\npage B fault=pk\nprobe P\n"
        "setreg r1, 0x41\nstore A+0x120, r1, 8\nclflush A+0x120\n"
        "load r2, B+0x120, 1\nencode P, r2\n")


def _kinds(p):
    return [type(i) for i in p.instructions]


def test_canonical_lockinc_us():
    p = canonical_msbds_program(Prep.LOCKINC, FaultClass.US)
    store = p.instructions[1]
    assert LockInc(store.addr) in p.instructions
    load = next(i for i in p.instructions if isinstance(i, Load))
    assert p.symbol(load.addr.symbol).fault is FaultClass.US
    assert load.addr.offset == store.addr.offset and load.addr.symbol != store.addr.symbol


def test_canonical_none_has_no_prep():
    with_prep = _kinds(canonical_msbds_program(Prep.LOCKINC, FaultClass.US))
    without = _kinds(canonical_msbds_program(Prep.NONE, FaultClass.US))
    with_prep.remove(LockInc)
    assert without == with_prep


def test_canonical_clflush_pk():
    p = canonical_msbds_program(Prep.CLFLUSH, FaultClass.PK)
    assert Flush(Addr("A", 0x120)) in p.instructions
    assert p.symbol("B").fault is FaultClass.PK


@pytest.mark.parametrize("prep,fault", list(itertools.product(
    list(Prep), [FaultClass.US, FaultClass.PK, FaultClass.NP])))
def test_canonical_programs_are_valid(prep, fault):
    p = canonical_msbds_program(prep, fault)
    assert len(p.faulting_loads()) == 1
    kinds = _kinds(p)
    assert kinds[:2] == [SetReg, Store] and kinds[-2:] == [Load, Encode]
    assert p.instructions[-1].src == p.instructions[-2].dest
    AttackProgram(p.instructions, p.symbols, p.fault_policy)  # re-validates


def test_with_secret_replaces_planted_value():
    p = canonical_msbds_program().with_secret(0x99)
    assert p.instructions[0] == SetReg(1, 0x99)


# --- generated programs ----------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(programs())
def test_parse_serialize_identity(p):
    assert parse_program(serialize_program(p)) == p
