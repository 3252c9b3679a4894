"""Hypothesis strategies shared by the DSL tests and the acceptance suite."""

from hypothesis import strategies as st

from sbleak.dsl import (Addr, AttackProgram, Encode, FaultClass, FaultPolicy, Fence, Flush, Load,
                        LockInc, SetReg, Store, Symbol)

regs = st.integers(0, 15)


@st.composite
def programs(draw):
    n_pages = draw(st.integers(1, 3))
    faults = draw(st.lists(st.sampled_from(list(FaultClass)), min_size=n_pages, max_size=n_pages))
    symbols = [Symbol(f"pg{i}", "page", f) for i, f in enumerate(faults)]
    has_probe = draw(st.booleans())
    if has_probe:
        symbols.append(Symbol("probe", "probe"))
    pages = [s.name for s in symbols if s.kind == "page"]
    addrs = st.builds(Addr, st.sampled_from(pages), st.integers(0, 4095))

    instrs, loaded, faulting = [], [], False
    for _ in range(draw(st.integers(0, 12))):
        kind = draw(st.sampled_from(["set", "store", "load", "flush", "lock", "fence", "enc"]))
        if kind == "set":
            instrs.append(SetReg(draw(regs), draw(st.integers(0, 2**64 - 1))))
        elif kind == "store":
            instrs.append(Store(draw(addrs), draw(regs), draw(st.integers(1, 8))))
        elif kind == "load":
            a = draw(addrs)
            bad = dict(zip(pages, faults))[a.symbol] is not FaultClass.NONE
            if bad and faulting:
                continue
            faulting |= bad
            ld = Load(draw(regs), a, draw(st.integers(1, 8)))
            loaded.append(ld.dest)
            instrs.append(ld)
        elif kind == "flush":
            instrs.append(Flush(draw(addrs)))
        elif kind == "lock":
            instrs.append(LockInc(draw(addrs)))
        elif kind == "fence":
            instrs.append(Fence())
        elif has_probe and loaded:
            instrs.append(Encode("probe", draw(st.sampled_from(loaded))))
    policy = draw(st.sampled_from(list(FaultPolicy)))
    return AttackProgram(tuple(instrs), tuple(symbols), policy)
