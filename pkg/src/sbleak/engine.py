"""Architectural and transient execution of attack programs.

A faulting load may still receive data: if its low 12 address bits match
a store that is sitting in the store buffer, the store's bytes are
forwarded to the dependent instructions before the fault squashes them.
Only permission faults (supervisor page, denied protection key) take that
path, and only on microcode without the forwarding fix.
"""

from __future__ import annotations

import functools
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from . import dsl
from .channel import (PROBE_SLOTS, ProbeArray, TimingOracle, calibrated_oracle_threshold,
                      decode_byte, measure_reload)
from .machine import (LINE_MASK, LINE_SIZE, PAGE_MASK, PAGE_SIZE, AccessOutcome, LineState, MachineState,
                      MicrocodeProfile, PageMapping, PageTable, Prep, StoreBufferEntry,
                      TimingModel, classify_access)

# page placement; only the low 12 bits matter to the leak
USER_BASE = 0x0000_5555_0000_0000
KERNEL_BASE = 0xFFFF_8880_0000_0000
PROBE_BASE = 0x0000_7F00_0000_0000
DENIED_PKEY = 1

LEAKING_FAULTS = frozenset({AccessOutcome.FAULT_US, AccessOutcome.FAULT_PK})


class UnboundSymbol(LookupError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    """Flush+Reload parameters; means default to the timing model's latencies."""

    hit_mean: Optional[float] = None
    miss_mean: Optional[float] = None
    noise_sigma: float = 20.0
    stride: int = 4096

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.stride < LINE_SIZE:
            raise ValueError(f"probe stride must be at least {LINE_SIZE}")

    def oracle(self, timing: TimingModel, seed=None) -> TimingOracle:
        return TimingOracle(
            timing.hit_latency if self.hit_mean is None else self.hit_mean,
            timing.miss_latency if self.miss_mean is None else self.miss_mean,
            self.noise_sigma,
            seed,
        )


@dataclass(frozen=True)
class MachineConfig:
    """Everything needed to build a fresh machine; picklable for worker processes."""

    profile: MicrocodeProfile
    timing: TimingModel = field(default_factory=TimingModel)
    channel: ChannelConfig = field(default_factory=ChannelConfig)


@functools.lru_cache(maxsize=8)
def _probe_pages(base: int, stride: int) -> Dict[int, PageMapping]:
    pages = {}
    for addr in range(base & PAGE_MASK, base + PROBE_SLOTS * stride, PAGE_SIZE):
        pages[addr] = PageMapping(addr)
    return pages


def new_machine(config: MachineConfig) -> MachineState:
    probe = ProbeArray(PROBE_BASE, config.channel.stride)
    table = PageTable()
    table._pages.update(_probe_pages(probe.base, probe.stride))
    return MachineState(profile=config.profile, timing=config.timing, page_table=table,
                        probe=probe, channel=config.channel)


def _page_for(kind: dsl.FaultClass, index: int) -> Tuple[int, Optional[PageMapping]]:
    if kind is dsl.FaultClass.US:
        addr = KERNEL_BASE + index * PAGE_SIZE
        return addr, PageMapping(addr, user_accessible=False)
    addr = USER_BASE + index * PAGE_SIZE
    if kind is dsl.FaultClass.PK:
        return addr, PageMapping(addr, protection_key=DENIED_PKEY, key_denied=True)
    if kind is dsl.FaultClass.NP:
        return addr, None
    return addr, PageMapping(addr)


def bind_program(machine: MachineState, program: dsl.AttackProgram) -> None:
    """Give every declared symbol an address and map its page as requested."""
    machine.compiled.clear()
    for i, sym in enumerate(program.symbols):
        if sym.kind == "probe":
            machine.bindings[sym.name] = machine.probe.base
            continue
        addr, mapping = _page_for(sym.fault, i)
        machine.bindings[sym.name] = addr
        if mapping is None:
            machine.page_table.unmap(addr)
        else:
            machine.page_table.map(mapping)


def forward_decision(fault: AccessOutcome, alias_hit: bool, mitigated: bool, load_time: int,
                     entry: Optional[StoreBufferEntry]) -> bool:
    """Does a load with outcome ``fault`` receive the aliased store's data?"""
    return (
        fault in LEAKING_FAULTS
        and alias_hit
        and not mitigated
        and entry is not None
        and entry.inserted_at <= load_time < entry.drain_at
    )


@dataclass(frozen=True)
class AttemptResult:
    fault: AccessOutcome
    forwarded: bool
    transient_touches: FrozenSet[int]
    cycles_consumed: int


# compiled opcodes
_SETREG, _STORE, _LOAD, _FLUSH, _LOCKINC, _FENCE, _ENCODE = range(7)


def _compile(machine: MachineState, program: dsl.AttackProgram):
    def resolve(a: dsl.Addr) -> int:
        try:
            return machine.bindings[a.symbol] + a.offset
        except KeyError:
            raise UnboundSymbol(a.symbol) from None

    for sym in program.symbols:
        if sym.name not in machine.bindings:
            raise UnboundSymbol(sym.name)

    ops: List[tuple] = []
    for ins in program.instructions:
        if isinstance(ins, dsl.SetReg):
            ops.append((_SETREG, ins.reg, ins.value))
        elif isinstance(ins, dsl.Store):
            ops.append([_STORE, resolve(ins.addr), ins.src, ins.size, Prep.NONE])
        elif isinstance(ins, dsl.Load):
            ops.append((_LOAD, ins.dest, resolve(ins.addr), ins.size))
        elif isinstance(ins, dsl.Flush):
            ops.append((_FLUSH, resolve(ins.addr)))
        elif isinstance(ins, dsl.LockInc):
            ops.append((_LOCKINC, resolve(ins.addr)))
        elif isinstance(ins, dsl.Fence):
            ops.append((_FENCE,))
        elif isinstance(ins, dsl.Encode):
            ops.append((_ENCODE, ins.src))

    # A clflush or lock-inc of the store's line issued before the next load
    # or fence decides how long that store stays in the buffer.
    for i, op in enumerate(ops):
        if op[0] != _STORE:
            continue
        line = op[1] & LINE_MASK
        prep = Prep.NONE
        for later in ops[i + 1:]:
            if later[0] in (_LOAD, _FENCE):
                break
            if later[0] == _LOCKINC and later[1] & LINE_MASK == line:
                prep = Prep.LOCKINC
            elif later[0] == _FLUSH and later[1] & LINE_MASK == line and prep is Prep.NONE:
                prep = Prep.CLFLUSH
        ops[i] = tuple(op[:4]) + (prep,)

    # where run_attempt(secret=...) plants its byte
    secret_at = None
    reg = program.planted_register()
    if reg is not None:
        first_store = next(i for i, op in enumerate(ops) if op[0] == _STORE)
        for i in range(first_store - 1, -1, -1):
            if ops[i][0] == _SETREG and ops[i][1] == reg:
                secret_at = i
                break
    return ops, secret_at, reg


def _compiled(machine: MachineState, program: dsl.AttackProgram):
    cache = machine.compiled
    hit = cache.get(id(program))
    if hit is None or hit[0] is not program:
        hit = (program, _compile(machine, program))
        cache[id(program)] = hit
    return hit[1]


def run_attempt(machine: MachineState, program: dsl.AttackProgram, jitter: int = 0,
                secret: Optional[int] = None) -> AttemptResult:
    """Run ``program`` once, advancing ``machine.clock``.

    ``jitter`` delays the faulting load's alias check; ``secret`` replaces
    the value planted into the first store's source register.
    """
    ops, secret_at, secret_reg = _compiled(machine, program)
    tm = machine.timing
    table = machine.page_table
    cache = machine.cache
    sb = machine.store_buffer
    regs = machine.regs
    start = now = machine.clock
    fault = AccessOutcome.OK
    forwarded = False
    touches: FrozenSet[int] = frozenset()

    if secret is not None and secret_at is None and secret_reg is not None:
        regs[secret_reg] = secret

    for idx, op in enumerate(ops):
        code = op[0]
        if code == _SETREG:
            regs[op[1]] = secret if idx == secret_at and secret is not None else op[2]
            now += 1
        elif code == _STORE:
            _, vaddr, src, size, prep = op
            acc = classify_access(table, vaddr, True)
            if acc is not AccessOutcome.OK:
                fault = acc
                now += 1
                break
            data = (regs[src] & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
            state = LineState.INVALID if prep is Prep.CLFLUSH else cache.state(vaddr)
            sb.insert(vaddr, data, now, state, prep, tm)
            machine.write_memory(vaddr, data)
            cache.touch(vaddr, write=True)
            now += 1
        elif code == _LOAD:
            _, dest, vaddr, size = op
            acc = classify_access(table, vaddr, True)
            if acc is AccessOutcome.OK:
                now += tm.hit_latency if cache.is_cached(vaddr) else tm.miss_latency
                regs[dest] = machine.read_memory(vaddr, size)
                cache.touch(vaddr)
                continue
            fault = acc
            check = now + tm.forward_latency + jitter
            offset = vaddr % PAGE_SIZE
            entry = sb.lookup_alias(offset, size, check)
            forwarded = forward_decision(acc, entry is not None,
                                         machine.profile.forwarding_mitigated, check, entry)
            if forwarded:
                lo = offset - entry.page_offset
                value = int.from_bytes(entry.data[lo:lo + size], "little")
                touches = _run_transient(machine, ops[idx + 1:], dest, value, check)
            now = check + tm.transient_window
            break
        elif code == _FLUSH:
            cache.flush(op[1])
            now += 1
        elif code == _LOCKINC:
            vaddr = op[1]
            acc = classify_access(table, vaddr, True)
            if acc is not AccessOutcome.OK:
                fault = acc
                now += 1
                break
            value = (machine.read_memory(vaddr, 4) + 1) & 0xFFFFFFFF
            machine.write_memory(vaddr, value.to_bytes(4, "little"))
            cache.touch(vaddr, write=True)
            now += 1
        elif code == _FENCE:
            now = max(now, sb.drained_by()) + 1
        elif code == _ENCODE:
            addr = machine.probe.slot(regs[op[1]])
            now += tm.hit_latency if cache.is_cached(addr) else tm.miss_latency
            cache.touch(addr)

    machine.clock = now
    return AttemptResult(fault, forwarded, touches, now - start)


def _run_transient(machine: MachineState, ops: Sequence[tuple], dest: int, value: int,
                   start: int) -> FrozenSet[int]:
    """Execute what follows a forwarding load until the fault lands.

    Register writes go to a shadow copy that is thrown away; cache fills stay.
    """
    shadow = list(machine.regs)
    shadow[dest] = value
    cache = machine.cache
    deadline = start + machine.timing.transient_window
    t = start
    touched = set()
    for op in ops:
        t += 1
        if t > deadline:
            break
        code = op[0]
        if code == _SETREG:
            shadow[op[1]] = op[2]
        elif code == _LOAD:
            _, reg, vaddr, size = op
            if classify_access(machine.page_table, vaddr, True) is not AccessOutcome.OK:
                break
            shadow[reg] = machine.read_memory(vaddr, size)
            cache.touch(vaddr)
        elif code == _ENCODE:
            slot = shadow[op[1]] & 0xFF
            cache.touch(machine.probe.slot(slot))
            touched.add(slot)
        elif code == _FENCE:
            break
        # stores, flushes and locked ops never leave the squashed window
    return frozenset(touched)


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------


@dataclass
class LeakageReport:
    secret_len: int
    recovered: Dict[int, Tuple[int, float]]
    attempts: int
    correct: int
    ambiguous: int
    sim_cycles: int
    nominal_frequency: int

    @property
    def rate(self) -> float:
        """Correctly leaked bytes per simulated second."""
        if self.sim_cycles <= 0:
            return 0.0
        return self.correct * self.nominal_frequency / self.sim_cycles

    def recovered_bytes(self) -> Optional[bytes]:
        if len(self.recovered) != self.secret_len:
            return None
        return bytes(self.recovered[i][0] for i in range(self.secret_len))

    def to_dict(self) -> dict:
        return {
            "secret_len": self.secret_len,
            "recovered": "".join(
                f"{self.recovered[i][0]:02x}" if i in self.recovered else "??"
                for i in range(self.secret_len)),
            "confidence": [round(self.recovered[i][1], 4) if i in self.recovered else 0.0
                           for i in range(self.secret_len)],
            "attempts": self.attempts,
            "correct": self.correct,
            "ambiguous": self.ambiguous,
            "sim_cycles": self.sim_cycles,
            "rate": self.rate,
        }


JITTER_BLOCK = 4096


def warm_store_lines(machine: MachineState, program: dsl.AttackProgram) -> None:
    for op in _compiled(machine, program)[0]:
        if op[0] == _STORE:
            machine.cache.touch(op[1])


def run_experiment(machine: MachineState, program: dsl.AttackProgram, secret: bytes,
                   budget: int, seed=0) -> LeakageReport:
    """Leak ``secret`` one byte per attempt, round-robin, until ``budget`` cycles pass."""
    tm = machine.timing
    jitter_seq, oracle_seq = np.random.SeedSequence(seed).spawn(2)
    jitter_rng = np.random.default_rng(jitter_seq)
    channel = machine.channel or ChannelConfig()
    oracle = channel.oracle(tm, np.random.default_rng(oracle_seq))
    threshold = calibrated_oracle_threshold(oracle)

    bind_program(machine, program)
    warm_store_lines(machine, program)

    votes = [Counter() for _ in secret]
    attempts = correct = ambiguous = 0
    start = machine.clock
    jitters = np.empty(0, dtype=np.int64)
    while secret and machine.clock - start < budget:
        k = attempts % JITTER_BLOCK
        if k == 0:
            jitters = jitter_rng.integers(0, tm.issue_jitter + 1, JITTER_BLOCK)
        pos = attempts % len(secret)
        machine.probe.flush(machine.cache)
        machine.clock += PROBE_SLOTS
        run_attempt(machine, program, int(jitters[k]), secret[pos])
        lat = measure_reload(machine.probe, machine.cache, oracle)
        machine.clock += int(lat.sum())
        attempts += 1
        got = decode_byte(lat, threshold)
        if got.value is not None:
            votes[pos][got.value] += 1
            correct += got.value == secret[pos]
            ambiguous += got.ambiguous

    recovered = {}
    for pos, c in enumerate(votes):
        if c:
            value, n = max(c.items(), key=lambda kv: (kv[1], -kv[0]))
            recovered[pos] = (value, n / sum(c.values()))
    return LeakageReport(len(secret), recovered, attempts, correct, ambiguous,
                         machine.clock - start, tm.nominal_frequency)


def expected_success_probability(timing: TimingModel, prep: Prep) -> float:
    """Closed-form forwarding probability for the canonical program.

    The store enters the buffer at cycle t; the faulting load's alias check
    happens at t + gap + j with j uniform on [0, issue_jitter]. Forwarding
    needs the check strictly before t + residency.
    """
    residency = timing.drain_delay(LineState.EXCLUSIVE if prep is Prep.NONE else LineState.INVALID,
                                   prep)
    gap = 1 + (0 if prep is Prep.NONE else 1) + timing.forward_latency
    hits = min(max(residency - gap, 0), timing.issue_jitter + 1)
    return hits / (timing.issue_jitter + 1)
