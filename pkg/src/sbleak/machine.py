"""Simulated hardware state: pages, cache lines, store buffer, microcode.

Everything here is plain bookkeeping. The forwarding rule that decides
whether a faulting load sees store-buffer data lives in :mod:`sbleak.engine`.
"""

from __future__ import annotations

import datetime as _dt
import enum
from dataclasses import dataclass, field, fields, replace
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Optional

if TYPE_CHECKING:
    from .channel import ProbeArray

PAGE_SIZE = 4096
LINE_SIZE = 64
PAGE_MASK = ~(PAGE_SIZE - 1)
LINE_MASK = ~(LINE_SIZE - 1)


class AccessOutcome(enum.Enum):
    OK = "ok"
    FAULT_US = "fault_us"
    FAULT_PK = "fault_pk"
    FAULT_NP = "fault_np"

    @property
    def is_fault(self) -> bool:
        return self is not AccessOutcome.OK


class LineState(enum.Enum):
    INVALID = "I"
    SHARED = "S"
    EXCLUSIVE = "E"
    MODIFIED = "M"


class Prep(enum.Enum):
    """Cache-state modification applied to the store line before the load."""

    NONE = "none"
    CLFLUSH = "clflush"
    LOCKINC = "lockinc"


class StoreSplitUnsupported(ValueError):
    """A store crosses a 64-byte line boundary."""


# --------------------------------------------------------------------------
# Paging
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PageMapping:
    vaddr: int
    present: bool = True
    user_accessible: bool = True
    protection_key: int = 0
    key_denied: bool = False

    def __post_init__(self):
        if self.vaddr % PAGE_SIZE:
            raise ValueError(f"page address {self.vaddr:#x} is not 4K aligned")
        if not 0 <= self.protection_key <= 15:
            raise ValueError(f"protection key {self.protection_key} out of range")


class PageTable:
    """Flat map from 4K page base to its mapping."""

    def __init__(self, mappings=()):
        self._pages: Dict[int, PageMapping] = {}
        for m in mappings:
            self.map(m)

    def map(self, mapping: PageMapping) -> None:
        self._pages[mapping.vaddr] = mapping

    def unmap(self, vaddr: int) -> None:
        self._pages.pop(vaddr & PAGE_MASK, None)

    def lookup(self, vaddr: int) -> Optional[PageMapping]:
        return self._pages.get(vaddr & PAGE_MASK)

    def __iter__(self) -> Iterator[PageMapping]:
        return iter(self._pages.values())

    def __len__(self) -> int:
        return len(self._pages)

    def snapshot(self) -> Dict[int, PageMapping]:
        return dict(self._pages)


def classify_access(table: PageTable, vaddr: int, from_user: bool) -> AccessOutcome:
    """Permission check for a data access; precedence is NP > US > PK."""
    m = table.lookup(vaddr)
    if m is None or not m.present:
        return AccessOutcome.FAULT_NP
    if from_user and not m.user_accessible:
        return AccessOutcome.FAULT_US
    if m.key_denied:
        return AccessOutcome.FAULT_PK
    return AccessOutcome.OK


# --------------------------------------------------------------------------
# Cache
# --------------------------------------------------------------------------


class Cache:
    """Per-line state map. No sets, ways or eviction."""

    def __init__(self):
        self._lines: Dict[int, LineState] = {}

    def state(self, addr: int) -> LineState:
        return self._lines.get(addr & LINE_MASK, LineState.INVALID)

    def is_cached(self, addr: int) -> bool:
        return (addr & LINE_MASK) in self._lines

    def flush(self, addr: int) -> None:
        self._lines.pop(addr & LINE_MASK, None)

    def touch(self, addr: int, write: bool = False) -> None:
        line = addr & LINE_MASK
        if write:
            self._lines[line] = LineState.MODIFIED
        elif line not in self._lines:
            self._lines[line] = LineState.EXCLUSIVE

    def cached_lines(self) -> List[int]:
        return list(self._lines)

    def lines(self) -> Dict[int, LineState]:
        return dict(self._lines)


# --------------------------------------------------------------------------
# Timing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimingModel:
    """Cycle costs. Every value is an integer number of cycles.

    ``forward_latency`` is the address-generation delay between a load
    issuing and its store-buffer alias check. ``issue_jitter`` bounds the
    per-attempt slack added to that check by the experiment loop.
    """

    hit_latency: int = 40
    miss_latency: int = 300
    drain_cached: int = 5
    drain_flushed: int = 200
    drain_locked: int = 300
    transient_window: int = 100
    nominal_frequency: int = 10**9
    forward_latency: int = 3
    issue_jitter: int = 300

    def __post_init__(self):
        for f in fields(self):
            if not isinstance(getattr(self, f.name), int):
                raise TypeError(f"{f.name} must be an integer cycle count")
        if not self.drain_locked > self.drain_flushed > self.drain_cached > 0:
            raise ValueError("need drain_locked > drain_flushed > drain_cached > 0")
        if self.miss_latency <= self.hit_latency:
            raise ValueError("miss_latency must exceed hit_latency")
        if self.transient_window <= 0:
            raise ValueError("transient_window must be positive")
        if self.nominal_frequency <= 0:
            raise ValueError("nominal_frequency must be positive")
        if self.forward_latency < 0 or self.issue_jitter < 0:
            raise ValueError("forward_latency and issue_jitter must be >= 0")

    def drain_delay(self, line_state: LineState, prep: Prep) -> int:
        if prep is Prep.LOCKINC:
            return self.drain_locked
        if line_state is LineState.INVALID:
            return self.drain_flushed
        return self.drain_cached

    def with_overrides(self, **kw) -> "TimingModel":
        return replace(self, **kw)


# --------------------------------------------------------------------------
# Store buffer
# --------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class StoreBufferEntry:
    full_vaddr: int
    page_offset: int
    data: bytes
    size: int
    inserted_at: int
    drain_at: int

    def live(self, now: int) -> bool:
        return self.inserted_at <= now < self.drain_at

    def contains(self, offset: int, size: int) -> bool:
        return self.page_offset <= offset and offset + size <= self.page_offset + self.size


class StoreBuffer:
    """Retired stores awaiting commit, oldest first."""

    def __init__(self):
        self.entries: List[StoreBufferEntry] = []

    def insert(self, vaddr: int, data: bytes, now: int, line_state: LineState,
               prep: Prep, tm: TimingModel) -> StoreBufferEntry:
        size = len(data)
        if not 1 <= size <= 8:
            raise ValueError(f"store size {size} not in 1..8")
        if (vaddr & LINE_MASK) != ((vaddr + size - 1) & LINE_MASK):
            raise StoreSplitUnsupported(f"{size}-byte store at {vaddr:#x} crosses a cache line")
        entry = StoreBufferEntry(
            full_vaddr=vaddr,
            page_offset=vaddr % PAGE_SIZE,
            data=bytes(data),
            size=size,
            inserted_at=now,
            drain_at=now + tm.drain_delay(line_state, prep),
        )
        # committed entries can never match again
        self.entries = [e for e in self.entries if e.drain_at > now]
        self.entries.append(entry)
        return entry

    def lookup_alias(self, offset: int, size: int, now: int) -> Optional[StoreBufferEntry]:
        """Youngest live entry whose bytes contain ``[offset, offset+size)``.

        Only the low 12 address bits take part in the match.
        """
        best = None
        for e in self.entries:
            if e.live(now) and e.contains(offset, size):
                if best is None or e.inserted_at >= best.inserted_at:
                    best = e
        return best

    def drained_by(self) -> int:
        return max((e.drain_at for e in self.entries), default=0)

    def __len__(self) -> int:
        return len(self.entries)


# --------------------------------------------------------------------------
# Microcode
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MicrocodeProfile:
    revision: int
    date: _dt.date
    forwarding_mitigated: bool
    reported_mds_no: bool = True

    @property
    def vulnerable(self) -> bool:
        return not self.forwarding_mitigated

    @property
    def label(self) -> str:
        return f"{self.revision:#x}"


# Core i5-1035G1 (family 6, model 126) microcodes and whether the
# store-buffer forwarding leak was observed with each.
_TESTED_MICROCODES = [
    (0x32, "2019-07-05", False),
    (0x36, "2019-07-18", False),
    (0x46, "2019-09-05", False),
    (0x48, "2019-09-12", False),
    (0x50, "2019-10-27", False),
    (0x56, "2019-11-05", False),
    (0x5A, "2019-11-19", False),
    (0x66, "2020-01-09", True),
    (0x70, "2020-02-17", True),
    (0x82, "2020-04-22", True),
    (0x86, "2020-05-05", True),
]


def builtin_microcode_profiles() -> List[MicrocodeProfile]:
    return [
        MicrocodeProfile(rev, _dt.date.fromisoformat(day), mitigated)
        for rev, day, mitigated in _TESTED_MICROCODES
    ]


def get_profile(revision) -> MicrocodeProfile:
    """Look up a built-in profile by integer or ``"0x.."`` string."""
    if isinstance(revision, str):
        revision = int(revision, 16)
    for p in builtin_microcode_profiles():
        if p.revision == revision:
            return p
    raise KeyError(f"no built-in microcode profile {revision:#x}")


# --------------------------------------------------------------------------
# Machine
# --------------------------------------------------------------------------


@dataclass
class MachineState:
    profile: MicrocodeProfile
    timing: TimingModel = field(default_factory=TimingModel)
    page_table: PageTable = field(default_factory=PageTable)
    cache: Cache = field(default_factory=Cache)
    store_buffer: StoreBuffer = field(default_factory=StoreBuffer)
    clock: int = 0
    memory: Dict[int, int] = field(default_factory=dict)
    regs: List[int] = field(default_factory=lambda: [0] * 16)
    bindings: Dict[str, int] = field(default_factory=dict)
    probe: Optional["ProbeArray"] = None
    channel: Any = None
    compiled: Dict[int, Any] = field(default_factory=dict, repr=False, compare=False)

    def read_memory(self, vaddr: int, size: int) -> int:
        return int.from_bytes(bytes(self.memory.get(vaddr + i, 0) for i in range(size)), "little")

    def write_memory(self, vaddr: int, data: bytes) -> None:
        for i, b in enumerate(data):
            self.memory[vaddr + i] = b

    def architectural_state(self):
        """Everything a squashed instruction must not change."""
        return (dict(self.memory), list(self.regs), self.page_table.snapshot())
