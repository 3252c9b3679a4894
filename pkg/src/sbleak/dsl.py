"""A small line-oriented language for store-buffer attack programs (``.sbl``).

Grammar, one statement per line, ``#`` starts a comment::

    policy suppress|abort          # optional, default suppress
    page NAME [fault=us|pk|np]     # a 4K page bound at run time
    probe NAME                     # the 256-slot Flush+Reload array

    setreg rN, IMM
    store  ADDR, rN, SIZE
    load   rN, ADDR[, SIZE]        # SIZE defaults to 1
    clflush ADDR                   # alias: flush
    lockinc ADDR
    fence
    encode PROBE, rN

``ADDR`` is ``NAME`` or ``NAME+OFFSET`` with a decimal or hex offset inside
the page. Declarations may appear anywhere but must precede use.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple, Union

from .machine import PAGE_SIZE, Prep

NUM_REGS = 16


class FaultClass(enum.Enum):
    """How the page backing the load is mapped."""

    NONE = "none"
    US = "us"
    PK = "pk"
    NP = "np"


class FaultPolicy(enum.Enum):
    SUPPRESS = "suppress"
    ABORT = "abort"


class ProgramError(Exception):
    pass


class DslSyntaxError(ProgramError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class UnknownSymbol(ProgramError):
    def __init__(self, name: str, line: Optional[int] = None):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}unknown symbol {name!r}")
        self.name = name
        self.line = line


class MultipleFaultingLoads(ProgramError):
    pass


class InvalidProgram(ProgramError):
    pass


# --------------------------------------------------------------------------
# Instructions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Addr:
    symbol: str
    offset: int = 0

    def __str__(self):
        return self.symbol if self.offset == 0 else f"{self.symbol}+{self.offset:#x}"


@dataclass(frozen=True)
class SetReg:
    reg: int
    value: int


@dataclass(frozen=True)
class Store:
    addr: Addr
    src: int
    size: int = 8


@dataclass(frozen=True)
class Load:
    dest: int
    addr: Addr
    size: int = 1


@dataclass(frozen=True)
class Flush:
    addr: Addr


@dataclass(frozen=True)
class LockInc:
    addr: Addr


@dataclass(frozen=True)
class Fence:
    pass


@dataclass(frozen=True)
class Encode:
    probe: str
    src: int


Instr = Union[SetReg, Store, Load, Flush, LockInc, Fence, Encode]


@dataclass(frozen=True)
class Symbol:
    name: str
    kind: str  # "page" | "probe"
    fault: FaultClass = FaultClass.NONE


@dataclass(frozen=True)
class AttackProgram:
    instructions: Tuple[Instr, ...] = ()
    symbols: Tuple[Symbol, ...] = ()
    fault_policy: FaultPolicy = FaultPolicy.SUPPRESS

    def __post_init__(self):
        object.__setattr__(self, "instructions", tuple(self.instructions))
        object.__setattr__(self, "symbols", tuple(self.symbols))
        validate(self)

    def symbol(self, name: str) -> Symbol:
        for s in self.symbols:
            if s.name == name:
                return s
        raise UnknownSymbol(name)

    def faulting_loads(self) -> List[int]:
        table = {s.name: s for s in self.symbols}
        return [
            i for i, ins in enumerate(self.instructions)
            if isinstance(ins, Load) and table[ins.addr.symbol].fault is not FaultClass.NONE
        ]

    def planted_register(self) -> Optional[int]:
        """Value register of the first store, i.e. where a secret is planted."""
        for ins in self.instructions:
            if isinstance(ins, Store):
                return ins.src
        return None

    def with_secret(self, value: int) -> "AttackProgram":
        reg = self.planted_register()
        if reg is None:
            return self
        instrs = list(self.instructions)
        first_store = next(i for i, ins in enumerate(instrs) if isinstance(ins, Store))
        for i in range(first_store - 1, -1, -1):
            if isinstance(instrs[i], SetReg) and instrs[i].reg == reg:
                instrs[i] = SetReg(reg, value)
                break
        else:
            instrs.insert(0, SetReg(reg, value))
        return replace(self, instructions=tuple(instrs))


def _check_reg(r: int):
    if not 0 <= r < NUM_REGS:
        raise InvalidProgram(f"register r{r} out of range")


def _check_addr(addr: Addr, table: Dict[str, Symbol]):
    sym = table.get(addr.symbol)
    if sym is None:
        raise UnknownSymbol(addr.symbol)
    if sym.kind != "page":
        raise InvalidProgram(f"{addr.symbol} is not a page")
    if not 0 <= addr.offset < PAGE_SIZE:
        raise InvalidProgram(f"offset {addr.offset:#x} outside page {addr.symbol}")


def validate(p: AttackProgram) -> None:
    table: Dict[str, Symbol] = {}
    for s in p.symbols:
        if s.name in table:
            raise InvalidProgram(f"symbol {s.name} declared twice")
        if s.kind not in ("page", "probe"):
            raise InvalidProgram(f"bad symbol kind {s.kind!r}")
        table[s.name] = s

    loaded = set()
    for ins in p.instructions:
        if isinstance(ins, SetReg):
            _check_reg(ins.reg)
            if ins.value < 0 or ins.value >= 1 << 64:
                raise InvalidProgram(f"immediate {ins.value} is not a 64-bit value")
        elif isinstance(ins, Store):
            _check_addr(ins.addr, table)
            _check_reg(ins.src)
            if not 1 <= ins.size <= 8:
                raise InvalidProgram(f"store size {ins.size} not in 1..8")
        elif isinstance(ins, Load):
            _check_addr(ins.addr, table)
            _check_reg(ins.dest)
            if not 1 <= ins.size <= 8:
                raise InvalidProgram(f"load size {ins.size} not in 1..8")
            loaded.add(ins.dest)
        elif isinstance(ins, (Flush, LockInc)):
            _check_addr(ins.addr, table)
        elif isinstance(ins, Encode):
            sym = table.get(ins.probe)
            if sym is None:
                raise UnknownSymbol(ins.probe)
            if sym.kind != "probe":
                raise InvalidProgram(f"{ins.probe} is not a probe array")
            _check_reg(ins.src)
            if ins.src not in loaded:
                raise InvalidProgram(f"encode of r{ins.src} does not depend on any load")
        elif not isinstance(ins, Fence):
            raise InvalidProgram(f"unknown instruction {ins!r}")

    if len(p.faulting_loads()) > 1:
        raise MultipleFaultingLoads("at most one load may target a faulting page")


# --------------------------------------------------------------------------
# Text format
# --------------------------------------------------------------------------

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_REG_RE = re.compile(r"r(\d+)$")
_ADDR_RE = re.compile(rf"({_NAME})(?:\s*\+\s*(0[xX][0-9a-fA-F]+|\d+))?$")
_NAME_RE = re.compile(rf"{_NAME}$")


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise DslSyntaxError(lineno, f"bad integer {tok!r}") from None


def _reg(tok: str, lineno: int) -> int:
    m = _REG_RE.match(tok)
    if not m or int(m.group(1)) >= NUM_REGS:
        raise DslSyntaxError(lineno, f"bad register {tok!r}")
    return int(m.group(1))


def _args(rest: str, n: Tuple[int, ...], mnemonic: str, lineno: int) -> List[str]:
    args = [a.strip() for a in rest.split(",")] if rest.strip() else []
    if len(args) not in n:
        raise DslSyntaxError(lineno, f"{mnemonic} takes {' or '.join(map(str, n))} operand(s)")
    return args


def parse_program(text: str) -> AttackProgram:
    symbols: Dict[str, Symbol] = {}
    instrs: List[Instr] = []
    policy = FaultPolicy.SUPPRESS

    def addr(tok: str, lineno: int) -> Addr:
        m = _ADDR_RE.match(tok)
        if not m:
            raise DslSyntaxError(lineno, f"bad address {tok!r}")
        name = m.group(1)
        if name not in symbols:
            raise UnknownSymbol(name, lineno)
        return Addr(name, _int(m.group(2), lineno) if m.group(2) else 0)

    def declare(sym: Symbol, lineno: int):
        if sym.name in symbols:
            raise DslSyntaxError(lineno, f"symbol {sym.name} declared twice")
        symbols[sym.name] = sym

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        mnemonic, _, rest = line.partition(" ")
        mnemonic = mnemonic.lower()
        words = rest.split()

        if mnemonic == "policy":
            try:
                (word,) = words
                policy = FaultPolicy(word.lower())
            except ValueError:
                raise DslSyntaxError(lineno, "policy takes suppress or abort") from None
        elif mnemonic == "page":
            if not words or len(words) > 2 or not _NAME_RE.match(words[0]):
                raise DslSyntaxError(lineno, "usage: page NAME [fault=us|pk|np]")
            fault = FaultClass.NONE
            if len(words) == 2:
                key, _, val = words[1].partition("=")
                try:
                    if key != "fault":
                        raise ValueError
                    fault = FaultClass(val.lower())
                except ValueError:
                    raise DslSyntaxError(lineno, f"bad page attribute {words[1]!r}") from None
            declare(Symbol(words[0], "page", fault), lineno)
        elif mnemonic == "probe":
            if len(words) != 1 or not _NAME_RE.match(words[0]):
                raise DslSyntaxError(lineno, "usage: probe NAME")
            declare(Symbol(words[0], "probe"), lineno)
        elif mnemonic == "setreg":
            r, imm = _args(rest, (2,), mnemonic, lineno)
            instrs.append(SetReg(_reg(r, lineno), _int(imm, lineno)))
        elif mnemonic == "store":
            a, r, size = _args(rest, (3,), mnemonic, lineno)
            instrs.append(Store(addr(a, lineno), _reg(r, lineno), _int(size, lineno)))
        elif mnemonic == "load":
            args = _args(rest, (2, 3), mnemonic, lineno)
            size = _int(args[2], lineno) if len(args) == 3 else 1
            instrs.append(Load(_reg(args[0], lineno), addr(args[1], lineno), size))
        elif mnemonic in ("clflush", "flush"):
            (a,) = _args(rest, (1,), mnemonic, lineno)
            instrs.append(Flush(addr(a, lineno)))
        elif mnemonic == "lockinc":
            (a,) = _args(rest, (1,), mnemonic, lineno)
            instrs.append(LockInc(addr(a, lineno)))
        elif mnemonic == "fence":
            _args(rest, (0,), mnemonic, lineno)
            instrs.append(Fence())
        elif mnemonic == "encode":
            name, r = _args(rest, (2,), mnemonic, lineno)
            if name not in symbols:
                raise UnknownSymbol(name, lineno)
            instrs.append(Encode(name, _reg(r, lineno)))
        else:
            raise DslSyntaxError(lineno, f"unknown mnemonic {mnemonic!r}")

        # programs are a few lines long; re-checking the prefix keeps line numbers exact
        try:
            AttackProgram(tuple(instrs), tuple(symbols.values()), policy)
        except MultipleFaultingLoads as exc:
            raise MultipleFaultingLoads(f"line {lineno}: {exc}") from None
        except InvalidProgram as exc:
            raise DslSyntaxError(lineno, str(exc)) from None

    return AttackProgram(tuple(instrs), tuple(symbols.values()), policy)


def _format(ins: Instr) -> str:
    if isinstance(ins, SetReg):
        return f"setreg r{ins.reg}, {ins.value:#x}"
    if isinstance(ins, Store):
        return f"store {ins.addr}, r{ins.src}, {ins.size}"
    if isinstance(ins, Load):
        return f"load r{ins.dest}, {ins.addr}, {ins.size}"
    if isinstance(ins, Flush):
        return f"clflush {ins.addr}"
    if isinstance(ins, LockInc):
        return f"lockinc {ins.addr}"
    if isinstance(ins, Fence):
        return "fence"
    if isinstance(ins, Encode):
        return f"encode {ins.probe}, r{ins.src}"
    raise TypeError(ins)


def serialize_program(p: AttackProgram) -> str:
    lines = []
    if p.fault_policy is not FaultPolicy.SUPPRESS:
        lines.append(f"policy {p.fault_policy.value}")
    for s in p.symbols:
        if s.kind == "probe":
            lines.append(f"probe {s.name}")
        elif s.fault is FaultClass.NONE:
            lines.append(f"page {s.name}")
        else:
            lines.append(f"page {s.name} fault={s.fault.value}")
    lines.extend(_format(ins) for ins in p.instructions)
    return "".join(line + "\n" for line in lines)


# --------------------------------------------------------------------------
# Program construction
# --------------------------------------------------------------------------

STORE_OFFSET = 0x120
OTHER_OFFSET = 0x520
SECRET_REG = 1
LOADED_REG = 2


class AliasMode(enum.Enum):
    SAME_PAGE_SAME_OFFSET = "same_page_same_offset"
    CROSS_PAGE_SAME_OFFSET = "cross_page_same_offset"
    CROSS_PAGE_DIFFERENT_OFFSET = "cross_page_different_offset"


def build_program(
    fault: FaultClass,
    prep: Prep,
    alias: AliasMode = AliasMode.CROSS_PAGE_SAME_OFFSET,
    store_size: int = 8,
    load_size: int = 1,
    fence_before_load: bool = False,
    secret: int = 0x41,
) -> AttackProgram:
    """Store to user page A, optionally disturb its line, then load from B.

    B is mapped according to ``fault``; with ``alias`` the load targets
    A itself, B at the store's page offset, or B at an unrelated offset.
    """
    a = Addr("A", STORE_OFFSET)
    if alias is AliasMode.SAME_PAGE_SAME_OFFSET:
        target = a
    elif alias is AliasMode.CROSS_PAGE_SAME_OFFSET:
        target = Addr("B", STORE_OFFSET)
    else:
        target = Addr("B", OTHER_OFFSET)

    body: List[Instr] = [SetReg(SECRET_REG, secret), Store(a, SECRET_REG, store_size)]
    if prep is Prep.CLFLUSH:
        body.append(Flush(a))
    elif prep is Prep.LOCKINC:
        body.append(LockInc(a))
    if fence_before_load:
        body.append(Fence())
    body += [Load(LOADED_REG, target, load_size), Encode("P", LOADED_REG)]

    symbols = (Symbol("A", "page"), Symbol("B", "page", fault), Symbol("P", "probe"))
    return AttackProgram(tuple(body), symbols)


def canonical_msbds_program(prep: Prep = Prep.LOCKINC, fault: FaultClass = FaultClass.US,
                            secret: int = 0x41) -> AttackProgram:
    """Store, optional line disturbance, 4K-aliased faulting load, encode."""
    return build_program(fault, prep, secret=secret)
