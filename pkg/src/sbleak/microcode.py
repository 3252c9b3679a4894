"""CPU snapshot ingestion and store-buffer leak assessment for Ice Lake client parts.

A snapshot is a small ``key: value`` document::

    vendor: GenuineIntel
    family: 6
    model: 126
    stepping: 5
    microcode: 0x48
    arch_capabilities: 0x2b     # raw IA32_ARCH_CAPABILITIES, optional
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Optional

from .machine import builtin_microcode_profiles

ICELAKE_VENDOR = "GenuineIntel"
ICELAKE_FAMILY = 6
ICELAKE_CLIENT_MODEL = 126  # 0x7E, e.g. Core i5-1035G1

MDS_NO_BIT = 5
FIX_REVISION = 0x5C
FIRST_TESTED_CLEAN = 0x66

REQUIRED = ("vendor", "family", "model", "stepping", "microcode")


class SnapshotError(ValueError):
    pass


class MissingField(SnapshotError):
    def __init__(self, name: str):
        super().__init__(f"missing field {name!r}")
        self.field = name


class MalformedHex(SnapshotError):
    def __init__(self, name: str, text: str):
        super().__init__(f"field {name!r}: {text!r} is not a hex value")
        self.field = name


@dataclass(frozen=True)
class CpuSnapshot:
    vendor: str
    family: int
    model: int
    stepping: int
    microcode_revision: int
    arch_capabilities_raw: Optional[int] = None


def _hex(name: str, text: str) -> int:
    t = text.strip().lower()
    if t.startswith("0x"):
        t = t[2:]
    try:
        if not t:
            raise ValueError
        return int(t, 16)
    except ValueError:
        raise MalformedHex(name, text) from None


def _dec(name: str, text: str) -> int:
    try:
        return int(text.strip(), 0)
    except ValueError:
        raise SnapshotError(f"field {name!r}: {text!r} is not an integer") from None


def parse_snapshot(text: str) -> CpuSnapshot:
    raw = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = ":" if ":" in line else "="
        key, found, value = line.partition(sep)
        if not found:
            raise SnapshotError(f"cannot parse line {line!r}")
        raw[key.strip().lower()] = value.strip()
    for name in REQUIRED:
        if name not in raw:
            raise MissingField(name)

    caps = raw.get("arch_capabilities")
    snap = CpuSnapshot(
        vendor=raw["vendor"],
        family=_dec("family", raw["family"]),
        model=_dec("model", raw["model"]),
        stepping=_dec("stepping", raw["stepping"]),
        microcode_revision=_hex("microcode", raw["microcode"]),
        arch_capabilities_raw=_hex("arch_capabilities", caps) if caps else None,
    )
    if snap.arch_capabilities_raw is not None and snap.arch_capabilities_raw >= 1 << 64:
        raise MalformedHex("arch_capabilities", caps)
    return snap


def mds_no_set(arch_capabilities_raw: int) -> bool:
    return bool((arch_capabilities_raw >> MDS_NO_BIT) & 1)


class Status(enum.Enum):
    VULNERABLE = "VulnerableMSBDS"
    MITIGATED = "Mitigated"
    PRESUMED_MITIGATED = "PresumedMitigated"
    NOT_APPLICABLE = "NotApplicable"


@dataclass(frozen=True)
class Assessment:
    status: Status
    errata_057: bool
    rationale: str

    def to_dict(self) -> dict:
        return {"status": self.status.value, "errata_057": self.errata_057,
                "rationale": self.rationale}

    def to_text(self) -> str:
        return (f"status: {self.status.value}\n"
                f"errata_057: {'true' if self.errata_057 else 'false'}\n"
                f"rationale: {self.rationale}\n")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _tested_revisions():
    return {p.revision: p for p in builtin_microcode_profiles()}


def assess(snapshot: CpuSnapshot) -> Assessment:
    if (snapshot.vendor.lower() != ICELAKE_VENDOR.lower() or snapshot.family != ICELAKE_FAMILY
            or snapshot.model != ICELAKE_CLIENT_MODEL):
        return Assessment(
            Status.NOT_APPLICABLE, False,
            f"{snapshot.vendor} family {snapshot.family} model {snapshot.model} "
            f"is not an Ice Lake client part")

    rev = snapshot.microcode_revision
    tested = _tested_revisions()
    if rev in tested and tested[rev].vulnerable:
        status = Status.VULNERABLE
        why = f"microcode {rev:#x} leaks store-buffer data to faulting loads when tested"
    elif rev >= FIRST_TESTED_CLEAN:
        status = Status.MITIGATED
        why = f"microcode {rev:#x} is at or after {FIRST_TESTED_CLEAN:#x}, the first revision tested clean"
    elif rev >= FIX_REVISION:
        status = Status.PRESUMED_MITIGATED
        why = (f"microcode {rev:#x} is at or after the vendor-stated fix {FIX_REVISION:#x} "
               f"but earlier than the first revision tested clean ({FIRST_TESTED_CLEAN:#x})")
    else:
        status = Status.VULNERABLE
        why = f"pre-table revision {rev:#x} predates the {FIX_REVISION:#x} fix"
        if rev > min(tested):
            why += " and was never tested"

    errata = False
    caps = snapshot.arch_capabilities_raw
    if status is Status.VULNERABLE and caps is not None and mds_no_set(caps):
        errata = True
        why += "; MDS_NO is set although the part leaks (erratum 057)"
    return Assessment(status, errata, why)
