import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sbleak.machine import builtin_microcode_profiles
from sbleak.microcode import (CpuSnapshot, MalformedHex, MissingField, SnapshotError, Status,
                              assess, mds_no_set, parse_snapshot)

ICL = "vendor: GenuineIntel\nfamily: 6\nmodel: 126\nstepping: 5\n"


def icl(rev, caps=0x2B):
    return CpuSnapshot("GenuineIntel", 6, 126, 5, rev, caps)


def test_parse_revision():
    snap = parse_snapshot(ICL + "microcode: 0x48\n")
    assert snap.microcode_revision == 72
    assert snap.arch_capabilities_raw is None


def test_parse_equals_form_and_comments():
    snap = parse_snapshot("# lab box\nvendor=GenuineIntel\nfamily = 6\nmodel=126\n"
                          "stepping=5\nmicrocode=a0  # bare hex\narch_capabilities=0x20\n")
    assert snap.microcode_revision == 0xA0
    assert snap.arch_capabilities_raw == 0x20


def test_parse_missing_model():
    with pytest.raises(MissingField) as exc:
        parse_snapshot("vendor: GenuineIntel\nfamily: 6\nstepping: 5\nmicrocode: 0x48\n")
    assert exc.value.field == "model"


@pytest.mark.parametrize("bad", ["0xZZ", "0x", "forty"])
def test_parse_malformed_hex(bad):
    with pytest.raises(MalformedHex):
        parse_snapshot(ICL + f"microcode: {bad}\n")


def test_parse_garbage_line():
    with pytest.raises(SnapshotError):
        parse_snapshot(ICL + "microcode 0x48\n")


@pytest.mark.parametrize("raw,expected", [(0x20, True), (0x00, False), (0xDF, False),
                                          (0xFFFF_FFFF_FFFF_FFFF, True)])
def test_mds_no_bit(raw, expected):
    assert mds_no_set(raw) is expected


def test_vulnerable_with_mds_no_sets_errata():
    a = assess(icl(0x48, 0x20))
    assert a.status is Status.VULNERABLE and a.errata_057


def test_fixed_revision_is_mitigated():
    a = assess(icl(0x66, 0x20))
    assert a.status is Status.MITIGATED and not a.errata_057


def test_other_family_not_applicable():
    a = assess(CpuSnapshot("GenuineIntel", 6, 0x8C, 1, 0x48, 0x20))
    assert a.status is Status.NOT_APPLICABLE and not a.errata_057
    assert assess(CpuSnapshot("AuthenticAMD", 0x19, 126, 0, 0x48)).status is Status.NOT_APPLICABLE


def test_vulnerable_without_mds_no_has_no_errata():
    assert not assess(icl(0x48, 0x00)).errata_057
    assert not assess(icl(0x48, None)).errata_057


def test_between_fix_and_first_clean_revision():
    assert assess(icl(0x5C)).status is Status.PRESUMED_MITIGATED
    assert assess(icl(0x65)).status is Status.PRESUMED_MITIGATED


def test_untested_old_revisions():
    early = assess(icl(0x20))
    assert early.status is Status.VULNERABLE and "pre-table" in early.rationale
    gap = assess(icl(0x40))
    assert gap.status is Status.VULNERABLE and "pre-table revision" in gap.rationale


def test_newer_than_table_is_mitigated():
    assert assess(icl(0xB0)).status is Status.MITIGATED


@pytest.mark.parametrize("profile", builtin_microcode_profiles(), ids=lambda p: p.label)
def test_every_tested_revision(profile):
    a = assess(icl(profile.revision, 0x20))
    expected = Status.VULNERABLE if profile.vulnerable else Status.MITIGATED
    assert a.status is expected
    assert a.errata_057 is profile.vulnerable


@given(st.sampled_from(["GenuineIntel", "genuineintel", "AuthenticAMD"]), st.integers(5, 7),
       st.integers(100, 150), st.integers(0, 0x200), st.none() | st.integers(0, 2**64 - 1))
def test_errata_only_when_vulnerable(vendor, family, model, rev, caps):
    a = assess(CpuSnapshot(vendor, family, model, 0, rev, caps))
    assert a.errata_057 == (a.status is Status.VULNERABLE and caps is not None and mds_no_set(caps))
    assert a.rationale


def test_renderings():
    a = assess(icl(0x48, 0x20))
    assert a.to_text().splitlines()[:2] == ["status: VulnerableMSBDS", "errata_057: true"]
    assert json.loads(a.to_json()) == {"status": "VulnerableMSBDS", "errata_057": True,
                                       "rationale": a.rationale}
