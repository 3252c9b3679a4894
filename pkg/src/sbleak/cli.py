"""``sbleak`` command line: simulate, table, fuzz, check.

Exit codes: 0 ok, 1 ``check`` found a vulnerable CPU, 2 bad flags or
config, 3 attack program does not parse, 4 snapshot unreadable.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import dsl
from .config import CHANNEL_KEYS, ConfigError, apply_overrides, load_config
from .engine import MachineConfig, new_machine, run_experiment
from .fuzzer import DEFAULT_TRIALS, fuzz_loop
from .machine import MicrocodeProfile, Prep, TimingModel, builtin_microcode_profiles, get_profile
from .microcode import SnapshotError, Status, assess, parse_snapshot

TWO_MINUTES = 120 * 10**9  # cycles at the nominal 1 GHz
TABLE_HEADER = ["mc_version", "mc_date", "vulnerable", "clflush_rate", "lockinc_rate",
                "unmodified_rate"]
TABLE_PREPS = (Prep.CLFLUSH, Prep.LOCKINC, Prep.NONE)

EXIT_VULNERABLE = 1
EXIT_USAGE = 2
EXIT_PROGRAM = 3
EXIT_SNAPSHOT = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _profile(text: str):
    try:
        return get_profile(int(text, 16))
    except (KeyError, ValueError):
        known = ", ".join(p.label for p in builtin_microcode_profiles())
        raise argparse.ArgumentTypeError(f"unknown microcode {text!r} (built-in: {known})")


def _cycles(text: str) -> int:
    try:
        value = int(float(text)) if any(c in text for c in ".eE") else int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad cycle count {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("cycle count must be non-negative")
    return value


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", metavar="FILE", help="key = value timing/channel overrides")
    g.add_argument("--json", action="store_true", help="emit JSON instead of text/CSV")
    g.add_argument("--jobs", type=int, default=1, help="worker processes (output is identical)")
    g.add_argument("--output", "-o", metavar="FILE")
    t = p.add_argument_group("timing (cycles)")
    for f in fields(TimingModel):
        t.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=int, default=None)
    c = p.add_argument_group("covert channel")
    for name, kind in CHANNEL_KEYS.items():
        c.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="sbleak", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="leak a secret through one variant")
    s.add_argument("--profile", type=_profile, default=get_profile(0x32))
    s.add_argument("--prep", choices=[p.value for p in Prep], default=Prep.LOCKINC.value)
    s.add_argument("--fault", choices=["us", "pk", "np"], default="us")
    s.add_argument("--program", metavar="FILE.sbl", help="attack program instead of the built-in one")
    s.add_argument("--secret-len", type=int, default=64)
    s.add_argument("--secret", help="secret as text (overrides --secret-len)")
    s.add_argument("--budget", type=_cycles, default=TWO_MINUTES)

    t = sub.add_parser("table", parents=[common], help="leak rate per microcode and cache prep")
    t.add_argument("--budget", type=_cycles, default=TWO_MINUTES)
    t.add_argument("--secret-len", type=int, default=64)

    f = sub.add_parser("fuzz", parents=[common], help="search for leaking attack variants")
    f.add_argument("--profile", type=_profile, default=get_profile(0x48))
    f.add_argument("--max-iters", type=int, default=5000)
    f.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    f.add_argument("--first-hit", action="store_true", help="stop at the first leaking genome")

    c = sub.add_parser("check", parents=[common], help="assess a CPU snapshot file")
    c.add_argument("snapshot", metavar="SNAPSHOT")
    return parser


def _machine_config(args, profile) -> MachineConfig:
    config = MachineConfig(profile)
    try:
        values = load_config(args.config) if args.config else {}
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    for key in [f.name for f in fields(TimingModel)] + list(CHANNEL_KEYS):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    return apply_overrides(config, values)


def _emit(args, text: str) -> None:
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def _secret(seed: int, length: int, text: Optional[str] = None) -> bytes:
    if text is not None:
        return text.encode()
    rng = np.random.default_rng([seed, 0x5EC])
    return bytes(rng.integers(0, 256, length, dtype=np.uint8))


def cmd_simulate(args) -> int:
    config = _machine_config(args, args.profile)
    if args.program:
        try:
            program = dsl.parse_program(Path(args.program).read_text())
        except OSError as exc:
            print(f"sbleak: cannot read program: {exc}", file=sys.stderr)
            return EXIT_PROGRAM
        except dsl.ProgramError as exc:
            print(f"sbleak: {args.program}: {exc}", file=sys.stderr)
            return EXIT_PROGRAM
    else:
        program = dsl.canonical_msbds_program(Prep(args.prep), dsl.FaultClass(args.fault))
    secret = _secret(args.seed, args.secret_len, args.secret)
    report = run_experiment(new_machine(config), program, secret, args.budget, args.seed)
    d = {"profile": config.profile.label, "prep": args.prep, "fault": args.fault,
         **report.to_dict()}
    if args.program:
        d["program"] = args.program
        del d["prep"], d["fault"]
    if args.json:
        _emit(args, json.dumps(d, indent=2) + "\n")
    else:
        d["rate"] = f"{report.rate:.2f}"
        _emit(args, "".join(f"{k}: {v}\n" for k, v in d.items() if k != "confidence"))
    return 0


def _table_cell(job):
    config, prep, secret, budget, seed = job
    program = dsl.canonical_msbds_program(prep, dsl.FaultClass.US)
    return run_experiment(new_machine(config), program, secret, budget, seed).rate


def _fmt_rate(rate: float) -> str:
    return "0" if rate == 0 else f"{rate:.2f}"


def table_rows(base: MachineConfig, budget: int, seed: int, secret: bytes,
               jobs: int = 1, profiles: Optional[Sequence[MicrocodeProfile]] = None) -> List[dict]:
    profiles = builtin_microcode_profiles() if profiles is None else list(profiles)
    work = [(replace(base, profile=p), prep, secret, budget, [seed, p.revision, k])
            for p in profiles for k, prep in enumerate(TABLE_PREPS)]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rates = list(pool.map(_table_cell, work))
    else:
        rates = [_table_cell(w) for w in work]
    rows = []
    for i, p in enumerate(profiles):
        r = dict(zip(TABLE_PREPS, rates[3 * i:3 * i + 3]))
        rows.append({
            "mc_version": p.label,
            "mc_date": p.date.isoformat(),
            "vulnerable": p.vulnerable,
            "clflush_rate": r[Prep.CLFLUSH],
            "lockinc_rate": r[Prep.LOCKINC],
            "unmodified_rate": r[Prep.NONE],
        })
    return rows


def format_table_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for r in rows:
        w.writerow([r["mc_version"], r["mc_date"], "true" if r["vulnerable"] else "false",
                    _fmt_rate(r["clflush_rate"]), _fmt_rate(r["lockinc_rate"]),
                    _fmt_rate(r["unmodified_rate"])])
    return buf.getvalue()


def cmd_table(args) -> int:
    base = _machine_config(args, get_profile(0x32))
    secret = _secret(args.seed, args.secret_len)
    rows = table_rows(base, args.budget, args.seed, secret, args.jobs)
    if args.json:
        _emit(args, json.dumps(rows, indent=2) + "\n")
    else:
        _emit(args, format_table_csv(rows))
    return 0


def cmd_fuzz(args) -> int:
    if args.max_iters <= 0 or args.trials <= 0:
        print("sbleak: --max-iters and --trials must be positive", file=sys.stderr)
        return EXIT_USAGE
    config = _machine_config(args, args.profile)
    report = fuzz_loop(config, args.max_iters, args.seed, trials=args.trials,
                       first_hit=args.first_hit, workers=args.jobs)
    _emit(args, report.to_json())
    return 0


def cmd_check(args) -> int:
    try:
        snapshot = parse_snapshot(Path(args.snapshot).read_text())
    except (OSError, UnicodeDecodeError, SnapshotError) as exc:
        print(f"sbleak: cannot read snapshot {args.snapshot}: {exc}", file=sys.stderr)
        return EXIT_SNAPSHOT
    result = assess(snapshot)
    _emit(args, result.to_json() if args.json else result.to_text())
    return EXIT_VULNERABLE if result.status is Status.VULNERABLE else 0


COMMANDS = {"simulate": cmd_simulate, "table": cmd_table, "fuzz": cmd_fuzz, "check": cmd_check}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"sbleak: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
