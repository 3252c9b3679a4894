"""Mutation search over attack primitives.

A genome picks the load's fault class, the cache disturbance applied to
the store line, how the load address relates to the store, access widths
and whether a fence separates them. Each genome is scored by planting
random bytes and counting how often the Flush+Reload receiver gets them
back through a faulting load.
"""

from __future__ import annotations

import enum
import functools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional

import numpy as np

from .channel import calibrated_oracle_threshold, decode_byte
from .dsl import AliasMode, AttackProgram, FaultClass, build_program
from .engine import (LEAKING_FAULTS, MachineConfig, bind_program, new_machine, run_attempt,
                     warm_store_lines)
from .machine import AccessOutcome, Prep

DEFAULT_TRIALS = 32
RESTART_AFTER = 200
BATCH = 16


@dataclass(frozen=True)
class Genome:
    fault_class: FaultClass
    prep: Prep
    alias_mode: AliasMode
    store_size: int
    load_size: int
    fence_before_load: bool

    def to_dict(self) -> dict:
        return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Genome":
        return cls(FaultClass(d["fault_class"]), Prep(d["prep"]), AliasMode(d["alias_mode"]),
                   int(d["store_size"]), int(d["load_size"]), bool(d["fence_before_load"]))


DOMAINS = {
    "fault_class": tuple(FaultClass),
    "prep": tuple(Prep),
    "alias_mode": tuple(AliasMode),
    "store_size": tuple(range(1, 9)),
    "load_size": tuple(range(1, 9)),
    "fence_before_load": (False, True),
}


def genome_space_size() -> int:
    n = 1
    for values in DOMAINS.values():
        n *= len(values)
    return n


def random_genome(rng: np.random.Generator) -> Genome:
    return Genome(**{name: values[rng.integers(len(values))] for name, values in DOMAINS.items()})


def mutate_genome(g: Genome, rng: np.random.Generator) -> Genome:
    """Change exactly one field to a different value, both chosen uniformly."""
    names = [f.name for f in fields(Genome)]
    name = names[rng.integers(len(names))]
    current = getattr(g, name)
    others = [v for v in DOMAINS[name] if v != current]
    return replace(g, **{name: others[rng.integers(len(others))]})


class VariantLabel(enum.Enum):
    MELTDOWN_US_SB = "MeltdownUS_SB"
    MELTDOWN_MPK_SB = "MeltdownMPK_SB"
    NO_LEAK = "NoLeak"


@dataclass(frozen=True)
class Evidence:
    fault: AccessOutcome
    leaked: Optional[int]
    planted: int


def classify(genome: Genome, evidence: Evidence) -> VariantLabel:
    if evidence.leaked is None or evidence.leaked != evidence.planted:
        return VariantLabel.NO_LEAK
    if evidence.fault is AccessOutcome.FAULT_US:
        return VariantLabel.MELTDOWN_US_SB
    if evidence.fault is AccessOutcome.FAULT_PK:
        return VariantLabel.MELTDOWN_MPK_SB
    return VariantLabel.NO_LEAK


@functools.lru_cache(maxsize=None)
def genome_program(g: Genome) -> AttackProgram:
    return build_program(g.fault_class, g.prep, g.alias_mode, g.store_size, g.load_size,
                         g.fence_before_load)


@dataclass(frozen=True)
class Evaluation:
    score: float
    label: VariantLabel


def evaluate_detail(genome: Genome, config: MachineConfig, trials: int = DEFAULT_TRIALS,
                    seed=0) -> Evaluation:
    if trials <= 0:
        raise ValueError("trials must be positive")
    plant_seq, jitter_seq, oracle_seq = np.random.SeedSequence(seed).spawn(3)
    tm = config.timing
    planted = np.random.default_rng(plant_seq).integers(0, 256, trials)
    jitters = np.random.default_rng(jitter_seq).integers(0, tm.issue_jitter + 1, trials)
    oracle = config.channel.oracle(tm, np.random.default_rng(oracle_seq))
    threshold = calibrated_oracle_threshold(oracle)

    machine = new_machine(config)
    program = genome_program(genome)
    bind_program(machine, program)
    warm_store_lines(machine, program)

    cached = np.zeros((trials, 256), dtype=bool)
    faults = []
    for i in range(trials):
        machine.probe.flush(machine.cache)
        res = run_attempt(machine, program, int(jitters[i]), int(planted[i]))
        faults.append(res.fault)
        cached[i, machine.probe.cached_slots(machine.cache)] = True
    latencies = oracle.sample(cached)

    hits = 0
    label = VariantLabel.NO_LEAK
    for i in range(trials):
        if faults[i] not in LEAKING_FAULTS:
            continue  # an architectural read of the planted byte is not a leak
        got = decode_byte(latencies[i], threshold).value
        verdict = classify(genome, Evidence(faults[i], got, int(planted[i])))
        if verdict is not VariantLabel.NO_LEAK:
            hits += 1
            label = verdict
    return Evaluation(hits / trials, label)


def evaluate(genome: Genome, config: MachineConfig, trials: int = DEFAULT_TRIALS,
             seed=0) -> float:
    return evaluate_detail(genome, config, trials, seed).score


@dataclass(frozen=True)
class Positive:
    genome: Genome
    label: VariantLabel
    score: float
    found_at: int

    def to_dict(self) -> dict:
        return {"genome": self.genome.to_dict(), "label": self.label.value,
                "score": self.score, "found_at": self.found_at}


@dataclass
class FuzzReport:
    seed: int
    iterations: int
    positives: List[Positive] = field(default_factory=list)
    profile: Optional[str] = None

    def first_positive(self) -> Optional[Positive]:
        return min(self.positives, key=lambda p: p.found_at, default=None)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "iterations": self.iterations,
             "positives": [p.to_dict() for p in self.positives]}
        if self.profile is not None:
            d["profile"] = self.profile
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _evaluate_job(args) -> Evaluation:
    genome, config, trials, seed = args
    return evaluate_detail(genome, config, trials, seed)


def fuzz_loop(config: MachineConfig, max_iters: int, seed: int = 0, *,
              trials: int = DEFAULT_TRIALS, restart_after: int = RESTART_AFTER,
              first_hit: bool = False, workers: int = 1) -> FuzzReport:
    """Hill-climb over genomes, restarting after a run of non-improving steps.

    Candidates are drawn in fixed-size batches from the parent current at
    the start of the batch, each from its own per-iteration RNG stream, so
    ``workers`` changes the wall-clock time but never the report.
    """
    if max_iters <= 0:
        raise ValueError("max_iters must be positive")
    report = FuzzReport(seed, 0, profile=config.profile.label)
    seen = set()
    current: Optional[Genome] = None
    current_score = -1.0
    stale = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        i = 0
        while i < max_iters:
            n = min(BATCH, max_iters - i)
            if stale >= restart_after:
                current, current_score, stale = None, -1.0, 0
            cands = []
            for k in range(n):
                rng = np.random.default_rng([seed, i + k, 0])
                cands.append(random_genome(rng) if current is None else mutate_genome(current, rng))
            jobs = [(g, config, trials, [seed, i + k, 1]) for k, g in enumerate(cands)]
            results = list(pool.map(_evaluate_job, jobs) if pool else map(_evaluate_job, jobs))

            for k, (g, ev) in enumerate(zip(cands, results)):
                it = i + k + 1
                report.iterations = it
                if ev.score > 0 and g not in seen:
                    seen.add(g)
                    report.positives.append(Positive(g, ev.label, ev.score, it))
                    if first_hit and ev.label is not VariantLabel.NO_LEAK:
                        return report
                if ev.score > current_score:
                    current, current_score, stale = g, ev.score, 0
                else:
                    if ev.score == current_score:
                        current = g  # drift across plateaus
                    stale += 1
            i += n
    finally:
        if pool:
            pool.shutdown()
    return report
