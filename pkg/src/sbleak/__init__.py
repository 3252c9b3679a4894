"""Store-buffer data sampling simulator, variant fuzzer and microcode checker."""

from .dsl import AttackProgram, FaultClass, canonical_msbds_program, parse_program, serialize_program
from .engine import MachineConfig, forward_decision, new_machine, run_attempt, run_experiment
from .machine import Prep, TimingModel, builtin_microcode_profiles, get_profile

__version__ = "0.1.0"
