"""
Seed Derivation

Every random stream in a run is derived from one master seed with
numpy's SeedSequence, keyed by position rather than by execution order:

    trial seed   = SeedSequence([master_seed, trial_index])
    member seed  = SeedSequence([trial_seed, member_index])
    shot seed    = SeedSequence([stream_seed, shot_index, tag])

Parallel execution therefore cannot change results.
"""

from typing import List

import numpy as np


def derive_seed(*keys: int) -> int:
    """Deterministic 32-bit seed from a tuple of non-negative integer keys."""
    sequence = np.random.SeedSequence([int(k) for k in keys])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def trial_seeds(master_seed: int, trials: int) -> List[int]:
    return [derive_seed(master_seed, i) for i in range(trials)]


def member_seed(trial_seed: int, member_index: int) -> int:
    return derive_seed(trial_seed, member_index)


def make_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
