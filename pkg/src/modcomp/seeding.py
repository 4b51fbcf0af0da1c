"""Seed-derivation helpers.

Every random draw in the package comes from a Generator built here. Streams
are derived from (seed, *tags) so that independent concerns (init, shuffling,
auxiliary batch draws, dropout, per-sample generation) never share a stream:
adding or removing draws in one concern cannot perturb another. That is what
makes the zero-weight-adaptation run bitwise-match the no-adaptation run.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Values are arbitrary but frozen; changing them changes every
# seeded result in the package.
TAG_INIT = 1
TAG_SHUFFLE = 2
TAG_AUX_BATCH = 3
TAG_DROPOUT = 4
TAG_SPLIT = 5
TAG_PRETRAIN = 6
TAG_GEN_PROJ = 7
TAG_GEN_CLASS = 8
TAG_GEN_SAMPLE = 9
TAG_GEN_NUISANCE = 10
TAG_GEN_PAIR = 11
TAG_SWEEP = 12


def child_rng(seed: int, *tags: int) -> np.random.Generator:
    """Deterministic substream for (seed, tags); order-independent."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, tags)])))
