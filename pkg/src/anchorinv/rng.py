"""Seed derivation.

All randomness in a run flows from one master seed through a fixed tree
of :class:`numpy.random.SeedSequence` spawn keys::

    master
    ├── (STAGE_TRUTH,)                 synthetic true field
    ├── (STAGE_TYPE_A, 0|1|2)          type-A cells, their noise, held-out targets
    ├── (STAGE_TYPE_B_NOISE, i)        noise on observed dataset i
    ├── (STAGE_PRIOR, 0) / (.., 1, i)   candidate parameters / anchors of candidate i
    ├── (STAGE_LIKELIHOOD, i)          realizations for candidate i
    ├── (STAGE_PREDICT, j)             predictive field j
    ├── (STAGE_RESAMPLE,)              candidate resampling offset
    ├── (STAGE_ANCHOR_COUNT,)          anchor-count search (same seed for every count)
    └── (STAGE_DIAGNOSTIC, p)          dependence score for dataset pair p

Because every leaf is addressed by its key and not by draw order, results
do not depend on how candidate evaluations are scheduled.
"""

import numpy as np

STAGE_TRUTH = 0
STAGE_TYPE_A = 1
STAGE_TYPE_B_NOISE = 2
STAGE_PRIOR = 3
STAGE_LIKELIHOOD = 4
STAGE_PREDICT = 5
STAGE_RESAMPLE = 6
STAGE_ANCHOR_COUNT = 7
STAGE_DIAGNOSTIC = 8


def seed_sequence(seed, *key):
    """Return the SeedSequence for ``key`` under a master ``seed``.

    ``seed`` may itself be a SeedSequence, in which case ``key`` extends
    its spawn key.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def generator(seed, *key):
    """A fresh PCG64 generator at node ``key`` of the tree rooted at ``seed``."""
    if isinstance(seed, np.random.Generator) and not key:
        return seed
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *key)))
