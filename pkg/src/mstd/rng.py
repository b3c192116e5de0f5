"""Named, reproducible random streams.

Every source of randomness in a run is a named sub-stream of the single
run seed. Stream names are stable strings ("init/model/0", "shuffle/s3",
...), so two runs that share a seed consume identical randomness even when
they execute different subsets of the pipeline. That is what makes
seed-paired method comparisons meaningful.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for sub-stream `name` of run `seed`.

    The stream is a pure function of (seed, name): repeated calls return
    fresh generators positioned at the start of the same sequence.
    """
    entropy = [int(seed) & 0xFFFFFFFF] + list(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy))


# Canonical stream names. Keeping them in one place avoids accidental
# divergence between pipeline phases and baselines that must share streams.
DATA = "data"
SPLIT = "split"


def model_init(index: int) -> str:
    return f"init/model/{index}"


def masknet_init(teacher_id: int) -> str:
    return f"init/masknet/{teacher_id}"


GATENET_INIT = "init/gatenet"


def shuffle(stage: str) -> str:
    return f"shuffle/{stage}"
