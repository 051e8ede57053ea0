"""Strategies for running inference with more object slots than trained.

A model carries a table of ``capacity`` learned object positional codes.
During training a strategy picks which codes each sample uses; at inference
it decides how codes cover ``n_test`` objects (possibly via chunked repeated
inference or interpolation). Slot positions are kept as float positions into
the code table; fractional positions linearly interpolate neighboring codes,
which covers both contiguous-interval resampling and test-time stretching
with one code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch


class ScalingStrategy(str, Enum):
    BASELINE_CHUNKED = "baseline_chunked"
    BASELINE_DIRECT = "baseline_direct"
    TEST_TIME_INTERPOLATION = "test_time_interpolation"
    RANDOM_INTERVAL = "random_interval"
    RANDOM_INTERPOLATION = "random_interpolation"
    RANDOM_PERMUTATION = "random_permutation"


TRAINED_CAPACITY_STRATEGIES = {
    ScalingStrategy.RANDOM_INTERVAL,
    ScalingStrategy.RANDOM_INTERPOLATION,
    ScalingStrategy.RANDOM_PERMUTATION,
}


@dataclass
class SlotPlan:
    """Positions into the object-code table for one training sample.

    Integer positions index codes directly; fractional positions (only
    produced by random_interpolation) blend the two neighbors.
    """

    positions: np.ndarray  # float (n_train,)
    interval_length: int | None = None  # set for random_interpolation


def training_slot_indices(strategy: ScalingStrategy, rng: np.random.Generator,
                          capacity: int, n_train: int) -> SlotPlan:
    """Slot positions used for one training iteration."""
    strategy = ScalingStrategy(strategy)
    if capacity < n_train:
        raise ValueError(f"capacity {capacity} < n_train {n_train}")
    if n_train == capacity or strategy not in TRAINED_CAPACITY_STRATEGIES:
        return SlotPlan(np.arange(n_train, dtype=np.float64))
    if strategy is ScalingStrategy.RANDOM_INTERVAL:
        start = int(rng.integers(0, capacity - n_train + 1))
        return SlotPlan(np.arange(start, start + n_train, dtype=np.float64))
    if strategy is ScalingStrategy.RANDOM_INTERPOLATION:
        length = int(rng.integers(n_train + 1, capacity + 1))
        start = int(rng.integers(0, capacity - length + 1))
        return SlotPlan(np.linspace(start, start + length - 1, n_train), interval_length=length)
    # random permutation: sorted uniform sample without replacement
    idx = np.sort(rng.choice(capacity, size=n_train, replace=False))
    return SlotPlan(idx.astype(np.float64))


def gather_codes(table: torch.Tensor, positions: np.ndarray) -> torch.Tensor:
    """Resolve float positions against a (capacity, d) code table."""
    pos = torch.as_tensor(positions, dtype=torch.float32, device=table.device)
    lo = pos.floor().long().clamp(0, table.shape[0] - 1)
    hi = pos.ceil().long().clamp(0, table.shape[0] - 1)
    frac = (pos - lo.float()).unsqueeze(-1).to(table.dtype)
    return table[lo] * (1 - frac) + table[hi] * frac


def inference_encoding(strategy: ScalingStrategy, trained_codes: torch.Tensor,
                       n_test: int, n_train: int | None = None) -> torch.Tensor:
    """Object positional codes for ``n_test`` slots at inference.

    ``trained_codes``: the full (capacity, d) table. For baseline_chunked
    the caller chunks objects into groups of n_train and runs repeated
    inference with the returned codes.
    """
    strategy = ScalingStrategy(strategy)
    capacity = trained_codes.shape[0]
    n_train = capacity if n_train is None else n_train
    if strategy is ScalingStrategy.BASELINE_CHUNKED:
        return trained_codes[:n_train]
    if strategy is ScalingStrategy.BASELINE_DIRECT:
        if n_test != n_train:
            raise ValueError(
                f"baseline_direct needs a model trained at n_test={n_test} objects "
                f"(this one was trained at {n_train})")
        return trained_codes[:n_test]
    if strategy is ScalingStrategy.TEST_TIME_INTERPOLATION:
        if n_test == n_train:
            return trained_codes[:n_train]
        positions = np.linspace(0, n_train - 1, n_test)
        return gather_codes(trained_codes[:n_train], positions)
    if n_test > capacity:
        raise ValueError(f"n_test {n_test} exceeds trained capacity {capacity}")
    return trained_codes[:n_test]


def chunk_objects(n_objects: int, n_train: int) -> list[list[int]]:
    """Split object indices into inference chunks of at most n_train."""
    return [list(range(i, min(i + n_train, n_objects))) for i in range(0, n_objects, n_train)]
