from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
import torch

from latent_protection.errors import ConfigError, ShapeMismatchError

from .types import BiasField, CosineReport

log = logging.getLogger("latent_protection.analysis.similarity")


def _flat(f: BiasField | torch.Tensor) -> torch.Tensor:
    data = f.data if isinstance(f, BiasField) else f
    return data.detach().reshape(-1).to(torch.float64)


def cosine(a: BiasField | torch.Tensor, b: BiasField | torch.Tensor) -> float:
    """Flattened cosine similarity; NaN when either vector has zero norm."""
    va, vb = _flat(a), _flat(b)
    if va.shape != vb.shape:
        raise ShapeMismatchError(f"cannot compare fields of {va.numel()} and {vb.numel()} elements")
    na, nb = float(va.norm()), float(vb.norm())
    if na == 0.0 or nb == 0.0:
        return math.nan
    value = float(torch.dot(va, vb)) / (na * nb)
    return max(-1.0, min(1.0, value))


def cosine_protocol(
    A: Sequence[BiasField | torch.Tensor],
    B: Sequence[BiasField | torch.Tensor],
    *,
    labels_a: Sequence[str] | None = None,
    labels_b: Sequence[str] | None = None,
    exclude_diagonal: bool = False,
) -> CosineReport:
    """
    Cosine for every (a, b) in A x B and the mean over defined pairs. Pairs with a
    zero-norm member are NaN in the matrix and left out of the mean.
    With `exclude_diagonal` (A and B the same set) the i == j pairs are skipped too.
    """
    if not A or not B:
        raise ConfigError("cosine protocol needs two nonempty field sets")
    shapes = {tuple(_flat(f).shape) for f in list(A) + list(B)}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"fields differ in size: {sorted(shapes)}")
    matrix: list[list[float]] = []
    undefined = 0
    defined: list[float] = []
    for i, a in enumerate(A):
        row: list[float] = []
        for j, b in enumerate(B):
            if exclude_diagonal and i == j:
                row.append(math.nan)
                continue
            value = cosine(a, b)
            if math.isnan(value):
                undefined += 1
            else:
                defined.append(value)
            row.append(value)
        matrix.append(row)
    if undefined:
        log.warning("cosine protocol: %d undefined pair(s) from zero-norm fields excluded", undefined)
    mean = float(np.mean(defined)) if defined else math.nan
    return CosineReport(
        matrix=matrix,
        mean=mean,
        undefined=undefined,
        labels_a=list(labels_a or []),
        labels_b=list(labels_b or []),
    )


def pairwise_consistency(fields: Sequence[BiasField | torch.Tensor]) -> CosineReport:
    """Mean cosine among distinct members of one set of fields."""
    return cosine_protocol(fields, fields, exclude_diagonal=True)


def bootstrap_mean_interval(
    values: Sequence[float],
    *,
    level: float = 0.95,
    resamples: int = 2000,
    seed: int = 0,
) -> tuple[float, float, float]:
    """(mean, low, high) percentile bootstrap interval of the mean."""
    arr = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if arr.size == 0:
        raise ConfigError("bootstrap needs at least one finite value")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, arr.size, size=(int(resamples), arr.size))
    means = arr[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    low, high = np.quantile(means, [tail, 1.0 - tail])
    return float(arr.mean()), float(low), float(high)
