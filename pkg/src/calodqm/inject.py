"""Synthetic channel-anomaly injection producing labeled evaluation sets.

Anomalies scale the expected healthy reading by a degradation factor:
dead channels read 0, degraded channels a fraction, noisy-hot a
multiple (clipped at the event count), fully-hot exactly the event
count.  Location sampling is a pure function of the seed so different
anomaly kinds share identical (LS, channel) locations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import MapSequence

DEFAULT_DEGRADED_FACTORS = (0.8, 0.6, 0.4, 0.2)
KINDS = ("dead", "degraded", "noisy_hot", "fully_hot")


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    r_d: float = 0.0  # ignored for dead (0) and fully_hot
    n_ls: int = 10
    n_channels: int = 8
    persist_T: int = 5
    seed: int = 0
    skip_overflow: bool = False  # drop would-be-clipped noisy cells instead of clipping

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown anomaly kind {self.kind!r}")
        if self.kind == "degraded" and not 0.0 < self.r_d < 1.0:
            raise ValueError("degraded requires 0 < r_d < 1")
        if self.kind == "noisy_hot" and self.r_d <= 1.0:
            raise ValueError("noisy_hot requires r_d > 1")
        if self.r_d == 1.0:
            raise ValueError("degradation factor 1 is not an anomaly")


@dataclass
class LabeledSet:
    seq: MapSequence
    labels: np.ndarray  # bool (n_ls, n_ieta, n_iphi, n_depth)
    spec: AnomalySpec

    def label_records(self) -> list[tuple[int, int, int, int]]:
        """Sparse (ls, ieta, iphi, depth) list for JSON storage."""
        geom = self.seq.geometry
        out = []
        ls_numbers = self.seq.ls_numbers()
        for s, i, j, k in zip(*np.nonzero(self.labels)):
            out.append(
                (ls_numbers[s], int(geom.ieta_values[i]), int(j) + 1, int(k) + 1)
            )
        return out


def _sample_locations(
    seq: MapSequence, n_ls: int, n_channels: int, persist_T: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """(anchor map indices, channel bin indices); independent of anomaly kind.

    Anchors sit at window-end positions (index T-1, 2T-1, ...) so the
    persistent anomaly covers exactly one stride-T scoring window.
    """
    rng = np.random.default_rng([int(seed), 4099])
    n_maps = len(seq)
    candidates = np.arange(persist_T - 1, n_maps, persist_T)
    if len(candidates) == 0:
        raise ValueError("sequence shorter than the persistence window")
    anchors = rng.choice(candidates, size=min(n_ls, len(candidates)), replace=False)
    anchors.sort()
    valid = np.argwhere(seq.geometry.valid_mask)
    if n_channels > len(valid):
        raise ValueError(f"requested {n_channels} channels but only {len(valid)} exist")
    picks = rng.choice(len(valid), size=n_channels, replace=False)
    return anchors, valid[picks]


def inject(test: MapSequence, spec: AnomalySpec) -> LabeledSet:
    """Apply the anomaly to raw (pre-renormalization) maps; label injected cells."""
    out = test.copy()
    labels = np.zeros((len(test),) + test.geometry.dims, dtype=bool)
    anchors, channels = _sample_locations(
        test, spec.n_ls, spec.n_channels, spec.persist_T, spec.seed
    )
    for anchor in anchors:
        for s in range(anchor - spec.persist_T + 1, anchor + 1):
            m = out.maps[s]
            xi = float(m.num_events)
            for i, j, k in channels:
                healthy = m.values[i, j, k]
                if spec.kind == "dead":
                    new = 0.0
                elif spec.kind == "fully_hot":
                    new = xi
                else:
                    new = spec.r_d * healthy
                    if new > xi:
                        if spec.skip_overflow:
                            continue
                        new = xi
                m.values[i, j, k] = new
                labels[s, i, j, k] = True
    return LabeledSet(out, labels, spec)


def build_eval_suite(
    test: MapSequence,
    n_maps_per_kind: int = 200,
    n_channels: int = 8,
    persist_T: int = 5,
    seed: int = 0,
    degraded_factors: Sequence[float] = DEFAULT_DEGRADED_FACTORS,
    noisy_factor: float = 2.0,
) -> list[LabeledSet]:
    """Seven kind/factor combinations over shared injection locations.

    ``n_maps_per_kind`` counts affected maps including window history,
    so each kind gets ``n_maps_per_kind // persist_T`` anchor windows.
    """
    n_anchors = max(1, n_maps_per_kind // persist_T)
    specs = [AnomalySpec("dead", 0.0, n_anchors, n_channels, persist_T, seed)]
    for rd in degraded_factors:
        specs.append(AnomalySpec("degraded", rd, n_anchors, n_channels, persist_T, seed))
    specs.append(AnomalySpec("noisy_hot", noisy_factor, n_anchors, n_channels, persist_T, seed))
    specs.append(AnomalySpec("fully_hot", 0.0, n_anchors, n_channels, persist_T, seed))
    return [inject(test, s) for s in specs]


def anomalous_fraction(labeled: LabeledSet) -> float:
    """Fraction of valid channel-LS cells carrying an injected anomaly."""
    n_valid = labeled.seq.geometry.n_channels * len(labeled.seq)
    return float(labeled.labels.sum()) / n_valid
