"""Deterministic transforms between raw maps and model-ready windows.

Order of the forward pipeline is fixed: event-count renormalization,
reversible median renormalization per (ieta, depth) ring, then
per-channel min-max scaling fitted on the training split.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DigiOccupancyMap, GeometryError, MapSequence, SegmentationMap

MEDIAN_EPS = 1e-8


def renormalize_events(m: DigiOccupancyMap) -> DigiOccupancyMap:
    """Divide every value by the event count; output lands in [0, 1]."""
    if m.num_events <= 0:
        raise ValueError("num_events must be positive")
    out = m.copy()
    out.values = m.values / float(m.num_events)
    return out


@dataclass
class MedianTable:
    """Per-(ieta, depth) ring medians for one map, epsilon-floored."""

    medians: np.ndarray  # (n_ieta, n_depth)
    ls: int


def median_renorm(
    m: DigiOccupancyMap, geometry: SegmentationMap
) -> tuple[DigiOccupancyMap, MedianTable]:
    """Divide each channel by the median of its (ieta, depth) ring along iphi."""
    n_ieta, _, n_depth = geometry.dims
    medians = np.full((n_ieta, n_depth), MEDIAN_EPS)
    out = m.copy()
    for i in range(n_ieta):
        for k in range(n_depth):
            ring_mask = geometry.valid_mask[i, :, k]
            if not ring_mask.any():
                continue
            med = float(np.median(m.values[i, ring_mask, k]))
            med = max(med, MEDIAN_EPS)
            medians[i, k] = med
            out.values[i, ring_mask, k] = m.values[i, ring_mask, k] / med
    return out, MedianTable(medians, m.ls)


def median_renorm_invert(
    m: DigiOccupancyMap, table: MedianTable, geometry: SegmentationMap
) -> DigiOccupancyMap:
    if table.medians.shape != (geometry.dims[0], geometry.dims[2]):
        raise GeometryError("median table does not match geometry")
    out = m.copy()
    out.values = m.values * table.medians[:, None, :]
    out.values[~geometry.valid_mask] = 0.0
    return out


@dataclass
class MinMaxCalib:
    """Per-channel min and max computed on the training split."""

    vmin: np.ndarray
    vmax: np.ndarray
    dims: tuple[int, int, int]

    @property
    def constant_mask(self) -> np.ndarray:
        return self.vmax == self.vmin

    def to_json_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "vmin": self.vmin.ravel().tolist(),
            "vmax": self.vmax.ravel().tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MinMaxCalib":
        dims = tuple(d["dims"])
        return cls(
            vmin=np.asarray(d["vmin"]).reshape(dims),
            vmax=np.asarray(d["vmax"]).reshape(dims),
            dims=dims,
        )


def minmax_fit(train: MapSequence) -> MinMaxCalib:
    stacked = train.stacked()
    return MinMaxCalib(stacked.min(axis=0), stacked.max(axis=0), train.geometry.dims)


def _check_calib(values: np.ndarray, calib: MinMaxCalib) -> None:
    if values.shape != calib.dims:
        raise GeometryError("calibration does not match map geometry")


def minmax_apply(m: DigiOccupancyMap, calib: MinMaxCalib) -> DigiOccupancyMap:
    """Scale to [0, 1]; values outside the fitted range are clipped, so
    inversion is exact only for maps inside the calibration range."""
    _check_calib(m.values, calib)
    out = m.copy()
    span = calib.vmax - calib.vmin
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = (m.values - calib.vmin) / span
    scaled[np.broadcast_to(calib.constant_mask, scaled.shape)] = 0.0
    out.values = np.clip(scaled, 0.0, 1.0)
    return out


def minmax_invert(m: DigiOccupancyMap, calib: MinMaxCalib) -> DigiOccupancyMap:
    _check_calib(m.values, calib)
    out = m.copy()
    out.values = m.values * (calib.vmax - calib.vmin) + calib.vmin
    out.values[calib.constant_mask] = calib.vmin[calib.constant_mask]
    return out


@dataclass
class GraphTopology:
    """Channel graph: nodes are valid channels, edges join same-RBX pairs.

    The adjacency (with self loops) is block-all-ones under RBX sort, so
    it is stored as per-node block membership; ``dense()`` materializes
    the full binary matrix for small geometries.
    """

    node_coords: list  # sorted ChannelCoord per node
    node_bins: np.ndarray  # (M, 3) array indices into the 3D map
    block_of: np.ndarray  # (M,) RBX index per node
    n_blocks: int

    @property
    def n_nodes(self) -> int:
        return len(self.node_coords)

    def dense(self) -> np.ndarray:
        same = self.block_of[:, None] == self.block_of[None, :]
        return same.astype(np.float64)

    def block_sizes(self) -> np.ndarray:
        return np.bincount(self.block_of, minlength=self.n_blocks)


def build_adjacency(geometry: SegmentationMap) -> GraphTopology:
    coords = geometry.valid_coords()
    bins = np.array([geometry.coord_to_bins(c) for c in coords], dtype=np.int64)
    block = geometry.rbx_index[bins[:, 0], bins[:, 1], bins[:, 2]]
    return GraphTopology(
        node_coords=coords,
        node_bins=bins,
        block_of=block,
        n_blocks=len(geometry.rbx_names),
    )


@dataclass
class Window:
    """One contiguous T-lumisection slice of a run."""

    values: np.ndarray  # (T, n_ieta, n_iphi, n_depth)
    ls: list[int]
    num_events: list[int]


def make_windows(seq: MapSequence, T: int, stride: Optional[int] = None) -> list[Window]:
    """Contiguous-LS windows; windows spanning an LS gap are not emitted."""
    if T <= 0:
        raise ValueError("window length must be positive")
    if stride is None:
        stride = T
    if stride <= 0:
        raise ValueError("stride must be positive")
    windows = []
    n = len(seq)
    ls = seq.ls_numbers()
    start = 0
    while start + T <= n:
        span = ls[start : start + T]
        if span[-1] - span[0] == T - 1:
            windows.append(
                Window(
                    values=np.stack([seq.maps[i].values for i in range(start, start + T)]),
                    ls=span,
                    num_events=[seq.maps[i].num_events for i in range(start, start + T)],
                )
            )
            start += stride
        else:
            # skip past the first gap inside the candidate window
            gap_at = next(i for i in range(1, T) if span[i] != span[0] + i)
            start += gap_at
    return windows


@dataclass
class PreprocessResult:
    """Normalized sequence plus everything needed to invert it."""

    seq: MapSequence
    median_tables: list[MedianTable]
    calib: MinMaxCalib


def preprocess_sequence(
    seq: MapSequence, calib: Optional[MinMaxCalib] = None, fit_fraction: float = 1.0
) -> PreprocessResult:
    """events -> median -> minmax; fits min-max on the leading fraction when no calib given."""
    geometry = seq.geometry
    maps = []
    tables = []
    for m in seq:
        m1 = renormalize_events(m)
        m2, table = median_renorm(m1, geometry)
        maps.append(m2)
        tables.append(table)
    mid = MapSequence(maps, geometry)
    if calib is None:
        n_fit = max(1, int(round(len(maps) * fit_fraction)))
        calib = minmax_fit(MapSequence(maps[:n_fit], geometry))
    out_maps = [minmax_apply(m, calib) for m in mid]
    return PreprocessResult(MapSequence(out_maps, geometry), tables, calib)


def invert_sequence(result: PreprocessResult) -> MapSequence:
    """Exact inverse of ``preprocess_sequence`` back to the gamma-hat scale."""
    geometry = result.seq.geometry
    maps = []
    for m, table in zip(result.seq, result.median_tables):
        m1 = minmax_invert(m, result.calib)
        m2 = median_renorm_invert(m1, table, geometry)
        maps.append(m2)
    return MapSequence(maps, geometry)
