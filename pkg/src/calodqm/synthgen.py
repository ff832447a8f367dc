"""Seeded synthetic digi-occupancy generation.

Stand-in for the private detector dataset: barrel/endcap-like geometry,
per-lumisection luminosity decay, an RBX-shared gain structure that the
graph network can exploit, and occasional non-linearity spikes where the
luminosity drops while the event count stays high.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ChannelCoord, DigiOccupancyMap, GeometryError, MapSequence, SegmentationMap

# depth coverage per |ieta| ring for the endcap-like geometry, ieta 16..29
_HE_DEPTH_PROFILE = [2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 4, 4, 4, 4]


def _signed_ietas(n_half: int, lo: int = 1) -> np.ndarray:
    pos = np.arange(lo, lo + n_half)
    return np.concatenate([-pos[::-1], pos])


def make_geometry(
    subdetector: str,
    rbx_count: int = 36,
    dims: Optional[tuple[int, int, int]] = None,
) -> SegmentationMap:
    """Build a segmentation map with an iphi-sector RBX partition.

    hb: 32x72x2, depth 2 only on |ieta| 15-16 -> 2592 channels (72/RBX).
    he: 28x72x7, depth profile over |ieta| 16-29 -> 6912 channels (192/RBX).
    custom: full mask over the given dims.
    """
    subdetector = subdetector.lower()
    if subdetector == "hb":
        dims = (32, 72, 2)
        ieta_values = _signed_ietas(16)
        mask = np.zeros(dims, dtype=bool)
        mask[:, :, 0] = True
        for ring, ieta in enumerate(ieta_values):
            if abs(ieta) >= 15:
                mask[ring, :, 1] = True
    elif subdetector == "he":
        dims = (28, 72, 7)
        ieta_values = _signed_ietas(14, lo=16)
        mask = np.zeros(dims, dtype=bool)
        for ring, ieta in enumerate(ieta_values):
            n_depth = _HE_DEPTH_PROFILE[abs(ieta) - 16]
            mask[ring, :, :n_depth] = True
    elif subdetector == "custom":
        if dims is None:
            raise GeometryError("custom geometry requires dims")
        if dims[0] % 2 != 0:
            raise GeometryError("custom n_ieta must be even (two hemispheres)")
        ieta_values = _signed_ietas(dims[0] // 2)
        mask = np.ones(dims, dtype=bool)
    else:
        raise GeometryError(f"unknown subdetector {subdetector!r}")

    if rbx_count % 2 != 0 or dims[1] % (rbx_count // 2) != 0:
        raise GeometryError(
            f"rbx_count {rbx_count} does not partition {dims[1]} iphi bins over 2 hemispheres"
        )
    sectors = rbx_count // 2
    sector_width = dims[1] // sectors

    rbx_index = np.full(dims, -1, dtype=np.int64)
    rbx_names: list[str] = []
    prefix = subdetector.upper()
    for hemi, hemi_tag in enumerate(("M", "P")):
        for sec in range(sectors):
            rbx_names.append(f"{prefix}{hemi_tag}{sec + 1:02d}")
    half = dims[0] // 2
    for i in range(dims[0]):
        hemi = 0 if ieta_values[i] < 0 else 1
        for j in range(dims[1]):
            sec = j // sector_width
            idx = hemi * sectors + sec
            rbx_index[i, j, :] = np.where(mask[i, j, :], idx, -1)

    return SegmentationMap(
        subdetector=subdetector,
        dims=dims,
        ieta_values=ieta_values,
        valid_mask=mask,
        rbx_index=rbx_index,
        rbx_names=rbx_names,
    )


def make_gain_field(geometry: SegmentationMap, seed: int, base: float = 0.25) -> np.ndarray:
    """Per-channel mean-response multipliers: RBX-shared x ieta-dependent."""
    rng = np.random.default_rng([int(seed), 101])
    n_rbx = len(geometry.rbx_names)
    rbx_comp = np.exp(rng.normal(0.0, 0.15, size=n_rbx))
    abs_ieta = np.abs(geometry.ieta_values).astype(float)
    span = max(abs_ieta.max() - abs_ieta.min(), 1.0)
    ieta_comp = 0.8 + 0.4 * (abs_ieta - abs_ieta.min()) / span
    gain = np.zeros(geometry.dims)
    for i in range(geometry.dims[0]):
        rbx_row = geometry.rbx_index[i]
        valid = rbx_row >= 0
        gain[i][valid] = base * ieta_comp[i] * rbx_comp[rbx_row[valid]]
    return gain


@dataclass
class GenProfile:
    """Controls one synthetic run."""

    geometry: SegmentationMap
    n_ls: int
    seed: int
    xi_range: tuple[int, int] = (500, 2250)
    lumi_decay: float = 0.002
    spike_prob: float = 0.02
    gain_field: Optional[np.ndarray] = None
    run_id: int = 1
    first_ls: int = 1

    def __post_init__(self):
        if self.gain_field is None:
            self.gain_field = make_gain_field(self.geometry, self.seed)
        self.gain_field = np.asarray(self.gain_field, dtype=np.float64)
        valid = self.geometry.valid_mask
        if np.any(self.gain_field[valid] < 0) or np.any(self.gain_field[~valid] != 0):
            raise ValueError("gain_field must be >= 0 on valid channels and 0 elsewhere")
        if self.xi_range[0] <= 0 or self.xi_range[1] < self.xi_range[0]:
            raise ValueError("bad xi_range")


def _generate_ls(profile: GenProfile, s: int) -> DigiOccupancyMap:
    """One lumisection; substream keyed on (seed, ls) so parallel == serial."""
    geometry = profile.geometry
    ls = profile.first_ls + s
    rng = np.random.default_rng([int(profile.seed), 7919, ls])

    beta_nominal = np.exp(-profile.lumi_decay * s) * (1.0 + 0.05 * rng.normal())
    beta_nominal = max(beta_nominal, 1e-3)
    spike = rng.random() < profile.spike_prob
    beta = beta_nominal * 0.25 if spike else beta_nominal

    xi_min, xi_max = profile.xi_range
    frac = min(1.0, max(0.0, beta_nominal))
    xi = int(round(xi_min + (xi_max - xi_min) * frac))

    lam_scale = beta / beta_nominal
    n_rbx = len(geometry.rbx_names)
    rbx_jitter = np.exp(rng.normal(0.0, 0.1, size=n_rbx))
    jitter_map = np.ones(geometry.dims)
    valid = geometry.valid_mask
    jitter_map[valid] = rbx_jitter[geometry.rbx_index[valid]]

    lam = xi * profile.gain_field * lam_scale * jitter_map
    lam[~valid] = 0.0
    values = rng.poisson(lam).astype(np.float64)
    np.clip(values, 0, xi, out=values)
    values[~valid] = 0.0
    return DigiOccupancyMap(
        values, run_id=profile.run_id, ls=ls, num_events=xi, received_luminosity=float(beta)
    )


def generate_run(profile: GenProfile) -> MapSequence:
    """Deterministic under (profile, seed); per-LS substreams."""
    maps = [_generate_ls(profile, s) for s in range(profile.n_ls)]
    return MapSequence(maps, profile.geometry)


def contaminate(seq: MapSequence, dead_coords: Sequence[ChannelCoord]) -> MapSequence:
    """Force listed channels to zero in every LS (persistent real faults)."""
    out = seq.copy()
    bins = []
    for coord in dead_coords:
        coord = ChannelCoord(*coord)
        if not seq.geometry.is_valid(coord):
            raise GeometryError(f"{coord} is not a valid channel")
        bins.append(seq.geometry.coord_to_bins(coord))
    for m in out.maps:
        for i, j, k in bins:
            m.values[i, j, k] = 0.0
    return out
