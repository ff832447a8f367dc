"""Domain types, parameter naming, and on-disk container formats.

Everything downstream (generation, preprocessing, model, transfer,
scoring) works in terms of the types defined here.  The parameter name
grammar is the contract that makes checkpoint surgery possible:

    <component>.<block>.<layer_idx>.<param_kind>

with component in {encoder, decoder}, block in {cnn, gnn, rnn, vae, fc}
and param_kind in {weight, bias, bn_scale, bn_shift, bn_running_mean,
bn_running_var}.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

NAME_RE = re.compile(
    r"^(encoder|decoder)\."
    r"(cnn|gnn|rnn|vae|fc)\."
    r"(\d+)\."
    r"(weight|bias|bn_scale|bn_shift|bn_running_mean|bn_running_var)$"
)

BN_RUNNING_KINDS = ("bn_running_mean", "bn_running_var")


class CorruptionError(RuntimeError):
    """Checkpoint manifest and blob disagree (sizes, offsets, names)."""


class GeometryError(ValueError):
    """Coordinate or geometry mismatch."""


class ChannelCoord(NamedTuple):
    """Integer tower coordinate of one readout channel."""

    ieta: int
    iphi: int
    depth: int


@dataclass
class SegmentationMap:
    """Which cells are physical channels and which readout box owns them.

    ``ieta_values[i]`` is the signed ieta of bin ``i`` (most negative
    first).  ``rbx_index`` holds, per cell, the index into ``rbx_names``
    or -1 outside the valid mask.
    """

    subdetector: str
    dims: tuple[int, int, int]
    ieta_values: np.ndarray  # (n_ieta,) signed ints, ascending, never 0
    valid_mask: np.ndarray  # bool, dims
    rbx_index: np.ndarray  # int, dims, -1 where invalid
    rbx_names: list[str]

    def __post_init__(self):
        self.ieta_values = np.asarray(self.ieta_values, dtype=np.int64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        self.rbx_index = np.asarray(self.rbx_index, dtype=np.int64)
        if self.valid_mask.shape != self.dims or self.rbx_index.shape != self.dims:
            raise GeometryError("mask/rbx arrays do not match dims")
        if 0 in self.ieta_values:
            raise GeometryError("ieta value 0 is not a physical coordinate")
        if np.any((self.rbx_index >= 0) != self.valid_mask):
            raise GeometryError("every valid channel needs exactly one RBX")

    @property
    def n_channels(self) -> int:
        return int(self.valid_mask.sum())

    def ieta_to_bin(self, ieta: int) -> int:
        hits = np.nonzero(self.ieta_values == ieta)[0]
        if len(hits) == 0:
            raise GeometryError(f"ieta {ieta} outside geometry")
        return int(hits[0])

    def coord_to_bins(self, coord: ChannelCoord) -> tuple[int, int, int]:
        i = self.ieta_to_bin(coord.ieta)
        j = coord.iphi - 1
        k = coord.depth - 1
        if not (0 <= j < self.dims[1] and 0 <= k < self.dims[2]):
            raise GeometryError(f"coordinate {coord} outside geometry")
        return i, j, k

    def is_valid(self, coord: ChannelCoord) -> bool:
        try:
            i, j, k = self.coord_to_bins(coord)
        except GeometryError:
            return False
        return bool(self.valid_mask[i, j, k])

    def rbx_of(self, coord: ChannelCoord) -> str:
        i, j, k = self.coord_to_bins(coord)
        idx = self.rbx_index[i, j, k]
        if idx < 0:
            raise GeometryError(f"{coord} is not a valid channel")
        return self.rbx_names[idx]

    def valid_coords(self) -> list[ChannelCoord]:
        """All valid channels in sorted (ieta, iphi, depth) order."""
        coords = []
        for i, j, k in zip(*np.nonzero(self.valid_mask)):
            coords.append(ChannelCoord(int(self.ieta_values[i]), int(j) + 1, int(k) + 1))
        coords.sort()
        return coords

    def to_json_dict(self) -> dict:
        return {
            "subdetector": self.subdetector,
            "dims": list(self.dims),
            "ieta_values": self.ieta_values.tolist(),
            "valid_mask": self.valid_mask.astype(int).ravel().tolist(),
            "rbx_index": self.rbx_index.ravel().tolist(),
            "rbx_names": self.rbx_names,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SegmentationMap":
        dims = tuple(d["dims"])
        return cls(
            subdetector=d["subdetector"],
            dims=dims,
            ieta_values=np.asarray(d["ieta_values"]),
            valid_mask=np.asarray(d["valid_mask"], dtype=bool).reshape(dims),
            rbx_index=np.asarray(d["rbx_index"]).reshape(dims),
            rbx_names=list(d["rbx_names"]),
        )


@dataclass
class DigiOccupancyMap:
    """One lumisection's 3D hit-count histogram plus run metadata."""

    values: np.ndarray  # (n_ieta, n_iphi, n_depth), >= 0
    run_id: int
    ls: int
    num_events: int
    received_luminosity: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.num_events <= 0:
            raise ValueError("num_events must be positive")
        if np.any(self.values < 0):
            raise ValueError("occupancy values must be non-negative")

    def copy(self) -> "DigiOccupancyMap":
        return DigiOccupancyMap(
            self.values.copy(), self.run_id, self.ls, self.num_events, self.received_luminosity
        )


@dataclass
class MapSequence:
    """Ordered lumisection maps sharing one geometry."""

    maps: list[DigiOccupancyMap]
    geometry: SegmentationMap

    def __post_init__(self):
        ls = [m.ls for m in self.maps]
        if any(b <= a for a, b in zip(ls, ls[1:])):
            raise ValueError("lumisection numbers must be strictly increasing")

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self) -> Iterator[DigiOccupancyMap]:
        return iter(self.maps)

    def ls_numbers(self) -> list[int]:
        return [m.ls for m in self.maps]

    def stacked(self) -> np.ndarray:
        return np.stack([m.values for m in self.maps])

    def copy(self) -> "MapSequence":
        return MapSequence([m.copy() for m in self.maps], self.geometry)


@dataclass
class ParamEntry:
    values: np.ndarray
    trainable: bool


class ParameterStore:
    """Named, block-grouped parameter tensors with trainable flags.

    Values are held as float32, matching checkpoint precision, so the
    disk round trip is bit-exact.
    """

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, values: np.ndarray, trainable: bool = True) -> None:
        m = NAME_RE.match(name)
        if m is None:
            raise ValueError(f"malformed parameter name: {name!r}")
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name!r}")
        arr = np.asarray(values, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name!r}")
        if m.group(4) in BN_RUNNING_KINDS:
            trainable = False
        self._entries[name] = ParamEntry(arr.copy(), bool(trainable))

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def get(self, name: str) -> ParamEntry:
        return self._entries[name]

    def set_values(self, name: str, values: np.ndarray) -> None:
        entry = self._entries[name]
        arr = np.asarray(values, dtype=np.float32)
        if arr.shape != entry.values.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        entry.values = arr.copy()

    def set_trainable(self, name: str, trainable: bool) -> None:
        kind = name.rsplit(".", 1)[1]
        if kind in BN_RUNNING_KINDS:
            trainable = False
        self._entries[name].trainable = bool(trainable)

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name in self.names():
            e = self._entries[name]
            out.add(name, e.values, e.trainable)
        return out

    def n_elements(self, trainable_only: bool = False) -> int:
        total = 0
        for e in self._entries.values():
            if trainable_only and not e.trainable:
                continue
            total += e.values.size
        return total


MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


def save_checkpoint(store: ParameterStore, path: str | Path, extras: Optional[dict] = None) -> Path:
    """Write manifest + float32 little-endian blob; entries sorted by name."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    offset = 0
    chunks = []
    for name in store.names():
        entry = store.get(name)
        raw = entry.values.astype("<f4").tobytes()
        records.append(
            {
                "name": name,
                "shape": list(entry.values.shape),
                "trainable": entry.trainable,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {"entries": records, "extras": extras or {}}
    try:
        (path / BLOB_NAME).write_bytes(b"".join(chunks))
        (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    except OSError as exc:
        raise OSError(f"failed writing checkpoint at {path}: {exc}") from exc
    return path


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    blob_path = path / BLOB_NAME
    if not manifest_path.exists() or not blob_path.exists():
        raise CorruptionError(f"missing manifest or blob under {path}")
    manifest = json.loads(manifest_path.read_text())
    blob = blob_path.read_bytes()
    expected = sum(r["nbytes"] for r in manifest["entries"])
    if len(blob) != expected:
        raise CorruptionError(
            f"blob size {len(blob)} != manifest total {expected} under {path}"
        )
    store = ParameterStore()
    for rec in manifest["entries"]:
        name, shape = rec["name"], tuple(rec["shape"])
        n = int(np.prod(shape)) if shape else 1
        if rec["nbytes"] != 4 * n:
            raise CorruptionError(f"entry {name!r}: nbytes inconsistent with shape")
        start, end = rec["offset"], rec["offset"] + rec["nbytes"]
        if end > len(blob):
            raise CorruptionError(f"entry {name!r}: blob truncated")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        store.add(name, arr, rec["trainable"])
    return store, manifest.get("extras", {})


def save_run(seq: MapSequence, out_dir: str | Path) -> Path:
    """Persist one run: ``run_<id>.json`` sidecar + ``run_<id>.bin`` blob."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = seq.maps[0].run_id if seq.maps else 0
    sidecar = {
        "run_id": run_id,
        "ls": [m.ls for m in seq.maps],
        "num_events": [m.num_events for m in seq.maps],
        "received_luminosity": [m.received_luminosity for m in seq.maps],
        "geometry": seq.geometry.to_json_dict(),
    }
    blob = np.stack([m.values for m in seq.maps]).astype("<f4") if seq.maps else np.zeros(0, "<f4")
    (out_dir / f"run_{run_id}.bin").write_bytes(blob.tobytes())
    (out_dir / f"run_{run_id}.json").write_text(json.dumps(sidecar))
    return out_dir


def load_run(out_dir: str | Path, run_id: int) -> MapSequence:
    out_dir = Path(out_dir)
    sidecar = json.loads((out_dir / f"run_{run_id}.json").read_text())
    geometry = SegmentationMap.from_json_dict(sidecar["geometry"])
    raw = np.frombuffer((out_dir / f"run_{run_id}.bin").read_bytes(), dtype="<f4")
    n_ls = len(sidecar["ls"])
    values = raw.reshape((n_ls,) + geometry.dims).astype(np.float64)
    maps = [
        DigiOccupancyMap(
            values[i],
            run_id=sidecar["run_id"],
            ls=sidecar["ls"][i],
            num_events=sidecar["num_events"][i],
            received_luminosity=sidecar["received_luminosity"][i],
        )
        for i in range(n_ls)
    ]
    return MapSequence(maps, geometry)


def list_runs(out_dir: str | Path) -> list[int]:
    out_dir = Path(out_dir)
    ids = []
    for p in out_dir.glob("run_*.json"):
        try:
            ids.append(int(p.stem.split("_", 1)[1]))
        except ValueError:
            continue
    return sorted(ids)
