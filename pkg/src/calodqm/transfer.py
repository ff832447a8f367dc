"""Parameter surgery: init-mode copying, train-mode freeze policies,
BN/bias unfreeze exceptions, and trainable-parameter accounting.

Copying is by name+shape match inside the init mode's block scope;
shape mismatches are skipped loudly (reported), never sliced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import ParameterStore

INIT_MODES = {
    "RANDOM": frozenset(),
    "TL-4": frozenset({"encoder.cnn", "encoder.gnn", "decoder.cnn"}),
    # all networks, incl. the vae bottleneck and fc glue; geometry-dependent
    # fc tensors fall out via the shape rule
    "TL-7": frozenset(
        {
            "encoder.cnn",
            "encoder.gnn",
            "encoder.rnn",
            "encoder.vae",
            "encoder.fc",
            "decoder.cnn",
            "decoder.rnn",
            "decoder.fc",
        }
    ),
}

FREEZE_SETS = {
    "No-TL": frozenset(),
    "TL-1": frozenset({"encoder.gnn"}),
    "TL-2": frozenset({"encoder.cnn"}),
    "TL-2d": frozenset({"decoder.cnn"}),
    "TL-3": frozenset({"encoder.cnn", "encoder.gnn"}),
    "TL-4": frozenset({"encoder.cnn", "encoder.gnn", "decoder.cnn"}),
    # the vae bottleneck rides with the encoder rnn: it sits after it
    "TL-5": frozenset({"encoder.cnn", "encoder.gnn", "encoder.rnn", "encoder.vae"}),
    "TL-6": frozenset(
        {"encoder.cnn", "encoder.gnn", "encoder.rnn", "encoder.vae", "decoder.rnn"}
    ),
}

# experiment grid rows: which (init, train) pairs are meaningful
VALID_COMBOS = {
    ("RANDOM", "No-TL"),
    ("TL-4", "No-TL"),
    ("TL-4", "TL-1"),
    ("TL-4", "TL-2"),
    ("TL-4", "TL-2d"),
    ("TL-4", "TL-3"),
    ("TL-4", "TL-4"),
    ("TL-7", "TL-5"),
    ("TL-7", "TL-6"),
}


class TLConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TLConfig:
    init_mode: str = "RANDOM"
    train_mode: str = "No-TL"
    unfreeze_bn: bool = False
    unfreeze_bias: bool = False

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise TLConfigError(f"unknown init_mode {self.init_mode!r}")
        if self.train_mode not in FREEZE_SETS:
            raise TLConfigError(f"unknown train_mode {self.train_mode!r}")
        if (self.init_mode, self.train_mode) not in VALID_COMBOS:
            raise TLConfigError(
                f"({self.init_mode}, {self.train_mode}) is not an experiment-grid row"
            )
        if (self.unfreeze_bn or self.unfreeze_bias) and self.train_mode == "No-TL":
            raise TLConfigError("BN/bias exceptions only apply with a freeze set")

    def to_json(self) -> dict:
        return {
            "init_mode": self.init_mode,
            "train_mode": self.train_mode,
            "unfreeze_bn": self.unfreeze_bn,
            "unfreeze_bias": self.unfreeze_bias,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TLConfig":
        return cls(
            init_mode=d.get("init_mode", "RANDOM"),
            train_mode=d.get("train_mode", "No-TL"),
            unfreeze_bn=bool(d.get("unfreeze_bn", False)),
            unfreeze_bias=bool(d.get("unfreeze_bias", False)),
        )


def _block_prefix(name: str) -> str:
    parts = name.split(".")
    return f"{parts[0]}.{parts[1]}"


@dataclass
class TransferReport:
    copied: list[str] = field(default_factory=list)
    skipped_shape: list[str] = field(default_factory=list)
    skipped_missing: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "copied": self.copied,
            "skipped_shape": self.skipped_shape,
            "skipped_missing": self.skipped_missing,
        }


def transfer_init(
    source: ParameterStore, target: ParameterStore, init_mode: str
) -> tuple[ParameterStore, TransferReport]:
    """Copy source values into a fresh copy of target for the init scope.

    Only names inside the init mode's block set are touched; a name
    missing from the source or with a conflicting shape stays at its
    random initialization and is reported.
    """
    if init_mode not in INIT_MODES:
        raise TLConfigError(f"unknown init_mode {init_mode!r}")
    blocks = INIT_MODES[init_mode]
    if blocks:
        target_blocks = {_block_prefix(n) for n in target.names()}
        source_blocks = {_block_prefix(n) for n in source.names()}
        dead = blocks - (target_blocks | source_blocks)
        if dead:
            raise TLConfigError(f"init_mode references absent blocks: {sorted(dead)}")
    out = target.copy()
    report = TransferReport()
    for name in out.names():
        if _block_prefix(name) not in blocks:
            continue
        if name not in source:
            report.skipped_missing.append(name)
            continue
        src = source.get(name).values
        if src.shape != out.get(name).values.shape:
            report.skipped_shape.append(name)
            continue
        out.set_values(name, src)
        report.copied.append(name)
    return out, report


def apply_freeze(store: ParameterStore, cfg: TLConfig) -> ParameterStore:
    """Set trainable=False exactly on the freeze set, minus exceptions."""
    out = store.copy()
    frozen_blocks = FREEZE_SETS[cfg.train_mode]
    for name in out.names():
        kind = name.rsplit(".", 1)[1]
        in_frozen = _block_prefix(name) in frozen_blocks
        trainable = not in_frozen
        if in_frozen:
            if cfg.unfreeze_bn and kind in ("bn_scale", "bn_shift"):
                trainable = True
            if cfg.unfreeze_bias and kind == "bias":
                trainable = True
        out.set_trainable(name, trainable)
    return out


def count_trainable(store: ParameterStore) -> tuple[int, int, float]:
    """(n_trainable, n_total, reduction vs all-trainable baseline).

    Totals count tensor elements; the baseline treats every non-running
    entry as trainable.
    """
    n_total = 0
    n_trainable = 0
    baseline = 0
    for name in store.names():
        entry = store.get(name)
        kind = name.rsplit(".", 1)[1]
        n_total += entry.values.size
        if not kind.startswith("bn_running"):
            baseline += entry.values.size
        if entry.trainable:
            n_trainable += entry.values.size
    reduction = 0.0 if baseline == 0 else (baseline - n_trainable) / baseline
    return n_trainable, n_total, reduction
