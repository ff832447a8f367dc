"""Inference-time reconstruction, windowed error aggregation, score
standardization, threshold calibration, and flagging.

Scores are per channel per window: the window MAE standardized by the
per-channel error standard deviation measured on healthy training data,
so a single threshold works across channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .model import RnnState, STAutoencoder
from .preprocess import Window

SIGMA_EPS = 1e-12


def reconstruct_series(
    model: STAutoencoder,
    windows: Sequence[Window],
    state_mode: str = "reset",
) -> tuple[np.ndarray, list[RnnState]]:
    """Reconstruct each window with z = mu (no sampling).

    reset: zero RNN state per window.  preserve: feed the end state of
    window k into window k+1 exactly; requires contiguous windows.
    Returns (reconstructions (N, T, ...), per-window end states).
    """
    if state_mode not in ("reset", "preserve"):
        raise ValueError(f"unknown state_mode {state_mode!r}")
    if state_mode == "preserve":
        for prev, cur in zip(windows, windows[1:]):
            if cur.ls[0] != prev.ls[-1] + 1:
                raise ValueError(
                    f"preserve mode needs contiguous windows, gap between LS "
                    f"{prev.ls[-1]} and {cur.ls[0]}"
                )
    model.eval()
    recons = []
    states: list[RnnState] = []
    state: Optional[RnnState] = None
    with torch.no_grad():
        for w in windows:
            x = torch.as_tensor(w.values[None], dtype=torch.float32)
            recon, _, state_out = model(x, state=state, sample=False)
            recons.append(recon[0].numpy())
            states.append(state_out)
            state = state_out if state_mode == "preserve" else None
    return np.stack(recons), states


def mae_window(x: np.ndarray, x_bar: np.ndarray, valid_mask: np.ndarray) -> np.ndarray:
    """Per-channel mean absolute error over the window's T steps."""
    if x.shape != x_bar.shape:
        raise ValueError("shape mismatch")
    err = np.abs(x - x_bar).mean(axis=0)
    err[~valid_mask] = 0.0
    return err


def window_errors(
    windows: Sequence[Window], recons: np.ndarray, valid_mask: np.ndarray
) -> np.ndarray:
    return np.stack(
        [mae_window(w.values, r, valid_mask) for w, r in zip(windows, recons)]
    )


@dataclass
class SigmaCalib:
    """Per-channel std of window MAE on the training set, epsilon-floored."""

    sigma: np.ndarray
    state_mode: str

    def to_json_dict(self) -> dict:
        return {
            "state_mode": self.state_mode,
            "shape": list(self.sigma.shape),
            "sigma": self.sigma.ravel().tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SigmaCalib":
        return cls(
            sigma=np.asarray(d["sigma"]).reshape(d["shape"]),
            state_mode=d["state_mode"],
        )


def calibrate_sigma(train_errors: np.ndarray, state_mode: str) -> SigmaCalib:
    """train_errors: (n_windows, n_ieta, n_iphi, n_depth) healthy MAEs."""
    sigma = train_errors.std(axis=0)
    return SigmaCalib(np.maximum(sigma, SIGMA_EPS), state_mode)


def anomaly_score(errors: np.ndarray, calib: SigmaCalib) -> np.ndarray:
    return errors / calib.sigma


def threshold_for_capture(anomalous_scores: np.ndarray, capture_rate: float) -> float:
    """Threshold flagging (strictly above) at least capture_rate of the
    given anomalous-cell scores.

    Picks the largest score value strictly below the m-th largest score
    (m = ceil(rate * n)); when no lower value exists the threshold sits
    just under the minimum, so recall >= rate always holds.
    """
    scores = np.asarray(anomalous_scores, dtype=float).ravel()
    if scores.size == 0:
        raise ValueError("no anomalous scores to calibrate on")
    if not 0.0 < capture_rate <= 1.0:
        raise ValueError("capture rate must be in (0, 1]")
    s = np.sort(scores)
    m = int(np.ceil(capture_rate * len(s)))
    v = s[len(s) - m]
    below = s[s < v]
    if len(below):
        return float(below[-1])
    return float(v - max(1e-12, abs(v) * 1e-9))


def flags_at(scores: np.ndarray, alpha: float) -> np.ndarray:
    return scores > alpha
