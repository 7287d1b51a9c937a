"""Incremental video representation: max-pool bag-of-objects and mean-pooled
frame descriptors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

MAX_POOL = "max"
MEAN_POOL = "mean"


class DescriptorError(ValueError):
    pass


@dataclass
class DescriptorState:
    mode: str
    psi: np.ndarray
    observed: np.ndarray
    count: int = 0

    def copy(self) -> "DescriptorState":
        return DescriptorState(self.mode, self.psi.copy(), self.observed.copy(), self.count)


def init_descriptor(mode: str, dim: int, first_frame: Optional[np.ndarray] = None) -> DescriptorState:
    """Empty state of length ``dim``, optionally with ``first_frame`` folded in."""
    if mode not in (MAX_POOL, MEAN_POOL):
        raise DescriptorError(f"unknown pooling mode {mode!r}")
    state = DescriptorState(mode, np.zeros(dim), np.zeros(dim, dtype=bool))
    if first_frame is None:
        return state
    first_frame = np.asarray(first_frame, dtype=float)
    if first_frame.shape != (dim,):
        raise DescriptorError(f"first frame has shape {first_frame.shape}, expected ({dim},)")
    if mode == MAX_POOL:
        for n, x in enumerate(first_frame):
            update_max(state, n, x)
    else:
        update_mean(state, first_frame)
    return state


def update_max(state: DescriptorState, n: int, x: float) -> DescriptorState:
    """psi_n <- max(psi_n, x); in place, returns ``state``."""
    if state.mode != MAX_POOL:
        raise DescriptorError("update_max requires a max-pool descriptor")
    if not 0.0 <= x <= 1.0:
        raise DescriptorError(f"observation {x} outside [0, 1]")
    if x > state.psi[n]:
        state.psi[n] = x
    state.observed[n] = True
    return state


def update_mean(state: DescriptorState, d: np.ndarray) -> DescriptorState:
    if state.mode != MEAN_POOL:
        raise DescriptorError("update_mean requires a mean-pool descriptor")
    d = np.asarray(d, dtype=float)
    if d.shape != state.psi.shape:
        raise DescriptorError(f"frame descriptor has shape {d.shape}, expected {state.psi.shape}")
    state.count += 1
    # incremental form: psi + (d - psi) / count
    state.psi += (d - state.psi) / state.count
    state.observed[:] = True
    return state


def full_descriptor(scores: np.ndarray) -> np.ndarray:
    """Descriptor of a clip with every (frame, channel) observed."""
    return np.asarray(scores).max(axis=0)
