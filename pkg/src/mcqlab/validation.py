"""Input checks shared by the continuous-control estimators."""

from __future__ import annotations

import numpy as np

from .errors import EmptyDataset, LengthMismatch, NonFiniteInput, ShapeMismatch


def as_2d(x, name="input", dtype=np.float32):
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeMismatch(f"{name} must be 1-D or 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"{name} contains NaN or inf")
    return x


def check_states_actions(states, actions, state_dim=None, action_dim=None, dtype=None):
    """Coerce to matching ``(n, d)`` float arrays, optionally pinning widths."""
    dtype = dtype or np.result_type(getattr(states, "dtype", np.float32), np.float32)
    if dtype not in (np.float32, np.float64):
        dtype = np.float32
    s = as_2d(states, "states", dtype)
    a = as_2d(actions, "actions", dtype)
    if len(s) == 0:
        raise EmptyDataset("no samples")
    if len(s) != len(a):
        raise LengthMismatch(f"{len(s)} states but {len(a)} actions")
    if state_dim is not None and s.shape[1] != state_dim:
        raise ShapeMismatch(f"state width {s.shape[1]} != {state_dim}")
    if action_dim is not None and a.shape[1] != action_dim:
        raise ShapeMismatch(f"action width {a.shape[1]} != {action_dim}")
    return s, a
