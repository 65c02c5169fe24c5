"""Per-modality strategic input masking.

Unit counts follow half-up rounding of ratio * units. Tables and timecourses
keep static shapes: masked cells are zeroed behind a presence-flag matrix
rather than removed, so encoders see a fixed layout and the original payload
is exactly reconstructable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import ValidationError
from .seeding import substream


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskSpec:
    """Deterministic mask descriptor: (seed, application_index) fixes the draw."""

    modality: str
    ratio: float
    seed: int
    application_index: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValidationError(f"mask ratio must be in [0, 1], got {self.ratio}")

    def to_record(self) -> dict:
        return {
            "modality": self.modality,
            "ratio": self.ratio,
            "seed": self.seed,
            "application_index": self.application_index,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MaskSpec":
        return cls(rec["modality"], rec["ratio"], rec["seed"], rec["application_index"])

    def rng(self, *labels) -> np.random.Generator:
        return substream(self.seed, "mask", self.modality, self.application_index, *labels)


@dataclass
class MaskedView:
    """A payload with a deterministic subset of its units hidden.

    mask is aligned to the original payload units (True = masked). For images
    visible_payload holds the surviving patches in original order plus their
    grid indices; for tables/timecourses it holds zero-filled values alongside
    a presence matrix.
    """

    visible_payload: dict
    mask: np.ndarray
    origin_sample_id: str
    spec: MaskSpec


def _pick(rng: np.random.Generator, units: int, ratio: float) -> np.ndarray:
    count = round_half_up(ratio * units)
    flags = np.zeros(units, dtype=bool)
    if count > 0:
        flags[rng.choice(units, size=count, replace=False)] = True
    return flags


def mask_image(patches: np.ndarray, spec: MaskSpec, origin_sample_id: str = "") -> MaskedView:
    """Hide round(ratio*P) whole patches; survivors keep order and grid index."""
    if patches.ndim < 1 or patches.shape[0] < 1:
        raise ValidationError("patch grid must contain at least one patch")
    n = patches.shape[0]
    masked = _pick(spec.rng(), n, spec.ratio)
    visible_idx = np.flatnonzero(~masked)
    view = {
        "patches": patches[visible_idx],
        "patch_indices": visible_idx,
        "total_patches": n,
    }
    return MaskedView(view, masked, origin_sample_id, spec)


def mask_table(table: np.ndarray, spec: MaskSpec, origin_sample_id: str = "") -> MaskedView:
    """Simultaneously hide round(ratio*R) rows and round(ratio*F) columns."""
    if table.ndim != 2 or min(table.shape) < 1:
        raise ValidationError(f"table must be RxF with R,F >= 1, got {table.shape}")
    r, f = table.shape
    rng = spec.rng()
    masked_rows = _pick(rng, r, spec.ratio)
    masked_cols = _pick(rng, f, spec.ratio)
    cell_mask = masked_rows[:, None] | masked_cols[None, :]
    present = (~cell_mask).astype(np.float32)
    view = {
        "values": (table * present).astype(table.dtype),
        "present": present,
        "masked_rows": np.flatnonzero(masked_rows),
        "masked_cols": np.flatnonzero(masked_cols),
    }
    return MaskedView(view, cell_mask, origin_sample_id, spec)


def mask_timecourse(series: np.ndarray, spec: MaskSpec, origin_sample_id: str = "") -> MaskedView:
    """Hide round(ratio*T) whole time points and round(ratio*F) features."""
    if series.ndim != 2 or min(series.shape) < 1:
        raise ValidationError(f"series must be TxF with T,F >= 1, got {series.shape}")
    t, f = series.shape
    rng = spec.rng()
    masked_t = _pick(rng, t, spec.ratio)
    masked_f = _pick(rng, f, spec.ratio)
    cell_mask = masked_t[:, None] | masked_f[None, :]
    present = (~cell_mask).astype(np.float32)
    view = {
        "values": (series * present).astype(series.dtype),
        "present": present,
        "masked_timepoints": np.flatnonzero(masked_t),
        "masked_features": np.flatnonzero(masked_f),
    }
    return MaskedView(view, cell_mask, origin_sample_id, spec)
