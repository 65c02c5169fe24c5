"""Modality-specific encoders, the shared projector, per-modality special
embeddings, and the routing rule that assembles decoder media tokens.

Every encoder emits content embeddings first (tokenwise transform of the
input units), then adds fixed sinusoidal positional codes of the ORIGINAL
unit coordinates. Masking therefore never shifts a surviving unit's code,
and a masked view's embeddings match the corresponding rows of the
unmasked run exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import MODALITIES, Sample, ValidationError
from .masking import MaskSpec, mask_image, mask_table, mask_timecourse
from .tensor import DTYPE, Tensor, UsageError, concat, embedding, gelu, matmul, softmax


class ConfigurationError(ValueError):
    pass


@dataclass
class EncoderConfig:
    d_enc: int = 128
    d_model: int = 128
    patch: int = 8       # 2D patch edge
    tubelet: int = 8     # 3D tubelet edge
    image_layers: int = 1
    volume_layers: int = 1
    tabular_layers: int = 1
    timecourse_layers: int = 1
    col_vocab: int = 64  # hashed column/feature identity table size

    def validate(self):
        if self.d_enc <= 0 or self.d_model <= 0:
            raise ConfigurationError("d_enc and d_model must be positive")
        if self.patch <= 0 or self.tubelet <= 0:
            raise ConfigurationError("patch and tubelet edges must be positive")


@dataclass
class MediaTokens:
    """Decoder-ready media block; the special embedding is always token 0."""

    tokens: Tensor  # [n, d_model]
    provenance: str  # special_only | special_plus_visible
    modality: str


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    even = dim + (dim % 2)
    half = even // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = pos.astype(np.float64)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return table[:, :dim].astype(DTYPE)


def sincos_positions(coords: list[np.ndarray], dim: int) -> np.ndarray:
    """Fixed positional codes for one or more integer coordinate axes.

    dim is split evenly across axes; the last axis absorbs the remainder.
    """
    n_axes = len(coords)
    share = dim // n_axes
    parts = []
    for i, c in enumerate(coords):
        d_i = dim - share * (n_axes - 1) if i == n_axes - 1 else share
        parts.append(_sincos_1d(np.asarray(c), d_i))
    return np.concatenate(parts, axis=1)


def resize_to_divisible(payload: np.ndarray, edge: int, spatial_axes: int) -> np.ndarray:
    """Bilinear/trilinear resize of the spatial axes to the nearest multiple of edge."""
    dims = payload.shape[:spatial_axes]
    target = tuple(max(edge, int(round(n / edge)) * edge) for n in dims)
    if target == dims:
        return payload
    factors = [t / n for t, n in zip(target, dims)] + [1.0] * (payload.ndim - spatial_axes)
    out = ndimage.zoom(payload.astype(np.float64), factors, order=1)
    return out.astype(DTYPE)


def patchify_2d(img: np.ndarray, patch: int):
    """HxWxC -> (P, patch*patch*C) rows plus (row, col) grid coordinates."""
    h, w, c = img.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    blocks = img.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    patches = blocks.reshape(gh * gw, patch * patch * c)
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    return patches.astype(DTYPE), (rows, cols)


def patchify_3d(vol: np.ndarray, tub: int):
    """DxHxWxC -> (P, tub^3*C) rows plus (depth, row, col) grid coordinates."""
    d, h, w, c = vol.shape
    if d % tub or h % tub or w % tub:
        raise ConfigurationError(f"volume {d}x{h}x{w} not divisible by tubelet {tub}")
    gd, gh, gw = d // tub, h // tub, w // tub
    blocks = vol.reshape(gd, tub, gh, tub, gw, tub, c).transpose(0, 2, 4, 1, 3, 5, 6)
    patches = blocks.reshape(gd * gh * gw, tub**3 * c)
    idx = np.arange(gd * gh * gw)
    dep, rem = np.divmod(idx, gh * gw)
    rows, cols = np.divmod(rem, gw)
    return patches.astype(DTYPE), (dep, rows, cols)


def _col_ids(names: list[str], vocab: int) -> np.ndarray:
    return np.array([zlib.crc32(n.encode("utf-8")) % vocab for n in names], dtype=np.int64)


class EncoderStack:
    """All five modality encoders plus projector, specials, and routing."""

    def __init__(self, model, cfg: EncoderConfig):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        p = model.params
        d = cfg.d_enc
        for modality, in_dim, layers in (
            ("image2d_gray", cfg.patch**2 * 1, cfg.image_layers),
            ("image2d_rgb", cfg.patch**2 * 3, cfg.image_layers),
            ("volume3d", cfg.tubelet**3 * 1, cfg.volume_layers),
        ):
            pre = f"encoders.{modality}"
            p.add(f"{pre}.patch.w", (in_dim, d))
            p.add(f"{pre}.patch.b", (d,), init="zeros")
            self._add_blocks(pre, layers)
        for modality, layers in (("tabular", cfg.tabular_layers), ("timecourse", cfg.timecourse_layers)):
            pre = f"encoders.{modality}"
            p.add(f"{pre}.cell.w", (2, d))
            p.add(f"{pre}.cell.b", (d,), init="zeros")
            p.add(f"{pre}.columns.table", (cfg.col_vocab, d))
            p.add(f"{pre}.colpool.w", (d, 1))
            self._add_blocks(pre, layers)
        p.add("encoders.tabular.rowpool.w", (d, 1))
        p.add("encoders.timecourse.maskvec", (1, d))
        p.add("projector.w1", (d, cfg.d_model))
        p.add("projector.b1", (cfg.d_model,), init="zeros")
        p.add("projector.w2", (cfg.d_model, cfg.d_model))
        p.add("projector.b2", (cfg.d_model,), init="zeros")
        for modality in MODALITIES:
            p.add(f"special.{modality}", (1, cfg.d_model))
        self._layers = {
            "image2d_gray": cfg.image_layers,
            "image2d_rgb": cfg.image_layers,
            "volume3d": cfg.volume_layers,
            "tabular": cfg.tabular_layers,
            "timecourse": cfg.timecourse_layers,
        }

    def _add_blocks(self, prefix: str, layers: int):
        d = self.cfg.d_enc
        for i in range(layers):
            self.model.params.add(f"{prefix}.block{i}.w1", (d, d))
            self.model.params.add(f"{prefix}.block{i}.b1", (d,), init="zeros")
            self.model.params.add(f"{prefix}.block{i}.w2", (d, d))
            self.model.params.add(f"{prefix}.block{i}.b2", (d,), init="zeros")

    def _blocks(self, prefix: str, modality: str, h: Tensor) -> Tensor:
        for i in range(self._layers[modality]):
            hidden = gelu(self.model.linear(f"{prefix}.block{i}.w1", h, f"{prefix}.block{i}.b1"))
            h = h + self.model.linear(f"{prefix}.block{i}.w2", hidden, f"{prefix}.block{i}.b2")
        return h

    # -- per-modality content embeddings (before positional codes) ---------

    def patch_content(self, modality: str, patches: np.ndarray) -> Tensor:
        pre = f"encoders.{modality}"
        h = self.model.linear(f"{pre}.patch.w", Tensor(patches), f"{pre}.patch.b")
        return self._blocks(pre, modality, h)

    def _cell_features(self, modality: str, values: np.ndarray, present: np.ndarray,
                       col_ids: np.ndarray) -> Tensor:
        """Per-cell (value, presence) featurization with hashed column identity,
        attention-pooled over columns -> one vector per row."""
        pre = f"encoders.{modality}"
        r, f = values.shape
        cells = np.stack([values, present], axis=-1).reshape(r * f, 2).astype(DTYPE)
        h = self.model.linear(f"{pre}.cell.w", Tensor(cells), f"{pre}.cell.b")
        col_emb = embedding(self.model.params[f"{pre}.columns.table"], np.tile(col_ids, r))
        h = gelu(h + col_emb).reshape(r, f, self.cfg.d_enc)
        scores = matmul(h, self.model.params[f"{pre}.colpool.w"]).reshape(r, f)
        weights = softmax(scores, axis=-1).reshape(r, f, 1)
        pooled = (h * weights).sum(axis=1)
        return self._blocks(pre, modality, pooled)

    # -- encoders -----------------------------------------------------------

    def encode_image2d(self, sample: Sample, spec: MaskSpec | None = None) -> Tensor:
        """Visible-patch embeddings with positional codes of the original grid."""
        payload = resize_to_divisible(sample.payload, self.cfg.patch, 2)
        patches, (rows, cols) = patchify_2d(payload, self.cfg.patch)
        if spec is not None:
            view = mask_image(patches, spec, sample.id)
            idx = view.visible_payload["patch_indices"]
            patches, rows, cols = view.visible_payload["patches"], rows[idx], cols[idx]
        content = self.patch_content(sample.modality, patches)
        pos = sincos_positions([rows, cols], self.cfg.d_enc)
        return content + Tensor(pos)

    def encode_volume3d(self, sample: Sample, spec: MaskSpec | None = None) -> Tensor:
        payload = resize_to_divisible(sample.payload, self.cfg.tubelet, 3)
        patches, (dep, rows, cols) = patchify_3d(payload, self.cfg.tubelet)
        if spec is not None:
            view = mask_image(patches, spec, sample.id)  # volumes reuse the patch rule
            idx = view.visible_payload["patch_indices"]
            patches, dep, rows, cols = (view.visible_payload["patches"], dep[idx], rows[idx], cols[idx])
        content = self.patch_content("volume3d", patches)
        pos = sincos_positions([dep, rows, cols], self.cfg.d_enc)
        return content + Tensor(pos)

    def encode_tabular(self, sample: Sample, spec: MaskSpec | None = None) -> Tensor:
        """Single holistic summary vector; row order does not affect it."""
        if sample.payload.size == 0:
            raise ValidationError(f"sample {sample.id}: empty table")
        if spec is not None:
            view = mask_table(sample.payload, spec, sample.id)
            values, present = view.visible_payload["values"], view.visible_payload["present"]
        else:
            values = sample.payload
            present = np.ones_like(values, dtype=DTYPE)
        col_ids = _col_ids(sample.columns, self.cfg.col_vocab)
        rows = self._cell_features("tabular", values, present, col_ids)
        scores = matmul(rows, self.model.params["encoders.tabular.rowpool.w"]).reshape(1, -1)
        weights = softmax(scores, axis=-1).reshape(-1, 1)
        return (rows * weights).sum(axis=0, keepdims=True)

    def encode_timecourse(self, sample: Sample, spec: MaskSpec | None = None) -> Tensor:
        """Per-timepoint embeddings; fully-masked timepoints emit the learned
        mask vector (plus their positional code)."""
        t_steps, feats = sample.payload.shape
        if spec is not None:
            view = mask_timecourse(sample.payload, spec, sample.id)
            values, present = view.visible_payload["values"], view.visible_payload["present"]
            vis = np.ones(t_steps, dtype=DTYPE)
            vis[view.visible_payload["masked_timepoints"]] = 0.0
        else:
            values = sample.payload
            present = np.ones_like(values, dtype=DTYPE)
            vis = np.ones(t_steps, dtype=DTYPE)
        feat_ids = np.arange(feats, dtype=np.int64) % self.cfg.col_vocab
        content = self._cell_features("timecourse", values, present, feat_ids)
        maskvec = self.model.params["encoders.timecourse.maskvec"]
        vis_col = Tensor(vis[:, None])
        blended = content * vis_col + maskvec * Tensor(1.0 - vis[:, None])
        pos = sincos_positions([np.arange(t_steps)], self.cfg.d_enc)
        return blended + Tensor(pos)

    # -- projection & routing ------------------------------------------------

    def project(self, enc_out: Tensor, modality: str) -> MediaTokens:
        """Two-layer projection into decoder space plus the routing rule:
        tabular folds its summary into the special token; other modalities
        prepend the special token to their projected visible units."""
        if modality not in MODALITIES:
            raise UsageError(f"unknown modality {modality!r}")
        special = self.model.params[f"special.{modality}"]
        if modality == "tabular" and enc_out.shape[0] != 1:
            raise UsageError("tabular encoder output must be a single summary vector")
        if enc_out.shape[0] > 0:
            hidden = gelu(self.model.linear("projector.w1", enc_out, "projector.b1"))
            projected = self.model.linear("projector.w2", hidden, "projector.b2")
        else:
            projected = None
        if modality == "tabular":
            tokens = special + projected
        elif projected is None:
            tokens = special
        else:
            tokens = concat([special, projected], axis=0)
        provenance = "special_only" if tokens.shape[0] == 1 else "special_plus_visible"
        return MediaTokens(tokens=tokens, provenance=provenance, modality=modality)

    def media_tokens(self, sample: Sample, spec: MaskSpec | None = None) -> MediaTokens:
        """Encode one sample (optionally through a deterministic mask) and route."""
        if sample.modality in ("image2d_gray", "image2d_rgb"):
            enc = self.encode_image2d(sample, spec)
        elif sample.modality == "volume3d":
            enc = self.encode_volume3d(sample, spec)
        elif sample.modality == "tabular":
            enc = self.encode_tabular(sample, spec)
        elif sample.modality == "timecourse":
            enc = self.encode_timecourse(sample, spec)
        else:
            raise UsageError(f"unknown modality {sample.modality!r}")
        return self.project(enc, sample.modality)
