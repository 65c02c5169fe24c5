"""Few-shot multi-modal records: canonical sample format, synthetic dataset
generation, deterministic N-way K-shot episode sampling, prompt rendering,
and line-delimited record file IO with binary payload sidecars.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .seeding import substream
from .tensorfile import read_tensor, write_tensor

MODALITIES = ("image2d_gray", "image2d_rgb", "volume3d", "tabular", "timecourse")

MEDIA_MARKER = "⟨media⟩"  # ⟨media⟩


class ValidationError(ValueError):
    """Record or parameter violates a format invariant."""


class EpisodeError(ValueError):
    """Dataset cannot support the requested episode composition."""


class TemplateError(ValueError):
    """Prompt template malformed or unresolved."""


class RecordParseError(ValueError):
    """Record file line failed to parse."""


@dataclass
class Sample:
    """One labeled multi-modal record.

    payload:
      image2d_*: H x W x C float array in [0, 1] (C = 1 or 3)
      volume3d:  D x H x W x C float array in [0, 1]
      tabular:   R x F float matrix; columns holds the F column names
      timecourse: T x F float matrix; timestamps holds the T time values
    """

    id: str
    modality: str
    class_label: str
    payload: np.ndarray
    description: Optional[str] = None
    columns: Optional[list[str]] = None
    timestamps: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def validate(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"sample {self.id}: unknown modality {self.modality!r}")
        if not self.class_label:
            raise ValidationError(f"sample {self.id}: empty class_label")
        p = self.payload
        if not np.all(np.isfinite(p)):
            raise ValidationError(f"sample {self.id}: non-finite payload values")
        if self.modality in ("image2d_gray", "image2d_rgb"):
            want_c = 1 if self.modality == "image2d_gray" else 3
            if p.ndim != 3 or p.shape[2] != want_c:
                raise ValidationError(
                    f"sample {self.id}: {self.modality} payload must be HxWx{want_c}, got {p.shape}"
                )
        elif self.modality == "volume3d":
            if p.ndim != 4:
                raise ValidationError(
                    f"sample {self.id}: volume3d payload must be DxHxWxC, got {p.shape}"
                )
        elif self.modality == "tabular":
            if p.ndim != 2 or self.columns is None or len(self.columns) != p.shape[1]:
                raise ValidationError(
                    f"sample {self.id}: tabular payload needs RxF matrix plus F column names"
                )
        elif self.modality == "timecourse":
            if p.ndim != 2 or self.timestamps is None or len(self.timestamps) != p.shape[0]:
                raise ValidationError(
                    f"sample {self.id}: timecourse payload needs TxF matrix plus T timestamps"
                )


class Dataset:
    """Immutable collection of samples with a label -> sample-id index."""

    def __init__(self, samples: list[Sample], enforce_fsl_bound: bool = False):
        self.samples = list(samples)
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupe = next(i for i in ids if ids.count(i) > 1)
            raise ValidationError(f"duplicate sample id {dupe!r}")
        self.by_id = {s.id: s for s in self.samples}
        self.class_index: dict[str, list[str]] = {}
        for s in self.samples:
            self.class_index.setdefault(s.class_label, []).append(s.id)
        for label, members in self.class_index.items():
            if not 1 <= len(members) <= 10:
                msg = f"class {label!r} has {len(members)} samples, outside the 1-10 few-shot bound"
                if enforce_fsl_bound:
                    raise ValidationError(msg)
                warnings.warn(msg)

    def __len__(self):
        return len(self.samples)

    @property
    def classes(self) -> list[str]:
        return sorted(self.class_index)

    def subset(self, labels) -> "Dataset":
        keep = set(labels)
        return Dataset([s for s in self.samples if s.class_label in keep])


@dataclass
class Episode:
    """N-way K-shot support/query split with per-episode class indices."""

    n_way: int
    k_shot: int
    q_query: int
    class_labels: list[str]  # index order: class_labels[i] has class index i
    support: list[tuple[Sample, int]]
    query: list[tuple[Sample, int]]
    seed: int

    def validate(self):
        sup_ids = {s.id for s, _ in self.support}
        qry_ids = {s.id for s, _ in self.query}
        if sup_ids & qry_ids:
            raise ValidationError("support and query sets overlap")
        for pool, count in ((self.support, self.k_shot), (self.query, self.q_query)):
            per = {}
            for s, ci in pool:
                per[ci] = per.get(ci, 0) + 1
                if s.class_label != self.class_labels[ci]:
                    raise ValidationError("class index does not match label")
            if any(per.get(i, 0) != count for i in range(self.n_way)):
                raise ValidationError("per-class support/query counts are uneven")

    def to_record(self) -> dict:
        return {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "q_query": self.q_query,
            "class_labels": self.class_labels,
            "support": [{"id": s.id, "class_index": ci} for s, ci in self.support],
            "query": [{"id": s.id, "class_index": ci} for s, ci in self.query],
            "seed": self.seed,
        }


@dataclass
class PromptTemplate:
    """Instructional pattern with {MEDIA}/{LABEL}/{OPTIONS}/{DESCRIPTION} slots."""

    id: str
    pattern: str
    task_kind: str  # classification | generation

    def __post_init__(self):
        if self.task_kind not in ("classification", "generation"):
            raise TemplateError(f"template {self.id}: bad task_kind {self.task_kind!r}")
        if self.task_kind == "classification":
            if "{MEDIA}" not in self.pattern or "{OPTIONS}" not in self.pattern:
                raise TemplateError(
                    f"template {self.id}: classification patterns need {{MEDIA}} and {{OPTIONS}}"
                )
        elif "{MEDIA}" not in self.pattern:
            raise TemplateError(f"template {self.id}: generation patterns need {{MEDIA}}")


CLASSIFICATION_TEMPLATES = [
    PromptTemplate("cls-basic", "Classify {MEDIA} as one of {OPTIONS}.", "classification"),
    PromptTemplate("cls-choose", "Given the input {MEDIA}, choose the correct category from: {OPTIONS}.", "classification"),
    PromptTemplate("cls-which", "{MEDIA} Which class fits best? Options: {OPTIONS}.", "classification"),
    PromptTemplate("cls-pick", "Look at {MEDIA} and pick its label among {OPTIONS}.", "classification"),
    PromptTemplate("cls-task", "Task: identify the sample {MEDIA}. Candidates: {OPTIONS}.", "classification"),
    PromptTemplate("cls-name", "From the options {OPTIONS}, name the class shown in {MEDIA}.", "classification"),
]

GENERATION_TEMPLATES = [
    PromptTemplate("gen-describe", "Describe {MEDIA} in detail.", "generation"),
    PromptTemplate("gen-longform", "Provide a long-form description of {MEDIA}.", "generation"),
]

# Uses {DESCRIPTION} in the prompt body; requires the sample to carry one.
CONTEXT_TEMPLATE = PromptTemplate(
    "gen-context", "Context: {DESCRIPTION} Expand on what {MEDIA} shows.", "generation"
)

TEMPLATE_BANK = CLASSIFICATION_TEMPLATES + GENERATION_TEMPLATES + [CONTEXT_TEMPLATE]


def render_prompt(template: PromptTemplate, sample: Sample, options: Optional[list[str]] = None):
    """Substitute placeholders; returns (text, media marker char positions).

    Options must be given in episode class-index order; they render as a
    comma-separated list in exactly that order.
    """
    text = template.pattern
    if "{OPTIONS}" in text:
        if not options:
            raise TemplateError(f"template {template.id}: options required")
        text = text.replace("{OPTIONS}", ", ".join(options))
    if "{LABEL}" in text:
        text = text.replace("{LABEL}", sample.class_label)
    if "{DESCRIPTION}" in text:
        if not sample.description:
            raise TemplateError(
                f"template {template.id}: sample {sample.id} lacks the required description"
            )
        text = text.replace("{DESCRIPTION}", sample.description)
    text = text.replace("{MEDIA}", MEDIA_MARKER)
    leftover = _find_placeholder(text)
    if leftover:
        raise TemplateError(f"template {template.id}: unresolved placeholder {leftover}")
    positions = []
    start = 0
    while True:
        i = text.find(MEDIA_MARKER, start)
        if i < 0:
            break
        positions.append(i)
        start = i + len(MEDIA_MARKER)
    return text, positions


def _find_placeholder(text: str) -> Optional[str]:
    i = text.find("{")
    while i >= 0:
        j = text.find("}", i)
        if j > i and text[i + 1 : j].isupper():
            return text[i : j + 1]
        i = text.find("{", i + 1)
    return None


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class GeneratorSpec:
    """Parameters for the synthetic few-shot corpus.

    class_separation scales the class-prototype signal against unit noise;
    0 gives chance-level classes, 5 gives a cleanly separable suite.
    """

    modalities: list[str]
    classes_per_modality: int
    samples_per_class: int
    class_separation: float
    seed: int
    image_hw: tuple = (16, 16)
    volume_dhw: tuple = (8, 16, 16)
    table_shape: tuple = (6, 8)  # rows x features
    timecourse_shape: tuple = (12, 4)  # timepoints x features
    description_fraction: float = 0.1
    label_prefix: str = ""

    def validate(self):
        if not 1 <= self.samples_per_class <= 10:
            raise ValidationError(
                f"samples_per_class must be in [1, 10], got {self.samples_per_class}"
            )
        if self.class_separation < 0:
            raise ValidationError("class_separation must be >= 0")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ValidationError(f"unknown modality {m!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValidationError(f"unknown generator spec keys: {sorted(unknown)}")
        spec = cls(**{k: tuple(v) if k.endswith(("_hw", "_dhw", "_shape")) else v for k, v in d.items()})
        spec.validate()
        return spec


_MODALITY_SHORT = {
    "image2d_gray": "img",
    "image2d_rgb": "rgb",
    "volume3d": "vol",
    "tabular": "tab",
    "timecourse": "tcr",
}

_DESCRIPTION_MOTIFS = [
    "a broad central mass with a soft rim",
    "two compact clusters near opposing corners",
    "a slow drift overlaid with a sharp burst",
    "uniformly spread texture with faint banding",
    "one dominant peak flanked by shallow ridges",
]


def _smooth_field(rng: np.random.Generator, shape) -> np.ndarray:
    """Unit-variance smooth random field: a few superposed gaussian bumps."""
    coords = np.meshgrid(*[np.linspace(0.0, 1.0, n) for n in shape], indexing="ij")
    field = np.zeros(shape)
    for _ in range(4):
        center = rng.uniform(0.15, 0.85, len(shape))
        width = rng.uniform(0.08, 0.3)
        amp = rng.uniform(-1.0, 1.0)
        d2 = sum((c - mu) ** 2 for c, mu in zip(coords, center))
        field += amp * np.exp(-d2 / (2 * width**2))
    field -= field.mean()
    std = field.std()
    return field / (std if std > 1e-8 else 1.0)


def _render_visual(proto: np.ndarray, noise: np.ndarray, separation: float) -> np.ndarray:
    mix = (separation * proto + noise) / (separation + 1.0)
    return np.clip(0.5 + 0.45 * mix, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: GeneratorSpec) -> Dataset:
    """Build a deterministic dataset with class-specific latent prototypes.

    Images/volumes draw per-class smooth blob motifs, tables per-class column
    means, timecourses per-class frequency/phase patterns; samples add unit
    within-class noise scaled against class_separation.
    """
    spec.validate()
    samples = []
    for modality in spec.modalities:
        short = _MODALITY_SHORT[modality]
        for c in range(spec.classes_per_modality):
            label = f"{spec.label_prefix}{short}{c:02d}"
            crng = substream(spec.seed, "proto", modality, c)
            if modality in ("image2d_gray", "image2d_rgb"):
                channels = 1 if modality == "image2d_gray" else 3
                shape = (*spec.image_hw, channels)
                proto = np.stack([_smooth_field(crng, spec.image_hw) for _ in range(channels)], axis=-1)
            elif modality == "volume3d":
                shape = (*spec.volume_dhw, 1)
                proto = _smooth_field(crng, spec.volume_dhw)[..., None]
            elif modality == "tabular":
                shape = spec.table_shape
                direction = crng.normal(size=shape[1])
                direction /= np.linalg.norm(direction)
                proto = direction  # per-class column means
            else:  # timecourse
                t_steps, feats = spec.timecourse_shape
                shape = spec.timecourse_shape
                freqs = crng.uniform(0.5, 3.0, feats)
                phases = crng.uniform(0.0, 2 * np.pi, feats)
                t = np.arange(t_steps)[:, None] / t_steps
                proto = np.sin(2 * np.pi * freqs[None, :] * t + phases[None, :])
            described = crng.random(spec.samples_per_class) < spec.description_fraction
            motif = _DESCRIPTION_MOTIFS[int(crng.integers(len(_DESCRIPTION_MOTIFS)))]
            for k in range(spec.samples_per_class):
                srng = substream(spec.seed, "sample", modality, c, k)
                sid = f"{label}-s{k}"
                description = None
                if described[k]:
                    description = f"A {modality.replace('_', ' ')} sample of class {label} showing {motif}."
                if modality in ("image2d_gray", "image2d_rgb", "volume3d"):
                    noise_axes = shape[:-1]
                    noise = np.stack(
                        [_smooth_field(srng, noise_axes) for _ in range(shape[-1])], axis=-1
                    )
                    payload = _render_visual(proto, noise, spec.class_separation)
                    sample = Sample(sid, modality, label, payload, description,
                                    meta={"source": "synthetic", "scenario": f"class-{c}"})
                elif modality == "tabular":
                    rows = spec.class_separation * proto[None, :] + srng.normal(size=shape)
                    payload = (rows / (spec.class_separation + 1.0)).astype(np.float32)
                    cols = [f"f{j}" for j in range(shape[1])]
                    sample = Sample(sid, modality, label, payload, description, columns=cols,
                                    meta={"source": "synthetic", "scenario": f"class-{c}"})
                else:
                    series = spec.class_separation * proto + srng.normal(size=shape)
                    payload = (series / (spec.class_separation + 1.0)).astype(np.float32)
                    stamps = np.arange(shape[0], dtype=np.float32)
                    sample = Sample(sid, modality, label, payload, description, timestamps=stamps,
                                    meta={"source": "synthetic", "scenario": f"class-{c}"})
                sample.validate()
                samples.append(sample)
    return Dataset(samples)


# ---------------------------------------------------------------------------
# episode sampling


def sample_episode(ds: Dataset, n_way: int, k_shot: int, q_query: int, seed: int) -> Episode:
    """Uniform class choice, then uniform without-replacement support/query split."""
    need = k_shot + q_query
    eligible = [lb for lb in ds.classes if len(ds.class_index[lb]) >= need]
    if len(eligible) < n_way:
        short = [lb for lb in ds.classes if len(ds.class_index[lb]) < need]
        worst = min(short, key=lambda lb: len(ds.class_index[lb])) if short else "<none>"
        raise EpisodeError(
            f"need {n_way} classes with >= {need} samples, have {len(eligible)} "
            f"(deficient class: {worst} with {len(ds.class_index.get(worst, []))})"
        )
    rng = substream(seed, "episode")
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=n_way, replace=False)]
    support, query = [], []
    for ci, label in enumerate(chosen):
        ids = ds.class_index[label]
        picked = [ids[i] for i in rng.choice(len(ids), size=need, replace=False)]
        support.extend((ds.by_id[sid], ci) for sid in picked[:k_shot])
        query.extend((ds.by_id[sid], ci) for sid in picked[k_shot:])
    ep = Episode(n_way, k_shot, q_query, chosen, support, query, seed)
    ep.validate()
    return ep


# ---------------------------------------------------------------------------
# augmentation (comparison-arm input jitter)


def augment_payload(sample: Sample, rng: np.random.Generator) -> np.ndarray:
    """Standard jitter per modality: flip+noise for visuals, column jitter for
    tables, +-1-step time warp for timecourses."""
    p = sample.payload
    if sample.modality in ("image2d_gray", "image2d_rgb", "volume3d"):
        out = p.copy()
        if rng.random() < 0.5:
            out = np.flip(out, axis=-2).copy()  # horizontal axis is next-to-channel
        out += rng.normal(0.0, 0.02, out.shape).astype(np.float32)
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    if sample.modality == "tabular":
        scale = p.std(axis=0, keepdims=True) + 1e-6
        return (p + rng.normal(0.0, 0.02, p.shape) * scale).astype(np.float32)
    shift = int(rng.integers(-1, 2))
    return np.roll(p, shift, axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# record file IO

_PAYLOAD_DIR = "payloads"
_RECORDS_FILE = "records.jsonl"


def write_records(ds: Dataset, path) -> None:
    """Write a dataset directory: records.jsonl plus payload sidecars."""
    root = Path(path)
    (root / _PAYLOAD_DIR).mkdir(parents=True, exist_ok=True)
    with open(root / _RECORDS_FILE, "w", encoding="utf-8") as f:
        for s in ds.samples:
            rec = {"id": s.id, "modality": s.modality, "class_label": s.class_label, "meta": s.meta}
            if s.description is not None:
                rec["description"] = s.description
            if s.modality == "tabular":
                rec["columns"] = s.columns
                rec["rows"] = [[float(v) for v in row] for row in s.payload]
            else:
                rel = f"{_PAYLOAD_DIR}/{s.id}.m3ft"
                write_tensor(root / rel, s.payload)
                rec["payload_path"] = rel
                if s.modality == "timecourse":
                    rec["timestamps"] = [float(t) for t in s.timestamps]
            f.write(json.dumps(rec) + "\n")


_RECORD_KEYS = {"id", "modality", "class_label", "meta", "description",
                "columns", "rows", "payload_path", "timestamps"}


def read_records(path) -> Dataset:
    """Read a dataset directory written by write_records; bit-exact round trip."""
    root = Path(path)
    rec_path = root / _RECORDS_FILE
    if not rec_path.exists():
        raise RecordParseError(f"{rec_path} not found")
    samples = []
    with open(rec_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordParseError(f"{rec_path}:{lineno}: {e}") from None
            unknown = set(rec) - _RECORD_KEYS
            if unknown:
                raise RecordParseError(f"{rec_path}:{lineno}: unknown keys {sorted(unknown)}")
            try:
                samples.append(_sample_from_record(rec, root))
            except OSError as e:
                raise RecordParseError(f"{rec_path}:{lineno}: {e}") from None
            except (KeyError, ValidationError, ValueError) as e:
                raise type(e)(f"{rec_path}:{lineno}: {e}") from None
    return Dataset(samples)


def _sample_from_record(rec: dict, root: Path) -> Sample:
    modality = rec["modality"]
    columns = None
    timestamps = None
    if modality == "tabular":
        if "rows" not in rec or "columns" not in rec:
            raise ValidationError(f"record {rec.get('id')}: tabular records need columns+rows")
        payload = np.asarray(rec["rows"], dtype=np.float32)
        columns = list(rec["columns"])
    else:
        if "payload_path" not in rec:
            raise ValidationError(f"record {rec.get('id')}: missing payload_path")
        payload = read_tensor(root / rec["payload_path"])
        if modality == "timecourse":
            timestamps = np.asarray(rec.get("timestamps", []), dtype=np.float32)
    s = Sample(
        id=rec["id"],
        modality=modality,
        class_label=rec["class_label"],
        payload=payload,
        description=rec.get("description"),
        columns=columns,
        timestamps=timestamps,
        meta=dict(rec.get("meta", {})),
    )
    s.validate()
    return s
