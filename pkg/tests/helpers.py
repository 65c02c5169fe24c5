"""Shared model fixtures for the test suite."""

import numpy as np

from m3f.data import GeneratorSpec, generate_synthetic
from m3f.decoder import DecoderConfig
from m3f.encoders import EncoderConfig
from m3f.model import M3FModel

SMALL_ENC = dict(d_enc=32, d_model=32, patch=8, tubelet=8)
SMALL_DEC = dict(d_model=32, heads=2, layers=2, context=192)


def small_model(seed=0, **overrides) -> M3FModel:
    enc = {**SMALL_ENC, **{k: v for k, v in overrides.items() if k in EncoderConfig.__dataclass_fields__}}
    dec = {**SMALL_DEC, **{k: v for k, v in overrides.items() if k in DecoderConfig.__dataclass_fields__ and k != "d_model"}}
    dec["d_model"] = enc["d_model"]
    return M3FModel(EncoderConfig(**enc), DecoderConfig(**dec), seed=seed)


def to_float64(model: M3FModel) -> M3FModel:
    """Cast every parameter to float64 so finite differences are clean."""
    for _, t in model.params.items():
        t.data = t.data.astype(np.float64)
    return model


def mixed_dataset(seed=0, classes=2, per_class=3, separation=2.0, description_fraction=0.5):
    spec = GeneratorSpec(
        modalities=["image2d_gray", "image2d_rgb", "volume3d", "tabular", "timecourse"],
        classes_per_modality=classes,
        samples_per_class=per_class,
        class_separation=separation,
        seed=seed,
        description_fraction=description_fraction,
    )
    return generate_synthetic(spec)
