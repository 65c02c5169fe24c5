import numpy as np
import pytest

from m3f.data import Sample
from m3f.encoders import patchify_2d, patchify_3d, sincos_positions
from m3f.masking import MaskSpec
from m3f.tensor import Tape, Tensor, UsageError, backward

from helpers import mixed_dataset, small_model, to_float64
from oracles import gradcheck


def gray_sample(seed=0, hw=(16, 16)):
    rng = np.random.default_rng(seed)
    return Sample("img", "image2d_gray", "c0",
                  rng.random((*hw, 1)).astype(np.float32))


def test_image_patch_count():
    model = small_model()
    out = model.encoders.encode_image2d(gray_sample())
    assert out.shape == (4, model.enc_cfg.d_enc)


def test_masked_image_keeps_original_positional_codes():
    model = small_model()
    s = gray_sample(1)
    full = model.encoders.encode_image2d(s)
    spec = MaskSpec("image2d_gray", 0.5, 7)
    masked = model.encoders.encode_image2d(s, spec)
    assert masked.shape[0] == 2
    # surviving rows must match the unmasked run bitwise at their grid slots
    patches, _ = patchify_2d(s.payload, model.enc_cfg.patch)
    from m3f.masking import mask_image

    idx = mask_image(patches, spec, s.id).visible_payload["patch_indices"]
    assert np.array_equal(masked.data, full.data[idx])


def test_distinct_images_distinct_embeddings():
    model = small_model()
    a = model.encoders.encode_image2d(gray_sample(2))
    b = model.encoders.encode_image2d(gray_sample(3))
    assert not np.array_equal(a.data, b.data)


def test_rgb_channels_handled():
    rng = np.random.default_rng(0)
    s = Sample("rgb", "image2d_rgb", "c0", rng.random((16, 16, 3)).astype(np.float32))
    model = small_model()
    out = model.encoders.encode_image2d(s)
    assert out.shape == (4, model.enc_cfg.d_enc)


def test_resize_on_ingest_makes_divisible():
    rng = np.random.default_rng(0)
    s = Sample("odd", "image2d_gray", "c0", rng.random((18, 23, 1)).astype(np.float32))
    model = small_model()
    out = model.encoders.encode_image2d(s)  # resized to 16x24 -> 2x3 grid
    assert out.shape[0] == 6


def test_volume_tubelet_count():
    rng = np.random.default_rng(0)
    s = Sample("vol", "volume3d", "c0", rng.random((8, 16, 16, 1)).astype(np.float32))
    model = small_model()
    out = model.encoders.encode_volume3d(s)
    assert out.shape == (4, model.enc_cfg.d_enc)


def test_volume_tubelet_permutation_permutes_content():
    model = small_model()
    rng = np.random.default_rng(4)
    patches, _ = patchify_3d(rng.random((8, 16, 16, 1)).astype(np.float32), 8)
    swapped = patches[[1, 0, 2, 3]]
    a = model.encoders.patch_content("volume3d", patches).data
    b = model.encoders.patch_content("volume3d", swapped).data
    assert np.array_equal(a[[1, 0, 2, 3]], b)


def test_constant_volume_content_embeddings_equal():
    model = small_model()
    s = Sample("zvol", "volume3d", "c0", np.zeros((8, 16, 16, 1), dtype=np.float32))
    patches, _ = patchify_3d(s.payload, 8)
    content = model.encoders.patch_content("volume3d", patches).data
    assert np.allclose(content, content[0])
    full = model.encoders.encode_volume3d(s).data
    assert not np.allclose(full, full[0])  # positional codes differ


def tabular_sample(seed=0, shape=(5, 4), sid="tab"):
    rng = np.random.default_rng(seed)
    return Sample(sid, "tabular", "c0", rng.normal(size=shape).astype(np.float32),
                  columns=[f"f{i}" for i in range(shape[1])])


def test_tabular_summary_deterministic():
    model = small_model()
    s = tabular_sample()
    a = model.encoders.encode_tabular(s)
    b = model.encoders.encode_tabular(s)
    assert np.array_equal(a.data, b.data)
    assert a.shape == (1, model.enc_cfg.d_enc)


def test_tabular_fully_masked_differs():
    model = small_model()
    s = tabular_sample(1)
    plain = model.encoders.encode_tabular(s)
    masked = model.encoders.encode_tabular(s, MaskSpec("tabular", 1.0, 0))
    assert not np.allclose(plain.data, masked.data)


def test_tabular_row_permutation_invariance():
    model = small_model()
    s = tabular_sample(2)
    perm = np.random.default_rng(0).permutation(s.payload.shape[0])
    permuted = Sample("tab2", "tabular", "c0", s.payload[perm].copy(), columns=s.columns)
    a = model.encoders.encode_tabular(s).data
    b = model.encoders.encode_tabular(permuted).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def timecourse_sample(seed=0, shape=(6, 3), sid="tc"):
    rng = np.random.default_rng(seed)
    return Sample(sid, "timecourse", "c0", rng.normal(size=shape).astype(np.float32),
                  timestamps=np.arange(shape[0], dtype=np.float32))


def test_timecourse_counts():
    model = small_model()
    out = model.encoders.encode_timecourse(timecourse_sample())
    assert out.shape == (6, model.enc_cfg.d_enc)


def test_masked_timepoint_emits_mask_vector_plus_position():
    model = small_model()
    s = timecourse_sample(1, shape=(8, 3))
    spec = MaskSpec("timecourse", 0.5, 3)
    out = model.encoders.encode_timecourse(s, spec)
    from m3f.masking import mask_timecourse

    masked_t = mask_timecourse(s.payload, spec, s.id).visible_payload["masked_timepoints"]
    assert len(masked_t) == 4
    maskvec = model.params["encoders.timecourse.maskvec"].data[0]
    pos = sincos_positions([np.arange(8)], model.enc_cfg.d_enc)
    for t in masked_t:
        np.testing.assert_allclose(out.data[t], maskvec + pos[t], atol=1e-7)


def test_time_reversed_series_differs():
    model = small_model()
    s = timecourse_sample(2)
    rev = Sample("tcr", "timecourse", "c0", s.payload[::-1].copy(), timestamps=s.timestamps)
    a = model.encoders.encode_timecourse(s).data
    b = model.encoders.encode_timecourse(rev).data
    assert not np.allclose(a, b)


# -- routing ----------------------------------------------------------------


def test_routing_tabular_single_token():
    model = small_model()
    mt = model.media_tokens(tabular_sample())
    assert mt.tokens.shape[0] == 1
    assert mt.provenance == "special_only"


def test_routing_image_counts():
    model = small_model()
    mt = model.media_tokens(gray_sample())
    assert mt.tokens.shape[0] == 5  # special + 4 patches
    assert mt.provenance == "special_plus_visible"
    mt2 = model.media_tokens(gray_sample(), MaskSpec("image2d_gray", 1.0, 0))
    assert mt2.tokens.shape[0] == 1
    assert mt2.provenance == "special_only"
    assert np.array_equal(mt2.tokens.data, model.params["special.image2d_gray"].data)


def test_routing_law_over_random_masked_samples():
    model = small_model()
    ds = mixed_dataset(seed=5)
    rng = np.random.default_rng(0)
    from m3f.masking import mask_image, round_half_up

    checked = 0
    for i in range(100):
        s = ds.samples[int(rng.integers(len(ds.samples)))]
        ratio = float(rng.choice([0.0, 0.05, 0.25, 0.5, 1.0]))
        spec = MaskSpec(s.modality, ratio, int(rng.integers(10_000)))
        mt = model.media_tokens(s, spec)
        if s.modality == "tabular":
            assert mt.tokens.shape[0] == 1
        elif s.modality == "timecourse":
            assert mt.tokens.shape[0] == 1 + s.payload.shape[0]
        else:
            if s.modality == "volume3d":
                units = np.prod([d // 8 for d in s.payload.shape[:3]])
            else:
                units = np.prod([d // 8 for d in s.payload.shape[:2]])
            visible = units - round_half_up(ratio * units)
            assert mt.tokens.shape[0] == 1 + visible
        checked += 1
    assert checked == 100


def test_projector_rejects_modality_mismatch():
    model = small_model()
    fake = Tensor(np.zeros((3, model.enc_cfg.d_enc), dtype=np.float32))
    with pytest.raises(UsageError):
        model.encoders.project(fake, "tabular")
    with pytest.raises(UsageError):
        model.encoders.project(fake, "hologram")


# -- gradients ----------------------------------------------------------------


def test_gradients_reach_every_encoder_param_and_special():
    model = small_model()
    ds = mixed_dataset(seed=6)
    picks = {}
    for s in ds.samples:
        picks.setdefault(s.modality, s)
    with Tape() as tape:
        loss = None
        for modality, s in sorted(picks.items()):
            spec = MaskSpec(modality, 0.5, 11)
            mt = model.media_tokens(s, spec)
            term = (mt.tokens * mt.tokens).sum()
            loss = term if loss is None else loss + term
    backward(loss, tape)
    missing = [
        name
        for name, t in model.params.items()
        if (name.startswith(("encoders.", "special.", "projector.")))
        and (t.grad is None or not np.any(t.grad))
    ]
    assert not missing, f"no gradient reached: {missing}"


def test_encoder_projector_composite_gradcheck():
    model = to_float64(small_model(d_enc=8, d_model=8, patch=8))
    s = tabular_sample(3, shape=(3, 3))
    tracked = [model.params[n] for n in model.params.names()
               if n.startswith(("encoders.tabular", "projector", "special.tabular"))]

    def fn():
        mt = model.media_tokens(s, MaskSpec("tabular", 0.25, 1))
        return (mt.tokens * mt.tokens).sum()

    assert gradcheck(fn, tracked) < 1e-4


def test_timecourse_composite_gradcheck():
    model = to_float64(small_model(d_enc=8, d_model=8))
    s = timecourse_sample(4, shape=(4, 2))
    tracked = [model.params[n] for n in model.params.names()
               if n.startswith("encoders.timecourse")]

    def fn():
        mt = model.media_tokens(s, MaskSpec("timecourse", 0.5, 2))
        return (mt.tokens * mt.tokens).sum()

    assert gradcheck(fn, tracked) < 1e-4
