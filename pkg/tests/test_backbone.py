"""Backbone construction, multi-scale extraction vs a straight-line oracle,
attention-off equivalence, and weight-file round trips."""

from dataclasses import replace

import numpy as np
import pytest

import anomflow.backbone as B
from anomflow.attention import CBAMParams, SEParams
from anomflow.errors import ConfigError, FormatError, InputError
from anomflow.weights import read_weights, write_weights

from oracles import ref_bilinear_resize, ref_cbam, ref_se

F32 = np.float32


def small_spec(attention="none", scales=(32, 16), top=16):
    return B.default_spec(attention, scales=scales, top_channels=top)


def saturated_variant(bb: B.Backbone, kind: str) -> B.Backbone:
    """Same conv weights, attention of the given kind pinned fully open."""
    stages = tuple(replace(st, attention=kind) for st in bb.spec.stages)
    spec = B.BackboneSpec(stages=stages, scales=bb.spec.scales,
                          top_channels=bb.spec.top_channels)
    attn = []
    for st in stages:
        c = st.conv.out_channels
        attn.append(SEParams.saturated(c) if kind == "se"
                    else CBAMParams.saturated(c))
    return B.Backbone(spec=spec, kernels=[k.copy() for k in bb.kernels],
                      biases=[b.copy() for b in bb.biases], attention=attn)


# ---------------------------------------------------------------------------
# construction


def test_same_seed_is_bitwise_identical():
    spec = small_spec("cbam")
    a = B.build_backbone(spec, seed=42)
    b = B.build_backbone(spec, seed=42)
    for (na, pa), (nb, pb) in zip(a.named_params(), b.named_params()):
        assert na == nb
        np.testing.assert_array_equal(pa, pb)


def test_attention_free_parameter_count():
    bb = B.build_backbone(small_spec("none"), seed=0)
    total = sum(p.size for _, p in bb.named_params())
    expect = 0
    c_in = 3
    for st in bb.spec.stages:
        c = st.conv
        expect += c.out_channels * c_in * c.kernel_h * c.kernel_w + c.out_channels
        c_in = c.out_channels
    assert total == expect


def test_default_spec_feature_dim_is_384():
    spec = B.default_spec("se")
    assert spec.feature_dim == 384
    assert [st.conv.out_channels for st in spec.stages] == [32, 48, 64, 96, 128]


def test_spec_validation():
    with pytest.raises(ConfigError):
        B.BackboneSpec(stages=(), scales=(64,), top_channels=8)
    with pytest.raises(ConfigError):
        B.default_spec("none", scales=(64, 64))
    with pytest.raises(ConfigError):
        B.default_spec("none", scales=(32, 64))


def test_gates_start_neutral():
    bb = B.build_backbone(small_spec("se"), seed=1)
    x = np.random.default_rng(0).random((3, 32, 32), dtype=F32)
    plain = B.Backbone(spec=small_spec("none"),
                       kernels=[k.copy() for k in bb.kernels],
                       biases=[b.copy() for b in bb.biases],
                       attention=[None] * 5)
    # zero-logit init: every SE stage halves its map
    got = B.extract_features(bb, x)
    want = B.extract_features(plain, x)
    np.testing.assert_allclose(got * 2.0 ** 5, want, rtol=1e-4)


# ---------------------------------------------------------------------------
# extraction


def test_feature_dim_constant_across_inputs():
    bb = B.build_backbone(small_spec("se"), seed=2)
    rng = np.random.default_rng(1)
    for h, w in [(32, 32), (48, 40), (64, 64)]:
        f = B.extract_features(bb, rng.random((3, h, w), dtype=F32))
        assert f.shape == (bb.spec.feature_dim,)


def test_image_smaller_than_largest_scale_rejected():
    bb = B.build_backbone(small_spec(), seed=3)
    with pytest.raises(InputError):
        B.extract_features(bb, np.zeros((3, 16, 16), dtype=F32))


def test_constant_gray_image_is_deterministic():
    bb = B.build_backbone(small_spec("cbam"), seed=4)
    x = np.full((3, 32, 32), 0.5, dtype=F32)
    f1 = B.extract_features(bb, x)
    f2 = B.extract_features(bb, x)
    np.testing.assert_array_equal(f1, f2)
    assert np.all(np.isfinite(f1))


@pytest.mark.parametrize("kind", ["se", "cbam"])
def test_saturated_gates_match_attention_free(kind):
    bb0 = B.build_backbone(small_spec("none"), seed=5)
    bb1 = saturated_variant(bb0, kind)
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.random((3, 32, 32), dtype=F32)
        f0 = B.extract_features(bb0, x)
        f1 = B.extract_features(bb1, x)
        np.testing.assert_allclose(f1, f0, atol=1e-5)


def straightline_features(bb: B.Backbone, image: np.ndarray) -> np.ndarray:
    """Independent reimplementation: per-pixel loops, float64, no batching."""
    feats = []
    for s in bb.spec.scales:
        x = ref_bilinear_resize(image, s, s)
        for i, st in enumerate(bb.spec.stages):
            x = _px_conv(x, bb.kernels[i], bb.biases[i], st.conv)
            x = np.maximum(x, 0.0)
            if st.pool is not None:
                x = _px_pool(x, st.pool.window, st.pool.stride)
            p = bb.attention[i]
            if st.attention == "se":
                x = ref_se(x, p.W1, p.b1, p.W2, p.b2)
            elif st.attention == "cbam":
                x = ref_cbam(x, p.W1, p.W2, p.spatial_kernel, p.spatial_bias)
        feats.append(x.mean(axis=(1, 2)))
    return np.concatenate(feats)


def _px_conv(x, kernel, bias, spec):
    c, h, w = x.shape
    p = spec.padding
    xp = np.zeros((c, h + 2 * p, w + 2 * p))
    xp[:, p:p + h, p:p + w] = x
    oh = (h + 2 * p - spec.kernel_h) // spec.stride + 1
    ow = (w + 2 * p - spec.kernel_w) // spec.stride + 1
    wmat = kernel.astype(np.float64).reshape(spec.out_channels, -1)
    b = bias.astype(np.float64)
    out = np.zeros((spec.out_channels, oh, ow))
    for oy in range(oh):
        for ox in range(ow):
            patch = xp[:, oy * spec.stride:oy * spec.stride + spec.kernel_h,
                       ox * spec.stride:ox * spec.stride + spec.kernel_w]
            out[:, oy, ox] = wmat @ patch.ravel() + b
    return out


def _px_pool(x, window, stride):
    c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((c, oh, ow))
    for oy in range(oh):
        for ox in range(ow):
            win = x[:, oy * stride:oy * stride + window,
                    ox * stride:ox * stride + window]
            out[:, oy, ox] = win.reshape(c, -1).max(axis=1)
    return out


def test_extract_matches_straightline_oracle_default_spec():
    bb = B.build_backbone(B.default_spec("se"), seed=6)
    rng = np.random.default_rng(3)
    image = rng.random((3, 256, 256), dtype=F32)
    got = B.extract_features(bb, image)
    want = straightline_features(bb, image)
    np.testing.assert_allclose(got, want, atol=1e-5)


@pytest.mark.parametrize("kind", ["none", "cbam"])
def test_extract_matches_straightline_oracle_small(kind):
    bb = B.build_backbone(small_spec(kind), seed=7)
    rng = np.random.default_rng(4)
    image = rng.random((3, 40, 40), dtype=F32)
    got = B.extract_features(bb, image)
    want = straightline_features(bb, image)
    np.testing.assert_allclose(got, want, atol=1e-5)


# ---------------------------------------------------------------------------
# weight files


def test_weight_round_trip_is_bitwise(tmp_path):
    bb = B.build_backbone(small_spec("cbam"), seed=8)
    path = tmp_path / "bb.adwt"
    B.export_weights(bb, path)
    other = B.build_backbone(small_spec("cbam"), seed=9)
    loaded = B.import_weights(other, path)
    for (_, a), (_, b) in zip(bb.named_params(), loaded.named_params()):
        np.testing.assert_array_equal(a, b)


def test_truncated_weight_file_errors_without_mutation(tmp_path):
    bb = B.build_backbone(small_spec("se"), seed=10)
    path = tmp_path / "bb.adwt"
    B.export_weights(bb, path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    other = B.build_backbone(small_spec("se"), seed=11)
    before = [p.copy() for _, p in other.named_params()]
    with pytest.raises(FormatError, match="truncated"):
        B.import_weights(other, path)
    for (_, p), saved in zip(other.named_params(), before):
        np.testing.assert_array_equal(p, saved)


def test_channel_mismatch_names_stage(tmp_path):
    bb = B.build_backbone(small_spec("se"), seed=12)
    path = tmp_path / "bb.adwt"
    B.export_weights(bb, path)
    records = read_weights(path)
    records["stage3.se.W1"] = np.zeros((2, 99), dtype=F32)
    write_weights(path, list(records.items()))
    with pytest.raises(FormatError, match="stage3"):
        B.import_weights(bb, path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.adwt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        read_weights(path)


def test_extra_records_are_ignored(tmp_path):
    bb = B.build_backbone(small_spec("none"), seed=13)
    path = tmp_path / "bb.adwt"
    records = bb.named_params() + [("flow.block0.perm",
                                    np.arange(4, dtype=np.uint32))]
    write_weights(path, records)
    loaded = B.import_weights(bb, path)
    for (_, a), (_, b) in zip(bb.named_params(), loaded.named_params()):
        np.testing.assert_array_equal(a, b)