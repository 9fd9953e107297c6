"""Segmenter initialization, prediction and the checkpoint format."""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfdalab import network as nw


class TestInit:
    def test_deterministic(self):
        assert nw.init(2, 0).to_bytes() == nw.init(2, 0).to_bytes()
        assert nw.init(2, 0).to_bytes() != nw.init(2, 1).to_bytes()

    def test_biases_zero(self):
        assert all(not b.any() for b in nw.init(3, 4).biases)

    def test_bounds(self):
        p = nw.init(2, 0)
        assert np.abs(p.kernels[0]).max() <= np.sqrt(6 / 9)
        assert np.sqrt(6 / 9) == pytest.approx(0.8165, abs=1e-4)
        assert np.abs(p.kernels[1]).max() <= np.sqrt(6 / 72)

    def test_channel_chain(self):
        p = nw.init(4, 0, widths=(5, 6, 7))
        shapes = [k.shape for k in p.kernels]
        assert shapes == [(5, 1, 3, 3), (6, 5, 3, 3), (7, 6, 3, 3), (4, 7, 3, 3)]

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            nw.init(1)


class TestPredict:
    def test_zero_params_uniform(self):
        p = nw.init(3, 0)
        p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
        out = nw.predict(p, np.random.default_rng(0).random((1, 6, 6)))
        np.testing.assert_allclose(out, 1 / 3, atol=1e-15)

    def test_shape_and_simplex(self):
        out = nw.predict(nw.init(2, 5), np.random.default_rng(5).random((1, 64, 64)))
        assert out.shape == (2, 64, 64)
        assert np.abs(out.sum(axis=0) - 1).max() < 1e-9
        assert (out > 0).all() and (out < 1).all()

    def test_non_finite_image(self):
        with pytest.raises(ValueError):
            nw.predict(nw.init(2, 0), np.full((1, 4, 4), np.nan))

    def test_segment_is_argmax(self):
        p, img = nw.init(3, 2), np.random.default_rng(2).random((1, 8, 8))
        np.testing.assert_array_equal(nw.segment(p, img), np.argmax(nw.predict(p, img), axis=0))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000), st.integers(-3, 3), st.integers(-3, 3))
    def test_translation_covariance_in_interior(self, seed, dy, dx):
        rng = np.random.default_rng(seed)
        params = nw.init(2, seed)
        params = params.with_arrays([a if a.ndim > 1 else rng.normal(size=a.shape)
                                     for a in params.arrays()])
        img = rng.random((1, 20, 20))
        layers = nw.constant_layers(params)
        base = nw.logits(layers, img).data
        shifted = nw.logits(layers, np.roll(img, (dy, dx), axis=(1, 2))).data
        lo, hi = 3 + 3, 20 - 3 - 3  # stay 3 px from the border in both frames
        np.testing.assert_allclose(shifted[:, lo + dy:hi + dy, lo + dx:hi + dx],
                                   base[:, lo:hi, lo:hi], atol=1e-12)


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path):
        p = nw.init(3, 7, widths=(4, 5))
        nw.save(p, tmp_path / "m.sfda")
        q = nw.load(tmp_path / "m.sfda")
        assert q.to_bytes() == p.to_bytes()
        nw.save(q, tmp_path / "again.sfda")
        assert (tmp_path / "m.sfda").read_bytes() == (tmp_path / "again.sfda").read_bytes()

    def test_layout(self):
        raw = nw.init(2, 0).to_bytes()
        assert raw.startswith(b"SFDA-MDL1")
        (mlen,) = struct.unpack("<I", raw[9:13])
        manifest = json.loads(raw[13:13 + mlen])
        assert manifest["K"] == 2 and manifest["seed"] == 0 and manifest["arch"]["widths"] == [8, 16]
        pos = 13 + mlen
        (ndim,) = struct.unpack("<I", raw[pos:pos + 4])
        assert ndim == 4 and struct.unpack("<4I", raw[pos + 4:pos + 20]) == (8, 1, 3, 3)

    def test_bad_magic(self):
        with pytest.raises(nw.CheckpointError, match="magic"):
            nw.params_from_bytes(b"NOPE" + nw.init(2, 0).to_bytes()[4:], "x.sfda")

    def test_truncated(self):
        raw = nw.init(2, 0).to_bytes()
        with pytest.raises(nw.CheckpointError, match="truncated"):
            nw.params_from_bytes(raw[:-8])

    def test_trailing(self):
        with pytest.raises(nw.CheckpointError, match="trailing"):
            nw.params_from_bytes(nw.init(2, 0).to_bytes() + b"\x00")

    def test_malformed_manifest(self):
        raw = b"SFDA-MDL1" + struct.pack("<I", 3) + b"{x}"
        with pytest.raises(nw.CheckpointError, match="manifest"):
            nw.params_from_bytes(raw)

    def test_shape_mismatch(self):
        p = nw.init(2, 0)
        raw = bytearray(p.to_bytes())
        (mlen,) = struct.unpack("<I", raw[9:13])
        pos = 13 + mlen + 4
        raw[pos:pos + 4] = struct.pack("<I", 9)
        with pytest.raises(nw.CheckpointError, match="shape"):
            nw.params_from_bytes(bytes(raw))
