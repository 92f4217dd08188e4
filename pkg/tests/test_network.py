"""Network assembly, shape planning, collapse audit, and model files."""

import struct

import numpy as np
import pytest

import distgp.autodiff as ad
from distgp.errors import (BadMagic, ConfigError, CountMismatch,
                           IOFormatError, TruncatedFile)
from distgp.layers import collapse_check
from distgp.network import (Network, load_network, plan_shapes, save_network,
                            validate_network_spec)

IMAGE_SPEC = {
    "input": {"kind": "image", "height": 8, "width": 8, "channels": 1},
    "layers": [
        {"kind": "conv_svgp", "channels": 3, "kernel_size": 5, "stride": 2,
         "n_inducing": 6},
        {"kind": "affine_conv", "channels": 3, "kernel_size": 1},
        {"kind": "distgp_activation", "channels": 3, "n_inducing": 4},
        {"kind": "barycentre_pool", "window": 2},
        {"kind": "dense_distgp", "channels": 2, "n_inducing": 5},
    ],
}

FEATURE_SPEC = {
    "input": {"kind": "features", "dim": 2},
    "layers": [
        {"kind": "dense_svgp", "channels": 2, "n_inducing": 4},
        {"kind": "affine_conv", "channels": 3, "kernel_size": 1},
        {"kind": "distgp_activation", "channels": 2, "n_inducing": 3},
        {"kind": "affine_conv", "channels": 3, "kernel_size": 1},
        {"kind": "distgp_activation", "channels": 2, "n_inducing": 3},
    ],
}


class TestSpecValidation:
    def test_plan_shapes_known_pipeline(self):
        # 8 -> conv(k5,s2) -> 2 -> pool(2) -> 1 -> dense head
        assert plan_shapes(IMAGE_SPEC) == [(2, 2, 3), (2, 2, 3), (2, 2, 3),
                                           (1, 1, 3), (1, 1, 2)]

    def test_first_layer_must_open_the_network(self):
        bad = {"input": IMAGE_SPEC["input"],
               "layers": [{"kind": "affine_conv", "channels": 2, "kernel_size": 1}]}
        with pytest.raises(ConfigError):
            validate_network_spec(bad)

    def test_conv_front_requires_image_input(self):
        bad = {"input": {"kind": "features", "dim": 4},
               "layers": [{"kind": "conv_svgp", "channels": 2, "kernel_size": 3,
                           "stride": 1, "n_inducing": 4}]}
        with pytest.raises(ConfigError):
            validate_network_spec(bad)

    def test_front_kind_cannot_repeat(self):
        bad = {"input": IMAGE_SPEC["input"],
               "layers": [IMAGE_SPEC["layers"][0], IMAGE_SPEC["layers"][0]]}
        with pytest.raises(ConfigError):
            validate_network_spec(bad)

    def test_dense_needs_collapsed_spatial_map(self):
        bad = {"input": IMAGE_SPEC["input"],
               "layers": [IMAGE_SPEC["layers"][0],
                          {"kind": "dense_distgp", "channels": 2, "n_inducing": 4}]}
        with pytest.raises(ConfigError):
            validate_network_spec(bad)

    def test_oversized_kernel_rejected(self):
        bad = {"input": {"kind": "image", "height": 4, "width": 4, "channels": 1},
               "layers": [{"kind": "conv_svgp", "channels": 2, "kernel_size": 5,
                           "stride": 1, "n_inducing": 4}]}
        with pytest.raises(ConfigError):
            validate_network_spec(bad)

    def test_oversized_pool_window_rejected(self):
        bad = {"input": IMAGE_SPEC["input"],
               "layers": [IMAGE_SPEC["layers"][0],
                          {"kind": "barycentre_pool", "window": 3}]}
        with pytest.raises(ConfigError):
            validate_network_spec(bad)

    def test_unknown_kind_rejected(self):
        bad = {"input": IMAGE_SPEC["input"],
               "layers": [{"kind": "relu", "channels": 2}]}
        with pytest.raises(ConfigError):
            validate_network_spec(bad)

    def test_missing_key_rejected(self):
        bad = {"input": IMAGE_SPEC["input"],
               "layers": [{"kind": "conv_svgp", "channels": 2,
                           "kernel_size": 3, "stride": 1}]}
        with pytest.raises(ConfigError):
            validate_network_spec(bad)


class TestForward:
    def test_image_pipeline_shapes(self):
        net = Network(IMAGE_SPEC, seed=0)
        x = np.random.default_rng(1).normal(size=(4, 8, 8))
        mmap, auxes = net.forward(x, collect=True)
        assert mmap.shape == (4, 1, 1, 2)
        assert len(auxes) == 5
        assert net.output_dim == 2

    def test_forward_is_deterministic(self):
        net = Network(FEATURE_SPEC, seed=3)
        x = np.random.default_rng(2).normal(size=(5, 2))
        a, _ = net.forward(x)
        b, _ = net.forward(x)
        np.testing.assert_array_equal(ad.value_of(a.mean), ad.value_of(b.mean))
        np.testing.assert_array_equal(ad.value_of(a.var), ad.value_of(b.var))

    def test_seed_controls_initialization(self):
        # posterior means start at zero, so variances carry the seed's imprint
        x = np.random.default_rng(3).normal(size=(3, 2))
        out_a = Network(FEATURE_SPEC, seed=0).forward(x)[0]
        out_b = Network(FEATURE_SPEC, seed=0).forward(x)[0]
        out_c = Network(FEATURE_SPEC, seed=9).forward(x)[0]
        np.testing.assert_array_equal(ad.value_of(out_a.var), ad.value_of(out_b.var))
        assert not np.array_equal(ad.value_of(out_a.var), ad.value_of(out_c.var))

    def test_output_moments_variance_split(self):
        net = Network(FEATURE_SPEC, seed=4)
        # give the head a non-trivial posterior so vg is not the only term
        for gp in net.gp_layers():
            gp.p_qmean.value = 0.2 * np.random.default_rng(5).normal(
                size=gp.p_qmean.value.shape)
        x = np.random.default_rng(6).normal(size=(7, 2))
        out = net.output_moments(x)
        assert out["mean"].shape == (7, 2)
        assert out["vh"].shape == (7, 1)
        assert out["vg"].shape == (7, 2)
        # the last layer is a GP, so its split must reassemble the total
        np.testing.assert_allclose(out["vh"] + out["vg"], out["var"], atol=1e-10)
        assert np.all(out["vh"] >= 0) and np.all(out["vg"] >= 0)

    def test_kl_total_nonnegative_scalar(self):
        net = Network(IMAGE_SPEC, seed=7)
        kl = ad.value_of(net.kl_total())
        assert kl.shape == ()
        assert kl >= 0 and np.isfinite(kl)

    def test_feature_input_shape_guard(self):
        net = Network(FEATURE_SPEC, seed=0)
        with pytest.raises(Exception):
            net.forward(np.zeros((3, 2, 2)))

    def test_lipschitz_report_covers_operators(self):
        net = Network(IMAGE_SPEC, seed=8)
        rows = net.lipschitz_report()
        kinds = [r["kind"] for r in rows]
        assert "affine_conv" in kinds
        assert "distgp_activation" in kinds
        assert all(np.isfinite(r["bound"]) for r in rows)

    def test_project_restores_normalization(self):
        net = Network(IMAGE_SPEC, seed=9)
        aff = net.affine_layers()[0]
        aff.p_weights.value = aff.p_weights.value * 11.0
        net.project()
        fan_in = aff.p_weights.value.reshape(-1, 3).shape[0]
        bound, _ = aff.lipschitz_bound()
        assert bound == pytest.approx(1.0 / np.sqrt(fan_in), abs=1e-12)


class TestCollapseCheck:
    def test_normalized_network_values(self):
        # 1x1 normalized affines with fan-in 2 have column norms 1/sqrt(2),
        # so <Wt, Wt> = (3 * 0.5) / 3^2 = 1/6 for both operators; the head
        # kernel starts at s2 = l2 = 1, giving a 0.5 tail.
        net = Network(FEATURE_SPEC, seed=10)
        report = collapse_check(net)
        assert len(report["layers"]) == 2
        assert report["last_layer_tail"] == pytest.approx(0.5, rel=1e-12)
        stmt = report["statement"]["lhs"]
        assert stmt[0] == pytest.approx(4.0 / 6.0, rel=1e-12)
        assert stmt[1] == pytest.approx(2.0 / 6.0 + 0.5, rel=1e-12)
        assert report["statement"]["verdict"] is True
        # the remark form multiplies by fan_out * consumed = 6 and lands on
        # exactly 1.0 before the tail, so this net fails its stricter bound
        rem = report["remark"]["lhs"]
        assert rem == [pytest.approx(1.0 + 0.5, rel=1e-12)]
        assert report["remark"]["verdict"] is False

    def test_shrunk_weights_satisfy_both_forms(self):
        net = Network(FEATURE_SPEC, seed=10)
        head = net.gp_layers()[-1]
        head.p_variance.value = ad.softplus_inverse(np.array(0.25))
        net.affine_layers()[-1].p_weights.value = \
            net.affine_layers()[-1].p_weights.value * 0.5
        report = collapse_check(net)
        assert report["statement"]["verdict"] is True
        assert report["remark"]["verdict"] is True

    def test_inflated_weights_break_the_bound(self):
        net = Network(FEATURE_SPEC, seed=11)
        for aff in net.affine_layers():
            aff.p_weights.value = aff.p_weights.value * 10.0
        report = collapse_check(net)
        assert report["statement"]["verdict"] is False
        assert report["remark"]["verdict"] is False

    def test_network_without_affines_reports_nothing(self):
        spec = {"input": {"kind": "features", "dim": 2},
                "layers": [{"kind": "dense_svgp", "channels": 2, "n_inducing": 3}]}
        report = collapse_check(Network(spec, seed=0))
        assert report["layers"] == []
        assert report["statement"]["verdict"] is None

    def test_last_layer_tail_uses_kernel_hyperparameters(self):
        net = Network(FEATURE_SPEC, seed=12)
        head = net.gp_layers()[-1]
        base = collapse_check(net)["last_layer_tail"]
        head.p_variance.value = ad.softplus_inverse(np.array(4.0))
        grown = collapse_check(net)["last_layer_tail"]
        assert grown == pytest.approx(4.0 * base, rel=1e-10)


class TestModelFiles:
    def test_round_trip_preserves_forward_exactly(self, tmp_path):
        net = Network(IMAGE_SPEC, seed=13)
        rng = np.random.default_rng(14)
        for p in net.store.params():
            p.value = p.value + 0.01 * rng.normal(size=p.value.shape)
        x = rng.normal(size=(3, 8, 8))
        before = net.output_moments(x)
        path = tmp_path / "model.dgpn"
        save_network(path, net)
        loaded = load_network(path)
        after = loaded.output_moments(x)
        np.testing.assert_array_equal(before["mean"], after["mean"])
        np.testing.assert_array_equal(before["var"], after["var"])
        np.testing.assert_array_equal(before["vh"], after["vh"])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(BadMagic):
            load_network(path)

    def test_truncated_manifest(self, tmp_path):
        net = Network(FEATURE_SPEC, seed=15)
        path = tmp_path / "model.dgpn"
        save_network(path, net)
        raw = path.read_bytes()
        path.write_bytes(raw[:20])
        with pytest.raises(TruncatedFile):
            load_network(path)

    def test_chopped_payload_count_mismatch(self, tmp_path):
        net = Network(FEATURE_SPEC, seed=16)
        path = tmp_path / "model.dgpn"
        save_network(path, net)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CountMismatch):
            load_network(path)

    def test_corrupted_payload_checksum(self, tmp_path):
        net = Network(FEATURE_SPEC, seed=17)
        path = tmp_path / "model.dgpn"
        save_network(path, net)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(IOFormatError):
            load_network(path)

    def test_unsupported_version(self, tmp_path):
        net = Network(FEATURE_SPEC, seed=18)
        path = tmp_path / "model.dgpn"
        save_network(path, net)
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
        with pytest.raises(IOFormatError):
            load_network(path)
