import numpy as np
import pytest

from tools import sv_grad as G
from tools.sv_gradcheck import (
    KINK_MARGIN,
    MIN_FRAME_STD,
    network_inputs,
    run_suite,
    suite_checks,
)
from tools.sv_network import NetworkDims, TransformCoeffs, init_params

DIMS = NetworkDims(input_dim=3, frame_dims=(4,), embed_dim=3, fc2_dim=3, num_classes=4)


class TestGradSuite:
    def test_suite_passes_for_two_seeds(self):
        result = run_suite(seeds=[0, 1])
        assert result.passed, result.to_frame().loc[lambda df: ~df["passed"]].to_string()
        frame = result.to_frame()
        assert list(frame.columns) == ["check", "max_rel_error", "passed"]
        assert len(frame) == 2 * len(list(suite_checks(0)))

    def test_every_loss_and_forward_path_is_covered(self):
        names = {name.split("/")[0] for name, _, _ in suite_checks(0)}
        expected = {
            "pn_loss", "ce_loss", "contrastive_loss", "combined_cp", "combined_cpc",
            "embed", "embed_transformed", "classifier",
        }
        assert expected <= names

    def test_zero_tolerance_reports_failures(self):
        result = run_suite(seeds=[0], tolerance=0.0)
        assert not result.passed
        assert result.failures

    @pytest.mark.parametrize("seed", range(10))
    def test_network_checks_pass(self, seed):
        for name, f, params in suite_checks(seed):
            if name.split("/")[0] not in ("embed", "embed_transformed", "classifier"):
                continue
            report = G.finite_difference_check(f, params, name=name)
            assert report.passed, (name, report.max_rel_error)

    @pytest.mark.slow
    def test_suite_passes_for_ten_seeds(self):
        assert run_suite().passed


class TestNetworkInputs:
    @pytest.mark.parametrize("seed", range(10))
    def test_frame_units_clear_of_relu_kink(self, seed):
        rng = np.random.default_rng(seed)
        theta = init_params(DIMS, rng).tensors
        coeffs = TransformCoeffs.near_identity(DIMS, rng, noise=0.2).tensors
        xs = network_inputs(rng, DIMS, theta, coeffs)
        plain = (theta["frame0.W"], theta["frame0.b"])
        scaled = (theta["frame0.W"] * coeffs["frame0.S1"], theta["frame0.b"] + coeffs["frame0.S2"])
        for W, b in (plain, scaled):
            for x in xs:
                pre = x @ W + b
                assert np.abs(pre).min() >= KINK_MARGIN
                h = np.maximum(pre, 0.0)
                assert (h > 0).sum(axis=0).min() >= 2
                assert h.std(axis=0).min() >= MIN_FRAME_STD

    def test_deeper_networks_rejected(self, rng):
        dims = NetworkDims(input_dim=3, frame_dims=(4, 4), embed_dim=3, fc2_dim=3, num_classes=4)
        theta = init_params(dims, rng).tensors
        with pytest.raises(ValueError, match="one frame layer"):
            network_inputs(rng, dims, theta, TransformCoeffs.identity(dims).tensors)
