import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import small_extractor
from proxydistill import (
    DimensionMismatchError,
    EmptyDatasetError,
    FrozenViolationError,
    IdentityProjector,
    KernelSpec,
    TooFewSamplesError,
    UnknownSpecError,
    measure_gap,
    median_heuristic_bandwidth,
    mmd,
    mmd_loss,
    mmd_value,
)
from proxydistill.models import build_projector
from proxydistill.utils import make_generator

X123 = np.array([[0.0], [1.0], [2.0]])
Y1011 = np.array([[10.0], [11.0]])


class TestKernelSpec:
    def test_defaults(self):
        spec = KernelSpec()
        assert spec.kind == "rbf" and spec.bandwidth == "median-heuristic"

    def test_rejects_unknown_kind(self):
        with pytest.raises(UnknownSpecError):
            KernelSpec(kind="polynomial")

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(ValueError):
            KernelSpec(bandwidth=0.0)
        with pytest.raises(UnknownSpecError):
            KernelSpec(bandwidth="auto")


class TestKnownValues:
    def test_biased_rbf(self):
        # double-loop hand computation, bandwidth 1
        est = mmd(X123, Y1011, KernelSpec(bandwidth=1.0), "biased")
        assert est.value == pytest.approx(1.4362423526700636, abs=1e-12)

    def test_unbiased_rbf(self):
        est = mmd(X123, Y1011, KernelSpec(bandwidth=1.0), "unbiased")
        assert est.value == pytest.approx(1.0559961939332558, abs=1e-12)

    def test_linear_kernel_is_mean_difference(self):
        # biased linear MMD^2 == ||mean(X) - mean(Y)||^2 == 9.5^2
        est = mmd(X123, Y1011, KernelSpec(kind="linear"), "biased")
        assert est.value == pytest.approx(90.25, abs=1e-9)

    def test_median_heuristic_value(self):
        # pooled distances {1, 3, 2} -> median 2
        bw = median_heuristic_bandwidth(np.array([[0.0], [1.0]]),
                                        np.array([[3.0]]))
        assert bw == pytest.approx(2.0, abs=1e-12)


class TestEstimatorProperties:
    def test_identical_samples_give_exact_zero(self):
        x = np.random.default_rng(0).normal(size=(20, 6))
        est = mmd(x, x.copy(), KernelSpec(bandwidth=1.3), "biased")
        assert est.value == 0.0

    def test_unbiased_can_go_negative(self):
        # identical samples: dropping the diagonal pushes the estimate below
        # zero, and no clamp may hide that
        x = np.random.default_rng(1).normal(size=(12, 3))
        est = mmd(x, x.copy(), KernelSpec(bandwidth=1.0), "unbiased")
        assert est.value < 0.0

    @given(hnp.arrays(float, st.tuples(st.integers(2, 8), st.just(3)),
                      elements=st.floats(-5, 5)),
           hnp.arrays(float, st.tuples(st.integers(2, 8), st.just(3)),
                      elements=st.floats(-5, 5)))
    @settings(max_examples=40, deadline=None)
    def test_biased_nonnegative(self, x, y):
        est = mmd(x, y, KernelSpec(bandwidth=1.0), "biased")
        assert est.value >= 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(9, 4)), rng.normal(size=(7, 4))
        spec = KernelSpec(bandwidth=0.8)
        for estimator in ("biased", "unbiased"):
            a = mmd(x, y, spec, estimator).value
            b = mmd(y, x, spec, estimator).value
            assert a == pytest.approx(b, abs=1e-12)

    def test_one_dim_inputs_promoted(self):
        est = mmd(np.array([0.0, 1.0, 2.0]), np.array([10.0, 11.0]),
                  KernelSpec(bandwidth=1.0), "biased")
        assert est.value == pytest.approx(1.4362423526700636, abs=1e-12)

    def test_estimate_metadata(self):
        est = mmd(X123, Y1011, KernelSpec(bandwidth=1.0))
        assert (est.estimator, est.kernel) == ("biased", "rbf")
        assert (est.n_x, est.n_y) == (3, 2)
        assert est.bandwidth_used == 1.0

    def test_median_bandwidth_recorded(self):
        est = mmd(X123, Y1011)
        assert est.bandwidth_used > 0
        assert est.bandwidth_used == pytest.approx(
            median_heuristic_bandwidth(X123, Y1011), abs=0)


class TestValidation:
    def test_empty_inputs(self):
        with pytest.raises(EmptyDatasetError):
            mmd(np.zeros((0, 3)), np.ones((4, 3)))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            mmd(np.zeros((3, 2)), np.zeros((3, 4)))

    def test_unbiased_needs_two_per_side(self):
        with pytest.raises(TooFewSamplesError):
            mmd(np.zeros((1, 2)), np.ones((5, 2)), KernelSpec(bandwidth=1.0),
                "unbiased")

    def test_unknown_estimator(self):
        with pytest.raises(UnknownSpecError):
            mmd(X123, Y1011, estimator="jackknife")

    def test_median_needs_two_pooled(self):
        with pytest.raises(TooFewSamplesError):
            median_heuristic_bandwidth(np.zeros((1, 2)), np.zeros((0, 2)))

    def test_median_floor_for_identical_points(self):
        bw = median_heuristic_bandwidth(np.zeros((4, 2)), np.zeros((4, 2)))
        assert bw == pytest.approx(1e-12, abs=0)


class TestTrainingPath:
    def test_mmd_loss_differentiable(self):
        x = torch.randn(6, 4, requires_grad=True)
        y = torch.randn(5, 4)
        val = mmd_loss(x, y, bandwidth=1.0)
        val.backward()
        assert torch.isfinite(x.grad).all()
        assert float(x.grad.abs().sum()) > 0

    def test_mmd_loss_clamped_at_zero(self):
        x = torch.randn(8, 3, dtype=torch.float64)
        assert float(mmd_loss(x, x.clone(), bandwidth=2.0)) == 0.0

    def test_mmd_value_keeps_dtype(self):
        x32 = torch.randn(5, 3)
        assert mmd_value(x32, x32 + 1, bandwidth=1.0).dtype == torch.float32
        x64 = x32.double()
        assert mmd_value(x64, x64 + 1, bandwidth=1.0).dtype == torch.float64


class TestMeasureGap:
    def _images(self, seed, n=12):
        return np.random.default_rng(seed).random((n, 8, 8, 3)).astype(np.float32)

    def test_requires_frozen_extractor(self):
        ext = small_extractor()
        with pytest.raises(FrozenViolationError):
            measure_gap(ext, IdentityProjector(ext.out_dim),
                        self._images(0), self._images(1))

    def test_identity_projector_preserves_gap(self):
        ext = small_extractor().freeze()
        before, after = measure_gap(ext, IdentityProjector(ext.out_dim),
                                    self._images(0), self._images(1))
        assert after.value == before.value
        assert before.estimator == "biased"

    def test_projection_changes_measurement(self):
        ext = small_extractor().freeze()
        proj = build_projector("linear", ext.out_dim, 4, make_generator(0))
        before, after = measure_gap(ext, proj, self._images(0), self._images(1))
        assert after.value != before.value

    def test_empty_inputs_rejected(self):
        ext = small_extractor().freeze()
        with pytest.raises(EmptyDatasetError):
            measure_gap(ext, IdentityProjector(ext.out_dim),
                        np.zeros((0, 8, 8, 3), dtype=np.float32),
                        self._images(1))

    def test_unbiased_estimator_selectable(self):
        ext = small_extractor().freeze()
        before, after = measure_gap(ext, IdentityProjector(ext.out_dim),
                                    self._images(0), self._images(1),
                                    estimator="unbiased")
        assert before.estimator == after.estimator == "unbiased"
