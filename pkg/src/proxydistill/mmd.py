"""Maximum mean discrepancy: kernels, estimators, and the domain-gap probe.

Two quadratic-time estimators of MMD^2 are provided.  The biased one keeps
the kernel diagonals and is therefore always >= 0, which makes it the right
choice as a training penalty; the unbiased one drops diagonals and may go
negative on finite samples.  Measurements run in float64 so that identical
inputs report exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    DimensionMismatchError,
    EmptyDatasetError,
    FrozenViolationError,
    TooFewSamplesError,
    UnknownSpecError,
)

KERNEL_KINDS = ("rbf", "linear")
ESTIMATORS = ("biased", "unbiased")
MEDIAN_BANDWIDTH = "median-heuristic"
_MIN_BANDWIDTH = 1e-12


@dataclass
class KernelSpec:
    """Kernel family plus bandwidth policy.

    bandwidth is either a positive float or the string "median-heuristic",
    which resolves to the median pairwise distance of the pooled sample at
    measurement time.  Ignored for the linear kernel.
    """

    kind: str = "rbf"
    bandwidth: float | str = MEDIAN_BANDWIDTH

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise UnknownSpecError(
                f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != MEDIAN_BANDWIDTH:
                raise UnknownSpecError(
                    f"unknown bandwidth policy {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(**d)


@dataclass
class MMDEstimate:
    """One MMD^2 measurement with enough context to reproduce it."""

    value: float
    estimator: str
    kernel: str
    bandwidth_used: float
    n_x: int
    n_y: int

    def to_dict(self) -> dict:
        return {"value": self.value, "estimator": self.estimator,
                "kernel": self.kernel, "bandwidth_used": self.bandwidth_used,
                "n_x": self.n_x, "n_y": self.n_y}


def _as_2d_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if dtype is not None:
        t = t.to(dtype)
    if t.ndim == 1:
        t = t.reshape(-1, 1)
    if t.ndim != 2:
        raise DimensionMismatchError(
            f"samples must be [N, D] (or [N] for 1-D data), got {tuple(t.shape)}")
    return t


def pairwise_sq_dists(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distances between all row pairs, clamped at 0."""
    d = torch.cdist(x, y, p=2.0)
    return (d * d).clamp_min(0.0)


def median_heuristic_bandwidth(x, y) -> float:
    """Median pairwise Euclidean distance of the pooled sample.

    Floored at a tiny positive value so a degenerate (all-identical) sample
    still yields a usable kernel.
    """
    xt = _as_2d_tensor(x, torch.float64)
    yt = _as_2d_tensor(y, torch.float64)
    if xt.shape[0] + yt.shape[0] < 2:
        raise TooFewSamplesError(
            "median heuristic needs at least 2 pooled samples, got "
            f"{xt.shape[0]} + {yt.shape[0]}")
    if xt.shape[0] and yt.shape[0] and xt.shape[1] != yt.shape[1]:
        raise DimensionMismatchError(
            f"sample dims differ: {xt.shape[1]} vs {yt.shape[1]}")
    pooled = torch.cat([t for t in (xt, yt) if t.shape[0] > 0], dim=0)
    d = torch.cdist(pooled, pooled, p=2.0)
    iu = torch.triu_indices(d.shape[0], d.shape[0], offset=1)
    dists = d[iu[0], iu[1]]
    return max(float(dists.median()), _MIN_BANDWIDTH)


def _kernel_matrix(x: torch.Tensor, y: torch.Tensor, kind: str,
                   bandwidth: float) -> torch.Tensor:
    if kind == "rbf":
        return torch.exp(-pairwise_sq_dists(x, y) / (2.0 * bandwidth * bandwidth))
    if kind == "linear":
        return x @ y.T
    raise UnknownSpecError(f"unknown kernel kind {kind!r}")


def _mmd_from_kernels(kxx: torch.Tensor, kyy: torch.Tensor, kxy: torch.Tensor,
                      estimator: str) -> torch.Tensor:
    n, m = kxx.shape[0], kyy.shape[0]
    if estimator == "biased":
        val = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
        # mathematically >= 0; clamp shaves float round-off below zero
        return val.clamp_min(0.0)
    if estimator == "unbiased":
        if n < 2 or m < 2:
            raise TooFewSamplesError(
                f"unbiased estimator needs >= 2 samples per side, got {n} and {m}")
        sxx = (kxx.sum() - kxx.diagonal().sum()) / (n * (n - 1))
        syy = (kyy.sum() - kyy.diagonal().sum()) / (m * (m - 1))
        return sxx + syy - 2.0 * kxy.mean()
    raise UnknownSpecError(f"unknown estimator {estimator!r}")


def mmd_value(x: torch.Tensor, y: torch.Tensor, *, kind: str = "rbf",
              bandwidth: float = 1.0, estimator: str = "biased") -> torch.Tensor:
    """Differentiable MMD^2 between two [N, D] tensors (resolved bandwidth).

    Stays in the input dtype and keeps the autograd graph, so it can sit
    directly inside a training objective.
    """
    if x.ndim != 2 or y.ndim != 2:
        raise DimensionMismatchError(
            f"mmd_value expects [N, D] tensors, got {tuple(x.shape)} and "
            f"{tuple(y.shape)}")
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatchError(
            f"sample dims differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise EmptyDatasetError("mmd_value needs non-empty samples on both sides")
    kxx = _kernel_matrix(x, x, kind, bandwidth)
    kyy = _kernel_matrix(y, y, kind, bandwidth)
    kxy = _kernel_matrix(x, y, kind, bandwidth)
    return _mmd_from_kernels(kxx, kyy, kxy, estimator)


def mmd_loss(x: torch.Tensor, y: torch.Tensor, bandwidth: float) -> torch.Tensor:
    """Training-time penalty: biased rbf MMD^2 with a pre-frozen bandwidth."""
    return mmd_value(x, y, kind="rbf", bandwidth=bandwidth, estimator="biased")


def mmd(x, y, kernel: KernelSpec | None = None,
        estimator: str = "biased") -> MMDEstimate:
    """Measure MMD^2 between two samples (numpy arrays or tensors).

    Computation happens in float64; the median-heuristic bandwidth, when
    requested, is resolved from exactly these two samples.
    """
    if estimator not in ESTIMATORS:
        raise UnknownSpecError(
            f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
    kernel = kernel or KernelSpec()
    xt = _as_2d_tensor(x, torch.float64)
    yt = _as_2d_tensor(y, torch.float64)
    if xt.shape[0] == 0 or yt.shape[0] == 0:
        raise EmptyDatasetError(
            f"mmd needs non-empty samples, got {xt.shape[0]} and {yt.shape[0]}")
    if xt.shape[1] != yt.shape[1]:
        raise DimensionMismatchError(
            f"sample dims differ: {xt.shape[1]} vs {yt.shape[1]}")
    if kernel.kind == "rbf":
        bw = (median_heuristic_bandwidth(xt, yt)
              if isinstance(kernel.bandwidth, str) else float(kernel.bandwidth))
    else:
        bw = 0.0
    with torch.no_grad():
        val = mmd_value(xt, yt, kind=kernel.kind, bandwidth=bw,
                        estimator=estimator)
    return MMDEstimate(value=float(val), estimator=estimator, kernel=kernel.kind,
                       bandwidth_used=bw, n_x=xt.shape[0], n_y=yt.shape[0])


def extract_features(extractor: torch.nn.Module, images: np.ndarray,
                     projector: torch.nn.Module | None = None,
                     batch_size: int = 256) -> torch.Tensor:
    """Run images through extractor (and optionally projector) without grad."""
    from .utils import images_to_tensor

    if images.shape[0] == 0:
        raise EmptyDatasetError("cannot extract features from an empty image block")
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = images_to_tensor(images[start:start + batch_size])
            z = extractor(x)
            if projector is not None:
                z = projector(z)
            outs.append(z)
    return torch.cat(outs, dim=0)


def measure_gap(extractor, projector, broad_images: np.ndarray,
                target_images: np.ndarray, kernel: KernelSpec | None = None,
                estimator: str = "biased",
                batch_size: int = 256) -> tuple[MMDEstimate, MMDEstimate]:
    """Domain gap before and after projection.

    "Before" is measured on raw extractor features of the two image sets,
    "after" on the same features pushed through the projector.  The extractor
    must be frozen (this is a probe, not a training step).  Both measurements
    resolve their own median-heuristic bandwidth unless the kernel pins one.
    """
    if hasattr(extractor, "frozen") and not extractor.frozen:
        raise FrozenViolationError("measure_gap expects a frozen extractor")
    if broad_images.shape[0] == 0 or target_images.shape[0] == 0:
        raise EmptyDatasetError("measure_gap needs non-empty image sets")
    zb = extract_features(extractor, broad_images, batch_size=batch_size)
    zt = extract_features(extractor, target_images, batch_size=batch_size)
    before = mmd(zb, zt, kernel, estimator)
    with torch.no_grad():
        pb = projector(zb)
        pt = projector(zt)
    after = mmd(pb, pt, kernel, estimator)
    return before, after
