"""Weighted least-squares state estimation and residual-based bad data detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .case_model import GridCase, MeasurementModel
from .errors import ConfigError

CALIBRATION_MODES = ("empirical", "chi2")


@dataclass(frozen=True, eq=False)
class EstimationResult:
    """Estimate for one measurement vector, or a batch when ``z`` was 2-D."""

    theta_hat: np.ndarray
    residual: np.ndarray
    residual_norm: np.ndarray | float


@dataclass(frozen=True)
class BddConfig:
    tau: float
    alpha: float
    mode: str = "empirical"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.mode not in CALIBRATION_MODES:
            raise ConfigError(f"unknown calibration mode {self.mode!r}")


def estimate(model: MeasurementModel, z) -> EstimationResult:
    """theta_hat = (H^T W H)^-1 H^T W z, with r = z - H theta_hat.

    Accepts a single vector of length m or a (K, m) batch.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.m:
        raise ValueError(f"measurement length {z.shape[-1]} != {model.m}")
    theta = z @ model.gain.T
    r = z - theta @ model.H.T
    norm = np.linalg.norm(r, axis=-1)
    return EstimationResult(theta_hat=theta, residual=r, residual_norm=norm if z.ndim > 1 else float(norm))


def _clean_batch(model, n, rng, grid, load_range):
    if grid is None:
        # residual of clean data does not depend on the state
        theta = np.zeros((n, model.n))
    else:
        from .powerflow import injections, solve_dc

        lo, hi = load_range
        theta = np.array(
            [solve_dc(grid, injections(grid, rng.uniform(lo, hi, grid.n_bus))).theta for _ in range(n)]
        )
    return theta @ model.H.T + rng.normal(0.0, model.sigma, size=(n, model.m))


def calibrate_threshold(
    model: MeasurementModel,
    alpha: float = 0.05,
    n_samples: int = 10000,
    rng=None,
    *,
    mode: str = "empirical",
    grid: GridCase | None = None,
    load_range=(0.8, 1.2),
) -> BddConfig:
    """Pick tau so that clean data alarms at rate ``alpha``.

    ``empirical`` takes the (1 - alpha) quantile of residual norms over
    ``n_samples`` simulated clean measurements. ``chi2`` uses the analytic
    quantile and needs uniform noise.
    """
    if mode == "chi2":
        if not np.allclose(model.sigma, model.sigma[0]):
            raise ConfigError("chi2 calibration needs a uniform noise level")
        dof = model.m - model.n
        tau = float(model.sigma[0] * np.sqrt(chi2.ppf(1 - alpha, dof)))
        return BddConfig(tau=tau, alpha=alpha, mode="chi2")
    if mode != "empirical":
        raise ConfigError(f"unknown calibration mode {mode!r}")
    if n_samples < 1000:
        raise ConfigError("empirical calibration needs at least 1000 samples")
    rng = np.random.default_rng() if rng is None else rng
    z = _clean_batch(model, n_samples, rng, grid, load_range)
    norms = estimate(model, z).residual_norm
    return BddConfig(tau=float(np.quantile(norms, 1 - alpha)), alpha=alpha, mode="empirical")


def detect(result: EstimationResult, cfg: BddConfig):
    """Alarm iff ||r||_2 >= tau (elementwise for batches)."""
    flag = np.asarray(result.residual_norm) >= cfg.tau
    return bool(flag) if flag.ndim == 0 else flag
