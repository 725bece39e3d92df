"""
Synthetic panels with known Granger-causal structure.

* ``simulate_var``: sparse stable VAR with a chosen set of causal lags.
* ``simulate_lorenz96``: the cyclic Lorenz-96 system, RK4-integrated.

All randomness comes from named streams of one seed (see core.seeding), so a
panel depends only on its arguments.
"""

import logging
import math
from typing import Iterable, Optional

import numpy as np

from granger.core.errors import GenerationError, IntegrationError, UsageError
from granger.core.seeding import rng_stream
from granger.models.panel import TimeSeriesPanel

logger = logging.getLogger(__name__)

VAR_EDGE_START = 1.0
VAR_EDGE_SHRINK = 0.95
VAR_NOISE_SD = 0.1
VAR_BURN_IN = 200
VAR_MAX_RADIUS = 0.95
VAR_MAX_ATTEMPTS = 1000

LORENZ_FORCING = 20.0
LORENZ_DT_RECORD = 0.05
LORENZ_SUBSTEPS = 10
LORENZ_BURN_IN = 1000
LORENZ_INIT_SD = 0.01
LORENZ_NOISE_SD = 0.01
LORENZ_DIVERGENCE = 1e6


def series_names(p: int) -> list[str]:
    return [f"x{j}" for j in range(p)]


# ---------------------------------------------------------------------------
# Sparse VAR
# ---------------------------------------------------------------------------


def companion_radius(A: np.ndarray) -> float:
    """Spectral radius of the companion matrix of A, shape (K, p, p)."""
    K, p, _ = A.shape
    companion = np.zeros((p * K, p * K))
    companion[:p, :] = np.concatenate(list(A), axis=1)
    if K > 1:
        companion[p:, : p * (K - 1)] = np.eye(p * (K - 1))
    return float(np.max(np.abs(np.linalg.eigvals(companion))))


def _draw_support(rng: np.random.Generator, p: int, n_causes: int) -> np.ndarray:
    support = np.zeros((p, p), dtype=np.int64)
    for i in range(p):
        others = [j for j in range(p) if j != i]
        chosen = rng.choice(others, size=n_causes - 1, replace=False) if n_causes > 1 else []
        support[i, i] = 1
        support[i, chosen] = 1
    return support


def _draw_pattern(
    support_rng: np.random.Generator, signs_rng: np.random.Generator, p: int, n_causes: int
) -> tuple[np.ndarray, np.ndarray]:
    support = _draw_support(support_rng, p, n_causes)
    signs = signs_rng.choice([-1.0, 1.0], size=(p, p))
    np.fill_diagonal(signs, 1.0)
    return support, signs


def _lagged_coefficients(pattern: np.ndarray, lags: list[int], k_true: int) -> np.ndarray:
    A = np.zeros((k_true,) + pattern.shape)
    for k in lags:
        A[k - 1] = pattern
    return A


def _scale_to_edge(pattern: np.ndarray, lags: list[int], k_true: int) -> tuple[float, np.ndarray, float]:
    """
    Shrink a signed support pattern from VAR_EDGE_START by VAR_EDGE_SHRINK until it is stable.

    The result sits within one shrink step of VAR_MAX_RADIUS.

    Returns:
        (coeff, A, radius)
    """
    coeff = VAR_EDGE_START
    for step in range(VAR_MAX_ATTEMPTS + 1):
        A = _lagged_coefficients(coeff * pattern, lags, k_true)
        radius = companion_radius(A)
        if radius <= VAR_MAX_RADIUS:
            logger.debug("VAR pattern stable at coeff %.4g after %d shrink steps", coeff, step)
            return coeff, A, radius
        coeff *= VAR_EDGE_SHRINK
    raise GenerationError(f"VAR pattern still unstable at coeff {coeff:.3g}; try a smaller coeff")


def simulate_var(
    p: int,
    T: int,
    causal_lags: Iterable[int] = (1, 2, 3),
    density: float = 0.2,
    coeff: Optional[float] = None,
    noise_sd: float = VAR_NOISE_SD,
    seed: int = 0,
    max_lag: Optional[int] = None,
    burn_in: int = VAR_BURN_IN,
    initial: Optional[np.ndarray] = None,
) -> TimeSeriesPanel:
    """
    Simulate a sparse, stable VAR process.

    Each target i draws ceil(density * p) causes (always itself) and every
    causal lag k gets A^{(k)}_{ij} = coeff * s_ij with a random sign s_ij
    (self-edges positive). With an explicit ``coeff``, support and signs are
    redrawn until the companion spectral radius is at most VAR_MAX_RADIUS.
    With ``coeff=None`` one pattern is drawn and its magnitude shrinks from
    VAR_EDGE_START by VAR_EDGE_SHRINK until it is stable, so the process sits
    just inside the stability boundary.

    Args:
        p: Number of series.
        T: Number of recorded steps.
        causal_lags: Lags (1-based) carrying nonzero coefficients.
        density: Fraction of series causing each target.
        coeff: Coefficient magnitude; None calibrates it to the stability edge.
        noise_sd: Innovation standard deviation.
        seed: Root seed.
        max_lag: Width of truth_lags; defaults to max(causal_lags).
        burn_in: Leading steps discarded.
        initial: (K_true, p) or (p,) starting rows, oldest first; zeros by default.

    Returns:
        Panel with truth, truth_lags and the coefficients in ``metadata["A"]``.

    Raises:
        UsageError: If arguments are out of range.
        GenerationError: If no stable draw is found in VAR_MAX_ATTEMPTS tries.
    """
    lags = sorted(set(int(k) for k in causal_lags))
    if not lags or lags[0] < 1:
        raise UsageError(f"causal_lags must be positive lags, got {lags}")
    if not 0.0 < density <= 1.0:
        raise UsageError(f"density must lie in (0, 1], got {density}")
    if p < 1 or T < 1 or burn_in < 0:
        raise UsageError(f"invalid sizes p={p}, T={T}, burn_in={burn_in}")
    k_true = lags[-1]
    width = k_true if max_lag is None else max_lag
    if width < k_true:
        raise UsageError(f"causal lag {k_true} exceeds max_lag {width}")

    n_causes = min(p, math.ceil(round(density * p, 9)))
    support_rng = rng_stream(seed, "support")
    signs_rng = rng_stream(seed, "signs")
    if coeff is None:
        support, signs = _draw_pattern(support_rng, signs_rng, p, n_causes)
        coeff, A, radius = _scale_to_edge(support * signs, lags, k_true)
    else:
        for attempt in range(1, VAR_MAX_ATTEMPTS + 1):
            support, signs = _draw_pattern(support_rng, signs_rng, p, n_causes)
            A = _lagged_coefficients(coeff * support * signs, lags, k_true)
            radius = companion_radius(A)
            if radius <= VAR_MAX_RADIUS:
                break
            logger.debug("VAR draw %d unstable (radius %.4f), resampling", attempt, radius)
        else:
            raise GenerationError(
                f"no stable VAR found in {VAR_MAX_ATTEMPTS} draws (last radius {radius:.3f}); "
                f"try a smaller coeff than {coeff}"
            )

    total = burn_in + T
    trajectory = np.zeros((max(total, k_true), p))
    if initial is not None:
        start = np.asarray(initial, dtype=np.float64).reshape(-1, p)
        trajectory[: start.shape[0]] = start
        first = start.shape[0]
    else:
        first = k_true
    noise = rng_stream(seed, "noise").normal(0.0, noise_sd, size=trajectory.shape)
    if initial is None:
        trajectory[:first] = noise[:first]
    for t in range(first, trajectory.shape[0]):
        value = noise[t].copy()
        for k in range(k_true):
            if t - k - 1 >= 0:
                value += A[k] @ trajectory[t - k - 1]
        trajectory[t] = value

    truth_lags = np.zeros((p, width), dtype=np.int64)
    truth_lags[:, [k - 1 for k in lags]] = 1
    logger.info("Simulated VAR: p=%d T=%d lags=%s coeff=%.4g radius=%.4f", p, T, lags, coeff, radius)
    return TimeSeriesPanel(
        data=trajectory[burn_in : burn_in + T],
        series_names=series_names(p),
        truth=support,
        truth_lags=truth_lags,
        metadata={
            "generator": "var",
            "A": A,
            "radius": radius,
            "coeff": coeff,
            "noise_sd": noise_sd,
            "burn_in": burn_in,
            "density": density,
            "causal_lags": lags,
        },
    )


# ---------------------------------------------------------------------------
# Lorenz-96
# ---------------------------------------------------------------------------


def lorenz96_derivative(x: np.ndarray, forcing: float) -> np.ndarray:
    """dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F, cyclic in i."""
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def rk4_step(x: np.ndarray, h: float, forcing: float) -> np.ndarray:
    k1 = lorenz96_derivative(x, forcing)
    k2 = lorenz96_derivative(x + 0.5 * h * k1, forcing)
    k3 = lorenz96_derivative(x + 0.5 * h * k2, forcing)
    k4 = lorenz96_derivative(x + h * k3, forcing)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz96_truth(p: int) -> np.ndarray:
    truth = np.zeros((p, p), dtype=np.int64)
    for i in range(p):
        for offset in (-2, -1, 0, 1):
            truth[i, (i + offset) % p] = 1
    return truth


def integrate_lorenz96(
    x0: np.ndarray,
    steps: int,
    forcing: float = LORENZ_FORCING,
    dt_record: float = LORENZ_DT_RECORD,
    substeps: int = LORENZ_SUBSTEPS,
) -> np.ndarray:
    """
    Integrate from ``x0`` and return the ``steps`` states recorded every dt_record.

    Raises:
        IntegrationError: If any coordinate leaves [-1e6, 1e6] or turns non-finite.
    """
    h = dt_record / substeps
    x = np.asarray(x0, dtype=np.float64).copy()
    recorded = np.empty((steps, x.size))
    for n in range(steps):
        for _ in range(substeps):
            x = rk4_step(x, h, forcing)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > LORENZ_DIVERGENCE:
            raise IntegrationError(
                f"Lorenz-96 trajectory diverged at record {n}; use a smaller internal step "
                f"than {h:g} (more substeps)"
            )
        recorded[n] = x
    return recorded


def simulate_lorenz96(
    p: int,
    T: int,
    F: float = LORENZ_FORCING,
    dt_record: float = LORENZ_DT_RECORD,
    seed: int = 0,
    burn_in: int = LORENZ_BURN_IN,
    init_sd: float = LORENZ_INIT_SD,
    noise_sd: float = LORENZ_NOISE_SD,
    substeps: int = LORENZ_SUBSTEPS,
) -> TimeSeriesPanel:
    """
    Simulate Lorenz-96 with RK4 at dt_record / substeps.

    The state starts at F plus N(0, init_sd^2) noise, the first ``burn_in``
    records are dropped and N(0, noise_sd^2) measurement noise is added.

    Raises:
        UsageError: If p < 4 or dt_record <= 0.
        IntegrationError: If the trajectory diverges.
    """
    if p < 4:
        raise UsageError(f"Lorenz-96 needs p >= 4, got {p}")
    if dt_record <= 0 or substeps < 1:
        raise UsageError(f"dt_record must be positive and substeps >= 1, got {dt_record}, {substeps}")

    x0 = F + rng_stream(seed, "init").normal(0.0, init_sd, size=p)
    recorded = integrate_lorenz96(x0, burn_in + T, forcing=F, dt_record=dt_record, substeps=substeps)
    data = recorded[burn_in:] + rng_stream(seed, "noise").normal(0.0, noise_sd, size=(T, p))
    logger.info("Simulated Lorenz-96: p=%d T=%d F=%g dt=%g", p, T, F, dt_record)
    return TimeSeriesPanel(
        data=data,
        series_names=series_names(p),
        truth=lorenz96_truth(p),
        sampling_rate=1.0 / dt_record,
        metadata={
            "generator": "lorenz96",
            "forcing": F,
            "dt_record": dt_record,
            "substeps": substeps,
            "burn_in": burn_in,
            "init_sd": init_sd,
            "noise_sd": noise_sd,
        },
    )
