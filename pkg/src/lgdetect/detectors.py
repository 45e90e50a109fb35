"""Classical MIMO detectors, hard decisions, SER, and ZF-noise diagnostics.

Detectors work on the real lift: ``h`` is ``(2Nr, 2Nt)``, ``y`` is ``(2Nr,)``
and the soft output is ``(2Nt,)`` laid out as ``[Re; Im]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .channel import QPSK_AMPLITUDE
from .errors import LengthMismatch, RankDeficient, SearchSpaceTooLarge
from .numerics import pseudo_inverse, realify, unrealify

ML_MAX_NT = 5
# QPSK points in lexicographic (re, im) order; ML ties resolve to the first.
QPSK_POINTS = np.array([complex(a, b) for a in (-QPSK_AMPLITUDE, QPSK_AMPLITUDE) for b in (-QPSK_AMPLITUDE, QPSK_AMPLITUDE)])


@dataclass
class DetectionResult:
    soft: np.ndarray
    hard: np.ndarray
    detector: str


def zf_detect(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    return pseudo_inverse(h) @ y


def mmse_detect(h: np.ndarray, y: np.ndarray, sigma2: float) -> np.ndarray:
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    if sigma2 == 0:
        return zf_detect(h, y)
    gram = h.T @ h + sigma2 * np.eye(h.shape[1])
    return np.linalg.solve(gram, h.T @ y)


def qpsk_candidates(nt: int) -> np.ndarray:
    """All ``4**nt`` QPSK vectors (complex), in lexicographic symbol order."""
    return np.array(list(itertools.product(QPSK_POINTS, repeat=nt)))


def ml_detect(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exhaustive ML search over the QPSK lattice."""
    nt = h.shape[1] // 2
    if nt > ML_MAX_NT:
        raise SearchSpaceTooLarge(f"Nt={nt} exceeds ML limit {ML_MAX_NT} ({4 ** nt} candidates)")
    cands = realify(qpsk_candidates(nt))  # (4^nt, 2nt)
    dist = np.sum((y[None, :] - cands @ h.T) ** 2, axis=1)
    return cands[int(np.argmin(dist))]


def ml_detect_batch(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorized :func:`ml_detect` over leading sample axis."""
    nt = h.shape[-1] // 2
    if nt > ML_MAX_NT:
        raise SearchSpaceTooLarge(f"Nt={nt} exceeds ML limit {ML_MAX_NT}")
    cands = realify(qpsk_candidates(nt))
    out = np.empty((h.shape[0], 2 * nt))
    for i in range(h.shape[0]):
        dist = np.sum((y[i][None, :] - cands @ h[i].T) ** 2, axis=1)
        out[i] = cands[int(np.argmin(dist))]
    return out


def zf_detect_batch(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.stack([zf_detect(hi, yi) for hi, yi in zip(h, y)])


def mmse_detect_batch(h: np.ndarray, y: np.ndarray, sigma2: float) -> np.ndarray:
    if sigma2 == 0:
        return zf_detect_batch(h, y)
    n = h.shape[-1]
    gram = np.einsum("bri,brj->bij", h, h) + sigma2 * np.eye(n)
    rhs = np.einsum("bri,br->bi", h, y)
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def hard_decision(soft: np.ndarray) -> np.ndarray:
    """Real-lift soft estimate -> QPSK symbols (complex). ``sign(0)`` is ``+``."""
    soft = np.asarray(soft, dtype=np.float64)
    return unrealify(np.where(soft >= 0, QPSK_AMPLITUDE, -QPSK_AMPLITUDE))


def detect(h: np.ndarray, y: np.ndarray, detector: str, sigma2: float = 0.0) -> DetectionResult:
    if detector == "zf":
        soft = zf_detect(h, y)
    elif detector == "mmse":
        soft = mmse_detect(h, y, sigma2)
    elif detector == "ml":
        soft = ml_detect(h, y)
    else:
        raise ValueError(f"unknown detector {detector!r}")
    return DetectionResult(soft, hard_decision(soft), detector)


def symbol_errors(predictions: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """Boolean error mask per complex symbol."""
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise LengthMismatch(f"predictions {p.shape} vs truths {t.shape}")
    return (np.sign(p.real) != np.sign(t.real)) | (np.sign(p.imag) != np.sign(t.imag))


def ser(predictions: np.ndarray, truths: np.ndarray) -> float:
    """Fraction of complex symbols with a wrong real or imaginary decision."""
    err = symbol_errors(predictions, truths)
    return float(err.mean()) if err.size else 0.0


def ser_stderr(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n) if n > 0 else float("nan")


@dataclass
class ZfNoiseStats:
    empirical_cov: np.ndarray
    analytic_cov: np.ndarray
    empirical_total: float
    analytic_total: float
    n_trials: int

    @property
    def cov_rel_error(self) -> float:
        denom = np.linalg.norm(self.analytic_cov)
        if denom == 0:
            return float(np.linalg.norm(self.empirical_cov))
        return float(np.linalg.norm(self.empirical_cov - self.analytic_cov) / denom)

    @property
    def total_rel_error(self) -> float:
        if self.analytic_total == 0:
            return abs(self.empirical_total)
        return abs(self.empirical_total - self.analytic_total) / self.analytic_total


def zf_noise_stats(
    h: np.ndarray,
    sigma2: float,
    n_trials: int,
    rng: np.random.Generator,
    chunk: int = 20000,
) -> ZfNoiseStats:
    """Monte Carlo statistics of the ZF error ``x_zf - x`` under perfect CSI.

    Runs in the complex domain against a fixed channel ``h`` (Nr x Nt). With
    perfect CSI ``A h = I``, so the error is evaluated as ``A n`` directly; this
    keeps it exactly zero in the noiseless case. The empirical covariance is the
    uncentered second moment (the error is zero-mean).
    """
    h = np.asarray(h, dtype=np.complex128)
    nr, nt = h.shape
    a = pseudo_inverse(h)
    sigma = math.sqrt(sigma2 / 2.0)
    acc = np.zeros((nt, nt), np.complex128)
    done = 0
    while done < n_trials:
        m = min(chunk, n_trials - done)
        n = sigma * (rng.standard_normal((m, nr)) + 1j * rng.standard_normal((m, nr)))
        err = n @ a.T
        acc += err.T @ err.conj()
        done += m
    emp = acc / n_trials
    s = np.linalg.svd(h, compute_uv=False)
    if s[-1] <= 1e-10 * s[0]:
        raise RankDeficient("channel is rank deficient")
    analytic = sigma2 * np.linalg.inv(h.conj().T @ h)
    return ZfNoiseStats(
        empirical_cov=emp,
        analytic_cov=analytic,
        empirical_total=float(np.real(np.trace(emp))),
        analytic_total=float(sigma2 * np.sum(s ** -2.0)),
        n_trials=n_trials,
    )
