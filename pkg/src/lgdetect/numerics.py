"""Linear-algebra helpers and deterministic random streams.

Complex quantities are lifted to real form as ``[Re; Im]`` for vectors and
``[[Re, -Im], [Im, Re]]`` for matrices, so that ``lift(H) @ realify(x)``
equals ``realify(H @ x)``.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import RankDeficient

RANK_RTOL = 1e-10


def realify(x: np.ndarray) -> np.ndarray:
    """Stack real and imaginary parts along the last axis: ``(..., n) -> (..., 2n)``."""
    x = np.asarray(x)
    return np.concatenate([x.real, x.imag], axis=-1).astype(np.float64)


def unrealify(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`realify`."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1] // 2
    return v[..., :n] + 1j * v[..., n:]


def complex_to_real_channel(hc: np.ndarray) -> np.ndarray:
    """Real-valued equivalent of a complex channel, ``(..., Nr, Nt) -> (..., 2Nr, 2Nt)``."""
    hc = np.asarray(hc, dtype=np.complex128)
    re, im = hc.real, hc.imag
    top = np.concatenate([re, -im], axis=-1)
    bottom = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def real_to_complex_channel(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    nr, nt = h.shape[-2] // 2, h.shape[-1] // 2
    return h[..., :nr, :nt] + 1j * h[..., nr:, :nt]


def pseudo_inverse(m: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a tall, full-column-rank matrix.

    Computed from the thin SVD. Raises :class:`RankDeficient` when the smallest
    singular value is not above ``rtol * sigma_max``. Accepts complex input
    (the conjugate transpose is used).
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < m.shape[1]:
        raise ValueError(f"expected a tall 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[-1] <= rtol * s[0]:
        raise RankDeficient(
            f"sigma_min={s[-1] if s.size else 0.0:.3e} <= {rtol:.0e} * sigma_max"
        )
    return (vh.conj().T / s) @ u.conj().T


def eigen_spectrum(hc: np.ndarray) -> np.ndarray:
    """Eigenvalues of ``H^H H`` in descending order, tiny negatives clamped to 0."""
    hc = np.asarray(hc, dtype=np.complex128)
    gram = hc.conj().T @ hc
    ev = np.linalg.eigvalsh(gram)[::-1].copy()
    ev[ev < 0] = 0.0
    return ev


# --- random streams -------------------------------------------------------


def stream_id(purpose: str, task_id: int = 0) -> int:
    """64-bit stream identifier derived from a purpose string and a task id."""
    digest = hashlib.blake2b(f"{purpose}:{int(task_id)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(seed: int, purpose: str, task_id: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, stream_id(purpose, task_id)])


def rng_stream(seed: int, purpose: str, task_id: int = 0) -> np.random.Generator:
    """PCG64 generator for ``(seed, hash(purpose, task_id))``.

    The same triple always yields the same sequence.
    """
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, purpose, task_id)))


def spawn_streams(seed: int, purpose: str, task_id: int, n: int) -> list[np.random.Generator]:
    """``n`` independent child streams, e.g. one per sample."""
    children = seed_sequence(seed, purpose, task_id).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]
