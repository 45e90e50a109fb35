"""Clustered geometric MIMO channels, pilot transmission and LS estimation.

Each task is a fixed scatterer configuration: ``L`` clusters, each with a
departure angle at the UE array, an arrival angle at the BS array, a power
fraction and an angular spread. A channel draw sums ``rays_per_cluster`` rays
per cluster, every ray with its own complex gain and Gaussian angular jitter,
across half-wavelength uniform linear arrays at both ends. The overall scale is
fixed so that ``E[||H||_F^2] = Nt * Nr``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import RankDeficient
from .numerics import (
    complex_to_real_channel,
    pseudo_inverse,
    realify,
    rng_stream,
    spawn_streams,
)

QPSK_AMPLITUDE = 1.0 / math.sqrt(2.0)
MAX_REDRAWS = 100


@dataclass(frozen=True)
class ChannelConfig:
    nt: int = 8
    nr: int = 32
    n_pilots: int = 16
    n_clusters: int = 6
    rays_per_cluster: int = 20
    angular_spread_deg: float = 5.0
    split: tuple[float, float, float] = (0.81, 0.09, 0.10)
    calibration_draws: int = 1000

    def __post_init__(self):
        if self.nr < self.nt:
            raise ValueError("need nr >= nt")
        if self.n_pilots < self.nt:
            raise ValueError("need n_pilots >= nt")
        if self.n_clusters < 1:
            raise ValueError("need at least one cluster")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions must be nonnegative and sum to 1, got {self.split}")


@dataclass(frozen=True)
class ScattererConfig:
    task_id: int
    departure: np.ndarray  # (L,) rad, at the UE (transmit) array
    arrival: np.ndarray  # (L,) rad, at the BS (receive) array
    power: np.ndarray  # (L,) fractions summing to 1
    spread: np.ndarray  # (L,) rad
    rays_per_cluster: int = 20

    @property
    def n_clusters(self) -> int:
        return int(self.power.size)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "departure": self.departure.tolist(),
            "arrival": self.arrival.tolist(),
            "power": self.power.tolist(),
            "spread": self.spread.tolist(),
            "rays_per_cluster": self.rays_per_cluster,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ScattererConfig":
        return cls(
            task_id=int(d["task_id"]),
            departure=np.asarray(d["departure"], dtype=np.float64),
            arrival=np.asarray(d["arrival"], dtype=np.float64),
            power=np.asarray(d["power"], dtype=np.float64),
            spread=np.asarray(d["spread"], dtype=np.float64),
            rays_per_cluster=int(d["rays_per_cluster"]),
        )


def _wrap(angle: np.ndarray) -> np.ndarray:
    return (angle + np.pi) % (2 * np.pi) - np.pi


def make_task(master_seed: int, task_id: int, cfg: ChannelConfig = ChannelConfig()) -> ScattererConfig:
    rng = rng_stream(master_seed, "task", task_id)
    n = cfg.n_clusters
    departure = _wrap(rng.uniform(-np.pi / 2, np.pi / 2, n))
    arrival = _wrap(rng.uniform(-np.pi / 2, np.pi / 2, n))
    power = rng.exponential(1.0, n)
    power = power / power.sum()
    spread = np.full(n, math.radians(cfg.angular_spread_deg))
    return ScattererConfig(task_id, departure, arrival, power, spread, cfg.rays_per_cluster)


def steering(n: int, angles: np.ndarray) -> np.ndarray:
    """Unit-norm half-wavelength ULA responses, one column per angle: ``(n, len(angles))``."""
    idx = np.arange(n)[:, None]
    return np.exp(1j * np.pi * idx * np.sin(np.asarray(angles))[None, :]) / math.sqrt(n)


def draw_channel(config: ScattererConfig, rng: np.random.Generator, nt: int = 8, nr: int = 32) -> np.ndarray:
    """One ``(nr, nt)`` complex channel realization."""
    n_rays = config.rays_per_cluster
    L = config.n_clusters
    jitter_r = rng.standard_normal((L, n_rays))
    jitter_t = rng.standard_normal((L, n_rays))
    gains = (rng.standard_normal((L, n_rays)) + 1j * rng.standard_normal((L, n_rays))) / math.sqrt(2.0)
    arrival = (config.arrival[:, None] + config.spread[:, None] * jitter_r).ravel()
    departure = (config.departure[:, None] + config.spread[:, None] * jitter_t).ravel()
    amp = (np.sqrt(config.power / n_rays)[:, None] * gains).ravel()
    a_r = steering(nr, arrival)
    a_t = steering(nt, departure)
    return math.sqrt(nt * nr) * (a_r * amp) @ a_t.conj().T


def qpsk(rng: np.random.Generator, shape) -> np.ndarray:
    bits = rng.integers(0, 2, size=tuple(shape) + (2,))
    signs = 1.0 - 2.0 * bits
    return QPSK_AMPLITUDE * (signs[..., 0] + 1j * signs[..., 1])


def pilot_matrix(nt: int, n_pilots: int) -> np.ndarray:
    """First ``nt`` rows of the ``n_pilots``-point DFT, unit-modulus entries."""
    t = np.arange(nt)[:, None]
    k = np.arange(n_pilots)[None, :]
    return np.exp(-2j * np.pi * t * k / n_pilots)


def ls_estimate(yp: np.ndarray, xp: np.ndarray) -> np.ndarray:
    """Least-squares channel estimate ``Yp Xp^H (Xp Xp^H)^-1``.

    ``yp`` may carry leading batch axes: ``(..., Nr, Np) -> (..., Nr, Nt)``.
    """
    xp = np.asarray(xp, dtype=np.complex128)
    right = pseudo_inverse(xp.conj().T).conj().T  # Xp^H (Xp Xp^H)^-1, (Np, Nt)
    return np.asarray(yp, dtype=np.complex128) @ right


def calibrate_noise(config: ScattererConfig, cfg: ChannelConfig, master_seed: int, snr_db: float) -> float:
    """Per-complex-entry noise variance giving the requested receive SNR."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    rng = rng_stream(master_seed, "calibration", config.task_id)
    energy = 0.0
    for _ in range(cfg.calibration_draws):
        h = draw_channel(config, rng, cfg.nt, cfg.nr)
        x = qpsk(rng, (cfg.nt,))
        energy += float(np.sum(np.abs(h @ x) ** 2)) / cfg.nr
    e_rx = energy / cfg.calibration_draws
    return e_rx / 10.0 ** (snr_db / 10.0)


def split_sizes(n: int, split: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    return n_train, n_val, n - n_train - n_val


@dataclass
class Split:
    """Stacked per-sample arrays for one partition of a task."""

    x: np.ndarray  # (n, Nt) complex symbols
    y: np.ndarray  # (n, Nr) complex received
    h: np.ndarray  # (n, Nr, Nt) true channel
    h_ls: np.ndarray  # (n, Nr, Nt) LS estimate
    x_zf: np.ndarray  # (n, 2Nt) real ZF output

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def x_real(self) -> np.ndarray:
        return realify(self.x)

    @property
    def h_ls_real(self) -> np.ndarray:
        return complex_to_real_channel(self.h_ls)


@dataclass
class Sample:
    x: np.ndarray
    y: np.ndarray
    h: np.ndarray
    yp: np.ndarray | None
    h_ls: np.ndarray
    x_zf: np.ndarray
    noise: np.ndarray | None
    sigma2: float


@dataclass
class TaskDataset:
    task_id: int
    config: ScattererConfig
    channel_cfg: ChannelConfig
    snr_db: float
    sigma2: float
    x: np.ndarray
    y: np.ndarray
    h: np.ndarray
    h_ls: np.ndarray
    x_zf: np.ndarray
    sizes: tuple[int, int, int]
    seed: int = 0
    noise: np.ndarray | None = None
    yp: np.ndarray | None = None
    redraws: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    def bounds(self, name: str) -> tuple[int, int]:
        n_train, n_val, n_test = self.sizes
        return {
            "train": (0, n_train),
            "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, n_train + n_val + n_test),
            "all": (0, len(self)),
        }[name]

    def split(self, name: str) -> Split:
        lo, hi = self.bounds(name)
        return Split(self.x[lo:hi], self.y[lo:hi], self.h[lo:hi], self.h_ls[lo:hi], self.x_zf[lo:hi])

    def sample(self, i: int) -> Sample:
        return Sample(
            x=self.x[i],
            y=self.y[i],
            h=self.h[i],
            yp=None if self.yp is None else self.yp[i],
            h_ls=self.h_ls[i],
            x_zf=self.x_zf[i],
            noise=None if self.noise is None else self.noise[i],
            sigma2=self.sigma2,
        )

    def content_hash(self) -> str:
        """Hash of the stored per-sample arrays; used to check scheme fairness."""
        import hashlib

        h = hashlib.sha256()
        for arr in (self.x, self.y, self.h, self.h_ls, self.x_zf):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def generate_dataset(
    config: ScattererConfig,
    n_samples: int,
    snr_db: float,
    cfg: ChannelConfig = ChannelConfig(),
    seed: int = 0,
    noise_tag: str = "",
) -> TaskDataset:
    """Generate ``n_samples`` pilot + data transmissions for one task.

    Channels and symbols come from per-sample streams keyed by task only, noise
    from streams keyed by SNR and ``noise_tag``; regenerating at another SNR
    therefore keeps channels and symbols and redraws the noise. Samples whose LS
    estimate is rank deficient are redrawn and counted in ``redraws``.
    """
    if n_samples < 10:
        raise ValueError("n_samples must be at least 10")
    nt, nr, n_p = cfg.nt, cfg.nr, cfg.n_pilots
    sigma2 = calibrate_noise(config, cfg, seed, snr_db)
    sigma = math.sqrt(sigma2 / 2.0)
    xp = pilot_matrix(nt, n_p)
    right = pseudo_inverse(xp.conj().T).conj().T
    chan_streams = spawn_streams(seed, "channel", config.task_id, n_samples)
    noise_streams = spawn_streams(seed, f"noise@{snr_db!r}{noise_tag}", config.task_id, n_samples)

    xs = np.empty((n_samples, nt), np.complex128)
    ys = np.empty((n_samples, nr), np.complex128)
    hs = np.empty((n_samples, nr, nt), np.complex128)
    hls = np.empty((n_samples, nr, nt), np.complex128)
    noises = np.empty((n_samples, nr), np.complex128)
    yps = np.empty((n_samples, nr, n_p), np.complex128)
    xzf = np.empty((n_samples, 2 * nt))
    redraws = 0
    for i in range(n_samples):
        crng, nrng = chan_streams[i], noise_streams[i]
        for attempt in range(MAX_REDRAWS):
            h = draw_channel(config, crng, nt, nr)
            x = qpsk(crng, (nt,))
            n = sigma * (nrng.standard_normal(nr) + 1j * nrng.standard_normal(nr))
            n_p_mat = sigma * (nrng.standard_normal((nr, n_p)) + 1j * nrng.standard_normal((nr, n_p)))
            y = h @ x + n
            yp = h @ xp + n_p_mat
            h_ls = yp @ right
            try:
                a_zf = pseudo_inverse(complex_to_real_channel(h_ls))
            except RankDeficient:
                redraws += 1
                continue
            break
        else:
            raise RankDeficient(f"task {config.task_id}: sample {i} rank deficient after {MAX_REDRAWS} draws")
        xs[i], ys[i], hs[i], hls[i], noises[i], yps[i] = x, y, h, h_ls, n, yp
        xzf[i] = a_zf @ realify(y)
    return TaskDataset(
        task_id=config.task_id,
        config=config,
        channel_cfg=cfg,
        snr_db=snr_db,
        sigma2=sigma2,
        x=xs,
        y=ys,
        h=hs,
        h_ls=hls,
        x_zf=xzf,
        sizes=split_sizes(n_samples, cfg.split),
        seed=seed,
        noise=noises,
        yp=yps,
        redraws=redraws,
    )


def dataset_distance(
    a: TaskDataset | Split,
    b: TaskDataset | Split,
    k: int,
    seed: int = 0,
    paired: bool = False,
) -> float:
    """Mean Euclidean distance between ``k`` randomly paired channel realizations.

    With ``paired=True`` the same sample indices are used on both sides.
    """
    ha, hb = a.h, b.h
    if k > min(len(ha), len(hb)):
        raise ValueError("k exceeds dataset size")
    rng = rng_stream(seed, "distance")
    ia = rng.choice(len(ha), size=k, replace=False)
    ib = ia if paired else rng.choice(len(hb), size=k, replace=False)
    diff = (ha[ia] - hb[ib]).reshape(k, -1)
    return float(np.mean(np.sqrt(np.sum(np.abs(diff) ** 2, axis=1))))


# --- persistence ------------------------------------------------------------

_FIELDS = ("x_real", "x_imag", "y_real", "y_imag", "h_real", "h_imag", "h_ls_real", "h_ls_imag", "x_zf")


def _rows(ds: TaskDataset) -> np.ndarray:
    n = len(ds)
    return np.concatenate(
        [
            ds.x.real,
            ds.x.imag,
            ds.y.real,
            ds.y.imag,
            ds.h.real.reshape(n, -1),
            ds.h.imag.reshape(n, -1),
            ds.h_ls.real.reshape(n, -1),
            ds.h_ls.imag.reshape(n, -1),
            ds.x_zf,
        ],
        axis=1,
    )


def save_dataset(ds: TaskDataset, path: str | Path, extra: dict | None = None) -> dict:
    """Write a dataset as manifest + little-endian float32 per-sample rows."""
    cfg = ds.channel_cfg
    manifest = {
        "task_id": ds.task_id,
        "config": ds.config.to_json(),
        "channel_cfg": {**asdict(cfg), "split": list(cfg.split)},
        "counts": {"train": ds.sizes[0], "val": ds.sizes[1], "test": ds.sizes[2]},
        "snr_db": ds.snr_db if math.isfinite(ds.snr_db) else "inf",
        "sigma2": ds.sigma2,
        "geometry": {"nt": cfg.nt, "nr": cfg.nr, "n_pilots": cfg.n_pilots},
        "seed": ds.seed,
        "redraws": ds.redraws,
        "fields": list(_FIELDS),
    }
    if extra:
        manifest.update(extra)
    return container.write_container(path, "dataset", manifest, [("samples", _rows(ds))], dtype="float32")


def load_dataset(path: str | Path) -> TaskDataset:
    manifest, arrays = container.read_container(path, kind="dataset")
    rows = arrays["samples"]
    g = manifest["geometry"]
    nt, nr = g["nt"], g["nr"]
    cc = dict(manifest["channel_cfg"])
    cc["split"] = tuple(cc["split"])
    cfg = ChannelConfig(**cc)
    n = rows.shape[0]
    widths = [nt, nt, nr, nr, nr * nt, nr * nt, nr * nt, nr * nt, 2 * nt]
    if rows.shape[1] != sum(widths):
        raise container.CorruptBlob(f"{path}: row width {rows.shape[1]} does not match geometry")
    parts = np.split(rows, np.cumsum(widths)[:-1], axis=1)
    x = parts[0] + 1j * parts[1]
    y = parts[2] + 1j * parts[3]
    h = (parts[4] + 1j * parts[5]).reshape(n, nr, nt)
    h_ls = (parts[6] + 1j * parts[7]).reshape(n, nr, nt)
    counts = manifest["counts"]
    snr = manifest["snr_db"]
    return TaskDataset(
        task_id=manifest["task_id"],
        config=ScattererConfig.from_json(manifest["config"]),
        channel_cfg=cfg,
        snr_db=math.inf if snr == "inf" else float(snr),
        sigma2=float(manifest["sigma2"]),
        x=x,
        y=y,
        h=h,
        h_ls=h_ls,
        x_zf=parts[8].copy(),
        sizes=(counts["train"], counts["val"], counts["test"]),
        seed=manifest["seed"],
        redraws=manifest.get("redraws", 0),
        meta={k: manifest[k] for k in ("config_hash", "master_seed") if k in manifest},
    )
