"""Synthetic per-task datasets built from the channel simulator.

Every dataset is a :class:`TaskData`: encoder inputs, a target in the
decoder's output layout, and auxiliary arrays (complex channels, noise
levels, grid tags) used by losses, baselines and evaluation. Sample ``i``
draws from its own RNG stream, so a dataset of n samples is a prefix of
the one with n + 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..channel import KMH, SceneConfig, csi_sequence, draw_paths, load_dataset, save_dataset
from ..detection import make_detection_sample, qam
from ..errors import ValidationError
from ..numerics import SeededRng
from ..precoding import LabelQualityWarning, fit_power_params, sum_rate, wmmse_precoder, zf_precoder
from ..prediction import to_real

# precoding inputs are scaled by sqrt(P/sigma^2) relative to this SNR
PRE_REF_SNR_DB = 10.0


@dataclass
class TaskData:
    task: str
    inputs: tuple
    target: np.ndarray
    aux: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.target)

    def subset(self, idx) -> "TaskData":
        idx = np.asarray(idx)
        return TaskData(self.task, tuple(x[idx] for x in self.inputs), self.target[idx],
                        {k: v[idx] for k, v in self.aux.items()}, dict(self.meta))

    def where(self, key: str, value) -> "TaskData":
        return self.subset(np.flatnonzero(np.isclose(self.aux[key], value)))

    def save(self, path, scene: SceneConfig | None = None):
        arrays = {f"in{i}": x for i, x in enumerate(self.inputs)}
        arrays["target"] = self.target
        arrays.update({f"aux.{k}": v for k, v in self.aux.items()})
        save_dataset(path, [], {"task": self.task, **self.meta}, arrays, scene)

    @classmethod
    def load(cls, path) -> "TaskData":
        ds = load_dataset(path)
        meta = dict(ds.metadata)
        task = meta.pop("task", None)
        if task is None:
            raise ValidationError(f"{path}: not a task dataset")
        n_in = sum(1 for k in ds.arrays if k.startswith("in"))
        inputs = tuple(ds.arrays[f"in{i}"] for i in range(n_in))
        aux = {k[4:]: v for k, v in ds.arrays.items() if k.startswith("aux.")}
        return cls(task, inputs, ds.arrays["target"], aux, meta)


def _rng(seed, i):
    return SeededRng(seed, 1000 + i)


def central_channel(scene: SceneConfig, rng: SeededRng) -> np.ndarray:
    """(N_T, K) channel of ``scene.n_users`` users on the central subcarrier."""
    cols = []
    for k in range(scene.n_users):
        seq = csi_sequence(draw_paths(scene, rng), scene, 1, user=k)
        cols.append(seq.slots[0, :, scene.central_subcarrier])
    return np.stack(cols, axis=1)


def pre_features(H, sigma2, p_max: float = 1.0) -> np.ndarray:
    """User tokens ``[Re h_k, Im h_k]`` scaled by the transmit SNR."""
    H = np.asarray(H)
    scale = np.sqrt(p_max / np.asarray(sigma2, dtype=float) / 10 ** (PRE_REF_SNR_DB / 10))
    return to_real(np.swapaxes(H, -1, -2)) * np.asarray(scale)[..., None, None]


def make_pre(n: int, scene: SceneConfig, seed: int, snr_grid=(0, 5, 10, 15, 20),
             p_max: float = 1.0) -> TaskData:
    """Channels with WMMSE-derived (lambda, p) labels; SNR = p_max / sigma^2."""
    Hs, s2s, snrs, labels, rates, zf = [], [], [], [], [], []
    ratios = []
    for i in range(n):
        rng = _rng(seed, i)
        snr = float(snr_grid[rng.gen.integers(len(snr_grid))])
        s2 = p_max / 10 ** (snr / 10)
        H = central_channel(scene, rng)
        W, _ = wmmse_precoder(H, p_max, s2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LabelQualityWarning)
            lab = fit_power_params(W, H, s2, p_max)
        Hs.append(H)
        s2s.append(s2)
        snrs.append(snr)
        labels.append(np.stack([lab.lam, lab.p], axis=-1))
        rates.append(sum_rate(H, W.W, s2))
        zf.append(sum_rate(H, zf_precoder(H, p_max).W, s2))
        ratios.append(lab.rate_ratio)
    H = np.array(Hs)
    s2 = np.array(s2s)
    return TaskData("PRE", (pre_features(H, s2, p_max),), np.array(labels),
                    {"H": H, "sigma2": s2, "snr_db": np.array(snrs), "wmmse_rate": np.array(rates),
                     "zf_rate": np.array(zf), "label_ratio": np.array(ratios)},
                    {"p_max": p_max})


def make_det(n: int, scene: SceneConfig, seed: int, snr_grid=(5, 10, 15, 20), order: int = 16,
             n_slots: int = 8) -> TaskData:
    """Detection samples: one channel per sample, ``n_slots`` symbol slots."""
    const = qam(order)
    Hf, Yf, X, Hs, Ys, syms, s2s, snrs = [], [], [], [], [], [], [], []
    for i in range(n):
        rng = _rng(seed, i)
        snr = float(snr_grid[rng.gen.integers(len(snr_grid))])
        H = central_channel(scene, rng)
        s = make_detection_sample(H, snr, rng, const, n_slots)
        Hf.append(to_real(H.T))
        Yf.append(to_real(s.y.T))
        X.append(np.stack([s.x.T.real, s.x.T.imag], axis=-1))
        Hs.append(H)
        Ys.append(s.y)
        syms.append(s.sym.T)
        s2s.append(s.sigma2)
        snrs.append(snr)
    return TaskData("DET", (np.array(Hf), np.array(Yf)), np.array(X),
                    {"H": np.array(Hs), "y": np.array(Ys), "sym": np.array(syms),
                     "sigma2": np.array(s2s), "snr_db": np.array(snrs)},
                    {"order": order})


def make_cp(n: int, scene: SceneConfig, seed: int, t1: int = 16, t2: int = 4,
            velocities_kmh=None, antennas_per_draw: int = 4) -> TaskData:
    """Per-antenna history/future pairs.

    With ``velocities_kmh`` the user speed cycles through that grid (tagged
    test sets); otherwise it is drawn from ``scene.velocity_range``.
    """
    hist, fut, vel = [], [], []
    i = 0
    while len(hist) < n:
        rng = _rng(seed, i)
        v = None if velocities_kmh is None else velocities_kmh[i % len(velocities_kmh)] * KMH
        paths = draw_paths(scene, rng, velocity=v)
        slots = csi_sequence(paths, scene, t1 + t2).slots
        ants = rng.gen.choice(scene.n_antennas, size=min(antennas_per_draw, scene.n_antennas),
                              replace=False)
        for j in ants:
            if len(hist) == n:
                break
            h = slots[:, j, :]
            hist.append(to_real(h[:t1]))
            f = h[t1:]
            fut.append(np.stack([f.real, f.imag], axis=-1))
            vel.append(paths.velocity / KMH)
        i += 1
    return TaskData("CP", (np.array(hist),), np.array(fut), {"velocity_kmh": np.array(vel)})


def make_task_data(task: str, n: int, scene: SceneConfig, seed: int, **kw) -> TaskData:
    builders = {"CP": make_cp, "DET": make_det, "PRE": make_pre}
    if task not in builders:
        raise ValidationError(f"unknown task {task!r}")
    return builders[task](n, scene, seed, **kw)


def snr_to_sigma2(snr_db: float, p_max: float = 1.0) -> float:
    return p_max / 10 ** (snr_db / 10)
