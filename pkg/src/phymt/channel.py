"""Clustered multipath MIMO-OFDM channel generator and dataset files.

A user's channel is a sum of ``clusters * paths_per_cluster`` plane waves
impinging on a half-wavelength uniform planar array. Each path carries a
complex gain, a delay (frequency selectivity) and a Doppler shift (time
variation), so one :class:`PathSet` yields a whole :class:`CsiSequence`.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatError, InvalidInputError, ShapeError
from .numerics import SeededRng

SPEED_OF_LIGHT = 299_792_458.0
KMH = 1.0 / 3.6

MAGIC = b"PHYMT\x01\x00\x00"
FORMAT_VERSION = 1


@dataclass
class SceneConfig:
    """Array, band and propagation parameters.

    Defaults are the desk-scale configuration; ``SceneConfig.full_scale()``
    returns the 16x8 array / 48 subcarrier setup.
    """

    n_h: int = 4
    n_v: int = 4
    n_users: int = 4
    n_subcarriers: int = 8
    subcarrier_spacing: float = 180e3
    carrier_freq: float = 2.4e9
    clusters: int = 21
    paths_per_cluster: int = 20
    delay_spread: float = 100e-9
    angle_spread: float = math.radians(5.0)
    velocity_range: tuple = (10 * KMH, 100 * KMH)
    distance_range: tuple = (20.0, 100.0)
    slot_duration: float = 0.5e-3
    azimuth_range: tuple = (-math.pi / 2, math.pi / 2)
    elevation_range: tuple = (-math.pi / 8, math.pi / 8)

    def __post_init__(self):
        for name in ("n_h", "n_v", "n_users", "n_subcarriers", "clusters", "paths_per_cluster"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        for name in ("subcarrier_spacing", "carrier_freq", "slot_duration"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0")
        if self.delay_spread < 0 or self.angle_spread < 0:
            raise InvalidInputError("spreads must be non-negative")
        for name in ("velocity_range", "distance_range", "azimuth_range", "elevation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidInputError(f"{name} is empty: {lo} > {hi}")
            setattr(self, name, (float(lo), float(hi)))

    @classmethod
    def full_scale(cls, **overrides) -> "SceneConfig":
        kw = dict(n_h=16, n_v=8, n_users=4, n_subcarriers=48)
        kw.update(overrides)
        return cls(**kw)

    @property
    def n_antennas(self) -> int:
        return self.n_h * self.n_v

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def central_subcarrier(self) -> int:
        return self.n_subcarriers // 2

    def subcarrier_offsets(self) -> np.ndarray:
        """Frequency offset of each subcarrier from the central one (Hz)."""
        m = np.arange(self.n_subcarriers)
        return (m - self.central_subcarrier) * self.subcarrier_spacing

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown scene fields: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class PathSet:
    gains: np.ndarray
    delays: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    doppler: np.ndarray
    velocity: float = 0.0
    distance: float = 0.0

    def __len__(self):
        return self.gains.shape[0]


@dataclass
class CsiSequence:
    """Time series of one user's channel; ``slots[t]`` is N_T x M."""

    user: int
    slots: np.ndarray
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.complex128)
        if self.slots.ndim != 3:
            raise ShapeError(f"slots must be (T, N_T, M), got {self.slots.shape}")
        if not np.all(np.isfinite(self.slots)):
            raise InvalidInputError("CSI contains non-finite entries")

    @property
    def n_slots(self) -> int:
        return self.slots.shape[0]


def upa_steering(n_h: int, n_v: int, azimuth, elevation) -> np.ndarray:
    """Half-wavelength UPA response.

    Scalar angles return a vector of length ``n_h * n_v``; array angles
    return one column per angle. Entry ``i * n_v + j`` is
    ``exp(j*pi*(i*sin(az)*cos(el) + j*sin(el)))``.
    """
    az = np.asarray(azimuth, dtype=float)
    el = np.asarray(elevation, dtype=float)
    scalar = az.ndim == 0 and el.ndim == 0
    az, el = np.broadcast_arrays(np.atleast_1d(az), np.atleast_1d(el))
    i = np.repeat(np.arange(n_h), n_v)[:, None]
    j = np.tile(np.arange(n_v), n_h)[:, None]
    phase = np.pi * (i * (np.sin(az) * np.cos(el))[None, :] + j * np.sin(el)[None, :])
    a = np.exp(1j * phase)
    return a[:, 0] if scalar else a


def draw_paths(scene: SceneConfig, rng: SeededRng, velocity: float | None = None) -> PathSet:
    """Draw one user's multipath geometry.

    Cluster centres are uniform over the configured azimuth/elevation
    ranges, per-path angle offsets are Laplacian with standard deviation
    ``angle_spread``, delays are exponential with mean ``delay_spread`` and
    gains are i.i.d. CN(0, 1/n_paths) so that every antenna/subcarrier entry
    has unit expected energy. ``velocity`` (m/s) defaults to a uniform draw
    from ``scene.velocity_range``.
    """
    g = rng.gen
    C, L = scene.clusters, scene.paths_per_cluster
    n = C * L
    az_c = g.uniform(*scene.azimuth_range, size=C)
    el_c = g.uniform(*scene.elevation_range, size=C)
    b = scene.angle_spread / math.sqrt(2.0)
    az = np.repeat(az_c, L) + g.laplace(0.0, b, size=n) if b > 0 else np.repeat(az_c, L)
    el = np.repeat(el_c, L) + g.laplace(0.0, b, size=n) if b > 0 else np.repeat(el_c, L)
    az = np.angle(np.exp(1j * az))
    el = np.clip(el, -math.pi / 2, math.pi / 2)
    delays = g.exponential(scene.delay_spread, size=n) if scene.delay_spread > 0 else np.zeros(n)
    if velocity is None:
        velocity = g.uniform(*scene.velocity_range)
    direction = g.uniform(0.0, 2 * math.pi, size=n)
    doppler = velocity / scene.wavelength * np.cos(direction)
    z = g.standard_normal((n, 2))
    gains = (z[:, 0] + 1j * z[:, 1]) / math.sqrt(2.0 * n)
    distance = g.uniform(*scene.distance_range)
    return PathSet(gains, delays, az, el, doppler, float(velocity), float(distance))


def csi_sequence(paths: PathSet, scene: SceneConfig, n_slots: int, user: int = 0, t0: int = 0) -> CsiSequence:
    """Evaluate the channel of ``paths`` on ``n_slots`` consecutive slots.

    ``h(t, m) = sum_p g_p a_p exp(j2pi(nu_p t T_s - tau_p f_m))`` with
    ``f_m`` the offset of subcarrier ``m`` from the central subcarrier.
    """
    if n_slots < 1:
        raise InvalidInputError("n_slots must be >= 1")
    A = upa_steering(scene.n_h, scene.n_v, paths.azimuth, paths.elevation)
    t = (t0 + np.arange(n_slots)) * scene.slot_duration
    temporal = paths.gains[None, :] * np.exp(2j * np.pi * np.outer(t, paths.doppler))
    spectral = np.exp(-2j * np.pi * np.outer(paths.delays, scene.subcarrier_offsets()))
    slots = np.einsum("np,tp,pm->tnm", A, temporal, spectral, optimize=True)
    tags = {"velocity": paths.velocity, "velocity_kmh": paths.velocity / KMH, "distance": paths.distance}
    return CsiSequence(user, slots, tags)


def add_awgn(H, snr_db, rng: SeededRng) -> np.ndarray:
    """Add CN noise with per-entry variance ``mean(|H|^2) / 10^(snr_db/10)``.

    ``snr_db=None`` or ``math.inf`` returns an unchanged copy.
    """
    H = np.asarray(H, dtype=np.complex128)
    if snr_db is None or snr_db == math.inf:
        return H.copy()
    power = np.mean(np.abs(H) ** 2)
    if power == 0:
        raise InvalidInputError("cannot set an SNR relative to an all-zero channel")
    var = power / 10 ** (snr_db / 10)
    z = rng.gen.standard_normal(H.shape + (2,))
    return H + math.sqrt(var / 2) * (z[..., 0] + 1j * z[..., 1])


# -- dataset files ---------------------------------------------------------

_DTYPES = {"complex128": np.complex128, "float64": np.float64, "int64": np.int64}


@dataclass
class Dataset:
    sequences: list
    metadata: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)
    scene: SceneConfig | None = None

    def counts(self) -> dict:
        users = {s.user for s in self.sequences}
        first = self.sequences[0].slots.shape if self.sequences else (0, 0, 0)
        K = self.scene.n_users if self.scene is not None else len(users)
        return {"K": K, "N_T": first[1], "M": first[2], "T": first[0]}


def _encode(a: np.ndarray) -> bytes:
    if a.dtype == np.complex128:
        inter = np.empty(a.shape + (2,), dtype="<f8")
        inter[..., 0] = a.real
        inter[..., 1] = a.imag
        return inter.tobytes()
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()


def _nbytes(shape, dtype: str) -> int:
    per = {"complex128": 16, "float64": 8, "int64": 8}[dtype]
    return int(np.prod(shape, dtype=np.int64)) * per


def _decode(buf: bytes, shape, dtype: str) -> np.ndarray:
    if dtype == "complex128":
        inter = np.frombuffer(buf, dtype="<f8").reshape(tuple(shape) + (2,))
        return inter[..., 0] + 1j * inter[..., 1]
    return np.frombuffer(buf, dtype=np.dtype(_DTYPES[dtype]).newbyteorder("<")).reshape(shape).astype(_DTYPES[dtype])


def _dtype_name(a: np.ndarray) -> str:
    if np.iscomplexobj(a):
        return "complex128"
    if np.issubdtype(a.dtype, np.integer):
        return "int64"
    return "float64"


def save_dataset(path, sequences, metadata: dict | None = None, arrays: dict | None = None,
                 scene: SceneConfig | None = None) -> None:
    """Write sequences (plus optional named side arrays) to ``path``.

    Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON
    header, then the little-endian payload (complex values as interleaved
    re/im float64) in header order.
    """
    arrays = {} if arrays is None else arrays
    conv = {}
    for name, a in arrays.items():
        a = np.asarray(a)
        conv[name] = a.astype(_DTYPES[_dtype_name(a)])
    seq_entries = [{"user": int(s.user), "shape": list(s.slots.shape), "tags": s.tags} for s in sequences]
    ds = Dataset(list(sequences), metadata or {}, conv, scene)
    header = {
        "format": "phymt-dataset",
        "version": FORMAT_VERSION,
        "dtype": "complex128-le-interleaved",
        "counts": ds.counts(),
        "scene": scene.to_dict() if scene is not None else None,
        "metadata": metadata or {},
        "sequences": seq_entries,
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": _dtype_name(a)} for n, a in conv.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for s in sequences:
            fh.write(_encode(s.slots))
        for a in conv.values():
            fh.write(_encode(a))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 8 or head[:8] != MAGIC:
            raise FormatError(f"{path}: not a phymt dataset (bad magic)")
        if len(head) < 12:
            raise CorruptFileError(f"{path}: truncated header")
        (n,) = struct.unpack("<I", head[8:12])
        raw = fh.read(n)
    if len(raw) != n:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    if header.get("format") != "phymt-dataset" or header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format/version")
    return header


def load_dataset(path) -> Dataset:
    header = read_header(path)
    data = Path(path).read_bytes()
    offset = 12 + struct.unpack("<I", data[8:12])[0]
    expected = sum(_nbytes(e["shape"], "complex128") for e in header["sequences"])
    expected += sum(_nbytes(e["shape"], e["dtype"]) for e in header["arrays"])
    if len(data) - offset != expected:
        raise CorruptFileError(f"{path}: payload is {len(data) - offset} bytes, header implies {expected}")
    sequences = []
    for e in header["sequences"]:
        nb = _nbytes(e["shape"], "complex128")
        slots = _decode(data[offset:offset + nb], e["shape"], "complex128")
        offset += nb
        sequences.append(CsiSequence(e["user"], slots, e["tags"]))
    arrays = {}
    for e in header["arrays"]:
        nb = _nbytes(e["shape"], e["dtype"])
        arrays[e["name"]] = _decode(data[offset:offset + nb], e["shape"], e["dtype"])
        offset += nb
    scene = SceneConfig.from_dict(header["scene"]) if header.get("scene") else None
    return Dataset(sequences, header["metadata"], arrays, scene)
