"""Synthetic geometric distortions used for self-supervised training and for
the ranking benchmark.

Noise magnitudes are expressed in units of the clean cloud's mean
nearest-neighbour edge length ``l_r``.  Displacements are drawn per axis.
Unit draws for a given ``seed`` are shared across levels, so a higher level of
the same kind is the same perturbation scaled up.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .pointcloud import PointCloud, avg_nn_edge_length
from .rng import derive_rng, derive_seed

KINDS = ("GN", "UN", "IN", "EN", "MN")
BASE_KINDS = ("GN", "UN", "IN", "EN")
N_LEVELS = 5
IMPULSE_THRESHOLD = 0.2

_LEVELS = {
    "GN": (0.2, 0.4, 0.7, 1.0, 1.4),
    "EN": (0.2, 0.4, 0.7, 1.0, 1.4),
    "UN": (0.6, 1.2, 2.1, 3.0, 4.2),
    "IN": (0.6, 1.2, 2.1, 3.0, 4.2),
}


def level_table(kind: str) -> tuple[float, ...]:
    """The five noise multipliers of a pure noise kind."""
    if kind == "MN":
        raise ValueError("MN has no level table of its own; it uses the base kinds' tables")
    try:
        return _LEVELS[kind]
    except KeyError:
        raise ValueError(f"unknown noise kind {kind!r}") from None


def one_hot_alpha(kind: str) -> tuple[float, ...]:
    alpha = [0.0] * 4
    alpha[BASE_KINDS.index(kind)] = 1.0
    return tuple(alpha)


@dataclass(frozen=True)
class NoiseSpec:
    """One distortion setting.

    ``alpha`` is ordered (GN, UN, IN, EN) and has unit L2 norm.  For MN,
    ``base_xi`` holds the multiplier used for each base kind; when omitted the
    base kinds' own tables at ``level_index`` are used.
    """

    kind: str
    level_index: int
    xi: float
    alpha: tuple = field(default=(1.0, 0.0, 0.0, 0.0))
    base_xi: Optional[tuple] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        alpha = tuple(float(a) for a in self.alpha)
        if len(alpha) != 4 or min(alpha) < 0:
            raise ValueError("alpha must be 4 nonnegative weights")
        if abs(np.sqrt(sum(a * a for a in alpha)) - 1.0) > 1e-9:
            raise ValueError("alpha must have unit L2 norm")
        object.__setattr__(self, "alpha", alpha)
        if self.base_xi is not None:
            object.__setattr__(self, "base_xi", tuple(float(x) for x in self.base_xi))

    @classmethod
    def pure(cls, kind: str, level_index: int, xi: Optional[float] = None, seed=None) -> "NoiseSpec":
        if xi is None:
            xi = level_table(kind)[level_index - 1]
        return cls(kind, level_index, float(xi), one_hot_alpha(kind), seed=seed)

    @classmethod
    def mixed(cls, level_index: int, alpha, base_xi=None, seed=None) -> "NoiseSpec":
        if base_xi is None:
            base_xi = tuple(level_table(k)[level_index - 1] for k in BASE_KINDS)
        # xi of a mixed spec is recorded as the GN-equivalent multiplier
        return cls("MN", level_index, float(base_xi[0]), tuple(alpha), tuple(base_xi), seed)

    @property
    def class_index(self) -> int:
        return KINDS.index(self.kind)

    def resolved_base_xi(self) -> tuple:
        if self.base_xi is not None:
            return self.base_xi
        return tuple(level_table(k)[self.level_index - 1] for k in BASE_KINDS)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["alpha"] = list(self.alpha)
        rec["base_xi"] = list(self.base_xi) if self.base_xi is not None else None
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "NoiseSpec":
        return cls(rec["kind"], int(rec["level_index"]), float(rec["xi"]), tuple(rec["alpha"]),
                   tuple(rec["base_xi"]) if rec.get("base_xi") is not None else None, rec.get("seed"))


def normalize_mix(raw) -> tuple[float, ...]:
    raw = np.asarray(raw, dtype=np.float64)
    norm = float(np.sqrt((raw * raw).sum()))
    if norm == 0:
        raise ValueError("cannot normalise an all-zero mix")
    return tuple((raw / norm).tolist())


def sample_mix_weights(seed: int) -> tuple[float, ...]:
    """Four uniform [0, 1] weights, L2-normalised."""
    rng = derive_rng(seed, "mix")
    while True:
        raw = rng.random(4)
        if raw.any():
            return normalize_mix(raw)


def _base_displacement(kind: str, n: int, scale: float, l_r: float, seed: int) -> np.ndarray:
    rng = derive_rng(seed, "noise", kind)
    if kind == "GN":
        return rng.standard_normal((n, 3)) * scale
    if kind == "UN":
        return rng.uniform(-1.0, 1.0, (n, 3)) * scale
    if kind == "IN":
        e = rng.uniform(-1.0, 1.0, (n, 3)) * scale
        e[np.abs(e) <= IMPULSE_THRESHOLD * l_r] = 0.0
        return e
    if kind == "EN":
        mag = rng.standard_exponential((n, 3)) * scale
        sign = np.where(rng.random((n, 3)) < 0.5, -1.0, 1.0)
        return mag * sign
    raise ValueError(f"not a base noise kind: {kind!r}")


def displacement(n: int, spec: NoiseSpec, l_r: float, seed: int) -> np.ndarray:
    if not l_r > 0:
        raise ValueError("l_r must be > 0")
    if spec.kind != "MN":
        return _base_displacement(spec.kind, n, spec.xi * l_r, l_r, seed)
    total = np.zeros((n, 3))
    for kind, a, xi in zip(BASE_KINDS, spec.alpha, spec.resolved_base_xi()):
        if a != 0.0:
            total += a * _base_displacement(kind, n, xi * l_r, l_r, seed)
    return total


def apply_noise(cloud: PointCloud, spec: NoiseSpec, l_r: float, seed: int) -> PointCloud:
    """Displace every point of ``cloud``; count and order are preserved."""
    e = displacement(len(cloud), spec, l_r, seed)
    return PointCloud(cloud.points + e)


@dataclass(frozen=True, eq=False)
class DistortedSample:
    parent: int
    cloud: PointCloud
    spec: NoiseSpec
    l_r: float


def build_distortion_set(clean: Sequence[PointCloud], seed: int,
                         kinds: Sequence[str] = KINDS) -> list[DistortedSample]:
    """All kinds x 5 levels for every clean cloud, labelled with their spec."""
    out = []
    for ci, cloud in enumerate(clean):
        if len(cloud) < 2:
            raise ValueError(f"clean cloud {ci} has fewer than 2 points")
        l_r = avg_nn_edge_length(cloud)
        for kind in kinds:
            noise_seed = derive_seed(seed, "distort", ci, kind)
            for level in range(1, N_LEVELS + 1):
                if kind == "MN":
                    alpha = sample_mix_weights(derive_seed(seed, "alpha", ci, level))
                    spec = NoiseSpec.mixed(level, alpha, seed=noise_seed)
                else:
                    spec = NoiseSpec.pure(kind, level, seed=noise_seed)
                out.append(DistortedSample(ci, apply_noise(cloud, spec, l_r, noise_seed), spec, l_r))
    return out


def write_sidecar(spec: NoiseSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_record(), fh, indent=2)
