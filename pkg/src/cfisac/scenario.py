"""Network geometry and large-scale channel statistics."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np


def db2lin(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def lin2db(x: float) -> float:
    return 10.0 * math.log10(x)


@dataclass(frozen=True)
class SystemConfig:
    """Dimensions, powers, frame lengths and thresholds of one deployment.

    Thresholds are linear. ``tau_t`` defaults to ``K + L`` (orthogonal pilots).
    """

    M: int = 8
    N: int = 4
    K: int = 2
    L: int = 2
    rho: float = 1.0
    rho_t: float = 0.25
    tau: int = 200
    tau_t: int | None = None
    nu: float = 0.5
    kappa: float = db2lin(2.0)
    varsigma: float = db2lin(4.0)
    area_side: float = 500.0
    spacing_ratio: float = 0.5

    def __post_init__(self):
        if self.tau_t is None:
            object.__setattr__(self, "tau_t", self.K + self.L)
        for name in ("M", "N", "K", "L"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.tau_t < self.tau:
            raise ValueError("need 0 < tau_t < tau")
        for name in ("rho", "rho_t", "nu", "kappa", "varsigma", "spacing_ratio", "area_side"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def paper_scale(cls, **overrides) -> "SystemConfig":
        base = dict(M=32, N=8, K=4, L=2)
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "SystemConfig":
        if ("K" in changes or "L" in changes) and "tau_t" not in changes:
            changes["tau_t"] = None
        return replace(self, **changes)


@dataclass(frozen=True)
class PathLossModel:
    """Single-slope log-distance model without shadowing.

    Gains are divided by the receiver noise power so that ``rho`` acts as a
    transmit SNR; set ``noise_power_dbm=30`` (0 dBW) to get the bare power law.
    """

    reference_loss_db: float = 35.0
    reference_distance: float = 1.0
    exponent: float = 3.76
    min_distance: float = 10.0
    noise_power_dbm: float = -100.0

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError("exponent must be positive")
        if not self.min_distance > 0 or not self.reference_distance > 0:
            raise ValueError("distances must be positive")

    def gain(self, distance: np.ndarray) -> np.ndarray:
        d = np.maximum(np.asarray(distance, dtype=float), self.min_distance)
        scale_db = -self.reference_loss_db - (self.noise_power_dbm - 30.0)
        return 10.0 ** (scale_db / 10.0) * (d / self.reference_distance) ** (-self.exponent)


@dataclass(frozen=True)
class Geometry:
    ap_pos: np.ndarray  # (M, 2)
    ue_pos: np.ndarray  # (K, 2)
    zone_pos: np.ndarray  # (L, 2)
    seed: int | None = None


@dataclass(frozen=True)
class ChannelStats:
    """Per-link statistics consumed by the metrics and the optimizer.

    Shapes: beta, gamma (M, K); zeta, theta (M, L); array_gain (M, L, L).
    """

    beta: np.ndarray
    gamma: np.ndarray
    zeta: np.ndarray
    theta: np.ndarray
    array_gain: np.ndarray
    N: int

    @property
    def M(self) -> int:
        return self.beta.shape[0]

    @property
    def K(self) -> int:
        return self.beta.shape[1]

    @property
    def L(self) -> int:
        return self.zeta.shape[1]


def generate_geometry(config: SystemConfig, seed: int) -> Geometry:
    rng = np.random.default_rng(seed)
    side = config.area_side
    ap = rng.uniform(0.0, side, size=(config.M, 2))
    ue = rng.uniform(0.0, side, size=(config.K, 2))
    zones = rng.uniform(0.0, side, size=(config.L, 2))
    return Geometry(ap, ue, zones, seed)


def large_scale(geometry: Geometry, model: PathLossModel):
    """Return ``(beta, zeta, theta)`` for the given node placement.

    ``theta[m, l]`` is the bearing of zone ``l`` seen from AP ``m`` measured
    from the +x axis, in (-pi, pi].
    """
    d_ue = np.linalg.norm(geometry.ap_pos[:, None, :] - geometry.ue_pos[None, :, :], axis=-1)
    diff = geometry.zone_pos[None, :, :] - geometry.ap_pos[:, None, :]
    d_zone = np.linalg.norm(diff, axis=-1)
    beta = model.gain(d_ue)
    zeta = model.gain(d_zone)
    theta = np.arctan2(diff[..., 1], diff[..., 0])
    coincident = d_zone == 0.0
    if np.any(coincident):
        warnings.warn(f"{int(coincident.sum())} AP/zone pair(s) coincide; bearing set to 0")
        theta = np.where(coincident, 0.0, theta)
    # atan2 returns -pi for (-0.0, negative x); fold onto +pi
    theta = np.where(theta <= -np.pi, np.pi, theta)
    return beta, zeta, theta


def lmmse_gamma(beta, tau_t: int, rho_t: float):
    """Per-antenna variance of the LMMSE channel estimate."""
    beta = np.asarray(beta, dtype=float)
    if np.any(beta < 0):
        raise ValueError("beta must be non-negative")
    snr = tau_t * rho_t * beta
    out = snr * beta / (snr + 1.0)
    return float(out) if out.ndim == 0 else out


def array_response(theta: float, N: int, spacing_ratio: float = 0.5) -> np.ndarray:
    n = np.arange(N)
    return np.exp(1j * 2.0 * np.pi * spacing_ratio * n * np.sin(theta))


def array_gain(theta1, theta2, N: int, spacing_ratio: float = 0.5):
    """|a(theta1)^H a(theta2)|^2, broadcasting over the angle arguments."""
    n = np.arange(N)
    phase = 2.0 * np.pi * spacing_ratio * (np.sin(theta2) - np.sin(theta1))
    s = np.exp(1j * np.multiply.outer(phase, n)).sum(axis=-1)
    return np.abs(s) ** 2


def dirichlet_gain(theta1, theta2, N: int, spacing_ratio: float = 0.5):
    """Closed-form counterpart of :func:`array_gain` (squared Dirichlet kernel)."""
    x = np.pi * spacing_ratio * (np.sin(theta1) - np.sin(theta2))
    den = np.sin(x)
    near = np.abs(den) < 1e-12  # main or grating lobe: |sin(Nx)/sin(x)| -> N
    safe = np.where(near, 1.0, den)
    return np.where(near, float(N * N), (np.sin(N * x) / safe) ** 2)


def array_gain_table(theta: np.ndarray, N: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """Table ``G[m, l, l']`` of array gains between the zone bearings of each AP."""
    table = array_gain(theta[:, :, None], theta[:, None, :], N, spacing_ratio)
    L = theta.shape[1]
    idx = np.arange(L)
    table[:, idx, idx] = float(N * N)
    return table


def channel_stats(geometry: Geometry, config: SystemConfig, model: PathLossModel | None = None) -> ChannelStats:
    model = model or PathLossModel()
    beta, zeta, theta = large_scale(geometry, model)
    gamma = lmmse_gamma(beta, config.tau_t, config.rho_t)
    gain = array_gain_table(theta, config.N, config.spacing_ratio)
    return ChannelStats(beta, np.asarray(gamma), zeta, theta, gain, config.N)


def make_scenario(config: SystemConfig, seed: int, model: PathLossModel | None = None):
    geometry = generate_geometry(config, seed)
    return geometry, channel_stats(geometry, config, model)


# -- serialization ---------------------------------------------------------

_SYSTEM_KEYS = ("M", "N", "K", "L", "rho", "rho_t", "tau", "tau_t", "nu", "kappa",
                "varsigma", "area_side", "spacing_ratio")
_PATHLOSS_KEYS = {"ref_db": "reference_loss_db", "d0": "reference_distance",
                  "exponent": "exponent", "min_dist": "min_distance",
                  "noise_dbm": "noise_power_dbm"}


@dataclass
class ScenarioDocument:
    system: SystemConfig = field(default_factory=SystemConfig)
    pathloss: PathLossModel = field(default_factory=PathLossModel)
    seed: int = 0

    def to_dict(self) -> dict:
        sys_d = asdict(self.system)
        pl = asdict(self.pathloss)
        return {
            "system": {k: sys_d[k] for k in _SYSTEM_KEYS},
            "pathloss": {short: pl[long] for short, long in _PATHLOSS_KEYS.items()},
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioDocument":
        unknown = set(doc) - {"system", "pathloss", "seed"}
        if unknown:
            raise ValueError(f"unknown top-level keys: {sorted(unknown)}")
        sys_in = dict(doc.get("system", {}))
        bad = set(sys_in) - set(_SYSTEM_KEYS)
        if bad:
            raise ValueError(f"unknown system keys: {sorted(bad)}")
        for k in ("M", "N", "K", "L", "tau"):
            if k in sys_in:
                sys_in[k] = int(sys_in[k])
        pl_in = doc.get("pathloss", {})
        bad = set(pl_in) - set(_PATHLOSS_KEYS)
        if bad:
            raise ValueError(f"unknown pathloss keys: {sorted(bad)}")
        pl = PathLossModel(**{_PATHLOSS_KEYS[k]: float(v) for k, v in pl_in.items()})
        return cls(SystemConfig(**sys_in), pl, int(doc.get("seed", 0)))
