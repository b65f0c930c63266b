"""Heston model parameters and Euler sample paths.

Discretisation (one step, full truncation ``v+ = max(v, 0)``)::

    log S[k+1] = log S[k] + (r - v+/2) dt + sqrt(v+ dt) (sqrt(1-rho^2) Zs[k] + rho Zv[k])
    V[k+1]     = V[k] + kappa (theta - v+) dt + sigma sqrt(v+ dt) Zv[k]

where ``v+`` is taken from ``V[k]`` and the return over ``(k, k+1]`` shares
its variance shock ``Zv[k]`` with the variance increment over the same
interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidParameterError
from .rng import generator


@dataclass(frozen=True)
class HestonParams:
    """Heston parameters, all rates per unit of ``dt`` (one trading day by default).

    Attributes
    ----------
    kappa : float
        Mean-reversion speed of the variance.
    theta : float
        Long-run variance.
    sigma : float
        Volatility of variance.
    rho : float
        Correlation between price and variance shocks, strictly inside (-1, 1).
    r : float
        Risk-free drift of the log price.
    """

    kappa: float
    theta: float
    sigma: float
    rho: float
    r: float = 0.0

    def __post_init__(self):
        for name in ("kappa", "theta", "sigma", "rho", "r"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InvalidParameterError(f"{name} must be finite, got {value!r}")
        if self.kappa <= 0 or self.theta <= 0:
            raise InvalidParameterError(
                f"kappa and theta must be > 0 (got {self.kappa}, {self.theta})"
            )
        # sigma == 0 is the deterministic-variance limit, used by the filter's gain-free checks
        if self.sigma < 0:
            raise InvalidParameterError(f"sigma must be >= 0, got {self.sigma}")
        if not -1.0 < self.rho < 1.0:
            raise InvalidParameterError(f"rho must lie in (-1, 1), got {self.rho}")

    def feller_satisfied(self) -> bool:
        return 2.0 * self.kappa * self.theta > self.sigma**2

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.kappa, self.theta, self.sigma, self.rho)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kappa": self.kappa,
            "theta": self.theta,
            "sigma": self.sigma,
            "rho": self.rho,
            "r": self.r,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HestonParams":
        version = doc.get("schema_version")
        if version != 1:
            raise InvalidParameterError(f"unsupported params schema_version {version!r}")
        try:
            return cls(
                kappa=float(doc["kappa"]),
                theta=float(doc["theta"]),
                sigma=float(doc["sigma"]),
                rho=float(doc["rho"]),
                r=float(doc.get("r", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidParameterError(f"malformed params document: {exc}") from exc


@dataclass(frozen=True)
class SimConfig:
    s0: float = 100.0
    v0: float = 0.0001
    n_steps: int = 251
    dt: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (self.s0 > 0 and math.isfinite(self.s0)):
            raise InvalidParameterError(f"s0 must be > 0, got {self.s0}")
        if not (self.v0 >= 0 and math.isfinite(self.v0)):
            raise InvalidParameterError(f"v0 must be >= 0, got {self.v0}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidParameterError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise InvalidParameterError(f"dt must be > 0, got {self.dt}")
        if self.seed < 0:
            raise InvalidParameterError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True, eq=False)
class PricePath:
    """A discrete price series with an optional latent variance series."""

    prices: np.ndarray
    variances: np.ndarray | None = None
    dt: float = 1.0

    def __post_init__(self):
        prices = np.ascontiguousarray(self.prices, dtype=np.float64)
        if prices.ndim != 1 or prices.size < 1:
            raise InvalidParameterError("prices must be a non-empty 1-d series")
        if not np.all(np.isfinite(prices)) or np.any(prices <= 0):
            raise InvalidParameterError("all prices must be finite and > 0")
        object.__setattr__(self, "prices", prices)
        if self.variances is not None:
            var = np.ascontiguousarray(self.variances, dtype=np.float64)
            if var.shape != prices.shape:
                raise InvalidParameterError(
                    f"variance length {var.size} does not match price length {prices.size}"
                )
            if not np.all(np.isfinite(var)) or np.any(var < 0):
                raise InvalidParameterError("variances must be finite and >= 0")
            object.__setattr__(self, "variances", var)
        if not self.dt > 0:
            raise InvalidParameterError(f"dt must be > 0, got {self.dt}")

    def __len__(self) -> int:
        return self.prices.size

    @property
    def n_steps(self) -> int:
        return self.prices.size - 1

    def __eq__(self, other):
        if not isinstance(other, PricePath):
            return NotImplemented
        if self.dt != other.dt or not np.array_equal(self.prices, other.prices):
            return False
        if (self.variances is None) != (other.variances is None):
            return False
        return self.variances is None or np.array_equal(self.variances, other.variances)

    __hash__ = None


def draw_normals(seed: int, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``(Zs, Zv)`` pair consumed by one simulated path."""
    z = generator(seed).standard_normal((2, n_steps))
    return z[0], z[1]


def _clamped_variances(var: np.ndarray) -> np.ndarray:
    # stored series is the truncated variance actually used by the scheme
    return np.maximum(var, 0.0)


def simulate_heston(
    params: HestonParams,
    cfg: SimConfig,
    normals: tuple[np.ndarray, np.ndarray] | None = None,
) -> PricePath:
    """Simulate one Euler path of the Heston model.

    ``normals`` injects the ``(Zs, Zv)`` shocks directly (each of length
    ``cfg.n_steps``); otherwise they are drawn from ``cfg.seed``.
    """
    if not isinstance(params, HestonParams):
        raise InvalidParameterError("params must be a HestonParams")
    if normals is None:
        zs, zv = draw_normals(cfg.seed, cfg.n_steps)
    else:
        zs, zv = (np.asarray(z, dtype=np.float64) for z in normals)
        if zs.shape != (cfg.n_steps,) or zv.shape != (cfg.n_steps,):
            raise InvalidParameterError("injected normals must each have length n_steps")
    log_s, var = _kernels.heston_paths(
        np.ascontiguousarray(zs[None, :]),
        np.ascontiguousarray(zv[None, :]),
        math.log(cfg.s0),
        float(cfg.v0),
        params.kappa,
        params.theta,
        params.sigma,
        params.rho,
        params.r,
        float(cfg.dt),
    )
    return PricePath(np.exp(log_s[0]), _clamped_variances(var[0]), cfg.dt)


def simulate_batch(params: HestonParams, cfg: SimConfig, count: int) -> list[PricePath]:
    """``count`` independent paths seeded ``cfg.seed, cfg.seed + 1, ...``."""
    if int(count) != count or count < 1:
        raise InvalidParameterError(f"count must be a positive integer, got {count}")
    draws = [draw_normals(cfg.seed + i, cfg.n_steps) for i in range(count)]
    zs = np.ascontiguousarray(np.stack([d[0] for d in draws]))
    zv = np.ascontiguousarray(np.stack([d[1] for d in draws]))
    log_s, var = _kernels.heston_paths(
        zs,
        zv,
        math.log(cfg.s0),
        float(cfg.v0),
        params.kappa,
        params.theta,
        params.sigma,
        params.rho,
        params.r,
        float(cfg.dt),
    )
    return [
        PricePath(np.exp(log_s[i]), _clamped_variances(var[i]), cfg.dt) for i in range(count)
    ]


def log_returns(path: PricePath) -> np.ndarray:
    return np.diff(np.log(path.prices))
