"""Generation of the low-rank factors and step sizes, static or per step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Mlp, Parameter, Tensor, as_tensor, clamp, concat, exp, softplus
from .ssm import LowRankFactors

MODES = ("static", "dynamic")
DELTA_SOURCES = ("learned", "timestamps")


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class GeneratorConfig:
    d: int
    r: int | None = None
    v_in: int = 1
    v_out: int = 1
    mode: str = "dynamic"
    delta_source: str = "learned"
    delta_min: float = 1e-3
    delta_max: float = 10.0
    hidden: int | None = None
    # False for the diagonal (vanilla) path, which only needs B and C
    transition: bool = True
    # initial step sizes are drawn log-uniformly from this range
    delta_init: tuple[float, float] = (0.01, 0.1)

    def __post_init__(self):
        if self.r is None:
            self.r = default_rank(self.d)
        if not 1 <= self.r <= self.d:
            raise ValueError(f"rank must satisfy 1 <= r <= d, got r={self.r}, d={self.d}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.delta_source not in DELTA_SOURCES:
            raise ValueError(f"delta_source must be one of {DELTA_SOURCES}")
        if not 0 < self.delta_min <= self.delta_max:
            raise ValueError("need 0 < delta_min <= delta_max")
        if self.hidden is None:
            self.hidden = 2 * self.d


def default_rank(d: int) -> int:
    return math.ceil(d / 2)


def rank_ladder(d: int) -> list[int]:
    """The quarter / half / full rank settings used in ablations."""
    return sorted({math.ceil(d / 4), math.ceil(d / 2), d})


class FactorGenerator:
    """Learned parameters that produce :class:`LowRankFactors` for each step."""

    def __init__(self, cfg: GeneratorConfig, params: dict[str, Parameter],
                 mlps: dict[str, Mlp] | None = None):
        self.cfg = cfg
        self.params = params
        self.mlps = mlps or {}

    def parameters(self) -> list[Parameter]:
        out = list(self.params.values())
        for name in ("U", "V", "B", "C"):
            if name in self.mlps:
                out += self.mlps[name].parameters()
        return out

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = [(prefix + k, p) for k, p in self.params.items()]
        for name in ("U", "V", "B", "C"):
            if name in self.mlps:
                for i, (w, b) in enumerate(zip(self.mlps[name].weights, self.mlps[name].biases)):
                    out += [(f"{prefix}f_{name}.w{i}", w), (f"{prefix}f_{name}.b{i}", b)]
        return out

    # -- step sizes -----------------------------------------------------------
    def learned_delta(self, x) -> Tensor:
        """clamp(softplus(w . x + b), delta_min, delta_max) for every step in ``x``."""
        x = as_tensor(x)
        pre = x @ self.params["delta_w"] + self.params["delta_b"]
        return clamp(softplus(pre), self.cfg.delta_min, self.cfg.delta_max)

    def time_scale(self) -> Tensor:
        """Learned positive conversion from normalised time gaps to ODE time."""
        return softplus(self.params["time_scale"])

    # -- factors ----------------------------------------------------------------
    def factors(self, x, delta) -> LowRankFactors:
        cfg = self.cfg
        x = as_tensor(x)
        D = self.params.get("D")
        if cfg.mode == "static":
            p = self.params
            U, V = (p["U"], p["V"]) if cfg.transition else self._no_transition()
            return LowRankFactors(U, V, p["B"], p["C"], D, delta)
        delta = as_tensor(delta)
        if x.shape[-1] != cfg.v_in:
            raise ValueError(f"token width {x.shape[-1]} != v_in={cfg.v_in}")
        z = concat([x, delta.reshape(delta.shape + (1,))], axis=-1)
        lead = x.shape[:-1]
        if cfg.transition:
            U = self.mlps["U"](z).reshape(lead + (cfg.d, cfg.r))
            V = self.mlps["V"](z).reshape(lead + (cfg.d, cfg.r))
        else:
            U, V = self._no_transition()
        B = self.mlps["B"](z).reshape(lead + (cfg.d, cfg.v_in))
        C = self.mlps["C"](z).reshape(lead + (cfg.v_out, cfg.d))
        return LowRankFactors(U, V, B, C, D, delta)

    def _no_transition(self):
        z = Tensor(np.zeros((self.cfg.d, self.cfg.r)))
        return z, z


def init_factors(cfg: GeneratorConfig, seed=0, prefix: str = "") -> FactorGenerator:
    """Initialise a generator.

    U and V are drawn from uniform(+-1/sqrt(d)) and scaled by 1/sqrt(r), which
    keeps ||U V^T||_2 well below one; B and C use uniform(+-1/sqrt(d)); the
    elementwise skip D starts at 1.  Dynamic generators start out emitting
    exactly such a draw (it becomes the output bias) plus a small
    input-dependent perturbation.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d, r, vi, vo = cfg.d, cfg.r, cfg.v_in, cfg.v_out
    bd = 1.0 / math.sqrt(d)
    U = rng.uniform(-bd, bd, (d, r)) / math.sqrt(r)
    V = rng.uniform(-bd, bd, (d, r)) / math.sqrt(r)
    B = rng.uniform(-bd, bd, (d, vi))
    C = rng.uniform(-bd, bd, (vo, d))
    lo, hi = cfg.delta_init
    delta0 = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    params: dict[str, Parameter] = {}
    if vi == vo:
        params["D"] = Parameter(np.ones(vi), name=prefix + "D")
    if cfg.delta_source == "learned":
        params["delta_w"] = Parameter(rng.uniform(-bd, bd, vi) * 0.1, name=prefix + "delta_w")
        params["delta_b"] = Parameter(inverse_softplus(delta0), name=prefix + "delta_b")
    else:
        params["time_scale"] = Parameter(inverse_softplus(delta0), name=prefix + "time_scale")
    mlps = {}
    parts = [("U", U), ("V", V)] if cfg.transition else []
    parts += [("B", B), ("C", C)]
    if cfg.mode == "static":
        for name, val in parts:
            params[name] = Parameter(val, name=prefix + name)
    else:
        for name, val in parts:
            net = Mlp.init([vi + 1, cfg.hidden, val.size], rng, name=f"{prefix}f_{name}", out_scale=0.1)
            net.biases[-1].data[...] = val.reshape(-1)
            mlps[name] = net
    return FactorGenerator(cfg, params, mlps)


def generate_factors(gen: FactorGenerator, x_t, delta_t) -> LowRankFactors:
    """Factors for one step (or a whole stack of steps) given token features and delta."""
    return gen.factors(x_t, delta_t)


def delta_from_timestamps(times, median_interval: float | None = None,
                          delta_min: float = 1e-3, delta_max: float = 10.0) -> np.ndarray:
    """Gap-to-median ratios along the last axis; the first step gets 1.0.

    Timestamps must be strictly increasing along the last axis.
    """
    times = np.asarray(times, dtype=np.float64)
    gaps = np.diff(times, axis=-1)
    if np.any(gaps <= 0):
        raise ValueError("timestamps must be strictly increasing")
    if median_interval is None:
        median_interval = float(np.median(gaps)) if gaps.size else 1.0
    if median_interval <= 0:
        raise ValueError("median interval must be positive")
    first = np.ones(times.shape[:-1] + (1,))
    ratios = np.concatenate([first, gaps / median_interval], axis=-1)
    return np.clip(ratios, delta_min, delta_max)


def compute_delta(gen: FactorGenerator, x_t=None, timestamps: tuple[float, float] | None = None,
                  median_interval: float = 1.0) -> float:
    """Step size for a single token: learned projection or a timestamp gap."""
    cfg = gen.cfg
    if cfg.delta_source == "timestamps":
        if timestamps is None:
            raise ValueError("timestamp delta source needs a (previous, current) pair")
        prev, cur = timestamps
        if not cur > prev:
            raise ValueError("timestamps must be strictly increasing")
        return float(np.clip((cur - prev) / median_interval, cfg.delta_min, cfg.delta_max))
    return float(gen.learned_delta(as_tensor(x_t)).data)


def decay_rates(a_log: Tensor) -> Tensor:
    """Strictly negative diagonal used for passive decay, a = -exp(a_log)."""
    return exp(a_log) * -1.0
