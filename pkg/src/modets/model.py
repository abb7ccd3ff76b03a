"""The forecasting network: tokenizer, encoder blocks, forecast head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .counters import OpCounter
from .numerics import Parameter, Tensor, as_tensor, exp, no_grad, silu
from .params import FactorGenerator, GeneratorConfig, default_rank, init_factors
from .ssm import (
    SegmentPlan,
    causal_conv1d,
    recurrent_scan_dense,
    selective_scan_segmented,
    zoh_discretize,
)

BLOCK_KINDS = ("mode_ode", "vanilla_mamba", "linear")


@dataclass
class ModelConfig:
    v: int = 7
    lookback: int = 96
    horizon: int = 96
    d_model: int = 16
    d_state: int = 16
    rank: int | None = None
    n_layers: int = 2
    ode_steps: int = 4
    ode_method: str = "heun"
    segment_length: int = 8
    k_per_segment: int | None = None
    block_kind: str = "mode_ode"
    ode_mode: str = "dynamic"
    conv_width: int = 4
    clamp: float | None = None
    lambda_reg: float = 0.01
    delta_source: str = "learned"
    delta_min: float = 1e-3
    delta_max: float = 10.0

    def __post_init__(self):
        if self.rank is None:
            self.rank = default_rank(self.d_state)
        if self.k_per_segment is None:
            self.k_per_segment = self.segment_length
        self.validate()

    def validate(self) -> None:
        errs = []
        if self.horizon < 1:
            errs.append("horizon must be >= 1")
        if self.lookback < self.conv_width:
            errs.append("lookback must be >= conv_width")
        if self.segment_length < 1:
            errs.append("segment_length must be >= 1")
        if not 0 <= self.k_per_segment <= self.segment_length:
            errs.append("k_per_segment must lie in [0, segment_length]")
        if not 1 <= self.rank <= self.d_state:
            errs.append("rank must lie in [1, d_state]")
        if self.block_kind not in BLOCK_KINDS:
            errs.append(f"block_kind must be one of {BLOCK_KINDS}")
        if self.ode_mode not in ("static", "dynamic"):
            errs.append("ode_mode must be static or dynamic")
        if self.clamp is not None and not 0 < self.clamp < 1:
            errs.append("clamp must lie in (0, 1)")
        if self.lambda_reg < 0:
            errs.append("lambda_reg must be >= 0")
        if min(self.v, self.d_model, self.d_state, self.ode_steps, self.conv_width) < 1:
            errs.append("sizes must be positive")
        if errs:
            raise ValueError("; ".join(errs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    forecast: Tensor
    states: Tensor | None       # hidden trajectory of the final block, (B, L, d)
    counter: OpCounter


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng, name: str, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else _uniform(rng, n_in, (n_in, n_out))
        self.w = Parameter(w, name=f"{name}.w")
        self.b = Parameter(np.zeros(n_out), name=f"{name}.b")

    def __call__(self, x) -> Tensor:
        return as_tensor(x) @ self.w + self.b

    def named_parameters(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]


class EncoderBlock:
    """conv -> SiLU -> selective low-rank ODE scan -> gate -> projection, plus residual."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, name: str):
        self.cfg = cfg
        self.name = name
        dm, d = cfg.d_model, cfg.d_state
        self.in_proj = Linear(dm, dm, rng, f"{name}.in_proj")
        self.gate_proj = Linear(dm, dm, rng, f"{name}.gate_proj")
        self.out_proj = Linear(dm, dm, rng, f"{name}.out_proj")
        w = cfg.conv_width
        self.conv_w = Parameter(_uniform(rng, w, (w, dm)), name=f"{name}.conv.w")
        self.conv_b = Parameter(np.zeros(dm), name=f"{name}.conv.b")
        gcfg = GeneratorConfig(d=d, r=cfg.rank, v_in=dm, v_out=dm, mode=cfg.ode_mode,
                               delta_source=cfg.delta_source, delta_min=cfg.delta_min,
                               delta_max=cfg.delta_max,
                               transition=cfg.block_kind != "vanilla_mamba")
        self.generator: FactorGenerator = init_factors(gcfg, rng, prefix=f"{name}.")
        # passive decay (selective scan) or diagonal A (vanilla path): a = -exp(a_log) in [-1, -0.1]
        self.a_log = Parameter(np.log(rng.uniform(0.1, 1.0, d)), name=f"{name}.a_log")

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for lin in (self.in_proj, self.gate_proj, self.out_proj):
            out += lin.named_parameters()
        out += [(self.conv_w.name, self.conv_w), (self.conv_b.name, self.conv_b)]
        out += self.generator.named_parameters(f"{self.name}.")
        out.append((self.a_log.name, self.a_log))
        return out

    def step_sizes(self, u: Tensor, deltas: np.ndarray | None) -> Tensor:
        gen = self.generator
        if gen.cfg.delta_source == "learned":
            return gen.learned_delta(u)
        if deltas is None:
            deltas = np.ones(u.shape[:-1])
        return Tensor(np.asarray(deltas, dtype=u.data.dtype)) * gen.time_scale()

    def selection_scores(self, u: Tensor) -> np.ndarray:
        """Per-step relevance in [0, 1): tanh of the RMS activation."""
        rms = np.sqrt(np.mean(u.data ** 2, axis=-1))
        return np.tanh(rms)

    def __call__(self, tokens, deltas=None, counter: OpCounter | None = None,
                 return_states: bool = False):
        cfg = self.cfg
        tokens = as_tensor(tokens)
        u = silu(causal_conv1d(self.in_proj(tokens), self.conv_w, self.conv_b))
        delta = self.step_sizes(u, deltas)
        a_neg = exp(self.a_log) * -1.0
        if cfg.block_kind == "vanilla_mamba":
            f = self.generator.factors(u, delta)
            a_bar, b_bar = zoh_discretize(a_neg, f.B, delta.reshape(delta.shape + (1,)))
            s, states = recurrent_scan_dense(a_bar, b_bar, f.C, f.D, u, counter=counter,
                                             return_states=True)
        else:
            f = self.generator.factors(u, delta)
            plan = SegmentPlan.build(self.selection_scores(u), cfg.segment_length, cfg.k_per_segment)
            s, _, states = selective_scan_segmented(
                f, u, plan, a_decay=a_neg, ode_steps=cfg.ode_steps, method=cfg.ode_method,
                alpha_max=cfg.clamp, counter=counter, return_states=True)
        g = s * silu(self.gate_proj(tokens))
        out = self.out_proj(g) + tokens
        return (out, states) if return_states else out


class LinearBlock:
    """Ablation block: a single residual affine map per token."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, name: str):
        self.name = name
        self.proj = Linear(cfg.d_model, cfg.d_model, rng, f"{name}.proj")

    def named_parameters(self):
        return self.proj.named_parameters()

    def __call__(self, tokens, deltas=None, counter=None, return_states: bool = False):
        tokens = as_tensor(tokens)
        out = self.proj(tokens) + tokens
        return (out, None) if return_states else out


class ModeModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        tok_seq, head_seq, block_seq = ss.spawn(3)
        tok_rng = np.random.default_rng(tok_seq)
        head_rng = np.random.default_rng(head_seq)
        self.tokenizer = Linear(cfg.v, cfg.d_model, tok_rng, "tokenizer")
        self.head_time = Parameter(_uniform(head_rng, cfg.lookback, (cfg.horizon, cfg.lookback)),
                                   name="head.time.w")
        self.head_time_b = Parameter(np.zeros((cfg.horizon, 1)), name="head.time.b")
        self.head_feat = Linear(cfg.d_model, cfg.v, head_rng, "head.feat")
        self.blocks = []
        for i, bs in enumerate(block_seq.spawn(cfg.n_layers)):
            rng = np.random.default_rng(bs)
            cls = LinearBlock if cfg.block_kind == "linear" else EncoderBlock
            self.blocks.append(cls(cfg, rng, f"blocks.{i}"))
        self.norm_stats = None

    # -- parameters -------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = self.tokenizer.named_parameters()
        for blk in self.blocks:
            out += blk.named_parameters()
        out += [(self.head_time.name, self.head_time), (self.head_time_b.name, self.head_time_b)]
        out += self.head_feat.named_parameters()
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing = sorted(set(named) - set(state))
            extra = sorted(set(state) - set(named))
            raise KeyError(f"state mismatch; missing={missing[:5]} extra={extra[:5]}")
        for n, p in named.items():
            arr = np.asarray(state[n], dtype=p.data.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    # -- forward pieces -----------------------------------------------------------
    def tokenize_embed(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.cfg.v:
            raise ValueError(f"expected {self.cfg.v} variates, got {x.shape[-1]}")
        return self.tokenizer(x)

    def forecast_head(self, tokens) -> Tensor:
        tokens = as_tensor(tokens)
        if tokens.shape[-2] != self.cfg.lookback:
            raise ValueError(f"expected {self.cfg.lookback} steps, got {tokens.shape[-2]}")
        z = self.head_time @ tokens + self.head_time_b
        return self.head_feat(z)

    def forward(self, x, deltas=None, counter: OpCounter | None = None) -> ForwardOutput:
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.lookback, self.cfg.v):
            raise ValueError(f"expected (batch, {self.cfg.lookback}, {self.cfg.v}), got {x.shape}")
        counter = counter if counter is not None else OpCounter()
        z = self.tokenize_embed(x)
        states = None
        for blk in self.blocks:
            z, states = blk(z, deltas=deltas, counter=counter, return_states=True)
        return ForwardOutput(self.forecast_head(z), states, counter)

    def __call__(self, x, deltas=None) -> Tensor:
        return self.forward(x, deltas).forecast

    def predict(self, x, deltas=None, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        outs = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                d = None if deltas is None else deltas[i:i + batch_size]
                outs.append(self.forward(x[i:i + batch_size], d).forecast.data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, self.cfg.horizon, self.cfg.v))


def model_forward(m: ModeModel, x, timestamps=None, median_interval: float | None = None) -> Tensor:
    """Forecast (B, H, V) from lookback windows (B, L, V); timestamps feed the step sizes."""
    deltas = None
    if timestamps is not None:
        from .params import delta_from_timestamps
        deltas = delta_from_timestamps(timestamps, median_interval, m.cfg.delta_min, m.cfg.delta_max)
    return m.forward(x, deltas).forecast


def build_variant(cfg: ModelConfig, seed: int = 0) -> ModeModel:
    if cfg.block_kind not in BLOCK_KINDS:
        raise ValueError(f"unknown block kind {cfg.block_kind!r}")
    return ModeModel(cfg, seed)
