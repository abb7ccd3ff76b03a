"""Exact multiply-add accounting for the scan kernels."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class OpCounter:
    """Integer tallies, one per kind of work.

    All multiply-add fields count per sequence row, so a batch of ``B``
    sequences contributes ``B`` times the single-sequence figure.
    """

    state_transition: int = 0   # low-rank U (V^T h) applications
    dense_transition: int = 0   # materialised d x d contrast path
    input_injection: int = 0    # B x
    output_map: int = 0         # C h
    skip: int = 0               # D * x
    decay: int = 0              # passive decay on unselected steps
    selection: int = 0          # comparisons spent choosing top-k per segment
    full_updates: int = 0       # steps that received the full ODE update
    decay_updates: int = 0      # steps that only decayed
    steps: int = 0

    def __add__(self, other: "OpCounter") -> "OpCounter":
        return OpCounter(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def merge(self, other: "OpCounter") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    @property
    def multiply_adds(self) -> int:
        return (self.state_transition + self.dense_transition + self.input_injection
                + self.output_map + self.skip + self.decay)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["multiply_adds"] = self.multiply_adds
        return out
