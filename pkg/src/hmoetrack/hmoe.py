"""Heterogeneous mixture-of-experts fusion layer.

One routing decision is made per token sequence (mean-pooled), the top-K
experts are evaluated and mixed with their full-softmax probabilities, and the
mixture is passed through a linear-attention chain:

    y1 = sum_n g_n E_n(T)
    y2 = (T W1)(T W2)^T                      L x L
    y3 = y2^T y1                             L x C
    y5 = softmax_rows(T W3) y3 W4            L x C
    out = T + y5
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hmoetrack import autodiff as ad
from hmoetrack.autodiff import ParamStore, Tensor
from hmoetrack.errors import ConfigError
from hmoetrack.tokens import TokenSequence

HETERO_WIDTHS = (4, 8, 16, 32, 64, 128, 256, 512)


def hetero_widths(max_exp: int) -> tuple[int, ...]:
    """Widths 2^d for d = 2 .. max_exp - 1."""
    if max_exp < 3:
        raise ConfigError("need at least one expert (max exponent >= 3)")
    return tuple(2**d for d in range(2, max_exp))


def parse_experts(spec: str) -> tuple[int, ...]:
    """``hetero`` / ``hetero:D`` / ``homo:WIDTH`` / ``homo:WIDTHxCOUNT``."""
    kind, _, arg = spec.partition(":")
    if kind == "hetero":
        return hetero_widths(int(arg)) if arg else HETERO_WIDTHS
    if kind == "homo":
        if not arg:
            raise ConfigError("homo experts need a width, e.g. homo:64")
        width, _, count = arg.partition("x")
        return (int(width),) * (int(count) if count else len(HETERO_WIDTHS))
    raise ConfigError(f"unknown expert spec {spec!r}")


@dataclass(frozen=True)
class GateResult:
    logits: Tensor
    probs: Tensor
    selected: tuple[int, ...]
    gates: Tensor

    @property
    def num_experts(self) -> int:
        return self.logits.size


def top_k_indices(logits: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest values; ties go to the lower index."""
    order = np.argsort(-np.asarray(logits), kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def gate_from_logits(logits: Tensor, k: int, renormalize: bool = False) -> GateResult:
    m = logits.size
    if k > m:
        raise ConfigError(f"top-K of {k} exceeds the {m} available experts")
    if k < 1:
        raise ConfigError("K must be at least 1")
    probs = ad.row_softmax(logits)
    selected = top_k_indices(logits.data, k)
    keep = np.zeros(m)
    keep[list(selected)] = 1.0
    gates = ad.mul(probs, Tensor(keep))
    if renormalize:
        gates = ad.scalar_mul(gates, ad.div(Tensor(1.0), ad.tsum(gates)))
    return GateResult(logits, probs, selected, gates)


def gate(tokens: Tensor, gate_w: Tensor, k: int, renormalize: bool = False) -> GateResult:
    """Clip-level routing: mean-pool all L rows, project to M logits, keep top-K."""
    pooled = ad.reshape(ad.mean(tokens, axis=0), (1, tokens.shape[1]))
    logits = ad.reshape(ad.matmul(pooled, gate_w), (gate_w.shape[1],))
    return gate_from_logits(logits, k, renormalize)


@dataclass
class Expert:
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor
    calls: int = 0

    @property
    def width(self) -> int:
        return self.w_in.shape[1]


def expert_forward(expert: Expert, tokens: Tensor) -> Tensor:
    expert.calls += 1
    hidden = ad.gelu(ad.add_bias(ad.matmul(tokens, expert.w_in), expert.b_in))
    return ad.add_bias(ad.matmul(hidden, expert.w_out), expert.b_out)


class ExpertBank:
    def __init__(self, experts: Sequence[Expert]):
        self.experts = list(experts)

    @classmethod
    def create(cls, widths: Sequence[int], dim: int, params: ParamStore,
               rng: np.random.Generator, prefix: str) -> "ExpertBank":
        widths = tuple(widths)
        if any(w < 1 or w & (w - 1) for w in widths):
            raise ConfigError(f"expert widths must be powers of two, got {widths}")
        experts = []
        for n, h in enumerate(widths):
            p = f"{prefix}.expert{n}"
            experts.append(Expert(
                params.add(f"{p}.w_in", rng.normal(0, 1 / np.sqrt(dim), (dim, h))),
                params.add(f"{p}.b_in", np.zeros(h)),
                params.add(f"{p}.w_out", rng.normal(0, 1 / np.sqrt(h), (h, dim))),
                params.add(f"{p}.b_out", np.zeros(dim)),
            ))
        return cls(experts)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(e.width for e in self.experts)

    def __len__(self) -> int:
        return len(self.experts)

    def __getitem__(self, n: int) -> Expert:
        return self.experts[n]

    def call_counts(self) -> list[int]:
        return [e.calls for e in self.experts]

    def reset_counts(self) -> None:
        for e in self.experts:
            e.calls = 0


def hmoe_mix(tokens: Tensor, bank: ExpertBank, result: GateResult) -> Tensor:
    """Gate-weighted sum over the selected experts only; unselected ones never run."""
    out = None
    for n in result.selected:
        term = ad.scalar_mul(expert_forward(bank[n], tokens), result.gates[n])
        out = term if out is None else ad.add(out, term)
    return out


def linear_attention(tokens: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return ad.matmul(ad.matmul(tokens, w1), ad.transpose(ad.matmul(tokens, w2)))


def fuse_chain(tokens: Tensor, y1: Tensor, y2: Tensor, w3: Tensor, w4: Tensor) -> Tensor:
    L = tokens.shape[0]
    if w3.shape[1] != L:
        raise ConfigError(f"W3 maps to {w3.shape[1]} columns but the sequence length is fixed at {L}")
    y3 = ad.matmul(ad.transpose(y2), y1)
    attn = ad.row_softmax(ad.matmul(tokens, w3))
    return ad.matmul(ad.matmul(attn, y3), w4)


@dataclass(frozen=True)
class FusionWeights:
    w1: Tensor
    w2: Tensor
    w3: Tensor
    w4: Tensor
    gate_w: Tensor


class HMoEFuse:
    """One fusion layer with its own expert bank and fusion weights."""

    def __init__(self, widths: Sequence[int], dim: int, seq_len: int, params: ParamStore,
                 rng: np.random.Generator, prefix: str = "hmoe0", top_k: int = 2,
                 renormalize: bool = False):
        if top_k > len(widths):
            raise ConfigError(f"top-K of {top_k} exceeds the {len(widths)} configured experts")
        self.top_k = top_k
        self.renormalize = renormalize
        self.seq_len = seq_len
        self.bank = ExpertBank.create(widths, dim, params, rng, prefix)
        s = 0.02
        self.weights = FusionWeights(
            w1=params.add(f"{prefix}.w1", rng.normal(0, s, (dim, dim))),
            w2=params.add(f"{prefix}.w2", rng.normal(0, s, (dim, dim))),
            w3=params.add(f"{prefix}.w3", rng.normal(0, s, (dim, seq_len))),
            w4=params.add(f"{prefix}.w4", np.zeros((dim, dim))),
            gate_w=params.add(f"{prefix}.gate", rng.normal(0, s, (dim, len(widths)))),
        )

    def __call__(self, seq: TokenSequence) -> tuple[TokenSequence, GateResult]:
        return hmoe_fuse_forward(seq, self.bank, self.weights, self.top_k, self.renormalize)


def hmoe_fuse_forward(seq: TokenSequence, bank: ExpertBank, weights: FusionWeights,
                      top_k: int = 2, renormalize: bool = False) -> tuple[TokenSequence, GateResult]:
    tv = seq.tokens
    result = gate(tv, weights.gate_w, top_k, renormalize)
    y1 = hmoe_mix(tv, bank, result)
    y2 = linear_attention(tv, weights.w1, weights.w2)
    y5 = fuse_chain(tv, y1, y2, weights.w3, weights.w4)
    out = TokenSequence(ad.add(tv, y5), seq.layout, seq.availability)
    return out, result


@dataclass(frozen=True)
class RoutingRecord:
    """One forward pass worth of routing telemetry."""

    step: int
    sequence_id: str
    missing_rate: float
    selected: tuple[int, ...]
    widths: tuple[int, ...]
    gate_values: tuple[float, ...]

    CSV_FIELDS = ("step", "sequence_id", "missing_rate", "selected_expert_indices",
                  "selected_widths", "gate_values")

    def to_row(self) -> dict:
        return {
            "step": self.step,
            "sequence_id": self.sequence_id,
            "missing_rate": f"{self.missing_rate:.6f}",
            "selected_expert_indices": " ".join(map(str, self.selected)),
            "selected_widths": " ".join(map(str, self.widths)),
            "gate_values": " ".join(f"{g:.6g}" for g in self.gate_values),
        }

    @classmethod
    def from_row(cls, row: dict) -> "RoutingRecord":
        ints = lambda s: tuple(int(v) for v in s.split())  # noqa: E731
        return cls(
            step=int(row["step"]),
            sequence_id=row["sequence_id"],
            missing_rate=float(row["missing_rate"]),
            selected=ints(row["selected_expert_indices"]),
            widths=ints(row["selected_widths"]),
            gate_values=tuple(float(v) for v in row["gate_values"].split()),
        )


def routing_record(step: int, sequence_id: str, seq: TokenSequence, result: GateResult,
                   bank: ExpertBank) -> RoutingRecord:
    return RoutingRecord(
        step=step,
        sequence_id=sequence_id,
        missing_rate=seq.missing_rate,
        selected=result.selected,
        widths=tuple(bank.widths[n] for n in result.selected),
        gate_values=tuple(float(result.gates.data[n]) for n in result.selected),
    )


def selection_histogram(records: Sequence[RoutingRecord], n_experts: int) -> list[int]:
    counts = Counter(i for r in records for i in r.selected)
    return [counts.get(n, 0) for n in range(n_experts)]
