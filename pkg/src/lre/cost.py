"""Analytic FLOP and memory accounting for encoder schedules.

All counts are exact integers under a stamped convention (2 FLOPs per
multiply-add, 5 per softmax element). Memory is reported as activation
element counts, a dtype-independent proxy; the attention-matrix element
count is the quantity that separates the exact and approximate paths.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionKind
from .encoder import EncoderConfig, resolve_schedule
from .tensor import ConfigError


@dataclass(frozen=True)
class CountingConvention:
    multiply_add_flops: int = 2
    count_softmax: bool = True   # 5 FLOPs per attention-matrix element
    count_normalizer: bool = True


@dataclass
class BlockCost:
    flops_attn: int
    flops_proj: int
    flops_mlp: int
    attn_matrix_elems: int
    activation_elems: int
    params: int


@dataclass
class CostReport:
    per_block: list[BlockCost]
    flops_other: int       # stem, reductions, expansions, classifier head
    convention: CountingConvention = field(default_factory=CountingConvention)

    @property
    def flops_attn(self) -> int:
        return sum(b.flops_attn for b in self.per_block)

    @property
    def flops_proj(self) -> int:
        return sum(b.flops_proj for b in self.per_block)

    @property
    def flops_mlp(self) -> int:
        return sum(b.flops_mlp for b in self.per_block)

    @property
    def flops_total(self) -> int:
        return self.flops_attn + self.flops_proj + self.flops_mlp + self.flops_other

    @property
    def matrix_elems(self) -> int:
        return sum(b.attn_matrix_elems for b in self.per_block)

    @property
    def activation_elems(self) -> int:
        return sum(b.activation_elems for b in self.per_block)

    @property
    def params(self) -> int:
        return sum(b.params for b in self.per_block)


def attn_cost(kind: AttentionKind, n: int, dim: int, heads: int,
              conv: CountingConvention = CountingConvention()) -> dict[str, int]:
    """FLOPs and attention-matrix element count for one attention layer.

    Includes the Q/K/V and output projections. The matrix element count is
    heads * N^2 for the exact path and heads * d_head^2 for the approximation.
    """
    if dim % heads:
        raise ConfigError(f"heads={heads} does not divide dim={dim}")
    d_head = dim // heads
    ma = conv.multiply_add_flops
    proj = ma * 3 * n * dim * dim + ma * n * dim * dim
    if kind.variant == "dot":
        flops = ma * n * n * dim          # scores
        flops += ma * n * n * dim         # attention @ V
        if conv.count_softmax:
            flops += 5 * heads * n * n
        elems = heads * n * n
    else:
        flops = ma * n * dim * d_head     # K-feature transpose @ V, summed over heads
        flops += ma * n * dim * d_head    # Q-feature @ S
        if conv.count_normalizer:
            flops += 3 * n * dim
        elems = heads * d_head * d_head
    return {"flops": proj + flops, "matrix_elems": elems,
            "flops_proj": proj, "flops_attn": flops}


def _layer_activation_elems(kind: AttentionKind, n: int, dim: int, heads: int,
                            mlp_ratio: int) -> int:
    """Tensor elements allocated by one layer of the reference forward pass."""
    r = n + 1  # CLS included at runtime
    d_head = dim // heads
    base = (3 + 17 + 14) * r * dim + mlp_ratio * 3 * r * dim
    if kind.variant == "dot":
        return base + 3 * heads * r * r
    return base + 8 * r * dim + 2 * heads * d_head * d_head + 2 * r * heads


def _layer_params(dim: int, mlp_ratio: int) -> int:
    attn = 4 * dim * dim + dim  # bias only on the output projection
    norms = 4 * dim
    mlp = dim * mlp_ratio * dim + mlp_ratio * dim + mlp_ratio * dim * dim + dim
    return attn + norms + mlp


def model_cost(config: EncoderConfig, input_shape,
               conv: CountingConvention = CountingConvention(),
               no_reduction: bool = False) -> CostReport:
    """Full-schedule cost: attention + MLP per layer, plus stem, merges, head."""
    blocks = resolve_schedule(config, input_shape)
    if no_reduction:
        n0 = blocks[0].n_tokens
        blocks = [replace(b, n_tokens=n0) for b in blocks]
        if config.attention_policy == "mixed":
            from .attention import FeatureMap, select_attention
            fm = FeatureMap(config.feature_map)
            blocks = [replace(b, kind=select_attention(n0, b.dim, fm))
                      for b in blocks]
    ma = conv.multiply_add_flops
    per_block: list[BlockCost] = []
    other = 0

    # stem
    n0 = blocks[0].n_tokens
    k_elems = int(np.prod(config.stem.kernel))
    d0 = config.block_dim(0)
    other += ma * n0 * k_elems * config.stem.in_channels * d0
    stem_params = k_elems * config.stem.in_channels * d0 + d0
    stem_params += d0  # CLS
    if config.pos_embed == "learned":
        stem_params += (n0 + 1) * d0

    for bs in blocks:
        ac = attn_cost(bs.kind, bs.n_tokens, bs.dim, bs.heads, conv)
        mlp = ma * 2 * bs.n_tokens * bs.dim * config.mlp_ratio * bs.dim
        bc = BlockCost(
            flops_attn=ac["flops_attn"] * bs.layers,
            flops_proj=ac["flops_proj"] * bs.layers,
            flops_mlp=mlp * bs.layers,
            attn_matrix_elems=ac["matrix_elems"] if bs.layers else 0,
            activation_elems=_layer_activation_elems(
                bs.kind, bs.n_tokens, bs.dim, bs.heads, config.mlp_ratio) * bs.layers,
            params=_layer_params(bs.dim, config.mlp_ratio) * bs.layers,
        )
        if bs.b == 0:
            bc.params += stem_params
        if bs.b < len(blocks) - 1:
            next_n = blocks[bs.b + 1].n_tokens
            next_d = config.block_dim(bs.b + 1)
            if not no_reduction:
                if config.reduction == "conv":
                    k = 9 if bs.grid is not None else 2 * config.nu + 1
                    other += ma * next_n * k * bs.dim * bs.dim
                    bc.params += k * bs.dim * bs.dim + bs.dim
                elif config.reduction == "pool":
                    k = 9
                    other += next_n * k * bs.dim
                else:
                    other += ma * next_n * bs.n_tokens * bs.dim
                    bc.params += next_n * bs.n_tokens
            other += ma * next_n * bs.dim * next_d   # dimension expansion
            bc.params += bs.dim * next_d + next_d
        per_block.append(bc)

    d_last = blocks[-1].dim
    other += ma * d_last * config.num_classes
    per_block[-1].params += 2 * d_last  # final norm
    per_block[-1].params += d_last * config.num_classes + config.num_classes
    return CostReport(per_block=per_block, flops_other=other, convention=conv)


_POLICIES = ("mixed", "alldot", "allapprox")


def compare_schedules(config: EncoderConfig, input_shape,
                      conv: CountingConvention = CountingConvention()
                      ) -> list[tuple[str, CostReport]]:
    """Cost table rows for the three attention policies plus the no-merge variant."""
    rows = []
    for policy in _POLICIES:
        cfg = replace(config, attention_policy=policy)
        rows.append((policy, model_cost(cfg, input_shape, conv)))
    cfg = replace(config, attention_policy="mixed")
    rows.append(("noreduction", model_cost(cfg, input_shape, conv,
                                           no_reduction=True)))
    return rows


_COLUMNS = ("policy", "params", "matrix_elems", "flops_total", "activation_elems")


def emit_table(reports: list[tuple[str, CostReport]], fmt: str = "csv") -> str:
    if not reports:
        raise ConfigError("emit_table: no reports")
    fmt = fmt or "csv"
    rows = [[name, r.params, r.matrix_elems, r.flops_total, r.activation_elems]
            for name, r in reports]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_COLUMNS)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(_COLUMNS) + " |",
                 "|" + "|".join(["---"] * len(_COLUMNS)) + "|"]
        for row in rows:
            lines.append("| " + " | ".join(str(c) for c in row) + " |")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown table format {fmt!r}")


def parse_table_csv(text: str) -> list[dict[str, int | str]]:
    """Round-trip helper: parse a table emitted by emit_table back to numbers."""
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    for rec in reader:
        rows.append({k: (v if k == "policy" else int(v)) for k, v in rec.items()})
    return rows
