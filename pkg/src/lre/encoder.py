"""Full encoder assembly: stem, attention/MLP blocks, reductions, classifier.

Four blocks by default; feature width doubles and tokens merge after each
of the first three. Attention per block is chosen by the policy: exact
when tokens are few, kernel approximation when they are many.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (AttentionKind, FeatureMap, mhsa_forward,
                        select_attention)
from .reduction import (ReductionSpec, expand_dim, init_reduction_weights,
                        reduce_tokens, reduced_count, reduced_grid)
from .tensor import ConfigError, Tensor, load_tensor, param, save_tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape) * std
    return np.clip(x, -2 * std, 2 * std)


@dataclass(frozen=True)
class StemSpec:
    """Modality-specific convolution mapping raw input to tokens."""
    kind: str = "seq1d"          # seq1d | grid2d
    in_channels: int = 1
    kernel: tuple[int, ...] = (9,)
    stride: tuple[int, ...] = (1,)
    pad: tuple[int, ...] | None = None  # default (k-1)//2 per axis

    def __post_init__(self):
        if self.kind not in ("seq1d", "grid2d"):
            raise ConfigError(f"unknown stem kind {self.kind!r}")
        nd = 1 if self.kind == "seq1d" else 2
        for f in ("kernel", "stride", "pad"):
            v = getattr(self, f)
            if v is None:
                continue
            if isinstance(v, int):
                v = (v,) * nd
            object.__setattr__(self, f, tuple(v))
            if len(getattr(self, f)) != nd:
                raise ConfigError(f"stem {f} must have {nd} entries")
        if self.pad is None:
            object.__setattr__(self, "pad", tuple((k - 1) // 2 for k in self.kernel))
        for k, s in zip(self.kernel, self.stride):
            if k < s:
                raise ConfigError("stem kernel must be >= stride")

    def token_shape(self, input_shape) -> tuple[int, ...]:
        dims = (input_shape,) if isinstance(input_shape, int) else tuple(input_shape)
        if len(dims) != len(self.kernel):
            raise ConfigError(f"input shape {dims} does not match stem {self.kind}")
        return tuple((n + 2 * p - k) // s + 1
                     for n, k, s, p in zip(dims, self.kernel, self.stride, self.pad))


@dataclass(frozen=True)
class EncoderConfig:
    num_classes: int
    stem: StemSpec
    variant: str = "custom"               # small | base | custom
    layers: tuple[int, ...] = (1, 2, 11, 2)
    d0: int = 96
    nu: int = 4
    heads: tuple[int, ...] = (1, 2, 4, 8)
    dims: tuple[int, ...] | None = None   # override for the per-block widths
    reduction: str = "conv"               # conv | pool | linear
    attention_policy: str = "mixed"       # mixed | alldot | allapprox
    feature_map: str = "elu"              # elu | relu | softplus
    mlp_ratio: int = 4
    mlp_act: str = "softplus"
    multilabel: bool = False
    pos_embed: str = "learned"            # learned | none

    def __post_init__(self):
        if len(self.layers) != len(self.heads):
            raise ConfigError("layers and heads schedules must have equal length")
        if self.attention_policy not in ("mixed", "alldot", "allapprox"):
            raise ConfigError(f"unknown policy {self.attention_policy!r}")
        if self.dims is not None and len(self.dims) != len(self.layers):
            raise ConfigError("dims override must match the number of blocks")

    @property
    def n_blocks(self) -> int:
        return len(self.layers)

    def block_dim(self, b: int) -> int:
        if self.dims is not None:
            return self.dims[b]
        return self.d0 * (2 ** b)

    @staticmethod
    def small(num_classes: int, stem: StemSpec, **kw) -> "EncoderConfig":
        return EncoderConfig(num_classes=num_classes, stem=stem, variant="small",
                             layers=(1, 2, 11, 2), **kw)

    @staticmethod
    def base(num_classes: int, stem: StemSpec, **kw) -> "EncoderConfig":
        return EncoderConfig(num_classes=num_classes, stem=stem, variant="base",
                             layers=(1, 3, 16, 3), **kw)


@dataclass(frozen=True)
class BlockSpec:
    b: int
    n_tokens: int              # excluding CLS
    dim: int
    layers: int
    heads: int
    kind: AttentionKind
    grid: tuple[int, int] | None = None


def attention_schedule(policy: str, blockspecs: list[BlockSpec],
                       feature_map: FeatureMap | None = None) -> list[AttentionKind]:
    fm = feature_map or FeatureMap("elu")
    if policy == "alldot":
        return [AttentionKind("dot")] * len(blockspecs)
    if policy == "allapprox":
        return [AttentionKind("approx", fm)] * len(blockspecs)
    return [select_attention(bs.n_tokens, bs.dim, fm) for bs in blockspecs]


def resolve_schedule(config: EncoderConfig, input_shape) -> list[BlockSpec]:
    """Per-block (N_b, D_b, attention kind) from the stem and reduction laws."""
    fm = FeatureMap(config.feature_map)
    toks = config.stem.token_shape(input_shape)
    grid = toks if config.stem.kind == "grid2d" else None
    n = int(np.prod(toks))
    specs = []
    for b in range(config.n_blocks):
        dim = config.block_dim(b)
        if dim % config.heads[b]:
            raise ConfigError(f"heads[{b}]={config.heads[b]} does not divide D_b={dim}")
        if config.attention_policy == "alldot":
            kind = AttentionKind("dot")
        elif config.attention_policy == "allapprox":
            kind = AttentionKind("approx", fm)
        else:
            kind = select_attention(n, dim, fm)
        specs.append(BlockSpec(b=b, n_tokens=n, dim=dim, layers=config.layers[b],
                               heads=config.heads[b], kind=kind, grid=grid))
        if b < config.n_blocks - 1:
            rspec = _reduction_spec(config, grid)
            n = reduced_count(n, rspec)
            if grid is not None:
                grid = reduced_grid(rspec)
    return specs


def _reduction_spec(config: EncoderConfig, grid) -> ReductionSpec:
    layout = "grid2d" if grid is not None else "seq1d"
    return ReductionSpec(kind=config.reduction, layout=layout,
                         grid=grid, nu=config.nu)


class Model:
    """Built encoder: weights plus the resolved schedule."""

    def __init__(self, config: EncoderConfig, input_shape, params: dict[str, Tensor],
                 blocks: list[BlockSpec]):
        self.config = config
        self.input_shape = input_shape
        self.params = params
        self.blocks = blocks

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x) -> tuple[Tensor, Tensor]:
        return encoder_forward(stem_forward(x, self), self)

    def logits(self, x) -> Tensor:
        cls, _ = self.forward(x)
        return classify(cls, self)


def build(config: EncoderConfig, input_shape, seed: int = 0,
          dtype=np.float32) -> Model:
    """Initialize all weights (truncated normal, std 0.02) for the schedule."""
    rng = np.random.default_rng(seed)
    blocks = resolve_schedule(config, input_shape)
    p: dict[str, Tensor] = {}
    d0 = config.block_dim(0)
    stem = config.stem
    kshape = stem.kernel + (stem.in_channels, d0)
    p["stem.w"] = param(trunc_normal(rng, kshape), dtype=dtype, name="stem.w")
    p["stem.b"] = param(np.zeros(d0), dtype=dtype, name="stem.b")
    p["cls"] = param(trunc_normal(rng, (1, d0)), dtype=dtype, name="cls")
    if config.pos_embed == "learned":
        p["pos"] = param(trunc_normal(rng, (blocks[0].n_tokens + 1, d0)),
                         dtype=dtype, name="pos")
    for bs in blocks:
        for l in range(bs.layers):
            pre = f"blk{bs.b}.l{l}"
            for ln in ("ln1", "ln2"):
                p[f"{pre}.{ln}.g"] = param(np.ones(bs.dim), dtype=dtype)
                p[f"{pre}.{ln}.b"] = param(np.zeros(bs.dim), dtype=dtype)
            for nm in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.attn.{nm}"] = param(trunc_normal(rng, (bs.dim, bs.dim)),
                                              dtype=dtype)
            p[f"{pre}.attn.bo"] = param(np.zeros(bs.dim), dtype=dtype)
            hidden = config.mlp_ratio * bs.dim
            p[f"{pre}.mlp.w1"] = param(trunc_normal(rng, (bs.dim, hidden)), dtype=dtype)
            p[f"{pre}.mlp.b1"] = param(np.zeros(hidden), dtype=dtype)
            p[f"{pre}.mlp.w2"] = param(trunc_normal(rng, (hidden, bs.dim)), dtype=dtype)
            p[f"{pre}.mlp.b2"] = param(np.zeros(bs.dim), dtype=dtype)
        if bs.b < len(blocks) - 1:
            rspec = _reduction_spec(config, bs.grid)
            for nm, t in init_reduction_weights(bs.dim, bs.n_tokens, rspec,
                                                rng, dtype).items():
                p[f"red{bs.b}.{nm}"] = t
            next_dim = config.block_dim(bs.b + 1)
            p[f"exp{bs.b}.w"] = param(trunc_normal(rng, (bs.dim, next_dim)),
                                      dtype=dtype)
            p[f"exp{bs.b}.b"] = param(np.zeros(next_dim), dtype=dtype)
    d_last = blocks[-1].dim
    p["final_ln.g"] = param(np.ones(d_last), dtype=dtype)
    p["final_ln.b"] = param(np.zeros(d_last), dtype=dtype)
    p["head.w"] = param(trunc_normal(rng, (d_last, config.num_classes)), dtype=dtype)
    p["head.b"] = param(np.zeros(config.num_classes), dtype=dtype)
    return Model(config, input_shape, p, blocks)


def stem_forward(raw, model: Model) -> Tensor:
    """Convolve raw input to tokens, prepend CLS, add positional embedding.

    raw: (L, C) / (B, L, C) for seq1d; (H, W, C) / (B, H, W, C) for grid2d.
    """
    cfg = model.config
    p = model.params
    x = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw))
    stem = cfg.stem
    if stem.kind == "seq1d":
        toks = T.conv1d(x, p["stem.w"], stride=stem.stride[0], pad=stem.pad[0])
    else:
        toks = T.conv2d(x, p["stem.w"], stride=stem.stride, pad=stem.pad)
        toks = T.reshape(toks, toks.shape[:-3]
                         + (toks.shape[-3] * toks.shape[-2], toks.shape[-1]))
    toks = T.add(toks, p["stem.b"])
    cls = p["cls"]
    if toks.data.ndim == 3:
        b = toks.shape[0]
        cls = T.reshape(cls, (1, 1, cls.shape[-1]))
        cls = T.add(cls, Tensor(np.zeros((b, 1, cls.shape[-1]), dtype=toks.dtype)))
    out = T.concat([cls, toks], axis=-2)
    if cfg.pos_embed == "learned":
        out = T.add(out, p["pos"])
    return out


def _mlp(x: Tensor, p: dict[str, Tensor], pre: str, act: str) -> Tensor:
    h = T.add(T.matmul(x, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"])
    if act == "relu":
        h = T.relu(h)
    elif act == "softplus":
        h = T.softplus(h)
    elif act == "elu":
        h = T.elu_plus_one(h)
    else:
        raise ConfigError(f"unknown mlp activation {act!r}")
    return T.add(T.matmul(h, p[f"{pre}.mlp.w2"]), p[f"{pre}.mlp.b2"])


def encoder_forward(tokens: Tensor, model: Model) -> tuple[Tensor, Tensor]:
    """Pre-norm residual blocks with reductions in between; returns (CLS, tokens)."""
    cfg = model.config
    p = model.params
    x = tokens
    for bs in model.blocks:
        tau = math.sqrt(bs.n_tokens + 1)
        for l in range(bs.layers):
            pre = f"blk{bs.b}.l{l}"
            normed = T.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            attn_w = {nm: p[f"{pre}.attn.{nm}"]
                      for nm in ("wq", "wk", "wv", "wo", "bo")}
            x = T.add(x, mhsa_forward(normed, attn_w, bs.kind, bs.heads, tau=tau))
            normed = T.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            x = T.add(x, _mlp(normed, p, pre, cfg.mlp_act))
        if bs.b < len(model.blocks) - 1:
            rspec = _reduction_spec(cfg, bs.grid)
            rw = {nm.split(".", 1)[1]: t for nm, t in p.items()
                  if nm.startswith(f"red{bs.b}.")}
            x = reduce_tokens(x, rspec, rw or None)
            x = expand_dim(x, {"w": p[f"exp{bs.b}.w"], "b": p[f"exp{bs.b}.b"]})
    x = T.layer_norm(x, p["final_ln.g"], p["final_ln.b"])
    lead = x.data.ndim - 2
    cls = T.index(x, (slice(None),) * lead + (0,))
    rest = T.index(x, (slice(None),) * lead + (slice(1, None),))
    return cls, rest


def classify(cls: Tensor, model: Model) -> Tensor:
    """Single affine map from the CLS embedding to class logits."""
    return T.add(T.matmul(cls, model.params["head.w"]), model.params["head.b"])


def decay_mask(params: dict[str, Tensor]) -> dict[str, bool]:
    """Weight decay applies to everything except norm affines and embeddings."""
    return {nm: not (".ln" in nm or nm.startswith("final_ln")
                     or nm in ("cls", "pos"))
            for nm in params}


# ---------------------------------------------------------------------------
# manifest + checkpoint

_STEM_KEYS = ("kind", "in_channels", "kernel", "stride", "pad")


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def manifest_from_config(config: EncoderConfig, input_shape) -> str:
    lines = ["# encoder configuration"]
    lines.append(f"variant = {config.variant}")
    lines.append(f"layers = {_fmt(config.layers)}")
    lines.append(f"d0 = {config.d0}")
    lines.append(f"nu = {config.nu}")
    lines.append(f"heads = {_fmt(config.heads)}")
    if config.dims is not None:
        lines.append(f"dims = {_fmt(config.dims)}")
    lines.append(f"reduction = {config.reduction}")
    lines.append(f"attention_policy = {config.attention_policy}")
    lines.append(f"feature_map = {config.feature_map}")
    lines.append(f"mlp_ratio = {config.mlp_ratio}")
    lines.append(f"mlp_act = {config.mlp_act}")
    lines.append(f"num_classes = {config.num_classes}")
    lines.append(f"multilabel = {str(config.multilabel).lower()}")
    lines.append(f"pos_embed = {config.pos_embed}")
    stem = config.stem
    lines.append(f"stem.kind = {stem.kind}")
    lines.append(f"stem.in_channels = {stem.in_channels}")
    lines.append(f"stem.kernel = {_fmt(stem.kernel)}")
    lines.append(f"stem.stride = {_fmt(stem.stride)}")
    lines.append(f"stem.pad = {_fmt(stem.pad)}")
    lines.append(f"input_shape = {_fmt(input_shape)}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"manifest line without '=': {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def config_from_manifest(kv: dict[str, str]) -> tuple[EncoderConfig, object]:
    stem = StemSpec(
        kind=kv.get("stem.kind", "seq1d"),
        in_channels=int(kv.get("stem.in_channels", "1")),
        kernel=_ints(kv.get("stem.kernel", "9")),
        stride=_ints(kv.get("stem.stride", "1")),
        pad=_ints(kv["stem.pad"]) if "stem.pad" in kv else None,
    )
    cfg = EncoderConfig(
        num_classes=int(kv.get("num_classes", "2")),
        stem=stem,
        variant=kv.get("variant", "custom"),
        layers=_ints(kv.get("layers", "1,2,11,2")),
        d0=int(kv.get("d0", "96")),
        nu=int(kv.get("nu", "4")),
        heads=_ints(kv.get("heads", "1,2,4,8")),
        dims=_ints(kv["dims"]) if "dims" in kv else None,
        reduction=kv.get("reduction", "conv"),
        attention_policy=kv.get("attention_policy", "mixed"),
        feature_map=kv.get("feature_map", "elu"),
        mlp_ratio=int(kv.get("mlp_ratio", "4")),
        mlp_act=kv.get("mlp_act", "softplus"),
        multilabel=kv.get("multilabel", "false").lower() == "true",
        pos_embed=kv.get("pos_embed", "learned"),
    )
    ishape = _ints(kv.get("input_shape", "1024"))
    input_shape = ishape[0] if len(ishape) == 1 else ishape
    return cfg, input_shape


def save_model(out_dir: str, model: Model) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write(manifest_from_config(model.config, model.input_shape))
    for nm, t in model.params.items():
        save_tensor(os.path.join(out_dir, nm + ".mael"), t)


def load_model(ckpt_dir: str) -> Model:
    with open(os.path.join(ckpt_dir, "manifest.txt")) as f:
        cfg, input_shape = config_from_manifest(parse_manifest(f.read()))
    model = build(cfg, input_shape)
    for nm in model.params:
        path = os.path.join(ckpt_dir, nm + ".mael")
        loaded = load_tensor(path)
        if loaded.shape != model.params[nm].shape:
            raise ConfigError(f"checkpoint tensor {nm} has shape {loaded.shape}, "
                              f"expected {model.params[nm].shape}")
        model.params[nm].data = loaded.data.astype(model.params[nm].dtype)
    return model
