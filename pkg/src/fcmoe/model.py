"""Transformer encoder over connectivity-profile tokens with a gated mixture
of pooling-classifier experts on top.

Each subject's N x N functional-connectivity matrix is read as N tokens (one
row per region). Tokens pass through a shared two-layer GELU embedding MLP
plus LayerNorm, then one or more standard pre-softmax-scaled self-attention
encoder layers. A shared reduction MLP shrinks each token, and every expert
scores tokens with its own tiny MLP, keeps its top-k, softmax-normalizes the
kept scores into pooling weights, pools, and classifies the pooled vector.
A gate MLP over the flattened reduced tokens mixes the expert logits.

Two ablation decoders share the same encoder stack: a single gateless
pooling-classifier expert, and a learnable classification token prepended at
position 0 whose encoded state feeds a classifier head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import numerics as nm
from .numerics import Tensor

CHECKPOINT_FORMAT_VERSION = 1
DECODERS = ("moe", "pool", "cls")
_LN_EPS = 1e-5


class ConfigError(ValueError):
    """Raised for inconsistent or out-of-range model configuration."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    """Architecture hyperparameters. ``None`` hidden widths resolve to their
    documented defaults in ``__post_init__``.
    """

    n_rois: int = 200
    embed_dim: int = 200
    n_heads: int = 8
    head_dim: int | None = None  # embed_dim // n_heads when unset
    n_layers: int = 1
    reduced_dim: int = 8
    n_experts: int = 2
    topk: tuple[int, ...] = (8, 4)
    n_classes: int = 2
    cv_coef: float = 0.23
    cv_eps: float = 1e-8
    embed_hidden: int | None = None  # defaults to embed_dim
    ffn_hidden: int | None = None  # defaults to embed_dim
    reduce_hidden: int = 64
    attn_hidden: int | None = None  # defaults to reduced_dim
    cls_hidden: int = 32
    gate_hidden: int = 64
    decoder: str = "moe"
    seed: int = 0

    def __post_init__(self):
        if self.head_dim is None:
            if self.embed_dim % self.n_heads != 0:
                raise ConfigError(
                    f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
                )
            self.head_dim = self.embed_dim // self.n_heads
        if self.embed_hidden is None:
            self.embed_hidden = self.embed_dim
        if self.ffn_hidden is None:
            self.ffn_hidden = self.embed_dim
        if self.attn_hidden is None:
            self.attn_hidden = self.reduced_dim
        self.topk = tuple(int(k) for k in self.topk)

        for name in (
            "n_rois",
            "embed_dim",
            "n_heads",
            "head_dim",
            "n_layers",
            "reduced_dim",
            "n_experts",
            "n_classes",
            "embed_hidden",
            "ffn_hidden",
            "reduce_hidden",
            "attn_hidden",
            "cls_hidden",
            "gate_hidden",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.n_heads * self.head_dim != self.embed_dim:
            raise ConfigError(
                f"n_heads * head_dim = {self.n_heads * self.head_dim} != embed_dim {self.embed_dim}"
            )
        if self.reduced_dim >= self.embed_dim:
            raise ConfigError(
                f"reduced_dim {self.reduced_dim} must be smaller than embed_dim {self.embed_dim}"
            )
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.decoder == "pool" and self.n_experts != 1:
            raise ConfigError("pool decoder uses exactly one expert")
        if self.decoder != "cls":
            if len(self.topk) != self.n_experts:
                raise ConfigError(
                    f"topk has {len(self.topk)} entries for {self.n_experts} experts"
                )
            for k in self.topk:
                if not (1 <= k <= self.n_rois):
                    raise ConfigError(f"topk entry {k} out of range [1, {self.n_rois}]")
        if self.cv_coef < 0:
            raise ConfigError("cv_coef must be nonnegative")
        if self.cv_eps < 0:
            raise ConfigError("cv_eps must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topk"] = list(self.topk)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# parameters


class ModelParams(Mapping):
    """Ordered name -> Tensor mapping with snapshot/grad helpers."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def clone(self) -> "ModelParams":
        """Deep copy of the values; gradients are not carried over."""
        return ModelParams(
            {name: Tensor(p.data.copy(), requires_grad=p.requires_grad) for name, p in self.items()}
        )

    def zero_grads(self) -> None:
        nm.zero_grads(self._tensors)

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            out[name] = p.grad
        return out

    def n_values(self) -> int:
        return int(np.sum([p.size for p in self.values()]))


def _mlp_specs(prefix: str, d_in: int, d_hidden: int, d_out: int):
    yield f"{prefix}.fc1.w", (d_in, d_hidden), "uniform"
    yield f"{prefix}.fc1.b", (d_hidden,), "zero"
    yield f"{prefix}.fc2.w", (d_hidden, d_out), "uniform"
    yield f"{prefix}.fc2.b", (d_out,), "zero"


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every parameter's name, shape, and init rule, in creation order."""
    c = config
    specs: list[tuple[str, tuple[int, ...], str]] = []
    specs += _mlp_specs("embed", c.n_rois, c.embed_hidden, c.embed_dim)
    specs += [("embed.ln.gamma", (c.embed_dim,), "one"), ("embed.ln.beta", (c.embed_dim,), "zero")]
    for layer in range(c.n_layers):
        enc = f"enc{layer}"
        for head in range(c.n_heads):
            for proj in ("wq", "wk", "wv"):
                specs.append((f"{enc}.head{head}.{proj}", (c.embed_dim, c.head_dim), "uniform"))
        specs.append((f"{enc}.wo", (c.n_heads * c.head_dim, c.embed_dim), "uniform"))
        specs += _mlp_specs(f"{enc}.ffn", c.embed_dim, c.ffn_hidden, c.embed_dim)
        specs += [
            (f"{enc}.ln1.gamma", (c.embed_dim,), "one"),
            (f"{enc}.ln1.beta", (c.embed_dim,), "zero"),
            (f"{enc}.ln2.gamma", (c.embed_dim,), "one"),
            (f"{enc}.ln2.beta", (c.embed_dim,), "zero"),
        ]
    if c.decoder == "cls":
        specs.append(("cls.token", (1, 1, c.embed_dim), "uniform"))
        specs += _mlp_specs("cls.head", c.embed_dim, c.cls_hidden, c.n_classes)
    else:
        specs += _mlp_specs("reduce", c.embed_dim, c.reduce_hidden, c.reduced_dim)
        for e in range(c.n_experts):
            specs += _mlp_specs(f"expert{e}.attn", c.reduced_dim, c.attn_hidden, 1)
            specs += _mlp_specs(f"expert{e}.cls", c.reduced_dim, c.cls_hidden, c.n_classes)
        if c.decoder == "moe":
            specs += _mlp_specs("gate", c.n_rois * c.reduced_dim, c.gate_hidden, c.n_experts)
    return specs


def init_params(config: ModelConfig, seed: int | None = None) -> ModelParams:
    """Deterministic init: weights uniform in +-1/sqrt(fan_in), biases zero,
    LayerNorm gamma one / beta zero. The learnable classification token uses
    fan_in = embed_dim.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(config):
        if kind == "uniform":
            fan_in = shape[0] if len(shape) == 2 else config.embed_dim
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "zero":
            data = np.zeros(shape)
        else:
            data = np.ones(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# forward pieces


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return nm.add(nm.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def _mlp(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """Two layers with GELU between, the shape every MLP here takes."""
    return _linear(nm.gelu(_linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def embed_tokens(x: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Shared per-token embedding: LayerNorm(MLP(token))."""
    if x.data.ndim != 3 or x.shape[-1] != config.n_rois:
        raise nm.ShapeError(
            f"embed_tokens expects [B, N, {config.n_rois}] tokens, got {x.shape}"
        )
    h = _mlp(x, params, "embed")
    return nm.layer_norm(h, params["embed.ln.gamma"], params["embed.ln.beta"], eps=_LN_EPS)


def encoder_layer(
    h: Tensor, params: ModelParams, config: ModelConfig, layer: int
) -> tuple[Tensor, np.ndarray]:
    """One self-attention block. Returns the new token states and a copy of
    the attention maps, shaped [B, heads, T, T].
    """
    enc = f"enc{layer}"
    scale = 1.0 / np.sqrt(config.head_dim)
    head_outputs = []
    attention = []
    for head in range(config.n_heads):
        q = nm.matmul(h, params[f"{enc}.head{head}.wq"])
        k = nm.matmul(h, params[f"{enc}.head{head}.wk"])
        v = nm.matmul(h, params[f"{enc}.head{head}.wv"])
        scores = nm.mul(nm.matmul(q, nm.transpose(k)), scale)
        attn = nm.softmax(scores, axis=-1)
        attention.append(attn.data.copy())
        head_outputs.append(nm.matmul(attn, v))
    mixed = nm.matmul(nm.concat(head_outputs, axis=-1), params[f"{enc}.wo"])
    h1 = nm.layer_norm(
        nm.add(h, mixed), params[f"{enc}.ln1.gamma"], params[f"{enc}.ln1.beta"], eps=_LN_EPS
    )
    ffn = _mlp(h1, params, f"{enc}.ffn")
    h2 = nm.layer_norm(
        nm.add(h1, ffn), params[f"{enc}.ln2.gamma"], params[f"{enc}.ln2.beta"], eps=_LN_EPS
    )
    return h2, np.stack(attention, axis=1)


def reduce_tokens(h: Tensor, params: ModelParams) -> Tensor:
    """Shared MLP shrinking each encoded token to the pooling width."""
    return _mlp(h, params, "reduce")


def expert_pool(
    reduced: Tensor, params: ModelParams, config: ModelConfig, expert: int
) -> tuple[Tensor, Tensor, np.ndarray, Tensor]:
    """One expert's sparse attention pooling.

    Scores every token, keeps the top-k, renormalizes the kept scores with a
    softmax, and pools the reduced tokens under those weights. Returns
    (pooled [B, d_red], weights [B, N], selected [B, k], token logits [B, N]).
    """
    n_batch, n_tokens, d_red = reduced.shape
    raw = _mlp(reduced, params, f"expert{expert}.attn")
    logits = nm.reshape(raw, (n_batch, n_tokens))
    weights, selected = nm.masked_topk_softmax(logits, config.topk[expert])
    pooled = nm.reshape(
        nm.matmul(nm.reshape(weights, (n_batch, 1, n_tokens)), reduced), (n_batch, d_red)
    )
    return pooled, weights, selected, logits


def expert_classify(pooled: Tensor, params: ModelParams, expert: int) -> Tensor:
    return _mlp(pooled, params, f"expert{expert}.cls")


def gate(reduced: Tensor, params: ModelParams, config: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Mixing distribution over experts from the flattened reduced tokens.

    The flatten is row-major (token-major), and the gate sees the live
    reduced states, so its gradient flows back into the encoder.
    Returns (probs [B, E], logits [B, E], flattened input [B, N*d_red]).
    """
    n_batch, n_tokens, d_red = reduced.shape
    flat = nm.reshape(reduced, (n_batch, n_tokens * d_red))
    logits = _mlp(flat, params, "gate")
    return nm.softmax(logits, axis=-1), logits, flat


def combine(gate_probs: Tensor, expert_logits: list[Tensor]) -> Tensor:
    """Convex mix of per-expert class logits under the gate distribution."""
    total = None
    for e, logits in enumerate(expert_logits):
        weight = nm.slice_along(gate_probs, 1, e, e + 1)
        term = nm.mul(weight, logits)
        total = term if total is None else nm.add(total, term)
    return total


# ---------------------------------------------------------------------------
# traces and results


@dataclass
class ForwardTrace:
    """Plain-array snapshots of everything interpretation needs.

    ``attention[l]`` is [B, heads, T, T] where T = N, or N+1 for the cls
    decoder (token at position 0). The expert lists are empty for cls.
    """

    embedded: np.ndarray
    attention: list[np.ndarray]
    encoded: np.ndarray
    reduced: np.ndarray | None
    expert_token_logits: list[np.ndarray] = field(default_factory=list)
    expert_selected: list[np.ndarray] = field(default_factory=list)
    expert_weights: list[np.ndarray] = field(default_factory=list)
    expert_pooled: list[np.ndarray] = field(default_factory=list)
    expert_class_logits: list[np.ndarray] = field(default_factory=list)
    gate_input: np.ndarray | None = None
    gate_logits: np.ndarray | None = None
    gate_probs: np.ndarray | None = None
    logits: np.ndarray | None = None


@dataclass
class ForwardResult:
    logits: Tensor
    gate_probs: Tensor | None
    trace: ForwardTrace


def _check_input(x: Tensor, config: ModelConfig) -> Tensor:
    x = nm.as_tensor(x)
    expect = (config.n_rois, config.n_rois)
    if x.data.ndim != 3 or x.shape[1:] != expect:
        raise nm.ShapeError(f"forward expects [B, {expect[0]}, {expect[1]}] input, got {x.shape}")
    return x


def _encode(x: Tensor, params: ModelParams, config: ModelConfig) -> tuple[Tensor, Tensor, list]:
    z = embed_tokens(x, params, config)
    h = z
    attention = []
    for layer in range(config.n_layers):
        h, attn = encoder_layer(h, params, config, layer)
        attention.append(attn)
    return z, h, attention


def forward(x: Tensor, params: ModelParams, config: ModelConfig) -> ForwardResult:
    """Full forward pass for the configured decoder."""
    if config.decoder == "cls":
        return cls_decoder_forward(x, params, config)
    x = _check_input(x, config)
    n_batch = x.shape[0]
    z, h, attention = _encode(x, params, config)
    reduced = reduce_tokens(h, params)
    trace = ForwardTrace(
        embedded=z.data.copy(),
        attention=attention,
        encoded=h.data.copy(),
        reduced=reduced.data.copy(),
    )

    expert_logits: list[Tensor] = []
    for e in range(config.n_experts):
        pooled, weights, selected, token_logits = expert_pool(reduced, params, config, e)
        class_logits = expert_classify(pooled, params, e)
        expert_logits.append(class_logits)
        trace.expert_token_logits.append(token_logits.data.copy())
        trace.expert_selected.append(selected)
        trace.expert_weights.append(weights.data.copy())
        trace.expert_pooled.append(pooled.data.copy())
        trace.expert_class_logits.append(class_logits.data.copy())

    if config.decoder == "moe":
        probs, gate_logits, flat = gate(reduced, params, config)
        trace.gate_input = flat.data.copy()
        trace.gate_logits = gate_logits.data.copy()
        logits = combine(probs, expert_logits)
    else:  # single gateless expert
        probs = Tensor(np.ones((n_batch, 1)))
        logits = expert_logits[0]
    trace.gate_probs = probs.data.copy()
    trace.logits = logits.data.copy()
    return ForwardResult(logits=logits, gate_probs=probs, trace=trace)


def single_expert_forward(x: Tensor, params: ModelParams, config: ModelConfig) -> ForwardResult:
    """Gateless single-expert decoder (the pooling-classifier ablation)."""
    if config.n_experts != 1:
        raise ConfigError("single_expert_forward needs n_experts == 1")
    cfg = config if config.decoder == "pool" else _with_decoder(config, "pool")
    return forward(x, params, cfg)


def cls_decoder_forward(x: Tensor, params: ModelParams, config: ModelConfig) -> ForwardResult:
    """Classification-token ablation: a learnable token is prepended at
    position 0, encoded with the regular stack, and its final state is
    classified. Expert/gate fields of the trace stay empty.
    """
    x = _check_input(x, config)
    n_batch = x.shape[0]
    token = nm.mul(params["cls.token"], Tensor(np.ones((n_batch, 1, 1))))
    z = embed_tokens(x, params, config)
    h = nm.concat([token, z], axis=1)
    attention = []
    for layer in range(config.n_layers):
        h, attn = encoder_layer(h, params, config, layer)
        attention.append(attn)
    front = nm.reshape(nm.slice_along(h, 1, 0, 1), (n_batch, config.embed_dim))
    logits = _mlp(front, params, "cls.head")
    trace = ForwardTrace(
        embedded=z.data.copy(),
        attention=attention,
        encoded=h.data.copy(),
        reduced=None,
        logits=logits.data.copy(),
    )
    return ForwardResult(logits=logits, gate_probs=None, trace=trace)


def cls_attention_rows(trace: ForwardTrace, layer: int = -1, head_mode: str = "mean") -> np.ndarray:
    """Attention row of the classification token: [B, T] for mean mode,
    [B, heads, T] per head. T includes the token itself at index 0.
    """
    maps = trace.attention[layer]
    rows = maps[:, :, 0, :]
    if head_mode == "mean":
        return rows.mean(axis=1)
    if head_mode == "per-head":
        return rows
    raise ValueError(f"head_mode must be 'mean' or 'per-head', got {head_mode!r}")


def _with_decoder(config: ModelConfig, decoder: str) -> ModelConfig:
    d = config.to_dict()
    d["decoder"] = decoder
    return ModelConfig.from_dict(d)


# ---------------------------------------------------------------------------
# loss


def cv_squared(importance, eps: float = 0.0) -> Tensor:
    """Squared coefficient of variation, (sigma / (mu + eps))^2, with the
    population standard deviation. Zero when all entries are equal, and in
    particular for a single expert.
    """
    imp = nm.as_tensor(importance)
    if imp.data.ndim != 1:
        raise nm.ShapeError(f"cv_squared expects a vector, got shape {imp.shape}")
    mu = nm.mean(imp)
    centered = nm.sub(imp, mu)
    variance = nm.mean(nm.mul(centered, centered))
    shifted = nm.add(mu, eps)
    return nm.div(variance, nm.mul(shifted, shifted))


def total_loss(
    logits: Tensor,
    labels,
    gate_probs: Tensor | None,
    cv_coef: float,
    cv_eps: float = 0.0,
) -> Tensor:
    """Cross-entropy plus the importance-balance penalty.

    Importance is the per-expert sum of gate probabilities over the batch.
    With cv_coef == 0 or no gate the cross-entropy is returned untouched.
    """
    ce = nm.cross_entropy(logits, labels)
    if cv_coef == 0.0 or gate_probs is None or gate_probs.shape[-1] == 1:
        return ce
    importance = nm.sum(gate_probs, axis=0)
    return nm.add(ce, nm.mul(cv_squared(importance, eps=cv_eps), cv_coef))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: ModelConfig, params: ModelParams, rng_state: Mapping | None = None) -> None:
    """JSON checkpoint with full-precision parameter values.

    Floats serialize via repr (shortest round-trip form), so a load/save
    cycle is bit-exact and reruns with identical seeds are byte-identical.
    """
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "params": {
            name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in params.items()
        },
        "rng_state": dict(rng_state) if rng_state is not None else {"seed": config.seed},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format_version {payload.get('format_version')!r}"
        )
    config = ModelConfig.from_dict(payload["config"])
    stored = payload["params"]
    tensors: dict[str, Tensor] = {}
    for name, shape, _ in param_specs(config):
        if name not in stored:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        entry = stored[name]
        if tuple(entry["shape"]) != shape:
            raise ConfigError(
                f"checkpoint parameter {name!r} has shape {entry['shape']}, expected {list(shape)}"
            )
        data = np.array(entry["data"], dtype=np.float64).reshape(shape)
        if not np.isfinite(data).all():
            raise ConfigError(f"checkpoint parameter {name!r} contains non-finite values")
        tensors[name] = Tensor(data, requires_grad=True)
    extra = set(stored) - set(tensors)
    if extra:
        raise ConfigError(f"checkpoint has unexpected parameters: {sorted(extra)}")
    return config, ModelParams(tensors), dict(payload.get("rng_state", {}))
