"""The frozen target model: config, weights, split execution, greedy oracle.

The model is a pre-norm decoder stack (rotary attention + gated FFN) split at
``exit_layer``: ``forward_shallow`` runs layers ``[0, exit_layer)`` and emits
early features, ``forward_remaining`` runs the rest plus final norm and LM
head.  Their composition equals a monolithic forward; the greedy reference
decoder below is the correctness oracle for speculative decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CacheError, CapacityError, ConfigError, ShapeError
from .kernels import (
    AttentionParams,
    LayerKVCache,
    RopeTable,
    argmax_token,
    causal_attention,
    gated_ffn,
    matmul,
    rmsnorm,
)
from .seeding import generator

RMS_EPS = 1e-5

# Desk-scale defaults: small enough that full test sweeps run in seconds.
DESK_CONFIG = dict(
    vocab_size=256,
    d_model=64,
    n_heads=4,
    head_dim=16,
    n_layers=8,
    ffn_hidden=172,
    exit_layer=2,
    rope_theta=10000.0,
    max_seq_len=512,
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    head_dim: int
    n_layers: int
    ffn_hidden: int
    exit_layer: int
    rope_theta: float = 10000.0
    max_seq_len: int = 512

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model {self.d_model} != n_heads*head_dim {self.n_heads * self.head_dim}"
            )
        if not 1 <= self.exit_layer < self.n_layers:
            raise ConfigError(
                f"exit_layer must satisfy 1 <= l < {self.n_layers}, got {self.exit_layer}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary embedding, got {self.head_dim}")
        if self.ffn_hidden < 1 or self.max_seq_len < 1:
            raise ConfigError("ffn_hidden and max_seq_len must be positive")

    def with_exit_layer(self, exit_layer: int) -> "ModelConfig":
        """Same model re-split at a different early-exit depth."""
        return ModelConfig(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            head_dim=self.head_dim,
            n_layers=self.n_layers,
            ffn_hidden=self.ffn_hidden,
            exit_layer=exit_layer,
            rope_theta=self.rope_theta,
            max_seq_len=self.max_seq_len,
        )


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**DESK_CONFIG, **overrides})


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    attn: AttentionParams
    ffn_norm: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    down: np.ndarray


@dataclass
class TargetWeights:
    """Frozen parameters of the full target model (never trained here)."""

    config: ModelConfig
    token_embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: np.ndarray
    rope: RopeTable = field(init=False, repr=False)

    def __post_init__(self) -> None:
        cfg = self.config
        if self.token_embedding.shape != (cfg.vocab_size, cfg.d_model):
            raise ShapeError(f"token_embedding shape {self.token_embedding.shape}")
        if self.lm_head.shape != (cfg.d_model, cfg.vocab_size):
            raise ShapeError(f"lm_head shape {self.lm_head.shape}")
        if len(self.layers) != cfg.n_layers:
            raise ShapeError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        self.rope = RopeTable(
            cfg.head_dim, cfg.rope_theta, cfg.max_seq_len, dtype=self.token_embedding.dtype
        )

    @property
    def dtype(self):
        return self.token_embedding.dtype

    def astype(self, dtype) -> "TargetWeights":
        """Copy of the weights in another precision (e.g. float64 for training)."""
        layers = [
            LayerWeights(
                attn_norm=lw.attn_norm.astype(dtype),
                attn=AttentionParams(
                    wq=lw.attn.wq.astype(dtype),
                    wk=lw.attn.wk.astype(dtype),
                    wv=lw.attn.wv.astype(dtype),
                    wo=lw.attn.wo.astype(dtype),
                    n_heads=lw.attn.n_heads,
                    head_dim=lw.attn.head_dim,
                ),
                ffn_norm=lw.ffn_norm.astype(dtype),
                gate=lw.gate.astype(dtype),
                up=lw.up.astype(dtype),
                down=lw.down.astype(dtype),
            )
            for lw in self.layers
        ]
        return TargetWeights(
            config=self.config,
            token_embedding=self.token_embedding.astype(dtype),
            layers=layers,
            final_norm=self.final_norm.astype(dtype),
            lm_head=self.lm_head.astype(dtype),
        )


@dataclass
class FeatureBlock:
    """Early features for contiguous positions ``start..start+T-1``.

    These are the layer-``exit_layer`` hidden states before any adapter
    processing; both drafting and verification consume them.
    """

    start: int
    values: np.ndarray  # (T, d_model)

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] == 0:
            raise ShapeError(f"feature block must be non-empty 2-D, got {self.values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def positions(self) -> range:
        return range(self.start, self.start + len(self))


class KVCacheSet:
    """The three coordinated caches of one decoding session.

    ``shallow`` covers layers ``[0, exit_layer)``, ``deep`` covers
    ``[exit_layer, n_layers)`` and ``adapter`` is the draft adapter's single
    attention cache.  During drafting the shallow cache runs ahead of the
    deep cache by at most the draft window; ``rollback`` truncates all three
    back to a committed prefix.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        make = lambda: LayerKVCache(config.max_seq_len, config.n_heads, config.head_dim, dtype)
        self.shallow = [make() for _ in range(config.exit_layer)]
        self.deep = [make() for _ in range(config.n_layers - config.exit_layer)]
        self.adapter = make()

    @property
    def shallow_len(self) -> int:
        return self.shallow[0].length

    @property
    def deep_len(self) -> int:
        return self.deep[0].length

    @property
    def adapter_len(self) -> int:
        return self.adapter.length

    def rollback(self, to_length: int) -> None:
        """Truncate every cache to ``to_length`` committed positions."""
        for cache in (*self.shallow, *self.deep, self.adapter):
            if to_length > cache.length:
                raise CacheError(
                    f"rollback to {to_length} exceeds cache length {cache.length}"
                )
        for cache in (*self.shallow, *self.deep, self.adapter):
            cache.truncate(to_length)


# LM head drawn sharper than the hidden layers: a 1/sqrt(d) head makes
# desk-scale output distributions nearly uniform (entropy ~ ln V), leaving
# distillation no measurable signal; 4x brings teacher entropy to ~1.8 nats
# at the default config without disturbing the residual stream.
HEAD_SCALE = 4.0


def gen_model(config: ModelConfig, seed: int) -> TargetWeights:
    """Synthetic frozen weights: N(0, 1/sqrt(d_model)) matrices, unit norms."""
    rng = generator(seed, "model")
    scale = np.float32(1.0 / np.sqrt(config.d_model))
    d, h, v = config.d_model, config.ffn_hidden, config.vocab_size

    def mat(rows: int, cols: int) -> np.ndarray:
        return rng.standard_normal((rows, cols), dtype=np.float32) * scale

    layers = []
    embedding = mat(v, d)
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                attn_norm=np.ones(d, dtype=np.float32),
                attn=AttentionParams(
                    wq=mat(d, d),
                    wk=mat(d, d),
                    wv=mat(d, d),
                    wo=mat(d, d),
                    n_heads=config.n_heads,
                    head_dim=config.head_dim,
                ),
                ffn_norm=np.ones(d, dtype=np.float32),
                gate=mat(d, h),
                up=mat(d, h),
                down=mat(h, d),
            )
        )
    return TargetWeights(
        config=config,
        token_embedding=embedding,
        layers=layers,
        final_norm=np.ones(d, dtype=np.float32),
        lm_head=mat(d, v) * np.float32(HEAD_SCALE),
    )


def gen_passthrough_model(config: ModelConfig, seed: int) -> TargetWeights:
    """Planted fixture: zero projections, so every layer is the identity.

    The hidden state stays equal to the token embedding at every depth, which
    makes the target's greedy output a pure token-to-token map and lets a
    zero-attention adapter reproduce the target exactly.
    """
    weights = gen_model(config, seed)
    for lw in weights.layers:
        for w in (lw.attn.wq, lw.attn.wk, lw.attn.wv, lw.attn.wo, lw.gate, lw.up, lw.down):
            w[:] = 0.0
    return weights


def _block(x, layer: LayerWeights, cache: LayerKVCache, start: int, rope: RopeTable):
    h = x + causal_attention(layer.attn, rmsnorm(x, layer.attn_norm, RMS_EPS), cache, start, rope)
    return h + gated_ffn(rmsnorm(h, layer.ffn_norm, RMS_EPS), layer.gate, layer.up, layer.down)


def forward_shallow(
    weights: TargetWeights, tokens: list[int] | np.ndarray, caches: KVCacheSet
) -> FeatureBlock:
    """Embed ``tokens`` and run layers ``[0, exit_layer)``, appending K/V.

    The tokens occupy positions ``shallow_len..shallow_len+T-1``; the return
    value is the early-feature block at those positions.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ShapeError("forward_shallow expects a non-empty token sequence")
    start = caches.shallow_len
    if start + tokens.size > weights.config.max_seq_len:
        raise CapacityError(
            f"positions {start}..{start + tokens.size - 1} exceed max_seq_len "
            f"{weights.config.max_seq_len}"
        )
    h = weights.token_embedding[tokens]
    for i in range(weights.config.exit_layer):
        h = _block(h, weights.layers[i], caches.shallow[i], start, weights.rope)
    return FeatureBlock(start=start, values=h)


def forward_remaining(
    weights: TargetWeights, features: FeatureBlock, caches: KVCacheSet
) -> np.ndarray:
    """Run layers ``[exit_layer, n_layers)`` plus final norm and LM head.

    Returns one logits row per feature.  Feature positions must continue the
    deep cache exactly; composition with ``forward_shallow`` over the same
    positions reproduces a full-model forward.
    """
    if features.start != caches.deep_len:
        raise CacheError(
            f"feature block starts at {features.start} but deep cache has "
            f"{caches.deep_len} positions"
        )
    cfg = weights.config
    h = features.values
    for i in range(cfg.n_layers - cfg.exit_layer):
        h = _block(h, weights.layers[cfg.exit_layer + i], caches.deep[i], features.start, weights.rope)
    return matmul(rmsnorm(h, weights.final_norm, RMS_EPS), weights.lm_head)


def full_forward(
    weights: TargetWeights, tokens: list[int] | np.ndarray, caches: KVCacheSet
) -> np.ndarray:
    """Full-model logits for ``tokens`` via the split path (shallow then deep)."""
    return forward_remaining(weights, forward_shallow(weights, tokens, caches), caches)


def vanilla_greedy_decode(
    weights: TargetWeights, prompt: list[int], n_tokens: int
) -> list[int]:
    """One-token-per-forward greedy decoding: the losslessness oracle."""
    if len(prompt) == 0:
        raise ConfigError("prompt must be non-empty")
    if len(prompt) + n_tokens > weights.config.max_seq_len:
        raise CapacityError(
            f"prompt ({len(prompt)}) + n_tokens ({n_tokens}) exceeds max_seq_len "
            f"{weights.config.max_seq_len}"
        )
    if n_tokens == 0:
        return []
    caches = KVCacheSet(weights.config, dtype=weights.dtype)
    logits = full_forward(weights, prompt, caches)
    out = [argmax_token(logits[-1])]
    for _ in range(n_tokens - 1):
        logits = full_forward(weights, [out[-1]], caches)
        out.append(argmax_token(logits[-1]))
    return out
