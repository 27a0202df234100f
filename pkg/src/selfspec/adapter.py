"""The trainable draft adapter and its parameter accounting.

The adapter refines early features toward final-layer behavior using a
single causal multi-head attention block with a residual, wrapped in two RMS
norms; the output norm replaces the target's final norm on the draft path,
and the target's LM head is reused unchanged, so the only trainable state is
``4*d**2 + 2*d`` parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import CacheError, ConfigError, ShapeError
from .kernels import (
    AttentionParams,
    LayerKVCache,
    RopeTable,
    argmax_token,
    causal_attention,
    matmul,
    rmsnorm,
    softmax,
)
from .model import RMS_EPS, FeatureBlock, KVCacheSet, TargetWeights
from .seeding import generator


@dataclass
class AdapterWeights:
    input_norm: np.ndarray
    attn: AttentionParams
    output_norm: np.ndarray

    def __post_init__(self) -> None:
        d = self.attn.n_heads * self.attn.head_dim
        if self.input_norm.shape != (d,) or self.output_norm.shape != (d,):
            raise ShapeError(
                f"norm scales must have shape ({d},), got "
                f"{self.input_norm.shape} and {self.output_norm.shape}"
            )

    @property
    def d_model(self) -> int:
        return self.input_norm.shape[0]

    @property
    def param_count(self) -> int:
        d = self.d_model
        return 4 * d * d + 2 * d

    @property
    def dtype(self):
        return self.input_norm.dtype

    def astype(self, dtype) -> "AdapterWeights":
        return AdapterWeights(
            input_norm=self.input_norm.astype(dtype),
            attn=AttentionParams(
                wq=self.attn.wq.astype(dtype),
                wk=self.attn.wk.astype(dtype),
                wv=self.attn.wv.astype(dtype),
                wo=self.attn.wo.astype(dtype),
                n_heads=self.attn.n_heads,
                head_dim=self.attn.head_dim,
            ),
            output_norm=self.output_norm.astype(dtype),
        )

    def copy(self) -> "AdapterWeights":
        return self.astype(self.dtype)


def init_adapter(model: TargetWeights, seed: int) -> AdapterWeights:
    """Near-passthrough init: small random attention, norms copied from the
    target's final norm, so the untrained draft path already behaves like
    final-norm + head applied to the early features."""
    cfg = model.config
    rng = generator(seed, "adapter")
    scale = np.float32(1.0 / np.sqrt(cfg.d_model))
    d = cfg.d_model

    def mat() -> np.ndarray:
        return rng.standard_normal((d, d), dtype=np.float32) * scale

    return AdapterWeights(
        input_norm=model.final_norm.astype(np.float32).copy(),
        attn=AttentionParams(
            wq=mat(), wk=mat(), wv=mat(), wo=mat(),
            n_heads=cfg.n_heads, head_dim=cfg.head_dim,
        ),
        output_norm=model.final_norm.astype(np.float32).copy(),
    )


def passthrough_adapter(model: TargetWeights) -> AdapterWeights:
    """Planted fixture: zero attention, output norm = target final norm.

    The adapter output is then exactly ``final_norm(x)``, so draft logits
    coincide bit-for-bit with the target head applied to the same features.
    """
    adapter = init_adapter(model, seed=0)
    for w in (adapter.attn.wq, adapter.attn.wk, adapter.attn.wv, adapter.attn.wo):
        w[:] = 0.0
    return adapter


def adapter_forward(
    adapter: AdapterWeights,
    features: FeatureBlock,
    cache: LayerKVCache,
    rope: RopeTable,
) -> np.ndarray:
    """Refine early features: ``output_norm(x + attention(input_norm(x)))``.

    Causal, rope-positioned at the features' absolute positions, appending
    one K/V row per feature.  The result feeds the shared LM head directly.
    """
    if cache.length != features.start:
        raise CacheError(
            f"adapter cache length {cache.length} != feature start {features.start}"
        )
    x = features.values
    attn_out = causal_attention(
        adapter.attn, rmsnorm(x, adapter.input_norm, RMS_EPS), cache, features.start, rope
    )
    return rmsnorm(x + attn_out, adapter.output_norm, RMS_EPS)


def draft_logits(
    model: TargetWeights,
    adapter: AdapterWeights,
    features: FeatureBlock,
    caches: KVCacheSet,
) -> tuple[np.ndarray, float, int]:
    """Draft prediction after the block's last feature.

    Returns ``(logits, confidence, token)`` where confidence is the top-1
    softmax probability and token its greedy argmax.  Passing more than one
    feature advances the adapter cache over all of them (the catch-up batch
    of a fully accepted round) while predicting only from the last.
    """
    refined = adapter_forward(adapter, features, caches.adapter, model.rope)
    logits = matmul(refined[-1:], model.lm_head)[0]
    probs = softmax(logits)
    return logits, float(np.max(probs)), argmax_token(logits)


class AdapterVariant(enum.Enum):
    """Architecture variants compared in the adapter ablation.

    ``ATTENTION_ONLY`` is the deployed adapter (two norms around one
    attention block, sharing the backbone's LM head); the others trade the
    attention block for an FFN, add a private head, or use several
    time-independent linear+head pairs.
    """

    ATTENTION_ONLY = "attention_only"
    ATTENTION_PLUS_HEAD = "attention_plus_head"
    ONE_LAYER_TRANSFORMER = "one_layer_transformer"
    MLP_ONLY = "mlp_only"
    PARALLEL_HEADS = "parallel_heads"


def count_params(
    d_model: int,
    vocab: int,
    ffn_hidden: int,
    variant: AdapterVariant,
    parallel_heads: int = 4,
) -> int:
    """Exact trainable-parameter count of an adapter variant.

    Building blocks: a norm is ``d`` parameters, attention ``4*d**2``, the
    LM head ``d*vocab``, a gated FFN ``3*d*ffn_hidden``, one plain linear
    ``d**2``; PARALLEL_HEADS uses ``parallel_heads`` independent
    (linear + head) pairs.
    """
    if min(d_model, vocab, ffn_hidden) <= 0:
        raise ConfigError("dimensions must be positive")
    d = d_model
    norm, attention, head = d, 4 * d * d, d * vocab
    if variant is AdapterVariant.ATTENTION_ONLY:
        return attention + 2 * norm
    if variant is AdapterVariant.ATTENTION_PLUS_HEAD:
        return attention + 2 * norm + head
    if variant is AdapterVariant.ONE_LAYER_TRANSFORMER:
        return attention + 3 * d * ffn_hidden + 3 * norm
    if variant is AdapterVariant.MLP_ONLY:
        return 2 * d * d + 2 * norm + head
    if variant is AdapterVariant.PARALLEL_HEADS:
        if parallel_heads <= 0:
            raise ConfigError("parallel_heads must be positive")
        return parallel_heads * (d * d + head)
    raise ConfigError(f"unknown adapter variant {variant!r}")
