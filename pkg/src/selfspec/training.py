"""Distillation training of the draft adapter against the frozen target.

The loss is soft cross-entropy between the target model's full-forward
distribution (teacher) and the adapter's shared-head distribution (student),
summed over positions and vocabulary.  Gradients are derived analytically
for the adapter parameters only -- the backbone and LM head never receive
gradients -- and are verified coordinate-by-coordinate against central
finite differences in the test suite.  Training runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterWeights
from .errors import ConfigError, ShapeError
from .kernels import AttentionParams, RopeTable, matmul, softmax
from .model import RMS_EPS, KVCacheSet, TargetWeights, forward_remaining, forward_shallow
from .seeding import generator

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    epochs: int = 10
    batch: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")


@dataclass
class DistillBatch:
    """Early features of one sequence plus the teacher's distributions."""

    early_features: np.ndarray  # (T, d)
    teacher_probs: np.ndarray  # (T, V)

    def __post_init__(self) -> None:
        if (
            self.early_features.ndim != 2
            or self.teacher_probs.ndim != 2
            or self.early_features.shape[0] != self.teacher_probs.shape[0]
        ):
            raise ShapeError(
                f"inconsistent batch shapes {self.early_features.shape} vs "
                f"{self.teacher_probs.shape}"
            )
        sums = self.teacher_probs.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > 1e-5:
            raise ShapeError("teacher rows must sum to 1")

    @property
    def positions(self) -> int:
        return self.early_features.shape[0]


@dataclass
class AdapterGrads:
    input_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    output_norm: np.ndarray


_PARAM_NAMES = ("input_norm", "wq", "wk", "wv", "wo", "output_norm")


def adapter_param_dict(adapter: AdapterWeights) -> dict[str, np.ndarray]:
    return {
        "input_norm": adapter.input_norm,
        "wq": adapter.attn.wq,
        "wk": adapter.attn.wk,
        "wv": adapter.attn.wv,
        "wo": adapter.attn.wo,
        "output_norm": adapter.output_norm,
    }


def adapter_from_params(params: dict[str, np.ndarray], n_heads: int, head_dim: int) -> AdapterWeights:
    return AdapterWeights(
        input_norm=params["input_norm"],
        attn=AttentionParams(
            wq=params["wq"], wk=params["wk"], wv=params["wv"], wo=params["wo"],
            n_heads=n_heads, head_dim=head_dim,
        ),
        output_norm=params["output_norm"],
    )


def distill_loss(student_logits: np.ndarray, teacher_probs: np.ndarray) -> float:
    """Soft cross-entropy summed over positions and vocabulary.

    ``-sum_t sum_n teacher[t,n] * log(student[t,n])`` with the student
    log-probability clamped at ``log(1e-12)`` so saturated rows stay finite.
    """
    if student_logits.shape != teacher_probs.shape:
        raise ShapeError(
            f"logits shape {student_logits.shape} != teacher shape {teacher_probs.shape}"
        )
    sums = teacher_probs.sum(axis=-1)
    if np.max(np.abs(sums - 1.0)) > 1e-5:
        raise ShapeError("teacher rows must sum to 1")
    shifted = student_logits - np.max(student_logits, axis=-1, keepdims=True)
    logp = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return float(-np.sum(teacher_probs * np.maximum(logp, np.log(LOG_CLAMP))))


def _rope_mats(rope: RopeTable, t: int) -> tuple[np.ndarray, np.ndarray]:
    return rope.cos[:t], rope.sin[:t]


def _apply_rope_rows(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (T, H, dh); cos/sin: (T, dh/2) broadcast over heads
    even, odd = x[..., 0::2], x[..., 1::2]
    c, s = cos[:, None, :], sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def _unapply_rope_rows(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    c, s = cos[:, None, :], sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c + odd * s
    out[..., 1::2] = -even * s + odd * c
    return out


def _rms_forward(x: np.ndarray, scale: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + RMS_EPS)
    return scale * x / r, r


def _rms_backward(
    dy: np.ndarray, x: np.ndarray, scale: np.ndarray, r: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[-1]
    dscale = np.sum(dy * x / r, axis=0)
    inner = np.sum(dy * scale * x, axis=-1, keepdims=True)
    dx = dy * scale / r - x * inner / (d * r**3)
    return dx, dscale


def adapter_backward(
    adapter: AdapterWeights,
    batch: DistillBatch,
    lm_head: np.ndarray,
    rope: RopeTable,
) -> tuple[float, AdapterGrads]:
    """Loss and analytic adapter gradients for one sequence batch.

    Runs a taped full-sequence forward (mathematically identical to the
    cached inference path) and backpropagates through the output norm, the
    causal attention with rotary embedding, and the input norm.  Only
    adapter tensors receive gradients.
    """
    x = batch.early_features
    q_teacher = batch.teacher_probs
    t_len, d = x.shape
    h, hd = adapter.attn.n_heads, adapter.attn.head_dim
    inv_sqrt = 1.0 / np.sqrt(hd)
    cos, sin = _rope_mats(rope, t_len)
    causal = np.tril(np.ones((t_len, t_len), dtype=bool))

    # Forward with tape.
    xn, r1 = _rms_forward(x, adapter.input_norm)
    q = matmul(xn, adapter.attn.wq).reshape(t_len, h, hd)
    k = matmul(xn, adapter.attn.wk).reshape(t_len, h, hd)
    v = matmul(xn, adapter.attn.wv).reshape(t_len, h, hd)
    qr = _apply_rope_rows(q, cos, sin)
    kr = _apply_rope_rows(k, cos, sin)
    scores = np.einsum("thd,uhd->htu", qr, kr) * inv_sqrt
    scores = np.where(causal[None], scores, -np.inf)
    probs = softmax(scores, axis=-1)  # (H, T, T)
    ao = np.einsum("htu,uhd->thd", probs, v).reshape(t_len, d)
    attn_out = matmul(ao, adapter.attn.wo)
    z = x + attn_out
    y, r2 = _rms_forward(z, adapter.output_norm)
    logits = matmul(y, lm_head)

    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    logp = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    clamp_floor = np.log(LOG_CLAMP)
    loss = float(-np.sum(q_teacher * np.maximum(logp, clamp_floor)))

    # Backward.
    dlogp = np.where(logp > clamp_floor, -q_teacher, 0.0)
    p_student = np.exp(logp)
    dlogits = dlogp - p_student * np.sum(dlogp, axis=-1, keepdims=True)
    dy = matmul(dlogits, lm_head.T)
    dz, d_output_norm = _rms_backward(dy, z, adapter.output_norm, r2)
    dao = matmul(dz, adapter.attn.wo.T).reshape(t_len, h, hd)
    dwo = matmul(ao.T, dz)

    dprobs = np.einsum("thd,uhd->htu", dao, v)
    dv = np.einsum("htu,thd->uhd", probs, dao)
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dqr = np.einsum("htu,uhd->thd", dscores, kr) * inv_sqrt
    dkr = np.einsum("htu,thd->uhd", dscores, qr) * inv_sqrt
    dq = _unapply_rope_rows(dqr, cos, sin).reshape(t_len, d)
    dk = _unapply_rope_rows(dkr, cos, sin).reshape(t_len, d)
    dv = dv.reshape(t_len, d)

    dwq = matmul(xn.T, dq)
    dwk = matmul(xn.T, dk)
    dwv = matmul(xn.T, dv)
    dxn = matmul(dq, adapter.attn.wq.T) + matmul(dk, adapter.attn.wk.T) + matmul(dv, adapter.attn.wv.T)
    _, d_input_norm = _rms_backward(dxn, x, adapter.input_norm, r1)

    grads = AdapterGrads(
        input_norm=d_input_norm,
        wq=dwq,
        wk=dwk,
        wv=dwv,
        wo=dwo,
        output_norm=d_output_norm,
    )
    return loss, grads


def adapter_student_logits(
    adapter: AdapterWeights, features: np.ndarray, lm_head: np.ndarray, rope: RopeTable
) -> np.ndarray:
    """Full-sequence student logits via the taped forward (no caches)."""
    x = features
    t_len, d = x.shape
    h, hd = adapter.attn.n_heads, adapter.attn.head_dim
    cos, sin = _rope_mats(rope, t_len)
    causal = np.tril(np.ones((t_len, t_len), dtype=bool))
    xn, _ = _rms_forward(x, adapter.input_norm)
    q = _apply_rope_rows(matmul(xn, adapter.attn.wq).reshape(t_len, h, hd), cos, sin)
    k = _apply_rope_rows(matmul(xn, adapter.attn.wk).reshape(t_len, h, hd), cos, sin)
    v = matmul(xn, adapter.attn.wv).reshape(t_len, h, hd)
    scores = np.einsum("thd,uhd->htu", q, k) / np.sqrt(hd)
    scores = np.where(causal[None], scores, -np.inf)
    ao = np.einsum("htu,uhd->thd", softmax(scores, axis=-1), v).reshape(t_len, d)
    z = x + matmul(ao, adapter.attn.wo)
    y, _ = _rms_forward(z, adapter.output_norm)
    return matmul(y, lm_head)


class AdamW:
    """Adam with decoupled weight decay.

    The decay step ``theta -= weight_decay * theta`` is applied separately
    from (and unscaled by) the learning rate, following the decoupled
    formulation: with ``lr == 0`` only the decay term moves the weights.
    """

    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.beta1, self.beta2 = cfg.betas
        self.weight_decay = cfg.weight_decay
        self.eps = 1e-8
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for name, theta in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(theta)
                self.v[name] = np.zeros_like(theta)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * np.square(g)
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            theta -= self.lr * update + self.weight_decay * theta


def build_distill_batches(
    model: TargetWeights, corpus: list[list[int]]
) -> list[DistillBatch]:
    """Teacher pass: early features and full-model distributions per sequence."""
    model64 = model.astype(np.float64)
    batches = []
    for seq in corpus:
        caches = KVCacheSet(model64.config, dtype=np.float64)
        features = forward_shallow(model64, seq, caches)
        logits = forward_remaining(model64, features, caches)
        batches.append(
            DistillBatch(
                early_features=features.values,
                teacher_probs=softmax(logits, axis=-1),
            )
        )
    return batches


def train_adapter(
    model: TargetWeights,
    adapter_init: AdapterWeights,
    corpus: list[list[int]],
    cfg: TrainConfig,
) -> tuple[AdapterWeights, list[float]]:
    """Distill the adapter for ``cfg.epochs`` epochs; returns per-epoch mean loss.

    Teacher distributions are computed once per sequence up front; epochs
    shuffle sequence order deterministically from ``cfg.seed`` and apply one
    optimizer step per batch with gradients averaged over token positions.
    The returned weights are cast back to float32 for inference.
    """
    if not corpus:
        raise ConfigError("training corpus is empty")
    if any(len(seq) == 0 for seq in corpus):
        raise ConfigError("training corpus contains an empty sequence")
    batches = build_distill_batches(model, corpus)
    lm_head = model.astype(np.float64).lm_head
    rope = RopeTable(
        model.config.head_dim, model.config.rope_theta, model.config.max_seq_len, np.float64
    )

    adapter = adapter_init.astype(np.float64)
    params = adapter_param_dict(adapter)
    optimizer = AdamW(cfg)
    rng = generator(cfg.seed, "train")
    curve: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batches))
        epoch_loss = 0.0
        epoch_positions = 0
        for chunk_start in range(0, len(order), cfg.batch):
            chunk = order[chunk_start : chunk_start + cfg.batch]
            grad_sum = {name: np.zeros_like(p) for name, p in params.items()}
            positions = 0
            for idx in chunk:
                loss, grads = adapter_backward(adapter, batches[idx], lm_head, rope)
                epoch_loss += loss
                positions += batches[idx].positions
                for name in _PARAM_NAMES:
                    grad_sum[name] += getattr(grads, name)
            epoch_positions += positions
            mean_grads = {name: g / positions for name, g in grad_sum.items()}
            optimizer.step(params, mean_grads)
        curve.append(epoch_loss / epoch_positions)
    return adapter.astype(np.float32), curve
