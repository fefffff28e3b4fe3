"""Cross-scale attention MIL network.

Per instance (one patch location seen at S scales):

    f_s = ReLU(F_s A + b)                 multi-scale encoder, shared or per scale
    a   = softmax_s( W^T act(V f_s) )     cross-scale attention, act = ReLU | tanh
    Fcs = sum_s a_s f_s                   fusion ("cs"); or mean / concatenation

Per bag of n instances, gated attention pooling and a 2-way classifier:

    e_i = w_c^T ( tanh(V_c Fcs_i) * sigmoid(U_c Fcs_i) )
    b   = softmax_i(e),  Z = sum_i b_i Fcs_i,  Y = softmax(Z C_w + C_b)

Shapes: A (D, L), V (M, L), W (M, 1), V_c and U_c (M, Lf), w_c (M, 1),
C_w (Lf, 2), with Lf = L except Lf = S*L for concatenation.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor

MODES = ("cs", "mean", "concat")
_MODE_ALIASES = {
    "cs": "cs", "cs-attention": "cs", "attention": "cs",
    "mean": "mean", "mean-vector": "mean",
    "concat": "concat", "concatenation": "concat",
}
ACTIVATIONS = ("relu", "tanh")


def canonical_mode(mode: str) -> str:
    try:
        return _MODE_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {MODES}") from None


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "cs"
    act: str = "relu"
    shared: bool = True
    in_dim: int = 64  # D
    hidden: int = 64  # L
    attn_dim: int = 32  # M
    n_scales: int = 3  # S
    bag_size: int = 8  # n, recorded for checkpoints

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown attention activation {self.act!r}")
        if min(self.in_dim, self.hidden, self.attn_dim, self.n_scales) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def fused_dim(self) -> int:
        return self.hidden * self.n_scales if self.mode == "concat" else self.hidden


@dataclass
class CsMilParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def encoder(self, scale: int) -> tuple[Tensor, Tensor]:
        k = 0 if self.config.shared else scale
        return self.tensors[f"enc{k}.A"], self.tensors[f"enc{k}.b"]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "CsMilParams":
        return CsMilParams(self.config, {k: Tensor(v.data, requires_grad=True)
                                         for k, v in self.tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)


def init_params(config: ModelConfig, seed: int = 0) -> CsMilParams:
    rng = np.random.default_rng([seed, 0xC5])
    D, L, M, S, Lf = config.in_dim, config.hidden, config.attn_dim, config.n_scales, config.fused_dim
    t: dict[str, Tensor] = {}
    for k in range(1 if config.shared else S):
        t[f"enc{k}.A"] = _glorot(rng, D, L, (D, L))
        t[f"enc{k}.b"] = Tensor(np.zeros(L), requires_grad=True)
    if config.mode == "cs":
        t["att.V"] = _glorot(rng, L, M, (M, L))
        t["att.W"] = _glorot(rng, M, 1, (M, 1))
    t["pool.V"] = _glorot(rng, Lf, M, (M, Lf))
    t["pool.U"] = _glorot(rng, Lf, M, (M, Lf))
    t["pool.w"] = _glorot(rng, M, 1, (M, 1))
    t["cls.W"] = _glorot(rng, Lf, 2, (Lf, 2))
    t["cls.b"] = Tensor(np.zeros(2), requires_grad=True)
    return CsMilParams(config, t)


# ---------------------------------------------------------------------------
# building blocks


def _check_instances(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (config.n_scales, config.in_dim):
        raise ValueError(
            f"bag features must be (n, {config.n_scales}, {config.in_dim}), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty bag")
    return x


def ms_encode(F: np.ndarray | Tensor, scale: int, params: CsMilParams) -> Tensor:
    """Encode rows of one scale: ReLU(F A + b). ``F`` is (D,) or (n, D)."""
    F = F if isinstance(F, Tensor) else Tensor(F)
    if F.shape[-1] != params.config.in_dim:
        raise ValueError(f"feature dim {F.shape[-1]} != encoder input {params.config.in_dim}")
    A, b = params.encoder(scale)
    if F.data.ndim == 1:
        return ad.reshape(ad.relu(ad.add(ad.matmul(ad.reshape(F, (1, -1)), A), b)), (-1,))
    return ad.relu(ad.add(ad.matmul(F, A), b))


def encode_bag(x: np.ndarray, params: CsMilParams) -> Tensor:
    """(n, S, D) features -> (n, S, L) encodings."""
    cfg = params.config
    n, S, _ = x.shape
    if cfg.shared:
        A, b = params.encoder(0)
        h = ad.relu(ad.add(ad.matmul(Tensor(x.reshape(n * S, -1)), A), b))
        return ad.reshape(h, (n, S, cfg.hidden))
    per_scale = [ad.reshape(ms_encode(x[:, s, :], s, params), (n, 1, cfg.hidden)) for s in range(S)]
    return ad.concat(per_scale, axis=1)


def attention_logits(h: Tensor, params: CsMilParams) -> Tensor:
    """(n, S, L) encodings -> (n, S) unnormalised cross-scale scores."""
    n, S, L = h.shape
    act = ad.relu if params.config.act == "relu" else ad.tanh
    flat = ad.reshape(h, (n * S, L))
    z = act(ad.matmul(flat, ad.transpose(params["att.V"])))
    return ad.reshape(ad.matmul(z, params["att.W"]), (n, S))


def cross_scale_attention(h: Tensor, params: CsMilParams) -> Tensor:
    """Softmax over scales of the attention logits, (n, S)."""
    return ad.softmax(attention_logits(h, params))


def fuse(h: Tensor, a: Tensor | None, mode: str) -> Tensor:
    """(n, S, L) encodings -> fused (n, Lf) representation."""
    mode = canonical_mode(mode)
    n, S, L = h.shape
    if mode == "cs":
        if a is None:
            raise ValueError("cs fusion needs attention weights")
        return ad.weighted_sum(a, h)
    if mode == "mean":
        return ad.mean(h, axis=1)
    return ad.reshape(h, (n, S * L))


def pool_and_classify(fcs: Tensor, params: CsMilParams) -> tuple[Tensor, Tensor, Tensor]:
    """Gated attention pooling over instances then a 2-way softmax.

    Returns (class probabilities (2,), pooling weights (n,), logits (2,)).
    """
    n = fcs.shape[0]
    if n == 0:
        raise ValueError("empty bag")
    gate_t = ad.tanh(ad.matmul(fcs, ad.transpose(params["pool.V"])))
    gate_s = ad.sigmoid(ad.matmul(fcs, ad.transpose(params["pool.U"])))
    e = ad.reshape(ad.matmul(ad.mul(gate_t, gate_s), params["pool.w"]), (1, n))
    b = ad.softmax(e)
    z = ad.matmul(b, fcs)
    logits = ad.reshape(ad.add(ad.matmul(z, params["cls.W"]), params["cls.b"]), (2,))
    return ad.softmax(logits), ad.reshape(b, (n,)), logits


@dataclass
class ForwardTrace:
    scale_attention: np.ndarray  # (n, S); uniform 1/S for mean and concat fusion
    instance_weights: np.ndarray  # (n,)
    logits: np.ndarray  # (2,)
    prob: np.ndarray  # (2,)

    @property
    def positive_prob(self) -> float:
        return float(self.prob[1])


def forward_bag(x: np.ndarray, params: CsMilParams) -> tuple[Tensor, ForwardTrace]:
    """Full bag forward pass; ``x`` is (n, S, D) instance features."""
    cfg = params.config
    x = _check_instances(x, cfg)
    h = encode_bag(x, params)
    if cfg.mode == "cs":
        a = cross_scale_attention(h, params)
        a_np = a.data
    else:
        a = None
        a_np = np.full((x.shape[0], cfg.n_scales), 1.0 / cfg.n_scales)
    fcs = fuse(h, a, cfg.mode)
    y, b, logits = pool_and_classify(fcs, params)
    return y, ForwardTrace(a_np.copy(), b.data.copy(), logits.data.copy(), y.data.copy())


def nll_loss(y: Tensor, target: int, floor: float = 1e-12) -> Tensor:
    """-log p(target), with p clamped at ``floor``."""
    p = y.data
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"not a probability vector: {p}")
    if not 0 <= target < p.size:
        raise ValueError(f"class {target} out of range for {p.size} classes")
    return ad.scale(ad.log(ad.pick(y, int(target)), floor=floor), -1.0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: CsMilParams, path: str | os.PathLike, extra: dict | None = None) -> None:
    tensors = dict(params.arrays())
    meta = {"model": asdict(params.config)}
    if extra:
        meta.update(extra)
    tensors["__manifest__"] = container.encode_json(meta)
    container.save(path, tensors)


def load_checkpoint(path: str | os.PathLike) -> tuple[CsMilParams, dict]:
    t = container.load(path)
    if "__manifest__" not in t:
        raise container.ContainerError("checkpoint lacks a __manifest__ entry", 0)
    meta = container.decode_json(t.pop("__manifest__"))
    config = ModelConfig(**meta["model"])
    expected = init_params(config, 0).tensors
    if set(expected) != set(t):
        raise ValueError(f"checkpoint tensors {sorted(t)} do not match model {sorted(expected)}")
    params = CsMilParams(config, {})
    for name in expected:
        if t[name].shape != expected[name].shape:
            raise ValueError(f"{name}: shape {t[name].shape} != {expected[name].shape}")
        params.tensors[name] = Tensor(t[name], requires_grad=True)
    return params, meta
