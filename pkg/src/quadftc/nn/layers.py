"""Networks built from the autodiff ops: MLP, multi-head attention, transformer and CNN encoders.

Parameters live in flat ``dict[str, np.ndarray]`` maps.  Forward functions take
the same map with values wrapped as :class:`Var` on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from quadftc.nn import autodiff as ad
from quadftc.nn.autodiff import ShapeMismatch, Tape, Var


@dataclass(frozen=True)
class TransformerConfig:
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    feedforward_dim: int = 128
    history_len: int = 50
    input_dim: int = 26
    latent_dim: int = 8

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")


@dataclass(frozen=True)
class CnnConfig:
    channels: int = 32
    kernel: int = 5
    strides: tuple[int, ...] = (1, 2, 2)
    history_len: int = 50
    input_dim: int = 26
    latent_dim: int = 8


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_linear(rng, fan_in, fan_out, prefix) -> dict:
    return {f"{prefix}.w": uniform_init(rng, fan_in, (fan_in, fan_out)),
            f"{prefix}.b": uniform_init(rng, fan_in, (fan_out,))}


def init_mlp(rng, sizes, prefix) -> dict:
    p = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        p.update(init_linear(rng, a, b, f"{prefix}{i}"))
    return p


def mlp_layers(params: dict, prefix: str) -> int:
    n = 0
    while f"{prefix}{n}.w" in params:
        n += 1
    return n


def mlp_forward(P: dict, x: Var, prefix: str, final_activation: str | None = None) -> Var:
    """Dense stack with tanh on hidden layers; ``final_activation`` in {None, 'tanh'}."""
    n = mlp_layers(P, prefix)
    if n == 0:
        raise KeyError(f"no layers with prefix {prefix!r}")
    for i in range(n):
        w = P[f"{prefix}{i}.w"]
        if x.shape[-1] != w.shape[0]:
            raise ShapeMismatch(f"{prefix}{i}: input dim {x.shape[-1]} != {w.shape[0]}")
        x = ad.linear(x, w, P[f"{prefix}{i}.b"])
        if i < n - 1 or final_activation == "tanh":
            x = ad.tanh(x)
    return x


def multi_head_attention(q: Var, k: Var, v: Var, num_heads: int, key_mask=None):
    """Scaled dot-product attention per head; heads concatenated (no projection).

    ``q, k, v`` are (B, T, D); ``key_mask`` is (B, T) bool, True = attend.
    Returns (output (B, T, D), attention probabilities (B, heads, T, T)).
    """
    B, T, D = q.shape
    if k.shape != (B, T, D) or v.shape != (B, T, D):
        raise ShapeMismatch(f"attention shapes {q.shape} {k.shape} {v.shape}")
    if D % num_heads:
        raise ShapeMismatch(f"model dim {D} not divisible by {num_heads} heads")
    dh = D // num_heads

    def heads(x):
        return ad.transpose(ad.reshape(x, (B, T, num_heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
    probs = ad.softmax(logits, mask)
    o = ad.matmul(probs, vh)
    o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (B, T, D))
    return o, probs.value


def init_transformer(cfg: TransformerConfig, rng, prefix="phi.") -> dict:
    d, f = cfg.model_dim, cfg.feedforward_dim
    p = {}
    p.update(init_linear(rng, cfg.input_dim, d, f"{prefix}embed"))
    # zero positional table: identical tokens stay exchangeable at init
    p[f"{prefix}pos"] = np.zeros((cfg.history_len, d), dtype=np.float32)
    for i in range(cfg.num_layers):
        L = f"{prefix}layer{i}."
        p[L + "ln1.g"] = np.ones(d, np.float32)
        p[L + "ln1.b"] = np.zeros(d, np.float32)
        for name in ("q", "k", "v", "o"):
            p.update(init_linear(rng, d, d, L + name))
        p[L + "ln2.g"] = np.ones(d, np.float32)
        p[L + "ln2.b"] = np.zeros(d, np.float32)
        p.update(init_linear(rng, d, f, L + "ff1"))
        p.update(init_linear(rng, f, d, L + "ff2"))
    p[f"{prefix}lnf.g"] = np.ones(d, np.float32)
    p[f"{prefix}lnf.b"] = np.zeros(d, np.float32)
    p.update(init_linear(rng, d, cfg.latent_dim, f"{prefix}out"))
    return p


def valid_mask(valid_len, T: int) -> np.ndarray:
    valid_len = np.asarray(valid_len).reshape(-1)
    if np.any(valid_len < 1) or np.any(valid_len > T):
        raise ShapeMismatch(f"valid_len must lie in [1, {T}]")
    return np.arange(T)[None, :] < valid_len[:, None]


def transformer_encode(cfg: TransformerConfig, P: dict, seq: Var, valid_len, prefix="phi.") -> Var:
    """(B, H, input_dim) history -> (B, latent_dim); positions >= valid_len are ignored."""
    if seq.value.ndim != 3 or seq.shape[1:] != (cfg.history_len, cfg.input_dim):
        raise ShapeMismatch(f"expected (B, {cfg.history_len}, {cfg.input_dim}), got {seq.shape}")
    B, H, _ = seq.shape
    mask = valid_mask(valid_len, H)
    x = seq.tape.const(np.where(mask[:, :, None], seq.value, 0).astype(seq.dtype))
    h = ad.add(ad.linear(x, P[prefix + "embed.w"], P[prefix + "embed.b"]), P[prefix + "pos"])
    for i in range(cfg.num_layers):
        L = f"{prefix}layer{i}."
        a = ad.layer_norm(h, P[L + "ln1.g"], P[L + "ln1.b"])
        q = ad.linear(a, P[L + "q.w"], P[L + "q.b"])
        k = ad.linear(a, P[L + "k.w"], P[L + "k.b"])
        v = ad.linear(a, P[L + "v.w"], P[L + "v.b"])
        o, _ = multi_head_attention(q, k, v, cfg.num_heads, mask)
        h = ad.add(h, ad.linear(o, P[L + "o.w"], P[L + "o.b"]))
        f = ad.layer_norm(h, P[L + "ln2.g"], P[L + "ln2.b"])
        f = ad.relu(ad.linear(f, P[L + "ff1.w"], P[L + "ff1.b"]))
        h = ad.add(h, ad.linear(f, P[L + "ff2.w"], P[L + "ff2.b"]))
    h = ad.layer_norm(h, P[prefix + "lnf.g"], P[prefix + "lnf.b"])
    pooled = ad.masked_mean(h, mask)
    return ad.linear(pooled, P[prefix + "out.w"], P[prefix + "out.b"])


def init_cnn(cfg: CnnConfig, rng, prefix="phi.") -> dict:
    p = {}
    cin = cfg.input_dim
    for i, _ in enumerate(cfg.strides):
        fan_in = cfg.kernel * cin
        p[f"{prefix}conv{i}.w"] = uniform_init(rng, fan_in, (cfg.kernel, cin, cfg.channels))
        p[f"{prefix}conv{i}.b"] = uniform_init(rng, fan_in, (cfg.channels,))
        cin = cfg.channels
    p.update(init_linear(rng, cfg.channels, cfg.latent_dim, f"{prefix}out"))
    return p


def conv1d_forward(cfg: CnnConfig, P: dict, seq: Var, valid_len, prefix="phi.") -> Var:
    """Causal conv stack (relu) -> average over valid output positions -> linear."""
    if seq.value.ndim != 3 or seq.shape[1:] != (cfg.history_len, cfg.input_dim):
        raise ShapeMismatch(f"expected (B, {cfg.history_len}, {cfg.input_dim}), got {seq.shape}")
    B, H, _ = seq.shape
    lens = np.asarray(valid_len).reshape(-1)
    mask = valid_mask(lens, H)
    x = seq.tape.const(np.where(mask[:, :, None], seq.value, 0).astype(seq.dtype))
    for i, s in enumerate(cfg.strides):
        x = ad.relu(ad.conv1d_causal(x, P[f"{prefix}conv{i}.w"], P[f"{prefix}conv{i}.b"], s))
        lens = -(-lens // s)
    pooled = ad.masked_mean(x, valid_mask(lens, x.shape[1]))
    return ad.linear(pooled, P[prefix + "out.w"], P[prefix + "out.b"])


def encoder_forward(cfg, P: dict, seq: Var, valid_len, prefix="phi.") -> Var:
    if isinstance(cfg, TransformerConfig):
        return transformer_encode(cfg, P, seq, valid_len, prefix)
    return conv1d_forward(cfg, P, seq, valid_len, prefix)


def init_encoder(cfg, rng, prefix="phi.") -> dict:
    if isinstance(cfg, TransformerConfig):
        return init_transformer(cfg, rng, prefix)
    return init_cnn(cfg, rng, prefix)


def encode(cfg, params: dict, seq: np.ndarray, valid_len, prefix="phi.") -> np.ndarray:
    """Inference helper: plain arrays in, latent array out (no gradients recorded)."""
    tape = Tape(record=False)
    P = {k: tape.const(v) for k, v in params.items() if k.startswith(prefix)}
    seq = np.asarray(seq, dtype=np.float32)
    if seq.ndim == 2:
        return encode(cfg, params, seq[None], np.atleast_1d(valid_len), prefix)[0]
    return encoder_forward(cfg, P, tape.const(seq), valid_len, prefix).value
