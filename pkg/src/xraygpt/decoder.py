"""Frozen toy decoders standing in for the language model.

Two tiers behind one interface:

* linear_tier0: logits at position i are a linear map of the running
  mean of embeddings 0..i. Causal by construction and simple enough to
  differentiate by hand on paper.
* transformer_tier1: a small pre-norm causal self-attention decoder.

Both are deterministic functions of (seed, config), frozen after
construction, and expose an analytic backward pass with respect to the
input embeddings (the only path a gradient needs to travel: everything
inside is frozen).
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import SequenceTooLongError

LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))


def gelu_grad(z: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (z + 0.044715 * z**3))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * z**2)


def _layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv, gain)


def _layernorm_backward(dy: np.ndarray, cache) -> np.ndarray:
    xhat, inv, gain = cache
    dxhat = dy * gain
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


class Decoder:
    """Frozen stand-in language model over a closed word vocabulary."""

    KINDS = ("linear_tier0", "transformer_tier1")

    def __init__(
        self,
        kind: str,
        d_model: int,
        vocab_size: int,
        max_len: int,
        seed: int,
        n_layers: int = 2,
        n_heads: int = 2,
    ):
        if kind not in self.KINDS:
            raise ValueError(f"unknown decoder kind {kind!r}")
        if kind == "transformer_tier1" and d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.kind = kind
        self.d_model = d_model
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.seed = seed
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.params: dict[str, np.ndarray] = {}
        self._init_params()

    def _init_params(self) -> None:
        # Fixed draw order: embedding, output head, positions, then
        # per-layer attention and MLP weights. Changing this order
        # changes every frozen model, so it is part of the format.
        rng = np.random.default_rng(self.seed)
        d, v = self.d_model, self.vocab_size
        p = self.params
        p["embedding"] = rng.normal(0.0, 1.0, size=(v, d))
        p["w_out"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(v, d))
        if self.kind == "transformer_tier1":
            p["pos"] = rng.normal(0.0, 1.0, size=(self.max_len, d))
            for i in range(self.n_layers):
                for name in ("wq", "wk", "wv", "wo"):
                    p[f"l{i}.{name}"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
                p[f"l{i}.ln1_g"] = np.ones(d)
                p[f"l{i}.ln1_b"] = np.zeros(d)
                p[f"l{i}.ln2_g"] = np.ones(d)
                p[f"l{i}.ln2_b"] = np.zeros(d)
                p[f"l{i}.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, 4 * d))
                p[f"l{i}.b1"] = np.zeros(4 * d)
                p[f"l{i}.w2"] = rng.normal(0.0, 1.0 / math.sqrt(4 * d), size=(4 * d, d))
                p[f"l{i}.b2"] = np.zeros(d)
        for arr in p.values():
            arr.flags.writeable = False

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()

    def embed(self, token_ids) -> np.ndarray:
        return self.params["embedding"][np.asarray(token_ids, dtype=np.int64)].copy()

    # -- forward / backward ------------------------------------------------

    def forward(self, emb: np.ndarray):
        """Logits (L, vocab) plus a cache for backward. Causal."""
        L = emb.shape[0]
        if L > self.max_len:
            raise SequenceTooLongError(f"sequence length {L} > max_len {self.max_len}")
        if self.kind == "linear_tier0":
            counts = np.arange(1, L + 1, dtype=np.float64)[:, None]
            means = np.cumsum(emb, axis=0) / counts
            logits = means @ self.params["w_out"].T
            return logits, {"L": L}
        return self._forward_tier1(emb)

    def backward(self, dlogits: np.ndarray, cache) -> np.ndarray:
        """Gradient of the loss with respect to the input embeddings."""
        if self.kind == "linear_tier0":
            L = cache["L"]
            counts = np.arange(1, L + 1, dtype=np.float64)[:, None]
            per_pos = (dlogits @ self.params["w_out"]) / counts
            # embedding j feeds every mean at positions >= j
            return np.cumsum(per_pos[::-1], axis=0)[::-1]
        return self._backward_tier1(dlogits, cache)

    def _forward_tier1(self, emb: np.ndarray):
        p = self.params
        L = emb.shape[0]
        H, d = self.n_heads, self.d_model
        dh = d // H
        scale = 1.0 / math.sqrt(dh)
        x = emb + p["pos"][:L]
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)
        layers = []
        for i in range(self.n_layers):
            a, ln1c = _layernorm(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            # Queries and keys ride the normalized stream; values read the
            # raw residual so injected embeddings keep their magnitude.
            q = (a @ p[f"l{i}.wq"]).reshape(L, H, dh).transpose(1, 0, 2)
            k = (a @ p[f"l{i}.wk"]).reshape(L, H, dh).transpose(1, 0, 2)
            v = (x @ p[f"l{i}.wv"]).reshape(L, H, dh).transpose(1, 0, 2)
            scores = q @ k.transpose(0, 2, 1) * scale
            scores = np.where(causal[None, :, :], -np.inf, scores)
            scores -= scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=-1, keepdims=True)
            o = (attn @ v).transpose(1, 0, 2).reshape(L, d)
            x = x + o @ p[f"l{i}.wo"]
            b, ln2c = _layernorm(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            z = b @ p[f"l{i}.w1"] + p[f"l{i}.b1"]
            hid = gelu(z)
            x = x + hid @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
            layers.append((ln1c, q, k, v, attn, o, ln2c, z, hid))
        logits = x @ p["w_out"].T
        return logits, {"L": L, "layers": layers}

    def _backward_tier1(self, dlogits: np.ndarray, cache) -> np.ndarray:
        p = self.params
        L = cache["L"]
        H, d = self.n_heads, self.d_model
        dh = d // H
        scale = 1.0 / math.sqrt(dh)
        dx = dlogits @ p["w_out"]
        for i in reversed(range(self.n_layers)):
            ln1c, q, k, v, attn, o, ln2c, z, hid = cache["layers"][i]
            # MLP sublayer
            dhid = dx @ p[f"l{i}.w2"].T
            dz = dhid * gelu_grad(z)
            db = dz @ p[f"l{i}.w1"].T
            dx = dx + _layernorm_backward(db, ln2c)
            # attention sublayer
            do = (dx @ p[f"l{i}.wo"].T).reshape(L, H, dh).transpose(1, 0, 2)
            dattn = do @ v.transpose(0, 2, 1)
            dv = attn.transpose(0, 2, 1) @ do
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dscores *= scale
            dq = dscores @ k
            dk = dscores.transpose(0, 2, 1) @ q
            da = (
                dq.transpose(1, 0, 2).reshape(L, d) @ p[f"l{i}.wq"].T
                + dk.transpose(1, 0, 2).reshape(L, d) @ p[f"l{i}.wk"].T
            )
            dx = dx + dv.transpose(1, 0, 2).reshape(L, d) @ p[f"l{i}.wv"].T
            dx = dx + _layernorm_backward(da, ln1c)
        return dx
