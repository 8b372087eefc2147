"""Encoder-decoder Transformer policy emitting diagonal-Gaussian feature tokens.

Shapes used throughout: windows ``x`` are (B, l, d), encoder output ``h`` is
(B, l, D), token sequences are (B, G, n, k) with G parallel samples per input.

Parameter naming (see README for the full shape table):
``enc.*`` encoder, ``dec.*`` decoder, ``dec.head.*`` Gaussian head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_MASK_VALUE = -1e30


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 1
    ff_width: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.d_model, self.n_heads, self.n_layers, self.ff_width) < 1:
            raise ValueError("encoder sizes must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class GaussianParams:
    mu: np.ndarray
    log_sigma: np.ndarray


@dataclass
class FeatureSequence:
    """Generated tokens (..., s, k) with their per-step Gaussian parameters."""

    tokens: np.ndarray
    step_logprobs: np.ndarray
    mu: np.ndarray
    log_sigma: np.ndarray

    @property
    def params(self) -> list[GaussianParams]:
        return [GaussianParams(self.mu[..., j, :], self.log_sigma[..., j, :])
                for j in range(self.tokens.shape[-2])]

    def flat(self) -> np.ndarray:
        """vec(z): (..., s*k)."""
        return self.tokens.reshape(*self.tokens.shape[:-2], -1)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)[:, None]
    q = np.arange(d_model)
    omega = 10000.0 ** (-2.0 * (q // 2) / d_model)
    angle = t * omega[None, :]
    return np.where(q % 2 == 0, np.sin(angle), np.cos(angle))


def gaussian_log_prob(mu, log_sigma, z):
    """Per-step diagonal-Gaussian log-density summed over the last axis.

    Works on arrays or tensors; with tensors the result is differentiable.
    """
    if not any(isinstance(a, Tensor) for a in (mu, log_sigma, z)):
        dev = (np.asarray(z) - mu) * np.exp(-np.asarray(log_sigma))
        return -(log_sigma + _HALF_LOG_2PI + 0.5 * dev * dev).sum(axis=-1)
    dev = (z - mu) * dc.exp(-1.0 * dc._as_tensor(log_sigma))
    per_dim = log_sigma + _HALF_LOG_2PI + 0.5 * (dev * dev)
    return -1.0 * dc.sum(per_dim, axis=-1)


def log_prob(mu, log_sigma, tokens):
    """Score ``tokens`` (..., s, k) under per-step Gaussians; returns (..., s)."""
    return gaussian_log_prob(mu, log_sigma, tokens)


def _init_linear(rng, n_in, n_out):
    return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)), np.zeros(n_out)


class Policy:
    """Transformer encoder-decoder over sensor windows.

    ``params`` maps names to trainable tensors; copy them with
    :meth:`state_dict` / :meth:`load_state_dict`.
    """

    def __init__(self, n_channels: int, enc: EncoderConfig, tokens: int = 10, token_dim: int = 16,
                 rng: np.random.Generator | None = None, init_log_sigma: float = 0.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_channels = n_channels
        self.cfg = enc
        self.tokens = tokens
        self.token_dim = token_dim
        D, F, k = enc.d_model, enc.ff_width, token_dim
        p: dict[str, np.ndarray] = {}

        def linear(prefix, n_in, n_out):
            p[f"{prefix}.w"], p[f"{prefix}.b"] = _init_linear(rng, n_in, n_out)

        def attention(prefix):
            for m in ("q", "k", "v", "o"):
                linear(f"{prefix}.{m}", D, D)

        def norm(prefix):
            p[f"{prefix}.g"], p[f"{prefix}.b"] = np.ones(D), np.zeros(D)

        linear("enc.in", n_channels, D)
        for i in range(enc.n_layers):
            attention(f"enc.{i}.attn")
            norm(f"enc.{i}.ln1")
            linear(f"enc.{i}.ff1", D, F)
            linear(f"enc.{i}.ff2", F, D)
            norm(f"enc.{i}.ln2")
        p["dec.bos"] = rng.normal(0.0, 1.0, size=k)
        linear("dec.tok", k, D)
        p["dec.pos"] = rng.normal(0.0, 0.1, size=(tokens, D))
        for i in range(enc.n_layers):
            attention(f"dec.{i}.self")
            norm(f"dec.{i}.ln1")
            attention(f"dec.{i}.cross")
            norm(f"dec.{i}.ln2")
            linear(f"dec.{i}.ff1", D, F)
            linear(f"dec.{i}.ff2", F, D)
            norm(f"dec.{i}.ln3")
        linear("dec.head", D, 2 * k)
        p["dec.head.b"][k:] = init_log_sigma
        self.params: dict[str, Tensor] = {name: dc.parameter(v, name) for name, v in p.items()}

    # --- parameter plumbing ---------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    @classmethod
    def from_state(cls, state, enc: EncoderConfig) -> Policy:
        """Rebuild a policy from saved arrays; channel, token and token-dim counts come from their shapes."""
        n_channels = state["enc.in.w"].shape[0]
        tokens = state["dec.pos"].shape[0]
        token_dim = state["dec.bos"].shape[0]
        policy = cls(n_channels, enc, tokens=tokens, token_dim=token_dim)
        try:
            policy.load_state_dict(state)
        except KeyError as e:
            raise ValueError(f"checkpoint lacks parameter {e.args[0]}") from None
        return policy

    def copy(self) -> Policy:
        clone = object.__new__(Policy)
        clone.__dict__.update({k: v for k, v in self.__dict__.items() if k != "params"})
        clone.params = {k: dc.parameter(v.data.copy(), k) for k, v in self.params.items()}
        return clone

    # --- building blocks --------------------------------------------------------

    def _linear(self, x, prefix):
        return x @ self.params[f"{prefix}.w"] + self.params[f"{prefix}.b"]

    def _norm(self, x, prefix):
        return dc.layer_norm(x) * self.params[f"{prefix}.g"] + self.params[f"{prefix}.b"]

    def _heads(self, x):
        # (..., n, D) -> (..., H, n, dh)
        H, dh = self.cfg.n_heads, self.cfg.d_head
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = dc.reshape(x, (*lead, n, H, dh))
        r = len(lead)
        return dc.transpose(x, (*range(r), r + 1, r, r + 2))

    def _merge(self, x):
        lead = x.shape[:-3]
        r = len(lead)
        H, n, dh = x.shape[-3:]
        x = dc.transpose(x, (*range(r), r + 1, r, r + 2))
        return dc.reshape(x, (*lead, n, H * dh))

    def _attend(self, q, k, v, mask=None):
        scores = (q @ dc.transpose(k)) * (1.0 / np.sqrt(self.cfg.d_head))
        if mask is not None:
            scores = dc.masked_fill(scores, mask, _MASK_VALUE)
        return dc.softmax(scores, axis=-1) @ v

    def attention_weights(self, x, layer: int = 0) -> np.ndarray:
        """Encoder self-attention weights (B, H, l, l) of one layer."""
        with dc.no_grad():
            z = self._embed(x)
            for i in range(layer):
                z = self._encoder_layer(z, i)
            q = self._heads(self._linear(z, f"enc.{layer}.attn.q"))
            k = self._heads(self._linear(z, f"enc.{layer}.attn.k"))
            scores = (q @ dc.transpose(k)) * (1.0 / np.sqrt(self.cfg.d_head))
            return dc.softmax(scores, axis=-1).data

    def _embed(self, x):
        x = dc._as_tensor(x)
        pe = positional_encoding(x.shape[-2], self.cfg.d_model)
        return self._linear(x, "enc.in") + pe

    def _encoder_layer(self, z, i):
        pre = f"enc.{i}"
        q = self._heads(self._linear(z, f"{pre}.attn.q"))
        k = self._heads(self._linear(z, f"{pre}.attn.k"))
        v = self._heads(self._linear(z, f"{pre}.attn.v"))
        a = self._linear(self._merge(self._attend(q, k, v)), f"{pre}.attn.o")
        z = self._norm(z + a, f"{pre}.ln1")
        f = self._linear(dc.gelu(self._linear(z, f"{pre}.ff1")), f"{pre}.ff2")
        return self._norm(z + f, f"{pre}.ln2")

    def encode(self, x) -> Tensor:
        """(B, l, d) windows -> (B, l, D) encoder states."""
        x = dc._as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.n_channels:
            raise dc.ShapeError(f"expected (B, l, {self.n_channels}) input, got {x.shape}", node="encode")
        z = self._embed(x)
        for i in range(self.cfg.n_layers):
            z = self._encoder_layer(z, i)
        return z

    def decode(self, h, prev_tokens) -> tuple[Tensor, Tensor]:
        """Teacher-forced decoder pass.

        ``h`` is (B, l, D); ``prev_tokens`` is (B, G, n-1, k), the tokens
        z_1..z_{n-1}.  Returns (mu, log_sigma), each (B, G, n, k), where row j
        parameterizes token j+1 and sees only BOS and z_1..z_j.
        """
        h = dc._as_tensor(h)
        prev = dc._as_tensor(prev_tokens)
        B, G, m, k = prev.shape
        n = m + 1
        if n > self.tokens:
            raise dc.ShapeError(f"sequence length {n} exceeds configured tokens {self.tokens}", node="decode")
        bos = dc.add(np.zeros((B, G, 1, k)), self.params["dec.bos"])
        inp = dc.concat([bos, prev], axis=2) if m else bos
        z = self._linear(inp, "dec.tok") + self.params["dec.pos"][:n]
        causal = np.triu(np.ones((n, n), dtype=bool), k=1)
        D = self.cfg.d_model
        for i in range(self.cfg.n_layers):
            pre = f"dec.{i}"
            q = self._heads(self._linear(z, f"{pre}.self.q"))
            kk = self._heads(self._linear(z, f"{pre}.self.k"))
            v = self._heads(self._linear(z, f"{pre}.self.v"))
            a = self._linear(self._merge(self._attend(q, kk, v, causal)), f"{pre}.self.o")
            z = self._norm(z + a, f"{pre}.ln1")
            # cross-attention rows are independent, so the G samples share one
            # (B, H, G*n, l) score block against the encoder states
            zq = dc.reshape(z, (B, G * n, D))
            q = self._heads(self._linear(zq, f"{pre}.cross.q"))
            kk = self._heads(self._linear(h, f"{pre}.cross.k"))
            v = self._heads(self._linear(h, f"{pre}.cross.v"))
            a = self._linear(self._merge(self._attend(q, kk, v)), f"{pre}.cross.o")
            z = self._norm(z + dc.reshape(a, (B, G, n, D)), f"{pre}.ln2")
            f = self._linear(dc.gelu(self._linear(z, f"{pre}.ff1")), f"{pre}.ff2")
            z = self._norm(z + f, f"{pre}.ln3")
        out = self._linear(z, "dec.head")
        mu = out[..., :k]
        log_sigma = dc.clamp(out[..., k:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    def decode_step(self, h, prefix) -> GaussianParams:
        """Gaussian parameters of the next token given a prefix (B, G, j-1, k)."""
        with dc.no_grad():
            mu, ls = self.decode(h, prefix)
        return GaussianParams(mu.data[..., -1, :], ls.data[..., -1, :])

    def _generate(self, h, s: int, n_samples: int, rng) -> FeatureSequence:
        h = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
        B, k = h.shape[0], self.token_dim
        tokens = np.zeros((B, n_samples, s, k))
        mus = np.zeros_like(tokens)
        lss = np.zeros_like(tokens)
        for j in range(s):
            step = self.decode_step(h, tokens[:, :, :j])
            mus[:, :, j], lss[:, :, j] = step.mu, step.log_sigma
            if rng is None:
                tokens[:, :, j] = step.mu
            else:
                noise = rng.standard_normal(step.mu.shape)
                tokens[:, :, j] = step.mu + np.exp(step.log_sigma) * noise
        return FeatureSequence(tokens, gaussian_log_prob(mus, lss, tokens), mus, lss)

    def sample_sequence(self, h, s: int, rng: np.random.Generator, n_samples: int = 1) -> FeatureSequence:
        """Sample ``n_samples`` sequences of ``s`` tokens per input: tokens (B, G, s, k)."""
        if s < 1:
            raise ValueError("s must be >= 1")
        return self._generate(h, s, n_samples, rng)

    def deterministic_sequence(self, h, s: int) -> FeatureSequence:
        """Mean tokens fed back as context: tokens (B, s, k)."""
        if s < 1:
            raise ValueError("s must be >= 1")
        seq = self._generate(h, s, 1, None)
        return FeatureSequence(seq.tokens[:, 0], seq.step_logprobs[:, 0], seq.mu[:, 0], seq.log_sigma[:, 0])

    def extract_features(self, x: np.ndarray, s: int | None = None, chunk: int = 64) -> np.ndarray:
        """Deterministic flattened features vec(z) for windows (N, l, d) -> (N, s*k)."""
        s = self.tokens if s is None else s
        out = []
        with dc.no_grad():
            for i in range(0, len(x), chunk):
                h = self.encode(x[i:i + chunk])
                out.append(self.deterministic_sequence(h, s).flat())
        if not out:
            return np.zeros((0, s * self.token_dim))
        return np.concatenate(out)
