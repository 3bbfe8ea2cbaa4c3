"""Incremental decoding.

For the parallel-loop wiring every decode step runs one batched pass over a
micro-batch of displaced rows: row 0 is the newest token entering its first
loop, row r is the token from r steps ago entering loop r+1 (its carry
arrives through the ``inflight`` states). All rows query the same position,
the first row's keys/values extend the shared cache, and later rows keep at
most ``window`` of their own entries in per-loop rings. One token therefore
costs one pass regardless of the loop count.

The serial wirings decode the ordinary way: ``vanilla`` is the single-pass
special case, ``vanilla_loop`` re-runs the stack ``loops`` times per token
against per-loop caches.

Everything here is plain numpy under no_grad semantics; the training
forward is reused verbatim for prefill so the handoff is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import SharedKVCache, WindowKVCache
from .errors import CapacityError, NumericError
from .model import Parameters, forward, gate_for_loop
from .tensor import Rng, no_grad


def _rms(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * gain


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _softmax(scores: np.ndarray) -> np.ndarray:
    if np.isnan(scores).any():
        raise NumericError("attention scores contain NaN")
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class MicroBatch:
    """The displaced rows fed through the stack in one parallel step."""

    inputs: np.ndarray       # [rows, d_model]
    position: int            # query position shared by every row
    loop_of_row: tuple       # loop index each row advances


class DecodeSession:
    """Mutable decoding state over a fixed prompt; see module docstring.

    Counters: ``steps`` counts tokens pushed through ``step``; ``passes``
    counts block-stack passes those steps cost (the parallel wiring pays 1
    per token, the serial loop pays ``loops``).
    """

    def __init__(self, params: Parameters, prompt: np.ndarray):
        cfg = params.config
        prompt = np.asarray(prompt)
        if prompt.ndim != 1:
            raise ValueError("prompt must be a 1-d array of token ids")
        self.params = params
        self.cfg = cfg
        n = len(prompt)
        dt = params.embedding.data.dtype
        dh, kh = cfg.d_head, cfg.n_kv_heads

        with no_grad():
            states = forward(params, prompt, return_states=True)

        self.shared: SharedKVCache | None = None
        self.rings: dict = {}
        self.per_loop: list = []
        if cfg.mode == "vanilla_loop":
            for kv in states.own_kv_per_loop:
                cache = SharedKVCache(cfg.n_layers, kh, dh, cfg.max_seq, dt)
                for li, (k, v) in enumerate(kv):
                    cache.write_block(li, 0, k.data[0], v.data[0])
                cache.length = n
                self.per_loop.append(cache)
        else:
            self.shared = SharedKVCache(cfg.n_layers, kh, dh, cfg.max_seq, dt)
            first_kv = states.shared_kv if cfg.kv_share else states.own_kv_per_loop[0]
            for li, (k, v) in enumerate(first_kv):
                self.shared.write_block(li, 0, k.data[0], v.data[0])
            self.shared.length = n
            if cfg.gswa:
                for loop_index in range(2, cfg.loops + 1):
                    kv = states.own_kv_per_loop[loop_index - 1]
                    for li, (k, v) in enumerate(kv):
                        ring = WindowKVCache(cfg.window, kh, dh, dt)
                        for q in range(max(0, n - cfg.window), n):
                            ring.write(q, k.data[0, :, q, :], v.data[0, :, q, :])
                        self.rings[(li, loop_index)] = ring

        self.inflight = [states.hidden_per_loop[l].data[0, n - 1].copy()
                         for l in range(cfg.loops - 1)]
        self.last_logits = states.logits.data[0, n - 1].copy()
        self.last_microbatch: MicroBatch | None = None
        self.position = n
        self.prefill_passes = cfg.loops
        self.steps = 0
        self.passes = 0

    # -- per-mode steps -------------------------------------------------

    def step(self, token: int) -> np.ndarray:
        """Process one token; returns the logits predicting the next one."""
        if self.cfg.mode == "vanilla_loop":
            return self.loop_decode_step(token)
        return self.decode_step(token)

    def _check_capacity(self) -> None:
        if self.position >= self.cfg.max_seq:
            raise CapacityError(
                f"position {self.position} is at max_seq {self.cfg.max_seq}")

    def decode_step(self, token: int) -> np.ndarray:
        """One batched pass advancing every loop stage by one step."""
        self._check_capacity()
        cfg, params = self.cfg, self.params
        p = self.position
        heads, kh, dh = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
        groups = cfg.kv_groups
        scale = 1.0 / np.sqrt(dh)
        rows = cfg.loops

        e = params.embedding.data[token]
        x = np.tile(e, (rows, 1))
        for r in range(1, rows):
            x[r] += self.inflight[r - 1]
        self.last_microbatch = MicroBatch(inputs=x.copy(), position=p,
                                          loop_of_row=tuple(range(1, rows + 1)))

        for li, layer in enumerate(params.layers):
            h = _rms(x, layer.attn_norm.data, cfg.norm_eps)
            q_full = h @ layer.wq.data
            q = self._rope(q_full.reshape(rows, heads, dh), p)
            k = h @ layer.wk.data
            v = (h @ layer.wv.data).reshape(rows, kh, dh)
            kr = self._rope(k.reshape(rows, kh, dh), p)

            self.shared.write(li, p, kr[0], v[0])
            ks, vs = self.shared.view(li, p + 1)
            ks = np.repeat(ks, groups, axis=0)
            vs = np.repeat(vs, groups, axis=0)
            att = _softmax(np.einsum("rhd,hmd->rhm", q, ks) * scale)
            y = np.einsum("rhm,hmd->rhd", att, vs)

            if cfg.gswa:
                for r in range(1, rows):
                    ring = self.rings[(li, r + 1)]
                    ring.write(p, kr[r], v[r])
                    kw, vw, _ = ring.gather(p)
                    kw = np.repeat(kw, groups, axis=0)
                    vw = np.repeat(vw, groups, axis=0)
                    a = _softmax(np.einsum("hd,hmd->hm", q[r], kw) * scale)
                    y_local = np.einsum("hm,hmd->hd", a, vw)
                    gp = gate_for_loop(layer, cfg, r + 1)
                    g = _sigmoid(q_full[r] @ gp.weight.data + gp.bias.data)
                    y[r] = g[:, None] * y_local + (1.0 - g)[:, None] * y[r]

            x = x + y.reshape(rows, heads * dh) @ layer.wo.data
            hm = _rms(x, layer.mlp_norm.data, cfg.norm_eps)
            x = x + (_silu(hm @ layer.w_gate.data) * (hm @ layer.w_up.data)) @ layer.w_down.data

        hidden = _rms(x, params.final_norm.data, cfg.norm_eps)
        self.inflight = [hidden[r].copy() for r in range(rows - 1)]
        logits = hidden[rows - 1] @ self._head()
        self.shared.length = p + 1
        self.position = p + 1
        self.steps += 1
        self.passes += 1
        self.last_logits = logits
        return logits

    def loop_decode_step(self, token: int) -> np.ndarray:
        """Serial reference step: the stack runs ``loops`` times for one token."""
        self._check_capacity()
        cfg, params = self.cfg, self.params
        p = self.position
        e = params.embedding.data[token]
        hidden = None
        for loop_index in range(1, cfg.loops + 1):
            inp = e if loop_index == 1 else e + hidden
            hidden = self._single_row_pass(inp, p, self.per_loop[loop_index - 1])
            self.passes += 1
        for cache in self.per_loop:
            cache.length = p + 1
        self.position = p + 1
        self.steps += 1
        self.last_logits = hidden @ self._head()
        return self.last_logits

    def _single_row_pass(self, x: np.ndarray, p: int, cache: SharedKVCache) -> np.ndarray:
        """Ordinary incremental pass for one row against one full cache."""
        cfg, params = self.cfg, self.params
        heads, kh, dh = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
        scale = 1.0 / np.sqrt(dh)
        for li, layer in enumerate(params.layers):
            h = _rms(x, layer.attn_norm.data, cfg.norm_eps)
            q = self._rope((h @ layer.wq.data).reshape(heads, dh), p)
            k = self._rope((h @ layer.wk.data).reshape(kh, dh), p)
            v = (h @ layer.wv.data).reshape(kh, dh)
            cache.write(li, p, k, v)
            ks, vs = cache.view(li, p + 1)
            ks = np.repeat(ks, cfg.kv_groups, axis=0)
            vs = np.repeat(vs, cfg.kv_groups, axis=0)
            att = _softmax(np.einsum("hd,hmd->hm", q, ks) * scale)
            y = np.einsum("hm,hmd->hd", att, vs)
            x = x + y.reshape(heads * dh) @ layer.wo.data
            hm = _rms(x, layer.mlp_norm.data, cfg.norm_eps)
            x = x + (_silu(hm @ layer.w_gate.data) * (hm @ layer.w_up.data)) @ layer.w_down.data
        return _rms(x, params.final_norm.data, cfg.norm_eps)

    # -- helpers ---------------------------------------------------------

    def _rope(self, x: np.ndarray, p: int) -> np.ndarray:
        tables = self.params.rope
        half = x.shape[-1] // 2
        c, s = tables.cos[p], tables.sin[p]
        x1, x2 = x[..., :half], x[..., half:]
        return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)

    def _head(self) -> np.ndarray:
        if self.params.head is not None:
            return self.params.head.data
        return self.params.embedding.data.T

    @property
    def passes_per_token(self) -> float:
        return self.passes / self.steps if self.steps else 0.0

    def kv_entry_count(self) -> dict:
        """Live cache positions per kind, summed over layers."""
        nl = self.cfg.n_layers
        shared = nl * self.shared.length if self.shared is not None else 0
        window = sum(r.entries() for r in self.rings.values())
        per_loop = sum(nl * c.length for c in self.per_loop)
        return {"shared": shared, "window": window, "per_loop": per_loop,
                "total": shared + window + per_loop}


def prefill(params: Parameters, prompt: np.ndarray) -> DecodeSession:
    """Run the training forward over the prompt and seed a session from it."""
    return DecodeSession(params, prompt)


def _select(logits: np.ndarray, temperature: float, rng: Rng | None) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    z = logits / temperature
    e = np.exp(z - z.max())
    probs = e / e.sum()
    return int(np.searchsorted(np.cumsum(probs), rng.random()))


def generate(session: DecodeSession, n_tokens: int, temperature: float = 0.0,
             seed: int = 0) -> list:
    """Emit n_tokens continuations; every emitted token is fed back, so the
    session stays consistent for further calls."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    if session.position + n_tokens > session.cfg.max_seq:
        raise CapacityError(
            f"{n_tokens} tokens from position {session.position} would exceed "
            f"max_seq {session.cfg.max_seq}")
    rng = Rng(seed) if temperature > 0 else None
    out = []
    logits = session.last_logits
    for _ in range(n_tokens):
        tok = _select(logits, temperature, rng)
        out.append(tok)
        logits = session.step(tok)
    return out
