"""Minimal causal decoder-only transformer over the autodiff tensors.

One forward routine (``forward_block``) serves three uses: a whole-sequence
pass (training fast path), an incremental pass over new positions given a
KV cache, and the canonical per-position recurrence (``sequential_hidden``)
that defines the model's causal semantics. The recurrence computes each
position strictly from its predecessors, so appending a vector can never
change earlier hidden states, bit for bit. The batched whole-sequence pass
is required to agree with it within 1e-9 per element (BLAS kernel choice
varies with block shape, so agreement is numerical, not bitwise).

The same architecture instantiates both the base reasoning model and the
auxiliary step decoder; which role a ``ModelParams`` plays is decided by
its caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as lt
from .tensor import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_seq_len: int = 128
    tie_lm_head: bool = False
    norm: str = "rms"  # "rms" | "layer"
    lm_bias: bool = False
    init_scale: float = 0.02
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.norm not in ("rms", "layer"):
            raise ValueError(f"unknown norm variant: {self.norm!r}")
        if self.d_model < 8 or self.n_layers < 1:
            raise ValueError("config below minimum size")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerParams:
    norm1_g: Tensor
    norm1_b: Tensor | None
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm2_g: Tensor
    norm2_b: Tensor | None
    w1: Tensor
    w2: Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    tok_emb: Tensor  # [V, d]
    pos_emb: Tensor  # [max_seq_len, d]
    layers: list[LayerParams]
    final_g: Tensor
    final_b: Tensor | None
    lm_w: Tensor  # [V, d]; same object as tok_emb when tied
    lm_b: Tensor | None

    def named_parameters(self) -> dict[str, Tensor]:
        """Trainable tensors in a fixed order (checkpoint / optimizer order)."""
        out: dict[str, Tensor] = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}."
            out[p + "norm1.g"] = layer.norm1_g
            if layer.norm1_b is not None:
                out[p + "norm1.b"] = layer.norm1_b
            out[p + "attn.wq"] = layer.wq
            out[p + "attn.wk"] = layer.wk
            out[p + "attn.wv"] = layer.wv
            out[p + "attn.wo"] = layer.wo
            out[p + "norm2.g"] = layer.norm2_g
            if layer.norm2_b is not None:
                out[p + "norm2.b"] = layer.norm2_b
            out[p + "mlp.w1"] = layer.w1
            out[p + "mlp.w2"] = layer.w2
        out["final_norm.g"] = self.final_g
        if self.final_b is not None:
            out["final_norm.b"] = self.final_b
        if self.lm_w is not self.tok_emb:
            out["lm_head.w"] = self.lm_w
        if self.lm_b is not None:
            out["lm_head.b"] = self.lm_b
        return out


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Scaled-normal initialization (scale ``config.init_scale``), deterministic per seed."""
    rng = np.random.default_rng(seed)
    d = config.d_model

    def normal(*shape):
        return Tensor(rng.normal(0.0, config.init_scale, shape), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    use_layer = config.norm == "layer"
    tok = normal(config.vocab_size, d)
    pos = normal(config.max_seq_len, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                norm1_g=ones(d),
                norm1_b=zeros(d) if use_layer else None,
                wq=normal(d, d),
                wk=normal(d, d),
                wv=normal(d, d),
                wo=normal(d, d),
                norm2_g=ones(d),
                norm2_b=zeros(d) if use_layer else None,
                w1=normal(d, 4 * d),
                w2=normal(4 * d, d),
            )
        )
    final_g = ones(d)
    final_b = zeros(d) if use_layer else None
    lm_w = tok if config.tie_lm_head else normal(config.vocab_size, d)
    lm_b = zeros(config.vocab_size) if config.lm_bias else None
    return ModelParams(config, tok, pos, layers, final_g, final_b, lm_w, lm_b)


def clone_params(params: ModelParams, share_embeddings: bool = False) -> ModelParams:
    """Copy of the initial weights; optionally aliasing the embedding table.

    With ``share_embeddings`` the returned model's ``tok_emb`` is the same
    Tensor object, so both models accumulate into one gradient buffer.
    """

    def cp(t: Tensor | None) -> Tensor | None:
        if t is None:
            return None
        return Tensor(t.data.copy(), requires_grad=t.requires_grad)

    tok = params.tok_emb if share_embeddings else cp(params.tok_emb)
    layers = [
        LayerParams(
            cp(l.norm1_g), cp(l.norm1_b), cp(l.wq), cp(l.wk), cp(l.wv), cp(l.wo),
            cp(l.norm2_g), cp(l.norm2_b), cp(l.w1), cp(l.w2),
        )
        for l in params.layers
    ]
    tied = params.lm_w is params.tok_emb
    lm_w = tok if tied else cp(params.lm_w)
    return ModelParams(
        params.config, tok, cp(params.pos_emb), layers,
        cp(params.final_g), cp(params.final_b), lm_w, cp(params.lm_b),
    )


# ---------------------------------------------------------------------------
# caching and prefixes


@dataclass
class KVCache:
    """Per-layer attention keys/values for already-processed positions."""

    layers: list[tuple[Tensor, Tensor]]  # each [B, h, C, d_head]

    @property
    def n_positions(self) -> int:
        return self.layers[0][0].shape[-2] if self.layers else 0

    def truncated(self, n: int) -> "KVCache":
        return KVCache(
            [(lt.slice_rows(k, 0, n), lt.slice_rows(v, 0, n)) for k, v in self.layers]
        )


@dataclass
class PrefixState:
    """A batch of vector prefixes: token embeddings and/or latent vectors.

    ``x`` holds raw input vectors (positions are added inside the forward),
    ``pos`` the per-sample position ids, ``real`` whether a slot is an
    actual input rather than left/right padding. ``cache`` is present only
    on the fast incremental path and always covers every current position.
    """

    x: Tensor  # [B, T, d]
    pos: np.ndarray  # [B, T] int
    real: np.ndarray  # [B, T] bool
    cache: KVCache | None = None

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    @property
    def length(self) -> int:
        return self.x.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        """Per-sample count of real positions."""
        return self.real.sum(axis=1)

    def append_data(self, v: Tensor, real: np.ndarray | None = None) -> "PrefixState":
        """Concatenate a block without running the model (cache is dropped)."""
        B, L, _ = v.shape
        if real is None:
            real = np.ones((B, L), dtype=bool)
        new_pos = self.lengths[:, None] + np.arange(L)[None, :]
        return PrefixState(
            x=lt.concat_rows(self.x, v),
            pos=np.concatenate([self.pos, new_pos], axis=1),
            real=np.concatenate([self.real, real], axis=1),
            cache=None,
        )


def attention_bias(real_cache: np.ndarray | None, real_block: np.ndarray) -> np.ndarray:
    """Additive mask [B, 1, L, C+L]: 0 where attention is allowed, -inf elsewhere.

    Cached columns are allowed when real; block columns follow the causal
    rule, with the diagonal always open so padded queries still normalize
    over at least themselves (keeps their garbage finite, never read).
    """
    B, L = real_block.shape
    causal = np.tril(np.ones((L, L), dtype=bool))
    block_allowed = causal[None, :, :] & (real_block[:, None, :] | np.eye(L, dtype=bool))
    if real_cache is not None and real_cache.shape[1] > 0:
        C = real_cache.shape[1]
        cache_allowed = np.broadcast_to(real_cache[:, None, :], (B, L, C))
        allowed = np.concatenate([cache_allowed, block_allowed], axis=2)
    else:
        allowed = block_allowed
    bias = np.where(allowed, 0.0, -np.inf)
    return bias[:, None, :, :]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return lt.transpose(lt.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, T, dh = x.shape
    return lt.reshape(lt.transpose(x, (0, 2, 1, 3)), (B, T, h * dh))


def _norm(x: Tensor, g: Tensor, b: Tensor | None, cfg: ModelConfig) -> Tensor:
    if cfg.norm == "rms":
        return lt.rms_norm(x, g, cfg.norm_eps)
    return lt.layer_norm(x, g, b, cfg.norm_eps)


def forward_block(
    params: ModelParams,
    x: Tensor,
    pos: np.ndarray,
    bias: np.ndarray,
    cache: KVCache | None = None,
    keep_cache: bool = True,
) -> tuple[Tensor, KVCache | None]:
    """Forward ``L`` new positions given ``cache`` over prior positions.

    Returns final-layer hidden states for the block (post final-norm) and
    the extended cache (or None when ``keep_cache`` is false). With
    ``cache=None`` and the full sequence as the block this is the plain
    whole-sequence forward.
    """
    cfg = params.config
    B, L, d = x.shape
    if np.any(pos >= cfg.max_seq_len):
        raise ValueError(
            f"position {int(pos.max())} exceeds max_seq_len {cfg.max_seq_len}"
        )
    h = lt.add(x, lt.embedding_lookup(params.pos_emb, pos))
    bias_t = Tensor(bias)
    inv_sqrt = 1.0 / math.sqrt(cfg.d_head)
    new_layers: list[tuple[Tensor, Tensor]] = []
    for i, layer in enumerate(params.layers):
        a_in = _norm(h, layer.norm1_g, layer.norm1_b, cfg)
        q = _split_heads(lt.matmul(a_in, layer.wq), cfg.n_heads)
        k = _split_heads(lt.matmul(a_in, layer.wk), cfg.n_heads)
        v = _split_heads(lt.matmul(a_in, layer.wv), cfg.n_heads)
        if cache is not None and cache.n_positions > 0:
            k_all = lt.concat_rows(cache.layers[i][0], k)
            v_all = lt.concat_rows(cache.layers[i][1], v)
        else:
            k_all, v_all = k, v
        if keep_cache:
            new_layers.append((k_all, v_all))
        scores = lt.scale(lt.matmul(q, lt.transpose(k_all, (0, 1, 3, 2))), inv_sqrt)
        probs = lt.softmax(lt.add(scores, bias_t))
        ctx = _merge_heads(lt.matmul(probs, v_all))
        h = lt.add(h, lt.matmul(ctx, layer.wo))
        m_in = _norm(h, layer.norm2_g, layer.norm2_b, cfg)
        h = lt.add(h, lt.matmul(lt.gelu(lt.matmul(m_in, layer.w1)), layer.w2))
    h = _norm(h, params.final_g, params.final_b, cfg)
    return h, (KVCache(new_layers) if keep_cache else None)


def sequential_hidden(params: ModelParams, prefix: PrefixState) -> Tensor:
    """All hidden states, computed one position at a time (canonical path).

    Position t is computed strictly from positions <= t, so hidden states
    over a prefix are bitwise independent of anything appended later.
    """
    B, T, _ = prefix.x.shape
    cache: KVCache | None = None
    outs = []
    for t in range(T):
        xt = lt.slice_rows(prefix.x, t, t + 1)
        real_cache = prefix.real[:, :t] if t > 0 else None
        bias = attention_bias(real_cache, prefix.real[:, t : t + 1])
        h, cache = forward_block(params, xt, prefix.pos[:, t : t + 1], bias, cache)
        outs.append(h)
    full = outs[0]
    for h in outs[1:]:
        full = lt.concat_rows(full, h)
    return full


def full_hidden(params: ModelParams, prefix: PrefixState) -> Tensor:
    """All hidden states via the whole-sequence fast path."""
    bias = attention_bias(None, prefix.real)
    h, _ = forward_block(params, prefix.x, prefix.pos, bias, None, keep_cache=False)
    return h


def last_hidden(params: ModelParams, prefix: PrefixState) -> Tensor:
    """Hidden state at the final position, [B, d].

    Without a cache this recomputes the prefix through the canonical
    per-position recurrence; with a cache it recomputes only the last
    position against the cached keys/values.
    """
    if prefix.length == 0:
        raise ValueError("last_hidden of an empty prefix")
    T = prefix.length
    if prefix.cache is not None:
        ctx = prefix.cache.truncated(T - 1) if T > 1 else None
        xt = lt.slice_rows(prefix.x, T - 1, T)
        bias = attention_bias(prefix.real[:, : T - 1] if T > 1 else None,
                              prefix.real[:, T - 1 :])
        h, _ = forward_block(params, xt, prefix.pos[:, T - 1 :], bias, ctx,
                             keep_cache=False)
        return lt.reshape(h, (prefix.batch, params.config.d_model))
    h = sequential_hidden(params, prefix)
    return lt.reshape(lt.slice_rows(h, T - 1, T), (prefix.batch, params.config.d_model))


def prefix_from_vectors(
    params: ModelParams,
    x: Tensor,
    pos: np.ndarray,
    real: np.ndarray,
    use_cache: bool,
) -> tuple[PrefixState, Tensor | None]:
    """Build a prefix; on the cached path also forward it (one block pass).

    Returns ``(prefix, hidden)`` where ``hidden`` is the block's hidden
    states [B, T, d] when ``use_cache`` is set, else None (computation is
    deferred to ``last_hidden``).
    """
    if not use_cache:
        return PrefixState(x, pos, real, None), None
    bias = attention_bias(None, real)
    h, cache = forward_block(params, x, pos, bias, None)
    return PrefixState(x, pos, real, cache), h


def prefix_append(
    params: ModelParams,
    prefix: PrefixState,
    v: Tensor,
    real: np.ndarray | None = None,
) -> tuple[PrefixState, Tensor]:
    """Append a block of vectors [B, L, d] and forward it against the cache.

    Returns the extended prefix and the block's hidden states [B, L, d].
    Requires a cached prefix (the fast path); the no-cache route goes
    through ``append_data`` + ``last_hidden``.
    """
    if prefix.cache is None:
        raise ValueError("prefix_append requires a cached prefix")
    B, L, _ = v.shape
    if real is None:
        real = np.ones((B, L), dtype=bool)
    new_pos = prefix.lengths[:, None] + np.arange(L)[None, :]
    bias = attention_bias(prefix.real, real)
    h, cache = forward_block(params, v, new_pos, bias, prefix.cache)
    ext = PrefixState(
        x=lt.concat_rows(prefix.x, v),
        pos=np.concatenate([prefix.pos, new_pos], axis=1),
        real=np.concatenate([prefix.real, real], axis=1),
        cache=cache,
    )
    return ext, h


def embed_tokens(params: ModelParams, ids: np.ndarray) -> Tensor:
    """Token embeddings e(.) for an id array [...]; returns [..., d]."""
    return lt.embedding_lookup(params.tok_emb, np.asarray(ids))


def lm_logits(params: ModelParams, h: Tensor) -> Tensor:
    """LM-head projection W h (callers apply softmax): [..., d] -> [..., V]."""
    if h.shape[-1] != params.config.d_model:
        raise ValueError(
            f"hidden dim {h.shape[-1]} != d_model {params.config.d_model}"
        )
    out = lt.matmul(h, lt.transpose(params.lm_w, (1, 0)))
    if params.lm_b is not None:
        out = lt.add(out, params.lm_b)
    return out
