"""The implicit reasoning phases: latent autoregression and answer decoding.

Latent construction follows the hidden-state feedback recurrence: the last
hidden state of the current prefix becomes the next input vector, K times,
then the model switches to ordinary vocabulary decoding for the answer.
Soft-thinking mixing optionally blends each latent with a probability
weighted average of the embedding table before it is fed back.

Everything here runs without the step decoder; inference never touches it.

Input layout (batch-first everywhere; the single-question entry points wrap
a batch of one):

    [question tokens] <q> <bl> | latents | <el> <a> [answer tokens] <eos>

Questions are left-padded to a common length so the latent/answer columns
line up across a batch; padding is excluded from attention and positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import taskgen as tg
from . import tensor as lt
from .model import (
    ModelParams,
    PrefixState,
    embed_tokens,
    full_hidden,
    last_hidden,
    lm_logits,
    prefix_append,
    prefix_from_vectors,
)
from .tensor import Tensor


class SequenceOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class SoftThinkConfig:
    continuous_weight: float = 1.0  # alpha
    soft_weight: float = 0.0  # beta

    def __post_init__(self):
        if self.soft_weight < 0:
            raise ValueError("soft_weight must be >= 0")
        if self.continuous_weight + self.soft_weight <= 0:
            raise ValueError("continuous_weight + soft_weight must be positive")


DISABLED_SOFT_THINK = SoftThinkConfig()


@dataclass
class LatentChain:
    """Latent vectors z_1..z_K plus the prefixes they extended.

    ``latents[k]`` is the raw hidden state [B, d]; ``mixed[k]`` is the
    vector actually appended to the prefix and handed to the step decoder
    (the same object when soft thinking is off). ``prefixes[k]`` is the
    prefix state immediately before latent k was computed, retained so
    tests can re-execute the recurrence.
    """

    latents: list[Tensor] = field(default_factory=list)
    mixed: list[Tensor] = field(default_factory=list)
    prefixes: list[PrefixState] = field(default_factory=list)
    tokens_per_latent: int = 1

    @property
    def k(self) -> int:
        return len(self.latents)

    @property
    def origin(self) -> PrefixState | None:
        return self.prefixes[0] if self.prefixes else None


def soft_think_mix(params: ModelParams, z: Tensor, cfg: SoftThinkConfig) -> Tensor:
    """Blend a latent with the probability-weighted embedding average.

    With ``soft_weight == 0`` the input tensor is returned unchanged (the
    disabled branch is the identity, not a multiply-by-one). Otherwise:
    p = softmax(W z), z_soft = E^T p, result = alpha z + beta z_soft.
    """
    if cfg.soft_weight == 0.0:
        return z
    p = lt.softmax(lm_logits(params, z))
    z_soft = lt.matmul(p, params.tok_emb)
    return lt.add(lt.scale(z, cfg.continuous_weight), lt.scale(z_soft, cfg.soft_weight))


def encode_question_batch(
    params: ModelParams,
    questions: list[list[int]],
    use_cache: bool,
) -> tuple[PrefixState, Tensor | None]:
    """Left-pad ``[question, <q>, <bl>]`` rows into one prefix.

    Returns the prefix and, on the cached path, the hidden states of the
    block. The final column is the begin-latent marker for every sample, so
    ``hidden[:, -1]`` is H(U0) batch-wide.
    """
    rows = [q + [tg.QSEP_ID, tg.BLAT_ID] for q in questions]
    width = max(len(r) for r in rows)
    B = len(rows)
    ids = np.full((B, width), tg.PAD_ID, dtype=np.int64)
    real = np.zeros((B, width), dtype=bool)
    for b, r in enumerate(rows):
        ids[b, width - len(r):] = r
        real[b, width - len(r):] = True
    pos = np.maximum(0, np.cumsum(real, axis=1) - 1)
    x = embed_tokens(params, ids)
    return prefix_from_vectors(params, x, pos, real, use_cache)


def _check_headroom(params, prefix, k, tokens_per_latent, answer_headroom):
    needed = int(prefix.lengths.max()) + k * tokens_per_latent + answer_headroom
    if needed > params.config.max_seq_len:
        raise SequenceOverflowError(
            f"{needed} positions needed (> max_seq_len {params.config.max_seq_len})"
        )


def build_latents_batch(
    params: ModelParams,
    questions: list[list[int]],
    k: int,
    soft: SoftThinkConfig = DISABLED_SOFT_THINK,
    tokens_per_latent: int = 1,
    use_cache: bool = True,
    answer_headroom: int = 8,
) -> tuple[LatentChain, PrefixState]:
    """Run the implicit phase over a batch of questions.

    Each latent step takes the last hidden state of the current prefix,
    applies soft-thinking mixing, and appends the result as the next input
    vector (``tokens_per_latent`` sub-vectors per counted latent; the last
    sub-vector of a group is that latent). Differentiable end to end; with
    ``use_cache`` off, every hidden state is recomputed from scratch via
    the canonical recurrence.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    chain = LatentChain(tokens_per_latent=tokens_per_latent)
    if use_cache:
        prefix, h = encode_question_batch(params, questions, True)
        _check_headroom(params, prefix, k, tokens_per_latent, answer_headroom)
        B = prefix.batch
        d = params.config.d_model
        z = lt.reshape(lt.slice_rows(h, prefix.length - 1, prefix.length), (B, d))
        for _ in range(k):
            for sub in range(tokens_per_latent):
                if sub == tokens_per_latent - 1:
                    chain.prefixes.append(prefix)
                zp = soft_think_mix(params, z, soft)
                prefix, h_new = prefix_append(params, prefix, lt.reshape(zp, (B, 1, d)))
                if sub == tokens_per_latent - 1:
                    chain.latents.append(z)
                    chain.mixed.append(zp)
                z = lt.reshape(h_new, (B, d))
        return chain, prefix

    prefix, _ = encode_question_batch(params, questions, False)
    _check_headroom(params, prefix, k, tokens_per_latent, answer_headroom)
    B = prefix.batch
    d = params.config.d_model
    for _ in range(k):
        for sub in range(tokens_per_latent):
            if sub == tokens_per_latent - 1:
                chain.prefixes.append(prefix)
            z = last_hidden(params, prefix)
            zp = soft_think_mix(params, z, soft)
            prefix = prefix.append_data(lt.reshape(zp, (B, 1, d)))
            if sub == tokens_per_latent - 1:
                chain.latents.append(z)
                chain.mixed.append(zp)
    return chain, prefix


def build_latents(
    params: ModelParams,
    question: list[int],
    k: int,
    soft: SoftThinkConfig = DISABLED_SOFT_THINK,
    tokens_per_latent: int = 1,
    use_cache: bool = False,
    answer_headroom: int = 8,
) -> tuple[LatentChain, PrefixState]:
    """Single-question wrapper (batch of one) around the implicit phase."""
    return build_latents_batch(
        params, [list(question)], k, soft, tokens_per_latent, use_cache, answer_headroom
    )


def answer_log_prob(params: ModelParams, prefix: PrefixState, answer: list[int]) -> Tensor:
    """Teacher-forced sum of log p(a_t | prefix, a_<t); a log-probability (<= 0).

    The prefix is taken as-is (callers include any structural markers they
    want conditioned on). Differentiable; negate and normalize for losses.
    """
    answer = list(answer)
    if not answer:
        raise ValueError("empty answer")
    B = prefix.batch
    if B != 1:
        raise ValueError("answer_log_prob scores one sample; batch the loss instead")
    ext = prefix.append_data(embed_tokens(params, np.array([answer[:-1]], dtype=np.int64))) \
        if len(answer) > 1 else prefix
    h = full_hidden(params, ext)
    L = len(answer)
    h_pred = lt.slice_rows(h, ext.length - L, ext.length)
    logits = lm_logits(params, h_pred)
    targets = np.array([answer], dtype=np.int64)
    nll_sum = lt.cross_entropy_masked(
        logits, targets, np.ones((1, L), dtype=bool), reduction="sum"
    )
    return lt.scale(nll_sum, -1.0)


@dataclass
class GenerationResult:
    tokens: list[int]  # emitted answer tokens, eos excluded
    truncated: bool  # no eos within max_len
    n_positions: int  # total decoded positions: question + latents + forced + emitted

    @property
    def text(self) -> str:
        return tg.detokenize(self.tokens)


def generate_answers_batch(
    params: ModelParams,
    questions: list[list[int]],
    k: int,
    soft: SoftThinkConfig = DISABLED_SOFT_THINK,
    max_len: int = 8,
    tokens_per_latent: int = 1,
    force_answer_sep: bool = True,
) -> list[GenerationResult]:
    """Greedy decoding after the implicit phase; the decoder plays no part.

    Forces the end-latent marker (and, unless ``force_answer_sep`` is off
    for explicit-step checkpoints, the answer separator), then emits argmax
    tokens until <eos> or ``max_len``. Argmax ties break toward the lowest
    token id. Runs under no_grad.
    """
    with lt.no_grad():
        chain, prefix = build_latents_batch(
            params, questions, k, soft, tokens_per_latent,
            use_cache=True, answer_headroom=max_len + 4,
        )
        B = prefix.batch
        d = params.config.d_model
        forced = [tg.ELAT_ID, tg.ASEP_ID] if force_answer_sep else [tg.ELAT_ID]
        ids = np.tile(np.array(forced, dtype=np.int64), (B, 1))
        prefix, h = prefix_append(params, prefix, embed_tokens(params, ids))
        h_last = lt.slice_rows(h, h.shape[1] - 1, h.shape[1])

        emitted = np.full((B, max_len), tg.PAD_ID, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        n_emitted = np.zeros(B, dtype=np.int64)
        for t in range(max_len):
            logits = lm_logits(params, lt.reshape(h_last, (B, d)))
            nxt = np.argmax(logits.data, axis=-1).astype(np.int64)  # first max wins
            emitted[:, t] = np.where(done, tg.PAD_ID, nxt)
            n_emitted += ~done
            done |= nxt == tg.EOS_ID
            if done.all():
                break
            prefix, h_last = prefix_append(
                params, prefix, embed_tokens(params, nxt[:, None])
            )

        results = []
        base_len = prefix_question_lengths(questions) + k * tokens_per_latent + len(forced)
        for b in range(B):
            toks = [int(x) for x in emitted[b, : n_emitted[b]]]
            truncated = not done[b]
            if toks and toks[-1] == tg.EOS_ID:
                toks = toks[:-1]
            results.append(
                GenerationResult(toks, truncated, int(base_len[b] + n_emitted[b]))
            )
        return results


def prefix_question_lengths(questions: list[list[int]]) -> np.ndarray:
    return np.array([len(q) + 2 for q in questions])  # + <q> + <bl>


def generate_answer(
    params: ModelParams,
    question: list[int],
    k: int,
    soft: SoftThinkConfig = DISABLED_SOFT_THINK,
    max_len: int = 8,
    tokens_per_latent: int = 1,
) -> GenerationResult:
    """Single-question greedy generation (batch of one)."""
    return generate_answers_batch(
        params, [list(question)], k, soft, max_len, tokens_per_latent
    )[0]
