"""Step-level supervision: the training-only decoder and the loss surfaces.

Each latent z_k is paired with the text of the k-th gold reasoning step.
The decoder (a second transformer, architecturally identical to the base
model) conditions on z_k alone, injected as a prefix vector ahead of the
teacher-forced step tokens; the latent slot and padding are excluded from
the loss. All (sample, step) pairs are packed into one decoder batch; rows
are independent by construction, which realizes the per-step factorization
p(s_1..s_K | z_1..z_K) = prod_k p(s_k | z_k).

The decoder exists only here. The inference path never reads it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import taskgen as tg
from . import tensor as lt
from .model import (
    ModelParams,
    PrefixState,
    attention_bias,
    clone_params,
    embed_tokens,
    forward_block,
    lm_logits,
)
from .reasoner import LatentChain, answer_log_prob
from .taskgen import ReasoningSample
from .tensor import Tensor


@dataclass
class DecoderParams:
    """The auxiliary decoder plus its embedding-sharing mode."""

    model: ModelParams
    share_embeddings_with_base: bool


def init_decoder(
    base: ModelParams,
    share_embeddings: bool = True,
    tie_head_to_embeddings: bool = False,
) -> DecoderParams:
    """Decoder initialized as a copy of the base model's current weights.

    With ``share_embeddings`` the token embedding table is the same object,
    so a step-loss backward accumulates into the same gradient buffer the
    base forward uses. The decoder's LM head is its own tensor unless
    ``tie_head_to_embeddings`` points it at the embedding table.
    """
    model = clone_params(base, share_embeddings)
    if tie_head_to_embeddings:
        model.lm_w = model.tok_emb
    return DecoderParams(model, share_embeddings)


@dataclass(frozen=True)
class LossWeights:
    lambda_step: float = 1.0
    lambda_lm: float = 1.0

    def __post_init__(self):
        if self.lambda_step < 0 or self.lambda_lm < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_step == 0 and self.lambda_lm == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass
class StepBatch:
    """Packed decoder rows: one per supervised (sample, latent) pair.

    A row's decoder input is its latent vector followed by the teacher
    forced step token embeddings (embedded by the decoder at forward time),
    right-padded. The latent slot and pad tail are never supervised, so a
    row with an L_k-token step has exactly L_k supervised positions after
    the logits/labels shift. ``rows`` records (sample, latent) per row.
    """

    z: Tensor | None  # [N, 1, d] selected latent vectors
    input_ids: np.ndarray  # [N, L] teacher-forced step tokens (pad-filled)
    labels: np.ndarray  # [N, 1+L]; slot 0 is the latent, never a target
    mask: np.ndarray  # [N, 1+L] True at supervised label positions
    pos: np.ndarray  # [N, 1+L]
    real: np.ndarray  # [N, 1+L] attention mask (False on pad tail)
    rows: list[tuple[int, int]]

    @property
    def is_empty(self) -> bool:
        return self.z is None

    @property
    def n_rows(self) -> int:
        return 0 if self.is_empty else self.z.shape[0]


def _restatement_tokens(sample: ReasoningSample) -> list[int]:
    return tg.tokenize(f"<<{sample.answer_text}>>")


def step_targets(
    sample: ReasoningSample, k_active: int, surplus_supervision: bool = True
) -> list[list[int] | None]:
    """Gold token sequence per latent index, applying the alignment rules.

    More gold steps than latents: latents 1..K-1 take steps 1..K-1 and the
    last latent takes the final step (keeps answer-adjacent semantics on
    the last latent). Fewer gold steps: surplus latents take the answer
    restatement ``<<answer>>``, or None when surplus supervision is off.
    """
    n = sample.n_steps
    out: list[list[int] | None] = []
    for k in range(k_active):
        if n >= k_active:
            idx = k if k < k_active - 1 else n - 1
            out.append(sample.step_tokens[idx])
        elif k < n:
            out.append(sample.step_tokens[k])
        elif surplus_supervision:
            out.append(_restatement_tokens(sample))
        else:
            out.append(None)
    return out


def build_step_batch(
    samples: list[ReasoningSample],
    chain: LatentChain,
    k_active: int,
    surplus_supervision: bool = True,
) -> StepBatch:
    """Pair latents with gold steps and pack them into one decoder batch."""
    if k_active > chain.k:
        raise ValueError(f"k_active {k_active} exceeds chain length {chain.k}")
    B = len(samples)
    if k_active and chain.latents[0].shape[0] != B:
        raise ValueError("chain batch size does not match samples")
    rows: list[tuple[int, int]] = []
    targets: list[list[int]] = []
    for b, sample in enumerate(samples):
        for k, toks in enumerate(step_targets(sample, k_active, surplus_supervision)):
            if toks is not None:
                rows.append((b, k))
                targets.append(toks)
    if not rows:
        e_i = np.zeros((0, 0), dtype=np.int64)
        e_b = np.zeros((0, 0), dtype=bool)
        return StepBatch(None, e_i, e_i, e_b, e_i, e_b, [])

    L = max(len(t) for t in targets)
    N = len(rows)
    labels = np.full((N, 1 + L), tg.PAD_ID, dtype=np.int64)
    mask = np.zeros((N, 1 + L), dtype=bool)
    real = np.zeros((N, 1 + L), dtype=bool)
    real[:, 0] = True
    for i, toks in enumerate(targets):
        labels[i, 1 : 1 + len(toks)] = toks
        mask[i, 1 : 1 + len(toks)] = True
        real[i, 1 : 1 + len(toks)] = True
    pos = np.tile(np.arange(1 + L), (N, 1))

    # differentiable gather of the (mixed) latents: [B, K, d] -> [N, 1, d]
    d = chain.mixed[0].shape[-1]
    z_bk = lt.reshape(chain.mixed[0], (B, 1, d))
    for z in chain.mixed[1:k_active]:
        z_bk = lt.concat_rows(z_bk, lt.reshape(z, (B, 1, d)))
    z_flat = lt.reshape(z_bk, (B * k_active, d))
    row_ids = np.array([b * k_active + k for b, k in rows], dtype=np.int64)
    z_sel = lt.reshape(lt.embedding_lookup(z_flat, row_ids), (N, 1, d))

    return StepBatch(z_sel, labels[:, 1:], labels, mask, pos, real, rows)


def step_logits(decoder: DecoderParams, batch: StepBatch) -> Tensor:
    """Decoder forward over a packed batch -> [N, 1+L, V]."""
    x = lt.concat_rows(batch.z, embed_tokens(decoder.model, batch.input_ids))
    bias = attention_bias(None, batch.real)
    h, _ = forward_block(decoder.model, x, batch.pos, bias, None, keep_cache=False)
    return lm_logits(decoder.model, h)


def step_loss(decoder: DecoderParams, batch: StepBatch) -> Tensor:
    """Teacher-forced cross-entropy over supervised step tokens (mean).

    Empty batches contribute an exact zero (flag via ``batch.is_empty``).
    Conditioning is z_k alone: rows never attend across the batch axis.
    """
    if batch.is_empty:
        return Tensor(0.0)
    logits = step_logits(decoder, batch)
    L1 = batch.labels.shape[1]
    shifted = lt.slice_rows(logits, 0, L1 - 1)
    return lt.cross_entropy_masked(shifted, batch.labels[:, 1:], batch.mask[:, 1:])


def per_step_losses(decoder: DecoderParams, batch: StepBatch) -> np.ndarray:
    """Per-row mean NLL, for factorization checks; not differentiable."""
    if batch.is_empty:
        return np.zeros(0)
    with lt.no_grad():
        logits = step_logits(decoder, batch).data
    lab = batch.labels[:, 1:]
    msk = batch.mask[:, 1:]
    lg = logits[:, :-1, :]
    m = lg.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(lg - m).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(lg, np.where(msk, lab, 0)[..., None], axis=-1)[..., 0]
    nll = np.where(msk, lse - picked, 0.0)
    return nll.sum(axis=1) / msk.sum(axis=1)


def answer_loss(base: ModelParams, prefix: PrefixState, answer: list[int]) -> Tensor:
    """Answer LM loss for one sample: -answer_log_prob / len(answer)."""
    if not answer:
        raise ValueError("empty answer")
    return lt.sdiv(lt.scale(answer_log_prob(base, prefix, answer), -1.0), len(answer))


def total_loss(step: Tensor, ans: Tensor, w: LossWeights) -> Tensor:
    """Weighted objective: lambda_step * L_step + lambda_lm * L_ans."""
    return lt.add(lt.scale(step, w.lambda_step), lt.scale(ans, w.lambda_lm))
