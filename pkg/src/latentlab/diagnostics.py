"""Latent-geometry and interpretability instruments.

Two geometric series characterize the health of a latent chain: the mean
pairwise distance between latents (collapse drives it toward zero) and the
mean distance from each latent to the vocabulary-embedding centroid (drift
away from the lexical region drives it up). A run is flagged as collapsed
when both signatures fire together.

The accuracy breakdown projects latents through the base LM head and asks
whether the gold step content (result digits, operators) survives in the
union of top-k decoded tokens; definitions are the simplest token-coverage
reading, reported alongside raw series so users can re-threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import taskgen as tg
from . import tensor as lt
from .model import ModelParams, lm_logits
from .reasoner import (
    DISABLED_SOFT_THINK,
    SoftThinkConfig,
    build_latents_batch,
    generate_answers_batch,
)
from .supervisor import DecoderParams
from .taskgen import ReasoningSample
from .tensor import Tensor


def inter_latent_distance(z_list) -> float:
    """Mean pairwise Euclidean distance: 2/(K(K-1)) * sum_{i<j} ||z_i - z_j||.

    Undefined below two latents (the normalization divides by K(K-1)); a
    K<2 call is an input error, not a zero.
    """
    zs = [np.asarray(getattr(z, "data", z), dtype=np.float64) for z in z_list]
    K = len(zs)
    if K < 2:
        raise ValueError(f"inter_latent_distance needs K >= 2 latents, got {K}")
    total = 0.0
    for i in range(K):
        for j in range(i + 1, K):
            total += float(np.linalg.norm(zs[i] - zs[j]))
    return 2.0 * total / (K * (K - 1))


def dist_to_vocab_center(z_list, emb) -> float:
    """Mean distance from each latent to the embedding centroid mu."""
    zs = [np.asarray(getattr(z, "data", z), dtype=np.float64) for z in z_list]
    if not zs:
        raise ValueError("dist_to_vocab_center needs at least one latent")
    e = np.asarray(getattr(emb, "data", emb), dtype=np.float64)
    mu = e.mean(axis=0)
    return float(np.mean([np.linalg.norm(z - mu) for z in zs]))


@dataclass
class GeometryReport:
    epoch: int
    k: int
    dist: float  # nan when K < 2
    dist_vc: float
    top_tokens: list[list[tuple[int, float]]] = field(default_factory=list)

    @property
    def has_dist(self) -> bool:
        return np.isfinite(self.dist)


def latent_geometry(
    params: ModelParams,
    samples: list[ReasoningSample],
    k: int,
    soft: SoftThinkConfig = DISABLED_SOFT_THINK,
    tokens_per_latent: int = 1,
    batch_size: int = 256,
) -> tuple[float, float]:
    """Mean per-sample (Dist, DistVC) over a dataset's latent chains.

    Dist is nan when k < 2 (see ``inter_latent_distance``); DistVC needs
    k >= 1 and is nan when k == 0.
    """
    if k < 1:
        return (float("nan"), float("nan"))
    dists, vcs = [], []
    with lt.no_grad():
        for lo in range(0, len(samples), batch_size):
            batch = samples[lo : lo + batch_size]
            chain, _ = build_latents_batch(
                params, [s.question_tokens for s in batch], k, soft, tokens_per_latent
            )
            zs = np.stack([z.data for z in chain.latents], axis=1)  # [B, K, d]
            for b in range(zs.shape[0]):
                per = [zs[b, i] for i in range(k)]
                if k >= 2:
                    dists.append(inter_latent_distance(per))
                vcs.append(dist_to_vocab_center(per, params.tok_emb))
    dist = float(np.mean(dists)) if dists else float("nan")
    return dist, float(np.mean(vcs))


def top_k_decode(params: ModelParams, z, k: int) -> list[tuple[int, float]]:
    """Top-k (token id, logit) of the LM-head projection of a latent.

    Descending by logit; ties break toward the lower token id (stable sort
    over negated logits).
    """
    vocab = params.config.vocab_size
    if not 1 <= k <= vocab:
        raise ValueError(f"top_k_decode k must be in [1, {vocab}], got {k}")
    z = z if isinstance(z, Tensor) else Tensor(z)
    with lt.no_grad():
        logits = lm_logits(params, lt.reshape(z, (1, z.data.size))).data[0]
    order = np.argsort(-logits, kind="stable")[:k]
    return [(int(i), float(logits[i])) for i in order]


@dataclass
class AccuracyBreakdown:
    number_acc: float
    operator_acc: float
    answer_acc: float

    def __post_init__(self):
        for v in (self.number_acc, self.operator_acc, self.answer_acc):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy outside [0,1]: {v}")


def accuracy_breakdown(
    params: ModelParams,
    decoder: DecoderParams | None,
    samples: list[ReasoningSample],
    k: int,
    top_k: int = 8,
    soft: SoftThinkConfig = DISABLED_SOFT_THINK,
    tokens_per_latent: int = 1,
    max_answer_len: int = 8,
) -> AccuracyBreakdown:
    """Number / operator / answer accuracy over a dataset.

    number_acc: fraction of gold step results whose digit tokens all appear
    in the union of top-k LM-head decodings across the sample's latents.
    operator_acc: same for the gold operator tokens. answer_acc: greedy
    exact match. The latents are projected through the base LM head (the
    ``decoder`` argument is accepted for signature parity; the token-level
    metrics do not consult it).
    """
    if k < 1:
        raise ValueError("accuracy_breakdown needs k >= 1")
    num_hits = num_total = op_hits = op_total = ans_hits = 0
    with lt.no_grad():
        chain, _ = build_latents_batch(
            params, [s.question_tokens for s in samples], k, soft, tokens_per_latent
        )
        zs = np.stack([z.data for z in chain.latents], axis=1)
        results = generate_answers_batch(
            params,
            [s.question_tokens for s in samples],
            k,
            soft,
            max_len=max_answer_len,
            tokens_per_latent=tokens_per_latent,
        )
    for b, sample in enumerate(samples):
        union: set[int] = set()
        for i in range(k):
            union.update(t for t, _ in top_k_decode(params, zs[b, i], top_k))
        for step in tg.parse_steps(sample.steps_text):
            digit_ids = {tg.VOCAB.id(c) for c in str(step.result)}
            num_total += 1
            num_hits += digit_ids <= union
            for op in step.operators:
                op_total += 1
                op_hits += tg.VOCAB.id(op) in union
        ans_hits += results[b].tokens == sample.answer_tokens
    return AccuracyBreakdown(
        number_acc=num_hits / max(num_total, 1),
        operator_acc=op_hits / max(op_total, 1),
        answer_acc=ans_hits / len(samples),
    )


def detect_collapse(
    history: list[GeometryReport], window: int = 5, drop_ratio: float = 0.3
) -> bool:
    """Flag the collapse signature: Dist crashes while DistVC drifts up.

    Fires when some report's dist falls below ``drop_ratio`` times the
    running max of the previous ``window`` reports while its dist_vc rises
    above the running min over the same window. Thresholds are tool
    defaults, not claims; keep the raw series alongside.
    """
    if not history:
        raise ValueError("detect_collapse on empty history")
    usable = [r for r in history if r.has_dist]
    for i in range(1, len(usable)):
        prev = usable[max(0, i - window) : i]
        ref_max = max(r.dist for r in prev)
        ref_min = min(r.dist_vc for r in prev)
        cur = usable[i]
        if cur.dist < drop_ratio * ref_max and cur.dist_vc > ref_min:
            return True
    return False


def decode_latent_steps(
    decoder: DecoderParams,
    chain,
    max_len: int = 16,
) -> list[list[int]]:
    """Greedy step text per latent, conditioned on that latent alone.

    Reuses the training decoder as the interpretability probe: each latent
    seeds a fresh decoder prefix and generates until the step-close token
    ('>>'), <eos>, or ``max_len``. Returns token-id lists (one per latent;
    batch size of the chain must be 1).
    """
    from .model import embed_tokens, prefix_append, prefix_from_vectors, PrefixState

    if chain.k == 0:
        return []
    if chain.mixed[0].shape[0] != 1:
        raise ValueError("decode_latent_steps expects a single-sample chain")
    d = decoder.model.config.d_model
    out: list[list[int]] = []
    with lt.no_grad():
        for z in chain.mixed:
            x = lt.reshape(z, (1, 1, d))
            prefix, h = prefix_from_vectors(
                decoder.model, x, np.zeros((1, 1), dtype=np.int64),
                np.ones((1, 1), dtype=bool), True,
            )
            toks: list[int] = []
            for _ in range(max_len):
                logits = lm_logits(
                    decoder.model, lt.reshape(lt.slice_rows(h, h.shape[1] - 1, h.shape[1]), (1, d))
                ).data[0]
                nxt = int(np.argmax(logits))
                toks.append(nxt)
                if nxt in (tg.STEP_END_ID, tg.EOS_ID):
                    break
                prefix, h = prefix_append(
                    decoder.model, prefix, embed_tokens(decoder.model, np.array([[nxt]]))
                )
            out.append(toks)
    return out


# ---------------------------------------------------------------------------
# report files


def write_geometry_csv(path, history: list[GeometryReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "k", "dist", "dist_vc"])
        for r in history:
            w.writerow([
                r.epoch, r.k,
                repr(r.dist) if r.has_dist else "",
                repr(r.dist_vc) if np.isfinite(r.dist_vc) else "",
            ])


def read_geometry_csv(path) -> list[GeometryReport]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(GeometryReport(
                epoch=int(row["epoch"]),
                k=int(row["k"]),
                dist=float(row["dist"]) if row["dist"] else float("nan"),
                dist_vc=float(row["dist_vc"]) if row["dist_vc"] else float("nan"),
            ))
    return out


def plot_geometry_svg(path, history: list[GeometryReport]) -> None:
    """Dist / DistVC vs epoch as an SVG line plot."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r.dist for r in history], label="latent distance", color="tab:red")
    ax.plot(epochs, [r.dist_vc for r in history], label="distance to vocab center",
            color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("distance")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_latent_dump(path, entries: list[dict]) -> None:
    """Plain-text dump: question, per-latent decoded step, answers."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"question: {e['question']}\n")
            for i, step in enumerate(e["steps"], 1):
                fh.write(f"  latent {i}: {step}\n")
            fh.write(f"generated answer: {e['generated']}\n")
            fh.write(f"gold answer: {e['gold']}\n\n")
