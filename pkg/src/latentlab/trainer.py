"""Training loop: curriculum over K, AdamW, baseline modes, early stopping.

Modes:

* ``sim_cot`` — latent construction plus step-level supervision through
  the auxiliary decoder and the answer LM loss (the full objective).
* ``answer_only`` — identical latent construction and answer loss, no
  decoder anywhere; per-batch losses are bit-identical to ``sim_cot`` with
  ``lambda_step = 0``.
* ``coconut_curriculum`` — staged replacement: at stage k the first k gold
  steps become latents and the remaining explicit steps plus the answer
  stay token-level LM targets. Batches are bucketed by the per-sample
  clamped stage so latent counts stay uniform inside a batch.

Every source of randomness flows through one seeded generator whose state
rides along in checkpoints, so a resumed run replays the uninterrupted one
bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import taskgen as tg
from . import tensor as lt
from .checkpoint import load_checkpoint, save_checkpoint
from .diagnostics import GeometryReport, latent_geometry, write_geometry_csv
from .model import ModelConfig, ModelParams, embed_tokens, init_params, lm_logits, prefix_append
from .reasoner import SoftThinkConfig, build_latents_batch, generate_answers_batch
from .supervisor import (
    DecoderParams,
    LossWeights,
    build_step_batch,
    init_decoder,
    step_loss,
    total_loss,
)
from .taskgen import ReasoningSample
from .tensor import Tensor

MODES = ("sim_cot", "answer_only", "coconut_curriculum")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # latent budget and curriculum
    k_max: int = 4
    delta_e: int = 2
    tokens_per_latent: int = 1
    # optimization (Adam betas and decay follow the common small-LM recipe)
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    # objective
    lambda_step: float = 1.0
    lambda_lm: float = 1.0
    surplus_latent_supervision: bool = True
    # soft thinking
    continuous_weight: float = 1.0
    soft_weight: float = 0.0
    # mode and stopping
    mode: str = "sim_cot"
    coconut_post_epochs: int = 15
    early_stop_patience: int = 3
    seed: int = 0
    # decoder wiring
    share_embeddings: bool = True
    tie_decoder_head: bool = False
    # evaluation
    max_answer_len: int = 8
    eval_batch_size: int = 256
    geometry_samples: int = 128

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k_max < 0 or self.delta_e < 1 or self.learning_rate <= 0:
            raise ValueError("invalid schedule: need k_max >= 0, delta_e >= 1, lr > 0")
        if self.tokens_per_latent < 1:
            raise ValueError("tokens_per_latent must be >= 1")

    @property
    def soft(self) -> SoftThinkConfig:
        return SoftThinkConfig(self.continuous_weight, self.soft_weight)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_step, self.lambda_lm)

    def n_epochs(self) -> int:
        if self.mode == "coconut_curriculum":
            return self.delta_e * self.k_max + self.coconut_post_epochs
        return self.epochs


@dataclass
class RunState:
    epoch: int = -1
    k: int = 0
    best_val: float = float("-inf")
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    stopped_early: bool = False
    history: list[dict] = field(default_factory=list)

    def geometry_history(self) -> list[GeometryReport]:
        return [
            GeometryReport(
                epoch=row["epoch"],
                k=row["k"],
                dist=row["dist"] if row["dist"] is not None else float("nan"),
                dist_vc=row["dist_vc"] if row["dist_vc"] is not None else float("nan"),
            )
            for row in self.history
        ]


def curriculum_k(epoch: int, cfg: TrainConfig) -> int:
    """K(e) = min(K_max, floor(e / delta_e)); monotone, capped."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(cfg.k_max, epoch // cfg.delta_e)


def coconut_curriculum_targets(
    sample: ReasoningSample, k: int
) -> tuple[int, list[int]]:
    """Staged targets: first k steps become latents, the rest stay text.

    Returns (clamped latent count, supervised suffix token ids). The suffix
    is the remaining explicit steps, the answer separator, the answer, and
    <eos>; at k >= n_steps it degenerates to answer-only targets.
    """
    k_eff = min(k, sample.n_steps)
    suffix: list[int] = []
    for toks in sample.step_tokens[k_eff:]:
        suffix.extend(toks)
    suffix.append(tg.ASEP_ID)
    suffix.extend(sample.answer_tokens)
    suffix.append(tg.EOS_ID)
    return k_eff, suffix


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D tensors (norm gains)."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.1,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_global_norm(self, max_norm: float) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        norm = float(np.sqrt(total))
        if max_norm > 0 and norm > max_norm:
            s = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= s
        return norm

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * (g * g)
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        for n in self.params:
            self.m[n] = np.ascontiguousarray(state["m"][n])
            self.v[n] = np.ascontiguousarray(state["v"][n])


def collect_parameters(base: ModelParams, decoder: DecoderParams | None) -> dict[str, Tensor]:
    """Base + decoder tensors, deduplicated by identity (shared embeddings)."""
    out: dict[str, Tensor] = {}
    seen: set[int] = set()
    for name, t in base.named_parameters().items():
        out[f"base.{name}"] = t
        seen.add(id(t))
    if decoder is not None:
        for name, t in decoder.model.named_parameters().items():
            if id(t) not in seen:
                out[f"decoder.{name}"] = t
    return out


# ---------------------------------------------------------------------------
# batch losses


def _append_suffix_lm_loss(
    params: ModelParams, prefix, rows: list[list[int]], supervise_from: int
):
    """Append token rows after the latents and take the shifted LM loss.

    ``supervise_from`` is the first block position whose prediction counts:
    1 skips the forced end-latent marker (implicit modes), 0 supervises
    every transition (explicit-suffix mode).
    """
    B = len(rows)
    L = max(len(r) for r in rows)
    ids = np.full((B, L), tg.PAD_ID, dtype=np.int64)
    real = np.zeros((B, L), dtype=bool)
    for b, r in enumerate(rows):
        ids[b, : len(r)] = r
        real[b, : len(r)] = True
    _, h = prefix_append(params, prefix, embed_tokens(params, ids), real)
    logits = lm_logits(params, lt.slice_rows(h, 0, L - 1))
    targets = ids[:, 1:]
    lens = real.sum(axis=1)
    j = np.arange(L - 1)[None, :]
    mask = (j >= supervise_from) & (j < (lens - 1)[:, None])
    return lt.cross_entropy_masked(logits, targets, mask)


def implicit_batch_loss(
    base: ModelParams,
    decoder: DecoderParams | None,
    samples: list[ReasoningSample],
    k: int,
    cfg: TrainConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """(total, step, answer) losses for sim_cot / answer_only batches."""
    chain, prefix = build_latents_batch(
        base,
        [s.question_tokens for s in samples],
        k,
        cfg.soft,
        cfg.tokens_per_latent,
        use_cache=True,
        answer_headroom=cfg.max_answer_len + 4,
    )
    rows = [[tg.ELAT_ID, tg.ASEP_ID] + s.answer_tokens + [tg.EOS_ID] for s in samples]
    ans = _append_suffix_lm_loss(base, prefix, rows, supervise_from=1)
    if cfg.mode == "sim_cot" and k > 0:
        batch = build_step_batch(samples, chain, k, cfg.surplus_latent_supervision)
        step = step_loss(decoder, batch)
    else:
        step = Tensor(0.0)
    return total_loss(step, ans, cfg.loss_weights), step, ans


def coconut_batch_loss(
    base: ModelParams,
    samples: list[ReasoningSample],
    k_eff: int,
    cfg: TrainConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """Explicit-suffix LM loss after k_eff latents (uniform across the batch)."""
    _, prefix = build_latents_batch(
        base,
        [s.question_tokens for s in samples],
        k_eff,
        cfg.soft,
        cfg.tokens_per_latent,
        use_cache=True,
        answer_headroom=cfg.max_answer_len + 4,
    )
    rows = []
    for s in samples:
        ke, suffix = coconut_curriculum_targets(s, k_eff)
        assert ke == k_eff
        rows.append([tg.ELAT_ID] + suffix)
    ans = _append_suffix_lm_loss(base, prefix, rows, supervise_from=0)
    step = Tensor(0.0)
    return total_loss(step, ans, cfg.loss_weights), step, ans


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    params: ModelParams,
    samples: list[ReasoningSample],
    k: int,
    soft: SoftThinkConfig | None = None,
    tokens_per_latent: int = 1,
    batch_size: int = 256,
    max_answer_len: int = 8,
    explicit_suffix: bool = False,
) -> tuple[float, float]:
    """Greedy exact-match accuracy and mean decoded positions.

    ``explicit_suffix`` evaluates Coconut-style checkpoints that emit
    explicit steps before the answer separator; the answer is then the
    token run after the last separator.
    """
    soft = soft or SoftThinkConfig()
    if explicit_suffix:
        max_len = max(
            sum(len(t) for t in s.step_tokens) + len(s.answer_tokens) + 3
            for s in samples
        )
    else:
        max_len = max_answer_len
    hits = 0
    total_positions = 0
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo : lo + batch_size]
        results = generate_answers_batch(
            params,
            [s.question_tokens for s in batch],
            k,
            soft,
            max_len=max_len,
            tokens_per_latent=tokens_per_latent,
            force_answer_sep=not explicit_suffix,
        )
        for s, r in zip(batch, results):
            toks = r.tokens
            if explicit_suffix and tg.ASEP_ID in toks:
                toks = toks[len(toks) - toks[::-1].index(tg.ASEP_ID):]
            hits += int(toks == s.answer_tokens)
            total_positions += r.n_positions
    n = len(samples)
    return hits / n, total_positions / n


# ---------------------------------------------------------------------------
# the loop


def _batches(order: np.ndarray, size: int):
    for lo in range(0, len(order), size):
        yield order[lo : lo + size]


def _coconut_batches(samples, order: np.ndarray, stage: int, size: int):
    groups: dict[int, list[int]] = {}
    for idx in order:
        groups.setdefault(min(stage, samples[idx].n_steps), []).append(idx)
    for k_eff in sorted(groups):
        for lo in range(0, len(groups[k_eff]), size):
            yield k_eff, np.array(groups[k_eff][lo : lo + size])


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    train_data: list[ReasoningSample],
    val_data: list[ReasoningSample],
    run_dir: str | Path | None = None,
    log=None,
    resume_from: str | Path | None = None,
    config_hash: str | None = None,
    batch_hook=None,
) -> tuple[RunState, ModelParams, DecoderParams | None]:
    """Run the full curriculum; deterministic given (configs, data, seed).

    ``batch_hook(epoch, batch_index, total, step, ans)`` observes every
    batch's loss values (floats) as they are produced.
    """
    say = log if log is not None else (lambda *a, **k: None)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    state = RunState()
    if resume_from is not None:
        base, decoder, opt_state, meta = load_checkpoint(resume_from)
        rng.bit_generator.state = meta["rng_state"]
        state = RunState(
            epoch=meta["epoch"],
            k=meta["k"],
            best_val=meta["best_val"],
            best_epoch=meta["best_epoch"],
            epochs_since_improvement=meta["epochs_since_improvement"],
            history=meta["history"],
        )
    else:
        base = init_params(model_cfg, cfg.seed)
        decoder = (
            init_decoder(base, cfg.share_embeddings, cfg.tie_decoder_head)
            if cfg.mode == "sim_cot"
            else None
        )
        opt_state = None

    opt = AdamW(
        collect_parameters(base, decoder),
        lr=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    def checkpoint_meta() -> dict:
        return {
            "model_config": dataclasses.asdict(model_cfg),
            "train_config": dataclasses.asdict(cfg),
            "epoch": state.epoch,
            "k": state.k,
            "best_val": state.best_val,
            "best_epoch": state.best_epoch,
            "epochs_since_improvement": state.epochs_since_improvement,
            "history": state.history,
            "rng_state": rng.bit_generator.state,
            "config_hash": config_hash,
        }

    n_epochs = cfg.n_epochs()
    for epoch in range(state.epoch + 1, n_epochs):
        k = curriculum_k(epoch, cfg)
        state.k = k
        order = rng.permutation(len(train_data))
        loss_sum = step_sum = ans_sum = 0.0
        n_batches = 0
        if cfg.mode == "coconut_curriculum":
            batch_iter = _coconut_batches(train_data, order, k, cfg.batch_size)
        else:
            batch_iter = ((k, idxs) for idxs in _batches(order, cfg.batch_size))
        for batch_k, idxs in batch_iter:
            batch = [train_data[i] for i in idxs]
            if cfg.mode == "coconut_curriculum":
                total, step, ans = coconut_batch_loss(base, batch, batch_k, cfg)
            else:
                total, step, ans = implicit_batch_loss(base, decoder, batch, batch_k, cfg)
            if not np.isfinite(total.data):
                msg = (
                    f"non-finite loss at epoch {epoch} batch {n_batches} "
                    f"(K={batch_k}, lr={cfg.learning_rate}, "
                    f"sample indices {idxs[:8].tolist()}...)"
                )
                if run_dir is not None:
                    (run_dir / "abort_dump.txt").write_text(msg + "\n")
                raise NonFiniteLossError(msg)
            opt.zero_grad()
            lt.backward(total)
            if cfg.grad_clip > 0:
                opt.clip_global_norm(cfg.grad_clip)
            opt.step()
            if batch_hook is not None:
                batch_hook(epoch, n_batches, total.item(), step.item(), ans.item())
            loss_sum += total.item()
            step_sum += step.item()
            ans_sum += ans.item()
            n_batches += 1

        val_acc, val_len = evaluate(
            base,
            val_data,
            k,
            soft=cfg.soft,
            tokens_per_latent=cfg.tokens_per_latent,
            batch_size=cfg.eval_batch_size,
            max_answer_len=cfg.max_answer_len,
            explicit_suffix=(cfg.mode == "coconut_curriculum"),
        )
        geo = val_data[: cfg.geometry_samples]
        dist, dist_vc = latent_geometry(
            base, geo, k, cfg.soft, cfg.tokens_per_latent
        )
        state.epoch = epoch
        state.history.append(
            {
                "epoch": epoch,
                "k": k,
                "train_loss": loss_sum / max(n_batches, 1),
                "step_loss": step_sum / max(n_batches, 1),
                "ans_loss": ans_sum / max(n_batches, 1),
                "val_acc": val_acc,
                "dist": None if not np.isfinite(dist) else dist,
                "dist_vc": None if not np.isfinite(dist_vc) else dist_vc,
            }
        )
        say(
            f"epoch {epoch:3d} K={k} loss={loss_sum / max(n_batches, 1):.4f} "
            f"val_acc={val_acc:.4f} len={val_len:.1f} dist={dist:.3f} ({cfg.mode})"
        )

        improved = val_acc > state.best_val
        if improved:
            state.best_val = val_acc
            state.best_epoch = epoch
            state.epochs_since_improvement = 0
        else:
            state.epochs_since_improvement += 1

        if run_dir is not None:
            write_metrics_csv(run_dir / "metrics.csv", state.history)
            write_geometry_csv(run_dir / "geometry.csv", state.geometry_history())
            save_checkpoint(
                run_dir / "last.npz", base, decoder, opt.state_dict(), checkpoint_meta()
            )
            if improved:
                save_checkpoint(
                    run_dir / "best.npz", base, decoder, opt.state_dict(),
                    checkpoint_meta(),
                )

        if state.epochs_since_improvement >= cfg.early_stop_patience:
            state.stopped_early = True
            say(f"early stop at epoch {epoch} (patience {cfg.early_stop_patience})")
            break

    return state, base, decoder


def write_metrics_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["epoch", "K", "train_loss", "step_loss", "ans_loss", "val_acc", "dist", "dist_vc"]
        )
        for row in history:
            w.writerow(
                [
                    row["epoch"],
                    row["k"],
                    repr(row["train_loss"]),
                    repr(row["step_loss"]),
                    repr(row["ans_loss"]),
                    repr(row["val_acc"]),
                    "" if row["dist"] is None else repr(row["dist"]),
                    "" if row["dist_vc"] is None else repr(row["dist_vc"]),
                ]
            )


def read_metrics_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                {
                    "epoch": int(row["epoch"]),
                    "k": int(row["K"]),
                    "train_loss": float(row["train_loss"]),
                    "step_loss": float(row["step_loss"]),
                    "ans_loss": float(row["ans_loss"]),
                    "val_acc": float(row["val_acc"]),
                    "dist": float(row["dist"]) if row["dist"] else None,
                    "dist_vc": float(row["dist_vc"]) if row["dist_vc"] else None,
                }
            )
    return out
