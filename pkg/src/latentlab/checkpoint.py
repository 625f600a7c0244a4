"""Checkpoint container: one .npz holding everything a run needs to resume.

Layout (documented contract; round-trips must be bit-exact):

* ``meta`` — a JSON string (0-d unicode array) with ``format_version``,
  the model/train config dicts, epoch counter, curriculum K, best-metric
  bookkeeping, full metrics history, the numpy PCG64 generator state, the
  optimizer step count, decoder wiring flags, and the config hash.
* ``base.<name>`` / ``decoder.<name>`` — named parameter tensors as
  little-endian float64 arrays ('<f8'). Decoder entries aliased to base
  tensors (shared embeddings) are not duplicated; aliases are rebuilt from
  the wiring flags on load.
* ``opt.m.<name>`` / ``opt.v.<name>`` — Adam moment estimates, keyed by
  the optimizer's deduplicated parameter names.

No pickling anywhere; ``np.load(allow_pickle=False)`` reads it.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, init_params
from .supervisor import DecoderParams, init_decoder

FORMAT_VERSION = 1


def _save_params(out: dict, prefix: str, params: ModelParams, skip_ids: set[int]):
    for name, t in params.named_parameters().items():
        if id(t) in skip_ids:
            continue
        out[f"{prefix}.{name}"] = t.data.astype("<f8")


def save_checkpoint(
    path,
    base: ModelParams,
    decoder: DecoderParams | None,
    opt_state: dict | None,
    meta: dict,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    _save_params(arrays, "base", base, set())
    if decoder is not None:
        base_ids = {id(t) for t in base.named_parameters().values()}
        _save_params(arrays, "decoder", decoder.model, base_ids)
    if opt_state is not None:
        arrays["opt.t"] = np.array(opt_state["t"], dtype=np.int64)
        for name, m in opt_state["m"].items():
            arrays[f"opt.m.{name}"] = m.astype("<f8")
        for name, v in opt_state["v"].items():
            arrays[f"opt.v.{name}"] = v.astype("<f8")
    full_meta = dict(meta)
    full_meta["format_version"] = FORMAT_VERSION
    full_meta["has_decoder"] = decoder is not None
    if decoder is not None:
        full_meta["share_embeddings"] = decoder.share_embeddings_with_base
        full_meta["tie_decoder_head"] = decoder.model.lm_w is decoder.model.tok_emb
    arrays["meta"] = np.array(json.dumps(full_meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (base, decoder | None, opt_state | None, meta dict)."""
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(str(arrays.pop("meta")))
    if meta["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {meta['format_version']}")
    config = ModelConfig(**meta["model_config"])

    base = init_params(config, seed=0)
    for name, t in base.named_parameters().items():
        t.data = np.ascontiguousarray(arrays[f"base.{name}"], dtype=np.float64)

    decoder = None
    if meta["has_decoder"]:
        decoder = init_decoder(
            base,
            share_embeddings=meta["share_embeddings"],
        )
        if meta.get("tie_decoder_head"):
            decoder.model.lm_w = decoder.model.tok_emb
        shared = {id(t) for t in base.named_parameters().values()}
        for name, t in decoder.model.named_parameters().items():
            if id(t) in shared:
                continue  # aliased to base; already loaded
            t.data = np.ascontiguousarray(arrays[f"decoder.{name}"], dtype=np.float64)

    opt_state = None
    if "opt.t" in arrays:
        m = {k[len("opt.m."):]: np.ascontiguousarray(v, dtype=np.float64)
             for k, v in arrays.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: np.ascontiguousarray(a, dtype=np.float64)
             for k, a in arrays.items() if k.startswith("opt.v.")}
        opt_state = {"t": int(arrays["opt.t"]), "m": m, "v": v}
    return base, decoder, opt_state, meta


def config_as_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
