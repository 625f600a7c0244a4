"""Tour of the latent-geometry diagnostics and the collapse detector.

Two numbers summarize a latent chain's health: the mean pairwise distance
between latents (diversity) and the mean distance to the vocabulary
embedding centroid (grounding). Representation collapse shows up as the
first crashing while the second drifts up; the detector flags exactly that
joint signature.
"""

import numpy as np

from latentlab import taskgen as tg
from latentlab.diagnostics import (
    GeometryReport,
    detect_collapse,
    dist_to_vocab_center,
    inter_latent_distance,
    latent_geometry,
    top_k_decode,
)
from latentlab.model import ModelConfig, init_params
from latentlab.reasoner import build_latents

# 1. The two metrics on hand-made vectors.
z = [np.array([0.0, 0.0]), np.array([3.0, 4.0])]
print("pairwise distance of (0,0) and (3,4):", inter_latent_distance(z))  # 5.0
E = np.array([[0.0, 0.0], [2.0, 0.0]])
print("distance of (1,4) to the centroid of E:", dist_to_vocab_center([np.array([1.0, 4.0])], E))

# 2. Real chains from an (untrained) model: latents start out nearly
#    identical because each one is the previous one plus a small residual
#    update; training with step supervision is what pushes them apart.
params = init_params(ModelConfig(vocab_size=tg.VOCAB.size, d_model=48, n_heads=4), seed=0)
samples = tg.generate(tg.GenSpec(seed=3), 32)
dist, dist_vc = latent_geometry(params, samples, k=4)
print(f"untrained model: Dist={dist:.3f}  DistVC={dist_vc:.3f}")

# 3. Project a latent through the LM head and look at its top-8 tokens,
#    the same probe used to diagnose what a latent encodes.
chain, _ = build_latents(params, samples[0].question_tokens, 3)
top = top_k_decode(params, chain.latents[0].data[0], 8)
print("top-8 decoded tokens of latent 1:", [tg.VOCAB.tokens[t] for t, _ in top])

# 4. The collapse detector on synthetic training series. A healthy run
#    keeps Dist roughly steady; the failure signature is Dist crashing
#    while DistVC rises.
healthy = [GeometryReport(e, 5, 28.0 + 0.2 * e, 28.0) for e in range(10)]
print("healthy series collapses:", detect_collapse(healthy))

failed = [GeometryReport(e, 5, d, v) for e, (d, v) in
          enumerate([(28.3, 28.4), (28.1, 28.2), (27.9, 28.5), (12.0, 33.0), (4.2, 39.4)])]
print("failed series collapses:", detect_collapse(failed))
