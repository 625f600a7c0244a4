"""Quickstart: train a tiny latent reasoner with step-level supervision.

Walks the full pipeline at toy scale (a couple of minutes on a laptop):
generate arithmetic chains, train with the step-supervised objective,
watch the curriculum grow the latent budget, and evaluate exact-match
accuracy. For the real desk-scale recipe, see README.md and the
acceptance suite.
"""

from latentlab import taskgen as tg
from latentlab.model import ModelConfig
from latentlab.trainer import TrainConfig, evaluate, train

# 1. A synthetic dataset of multi-step arithmetic chains. Questions are
#    bare left-to-right expressions; gold steps resolve them one operation
#    at a time; every line is checked by the exact-integer evaluator.
spec = tg.GenSpec(min_steps=2, max_steps=3, max_operand=9, result_cap=50, seed=0)
train_data = tg.generate(spec, 2000)
val_data = tg.generate(
    tg.GenSpec(**{**spec.__dict__, "seed": 1}),
    200,
    exclude={s.question_text for s in train_data},
)
sample = train_data[0]
print(f"question: {sample.question_text}")
print(f"steps:    {sample.steps_text}")
print(f"answer:   {sample.answer_text}")

# 2. A small decoder-only transformer. The same architecture will also
#    instantiate the training-only step decoder.
model_cfg = ModelConfig(
    vocab_size=tg.VOCAB.size, n_layers=2, d_model=48, n_heads=4,
    max_seq_len=64, init_scale=0.06,
)

# 3. Train with step-level supervision (mode "sim_cot"): each latent is
#    aligned with its gold step through the auxiliary decoder while the
#    base model learns to answer after the latent chain. The curriculum
#    raises K by one every `delta_e` epochs.
train_cfg = TrainConfig(
    mode="sim_cot", k_max=3, delta_e=2, epochs=12, batch_size=64,
    learning_rate=3e-3, grad_clip=0.0, seed=0, early_stop_patience=99,
    geometry_samples=64,
)
state, base, decoder = train(train_cfg, model_cfg, train_data, val_data, log=print)

# 4. Greedy evaluation: the decoder is gone; inference is the question,
#    K latent positions, then ordinary vocabulary decoding.
acc, mean_len = evaluate(base, val_data, k=3, max_answer_len=8)
print(f"\nheld-out exact match: {acc:.1%}  (mean decoded positions {mean_len:.1f})")
print(f"best epoch {state.best_epoch} reached val_acc {state.best_val:.1%}")
