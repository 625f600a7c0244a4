"""Reading a model's mind: decode each latent back into a textual step.

The step decoder exists only during training, but kept around as an
analysis artifact it maps each latent vector to the reasoning step it was
trained to carry. This demo trains a small model briefly, then prints the
per-latent decodings next to the gold steps. With more training (see the
acceptance run) the decodings become syntactically valid step expressions
whose final value matches the generated answer.
"""

from latentlab import taskgen as tg
from latentlab.diagnostics import decode_latent_steps
from latentlab.model import ModelConfig
from latentlab.reasoner import build_latents, generate_answer
from latentlab.trainer import TrainConfig, train

spec = tg.GenSpec(min_steps=2, max_steps=2, max_operand=9, result_cap=50, seed=0)
train_data = tg.generate(spec, 2000)
val_data = tg.generate(
    tg.GenSpec(**{**spec.__dict__, "seed": 1}), 8,
    exclude={s.question_text for s in train_data},
)

model_cfg = ModelConfig(vocab_size=tg.VOCAB.size, n_layers=2, d_model=48, n_heads=4,
                        max_seq_len=64, init_scale=0.06)
train_cfg = TrainConfig(mode="sim_cot", k_max=2, delta_e=2, epochs=10, batch_size=64,
                        learning_rate=3e-3, grad_clip=0.0, seed=0,
                        early_stop_patience=99, geometry_samples=32)
print("training a small step-supervised model (about a minute)...")
state, base, decoder = train(train_cfg, model_cfg, train_data, val_data)
print(f"val exact match after training: {state.best_val:.1%}\n")

for sample in val_data:
    chain, _ = build_latents(base, sample.question_tokens, 2, use_cache=True)
    decoded = decode_latent_steps(decoder, chain, max_len=14)
    generated = generate_answer(base, sample.question_tokens, 2)
    print(f"question: {sample.question_text}")
    for i, (toks, gold) in enumerate(zip(decoded, sample.step_tokens), 1):
        print(f"  latent {i} decodes to {tg.detokenize(toks):<16} gold {tg.detokenize(gold)}")
    print(f"  generated answer: {generated.text!r}  gold: {sample.answer_text!r}\n")
