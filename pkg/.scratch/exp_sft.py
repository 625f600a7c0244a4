import sys, time; sys.path.insert(0, "/root/pkg/src")
from latentlab import taskgen as tg
from latentlab.model import ModelConfig
from latentlab.trainer import TrainConfig, train

train_data = tg.generate(tg.GenSpec(seed=100), 5000)
seen = {s.question_text for s in train_data}
val_data = tg.generate(tg.GenSpec(seed=101), 400, exclude=seen)
mcfg = ModelConfig(vocab_size=tg.VOCAB.size, n_layers=2, d_model=64, n_heads=4, max_seq_len=96)

# pure explicit-CoT SFT: coconut mode at stage 0 forever
tcfg = TrainConfig(mode="coconut_curriculum", k_max=0, coconut_post_epochs=16,
                   delta_e=1, batch_size=128, learning_rate=3e-3, grad_clip=0.0,
                   seed=0, early_stop_patience=99)
state, base, _ = train(tcfg, mcfg, train_data, val_data,
                       log=lambda m: print(f"SFT {m}", flush=True))
print(f"SFT-CoT best_val={state.best_val:.3f}", flush=True)
