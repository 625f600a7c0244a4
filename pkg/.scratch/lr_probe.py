import sys, time; sys.path.insert(0, "/root/pkg/src")
import numpy as np
from latentlab import taskgen as tg
from latentlab.model import ModelConfig
from latentlab.trainer import TrainConfig, train

train_data = tg.generate(tg.GenSpec(seed=100), 5000)
seen = {s.question_text for s in train_data}
val_data = tg.generate(tg.GenSpec(seed=101), 500, exclude=seen)
mcfg = ModelConfig(vocab_size=tg.VOCAB.size, n_layers=2, d_model=64, n_heads=4, max_seq_len=64)

for lr in (3e-4, 1e-3, 3e-3):
    tcfg = TrainConfig(k_max=4, delta_e=1, epochs=14, batch_size=128, learning_rate=lr,
                       seed=0, early_stop_patience=99)
    t0 = time.perf_counter()
    state, *_ = train(tcfg, mcfg, train_data, val_data,
                      log=lambda m: print(f"lr={lr} {m}", flush=True))
    print(f"lr={lr} done in {time.perf_counter()-t0:.0f}s best={state.best_val:.3f}", flush=True)
