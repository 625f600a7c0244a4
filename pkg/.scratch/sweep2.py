import sys, time; sys.path.insert(0, "/root/pkg/src")
import numpy as np
from latentlab import taskgen as tg
from latentlab.model import ModelConfig
from latentlab.trainer import TrainConfig, train, evaluate

train_data = tg.generate(tg.GenSpec(seed=100), 5000)
seen = {s.question_text for s in train_data}
val_data = tg.generate(tg.GenSpec(seed=101), 400, exclude=seen)
mcfg = ModelConfig(vocab_size=tg.VOCAB.size, n_layers=2, d_model=64, n_heads=4, max_seq_len=64)

for lr, clip in [(3e-3, 0.0), (1e-2, 0.0), (3e-3, 5.0), (1e-2, 5.0)]:
    tcfg = TrainConfig(k_max=4, delta_e=1, epochs=16, batch_size=128, learning_rate=lr,
                       grad_clip=clip, seed=0, early_stop_patience=99)
    t0 = time.perf_counter()
    try:
        state, base, dec = train(tcfg, mcfg, train_data, val_data,
                                 log=lambda m: print(f"lr={lr} clip={clip} {m}", flush=True))
        tr_acc, _ = evaluate(base, train_data[:400], 4)
        print(f"== lr={lr} clip={clip}: best_val={state.best_val:.3f} train_acc={tr_acc:.3f} "
              f"({time.perf_counter()-t0:.0f}s)", flush=True)
    except Exception as e:
        print(f"== lr={lr} clip={clip}: FAILED {e}", flush=True)
