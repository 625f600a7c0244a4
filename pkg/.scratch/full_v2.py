import sys, time; sys.path.insert(0, "/root/pkg/src")
from latentlab import taskgen as tg
from latentlab.model import ModelConfig
from latentlab.trainer import TrainConfig, train, evaluate

cap = int(sys.argv[1]); init = float(sys.argv[2])
tag = f"cap{cap}_i{init}"
train_data = tg.generate(tg.GenSpec(seed=100, result_cap=cap), 20000)
seen = {s.question_text for s in train_data}
val_data = tg.generate(tg.GenSpec(seed=101, result_cap=cap), 500, exclude=seen)
mcfg = ModelConfig(vocab_size=tg.VOCAB.size, n_layers=2, d_model=64, n_heads=4,
                   max_seq_len=64, init_scale=init)
tcfg = TrainConfig(k_max=4, delta_e=2, epochs=30, batch_size=64, learning_rate=3e-3,
                   grad_clip=0.0, seed=0, early_stop_patience=99)
t0 = time.perf_counter()
state, base, dec = train(tcfg, mcfg, train_data, val_data,
                         log=lambda m: print(f"{tag} {m}", flush=True))
tr_acc, _ = evaluate(base, train_data[:500], 4)
print(f"== {tag}: best={state.best_val:.3f} train_acc={tr_acc:.3f} t={time.perf_counter()-t0:.0f}s", flush=True)
