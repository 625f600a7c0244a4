import sys, time; sys.path.insert(0, "/root/pkg/src")
from latentlab import taskgen as tg
from latentlab.model import ModelConfig
from latentlab.trainer import TrainConfig, train, evaluate

name = sys.argv[1]
mcfg = ModelConfig(vocab_size=tg.VOCAB.size, n_layers=2, d_model=64, n_heads=4, max_seq_len=64)

if name == "p1":   # 1-step, K=1, sim_cot
    gs = dict(min_steps=1, max_steps=1)
    tc = dict(mode="sim_cot", k_max=1)
elif name == "p2": # 1-step, K=0, answer_only (pure direct computation)
    gs = dict(min_steps=1, max_steps=1)
    tc = dict(mode="answer_only", k_max=0)
elif name == "p3": # 2-4 steps, K=4, sim_cot, small value cap
    gs = dict(result_cap=20)
    tc = dict(mode="sim_cot", k_max=4)

train_data = tg.generate(tg.GenSpec(seed=100, **gs), 5000)
seen = {s.question_text for s in train_data}
val_data = tg.generate(tg.GenSpec(seed=101, **gs), 400, exclude=seen)
tcfg = TrainConfig(delta_e=1, epochs=12, batch_size=128, learning_rate=3e-3,
                   grad_clip=0.0, seed=0, early_stop_patience=99, **tc)
state, base, dec = train(tcfg, mcfg, train_data, val_data,
                         log=lambda m: print(f"{name} {m}", flush=True))
tr_acc, _ = evaluate(base, train_data[:400], tcfg.k_max)
print(f"== {name}: best_val={state.best_val:.3f} train_acc={tr_acc:.3f}", flush=True)
