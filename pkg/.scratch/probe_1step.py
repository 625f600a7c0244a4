import sys; sys.path.insert(0, "/root/pkg/src")
from latentlab import taskgen as tg
from latentlab.model import ModelConfig
from latentlab.trainer import TrainConfig, train, evaluate

name = sys.argv[1]
gs = dict(min_steps=1, max_steps=1, max_operand=20, result_cap=99)
train_data = tg.generate(tg.GenSpec(seed=100, **gs), 3000)
val_data = tg.generate(tg.GenSpec(seed=101, **gs), 300)  # overlap OK for this probe
mcfg = ModelConfig(vocab_size=tg.VOCAB.size, n_layers=2, d_model=64, n_heads=4, max_seq_len=64)
tc = dict(mode="sim_cot", k_max=1) if name == "p1" else dict(mode="answer_only", k_max=0)
tcfg = TrainConfig(delta_e=1, epochs=15, batch_size=64, learning_rate=3e-3,
                   grad_clip=0.0, seed=0, early_stop_patience=99, **tc)
state, base, dec = train(tcfg, mcfg, train_data, val_data,
                         log=lambda m: print(f"{name} {m}", flush=True))
print(f"== {name}: best={state.best_val:.3f}", flush=True)
