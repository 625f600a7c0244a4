import sys; sys.path.insert(0, "/root/pkg/src")
from latentlab import taskgen as tg
from latentlab.model import ModelConfig
from latentlab.trainer import TrainConfig, train

variant = sys.argv[1]
gs = dict(min_steps=1, max_steps=1, max_operand=20, result_cap=99)
train_data = tg.generate(tg.GenSpec(seed=100, **gs), 3000)
val_data = tg.generate(tg.GenSpec(seed=101, **gs), 300)
init = {"init06": 0.06, "init10": 0.10, "init15": 0.15}.get(variant, 0.02)
wd = 0.01 if variant == "wd001" else 0.1
mcfg = ModelConfig(vocab_size=tg.VOCAB.size, n_layers=2, d_model=64, n_heads=4,
                   max_seq_len=64, init_scale=init)
tcfg = TrainConfig(mode="answer_only", k_max=0, delta_e=1, epochs=12, batch_size=64,
                   learning_rate=3e-3, grad_clip=0.0, weight_decay=wd, seed=0,
                   early_stop_patience=99)
state, *_ = train(tcfg, mcfg, train_data, val_data,
                  log=lambda m: print(f"{variant} {m}", flush=True))
print(f"== {variant}: best={state.best_val:.3f}", flush=True)
