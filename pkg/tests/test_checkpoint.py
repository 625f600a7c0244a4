import numpy as np
import pytest

from latentlab import taskgen as tg
from latentlab.checkpoint import load_checkpoint, save_checkpoint
from latentlab.model import ModelConfig, init_params
from latentlab.supervisor import init_decoder
from latentlab.trainer import AdamW, TrainConfig, collect_parameters, train


def tiny_model_cfg():
    return ModelConfig(vocab_size=tg.VOCAB.size, n_layers=1, d_model=16, n_heads=2,
                       max_seq_len=64)


def tiny_data(n_train=96, n_val=32):
    train_data = tg.generate(tg.GenSpec(seed=0), n_train)
    val_data = tg.generate(tg.GenSpec(seed=1), n_val,
                           exclude={s.question_text for s in train_data})
    return train_data, val_data


def test_roundtrip_bit_exact(tmp_path):
    import dataclasses

    mcfg = tiny_model_cfg()
    base = init_params(mcfg, 5)
    dec = init_decoder(base, share_embeddings=True)
    opt = AdamW(collect_parameters(base, dec), lr=1e-3)
    rng = np.random.default_rng(7)
    meta = {
        "model_config": dataclasses.asdict(mcfg),
        "train_config": dataclasses.asdict(TrainConfig(seed=5)),
        "epoch": 3,
        "k": 2,
        "best_val": 0.5,
        "best_epoch": 2,
        "epochs_since_improvement": 1,
        "history": [{"epoch": 0, "val_acc": 0.1}],
        "rng_state": rng.bit_generator.state,
        "config_hash": "abc123",
    }
    path = tmp_path / "ck.npz"
    save_checkpoint(path, base, dec, opt.state_dict(), meta)
    base2, dec2, opt_state, meta2 = load_checkpoint(path)

    for name, t in base.named_parameters().items():
        assert np.array_equal(t.data, base2.named_parameters()[name].data), name
    for name, t in dec.model.named_parameters().items():
        assert np.array_equal(t.data, dec2.model.named_parameters()[name].data), name
    assert dec2.model.tok_emb is base2.tok_emb  # sharing restored
    assert opt_state["t"] == 0
    for name in opt.m:
        assert np.array_equal(opt.m[name], opt_state["m"][name])
    assert meta2["epoch"] == 3 and meta2["config_hash"] == "abc123"
    assert meta2["rng_state"] == rng.bit_generator.state

    # a second save of the loaded state is byte-identical
    path2 = tmp_path / "ck2.npz"
    opt2 = AdamW(collect_parameters(base2, dec2), lr=1e-3)
    opt2.load_state_dict(opt_state)
    save_checkpoint(path2, base2, dec2, opt2.state_dict(), meta)
    assert path.read_bytes() == path2.read_bytes()


def test_unshared_embeddings_roundtrip(tmp_path):
    base = init_params(tiny_model_cfg(), 0)
    dec = init_decoder(base, share_embeddings=False)
    dec.model.tok_emb.data += 1.0  # make them differ
    save_checkpoint(tmp_path / "c.npz", base, dec, None, _meta(base))
    base2, dec2, _, _ = load_checkpoint(tmp_path / "c.npz")
    assert dec2.model.tok_emb is not base2.tok_emb
    assert np.array_equal(dec2.model.tok_emb.data, dec.model.tok_emb.data)


def test_no_decoder_roundtrip(tmp_path):
    base = init_params(tiny_model_cfg(), 0)
    save_checkpoint(tmp_path / "c.npz", base, None, None, _meta(base))
    base2, dec2, opt_state, _ = load_checkpoint(tmp_path / "c.npz")
    assert dec2 is None and opt_state is None
    assert np.array_equal(base2.tok_emb.data, base.tok_emb.data)


def _meta(base):
    import dataclasses

    return {
        "model_config": dataclasses.asdict(base.config),
        "train_config": dataclasses.asdict(TrainConfig()),
        "epoch": 0,
        "k": 0,
        "best_val": 0.0,
        "best_epoch": 0,
        "epochs_since_improvement": 0,
        "history": [],
        "rng_state": np.random.default_rng(0).bit_generator.state,
        "config_hash": None,
    }


def test_resume_equals_uninterrupted(tmp_path):
    """Checkpoint, reload, continue: metrics identical to one straight run."""
    train_data, val_data = tiny_data()
    mcfg = tiny_model_cfg()

    cfg_full = TrainConfig(k_max=1, delta_e=1, epochs=4, batch_size=32,
                           learning_rate=1e-3, seed=3, early_stop_patience=99,
                           geometry_samples=8, eval_batch_size=64)
    full_state, full_base, _ = train(cfg_full, mcfg, train_data, val_data,
                                     run_dir=tmp_path / "full")

    cfg_half = TrainConfig(**{**cfg_full.__dict__, "epochs": 2})
    train(cfg_half, mcfg, train_data, val_data, run_dir=tmp_path / "half")
    resumed_state, resumed_base, _ = train(
        cfg_full, mcfg, train_data, val_data, run_dir=tmp_path / "resumed",
        resume_from=tmp_path / "half" / "last.npz",
    )

    assert resumed_state.history[2:] == full_state.history[2:]
    assert resumed_state.history == full_state.history
    for name, t in full_base.named_parameters().items():
        assert np.array_equal(t.data, resumed_base.named_parameters()[name].data)
