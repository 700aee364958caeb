"""Training loop behavior: convergence, determinism, checkpoints, sweeps."""

import os

import numpy as np
import pytest

from atlab import ad, attacks, fast_engm, models, optim, train
from atlab.config import build_config, config_with
from atlab.data import DataFormatError


def blob_cfg(**updates):
    base = {
        "model.layers": (2, 16, 2),
        "model.num_classes": 2,
        "dataset.kind": "synthetic-blobs",
        "dataset.train_n": 96,
        "dataset.val_n": 32,
        "dataset.test_n": 32,
        "attack.epsilon": 0.05,
        "attack.steps": 3,
        "attack.step_size": 0.03,
        "optimizer.kind": "msgd",
        "optimizer.lr": 0.2,
        "optimizer.decay_epochs": (),
        "epochs": 4,
        "batch_size": 32,
        "probe_n": 64,
        "out_dir": "",
    }
    base.update(updates)
    return build_config(base)


def test_natural_blobs_reach_95pct():
    cfg = blob_cfg(**{"attack.epsilon": 0.0, "dataset.train_n": 200,
                      "epochs": 30})
    res = train.train(cfg)
    assert res.summary["natural_acc"] >= 0.95
    assert res.summary["test_natural_acc"] >= 0.95


def test_eps0_robust_equals_natural():
    cfg = blob_cfg(**{"attack.epsilon": 0.0, "epochs": 2})
    res = train.train(cfg)
    for h in res.history:
        assert h.rob_acc <= h.nat_acc  # eval attack still runs at 8/255
    _, val_ds, _ = train.load_splits(cfg)
    nat, rob = train.evaluate(models.build_model(cfg.model),
                              res.last_params, val_ds,
                              attack_cfg=cfg.attack)
    assert nat == rob


def test_natural_training_never_attacks(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("attack invoked during natural training")
    monkeypatch.setattr(attacks, "pgd", boom)
    cfg = blob_cfg(**{"attack.epsilon": 0.0, "dataset.val_n": 0,
                      "dataset.test_n": 0, "epochs": 2})
    res = train.train(cfg)  # completes only if pgd never called
    assert len(res.history) == 2
    assert np.isnan(res.history[0].nat_acc)


def test_bitwise_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = blob_cfg(out_dir=str(tmp_path / name))
        train.train(cfg)
        outs.append(tmp_path / name)
    for fname in ("history.csv", "summary.json", "best.ckpt", "last.ckpt"):
        a = (outs[0] / fname).read_bytes()
        b = (outs[1] / fname).read_bytes()
        assert a == b, f"{fname} differs between identical runs"


def test_seed_changes_trajectory():
    r0 = train.train(blob_cfg(seed=0))
    r1 = train.train(blob_cfg(seed=1))
    assert not np.array_equal(r0.last_params.data, r1.last_params.data)


def test_best_epoch_is_first_argmax():
    res = train.train(blob_cfg(epochs=6))
    rob = [h.rob_acc for h in res.history]
    assert res.summary["best_rob_acc"] == max(rob)
    assert res.best_epoch == int(np.argmax(rob))
    assert res.summary["natural_acc"] == res.history[res.best_epoch].nat_acc


def test_history_matches_epochs_and_lr_schedule():
    cfg = blob_cfg(**{"epochs": 4, "optimizer.decay_epochs": (2,),
                      "optimizer.decay_factor": 0.5})
    res = train.train(cfg)
    assert [h.epoch for h in res.history] == [0, 1, 2, 3]
    assert [h.lr for h in res.history] == [0.2, 0.2, 0.1, 0.1]


def test_summary_fields():
    res = train.train(blob_cfg())
    expected = {"optimizer", "alpha", "epsilon", "seed", "epochs",
                "best_epoch", "natural_acc", "best_rob_acc", "last_rob_acc",
                "overfitting_pct", "mean_mu", "mean_sigma2", "max_sigma2",
                "rho", "test_natural_acc", "test_rob_acc"}
    assert expected <= set(res.summary)
    assert res.summary["optimizer"] == "msgd"
    assert res.summary["rho"] is None


def test_probe_gamma_sources():
    cfg = blob_cfg(**{"attack.epsilon": 0.0})
    ds, _, _ = train.load_splits(cfg)
    model = models.build_model(cfg.model, seed=3)
    gstate = fast_engm.GammaState(gamma0=-1.5, gamma1=2.5)
    out = train.probe_stats(model, model.params, ds, cfg, 0, gstate=gstate)
    assert out[4] == -1.5 and out[5] == 2.5
    out2 = train.probe_stats(model, model.params, ds, cfg, 0)
    assert np.isfinite(out2[4]) and np.isfinite(out2[5])
    assert out2[5] != 2.5


def test_fast_kind_advances_gamma():
    cfg = blob_cfg(**{"optimizer.kind": "a-engm", "fast.tau": 2, "epochs": 2})
    res = train.train(cfg)
    # after refreshes the EMA coefficients must have left the (0, 1) start
    assert res.history[-1].gamma1 != 1.0 or res.history[-1].gamma0 != 0.0


def test_naive_kind_keeps_identity_gamma():
    cfg = blob_cfg(**{"optimizer.kind": "n-engm", "epochs": 2})
    res = train.train(cfg)
    for h in res.history:
        assert h.gamma0 == 0.0 and h.gamma1 == 1.0


@pytest.mark.parametrize("kind", ["mgnc", "sngm", "engm", "fengm"])
def test_all_optimizers_run(kind):
    res = train.train(blob_cfg(**{"optimizer.kind": kind, "epochs": 2}))
    assert len(res.history) == 2
    assert np.isfinite(res.last_params.data).all()


def test_error_context_wraps_epoch_and_batch(monkeypatch):
    calls = []

    def boom(*a, **k):
        calls.append(1)
        raise ValueError("synthetic failure")
    monkeypatch.setattr(attacks, "pgd", boom)
    with pytest.raises(train.TrainError, match="epoch 0 batch 0") as ei:
        train.train(blob_cfg())
    assert isinstance(ei.value.__cause__, ValueError)
    assert len(calls) == 1


def test_splits_are_ordered_and_disjoint():
    cfg = blob_cfg()
    tr, va, te = train.load_splits(cfg)
    assert (len(tr), len(va), len(te)) == (96, 32, 32)
    from atlab.data import synth_dataset
    full = synth_dataset("blobs", 160, noise=cfg.dataset_noise, seed=cfg.seed)
    joined = np.concatenate([tr.x, va.x, te.x])
    assert np.array_equal(joined, full.x)


def test_shape_mismatch_rejected():
    cfg = blob_cfg(**{"model.layers": (3, 8, 2)})
    with pytest.raises(DataFormatError, match="shape"):
        train.load_splits(cfg)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = models.build_model(build_config({}).model, seed=5)
    path = tmp_path / "w.ckpt"
    train.save_checkpoint(path, model.params)
    loaded = train.load_checkpoint(path)
    assert loaded.data.tobytes() == model.params.data.tobytes()
    assert loaded.layout == model.params.layout
    # saving the loaded copy reproduces the file exactly
    path2 = tmp_path / "w2.ckpt"
    train.save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    model = models.build_model(blob_cfg().model, seed=1)
    path = tmp_path / "w.ckpt"
    train.save_checkpoint(path, model.params)
    good = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope" + good[5:])
    with pytest.raises(DataFormatError, match="tag"):
        train.load_checkpoint(bad)

    bad.write_bytes(good[:-4])
    with pytest.raises(DataFormatError, match="payload"):
        train.load_checkpoint(bad)

    bad.write_bytes(good + b"\x00")
    with pytest.raises(DataFormatError, match="trailing"):
        train.load_checkpoint(bad)

    nl = good.index(b"\n")
    bad.write_bytes(good[:nl])
    with pytest.raises(DataFormatError, match="manifest"):
        train.load_checkpoint(bad)

    header, rest = good.split(b"\n", 1)
    bad.write_bytes(header.replace(b":", b";", 1) + b"\n" + rest)
    with pytest.raises(DataFormatError):
        train.load_checkpoint(bad)


def test_checkpoint_truncated_count(tmp_path):
    path = tmp_path / "w.ckpt"
    path.write_bytes(b"ckpt1 w:0:2x2\n\x04\x00")
    with pytest.raises(DataFormatError, match="count"):
        train.load_checkpoint(path)


def test_sweep_outputs(tmp_path):
    cfg = blob_cfg(epochs=2, out_dir=str(tmp_path))
    results = train.sweep(cfg, "epsilon", [0.0, 0.03])
    assert set(results) == {0.0, 0.03}
    for value in (0.0, 0.03):
        run_dir = tmp_path / f"epsilon={value}"
        assert (run_dir / "history.csv").is_file()
        assert (run_dir / "summary.json").is_file()
        assert results[value].summary["epsilon"] == value
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("epsilon,epoch,")
    assert len(lines) == 1 + 2 * 2
    assert lines[1].startswith("0.0,0,")
    import json
    summ = json.loads((tmp_path / "sweep_summary.json").read_text())
    assert set(summ) == {"0.0", "0.03"}


def test_sweep_optimizer_kind(tmp_path):
    cfg = blob_cfg(epochs=1, out_dir=str(tmp_path))
    results = train.sweep(cfg, "optimizer", ["msgd", "n-engm"])
    assert results["n-engm"].summary["alpha"] == 0.5


def test_sweep_rejects_bad_requests(tmp_path):
    cfg = blob_cfg(out_dir=str(tmp_path))
    with pytest.raises(ValueError, match="cannot sweep"):
        train.sweep(cfg, "momentum", [0.1])
    with pytest.raises(ValueError, match="at least one"):
        train.sweep(cfg, "epsilon", [])


def test_prepare_dataset_dir(tmp_path):
    target = tmp_path / "digits"
    cfg = blob_cfg(**{"dataset.kind": "idx-dir", "dataset.path": str(target),
                      "model.layers": (784, 16, 10),
                      "model.num_classes": 10,
                      "dataset.train_n": 30, "dataset.val_n": 10,
                      "dataset.test_n": 10})
    train.prepare_dataset_dir(cfg)
    names = sorted(os.listdir(target))
    assert names == ["images-idx3-ubyte", "labels-idx1-ubyte"]
    before = (target / "images-idx3-ubyte").read_bytes()
    train.prepare_dataset_dir(cfg)  # existing dir: untouched
    assert (target / "images-idx3-ubyte").read_bytes() == before
    tr, va, te = train.load_splits(cfg)
    assert tr.x.shape == (30, 784)
    # non-directory kinds are a no-op
    train.prepare_dataset_dir(blob_cfg())


def test_evaluate_empty_dataset_rejected():
    cfg = blob_cfg()
    model = models.build_model(cfg.model)
    from atlab.data import Dataset
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError, match="nonempty"):
        train.evaluate(model, model.params, empty)
