import json

import numpy as np
import pytest
import torch

from stereovox import training
from stereovox.checkpoint import load_checkpoint, save_checkpoint
from stereovox.config import Config
from stereovox.synth import generate_dataset, load_split
from stereovox.training import (_jitter, ablate, build_model, evaluate, format_table, load_model, loss_for,
                                score_rows, train)


def small(root, out, **kw):
    base = dict(dataset_root=str(root), out_dir=str(out), n_scenes=10, epochs=2, batch_size=4)
    base.update(kw)
    return Config(**base)


@pytest.fixture(scope="module")
def data10(tmp_path_factory):
    root = tmp_path_factory.mktemp("data10")
    cfg = small(root, root / "unused")
    generate_dataset(cfg.n_scenes, cfg.scene_distribution(), root, master_seed=5)
    return root


def test_overfit_smoke(data10, tmp_path):
    # 10 scenes split 8/1/1; batch 8 over 200 epochs is 200 steps on the same 8 scenes
    res = train(small(data10, tmp_path, epochs=200, batch_size=8))
    losses = res.step_losses
    assert len(losses) == 200
    assert np.mean(losses[-10:]) <= 0.5 * losses[0]


def test_zero_lr_gives_flat_curve(data10, tmp_path):
    res = train(small(data10, tmp_path, lr=0.0, epochs=3, batch_size=8))
    assert np.ptp(res.step_losses) <= 1e-7


def test_same_seed_same_curve(data10, tmp_path):
    a = train(small(data10, tmp_path / "a", seed=3))
    b = train(small(data10, tmp_path / "b", seed=3))
    c = train(small(data10, tmp_path / "c", seed=4))
    assert a.step_losses == b.step_losses
    assert a.step_losses != c.step_losses


def test_outputs_written(data10, tmp_path):
    res = train(small(data10, tmp_path))
    hist = json.loads((tmp_path / "history.json").read_text())
    assert len(hist["epochs"]) == 2
    assert {"train_loss", "val_loss", "val_iou_l1", "val_iou_l2", "val_iou_l3"} <= set(hist["epochs"][0])
    assert res.checkpoint.exists() and (tmp_path / "last.ckpt").exists()
    _, cfg, extra = load_checkpoint(res.checkpoint)
    assert extra["epoch"] == res.best_epoch
    assert Config.from_dict(cfg) == small(data10, tmp_path)


def test_checkpoint_round_trip_predictions(data10, tmp_path):
    res = train(small(data10, tmp_path, epochs=1))
    model, cfg = load_model(tmp_path / "last.ckpt")
    state, _, _ = load_checkpoint(tmp_path / "last.ckpt")
    again = build_model(cfg)
    again.load_state_dict(state)
    again.eval()
    x = torch.rand(2, 1, 64, 128)
    with torch.no_grad():
        p = model(x, x, mode="sparse_pred").probs
        q = again(x, x, mode="sparse_pred").probs
    assert all(torch.equal(a, b) for a, b in zip(p, q))


def test_checkpoint_bytes_round_trip(tmp_path):
    state = {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3), "n": torch.tensor(7)}
    save_checkpoint(tmp_path / "x.ckpt", state, {"a": 1}, {"epoch": 3})
    got, cfg, extra = load_checkpoint(tmp_path / "x.ckpt")
    assert cfg == {"a": 1} and extra == {"epoch": 3}
    assert torch.equal(got["w"], state["w"]) and torch.equal(got["n"], state["n"])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)
    save_checkpoint(p, {"w": torch.ones(4)}, {}, {})
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError, match="corrupt"):
        load_checkpoint(p)


def test_every_parameter_gets_gradient(data10):
    cfg = small(data10, data10 / "unused")
    model = build_model(cfg)
    gts = [torch.rand(2, r, r, r) > 0.7 for r in (8, 16, 32)]
    res = model(torch.rand(2, 1, 64, 128), torch.rand(2, 1, 64, 128), gt_levels=gts)
    loss, per_level = loss_for(res, gts, cfg)
    assert len(per_level) == 3
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_straight_mode_trains(data10, tmp_path):
    res = train(small(data10, tmp_path, decode_mode="straight", epochs=1))
    rep = evaluate(res.checkpoint, "test")
    assert list(rep["per_level"]) == ["3"]


def test_nan_loss_aborts_with_context(data10, tmp_path, monkeypatch):
    real = training.loss_for

    def poisoned(res, gts, cfg):
        loss, per_level = real(res, gts, cfg)
        return loss * float("nan"), per_level

    monkeypatch.setattr(training, "loss_for", poisoned)
    with pytest.raises(FloatingPointError, match=r"epoch 0, batch 0; level losses \["):
        train(small(data10, tmp_path))


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        train(small(tmp_path / "nothing", tmp_path / "out"))


def test_evaluate_report(data10, tmp_path):
    res = train(small(data10, tmp_path, epochs=1))
    rep = evaluate(res.checkpoint, "val", report_path=tmp_path / "r.json", csv_path=tmp_path / "r.csv")
    assert rep["mode"] == "sparse_pred"
    assert set(rep["per_level"]) == {"1", "2", "3"}
    for m in rep["per_level"].values():
        assert 0.0 <= m["iou"] <= 1.0 and m["cd"] >= 0.0
    assert rep["decoder_macs"] <= rep["macs"] <= rep["dense_macs"]
    assert json.loads((tmp_path / "r.json").read_text())["n_samples"] == 1
    assert (tmp_path / "r.csv").read_text().startswith("id,iou_l1")
    dense = evaluate(res.checkpoint, "val", mode="dense")
    assert dense["macs"] == dense["dense_macs"]


def test_evaluate_rejects_mismatched_dataset(data10, tmp_path):
    res = train(small(data10, tmp_path, epochs=1))
    other = tmp_path / "other"
    cfg = Config(grid_size=16, n_levels=2, dataset_root=str(other))
    generate_dataset(10, cfg.scene_distribution(), other, master_seed=1)
    with pytest.raises(ValueError, match="does not match"):
        evaluate(res.checkpoint, "test", dataset_root=other)


def test_ablate_table(data10, tmp_path):
    variants = [{"name": "a", "epochs": 1}, {"name": "b", "epochs": 1, "cv_source": "even", "cv_even_step": 4}]
    rows = ablate(small(data10, tmp_path), variants, tmp_path / "abl", split="val")
    assert [r["name"] for r in rows] == ["a", "b"]
    assert rows[1]["levels"] == 12
    text = (tmp_path / "abl" / "ablation.txt").read_text()
    assert text == format_table(rows) and text.splitlines()[0].startswith("name")


def test_gt_scored_against_itself(data10):
    data = load_split(data10, "train")
    rows = score_rows(data, data.pyramids, [1, 2, 3])
    assert len(rows) == 8
    for r in rows:
        assert [r[f"iou_l{l}"] for l in (1, 2, 3)] == [1.0, 1.0, 1.0]
        assert [r[f"cd_l{l}"] for l in (1, 2, 3)] == [0.0, 0.0, 0.0]


def test_dense_and_sparse_gt_training_shapes(data10, tmp_path):
    shapes = {}
    for mode in ("dense", "sparse_gt"):
        res = train(small(data10, tmp_path / mode, decode_mode=mode, epochs=1))
        model, _ = load_model(res.checkpoint)
        with torch.no_grad():
            x = torch.rand(2, 1, 64, 128)
            shapes[mode] = [tuple(p.shape) for p in model(x, x, mode="dense").probs]
    assert shapes["dense"] == shapes["sparse_gt"] == [(2, 8, 8, 8), (2, 16, 16, 16), (2, 32, 32, 32)]


def test_evaluate_is_bit_exact_across_reloads(data10, tmp_path):
    res = train(small(data10, tmp_path, epochs=1))
    state, cfg, extra = load_checkpoint(res.checkpoint)
    save_checkpoint(tmp_path / "copy.ckpt", state, cfg, extra)
    a = evaluate(res.checkpoint, "test")
    b = evaluate(tmp_path / "copy.ckpt", "test")
    assert a == b


def test_identical_variants_give_identical_rows(data10, tmp_path):
    rows = ablate(small(data10, tmp_path), [{"name": "x", "epochs": 1}, {"name": "x", "epochs": 1}],
                  tmp_path / "abl", split="val")
    assert rows[0] == rows[1]


def test_jitter_keeps_pairs_consistent():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(4, 1, 8, 8)
    l, r = _jitter(x, x.clone(), gen)
    assert torch.equal(l, r) and not torch.equal(l, x)
    assert l.min() >= 0 and l.max() <= 1


def test_augment_hook(data10, tmp_path):
    off = train(small(data10, tmp_path / "off", epochs=1))
    on = train(small(data10, tmp_path / "on", epochs=1, augment=True))
    again = train(small(data10, tmp_path / "again", epochs=1, augment=True))
    assert on.step_losses == again.step_losses != off.step_losses
