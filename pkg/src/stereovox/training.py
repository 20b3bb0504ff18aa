"""Training, evaluation and ablation harness."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .io import save_json
from .macs import count_macs, count_parameters
from .metrics import chamfer_distance, eval_iou, level_losses, soft_iou_loss
from .network import StereoVoxNet
from .synth import LoadedSplit, load_split

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint: Path
    history: list = field(default_factory=list)   # per-epoch dicts
    step_losses: list = field(default_factory=list)
    best_epoch: int = -1


def _tensors(split: LoadedSplit):
    left = torch.from_numpy(split.left)[:, None]
    right = torch.from_numpy(split.right)[:, None]
    gts = [torch.from_numpy(g) for g in split.pyramids]
    return left, right, gts


def build_model(cfg: Config) -> StereoVoxNet:
    torch.manual_seed(cfg.seed)
    return StereoVoxNet(cfg.net())


def loss_for(result, gt_batch, cfg: Config):
    """Weighted per-level loss over the levels the decoder produced."""
    if cfg.decode_mode == "straight":
        loss = soft_iou_loss(result.probs[0], gt_batch[-1])
        return loss, [loss]
    gts = [gt_batch[l - 1] for l in result.levels]
    per_level = level_losses(result.probs, gts)
    w = cfg.weights().w
    return sum(w[l - 1] * x for l, x in zip(result.levels, per_level)), per_level


def _jitter(left, right, gen: torch.Generator):
    """Same random gain and offset on both images of a pair; geometry is untouched."""
    b = left.shape[0]
    gain = 0.7 + 0.6 * torch.rand(b, 1, 1, 1, generator=gen)
    offset = 0.2 * torch.rand(b, 1, 1, 1, generator=gen) - 0.1
    return (left * gain + offset).clamp(0, 1), (right * gain + offset).clamp(0, 1)


def _check_finite(loss, per_level, epoch, step):
    if not torch.isfinite(loss):
        levels = [x.item() for x in per_level]
        raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {step}; level losses {levels}")


def predict(model: StereoVoxNet, left, right, gts=None, mode=None, batch_size=16):
    """Batched no-grad inference; returns (per-level prob arrays, active sites per level)."""
    model.eval()
    outs, active = None, None
    with torch.no_grad():
        for s in range(0, len(left), batch_size):
            sl = slice(s, s + batch_size)
            g = [x[sl] for x in gts] if gts is not None else None
            res = model(left[sl], right[sl], gt_levels=g, mode=mode)
            if outs is None:
                outs = [[] for _ in res.probs]
                active = [0] * len(res.active)
            for l, p in enumerate(res.probs):
                outs[l].append(p.numpy())
            active = [a + b for a, b in zip(active, res.active)]
    return [np.concatenate(o) for o in outs], active


def _level_ious(probs, gts, levels, threshold):
    return {l: float(np.mean([eval_iou(p >= threshold, g) for p, g in zip(probs[i], gts[l - 1])]))
            for i, l in enumerate(levels)}


def train(cfg: Config, log_every: int = 0) -> TrainResult:
    root = Path(cfg.dataset_root)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"dataset manifest missing under {root}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    train_split = load_split(root, "train")
    val_split = load_split(root, "val")
    if len(train_split) == 0:
        raise ValueError(f"no training samples under {root}")
    tl, tr, tg = _tensors(train_split)
    vl, vr, vg = _tensors(val_split)

    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    order_rng = np.random.default_rng(cfg.seed)
    jitter_gen = torch.Generator().manual_seed(cfg.seed)
    levels = list(range(1, cfg.n_levels + 1)) if cfg.decode_mode != "straight" else [cfg.n_levels]
    ckpt = out / "best.ckpt"
    result = TrainResult(ckpt)
    best = -math.inf
    for epoch in range(cfg.epochs):
        model.train()
        t0 = time.time()
        perm = order_rng.permutation(len(tl))
        epoch_losses = []
        for step, s in enumerate(range(0, len(perm), cfg.batch_size)):
            idx = torch.from_numpy(perm[s:s + cfg.batch_size])
            gt_batch = [g[idx] for g in tg]
            left, right = tl[idx], tr[idx]
            if cfg.augment:
                left, right = _jitter(left, right, jitter_gen)
            res = model(left, right, gt_levels=gt_batch)
            loss, per_level = loss_for(res, gt_batch, cfg)
            _check_finite(loss, per_level, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            result.step_losses.append(loss.item())
            epoch_losses.append(loss.item())
            if log_every and len(result.step_losses) % log_every == 0:
                log.info("step %d loss %.4f", len(result.step_losses), loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "seconds": time.time() - t0}
        if len(vl):
            probs, _ = predict(model, vl, vr, vg, mode=cfg.eval_mode(), batch_size=cfg.batch_size)
            with torch.no_grad():
                vloss = sum(cfg.weights().w[l - 1] * float(soft_iou_loss(torch.from_numpy(p), vg[l - 1]))
                            for p, l in zip(probs, levels)) if cfg.decode_mode != "straight" else \
                    float(soft_iou_loss(torch.from_numpy(probs[0]), vg[-1]))
            ious = _level_ious(probs, [g.numpy() for g in vg], levels, cfg.mask_threshold)
            row["val_loss"] = vloss
            row.update({f"val_iou_l{l}": v for l, v in ious.items()})
            score = ious[cfg.n_levels]
        else:
            score = -row["train_loss"]
        result.history.append(row)
        log.info("epoch %s", row)
        if score > best:
            best = score
            result.best_epoch = epoch
            save_checkpoint(ckpt, model.state_dict(), cfg.to_dict(), {"epoch": epoch, "score": score})
    save_checkpoint(out / "last.ckpt", model.state_dict(), cfg.to_dict(), {"epoch": cfg.epochs - 1})
    save_json(out / "history.json", {"epochs": result.history, "step_losses": result.step_losses})
    return result


def load_model(path) -> tuple[StereoVoxNet, Config]:
    state, cfg_dict, _ = load_checkpoint(path)
    cfg = Config.from_dict(cfg_dict)
    model = StereoVoxNet(cfg.net())
    model.load_state_dict(state)
    model.eval()
    return model, cfg


def score_rows(data: LoadedSplit, preds, levels) -> list[dict]:
    """Per-sample IoU and Chamfer rows; ``preds[i]`` is the boolean (N, R, R, R) stack for ``levels[i]``."""
    rows = []
    for n in range(len(data)):
        row = {"id": data.ids[n]}
        for i, l in enumerate(levels):
            gt = data.pyramids[l - 1][n]
            spec = data.grid.with_resolution(gt.shape[0])
            row[f"iou_l{l}"] = eval_iou(preds[i][n], gt)
            row[f"cd_l{l}"] = chamfer_distance(preds[i][n], gt, spec)
        rows.append(row)
    return rows


def evaluate(checkpoint, split: str = "test", dataset_root=None, mode: str | None = None,
             report_path=None, csv_path=None) -> dict:
    """Per-level IoU and Chamfer distance over a split, plus MACs and parameters."""
    model, cfg = load_model(checkpoint) if not isinstance(checkpoint, tuple) else checkpoint
    root = Path(dataset_root or cfg.dataset_root)
    data = load_split(root, split)
    if data.camera.image_width != cfg.image_width or data.grid.counts[0] != cfg.grid_size:
        raise ValueError("checkpoint configuration does not match the dataset")
    mode = mode or cfg.eval_mode()
    left, right, gts = _tensors(data)
    probs, active = predict(model, left, right, gts, mode=mode, batch_size=cfg.batch_size)
    levels = [cfg.n_levels] if cfg.decode_mode == "straight" else list(range(1, cfg.n_levels + 1))
    rows = score_rows(data, [p >= cfg.mask_threshold for p in probs], levels)
    per_level = {str(l): {"iou": float(np.mean([r[f"iou_l{l}"] for r in rows])) if rows else float("nan"),
                          "cd": float(np.mean([r[f"cd_l{l}"] for r in rows])) if rows else float("nan")}
                 for l in levels}
    n = max(len(data), 1)
    net = cfg.net() if mode == cfg.decode_mode else _with_mode(cfg, mode)
    dense = count_macs(net)
    pruned = count_macs(net, _Active(active), batch_size=n) if mode != "dense" else dense
    report = {
        "split": split,
        "mode": mode,
        "n_samples": len(data),
        "per_level": per_level,
        "macs": pruned["total"],
        "decoder_macs": pruned["decoder"],
        "dense_macs": dense["total"],
        "parameters": count_parameters(cfg.net())["total"],
    }
    if report_path:
        save_json(report_path, report)
    if csv_path:
        write_rows(csv_path, rows)
    report["rows"] = rows
    return report


class _Active:
    def __init__(self, active):
        self.active = active


def _with_mode(cfg: Config, mode: str):
    net = cfg.net()
    net.decoder = cfg.decoder(mode)
    return net


def write_rows(path, rows) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def ablate(base: Config, variants: list[dict], out_dir, split: str = "test") -> list[dict]:
    """Train and evaluate one model per variant (overrides of ``base``) on shared data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, overrides in enumerate(variants):
        name = overrides.get("name") or ",".join(f"{k}={v}" for k, v in overrides.items()) or "base"
        cfg = base.updated(**{k: v for k, v in overrides.items() if k != "name"},
                           out_dir=str(out / f"{i:02d}"))
        res = train(cfg)
        rep = evaluate(res.checkpoint, split)
        row = {"name": name, "levels": len(cfg.plan()), "mode": rep["mode"]}
        for l, m in rep["per_level"].items():
            row[f"iou_l{l}"] = round(m["iou"], 4)
            row[f"cd_l{l}"] = round(m["cd"], 4)
        row["macs"] = rep["macs"]
        row["parameters"] = rep["parameters"]
        rows.append(row)
    write_rows(out / "ablation.csv", rows)
    (out / "ablation.txt").write_text(format_table(rows))
    return rows


def format_table(rows) -> str:
    if not rows:
        return ""
    cols = list(dict.fromkeys(k for r in rows for k in r))
    cells = [[str(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(x[i]) for x in cells)) for i, c in enumerate(cols)]
    line = lambda xs: "  ".join(x.ljust(w) for x, w in zip(xs, widths))
    return "\n".join([line(cols), line(["-" * w for w in widths])] + [line(x) for x in cells]) + "\n"
