"""Fine-tuning recipes: grid search, SWA window selection, R3F, and metrics.

The grid is fixed at 3 dropouts x 3 learning rates; each cell trains ten
epochs with linear warmup peaking at 16% of training, checkpoints per epoch,
and picks the best of three four-checkpoint SWA windows plus the raw best
epoch on validation.  Generative fine-tuning warm-starts Adam from the
pretraining gradient moments and sweeps the R3F noise grid.
"""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import xxhash

from .model import (Checkpoint, Seq2SeqTransformer, TrainConfig, adam_step,
                    collate)
from .tokenizer import PAD_ID

logger = logging.getLogger(__name__)


class FinetuneError(RuntimeError):
    pass


class HeadAlreadyAttached(FinetuneError):
    pass


class EmptySplit(FinetuneError):
    pass


class SingleClass(FinetuneError):
    pass


class LengthMismatch(FinetuneError):
    pass


class MomentsMissing(UserWarning):
    pass


@dataclass
class TaskSpec:
    kind: str = "classification"  # classification | regression | seq2seq
    num_classes: int = 2
    label_column: str = "label"
    metric: str = "auc_roc"  # auc_roc | rmse | topk_exact

    def __post_init__(self):
        if self.kind not in ("classification", "regression", "seq2seq"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "regression":
            self.metric = "rmse"

    @property
    def higher_is_better(self):
        return self.metric == "auc_roc"


@dataclass
class GridSpec:
    dropouts: tuple = (0.1, 0.2, 0.3)
    lrs: tuple = (5e-6, 1e-5, 3e-5)
    epochs: int = 10
    batch_size: int = 16
    warmup_frac: float = 0.16
    clip_norm: float = 0.1
    weight_decay: float = 0.01

    @property
    def num_cells(self):
        return len(self.dropouts) * len(self.lrs)

    def cells(self):
        for dropout in self.dropouts:
            for lr in self.lrs:
                yield dropout, lr


@dataclass
class R3FConfig:
    lam: float = 0.01
    noise_type: str = "uniform"  # uniform | normal
    sigma: float = 1e-5

    def __post_init__(self):
        if self.noise_type not in ("uniform", "normal"):
            raise ValueError(f"unknown noise type {self.noise_type!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


R3F_SWEEP = tuple(R3FConfig(lam=lam, noise_type=nt)
                  for nt in ("uniform", "normal")
                  for lam in (0.001, 0.01, 0.1))


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

class PredictionModel(nn.Module):
    """Base transformer plus a linear head on the decoder's final state.

    The sequence is fed to both the encoder and, shifted, the decoder; the
    head reads the decoder hidden state at the last non-pad position.
    """

    def __init__(self, base: Seq2SeqTransformer, task: TaskSpec, init_seed=0):
        super().__init__()
        self.base = base
        self.task = task
        out_dim = task.num_classes if task.kind == "classification" else 1
        self.head = nn.Linear(base.cfg.d_model, out_dim)
        gen = torch.Generator().manual_seed(init_seed)
        with torch.no_grad():
            self.head.weight.normal_(0.0, 0.02, generator=gen)
            self.head.bias.zero_()
        # Regression targets are standardized on the training split; the
        # inverse transform is applied at evaluation.
        self.target_mean = 0.0
        self.target_std = 1.0

    def forward(self, sequences):
        src = collate(sequences)
        tgt_in = collate([s[:-1] for s in sequences])
        final_pos = torch.tensor([len(s) - 2 for s in sequences])
        _, _, dec_hidden = self.base(src, tgt_in)
        rows = torch.arange(len(sequences))
        return self.head(dec_hidden[rows, final_pos])

    def scores(self, sequences, batch_size=64):
        """Ranking scores: positive-class probability, or the de-standardized
        regression prediction."""
        self.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, len(sequences), batch_size):
                out = self(sequences[i:i + batch_size])
                if self.task.kind == "classification":
                    outs.append(torch.softmax(out, dim=-1)[:, 1])
                else:
                    outs.append(out[:, 0] * self.target_std + self.target_mean)
        return torch.cat(outs).numpy()


def attach_head(state, task: TaskSpec, init_seed=0) -> PredictionModel:
    """Wrap a base model with a randomly initialized prediction head."""
    if isinstance(state, PredictionModel):
        raise HeadAlreadyAttached("model already carries a prediction head")
    return PredictionModel(state, task, init_seed=init_seed)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def auc_roc(scores, labels):
    """Probability a random positive outscores a random negative; ties half.

    Mann-Whitney formulation via average ranks.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores vs {len(labels)} labels")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("both classes must be present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2
    return u / (n_pos * n_neg)


def rmse(preds, targets):
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.shape != targets.shape or preds.size == 0:
        raise LengthMismatch(f"{preds.shape} vs {targets.shape}")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


# ---------------------------------------------------------------------------
# Grid fine-tuning
# ---------------------------------------------------------------------------

def _cell_seed(seed, index):
    return xxhash.xxh64(f"cell:{seed}:{index}".encode()).intdigest() % (2**31)


def _clone_base(ckpt: Checkpoint, dropout: float) -> Seq2SeqTransformer:
    model = Seq2SeqTransformer(replace(ckpt.config, dropout=dropout))
    with torch.no_grad():
        for (name, p), (_, q) in zip(model.named_parameters(),
                                     ckpt.model.named_parameters()):
            p.copy_(q)
    return model


def _task_loss(model: PredictionModel, sequences, labels):
    """Cross entropy / MSE over rows whose label is present (not NaN)."""
    out = model(sequences)
    labels = torch.as_tensor(labels, dtype=torch.float64)
    present = ~torch.isnan(labels)
    if not present.any():
        return None
    if model.task.kind == "classification":
        return F.cross_entropy(out[present], labels[present].long())
    target = (labels[present] - model.target_mean) / model.target_std
    return F.mse_loss(out[present, 0], target.to(out.dtype))


def _evaluate(model: PredictionModel, sequences, labels):
    labels = np.asarray(labels, dtype=float)
    present = ~np.isnan(labels)
    scores = model.scores([s for s, keep in zip(sequences, present) if keep])
    kept = labels[present]
    if model.task.kind == "classification":
        metric = auc_roc(scores, kept.astype(int))
        with torch.no_grad():
            value = _task_loss(model, [s for s, k in zip(sequences, present) if k],
                               kept)
        return float(value.item()), metric
    metric = rmse(scores, kept)
    with torch.no_grad():
        value = _task_loss(model, [s for s, k in zip(sequences, present) if k],
                           kept)
    return float(value.item()), metric


def _swa_window(best_epoch, epochs):
    """Four-epoch window [b-2, b+1] clipped into [1, epochs]."""
    lo = max(1, best_epoch - 2)
    hi = min(epochs, best_epoch + 1)
    return list(range(lo, hi + 1))


def _train_cell(ckpt, splits, task, grid, dropout, lr, seed):
    train_seqs, train_labels = splits["train"]
    valid_seqs, valid_labels = splits["valid"]
    torch.manual_seed(seed)
    base = _clone_base(ckpt, dropout)
    model = attach_head(base, task, init_seed=seed)
    if task.kind == "regression":
        present = ~np.isnan(np.asarray(train_labels, dtype=float))
        values = np.asarray(train_labels, dtype=float)[present]
        model.target_mean = float(values.mean())
        model.target_std = float(values.std()) or 1.0

    n = len(train_seqs)
    steps_per_epoch = math.ceil(n / grid.batch_size)
    total = grid.epochs * steps_per_epoch
    tcfg = TrainConfig(peak_lr=lr, warmup=grid.warmup_frac, total_updates=total,
                       clip_norm=grid.clip_norm, weight_decay=grid.weight_decay,
                       adam_betas=(0.9, 0.999), batch_size=grid.batch_size,
                       seed=seed)
    opt = Checkpoint(
        model=model,
        adam_m={k: torch.zeros_like(p) for k, p in model.named_parameters()},
        adam_v={k: torch.zeros_like(p) for k, p in model.named_parameters()})

    epoch_states = {}
    curve = []
    for epoch in range(1, grid.epochs + 1):
        order = np.random.default_rng(seed + epoch).permutation(n)
        model.train()
        for start in range(0, n, grid.batch_size):
            rows = order[start:start + grid.batch_size]
            batch_seqs = [train_seqs[r] for r in rows]
            batch_labels = [train_labels[r] for r in rows]
            value = _task_loss(model, batch_seqs, batch_labels)
            if value is None:
                opt.step += 1
                continue
            if not torch.isfinite(value):
                raise FinetuneError(f"non-finite loss at epoch {epoch}")
            model.zero_grad(set_to_none=True)
            value.backward()
            grads = {k: p.grad if p.grad is not None else torch.zeros_like(p)
                     for k, p in model.named_parameters()}
            adam_step(opt, grads, tcfg)
        model.eval()
        val_loss, val_metric = _evaluate(model, valid_seqs, valid_labels)
        curve.append({"epoch": epoch, "val_loss": val_loss,
                      "val_metric": val_metric})
        epoch_states[epoch] = copy.deepcopy(model.state_dict())

    better = (max if task.higher_is_better else min)
    b_loss = min(curve, key=lambda e: e["val_loss"])["epoch"]
    b_metric = better(curve, key=lambda e: e["val_metric"])["epoch"]
    windows = {
        "swa_best_loss": _swa_window(b_loss, grid.epochs),
        "swa_best_metric": _swa_window(b_metric, grid.epochs),
        "swa_last": list(range(max(1, grid.epochs - 3), grid.epochs + 1)),
        "raw_best": [b_metric],
    }
    candidates = {}
    for name, epochs_in in windows.items():
        averaged = _average_states([epoch_states[e] for e in epochs_in])
        probe = attach_head(_clone_base(ckpt, dropout), task, init_seed=seed)
        probe.target_mean, probe.target_std = model.target_mean, model.target_std
        probe.load_state_dict(averaged)
        probe.eval()
        candidates[name] = (probe, _evaluate(probe, valid_seqs, valid_labels))
    choice = better(candidates,
                    key=lambda name: candidates[name][1][1])
    chosen_model, (chosen_loss, chosen_metric) = candidates[choice]
    return chosen_model, {
        "dropout": dropout, "lr": lr, "epoch_curve": curve,
        "swa_choice": choice, "val_loss": chosen_loss,
        "val_metric": chosen_metric, "failed": False,
    }


def _average_states(state_dicts):
    out = {}
    for key in state_dicts[0]:
        out[key] = torch.stack([sd[key] for sd in state_dicts]).mean(dim=0)
    return out


def finetune_task(ckpt: Checkpoint, splits, task: TaskSpec,
                  grid: GridSpec | None = None, seed=0):
    """Full-grid fine-tune; returns (best model, grid report).

    ``splits`` maps split name -> (sequences, labels); sequences are encoded
    id lists (bos/eos included), labels floats with NaN for missing.
    """
    grid = grid or GridSpec()
    for name in ("train", "valid"):
        if name not in splits or len(splits[name][0]) == 0:
            raise EmptySplit(f"split {name!r} is missing or empty")
    better = (max if task.higher_is_better else min)
    cells = []
    models = {}
    for index, (dropout, lr) in enumerate(grid.cells()):
        cell_seed = _cell_seed(seed, index)
        try:
            model, report = _train_cell(ckpt, splits, task, grid, dropout, lr,
                                        cell_seed)
            models[index] = model
        except FinetuneError as exc:
            report = {"dropout": dropout, "lr": lr, "epoch_curve": [],
                      "swa_choice": None, "val_loss": None,
                      "val_metric": None, "failed": True, "error": str(exc)}
            logger.warning("grid cell %d failed: %s", index, exc)
        cells.append(report)
    viable = [i for i, c in enumerate(cells) if not c["failed"]]
    if not viable:
        raise FinetuneError("every grid cell failed")
    win = better(viable, key=lambda i: cells[i]["val_metric"])
    report = {"cells": cells, "winner": dict(cells[win])}
    best_model = models[win]
    if "test" in splits and len(splits["test"][0]):
        test_loss, test_metric = _evaluate(best_model, *splits["test"])
        report["winner"]["test_metric"] = test_metric
        report["winner"]["test_loss"] = test_loss
    return best_model, report


def finetune_multitask(ckpt: Checkpoint, splits_per_task, tasks,
                       grid: GridSpec | None = None, seed=0):
    """One model per task; the grid runs on the first four tasks only.

    The winning (dropout, lr) cell — best mean validation metric over those
    tasks — is inherited by every remaining task.
    """
    grid = grid or GridSpec()
    if not tasks:
        raise FinetuneError("need at least one task")
    probe_count = min(4, len(tasks))
    reports, models = [], []
    for splits, task in zip(splits_per_task[:probe_count], tasks[:probe_count]):
        model, report = finetune_task(ckpt, splits, task, grid, seed=seed)
        models.append(model)
        reports.append(report)
    cell_scores = []
    for index in range(grid.num_cells):
        vals = [r["cells"][index]["val_metric"] for r in reports
                if not r["cells"][index]["failed"]]
        cell_scores.append(np.mean(vals) if vals else None)
    better = (max if tasks[0].higher_is_better else min)
    viable = [i for i, v in enumerate(cell_scores) if v is not None]
    win_index = better(viable, key=lambda i: cell_scores[i])
    dropout, lr = list(grid.cells())[win_index]
    inherited = GridSpec(dropouts=(dropout,), lrs=(lr,), epochs=grid.epochs,
                         batch_size=grid.batch_size,
                         warmup_frac=grid.warmup_frac,
                         clip_norm=grid.clip_norm,
                         weight_decay=grid.weight_decay)
    for splits, task in zip(splits_per_task[probe_count:], tasks[probe_count:]):
        model, report = finetune_task(ckpt, splits, task, inherited, seed=seed)
        report["inherited_cell"] = {"dropout": dropout, "lr": lr}
        models.append(model)
        reports.append(report)
    metrics = [r["winner"]["val_metric"] for r in reports]
    summary = {
        "winning_cell": {"dropout": dropout, "lr": lr},
        "per_task_val_metric": metrics,
        "mean_val_metric": float(np.mean(metrics)),
        "reports": reports,
    }
    return models, summary


# ---------------------------------------------------------------------------
# Generative fine-tuning (R3F)
# ---------------------------------------------------------------------------

def seq2seq_loss(model, src, tgt_in, labels):
    logits, _, _ = model(src, tgt_in)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                           labels.reshape(-1), ignore_index=PAD_ID)


def r3f_loss(model: Seq2SeqTransformer, src, tgt_in, labels,
             rcfg: R3FConfig, generator=None):
    """Task cross entropy plus lambda times the symmetric KL between output
    distributions from clean and noise-perturbed source embeddings.

    At lambda=0 this is exactly the plain loss and consumes no randomness.
    """
    src_pad = src.eq(PAD_ID)
    emb = model.embed_src(src)
    memory = model.encode_from_embeddings(emb, src_pad)
    dec = model.decode(tgt_in, memory, src_pad)
    logits = model.output_logits(dec)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                         labels.reshape(-1), ignore_index=PAD_ID)
    if rcfg.lam == 0.0:
        return ce
    if rcfg.noise_type == "uniform":
        noise = (torch.rand(emb.shape, generator=generator, dtype=emb.dtype)
                 * 2 - 1) * rcfg.sigma
    else:
        noise = torch.randn(emb.shape, generator=generator,
                            dtype=emb.dtype) * rcfg.sigma
    memory_n = model.encode_from_embeddings(emb + noise, src_pad)
    dec_n = model.decode(tgt_in, memory_n, src_pad)
    logits_n = model.output_logits(dec_n)
    keep = labels.ne(PAD_ID).reshape(-1)
    logp = F.log_softmax(logits.reshape(-1, logits.shape[-1])[keep], dim=-1)
    logq = F.log_softmax(logits_n.reshape(-1, logits_n.shape[-1])[keep], dim=-1)
    sym_kl = (F.kl_div(logq, logp, log_target=True, reduction="batchmean")
              + F.kl_div(logp, logq, log_target=True, reduction="batchmean"))
    return ce + rcfg.lam * sym_kl


def finetune_generative(ckpt: Checkpoint, splits, sweep=None, epochs=10,
                        batch_size=16, peak_lr=3e-5, clip_norm=0.1,
                        weight_decay=0.01, seed=0):
    """R3F sweep with Adam warm-started from the pretraining moments.

    ``splits``: {"train": (src_seqs, tgt_seqs), "valid": (...)}.  The
    learning rate peaks at 6% of total updates and decays linearly; Adam
    betas are (0.9, 0.98).  The winner has the lowest validation token loss.
    """
    sweep = tuple(sweep) if sweep is not None else R3F_SWEEP
    train_pairs = splits["train"]
    valid_pairs = splits["valid"]
    if not len(train_pairs[0]):
        raise EmptySplit("train split is empty")
    n = len(train_pairs[0])
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    runs = []
    best = None
    for run_index, rcfg in enumerate(sweep):
        torch.manual_seed(seed + run_index)
        model = _clone_base(ckpt, ckpt.config.dropout)
        moments_m, moments_v = {}, {}
        missing = ckpt.adam_m is None
        for name, p in model.named_parameters():
            if missing:
                moments_m[name] = torch.zeros_like(p)
                moments_v[name] = torch.zeros_like(p)
            else:
                moments_m[name] = ckpt.adam_m[name].clone()
                moments_v[name] = ckpt.adam_v[name].clone()
        if missing:
            warnings.warn("checkpoint carries no Adam moments; starting from "
                          "zeros", MomentsMissing, stacklevel=2)
        opt = Checkpoint(model=model, adam_m=moments_m, adam_v=moments_v)
        tcfg = TrainConfig(peak_lr=peak_lr, warmup=0.06, total_updates=total,
                           clip_norm=clip_norm, weight_decay=weight_decay,
                           adam_betas=(0.9, 0.98), batch_size=batch_size,
                           seed=seed)
        gen = torch.Generator().manual_seed(seed + run_index)
        for epoch in range(epochs):
            order = np.random.default_rng(seed + epoch).permutation(n)
            model.train()
            for start in range(0, n, batch_size):
                rows = order[start:start + batch_size]
                src = collate([train_pairs[0][r] for r in rows])
                tgt_full = [train_pairs[1][r] for r in rows]
                tgt_in = collate([t[:-1] for t in tgt_full])
                labels = collate([t[1:] for t in tgt_full])
                value = r3f_loss(model, src, tgt_in, labels, rcfg, gen)
                model.zero_grad(set_to_none=True)
                value.backward()
                grads = {k: p.grad if p.grad is not None else torch.zeros_like(p)
                         for k, p in model.named_parameters()}
                adam_step(opt, grads, tcfg)
        model.eval()
        with torch.no_grad():
            src = collate(valid_pairs[0])
            tgt_in = collate([t[:-1] for t in valid_pairs[1]])
            labels = collate([t[1:] for t in valid_pairs[1]])
            val_loss = float(seq2seq_loss(model, src, tgt_in, labels).item())
        runs.append({"noise_type": rcfg.noise_type, "lambda": rcfg.lam,
                     "val_loss": val_loss})
        if best is None or val_loss < best[1]:
            best = (model, val_loss, rcfg)
    report = {"runs": runs,
              "winner": {"noise_type": best[2].noise_type,
                         "lambda": best[2].lam, "val_loss": best[1]},
              "peak_step": round(0.06 * total), "total_updates": total}
    return best[0], report
