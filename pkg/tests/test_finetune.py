import math
import random

import numpy as np
import pytest
import torch

from moldae import finetune as ft
from moldae.finetune import (EmptySplit, GridSpec, HeadAlreadyAttached,
                             LengthMismatch, MomentsMissing, R3FConfig,
                             R3F_SWEEP, SingleClass, TaskSpec, attach_head,
                             auc_roc, finetune_generative, finetune_multitask,
                             finetune_task, r3f_loss, rmse, seq2seq_loss)
from moldae.model import (Checkpoint, Seq2SeqTransformer, collate,
                          init_checkpoint, micro_config)
from moldae.tokenizer import BOS_ID, EOS_ID, NUM_SPECIALS

V = 20


def ids(*payload):
    return [BOS_ID] + [NUM_SPECIALS + p for p in payload] + [EOS_ID]


def marker_dataset(n, seed, marker=7, length=6):
    """Binary task: does the marker token appear in the sequence?"""
    rng = random.Random(seed)
    seqs, labels = [], []
    for i in range(n):
        has = i % 2 == 0
        payload = [rng.randrange(1, 6) for _ in range(length)]
        if has:
            payload[rng.randrange(length)] = marker
        seqs.append(ids(*payload))
        labels.append(1.0 if has else 0.0)
    return seqs, np.array(labels)


def separable_dataset(n, seed, marker=7, length=5):
    """Linearly separable toy: the token at the read-out position (the last
    payload token, whose decoder state feeds the head) determines the label."""
    rng = random.Random(seed)
    seqs, labels = [], []
    for i in range(n):
        positive = i % 2 == 0
        payload = [rng.randrange(1, 6) for _ in range(length)]
        payload[-1] = marker if positive else rng.randrange(1, 6)
        seqs.append(ids(*payload))
        labels.append(1.0 if positive else 0.0)
    return seqs, np.array(labels)


@pytest.fixture(scope="module")
def base_ckpt():
    return init_checkpoint(micro_config(V), init_seed=13)


class TestMetrics:
    def test_auc_perfect(self):
        assert auc_roc([0.9, 0.1], [1, 0]) == 1.0

    def test_auc_all_ties(self):
        assert auc_roc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    def test_auc_matches_pairwise_bruteforce(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(size=50)
        scores[10:20] = scores[0:10]  # force ties
        labels = rng.integers(0, 2, size=50)
        labels[0] = 1
        labels[1] = 0
        hits = total = 0
        for i in np.flatnonzero(labels == 1):
            for j in np.flatnonzero(labels == 0):
                total += 1
                if scores[i] > scores[j]:
                    hits += 1
                elif scores[i] == scores[j]:
                    hits += 0.5
        assert auc_roc(scores, labels) == pytest.approx(hits / total, abs=1e-12)

    def test_auc_monotone_invariance(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=30)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        base = auc_roc(scores, labels)
        assert auc_roc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auc_roc(3 * scores + 11, labels) == pytest.approx(base, abs=1e-12)

    def test_auc_single_class(self):
        with pytest.raises(SingleClass):
            auc_roc([0.1, 0.2], [1, 1])

    def test_rmse_basics(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert rmse([2.0, 3.0], [1.0, 2.0]) == pytest.approx(1.0)

    def test_rmse_matches_naive(self):
        rng = np.random.default_rng(1)
        p, t = rng.normal(size=40), rng.normal(size=40)
        naive = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / 40)
        assert rmse(p, t) == pytest.approx(naive, abs=1e-12)

    def test_rmse_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            rmse([1.0], [1.0, 2.0])


class TestHead:
    def test_binary_head_dim(self, base_ckpt):
        model = attach_head(base_ckpt.model, TaskSpec("classification", 2))
        assert model.head.out_features == 2

    def test_regression_head_dim(self, base_ckpt):
        model = attach_head(base_ckpt.model, TaskSpec("regression"))
        assert model.head.out_features == 1

    def test_double_attach_rejected(self, base_ckpt):
        model = attach_head(base_ckpt.model, TaskSpec())
        with pytest.raises(HeadAlreadyAttached):
            attach_head(model, TaskSpec())

    def test_head_init_deterministic(self, base_ckpt):
        a = attach_head(base_ckpt.model, TaskSpec(), init_seed=5)
        b = attach_head(base_ckpt.model, TaskSpec(), init_seed=5)
        assert torch.equal(a.head.weight, b.head.weight)

    def test_missing_labels_excluded(self, base_ckpt):
        model = attach_head(base_ckpt.model, TaskSpec(), init_seed=1)
        model.eval()
        seqs, labels = marker_dataset(8, seed=2)
        with torch.no_grad():
            base = ft._task_loss(model, seqs, labels)
        extra_seqs = seqs + [ids(1, 2, 3)] * 3
        extra_labels = np.concatenate([labels, [np.nan] * 3])
        with torch.no_grad():
            padded = ft._task_loss(model, extra_seqs, extra_labels)
        assert padded.item() == pytest.approx(base.item(), abs=1e-7)


class TestGrid:
    def test_grid_has_nine_cells(self):
        grid = GridSpec()
        assert grid.num_cells == 9
        assert list(grid.cells())[0] == (0.1, 5e-6)
        assert grid.epochs == 10 and grid.batch_size == 16
        assert grid.warmup_frac == 0.16 and grid.clip_norm == 0.1

    def test_swa_window_definition(self):
        assert ft._swa_window(5, 10) == [3, 4, 5, 6]
        assert ft._swa_window(1, 10) == [1, 2]
        assert ft._swa_window(10, 10) == [8, 9, 10]

    def test_separable_toy_reaches_auc_1(self, base_ckpt):
        # Desk-scale learning rates; the recipe (9 cells, 10 epochs, SWA
        # windows, validation selection) is unchanged.
        train = separable_dataset(48, seed=1)
        valid = separable_dataset(24, seed=2)
        grid = GridSpec(lrs=(1e-3, 3e-3, 1e-2))
        model, report = finetune_task(
            base_ckpt, {"train": train, "valid": valid},
            TaskSpec("classification", 2), grid, seed=0)
        assert len(report["cells"]) == 9
        assert report["winner"]["val_metric"] == 1.0

    def test_grid_determinism(self, base_ckpt):
        train = marker_dataset(16, seed=3)
        valid = marker_dataset(8, seed=4)
        grid = GridSpec(dropouts=(0.1,), lrs=(1e-3, 3e-3), epochs=2)
        _, r1 = finetune_task(base_ckpt, {"train": train, "valid": valid},
                              TaskSpec(), grid, seed=11)
        _, r2 = finetune_task(base_ckpt, {"train": train, "valid": valid},
                              TaskSpec(), grid, seed=11)
        assert r1 == r2

    def test_empty_split_rejected(self, base_ckpt):
        with pytest.raises(EmptySplit):
            finetune_task(base_ckpt, {"train": ([], []),
                                      "valid": marker_dataset(4, 0)},
                          TaskSpec())


class TestMultitask:
    def test_single_task_equivalent(self, base_ckpt):
        train = marker_dataset(16, seed=5)
        valid = marker_dataset(8, seed=6)
        grid = GridSpec(dropouts=(0.1,), lrs=(1e-3,), epochs=2)
        splits = {"train": train, "valid": valid}
        _, solo = finetune_task(base_ckpt, splits, TaskSpec(), grid, seed=3)
        models, summary = finetune_multitask(base_ckpt, [splits], [TaskSpec()],
                                             grid, seed=3)
        assert len(models) == 1
        assert summary["per_task_val_metric"][0] == solo["winner"]["val_metric"]

    def test_six_tasks_inherit_winner(self, base_ckpt):
        grid = GridSpec(dropouts=(0.1,), lrs=(1e-3, 3e-3), epochs=1)
        splits = [{"train": marker_dataset(12, seed=i),
                   "valid": marker_dataset(8, seed=100 + i)} for i in range(6)]
        tasks = [TaskSpec() for _ in range(6)]
        models, summary = finetune_multitask(base_ckpt, splits, tasks, grid,
                                             seed=1)
        assert len(models) == 6
        inherited = [r for r in summary["reports"] if "inherited_cell" in r]
        assert len(inherited) == 2
        assert all(r["inherited_cell"] == summary["winning_cell"]
                   for r in inherited)
        assert summary["mean_val_metric"] == pytest.approx(
            np.mean(summary["per_task_val_metric"]))


class TestR3F:
    def test_sweep_is_six_runs(self):
        assert len(R3F_SWEEP) == 6
        combos = {(c.noise_type, c.lam) for c in R3F_SWEEP}
        assert combos == {(nt, lam) for nt in ("uniform", "normal")
                          for lam in (0.001, 0.01, 0.1)}
        assert all(c.sigma == 1e-5 for c in R3F_SWEEP)

    def test_lambda_zero_equals_plain_loss(self, base_ckpt):
        model = base_ckpt.model
        model.eval()
        src = collate([ids(1, 2, 3), ids(4, 5)])
        tgt = [ids(1, 2, 3), ids(4, 5)]
        tgt_in = collate([t[:-1] for t in tgt])
        labels = collate([t[1:] for t in tgt])
        with torch.no_grad():
            plain = seq2seq_loss(model, src, tgt_in, labels)
            reg = r3f_loss(model, src, tgt_in, labels, R3FConfig(lam=0.0))
        assert torch.equal(plain, reg)

    def test_symmetric_kl_nonnegative(self, base_ckpt):
        model = base_ckpt.model
        model.eval()
        src = collate([ids(1, 2, 3)])
        tgt = [ids(1, 2, 3)]
        tgt_in = collate([t[:-1] for t in tgt])
        labels = collate([t[1:] for t in tgt])
        gen = torch.Generator().manual_seed(0)
        with torch.no_grad():
            plain = seq2seq_loss(model, src, tgt_in, labels)
            for rcfg in R3F_SWEEP:
                reg = r3f_loss(model, src, tgt_in, labels, rcfg, gen)
                assert reg.item() >= plain.item() - 1e-9

    def test_generative_sweep_and_peak(self, base_ckpt):
        pairs = [ids(i % 5, (i + 1) % 5) for i in range(12)]
        splits = {"train": (pairs, pairs), "valid": (pairs[:4], pairs[:4])}
        model, report = finetune_generative(base_ckpt, splits, epochs=1,
                                            peak_lr=1e-3, seed=0)
        assert len(report["runs"]) == 6
        assert report["peak_step"] == round(0.06 * report["total_updates"])

    def test_moments_warning(self, base_ckpt):
        ckpt = Checkpoint(model=base_ckpt.model, adam_m=None, adam_v=None)
        pairs = [ids(1, 2)] * 6
        splits = {"train": (pairs, pairs), "valid": (pairs[:2], pairs[:2])}
        with pytest.warns(MomentsMissing):
            finetune_generative(ckpt, splits, sweep=[R3FConfig(lam=0.0)],
                                epochs=1, peak_lr=1e-3, seed=0)

    def test_moments_warm_start_used(self, base_ckpt):
        # Non-zero pretraining moments must change the first update.
        pairs = [ids(1, 2, 3)] * 8
        splits = {"train": (pairs, pairs), "valid": (pairs[:2], pairs[:2])}
        warm = init_checkpoint(micro_config(V), init_seed=13)
        for t in warm.adam_v.values():
            t.fill_(10.0)  # huge squared-grad history damps the update
        m_cold, _ = finetune_generative(base_ckpt, splits,
                                        sweep=[R3FConfig(lam=0.0)], epochs=2,
                                        peak_lr=1e-3, seed=0)
        m_warm, _ = finetune_generative(warm, splits,
                                        sweep=[R3FConfig(lam=0.0)], epochs=2,
                                        peak_lr=1e-3, seed=0)
        diff = sum(float((p - q).abs().sum())
                   for p, q in zip(m_cold.parameters(), m_warm.parameters()))
        assert diff > 0
