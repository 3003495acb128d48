import csv
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from celd.datahub import ImageRecord, ImageTensor, LabelSpace
from celd.evaluator import (
    ConfusionMatrix,
    DegenerateMetricWarning,
    EvalReport,
    accuracy,
    comparison_report,
    confusion,
    evaluate,
    f1_score,
    per_class_metrics,
    read_metrics_csv,
)
from celd.nnmodel import ClassifierConfig, build
from celd.perturb import KINDS, PerturbationSpec

T = LabelSpace.target()
H, D, G = T.classes


def brute_metrics(preds, truth, space):
    """Recount TP/FP/FN straight from the pairs."""
    out = {}
    for c in space:
        tp = sum(p == c and t == c for p, t in zip(preds, truth))
        fp = sum(p == c and t != c for p, t in zip(preds, truth))
        fn = sum(p != c and t == c for p, t in zip(preds, truth))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[c] = (prec, rec, f1)
    return out


class TestConfusion:
    def test_identity(self):
        assert confusion([H, D, G], [H, D, G], T).counts.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]

    def test_off_diagonal(self):
        cm = confusion([H, D, D, G], [H, D, G, G], T)
        assert cm.counts[T.index(G), T.index(D)] == 1
        assert np.diag(cm.counts).tolist() == [1, 1, 1]
        assert accuracy(cm) == 0.75

    def test_empty(self):
        cm = confusion([], [], T)
        assert cm.counts.sum() == 0 and cm.counts.shape == (3, 3)
        with pytest.raises(ValueError):
            accuracy(cm)

    def test_errors(self):
        with pytest.raises(ValueError):
            confusion([H], [H, D], T)
        with pytest.raises(ValueError):
            confusion(["Cataract"], [H], T)

    def test_all_diagonal(self):
        assert accuracy(ConfusionMatrix(np.diag([4, 5, 6]), T)) == 1.0


class TestMetrics:
    @pytest.mark.parametrize("p,r,f1", [(0.9027, 0.8947, 0.8987), (0.8235, 0.8358, 0.8296)])
    def test_table2_f1(self, p, r, f1):
        assert abs(f1_score(p, r) - f1) <= 1e-4

    def test_degenerate_class_warns(self):
        cm = confusion([H, D], [H, D], T)
        with pytest.warns(DegenerateMetricWarning):
            metrics = per_class_metrics(cm)
        assert metrics[G] == (0.0, 0.0, 0.0)

    def test_binary_reduces_to_formulas(self):
        S = LabelSpace.source()
        truth = [H] * 5 + [D] * 5
        preds = [H, H, H, D, D, D, D, D, H, D]
        tp, fp, fn = 4, 2, 1  # DR as positive
        metrics = per_class_metrics(confusion(preds, truth, S))
        assert metrics[D][0] == tp / (tp + fp) and metrics[D][1] == tp / (tp + fn)

    @settings(max_examples=60)
    @given(st.lists(st.tuples(st.sampled_from(T.classes), st.sampled_from(T.classes)), min_size=1, max_size=80))
    def test_brute_force_recount(self, pairs):
        preds, truth = [p for p, _ in pairs], [t for _, t in pairs]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateMetricWarning)
            got = per_class_metrics(confusion(preds, truth, T))
        assert got == brute_metrics(preds, truth, T)
        assert accuracy(confusion(preds, truth, T)) == sum(p == t for p, t in pairs) / len(pairs)

    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.sampled_from(T.classes), st.sampled_from(T.classes)), min_size=1, max_size=50),
           st.randoms(use_true_random=False))
    def test_order_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = confusion([p for p, _ in pairs], [t for _, t in pairs], T)
        b = confusion([p for p, _ in shuffled], [t for _, t in shuffled], T)
        assert np.array_equal(a.counts, b.counts)

    @given(st.floats(0.01, 1), st.floats(0.01, 1))
    def test_harmonic_mean_bounds(self, p, r):
        f1 = f1_score(p, r)
        assert min(p, r) - 1e-12 <= f1 <= max(p, r) + 1e-12


class PerfectStub(torch.nn.Module):
    """Reads the class index painted into the top-left red pixel."""

    def __init__(self, side):
        super().__init__()
        self.config = ClassifierConfig(input_side=side, num_classes=3)
        self.labelspace = T
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        idx = torch.round(x[:, 0, 0, 0] * 2).long()
        return torch.nn.functional.one_hot(idx, 3).float() * 10


def stub_data(n=9, side=16):
    recs, imgs = [], []
    for i in range(n):
        label = T.classes[i % 3]
        px = np.full((side, side, 3), 0.3, dtype=np.float32)
        px[0, 0, 0] = T.index(label) / 2
        recs.append(ImageRecord(f"{i}.png", label, "s"))
        imgs.append(ImageTensor(px))
    return recs, imgs


class TestEvaluate:
    def test_perfect_stub(self):
        recs, imgs = stub_data()
        rep = evaluate(PerfectStub(16), recs, PerturbationSpec(), images=imgs)
        assert rep.accuracy == 1.0

    def test_repeatable(self):
        recs, imgs = stub_data()
        model = build(ClassifierConfig(input_side=16, growth_rate=2, block_layout=(1,), num_classes=3))
        a = evaluate(model, recs, PerturbationSpec("GN", seed=2), images=imgs)
        b = evaluate(model, recs, PerturbationSpec("GN", seed=2), images=imgs)
        assert a.to_dict() == b.to_dict()

    def test_reads_files(self, tmp_path):
        from PIL import Image

        recs = []
        for i, label in enumerate(T.classes):
            arr = np.full((16, 16, 3), 77, dtype=np.uint8)
            arr[0, 0, 0] = round(255 * i / 2)
            Image.fromarray(arr).save(tmp_path / f"{i}.png")
            recs.append(ImageRecord(tmp_path / f"{i}.png", label, "s"))
        assert evaluate(PerfectStub(16), recs).accuracy == 1.0

    def test_report_roundtrip(self, tmp_path):
        recs, imgs = stub_data()
        rep = evaluate(PerfectStub(16), recs, PerturbationSpec("RG", {"alpha": 0.5}), images=imgs)
        back = EvalReport.load(rep.save(tmp_path / "r.json"))
        assert back.to_dict() == rep.to_dict()


def fake_report(kind, seed):
    rng = np.random.default_rng(seed)
    preds = list(rng.choice(T.classes, 40))
    truth = list(rng.choice(T.classes, 40))
    return EvalReport.from_confusion(confusion(preds, truth, T), PerturbationSpec(kind))


class TestComparisonReport:
    def test_seven_panels(self, tmp_path):
        reports = [fake_report(k, i) for i, k in enumerate(reversed(KINDS))]
        files = comparison_report(reports, tmp_path)
        for k in KINDS:
            assert (tmp_path / f"cm_{k}.png").stat().st_size > 0
        assert len(files["panels"]) == 7 and len(files["csv"]) == 1
        assert (tmp_path / "confusion_grid.png").is_file() and (tmp_path / "metrics_bars.png").is_file()
        with (tmp_path / "metrics.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["perturbation"] for r in rows[::3]] == list(KINDS)

    def test_single(self, tmp_path):
        files = comparison_report([fake_report("NONE", 0)], tmp_path, formats=("png", "svg"))
        assert (tmp_path / "cm_NONE.png").is_file() and (tmp_path / "cm_NONE.svg").is_file()
        assert len(files["panels"]) == 2

    def test_csv_roundtrip(self, tmp_path):
        reports = [fake_report("NONE", 1), fake_report("ODC", 2)]
        comparison_report(reports, tmp_path)
        rows = read_metrics_csv(tmp_path / "metrics.csv")
        expected = [(r.perturbation.label(), c, *m, r.accuracy) for r in reports for c, m in r.per_class.items()]
        got = [(r["perturbation"], r["class"], r["precision"], r["recall"], r["f1"], r["accuracy_overall"]) for r in rows]
        assert got == expected

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            comparison_report([], tmp_path)
