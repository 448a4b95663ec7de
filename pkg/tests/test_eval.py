import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cisper.errors import EmptyLabelsError
from cisper.evaluation import EvalReport, confusion_matrix, evaluate, per_class_metrics, weighted_f1
from cisper.suites import SuiteError, ablation_suite, sweep_prompt_length
from cisper.toy import toy_corpus


def oracle_weighted_f1(preds, golds):
    """Independent brute force: one pass per class over all pairs."""
    total = 0.0
    for m in sorted(set(golds)):
        tp = sum(1 for p, g in zip(preds, golds) if p == m and g == m)
        fp = sum(1 for p, g in zip(preds, golds) if p == m and g != m)
        fn = sum(1 for p, g in zip(preds, golds) if p != m and g == m)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += golds.count(m) * f1
    return total / len(golds)


class TestWeightedF1:
    def test_perfect(self):
        assert weighted_f1(list("abcab"), list("abcab")) == 1.0

    def test_hand_case(self):
        # a: support 3, F1 0.5 (one hit, two misses); b: support 1, F1 1.0
        preds = ["a", "c", "c", "b"]
        golds = ["a", "a", "a", "b"]
        stats = per_class_metrics(preds, golds)
        assert (stats["a"]["f1"], stats["b"]["f1"]) == (0.5, 1.0)
        assert weighted_f1(preds, golds) == 0.625

    def test_random_against_oracle(self):
        rng = random.Random(0)
        labels = list("abcdefg")
        preds = [rng.choice(labels) for _ in range(50)]
        golds = [rng.choice(labels) for _ in range(50)]
        assert abs(weighted_f1(preds, golds) - oracle_weighted_f1(preds, golds)) < 1e-9

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd")), min_size=1, max_size=60))
    def test_property_oracle_and_range(self, pairs):
        preds, golds = [p for p, _ in pairs], [g for _, g in pairs]
        value = weighted_f1(preds, golds)
        assert 0.0 <= value <= 1.0
        assert abs(value - oracle_weighted_f1(preds, golds)) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("abc")), min_size=1, max_size=30), st.randoms())
    def test_order_independent(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = weighted_f1([p for p, _ in pairs], [g for _, g in pairs])
        b = weighted_f1([p for p, _ in shuffled], [g for _, g in shuffled])
        assert abs(a - b) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            weighted_f1(["a"], ["a", "b"])


class TestReport:
    def test_confusion_rows_are_gold(self):
        assert confusion_matrix(["a", "b", "b"], ["a", "a", "b"], ["a", "b"]) == [[1, 1], [0, 1]]

    def test_roundtrip_and_table(self, tmp_path):
        report = EvalReport.from_predictions(["a", "b", "a"], ["a", "b", "b"], ["a", "b"], {"split": "test"})
        report.save(tmp_path / "r.json")
        assert EvalReport.load(tmp_path / "r.json") == report
        table = report.per_class_table().splitlines()
        assert table[1].startswith("b\t2\t66.67%")
        assert report.accuracy == pytest.approx(2 / 3)

    def test_gold_as_prediction(self):
        golds = ["a", "b", "b", "c"]
        report = EvalReport.from_predictions(golds, golds, ["a", "b", "c"])
        assert report.weighted_f1 == 1.0
        assert report.confusion == [[1, 0, 0], [0, 2, 0], [0, 0, 1]]


class TestEvaluate:
    def test_deterministic(self, small_toy):
        model = small_toy.model()
        a = evaluate(model, small_toy.corpus, small_toy.features)
        b = evaluate(model, small_toy.corpus, small_toy.features)
        assert a == b
        assert len(a.predictions) == small_toy.corpus.num_utterances

    def test_unlabeled(self, small_toy):
        from cisper.corpus import Conversation, Corpus, Utterance

        corpus = Corpus((Conversation("u", (Utterance("u", 0, "a", "okay ."),)),), ("joy",))
        with pytest.raises(EmptyLabelsError):
            evaluate(small_toy.model(), corpus, {})


def _fake_runner(calls):
    scores = {"random": 0.5, "context-only": 0.6, "commonsense-only": 0.55, "full": 0.7}

    def run(cfg):
        calls.append((cfg.mode, cfg.n_e, cfg.n_p, cfg.seed))
        return scores.get(cfg.mode, 0.0) + 0.01 * cfg.n_e + 0.001 * cfg.seed

    return run


class TestSuites:
    def test_ablation_table(self, small_toy, tmp_path):
        calls = []
        rows = ablation_suite(small_toy.config, _fake_runner(calls), tmp_path, seeds=[0, 1])
        assert [r["mode"] for r in rows] == ["random", "context-only", "commonsense-only", "full"]
        assert [(r["commonsense"], r["context"]) for r in rows] == [("no", "no"), ("no", "yes"), ("yes", "no"), ("yes", "yes")]
        assert rows[3]["delta_vs_random"] == pytest.approx(0.2)
        assert (tmp_path / "ablation.csv").read_text().splitlines()[0].startswith("mode,commonsense,context")
        assert len(calls) == 8

    def test_ablation_repeatable(self, small_toy):
        a = ablation_suite(small_toy.config, _fake_runner([]), seeds=[3])
        b = ablation_suite(small_toy.config, _fake_runner([]), seeds=[3])
        assert a == b

    def test_ablation_partial(self, small_toy, tmp_path):
        def runner(cfg):
            if cfg.mode == "commonsense-only":
                raise RuntimeError("boom")
            return 0.5

        with pytest.raises(SuiteError) as info:
            ablation_suite(small_toy.config, runner, tmp_path, seeds=[0])
        assert len(info.value.partial_rows) == 2
        assert len((tmp_path / "ablation.partial.csv").read_text().splitlines()) == 3

    def test_sweep(self, small_toy, tmp_path):
        rows = sweep_prompt_length(small_toy.config, [1, 2, 3, 4, 5], _fake_runner([]), tmp_path, seeds=[0])
        assert [r["pseudo_tokens"] for r in rows] == [4, 8, 12, 16, 20]
        assert (tmp_path / "sweep.png").stat().st_size > 0

    def test_sweep_single_equals_standalone(self, small_toy):
        runner = _fake_runner([])
        rows = sweep_prompt_length(small_toy.config, [3], runner, seeds=[0])
        assert rows[0]["weighted_f1"] == runner(small_toy.config.replace(n_e=3, n_p=3, seed=0))

    def test_sweep_bad_values(self, small_toy):
        from cisper.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            sweep_prompt_length(small_toy.config, [0], _fake_runner([]))
