"""Testes da varredura de OOD, relatorios e do experimento ponta a ponta."""

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from binaryheads.config import DataSection, ExperimentConfig, ModelSection, SweepSection
from binaryheads.core import (
    OOD,
    ConfusionMatrix,
    LabelVector,
    OodConvention,
    ScoreKind,
    ScoreMatrix,
    accuracy,
    balanced_accuracy,
    ood_precision,
    ood_recall,
)
from binaryheads.data import SyntheticSpec
from binaryheads.decision import DetectorConfig, DetectorMethod
from binaryheads.errors import DataError, InvalidArgumentError, StageError
from binaryheads.harness import (
    NamedDetector,
    SweepConfig,
    class_score_ranges,
    compare_report,
    default_ood_counts,
    load_sweep_csv,
    ood_false_positives,
    ood_sweep,
    render_line_chart_svg,
    run_experiment,
    write_compare_csv,
    write_sweep_csv,
)
from binaryheads.nnet import TrainConfig

NAMES = ("A", "B")


def _in_dist(rng, n=60):
    labels = np.arange(n) % 2
    probs = rng.uniform(0.05, 0.6, size=(n, 2))
    probs[np.arange(n), labels] += 0.35
    # algumas trocas para a acuracia nao ser perfeita
    probs[:6] = probs[:6, ::-1]
    return ScoreMatrix(probs), LabelVector(labels, NAMES)


def _ood(rng, n=40):
    return ScoreMatrix(rng.uniform(0.05, 0.5, size=(n, 2)))


def _vanilla():
    return NamedDetector("vanilla", DetectorConfig(DetectorMethod.VANILLA_ARGMAX, name="vanilla"))


def _bh(thresholds, name="bh"):
    return NamedDetector(name, DetectorConfig(DetectorMethod.BH_THRESHOLD, thresholds=thresholds, name=name))


class TestDefaultCounts:
    def test_nine_points(self):
        counts = default_ood_counts(2800)
        assert counts == (0, 350, 700, 1050, 1400, 1750, 2100, 2450, 2800)

    def test_no_ood_available(self):
        assert default_ood_counts(0) == (0,)

    def test_small_pool_deduplicates(self):
        assert default_ood_counts(4) == (0, 1, 2, 3, 4)


class TestOodSweep:
    def test_vanilla_accuracy_closed_form(self):
        rng = np.random.default_rng(0)
        scores, labels = _in_dist(rng)
        ood = _ood(rng)
        result = ood_sweep(scores, labels, ood, [_vanilla()], SweepConfig((0, 10, 20, 40), seed=1))
        base = result.reports("vanilla", 0)[0]
        correct = int(np.trace(base.confusion.counts))
        accs = [result.reports("vanilla", k)[0].accuracy for k in (0, 10, 20, 40)]
        assert accs == [correct / (60 + k) for k in (0, 10, 20, 40)]
        assert all(b < a for a, b in zip(accs, accs[1:]))

    def test_in_dist_recalls_constant_for_vanilla(self):
        rng = np.random.default_rng(1)
        scores, labels = _in_dist(rng)
        result = ood_sweep(scores, labels, _ood(rng), [_vanilla()], SweepConfig((0, 5, 40)))
        recalls = [result.reports("vanilla", k)[0].per_class_recall[:2] for k in (0, 5, 40)]
        for r in recalls[1:]:
            np.testing.assert_array_equal(r, recalls[0])

    def test_k_zero_same_report_when_rejection_never_fires(self):
        rng = np.random.default_rng(2)
        scores, labels = _in_dist(rng)
        detectors = [_vanilla(), _bh(np.zeros(2))]
        result = ood_sweep(scores, labels, _ood(rng), detectors, SweepConfig((0,)))
        a, b = result.reports("vanilla", 0)[0], result.reports("bh", 0)[0]
        np.testing.assert_array_equal(a.confusion.counts, b.confusion.counts)
        assert a.balanced_accuracy == b.balanced_accuracy

    def test_reject_all_balanced_accuracy(self):
        rng = np.random.default_rng(3)
        scores, labels = _in_dist(rng)
        result = ood_sweep(scores, labels, _ood(rng), [_bh(np.ones(2))], SweepConfig((10,)))
        assert result.reports("bh", 10)[0].balanced_accuracy == 1 / 3

    def test_too_many_ood(self):
        rng = np.random.default_rng(4)
        scores, labels = _in_dist(rng)
        with pytest.raises(InvalidArgumentError):
            ood_sweep(scores, labels, _ood(rng, n=5), [_vanilla()], SweepConfig((0, 6)))

    def test_kind_mismatch(self):
        rng = np.random.default_rng(5)
        scores, labels = _in_dist(rng)
        energy = NamedDetector("energy", DetectorConfig(DetectorMethod.ENERGY, global_threshold=0.0, temperature=1.0))
        with pytest.raises(InvalidArgumentError):
            ood_sweep(scores, labels, _ood(rng), [energy], SweepConfig((0,)))

    def test_deterministic_and_parallel_equivalent(self):
        rng = np.random.default_rng(6)
        scores, labels = _in_dist(rng)
        ood = _ood(rng)
        detectors = [_vanilla(), _bh(np.array([0.5, 0.5]))]
        serial = ood_sweep(scores, labels, ood, detectors, SweepConfig((0, 7, 30), repetitions=3, seed=9))
        parallel = ood_sweep(scores, labels, ood, detectors,
                             SweepConfig((0, 7, 30), repetitions=3, seed=9, workers=4))
        assert len(serial.rows) == 2 * 3 * 3
        for a, b in zip(serial.rows, parallel.rows):
            assert (a.method, a.ood_count, a.repetition) == (b.method, b.ood_count, b.repetition)
            np.testing.assert_array_equal(a.report.confusion.counts, b.report.confusion.counts)

    def test_nested_subsets(self):
        # score da cabeca A distinto por amostra OOD; o detector "cutN" rejeita exatamente as N menores
        rng = np.random.default_rng(7)
        scores, labels = _in_dist(rng, n=20)
        n_ood = 30
        grid = np.linspace(0.01, 0.3, n_ood)
        ood = ScoreMatrix(np.column_stack([grid, np.full(n_ood, 0.9)]))
        detectors = [
            _bh(np.array([(grid[cut - 1] + grid[cut]) / 2, 1.0]), name=f"cut{cut}") for cut in range(1, n_ood)
        ]
        result = ood_sweep(scores, labels, ood, detectors, SweepConfig((10, 20, 30), seed=3))
        for cut in range(1, n_ood):
            rejected = [result.reports(f"cut{cut}", k)[0].confusion.counts[2, 2] for k in (10, 20, 30)]
            assert rejected[0] <= rejected[1] <= rejected[2] == cut


class TestCompareReport:
    def test_single_method_single_k(self):
        rng = np.random.default_rng(8)
        scores, labels = _in_dist(rng)
        result = ood_sweep(scores, labels, _ood(rng), [_vanilla()], SweepConfig((5,)))
        rows = compare_report(result)
        assert len(rows) == 1 and rows[0].method == "vanilla" and rows[0].ood_count == 5

    def test_recomputable_from_confusion(self):
        rng = np.random.default_rng(9)
        scores, labels = _in_dist(rng)
        result = ood_sweep(scores, labels, _ood(rng), [_vanilla(), _bh(np.array([0.5, 0.5]))],
                           SweepConfig((0, 20)))
        for row in compare_report(result):
            cm = result.reports(row.method, row.ood_count)[0].confusion
            assert row.accuracy == accuracy(cm)
            assert row.balanced_accuracy == balanced_accuracy(cm)
            assert row.ood_recall == ood_recall(cm)
            assert row.ood_precision == ood_precision(cm)

    def test_undefined_precision_is_empty_cell(self, tmp_path):
        rng = np.random.default_rng(10)
        scores, labels = _in_dist(rng)
        result = ood_sweep(scores, labels, _ood(rng), [_vanilla()], SweepConfig((0, 5)))
        path = tmp_path / "compare.csv"
        write_compare_csv(path, compare_report(result))
        rows = list(csv.DictReader(path.read_text(encoding="utf-8").splitlines()))
        assert [r["ood_precision"] for r in rows] == ["", ""]
        assert rows[0]["ood_recall"] == "" and rows[1]["ood_recall"] == "0"

    def test_sweep_csv_rebuilds_reports(self, tmp_path):
        rng = np.random.default_rng(11)
        scores, labels = _in_dist(rng)
        result = ood_sweep(scores, labels, _ood(rng), [_vanilla(), _bh(np.array([0.4, 0.6]))],
                           SweepConfig((0, 8, 16), repetitions=2))
        path = tmp_path / "sweep.csv"
        write_sweep_csv(path, result, NAMES)
        loaded, class_names = load_sweep_csv(path)
        assert class_names == NAMES
        assert loaded.methods == result.methods and loaded.ood_counts == result.ood_counts
        assert compare_report(loaded) == compare_report(result)


class TestDiagnostics:
    def test_class_score_ranges(self):
        probs = np.array([[0.9, 0.1], [0.7, 0.2], [0.3, 0.6], [0.2, 0.8]])
        labels = LabelVector(np.array([0, 0, 1, OOD]), NAMES)
        ranges = class_score_ranges(ScoreMatrix(probs), labels)
        assert ranges[0].count == 2 and ranges[0].minimum == 0.7 and ranges[0].maximum == 0.9
        assert ranges[1].count == 1 and ranges[1].median == 0.6

    def test_class_score_ranges_on_logits(self):
        labels = LabelVector(np.array([0]), NAMES)
        ranges = class_score_ranges(ScoreMatrix(np.array([[0.0, 0.0]]), ScoreKind.LOGIT), labels)
        assert ranges[0].median == 0.5
        assert ranges[1].count == 0 and ranges[1].median is None

    def test_ood_false_positives(self):
        cm = ConfusionMatrix(np.array([[8, 0, 2], [1, 3, 0], [0, 0, 4]]))
        rows = ood_false_positives(cm, NAMES)
        assert (rows[0].n_true, rows[0].n_rejected, rows[0].share) == (10, 2, 0.2)
        assert rows[1].n_rejected == 0

    def test_svg_chart(self):
        svg = render_line_chart_svg("t", [0, 10, 20], {"a": [0.5, 0.4, 0.3], "b <x>": [0.6, 0.6, 0.7]}, "acc")
        assert 'viewBox="0 0 800 500"' in svg
        assert svg.count("<polyline") == 2
        assert "b &lt;x&gt;" in svg


def _tiny_config(**sweep) -> ExperimentConfig:
    spec = SyntheticSpec(total_samples=2000, feature_dim=4, groups_per_class=4, cluster_separation=3.0, seed=2)
    return ExperimentConfig(
        data=DataSection(spec=spec, train_frac=0.6),
        model=ModelSection(hidden_dims=(8,)),
        train=TrainConfig(max_epochs=3, seed=2),
        sweep=replace(SweepSection(), n_points=4, **sweep),
    )


def _csv_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


class TestRunExperiment:
    def test_artifacts_and_manifest(self, tmp_path):
        out = run_experiment(_tiny_config(), tmp_path / "run", verbose=False)
        for rel in ("data/train.csv", "model/bh.bin", "scores/softmax_test.csv", "calibration/thresholds.csv",
                    "eval/confusion_bh_calibrated.csv", "sweep/sweep.csv", "report/compare.csv",
                    "report/balanced_accuracy.svg", "manifest.json", "checkpoint.json"):
            assert (out / rel).exists(), rel
        manifest = (out / "manifest.json").read_text(encoding="utf-8")
        assert _tiny_config().config_hash() in manifest
        loaded, _ = load_sweep_csv(out / "sweep" / "sweep.csv")
        assert len(loaded.methods) == 6
        assert loaded.ood_counts[0] == 0 and len(loaded.ood_counts) == 4

    def test_byte_identical_reruns(self, tmp_path):
        a = run_experiment(_tiny_config(), tmp_path / "a", verbose=False)
        b = run_experiment(_tiny_config(), tmp_path / "b", verbose=False)
        first, second = _csv_bytes(a), _csv_bytes(b)
        assert first.keys() == second.keys() and first == second

    def test_without_ood_class_single_point(self, tmp_path):
        cfg = _tiny_config()
        cfg = replace(cfg, data=replace(cfg.data, spec=replace(cfg.data.spec, ood_class_index=None)))
        out = run_experiment(cfg, tmp_path / "no_ood", verbose=False)
        loaded, _ = load_sweep_csv(out / "sweep" / "sweep.csv")
        assert loaded.ood_counts == (0,)

    def test_stage_failure_is_tagged(self, tmp_path):
        with pytest.raises(StageError) as info:
            run_experiment(_tiny_config(), tmp_path / "empty", stages=["calibrate"], verbose=False)
        assert info.value.stage == "calibrate"
        assert isinstance(info.value.cause, DataError)
        assert info.value.exit_code == 3

    def test_partial_artifacts_retained(self, tmp_path):
        out = tmp_path / "partial"
        run_experiment(_tiny_config(), out, stages=["gen-data"], verbose=False)
        with pytest.raises(StageError):
            run_experiment(_tiny_config(), out, stages=["calibrate"], verbose=False)
        assert (out / "data" / "train.csv").exists()

    def test_io_failure_inside_stage_exit_3(self, tmp_path):
        out = tmp_path / "io"
        run_experiment(_tiny_config(), out, stages=["gen-data"], verbose=False)
        (out / "model").write_text("nao sou diretorio", encoding="utf-8")
        with pytest.raises(StageError) as info:
            run_experiment(_tiny_config(), out, stages=["train"], verbose=False)
        assert isinstance(info.value.cause, OSError)
        assert info.value.exit_code == 3

    def test_out_is_a_file(self, tmp_path):
        target = tmp_path / "arquivo"
        target.write_text("x", encoding="utf-8")
        with pytest.raises(DataError) as info:
            run_experiment(_tiny_config(), target, verbose=False)
        assert info.value.exit_code == 3


class TestStageErrorCodes:
    @pytest.mark.parametrize("cause, code", [
        (DataError("faltou"), 3),
        (InvalidArgumentError("ruim"), 3),
        (FileNotFoundError("sumiu"), 3),
        (PermissionError("negado"), 3),
        (ValueError("valor"), 3),
        (RuntimeError("outro"), 1),
    ])
    def test_exit_code_follows_cause(self, cause, code):
        assert StageError("eval", cause).exit_code == code


def _final_point(out: Path) -> dict[str, float]:
    loaded, _ = load_sweep_csv(out / "sweep" / "sweep.csv")
    k_max = max(loaded.ood_counts)
    return {row.method: row.balanced_accuracy for row in compare_report(loaded) if row.ood_count == k_max}


@pytest.mark.slow
class TestAcceptanceExperiment:
    """Experimento sintetico de 8 classes (20000 amostras, AK como OOD)."""

    def test_calibrated_bh_beats_vanilla_and_msp(self, tmp_path):
        wins_over_msp = 0
        wins_no_ood = 0
        for seed in range(5):
            out = run_experiment(ExperimentConfig().with_seed(seed), tmp_path / f"s{seed}", verbose=False)
            loaded, _ = load_sweep_csv(out / "sweep" / "sweep.csv")
            at_zero = loaded.reports("bh_vanilla", 0)[0].confusion
            vanilla_in = balanced_accuracy(at_zero, OodConvention.IN_DIST_ONLY)
            assert 0.80 <= vanilla_in <= 0.95, f"seed {seed}: {vanilla_in:.4f}"

            final = _final_point(out)
            gain = final["bh_calibrated"] - final["bh_vanilla"]
            assert gain >= 0.05, f"seed {seed}: ganho {gain:.4f}"
            accs = [row.accuracy for row in compare_report(loaded) if row.method == "bh_vanilla"]
            assert all(b < a for a, b in zip(accs, accs[1:])), f"seed {seed}"

            wins_over_msp += final["bh_calibrated"] >= final["msp"]
            wins_no_ood += final["bh_calibrated"] - final["bh_calibrated_no_ood"] < 0.05
        assert wins_over_msp >= 3
        assert wins_no_ood >= 3
