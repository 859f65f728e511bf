"""Testes das regras de decisao (BH, argmax, MSP, energia)."""

import math

import numpy as np
import pytest

from binaryheads.core import OOD, ScoreKind, ScoreMatrix, ThresholdVector, softmax
from binaryheads.decision import (
    DetectorConfig,
    DetectorMethod,
    bh_predict,
    energy_predict,
    energy_score,
    msp_predict,
    predict_all,
    predict_arrays,
    vanilla_predict,
)
from binaryheads.errors import InvalidArgumentError


def _brute_force_bh(probs, thresholds):
    gated = [p if p > t else 0.0 for p, t in zip(probs, thresholds)]
    best = max(gated)
    if best == 0.0:
        return OOD, 0.0
    return gated.index(best), best


class TestBhPredict:
    def test_accepts_highest_gated(self):
        pred = bh_predict([0.9, 0.2, 0.1], [0.5, 0.5, 0.5])
        assert pred.verdict == 0 and pred.confidence == 0.9

    def test_all_rejected(self):
        pred = bh_predict([0.4, 0.3], [0.5, 0.5])
        assert pred.is_ood and pred.confidence == 0.0

    def test_gated_class_loses_despite_higher_probability(self):
        pred = bh_predict([0.8, 0.7], ThresholdVector(np.array([0.9, 0.6])))
        assert pred.verdict == 1 and pred.confidence == 0.7

    def test_probability_equal_to_threshold_is_rejected(self):
        assert bh_predict([0.5, 0.2], [0.5, 0.5]).is_ood

    def test_tie_goes_to_lowest_index(self):
        assert bh_predict([0.3, 0.7, 0.7], [0.0, 0.0, 0.0]).verdict == 1

    def test_threshold_count_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            bh_predict([0.3, 0.7], [0.1])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1234)
        mismatches = 0
        for _ in range(10000):
            c = int(rng.integers(1, 9))
            # grade grossa para forcar empates e igualdades com o limiar
            probs = rng.integers(0, 11, size=c) / 10
            thresholds = rng.integers(0, 11, size=c) / 10
            pred = bh_predict(probs, thresholds)
            verdict, conf = _brute_force_bh(probs.tolist(), thresholds.tolist())
            mismatches += (pred.verdict != verdict) or (pred.confidence != conf)
        assert mismatches == 0

    def test_unit_thresholds_reject_everything(self):
        rng = np.random.default_rng(10)
        for _ in range(500):
            row = rng.uniform(0.0, 1.0, size=int(rng.integers(1, 8)))
            row[rng.integers(0, row.size)] = 1.0
            assert bh_predict(row, np.ones(row.size)).is_ood

    def test_raising_a_threshold_never_moves_toward_that_class(self):
        rng = np.random.default_rng(11)
        for _ in range(2000):
            c = int(rng.integers(1, 7))
            probs = rng.integers(0, 11, size=c) / 10
            low = rng.integers(0, 11, size=c) / 10
            i = int(rng.integers(0, c))
            high = low.copy()
            high[i] = rng.uniform(low[i], 1.0)
            if bh_predict(probs, high).verdict == i:
                assert bh_predict(probs, low).verdict == i

    def test_rejected_heads_do_not_matter(self):
        rng = np.random.default_rng(12)
        for _ in range(1000):
            c = int(rng.integers(2, 8))
            probs = rng.uniform(0.0, 1.0, size=c)
            thresholds = rng.uniform(0.0, 1.0, size=c)
            rejected = probs <= thresholds
            moved = probs.copy()
            moved[rejected] = rng.uniform(0.0, 1.0, size=int(rejected.sum())) * thresholds[rejected]
            assert bh_predict(moved, thresholds) == bh_predict(probs, thresholds)

    def test_zero_thresholds_match_vanilla_on_positive_rows(self):
        rng = np.random.default_rng(9)
        for _ in range(500):
            row = rng.uniform(1e-6, 1.0, size=int(rng.integers(1, 8)))
            assert bh_predict(row, np.zeros(row.size)) == vanilla_predict(row)


class TestVanillaPredict:
    def test_argmax(self):
        assert vanilla_predict([0.1, 0.9]).verdict == 1

    def test_tie(self):
        assert vanilla_predict([0.5, 0.5]).verdict == 0

    def test_never_ood(self):
        assert vanilla_predict([0.0, 0.0]).verdict == 0

    def test_empty_row(self):
        with pytest.raises(InvalidArgumentError):
            vanilla_predict([])


class TestMspPredict:
    def test_accept(self):
        assert msp_predict([0.7, 0.3], 0.5).verdict == 0

    def test_reject(self):
        assert msp_predict([0.55, 0.45], 0.6).is_ood

    def test_zero_threshold_equals_argmax(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            row = softmax(rng.normal(size=5))
            assert msp_predict(row, 0.0).verdict == vanilla_predict(row).verdict

    def test_rejects_non_distribution(self):
        with pytest.raises(InvalidArgumentError):
            msp_predict([0.7, 0.7], 0.5)


class TestEnergy:
    def test_single_logit(self):
        assert abs(energy_score([2.5], 3.0) + 2.5) < 1e-12

    def test_uniform_closed_form(self):
        assert abs(energy_score([0.0, 0.0, 0.0, 0.0], 1.0) + math.log(4.0)) < 1e-9

    def test_shift_identity(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            z = rng.normal(scale=5.0, size=int(rng.integers(1, 10)))
            c = float(rng.normal(scale=10.0))
            assert abs(energy_score(z + c, 1.0) - (energy_score(z, 1.0) - c)) < 1e-9

    def test_predict_accepts_low_energy(self):
        assert energy_predict([3.0, 0.0], 1.0, 0.0).verdict == 0

    def test_predict_rejects_high_energy(self):
        assert energy_predict([0.0, 0.0], 1.0, -2.0).is_ood

    def test_predict_invariant_to_joint_shift(self):
        rng = np.random.default_rng(18)
        checked = 0
        for _ in range(1000):
            z = rng.normal(scale=3.0, size=int(rng.integers(1, 8)))
            t = float(rng.uniform(0.2, 5.0))
            threshold = float(rng.normal(scale=4.0))
            if abs(energy_score(z, t) - threshold) < 1e-6:
                continue
            c = float(rng.normal(scale=10.0))
            # E(z + c) = E(z) - c para qualquer T
            shifted = energy_predict(z + c, t, threshold - c)
            checked += 1
            assert shifted.verdict == energy_predict(z, t, threshold).verdict
        assert checked > 900

    def test_infinite_threshold_never_rejects(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            z = rng.normal(size=4)
            assert energy_predict(z, 1.0, math.inf).verdict == int(np.argmax(z))

    def test_invalid_temperature(self):
        with pytest.raises(InvalidArgumentError):
            energy_score([1.0, 2.0], -1.0)


class TestDetectorConfig:
    def test_bh_requires_thresholds(self):
        with pytest.raises(InvalidArgumentError):
            DetectorConfig(DetectorMethod.BH_THRESHOLD)

    def test_vanilla_rejects_extra_fields(self):
        with pytest.raises(InvalidArgumentError):
            DetectorConfig(DetectorMethod.VANILLA_ARGMAX, global_threshold=0.5)

    def test_energy_needs_temperature(self):
        with pytest.raises(InvalidArgumentError):
            DetectorConfig(DetectorMethod.ENERGY, global_threshold=-1.0)
        cfg = DetectorConfig("Energy", global_threshold=-1.0, temperature=2.0)
        assert cfg.method is DetectorMethod.ENERGY

    def test_label_defaults_to_method(self):
        assert DetectorConfig(DetectorMethod.VANILLA_ARGMAX).label == "VanillaArgmax"
        assert DetectorConfig(DetectorMethod.VANILLA_ARGMAX, name="bh_vanilla").label == "bh_vanilla"


class TestPredictAll:
    def test_matches_row_wise_bh(self):
        rng = np.random.default_rng(21)
        probs = rng.uniform(size=(50, 4))
        thresholds = rng.uniform(0, 0.8, size=4)
        cfg = DetectorConfig(DetectorMethod.BH_THRESHOLD, thresholds=thresholds)
        preds = predict_all(ScoreMatrix(probs), cfg)
        assert preds == [bh_predict(row, thresholds) for row in probs]

    def test_empty_matrix(self):
        cfg = DetectorConfig(DetectorMethod.VANILLA_ARGMAX)
        assert predict_all(ScoreMatrix(np.zeros((0, 3))), cfg) == []

    def test_energy_matches_row_wise(self):
        rng = np.random.default_rng(22)
        logits = rng.normal(scale=3.0, size=(40, 5))
        cfg = DetectorConfig(DetectorMethod.ENERGY, global_threshold=-2.0, temperature=1.5)
        verdicts, _ = predict_arrays(ScoreMatrix(logits, ScoreKind.LOGIT), cfg)
        expected = [energy_predict(row, 1.5, -2.0).verdict for row in logits]
        assert verdicts.tolist() == expected

    def test_msp_on_logits_uses_softmax(self):
        logits = np.array([[2.0, 0.0], [0.1, 0.0]])
        cfg = DetectorConfig(DetectorMethod.MAX_SOFTMAX_PROB, global_threshold=0.6)
        verdicts, _ = predict_arrays(ScoreMatrix(logits, ScoreKind.LOGIT), cfg)
        assert verdicts.tolist() == [0, OOD]

    def test_vanilla_on_logits(self):
        logits = np.array([[-1.0, 4.0, 0.0]])
        cfg = DetectorConfig(DetectorMethod.VANILLA_ARGMAX)
        pred = predict_all(ScoreMatrix(logits, ScoreKind.LOGIT), cfg)[0]
        assert pred.verdict == 1
        assert abs(pred.confidence - softmax(logits[0])[1]) < 1e-15

    def test_kind_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            predict_all(ScoreMatrix(np.zeros((2, 2)), ScoreKind.PROBABILITY),
                        DetectorConfig(DetectorMethod.ENERGY, global_threshold=0.0, temperature=1.0))
        with pytest.raises(InvalidArgumentError):
            predict_all(ScoreMatrix(np.zeros((2, 2)), ScoreKind.LOGIT),
                        DetectorConfig(DetectorMethod.BH_THRESHOLD, thresholds=[0.1, 0.1]))
