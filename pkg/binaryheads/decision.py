"""Regras de decisao: limiares por classe (BH), argmax, max-softmax e energia."""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from binaryheads.core import OOD, Prediction, ScoreKind, ScoreMatrix, ThresholdVector, softmax
from binaryheads.errors import InvalidArgumentError

# Tolerancia para aceitar uma linha como distribuicao de probabilidade (saida de softmax).
ROW_SUM_TOL = 1e-6


class DetectorMethod(str, Enum):
    BH_THRESHOLD = "BhThreshold"
    VANILLA_ARGMAX = "VanillaArgmax"
    MAX_SOFTMAX_PROB = "MaxSoftmaxProb"
    ENERGY = "Energy"


@dataclass(frozen=True)
class DetectorConfig:
    """Configuracao de um detector; campos especificos presentes apenas quando o metodo exige."""

    method: DetectorMethod
    thresholds: ThresholdVector | None = None
    global_threshold: float | None = None
    temperature: float | None = None
    name: str | None = None

    def __post_init__(self):
        method = DetectorMethod(self.method)
        object.__setattr__(self, "method", method)
        if self.thresholds is not None and not isinstance(self.thresholds, ThresholdVector):
            object.__setattr__(self, "thresholds", ThresholdVector(self.thresholds))

        wants_thresholds = method is DetectorMethod.BH_THRESHOLD
        wants_global = method in (DetectorMethod.MAX_SOFTMAX_PROB, DetectorMethod.ENERGY)
        wants_temperature = method is DetectorMethod.ENERGY
        if (self.thresholds is not None) != wants_thresholds:
            raise InvalidArgumentError(f"{method.value}: 'thresholds' {'obrigatorio' if wants_thresholds else 'nao se aplica'}")
        if (self.global_threshold is not None) != wants_global:
            raise InvalidArgumentError(f"{method.value}: 'global_threshold' {'obrigatorio' if wants_global else 'nao se aplica'}")
        if (self.temperature is not None) != wants_temperature:
            raise InvalidArgumentError(f"{method.value}: 'temperature' {'obrigatorio' if wants_temperature else 'nao se aplica'}")
        if wants_global and np.isnan(self.global_threshold):
            raise InvalidArgumentError("global_threshold NaN")
        if wants_temperature and not self.temperature > 0:
            raise InvalidArgumentError(f"Temperatura precisa ser positiva, recebido {self.temperature}")

    @property
    def label(self) -> str:
        return self.name or self.method.value

    def accepts_kind(self, kind: ScoreKind) -> bool:
        if self.method is DetectorMethod.BH_THRESHOLD:
            return kind is ScoreKind.PROBABILITY
        if self.method is DetectorMethod.ENERGY:
            return kind is ScoreKind.LOGIT
        return True


# ============================================================================
# VERSOES VETORIZADAS (N x C)
# ============================================================================

def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise InvalidArgumentError("Linha de scores vazia")
    return arr


def bh_verdicts(probs: np.ndarray, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Regra BH: H(p - t) * p com H(0) = 0; argmax com empate no menor indice; OOD se confianca = 0."""
    probs = _as_matrix(probs)
    thresholds = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if thresholds.shape[0] != probs.shape[1]:
        raise InvalidArgumentError(
            f"Numero de limiares ({thresholds.shape[0]}) diferente de C ({probs.shape[1]})"
        )
    gated = np.where(probs > thresholds[None, :], probs, 0.0)
    idx = np.argmax(gated, axis=1)
    conf = gated[np.arange(gated.shape[0]), idx]
    return np.where(conf > 0, idx, OOD).astype(np.int64), conf


def argmax_verdicts(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = _as_matrix(scores)
    idx = np.argmax(scores, axis=1).astype(np.int64)
    return idx, scores[np.arange(scores.shape[0]), idx]


def _check_distribution(probs: np.ndarray):
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise InvalidArgumentError("Probabilidades fora de [0, 1]")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise InvalidArgumentError("Linha nao soma 1: max-softmax exige saida de softmax")


def msp_verdicts(probs: np.ndarray, global_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    probs = _as_matrix(probs)
    _check_distribution(probs)
    idx, conf = argmax_verdicts(probs)
    return np.where(conf < global_threshold, OOD, idx).astype(np.int64), conf


def energy_scores(logits: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise InvalidArgumentError(f"Temperatura precisa ser positiva, recebido {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("Logits nao finitos")
    return -temperature * logsumexp(z / temperature, axis=-1)


def energy_verdicts(logits: np.ndarray, temperature: float, energy_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    logits = _as_matrix(logits)
    energy = energy_scores(logits, temperature)
    idx, _ = argmax_verdicts(logits)
    conf = softmax(logits, temperature)[np.arange(logits.shape[0]), idx]
    return np.where(energy > energy_threshold, OOD, idx).astype(np.int64), conf


# ============================================================================
# REGRAS POR AMOSTRA
# ============================================================================

def _single(verdicts: np.ndarray, conf: np.ndarray) -> Prediction:
    return Prediction(int(verdicts[0]), float(conf[0]))


def bh_predict(probs_row, thresholds) -> Prediction:
    t = thresholds.thresholds if isinstance(thresholds, ThresholdVector) else thresholds
    return _single(*bh_verdicts(probs_row, t))


def vanilla_predict(probs_row) -> Prediction:
    """Argmax puro: nunca emite OOD."""
    if np.asarray(probs_row).size == 0:
        raise InvalidArgumentError("Linha vazia")
    return _single(*argmax_verdicts(probs_row))


def msp_predict(probs_row, global_threshold: float) -> Prediction:
    return _single(*msp_verdicts(probs_row, global_threshold))


def energy_score(logits_row, temperature: float) -> float:
    return float(energy_scores(np.asarray(logits_row, dtype=np.float64).reshape(-1), temperature))


def energy_predict(logits_row, temperature: float, energy_threshold: float) -> Prediction:
    return _single(*energy_verdicts(logits_row, temperature, energy_threshold))


# ============================================================================
# MATRIZ INTEIRA
# ============================================================================

def predict_arrays(scores: ScoreMatrix, config: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Aplica a regra configurada linha a linha; devolve (vereditos, confiancas)."""
    if not config.accepts_kind(scores.kind):
        raise InvalidArgumentError(
            f"Detector {config.label} ({config.method.value}) nao aceita scores do tipo {scores.kind.value}"
        )
    values = scores.values
    if scores.n_samples == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)

    method = config.method
    if method is DetectorMethod.BH_THRESHOLD:
        config.thresholds.check_probability_range()
        return bh_verdicts(values, config.thresholds.thresholds)
    if method is DetectorMethod.VANILLA_ARGMAX:
        idx, conf = argmax_verdicts(values)
        if scores.kind is ScoreKind.LOGIT:
            conf = softmax(values)[np.arange(values.shape[0]), idx]
        return idx, conf
    if method is DetectorMethod.MAX_SOFTMAX_PROB:
        if scores.kind is ScoreKind.LOGIT:
            values = softmax(values)
        return msp_verdicts(values, config.global_threshold)
    return energy_verdicts(values, config.temperature, config.global_threshold)


def predict_all(scores: ScoreMatrix, config: DetectorConfig) -> list[Prediction]:
    verdicts, conf = predict_arrays(scores, config)
    return [Prediction(int(v), float(c)) for v, c in zip(verdicts, conf)]
