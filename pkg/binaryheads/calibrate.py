"""Calibracao de limiares: descida coordenada por classe (BH), limiar global (MSP/energia) e temperatura."""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from binaryheads.core import (
    OOD,
    LabelVector,
    OodConvention,
    ScoreKind,
    ScoreMatrix,
    ThresholdVector,
    balanced_accuracy,
    balanced_accuracy_from_counts,
    confusion_matrix,
    verdict_array,
)
from binaryheads.decision import argmax_verdicts, bh_verdicts
from binaryheads.errors import InvalidArgumentError

DEFAULT_MAX_ROUNDS = 20
DEFAULT_T_MIN = 0.05
DEFAULT_T_MAX = 100.0
TEMPERATURE_XATOL = 1e-4

# Candidatos avaliados por bloco (limita a matriz N x K em memoria).
_CHUNK = 1024


class RejectDirection(str, Enum):
    REJECT_BELOW = "RejectBelow"
    REJECT_ABOVE = "RejectAbove"


@dataclass(frozen=True)
class CalibrationStep:
    class_idx: int
    threshold: float
    objective: float


@dataclass
class CalibrationTrace:
    steps: list[CalibrationStep] = field(default_factory=list)
    rounds: int = 0
    converged: bool = False
    initial_objective: float = 0.0
    first_pass_thresholds: ThresholdVector | None = None
    first_pass_objective: float | None = None

    @property
    def objective(self) -> float:
        return self.steps[-1].objective if self.steps else self.initial_objective


# ============================================================================
# UTILITARIOS
# ============================================================================

def _midpoints(u: np.ndarray) -> np.ndarray:
    lo, hi = u[:-1], u[1:]
    mids = lo + (hi - lo) / 2
    # floats adjacentes: o ponto medio arredonda para hi, usar lo preserva a particao
    return np.where(mids >= hi, lo, mids)


def _true_index(labels: LabelVector) -> np.ndarray:
    return np.where(labels.is_ood, labels.n_classes, labels.labels)


def _objectives(correct: np.ndarray, true_idx: np.ndarray, totals: np.ndarray, convention: OodConvention) -> list[float]:
    """Acuracia balanceada de cada coluna de `correct` (N x K, acerto por amostra e candidato)."""
    n_rows = totals.shape[0]
    onehot = np.zeros((true_idx.shape[0], n_rows))
    onehot[np.arange(true_idx.shape[0]), true_idx] = 1.0
    counts = np.rint(onehot.T @ correct.astype(np.float64)).astype(np.int64)
    return [balanced_accuracy_from_counts(counts[:, k], totals, convention) for k in range(counts.shape[1])]


def _sweep(accept_fn, candidates: np.ndarray, correct_if_accept, correct_if_reject, true_idx, totals, convention) -> list[float]:
    objectives: list[float] = []
    for start in range(0, candidates.shape[0], _CHUNK):
        block = candidates[start:start + _CHUNK]
        accept = accept_fn(block)
        correct = np.where(accept, correct_if_accept[:, None], correct_if_reject[:, None])
        objectives.extend(_objectives(correct, true_idx, totals, convention))
    return objectives


def _check_pair(scores: ScoreMatrix, labels: LabelVector):
    if scores.n_samples != len(labels):
        raise InvalidArgumentError(f"Tamanhos diferentes: {scores.n_samples} linhas vs {len(labels)} rotulos")
    if scores.n_classes != labels.n_classes:
        raise InvalidArgumentError(f"C diferente: {scores.n_classes} colunas vs {labels.n_classes} classes")


def bh_objective(scores: ScoreMatrix, labels: LabelVector, thresholds: ThresholdVector,
                 convention: OodConvention = OodConvention.ASSUME_ZERO_WHEN_ABSENT) -> float:
    """Acuracia balanceada da regra BH com os limiares dados."""
    verdicts, _ = bh_verdicts(scores.values, thresholds.thresholds)
    return balanced_accuracy(confusion_matrix(verdicts, labels), convention)


# ============================================================================
# LIMIARES POR CLASSE (BH)
# ============================================================================

def candidate_thresholds(class_scores) -> np.ndarray:
    """0.0, pontos medios entre scores distintos consecutivos e 1.0 (estritamente crescente).

    Cada particao aceita/rejeita alcancavel com limiar estrito aparece exatamente uma vez.
    """
    vals = np.asarray(class_scores, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise InvalidArgumentError("Lista de scores vazia")
    if not np.all(np.isfinite(vals)) or vals.min() < 0.0 or vals.max() > 1.0:
        raise InvalidArgumentError("Scores de candidatos precisam estar em [0, 1]")
    u = np.unique(vals)
    mids = _midpoints(u)
    if u[0] == 0.0:
        # limiar 0.0 ja separa o score 0 dos demais
        mids = mids[1:]
    return np.concatenate([[0.0], mids, [1.0]])


def optimize_threshold_1d(
    scores: ScoreMatrix,
    labels: LabelVector,
    thresholds: ThresholdVector,
    class_idx: int,
    convention: OodConvention = OodConvention.ASSUME_ZERO_WHEN_ABSENT,
) -> tuple[float, float]:
    """Melhor limiar da classe `class_idx` com os demais fixos; empate fica com o menor candidato."""
    if scores.kind is not ScoreKind.PROBABILITY:
        raise InvalidArgumentError("Calibracao BH exige scores de probabilidade")
    _check_pair(scores, labels)
    c = int(class_idx)
    n_classes = scores.n_classes
    if not 0 <= c < n_classes:
        raise InvalidArgumentError(f"Classe {class_idx} fora de 0..{n_classes - 1}")
    if len(thresholds) != n_classes:
        raise InvalidArgumentError(f"Numero de limiares ({len(thresholds)}) diferente de C ({n_classes})")
    if scores.n_samples == 0:
        raise InvalidArgumentError("Conjunto de calibracao vazio")

    probs = scores.values
    gated = np.where(probs > thresholds.thresholds[None, :], probs, 0.0)
    gated[:, c] = 0.0
    rows = np.arange(probs.shape[0])
    other_idx = np.argmax(gated, axis=1)
    other_max = gated[rows, other_idx]
    p = probs[:, c]

    # aceito pela cabeca c: vence se maior, ou se empatado e de indice menor
    wins = (p > other_max) | ((p == other_max) & (c < other_idx))
    true_idx = _true_index(labels)
    fallback = np.where(other_max > 0, other_idx, n_classes)
    correct_if_reject = true_idx == fallback
    correct_if_accept = np.where(wins, true_idx == c, correct_if_reject)

    totals = np.bincount(true_idx, minlength=n_classes + 1)
    candidates = candidate_thresholds(p)
    objectives = _sweep(lambda block: p[:, None] > block[None, :], candidates,
                        correct_if_accept, correct_if_reject, true_idx, totals, convention)
    best = int(np.argmax(objectives))
    return float(candidates[best]), objectives[best]


def conservative_thresholds(scores: ScoreMatrix, labels: LabelVector) -> ThresholdVector:
    """Maiores limiares que ainda aceitam todo acerto do argmax.

    Por classe: o maior candidato abaixo da menor probabilidade entre as amostras que o
    argmax classifica certo (0.0 se nenhuma). Nenhum acerto vira erro, entao a acuracia
    balanceada parte de >= argmax; ponto de partida da calibracao sem OOD, onde so o que
    o argmax errava pode virar OOD.
    """
    if scores.kind is not ScoreKind.PROBABILITY:
        raise InvalidArgumentError("Calibracao BH exige scores de probabilidade")
    _check_pair(scores, labels)
    if scores.n_samples == 0:
        raise InvalidArgumentError("Conjunto de calibracao vazio")
    preds, _ = argmax_verdicts(scores.values)
    correct = (preds == labels.labels) & ~labels.is_ood
    values = np.zeros(scores.n_classes)
    for c in range(scores.n_classes):
        hits = scores.values[correct & (labels.labels == c), c]
        if hits.size == 0:
            continue
        candidates = candidate_thresholds(scores.values[:, c])
        below = candidates[candidates < hits.min()]
        values[c] = below.max() if below.size else 0.0
    return ThresholdVector(values)


def coordinate_descent(
    scores: ScoreMatrix,
    labels: LabelVector,
    init: ThresholdVector | None = None,
    seed: int = 0,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    convention: OodConvention = OodConvention.ASSUME_ZERO_WHEN_ABSENT,
    verbose: bool = False,
) -> tuple[ThresholdVector, CalibrationTrace]:
    """Descida coordenada aleatorizada sobre os limiares, ate uma rodada sem melhora ou max_rounds.

    Cada rodada visita as C classes numa permutacao sorteada pela seed; um novo limiar
    so e aceito se o objetivo melhora estritamente.
    """
    if max_rounds < 1:
        raise InvalidArgumentError("max_rounds precisa ser >= 1")
    _check_pair(scores, labels)
    current = init if init is not None else ThresholdVector.zeros(scores.n_classes)
    if len(current) != scores.n_classes:
        raise InvalidArgumentError(f"Numero de limiares ({len(current)}) diferente de C ({scores.n_classes})")

    objective = bh_objective(scores, labels, current, convention)
    trace = CalibrationTrace(initial_objective=objective)
    rng = np.random.default_rng(seed)

    for round_num in range(1, max_rounds + 1):
        improved = False
        for c in rng.permutation(scores.n_classes):
            value, candidate_obj = optimize_threshold_1d(scores, labels, current, int(c), convention)
            if candidate_obj > objective:
                current = current.with_value(int(c), value)
                objective = candidate_obj
                improved = True
            trace.steps.append(CalibrationStep(int(c), float(current.thresholds[c]), objective))
        trace.rounds = round_num
        if trace.first_pass_thresholds is None:
            trace.first_pass_thresholds = current
            trace.first_pass_objective = objective
        if verbose:
            print(f"[calibrate] rodada {round_num}: objetivo={objective:.6f}", flush=True)
        if not improved:
            trace.converged = True
            break

    return current, trace


# ============================================================================
# LIMIAR GLOBAL (MSP / ENERGIA)
# ============================================================================

def calibrate_global_threshold(
    values,
    preds_if_accepted,
    labels: LabelVector,
    direction: RejectDirection,
    convention: OodConvention = OodConvention.ASSUME_ZERO_WHEN_ABSENT,
) -> tuple[float, float]:
    """Limiar escalar que maximiza a acuracia balanceada; em empate, o que rejeita menos.

    RejectBelow: OOD se valor < limiar (probabilidade maxima).
    RejectAbove: OOD se valor > limiar (energia).
    """
    direction = RejectDirection(direction)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    verdicts = verdict_array(preds_if_accepted)
    if not (v.shape[0] == verdicts.shape[0] == len(labels)):
        raise InvalidArgumentError(
            f"Tamanhos diferentes: {v.shape[0]} valores, {verdicts.shape[0]} predicoes, {len(labels)} rotulos"
        )
    if v.size == 0:
        raise InvalidArgumentError("Conjunto de calibracao vazio")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("Valores nao finitos")

    n_classes = labels.n_classes
    true_idx = _true_index(labels)
    pred_idx = np.where(verdicts == OOD, n_classes, verdicts)
    totals = np.bincount(true_idx, minlength=n_classes + 1)

    u = np.unique(v)
    mids = _midpoints(u)
    if direction is RejectDirection.REJECT_BELOW:
        candidates = np.concatenate([[u[0]], mids, [np.inf]])
        accept_fn = lambda block: ~(v[:, None] < block[None, :])
    else:
        candidates = np.concatenate([[u[-1]], mids[::-1], [-np.inf]])
        accept_fn = lambda block: ~(v[:, None] > block[None, :])

    objectives = _sweep(accept_fn, candidates, true_idx == pred_idx, true_idx == n_classes,
                        true_idx, totals, convention)
    best = int(np.argmax(objectives))
    return float(candidates[best]), objectives[best]


# ============================================================================
# TEMPERATURA
# ============================================================================

def negative_log_likelihood(logits, labels, temperature: float) -> float:
    z = logits.values if isinstance(logits, ScoreMatrix) else np.asarray(logits, dtype=np.float64)
    y = labels.labels if isinstance(labels, LabelVector) else np.asarray(labels, dtype=np.int64)
    scaled = z / temperature
    return float(np.mean(logsumexp(scaled, axis=1) - scaled[np.arange(z.shape[0]), y]))


def fit_temperature(
    logits: ScoreMatrix,
    labels: LabelVector,
    t_min: float = DEFAULT_T_MIN,
    t_max: float = DEFAULT_T_MAX,
) -> float:
    """Temperatura em [t_min, t_max] que minimiza a NLL media do softmax(logits / T).

    Busca limitada (secao aurea com interpolacao parabolica) com tolerancia 1e-4; os
    extremos e T=1 tambem sao avaliados, entao o resultado nunca e pior que eles.
    """
    if logits.kind is not ScoreKind.LOGIT:
        raise InvalidArgumentError("fit_temperature exige scores do tipo Logit")
    _check_pair(logits, labels)
    if labels.is_ood.any():
        raise InvalidArgumentError("fit_temperature nao aceita rotulos OOD")
    if len(labels) == 0:
        raise InvalidArgumentError("Conjunto vazio")
    if not 0 < t_min < t_max:
        raise InvalidArgumentError(f"Intervalo de temperatura invalido: [{t_min}, {t_max}]")

    nll = lambda t: negative_log_likelihood(logits, labels, t)
    res = minimize_scalar(nll, bounds=(t_min, t_max), method="bounded",
                          options={"xatol": TEMPERATURE_XATOL})
    candidates = [t_min, t_max]
    if t_min <= 1.0 <= t_max:
        candidates.append(1.0)
    candidates.append(float(np.clip(res.x, t_min, t_max)))
    return float(min(candidates, key=nll))
