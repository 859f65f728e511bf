"""Tipos de dominio compartilhados e motor de metricas (acuracia, acuracia balanceada, matriz de confusao)."""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import softmax as _scipy_softmax

from binaryheads.errors import InvalidArgumentError

# Sentinela do veredito/rotulo OOD. Nunca e usado como indice de coluna.
OOD = -1
OOD_NAME = "OOD"


class ScoreKind(str, Enum):
    PROBABILITY = "Probability"
    LOGIT = "Logit"


class OodConvention(str, Enum):
    ASSUME_ZERO_WHEN_ABSENT = "AssumeZeroWhenAbsent"
    IN_DIST_ONLY = "InDistOnly"


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


# ============================================================================
# TIPOS
# ============================================================================

@dataclass(frozen=True)
class ScoreMatrix:
    """Matriz N x C de scores por amostra e por classe (probabilidades sigmoid ou logits)."""

    values: np.ndarray
    kind: ScoreKind = ScoreKind.PROBABILITY

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidArgumentError(f"ScoreMatrix precisa ser 2-D, recebido shape {arr.shape}")
        if arr.shape[1] < 1:
            raise InvalidArgumentError("ScoreMatrix sem colunas (n_classes = 0)")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("ScoreMatrix contem valores nao finitos")
        kind = ScoreKind(self.kind)
        if kind is ScoreKind.PROBABILITY and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise InvalidArgumentError("ScoreMatrix de probabilidades fora de [0, 1]")
        object.__setattr__(self, "values", _frozen_array(arr, np.float64))
        object.__setattr__(self, "kind", kind)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    def take(self, indices) -> "ScoreMatrix":
        return ScoreMatrix(self.values[np.asarray(indices, dtype=np.int64)], self.kind)


@dataclass(frozen=True)
class LabelVector:
    """Rotulos por amostra: indice de classe em 0..C-1 ou OOD."""

    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.class_names)
        if len(names) < 1:
            raise InvalidArgumentError("LabelVector precisa de pelo menos uma classe")
        if len(set(names)) != len(names) or OOD_NAME in names:
            raise InvalidArgumentError(f"Nomes de classe invalidos: {names}")
        arr = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if arr.size and (arr.min() < OOD or arr.max() >= len(names)):
            raise InvalidArgumentError("Rotulo fora de {0..C-1} U {OOD}")
        object.__setattr__(self, "labels", _frozen_array(arr, np.int64))
        object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def is_ood(self) -> np.ndarray:
        return self.labels == OOD

    def name_of(self, label: int) -> str:
        return OOD_NAME if label == OOD else self.class_names[label]

    def index_of(self, name: str) -> int:
        if name == OOD_NAME:
            return OOD
        try:
            return self.class_names.index(name)
        except ValueError:
            raise InvalidArgumentError(f"Rotulo desconhecido: {name!r}") from None

    def take(self, indices) -> "LabelVector":
        return LabelVector(self.labels[np.asarray(indices, dtype=np.int64)], self.class_names)


@dataclass(frozen=True)
class ThresholdVector:
    thresholds: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.thresholds, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("Limiares nao finitos")
        object.__setattr__(self, "thresholds", _frozen_array(arr, np.float64))

    def __len__(self) -> int:
        return self.thresholds.shape[0]

    @staticmethod
    def zeros(n_classes: int) -> "ThresholdVector":
        return ThresholdVector(np.zeros(n_classes))

    def with_value(self, class_idx: int, value: float) -> "ThresholdVector":
        arr = self.thresholds.copy()
        arr[class_idx] = value
        return ThresholdVector(arr)

    def check_probability_range(self):
        if self.thresholds.size and (self.thresholds.min() < 0.0 or self.thresholds.max() > 1.0):
            raise InvalidArgumentError("Limiares precisam estar em [0, 1] para scores de probabilidade")


@dataclass(frozen=True)
class Prediction:
    verdict: int
    confidence: float

    @property
    def is_ood(self) -> bool:
        return self.verdict == OOD


@dataclass(frozen=True)
class ConfusionMatrix:
    """Contagens (C+1) x (C+1): linha = classe verdadeira, coluna = prevista, indice C = OOD."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 2:
            raise InvalidArgumentError(f"Matriz de confusao com shape invalido: {arr.shape}")
        if arr.size and arr.min() < 0:
            raise InvalidArgumentError("Matriz de confusao com contagem negativa")
        object.__setattr__(self, "counts", _frozen_array(arr, np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0] - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    balanced_accuracy: float
    per_class_recall: np.ndarray
    confusion: ConfusionMatrix
    ood_count: int
    convention: OodConvention = field(default=OodConvention.ASSUME_ZERO_WHEN_ABSENT)


# ============================================================================
# OPERACOES
# ============================================================================

def softmax(logits_row, temperature: float = 1.0) -> np.ndarray:
    """Softmax com temperatura (linha ou matriz, ultimo eixo), estavel por subtracao do maximo."""
    if not temperature > 0:
        raise InvalidArgumentError(f"Temperatura precisa ser positiva, recebido {temperature}")
    z = np.asarray(logits_row, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("Logits nao finitos")
    return _scipy_softmax(z / temperature, axis=-1)


def verdict_array(preds) -> np.ndarray:
    """Converte lista de Prediction (ou array de vereditos) em array int64."""
    if isinstance(preds, np.ndarray):
        return preds.astype(np.int64, copy=False).reshape(-1)
    return np.fromiter((p.verdict for p in preds), dtype=np.int64, count=len(preds))


def confusion_matrix(preds, labels: LabelVector) -> ConfusionMatrix:
    verdicts = verdict_array(preds)
    if verdicts.shape[0] != len(labels):
        raise InvalidArgumentError(
            f"Tamanhos diferentes: {verdicts.shape[0]} predicoes vs {len(labels)} rotulos"
        )
    c = labels.n_classes
    if verdicts.size and (verdicts.min() < OOD or verdicts.max() >= c):
        raise InvalidArgumentError("Veredito fora de {0..C-1} U {OOD}")
    true_idx = np.where(labels.labels == OOD, c, labels.labels)
    pred_idx = np.where(verdicts == OOD, c, verdicts)
    flat = np.bincount(true_idx * (c + 1) + pred_idx, minlength=(c + 1) ** 2)
    return ConfusionMatrix(flat.reshape(c + 1, c + 1))


def accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise InvalidArgumentError("Acuracia de matriz vazia")
    return int(np.trace(cm.counts)) / total


def balanced_accuracy_from_counts(correct, totals, convention: OodConvention) -> float:
    """Media das sensibilidades por classe a partir de acertos e totais por linha (C+1 entradas).

    Soma com math.fsum (arredondamento correto), entao o resultado nao depende da
    ordem nem do caminho de calculo.
    """
    correct = [int(x) for x in correct]
    totals = [int(x) for x in totals]
    c = len(totals) - 1
    recalls = []
    for i in range(c):
        if totals[i] == 0:
            raise InvalidArgumentError(f"Classe {i} sem amostras verdadeiras: sensibilidade indefinida")
        recalls.append(correct[i] / totals[i])
    if OodConvention(convention) is OodConvention.IN_DIST_ONLY:
        return math.fsum(recalls) / c
    recalls.append(correct[c] / totals[c] if totals[c] > 0 else 0.0)
    return math.fsum(recalls) / (c + 1)


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    """Sensibilidade por linha; termo OOD = 0 quando nao ha OOD verdadeiro."""
    diag = np.diag(cm.counts)
    rows = cm.counts.sum(axis=1)
    out = np.zeros(cm.n_classes + 1)
    nonzero = rows > 0
    out[nonzero] = diag[nonzero] / rows[nonzero]
    return out


def balanced_accuracy(
    cm: ConfusionMatrix,
    ood_convention: OodConvention = OodConvention.ASSUME_ZERO_WHEN_ABSENT,
) -> float:
    return balanced_accuracy_from_counts(np.diag(cm.counts), cm.counts.sum(axis=1), ood_convention)


def ood_recall(cm: ConfusionMatrix) -> float | None:
    row = int(cm.counts[-1].sum())
    return int(cm.counts[-1, -1]) / row if row else None


def ood_precision(cm: ConfusionMatrix) -> float | None:
    """Precisao do veredito OOD; None quando nenhum OOD foi emitido."""
    col = int(cm.counts[:, -1].sum())
    return int(cm.counts[-1, -1]) / col if col else None


def report_from_confusion(
    cm: ConfusionMatrix,
    convention: OodConvention = OodConvention.ASSUME_ZERO_WHEN_ABSENT,
) -> EvalReport:
    """Relatorio completo recalculado so a partir das contagens."""
    return EvalReport(
        accuracy=accuracy(cm),
        balanced_accuracy=balanced_accuracy(cm, convention),
        per_class_recall=per_class_recall(cm),
        confusion=cm,
        ood_count=int(cm.counts[-1].sum()),
        convention=OodConvention(convention),
    )


def evaluate(
    preds,
    labels: LabelVector,
    convention: OodConvention = OodConvention.ASSUME_ZERO_WHEN_ABSENT,
) -> EvalReport:
    return report_from_confusion(confusion_matrix(preds, labels), convention)
