"""Rede multi-tarefa em numpy: tronco MLP compartilhado + C cabecas sigmoid (BH) ou uma cabeca softmax.

Gradientes analiticos, SGD com amostragem ponderada e reducao da taxa de aprendizado em plato.
"""

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp
from scipy.special import softmax as _softmax

from binaryheads.core import LabelVector, OodConvention, ScoreKind, ScoreMatrix, balanced_accuracy_from_counts
from binaryheads.errors import InvalidArgumentError, NumericError, ParseError
from binaryheads.fileio import atomic_write_bytes

PROB_EPS = 1e-12
PLATEAU_MIN_DELTA = 1e-6
LR_FLOOR = 1e-6

PARAMS_MAGIC = b"BHNN"
PARAMS_VERSION = 1


class HeadKind(str, Enum):
    BINARY_HEADS = "BinaryHeads"
    SOFTMAX = "Softmax"


_HEAD_CODES = {HeadKind.BINARY_HEADS: 0, HeadKind.SOFTMAX: 1}


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    n_classes: int
    head_kind: HeadKind = HeadKind.BINARY_HEADS
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "head_kind", HeadKind(self.head_kind))
        if self.activation != "relu":
            raise InvalidArgumentError("Unica ativacao suportada: relu")
        dims = (self.input_dim, *self.hidden_dims, self.n_classes)
        if any(d < 1 for d in dims):
            raise InvalidArgumentError(f"Dimensoes precisam ser >= 1: {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.n_classes)
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 64
    max_epochs: int = 40
    plateau_patience: int = 3
    lr_decay_factor: float = 0.5
    weighted_sampling: bool = True
    seed: int = 0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidArgumentError("learning_rate precisa ser >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidArgumentError("batch_size e max_epochs precisam ser >= 1")
        if self.plateau_patience < 1:
            raise InvalidArgumentError("plateau_patience precisa ser >= 1")
        if not 0 < self.lr_decay_factor < 1:
            raise InvalidArgumentError("lr_decay_factor precisa estar em (0, 1)")
        if self.noise_std < 0:
            raise InvalidArgumentError("noise_std precisa ser >= 0")


@dataclass
class ModelParams:
    """Pesos e vieses por camada; a ultima camada e a das cabecas (coluna i = cabeca i)."""

    config: MlpConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        shapes = self.config.layer_dims
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise InvalidArgumentError("Numero de camadas nao bate com MlpConfig")
        for (fan_in, fan_out), w, b in zip(shapes, self.weights, self.biases):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise InvalidArgumentError(f"Shape inesperado: W{w.shape} b{b.shape}, esperado ({fan_in}, {fan_out})")

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def tensors(self) -> list[np.ndarray]:
        """Tensores na ordem de declaracao: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    val_loss: float
    train_balanced_accuracy: float
    val_balanced_accuracy: float


# ============================================================================
# PARAMETROS
# ============================================================================

def init_params(mlp: MlpConfig, seed: int = 0) -> ModelParams:
    """Glorot uniforme em +-sqrt(6 / (fan_in + fan_out)), vieses zero."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in mlp.layer_dims:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(mlp, weights, biases)


def zero_params(mlp: MlpConfig) -> ModelParams:
    return ModelParams(
        mlp,
        [np.zeros(shape) for shape in mlp.layer_dims],
        [np.zeros(fan_out) for _, fan_out in mlp.layer_dims],
    )


def save_params(path: Path, params: ModelParams):
    """Formato binario: magic, versao, config (uint32 LE), tensores float64 LE na ordem de declaracao."""
    cfg = params.config
    header = PARAMS_MAGIC + struct.pack(
        f"<IIIII{len(cfg.hidden_dims)}I",
        PARAMS_VERSION, cfg.input_dim, cfg.n_classes, _HEAD_CODES[cfg.head_kind],
        len(cfg.hidden_dims), *cfg.hidden_dims,
    )
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tensors())
    atomic_write_bytes(path, header + body)


def load_params(path: Path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != PARAMS_MAGIC:
        raise ParseError("magic invalido (esperado BHNN)", path=str(path))
    try:
        version, input_dim, n_classes, head_code, n_hidden = struct.unpack_from("<IIIII", data, 4)
        if version != PARAMS_VERSION:
            raise ParseError(f"versao {version} nao suportada", path=str(path))
        hidden = struct.unpack_from(f"<{n_hidden}I", data, 24)
    except struct.error as e:
        raise ParseError(f"cabecalho truncado: {e}", path=str(path)) from None
    head_kind = {code: kind for kind, code in _HEAD_CODES.items()}.get(head_code)
    if head_kind is None:
        raise ParseError(f"head_kind desconhecido: {head_code}", path=str(path))
    cfg = MlpConfig(input_dim, hidden, n_classes, head_kind)

    offset = 24 + 4 * n_hidden
    expected = offset + 8 * sum(fi * fo + fo for fi, fo in cfg.layer_dims)
    if len(data) != expected:
        raise ParseError(f"tamanho {len(data)} bytes, esperado {expected}", path=str(path))
    weights, biases = [], []
    for fan_in, fan_out in cfg.layer_dims:
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=offset).reshape(fan_in, fan_out)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return ModelParams(cfg, weights, biases)


# ============================================================================
# FORWARD / PERDAS / GRADIENTES
# ============================================================================

def _as_batch(params: ModelParams, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.config.input_dim:
        raise InvalidArgumentError(f"Features com shape {x.shape}, esperado (N, {params.config.input_dim})")
    return x


def _forward_cache(params: ModelParams, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Pre-ativacoes e ativacoes por camada; acts[0] = entrada, pres[-1] = logits das cabecas."""
    acts, pres = [x], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w + b
        pres.append(z)
        if i < last:
            acts.append(np.maximum(z, 0.0))
    return pres, acts


def forward(params: ModelParams, features) -> tuple[np.ndarray, np.ndarray]:
    """(ativacoes do tronco, saidas das cabecas): probabilidades sigmoid (BH) ou logits (softmax)."""
    single = np.asarray(features).ndim == 1
    x = _as_batch(params, features)
    pres, acts = _forward_cache(params, x)
    logits = pres[-1]
    out = expit(logits) if params.config.head_kind is HeadKind.BINARY_HEADS else logits
    trunk = acts[-1]
    if single:
        return trunk[0], out[0]
    return trunk, out


def _check_class(true_class: int, n_classes: int):
    if not 0 <= int(true_class) < n_classes:
        raise InvalidArgumentError(f"Classe {true_class} fora de 0..{n_classes - 1}")


def bh_loss(head_probs, true_class: int) -> float:
    """Soma das entropias cruzadas binarias contra o alvo one-hot."""
    p = np.clip(np.asarray(head_probs, dtype=np.float64).reshape(-1), PROB_EPS, 1.0 - PROB_EPS)
    _check_class(true_class, p.shape[0])
    target = np.zeros_like(p)
    target[int(true_class)] = 1.0
    return float(-np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p)))


def softmax_loss(logits, true_class: int) -> float:
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    _check_class(true_class, z.shape[0])
    return float(logsumexp(z) - z[int(true_class)])


def _check_targets(params: ModelParams, x: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise InvalidArgumentError(f"{x.shape[0]} amostras vs {y.shape[0]} rotulos")
    if y.size and (y.min() < 0 or y.max() >= params.config.n_classes):
        raise InvalidArgumentError("Rotulos de treino precisam estar em 0..C-1 (sem OOD)")
    return y


def batch_loss(params: ModelParams, features, y) -> float:
    """Perda media do lote."""
    x = _as_batch(params, features)
    y = _check_targets(params, x, y)
    if x.shape[0] == 0:
        raise InvalidArgumentError("Lote vazio")
    logits = _forward_cache(params, x)[0][-1]
    rows = np.arange(x.shape[0])
    if params.config.head_kind is HeadKind.BINARY_HEADS:
        p = np.clip(expit(logits), PROB_EPS, 1.0 - PROB_EPS)
        target = np.zeros_like(p)
        target[rows, y] = 1.0
        per_sample = -np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p), axis=1)
    else:
        per_sample = logsumexp(logits, axis=1) - logits[rows, y]
    return float(np.mean(per_sample))


def gradients(params: ModelParams, features, y) -> ModelParams:
    """Gradiente analitico da perda media; todas as cabecas somam no gradiente do tronco."""
    x = _as_batch(params, features)
    y = _check_targets(params, x, y)
    n = x.shape[0]
    if n == 0:
        raise InvalidArgumentError("Lote vazio")
    pres, acts = _forward_cache(params, x)
    logits = pres[-1]
    target = np.zeros_like(logits)
    target[np.arange(n), y] = 1.0
    if params.config.head_kind is HeadKind.BINARY_HEADS:
        dz = (expit(logits) - target) / n
    else:
        dz = (_softmax(logits, axis=1) - target) / n

    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        grad_w[i] = acts[i].T @ dz
        grad_b[i] = dz.sum(axis=0)
        if i > 0:
            dz = (dz @ params.weights[i].T) * (pres[i - 1] > 0)
    return ModelParams(params.config, grad_w, grad_b)


def sgd_step(params: ModelParams, grads: ModelParams, learning_rate: float) -> ModelParams:
    return ModelParams(
        params.config,
        [w - learning_rate * g for w, g in zip(params.weights, grads.weights)],
        [b - learning_rate * g for b, g in zip(params.biases, grads.biases)],
    )


# ============================================================================
# TREINO
# ============================================================================

def weighted_sample_indices(labels, n_draws: int, rng: np.random.Generator, weighted: bool = True) -> np.ndarray:
    """Indices de uma epoca; com `weighted`, cada classe e sorteada com probabilidade ~ 1 / contagem."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = y.shape[0]
    if not weighted:
        return rng.permutation(n) if n_draws == n else rng.integers(0, n, size=n_draws)
    counts = np.bincount(y)
    w = 1.0 / counts[y]
    return rng.choice(n, size=n_draws, replace=True, p=w / w.sum())


def _in_dist_balanced_accuracy(outputs: np.ndarray, y: np.ndarray, n_classes: int) -> float:
    totals = np.bincount(y, minlength=n_classes)
    if np.any(totals == 0):
        return float("nan")
    pred = np.argmax(outputs, axis=1)
    correct = np.bincount(y[pred == y], minlength=n_classes)
    return balanced_accuracy_from_counts(
        np.append(correct, 0), np.append(totals, 0), OodConvention.IN_DIST_ONLY
    )


def _evaluate_split(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    loss = batch_loss(params, x, y)
    if not np.isfinite(loss):
        raise NumericError(f"Perda nao finita ({loss})")
    outputs = _forward_cache(params, x)[0][-1]
    return loss, _in_dist_balanced_accuracy(outputs, y, params.config.n_classes)


def train(
    features,
    labels: LabelVector,
    mlp: MlpConfig,
    cfg: TrainConfig,
    val_features=None,
    val_labels: LabelVector | None = None,
    init: ModelParams | None = None,
    verbose: bool = False,
) -> tuple[ModelParams, list[EpochRecord]]:
    """SGD em mini-lotes; devolve os parametros de menor perda de validacao e o historico por epoca.

    Sem conjunto de validacao, a perda de treino faz o papel de monitor do plato.
    """
    x = np.asarray(features, dtype=np.float64)
    if len(labels) == 0:
        raise InvalidArgumentError("Conjunto de treino vazio")
    if labels.is_ood.any():
        raise InvalidArgumentError("Treino com rotulos OOD: a classe OOD fica fora do treino")
    if labels.n_classes != mlp.n_classes:
        raise InvalidArgumentError(f"{labels.n_classes} classes nos rotulos vs {mlp.n_classes} cabecas")
    y = labels.labels.copy()

    xv = yv = None
    if val_features is not None and val_labels is not None:
        keep = ~val_labels.is_ood
        xv = np.asarray(val_features, dtype=np.float64)[keep]
        yv = val_labels.labels[keep]
        if yv.size == 0:
            xv = yv = None

    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(mlp, cfg.seed)
    if params.config != mlp:
        raise InvalidArgumentError("Parametros iniciais com config diferente")

    lr = cfg.learning_rate
    best_loss, best_params, bad_epochs = None, params.copy(), 0
    history: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        order = weighted_sample_indices(y, y.shape[0], rng, cfg.weighted_sampling)
        for start in range(0, order.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx]
            if cfg.noise_std > 0:
                xb = xb + rng.normal(0.0, cfg.noise_std, size=xb.shape)
            params = sgd_step(params, gradients(params, xb, y[idx]), lr)
        if not params.is_finite():
            raise NumericError(f"Parametros nao finitos na epoca {epoch}")

        train_loss, train_bacc = _evaluate_split(params, x, y)
        if xv is not None:
            val_loss, val_bacc = _evaluate_split(params, xv, yv)
        else:
            val_loss, val_bacc = float("nan"), float("nan")
        history.append(EpochRecord(epoch, lr, train_loss, val_loss, train_bacc, val_bacc))
        if verbose:
            print(f"[train] epoca {epoch}/{cfg.max_epochs} lr={lr:.2e} "
                  f"loss={train_loss:.4f} val_loss={val_loss:.4f} val_bacc={val_bacc:.4f}", flush=True)

        monitored = val_loss if xv is not None else train_loss
        if best_loss is None or monitored <= best_loss - PLATEAU_MIN_DELTA:
            best_loss, best_params, bad_epochs = monitored, params.copy(), 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.plateau_patience:
                lr = max(lr * cfg.lr_decay_factor, min(lr, LR_FLOOR))
                bad_epochs = 0
                if verbose:
                    print(f"[train] plato: lr -> {lr:.2e}", flush=True)

    return best_params, history


def score_dataset(params: ModelParams, features) -> ScoreMatrix:
    """Forward linha a linha: probabilidades (BH) ou logits (softmax)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"Features precisam ser 2-D, recebido shape {x.shape}")
    x = _as_batch(params, x)
    logits = _forward_cache(params, x)[0][-1]
    if params.config.head_kind is HeadKind.BINARY_HEADS:
        return ScoreMatrix(expit(logits), ScoreKind.PROBABILITY)
    return ScoreMatrix(logits, ScoreKind.LOGIT)
