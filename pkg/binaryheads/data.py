"""Dados sinteticos desbalanceados, divisao por grupo (lesao) e leitura/escrita de CSVs de scores e features."""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from binaryheads.core import OOD, LabelVector, ScoreKind, ScoreMatrix
from binaryheads.errors import InvalidArgumentError, ParseError
from binaryheads.fileio import fmt_real, write_csv

# Classes no padrao das proporcoes de treino da base dermatoscopica; AK fica de fora (OOD).
DEFAULT_CLASS_NAMES = ("NV", "MEL", "BCC", "BKL", "SCC", "DF", "VASC", "AK")
DEFAULT_PROPORTIONS = (0.50, 0.15, 0.09, 0.08, 0.02, 0.01, 0.01, 0.14)

KIND_PREFIX = "kind:"
CLASSES_PREFIX = "classes:"


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes_total: int = 8
    class_proportions: tuple[float, ...] = DEFAULT_PROPORTIONS
    total_samples: int = 20000
    feature_dim: int = 16
    cluster_separation: float = 3.0
    cluster_scale: float = 1.0
    ood_class_index: int | None = 7
    groups_per_class: int = 40
    ood_mean_radius: float = 0.0
    ood_scale_factor: float = 0.25
    seed: int = 0
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        object.__setattr__(self, "class_proportions", tuple(float(p) for p in self.class_proportions))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.n_classes_total < 1:
            raise InvalidArgumentError("n_classes_total precisa ser >= 1")
        if len(self.class_proportions) != self.n_classes_total or len(self.class_names) != self.n_classes_total:
            raise InvalidArgumentError("class_proportions e class_names precisam ter n_classes_total entradas")
        if any(p <= 0 for p in self.class_proportions):
            raise InvalidArgumentError("Proporcoes precisam ser positivas")
        if abs(math.fsum(self.class_proportions) - 1.0) > 1e-9:
            raise InvalidArgumentError(f"Proporcoes somam {math.fsum(self.class_proportions)}, esperado 1")
        if self.ood_class_index is not None and not 0 <= self.ood_class_index < self.n_classes_total:
            raise InvalidArgumentError(f"ood_class_index {self.ood_class_index} fora de 0..{self.n_classes_total - 1}")
        if self.ood_class_index is not None and self.n_classes_total < 2:
            raise InvalidArgumentError("Com classe OOD separada, sobram zero classes de treino")
        if self.total_samples < 1 or self.feature_dim < 1 or self.groups_per_class < 1:
            raise InvalidArgumentError("total_samples, feature_dim e groups_per_class precisam ser >= 1")
        if self.cluster_separation < 0 or self.cluster_scale <= 0:
            raise InvalidArgumentError("cluster_separation >= 0 e cluster_scale > 0")
        if self.ood_mean_radius < 0 or self.ood_scale_factor <= 0:
            raise InvalidArgumentError("ood_mean_radius >= 0 e ood_scale_factor > 0")

    @property
    def in_dist_names(self) -> tuple[str, ...]:
        return tuple(n for k, n in enumerate(self.class_names) if k != self.ood_class_index)


@dataclass(frozen=True)
class SyntheticData:
    features: np.ndarray
    labels: LabelVector
    groups: np.ndarray


@dataclass(frozen=True)
class Split:
    features: np.ndarray
    labels: LabelVector
    groups: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def in_distribution(self) -> "Split":
        keep = ~self.labels.is_ood
        return Split(self.features[keep], self.labels.take(np.flatnonzero(keep)), self.groups[keep])


@dataclass(frozen=True)
class DatasetBundle:
    train: Split
    val: Split
    test: Split

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.train.labels.class_names


# ============================================================================
# GERACAO
# ============================================================================

def largest_remainder_counts(proportions, total: int) -> np.ndarray:
    """Contagens inteiras que somam `total`; sobras vao para as maiores fracoes (empate: menor indice)."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    remainder = int(total - counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def class_directions(rng: np.random.Generator, n_classes: int, feature_dim: int) -> np.ndarray:
    """Direcoes unitarias sorteadas (uma linha por classe); ortonormais quando n_classes <= feature_dim."""
    if n_classes <= feature_dim:
        q, r = np.linalg.qr(rng.normal(size=(feature_dim, n_classes)))
        # sinal da diagonal de R fixado: base uniforme e nao dependente da LAPACK
        return (q * np.where(np.diag(r) < 0, -1.0, 1.0)).T
    directions = rng.normal(size=(n_classes, feature_dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    return directions / np.where(norms > 0, norms, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Clusters gaussianos isotropicos, um por classe, com grupos (lesoes) sorteados dentro da classe.

    A classe `ood_class_index` vira o rotulo OOD; as demais mantem a ordem de `class_names`.
    A classe separada fica a `ood_mean_radius * cluster_separation` da origem, com escala
    `ood_scale_factor * cluster_scale`: no padrao (raio 0) ela cai entre as classes conhecidas,
    como uma lesao do mesmo dominio que nao se parece com nenhuma delas. Raio 1 e fator 1
    tratam a classe separada igual as demais.
    """
    counts = largest_remainder_counts(spec.class_proportions, spec.total_samples)
    if np.any(counts == 0):
        empty = [spec.class_names[k] for k in np.flatnonzero(counts == 0)]
        raise InvalidArgumentError(f"Arredondamento deixou classes vazias: {empty}")

    rng = np.random.default_rng(spec.seed)
    means = class_directions(rng, spec.n_classes_total, spec.feature_dim) * spec.cluster_separation
    scales = np.full(spec.n_classes_total, spec.cluster_scale)
    if spec.ood_class_index is not None:
        means[spec.ood_class_index] *= spec.ood_mean_radius
        scales[spec.ood_class_index] *= spec.ood_scale_factor

    in_dist_index = {}
    for k in range(spec.n_classes_total):
        if k != spec.ood_class_index:
            in_dist_index[k] = len(in_dist_index)

    feats, labels, groups = [], [], []
    for k, n_k in enumerate(counts):
        feats.append(means[k] + scales[k] * rng.normal(size=(n_k, spec.feature_dim)))
        labels.append(np.full(n_k, in_dist_index.get(k, OOD), dtype=np.int64))
        groups.append(k * spec.groups_per_class + rng.integers(0, spec.groups_per_class, size=n_k))

    order = rng.permutation(spec.total_samples)
    return SyntheticData(
        features=np.concatenate(feats)[order],
        labels=LabelVector(np.concatenate(labels)[order], spec.in_dist_names),
        groups=np.concatenate(groups)[order].astype(np.int64),
    )


# ============================================================================
# DIVISAO POR GRUPO
# ============================================================================

def split_dataset(features, labels: LabelVector, groups, train_frac: float = 0.8, seed: int = 0) -> DatasetBundle:
    """Divide por id de grupo, estratificado por classe; grupos OOD vao metade para validacao, metade para teste.

    Um grupo com qualquer amostra OOD conta como grupo OOD. Sobra impar favorece a validacao.
    """
    if not 0 < train_frac < 1:
        raise InvalidArgumentError(f"train_frac precisa estar em (0, 1), recebido {train_frac}")
    x = np.asarray(features, dtype=np.float64)
    g = np.asarray(groups, dtype=np.int64).reshape(-1)
    if not (x.shape[0] == g.shape[0] == len(labels)):
        raise InvalidArgumentError("features, labels e groups com tamanhos diferentes")

    uniq, first = np.unique(g, return_index=True)
    ood_groups = set(np.unique(g[labels.is_ood]).tolist())
    stratum = {}
    for gid, idx in zip(uniq.tolist(), first.tolist()):
        stratum[gid] = OOD if gid in ood_groups else int(labels.labels[idx])

    rng = np.random.default_rng(seed)
    train_g, val_g, test_g = set(), set(), set()
    for cls in list(range(labels.n_classes)) + [OOD]:
        members = np.array(sorted(gid for gid, s in stratum.items() if s == cls), dtype=np.int64)
        if cls != OOD and members.size < 3:
            raise InvalidArgumentError(
                f"Classe {labels.class_names[cls]} com {members.size} grupos (minimo 3 para treino/validacao/teste)"
            )
        members = rng.permutation(members)
        if cls == OOD:
            n_train = 0
        else:
            n_train = min(max(1, int(math.floor(train_frac * members.size + 0.5))), members.size - 2)
        rest = members.size - n_train
        n_val = (rest + 1) // 2
        train_g.update(members[:n_train].tolist())
        val_g.update(members[n_train:n_train + n_val].tolist())
        test_g.update(members[n_train + n_val:].tolist())

    def _subset(chosen: set) -> Split:
        idx = np.flatnonzero(np.isin(g, np.array(sorted(chosen), dtype=np.int64)))
        return Split(x[idx], labels.take(idx), g[idx])

    return DatasetBundle(train=_subset(train_g), val=_subset(val_g), test=_subset(test_g))


# ============================================================================
# CSV
# ============================================================================

def read_rows(path: Path) -> list[tuple[int, str]]:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError("UTF-8 invalido", line=raw[:e.start].count(b"\n") + 1, path=str(path)) from None
    return [(num, line) for num, line in enumerate(text.split("\n"), start=1) if line != ""]


def _parse_float(cell: str, line: int, path: Path) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"celula nao numerica: {cell!r}", line=line, path=str(path)) from None
    if not math.isfinite(value):
        raise ParseError(f"valor nao finito: {cell!r}", line=line, path=str(path))
    return value


def split_header(rows: list[tuple[int, str]], path: Path) -> tuple[dict[str, str], int, list[str], list[tuple[int, str]]]:
    comments: dict[str, str] = {}
    i = 0
    while i < len(rows) and rows[i][1].startswith("#"):
        body = rows[i][1][1:].strip()
        key, _, value = body.partition(":")
        comments[key.strip().lower() + ":"] = value.strip()
        i += 1
    if i >= len(rows):
        raise ParseError("cabecalho ausente", line=rows[-1][0] if rows else 1, path=str(path))
    header_line, header_text = rows[i]
    header = next(csv.reader([header_text]))
    return comments, header_line, header, rows[i + 1:]


def save_scores_csv(path: Path, scores: ScoreMatrix, labels: LabelVector, ids=None):
    """Formato: '# kind: Probability|Logit', cabecalho 'id,label,<classes...>', uma linha por amostra."""
    if scores.n_samples != len(labels) or scores.n_classes != labels.n_classes:
        raise InvalidArgumentError("scores e labels incompativeis")
    ids = [f"s{i}" for i in range(scores.n_samples)] if ids is None else [str(i) for i in ids]
    rows = (
        [ids[i], labels.name_of(int(labels.labels[i]))] + [fmt_real(v) for v in scores.values[i]]
        for i in range(scores.n_samples)
    )
    write_csv(path, ["id", "label", *labels.class_names], rows,
              comments=[f"{KIND_PREFIX} {scores.kind.value}"])


def load_scores_csv(path: Path) -> tuple[ScoreMatrix, LabelVector, list[str]]:
    path = Path(path)
    rows = read_rows(path)
    comments, header_line, header, data = split_header(rows, path)
    if len(header) < 3 or header[0] != "id" or header[1] != "label":
        raise ParseError("cabecalho precisa ser 'id,label,<classes...>'", line=header_line, path=str(path))
    class_names = tuple(header[2:])
    try:
        kind = ScoreKind(comments.get(KIND_PREFIX, ScoreKind.PROBABILITY.value))
    except ValueError:
        raise ParseError(f"kind desconhecido: {comments.get(KIND_PREFIX)!r}", line=1, path=str(path)) from None
    try:
        proto = LabelVector(np.zeros(0, dtype=np.int64), class_names)
    except InvalidArgumentError as e:
        raise ParseError(str(e), line=header_line, path=str(path)) from None

    ids, labels, values = [], [], []
    for line_num, text in data:
        cells = next(csv.reader([text]))
        if len(cells) != len(header):
            raise ParseError(f"{len(cells)} colunas, esperado {len(header)}", line=line_num, path=str(path))
        try:
            labels.append(proto.index_of(cells[1]))
        except InvalidArgumentError:
            raise ParseError(f"rotulo desconhecido: {cells[1]!r}", line=line_num, path=str(path)) from None
        ids.append(cells[0])
        values.append([_parse_float(c, line_num, path) for c in cells[2:]])

    matrix = np.array(values, dtype=np.float64).reshape(len(values), len(class_names))
    try:
        scores = ScoreMatrix(matrix, kind)
    except InvalidArgumentError as e:
        raise ParseError(str(e), path=str(path)) from None
    return scores, LabelVector(np.array(labels, dtype=np.int64), class_names), ids


def save_features_csv(path: Path, split: Split, ids=None):
    """Formato: '# classes: A;B;...', cabecalho 'id,group,label,f0..f{d-1}'."""
    n, d = split.features.shape
    ids = [f"s{i}" for i in range(n)] if ids is None else [str(i) for i in ids]
    labels = split.labels
    rows = (
        [ids[i], str(int(split.groups[i])), labels.name_of(int(labels.labels[i]))]
        + [fmt_real(v) for v in split.features[i]]
        for i in range(n)
    )
    write_csv(path, ["id", "group", "label", *[f"f{j}" for j in range(d)]], rows,
              comments=[f"{CLASSES_PREFIX} {';'.join(labels.class_names)}"])


def load_features_csv(path: Path) -> tuple[Split, list[str]]:
    path = Path(path)
    rows = read_rows(path)
    comments, header_line, header, data = split_header(rows, path)
    if len(header) < 4 or header[:3] != ["id", "group", "label"]:
        raise ParseError("cabecalho precisa ser 'id,group,label,f0..'", line=header_line, path=str(path))
    if CLASSES_PREFIX not in comments:
        raise ParseError("linha '# classes: ...' ausente", line=1, path=str(path))
    class_names = tuple(n for n in comments[CLASSES_PREFIX].split(";") if n)
    try:
        proto = LabelVector(np.zeros(0, dtype=np.int64), class_names)
    except InvalidArgumentError as e:
        raise ParseError(str(e), line=1, path=str(path)) from None

    d = len(header) - 3
    ids, groups, labels, feats = [], [], [], []
    for line_num, text in data:
        cells = next(csv.reader([text]))
        if len(cells) != len(header):
            raise ParseError(f"{len(cells)} colunas, esperado {len(header)}", line=line_num, path=str(path))
        try:
            groups.append(int(cells[1]))
        except ValueError:
            raise ParseError(f"grupo nao inteiro: {cells[1]!r}", line=line_num, path=str(path)) from None
        try:
            labels.append(proto.index_of(cells[2]))
        except InvalidArgumentError:
            raise ParseError(f"rotulo desconhecido: {cells[2]!r}", line=line_num, path=str(path)) from None
        ids.append(cells[0])
        feats.append([_parse_float(c, line_num, path) for c in cells[3:]])

    split = Split(
        np.array(feats, dtype=np.float64).reshape(len(feats), d),
        LabelVector(np.array(labels, dtype=np.int64), class_names),
        np.array(groups, dtype=np.int64),
    )
    return split, ids
