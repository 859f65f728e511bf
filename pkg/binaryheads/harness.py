"""Orquestracao do experimento: varredura de quantidade de OOD, comparacao de metodos e relatorios.

Etapas (cada uma le os artefatos da anterior em disco, entao podem rodar isoladas pela CLI):
  gen-data  -> data/{train,val,test}.csv
  train     -> model/{bh,softmax}.bin, model/history_*.csv, scores/{bh,softmax}_{val,test}.csv
  calibrate -> calibration/thresholds.csv, calibration/global.csv, calibration/trace_*.csv
  eval      -> eval/summary.csv, eval/confusion_<metodo>.csv, eval/ood_false_positives_<metodo>.csv,
               eval/score_ranges_<fonte>.csv
  sweep     -> sweep/sweep.csv
  report    -> report/compare.csv, report/accuracy.svg, report/balanced_accuracy.svg
"""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from binaryheads.calibrate import (
    CalibrationTrace, RejectDirection, calibrate_global_threshold, conservative_thresholds, coordinate_descent,
    fit_temperature,
)
from binaryheads.config import ExperimentConfig
from binaryheads.core import (
    OOD, OOD_NAME, ConfusionMatrix, EvalReport, LabelVector, OodConvention, ScoreKind, ScoreMatrix,
    ThresholdVector, accuracy, balanced_accuracy, evaluate, ood_precision, ood_recall, report_from_confusion,
    softmax,
)
from binaryheads.data import (
    generate_synthetic, load_features_csv, load_scores_csv, read_rows, save_features_csv, save_scores_csv,
    split_dataset, split_header, CLASSES_PREFIX,
)
from binaryheads.decision import DetectorConfig, DetectorMethod, argmax_verdicts, energy_scores, predict_arrays
from binaryheads.errors import DataError, InvalidArgumentError, ParseError
from binaryheads.fileio import atomic_write_text, fmt_real, write_csv
from binaryheads.nnet import EpochRecord, HeadKind, MlpConfig, save_params, score_dataset, train
from binaryheads.stages import STAGE_IDS, run_stage

SOURCE_BH = "bh"
SOURCE_SOFTMAX = "softmax"
SOURCES = (SOURCE_BH, SOURCE_SOFTMAX)

DATA_DIR = "data"
MODEL_DIR = "model"
SCORES_DIR = "scores"
CALIBRATION_DIR = "calibration"
EVAL_DIR = "eval"
SWEEP_DIR = "sweep"
REPORT_DIR = "report"

CHART_WIDTH = 800
CHART_HEIGHT = 500
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


# ============================================================================
# TIPOS
# ============================================================================

@dataclass(frozen=True)
class NamedDetector:
    """Detector com nome de relatorio e a fonte dos scores ('bh' = probabilidades, 'softmax' = logits)."""

    name: str
    config: DetectorConfig
    source: str = SOURCE_BH


@dataclass(frozen=True)
class SweepConfig:
    ood_counts: tuple[int, ...]
    repetitions: int = 1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "ood_counts", tuple(int(k) for k in self.ood_counts))
        if not self.ood_counts:
            raise InvalidArgumentError("ood_counts vazio")
        if min(self.ood_counts) < 0:
            raise InvalidArgumentError("ood_counts com valor negativo")
        if self.repetitions < 1:
            raise InvalidArgumentError("repetitions precisa ser >= 1")
        if self.workers < 1:
            raise InvalidArgumentError("workers precisa ser >= 1")


@dataclass(frozen=True)
class SweepRow:
    method: str
    ood_count: int
    repetition: int
    report: EvalReport


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    methods: tuple[str, ...]
    ood_counts: tuple[int, ...]
    repetitions: int

    def reports(self, method: str, ood_count: int) -> list[EvalReport]:
        return [r.report for r in self.rows if r.method == method and r.ood_count == ood_count]

    def mean(self, method: str, ood_count: int) -> "CompareRow":
        """Media sobre as repeticoes, recalculada das matrizes de confusao."""
        cms = [rep.confusion for rep in self.reports(method, ood_count)]
        if not cms:
            raise InvalidArgumentError(f"Sem linhas para {method} com k={ood_count}")
        convention = self.reports(method, ood_count)[0].convention
        return CompareRow(
            ood_count=ood_count,
            method=method,
            accuracy=_mean([accuracy(cm) for cm in cms]),
            balanced_accuracy=_mean([balanced_accuracy(cm, convention) for cm in cms]),
            ood_recall=_mean_defined([ood_recall(cm) for cm in cms]),
            ood_precision=_mean_defined([ood_precision(cm) for cm in cms]),
        )


@dataclass(frozen=True)
class CompareRow:
    ood_count: int
    method: str
    accuracy: float
    balanced_accuracy: float
    ood_recall: float | None
    ood_precision: float | None


@dataclass(frozen=True)
class ScoreRange:
    class_name: str
    count: int
    minimum: float | None
    q1: float | None
    median: float | None
    q3: float | None
    maximum: float | None


@dataclass(frozen=True)
class OodFalsePositive:
    class_name: str
    n_true: int
    n_rejected: int
    share: float | None


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values)


def _mean_defined(values: list[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return _mean(defined) if defined else None


# ============================================================================
# VARREDURA DE OOD
# ============================================================================

def default_ood_counts(n_available: int, n_points: int = 9) -> tuple[int, ...]:
    """0 e mais n_points-1 contagens igualmente espacadas ate todo o OOD disponivel."""
    if n_available < 0 or n_points < 1:
        raise InvalidArgumentError("n_available >= 0 e n_points >= 1")
    if n_available == 0 or n_points == 1:
        return (0,)
    m = n_points - 1
    counts = [0] + [(2 * n_available * i + m) // (2 * m) for i in range(1, n_points)]
    return tuple(dict.fromkeys(counts))


def _lookup(scores, source: str) -> ScoreMatrix:
    if isinstance(scores, ScoreMatrix):
        return scores
    try:
        return scores[source]
    except KeyError:
        raise InvalidArgumentError(f"Sem scores para a fonte '{source}'") from None


def ood_sweep(
    in_dist_scores,
    in_dist_labels: LabelVector,
    ood_scores,
    detectors: list[NamedDetector],
    cfg: SweepConfig,
    verbose: bool = False,
) -> SweepResult:
    """Avalia cada detector com k amostras OOD somadas ao teste in-distribution fixo.

    Scores podem ser uma ScoreMatrix ou um dict fonte -> ScoreMatrix. Os subconjuntos OOD
    sao aninhados: prefixos de um embaralhamento por repeticao, sorteado pela seed.
    """
    if not detectors:
        raise InvalidArgumentError("Nenhum detector na varredura")
    names = [d.name for d in detectors]
    if len(set(names)) != len(names):
        raise InvalidArgumentError(f"Nomes de detector repetidos: {names}")
    if in_dist_labels.is_ood.any():
        raise InvalidArgumentError("Conjunto in-distribution contem rotulos OOD")

    n_ood = None
    in_verdicts, ood_verdicts = [], []
    for det in detectors:
        s_in = _lookup(in_dist_scores, det.source)
        s_ood = _lookup(ood_scores, det.source)
        if s_in.n_samples != len(in_dist_labels):
            raise InvalidArgumentError(
                f"{det.name}: {s_in.n_samples} linhas de score vs {len(in_dist_labels)} rotulos"
            )
        if s_in.n_classes != in_dist_labels.n_classes or s_ood.n_classes != in_dist_labels.n_classes:
            raise InvalidArgumentError(f"{det.name}: numero de classes incompativel")
        if n_ood is None:
            n_ood = s_ood.n_samples
        elif s_ood.n_samples != n_ood:
            raise InvalidArgumentError("Fontes com quantidades diferentes de amostras OOD")
        in_verdicts.append(predict_arrays(s_in, det.config)[0])
        ood_verdicts.append(predict_arrays(s_ood, det.config)[0])

    too_many = [k for k in cfg.ood_counts if k > n_ood]
    if too_many:
        raise InvalidArgumentError(f"ood_counts {too_many} excedem as {n_ood} amostras OOD disponiveis")

    shuffles = [np.random.default_rng([cfg.seed, r]).permutation(n_ood) for r in range(cfg.repetitions)]
    in_true = in_dist_labels.labels

    def evaluate_point(point: tuple[int, int]) -> list[EvalReport]:
        k, r = point
        subset = shuffles[r][:k]
        labels = LabelVector(np.concatenate([in_true, np.full(k, OOD, dtype=np.int64)]), in_dist_labels.class_names)
        return [
            evaluate(np.concatenate([v_in, v_ood[subset]]), labels, OodConvention.ASSUME_ZERO_WHEN_ABSENT)
            for v_in, v_ood in zip(in_verdicts, ood_verdicts)
        ]

    points = [(k, r) for k in cfg.ood_counts for r in range(cfg.repetitions)]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        results = dict(zip(points, pool.map(evaluate_point, points)))

    rows = []
    for d, name in enumerate(names):
        for k, r in points:
            rows.append(SweepRow(name, k, r, results[(k, r)][d]))
    result = SweepResult(tuple(rows), tuple(names), cfg.ood_counts, cfg.repetitions)
    if verbose:
        for k in cfg.ood_counts:
            summary = " ".join(f"{name}={result.mean(name, k).balanced_accuracy:.4f}" for name in names)
            print(f"[sweep] k={k}: bacc {summary}", flush=True)
    return result


def compare_report(sweep: SweepResult) -> list[CompareRow]:
    """Por k e por metodo: acuracia, acuracia balanceada, recall e precisao de OOD."""
    if not sweep.methods:
        raise InvalidArgumentError("Varredura sem metodos")
    return [sweep.mean(method, k) for k in sweep.ood_counts for method in sweep.methods]


# ============================================================================
# DIAGNOSTICOS
# ============================================================================

def class_score_ranges(scores: ScoreMatrix, labels: LabelVector) -> list[ScoreRange]:
    """Distribuicao do score que a cabeca de cada classe da as suas amostras verdadeiras."""
    if scores.n_samples != len(labels) or scores.n_classes != labels.n_classes:
        raise InvalidArgumentError("scores e labels incompativeis")
    values = softmax(scores.values) if scores.kind is ScoreKind.LOGIT else scores.values
    out = []
    for c, name in enumerate(labels.class_names):
        own = values[labels.labels == c, c]
        if own.size == 0:
            out.append(ScoreRange(name, 0, None, None, None, None, None))
            continue
        q1, median, q3 = np.quantile(own, [0.25, 0.5, 0.75])
        out.append(ScoreRange(name, int(own.size), float(own.min()), float(q1), float(median), float(q3),
                              float(own.max())))
    return out


def ood_false_positives(cm: ConfusionMatrix, class_names) -> list[OodFalsePositive]:
    """Por classe in-distribution: quantas amostras verdadeiras foram rejeitadas como OOD."""
    if len(class_names) != cm.n_classes:
        raise InvalidArgumentError("class_names incompativel com a matriz de confusao")
    out = []
    for c, name in enumerate(class_names):
        n_true = int(cm.counts[c].sum())
        n_rejected = int(cm.counts[c, -1])
        out.append(OodFalsePositive(name, n_true, n_rejected, n_rejected / n_true if n_true else None))
    return out


# ============================================================================
# CSV DE RELATORIO
# ============================================================================

def _fmt_optional(x: float | None) -> str:
    return "" if x is None or not math.isfinite(x) else fmt_real(x)


def write_compare_csv(path: Path, rows: list[CompareRow]):
    write_csv(path, ["ood_count", "method", "accuracy", "balanced_accuracy", "ood_recall", "ood_precision"], (
        [str(r.ood_count), r.method, fmt_real(r.accuracy), fmt_real(r.balanced_accuracy),
         _fmt_optional(r.ood_recall), _fmt_optional(r.ood_precision)]
        for r in rows
    ))


def write_confusion_csv(path: Path, cm: ConfusionMatrix, class_names):
    names = [*class_names, OOD_NAME]
    write_csv(path, ["true\\pred", *names], (
        [names[i], *[str(int(v)) for v in cm.counts[i]]] for i in range(len(names))
    ))


def write_sweep_csv(path: Path, sweep: SweepResult, class_names):
    """Uma linha por (metodo, k, repeticao); a coluna 'confusion' guarda as contagens linha a linha."""
    recall_cols = [f"recall_{n}" for n in (*class_names, OOD_NAME)]
    header = ["method", "ood_count", "repetition", "accuracy", "balanced_accuracy",
              "ood_recall", "ood_precision", *recall_cols, "confusion"]
    rows = (
        [row.method, str(row.ood_count), str(row.repetition),
         fmt_real(row.report.accuracy), fmt_real(row.report.balanced_accuracy),
         _fmt_optional(ood_recall(row.report.confusion)), _fmt_optional(ood_precision(row.report.confusion)),
         *[fmt_real(v) for v in row.report.per_class_recall],
         ";".join(str(int(v)) for v in row.report.confusion.counts.reshape(-1))]
        for row in sweep.rows
    )
    write_csv(path, header, rows, comments=[f"{CLASSES_PREFIX} {';'.join(class_names)}"])


def load_sweep_csv(path: Path) -> tuple[SweepResult, tuple[str, ...]]:
    """Reconstroi a varredura a partir das matrizes de confusao gravadas."""
    path = Path(path)
    comments, header_line, header, data = split_header(read_rows(path), path)
    if CLASSES_PREFIX not in comments or header[:3] != ["method", "ood_count", "repetition"] or header[-1] != "confusion":
        raise ParseError("nao e um CSV de varredura", line=header_line, path=str(path))
    class_names = tuple(n for n in comments[CLASSES_PREFIX].split(";") if n)
    size = len(class_names) + 1

    rows, methods, counts, repetitions = [], [], [], 0
    for line_num, text in data:
        cells = next(csv.reader([text]))
        if len(cells) != len(header):
            raise ParseError(f"{len(cells)} colunas, esperado {len(header)}", line=line_num, path=str(path))
        try:
            k, r = int(cells[1]), int(cells[2])
            flat = [int(v) for v in cells[-1].split(";")]
        except ValueError:
            raise ParseError("inteiro invalido", line=line_num, path=str(path)) from None
        if len(flat) != size * size:
            raise ParseError(f"matriz de confusao com {len(flat)} celulas, esperado {size * size}",
                             line=line_num, path=str(path))
        cm = ConfusionMatrix(np.array(flat, dtype=np.int64).reshape(size, size))
        rows.append(SweepRow(cells[0], k, r, report_from_confusion(cm)))
        if cells[0] not in methods:
            methods.append(cells[0])
        if k not in counts:
            counts.append(k)
        repetitions = max(repetitions, r + 1)
    return SweepResult(tuple(rows), tuple(methods), tuple(counts), repetitions), class_names


def write_score_ranges_csv(path: Path, ranges: list[ScoreRange]):
    write_csv(path, ["class", "count", "min", "q1", "median", "q3", "max"], (
        [r.class_name, str(r.count), *[_fmt_optional(v) for v in (r.minimum, r.q1, r.median, r.q3, r.maximum)]]
        for r in ranges
    ))


def write_ood_false_positives_csv(path: Path, rows: list[OodFalsePositive]):
    write_csv(path, ["class", "n_true", "n_rejected_as_ood", "share"], (
        [r.class_name, str(r.n_true), str(r.n_rejected), _fmt_optional(r.share)] for r in rows
    ))


def write_thresholds_csv(path: Path, class_names, columns: dict[str, ThresholdVector]):
    names = list(columns)
    write_csv(path, ["class", *names], (
        [name, *[fmt_real(columns[n].thresholds[c]) for n in names]] for c, name in enumerate(class_names)
    ))


def load_thresholds_csv(path: Path) -> tuple[tuple[str, ...], dict[str, ThresholdVector]]:
    path = Path(path)
    _, header_line, header, data = split_header(read_rows(path), path)
    if len(header) < 2 or header[0] != "class":
        raise ParseError("cabecalho precisa ser 'class,<detectores...>'", line=header_line, path=str(path))
    class_names, values = [], []
    for line_num, text in data:
        cells = next(csv.reader([text]))
        if len(cells) != len(header):
            raise ParseError(f"{len(cells)} colunas, esperado {len(header)}", line=line_num, path=str(path))
        class_names.append(cells[0])
        values.append([_parse_real(c, line_num, path) for c in cells[1:]])
    arr = np.array(values, dtype=np.float64).reshape(len(values), len(header) - 1)
    return tuple(class_names), {name: ThresholdVector(arr[:, j]) for j, name in enumerate(header[1:])}


def _parse_real(cell: str, line: int, path: Path) -> float:
    """Aceita inf/-inf (limiares globais extremos), nunca NaN."""
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"celula nao numerica: {cell!r}", line=line, path=str(path)) from None
    if math.isnan(value):
        raise ParseError("valor NaN", line=line, path=str(path))
    return value


def write_trace_csv(path: Path, trace: CalibrationTrace, n_classes: int):
    rows = [["0", "0", "", "", fmt_real(trace.initial_objective)]]
    rows += [
        [str(i), str((i - 1) // n_classes + 1), str(s.class_idx), fmt_real(s.threshold), fmt_real(s.objective)]
        for i, s in enumerate(trace.steps, start=1)
    ]
    write_csv(path, ["step", "round", "class", "threshold", "objective"], rows,
              comments=[f"rounds: {trace.rounds}", f"converged: {str(trace.converged).lower()}"])


def write_history_csv(path: Path, history: list[EpochRecord]):
    write_csv(path, ["epoch", "learning_rate", "train_loss", "val_loss",
                     "train_balanced_accuracy", "val_balanced_accuracy"], (
        [str(h.epoch), fmt_real(h.learning_rate), _fmt_optional(h.train_loss), _fmt_optional(h.val_loss),
         _fmt_optional(h.train_balanced_accuracy), _fmt_optional(h.val_balanced_accuracy)]
        for h in history
    ))


# ============================================================================
# GRAFICOS SVG
# ============================================================================

def render_line_chart_svg(title: str, x_values, series: dict[str, list[float]], y_label: str) -> str:
    """Grafico de linhas minimo: viewBox 800x500, eixo y em [0, 1], uma polyline por metodo."""
    left, right, top, bottom = 70, CHART_WIDTH - 190, 50, CHART_HEIGHT - 60
    xs = [float(x) for x in x_values]
    if not xs:
        raise InvalidArgumentError("Grafico sem pontos")
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1.0

    def px(x: float) -> float:
        return left + (x - x0) / span * (right - left)

    def py(y: float) -> float:
        return bottom - min(max(y, 0.0), 1.0) * (bottom - top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {CHART_WIDTH} {CHART_HEIGHT}" '
        f'width="{CHART_WIDTH}" height="{CHART_HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{CHART_WIDTH}" height="{CHART_HEIGHT}" fill="white"/>',
        f'<text x="{CHART_WIDTH / 2:.0f}" y="28" text-anchor="middle" font-size="16">{escape(title)}</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(tick)
        parts.append(f'<line x1="{left}" y1="{y:.2f}" x2="{right}" y2="{y:.2f}" stroke="#dddddd"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{tick:.2f}</text>')
    step = max(1, math.ceil(len(xs) / 10))
    for x in xs[::step]:
        parts.append(f'<text x="{px(x):.2f}" y="{bottom + 18}" text-anchor="middle">{x:g}</text>')
    parts.append(f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>')
    parts.append(f'<text x="{(left + right) / 2:.0f}" y="{CHART_HEIGHT - 20}" text-anchor="middle">'
                 f'amostras OOD no teste</text>')
    parts.append(f'<text x="18" y="{(top + bottom) / 2:.0f}" text-anchor="middle" '
                 f'transform="rotate(-90 18 {(top + bottom) / 2:.0f})">{escape(y_label)}</text>')

    for i, (name, ys) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(y))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{points}"/>')
        ly = top + 10 + 20 * i
        parts.append(f'<line x1="{right + 20}" y1="{ly}" x2="{right + 45}" y2="{ly}" stroke="{color}" stroke-width="3"/>')
        parts.append(f'<text x="{right + 52}" y="{ly + 4}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_line_chart_svg(path: Path, title: str, x_values, series: dict[str, list[float]], y_label: str):
    atomic_write_text(path, render_line_chart_svg(title, x_values, series, y_label))


# ============================================================================
# DETECTORES DO EXPERIMENTO
# ============================================================================

def build_detectors(
    calibrated: ThresholdVector,
    calibrated_no_ood: ThresholdVector,
    msp_threshold: float,
    energy_threshold: float,
    temperature: float,
) -> list[NamedDetector]:
    def named(name: str, source: str, **kwargs) -> NamedDetector:
        return NamedDetector(name, DetectorConfig(name=name, **kwargs), source)

    return [
        named("bh_calibrated", SOURCE_BH, method=DetectorMethod.BH_THRESHOLD, thresholds=calibrated),
        named("bh_calibrated_no_ood", SOURCE_BH, method=DetectorMethod.BH_THRESHOLD, thresholds=calibrated_no_ood),
        named("bh_vanilla", SOURCE_BH, method=DetectorMethod.VANILLA_ARGMAX),
        named("softmax_vanilla", SOURCE_SOFTMAX, method=DetectorMethod.VANILLA_ARGMAX),
        named("msp", SOURCE_SOFTMAX, method=DetectorMethod.MAX_SOFTMAX_PROB, global_threshold=msp_threshold),
        named("energy", SOURCE_SOFTMAX, method=DetectorMethod.ENERGY, global_threshold=energy_threshold,
              temperature=temperature),
    ]


def load_detectors(out: Path) -> list[NamedDetector]:
    out = Path(out)
    thresholds_path = _require(out / CALIBRATION_DIR / "thresholds.csv", "calibrate")
    global_path = _require(out / CALIBRATION_DIR / "global.csv", "calibrate")
    _, columns = load_thresholds_csv(thresholds_path)
    params = {}
    _, header_line, header, data = split_header(read_rows(global_path), global_path)
    if header != ["detector", "parameter", "value"]:
        raise ParseError("cabecalho precisa ser 'detector,parameter,value'", line=header_line, path=str(global_path))
    for line_num, text in data:
        cells = next(csv.reader([text]))
        if len(cells) != 3:
            raise ParseError(f"{len(cells)} colunas, esperado 3", line=line_num, path=str(global_path))
        params[(cells[0], cells[1])] = _parse_real(cells[2], line_num, global_path)
    try:
        return build_detectors(
            columns["bh_calibrated"], columns["bh_calibrated_no_ood"],
            params[("msp", "global_threshold")], params[("energy", "global_threshold")],
            params[("energy", "temperature")],
        )
    except KeyError as e:
        raise DataError(f"Parametro de calibracao ausente: {e}") from None


# ============================================================================
# ETAPAS
# ============================================================================

def _require(path: Path, stage_id: str) -> Path:
    if not path.exists():
        raise DataError(f"Artefato ausente: {path} (rode a etapa '{stage_id}' antes)")
    return path


def _load_scores(out: Path, source: str, split: str) -> tuple[ScoreMatrix, LabelVector, list[str]]:
    return load_scores_csv(_require(out / SCORES_DIR / f"{source}_{split}.csv", "train"))


def stage_gen_data(cfg: ExperimentConfig, out: Path, verbose: bool = True):
    spec = cfg.data.spec
    synth = generate_synthetic(spec)
    bundle = split_dataset(synth.features, synth.labels, synth.groups, cfg.data.train_frac, spec.seed)
    for name, split in (("train", bundle.train), ("val", bundle.val), ("test", bundle.test)):
        save_features_csv(out / DATA_DIR / f"{name}.csv", split)
        if verbose:
            print(f"[gen-data] {name}: {len(split)} amostras, {int(split.labels.is_ood.sum())} OOD", flush=True)


def stage_train(cfg: ExperimentConfig, out: Path, verbose: bool = True):
    splits = {
        name: load_features_csv(_require(out / DATA_DIR / f"{name}.csv", "gen-data"))
        for name in ("train", "val", "test")
    }
    train_split = splits["train"][0].in_distribution()
    val_split = splits["val"][0]
    class_names = train_split.labels.class_names

    for head, source in ((HeadKind.BINARY_HEADS, SOURCE_BH), (HeadKind.SOFTMAX, SOURCE_SOFTMAX)):
        if verbose:
            print(f"[train] modelo {source} ({head.value})", flush=True)
        mlp = MlpConfig(
            input_dim=train_split.features.shape[1],
            hidden_dims=cfg.model.hidden_dims,
            n_classes=len(class_names),
            head_kind=head,
        )
        params, history = train(train_split.features, train_split.labels, mlp, cfg.train,
                                val_split.features, val_split.labels, verbose=verbose)
        save_params(out / MODEL_DIR / f"{source}.bin", params)
        write_history_csv(out / MODEL_DIR / f"history_{source}.csv", history)
        for split_name in ("val", "test"):
            split, ids = splits[split_name]
            save_scores_csv(out / SCORES_DIR / f"{source}_{split_name}.csv",
                            score_dataset(params, split.features), split.labels, ids)


def stage_calibrate(cfg: ExperimentConfig, out: Path, verbose: bool = True):
    cal = cfg.calibrate
    bh_val, labels, _ = _load_scores(out, SOURCE_BH, "val")
    logits, logit_labels, _ = _load_scores(out, SOURCE_SOFTMAX, "val")

    calibrated, trace = coordinate_descent(
        bh_val, labels, seed=cal.seed, max_rounds=cal.max_rounds,
        convention=OodConvention.ASSUME_ZERO_WHEN_ABSENT, verbose=verbose,
    )
    # sem OOD: parte dos limiares que preservam todo acerto do argmax, e nao do zero
    in_idx = np.flatnonzero(~labels.is_ood)
    val_in, labels_in = bh_val.take(in_idx), labels.take(in_idx)
    calibrated_no_ood, trace_no_ood = coordinate_descent(
        val_in, labels_in, init=conservative_thresholds(val_in, labels_in), seed=cal.seed,
        max_rounds=cal.max_rounds, convention=OodConvention.IN_DIST_ONLY, verbose=verbose,
    )

    in_idx = np.flatnonzero(~logit_labels.is_ood)
    temperature = fit_temperature(logits.take(in_idx), logit_labels.take(in_idx), cal.t_min, cal.t_max)
    preds, _ = argmax_verdicts(logits.values)
    msp_threshold, msp_obj = calibrate_global_threshold(
        softmax(logits.values).max(axis=1), preds, logit_labels, RejectDirection.REJECT_BELOW,
    )
    energy_threshold, energy_obj = calibrate_global_threshold(
        energy_scores(logits.values, temperature), preds, logit_labels, RejectDirection.REJECT_ABOVE,
    )
    if verbose:
        print(f"[calibrate] BH: bacc={trace.objective:.4f} (sem OOD: {trace_no_ood.objective:.4f})", flush=True)
        print(f"[calibrate] T={temperature:.4f} msp={msp_threshold:.6g} (bacc={msp_obj:.4f}) "
              f"energia={energy_threshold:.6g} (bacc={energy_obj:.4f})", flush=True)

    cal_dir = out / CALIBRATION_DIR
    write_thresholds_csv(cal_dir / "thresholds.csv", labels.class_names,
                         {"bh_calibrated": calibrated, "bh_calibrated_no_ood": calibrated_no_ood})
    write_csv(cal_dir / "global.csv", ["detector", "parameter", "value"], [
        ["msp", "global_threshold", fmt_real(msp_threshold)],
        ["energy", "global_threshold", fmt_real(energy_threshold)],
        ["energy", "temperature", fmt_real(temperature)],
    ])
    write_trace_csv(cal_dir / "trace_bh_calibrated.csv", trace, bh_val.n_classes)
    write_trace_csv(cal_dir / "trace_bh_calibrated_no_ood.csv", trace_no_ood, bh_val.n_classes)


def stage_eval(cfg: ExperimentConfig, out: Path, verbose: bool = True):
    detectors = load_detectors(out)
    test = {source: _load_scores(out, source, "test") for source in SOURCES}
    summary = []
    for det in detectors:
        scores, labels, _ = test[det.source]
        verdicts, _ = predict_arrays(scores, det.config)
        report = evaluate(verdicts, labels)
        write_confusion_csv(out / EVAL_DIR / f"confusion_{det.name}.csv", report.confusion, labels.class_names)
        write_ood_false_positives_csv(out / EVAL_DIR / f"ood_false_positives_{det.name}.csv",
                                      ood_false_positives(report.confusion, labels.class_names))
        summary.append([det.name, str(len(labels)), str(report.ood_count), fmt_real(report.accuracy),
                        fmt_real(report.balanced_accuracy), _fmt_optional(ood_recall(report.confusion)),
                        _fmt_optional(ood_precision(report.confusion))])
        if verbose:
            print(f"[eval] {det.name}: acc={report.accuracy:.4f} bacc={report.balanced_accuracy:.4f}", flush=True)
    write_csv(out / EVAL_DIR / "summary.csv", ["method", "n_samples", "ood_count", "accuracy",
                                               "balanced_accuracy", "ood_recall", "ood_precision"], summary)
    for source in SOURCES:
        scores, labels, _ = test[source]
        write_score_ranges_csv(out / EVAL_DIR / f"score_ranges_{source}.csv", class_score_ranges(scores, labels))


def stage_sweep(cfg: ExperimentConfig, out: Path, verbose: bool = True):
    detectors = load_detectors(out)
    in_scores, ood_scores = {}, {}
    in_labels = None
    reference = None
    for source in SOURCES:
        scores, labels, _ = _load_scores(out, source, "test")
        if reference is None:
            reference = labels
        elif not np.array_equal(reference.labels, labels.labels):
            raise DataError("Arquivos de score de teste com rotulos diferentes entre modelos")
        in_idx = np.flatnonzero(~labels.is_ood)
        in_scores[source] = scores.take(in_idx)
        ood_scores[source] = scores.take(np.flatnonzero(labels.is_ood))
        in_labels = labels.take(in_idx)

    n_ood = int(reference.is_ood.sum())
    settings = cfg.sweep
    counts = settings.ood_counts if settings.ood_counts is not None else default_ood_counts(n_ood, settings.n_points)
    sweep_cfg = SweepConfig(ood_counts=counts, repetitions=settings.repetitions, seed=settings.seed,
                            workers=settings.workers)
    sweep = ood_sweep(in_scores, in_labels, ood_scores, detectors, sweep_cfg, verbose=verbose)
    write_sweep_csv(out / SWEEP_DIR / "sweep.csv", sweep, in_labels.class_names)


def stage_report(cfg: ExperimentConfig, out: Path, verbose: bool = True):
    sweep, _ = load_sweep_csv(_require(out / SWEEP_DIR / "sweep.csv", "sweep"))
    rows = compare_report(sweep)
    write_compare_csv(out / REPORT_DIR / "compare.csv", rows)
    if not cfg.sweep.charts:
        return
    for metric, title, y_label in (
        ("accuracy", "Acuracia vs quantidade de OOD", "acuracia"),
        ("balanced_accuracy", "Acuracia balanceada vs quantidade de OOD", "acuracia balanceada"),
    ):
        series = {
            method: [getattr(r, metric) for r in rows if r.method == method]
            for method in sweep.methods
        }
        write_line_chart_svg(out / REPORT_DIR / f"{metric}.svg", title, sweep.ood_counts, series, y_label)
    if verbose:
        print(f"[report] {len(rows)} linhas em {out / REPORT_DIR / 'compare.csv'}", flush=True)


STAGE_FUNCTIONS = {
    "gen-data": stage_gen_data,
    "train": stage_train,
    "calibrate": stage_calibrate,
    "eval": stage_eval,
    "sweep": stage_sweep,
    "report": stage_report,
}


def run_experiment(cfg: ExperimentConfig, out: Path, stages=None, verbose: bool = True) -> Path:
    """Executa as etapas em ordem; falha vira StageError e os artefatos ja escritos ficam no disco."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Diretorio de saida invalido: {out} ({e})") from None
    extra = {"config_hash": cfg.config_hash(), "seeds": cfg.seeds(), "config": cfg.to_dict()}
    for stage_id in stages or STAGE_IDS:
        fn = STAGE_FUNCTIONS[stage_id]
        run_stage(stage_id, lambda: fn(cfg, out, verbose), out, extra, verbose)
    return out
