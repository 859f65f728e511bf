"""Configuracao do experimento: arquivo INI plano (secoes [data] [model] [train] [calibrate] [sweep])."""

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from binaryheads.calibrate import DEFAULT_MAX_ROUNDS, DEFAULT_T_MAX, DEFAULT_T_MIN
from binaryheads.data import SyntheticSpec
from binaryheads.errors import ConfigError, InvalidArgumentError
from binaryheads.nnet import TrainConfig

DEFAULT_OUT_DIR = os.environ.get("BH_OUT_DIR", "resultados")


@dataclass(frozen=True)
class DataSection:
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    train_frac: float = 0.8


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple[int, ...] = (32,)


@dataclass(frozen=True)
class CalibrateSection:
    max_rounds: int = DEFAULT_MAX_ROUNDS
    seed: int = 0
    t_min: float = DEFAULT_T_MIN
    t_max: float = DEFAULT_T_MAX


@dataclass(frozen=True)
class SweepSection:
    ood_counts: tuple[int, ...] | None = None  # None = grade automatica
    n_points: int = 9
    repetitions: int = 1
    seed: int = 0
    workers: int = 1
    charts: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def seeds(self) -> dict[str, int]:
        return {
            "data": self.data.spec.seed,
            "train": self.train.seed,
            "calibrate": self.calibrate.seed,
            "sweep": self.sweep.seed,
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            data=replace(self.data, spec=replace(self.data.spec, seed=seed)),
            train=replace(self.train, seed=seed),
            calibrate=replace(self.calibrate, seed=seed),
            sweep=replace(self.sweep, seed=seed),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ============================================================================
# CONVERSORES
# ============================================================================

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on", "sim"):
        return True
    if low in ("0", "false", "no", "off", "nao"):
        return False
    raise ValueError(f"booleano invalido: {text!r}")


def _is_none(text: str) -> bool:
    return text.strip().lower() in ("none", "auto", "")


def _list(conv):
    def parse(text: str) -> tuple:
        return tuple(conv(item.strip()) for item in text.split(",") if item.strip())
    return parse


def _optional(conv):
    def parse(text: str):
        return None if _is_none(text) else conv(text)
    return parse


# secao -> chave -> conversor
_SCHEMA = {
    "data": {
        "n_classes_total": int,
        "class_names": _list(str),
        "class_proportions": _list(float),
        "total_samples": int,
        "feature_dim": int,
        "cluster_separation": float,
        "cluster_scale": float,
        "ood_class_index": _optional(int),
        "groups_per_class": int,
        "ood_mean_radius": float,
        "ood_scale_factor": float,
        "train_frac": float,
        "seed": int,
    },
    "model": {
        "hidden_dims": _list(int),
    },
    "train": {f.name: (_bool if f.type in (bool, "bool") else type(f.default)) for f in fields(TrainConfig)},
    "calibrate": {
        "max_rounds": int,
        "seed": int,
        "t_min": float,
        "t_max": float,
    },
    "sweep": {
        "ood_counts": _optional(_list(int)),
        "n_points": int,
        "repetitions": int,
        "seed": int,
        "workers": int,
        "charts": _bool,
    },
}


def _read_sections(text: str, source: str) -> dict[str, dict]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: secao desconhecida [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            conv = _SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(f"{source}: chave desconhecida '{key}' em [{section}]")
            try:
                values[section][key] = conv(raw)
            except ValueError as e:
                raise ConfigError(f"{source}: [{section}] {key} = {raw!r}: {e}") from None
    return values


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values = _read_sections(text, source)
    base = ExperimentConfig()
    try:
        data_vals = dict(values.get("data", {}))
        train_frac = data_vals.pop("train_frac", base.data.train_frac)
        if not 0 < train_frac < 1:
            raise InvalidArgumentError(f"train_frac precisa estar em (0, 1), recebido {train_frac}")
        spec = replace(base.data.spec, **data_vals)
        sweep = replace(base.sweep, **values.get("sweep", {}))
        if sweep.repetitions < 1 or sweep.n_points < 1 or sweep.workers < 1:
            raise InvalidArgumentError("[sweep] repetitions, n_points e workers precisam ser >= 1")
        calibrate = replace(base.calibrate, **values.get("calibrate", {}))
        if calibrate.max_rounds < 1 or not 0 < calibrate.t_min < calibrate.t_max:
            raise InvalidArgumentError("[calibrate] max_rounds >= 1 e 0 < t_min < t_max")
        model = replace(base.model, **values.get("model", {}))
        if not model.hidden_dims or any(h < 1 for h in model.hidden_dims):
            raise InvalidArgumentError("[model] hidden_dims precisa de dimensoes >= 1")
        return ExperimentConfig(
            data=DataSection(spec=spec, train_frac=train_frac),
            model=model,
            train=replace(base.train, **values.get("train", {})),
            calibrate=calibrate,
            sweep=sweep,
        )
    except InvalidArgumentError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path: Path | None = None, seed: int | None = None) -> ExperimentConfig:
    """Le o arquivo de configuracao (ou usa os padroes) e aplica --seed em todas as secoes."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Arquivo de configuracao nao encontrado: {path}")
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"Nao foi possivel ler {path}: {e}") from None
        cfg = parse_config(text, source=str(path))
    return cfg.with_seed(seed) if seed is not None else cfg
