"""Etapas do experimento: tabela de etapas, checkpoint por etapa e manifest com tempos e sementes."""

import time
import json
from pathlib import Path
from typing import Callable

from binaryheads.errors import BinaryHeadsError, StageError
from binaryheads.fileio import atomic_write_json

VERSION = "1.0.0"

STAGES = [
    {"num": 1, "id": "gen-data", "name": "Gerar dados"},
    {"num": 2, "id": "train", "name": "Treino"},
    {"num": 3, "id": "calibrate", "name": "Calibracao"},
    {"num": 4, "id": "eval", "name": "Avaliacao"},
    {"num": 5, "id": "sweep", "name": "Varredura OOD"},
    {"num": 6, "id": "report", "name": "Relatorio"},
]

STAGE_IDS = [s["id"] for s in STAGES]

MANIFEST_FILE = "manifest.json"
CHECKPOINT_FILE = "checkpoint.json"


def stage_info(stage_id: str) -> dict:
    for stage in STAGES:
        if stage["id"] == stage_id:
            return stage
    raise KeyError(stage_id)


def load_manifest(out: Path) -> dict:
    path = Path(out) / MANIFEST_FILE
    if path.exists():
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, OSError):
            pass
    return {"version": VERSION, "stage_times": {}, "artifacts": []}


def write_checkpoint(out: Path, stage_id: str):
    """Checkpoint escrito APOS a etapa (semantica: 'etapa N concluida')."""
    stage = stage_info(stage_id)
    atomic_write_json(Path(out) / CHECKPOINT_FILE, {
        "version": VERSION,
        "last_step_num": stage["num"],
        "last_step": stage["id"],
        "last_step_name": stage["name"],
        "next_step": stage["num"] + 1,
        "timestamp": time.time(),
    })
    print(f"[checkpoint] etapa {stage['num']}: {stage['name']}", flush=True)


def record_stage(out: Path, stage_id: str, seconds: float, manifest_extra: dict | None = None):
    """Atualiza o manifest com o tempo da etapa e a lista de artefatos presentes."""
    out = Path(out)
    manifest = load_manifest(out)
    manifest["version"] = VERSION
    manifest.setdefault("stage_times", {})[stage_id] = round(seconds, 3)
    if manifest_extra:
        manifest.update(manifest_extra)
    manifest["artifacts"] = sorted(
        str(p.relative_to(out)) for p in out.rglob("*")
        if p.is_file() and p.name not in (MANIFEST_FILE, CHECKPOINT_FILE) and not p.name.endswith(".tmp")
    )
    atomic_write_json(out / MANIFEST_FILE, manifest)


def run_stage(stage_id: str, fn: Callable[[], None], out: Path, manifest_extra: dict | None = None,
              verbose: bool = True):
    """Executa uma etapa; qualquer falha vira StageError com a etapa marcada (artefatos parciais ficam)."""
    stage = stage_info(stage_id)
    if verbose:
        print(f"\n[{stage_id}] === Etapa {stage['num']}/{len(STAGES)}: {stage['name']} ===", flush=True)
    t0 = time.time()
    try:
        fn()
        elapsed = time.time() - t0
        record_stage(out, stage_id, elapsed, manifest_extra)
        write_checkpoint(out, stage_id)
    except StageError:
        raise
    except (BinaryHeadsError, OSError, ValueError) as e:
        raise StageError(stage_id, e) from e
    if verbose:
        print(f"[{stage_id}] concluida em {elapsed:.1f}s", flush=True)
