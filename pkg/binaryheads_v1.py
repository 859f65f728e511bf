#!/usr/bin/env python3
"""BinaryHeads v1 - Experimento de deteccao OOD com cabecas binarias e limiares calibrados por classe."""

import argparse
import sys
from pathlib import Path

from binaryheads.config import DEFAULT_OUT_DIR, load_config
from binaryheads.errors import BinaryHeadsError
from binaryheads.harness import run_experiment
from binaryheads.stages import STAGES, VERSION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="BinaryHeads v1")
    sub = parser.add_subparsers(dest="command", required=True)

    commands = [(s["id"], s["name"]) for s in STAGES] + [("run", "Todas as etapas em sequencia")]
    for command, help_text in commands:
        p = sub.add_parser(command, help=help_text)
        p.add_argument("--config", default=None, help="Arquivo INI de configuracao (padroes embutidos se vazio)")
        p.add_argument("--seed", type=int, default=None, help="Sobrescreve a seed de todas as secoes")
        p.add_argument("--out", default=DEFAULT_OUT_DIR, help="Diretorio de artefatos (padrao: $BH_OUT_DIR)")
        p.add_argument("--quiet", action="store_true", help="Sem progresso por epoca/rodada")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    verbose = not args.quiet

    print("=" * 60, flush=True)
    print(f"BinaryHeads v{VERSION} - {args.command}", flush=True)
    print("=" * 60, flush=True)

    try:
        cfg = load_config(Path(args.config) if args.config else None, seed=args.seed)
        stages = None if args.command == "run" else [args.command]
        out = run_experiment(cfg, Path(args.out), stages=stages, verbose=verbose)
    except BinaryHeadsError as e:
        # StageError ja vem com a etapa: "[error] [train] ..."
        print(f"[error] {e}", flush=True)
        return e.exit_code

    print(f"[done] Artefatos em {out}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
