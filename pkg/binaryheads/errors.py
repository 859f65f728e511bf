"""Hierarquia de erros do binaryheads e codigos de saida da CLI."""


class BinaryHeadsError(Exception):
    exit_code = 1


class InvalidArgumentError(BinaryHeadsError, ValueError):
    exit_code = 3


class ParseError(BinaryHeadsError):
    """Erro de leitura de arquivo (CSV), com numero da linha quando conhecido."""

    exit_code = 3

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"linha {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigError(BinaryHeadsError):
    exit_code = 2


class DataError(BinaryHeadsError):
    exit_code = 3


class NumericError(BinaryHeadsError):
    exit_code = 4


class StageError(BinaryHeadsError):
    """Falha de uma etapa do experimento; guarda a etapa e a causa original."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")

    @property
    def exit_code(self) -> int:
        if hasattr(self.cause, "exit_code"):
            return self.cause.exit_code
        # falha de IO ou valor invalido conta como erro de dados
        if isinstance(self.cause, (OSError, ValueError)):
            return 3
        return 1
