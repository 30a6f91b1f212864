from typing import Optional


class G2DMError(Exception):
    """Base error. `category` is the machine-parsable tag printed by the CLI."""

    category = "error"
    exit_code = 1


class ArgumentError(G2DMError, ValueError):
    category = "argument"
    exit_code = 2


class DimensionError(G2DMError, ValueError):
    category = "dimension"
    exit_code = 3


class NumericError(G2DMError, ArithmeticError):
    category = "numeric"
    exit_code = 4

    def __init__(self, message: str, node_id: Optional[int] = None):
        self.node_id = node_id
        if node_id is not None:
            message = f"{message} (node {node_id})"
        super().__init__(message)


class ParseError(G2DMError, ValueError):
    category = "parse"
    exit_code = 5

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ReportError(G2DMError, OSError):
    category = "io"
    exit_code = 6

    def __init__(self, message: str, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class ExperimentError(G2DMError):
    category = "experiment"
    exit_code = 7

    def __init__(self, message: str, unseen_domain=None, seed: Optional[int] = None):
        self.unseen_domain = unseen_domain
        self.seed = seed
        super().__init__(f"run failed for unseen domain {unseen_domain}, seed {seed}: {message}")
