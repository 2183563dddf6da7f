"""Tiny arithmetic language for declarative scenario coefficients.

Expressions range over the variables ``t`` and ``x`` with the functions
``exp``, ``min``, ``max``, ``abs`` and ``ind`` (indicator of a comparison),
the four arithmetic operators and ``**``.  Nothing else parses, so config
files stay declarative and diffable.
"""

from __future__ import annotations

import ast

import numpy as np

from .errors import UsageError

_FUNCTIONS = {
    "exp": np.exp,
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
    "ind": lambda cond: np.where(cond, 1.0, 0.0),
}

_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_UNARYOPS = (ast.USub, ast.UAdd)
_CMPOPS = (ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.Eq, ast.NotEq)


def _validate(node, source):
    if isinstance(node, ast.Expression):
        _validate(node.body, source)
    elif isinstance(node, ast.BinOp) and isinstance(node.op, _BINOPS):
        _validate(node.left, source)
        _validate(node.right, source)
    elif isinstance(node, ast.UnaryOp) and isinstance(node.op, _UNARYOPS):
        _validate(node.operand, source)
    elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        pass
    elif isinstance(node, ast.Name) and node.id in ("t", "x"):
        pass
    elif isinstance(node, ast.Call):
        if not (isinstance(node.func, ast.Name) and node.func.id in _FUNCTIONS):
            raise UsageError(f"unknown function in expression {source!r}")
        if node.keywords:
            raise UsageError(f"keyword arguments not allowed in {source!r}")
        if node.func.id in ("min", "max") and len(node.args) != 2:
            raise UsageError(f"{node.func.id} takes exactly two arguments in {source!r}")
        if node.func.id in ("exp", "abs", "ind") and len(node.args) != 1:
            raise UsageError(f"{node.func.id} takes exactly one argument in {source!r}")
        for arg in node.args:
            _validate(arg, source)
    elif isinstance(node, ast.Compare):
        if len(node.ops) != 1 or not isinstance(node.ops[0], _CMPOPS):
            raise UsageError(f"only simple comparisons allowed in {source!r}")
        _validate(node.left, source)
        _validate(node.comparators[0], source)
    else:
        raise UsageError(f"disallowed syntax {type(node).__name__} in expression {source!r}")


def compile_expression(source: str):
    """Compile a coefficient expression into a ``(t, x) -> array`` callable."""
    try:
        tree = ast.parse(str(source), mode="eval")
    except SyntaxError as exc:
        raise UsageError(f"cannot parse expression {source!r}: {exc.msg}")
    _validate(tree, source)
    code = compile(tree, "<coefficient>", "eval")

    def evaluate(t, x):
        return eval(code, {"__builtins__": {}},
                    {"t": t, "x": x, **_FUNCTIONS})

    return evaluate


def expression_process(source: str):
    """Wrap an expression as a (t, states) -> per-path array process."""
    fn = compile_expression(source)

    def process(t, states):
        x = states[:, 0]
        return np.broadcast_to(np.asarray(fn(t, x), dtype=float), x.shape)

    return process


def expression_terminal(source: str):
    """Wrap an expression of the stopped state as a terminal functional."""
    fn = compile_expression(source)

    def terminal(batch):
        x = batch.stopped_states()[:, 0]
        t = batch.stop_times()
        return np.broadcast_to(np.asarray(fn(t, x), dtype=float), x.shape)

    return terminal
