"""A small arithmetic grammar for data fields given as text.

Allowed: numbers, x1, x2, pi, e, + - * / ^ (or **), parentheses, and the
functions sin, cos, abs, min, max.  Expressions are parsed with ``ast`` and
evaluated over numpy arrays; nothing else is reachable.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass

import numpy as np

_FUNCS = {"sin": np.sin, "cos": np.cos, "abs": np.abs}
_VARIADIC = {"min": np.minimum, "max": np.maximum}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}


class ExpressionError(ValueError):
    def __init__(self, text: str, message: str, col: int | None = None):
        where = f" at column {col + 1}" if col is not None else ""
        super().__init__(f"{message}{where} in expression {text!r}")
        self.text, self.col = text, col


@dataclass(frozen=True)
class Expression:
    """Compiled field expression; call with an (N, 2) array of points."""
    text: str
    tree: ast.Expression

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        env = {"x1": pts[:, 0], "x2": pts[:, 1]}
        with np.errstate(all="ignore"):
            out = _eval(self.tree.body, env)
        return np.broadcast_to(np.asarray(out, dtype=float), (len(pts),)).copy()

    def __repr__(self):
        return f"Expression({self.text!r})"


def parse_expression(text: str) -> Expression:
    src = text.strip()
    if not src:
        raise ExpressionError(text, "empty expression")
    src = src.replace("^", "**")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(text, "syntax error", (exc.offset or 1) - 1) from None
    _check(tree.body, text)
    return Expression(text.strip(), tree)


def _check(node, text):
    col = getattr(node, "col_offset", None)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(text, "only numeric constants are allowed", col)
    elif isinstance(node, ast.Name):
        if node.id not in ("x1", "x2") and node.id not in _CONSTS:
            raise ExpressionError(text, f"unknown name {node.id!r}", col)
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(text, "operator not allowed", col)
        _check(node.left, text)
        _check(node.right, text)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.UAdd, ast.USub)):
            raise ExpressionError(text, "operator not allowed", col)
        _check(node.operand, text)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            raise ExpressionError(text, "only plain function calls are allowed", col)
        name = node.func.id
        if name in _FUNCS:
            if len(node.args) != 1:
                raise ExpressionError(text, f"{name} takes one argument", col)
        elif name in _VARIADIC:
            if len(node.args) < 2:
                raise ExpressionError(text, f"{name} takes at least two arguments", col)
        else:
            raise ExpressionError(text, f"unknown function {name!r}", col)
        for arg in node.args:
            _check(arg, text)
    else:
        raise ExpressionError(text, f"{type(node).__name__} not allowed", col)


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _CONSTS[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        val = _eval(node.operand, env)
        return -val if isinstance(node.op, ast.USub) else val
    name = node.func.id
    args = [_eval(a, env) for a in node.args]
    if name in _FUNCS:
        return _FUNCS[name](args[0])
    out = args[0]
    for a in args[1:]:
        out = _VARIADIC[name](out, a)
    return out
