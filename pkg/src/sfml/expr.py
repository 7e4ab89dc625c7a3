"""Restricted arithmetic expressions in ``t`` for excitation signals.

Accepted: numbers, ``t``, ``pi``, ``e``, the operators ``+ - * / **`` and the
functions ``sin cos tan exp log sqrt abs tanh``. Anything else (attribute
access, other names, keyword arguments, comparisons...) is rejected before
evaluation.
"""
from __future__ import annotations

import ast
import math

import numpy as np

from .errors import ConfigurationError

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
             "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh}
CONSTANTS = {"pi": math.pi, "e": math.e}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power}
_UNARY = {ast.USub: np.negative, ast.UAdd: np.positive}


class ExpressionError(ConfigurationError):
    pass


def _compile(node, src):
    if isinstance(node, ast.Expression):
        return _compile(node.body, src)
    if isinstance(node, ast.Constant) and type(node.value) in (int, float):
        value = float(node.value)
        return lambda t: value
    if isinstance(node, ast.Name):
        if node.id == "t":
            return lambda t: t
        if node.id in CONSTANTS:
            value = CONSTANTS[node.id]
            return lambda t: value
        raise ExpressionError(f"unknown name {node.id!r} in {src!r}")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op = _BINOPS[type(node.op)]
        left, right = _compile(node.left, src), _compile(node.right, src)
        return lambda t: op(left(t), right(t))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        op = _UNARY[type(node.op)]
        arg = _compile(node.operand, src)
        return lambda t: op(arg(t))
    if isinstance(node, ast.Call):
        if not (isinstance(node.func, ast.Name) and node.func.id in FUNCTIONS):
            raise ExpressionError(f"unsupported function call in {src!r}")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument in {src!r}")
        fn = FUNCTIONS[node.func.id]
        arg = _compile(node.args[0], src)
        return lambda t: fn(arg(t))
    raise ExpressionError(f"unsupported syntax {type(node).__name__} in {src!r}")


def parse_expression(src: str):
    """Compile ``src`` into a vectorized function of ``t``."""
    if not isinstance(src, str) or not src.strip():
        raise ExpressionError("expression must be a non-empty string")
    try:
        tree = ast.parse(src.strip(), mode="eval")
    except SyntaxError as err:
        raise ExpressionError(f"cannot parse {src!r}: {err.msg}") from None
    fn = _compile(tree, src)

    def evaluate(t):
        t = np.asarray(t, dtype=float)
        with np.errstate(all="ignore"):
            out = np.asarray(fn(t), dtype=float)
        return np.broadcast_to(out, t.shape).copy()

    return evaluate
