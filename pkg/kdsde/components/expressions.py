"""
Coefficient expressions read from experiment files.

The grammar is Python arithmetic with ``^`` for powers and ``∧``/``∨`` for
min/max, the functions exp, log, sin, cos, sqrt, abs, min, max, the variables
t, x (or x0, x1, ... in several dimensions) and ``mu(...)``, the integral of
an expression in x and y against the current measure in y.
"""
import ast
import math
from typing import Dict, Optional

import numpy as np

from kdsde.components.exceptions import ConfigError

__all__ = ('Expression',)

_FUNCTIONS = {
    'exp': np.exp,
    'log': np.log,
    'sin': np.sin,
    'cos': np.cos,
    'sqrt': np.sqrt,
    'abs': np.abs,
    'min': np.minimum,
    'max': np.maximum,
}
_CONSTANTS = {'pi': math.pi, 'e': math.e}

_BINARY = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
    ast.BitAnd: np.minimum,
    ast.BitOr: np.maximum,
}
_UNARY = {ast.USub: np.negative, ast.UAdd: np.positive}

_PAIR_CHUNK = 1 << 22


class Expression:
    def __init__(self, source: str, dim: int = 1):
        self.source = str(source)
        self.dim = int(dim)
        text = self.source.replace('^', '**').replace('∧', '&').replace('∨', '|')
        try:
            tree = ast.parse(text, mode='eval')
        except SyntaxError as e:
            raise ConfigError(f"cannot parse expression {self.source!r}: {e.msg}", line=e.lineno, column=e.offset)
        self._tree = tree.body
        self.uses_measure = False
        self._validate(self._tree, inside_mu=False)

    def _variables(self, inside_mu: bool):
        names = {'t'} | ({'x'} if self.dim == 1 else {f'x{k}' for k in range(self.dim)})
        if inside_mu:
            names |= {'y'} if self.dim == 1 else {f'y{k}' for k in range(self.dim)}
        return names

    def _fail(self, node: ast.AST, message: str):
        raise ConfigError(f"{message} in expression {self.source!r}",
                          line=getattr(node, 'lineno', None), column=getattr(node, 'col_offset', None))

    def _validate(self, node: ast.AST, inside_mu: bool):
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINARY:
                self._fail(node, f"operator {type(node.op).__name__} is not allowed")
            self._validate(node.left, inside_mu)
            self._validate(node.right, inside_mu)
        elif isinstance(node, ast.UnaryOp):
            if type(node.op) not in _UNARY:
                self._fail(node, f"operator {type(node.op).__name__} is not allowed")
            self._validate(node.operand, inside_mu)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.keywords:
                self._fail(node, "only plain function calls are allowed")
            name = node.func.id
            if name == 'mu':
                if inside_mu:
                    self._fail(node, "nested mu(...) is not allowed")
                if len(node.args) != 1:
                    self._fail(node, "mu(...) takes exactly one argument")
                self.uses_measure = True
                self._validate(node.args[0], inside_mu=True)
            elif name in _FUNCTIONS:
                expected = 2 if name in ('min', 'max') else 1
                if len(node.args) != expected:
                    self._fail(node, f"{name} takes {expected} argument(s)")
                for arg in node.args:
                    self._validate(arg, inside_mu)
            else:
                self._fail(node, f"unknown function {name!r}")
        elif isinstance(node, ast.Name):
            if node.id not in _CONSTANTS and node.id not in self._variables(inside_mu):
                self._fail(node, f"unknown name {node.id!r}")
        elif isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                self._fail(node, "only numeric constants are allowed")
        else:
            self._fail(node, f"{type(node).__name__} is not allowed")

    def _eval(self, node: ast.AST, env: Dict[str, np.ndarray], mu=None):
        if isinstance(node, ast.BinOp):
            return _BINARY[type(node.op)](self._eval(node.left, env, mu), self._eval(node.right, env, mu))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env, mu))
        if isinstance(node, ast.Call):
            if node.func.id == 'mu':
                return self._integral(node.args[0], env, mu)
            return _FUNCTIONS[node.func.id](*[self._eval(a, env, mu) for a in node.args])
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTANTS[node.id]
        return float(node.value)

    def _integral(self, node: ast.AST, env: Dict[str, np.ndarray], mu) -> np.ndarray:
        n = env['_n']
        if mu is None or not np.any(mu.alive):
            return np.zeros(n)
        y = mu.locations[mu.alive]
        w = mu.weights[mu.alive]
        out = np.zeros(n)
        chunk = max(1, _PAIR_CHUNK // max(n, 1))
        for start in range(0, y.shape[0], chunk):
            ys = y[start:start + chunk]
            inner = {k: (v[:, None] if isinstance(v, np.ndarray) else v) for k, v in env.items() if k != '_n'}
            if self.dim == 1:
                inner['y'] = ys[None, :, 0]
            else:
                inner.update({f'y{k}': ys[None, :, k] for k in range(self.dim)})
            values = np.broadcast_to(self._eval(node, inner), (n, ys.shape[0]))
            out += values @ w[start:start + chunk]
        return out

    def __call__(self, t: float, x: np.ndarray, mu: Optional[object] = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        env = {'t': float(t), '_n': n}
        if self.dim == 1:
            env['x'] = x[:, 0]
        else:
            env.update({f'x{k}': x[:, k] for k in range(self.dim)})
        with np.errstate(all='ignore'):
            value = self._eval(self._tree, env, mu)
        return np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()

    def __repr__(self):
        return f"Expression({self.source!r})"
