"""Run configuration: a line-oriented ``key = value`` file.

Comments start with ``#``. Paths are relative to the config file unless they
start with ``pkg:``, which refers to the data bundled with the package.

Keys
----
macro_mesh, micro_mesh : path
material.<region> : K, mu          (Pa)
method : fe2 | csa | pod
rho : float                        (csa)
delta : float                      (pod)
n_steps : int                      (default 10)
eps_macro, max_iter_macro          (default 1e-6, 25)
eps_micro, max_iter_micro          (default 1e-9, 20)
patience : int                     (default 4)
seed : int                         (default 0)
out : path
threads : int                      (default: available cores)
strain_metric : plain | tensor     (default plain)
dirichlet.<tag> : expr, expr       (displacement in m)
traction.<tag> : expr, expr        (Pa)
body_force : expr, expr            (Pa/m)
probe.<name> : x, y                (nearest macro quadrature point)
vtk : bool                         (default true)
pod.bounds : float                 (default 0.015)
pod.n_steps : int                  (default 10)
pod.dense : bool                   (default false)
pod.basis : path                   (load if present and matching, else build and save)

Expressions use ``x1``, ``x2`` (reference coordinates), ``r`` (load ratio),
numbers, ``+ - * / **``, ``pi`` and the functions ``sin cos tan exp log sqrt
abs minimum maximum``.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields
from importlib.resources import files
import operator
import os
from pathlib import Path

import numpy as np

__all__ = ["ConfigError", "RunConfig", "Expression", "parse_config", "load_config",
           "resolve_path", "format_config"]


class ConfigError(ValueError):
    pass


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {name: getattr(np, name) for name in
          ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "minimum", "maximum")}
_CONSTS = {"pi": np.pi}
_VARS = ("x1", "x2", "r")


class Expression:
    """Arithmetic expression in ``x1, x2, r`` evaluated by walking its syntax tree."""

    def __init__(self, text: str):
        self.text = text.strip()
        try:
            self._tree = ast.parse(self.text, mode="eval").body
        except SyntaxError as exc:
            raise ConfigError(f"invalid expression {self.text!r}") from exc
        self._check(self._tree)

    def _check(self, node) -> None:
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ConfigError(f"non-numeric constant in {self.text!r}")
        elif isinstance(node, ast.Name):
            if node.id not in _VARS and node.id not in _CONSTS:
                raise ConfigError(f"unknown name {node.id!r} in {self.text!r}")
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            self._check(node.operand)
        elif (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
              and node.func.id in _FUNCS and not node.keywords):
            for a in node.args:
                self._check(a)
        else:
            raise ConfigError(f"unsupported syntax in {self.text!r}")

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTS[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        return _FUNCS[node.func.id](*(self._eval(a, env) for a in node.args))

    def __call__(self, X: np.ndarray, r: float) -> np.ndarray:
        X = np.asarray(X, float)
        val = self._eval(self._tree, {"x1": X[:, 0], "x2": X[:, 1], "r": float(r)})
        return np.broadcast_to(np.asarray(val, float), (len(X),))

    def __repr__(self) -> str:
        return self.text


def vector_field(exprs):
    """Pair of expressions as ``f(X, r) -> (k, 2)``."""
    ex, ey = exprs

    def f(X, r):
        return np.stack([ex(X, r), ey(X, r)], axis=1)

    f.exprs = (ex, ey)
    return f


@dataclass
class RunConfig:
    macro_mesh: str = ""
    micro_mesh: str = ""
    materials: dict = field(default_factory=dict)
    method: str = ""
    rho: float | None = None
    delta: float | None = None
    n_steps: int = 10
    eps_macro: float = 1e-6
    max_iter_macro: int = 25
    eps_micro: float = 1e-9
    max_iter_micro: int = 20
    patience: int = 4
    seed: int = 0
    out: str = ""
    threads: int = 0
    strain_metric: str = "plain"
    dirichlet: dict = field(default_factory=dict)
    traction: dict = field(default_factory=dict)
    body_force: tuple | None = None
    probes: dict = field(default_factory=dict)
    vtk: bool = True
    pod_bounds: float = 0.015
    pod_n_steps: int = 10
    pod_dense: bool = False
    pod_basis: str = ""
    base_dir: str = "."

    def validate(self) -> "RunConfig":
        if self.method not in ("fe2", "csa", "pod"):
            raise ConfigError(f"method must be fe2, csa or pod (got {self.method!r})")
        for key in ("macro_mesh", "micro_mesh", "out"):
            if not getattr(self, key):
                raise ConfigError(f"missing required key {key}")
        if self.method == "csa" and self.rho is None:
            raise ConfigError("method csa requires rho")
        if self.method == "pod" and self.delta is None:
            raise ConfigError("method pod requires delta")
        if self.rho is not None and not self.rho > 0:
            raise ConfigError("rho must be positive")
        if self.delta is not None and not self.delta >= 0:
            raise ConfigError("delta must be nonnegative")
        if self.n_steps < 1:
            raise ConfigError("n_steps must be at least 1")
        if self.strain_metric not in ("plain", "tensor"):
            raise ConfigError("strain_metric must be plain or tensor")
        if not self.materials:
            raise ConfigError("no material.<region> entries")
        if set(self.dirichlet) & set(self.traction):
            raise ConfigError("a facet tag carries both dirichlet and traction data")
        for tag, (K, mu) in self.materials.items():
            if not (K > 0 and mu > 0):
                raise ConfigError(f"material.{tag} needs positive K and mu")
        return self

    @property
    def n_threads(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


_PLAIN_KEYS = ("macro_mesh", "micro_mesh", "method", "rho", "delta", "n_steps", "eps_macro",
               "max_iter_macro", "eps_micro", "max_iter_micro", "patience", "seed", "out",
               "threads", "strain_metric", "vtk")
_POD_KEYS = {"pod.bounds": "pod_bounds", "pod.n_steps": "pod_n_steps", "pod.dense": "pod_dense",
             "pod.basis": "pod_basis"}


def _number(text: str, kind, key: str):
    try:
        if kind is int:
            return int(text)
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def _pair(text: str, key: str) -> list[str]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"{key}: expected two comma-separated values")
    return parts


def _tag(key: str) -> int:
    try:
        return int(key.split(".", 1)[1])
    except ValueError as exc:
        raise ConfigError(f"{key}: tag must be an integer") from exc


_KINDS = {"n_steps": int, "max_iter_macro": int, "max_iter_micro": int, "patience": int,
          "seed": int, "threads": int, "rho": float, "delta": float, "eps_macro": float,
          "eps_micro": float, "vtk": bool, "pod_bounds": float, "pod_n_steps": int,
          "pod_dense": bool}


def apply(cfg: RunConfig, key: str, value: str, where: str = "") -> None:
    """Set one ``key = value`` entry on ``cfg``."""
    key, value = key.strip(), value.strip()
    ctx = f"{where}{key}"

    def fail(msg):
        raise ConfigError(f"{where}{msg}")

    if key in _PLAIN_KEYS or key in _POD_KEYS:
        name = _POD_KEYS.get(key, key)
        kind = _KINDS.get(name)
        setattr(cfg, name, _number(value, kind, ctx) if kind else value)
    elif key.startswith("material."):
        K, mu = (_number(v, float, ctx) for v in _pair(value, ctx))
        cfg.materials[_tag(key)] = (K, mu)
    elif key.startswith("dirichlet."):
        cfg.dirichlet[_tag(key)] = tuple(Expression(v) for v in _pair(value, ctx))
    elif key.startswith("traction."):
        cfg.traction[_tag(key)] = tuple(Expression(v) for v in _pair(value, ctx))
    elif key == "body_force":
        cfg.body_force = tuple(Expression(v) for v in _pair(value, ctx))
    elif key.startswith("probe."):
        name = key.split(".", 1)[1]
        if not name or "," in name:
            fail(f"bad probe name {key!r}")
        cfg.probes[name] = tuple(_number(v, float, ctx) for v in _pair(value, ctx))
    else:
        fail(f"unknown key {key}")


def parse_config(text: str, base_dir: str = ".", source: str = "<config>") -> RunConfig:
    """Parse config text (not yet validated; CLI overrides may follow)."""
    cfg = RunConfig(base_dir=str(base_dir))
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key = value")
        key, value = line.split("=", 1)
        apply(cfg, key, value, f"{source}:{ln}: ")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if str(path).startswith("pkg:"):
        text = files("csahomog").joinpath("data", str(path)[4:]).read_text()
        return parse_config(text, "pkg:", str(path))
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path.parent.resolve()), str(path))


def resolve_path(cfg: RunConfig, value: str):
    """Filesystem path (or bundled resource) for a path-valued key."""
    if value.startswith("pkg:"):
        return files("csahomog").joinpath("data", value[4:])
    p = Path(value)
    if p.is_absolute():
        return p
    if cfg.base_dir == "pkg:":
        return files("csahomog").joinpath("data", value)
    return Path(cfg.base_dir) / p


def format_config(cfg: RunConfig) -> dict:
    """JSON-ready view of the resolved configuration."""
    out = {}
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if f.name in ("dirichlet", "traction"):
            v = {str(k): [e.text for e in exprs] for k, exprs in sorted(v.items())}
        elif f.name == "body_force":
            v = None if v is None else [e.text for e in v]
        elif f.name == "materials":
            v = {str(k): list(p) for k, p in sorted(v.items())}
        elif f.name == "probes":
            v = {k: list(p) for k, p in v.items()}
        out[f.name] = v
    return out
