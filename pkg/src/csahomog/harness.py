"""Batch driver: build a run from a config, write its outputs, compare and benchmark runs.

Output tree of a run::

    run.json          resolved config, mesh checksums, probe assignment
    metrics.csv       step,iter,probe,quantity,component,value
    convergence.log   step iter residual n_new_centroids, then a status line per step
    timing.json       phase -> seconds, plus counters
    centroids.txt     centroid registry (csa)
    basis.pod         reduced basis sidecar (pod, unless pod.basis names another path)
    step_NNN.vtk      displacement, Green strain and stress per load step
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
import json
from pathlib import Path
import time

import numpy as np

from .backends import BackendFailure, FE2Backend
from .config import (ConfigError, RunConfig, apply, format_config, load_config,
                     resolve_path, vector_field)
from .csa import CSABackend, CentroidFailure
from .macro import LoadCase, MacroProblem, MacroState, green_strain, newton_solve
from .material import MaterialParams
from .mesh import MeshError, load_mesh, match_periodic
from .micro import MicroError, MicroProblem, micro_step
from .pod import PODBackend, PODError, build_basis, generate_snapshots, load_basis, save_basis
from .vtk import write_vtk

__all__ = ["RunError", "RunSummary", "run", "compare", "bench", "METRIC_HEADER",
           "read_metrics", "probe_indices"]

METRIC_HEADER = ("step", "iter", "probe", "quantity", "component", "value")
_T2 = ("11", "12", "21", "22")
_T4 = tuple(a + b for a in _T2 for b in _T2)


class RunError(RuntimeError):
    """Failure mapped to a process exit code."""

    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


@dataclass
class RunSummary:
    out: Path
    converged: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    state: MacroState | None = None
    backend: object = None

    @property
    def failed_steps(self) -> list[int]:
        return [k for k, ok in enumerate(self.converged) if not ok]


def _micro_problem(cfg: RunConfig):
    cell_mesh = load_mesh(resolve_path(cfg, cfg.micro_mesh))
    cell = match_periodic(cell_mesh)
    mats = {t: MaterialParams(K, mu) for t, (K, mu) in cfg.materials.items()}
    return MicroProblem(cell, mats, eps=cfg.eps_micro, max_iter=cfg.max_iter_micro), cell_mesh


def _load_case(cfg: RunConfig) -> LoadCase:
    return LoadCase(cfg.n_steps,
                    {t: vector_field(e) for t, e in cfg.dirichlet.items()},
                    {t: vector_field(e) for t, e in cfg.traction.items()},
                    vector_field(cfg.body_force) if cfg.body_force else None)


def probe_indices(problem: MacroProblem, probes: dict) -> dict:
    """Nearest reference quadrature point (lowest index on ties) per named probe."""
    X = problem.disc.qp_coordinates()
    return {name: int(np.argmin(np.linalg.norm(X - np.asarray(xy), axis=1)))
            for name, xy in probes.items()}


def _element_average(problem: MacroProblem, values: np.ndarray) -> np.ndarray:
    out = np.zeros((problem.mesh.n_elements,) + values.shape[1:])
    k = 0
    for b in problem.disc.blocks:
        n = len(b.conn) * b.nq
        out[b.ids] = values[k:k + n].reshape((len(b.conn), b.nq) + values.shape[1:]).mean(axis=1)
        k += n
    return out


def _metric_rows(step, it, probes, F, S, A, uq):
    rows = []
    for name, q in probes.items():
        for c, v in zip(_T2, F[q].ravel()):
            rows.append((step, it, name, "F", c, float(v)))
        for c, v in zip(_T2, S[q].ravel()):
            rows.append((step, it, name, "S", c, float(v)))
        for c, v in zip(_T4, A[q].ravel()):
            rows.append((step, it, name, "A", c, float(v)))
        for c, v in zip(("1", "2"), uq[q]):
            rows.append((step, it, name, "u", c, float(v)))
    return rows


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRIC_HEADER) + "\n")
        for s, i, p, qn, c, v in rows:
            fh.write(f"{s},{i},{p},{qn},{c},{v!r}\n")


def read_metrics(path) -> dict:
    """``{(step, iter, probe, quantity): {component: value}}`` from a metrics file."""
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["step"]), int(row["iter"]), row["probe"], row["quantity"])
            out.setdefault(key, {})[row["component"]] = float(row["value"])
    return out


def _backend(cfg: RunConfig, mp: MicroProblem, cell_mesh, n_qp: int, out: Path, timing: dict):
    if cfg.method == "fe2":
        return FE2Backend(mp, n_qp, cfg.n_threads)
    if cfg.method == "csa":
        return CSABackend(mp, cfg.rho, cfg.seed, cfg.strain_metric, cfg.n_threads)
    t0 = time.perf_counter()
    target = resolve_path(cfg, cfg.pod_basis) if cfg.pod_basis else out / "basis.pod"
    checksum = cell_mesh.checksum()
    if cfg.pod_basis and Path(str(target)).exists():
        try:
            basis = load_basis(target, checksum)
        except PODError as exc:
            raise ConfigError(str(exc)) from exc
        timing["snapshots"] = 0.0
    else:
        bank = generate_snapshots(mp, cfg.pod_bounds, cfg.pod_n_steps)
        timing["snapshots"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        basis = build_basis(bank, cfg.delta, dense=cfg.pod_dense, checksum=checksum)
        timing["basis"] = time.perf_counter() - t0
        save_basis(basis, target)
    timing["basis_M"] = basis.M
    timing["basis_N"] = basis.N
    return PODBackend(mp, basis, n_qp)


def run(cfg: RunConfig) -> RunSummary:
    """Execute one configured simulation and write its output tree.

    Raises
    ------
    RunError
        Code 2 for configuration problems, 4 for micro failures. Steps that do
        not converge are reported in the summary (code 3 is left to the caller).
    """
    cfg.validate()
    if cfg.base_dir != "pkg:":
        cfg.base_dir = str(Path(cfg.base_dir).resolve())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    timing: dict = {}
    t_start = time.perf_counter()
    try:
        macro_mesh = load_mesh(resolve_path(cfg, cfg.macro_mesh))
        mp, cell_mesh = _micro_problem(cfg)
        problem = MacroProblem(macro_mesh, _load_case(cfg))
    except (OSError, MeshError, ValueError) as exc:
        raise RunError(2, "config", str(exc)) from exc
    probes = probe_indices(problem, cfg.probes)
    qp_x = problem.disc.qp_coordinates()
    info = {
        "config": format_config(cfg),
        "macro_checksum": macro_mesh.checksum(),
        "micro_checksum": cell_mesh.checksum(),
        "n_qp": problem.n_qp,
        "micro_unknowns": mp.n_red,
        "probes": {k: {"qp": q, "x": qp_x[q].tolist()} for k, q in probes.items()},
    }
    (out / "run.json").write_text(json.dumps(info, indent=2) + "\n")

    rows: list = []
    conv: list[str] = []
    summary = RunSummary(out)
    t_io = 0.0

    def callback(step, it, F, cf, u):
        uq = problem.interpolate(u)
        rows.extend(_metric_rows(step, it, probes, F, cf.S, cf.A, uq))
        last[:] = [F, cf, u]

    def flush():
        _write_metrics(out / "metrics.csv", rows)
        (out / "convergence.log").write_text("".join(conv))
        if cfg.method == "csa":
            (out / "centroids.txt").write_text(backend.registry.table())

    last: list = []
    backend = None
    try:
        backend = _backend(cfg, mp, cell_mesh, problem.n_qp, out, timing)
        t_offline = time.perf_counter() - t_start
        state = MacroState.initial(problem)
        phase = {"backend": 0.0, "assembly": 0.0, "linear": 0.0}
        iters = 0
        for k in range(cfg.n_steps):
            state, log = newton_solve(problem, state, backend, k, cfg.eps_macro,
                                      cfg.max_iter_macro, cfg.patience, callback)
            for key in phase:
                phase[key] += log.times[key]
            iters += log.iterations
            for i, (r, n) in enumerate(zip(log.residuals, log.n_new)):
                conv.append(f"{k} {i} {r!r} {n}\n")
            conv.append(f"# step {k} {log.reason} iterations {log.iterations}\n")
            summary.converged.append(log.converged)
            if log.reason == "inverted":
                flush()
                raise RunError(3, "non_convergence",
                               f"macro deformation inverted in step {k} iteration "
                               f"{log.iterations}")
            if cfg.vtk:
                t0 = time.perf_counter()
                F, cf, u = last
                write_vtk(out / f"step_{k:03d}.vtk", macro_mesh, {"u": u},
                          {"green_strain": _element_average(problem, green_strain(F)),
                           "S": _element_average(problem, cf.S)},
                          title=f"csahomog step {k}")
                t_io += time.perf_counter() - t0
    except ConfigError as exc:
        raise RunError(2, "config", str(exc)) from exc
    except (BackendFailure, CentroidFailure, PODError, MicroError) as exc:
        if backend is not None:
            flush()
        raise RunError(4, "micro_failure", str(exc)) from exc
    total = time.perf_counter() - t_start - t_io
    flush()
    bi = backend.info
    timing.update(phase)
    timing.update({
        "offline": t_offline,
        "total": total,
        "macro_iterations": iters,
        "n_qp": problem.n_qp,
        "micro_solves": bi.steps,
        "fe2_equivalent_solves": iters * problem.n_qp,
        "equilibrium_iterations": bi.equilibrium_iterations,
        "factorizations": bi.factorizations,
        "substeps": bi.substeps,
        "failed_steps": summary.failed_steps,
    })
    if cfg.method == "csa":
        timing["centroids"] = len(backend.registry)
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    summary.timing = timing
    summary.state = state
    summary.backend = backend
    return summary


def _config_from_json(info: dict) -> RunConfig:
    c = info["config"]
    cfg = RunConfig(micro_mesh=c["micro_mesh"], base_dir=c["base_dir"],
                    eps_micro=c["eps_micro"], max_iter_micro=c["max_iter_micro"])
    cfg.materials = {int(k): tuple(v) for k, v in c["materials"].items()}
    return cfg


def _load_run(d) -> tuple[dict, dict]:
    d = Path(d)
    try:
        info = json.loads((d / "run.json").read_text())
        metrics = read_metrics(d / "metrics.csv")
    except (OSError, ValueError, KeyError) as exc:
        raise RunError(2, "config", f"cannot read run directory {d}: {exc}") from exc
    return info, metrics


def _replay(ref_info: dict, trace: list, F_of) -> dict:
    """Re-solve the reference micro problem along a recorded sequence of ``F``."""
    cfg = _config_from_json(ref_info)
    mp, _ = _micro_problem(cfg)
    _, state, _ = micro_step(mp, mp.initial_state(), np.zeros((2, 2)), sensitivities=False)
    out = {}
    for key in trace:
        F = F_of(key)
        if not np.array_equal(F, state.FM):
            g = F @ np.linalg.inv(state.FM) - np.eye(2)
            _, state, _ = micro_step(mp, state, g, sensitivities=False)
        out[key] = (state.coeffs.S.ravel(), state.coeffs.A.ravel())
    return out


def compare(dir_a, dir_b, probes=None, replay: bool = False, out=None) -> dict:
    """Relative and cumulative coefficient errors of run A against reference run B.

    Per component ``|X_A - X_B| / |X_B|`` with the Frobenius norm of the whole
    reference tensor in the denominator; the cumulative error is the running
    sum over macro iterations. Iterations are aligned by ``(step, iter)``.
    With ``replay`` the reference values are recomputed by direct micro solves
    at the deformation gradients recorded in A. The displacement error uses
    the last iterate of each step at each probe.

    Returns ``{probe: {"S": rows, "A": rows, "u": rows}}`` where each row is
    ``(step, iter, component, rel, cum)``. Also writes a CSV (default
    ``<dir_a>/compare.csv``).
    """
    info_a, ma = _load_run(dir_a)
    info_b, mb = _load_run(dir_b)
    if info_a["macro_checksum"] != info_b["macro_checksum"]:
        raise RunError(2, "incompatible", "runs use different macro meshes")
    names = sorted({k[2] for k in ma}) if probes is None else list(probes)
    result: dict = {}
    lines = ["probe,step,iter,quantity,component,rel,cum\n"]
    for p in names:
        keys_a = sorted({(s, i) for (s, i, q, _) in ma if q == p})
        if not keys_a:
            raise RunError(2, "incompatible", f"probe {p} not recorded in {dir_a}")
        if replay:
            def F_of(key, p=p):
                d = ma[key + (p, "F")]
                return np.array([[d["11"], d["12"]], [d["21"], d["22"]]])
            ref = _replay(info_b, keys_a, F_of)
        else:
            ref = {}
            for key in keys_a:
                if key + (p, "S") in mb:
                    ref[key] = (np.array([mb[key + (p, "S")][c] for c in _T2]),
                                np.array([mb[key + (p, "A")][c] for c in _T4]))
        res = {"S": [], "A": [], "u": []}
        for qn, comps, slot in (("S", _T2, 0), ("A", _T4, 1)):
            cum = np.zeros(len(comps))
            for key in keys_a:
                if key not in ref:
                    continue
                xa = np.array([ma[key + (p, qn)][c] for c in comps])
                xb = ref[key][slot]
                nb = np.linalg.norm(xb)
                diff = np.abs(xa - xb)
                rel = np.where(diff == 0, 0.0, diff / nb if nb > 0 else np.inf)
                cum = cum + rel
                for c, r_, s_ in zip(comps, rel, cum):
                    res[qn].append((key[0], key[1], c, float(r_), float(s_)))
        cum = 0.0
        for step in sorted({s for s, _ in keys_a}):
            ia = max(i for s, i in keys_a if s == step)
            ib = [i for (s, i, q, qn) in mb if s == step and q == p and qn == "u"]
            if not ib:
                continue
            ua = np.array([ma[(step, ia, p, "u")][c] for c in ("1", "2")])
            ub = np.array([mb[(step, max(ib), p, "u")][c] for c in ("1", "2")])
            d = float(np.linalg.norm(ua - ub))
            n = float(np.linalg.norm(ub))
            rel = 0.0 if d == 0 else (d / n if n > 0 else float("inf"))
            cum += rel
            res["u"].append((step, ia, "norm", rel, cum))
        for qn, rows in res.items():
            for s, i, c, r_, s_ in rows:
                lines.append(f"{p},{s},{i},{qn},{c},{r_!r},{s_!r}\n")
        result[p] = res
    target = Path(out) if out else Path(dir_a) / "compare.csv"
    target.write_text("".join(lines))
    return result


def parse_matrix(path) -> tuple[RunConfig, list, Path]:
    """Bench matrix: ``base = <config>``, ``out = <dir>``, ``variant.<name> = k=v; k=v``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    base, out, variants = None, None, []
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "base":
            base = value
        elif key == "out":
            out = value
        elif key.startswith("variant."):
            pairs = []
            for item in filter(None, (s.strip() for s in value.split(";"))):
                if "=" not in item:
                    raise ConfigError(f"{path}:{ln}: expected key=value in {item!r}")
                pairs.append(tuple(s.strip() for s in item.split("=", 1)))
            variants.append((key.split(".", 1)[1], pairs))
        else:
            raise ConfigError(f"{path}:{ln}: unknown key {key}")
    if base is None or not variants:
        raise ConfigError(f"{path}: needs base and at least one variant")
    base_path = base if base.startswith("pkg:") else str(path.parent / base)
    out = path.parent / (out or "bench")
    return base_path, variants, out


def bench(matrix_path) -> list[dict]:
    """Run every variant and tabulate timings and counters in ``bench.csv``/``bench.json``."""
    base_path, variants, out = parse_matrix(matrix_path)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    for name, pairs in variants:
        cfg = load_config(base_path)
        for k, v in pairs:
            apply(cfg, k, v, f"variant.{name}: ")
        cfg.out = str(out / name)
        row = {"name": name, "method": cfg.method, "rho": cfg.rho, "delta": cfg.delta,
               "micro_mesh": cfg.micro_mesh}
        try:
            s = run(cfg)
            row["status"] = "ok" if not s.failed_steps else "non_convergence"
            t = s.timing
        except RunError as exc:
            row["status"] = exc.kind
            t = {}
        for key in ("total", "offline", "backend", "assembly", "linear", "micro_solves",
                    "fe2_equivalent_solves", "macro_iterations", "centroids", "basis_M"):
            row[key] = t.get(key)
        table.append(row)
    ref = next((r for r in table if r["method"] == "fe2" and r["status"] == "ok"), None)
    for r in table:
        ok = ref is not None and r["total"] is not None
        r["time_ratio"] = r["total"] / ref["total"] if ok else None
        r["solve_ratio"] = (r["micro_solves"] / ref["micro_solves"]
                            if ok and r["micro_solves"] is not None else None)
    cols = list(table[0])
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        w.writerows(table)
    (out / "bench.json").write_text(json.dumps(table, indent=2) + "\n")
    return table

