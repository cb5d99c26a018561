"""YAML scenario files -> :class:`~progfd.simulator.ScenarioConfig`.

Schema (all sections optional except ``robots``, ``tasks`` and ``team.S``)::

    name: noise
    seed: 0
    dt: 0.1
    steps: 200
    sigma_xy: 0.007
    completion_radius: 0.02
    robots: {starts: [[x, y], ...]}
    tasks:  {goals:  [[x, y], ...]}
    team:
      S: [[0, 1, 0], ...]           # N x M capability matrix
      base_weights: distance        # or an explicit N x M matrix
      weight_offset: [0, 0, 0, 1]   # per-robot reserve cost added to base_weights
      base_slack_cost: 5.0          # scalar or per-robot list
      kappa: 1.0
      rho: 1.0
      delta_max: 1.0
      coverage_cost: 10.0
      u_max: 0.05
    policy:    {kappa_s, M_f, rho_s, lambda, cooldown_steps, periodic_resolve_every, gated_tasks}
    detector:  {alpha, window_w, beta, stall_L, gamma, K_s, K_f, K_out, eta,
                allow_fault_recovery, use_stall_gate, use_uncertainty_gate, min_fill}
    estimator: {variant: CV, adaptive_q: false, P0: 1.0e-4, Q0_base: [[..], [..]], L_min: 0.02}
    faults:
      - {kind: NoiseIncrease, robot: 2, start_step: 25, end_step: null, magnitude: 0.013}

Errors are raised as :class:`ConfigError` with ``file:line`` prefixes.
"""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import estimator as est
from .allocator import HealthPolicy, TeamSpec
from .detector import DetectorConfig
from .simulator import FaultKind, FaultSpec, ScenarioConfig

SCENARIOS = ("nominal", "noise", "bias", "dropout", "abandonment")

_TOP = {
    "name", "seed", "dt", "steps", "sigma_xy", "completion_radius",
    "robots", "tasks", "team", "policy", "detector", "estimator", "faults",
}
_TEAM = {"S", "base_weights", "weight_offset", "base_slack_cost", "kappa", "rho", "delta_max", "coverage_cost", "u_max"}
_POLICY = {"kappa_s", "M_f", "rho_s", "lambda", "cooldown_steps", "periodic_resolve_every", "gated_tasks"}
_DETECTOR = {
    "alpha", "window_w", "beta", "stall_L", "gamma", "K_s", "K_f", "K_out", "eta",
    "allow_fault_recovery", "use_stall_gate", "use_uncertainty_gate", "min_fill",
}
_ESTIMATOR = {"variant", "adaptive_q", "P0", "Q0_base", "L_min"}
_FAULT = {"kind", "robot", "start_step", "end_step", "magnitude", "bias_profile"}


class ConfigError(ValueError):
    def __init__(self, message: str, source: str | None = None, line: int | None = None):
        self.message = message
        self.source = source
        self.line = line
        where = source or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


def scenario_path(name: str) -> Path:
    """Path of a shipped example scenario."""
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    return Path(str(resources.files("progfd") / "scenarios" / f"{name}.yaml"))


# --- line bookkeeping ---------------------------------------------------------


def _line_map(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _line_map(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


_MISSING = object()


class _Reader:
    def __init__(self, data: dict, lines: dict, source: str, overridden: set):
        self.data = data
        self.lines = lines
        self.source = source
        self.overridden = overridden

    def fail(self, path, message):
        path = tuple(path)
        dotted = ".".join(str(p) for p in path)
        for k in range(len(path), -1, -1):
            if path[:k] in self.overridden:
                raise ConfigError(f"{dotted}: {message} (from override)", self.source)
            if path[:k] in self.lines:
                raise ConfigError(f"{dotted}: {message}" if dotted else message, self.source, self.lines[path[:k]])
        raise ConfigError(f"{dotted}: {message}", self.source)

    def fail_section(self, path, exc: Exception):
        """Report a dataclass validation error at the first field it names."""
        message = str(exc)
        section = self.node(path)
        first = message.split(";")[0].split()[0] if message else ""
        first = "lambda" if first == "lam" else first
        if isinstance(section, dict) and first in section:
            self.fail(tuple(path) + (first,), message.split(";")[0].split(" ", 1)[1])
        self.fail(path, message)

    def node(self, path):
        cur = self.data
        for p in path:
            if isinstance(cur, dict) and p in cur:
                cur = cur[p]
            elif isinstance(cur, list) and isinstance(p, int) and p < len(cur):
                cur = cur[p]
            else:
                return _MISSING
        return cur

    def section(self, path, allowed) -> dict:
        v = self.node(path)
        if v is _MISSING or v is None:
            return {}
        if not isinstance(v, dict):
            self.fail(path, "expected a mapping")
        for key in v:
            if key not in allowed:
                self.fail(tuple(path) + (key,), f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return v

    def scalar(self, path, kind, default=None, required=False):
        v = self.node(path)
        if v is _MISSING or v is None:
            if required:
                self.fail(path, "required value missing")
            return default
        if kind is bool:
            if not isinstance(v, bool):
                self.fail(path, f"expected true/false, got {v!r}")
            return v
        if kind is int:
            if isinstance(v, bool) or not isinstance(v, int):
                self.fail(path, f"expected an integer, got {v!r}")
            return v
        if kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self.fail(path, f"expected a number, got {v!r}")
            return float(v)
        if kind is str:
            if not isinstance(v, str):
                self.fail(path, f"expected a string, got {v!r}")
            return v
        raise TypeError(kind)

    def matrix(self, path, rows=None, cols=None, required=False):
        v = self.node(path)
        if v is _MISSING or v is None:
            if required:
                self.fail(path, "required value missing")
            return None
        try:
            arr = np.array(v, dtype=float)
        except (TypeError, ValueError):
            self.fail(path, "expected a numeric matrix")
        if arr.ndim != 2:
            self.fail(path, "expected a list of equal-length rows")
        if rows is not None and arr.shape[0] != rows:
            self.fail(path, f"expected {rows} rows, got {arr.shape[0]}")
        if cols is not None and arr.shape[1] != cols:
            self.fail(path, f"expected {cols} columns, got {arr.shape[1]}")
        if not np.all(np.isfinite(arr)):
            self.fail(path, "entries must be finite")
        return arr


# --- overrides ----------------------------------------------------------------


def apply_overrides(data: dict, overrides) -> tuple[dict, set]:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars/lists."""
    data = copy.deepcopy(data)
    touched = set()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", "<override>")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ConfigError(f"override {item!r} has an empty key", "<override>")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}", "<override>") from None
        path = []
        cur = data
        for p in parts[:-1]:
            p = int(p) if isinstance(cur, list) and p.isdigit() else p
            path.append(p)
            if isinstance(cur, list):
                if not isinstance(p, int) or p >= len(cur):
                    raise ConfigError(f"override {item!r}: index {p} out of range", "<override>")
                cur = cur[p]
            else:
                cur = cur.setdefault(p, {})
                if cur is None:
                    raise ConfigError(f"override {item!r}: {'.'.join(map(str, path))} is empty", "<override>")
        last = parts[-1]
        if isinstance(cur, list):
            if not last.isdigit() or int(last) >= len(cur):
                raise ConfigError(f"override {item!r}: index {last} out of range", "<override>")
            last = int(last)
        elif not isinstance(cur, dict):
            raise ConfigError(f"override {item!r}: {'.'.join(map(str, path))} is not a section", "<override>")
        cur[last] = value
        touched.add(tuple(path) + (last,))
    return data, touched


# --- building -----------------------------------------------------------------


def _build(r: _Reader) -> ScenarioConfig:
    if not isinstance(r.data, dict):
        r.fail((), "top level must be a mapping")
    r.section((), _TOP)
    r.section(("robots",), {"starts"})
    r.section(("tasks",), {"goals"})
    starts = r.matrix(("robots", "starts"), cols=2, required=True)
    goals = r.matrix(("tasks", "goals"), cols=2, required=True)
    N, M = starts.shape[0], goals.shape[0]
    for path, pts in ((("robots", "starts"), starts), (("tasks", "goals"), goals)):
        if np.any(pts < 0) or np.any(pts > 1):
            r.fail(path, "positions must lie in the unit workspace [0, 1]^2")

    # team
    team = r.section(("team",), _TEAM)
    S = r.matrix(("team", "S"), rows=N, cols=M, required=True)
    bw = team.get("base_weights", "distance")
    if bw == "distance":
        base_weights = np.linalg.norm(starts[:, None, :] - goals[None, :, :], axis=2)
    elif isinstance(bw, str):
        r.fail(("team", "base_weights"), "expected 'distance' or an N x M matrix")
    else:
        base_weights = r.matrix(("team", "base_weights"), rows=N, cols=M)
    off = r.node(("team", "weight_offset"))
    if off is not _MISSING and off is not None:
        off_arr = np.asarray(off, dtype=float) if isinstance(off, list) else None
        if off_arr is None or off_arr.shape != (N,):
            r.fail(("team", "weight_offset"), f"expected a list of {N} numbers")
        base_weights = base_weights + off_arr[:, None]
    sc = r.node(("team", "base_slack_cost"))
    if sc is _MISSING or sc is None:
        slack = np.full(N, 5.0)
    elif isinstance(sc, list):
        slack = np.asarray(sc, dtype=float)
        if slack.shape != (N,):
            r.fail(("team", "base_slack_cost"), f"expected {N} values")
    else:
        slack = np.full(N, r.scalar(("team", "base_slack_cost"), float))
    team_kw = {}
    for key in ("kappa", "rho", "delta_max", "coverage_cost", "u_max"):
        v = r.scalar(("team", key), float)
        if v is not None:
            team_kw[key] = v
    try:
        team_spec = TeamSpec(S=S, base_weights=base_weights, base_slack_cost=slack, **team_kw)
    except ValueError as exc:
        r.fail_section(("team",), exc)

    # policy
    pol = r.section(("policy",), _POLICY)
    pol_kw = {}
    for key, kind in (("kappa_s", float), ("M_f", float), ("rho_s", float), ("lambda", float),
                      ("cooldown_steps", int), ("periodic_resolve_every", int)):
        v = r.scalar(("policy", key), kind)
        if v is not None:
            pol_kw["lam" if key == "lambda" else key] = v
    if pol.get("gated_tasks") is not None:
        gt = pol["gated_tasks"]
        if not isinstance(gt, list) or not all(isinstance(t, int) and 0 <= t < M for t in gt):
            r.fail(("policy", "gated_tasks"), f"expected a list of task indices in [0, {M})")
        pol_kw["gated_tasks"] = tuple(gt)
    try:
        policy = HealthPolicy(**pol_kw)
    except ValueError as exc:
        r.fail_section(("policy",), exc)

    # detector
    r.section(("detector",), _DETECTOR)
    det_kw = {}
    kinds = {
        "alpha": float, "window_w": int, "beta": float, "stall_L": int, "gamma": float, "K_s": int,
        "K_f": int, "K_out": int, "eta": float, "allow_fault_recovery": bool, "use_stall_gate": bool,
        "use_uncertainty_gate": bool, "min_fill": int,
    }
    for key, kind in kinds.items():
        v = r.scalar(("detector", key), kind)
        if v is not None:
            det_kw[key] = v
    try:
        detector = DetectorConfig(**det_kw)
    except ValueError as exc:
        r.fail_section(("detector",), exc)

    # estimator
    r.section(("estimator",), _ESTIMATOR)
    variant = r.scalar(("estimator", "variant"), str, est.CV)
    if variant not in (est.CV, est.RT):
        r.fail(("estimator", "variant"), "expected CV or RT")
    adaptive = r.scalar(("estimator", "adaptive_q"), bool, False)
    p0 = r.node(("estimator", "P0"))
    if p0 is _MISSING or p0 is None:
        P0 = np.diag([1e-4, 1e-4])
    elif isinstance(p0, list):
        P0 = r.matrix(("estimator", "P0"), rows=2, cols=2)
    else:
        P0 = np.eye(2) * r.scalar(("estimator", "P0"), float)
    Q0 = r.matrix(("estimator", "Q0_base"), rows=2, cols=2)
    Q0 = est.Q0_BASE.copy() if Q0 is None else Q0
    L_min = r.scalar(("estimator", "L_min"), float, est.L_MIN)
    for path, mat in ((("estimator", "P0"), P0), (("estimator", "Q0_base"), Q0)):
        if not np.allclose(mat, mat.T) or np.linalg.eigvalsh(mat).min() < -1e-12:
            r.fail(path, "must be symmetric positive semidefinite")
    if not L_min > 0:
        r.fail(("estimator", "L_min"), "must be positive")

    # faults
    faults = []
    raw_faults = r.node(("faults",))
    if raw_faults is not _MISSING and raw_faults is not None:
        if not isinstance(raw_faults, list):
            r.fail(("faults",), "expected a list of fault entries")
        for j in range(len(raw_faults)):
            base = ("faults", j)
            r.section(base, _FAULT)
            kind = r.scalar(base + ("kind",), str, required=True)
            try:
                kind = FaultKind(kind)
            except ValueError:
                r.fail(base + ("kind",), f"unknown fault kind (choose from {', '.join(k.value for k in FaultKind)})")
            robot = r.scalar(base + ("robot",), int, required=True)
            if not 0 <= robot < N:
                r.fail(base + ("robot",), f"robot index must lie in [0, {N})")
            try:
                faults.append(
                    FaultSpec(
                        kind=kind,
                        robot=robot,
                        start_step=r.scalar(base + ("start_step",), int, required=True),
                        end_step=r.scalar(base + ("end_step",), int),
                        magnitude=r.scalar(base + ("magnitude",), float, 0.0),
                        bias_profile=r.scalar(base + ("bias_profile",), str, "ramp"),
                    )
                )
            except ValueError as exc:
                r.fail(base, str(exc))

    top = {}
    for key, kind in (("name", str), ("seed", int), ("dt", float), ("steps", int),
                      ("sigma_xy", float), ("completion_radius", float)):
        v = r.scalar((key,), kind)
        if v is not None:
            top[key] = v
    if top.get("dt", 0.1) <= 0:
        r.fail(("dt",), "must be positive")
    if top.get("steps", 1) < 1:
        r.fail(("steps",), "must be >= 1")
    if top.get("sigma_xy", 0.0) < 0:
        r.fail(("sigma_xy",), "must be non-negative")
    if top.get("completion_radius", 0.02) <= 0:
        r.fail(("completion_radius",), "must be positive")
    try:
        return ScenarioConfig(
            robot_starts=starts,
            task_goals=goals,
            team=team_spec,
            policy=policy,
            detector=detector,
            faults=faults,
            kf_variant=variant,
            adaptive_q=adaptive,
            P0=P0,
            Q0_base=Q0,
            L_min=L_min,
            **top,
        )
    except ValueError as exc:
        r.fail((), str(exc))


def parse_config(text: str, source: str = "<string>", overrides=()) -> ScenarioConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", source,
                          None if mark is None else mark.line + 1) from None
    if node is None:
        raise ConfigError("empty configuration", source)
    touched: set = set()
    if isinstance(data, dict):
        data, touched = apply_overrides(data, overrides)
    return _build(_Reader(data, _line_map(node), source, touched))


def load_config(path, overrides=()) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError("config file not found", str(path)) from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path), overrides)


# --- canonical form -----------------------------------------------------------


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Resolved configuration as plain data (explicit weights, all defaults filled)."""
    t, p, d = cfg.team, cfg.policy, cfg.detector
    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "dt": cfg.dt,
        "steps": cfg.steps,
        "sigma_xy": cfg.sigma_xy,
        "completion_radius": cfg.completion_radius,
        "robots": {"starts": cfg.robot_starts.tolist()},
        "tasks": {"goals": cfg.task_goals.tolist()},
        "team": {
            "S": t.S.tolist(),
            "base_weights": t.base_weights.tolist(),
            "base_slack_cost": np.asarray(t.base_slack_cost).tolist(),
            "kappa": t.kappa,
            "rho": t.rho,
            "delta_max": t.delta_max,
            "coverage_cost": t.coverage_cost,
            "u_max": t.u_max,
        },
        "policy": {
            "kappa_s": p.kappa_s,
            "M_f": p.M_f,
            "rho_s": p.rho_s,
            "lambda": p.lam,
            "cooldown_steps": p.cooldown_steps,
            "periodic_resolve_every": p.periodic_resolve_every,
            "gated_tasks": None if p.gated_tasks is None else list(p.gated_tasks),
        },
        "detector": {
            "alpha": d.alpha,
            "window_w": d.window_w,
            "beta": d.beta,
            "stall_L": d.stall_L,
            "gamma": d.gamma,
            "K_s": d.K_s,
            "K_f": d.K_f,
            "K_out": d.K_out,
            "eta": d.eta,
            "allow_fault_recovery": d.allow_fault_recovery,
            "use_stall_gate": d.use_stall_gate,
            "use_uncertainty_gate": d.use_uncertainty_gate,
            "min_fill": d.min_fill,
        },
        "estimator": {
            "variant": cfg.kf_variant,
            "adaptive_q": cfg.adaptive_q,
            "P0": cfg.P0.tolist(),
            "Q0_base": cfg.Q0_base.tolist(),
            "L_min": cfg.L_min,
        },
        "faults": [
            {
                "kind": f.kind.value,
                "robot": f.robot,
                "start_step": f.start_step,
                "end_step": f.end_step,
                "magnitude": f.magnitude,
                "bias_profile": f.bias_profile,
            }
            for f in cfg.faults
        ],
    }


def config_hash(cfg: ScenarioConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
