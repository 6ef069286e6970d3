"""Configuration files, the end-to-end pipeline and its reproducible artifacts.

A run goes through the stages hormander, control, reach, certify and mixing
in that order. A stage that fails to establish its property stops the run
with a partial report; files written by earlier stages are kept. Every random
stream derives from the configured seed, so two runs of one configuration
write byte-identical files.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import expr
from .control import (ControlError, ExactControl, approach, build_frame, exact_control_f, psi_inverse,
                      solve_durations)
from .fields import MAX_BRACKET_DEPTH, bracket_family, hormander_rank
from .flow import DEFAULT_STEP, ControlSystem, time_one_map
from .geometry import make_manifold
from .markov import estimate_coupling, estimate_minorization, estimate_recurrence
from .mixing import NotCertified, end_to_end_mixing
from .noise import NoiseLaw

STAGES = ("hormander", "control", "reach", "certify", "mixing")
STREAM_FRAME, STREAM_TARGETS, STREAM_REACH = 11, 12, 13


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# -- configuration -----------------------------------------------------------------

def _number(text: str, path: str) -> float:
    try:
        e = expr.parse(text, 0)
    except expr.ExprError as err:
        raise ConfigError(path, str(err)) from None
    return float(e(()))


def _vector(text: str, path: str) -> list[float]:
    return [_number(t, path) for t in text.split(",")]


def _points(text: str, path: str) -> list[list[float]]:
    return [_vector(t, path) for t in text.split(";") if t.strip()]


@dataclass
class ExperimentConfig:
    seed: int
    out: str
    manifold: dict
    drift: list[str]
    controls: list[list[str]]
    noise: dict
    step: float
    certification: dict
    mixing: dict
    control: dict
    text: str = field(default="", repr=False)
    noise_seed: int | None = None
    horizon: int = 100

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def make_manifold(self):
        return make_manifold(**self.manifold)

    def make_system(self) -> ControlSystem:
        return ControlSystem.from_exprs(self.make_manifold(), self.drift, self.controls)

    def make_law(self) -> NoiseLaw:
        seed = self.noise_seed if self.noise_seed is not None else self.seed
        return NoiseLaw(channels=max(1, len(self.controls)), seed=seed, **self.noise)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        c = ExperimentConfig(**{**self.__dict__, "seed": int(seed)})
        c.text = self.text + f"\n# seed override {seed}\n"
        return c

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.pop("text")
        return d


_SCHEMA = {
    "certification": dict(u_hat=_vector, delta=float, m=int, grid=int, samples=int,
                          coupling_samples=int, pairs=int, mesh=int),
    "mixing": dict(horizon=int, starts=_points, samples=int, mesh=int, pool=int),
    "control": dict(tau=float, targets=int, reach_grid=int, eps=float, budget=int),
}


def _section(cp: configparser.ConfigParser, name: str) -> configparser.SectionProxy:
    if not cp.has_section(name):
        raise ConfigError(name, "missing section")
    return cp[name]


def _get(sec, key: str, kind, path: str, default=None):
    if key not in sec:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing key")
        return default
    raw = sec[key].strip()
    full = f"{path}.{key}"
    if kind in (_vector, _points):
        return kind(raw, full)
    try:
        return kind(raw) if kind is not float else _number(raw, full)
    except ValueError:
        raise ConfigError(full, f"expected {kind.__name__}, got {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate an INI experiment configuration."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError("<file>", str(err).splitlines()[0]) from None

    run = _section(cp, "run")
    if "seed" not in run:
        raise ConfigError("run.seed", "missing key (a seed is mandatory)")
    seed = _get(run, "seed", int, "run")
    if seed < 0:
        raise ConfigError("run.seed", "must be nonnegative")
    out = run.get("out", "out").strip()

    ms = _section(cp, "manifold")
    kind = ms.get("kind", "").strip()
    if kind not in ("torus", "circle", "sphere"):
        raise ConfigError("manifold.kind", f"unknown manifold {kind!r}")
    manifold = dict(kind=kind)
    if "dim" in ms:
        manifold["dim"] = _get(ms, "dim", int, "manifold")
    if "period" in ms:
        manifold["period"] = _get(ms, "period", float, "manifold")
    if "radius" in ms:
        manifold["radius"] = _get(ms, "radius", float, "manifold")

    fs = _section(cp, "fields")
    if "v0" not in fs:
        raise ConfigError("fields.V0", "missing key (the drift)")
    names = sorted((k for k in fs if k.startswith("v")), key=lambda k: (len(k), k))
    for k in names:
        if not k[1:].isdigit():
            raise ConfigError(f"fields.{k}", "field keys are V0, V1, ...")
    if [int(k[1:]) for k in names] != list(range(len(names))):
        raise ConfigError("fields", "field keys must be V0, V1, ... without gaps")
    drift = [t.strip() for t in fs["v0"].split(",")]
    controls = [[t.strip() for t in fs[k].split(",")] for k in names[1:]]
    ns = _section(cp, "noise")
    noise = dict(level=_get(ns, "level", int, "noise"), sigma0=_get(ns, "sigma0", float, "noise"),
                 decay=_get(ns, "decay", float, "noise"))
    channels = _get(ns, "channels", int, "noise", max(1, len(controls)))
    if controls and channels != len(controls):
        raise ConfigError("noise.channels", f"must equal the number of controlled fields ({len(controls)})")
    noise_seed = _get(ns, "seed", int, "noise", -1)
    fl = _section(cp, "flow")
    step = _get(fl, "step", float, "flow", DEFAULT_STEP)
    horizon = _get(fl, "horizon", int, "flow", 100)

    blocks = {}
    for name, keys in _SCHEMA.items():
        sec = _section(cp, name)
        blocks[name] = {k: _get(sec, k, kind, name) for k, kind in keys.items()}

    cfg = ExperimentConfig(seed, out, manifold, drift, controls, noise, step,
                           blocks["certification"], blocks["mixing"], blocks["control"], text,
                           noise_seed if noise_seed >= 0 else None, horizon)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    try:
        M = cfg.make_manifold()
    except ValueError as err:
        raise ConfigError("manifold", str(err)) from None
    for path, exprs in [(f"fields.V{j}", c) for j, c in enumerate([cfg.drift, *cfg.controls])]:
        if len(exprs) != M.ambient_dim:
            raise ConfigError(path, f"{M.kind} needs {M.ambient_dim} components, got {len(exprs)}")
        for e in exprs:
            try:
                expr.parse(e, M.ambient_dim)
            except expr.ExprError as err:
                raise ConfigError(path, str(err)) from None
    try:
        cfg.make_law()
    except ValueError as err:
        raise ConfigError("noise", str(err)) from None
    c = cfg.certification
    if len(c["u_hat"]) != M.ambient_dim:
        raise ConfigError("certification.u_hat", f"needs {M.ambient_dim} coordinates")
    positive = [("flow.step", cfg.step), ("certification.delta", c["delta"]), ("certification.m", c["m"]),
                ("certification.grid", c["grid"]), ("certification.samples", c["samples"]),
                ("certification.coupling_samples", c["coupling_samples"]), ("certification.pairs", c["pairs"]),
                ("certification.mesh", c["mesh"]), ("mixing.horizon", cfg.mixing["horizon"]),
                ("mixing.samples", cfg.mixing["samples"]), ("mixing.mesh", cfg.mixing["mesh"]),
                ("mixing.pool", cfg.mixing["pool"]), ("control.eps", cfg.control["eps"]),
                ("control.budget", cfg.control["budget"])]
    for path, v in positive:
        if not v > 0:
            raise ConfigError(path, "must be positive")
    if not 0 < cfg.control["tau"] < 1:
        raise ConfigError("control.tau", "must lie in (0, 1)")
    if any(len(p) != M.ambient_dim for p in cfg.mixing["starts"]) or len(cfg.mixing["starts"]) < 2:
        raise ConfigError("mixing.starts", f"need at least two points with {M.ambient_dim} coordinates")


BUNDLED = ("benchmark-t2.cfg",)


def bundled_config(name: str) -> str:
    return resources.files("ctrlmix").joinpath("configs", name).read_text()


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a configuration file; bare names of bundled configurations also work."""
    p = Path(path)
    if p.exists():
        return parse_config(p.read_text())
    if str(path) in BUNDLED:
        return parse_config(bundled_config(str(path)))
    raise ConfigError(str(path), "no such file")


# -- artifacts ------------------------------------------------------------------------

def _clean(x):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def series_csv(series) -> str:
    buf = io.StringIO()
    buf.write("k,tv\n")
    for k, v in series:
        buf.write(f"{int(k)},{float(v)!r}\n")
    return buf.getvalue()


class ArtifactWriter:
    """Writes files into one directory and records their sha256."""

    def __init__(self, out: str | Path):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest: dict[str, str] = {}

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text)
        tmp.replace(path)
        self.manifest[name] = hashlib.sha256(text.encode()).hexdigest()
        return path


# -- stages ---------------------------------------------------------------------------

def stage_hormander(cfg: ExperimentConfig, system: ControlSystem) -> dict:
    u_hat = system.manifold.project(np.array(cfg.certification["u_hat"]))
    d = system.manifold.dim
    if system.n == 0:
        return dict(ok=False, rank=0, dim=d, depth=0, basis=[], words=[],
                    message=f"rank 0 < {d}: no controlled fields")
    res = None
    for depth in range(MAX_BRACKET_DEPTH + 1):
        fam = bracket_family(system.fields, depth, seed=cfg.seed)
        res = hormander_rank(fam, u_hat)
        if res.full_rank:
            break
    return dict(ok=res.full_rank, rank=res.rank, dim=res.dim, depth=res.depth, basis=res.basis,
                words=fam.words, singular_values=res.singular_values, message=res.message)


def stage_control(cfg, system, law, h, writer) -> dict:
    rng = law.stream(STREAM_FRAME)
    frame = build_frame(system, cfg.certification["u_hat"], rng, tau=cfg.control["tau"], h=h)
    ec = ExactControl(frame)
    targets = ec.sample_targets(law.stream(STREAM_TARGETS), cfg.control["targets"])
    M = system.manifold
    residuals, iterations = [], []
    for v in targets:
        iterations.append(solve_durations(frame, psi_inverse(frame, v)).iterations)
        end = time_one_map(system, frame.u_hat, exact_control_f(frame, v), h)
        residuals.append(float(M.dist(end, v)))
    writer.write("control.csv", ec(ec.center).to_csv())
    return dict(ok=max(residuals) <= 1e-6, frame=frame.to_dict(), center=ec.center, radius=ec.radius,
                targets=len(targets), max_residual=max(residuals), max_iterations=max(iterations))


def reach_grid(system, u_hat, eps, law, G, budget, h, seed_key=STREAM_REACH) -> list[dict]:
    rng = law.stream(seed_key)
    out = []
    for u0 in system.manifold.grid(G):
        try:
            r = approach(system, u0, u_hat, eps, law, rng, budget, h=h)
            out.append(dict(start=u0, reached=True, m=r.m, distance=r.distance))
        except ControlError as err:
            out.append(dict(start=u0, reached=False, m=None, distance=None, error=str(err)))
    return out


def stage_reach(cfg, system, law, h) -> dict:
    c = cfg.control
    rows = reach_grid(system, cfg.certification["u_hat"], c["eps"], law, c["reach_grid"], c["budget"], h)
    ok = all(r["reached"] for r in rows)
    return dict(ok=ok, eps=c["eps"], budget=c["budget"], starts=rows,
                max_steps=max((r["m"] for r in rows if r["reached"]), default=None))


def stage_certify(cfg, system, law, h, threads: int) -> tuple[dict, tuple]:
    c = cfg.certification
    M = system.manifold
    rec = estimate_recurrence(system, c["u_hat"], c["delta"], c["m"], c["grid"], c["samples"], law, h, threads)
    part = M.mesh(c["mesh"])
    cpl = estimate_coupling(system, c["u_hat"], c["delta"], c["pairs"], c["coupling_samples"], part, law, h,
                            threads)
    mnr = estimate_minorization(system, c["u_hat"], c["delta"], part, c["coupling_samples"], law, h=h,
                                workers=threads)
    ok = rec.certified and cpl.certified
    return dict(ok=ok, recurrence=rec.to_dict(), coupling=cpl.to_dict(), minorization=mnr.to_dict()), (rec, cpl)


def stage_mixing(cfg, system, law, h, estimates, writer) -> dict:
    mx = cfg.mixing
    rec, cpl = estimates
    rep = end_to_end_mixing(system, law, rec, cpl, mx["starts"], mx["samples"], mx["horizon"],
                            system.manifold.mesh(mx["mesh"]), mx["pool"], h)
    writer.write("certificate.json", dumps(rep.certificate.to_dict()))
    writer.write("tv_series.csv", series_csv(rep.tv_series))
    fit = rep.fit.to_dict() if rep.fit is not None else None
    ok = rep.fit is not None and rep.fit.mixing_detected and rep.contraction_ok
    out = dict(ok=ok, certificate=rep.certificate.to_dict(), fit=fit, floor=rep.floor,
               contraction=dict(tv=rep.contraction_tv, bound=rep.contraction_bound, ok=rep.contraction_ok))
    if rep.fit is None:
        out["error"] = f"fewer than 4 TV values above the noise floor {rep.floor:.3g}"
    elif not rep.fit.mixing_detected:
        out["error"] = "no mixing detected in the TV series"
    elif not rep.contraction_ok:
        out["error"] = "empirical contraction exceeds the certified bound"
    return out


# -- orchestration ----------------------------------------------------------------------

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CERTIFIED, EXIT_INTERNAL = 0, 2, 3, 4


@dataclass
class RunReport:
    config: dict
    config_sha256: str
    seed: int
    stages: dict
    manifest: dict
    out: str

    @property
    def completed(self) -> bool:
        return all(self.stages.get(s, {}).get("status") == "ok" for s in STAGES)

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.completed else EXIT_NOT_CERTIFIED

    @property
    def certificate(self) -> dict | None:
        return self.stages.get("mixing", {}).get("certificate")

    def to_dict(self) -> dict:
        return dict(config=self.config, config_sha256=self.config_sha256, seed=self.seed,
                    stages=self.stages, manifest=self.manifest, completed=self.completed)

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, threads: int = 1) -> RunReport:
    """Run all stages; stop at the first stage that does not establish its property."""
    writer = ArtifactWriter(out if out is not None else cfg.out)
    system, law, h = cfg.make_system(), cfg.make_law(), cfg.step
    stages: dict[str, dict] = {}
    estimates = None

    def record(name, result):
        result = dict(result)
        ok = result.pop("ok")
        stages[name] = dict(status="ok" if ok else "failed", **result)
        return ok

    runners = {
        "hormander": lambda: stage_hormander(cfg, system),
        "control": lambda: stage_control(cfg, system, law, h, writer),
        "reach": lambda: stage_reach(cfg, system, law, h),
        "certify": lambda: stage_certify(cfg, system, law, h, threads),
        "mixing": lambda: stage_mixing(cfg, system, law, h, estimates, writer),
    }
    for name in STAGES:
        try:
            res = runners[name]()
        except (ControlError, NotCertified) as err:
            res = dict(ok=False, error=str(err))
        if isinstance(res, tuple):
            res, estimates = res
        if not record(name, res):
            break
    report = RunReport(cfg.to_dict(), cfg.sha256, cfg.seed, stages, dict(writer.manifest), str(writer.out))
    writer.write("report.json", report.to_json())
    return report
