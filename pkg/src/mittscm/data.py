"""Experiment presets and plain-text persistence.

Every file starts with a versioned header line ``# mittscm-<kind> v<N>``.
Floats are written with ``repr`` so a load followed by a save reproduces
the file byte for byte.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import fem
from .fem import NodalField
from .forward import MU0, ExcitationPlan, ForwardModel, MeasurementSet, make_synthetic_measurements
from .mesh import Annulus, Disk, Mesh, PhantomSpec, build_disk_mesh, indicator_field
from .reg import RegParams
from .tscm import IterationRecord, RunLog, StageRecord, TscmConfig

FORMAT_VERSION = 1
NOISE_LADDER = (0.01, 0.05, 0.10, 0.20)
PathLike = Union[str, Path]


class FormatError(ValueError):
    """Malformed, truncated or wrong-version file; the message names the position."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _header(kind: str) -> str:
    return f"# mittscm-{kind} v{FORMAT_VERSION}"


def _check_header(path, first: Optional[str], kind: str) -> None:
    if first is None:
        raise FormatError(path, 1, "empty file")
    prefix = f"# mittscm-{kind} v"
    if not first.startswith(prefix):
        raise FormatError(path, 1, f"expected header {_header(kind)!r}")
    version = first[len(prefix):].strip()
    if version != str(FORMAT_VERSION):
        raise FormatError(path, 1, f"unsupported {kind} format version {version} (expected {FORMAT_VERSION})")


# --------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class MeshParams:
    radius: float = 1.0
    target_h: float = 0.1
    n_arcs: int = 28
    data_refinement: int = 2  # data mesh uses target_h / data_refinement

    def build(self) -> Mesh:
        return build_disk_mesh(self.radius, self.target_h, self.n_arcs)

    def build_data_mesh(self) -> Optional[Mesh]:
        if self.data_refinement <= 1:
            return None
        return build_disk_mesh(self.radius, self.target_h / self.data_refinement, self.n_arcs)


@dataclass(frozen=True)
class ExperimentPreset:
    """Everything needed to generate data and run one experiment.

    ``kappa`` fixes the nondimensional coupling: the solver uses
    ``mu_inv = 1`` and ``omega_eff = omega * kappa / (omega_0 * sigma1)``,
    so ``omega_eff * sigma1 = kappa`` at the lowest frequency.  With
    ``kappa = None`` the model runs in SI units (``mu_inv = 1 / mu_0``).
    """

    name: str
    phantom: PhantomSpec
    plan: ExcitationPlan
    noise_level: float = 0.01
    noise_ladder: tuple[float, ...] = NOISE_LADDER
    mesh: MeshParams = MeshParams()
    kappa: Optional[float] = 0.1
    tscm: TscmConfig = TscmConfig()
    reg: RegParams = RegParams()
    eps: Optional[float] = None  # smoothing constants; None means h^2
    seed: int = 1
    seeds: tuple[int, ...] = (1, 2, 3)
    n_lambda: tuple[int, ...] = ()
    initial_guess: Optional[PhantomSpec] = None

    @property
    def omega_scale(self) -> float:
        if self.kappa is None:
            return 1.0
        return self.kappa / (min(self.plan.omegas) * self.phantom.sigma1)

    @property
    def mu_inv(self) -> float:
        return 1.0 / MU0 if self.kappa is None else 1.0

    def reg_params(self, mesh: Mesh) -> RegParams:
        eps = mesh.h**2 if self.eps is None else self.eps
        return replace(self.reg, eps_heaviside=eps, eps_tv=eps)

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentPreset":
        """Apply ``{"section.key": text}`` overrides through the file format."""
        cp = _to_config(self)
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if not key or not cp.has_section(section):
                raise KeyError(f"unknown preset key {dotted!r}")
            if not cp.has_option(section, key) and not key.startswith("inclusion"):
                raise KeyError(f"unknown preset key {dotted!r}")
            cp.set(section, key, value)
        return _from_config(cp, "<overrides>")


@dataclass(eq=False)
class Problem:
    """A preset made concrete: meshes, model, parameters and the exact field."""

    preset: ExperimentPreset
    mesh: Mesh
    data_mesh: Optional[Mesh]
    model: ForwardModel
    params: RegParams
    config: TscmConfig
    exact_sigma: NodalField

    def measurements(self, rho: Optional[float] = None, seed: Optional[int] = None) -> MeasurementSet:
        p = self.preset
        return make_synthetic_measurements(
            self.mesh,
            self.model.mu_inv,
            p.phantom,
            p.plan,
            p.noise_level if rho is None else rho,
            p.seed if seed is None else seed,
            data_mesh=self.data_mesh,
            omega_scale=self.model.omega_scale,
            workers=self.model.workers,
        )


def build_problem(preset: ExperimentPreset, workers: int = 1) -> Problem:
    mesh = preset.mesh.build()
    model = ForwardModel(mesh, preset.mu_inv, preset.omega_scale, workers)
    return Problem(
        preset,
        mesh,
        preset.mesh.build_data_mesh(),
        model,
        preset.reg_params(mesh),
        preset.tscm,
        indicator_field(mesh, preset.phantom),
    )


# phantom geometry
_THREE_DISKS = (Disk((-0.35, 0.3), 0.25), Disk((0.35, 0.3), 0.22), Disk((0.15, -0.55), 0.15))
_DISK_AND_TORUS = (Annulus((-0.2, 0.1), 0.2, 0.4), Disk((0.4, 0.1), 0.2))
_CENTERED_DISK = (Disk((0.0, 0.0), 0.3),)


def _presets() -> dict[str, ExperimentPreset]:
    three = PhantomSpec(_THREE_DISKS)
    return {
        "exp1-3disks": ExperimentPreset("exp1-3disks", three, ExcitationPlan.standard(4, 28)),
        "exp1-si": ExperimentPreset("exp1-si", three, ExcitationPlan.standard(4, 28), kappa=None),
        "exp2-torus": ExperimentPreset("exp2-torus", PhantomSpec(_DISK_AND_TORUS), ExcitationPlan.standard(4, 28)),
        "lsm-baseline": ExperimentPreset(
            "lsm-baseline", three, ExcitationPlan.standard(1, 28), initial_guess=PhantomSpec(_CENTERED_DISK)
        ),
        "dlambda-study": ExperimentPreset(
            "dlambda-study", three, ExcitationPlan.standard(2, 28), n_lambda=(1, 2, 4, 8, 16)
        ),
    }


PRESET_NAMES = tuple(_presets())


def preset(name: str) -> ExperimentPreset:
    table = _presets()
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(table)}")
    return table[name]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _primitive_text(p) -> str:
    if isinstance(p, Disk):
        return "disk " + _fmt((float(p.center[0]), float(p.center[1]), float(p.radius)))
    return "annulus " + _fmt(
        (float(p.center[0]), float(p.center[1]), float(p.inner_radius), float(p.outer_radius))
    )


def _parse_primitive(text: str):
    kind, *nums = text.split()
    vals = [float(x) for x in nums]
    if kind == "disk" and len(vals) == 3:
        return Disk((vals[0], vals[1]), vals[2])
    if kind == "annulus" and len(vals) == 4:
        return Annulus((vals[0], vals[1]), vals[2], vals[3])
    raise ValueError(f"bad primitive {text!r}")


def _to_config(p: ExperimentPreset) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["preset"] = {"name": p.name, "seed": _fmt(p.seed), "seeds": _fmt(p.seeds), "n_lambda": _fmt(p.n_lambda)}
    ph = {"sigma1": _fmt(float(p.phantom.sigma1)), "sigma2": _fmt(float(p.phantom.sigma2))}
    for i, inc in enumerate(p.phantom.inclusions):
        ph[f"inclusion{i}"] = _primitive_text(inc)
    if p.initial_guess is not None:
        for i, inc in enumerate(p.initial_guess.inclusions):
            ph[f"initial{i}"] = _primitive_text(inc)
    cp["phantom"] = ph
    cp["plan"] = {
        "omegas": _fmt(p.plan.omegas),
        "coils": _fmt(p.plan.coils),
        "amplitudes": _fmt(p.plan.amplitudes),
        "kappa": _fmt(None if p.kappa is None else float(p.kappa)),
    }
    cp["noise"] = {"rho": _fmt(float(p.noise_level)), "ladder": _fmt(tuple(map(float, p.noise_ladder)))}
    cp["mesh"] = {f.name: _fmt(getattr(p.mesh, f.name)) for f in fields(MeshParams)}
    reg = {f.name: _fmt(getattr(p.reg, f.name)) for f in fields(RegParams) if not f.name.startswith("eps")}
    reg["eps"] = "h2" if p.eps is None else _fmt(float(p.eps))
    cp["reg"] = reg
    cp["tscm"] = {f.name: _fmt(getattr(p.tscm, f.name)) for f in fields(TscmConfig)}
    return cp


def _typed(cls, section: configparser.SectionProxy, skip=()):
    kw = {}
    for f in fields(cls):
        if f.name in skip or f.name not in section:
            continue
        text = section[f.name]
        default = f.default
        if isinstance(default, bool):
            if text not in ("true", "false"):
                raise ValueError(f"{f.name}: expected true or false")
            kw[f.name] = text == "true"
        elif isinstance(default, int):
            kw[f.name] = int(text)
        elif isinstance(default, float):
            kw[f.name] = float(text)
        else:
            kw[f.name] = text
    unknown = set(section) - {f.name for f in fields(cls)} - set(skip)
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}")
    return cls(**kw)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split())


def _from_config(cp: configparser.ConfigParser, path) -> ExperimentPreset:
    try:
        for sec in ("preset", "phantom", "plan", "noise", "mesh", "reg", "tscm"):
            if not cp.has_section(sec):
                raise ValueError(f"missing section [{sec}]")
        ph = cp["phantom"]
        keys = sorted((k for k in ph if k.startswith("inclusion")), key=lambda k: int(k[9:]))
        inits = sorted((k for k in ph if k.startswith("initial")), key=lambda k: int(k[7:]))
        phantom = PhantomSpec(
            tuple(_parse_primitive(ph[k]) for k in keys), float(ph["sigma1"]), float(ph["sigma2"])
        )
        initial = None
        if inits:
            initial = PhantomSpec(
                tuple(_parse_primitive(ph[k]) for k in inits), phantom.sigma1, phantom.sigma2
            )
        pl = cp["plan"]
        plan = ExcitationPlan(_floats(pl["omegas"]), _ints(pl["coils"]), _floats(pl["amplitudes"]))
        reg_sec = cp["reg"]
        eps_text = reg_sec.get("eps", "h2")
        pre = cp["preset"]
        return ExperimentPreset(
            name=pre["name"],
            phantom=phantom,
            plan=plan,
            noise_level=float(cp["noise"]["rho"]),
            noise_ladder=_floats(cp["noise"]["ladder"]),
            mesh=_typed(MeshParams, cp["mesh"]),
            kappa=None if pl["kappa"] == "none" else float(pl["kappa"]),
            tscm=_typed(TscmConfig, cp["tscm"]),
            reg=_typed(RegParams, reg_sec, skip=("eps",)),
            eps=None if eps_text == "h2" else float(eps_text),
            seed=int(pre["seed"]),
            seeds=_ints(pre["seeds"]),
            n_lambda=_ints(pre.get("n_lambda", "")),
            initial_guess=initial,
        )
    except FormatError:
        raise
    except (KeyError, ValueError) as exc:
        raise FormatError(path, 0, f"invalid preset: {exc}") from exc


def dumps_preset(p: ExperimentPreset) -> str:
    buf = io.StringIO()
    buf.write(_header("preset") + "\n")
    _to_config(p).write(buf)
    return buf.getvalue()


def loads_preset(text: str, path="<string>") -> ExperimentPreset:
    lines = text.splitlines()
    _check_header(path, lines[0] if lines else None, "preset")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise FormatError(path, getattr(exc, "lineno", 0) or 0, str(exc)) from exc
    return _from_config(cp, path)


def save_preset(p: ExperimentPreset, path: PathLike) -> None:
    Path(path).write_text(dumps_preset(p))


def load_preset(path: PathLike) -> ExperimentPreset:
    return loads_preset(Path(path).read_text(), path)


def resolve_preset(name_or_path: str) -> ExperimentPreset:
    """A built-in preset name or the path of a preset file."""
    if name_or_path in PRESET_NAMES:
        return preset(name_or_path)
    if Path(name_or_path).is_file():
        return load_preset(name_or_path)
    raise KeyError(f"{name_or_path!r} is neither a preset name nor a preset file")


# --------------------------------------------------------------------------
# measurements


def _next(lines, i, path, what):
    if i >= len(lines):
        raise FormatError(path, i + 1, f"truncated file: expected {what}")
    return lines[i]


def dumps_measurements(m: MeasurementSet) -> str:
    K, C = m.plan.shape
    B = m.n_boundary
    seed = "none" if m.seed is None else str(m.seed)
    out = [_header("measurements"), f"omegas {K} coils {C} nodes {B} seed {seed} rho {m.rho!r}"]
    out.append("omega " + _fmt(m.plan.omegas))
    out.append("coil " + _fmt(m.plan.coils))
    out.append("amplitude " + _fmt(m.plan.amplitudes))
    for k in range(K):
        for c in range(C):
            for v in m.values[k, c].tolist():
                out.append(f"{v.real!r} {v.imag!r}")
    return "\n".join(out) + "\n"


def loads_measurements(text: str, path="<string>") -> MeasurementSet:
    lines = text.splitlines()
    _check_header(path, lines[0] if lines else None, "measurements")
    head = _next(lines, 1, path, "size line").split()
    if len(head) != 10 or head[0::2] != ["omegas", "coils", "nodes", "seed", "rho"]:
        raise FormatError(path, 2, "expected 'omegas K coils C nodes B seed S rho R'")
    try:
        K, C, B = int(head[1]), int(head[3]), int(head[5])
        seed = None if head[7] == "none" else int(head[7])
        rho = float(head[9])
    except ValueError as exc:
        raise FormatError(path, 2, str(exc)) from exc
    rows = {}
    for i, (tag, n) in enumerate((("omega", K), ("coil", C), ("amplitude", C)), start=2):
        parts = _next(lines, i, path, f"{tag} line").split()
        if not parts or parts[0] != tag or len(parts) != n + 1:
            raise FormatError(path, i + 1, f"expected {tag} line with {n} values")
        rows[tag] = parts[1:]
    plan = ExcitationPlan(
        tuple(float(x) for x in rows["omega"]),
        tuple(int(x) for x in rows["coil"]),
        tuple(float(x) for x in rows["amplitude"]),
    )
    n = K * C * B
    body = lines[5:]
    if len(body) < n:
        raise FormatError(path, len(lines) + 1, f"truncated file: {len(body)} of {n} data lines")
    if len(body) > n and any(ln.strip() for ln in body[n:]):
        raise FormatError(path, 5 + n + 1, "unexpected trailing data")
    vals = np.empty(n, dtype=complex)
    for j, ln in enumerate(body[:n]):
        parts = ln.split()
        if len(parts) != 2:
            raise FormatError(path, 6 + j, "expected 're im'")
        try:
            vals[j] = complex(float(parts[0]), float(parts[1]))
        except ValueError as exc:
            raise FormatError(path, 6 + j, str(exc)) from exc
    return MeasurementSet(plan, vals.reshape(K, C, B), rho, seed)


def save_measurements(m: MeasurementSet, path: PathLike) -> None:
    Path(path).write_text(dumps_measurements(m))


def load_measurements(path: PathLike) -> MeasurementSet:
    return loads_measurements(Path(path).read_text(), path)


def noise_statistic(mesh: Mesh, measured: MeasurementSet, clean: np.ndarray) -> float:
    """Empirical ``rho``: root mean of ``|m - clean|^2 / |clean|^2`` over all (omega, coil)."""
    ratios = []
    K, C = measured.plan.shape
    for k in range(K):
        for c in range(C):
            num = fem.boundary_l2_norm(mesh, measured.values[k, c] - clean[k, c])
            den = fem.boundary_l2_norm(mesh, clean[k, c])
            ratios.append((num / den) ** 2)
    return math.sqrt(float(np.mean(ratios)))


# --------------------------------------------------------------------------
# fields


def dumps_field(f: NodalField) -> str:
    kind = "complex" if f.is_complex else "real"
    out = [_header("field"), f"nodes {f.mesh.n_nodes} {kind}"]
    if f.is_complex:
        out += [f"{v.real!r} {v.imag!r}" for v in f.values.tolist()]
    else:
        out += [repr(v) for v in f.values.tolist()]
    return "\n".join(out) + "\n"


def loads_field(mesh: Mesh, text: str, path="<string>") -> NodalField:
    lines = text.splitlines()
    _check_header(path, lines[0] if lines else None, "field")
    head = _next(lines, 1, path, "size line").split()
    if len(head) != 3 or head[0] != "nodes" or head[2] not in ("real", "complex"):
        raise FormatError(path, 2, "expected 'nodes N real|complex'")
    n = int(head[1])
    if n != mesh.n_nodes:
        raise FormatError(path, 2, f"field has {n} nodes, mesh has {mesh.n_nodes}")
    body = lines[2:]
    if len(body) < n:
        raise FormatError(path, len(lines) + 1, f"truncated file: {len(body)} of {n} values")
    width = 2 if head[2] == "complex" else 1
    vals = np.empty(n, dtype=complex if width == 2 else float)
    for j, ln in enumerate(body[:n]):
        parts = ln.split()
        if len(parts) != width:
            raise FormatError(path, 3 + j, f"expected {width} columns")
        try:
            vals[j] = complex(float(parts[0]), float(parts[1])) if width == 2 else float(parts[0])
        except ValueError as exc:
            raise FormatError(path, 3 + j, str(exc)) from exc
    return NodalField(mesh, vals)


def save_field(f: NodalField, path: PathLike) -> None:
    Path(path).write_text(dumps_field(f))


def load_field(mesh: Mesh, path: PathLike) -> NodalField:
    return loads_field(mesh, Path(path).read_text(), path)


# --------------------------------------------------------------------------
# run logs


def dumps_runlog(runlog: RunLog, timing: bool = True) -> str:
    """Iterations as CSV, then stage, error and final-error blocks."""
    out = [_header("runlog"), f"records {len(runlog.records)}"]
    out += runlog.to_csv(timing).splitlines()
    out.append(f"stages {len(runlog.stages)}")
    out += [f"{s.lam!r},{s.iters},{s.reason},{s.total!r}" for s in runlog.stages]
    out.append(f"errors {len(runlog.errors)}")
    out += [f"{n},{e!r}" for n, e in runlog.errors]
    out.append("final_error " + ("none" if runlog.final_error is None else repr(runlog.final_error)))
    return "\n".join(out) + "\n"


def loads_runlog(text: str, path="<string>") -> RunLog:
    lines = text.splitlines()
    _check_header(path, lines[0] if lines else None, "runlog")
    i = 1

    def block(tag, extra=0):
        nonlocal i
        parts = _next(lines, i, path, f"'{tag} N' line").split()
        if len(parts) != 2 or parts[0] != tag:
            raise FormatError(path, i + 1, f"expected '{tag} N'")
        n = int(parts[1])
        start = i + 1 + extra
        if len(lines) < start + n:
            raise FormatError(path, len(lines) + 1, f"truncated file: {tag} block needs {n} lines")
        i = start + n
        return [(start + j + 1, lines[start + j].split(",")) for j in range(n)]

    log = RunLog()
    try:
        for pos, r in block("records", extra=1):
            log.records.append(
                IterationRecord(int(r[0]), float(r[1]), *(float(x) for x in r[2:9]))
            )
        for pos, r in block("stages"):
            log.stages.append(StageRecord(float(r[0]), int(r[1]), r[2], float(r[3])))
        for pos, r in block("errors"):
            log.errors.append((int(r[0]), float(r[1])))
    except (ValueError, IndexError, TypeError) as exc:
        raise FormatError(path, i, f"bad record: {exc}") from exc
    last = _next(lines, i, path, "final_error line").split()
    if len(last) != 2 or last[0] != "final_error":
        raise FormatError(path, i + 1, "expected 'final_error X'")
    log.final_error = None if last[1] == "none" else float(last[1])
    return log


def save_runlog(runlog: RunLog, path: PathLike, timing: bool = True) -> None:
    Path(path).write_text(dumps_runlog(runlog, timing))


def load_runlog(path: PathLike) -> RunLog:
    return loads_runlog(Path(path).read_text(), path)
