"""Run configuration files.

The format is sectioned ``key = value`` text with ``#`` comments::

    [run]
    mode = spiking
    seed = 7

    [labels]
    points = 0, 0.5, 1

    [field]
    velocity = linear
    label_op = linear
    a = 0.5

Every value is validated eagerly; errors name the file, line and key.
:meth:`RunConfig.to_text` writes the fully-defaulted configuration back in the
same format, which is what run manifests contain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvariantError, UsageError
from .fields import LABEL_OPS, VELOCITIES, build_field
from .measures import LabelSpace
from .particle import FEASIBILITY_MODES, InitialLaw, SimConfig
from .spiking import SpikeConfig, default_noise_spec

MODES = ("simulate", "spiking", "converge", "stability", "weakform", "picard", "moments")


class ConfigError(ConfigurationError):
    """A configuration problem with its location in the source file."""


REQ = object()  # marker for required keys


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _opt(conv):
    def f(s):
        return None if s.strip().lower() in ("", "none") else conv(s)
    f.__name__ = getattr(conv, "__name__", "value")
    return f


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _words(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _matrix(s: str) -> tuple:
    return tuple(tuple(float(x) for x in row.replace(",", " ").split()) for row in s.split(";") if row.strip())


SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "mode": (str, REQ),
        "seed": (int, 0),
        "out": (_opt(str), None),
        "emit_svg": (_bool, False),
        "threads": (int, 1),
    },
    "labels": {
        "points": (_opt(_floats), None),
        "atoms": (_opt(_words), None),
        "dist": (_opt(_matrix), None),
    },
    "sim": {
        "N": (int, REQ),
        "d": (int, 1),
        "dt": (float, REQ),
        "T": (float, REQ),
        "sigma": (float, 0.0),
        "theta": (_opt(float), None),
        "feasibility": (str, "probe"),
        "lam_floor": (float, 1e-6),
        "probe_radius": (_opt(float), None),
    },
    "initial": {
        "x_dist": (str, "uniform"),
        "x_lo": (float, 0.0),
        "x_hi": (float, 1.0),
        "x_mean": (float, 0.0),
        "x_std": (float, 1.0),
        "labels": (str, "uniform"),
        "lam_alpha": (float, 1.0),
        "lam_min": (float, 0.0),
        "lam_atom": (int, 0),
    },
    "spiking": {
        "X_F": (float, 0.7),
        "X_R": (float, 0.01),
        "X_F_range": (_opt(_floats), None),
        "noise_a0": (_opt(float), None),
        "noise_H": (_opt(int), None),
        "noise_seed_offset": (int, 0),
        "rate_bin": (float, 0.1),
    },
    "experiment": {
        "Ns": (_opt(_ints), None),
        "N_ref": (_opt(int), None),
        "t_checks": (_opt(_floats), None),
        "n_reps": (int, 10),
        "n_iters": (int, 8),
        "check_range": (_opt(_ints), None),
        "n_paths": (int, 20),
        "tolerance": (_opt(float), None),
        "perturb_x": (float, 0.05),
        "perturb_lam": (float, 0.1),
        "n_probe": (int, 200),
    },
    "output": {
        "trajectory_stride": (int, 1),
        "write_noise": (_bool, True),
    },
}

FIELD_FIXED = {"velocity": (str, "zero"), "label_op": (str, "zero")}
SECTIONS = ("run", "labels", "field", "sim", "initial", "spiking", "experiment", "output")

MODE_NEEDS = {
    "spiking": ["spiking"],
    "converge": ["experiment"],
    "stability": ["experiment"],
}
EXPERIMENT_NEEDS = {
    "converge": ["Ns", "t_checks"],
    "stability": ["t_checks"],
}


@dataclass
class Raw:
    """Parsed but unvalidated text: section -> key -> (value, line)."""

    name: str
    sections: dict[str, dict[str, tuple[str, int]]]
    header_lines: dict[str, int]

    def where(self, section: str, key: str | None = None) -> int:
        if key is not None and key in self.sections.get(section, {}):
            return self.sections[section][key][1]
        return self.header_lines.get(section, 0)


def parse_text(text: str, name: str = "<config>") -> Raw:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    headers: dict[str, int] = {}
    cur = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"{name}:{no}: malformed section header {s!r}")
            cur = s[1:-1].strip()
            if cur not in SECTIONS:
                raise ConfigError(f"{name}:{no}: unknown section [{cur}]; known: {', '.join(SECTIONS)}")
            if cur in sections:
                raise ConfigError(f"{name}:{no}: section [{cur}] appears twice")
            sections[cur] = {}
            headers[cur] = no
            continue
        if "=" not in s:
            raise ConfigError(f"{name}:{no}: expected 'key = value', got {s!r}")
        if cur is None:
            raise ConfigError(f"{name}:{no}: key outside of any section")
        k, v = (p.strip() for p in s.split("=", 1))
        if not k:
            raise ConfigError(f"{name}:{no}: empty key")
        if k in sections[cur]:
            raise ConfigError(f"{name}:{no}: key '{k}' repeated in [{cur}]")
        sections[cur][k] = (v, no)
    return Raw(name, sections, headers)


def _typed(raw: Raw, section: str, schema: dict) -> dict:
    given = raw.sections.get(section, {})
    out = {}
    for k in given:
        if k not in schema:
            raise ConfigError(f"{raw.name}:{given[k][1]}: unknown key '{k}' in [{section}]; "
                              f"known: {', '.join(schema)}")
    for k, (conv, default) in schema.items():
        if k in given:
            v, no = given[k]
            try:
                out[k] = conv(v)
            except ValueError as exc:
                tname = getattr(conv, "__name__", "value")
                raise ConfigError(f"{raw.name}:{no}: key '{k}' in [{section}]: expected {tname}, "
                                  f"got {v!r} ({exc})") from None
        elif default is REQ:
            raise ConfigError(f"{raw.name}:{raw.where(section)}: missing required key '{k}' in [{section}]")
        else:
            out[k] = default
    return out


def _field_params(raw: Raw) -> tuple[dict, dict]:
    given = raw.sections.get("field", {})
    fixed = {}
    for k, (conv, default) in FIELD_FIXED.items():
        fixed[k] = given[k][0] if k in given else default
    params = {}
    for k, (v, no) in given.items():
        if k in FIELD_FIXED:
            continue
        try:
            vals = _floats(v)
        except ValueError:
            raise ConfigError(f"{raw.name}:{no}: field parameter '{k}' must be a number or a "
                              f"comma-separated list of numbers, got {v!r}") from None
        if not vals:
            raise ConfigError(f"{raw.name}:{no}: field parameter '{k}' is empty")
        params[k] = vals[0] if len(vals) == 1 and "," not in v else np.array(vals)
    return fixed, params


@dataclass(frozen=True)
class ExperimentParams:
    Ns: tuple | None = None
    N_ref: int | None = None
    t_checks: tuple | None = None
    n_reps: int = 10
    n_iters: int = 8
    check_range: tuple | None = None
    n_paths: int = 20
    tolerance: float | None = None
    perturb_x: float = 0.05
    perturb_lam: float = 0.1
    n_probe: int = 200


@dataclass
class RunConfig:
    mode: str
    seed: int
    sim: SimConfig
    law: InitialLaw
    spike: SpikeConfig | None
    exp: ExperimentParams
    out: str | None
    emit_svg: bool
    threads: int
    stride: int = 1
    write_noise: bool = True
    rate_bin: float = 0.1
    sections: dict = field(default_factory=dict)
    source: str = "<config>"

    @property
    def space(self) -> LabelSpace:
        return self.sim.field.space

    def to_text(self) -> str:
        """Canonical config text with every default made explicit."""
        lines = []
        for sec in SECTIONS:
            if sec not in self.sections:
                continue
            lines.append(f"[{sec}]")
            for k, v in self.sections[sec].items():
                lines.append(f"{k} = {_show(v)}")
            lines.append("")
        return "\n".join(lines)


def _show(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, np.ndarray):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(" ".join(repr(float(x)) for x in row) for row in v)
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    return str(v)


def _label_space(raw: Raw, lab: dict) -> LabelSpace:
    no = raw.where("labels")
    try:
        if lab["points"] is not None:
            if lab["dist"] is not None:
                raise ConfigError(f"{raw.name}:{no}: give either 'points' or 'dist' in [labels], not both")
            return LabelSpace.from_points(lab["points"], lab["atoms"])
        if lab["dist"] is None:
            raise ConfigError(f"{raw.name}:{no}: [labels] needs 'points' or 'dist'")
        dist = np.array(lab["dist"], dtype=float)
        atoms = lab["atoms"] if lab["atoms"] is not None else tuple(range(dist.shape[0]))
        return LabelSpace(tuple(atoms), dist)
    except (InvariantError, UsageError, ValueError) as exc:
        raise ConfigError(f"{raw.name}:{no}: invalid label space: {exc}") from None


def build(raw: Raw, seed: int | None = None) -> RunConfig:
    name = raw.name
    run = _typed(raw, "run", SCHEMA["run"])
    if seed is not None:
        run["seed"] = int(seed)
    mode = run["mode"]
    if mode not in MODES:
        raise ConfigError(f"{name}:{raw.where('run', 'mode')}: key 'mode': unknown mode {mode!r}; "
                          f"known: {', '.join(MODES)}")
    if run["threads"] < 1:
        raise ConfigError(f"{name}:{raw.where('run', 'threads')}: key 'threads' must be at least 1")
    for sec in ("labels", "sim") + tuple(MODE_NEEDS.get(mode, ())):
        if sec not in raw.sections:
            raise ConfigError(f"{name}: mode {mode!r} needs a [{sec}] section")
    lab = _typed(raw, "labels", SCHEMA["labels"])
    space = _label_space(raw, lab)
    fixed, params = _field_params(raw)
    for k, reg in (("velocity", VELOCITIES), ("label_op", LABEL_OPS)):
        if fixed[k] not in reg:
            raise ConfigError(f"{name}:{raw.where('field', k)}: key '{k}': unknown name {fixed[k]!r}; "
                              f"registered: {', '.join(sorted(reg))}")
    sim = _typed(raw, "sim", SCHEMA["sim"])
    try:
        fp = build_field(fixed["velocity"], fixed["label_op"], space, sim["d"], params)
    except (ConfigurationError, UsageError, InvariantError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}:{raw.where('field')}: [field]: {exc}") from None
    if sim["feasibility"] not in FEASIBILITY_MODES:
        raise ConfigError(f"{name}:{raw.where('sim', 'feasibility')}: key 'feasibility' must be one of "
                          f"{', '.join(FEASIBILITY_MODES)}")
    try:
        simcfg = SimConfig(field=fp, seed=run["seed"], **sim)
    except ConfigurationError as exc:
        key = _guess_key(str(exc), SCHEMA["sim"])
        raise ConfigError(f"{name}:{raw.where('sim', key)}: [sim]{f' key {key!r}' if key else ''}: {exc}") from None
    ini = _typed(raw, "initial", SCHEMA["initial"])
    law = InitialLaw(**ini)
    if law.x_dist not in ("uniform", "normal", "constant"):
        raise ConfigError(f"{name}:{raw.where('initial', 'x_dist')}: key 'x_dist': unknown law {law.x_dist!r}")
    if law.labels not in ("uniform", "dirichlet", "dirac"):
        raise ConfigError(f"{name}:{raw.where('initial', 'labels')}: key 'labels': unknown law {law.labels!r}")
    if law.labels == "dirac" and not 0 <= law.lam_atom < space.K:
        raise ConfigError(f"{name}:{raw.where('initial', 'lam_atom')}: key 'lam_atom' out of range")
    spk = None
    sp = _typed(raw, "spiking", SCHEMA["spiking"])
    if mode == "spiking":
        het = None
        if sp["noise_a0"] is not None:
            try:
                het = default_noise_spec(space, sp["noise_a0"], sp["noise_H"], sp["noise_seed_offset"])
            except ConfigurationError as exc:
                raise ConfigError(f"{name}:{raw.where('spiking', 'noise_a0')}: [spiking]: {exc}") from None
        rng_ = sp["X_F_range"]
        if rng_ is not None and len(rng_) != 2:
            raise ConfigError(f"{name}:{raw.where('spiking', 'X_F_range')}: key 'X_F_range' needs two numbers")
        try:
            spk = SpikeConfig(simcfg, sp["X_F"], sp["X_R"], het, rng_)
        except ConfigurationError as exc:
            key = "X_R" if "X_R <" in str(exc) else _guess_key(str(exc), SCHEMA["spiking"])
            raise ConfigError(f"{name}:{raw.where('spiking', key)}: [spiking]"
                              f"{f' key {key!r}' if key else ''}: {exc}") from None
        if not sp["rate_bin"] > 0:
            raise ConfigError(f"{name}:{raw.where('spiking', 'rate_bin')}: key 'rate_bin' must be positive")
    ex = _typed(raw, "experiment", SCHEMA["experiment"])
    for k in EXPERIMENT_NEEDS.get(mode, ()):
        if ex[k] is None:
            raise ConfigError(f"{name}:{raw.where('experiment')}: mode {mode!r} needs key '{k}' in [experiment]")
    exp = ExperimentParams(**ex)
    _check_experiment(raw, mode, exp, simcfg)
    outp = _typed(raw, "output", SCHEMA["output"])
    if outp["trajectory_stride"] < 1:
        raise ConfigError(f"{name}:{raw.where('output', 'trajectory_stride')}: key 'trajectory_stride' must be >= 1")
    sections = {
        "run": run,
        "labels": lab,
        "field": {**fixed, **params},
        "sim": sim,
        "initial": ini,
    }
    if mode == "spiking":
        sections["spiking"] = sp
    if "experiment" in raw.sections:
        sections["experiment"] = ex
    sections["output"] = outp
    return RunConfig(mode, run["seed"], simcfg, law, spk, exp, run["out"], run["emit_svg"],
                     run["threads"], outp["trajectory_stride"], outp["write_noise"], sp["rate_bin"],
                     sections, name)


def _guess_key(msg: str, schema: dict) -> str | None:
    for k in sorted(schema, key=len, reverse=True):
        if msg.startswith(k) or f" {k}" in msg or f"{k}=" in msg:
            return k
    return None


def _check_experiment(raw: Raw, mode: str, e: ExperimentParams, sim: SimConfig) -> None:
    name = raw.name

    def err(key, msg):
        raise ConfigError(f"{name}:{raw.where('experiment', key)}: key '{key}': {msg}")

    if e.Ns is not None:
        if any(n < 1 for n in e.Ns):
            err("Ns", "agent counts must be positive")
        if mode == "converge" and any(b <= a for a, b in zip(e.Ns, e.Ns[1:])):
            err("Ns", "must be strictly increasing")
    if mode == "converge":
        ref = e.N_ref if e.N_ref is not None else e.Ns[-1]
        largest = max(e.Ns if e.N_ref is not None else e.Ns[:-1] or (0,))
        if largest == 0:
            err("Ns", "need at least two values when N_ref is not given")
        if ref < 2 * largest:
            err("N_ref", f"reference N={ref} must be at least twice the largest compared N={largest}")
    if e.t_checks is not None:
        for t in e.t_checks:
            k = round(t / sim.dt)
            if t < 0 or t > sim.T + 1e-12 or abs(k * sim.dt - t) > 1e-9:
                err("t_checks", f"t={t} is not a grid time in [0, T]")
    if e.n_reps < 1:
        err("n_reps", "must be positive")
    if mode == "picard" and e.n_iters < 4:
        err("n_iters", "must be at least 4")
    if e.check_range is not None:
        if len(e.check_range) != 2 or e.check_range[0] > e.check_range[1]:
            err("check_range", "needs two increasing iteration indices")
        if e.check_range[1] + 2 > e.n_iters:
            err("check_range", f"testing ratios up to n={e.check_range[1]} needs n_iters >= {e.check_range[1] + 2}")
    if e.n_paths < 1:
        err("n_paths", "must be positive")
    if e.n_probe < 2:
        err("n_probe", "must be at least 2")


def parse_config(path, seed: int | None = None) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return build(parse_text(text, str(p)), seed)

