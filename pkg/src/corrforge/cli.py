"""``corrforge <subcommand> --config <file> [--seed N] [--threads N] [key=value ...]``.

Each subcommand reads its section of a TOML config, validates every value
before doing any work, writes its artifacts plus ``manifest.json`` into the
section's ``output`` directory, and reports failures as a JSON object on
stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from threadpoolctl import threadpool_limits

from . import __version__

SUBCOMMANDS = ("synth", "sdf", "patches", "train", "adapt", "features", "optimize", "evaluate", "report")
EXIT_CONFIG, EXIT_RUNTIME = 2, 1


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


# ---------------------------------------------------------------- config schema

# section -> key -> (type, default); "path" entries are resolved against the config file's directory
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {"seed": (int, 0), "threads": (int, 1), "work_dir": ("path", "work")},
    "synth": {"family": (str, "bean1bump"), "count": (int, 30), "resolution": (int, 2562), "max_retries": (int, 20),
              "ranges": (dict, {}), "output": ("path", "{work_dir}/ensemble")},
    "sdf": {"input": ("path", "{work_dir}/ensemble"), "spacing": (float, 1.0), "padding": (int, 3),
            "output": ("path", "{work_dir}/sdf")},
    "patches": {"input": ("path", "{work_dir}/ensemble"), "correspondences": ("path", ""), "n_pairs": (int, 500),
                "shapes": (list, []), "negative_ratio": (float, 1.0), "rho_fraction": (float, 0.05),
                "output": ("path", "{work_dir}/patches")},
    "train": {"dataset": ("path", "{work_dir}/patches/pairs.bin"), "n_features": (int, 10),
              "learning_rate": (float, 0.01), "momentum": (float, 0.9), "batch_pairs": (int, 32),
              "max_epochs": (int, 200), "patience": (int, 10), "margin": (float, 1.0),
              "output": ("path", "{work_dir}/train")},
    "adapt": {"weights": ("path", "{work_dir}/train/weights.bin"), "dataset": ("path", "{work_dir}/patches/pairs.bin"),
              "target": ("path", "{work_dir}/target"), "lambda": (float, 0.01), "n_target_patches": (int, 2000),
              "learning_rate": (float, 0.01), "head_learning_rate": (float, 0.01), "momentum": (float, 0.9),
              "batch_pairs": (int, 32), "epochs": (int, 10), "margin": (float, 1.0),
              "output": ("path", "{work_dir}/adapt")},
    "features": {"weights": ("path", "{work_dir}/train/weights.bin"), "input": ("path", "{work_dir}/ensemble"),
                 "output": ("path", "{work_dir}/features")},
    "optimize": {"input": ("path", "{work_dir}/ensemble"), "sdf": ("path", "{work_dir}/sdf"),
                 "features": ("path", "{work_dir}/features"), "mode": (str, "xyz"), "particles": (int, 128),
                 "iterations": (int, 1000), "step": (float, 0.5), "alpha_hi": (float, 0.1), "alpha_lo": (float, 0.001),
                 "alpha_steps": (int, 100), "feature_weight": (float, 1.0), "normal_weight": (float, -1.0),
                 "procrustes_every": (int, 10), "init_iterations": (int, 200),
                 "output": ("path", "{work_dir}/optimize/{mode}")},
    "evaluate": {"variants": (dict, {}), "max_modes": (int, 5), "n_draws": (int, 1000),
                 "output": ("path", "{work_dir}/metrics")},
    "report": {"input": ("path", "{work_dir}/metrics"), "output": ("path", "{work_dir}/report")},
}

_POSITIVE = {("sdf", "spacing"), ("synth", "count"), ("patches", "n_pairs"), ("patches", "rho_fraction"),
             ("train", "n_features"), ("train", "learning_rate"), ("train", "batch_pairs"), ("train", "max_epochs"),
             ("train", "patience"), ("train", "margin"), ("adapt", "n_target_patches"), ("adapt", "learning_rate"),
             ("adapt", "head_learning_rate"), ("adapt", "batch_pairs"), ("adapt", "epochs"), ("adapt", "margin"),
             ("optimize", "particles"), ("optimize", "step"), ("optimize", "alpha_hi"), ("optimize", "alpha_lo"),
             ("optimize", "alpha_steps"), ("optimize", "procrustes_every"), ("evaluate", "max_modes"),
             ("evaluate", "n_draws"), ("run", "threads")}
_NONNEGATIVE = {("sdf", "padding"), ("patches", "negative_ratio"), ("adapt", "lambda"), ("optimize", "iterations"),
                ("optimize", "feature_weight"), ("optimize", "init_iterations"), ("synth", "max_retries"),
                ("run", "seed")}


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str], subcommand: str) -> list[str]:
    """``section.key=value`` (or bare ``key=value`` for the subcommand's own section)."""
    errors = []
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep or not key:
            errors.append(f"override {item!r} is not key=value")
            continue
        parts = key.split(".")
        if len(parts) == 1:
            parts = [subcommand] + parts
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                errors.append(f"override {key!r} descends into a non-table value")
                break
        else:
            node[parts[-1]] = _parse_value(val)
    return errors


def resolve_config(raw: dict, base_dir: Path) -> tuple[dict, list[str]]:
    """Fill defaults, check types and ranges; returns ``(config, violations)`` with every violation listed."""
    errors = []
    cfg: dict = {}
    for section in raw:
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
        elif not isinstance(raw[section], dict):
            errors.append(f"[{section}] must be a table")
    for section, keys in SCHEMA.items():
        given = raw.get(section, {}) if isinstance(raw.get(section, {}), dict) else {}
        out = {}
        for key in given:
            if key not in keys:
                errors.append(f"unknown key {section}.{key}")
        for key, (typ, default) in keys.items():
            val = given.get(key, copy.deepcopy(default))
            want = str if typ == "path" else typ
            if want is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if not isinstance(val, want) or isinstance(val, bool):
                errors.append(f"{section}.{key} must be {want.__name__}, got {type(val).__name__} {val!r}")
                out[key] = default
                continue
            if (section, key) in _POSITIVE and not val > 0:
                errors.append(f"{section}.{key} must be > 0, got {val}")
            if (section, key) in _NONNEGATIVE and val < 0:
                errors.append(f"{section}.{key} must be >= 0, got {val}")
            out[key] = val
        cfg[section] = out
    if cfg["optimize"]["mode"] not in ("xyz", "normals", "fea", "fea-normals"):
        errors.append(f"optimize.mode must be one of xyz, normals, fea, fea-normals; got {cfg['optimize']['mode']!r}")
    if cfg["optimize"]["particles"] > 0 and cfg["optimize"]["particles"] & (cfg["optimize"]["particles"] - 1):
        errors.append(f"optimize.particles must be a power of two, got {cfg['optimize']['particles']}")
    if cfg["optimize"]["alpha_lo"] > cfg["optimize"]["alpha_hi"]:
        errors.append("optimize.alpha_lo must not exceed optimize.alpha_hi")
    if not 0 <= cfg["train"]["momentum"] < 1 or not 0 <= cfg["adapt"]["momentum"] < 1:
        errors.append("momentum must be in [0, 1)")
    if not 0 < cfg["patches"]["rho_fraction"] <= 0.5:
        errors.append(f"patches.rho_fraction must be in (0, 0.5], got {cfg['patches']['rho_fraction']}")
    if not all(isinstance(s, int) and s >= 0 for s in cfg["patches"]["shapes"]):
        errors.append("patches.shapes must be a list of non-negative shape indices")
    if not all(isinstance(v, str) for v in cfg["evaluate"]["variants"].values()):
        errors.append("evaluate.variants must map variant names to particle directories")
    from .synthgen import EnsembleSpec

    spec = EnsembleSpec(cfg["synth"]["family"], cfg["synth"]["count"], cfg["synth"]["resolution"], 0,
                        cfg["synth"]["ranges"], cfg["synth"]["max_retries"])
    errors += [f"synth: {e}" for e in spec.validate()]

    work = cfg["run"]["work_dir"]
    for section, keys in SCHEMA.items():
        for key, (typ, _) in keys.items():
            if typ == "path" and cfg[section][key]:
                p = cfg[section][key].format(work_dir=work, mode=cfg["optimize"]["mode"])
                cfg[section][key] = str((base_dir / p) if not Path(p).is_absolute() else Path(p))
    cfg["evaluate"]["variants"] = {k: str(base_dir / v) if not Path(v).is_absolute() else v
                                   for k, v in cfg["evaluate"]["variants"].items() if isinstance(v, str)}
    return cfg, errors


def load_config(path, overrides: list[str], subcommand: str, seed: int | None, threads: int | None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file {path} does not exist"])
    try:
        raw = tomllib.loads(path.read_text())
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError([f"config file {path} is not valid TOML: {exc}"]) from exc
    errors = apply_overrides(raw, overrides, subcommand)
    if seed is not None:
        raw.setdefault("run", {})["seed"] = seed
    if threads is not None:
        raw.setdefault("run", {})["threads"] = threads
    cfg, more = resolve_config(raw, path.parent)
    errors += more
    if errors:
        raise ConfigError(errors)
    return cfg


# ---------------------------------------------------------------- artifacts

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json") if p.is_dir() else [p]
        for f in files:
            out[str(f)] = file_hash(f)
    return out


def write_manifest(out_dir: Path, subcommand: str, cfg: dict, inputs, extra: dict | None = None) -> None:
    outputs = {q.name: file_hash(q) for q in sorted(out_dir.iterdir()) if q.is_file() and q.name != "manifest.json"}
    manifest = {"tool": "corrforge", "version": __version__, "subcommand": subcommand, "seed": cfg["run"]["seed"],
                "threads": cfg["run"]["threads"], "config": cfg, "inputs": _hash_inputs(inputs), "outputs": outputs,
                **(extra or {})}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(paths: dict) -> None:
    missing = [f"{name}: {p} does not exist" for name, p in paths.items() if not Path(p).exists()]
    if missing:
        raise ConfigError(missing)


def _meshes(directory):
    from .geomcore import load_mesh

    files = sorted(Path(directory).glob("shape_*.obj"))
    if not files:
        raise ConfigError([f"{directory}: no shape_*.obj meshes"])
    return files, [load_mesh(f) for f in files]


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg):
    from .synthgen import EnsembleSpec, generate_ensemble, write_ensemble

    c = cfg["synth"]
    spec = EnsembleSpec(c["family"], c["count"], c["resolution"], cfg["run"]["seed"], c["ranges"], c["max_retries"])
    out = _out(c["output"])
    write_ensemble(generate_ensemble(spec), out)
    return out, [], {"family": spec.family, "count": spec.count}


def cmd_sdf(cfg):
    from .geomcore import mesh_to_sdf

    c = cfg["sdf"]
    _require({"sdf.input": c["input"]})
    files, meshes = _meshes(c["input"])
    out = _out(c["output"])
    for f, mesh in zip(files, meshes):
        mesh_to_sdf(mesh, c["spacing"], c["padding"]).save(out / f"{f.stem}.sdf")
    return out, files, {"count": len(files)}


def _correspondence_model(c, meshes):
    from .psm import read_particle_dir
    from .synthgen import read_ground_truth

    if c["correspondences"]:
        _require({"patches.correspondences": c["correspondences"]})
        model = read_particle_dir(c["correspondences"])
        if len(model) != len(meshes):
            raise ConfigError([f"{len(model)} particle files for {len(meshes)} meshes"])
        return model, Path(c["correspondences"])
    gt = Path(c["input"]) / "ground_truth.csv"
    _require({"ground truth table": gt})
    table = read_ground_truth(gt)
    if sorted(table) != list(range(len(meshes))):
        raise ConfigError([f"{gt}: shape ids do not match the {len(meshes)} meshes"])
    return np.stack([meshes[s].vertices[table[s]] for s in range(len(meshes))]), gt


def cmd_patches(cfg):
    from .geomcore import max_shape_diameter
    from .patchex import build_pair_dataset, save_dataset

    c = cfg["patches"]
    _require({"patches.input": c["input"]})
    files, meshes = _meshes(c["input"])
    model, source = _correspondence_model(c, meshes)
    shapes = c["shapes"] or list(range(len(meshes)))
    bad = [s for s in shapes if s >= len(meshes)]
    if bad:
        raise ConfigError([f"patches.shapes {bad} out of range for {len(meshes)} meshes"])
    rho = c["rho_fraction"] * max_shape_diameter(meshes)
    rng = np.random.default_rng(cfg["run"]["seed"])
    n_particles = model.shape[1]
    particles = np.sort(rng.choice(n_particles, size=min(c["n_pairs"], n_particles), replace=False))
    per = -(-c["n_pairs"] // len(particles))
    ds = build_pair_dataset(model, meshes, rho_max=rho, positives_per_particle=per,
                            negative_ratio=c["negative_ratio"], seed=int(rng.integers(2**31)), shapes=shapes,
                            particles=particles)
    out = _out(c["output"])
    save_dataset(ds, out / "pairs.bin")
    info = {"rho_max": rho, "samples": len(ds), "positives": int(np.sum(ds.labels == 1)), "shapes": shapes}
    (out / "pairs.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out, files + [source], info


def _load_pairs(path):
    from .patchex import load_dataset

    path = Path(path)
    side = path.with_suffix(".json")
    rho = json.loads(side.read_text())["rho_max"] if side.exists() else 0.0
    return load_dataset(path, rho)


def cmd_train(cfg):
    from .neuralcore import save_weights
    from .trainpipe import TrainConfig, TrainError, write_report, train_siamese

    c = cfg["train"]
    _require({"train.dataset": c["dataset"]})
    tc = TrainConfig(**{f.name: c[f.name] for f in fields(TrainConfig) if f.name in c})
    errors = tc.validate()
    if errors:
        raise ConfigError(errors)
    ds = _load_pairs(c["dataset"])
    try:
        res = train_siamese(ds, config=tc, seed=cfg["run"]["seed"])
    except TrainError as exc:
        raise RuntimeError(str(exc)) from exc
    out = _out(c["output"])
    save_weights(out / "weights.bin", res.trunk, mean_patch=res.mean_patch, extra={"rho_max": ds.rho_max})
    write_report(res.report, out, "train")
    return out, [c["dataset"]], {"auc": res.report.auc}


def cmd_adapt(cfg):
    from .geomcore import max_shape_diameter
    from .neuralcore import load_weights, save_weights
    from .patchex import sample_vertex_patches
    from .trainpipe import TrainConfig, adapt_domain, write_report

    c = cfg["adapt"]
    _require({"adapt.weights": c["weights"], "adapt.dataset": c["dataset"], "adapt.target": c["target"]})
    tc = TrainConfig(learning_rate=c["learning_rate"], head_learning_rate=c["head_learning_rate"],
                     momentum=c["momentum"], batch_pairs=c["batch_pairs"], adapt_epochs=c["epochs"], margin=c["margin"])
    wf = load_weights(c["weights"])
    ds = _load_pairs(c["dataset"])
    files, targets = _meshes(c["target"])
    rho = float(wf.extra.get("rho_max") or ds.rho_max or 0.05 * max_shape_diameter(targets))
    seeds = np.random.SeedSequence(cfg["run"]["seed"]).generate_state(2)
    tp, _, _ = sample_vertex_patches(targets, c["n_target_patches"], rho, seed=int(seeds[0]))
    res = adapt_domain(wf.trunk, wf.mean_patch, ds, tp, c["lambda"], tc, seed=int(seeds[1]))
    out = _out(c["output"])
    save_weights(out / "weights.bin", res.trunk, head=res.head, mean_patch=res.mean_patch,
                 extra={"rho_max": rho, "lambda": c["lambda"]})
    write_report(res.report, out, "adapt")
    return out, [c["weights"], c["dataset"]] + files, {"domain_accuracy": res.report.domain_accuracy}


def cmd_features(cfg):
    from .geomcore import max_shape_diameter
    from .neuralcore import load_weights
    from .trainpipe import compute_feature_field, save_feature_field

    c = cfg["features"]
    _require({"features.weights": c["weights"], "features.input": c["input"]})
    wf = load_weights(c["weights"])
    files, meshes = _meshes(c["input"])
    rho = float(wf.extra.get("rho_max") or 0.05 * max_shape_diameter(meshes))
    out = _out(c["output"])
    for f, mesh in zip(files, meshes):
        save_feature_field(compute_feature_field(wf.trunk, wf.mean_patch, mesh, rho, f.stem), out / f"{f.stem}.f32")
    return out, [c["weights"]] + files, {"n_features": wf.n_features, "rho_max": rho}


def cmd_optimize(cfg):
    from .geomcore import SignedDistanceGrid
    from .psm import OptimizeConfig, SamplingConfig, initialize_particles, optimize, write_particles
    from .trainpipe import load_feature_field

    c = cfg["optimize"]
    _require({"optimize.input": c["input"], "optimize.sdf": c["sdf"]})
    files, meshes = _meshes(c["input"])
    grid_files = [Path(c["sdf"]) / f"{f.stem}.sdf" for f in files]
    _require({f"grid for {f.stem}": g for f, g in zip(files, grid_files)})
    grids = [SignedDistanceGrid.load(g) for g in grid_files]
    oc = OptimizeConfig(mode=c["mode"], iterations=c["iterations"], step=c["step"], alpha_hi=c["alpha_hi"],
                        alpha_lo=c["alpha_lo"], alpha_steps=c["alpha_steps"], feature_weight=c["feature_weight"],
                        normal_weight=None if c["normal_weight"] < 0 else c["normal_weight"],
                        procrustes_every=c["procrustes_every"])
    errors = oc.validate()
    if errors:
        raise ConfigError(errors)
    inputs = files + grid_files
    fields_ = None
    if oc.uses_features:
        ff = [Path(c["features"]) / f"{f.stem}.f32" for f in files]
        _require({f"features for {f.stem}": p for f, p in zip(files, ff)})
        fields_ = [load_feature_field(p) for p in ff]
        inputs += ff
    system = initialize_particles(grids, c["particles"], seed=cfg["run"]["seed"], meshes=meshes,
                                  sampling=SamplingConfig(iterations=c["init_iterations"]))
    model = optimize(system, oc, fields_)
    out = _out(c["output"])
    write_particles(model, out, extra={"feature_provenance": c["features"] if fields_ else None})
    return out, inputs, {"row_length": model.row_length, "mode": model.mode, "M": c["particles"]}


def cmd_evaluate(cfg):
    from .psm import read_particle_dir
    from .shapeval import evaluate_variant, write_comparison, write_metrics

    c = cfg["evaluate"]
    if not c["variants"]:
        raise ConfigError(["evaluate.variants is empty"])
    _require({f"variant {k}": v for k, v in c["variants"].items()})
    out = _out(c["output"])
    tables = []
    for name, d in sorted(c["variants"].items()):
        t = evaluate_variant(name, read_particle_dir(d), c["max_modes"], c["n_draws"], cfg["run"]["seed"])
        write_metrics(t, out / f"metrics_{name}.csv")
        tables.append(t)
    write_comparison(tables, out / "comparison.csv")
    return out, list(c["variants"].values()), {"variants": sorted(c["variants"])}


def cmd_report(cfg):
    from .shapeval import read_metrics

    c = cfg["report"]
    _require({"report.input": c["input"]})
    files = sorted(Path(c["input"]).glob("metrics_*.csv"))
    if not files:
        raise ConfigError([f"{c['input']}: no metrics_*.csv files"])
    tables = [read_metrics(f, f.stem[len("metrics_"):]) for f in files]
    out = _out(c["output"])
    ks = tables[0].k
    for metric in ("compactness", "generalization", "specificity"):
        lines = ["# k " + " ".join(t.variant for t in tables)]
        for i, k in enumerate(ks):
            lines.append(f"{int(k)} " + " ".join(repr(float(getattr(t, metric)[i])) for t in tables))
        (out / f"{metric}.dat").write_text("\n".join(lines) + "\n")
    md = ["| variant | k | cumulative variance (%) | generalization (mm) | specificity (mm) |", "|---|---|---|---|---|"]
    for t in tables:
        for i, k in enumerate(t.k):
            md.append(f"| {t.variant} | {int(k)} | {t.compactness[i]:.2f} | {t.generalization[i]:.4f} | "
                      f"{t.specificity[i]:.4f} |")
    (out / "comparison.md").write_text("\n".join(md) + "\n")
    return out, files, {"variants": [t.variant for t in tables]}


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


# ---------------------------------------------------------------- entry point

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="corrforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"corrforge {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def _fail(kind: str, message: str, subcommand: str | None, violations=None, code: int = EXIT_RUNTIME) -> int:
    err = {"error": kind, "message": message, "subcommand": subcommand}
    if violations is not None:
        err["violations"] = violations
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except _UsageError as exc:
        return _fail("usage", f"{exc}; {parser.format_usage().strip()}", None, code=EXIT_CONFIG)
    try:
        cfg = load_config(args.config, args.overrides, args.subcommand, args.seed, args.threads)
        with threadpool_limits(limits=cfg["run"]["threads"]):
            out, inputs, extra = COMMANDS[args.subcommand](cfg)
        write_manifest(out, args.subcommand, cfg, inputs, {"summary": extra})
    except ConfigError as exc:
        return _fail("config", str(exc), args.subcommand, exc.violations, EXIT_CONFIG)
    except Exception as exc:  # every failure leaves the process as a JSON error record
        return _fail(type(exc).__name__, str(exc), args.subcommand)
    sys.stdout.write(json.dumps({"status": "ok", "subcommand": args.subcommand, "output": str(out)}) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
