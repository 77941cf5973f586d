"""Command-line front end.

    attriblab explain --config explain.ini --out runs/explain
    attriblab bench --samples 100 --out runs/bench
    attriblab verify runs/bench

Config files are INI: an optional ``[run]`` section with shared keys and one
section named after the command. Unknown sections or keys are rejected
before anything is computed. Every run writes ``manifest.json`` holding the
resolved config and a SHA-256 per emitted artifact.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


from . import __version__
from .attribution import integrate, normalize_min_max
from .certainty import HistogramConfig, Method, benchmark, estimate_mi
from .data_io import Dataset, IdxFormatError, load_idx, load_reference, load_rgb_dir, reference_dir
from .diagnostics import BenchSettings, EigenSolveError, alignment_study, augmentation_fragility, p_sweep
from .model import (AugmentSpec, ConfigError as ModelConfigError, TrainSpec, init_model, load_checkpoint,
                    reference_config, train)
from .render import line_plot, render_heatmap, scatter_plot
from .samplers import SamplerKind, SamplerSpec

log = logging.getLogger("attriblab")

DEFAULT_SEED = 1860867
REFERENCE_CHECKPOINT = "reference"


class ConfigError(ValueError):
    pass


EXIT_CODES = {"config": 2, "io": 3, "data": 4, "compute": 5, "internal": 1}


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int(s: str) -> int:
    return int(s.strip())


def _u64(s: str) -> int:
    v = int(s.strip())
    if not 0 <= v < 2**64:
        raise ValueError("must be a 64-bit unsigned integer")
    return v


def _pos_int(s: str) -> int:
    v = int(s.strip())
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _float(s: str) -> float:
    return float(s.strip())


def _pair(s: str) -> tuple[float, float]:
    parts = [float(p) for p in s.split(",")]
    if len(parts) != 2:
        raise ValueError("expected 'low,high'")
    return parts[0], parts[1]


def _grid(s: str) -> list[float]:
    """Comma list, or ``start:stop:step`` inclusive of stop."""
    s = s.strip()
    if ":" in s:
        start, stop, step = (float(v) for v in s.split(":"))
        count = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(v) for v in s.split(",")]


def _samplers(s: str) -> list[SamplerSpec]:
    return [SamplerSpec.parse(t) for t in s.split(",") if t.strip()]


def _methods(s: str) -> list[Method]:
    return [Method.parse(t) for t in s.split(",") if t.strip()]


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {options}")
        return v
    return parse


def _str(s: str) -> str:
    return s.strip()


RUN_KEYS: dict[str, tuple[Callable, Any]] = {
    "seed": (_u64, DEFAULT_SEED),
    "checkpoint": (_str, REFERENCE_CHECKPOINT),
    "dataset": (_str, "reference:test"),
    "workers": (_pos_int, 1),
}

COMMAND_KEYS: dict[str, dict[str, tuple[Callable, Any]]] = {
    "train": {
        "init": (_str, "reference-config"),
        "train_dataset": (_str, "reference:train"),
        "learning_rate": (_float, 0.05),
        "batch_size": (_pos_int, 4),
        "epochs": (_int, 3),
        "batch_count": (_int, -1),
        "augment_sigma": (_pair, None),
        "augment_luminance": (_pair, None),
        "model_id": (_str, "digits-cnn"),
    },
    "explain": {
        "image_index": (_int, 0),
        "label": (_int, -1),
        "sampler": (SamplerSpec.parse, SamplerSpec.bernoulli(0.7)),
        "samples": (_pos_int, 50),
        "multiply_by_input": (_bool, False),
        "score_mode": (_choice("logit", "log-probability"), "logit"),
        "bins": (_pos_int, 32),
        "scale": (_pos_int, 8),
    },
    "bench": {
        "methods": (_methods, _methods("bernoulli:0.7,gaussian:0.15,identity,linear")),
        "samples": (_pos_int, 100),
        "images": (_pos_int, 100),
        "bins": (_pos_int, 32),
        "pooling": (_choice("per_image", "corpus"), "per_image"),
        "normalize": (_bool, True),
    },
    "sweep": {
        "grid": (_grid, _grid("0:1:0.1")),
        "samples": (_pos_int, 50),
        "images": (_pos_int, 100),
        "bins": (_pos_int, 32),
    },
    "project": {
        "samplers": (_samplers, _samplers("identity,linear,bernoulli:0.7,gaussian:0.5,gaussian:0.9")),
        "per_group": (_pos_int, 1000),
    },
    "fragility": {
        "methods": (_methods, _methods("bernoulli:0.7,gaussian:0.15,identity,linear")),
        "train_dataset": (_str, "reference:train"),
        "learning_rate": (_float, 1e-3),
        "batch_size": (_pos_int, 8),
        "batch_count": (_int, 5000),
        "augment_sigma": (_pair, (0.1, 0.3)),
        "augment_luminance": (_pair, (0.1, 0.9)),
        "samples": (_pos_int, 100),
        "images": (_pos_int, 100),
        "bins": (_pos_int, 32),
    },
}

# flag -> (config key, commands it applies to)
OVERRIDES = {
    "samples": ("samples", {"explain", "bench", "sweep", "fragility"}),
    "bins": ("bins", {"explain", "bench", "sweep", "fragility"}),
    "multiply_by_input": ("multiply_by_input", {"explain"}),
}


def _echo(value) -> Any:
    if isinstance(value, (SamplerSpec, Method)):
        return value.token
    if isinstance(value, (list, tuple)):
        return [_echo(v) for v in value]
    return value


def load_config(command: str, path: str | None) -> dict[str, Any]:
    """Parse and validate a config file into a flat dict with defaults filled in."""
    schema = {**RUN_KEYS, **COMMAND_KEYS[command]}
    values = {k: default for k, (_, default) in schema.items()}
    if path is None:
        return values
    if Path(path).suffix == ".json":
        return _config_from_manifest(command, path)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in ("run", command):
            raise ConfigError(f"unknown section [{section}] for command {command!r}")
        allowed = RUN_KEYS if section == "run" else COMMAND_KEYS[command]
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                values[key] = allowed[key][0](raw)
            except ValueError as exc:
                raise ConfigError(f"invalid value for {key!r}: {exc}") from exc
    return values


def _config_from_manifest(command: str, path: str) -> dict[str, Any]:
    doc = json.loads(Path(path).read_text())
    if doc.get("command") != command:
        raise ConfigError(f"manifest records command {doc.get('command')!r}, not {command!r}")
    schema = {**RUN_KEYS, **COMMAND_KEYS[command]}
    values = {k: default for k, (_, default) in schema.items()}
    for key, echoed in doc["config"].items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in manifest")
        values[key] = _from_echo(key, echoed, schema[key][0])
    return values


def _from_echo(key: str, echoed, parse: Callable):
    if echoed is None:
        return None
    if parse == SamplerSpec.parse:
        return SamplerSpec.parse(echoed)
    if parse is _samplers:
        return [SamplerSpec.parse(t) for t in echoed]
    if parse is _methods:
        return [Method.parse(n) for n in echoed]
    if parse is _grid:
        return [float(v) for v in echoed]
    if parse is _pair:
        return tuple(echoed)
    return echoed


def apply_overrides(command: str, cfg: dict[str, Any], args: argparse.Namespace) -> None:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.workers is not None:
        cfg["workers"] = args.workers
    for flag, (key, commands) in OVERRIDES.items():
        val = getattr(args, flag)
        if val is None or val is False:
            continue
        if command not in commands:
            raise ConfigError(f"--{flag.replace('_', '-')} does not apply to {command!r}")
        cfg[key] = val
    if args.p is not None or args.sigma is not None:
        if command == "explain":
            if args.p is not None and args.sigma is not None:
                raise ConfigError("--p and --sigma are mutually exclusive for explain")
            cfg["sampler"] = SamplerSpec.bernoulli(args.p) if args.p is not None else SamplerSpec.gaussian(args.sigma)
        elif command in ("bench", "fragility"):
            cfg["methods"] = [_override_method(m, args.p, args.sigma) for m in cfg["methods"]]
        elif command == "sweep" and args.p is not None and args.sigma is None:
            cfg["grid"] = [args.p]
        else:
            raise ConfigError(f"--p/--sigma do not apply to {command!r}")


def _override_method(m: Method, p, sigma) -> Method:
    s = m.sampler
    if p is not None and s.kind is SamplerKind.BERNOULLI_DROP:
        return Method(SamplerSpec.bernoulli(p), m.multiply_by_input)
    if sigma is not None and s.kind is SamplerKind.GAUSSIAN_NOISE:
        return Method(SamplerSpec.gaussian(sigma, s.clamp), m.multiply_by_input)
    return m


# ---------------------------------------------------------------------------
# resources
# ---------------------------------------------------------------------------


def open_dataset(spec: str) -> Dataset:
    """``reference:train|test``, ``idx:<images>,<labels>`` or ``rgb:<dir>:<W>x<H>``."""
    kind, _, rest = spec.partition(":")
    if kind == "reference":
        return load_reference(rest or "test")
    if kind == "idx":
        images, _, labels = rest.partition(",")
        return load_idx(images, labels)
    if kind == "rgb":
        directory, _, size = rest.rpartition(":")
        w, _, h = size.partition("x")
        return load_rgb_dir(directory, int(w), int(h))
    raise ConfigError(f"unknown dataset spec {spec!r}")


def open_checkpoint(spec: str):
    if spec == REFERENCE_CHECKPOINT:
        return load_checkpoint(reference_dir() / "reference.aclb")
    return load_checkpoint(spec)


@dataclass
class Run:
    out: Path
    artifacts: list[str]

    def write(self, name: str, data: bytes | str) -> Path:
        path = self.out / name
        path.write_bytes(data.encode("utf-8") if isinstance(data, str) else data)
        self.artifacts.append(name)
        return path


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run: Run, command: str, cfg: dict[str, Any]) -> Path:
    doc = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config": {k: _echo(v) for k, v in cfg.items()},
        "artifacts": {name: sha256(run.out / name) for name in sorted(run.artifacts)},
    }
    path = run.out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(directory) -> list[str]:
    """Names of artifacts whose current hash differs from the manifest."""
    directory = Path(directory)
    doc = json.loads((directory / "manifest.json").read_text())
    bad = []
    for name, digest in doc["artifacts"].items():
        path = directory / name
        if not path.exists() or sha256(path) != digest:
            bad.append(name)
    return bad


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: dict, run: Run) -> None:
    if cfg["init"] == "reference-config":
        ckpt = init_model(reference_config(seed=cfg["seed"]))
    else:
        ckpt = open_checkpoint(cfg["init"])
    train_data = open_dataset(cfg["train_dataset"])
    eval_data = open_dataset(cfg["dataset"])
    aug = None
    if cfg["augment_sigma"] is not None or cfg["augment_luminance"] is not None:
        aug = AugmentSpec(cfg["augment_sigma"] or (0.0, 0.0), cfg["augment_luminance"] or (1.0, 1.0))
    by_batches = cfg["batch_count"] >= 0
    spec = TrainSpec(cfg["learning_rate"], cfg["batch_size"], None if by_batches else cfg["epochs"],
                     cfg["batch_count"] if by_batches else None, aug, cfg["seed"])
    trained = train(ckpt, train_data.images, train_data.labels, spec, (eval_data.images, eval_data.labels),
                    on_epoch=lambda e, loss: log.info("epoch %d loss %.4f", e, loss))
    trained.train_meta["id"] = cfg["model_id"]
    run.write("checkpoint.aclb", trained.to_bytes())
    run.write("train.json", json.dumps(trained.train_meta, indent=2, sort_keys=True) + "\n")


def cmd_explain(cfg: dict, run: Run) -> None:
    ckpt = open_checkpoint(cfg["checkpoint"])
    data = open_dataset(cfg["dataset"])
    i = cfg["image_index"]
    if not 0 <= i < len(data):
        raise ConfigError(f"image_index {i} outside dataset of {len(data)}")
    x = data.images[i]
    y = cfg["label"] if cfg["label"] >= 0 else int(data.labels[i])
    z = normalize_min_max(integrate(ckpt, x, y, cfg["sampler"], cfg["samples"], cfg["seed"],
                                    cfg["multiply_by_input"], cfg["score_mode"], cfg["workers"]))
    est = estimate_mi(x, z, HistogramConfig(cfg["bins"]))
    run.write("explanation.csv", z.to_csv())
    run.write("explanation.json", json.dumps({**z.meta, "image_index": i, "certainty": est.to_dict()},
                                             indent=2, sort_keys=True) + "\n")
    render_heatmap(z.values, run.out / "explanation.png", cfg["scale"])
    run.artifacts += ["explanation.png", "explanation.pgm"]


def cmd_bench(cfg: dict, run: Run) -> None:
    table = benchmark(open_checkpoint(cfg["checkpoint"]), open_dataset(cfg["dataset"]), cfg["methods"],
                      cfg["samples"], cfg["images"], cfg["seed"], HistogramConfig(cfg["bins"], cfg["pooling"]),
                      cfg["normalize"], cfg["workers"])
    run.write("bench.csv", table.to_csv())
    run.write("bench.json", table.to_json())


def cmd_sweep(cfg: dict, run: Run) -> None:
    res = p_sweep(open_checkpoint(cfg["checkpoint"]), open_dataset(cfg["dataset"]), cfg["grid"], cfg["samples"],
                  cfg["images"], cfg["seed"], HistogramConfig(cfg["bins"]), cfg["workers"])
    run.write("sweep.csv", res.to_csv())
    run.write("sweep.json", json.dumps({
        "grid": res.grid, "mean_grad_norm": res.mean_grad_norm, "mean_mi": res.mean_mi,
        "argmax_grad_norm": res.argmax_grad_norm, "argmax_mi": res.argmax_mi,
        "per_image_grad_norm": res.per_image_grad_norm, "per_image_mi": res.per_image_mi,
    }, indent=2, sort_keys=True) + "\n")
    run.write("sweep.png", line_plot(res.grid, [res.mean_grad_norm, res.mean_mi]))


def cmd_project(cfg: dict, run: Run) -> None:
    res = alignment_study(open_checkpoint(cfg["checkpoint"]), open_dataset(cfg["dataset"]), cfg["samplers"],
                          cfg["per_group"], cfg["seed"])
    run.write("projection.csv", res.to_csv())
    run.write("centroids.csv", res.centroids_csv())
    run.write("projection.png", scatter_plot(res.points, res.group_labels, res.centroids))


def cmd_fragility(cfg: dict, run: Run) -> None:
    if cfg["batch_count"] < 0:
        raise ConfigError("batch_count must be >= 0")
    rep = augmentation_fragility(
        open_checkpoint(cfg["checkpoint"]), open_dataset(cfg["train_dataset"]),
        AugmentSpec(cfg["augment_sigma"], cfg["augment_luminance"]),
        TrainSpec(cfg["learning_rate"], cfg["batch_size"], None, cfg["batch_count"], None, cfg["seed"]),
        cfg["methods"], BenchSettings(cfg["samples"], cfg["images"], cfg["seed"], HistogramConfig(cfg["bins"])),
        bench_data=open_dataset(cfg["dataset"]), workers=cfg["workers"])
    run.write("fragility.csv", rep.to_csv())
    run.write("fragility.json", rep.to_json())
    run.write("before.csv", rep.before.to_csv())
    run.write("after.csv", rep.after.to_csv())
    run.write("finetuned.aclb", rep.fine_tuned.to_bytes())


COMMANDS = {
    "train": cmd_train,
    "explain": cmd_explain,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "project": cmd_project,
    "fragility": cmd_fragility,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="attriblab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config, or a manifest.json to rerun")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--out", default=f"runs/{name}")
        p.add_argument("--workers", type=_pos_int)
        p.add_argument("--p", type=float)
        p.add_argument("--sigma", type=float)
        p.add_argument("--samples", type=_pos_int)
        p.add_argument("--bins", type=_pos_int)
        p.add_argument("--multiply-by-input", dest="multiply_by_input", action="store_true")
        p.add_argument("-v", "--verbose", action="store_true")
    v = sub.add_parser("verify", help="check artifact hashes against a run's manifest")
    v.add_argument("directory")
    return ap


def _fail(category: str, message: str) -> int:
    message = " ".join(str(message).split())
    print(f"error category={category} message={json.dumps(message)}", file=sys.stderr)
    return EXIT_CODES[category]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        try:
            bad = verify_manifest(args.directory)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            return _fail("io", exc)
        if bad:
            return _fail("data", f"artifact hash mismatch: {', '.join(bad)}")
        print("ok")
        return 0

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.command, args.config)
        apply_overrides(args.command, cfg, args)
    except (ConfigError, ModelConfigError, ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail("config", exc)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        run = Run(out, [])
        COMMANDS[args.command](cfg, run)
        write_manifest(run, args.command, cfg)
    except (ConfigError, ModelConfigError) as exc:
        return _fail("config", exc)
    except IdxFormatError as exc:
        return _fail("data", exc)
    except OSError as exc:
        return _fail("io", exc)
    except (FloatingPointError, EigenSolveError) as exc:
        return _fail("compute", exc)
    except ValueError as exc:
        return _fail("data", exc)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    print(out / "manifest.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
