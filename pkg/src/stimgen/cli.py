"""Command-line front end: synth, train, eval, interp, neighbors and replay.

Every command writes a JSON run manifest (resolved configuration, seed and
sha256 checksums of inputs and outputs). ``stimgen replay <manifest>`` reruns
the command into a fresh directory and compares checksums.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure. Failures also print one JSON line prefixed ``stimgen-error`` on
standard error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .latent_nav import (DEGENERATE, DIRECTIONS, MlerpError, ScheduleError, export_interpolation,
                         lerp_result, mlerp, neighborhood_search)
from .metrics import MetricError, SsimParams, make_metric
from .signal_io import (DEFAULT_CHANNELS, TEMPLATES, DataError, export_series, load_corpus,
                        read_sequence, save_corpus, svg_plot, synth_corpus)
from .trainer import (NonFiniteLossError, TrainConfig, TrainingError, build_model,
                      evaluate_models, train, write_report)
from .vaegan import CheckpointError, load_checkpoint, save_checkpoint

MANIFEST = "run_manifest.json"
CHECKPOINT = "checkpoint.stgn"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class ReplayMismatch(RuntimeError):
    pass


# --- configuration --------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _parse_floats(text) -> tuple[float, ...] | None:
    if text in (None, "", "none"):
        return None
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


@dataclass
class RunConfig:
    """Everything a command needs; flat ``key = value`` names map onto these fields.

    Training keys are the :class:`~stimgen.trainer.TrainConfig` fields.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    widths: tuple[int, ...] = (32, 64, 128, 256)
    feature_layer: int = 3
    init_scheme: str = "normal"
    init_std: float = 0.02
    ssim_window: int = 11
    # data generation
    n: int = 2048
    n_test: int = 256
    length: int = 64
    noise: float = 1.0
    # navigation
    metric: str = "ssim"
    schedule: str = "linear"
    custom: tuple[float, ...] | None = None
    wps: int = 8
    s: float = 15.0
    kappa: float = 0.5
    direction: str | None = None
    delta: float = 2.0
    replacement: str = "closest"

    def __post_init__(self):
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ConfigError(f"widths needs 4 positive channel counts, got {self.widths}")
        if self.metric not in ("ssim", "dtw", "roughness", "composite"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.schedule not in ("linear", "sigmoid", "custom"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "custom" and self.custom is None:
            raise ConfigError("schedule = custom needs a custom list of fractions")
        if self.replacement not in ("closest", "literal"):
            raise ConfigError(f"unknown replacement rule {self.replacement!r}")
        if self.wps < 2:
            raise ConfigError("wps must be >= 2")
        if self.s <= 0:
            raise ConfigError("s must be positive")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError("kappa must lie in [0, 1]")
        if self.direction is not None and self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.metric == "roughness" and self.direction is None:
            raise ConfigError("metric = roughness needs an explicit direction "
                              "(increasing or decreasing)")
        if self.n < 1 or self.n_test < 0 or self.length < 16:
            raise ConfigError("n >= 1, n_test >= 0 and length >= 16 are required")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.init_scheme not in ("normal", "he"):
            raise ConfigError(f"unknown init_scheme {self.init_scheme!r}")

    @property
    def ssim_params(self) -> SsimParams:
        return SsimParams(window_length=self.ssim_window)

    def to_flat(self) -> dict:
        out = asdict(self.train)
        for f in fields(self):
            if f.name != "train":
                v = getattr(self, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "train"}


def _convert(name: str, raw, default):
    if name == "widths":
        return _parse_ints(raw)
    if name == "custom":
        return _parse_floats(raw)
    if isinstance(raw, str):
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    return raw


def build_config(values: dict) -> RunConfig:
    """Resolve a flat key/value mapping (strings or typed values) into a RunConfig."""
    unknown = sorted(set(values) - set(TRAIN_KEYS) - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    base = RunConfig()
    train_kw, run_kw = {}, {}
    try:
        for k, raw in values.items():
            if k in TRAIN_KEYS:
                train_kw[k] = _convert(k, raw, getattr(base.train, k))
            else:
                run_kw[k] = _convert(k, raw, getattr(base, k))
        return RunConfig(train=TrainConfig(**train_kw), **run_kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config_text(text, str(p))


# --- checksums and manifests ----------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_path(path) -> str:
    """Digest of a file, or of every file under a directory (relative names included)."""
    p = Path(path)
    if p.is_file():
        return sha256_file(p)
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file()):
        h.update(f.relative_to(p).as_posix().encode() + b"\0")
        h.update(sha256_file(f).encode())
    return h.hexdigest()


def output_checksums(root, exclude: Sequence[str] = (MANIFEST,)) -> dict[str, str]:
    root = Path(root)
    return {f.relative_to(root).as_posix(): sha256_file(f)
            for f in sorted(root.rglob("*")) if f.is_file() and f.name not in exclude}


def write_manifest(out_dir, command: str, args: dict, cfg: RunConfig | None,
                   inputs: dict[str, str], outputs: dict[str, str],
                   manifest_name: str = MANIFEST) -> Path:
    doc = {
        "stimgen_version": __version__,
        "command": command,
        "args": args,
        "config": cfg.to_flat() if cfg is not None else None,
        "seed": cfg.train.rng_seed if cfg is not None else None,
        "inputs": inputs,
        "outputs": outputs,
    }
    path = Path(out_dir) / manifest_name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _input_digests(paths: dict[str, str | None]) -> dict[str, str]:
    out = {}
    for role, p in paths.items():
        if p is None or str(p).startswith("template:"):
            continue
        if not Path(p).exists():
            raise DataError(f"{role}: {p} does not exist")
        out[str(Path(p).resolve())] = sha256_path(p)
    return out


# --- shared helpers -------------------------------------------------------------

def resolve_sequence(ref: str, length: int, channels: int) -> np.ndarray:
    """A ``template:<kind>`` reference or a per-sequence CSV path, values in [0, 1]."""
    if ref.startswith("template:"):
        kind = ref.split(":", 1)[1]
        if kind not in TEMPLATES:
            raise ConfigError(f"unknown template {kind!r}; expected one of {sorted(TEMPLATES)}")
        x = TEMPLATES[kind](length)
    else:
        x, _ = read_sequence(ref, None)
    if x.shape != (channels, length):
        raise DataError(f"{ref}: shape {x.shape} does not match model input {(channels, length)}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise DataError(f"{ref}: values must lie in [0, 1] (rescale with the corpus manifest)")
    return x


def _load_model(path):
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _channel_names(model) -> tuple[str, ...]:
    c = model.arch.channels
    return DEFAULT_CHANNELS if c == len(DEFAULT_CHANNELS) else tuple(f"ch{i}" for i in range(c))


def _make_f_m(cfg: RunConfig):
    return make_metric(cfg.metric, cfg.kappa, cfg.ssim_params)


# --- commands -------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    corpus = synth_corpus(cfg.n, cfg.length, cfg.train.rng_seed, n_test=cfg.n_test,
                          noise=cfg.noise)
    save_corpus(corpus, out)
    write_manifest(out, "synth", {"out": str(out)}, cfg, {}, output_checksums(out))
    print(f"wrote {len(corpus)} sequences to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    corpus = load_corpus(args.data, None)
    if not len(corpus.test):
        raise DataError(f"{args.data}: a test/ split is required for calibration")
    model = build_model(cfg.train, corpus.length, corpus.sequences.shape[1], cfg.widths,
                        cfg.feature_layer, init_scheme=cfg.init_scheme, init_std=cfg.init_std)
    history = train(model, corpus, cfg.train, cfg.ssim_params)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / CHECKPOINT)
    history.to_csv(out / "history.csv")
    its = history.column("iteration")
    (out / "history_objectives.svg").write_text(svg_plot(
        {n: history.column(n) for n in ("enc_obj", "dec_obj", "disc_obj")},
        title="training objectives", xlabel=f"calibration point (iterations {its[0]:.0f}"
        f"-{its[-1]:.0f})", ylabel="objective"))
    (out / "history_calibration.svg").write_text(svg_plot(
        {"ssim": history.column("cal_ssim")}, title="calibration SSIM",
        xlabel="calibration point", ylabel="SSIM"))
    inputs = _input_digests({"data": args.data, "config": args.config})
    write_manifest(out, "train", {"data": str(Path(args.data).resolve()), "out": str(out)},
                   cfg, inputs, output_checksums(out))
    last = history.points[-1]
    print(f"trained {last.iteration} iterations; calibration ssim {last.cal_ssim:.4f} "
          f"dtw {last.cal_dtw:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    report = Path(args.report)
    corpus = load_corpus(args.data, None)
    test = corpus.test if len(corpus.test) else corpus.sequences
    for p in args.ckpts:
        if not Path(p).exists():
            raise DataError(f"checkpoint {p} does not exist")
    names = [str(Path(p).resolve()) for p in args.ckpts]
    rows = evaluate_models([(n, load_checkpoint(n)) for n in names], test, cfg.ssim_params)
    report.parent.mkdir(parents=True, exist_ok=True)
    write_report(rows, report)
    inputs = _input_digests({"data": args.data, **{f"ckpt{i}": p for i, p in
                                                  enumerate(args.ckpts)}})
    write_manifest(report.parent, "eval",
                   {"data": str(Path(args.data).resolve()),
                    "ckpts": [str(Path(p).resolve()) for p in args.ckpts],
                    "report": report.name},
                   cfg, inputs, {report.name: sha256_file(report)},
                   manifest_name=report.stem + "." + MANIFEST)
    for i, r in enumerate(rows, 1):
        print(f"{i}. {r.name}  ssim {r.ssim:.4f}  dtw {r.dtw:.4f}")
    return EXIT_OK


def _interp_summary(path: Path, rows: list[tuple]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "smoothness"])
        for name, score in rows:
            w.writerow([name, repr(float(score))])


def cmd_interp(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    model = _load_model(args.ckpt)
    T, C = model.arch.sequence_length, model.arch.channels
    x0 = resolve_sequence(args.src, T, C)
    x1 = resolve_sequence(args.dst, T, C)
    z0, z1 = model.encode_mean(x0[None])[0], model.encode_mean(x1[None])[0]
    f_m = _make_f_m(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = mlerp(z0, z1, cfg.wps, model, f_m, cfg.s, cfg.schedule, cfg.replacement,
                    cfg.custom, cfg.direction)
    base = lerp_result(z0, z1, cfg.wps, model, f_m, cfg.schedule, cfg.custom, cfg.direction)
    names = _channel_names(model)
    export_interpolation(res, out / "mlerp", names)
    export_interpolation(base, out / "lerp", names, plots=False)
    export_series([x0, x1], out / "references", "csv", names, ["source", "target"])
    _interp_summary(out / "smoothness.csv", [("mlerp", res.smoothness), ("lerp", base.smoothness)])
    inputs = _input_digests({"ckpt": args.ckpt, "from": args.src, "to": args.dst,
                             "config": args.config})
    write_manifest(out, "interp", {"ckpt": str(Path(args.ckpt).resolve()),
                                   "from": _ref_arg(args.src), "to": _ref_arg(args.dst),
                                   "out": str(out)},
                   cfg, inputs, output_checksums(out))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"mlerp smoothness {res.smoothness:.4g} (lerp {base.smoothness:.4g}); "
          f"{len(res)} samples in {out / 'mlerp'}")
    return EXIT_OK


def cmd_neighbors(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    model = _load_model(args.ckpt)
    x = resolve_sequence(args.ref, model.arch.sequence_length, model.arch.channels)
    z1 = model.encode_mean(x[None])[0]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results = neighborhood_search(z1, model, _make_f_m(cfg), cfg.delta, cfg.s, cfg.wps,
                                      cfg.schedule, cfg.direction)
    names = _channel_names(model)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "smoothness.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dim", "mlerp_smoothness", "lerp_smoothness", "degenerate"])
        for r in results:
            export_interpolation(r.mlerp, out / f"dim_{r.dim:02d}", names)
            w.writerow([r.dim, repr(r.mlerp_score), repr(r.lerp_score),
                        int(DEGENERATE in r.mlerp.warnings)])
    inputs = _input_digests({"ckpt": args.ckpt, "ref": args.ref, "config": args.config})
    write_manifest(out, "neighbors", {"ckpt": str(Path(args.ckpt).resolve()),
                                      "ref": _ref_arg(args.ref), "out": str(out)},
                   cfg, inputs, output_checksums(out))
    for w_ in caught:
        print(f"warning: {w_.message}", file=sys.stderr)
    worse = [r.dim for r in results if r.mlerp_score > r.lerp_score]
    print(f"{len(results)} dimensions; mlerp smoother or equal in "
          f"{len(results) - len(worse)}")
    return EXIT_OK


def _ref_arg(ref: str) -> str:
    return ref if ref.startswith("template:") else str(Path(ref).resolve())


def cmd_replay(args, _cfg=None) -> int:
    """Rerun a recorded command into ``--out`` and compare artifact checksums."""
    src = Path(args.manifest)
    if src.is_dir():
        src = src / MANIFEST
    try:
        doc = json.loads(src.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {src}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{src}: not a run manifest ({exc})") from None
    for path, digest in doc["inputs"].items():
        if not Path(path).exists() or sha256_path(path) != digest:
            raise DataError(f"replay input {path} is missing or changed since the recorded run")
    cfg = build_config(doc["config"]) if doc["config"] is not None else RunConfig()
    a = doc["args"]
    out = Path(args.out)
    ns = argparse.Namespace(config=None, out=str(out))
    command = doc["command"]
    if command == "synth":
        cmd_synth(ns, cfg)
    elif command == "train":
        ns.data = a["data"]
        cmd_train(ns, cfg)
    elif command == "eval":
        ns.data, ns.ckpts, ns.report = a["data"], a["ckpts"], str(out / a["report"])
        cmd_eval(ns, cfg)
    elif command == "interp":
        ns.ckpt, ns.src, ns.dst = a["ckpt"], a["from"], a["to"]
        cmd_interp(ns, cfg)
    elif command == "neighbors":
        ns.ckpt, ns.ref = a["ckpt"], a["ref"]
        cmd_neighbors(ns, cfg)
    else:
        raise DataError(f"{src}: unknown command {command!r}")
    expected = doc["outputs"]
    if command == "eval":
        got = {a["report"]: sha256_file(out / a["report"])}
    else:
        got = output_checksums(out)
    diff = sorted(k for k in set(expected) | set(got) if expected.get(k) != got.get(k))
    if diff:
        raise ReplayMismatch(f"{len(diff)} artifact(s) differ from the recorded run: "
                             + ", ".join(diff[:5]))
    print(f"replay ok: {len(got)} artifact(s) identical to the recorded run")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser, keys: Sequence[str]) -> None:
    for k in keys:
        p.add_argument("--" + k.replace("_", "-"), dest="cfg_" + k, default=None,
                       metavar="VALUE", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stimgen", description="Train VAE/GAN stimulus generators and "
                     "navigate their latent space.")
    parser.add_argument("--version", action="version", version=f"stimgen {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    all_keys = list(TRAIN_KEYS) + list(RUN_KEYS)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text,
                           epilog="Any config key can also be passed as --key VALUE "
                                  "(underscores become dashes); flags override --config.")
        p.add_argument("--config", default=None, help="key = value config file")
        return p

    p = command("synth", "write a synthetic start/stop/cruise corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", dest="cfg_rng_seed", default=None)
    p.add_argument("--len", dest="cfg_length", default=None)
    _add_config_flags(p, [k for k in all_keys if k not in ("rng_seed", "length")])

    p = command("train", "train a model; writes checkpoint and history")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True)
    _add_config_flags(p, all_keys)

    p = command("eval", "rank checkpoints by reconstruction SSIM / DTW")
    p.add_argument("--ckpts", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output CSV path")
    _add_config_flags(p, all_keys)

    p = command("interp", "metric-guided interpolation between two sequences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--from", dest="src", required=True, help="CSV path or template:<kind>")
    p.add_argument("--to", dest="dst", required=True, help="CSV path or template:<kind>")
    p.add_argument("--out", required=True)
    _add_config_flags(p, all_keys)

    p = command("neighbors", "per-dimension latent neighbourhood search")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ref", required=True, help="CSV path or template:<kind>")
    p.add_argument("--out", required=True)
    _add_config_flags(p, all_keys)

    p = sub.add_parser("replay", help="rerun a command from its run manifest")
    p.add_argument("manifest", help="run_manifest.json or the directory holding it")
    p.add_argument("--out", required=True, help="fresh output directory")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "interp": cmd_interp,
            "neighbors": cmd_neighbors}


def resolve_config(args) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for k, v in vars(args).items():
        if k.startswith("cfg_") and v is not None:
            values[k[4:]] = v
    return build_config(values)


def _fail(code: int, exc: BaseException) -> int:
    kind = type(exc).__name__
    print(f"stimgen: {exc}", file=sys.stderr)
    print("stimgen-error " + json.dumps({"exit_code": code, "kind": kind, "message": str(exc)}),
          file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            raise UsageError("a command is required")
        if args.command == "replay":
            return cmd_replay(args)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, ScheduleError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DataError, CheckpointError, ad.ShapeError, TrainingError, MetricError,
            FileNotFoundError) as exc:
        if isinstance(exc, NonFiniteLossError):
            return _fail(EXIT_NUMERIC, exc)
        return _fail(EXIT_DATA, exc)
    except (FloatingPointError, MlerpError, ReplayMismatch,
            ad.NonFiniteGradientError) as exc:
        return _fail(EXIT_NUMERIC, exc)


if __name__ == "__main__":
    sys.exit(main())
