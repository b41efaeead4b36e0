"""Command-line entry point ``prism``.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 protocol violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import eval_harness as eh
from . import models, plotting, svf_baseline
from .diff_net import NonFiniteError, read_container
from .grid_image import read_landmarks, write_landmarks
from .phantom import PhantomSpec, generate, read_dataset, write_dataset

log = logging.getLogger("prism")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PROTOCOL = 0, 2, 3, 4
CHECKPOINT = "checkpoint.prism"
TRAIN_LOG = "train_log.csv"
RUN_FILE = "run.json"


class ConfigError(Exception):
    pass


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _dataset(path):
    try:
        return read_dataset(path)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc


# --- commands ---------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    try:
        spec = PhantomSpec.from_dict(_load_json(args.spec))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid phantom spec: {exc}") from exc
    ds = generate(spec)
    manifest = write_dataset(ds, args.out)
    plotting.plot_phantom(ds, Path(args.out) / "phantom.png")
    print(manifest)
    return EXIT_OK


def _experiment_spec(args, cfg: dict) -> eh.ExperimentSpec:
    cfg = dict(cfg)
    registration = cfg.pop("registration", {})
    ablation = cfg.pop("ablation", "full")
    seed = int(cfg.pop("seed", args.seed))
    try:
        spec = eh.ExperimentSpec(args.scenario, str(Path(args.dataset).resolve()), args.mode, ablation,
                                 cfg, seed, registration)
        if spec.mode in ("integrated", "trajectory"):
            spec.model_config()
        elif spec.mode == "sequential":
            spec.registration_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def cmd_train(args) -> int:
    spec = _experiment_spec(args, _load_json(args.config))
    ds = _dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"experiment": spec.to_dict(), "split": eh.build_split(ds, spec.scenario).to_dict()}

    def progress(state):
        if isinstance(state, models.TrainState) and state.epoch % max(1, state.config.val_every) == 0:
            log.info("epoch %d loss %.5f val %s", state.epoch, state.log[-1][1], state.log[-1][5])

    try:
        run = eh.train_experiment(spec, ds, progress)
    except models.TrainingDiverged as exc:
        if exc.state is not None:
            models.save_state(exc.state, out / CHECKPOINT, eh.full_path(ds))
            models.write_log(exc.state, out / TRAIN_LOG)
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NonFiniteError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    meta["train_seconds"] = run.train_seconds
    meta["frames_read"] = sorted(run.tracker.frames_read())
    ref = ds.reference
    if run.state is not None:
        models.save_state(run.state, out / CHECKPOINT, eh.full_path(ds))
        models.write_log(run.state, out / TRAIN_LOG)
        plotting.plot_training_log(run.state.log, out / "train_log.png")
    elif run.sequential is not None:
        run.sequential.save(out / CHECKPOINT, reference_time=ref.time,
                            prediction_path=models._path_dict(eh.full_path(ds)))
    (out / RUN_FILE).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    print(out / RUN_FILE)
    return EXIT_OK


def _load_predictor(run_dir: Path, spec: eh.ExperimentSpec, ds):
    if spec.mode == "identity":
        return eh.IdentityPredictor(), None
    if spec.mode == "oracle":
        return eh.OraclePredictor(ds), None
    ckpt = run_dir / CHECKPOINT
    if not ckpt.exists():
        raise ConfigError(f"{ckpt} missing; run `prism train` first")
    if spec.mode == "sequential":
        return eh.SequentialPredictor(svf_baseline.SequentialModel.load(ckpt)), None
    state, path = models.load_state(ckpt)
    return eh.NeuralPredictor(state, path), state


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    meta = _load_json(run_dir / RUN_FILE)
    try:
        spec = eh.ExperimentSpec(**meta["experiment"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{run_dir / RUN_FILE}: {exc}") from exc
    ds = _dataset(spec.dataset)
    split = eh.build_split(ds, spec.scenario)
    if split.to_dict() != meta.get("split"):
        print("split recorded at training time does not match the dataset", file=sys.stderr)
        return EXIT_PROTOCOL
    leaked = set(meta.get("frames_read", [])) & set(split.held_out)
    if leaked:
        print(f"held-out frames {sorted(leaked)} were read during training", file=sys.stderr)
        return EXIT_PROTOCOL
    predictor, state = _load_predictor(run_dir, spec, ds)
    run = eh.TrainedRun(spec, split, predictor, state, train_seconds=meta.get("train_seconds", 0.0))
    report = eh.evaluate(run, ds)
    written = eh.write_report(report, args.out)
    out = Path(args.out)
    plotting.plot_tre(report, out.with_name(out.stem + "_tre.png"))
    if state is not None and state.log:
        plotting.plot_training_log(state.log, out.with_name(out.stem + "_training.png"))
    print(eh.format_report_text(report), end="")
    log.info("wrote %s", ", ".join(str(p) for p in written))
    return EXIT_OK


def _checkpoint_header(path):
    try:
        header, _ = read_container(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return header


def cmd_predict(args) -> int:
    header = _checkpoint_header(args.checkpoint)
    pts = read_landmarks(args.points).points
    tag = header.get("mode")
    if tag in models.CONTAINER_TAGS.values():
        state, path = models.load_state(args.checkpoint)
        try:
            warped = models.predict_motion(state, pts, args.from_time, args.to_time, path=path)
        except models.NonReferenceSource as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_PROTOCOL
    elif tag == "OLS":
        model = svf_baseline.SequentialModel.load(args.checkpoint)
        t_ref = header.get("reference_time")
        if t_ref is None or not np.isclose(args.from_time, t_ref, atol=1e-9):
            print(f"sequential model maps from its reference (t={t_ref} s) only", file=sys.stderr)
            return EXIT_PROTOCOL
        path = models.path_from_dict(header["prediction_path"])
        warped = model.deformation(path(args.to_time))(pts)
    else:
        raise ConfigError(f"{args.checkpoint}: unsupported checkpoint mode {tag!r}")
    write_landmarks(warped, args.out)
    print(args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_json(args.config)
    seed = int(cfg.pop("seed", args.seed))
    cfg.pop("ablation", None)
    cfg.pop("registration", None)
    try:
        models.ModelConfig.from_dict({**cfg, "mode": "trajectory"})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    ds = _dataset(args.dataset)
    table = eh.run_ablation(ds, tuple(args.scenarios), cfg, seed)
    eh.write_table(table, args.out)
    out = Path(args.out)
    plotting.plot_ablation(table, out.with_name(out.stem + ".png"))
    print(eh.format_table_text(table), end="")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prism", description="Surrogate-driven respiratory motion models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate an analytic 4D breathing phantom")
    g.add_argument("--spec", help="phantom spec JSON (defaults for missing keys)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train a motion model on a leave-out split")
    t.add_argument("--dataset", required=True)
    t.add_argument("--mode", required=True, choices=eh.MODES)
    t.add_argument("--scenario", required=True, choices=eh.SCENARIOS)
    t.add_argument("--config", help="JSON with model-config keys, plus optional seed/ablation/registration")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="warp points between two breathing times")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--from-time", type=float, required=True)
    r.add_argument("--to-time", type=float, required=True)
    r.add_argument("--points", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="TRE report for a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="regularizer ablation table for the trajectory model")
    a.add_argument("--dataset", required=True)
    a.add_argument("--scenarios", nargs="+", default=["MI", "ME", "EE"], choices=eh.SCENARIOS)
    a.add_argument("--config")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except eh.ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
