"""Command line entry point: gen-data, train, simulate, evaluate, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


class UsageError(Exception):
    """Bad arguments or unreadable configuration (exit status 2)."""


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _from_config(factory, data, what):
    try:
        return factory(data)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from exc


def build_parser():
    p = argparse.ArgumentParser(prog="hybridmpm", description=__doc__)
    p.add_argument("--seed", type=int, default=0, help="global random seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for BLAS and numba")
    p.add_argument("--config", help="JSON config for the chosen subcommand")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate scenes and write a tensor dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--resolution", type=int, default=16)
    g.add_argument("--templates", nargs="+", default=None)
    g.add_argument("--scenes-per-template", type=int, default=1)
    g.add_argument("--n-solids", type=int, default=1)
    g.add_argument("--tol", type=float, default=None)

    t = sub.add_parser("train", help="train the pressure surrogate on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default="model.mpmw")
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--window", type=int, default=None)
    t.add_argument("--loss", choices=("huber", "mse", "mae"), default=None)
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.add_argument("--curve", default=None, help="loss curve CSV path")

    s = sub.add_parser("simulate", help="run a physical or hybrid trajectory")
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("physical", "hybrid"), default="physical")
    s.add_argument("--template", default="dam_break", help="scene template when --config is absent")
    s.add_argument("--resolution", type=int, default=16)
    s.add_argument("--n-physical", type=int, default=4)
    s.add_argument("--window", type=int, default=4)
    s.add_argument("--model", default=None)
    s.add_argument("--predictor", choices=("surrogate", "previous", "zero", "exact"), default="surrogate")
    s.add_argument("--solver", choices=("gs", "mgpcg"), default=None,
                   help="pressure solver (default: the scene's own setting)")
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--no-particles", action="store_true")

    e = sub.add_parser("evaluate", help="compare two trajectories")
    e.add_argument("--truth", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--skip", type=int, default=None, help="frames skipped before averaging (default 50)")
    e.add_argument("--out", default=None, help="summary JSON path")

    i = sub.add_parser("inspect", help="describe a .pgt tensor, checkpoint or dataset")
    i.add_argument("path")
    return p


def _set_threads(n):
    # read at import time by BLAS and numba; the numba kernels here are serial
    for var in THREAD_VARS:
        os.environ[var] = str(n)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, config):
    from .dataset import DatasetRequest, generate_dataset
    from .mpm import SceneConfig

    if config is not None and "dims" in config:
        configs = [_from_config(SceneConfig.from_dict, config, "scene")]
        frames = args.frames
    else:
        req = dict(frames=args.frames, resolution=args.resolution, scenes_per_template=args.scenes_per_template,
                   n_solids=args.n_solids, seed=args.seed)
        if args.templates:
            req["templates"] = tuple(args.templates)
        req.update(config or {})
        request = _from_config(lambda d: DatasetRequest(**d), req, "dataset")
        configs = request.scene_configs()
        frames = request.frames
    manifest = generate_dataset(configs, frames, args.out, tol=args.tol, seed=args.seed)
    failed = [s.name for s in manifest.scenes if s.status != "ok"]
    print(f"wrote {sum(s.frames for s in manifest.scenes)} frames for {len(manifest.scenes)} scenes to {args.out}")
    if failed:
        print(f"failed scenes: {', '.join(failed)}", file=sys.stderr)
    return 0


def cmd_train(args, config):
    from .dataset import load_sequences
    from .surrogate import TrainConfig, save_model, train

    cfg = dict(config or {})
    cfg["seed"] = args.seed
    for key, val in (("max_iterations", args.iters), ("learning_rate", args.lr), ("batch_size", args.batch),
                     ("window", args.window), ("loss", args.loss), ("checkpoint_every", args.checkpoint_every)):
        if val is not None:
            cfg[key] = val
    if cfg.get("checkpoint_every"):
        cfg.setdefault("checkpoint_dir", str(Path(args.out).with_suffix("")) + "_ckpt")
    tcfg = _from_config(TrainConfig.from_dict, cfg, "training")
    sequences = load_sequences(args.data)
    result = train(sequences, tcfg)
    save_model(result.model, args.out)
    if args.curve:
        result.write_curve(args.curve)
    print(f"trained {result.iterations} iterations, loss {result.losses[0]:.6g} -> {result.losses[-1]:.6g}; "
          f"model written to {args.out}")
    return 0


def cmd_simulate(args, config):
    from .hybrid import HybridConfig, run
    from .mpm import SceneConfig
    from .scenes import make_scene

    if config is not None:
        scene = _from_config(SceneConfig.from_dict, config, "scene")
    else:
        scene = make_scene(args.template, args.resolution, seed=args.seed)
    if args.solver:
        scene.solver = args.solver
    if args.mode == "physical":
        hc = HybridConfig(scene, n_physical=args.frames, m_predicted=0, refine_tol=args.tol,
                          refine_solver=scene.solver, window=min(args.window, args.frames), out_dir=args.out,
                          write_particles=not args.no_particles)
        predictor = None
    else:
        if args.frames < args.n_physical:
            raise UsageError("--frames must be at least --n-physical")
        if args.predictor == "surrogate" and not args.model:
            raise UsageError("hybrid mode with the surrogate predictor needs --model")
        hc = HybridConfig(scene, n_physical=args.n_physical, m_predicted=args.frames - args.n_physical,
                          refine_tol=args.tol, refine_solver=scene.solver, model_path=args.model,
                          window=args.window, out_dir=args.out, write_particles=not args.no_particles)
        predictor = None if args.predictor == "surrogate" else args.predictor
    traj = run(hc, predictor)
    print(f"{len(traj.records)} frames written to {args.out} ({traj.status})")
    if not traj.complete:
        print(f"error: {traj.error}", file=sys.stderr)
        return 1
    return 0


def _frame_files(path):
    files = sorted(Path(path).glob("frame_*.pgt"))
    if not files:
        raise UsageError(f"{path}: no frame_*.pgt files")
    return files


def cmd_evaluate(args, config):
    import numpy as np

    from .grid import denormalize, read_pgt
    from .metrics import PSNR_CAP, SKIP_FRAMES, psnr, read_metrics_csv, summarize, write_summary

    truth, pred = _frame_files(args.truth), _frame_files(args.pred)
    if len(truth) != len(pred):
        raise UsageError(f"frame counts differ: {len(truth)} vs {len(pred)}")
    extra = {}
    mpath = Path(args.pred) / "metrics.csv"
    if mpath.exists():
        extra = {r["frame"]: r for r in read_metrics_csv(mpath)}
    rows = []
    for tf, pf in zip(truth, pred):
        t, p = read_pgt(tf), read_pgt(pf)
        if t.shape != p.shape:
            raise UsageError(f"{tf.name}: shapes differ")
        row = {"frame_index": t.frame_index}
        for name, a, b in (("psnr_f", t.X_f, p.X_f), ("psnr_s", t.X_s, p.X_s), ("psnr_i", t.X_i, p.X_i)):
            mask = (a != 0) | (b != 0)
            if not mask.any():
                row[name] = None
                continue
            ta, pb = denormalize(a[mask]), denormalize(b[mask])
            row[name] = psnr(ta, pb) if np.any(ta) else (PSNR_CAP if np.array_equal(ta, pb) else None)
        m = extra.get(t.frame_index)
        row["div_max"] = m["div_max"] if m else None
        row["zeta"] = m["zeta"] if m else None
        rows.append(row)
    skip = SKIP_FRAMES if args.skip is None else args.skip
    summary = summarize(rows, skip=skip)
    summary["per_frame"] = rows
    if args.out:
        write_summary(args.out, summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "per_frame"}, indent=2))
    if summary["frames"] == 0:
        print(f"note: all {len(rows)} frames fall inside the first {skip} skipped frames", file=sys.stderr)
    return 0


def cmd_inspect(args, config):
    import numpy as np

    path = Path(args.path)
    if not path.exists():
        raise UsageError(f"{path}: no such file or directory")
    if path.is_dir() or path.name.endswith(".json"):
        from .dataset import DatasetManifest, verify_dataset

        root = path if path.is_dir() else path.parent
        manifest = DatasetManifest.load(path)
        for s in manifest.scenes:
            print(f"{s.name}: {s.frames} frames at {tuple(s.resolution)} [{s.status}] hash {s.config_hash[:12]}")
        problems = verify_dataset(root)
        print("verified ok" if not problems else "\n".join(problems))
        return 0 if not problems else 1
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"PGT1":
        from .grid import read_pgt

        t = read_pgt(path)
        print(f"frame {t.frame_index}, padded shape {t.shape}")
        for name, arr in (("X_f", t.X_f), ("X_s", t.X_s), ("X_i", t.X_i)):
            print(f"  {name}: nonzero {int(np.count_nonzero(arr))}, min {arr.min():.6g}, max {arr.max():.6g}")
        return 0
    if magic == b"MPMW":
        from .surrogate import load_model

        model = load_model(path)
        print(json.dumps({k: list(v) if isinstance(v, tuple) else v
                          for k, v in model.config.__dict__.items()}))
        for name, p in model.params.items():
            print(f"  {name}: {p.data.shape}")
        return 0
    raise UsageError(f"{path}: unrecognised file type")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "simulate": cmd_simulate,
            "evaluate": cmd_evaluate, "inspect": cmd_inspect}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    try:
        config = _load_json(args.config) if args.config else None
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        print(f"hybridmpm: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"hybridmpm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
