"""Command-line interface.

Subcommands: ``generate`` (synthetic datasets), ``train``, ``eval``,
``track``, ``compare`` (sampling strategies), ``plot`` (bar charts / curves
from report tables).  Every command writes its resolved configuration next
to its outputs so a run can be reproduced from that file plus the seed.

Errors exit nonzero and print one machine-readable line to stderr:
``opstrack-error: category=<category> detail=<message>``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import data as data_mod
from .data import SynthConfig, Tracklet, generate_synthetic, load_tracklet, save_tracklet
from .errors import (CheckpointError, ConfigError, DataFormatError,
                     DivergenceError, InvalidArgumentError, OpsTrackError)
from .localization import dump_head_maps
from .nn import load_checkpoint
from .tracker import (STRATEGIES, TrackerConfig, TrackNet, compare_sampling,
                      config_from_dict, config_hash, config_to_dict, evaluate,
                      run_tracklet, split_optim_state, train)

EXIT_CODES = {
    "config": 2,
    "invalid-argument": 2,
    "data": 3,
    "checkpoint": 4,
    "divergence": 5,
    "empty-region": 6,
    "internal": 1,
}


def _fail(exc: OpsTrackError) -> int:
    sys.stderr.write(f"opstrack-error: category={exc.category} detail={exc}\n")
    return EXIT_CODES.get(exc.category, 1)


def _dataset_root(args) -> Path:
    root = args.dataset or os.environ.get("OPSTRACK_DATA_ROOT")
    if not root:
        raise ConfigError("no dataset given (use --dataset or OPSTRACK_DATA_ROOT)")
    path = Path(root)
    if not path.exists():
        raise DataFormatError(f"dataset directory {path} does not exist")
    return path


def _load_dataset(root: Path) -> list[Tracklet]:
    files = sorted(root.glob("tracklet_*.txt"))
    if not files:
        raise DataFormatError(f"no tracklet_*.txt files under {root}")
    return [load_tracklet(f) for f in files]


def _load_config(args) -> TrackerConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DataFormatError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    # flags override file keys
    if getattr(args, "epochs", None) is not None:
        base["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    return config_from_dict(base)


def _write_resolved(out_dir: Path, payload: dict, name: str = "config.resolved.json"):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_run_config(out_dir: Path, cfg: TrackerConfig, run_meta: dict):
    """Persist the resolved tracker config (directly reusable via --config)
    plus the command metadata needed to reproduce the run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(out_dir, config_to_dict(cfg))
    (out_dir / "run.json").write_text(
        json.dumps(run_meta, indent=2, sort_keys=True) + "\n")


def _load_model(args, cfg: TrackerConfig) -> TrackNet:
    if not args.checkpoint:
        raise CheckpointError("this command needs --checkpoint")
    if not Path(args.checkpoint).exists():
        raise CheckpointError(f"checkpoint {args.checkpoint} does not exist; "
                              "train one with `opstrack train`")
    state, manifest = load_checkpoint(args.checkpoint)
    if manifest.get("config_hash") and manifest["config_hash"] != config_hash(cfg):
        sys.stderr.write("opstrack: warning: checkpoint config hash differs from "
                         "the resolved config\n")
    model_state, _ = split_optim_state(state)
    model = TrackNet(cfg)
    model.load_state_dict(model_state)
    return model


def _set_threads(n: int | None):
    if n is None:
        return
    try:
        import numba

        numba.set_num_threads(max(1, n))
    except (ImportError, ValueError):
        pass  # best effort; BLAS pools are pinned at process start


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth_kwargs = {}
    if args.config:
        synth_kwargs = json.loads(Path(args.config).read_text())
        known = set(SynthConfig.__dataclass_fields__)
        unknown = sorted(set(synth_kwargs) - known)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {unknown}")
        for key in ("length_range", "width_range", "height_range",
                    "object_points_range", "velocity", "speed_range",
                    "yaw_rate_range"):
            if isinstance(synth_kwargs.get(key), list):
                synth_kwargs[key] = tuple(synth_kwargs[key])
    if args.frames is not None:
        synth_kwargs["num_frames"] = args.frames
    if args.clutter is not None:
        synth_kwargs["clutter_points"] = args.clutter
    seed = args.seed if args.seed is not None else 0
    seeds = data_mod.tracklet_seeds(seed, args.tracklets)
    entries = []
    for i, tseed in enumerate(seeds):
        cfg = SynthConfig(seed=tseed, **synth_kwargs)
        tracklet = generate_synthetic(cfg)
        name = f"tracklet_{i:03d}.txt"
        save_tracklet(out / name, tracklet)
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        entries.append({"name": name, "sha256": digest})
    resolved = {"command": "generate", "seed": seed, "tracklets": args.tracklets,
                "synth": synth_kwargs}
    manifest = {
        "config_hash": hashlib.sha256(
            json.dumps(resolved, sort_keys=True).encode()).hexdigest(),
        "files": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_resolved(out, resolved)
    print(f"wrote {len(entries)} tracklets to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    root = _dataset_root(args)
    tracklets = _load_dataset(root)
    n_val = min(args.val_tracklets, max(0, len(tracklets) - 1))
    val = tracklets[len(tracklets) - n_val:] if n_val else []
    trainset = tracklets[:len(tracklets) - n_val] if n_val else tracklets
    out = Path(args.out)
    _write_run_config(out, cfg, {"command": "train", "dataset": str(root),
                                 "val_tracklets": n_val})
    model = TrackNet(cfg)
    report = train(model, trainset, val, cfg, out_dir=out,
                   log=(lambda rec: print(json.dumps(rec))) if args.verbose else None)
    if report.aborted:
        raise DivergenceError(report.abort_reason)
    print(f"trained {cfg.epochs} epochs; last checkpoint {report.last_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    tracklets = _load_dataset(_dataset_root(args))
    out = Path(args.out)
    oracle = "gt" if args.gt_oracle else None
    if oracle:
        model = TrackNet(cfg)  # plumbing check needs no trained weights
    else:
        model = _load_model(args, cfg)
    report = evaluate(model, tracklets, cfg, sampler=args.strategy, oracle=oracle,
                      seed=cfg.seed)
    _write_run_config(out, cfg, {"command": "eval", "strategy": args.strategy,
                                 "gt_oracle": bool(oracle)})
    report.to_tsv(out / "metrics.tsv")
    print(report.to_tsv(), end="")
    return 0


def cmd_track(args) -> int:
    cfg = _load_config(args)
    tracklets = _load_dataset(_dataset_root(args))
    if not 0 <= args.track < len(tracklets):
        raise InvalidArgumentError(f"--track {args.track} out of range "
                                   f"(dataset has {len(tracklets)} tracklets)")
    model = _load_model(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result, diags = run_tracklet(model, tracklets[args.track], cfg,
                                 sampler=args.strategy, seed=cfg.seed,
                                 collect_diags=True)
    lines = ["frame\tcx\tcy\tcz\tlength\twidth\theight\tyaw\tiou\tdistance\tfallback"]
    for t, box in enumerate(result.boxes):
        fb = diags[t - 1].get("fallback", False) if t >= 1 else False
        lines.append(f"{t}\t" + "\t".join(f"{v:.6f}" for v in
                                          [*box.center, *box.size, box.yaw])
                     + f"\t{result.ious[t]:.6f}\t{result.distances[t]:.6f}\t{int(fb)}")
    (out / "trajectory.tsv").write_text("\n".join(lines) + "\n")
    if args.dump_maps:
        for t, diag in enumerate(diags, start=1):
            if "maps" not in diag:
                continue
            maps = diag["maps"]
            dump_head_maps(out / f"maps_{t:04d}.maps", {
                "center": maps.center.data,
                "offset": maps.offset.data,
                "z": maps.z.data,
                "theta": maps.theta.data,
            })
    _write_run_config(out, cfg, {"command": "track", "track": args.track,
                                 "strategy": args.strategy})
    print(f"tracked {len(result.boxes)} frames -> {out / 'trajectory.tsv'}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    tracklets = _load_dataset(_dataset_root(args))
    model = _load_model(args, cfg)
    strategies = (args.strategy,) if args.strategy else STRATEGIES
    report = compare_sampling(model, tracklets, cfg, strategies=strategies,
                              seed=cfg.seed)
    out = Path(args.out)
    _write_run_config(out, cfg, {"command": "compare",
                                 "strategies": list(strategies)})
    report.to_tsv(out / "sampling_report.tsv")
    summary = {"mean_recall": report.mean_recall,
               "ope": {k: {"success": v[0], "precision": v[1]}
                       for k, v in report.ope.items()}}
    (out / "sampling_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(report.to_tsv(), end="")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    from . import plots

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = plots.plot_report(args.input, args.kind, out)
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opstrack",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--device-threads", type=int, default=None,
                        help="thread count for jitted kernels (best effort)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic tracklet dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tracklets", type=int, default=8)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--clutter", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON SynthConfig overrides")
    p.set_defaults(func=cmd_generate)

    def common(p, checkpoint=True):
        p.add_argument("--config", default=None, help="JSON TrackerConfig file")
        p.add_argument("--dataset", default=None,
                       help="tracklet directory (or OPSTRACK_DATA_ROOT)")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        if checkpoint:
            p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("train", help="train a tracker")
    common(p, checkpoint=False)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--val-tracklets", type=int, default=2)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="one-pass evaluation over a dataset")
    common(p)
    p.add_argument("--strategy", choices=STRATEGIES, default="ops")
    p.add_argument("--gt-oracle", action="store_true",
                   help="replace decoded boxes with GT (plumbing check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", help="dump one tracklet's trajectory")
    common(p)
    p.add_argument("--track", type=int, default=0)
    p.add_argument("--strategy", choices=STRATEGIES, default="ops")
    p.add_argument("--dump-maps", action="store_true")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("compare", help="compare sampling strategies")
    common(p)
    p.add_argument("--strategy", choices=STRATEGIES, default=None,
                   help="restrict to one strategy (default: all)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="render report tables as images")
    p.add_argument("--input", required=True)
    p.add_argument("--kind", choices=("train", "eval", "compare"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.device_threads)
    try:
        return args.func(args)
    except OpsTrackError as exc:
        return _fail(exc)
    except OSError as exc:
        err = DataFormatError(str(exc))
        return _fail(err)


if __name__ == "__main__":
    sys.exit(main())
