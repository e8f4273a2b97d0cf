"""Command-line entry point.

Commands write CSV files (and figures) into an output directory, print a
short summary on stdout and log progress on stderr.  Exit status is 0 on
success, 1 for user errors (bad arguments, missing or malformed files) and 2
when an internal invariant is violated.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import experiments, plotting
from .config import ConfigError, RunConfig, load_config
from .denoiser.network import DenoiserModel, NetworkDenoiser, load_model, save_model
from .denoiser.training import SequenceSet, train_spatial, train_temporal
from .evalsuite import DegenerateInputError, evaluate
from .io import (
    TensorFormatError,
    flows_from_array,
    read_cameras,
    read_dataset,
    read_tensor,
    write_dataset,
    write_tensor,
)
from .streaming import STRATEGIES, StreamRunner, StreamSourceError, run_video
from .worldgen import generate_dataset

log = logging.getLogger("streamdepth")

EXIT_OK, EXIT_USER, EXIT_INVARIANT = 0, 1, 2
STRATEGY_ALIASES = {"naive": "naive", "replacement": "replacement", "context": "context_aware",
                    "context_aware": "context_aware"}


class InvariantViolation(RuntimeError):
    pass


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    test = args.split == "test"
    n = args.n_sequences or cfg["world.test_sequences" if test else "world.n_sequences"]
    frames = args.frames or cfg["world.frames"]
    seed = cfg["seed"] + (cfg["world.test_seed_offset"] if test else 0)
    out = Path(args.out or cfg["paths.test_data" if test else "paths.data"])
    samples = generate_dataset(cfg["world.family"], n, frames, seed, cfg["world.height"], cfg["world.width"],
                               moving=cfg["world.moving"])
    try:
        write_dataset(out, samples, {"family": cfg["world.family"], "seed": seed, "split": args.split})
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    print(f"wrote {n} sequences x {frames} frames ({cfg['world.height']}x{cfg['world.width']}) to {out}")
    return EXIT_OK


def _load_data(path) -> list:
    path = Path(path)
    if not (path / "manifest.txt").is_file():
        raise FileNotFoundError(f"dataset not found (no manifest.txt in {path})")
    return read_dataset(path)


def cmd_train(cfg: RunConfig, args) -> int:
    data = SequenceSet.from_samples(_load_data(args.data or cfg["paths.data"]))
    run = _outdir(args.out or cfg["paths.run"])
    tcfg = cfg.train_config().replace(joint=args.joint)
    header = {"seed": cfg["seed"], "config": cfg.serialize()}
    curves = {}
    if args.stage in ("1", "both"):
        torch.manual_seed(cfg["seed"])
        model = DenoiserModel()
        curves["stage 1"] = []
        train_spatial(model, data, tcfg, curves["stage 1"])
        save_model(run / "stage1.ckpt", model, stage=1, joint=False, **header)
        log.info("wrote %s", run / "stage1.ckpt")
    else:
        init = Path(args.init) if args.init else run / "stage1.ckpt"
        if not init.is_file():
            raise FileNotFoundError(f"stage 2 needs a stage-1 checkpoint; {init} does not exist (run --stage 1 first)")
        model, hdr = load_model(init)
        if hdr.get("stage") != 1:
            raise ValueError(f"{init} is a stage-{hdr.get('stage')} checkpoint, expected stage 1")
    if args.stage in ("2", "both"):
        before = {k: v.clone() for k, v in model.state_dict().items() if not k.startswith("temporal.")}
        curves["stage 2"] = []
        train_temporal(model, data, tcfg, curves["stage 2"])
        if not args.joint:
            after = model.state_dict()
            if any(not torch.equal(before[k], after[k]) for k in before):
                raise InvariantViolation("spatial parameters changed during temporal training")
        save_model(run / "stage2.ckpt", model, stage=2, joint=args.joint, **header)
        log.info("wrote %s", run / "stage2.ckpt")
    rows = [{"stage": s.split()[-1], "step": i + 1, "loss": v} for s, c in curves.items() for i, v in enumerate(c)]
    write_csv(run / "losses.csv", rows, ("stage", "step", "loss"))
    plotting.plot_loss_curves(curves, run / "losses.png")
    for stage, c in curves.items():
        if c:
            k = max(1, min(50, len(c) // 10))
            print(f"{stage}: {len(c)} steps, loss {np.mean(c[:k]):.5f} -> {np.mean(c[-k:]):.5f}")
    return EXIT_OK


def _strategy(name: str) -> str:
    key = name.strip()
    if key not in STRATEGY_ALIASES:
        raise ValueError(f"unknown strategy {key!r}; choose from {', '.join(sorted(STRATEGY_ALIASES))}")
    return STRATEGY_ALIASES[key]


def _stream_cfg(cfg: RunConfig, args):
    sc = cfg.stream_config()
    changes = {}
    if getattr(args, "strategy", None):
        changes["strategy"] = STRATEGY_ALIASES[args.strategy]
    if getattr(args, "sigma_eps", None) is not None:
        changes["sigma_eps"] = float(args.sigma_eps)
    return sc.replace(**changes) if changes else sc


def _load_denoiser(path) -> NetworkDenoiser:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return NetworkDenoiser(load_model(path)[0])


def cmd_infer(cfg: RunConfig, args) -> int:
    model = _load_denoiser(args.checkpoint)
    video = read_tensor(args.input).astype(np.float64)
    if video.ndim == 3:
        video = video[:, None]
    if video.ndim != 4 or video.shape[0] < 1:
        raise ValueError(f"{args.input}: expected (N, H, W) or (N, C, H, W), got {video.shape}")
    sc = _stream_cfg(cfg, args)
    runner = StreamRunner(model, sc)
    cond = torch.from_numpy(2.0 * video - 1.0).float()
    with torch.no_grad():
        depth = run_video(model, cond, sc, runner=runner)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out, depth[:, 0].numpy() if depth.shape[1] == 1 else depth.numpy())
    timing = Path(args.timing) if args.timing else out.with_suffix(".timing.csv")
    step = sc.clip_len - sc.overlap
    rows = [{"clip": i, "first_frame": 0 if i == 0 else sc.clip_len + (i - 1) * step, "seconds": t}
            for i, t in enumerate(runner.clip_times)]
    write_csv(timing, rows, ("clip", "first_frame", "seconds"))
    print(f"{len(depth)} frames, {len(rows)} clips, strategy {sc.strategy}, wrote {out}")
    return EXIT_OK


def _read_checked(path, what: str, shape=None) -> np.ndarray:
    arr = read_tensor(path).astype(np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{what} file {path} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def cmd_eval(cfg: RunConfig, args) -> int:
    gt = _read_checked(args.gt, "ground-truth")
    if gt.ndim != 3:
        raise ValueError(f"ground-truth file {args.gt} must be (N, H, W), got {gt.shape}")
    pred = _read_checked(args.pred, "prediction", gt.shape)
    cams = read_cameras(args.cams, args.sequence)
    if len(cams) != gt.shape[0]:
        raise ValueError(f"camera file {args.cams} has {len(cams)} frames, ground truth has {gt.shape[0]}")
    mask = _read_checked(args.mask, "mask", gt.shape) > 0.5 if args.mask else None
    flows = None
    if args.flows:
        fl = read_tensor(args.flows)
        want = (gt.shape[0] - 1, *gt.shape[1:])
        if fl.shape[:-1] != want or fl.shape[-1] not in (3, 4):
            raise ValueError(f"flow file {args.flows} has shape {fl.shape}, expected {(*want, 4)}")
        flows = flows_from_array(fl, str(args.flows))
    report = evaluate(pred, gt, cams, flows=flows, gt_mask=mask, method=cfg["eval.method"])
    out = _outdir(args.out)
    (out / "report.csv").write_text(report.to_csv())
    pair_rows = [r for r in report.rows() if r["row"] == "pair"]
    if pair_rows:
        plotting.plot_pair_mfc(pair_rows, out / "pairs.png")
    sys.stdout.write(report.summary())
    return EXIT_OK


def _parse_sweep(spec: str, cfg: RunConfig) -> list[float]:
    name, _, grid = spec.partition("=")
    if name.strip() != "sigma_eps":
        raise ValueError(f"unknown sweep {name!r}; only sigma_eps is supported")
    if not grid:
        return cfg.sweep_grid()
    try:
        return [float(x) for x in grid.split(",") if x.strip()]
    except ValueError as exc:
        raise ValueError(f"bad sweep grid {grid!r}") from exc


def cmd_ablate(cfg: RunConfig, args) -> int:
    if not args.strategies and not args.sweep:
        raise ValueError("nothing to do: pass --strategies all and/or --sweep sigma_eps[=grid]")
    model = _load_denoiser(args.checkpoint)
    samples = _load_data(args.data or cfg["paths.test_data"])
    out = _outdir(args.out)
    sc = _stream_cfg(cfg, args)
    method = cfg["eval.method"]
    if args.strategies:
        names = STRATEGIES if args.strategies == "all" else [_strategy(s) for s in args.strategies.split(",")]
        rows = experiments.compare_strategies(model, samples, sc, names, method)
        write_csv(out / "strategies.csv", rows, ("strategy", "mfc", "abs_rel", "delta1", "reference_mfc"))
        plotting.plot_strategy_bars(rows, out / "strategies.png")
        for r in rows:
            print(f"{r['strategy']:<14} MFC {r['mfc']:.5f}  AbsRel {r['abs_rel']:.5f}  delta1 {r['delta1']:.5f}  "
                  f"(reference MFC {r['reference_mfc']})")
    if args.sweep:
        rows = experiments.sweep_sigma_eps(model, samples, sc, _parse_sweep(args.sweep, cfg), method)
        write_csv(out / "sigma_sweep.csv", rows, ("log_sigma_eps", "sigma_eps", "mfc", "abs_rel", "delta1"))
        plotting.plot_sigma_sweep(rows, out / "sigma_sweep.png")
        for r in rows:
            print(f"log sigma_eps {r['log_sigma_eps']:+.1f}  MFC {r['mfc']:.5f}  AbsRel {r['abs_rel']:.5f}")
        where = "interior" if experiments.interior_minimum([r["mfc"] for r in rows]) else "boundary"
        print(f"MFC minimum at a {where} grid point")
    return EXIT_OK


def cmd_oracle_check(cfg: RunConfig, args) -> int:
    rho = cfg["oracle.rho_time"] if args.rho_time is None else args.rho_time
    samples = args.samples or cfg["oracle.samples"]
    prior = experiments.ar1_world(cfg["oracle.frames"], cfg["oracle.frame_dim"], rho)
    sc = cfg.stream_config()
    res = experiments.oracle_check(prior, cfg["oracle.overlap"], sc.schedule, samples, cfg["oracle.context_value"],
                                   sc.sigma_eps, cfg["seed"], cfg["oracle.bootstrap"])
    out = _outdir(args.out)
    rows = res.rows()
    write_csv(out / "oracle_check.csv", rows, ("strategy", "epsilon", "ci_low", "ci_high", "seam_ratio"))
    plotting.plot_oracle_check(rows, out / "oracle_check.png")
    for r in rows:
        print(f"eps_{r['strategy']:<14} {r['epsilon']:.5f}  95% CI [{r['ci_low']:.5f}, {r['ci_high']:.5f}]")
    print(f"naive seam jump / within-clip jump = {res.seam_ratio:.3f}")
    if not res.ordering_ok:
        raise InvariantViolation("context-aware bias is not below replacement bias with separated intervals")
    print("ordering eps_context_aware < eps_replacement: ok")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="streamdepth", description="Streamed video depth by conditional diffusion.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    g.add_argument("--out")
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--n-sequences", type=int)
    g.add_argument("--frames", type=int)

    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--joint", action="store_true", help="clip stage trains every parameter")
    t.add_argument("--init", help="stage-1 checkpoint for --stage 2 (default <out>/stage1.ckpt)")

    i = sub.add_parser("infer", parents=[common], help="streamed depth for one condition video")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="condition tensor file (N, H, W) in [0, 1]")
    i.add_argument("--out", required=True)
    i.add_argument("--strategy", choices=sorted(STRATEGY_ALIASES))
    i.add_argument("--sigma-eps", type=float)
    i.add_argument("--timing", help="per-clip timing CSV (default <out>.timing.csv)")

    e = sub.add_parser("eval", parents=[common], help="AbsRel / delta1 / MFC report")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--cams", required=True, help="camera rows (cameras.txt or manifest.txt)")
    e.add_argument("--sequence", type=int, help="sequence index when --cams holds several")
    e.add_argument("--flows")
    e.add_argument("--mask")
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", parents=[common], help="strategy comparison and sigma_eps sweep")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    a.add_argument("--strategies", help="'all' or a comma list")
    a.add_argument("--sweep", help="sigma_eps or sigma_eps=-8,-6,-4,-2,0")

    o = sub.add_parser("oracle-check", parents=[common], help="Gaussian-world sampler verification")
    o.add_argument("--out", required=True)
    o.add_argument("--samples", type=int)
    o.add_argument("--rho-time", type=float)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, TensorFormatError, DegenerateInputError, StreamSourceError,
            FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # anything else is a bug on our side
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
