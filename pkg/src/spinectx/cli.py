"""Command-line entry point: ``spinectx <subcommand> [flags]``.

Every failure is reported on stderr as a single ``spinectx: error: ...`` line
with a non-zero exit status.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import resource
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, read_config, save_checkpoint
from .losses import write_metrics_csv
from .network import (DILATION_PRESETS, ModelConfig, extent_report, grad_cam, param_count,
                      preset_rates, summary_rows)
from .phantom import PhantomSpec, generate_phantom
from .pipeline import (NetworkModel, binarize, plan_windows, preprocess, reconstruct,
                       sliding_infer)
from .training import LOG_FIELDS, TrainConfig, evaluate, train
from .volume import Volume, read_volume, write_volume

ERROR_PREFIX = "spinectx: error:"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
BENCH_FIELDS = ["run", "seconds", "peak_bytes", "peak_source", "threads", "volume_dims",
                "patch", "params"]
DESK_MODEL = {"encoder_widths": [4, 8, 16], "bottleneck_width": 32,
              "context_branch_width": 8, "patch_shape": [32, 64, 64]}

log = logging.getLogger("spinectx")


class CLIError(Exception):
    """Expected failure; reported without a traceback."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def peak_rss_bytes() -> int:
    # ru_maxrss is kilobytes on Linux, bytes on macOS
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(rss if sys.platform == "darwin" else rss * 1024)


def load_run_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CLIError(f"config file {path} must hold a JSON object")
    return cfg


def model_config(run: dict, preset: Optional[str], fallback: Optional[dict] = None) -> ModelConfig:
    d = dict(fallback or {})
    d.update(run.get("model", {}))
    if preset is not None:
        d.pop("dilation_rates", None)
        d["preset"] = preset
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid model config: {exc}") from None


def _threads(args) -> int:
    if args.deterministic:
        return 1
    if args.threads < 1:
        raise CLIError(f"--threads must be >= 1, got {args.threads}")
    return args.threads


@contextlib.contextmanager
def _execution(args):
    """Deterministic mode pins BLAS and the patch pool to one thread."""
    if getattr(args, "deterministic", False):
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def _phantom_pairs(section: dict, key: str) -> list:
    base = PhantomSpec.from_dict(section.get("base", {}))
    return [generate_phantom(base.with_seed(int(s))) for s in section.get(key, [])]


def _file_pairs(entries) -> list:
    return [(read_volume(e["image"]), read_volume(e["mask"], kind="binary-mask"))
            for e in entries]


def _stem(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii", ".json", ".f32"):
        if name.lower().endswith(ext):
            return name[: -len(ext)]
    return path.stem


def _load_checkpoint(path) -> Checkpoint:
    if path is None:
        raise CLIError("--checkpoint is required")
    if not Path(path).exists():
        raise CLIError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _check_patch(args, run: dict) -> ModelConfig:
    """Compare the requested patch with the checkpoint header only."""
    if args.checkpoint is None:
        raise CLIError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise CLIError(f"checkpoint not found: {args.checkpoint}")
    ck_cfg = read_config(args.checkpoint)
    want = run.get("model", {}).get("patch_shape")
    if want is not None and tuple(want) != ck_cfg.patch_shape:
        raise CLIError(f"patch mismatch: config asks for {tuple(want)}, "
                       f"checkpoint was trained with {ck_cfg.patch_shape}")
    return ck_cfg


def _input_volume(args, run: dict) -> Volume:
    if args.input is not None:
        if not Path(args.input).exists():
            raise CLIError(f"input volume not found: {args.input}")
        return read_volume(args.input)
    if "phantom" in run:
        spec = PhantomSpec.from_dict(run["phantom"])
        if args.seed is not None:
            spec = spec.with_seed(args.seed)
        return generate_phantom(spec)[0]
    raise CLIError("--in is required (or a 'phantom' section in --config)")


def _out_dir(args) -> Path:
    if args.out is None:
        raise CLIError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_summary(args) -> int:
    run = load_run_config(args.config)
    cfg = model_config(run, args.preset)
    rows = summary_rows(cfg)
    print(f"{'layer':<22} {'kind':<5} {'in':>4} {'out':>4} {'k':>2} {'r':>3} "
          f"{'output shape':<22} {'params':>9}")
    for r in rows:
        print(f"{r['name']:<22} {r['kind']:<5} {r['in']:>4} {r['out']:>4} {r['kernel']!s:>2} "
              f"{r['dilation']!s:>3} {str(r['output']):<22} {r['params']:>9,}")
    print(f"total parameters: {param_count(cfg):,}")
    d, h, w = cfg.bottleneck_shape
    print(f"patch (d, h, w): {cfg.patch_shape}; bottleneck (d, h, w): ({d}, {h}, {w})")
    print("context branches:")
    for e in extent_report(cfg):
        flag = "  WARNING: sampling void" if e["void"] else ""
        print(f"  rate {e['rate']:>2}  extent {e['extent']:>3}  plane {e['plane']:>3}{flag}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    cfg = model_config(run, args.preset, fallback=DESK_MODEL)
    tr = run.get("train", {})
    seed = args.seed if args.seed is not None else int(tr.get("seed", 42))
    try:
        tcfg = TrainConfig(cfg, seed=seed, **{k: v for k, v in tr.items() if k != "seed"})
    except TypeError as exc:
        raise CLIError(f"invalid train section: {exc}") from None
    data = run.get("data")
    if data is None:
        data = {"phantom": {}, "train_seeds": list(range(100, 108)), "val_seeds": [200, 201]}
    if "phantom" in data:
        section = {"base": data["phantom"], "train": data.get("train_seeds", []),
                   "val": data.get("val_seeds", [])}
        train_pairs = _phantom_pairs(section, "train")
        val_pairs = _phantom_pairs(section, "val")
    else:
        train_pairs = _file_pairs(data.get("train", []))
        val_pairs = _file_pairs(data.get("val", []))
    if not train_pairs or not val_pairs:
        raise CLIError("training needs at least one training and one validation case")
    out = _out_dir(args)

    def report(row):
        print(f"epoch {row['epoch']:>3}  train {row['train_loss']:.5f}  val {row['val_loss']:.5f}"
              f"  lr {row['lr']:.1e}  {row['seconds']:.1f}s", flush=True)

    result = train(tcfg, train_pairs, val_pairs, on_epoch=report)
    save_checkpoint(out / "checkpoint.scru", result.checkpoint)
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in result.log:
            # wall time is excluded in deterministic mode so artifacts stay bit-identical
            writer.writerow(dict(row, seconds=0.0 if args.deterministic else row["seconds"]))
    print(f"best epoch {result.checkpoint.metadata['epoch']} "
          f"(val loss {result.checkpoint.metadata['best_val_loss']:.5f}); "
          f"checkpoint written to {out / 'checkpoint.scru'}")
    return 0


def cmd_infer(args) -> int:
    run = load_run_config(args.config)
    _check_patch(args, run)
    ckpt = _load_checkpoint(args.checkpoint)
    vol = _input_volume(args, run)
    out = _out_dir(args)
    t0 = time.perf_counter()
    image = preprocess(vol)
    probs = sliding_infer(image, NetworkModel(ckpt.config, ckpt.params), threads=_threads(args))
    mask = binarize(probs, args.threshold)
    seconds = time.perf_counter() - t0
    stem = _stem(Path(args.input)) if args.input else "phantom"
    write_volume(out / f"{stem}_prob.nii.gz", probs)
    write_volume(out / f"{stem}_mask.nii.gz", mask)
    print(f"wrote {out / (stem + '_mask.nii.gz')} ({int(mask.data.sum())} foreground voxels)")
    print(f"seconds {seconds:.3f}  peak_rss_bytes {peak_rss_bytes()}")
    return 0


def _eval_cases(run: dict, args):
    section = run.get("eval")
    if section is None:
        raise CLIError("--config must contain an 'eval' section with cases or phantom seeds")
    if "cases" in section:
        for i, e in enumerate(section["cases"]):
            cid = e.get("id", f"case-{i}")

            def loader(e=e):
                return read_volume(e["image"])

            def truth(e=e):
                return read_volume(e["mask"], kind="binary-mask")

            yield cid, loader, truth
    else:
        base = PhantomSpec.from_dict(section.get("phantom", {}))
        for s in section.get("seeds", []):
            vol, mask = generate_phantom(base.with_seed(int(s)))
            yield f"phantom-{s}", vol, mask


def cmd_eval(args) -> int:
    run = load_run_config(args.config)
    _check_patch(args, run)
    ckpt = _load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    rows, failures = evaluate(ckpt, _eval_cases(run, args), args.threshold, _threads(args))
    with open(out / "metrics.csv", "w", newline="") as fh:
        write_metrics_csv(rows, fh)
    for r in rows:
        print(f"{r['case_id']:<20} dice {r['dice']:.4f}  iou {r['iou']:.4f}")
    if failures:
        for cid, msg in failures:
            print(f"{ERROR_PREFIX} case {cid} skipped: {msg}", file=sys.stderr)
        return 3
    return 0


def cmd_bench(args) -> int:
    run = load_run_config(args.config)
    _check_patch(args, run)
    ckpt = _load_checkpoint(args.checkpoint)
    if args.repeat < 1:
        raise CLIError(f"--repeat must be >= 1, got {args.repeat}")
    if args.input is None and "phantom" not in run:
        run = dict(run, phantom={})
    vol = _input_volume(args, run)
    out = _out_dir(args)
    threads = _threads(args)
    model = NetworkModel(ckpt.config, ckpt.params)
    image = preprocess(vol)
    plan = plan_windows(image.dims, ckpt.config.patch_shape)
    print(f"windows {len(plan)} for volume {image.dims} with patch {ckpt.config.patch_shape}")
    n_params = ckpt.params.count()
    dims = "x".join(str(v) for v in image.dims)
    patch = "x".join(str(v) for v in ckpt.config.patch_shape)
    rows = []
    for i in range(args.repeat):
        t0 = time.perf_counter()
        sliding_infer(preprocess(vol), model, plan=plan, threads=threads)
        rows.append({"run": i + 1, "seconds": time.perf_counter() - t0,
                     "peak_bytes": peak_rss_bytes(), "peak_source": "ru_maxrss",
                     "threads": threads, "volume_dims": dims, "patch": patch,
                     "params": n_params})
    secs = [r["seconds"] for r in rows]
    rows.append(dict(rows[-1], run="mean", seconds=float(np.mean(secs)),
                     peak_bytes=max(r["peak_bytes"] for r in rows)))
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"mean {np.mean(secs):.3f}s over {args.repeat} runs; "
          f"max/min ratio {max(secs) / min(secs):.3f}")
    return 0


def cmd_gradcam(args) -> int:
    run = load_run_config(args.config)
    _check_patch(args, run)
    ckpt = _load_checkpoint(args.checkpoint)
    vol = _input_volume(args, run)
    out = _out_dir(args)
    image = preprocess(vol)
    cfg = ckpt.config.replace(capture_bottleneck=True)
    plan = plan_windows(image.dims, cfg.patch_shape)

    def patch_cam(p):
        return grad_cam(p[None, None], cfg, ckpt.params)[0]

    heat = reconstruct(image.data, plan, patch_cam, _threads(args))
    cam = Volume(np.clip(heat, 0, 1).astype(np.float32), image.spacing, image.origin,
                 "probability", image.header)
    stem = _stem(Path(args.input)) if args.input else "phantom"
    write_volume(out / f"{stem}_gradcam.nii.gz", cam)
    print(f"wrote {out / (stem + '_gradcam.nii.gz')}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add(p, *names, **kw):
    p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spinectx",
                     description="Vertebral-body segmentation with a dilated-context 3-D U-Net.")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True
    presets = sorted(DILATION_PRESETS)

    def common(p, need_ckpt=True, need_in=False, out=True):
        _add(p, "--config", metavar="PATH", help="JSON run configuration")
        if need_ckpt:
            _add(p, "--checkpoint", metavar="PATH", help="trained checkpoint file")
        if need_in:
            _add(p, "--in", dest="input", metavar="PATH",
                 help="input volume (.nii, .nii.gz, or raw .json/.f32)")
        if out:
            _add(p, "--out", metavar="DIR", help="output directory")

    def runtime(p, threads=True):
        if threads:
            _add(p, "--threads", type=int, default=1, metavar="N",
                 help="worker threads for patch inference (default 1)")
        _add(p, "--seed", type=int, default=None, metavar="N", help="random seed")
        _add(p, "--deterministic", action="store_true",
             help="single-threaded, bit-reproducible execution")

    p = sub.add_parser("train", help="train on phantoms or listed cases")
    common(p, need_ckpt=False)
    _add(p, "--preset", choices=presets, help="dilation preset")
    runtime(p, threads=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one volume")
    common(p, need_in=True)
    _add(p, "--threshold", type=float, default=0.5, metavar="F",
         help="probability cut for the mask (default 0.5)")
    runtime(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="per-case metrics CSV")
    common(p)
    _add(p, "--threshold", type=float, default=0.5, metavar="F",
         help="probability cut for the mask (default 0.5)")
    runtime(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time repeated sliding-window inference")
    common(p, need_in=True)
    _add(p, "--repeat", type=int, default=3, metavar="N", help="timed repetitions (default 3)")
    runtime(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcam", help="bottleneck heat map for one volume")
    common(p, need_in=True)
    runtime(p)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("summary", help="layer table, parameter count, kernel extents")
    _add(p, "--config", metavar="PATH", help="JSON run configuration")
    _add(p, "--preset", choices=presets, help="dilation preset")
    p.set_defaults(func=cmd_summary)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("SPINECTX_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise CLIError(f"SPINECTX_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="spinectx: %(levelname)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        with _execution(args):
            return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CLIError, ValueError, OSError, KeyError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"{ERROR_PREFIX} {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"{ERROR_PREFIX} internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
