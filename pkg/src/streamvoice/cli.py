"""Command-line entry point: ``streamvoice <command> [options]``.

Commands: gen | train | eval | stream | bench | gradcheck | ablate.
Every command reads one JSON run config (``--config``) or a named preset
(``--preset``), accepts ``--set section.field=value`` overrides, and writes
only under the output directory (``--out``, else $STREAMVOICE_OUTPUT_DIR,
else the config's ``output_dir``).

Exit codes: 0 ok, 1 invalid config/checkpoint, 2 runtime error,
3 a check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, RunConfig, apply_overrides
from .errors import CheckpointVersionError, ConfigError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("streamvoice")


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = PRESETS[args.preset]()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = apply_overrides(cfg, [f"seed={args.seed}", f"task.seed={args.seed}", f"train.seed={args.seed}"])
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: RunConfig, out: Path):
    from .data import build_dataset, read_dataset, write_dataset

    d = out / "data"
    if (d / "meta.json").exists():
        ds = read_dataset(d)
        if ds.task != cfg.task:
            raise ConfigError(f"{d}: dataset was generated with a different task config")
        return ds
    ds = build_dataset(cfg.task, cfg.stream.prompt_frames)
    write_dataset(ds, d)
    return ds


def _checkpoint(args, cfg: RunConfig, out: Path):
    from .model import StreamVoice

    path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    return StreamVoice.load(path, expect=cfg)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args, cfg, out):
    from .data import build_dataset, write_dataset

    ds = build_dataset(cfg.task, cfg.stream.prompt_frames)
    path = write_dataset(ds, out / "data")
    (out / "config.json").write_text(cfg.to_json())
    print(f"wrote {len(ds.train)} training utterances, {len(ds.eval_seen)} seen / "
          f"{len(ds.eval_unseen)} unseen eval pairs to {path}")
    return EXIT_OK


def cmd_train(args, cfg, out):
    from .model import StreamVoice
    from .train import Trainer

    ds = _dataset(cfg, out)
    model = StreamVoice(cfg)
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    res = Trainer(model, ds).run(args.steps, metrics_path=metrics)
    model.save(out / "checkpoint.npz")
    (out / "config.json").write_text(cfg.to_json())
    _write_json(out / "train.json", {"steps": res.steps, "seconds": res.seconds, "final": res.final})
    print(f"trained {res.steps} steps in {res.seconds:.1f}s; final {json.dumps(res.final)}")
    print(f"checkpoint: {out / 'checkpoint.npz'}")
    return EXIT_OK


def _eval_table(report: dict) -> str:
    rows = [f"{'split':<8}{'frames':>8}{'acc mean':>10}  per-layer"]
    for split in ("seen", "unseen"):
        r = report.get(split)
        if not r:
            continue
        if "acc_per_layer" in r:
            per = " ".join(f"{a:.3f}" for a in r["acc_per_layer"])
            rows.append(f"{split:<8}{r['frames']:>8}{r['acc_mean']:>10.4f}  {per}")
        else:
            rows.append(f"{split:<8}{r['frames']:>8}{'-':>10}  acoustic mse {r['acoustic_mse']:.4f}")
    rows.append(f"chance {report['chance']:.4f}")
    return "\n".join(rows)


def cmd_eval(args, cfg, out):
    from .train import evaluate

    model = _checkpoint(args, cfg, out)
    ds = _dataset(cfg, out)
    report = evaluate(model, ds)
    _write_json(out / "eval.json", report)
    print(_eval_table(report))
    return EXIT_OK


def cmd_stream(args, cfg, out):
    import numpy as np

    from .streaming import init_session, stream_records

    model = _checkpoint(args, cfg, out)
    ds = _dataset(cfg, out)
    sil = ds.table[cfg.task.silence_token]
    if args.prompt:
        p = json.loads(Path(args.prompt).read_text())
        p_s = np.asarray(p["features"], dtype=np.float64)
        p_a = np.asarray(p["codes"] if "codes" in p else p["latent"])
    elif ds.eval_unseen:
        prep = model.prepare(ds.eval_unseen[args.prompt_index % len(ds.eval_unseen)].prompt)
        p_s, p_a = prep.s, model.acoustic_input(prep.target)
    else:
        p_s = p_a = None
    sess = init_session(model, p_s, p_a, cfg.stream.silence_frames, sil)
    src = open(args.input) if args.input and args.input != "-" else sys.stdin
    dst = open(args.output, "w") if args.output and args.output != "-" else sys.stdout
    try:
        n = stream_records(sess, src, dst, table=ds.table)
    finally:
        if src is not sys.stdin:
            src.close()
        if dst is not sys.stdout:
            dst.close()
    log.info("streamed %d frames", n)
    return EXIT_OK


def cmd_bench(args, cfg, out):
    from .streaming import bench

    model = _checkpoint(args, cfg, out) if not args.random_init else None
    if model is None:
        from .model import StreamVoice

        model = StreamVoice(cfg)
    ds = _dataset(cfg, out)
    sc = cfg.stream
    prompt = None
    if ds.eval_unseen and sc.prompt_frames:
        prep = model.prepare(ds.eval_unseen[0].prompt)
        prompt = (prep.s, model.acoustic_input(prep.target))
    report = bench(model, args.frames or sc.bench_frames, sc.chunk_ms, sc.bench_repetitions, sc.bench_warmup,
                   sc.frame_ms, prompt=prompt, silence_frames=sc.silence_frames,
                   silence_feature=ds.table[cfg.task.silence_token])
    with open(out / "bench.jsonl", "a") as f:
        f.write(json.dumps(report.as_record()) + "\n")
    print(report.summary())
    if not report.consistent():
        return EXIT_CHECK
    return EXIT_OK


def cmd_gradcheck(args, cfg, out):
    from .data import build_dataset
    from .model import StreamVoice
    from .train import grad_check

    ds = build_dataset(cfg.task, cfg.stream.prompt_frames)
    model = StreamVoice(cfg, dtype="float64")
    sample = model.prepare(ds.train[0])
    rep = grad_check(model, sample, eps=args.eps, tol=args.tol, n_coords=args.coords, seed=cfg.seed)
    _write_json(out / "gradcheck.json", rep.as_record())
    name, worst = rep.worst()
    print(f"gradcheck {'PASS' if rep.passed else 'FAIL'}: {len(rep.max_rel)} tensors, "
          f"worst rel err {worst:.2e} ({name}), tol {rep.tol:g}")
    for f in rep.failures:
        print(f"  failed: {f} rel err {rep.max_rel[f]:.2e}")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_ablate(args, cfg, out):
    from .ablation import format_table, run_ablation

    which = args.which or ["no-tf-future", "no-mask"]
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    summary = run_ablation(cfg, which, seeds, out, steps=args.steps)
    _write_json(out / "ablate_summary.json", summary)
    print(format_table(summary))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    from .ablation import ABLATIONS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="used when --config is absent")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scalar config field")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="streamvoice", description="Streaming LM voice-conversion toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic dataset")
    sp = sub.add_parser("train", parents=[common], help="train a model")
    sp.add_argument("--steps", type=int, help="override train.max_steps")
    sp = sub.add_parser("eval", parents=[common], help="score a checkpoint on held-out pairs")
    sp.add_argument("--checkpoint")
    sp = sub.add_parser("stream", parents=[common], help="convert a JSONL frame stream")
    sp.add_argument("--checkpoint")
    sp.add_argument("--input", help="input JSONL (default stdin)")
    sp.add_argument("--output", help="output JSONL (default stdout)")
    sp.add_argument("--prompt", help='JSON {"features": [[...]], "codes": [[...]]} speaker prompt')
    sp.add_argument("--prompt-index", type=int, default=0, help="unseen eval prompt to use if --prompt absent")
    sp = sub.add_parser("bench", parents=[common], help="measure streaming RTF and latency")
    sp.add_argument("--checkpoint")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--random-init", action="store_true", help="benchmark an untrained model")
    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--coords", type=int, default=20)
    sp = sub.add_parser("ablate", parents=[common], help="train ablations and compare")
    sp.add_argument("--which", action="append", choices=sorted(ABLATIONS))
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--steps", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.command == "gradcheck" and not args.config and "--preset" not in (argv or sys.argv):
        args.preset = "tiny"
    try:
        cfg = _load_config(args)
        out = _out_dir(args, cfg)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigError, CheckpointVersionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
