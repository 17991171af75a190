"""Train-and-compare runs for the four component ablations."""

from __future__ import annotations

import json
import logging
from math import comb
from pathlib import Path

from .config import RunConfig
from .data import Dataset, build_dataset
from .model import StreamVoice
from .train import Trainer, evaluate

log = logging.getLogger(__name__)

ABLATIONS = {
    "no-tf-current": {"train": {"tf_current": False}},
    "no-tf-future": {"train": {"tf_future": False}},
    "no-mask": {"train": {"use_masking": False}},
    "no-bottleneck": {"lm": {"use_bottleneck": False}},
}


def ablated_config(cfg: RunConfig, which: str | None, seed: int | None = None) -> RunConfig:
    data = cfg.to_dict()
    if which is not None:
        if which not in ABLATIONS:
            raise KeyError(f"unknown ablation {which!r}; choose from {sorted(ABLATIONS)}")
        for sec, vals in ABLATIONS[which].items():
            data[sec].update(vals)
    if seed is not None:
        data["seed"] = seed
        data["train"]["seed"] = seed
    return RunConfig.from_dict(data)


def train_and_eval(cfg: RunConfig, data: Dataset, steps: int | None = None,
                   metrics_path: str | Path | None = None) -> tuple[StreamVoice, dict]:
    model = StreamVoice(cfg)
    result = Trainer(model, data, cfg.train).run(steps, metrics_path=metrics_path)
    report = evaluate(model, data)
    report["train"] = {"steps": result.steps, "seconds": result.seconds, "final": result.final}
    return model, report


def headline(report: dict) -> float:
    """The held-out number ablations are compared on: unseen-speaker accuracy."""
    split = report.get("unseen") or report["seen"]
    return float(split.get("acc_mean", float("nan")))


def sign_test_p(n_lower: int, n: int) -> float:
    """One-sided sign-test p-value for seeing >= n_lower 'ablation worse' outcomes."""
    return sum(comb(n, i) for i in range(n_lower, n + 1)) / 2.0**n


def run_ablation(cfg: RunConfig, which: list[str], seeds: list[int], out_dir: str | Path,
                 steps: int | None = None) -> dict:
    """Train the full model and each ablation for every seed; compare.

    The dataset is fixed by the config seed so every run sees the same data;
    the seed list varies model init, batching and masking.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = build_dataset(cfg.task, cfg.stream.prompt_frames)
    rows = []
    records = out / "ablate.jsonl"
    for seed in seeds:
        for variant in [None, *which]:
            name = variant or "full"
            run_cfg = ablated_config(cfg, variant, seed)
            log.info("ablation run %s seed %d", name, seed)
            _, rep = train_and_eval(run_cfg, data, steps, metrics_path=out / f"metrics_{name}_s{seed}.jsonl")
            row = {"variant": name, "seed": seed, "acc_unseen": headline(rep),
                   "acc_seen": rep["seen"].get("acc_mean"), "tf_mse": rep["seen"].get("tf_mse")}
            rows.append(row)
            with open(records, "a") as f:
                f.write(json.dumps(row) + "\n")
    return summarize(rows, which, seeds)


def summarize(rows: list[dict], which: list[str], seeds: list[int]) -> dict:
    full = {r["seed"]: r["acc_unseen"] for r in rows if r["variant"] == "full"}
    summary = {"seeds": seeds, "full": full, "ablations": {}}
    for w in which:
        abl = {r["seed"]: r["acc_unseen"] for r in rows if r["variant"] == w}
        lower = sum(abl[s] < full[s] for s in seeds)
        summary["ablations"][w] = {
            "acc_unseen": abl,
            "n_lower": lower,
            "all_lower": lower == len(seeds),
            "sign_test_p": sign_test_p(lower, len(seeds)),
        }
    return summary


def format_table(summary: dict) -> str:
    seeds = summary["seeds"]
    head = f"{'variant':<16}" + "".join(f"{'seed ' + str(s):>10}" for s in seeds) + f"{'lower':>8}{'p':>8}"
    lines = [head, f"{'full':<16}" + "".join(f"{summary['full'][s]:>10.4f}" for s in seeds)]
    for w, info in summary["ablations"].items():
        lines.append(
            f"{w:<16}" + "".join(f"{info['acc_unseen'][s]:>10.4f}" for s in seeds)
            + f"{info['n_lower']:>5}/{len(seeds)}{info['sign_test_p']:>8.3f}"
        )
    return "\n".join(lines)
