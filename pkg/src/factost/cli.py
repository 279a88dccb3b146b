"""``factost`` command line: synth-data, pretrain, adapt, forecast, evaluate, grad-audit, scale-bench."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .adapter import STAdapter, sta_forward
from .backbone import Backbone, forecast_normalized, rolling
from .config import AUDIT_DEFAULTS, RunConfig, config_to_dict, dump_config, load_config
from .data import (STDataset, load_csv, make_st_fixture, split, split_starts, synth_corpus,
                   write_csv)
from .errors import ConfigError, DataError, FactostError
from .evaluation import metric_report, scaling_probe, write_report
from .trainer import audit_problem, evaluate_panel, grad_audit, train_sta, train_utp

log = logging.getLogger("factost")


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, base: dict[str, str] | None = None) -> RunConfig:
    return load_config(args.config, _overrides(args.set), base=base)


def _echo_config(path: Path, cfg: RunConfig) -> None:
    """CSV artifacts get the effective config in a ``<name>.config`` sidecar."""
    Path(f"{path}.config").write_text(dump_config(cfg), encoding="utf-8")


def _writable(path) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise DataError(f"output directory does not exist: {path.parent}")
    return path


def _panel(cfg: RunConfig) -> STDataset:
    d = cfg.data
    if d.panel:
        return load_csv(d.panel, forward_fill=d.forward_fill)
    return make_st_fixture(d.st_nodes, d.st_days, d.freq_seconds, d.seed)


def _corpus(cfg: RunConfig) -> np.ndarray:
    d = cfg.data
    if d.corpus:
        return load_csv(d.corpus, forward_fill=d.forward_fill).values
    return synth_corpus(d.n_series, d.series_length, d.seed)


def _ratios(cfg: RunConfig):
    return cfg.data.train_ratio, cfg.data.val_ratio, cfg.data.test_ratio


def _fit_adapter_nodes(cfg: RunConfig, n_nodes: int) -> None:
    if cfg.adapter.n_nodes != n_nodes:
        log.info("adapter.n_nodes set to %d to match the panel", n_nodes)
        cfg.adapter.n_nodes = n_nodes


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = _config(args)
    out = _writable(args.out)
    d = cfg.data
    if args.kind == "st":
        ds = make_st_fixture(d.st_nodes, d.st_days, d.freq_seconds, d.seed)
    else:
        values = synth_corpus(d.n_series, d.series_length, d.seed)
        if not len(values):
            values = np.zeros((0, 0))
        ts = d.freq_seconds * np.arange(values.shape[1])
        ds = STDataset(values, ts, [f"series_{i:05d}" for i in range(len(values))], d.freq_seconds)
    write_csv(ds, out)
    _echo_config(out, cfg)
    log.info("wrote %d series x %d steps to %s", ds.values.shape[0], ds.n_steps, out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _writable(args.out)
    series = _corpus(cfg)
    model = Backbone(cfg.backbone, seed=cfg.train.seed)
    trace = args.trace or f"{out}.trace.jsonl"
    result = train_utp(series, model, cfg.train, trace_path=trace,
                       config_echo=config_to_dict(cfg),
                       callback=_progress(cfg.train.total_steps))
    checkpoint.save(out, model, config_text=dump_config(cfg))
    final = result.losses[-1] if result.losses else float("nan")
    log.info("pretrained %d steps, final loss %.4f -> %s", result.steps, final, out)
    return 0


def _progress(total: int):
    every = max(1, total // 20)

    def report(step, loss):
        if step % every == 0 or step == total:
            log.info("step %d/%d loss %.4f", step, total, loss)
    return report


def cmd_adapt(args) -> int:
    cfg = _config(args)
    out = _writable(args.out)
    if args.few_shot is not None:
        cfg.train.few_shot_frac = args.few_shot
    cfg.train.validate()
    dataset = _panel(cfg)
    _fit_adapter_nodes(cfg, dataset.n_nodes)
    loaded = args.backbone is not None
    if loaded:
        ckpt = checkpoint.read(args.backbone)
        backbone, _ = checkpoint.restore(ckpt)
        cfg.backbone = backbone.cfg
    else:
        backbone = Backbone(cfg.backbone, seed=cfg.train.seed)
    adapter = STAdapter(cfg.adapter, cfg.backbone.d_model, seed=cfg.train.seed)
    trace = args.trace or f"{out}.trace.jsonl"
    result = train_sta(dataset, backbone, adapter, cfg.train, cfg.data.context_len, cfg.data.horizon,
                       stride=cfg.data.stride, ratios=_ratios(cfg), backbone_loaded=loaded,
                       from_scratch=args.from_scratch, trace_path=trace,
                       config_echo=config_to_dict(cfg))
    checkpoint.save(out, backbone, adapter, dump_config(cfg))
    log.info("adapted %d steps, best validation MAE %s at step %s -> %s",
             result.steps, result.best_val, result.best_step, out)
    return 0


def _forecast_values(backbone: Backbone, adapter: STAdapter | None, ctx: np.ndarray,
                     ts: np.ndarray, stride: int, horizon: int) -> np.ndarray:
    """``[N, horizon, |Q|]`` forecasts; rolls when the horizon exceeds capacity."""
    bcfg = backbone.cfg

    def step(context, offset, h):
        with torch.no_grad():
            if adapter is None:
                pred, mu, sigma = forecast_normalized(backbone, context, h)
                p = pred.numpy().astype(np.float64)
                return p * (sigma + bcfg.eps)[:, None, None] + mu[:, None, None]
            last = ts[-1] + offset * stride
            step_ts = last - stride * np.arange(context.shape[-1])[::-1]
            return sta_forward(context, step_ts, backbone, adapter, targets=h, stride=stride)[0]

    if horizon > bcfg.max_horizon:
        log.info("horizon %d exceeds capacity %d: rolling path", horizon, bcfg.max_horizon)
    else:
        log.info("horizon %d within capacity %d: single-pass path", horizon, bcfg.max_horizon)
    return rolling(step, ctx, horizon, bcfg.max_horizon, bcfg.max_context, bcfg.median_index)


def cmd_forecast(args) -> int:
    cfg = _config(args)
    out = _writable(args.out)
    backbone, adapter = checkpoint.load(args.checkpoint)
    backbone.eval()
    data = load_csv(args.input, forward_fill=cfg.data.forward_fill)
    if adapter is not None:
        adapter.eval()
        if adapter.cfg.n_nodes != data.n_nodes:
            raise DataError(f"{args.input}: {data.n_nodes} nodes, checkpoint adapter expects "
                            f"{adapter.cfg.n_nodes}")
    L = min(data.n_steps, args.context or backbone.cfg.max_context)
    ctx, ts = data.values[:, -L:], data.timestamps[-L:]
    horizon = args.horizon or cfg.data.horizon
    values = _forecast_values(backbone, adapter, ctx, ts, data.freq_seconds, horizon)
    future = ts[-1] + data.freq_seconds * np.arange(1, horizon + 1)
    quantiles = backbone.cfg.quantiles
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "node", "quantile", "value"])
        for n, node in enumerate(data.node_ids):
            for h in range(horizon):
                for j, q in enumerate(quantiles):
                    w.writerow([int(future[h]), node, q, repr(float(values[n, h, j]))])
    _echo_config(out, cfg)
    log.info("wrote %d nodes x %d steps to %s", data.n_nodes, horizon, out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    backbone, adapter = checkpoint.load(args.checkpoint)
    dataset = _panel(cfg)
    if adapter is not None and adapter.cfg.n_nodes != dataset.n_nodes:
        raise DataError(f"panel has {dataset.n_nodes} nodes, checkpoint adapter expects "
                        f"{adapter.cfg.n_nodes}")
    parts = dict(zip(("train", "val", "test"), split(dataset.n_steps, _ratios(cfg))))
    L, H = cfg.data.context_len, cfg.data.horizon
    starts = split_starts(parts[args.split], L, H, args.stride or cfg.data.stride)
    pred, truth = evaluate_panel(dataset, starts, L, H, backbone, adapter)
    report = metric_report(pred, truth, backbone.cfg.quantiles)
    name = cfg.data.panel or "st-fixture"
    if args.out_jsonl:
        _writable(args.out_jsonl)
    if args.out_csv:
        _writable(args.out_csv)
    write_report(report, args.out_jsonl, args.out_csv, dataset=f"{name}:{args.split}", horizon=H,
                 config=config_to_dict(cfg))
    if args.out_csv:
        _echo_config(args.out_csv, cfg)
    print(json.dumps({"split": args.split, "windows": len(starts), **report}, sort_keys=True))
    return 0


def cmd_grad_audit(args) -> int:
    cfg = _config(args, base=AUDIT_DEFAULTS)
    entries, worst = [], 0.0
    failed = 0
    for i in range(args.instances):
        loss_fn, params = audit_problem(cfg.backbone, cfg.adapter, seed=cfg.train.seed + i)
        report = grad_audit(loss_fn, params, tolerance=args.tolerance, step=args.step)
        worst = max(worst, report.max_rel_err)
        failed += not report.passed
        for e in report.violators:
            log.warning("instance %d: %s rel_err %.3g", i, e.name, e.rel_err)
        entries.append({"instance": i, "max_rel_err": report.max_rel_err, "passed": report.passed,
                        "violators": [e.name for e in report.violators]})
    summary = {"instances": args.instances, "failed": failed, "max_rel_err": worst,
               "tolerance": args.tolerance}
    if args.out:
        with open(_writable(args.out), "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"split": "config", "config": config_to_dict(cfg)}, sort_keys=True) + "\n")
            for e in entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")
            fh.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0 if failed == 0 else 1


def cmd_scale_bench(args) -> int:
    cfg = _config(args)
    backbone = Backbone(cfg.backbone, seed=cfg.train.seed).eval()

    def make_adapter(n):
        acfg = dataclasses.replace(cfg.adapter, n_nodes=n)
        return STAdapter(acfg, cfg.backbone.d_model, seed=cfg.train.seed).eval()

    result = scaling_probe(backbone, make_adapter, cfg.bench.nodes, cfg.data.context_len,
                           cfg.data.horizon, cfg.bench.repeats, cfg.bench.warmup,
                           cfg.data.freq_seconds, cfg.data.seed)
    if args.out:
        out = _writable(args.out)
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n_nodes", "wall_time_s", "peak_intermediate", "peak_op"])
            for r in result.rows:
                w.writerow([r.n_nodes, repr(r.wall_time), r.peak_intermediate, r.peak_op])
        _echo_config(out, cfg)
    for r in result.rows:
        log.info("N=%d time %.4fs largest intermediate %d (%s)", r.n_nodes, r.wall_time,
                 r.peak_intermediate, r.peak_op)
    print(json.dumps({"time_slope": result.time_slope, "alloc_ratios": result.alloc_ratios}))
    return 0


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = argparse.ArgumentParser(prog="factost", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="write a seeded synthetic CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("kernel", "st"), default="kernel")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("pretrain", parents=[common], help="stage-I pretraining")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--trace", help="JSON-lines loss trace (default <out>.trace.jsonl)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", parents=[common], help="stage-II adaptation on a panel")
    s.add_argument("--backbone", help="pretrained backbone checkpoint")
    s.add_argument("--from-scratch", action="store_true",
                   help="allow adapting a randomly initialized backbone")
    s.add_argument("--few-shot", type=float, help="trailing fraction of training windows")
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("forecast", parents=[common], help="forecast the tail of a CSV panel")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--horizon", type=int)
    s.add_argument("--context", type=int, help="context steps (default: model capacity)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("evaluate", parents=[common], help="metrics on a panel split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--stride", type=int)
    s.add_argument("--out-jsonl")
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("grad-audit", parents=[common], help="finite-difference gradient check")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.add_argument("--step", type=float, default=1e-4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_grad_audit)

    s = sub.add_parser("scale-bench", parents=[common], help="time the adapter across node counts")
    s.add_argument("--out")
    s.set_defaults(func=cmd_scale_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except FactostError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error (DataError): {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
