"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 internal
invariant violation.  Failures print one line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace
from typing import IO, Iterator

from . import __version__
from .buffer import buffer_series, drift_report, group_sessions, levels_at_completions
from .classifier import OUTPUT_COLUMNS, classify_feature
from .codebook import QualityModel, load_model, save_model
from .config import feature_config, load_config, pipeline_config
from .errors import ConfigMismatch, DataError, InvariantViolation, IoFailure, VidqualError
from .evaluation import (
    FEATURE_KINDS, SELECTORS, LabeledTrace, PerturbationSpec, evaluate, extract_trace,
    k_sweep, robustness_grid, rows_to_csv, train, training_size_sweep,
)
from .flow import PacketRecord
from .pipeline import extract_flows, stream_features
from .records import is_pcap, iter_jsonl, iter_pcap, read_records
from .synth import SPLITS, GroundTruth, TraceSpec, generate_dataset, load_manifest

log = logging.getLogger("vidqual")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _open_out(path: str | None) -> IO[str]:
    if path in (None, "-"):
        return sys.stdout
    try:
        return open(path, "w", newline="")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _write_text(path: str | None, text: str) -> None:
    fp = _open_out(path)
    fp.write(text)
    if fp is not sys.stdout:
        fp.close()


def _echo_config(out: str | None, cfg: dict, extra: dict | None = None) -> None:
    """Write the effective config next to an output file for provenance."""
    if out in (None, "-"):
        return
    doc = {"config": cfg, **(extra or {})}
    Path(str(out) + ".config.json").write_text(json.dumps(doc, indent=2) + "\n")


def _iter_input(path: str) -> Iterator[PacketRecord]:
    if path == "-":
        return iter_jsonl(sys.stdin)
    p = Path(path)
    if not p.exists():
        raise IoFailure(f"{path}: no such file")
    if is_pcap(p):
        return iter_pcap(open(p, "rb"))
    return iter_jsonl(open(p))


def _config(args, **overrides) -> dict:
    return load_config(getattr(args, "config", None), overrides)


def _runtime_features(args, cfg: dict, model: QualityModel):
    """Feature config for extraction: the model's unless the user set one."""
    user_set = getattr(args, "config", None) is not None
    fc = feature_config(cfg) if user_set else model.feature_config
    if fc != model.feature_config and not getattr(args, "force", False):
        raise ConfigMismatch(f"model was trained with {model.feature_config}, "
                             f"runtime config is {fc} (use --force to override)")
    return fc


def _dataset_traces(data_dir: str, split: str) -> list[LabeledTrace]:
    manifest = load_manifest(data_dir)
    out = []
    for e in manifest["traces"]:
        if e.get("split") != split:
            continue
        truth = GroundTruth.from_dict(e)
        label = truth.labels[0] if truth.mode == "fixed" else None
        recs = read_records(Path(data_dir) / e["path"])
        out.append(LabeledTrace(recs, truth.title_id, label, truth, split))
    if not out:
        raise DataError(f"{data_dir}: no traces in split {split!r}")
    return out


def _parse_range(text: str) -> list[int]:
    try:
        if ".." in text:
            a, b = text.split("..")
            return list(range(int(a), int(b) + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad integer range {text!r}") from exc


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec = TraceSpec()
    if args.spec:
        try:
            spec = TraceSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.spec}: not valid JSON ({exc})") from exc
    if args.seed is not None:
        spec = TraceSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    manifest = generate_dataset(spec, args.out, pcap=args.pcap)
    print(f"wrote {len(manifest['traces'])} traces to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, **{"train.k": args.k, "train.seed": args.seed,
                           "train.restarts": args.restarts})
    pcfg = pipeline_config(cfg)
    tfs = [extract_trace(t, pcfg) for t in _dataset_traces(args.data, args.split)]
    tcfg = cfg["train"]
    model = train(tfs, int(tcfg["k"]), int(tcfg["seed"]), args.feature, args.baseline,
                  int(tcfg["restarts"]))
    model.config = cfg
    save_model(model, args.out)
    print(f"trained k={model.codebook.k} on {len(tfs)} traces -> {args.out}")
    return 0


def _classify_batch(args, model, pcfg, bypass) -> list[dict]:
    records = list(_iter_input(args.input))
    rows = []
    for ff in extract_flows(records, pcfg):
        for f in ff.features:
            rows.append(classify_feature(f, model, bypass).to_row(model))
    return rows


def cmd_classify(args) -> int:
    cfg = _config(args, **{"classifier.bypass_quantization": args.bypass_quantization or None})
    model = load_model(args.model)
    pcfg = pipeline_config(cfg, _runtime_features(args, cfg, model))
    bypass = bool(cfg["classifier"]["bypass_quantization"])
    fmt = args.format or ("jsonl" if args.stream else "csv")
    out = _open_out(args.out)
    try:
        if args.stream:
            res = float(cfg["stream"]["resolution_s"])
            for em in stream_features(_iter_input(args.input), pcfg, res):
                if em.retract:
                    row = {"retract": True, "at": round(em.at, 6), "flow_id": em.feature.flow_id,
                           "peak_index": em.feature.peak_index}
                else:
                    row = classify_feature(em.feature, model, bypass).to_row(model)
                    row["at"] = round(em.at, 6)
                out.write(json.dumps(row) + "\n")
                out.flush()
        else:
            rows = _classify_batch(args, model, pcfg, bypass)
            if fmt == "jsonl":
                for row in rows:
                    out.write(json.dumps(row) + "\n")
            else:
                w = csv.DictWriter(out, fieldnames=OUTPUT_COLUMNS, lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    _echo_config(args.out, cfg, {"model": str(args.model)})
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_model(args.model)
    pcfg = pipeline_config(cfg, _runtime_features(args, cfg, model))
    perturb = PerturbationSpec.parse(args.perturb, args.seed) if args.perturb else None
    traces = _dataset_traces(args.testset, args.split)
    tfs = [extract_trace(t, pcfg, None if perturb is None
                         else replace(perturb, seed=perturb.seed * 1_000_003 + i))
           for i, t in enumerate(traces)]
    cm = evaluate(tfs, model, args.classifier)
    names = {p.label: p.name for p in model.profiles}
    _write_text(args.out, cm.to_csv(names))
    _echo_config(args.out, cfg, {"model": str(args.model), "perturb": args.perturb,
                                 "classifier": args.classifier})
    print(f"accuracy {cm.accuracy:.4f} ({cm.total} segments)",
          file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args, **{"train.seed": args.seed})
    seed = int(cfg["train"]["seed"])
    restarts = int(cfg["train"]["restarts"])
    # parse flags before any data is loaded
    if args.what == "robustness":
        if not args.model:
            raise UsageError("sweep robustness needs --model")
        delays, losses = _parse_floats(args.delays), _parse_floats(args.losses)
        model = load_model(args.model)
        traces = _dataset_traces(args.testset or args.data, args.split)
        rows = robustness_grid(model, traces, delays, losses,
                               pipeline_config(cfg, model.feature_config), seed)
    else:
        values = _parse_range(args.range if args.what == "k" else args.counts)
        pcfg = pipeline_config(cfg)
        train_tfs = [extract_trace(t, pcfg) for t in _dataset_traces(args.data, "train")]
        test_tfs = [extract_trace(t, pcfg)
                    for t in _dataset_traces(args.testset or args.data, args.split)]
        if args.what == "k":
            rows = k_sweep(train_tfs, test_tfs, values, seed, args.feature, restarts)
        else:
            rows = training_size_sweep(values, train_tfs, test_tfs, seed,
                                       int(cfg["train"]["k"]), restarts)
    _write_text(args.out, rows_to_csv(rows))
    _echo_config(args.out, cfg)
    return 0


def _find_truth(input_path: str, manifest_dir: str | None) -> GroundTruth | None:
    p = Path(input_path).resolve()
    candidates = [Path(manifest_dir)] if manifest_dir else [p.parent.parent, p.parent]
    for root in candidates:
        mf = root / "manifest.json"
        if not mf.exists():
            continue
        for e in json.loads(mf.read_text())["traces"]:
            if (root / e["path"]).resolve() == p:
                return GroundTruth.from_dict(e)
    return None


def cmd_buffer(args) -> int:
    cfg = _config(args, **{"buffer.segment_duration_s": args.segment_duration})
    fc = load_model(args.model).feature_config if args.model else feature_config(cfg)
    pcfg = pipeline_config(cfg, fc)
    d = float(cfg["buffer"]["segment_duration_s"])
    flows = extract_flows(_iter_input(args.input), pcfg)
    items = []
    for ff in flows:
        peaks = ff.video_peaks(fc.audio_threshold_bits)
        if peaks:
            items.append(SimpleNamespace(flow_id=ff.flow_id, client=ff.info.client,
                                         sni=ff.info.sni, start=peaks[0].start,
                                         end=peaks[-1].end, peaks=peaks))
    by_id = {it.flow_id: it for it in items}
    sessions = group_sessions(items, float(cfg["buffer"]["session_window_s"]))
    rows, levels = [], []
    for si, s in enumerate(sessions):
        comps = sorted(p.end for fid in s.flow_ids for p in by_id[fid].peaks)
        for r in buffer_series(comps, d, args.step):
            rows.append({"session": si, **r})
        levels.append(levels_at_completions(comps, d))
    fp = _open_out(args.out)
    w = csv.DictWriter(fp, fieldnames=["session", "t", "buffered_s", "segments_completed",
                                       "stall_flag"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if fp is not sys.stdout:
        fp.close()
    _echo_config(args.out, cfg)
    truth = _find_truth(args.input, args.manifest) if args.input != "-" else None
    if truth is not None:
        est = levels[0] if len(levels) == 1 else [x for lv in levels for x in lv]
        rep = drift_report(est, truth.buffer_truth)
        print(json.dumps(rep.to_dict()),
              file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vidqual", description="Per-segment video quality from encrypted traffic.")
    p.add_argument("--version", action="version", version=f"vidqual {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    s.add_argument("--spec", help="JSON trace spec (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--pcap", action="store_true", help="also write pcap copies")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train codebook and profiles")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="train", choices=SPLITS)
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--restarts", type=int)
    s.add_argument("--baseline", choices=("naive", "lz78"))
    s.add_argument("--feature", default="bitrate", choices=FEATURE_KINDS)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("classify", help="classify every segment of a trace")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True, help="JSONL or pcap file, or - for stdin JSONL")
    s.add_argument("--stream", action="store_true", help="emit results as peaks finalize")
    s.add_argument("--format", choices=("csv", "jsonl"))
    s.add_argument("--bypass-quantization", action="store_true")
    s.add_argument("--config")
    s.add_argument("--force", action="store_true", help="ignore feature config mismatch")
    s.add_argument("--out")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("eval", help="confusion matrix on a test split")
    s.add_argument("--model", required=True)
    s.add_argument("--testset", required=True)
    s.add_argument("--split", default="test-fixed-train-titles", choices=SPLITS)
    s.add_argument("--classifier", default="proposed", choices=SELECTORS)
    s.add_argument("--perturb", help="e.g. delay=500,loss=10,seed=1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--force", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="k, training-size or robustness sweeps")
    s.add_argument("what", choices=("k", "titles", "robustness"))
    s.add_argument("--data", required=True, help="dataset directory (training split)")
    s.add_argument("--testset", help="dataset directory for the test split (default --data)")
    s.add_argument("--split", default="test-fixed-train-titles", choices=SPLITS)
    s.add_argument("--range", default="2..20")
    s.add_argument("--counts", default="5,10,20,30,40")
    s.add_argument("--feature", default="bitrate", choices=FEATURE_KINDS)
    s.add_argument("--model", help="model for robustness sweeps")
    s.add_argument("--delays", default="0,250,500,1000")
    s.add_argument("--losses", default="0,2,5,10")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("buffer", help="playout buffer estimate for a trace")
    s.add_argument("--model")
    s.add_argument("--input", required=True)
    s.add_argument("--segment-duration", type=float)
    s.add_argument("--step", type=float, default=1.0)
    s.add_argument("--manifest", help="dataset directory holding manifest.json")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_buffer)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except BrokenPipeError:
        # downstream reader went away (e.g. piped into head)
        sys.stdout = open(os.devnull, "w")
        return 0
    except UsageError as exc:
        print(f"vidqual: usage error: {exc}", file=sys.stderr)
        return 1
    except InvariantViolation as exc:
        print(f"vidqual: invariant violation: {exc}", file=sys.stderr)
        return 3
    except (DataError, VidqualError, OSError) as exc:
        print(f"vidqual: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"vidqual: usage error: {exc}", file=sys.stderr)
        return 1
