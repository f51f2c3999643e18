"""Command-line entry point: ``echoguard {jam,rir,optimize,evaluate,metrics,replay}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 file I/O
failure, 3 the run itself failed (e.g. every oracle call failed).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .audio import AudioBuffer, AudioError, read_wav, resample, write_wav
from .evolution import (BoundsError, EaConfig, EvolutionAborted, RepairError, check_bounds,
                        default_bounds, evolve)
from .jammer import ConfigError, JammerConfig, echoguard
from .metrics import EvalRecord, MetricError, aggregate_report
from .oracle import MockAsrConfig, Oracle, OracleError, OracleSpec
from .room import RoomError, generate_rir
from .stoi import StoiError, stoi
from .streaming import StreamProcessor

log = logging.getLogger("echoguard")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUN = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _config_error(msg):
    return CliError(msg, EXIT_CONFIG)


def _io_error(msg):
    return CliError(msg, EXIT_IO)


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise _io_error(f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise _config_error(f"{path} is not valid JSON: {exc}")


def write_text(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise _io_error(f"cannot write {path}: {exc}")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(tokens: Sequence[str]) -> Dict[str, object]:
    """Turn leftover ``--section.key value`` / ``--key=value`` tokens into dotted overrides."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise _config_error(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            try:
                raw = next(it)
            except StopIteration:
                raise _config_error(f"missing value for {tok}")
        out[key.replace("-", "_")] = _parse_value(raw)
    return out


def apply_overrides(layout: dict, overrides: Dict[str, object]) -> dict:
    for dotted, value in overrides.items():
        node = layout
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise _config_error(f"unknown config option --{dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise _config_error(f"unknown config option --{dotted}")
        node[parts[-1]] = value
    return layout


def resolve_jammer_config(args, overrides=None) -> JammerConfig:
    try:
        layout = JammerConfig().to_dict()
        if getattr(args, "config", None):
            layout = JammerConfig.from_dict(load_json(args.config)).to_dict()
        if getattr(args, "n_mics", None) is not None:
            layout["n_mics"] = args.n_mics
        apply_overrides(layout, overrides or {})
        cfg = JammerConfig.from_dict(layout)
        if getattr(args, "seed", None) is not None:
            cfg = cfg.with_seed(args.seed)
        return cfg
    except (ConfigError, RoomError) as exc:
        raise _config_error(f"invalid jammer config: {exc}")


def write_manifest(path, subcommand: str, argv: Sequence[str], config: dict, seed,
                   inputs: List[str], outputs: List[str], started: float, extra=None) -> None:
    manifest = {
        "subcommand": subcommand,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(),
        "duration_s": round(time.time() - started, 6),
    }
    if extra:
        manifest.update(extra)
    write_text(path, json.dumps(manifest, indent=2))


def _read_audio(path, rate: Optional[int] = None) -> AudioBuffer:
    try:
        audio = read_wav(path)
    except AudioError as exc:
        raise _io_error(f"cannot read audio {path}: {exc}")
    if rate is not None and audio.sample_rate != rate:
        audio = resample(audio, rate)
    return audio


def _write_audio(audio: AudioBuffer, path, encoding: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_wav(audio, path, encoding)
    except (AudioError, OSError) as exc:
        raise _io_error(f"cannot write audio {path}: {exc}")


def stream_file(audio: AudioBuffer, cfg: JammerConfig) -> Tuple[AudioBuffer, dict]:
    """Run a whole buffer through the streaming processor; output aligned to the input (latency removed)."""
    proc = StreamProcessor(cfg)
    n = len(audio)
    fl = proc.frame_len
    padded = np.zeros(-(-n // fl) * fl)
    padded[:n] = audio.samples
    out = [proc.process(f) for f in padded.reshape(-1, fl)]
    out.extend(proc.flush())
    y = np.concatenate(out)[proc.latency_samples:]
    return audio.with_samples(y[:n + proc.ir_len - 1]), proc.latency_report()


# --- subcommands -----------------------------------------------------------------------------

def cmd_jam(args, overrides, argv) -> int:
    started = time.time()
    cfg = resolve_jammer_config(args, overrides)
    audio = _read_audio(args.input, cfg.sample_rate)
    report = None
    if args.stream:
        try:
            out, report = stream_file(audio, cfg)
        except ConfigError as exc:
            raise _config_error(str(exc))
    else:
        out = echoguard(audio, cfg)
        if args.latency_report:
            report = StreamProcessor(cfg).latency_report()
    _write_audio(out, args.output, args.encoding)
    if report is not None and args.latency_report:
        print(json.dumps(report, indent=2))
    write_manifest(f"{args.output}.manifest.json", "jam", argv, cfg.to_dict(),
                   cfg.attenuation.seed, [str(args.input)], [str(args.output)], started,
                   {"stream": bool(args.stream), "latency": report})
    return EXIT_OK


def cmd_rir(args, overrides, argv) -> int:
    started = time.time()
    cfg = resolve_jammer_config(args, overrides)
    try:
        ir = generate_rir(cfg.room, cfg.sample_rate, cfg.max_order)
    except RoomError as exc:
        raise _config_error(str(exc))
    _write_audio(AudioBuffer(ir.taps, ir.sample_rate), args.output, "float32")
    first = int(np.flatnonzero(ir.taps)[0])
    sidecar = {
        "room": cfg.room.to_dict(),
        "sample_rate": cfg.sample_rate,
        "max_order": cfg.max_order,
        "tap_count": len(ir),
        "nonzero_taps": int(np.count_nonzero(ir.taps)),
        "first_nonzero_sample": first,
        "direct_path_delay_s": cfg.room.direct_distance / 343.0,
        "energy": ir.energy,
    }
    sidecar_path = str(Path(args.output).with_suffix(".json"))
    write_text(sidecar_path, json.dumps(sidecar, indent=2))
    write_manifest(f"{args.output}.manifest.json", "rir", argv, cfg.to_dict(), None,
                   [args.config] if args.config else [], [str(args.output), sidecar_path], started)
    return EXIT_OK


def load_corpus(directory, rate: Optional[int]) -> List[Tuple[str, AudioBuffer, str]]:
    root = Path(directory)
    if not root.is_dir():
        raise _io_error(f"corpus directory not found: {directory}")
    items = []
    for wav in sorted(root.glob("*.wav")):
        txt = wav.with_suffix(".txt")
        if not txt.is_file():
            raise _io_error(f"missing reference transcript {txt}")
        items.append((wav.stem, _read_audio(wav, rate), txt.read_text(encoding="utf-8").strip()))
    if not items:
        raise _io_error(f"no .wav files in {directory}")
    return items


def build_oracle(args, corpus) -> Oracle:
    if args.oracle_command:
        spec = OracleSpec(kind="external-command", command=args.oracle_command)
    elif args.oracle in (None, "mock"):
        spec = OracleSpec(kind="mock")
    else:
        try:
            spec = OracleSpec.from_dict(load_json(args.oracle))
        except (TypeError, ValueError) as exc:
            raise _config_error(f"invalid oracle spec: {exc}")
    mock = None
    if spec.kind == "mock":
        mock = MockAsrConfig(segment_stoi_threshold=spec.segment_stoi_threshold)
        for sid, audio, text in corpus:
            mock.register(sid, audio, text)
    return Oracle(spec, mock)


def read_ratings(path) -> Dict[str, Tuple[Optional[float], Optional[float]]]:
    ratings = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                def num(key):
                    v = (row.get(key) or "").strip()
                    return float(v) if v else None
                ratings[row["sample_id"].strip()] = (num("pleasantness"), num("clarity"))
    except OSError as exc:
        raise _io_error(f"cannot read ratings {path}: {exc}")
    except (KeyError, ValueError) as exc:
        raise _config_error(f"malformed ratings CSV {path}: {exc}")
    return ratings


def write_report(report, path) -> List[str]:
    json_path = str(Path(path).with_suffix(".json"))
    csv_path = str(Path(path).with_suffix(".csv"))
    write_text(json_path, report.to_json())
    write_text(csv_path, report.to_csv())
    return [json_path, csv_path]


def _evaluate_clip(item, cfg: JammerConfig, oracle: Oracle, ratings) -> EvalRecord:
    sid, clean, reference = item
    jammed = echoguard(clean, cfg)
    pleasant, clarity = ratings.get(sid, (None, None))
    try:
        score = stoi(clean, jammed)
    except StoiError:
        score = None
    try:
        clean_hyp = _retry(oracle, clean, sid)
        jammed_hyp = _retry(oracle, jammed, sid)
    except OracleError as exc:
        return EvalRecord(sid, [], [], float("nan"), stoi=score, error=str(exc))
    return EvalRecord.from_transcripts(sid, clean_hyp, jammed_hyp, reference, stoi=score,
                                       pleasantness=pleasant, clarity=clarity)


def _retry(oracle, audio, sid, attempts=3):
    for attempt in range(attempts):
        try:
            return oracle.transcribe(audio, sid)
        except OracleError:
            if attempt == attempts - 1:
                raise


def cmd_evaluate(args, overrides, argv) -> int:
    started = time.time()
    cfg = resolve_jammer_config(args, overrides)
    corpus = load_corpus(args.corpus, cfg.sample_rate)
    oracle = build_oracle(args, corpus)
    ratings = read_ratings(args.ratings) if args.ratings else {}
    work = lambda item: _evaluate_clip(item, cfg, oracle, ratings)
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            records = list(pool.map(work, corpus))
    else:
        records = [work(item) for item in corpus]
    try:
        report = aggregate_report(records)
    except MetricError as exc:
        raise CliError(f"evaluation failed: {exc}", EXIT_RUN)
    outputs = write_report(report, args.report)
    write_manifest(f"{args.report}.manifest.json", "evaluate", argv, cfg.to_dict(),
                   cfg.attenuation.seed, [str(args.corpus)], outputs, started,
                   {"oracle": oracle.spec.to_dict(), "summary": report.summary()})
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


def cmd_metrics(args, overrides, argv) -> int:
    started = time.time()
    if overrides:
        raise _config_error(f"unknown options: {sorted(overrides)}")
    if not args.text and not args.audio:
        raise _config_error("give at least one --text or --audio pair")
    ratings = read_ratings(args.ratings) if args.ratings else {}
    stois = {}
    for clean_path, jammed_path in args.audio or []:
        clean, jammed = _read_audio(clean_path), _read_audio(jammed_path)
        if jammed.sample_rate != clean.sample_rate:
            jammed = resample(jammed, clean.sample_rate)
        try:
            stois[Path(clean_path).stem] = stoi(clean, jammed)
        except StoiError as exc:
            raise _config_error(f"STOI failed for {clean_path}: {exc}")
    records = []
    for ref_path, hyp_path in args.text or []:
        sid = Path(ref_path).stem
        try:
            ref = Path(ref_path).read_text(encoding="utf-8")
            hyp = Path(hyp_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise _io_error(str(exc))
        pleasant, clarity = ratings.get(sid, (None, None))
        try:
            records.append(EvalRecord.from_transcripts(sid, ref, hyp, ref, stoi=stois.get(sid),
                                                       pleasantness=pleasant, clarity=clarity))
        except MetricError as exc:
            raise _config_error(f"{sid}: {exc}")
    outputs = []
    summary = {}
    if records:
        report = aggregate_report(records)
        outputs = write_report(report, args.report)
        summary = report.summary()
    unmatched = {k: v for k, v in stois.items() if k not in {r.sample_id for r in records}}
    if unmatched:
        summary["stoi_only"] = unmatched
        path = str(Path(args.report).with_suffix(".stoi.json"))
        write_text(path, json.dumps(unmatched, indent=2))
        outputs.append(path)
    inputs = [p for pair in (args.audio or []) + (args.text or []) for p in pair]
    write_manifest(f"{args.report}.manifest.json", "metrics", argv, {}, None, inputs, outputs,
                   started, {"summary": summary})
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_optimize(args, overrides, argv) -> int:
    started = time.time()
    template = resolve_jammer_config(args, overrides)
    try:
        ea = EaConfig.from_dict(load_json(args.ea_config)) if args.ea_config else EaConfig()
        if args.seed is not None:
            ea = replace(ea, seed=args.seed)
        bounds = check_bounds(load_json(args.bounds) if args.bounds else default_bounds())
    except (TypeError, ValueError) as exc:
        raise _config_error(f"invalid optimizer config: {exc}")
    corpus = load_corpus(args.corpus, template.sample_rate)
    oracle = build_oracle(args, corpus)
    audio_set = [(sid, audio, text.split()) for sid, audio, text in corpus]
    out_dir = Path(args.out_dir)
    history_path = out_dir / "history.csv"
    rows = []

    def save_history():
        lines = ["generation,best_fitness,mean_fitness,best_wer,best_stoi"]
        lines += [f"{r.generation},{r.best_fitness!r},{r.mean_fitness!r},{r.best_wer!r},{r.best_stoi!r}"
                  for r in rows]
        write_text(history_path, "\n".join(lines) + "\n")

    def on_generation(row):
        rows.append(row)
        save_history()

    try:
        result = evolve(ea, bounds, audio_set, oracle, jam_template=template,
                        workers=args.workers, on_generation=on_generation)
    except EvolutionAborted as exc:
        save_history()
        raise CliError(f"optimization aborted: {exc}", EXIT_RUN)
    except RepairError as exc:
        raise _config_error(str(exc))
    best_cfg = replace(template, room=result.best.room)
    best_path = out_dir / "best_config.json"
    write_text(best_path, json.dumps(best_cfg.to_dict(), indent=2))
    save_history()
    write_manifest(out_dir / "manifest.json", "optimize", argv,
                   {"jammer": template.to_dict(), "ea": ea.to_dict(), "bounds": bounds.tolist()},
                   ea.seed, [str(args.corpus)], [str(best_path), str(history_path)], started,
                   {"best_fitness": result.best.fitness, "evaluations": result.evaluations,
                    "oracle": oracle.spec.to_dict()})
    print(json.dumps({"best_fitness": result.best.fitness, "room": best_cfg.room.to_dict()}, indent=2))
    return EXIT_OK


def cmd_replay(args, overrides, argv) -> int:
    manifest = load_json(args.manifest)
    try:
        recorded = manifest["argv"]
        cwd = manifest.get("cwd", os.getcwd())
    except (KeyError, TypeError):
        raise _config_error(f"{args.manifest} is not a run manifest")
    if recorded and recorded[0] == "replay":
        raise _config_error("refusing to replay a replay")
    here = os.getcwd()
    try:
        os.chdir(cwd)
        return main(recorded)
    finally:
        os.chdir(here)


# --- argument parsing ------------------------------------------------------------------------

def _add_jam_options(p):
    p.add_argument("--config", help="JammerConfig JSON (defaults: optimized room, 5 Hz, 20 ms, 30%%, 0.7)")
    p.add_argument("--seed", type=int, help="attenuation RNG seed")
    p.add_argument("--n-mics", type=int, dest="n_mics", help="number of directional mics")


def _add_oracle_options(p):
    p.add_argument("--oracle", default="mock", help="'mock' or path to an OracleSpec JSON")
    p.add_argument("--oracle-command", help="shortcut for an external command, e.g. 'asr {audio}'")
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echoguard",
        description="Reverberation-based ASR jamming. Extra --section.key VALUE options "
                    "override individual config fields, e.g. --room.absorption 0.3.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("jam", help="apply the jammer to a WAV file")
    p.add_argument("input")
    p.add_argument("output")
    _add_jam_options(p)
    p.add_argument("--stream", action="store_true", help="use the frame-by-frame streaming path")
    p.add_argument("--latency-report", action="store_true", help="print streaming latency as JSON")
    p.add_argument("--encoding", choices=("pcm16", "float32"), default="pcm16")
    p.set_defaults(func=cmd_jam)

    p = sub.add_parser("rir", help="write the omnidirectional room impulse response")
    p.add_argument("output")
    _add_jam_options(p)
    p.set_defaults(func=cmd_rir)

    p = sub.add_parser("evaluate", help="jam a corpus and score it through an ASR oracle")
    p.add_argument("corpus", help="directory of NAME.wav + NAME.txt reference transcripts")
    p.add_argument("--report", required=True, help="report path; .json and .csv are written")
    p.add_argument("--ratings", help="CSV with sample_id,pleasantness,clarity")
    _add_jam_options(p)
    _add_oracle_options(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("optimize", help="evolutionary search for a room configuration")
    p.add_argument("corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ea-config", help="EaConfig JSON")
    p.add_argument("--bounds", help="JSON list of 10 [low, high] gene bounds")
    _add_jam_options(p)
    _add_oracle_options(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("metrics", help="score existing audio and/or transcript pairs")
    p.add_argument("--audio", nargs=2, action="append", metavar=("CLEAN_WAV", "JAMMED_WAV"))
    p.add_argument("--text", nargs=2, action="append", metavar=("CLEAN_TXT", "JAMMED_TXT"),
                   help="clean-audio transcript (also the WER reference) and jammed transcript")
    p.add_argument("--ratings")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(extra)
        return args.func(args, overrides, argv)
    except CliError as exc:
        print(f"echoguard: {exc}", file=sys.stderr)
        return exc.code
    except (BoundsError, ConfigError) as exc:
        print(f"echoguard: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
