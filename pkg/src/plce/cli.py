"""Command-line entry point: ``plce {mix,train,enhance,bench,trace}``.

Exit codes: 0 success, 2 usage, 3 model, 4 audio, 5 data.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .dsp import istft, read_wav, stft, write_wav
from .early_exit import ExitPolicy, run_with_early_exit, write_trace_csv
from .errors import AudioError, DataError, ModelError
from .evaluate import DEFAULT_TAUS, TestUtterance, dist_trace_aggregate, run_bench
from .model import ModelConfig, load_weights, save_weights
from .training import SNR_GRID, SNR_RANGE, Example, mix_at_snr, snr_db, synth_targets, train_loop, write_loss_csv

log = logging.getLogger("plce")

EXIT_OK, EXIT_USAGE, EXIT_MODEL, EXIT_AUDIO, EXIT_DATA = 0, 2, 3, 4, 5
DEFAULT_SEED = 1234
MIX_COLUMNS = ["utterance_id", "mixture_path", "clean_path", "noise_path", "snr_db", "realized_snr_db", "seed"]


class UsageError(Exception):
    pass


def parse_tau(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        tau = float(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid tau {text!r}") from None
    if math.isnan(tau) or tau < 0:
        raise argparse.ArgumentTypeError(f"tau must be >= 0 or 'inf', got {text!r}")
    return tau


def parse_taus(text: str) -> list[float]:
    return [parse_tau(t) for t in text.split(",") if t.strip()]


def _read_csv(path: Path, required: list[str]) -> list[dict]:
    if not path.is_file():
        raise DataError(f"{path}: manifest not found")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        return list(reader)


def _manifest_path(p: str) -> Path:
    path = Path(p)
    return path / "manifest.csv" if path.is_dir() or not path.suffix else path


# -- mix ----------------------------------------------------------------------------

def cmd_mix(args) -> int:
    manifest = Path(args.manifest)
    rows = _read_csv(manifest, ["clean_path", "noise_path", "snr_db", "seed"])
    if not rows:
        raise DataError(f"{manifest}: no rows")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = manifest.parent
    written, failures = [], []
    for i, row in enumerate(rows):
        uid = f"utt{i:04d}"
        try:
            snr = float(row["snr_db"])
            lo, hi = SNR_RANGE
            if not lo <= snr <= hi:
                raise DataError(f"SNR {snr:g} dB outside [{lo:g}, {hi:g}]")
            if args.strict_grid and snr not in SNR_GRID:
                raise DataError(f"SNR {snr:g} dB not on the 2 dB training grid")
            seed_text = (row.get("seed") or "").strip()
            seed = int(seed_text) if seed_text else int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
            clean = read_wav(base / row["clean_path"])
            noise = read_wav(base / row["noise_path"])
            mixture, scaled = mix_at_snr(clean, noise, snr, seed)
        except (AudioError, DataError, ValueError) as exc:
            failures.append((i, exc))
            print(f"row {i + 1}: {exc}", file=sys.stderr)
            continue
        names = {k: f"{k}_{uid}.wav" for k in ("mix", "clean", "noise")}
        write_wav(out_dir / names["mix"], mixture)
        write_wav(out_dir / names["clean"], clean)
        write_wav(out_dir / names["noise"], scaled)
        written.append([uid, names["mix"], names["clean"], names["noise"], f"{snr:g}",
                        f"{snr_db(clean, scaled):.6f}", seed])
    with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MIX_COLUMNS)
        writer.writerows(written)
    print(f"wrote {len(written)} mixture(s) to {out_dir}, {len(failures)} row(s) rejected")
    if failures:
        return EXIT_AUDIO if any(isinstance(e, AudioError) for _, e in failures) else EXIT_DATA
    return EXIT_OK


def load_mix_dir(path: str) -> list[dict]:
    manifest = _manifest_path(path)
    rows = _read_csv(manifest, ["utterance_id", "mixture_path", "clean_path", "noise_path", "snr_db"])
    if not rows:
        raise DataError(f"{manifest}: no utterances")
    for r in rows:
        for k in ("mixture_path", "clean_path", "noise_path"):
            r[k] = manifest.parent / r[k]
    return rows


def load_training_set(path: str, Q: int) -> list[Example]:
    out = []
    for r in load_mix_dir(path):
        mixture, clean, noise = read_wav(r["mixture_path"]), read_wav(r["clean_path"]), read_wav(r["noise_path"])
        targets = np.stack([t.to_ri() for t in synth_targets(clean, noise, Q)]).astype(np.float32)
        out.append(Example(r["utterance_id"], float(r["snr_db"]), stft(mixture).to_ri().astype(np.float32),
                           targets, clean, mixture))
    return out


def load_testset(path: str) -> list[TestUtterance]:
    p = Path(path)
    if p.is_dir() and not (p / "manifest.csv").exists():
        raise DataError(f"{p}: no manifest.csv in test directory")
    return [TestUtterance(r["utterance_id"], float(r["snr_db"]), read_wav(r["mixture_path"]), read_wav(r["clean_path"]))
            for r in load_mix_dir(path)]


# -- train / enhance / bench / trace --------------------------------------------------

def cmd_train(args) -> int:
    try:
        config = ModelConfig(
            stages=args.stages, channels=args.channels, encoder_depth=args.encoder_depth,
            lstm_layers=args.lstm_layers, lstm_units=args.lstm_units, gate_enabled=not args.no_gate,
            srnn_enabled=not args.no_srnn, skip_enabled=not args.no_skip, norm_mode=args.norm_mode,
        )
    except ModelError as exc:
        raise UsageError(str(exc)) from None
    if args.epochs < 1 or args.batch < 1 or not args.lr > 0:
        raise UsageError("--epochs and --batch must be >= 1 and --lr > 0")
    train = load_training_set(args.data, config.stages)
    val = load_training_set(args.val, config.stages) if args.val else None
    result = train_loop(config, train, epochs=args.epochs, batch=args.batch, seed=args.seed, lr=args.lr, val_dataset=val)
    save_weights(result.weights, args.out)
    if args.loss_csv:
        write_loss_csv(args.loss_csv, result.history)
    last = result.history[-1]
    print(f"trained {args.epochs} epoch(s): train loss {last['train_loss']:.6g}, val loss {last['val_loss']:.6g} -> {args.out}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    weights = load_weights(args.model)
    stages = args.stages or weights.config.stages
    if not 1 <= stages <= weights.config.stages:
        raise UsageError(f"--stages must lie in [1, {weights.config.stages}]")
    noisy = read_wav(args.input)
    X = stft(noisy)
    est, trace = run_with_early_exit(weights, X, ExitPolicy(args.tau, stages))
    write_wav(args.output, istft(est, len(noisy)))
    if args.trace:
        write_trace_csv(args.trace, [(Path(args.input).stem, math.nan, args.tau, trace)])
    print(f"exit at stage {trace.exit_stage}/{stages}, dists {[f'{d:.4g}' for d in trace.dists]}")
    return EXIT_OK


def cmd_bench(args) -> int:
    weights = load_weights(args.model)
    testset = load_testset(args.test_dir)
    report = run_bench(weights, testset, args.taus, both_speedups=args.both_speedups, metric_hook=args.metric_cmd)
    report.to_csv(args.report)
    if args.trace:
        write_trace_csv(args.trace, report.traces)
    print(f"wrote {len(report.rows)} row(s) to {args.report}")
    return EXIT_OK


def cmd_trace(args) -> int:
    weights = load_weights(args.model)
    table = dist_trace_aggregate(weights, load_testset(args.test_dir))
    table.to_csv(args.out)
    print(f"wrote {len(table.rows)} row(s) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plce", description="Progressive speech enhancement with early exit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mix", help="synthesise noisy mixtures from a clean/noise manifest")
    p.add_argument("--manifest", required=True, help="CSV with clean_path,noise_path,snr_db,seed")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="root seed for rows without their own")
    p.add_argument("--strict-grid", action="store_true", help="only accept SNRs on the -5:2:29 dB grid")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="train a model on a mixture directory")
    p.add_argument("--data", required=True, help="output directory (or manifest) of 'plce mix'")
    p.add_argument("--val", help="optional validation mixture directory")
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--loss-csv")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--stages", type=int, default=5)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--encoder-depth", type=int, default=5)
    p.add_argument("--lstm-layers", type=int, default=2)
    p.add_argument("--lstm-units", type=int, default=256)
    p.add_argument("--no-gate", action="store_true")
    p.add_argument("--no-srnn", action="store_true")
    p.add_argument("--no-skip", action="store_true")
    p.add_argument("--norm-mode", choices=["utterance", "cumulative"], default="utterance")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance one WAV file with early exit")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tau", type=parse_tau, default=0.0, help="exit threshold; 'inf' exits after stage 1")
    p.add_argument("--stages", type=int, help="stage budget (defaults to the model's)")
    p.add_argument("--trace", help="write the per-stage trace CSV here")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("bench", help="threshold sweep over a test directory")
    p.add_argument("--model", required=True)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--taus", type=parse_taus, default=list(DEFAULT_TAUS))
    p.add_argument("--report", required=True)
    p.add_argument("--trace", help="also write every per-stage trace")
    p.add_argument("--both-speedups", action="store_true", help="add the ratio-of-totals speed-up column")
    p.add_argument("--metric-cmd", help="external metric command template with {est} and {ref}")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("trace", help="mean per-stage distances by SNR")
    p.add_argument("--model", required=True)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except AudioError as exc:
        print(f"audio error: {exc}", file=sys.stderr)
        return EXIT_AUDIO
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
