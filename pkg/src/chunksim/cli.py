"""Command-line entry points: synth, train, eval, stream, viz.

All durations on the command line are milliseconds and must be multiples of
the 10 ms frame period.  Every command exits with status 2 and a one-line
reason on invalid input.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import chunking, corpus, ctc, tensor, trainer
from .chunking import ContextMode
from .frontend import FRAME_MS, OnlineMVN, Waveform, frame_signal, log_mel
from .io import FormatError, load_features, read_manifest
from .model import Model, ModelConfig, forward_full, simulate_batch
from .streamer import StreamConfig, StreamingSession, ms_to_frames


class UsageError(ValueError):
    """Invalid command-line input."""


# -- shared helpers ---------------------------------------------------------------


def _frames(ms, name, positive=True):
    n = ms_to_frames(ms, name)
    if positive and n == 0:
        raise UsageError(f"{name} must be positive")
    return n


def _load_model(path) -> Model:
    path = Path(path)
    if not path.exists() or not Path(str(path) + ".json").exists():
        raise UsageError(f"model not found: {path}")
    return Model.load(path)


def _load_examples(manifest) -> list:
    manifest = Path(manifest)
    if not manifest.exists():
        raise UsageError(f"manifest not found: {manifest}")
    return [trainer.prepare(e.utt_id, load_features(e.path), e.label) for e in read_manifest(manifest)]


def _print_json(obj, stream=None):
    print(json.dumps(obj), file=stream or sys.stdout, flush=True)


@dataclass
class GridEntry:
    """One evaluation condition; mode 'full' means the non-streaming pass."""

    mode: str
    chunk_ms: int = 400
    left_ms: int = 400
    right_ms: int = 400

    def __post_init__(self):
        if self.mode != "full":
            self.mode = ContextMode.parse(self.mode).value
        for name in ("chunk_ms", "left_ms", "right_ms"):
            ms_to_frames(getattr(self, name), name)

    def stream_config(self) -> StreamConfig:
        return StreamConfig.from_ms(self.chunk_ms, self.left_ms, self.right_ms, self.mode)


@dataclass
class ExperimentConfig:
    corpus: str | None = None
    train_config: str | None = None
    grid: list = field(default_factory=list)
    out: str = "."

    def __post_init__(self):
        self.grid = [g if isinstance(g, GridEntry) else GridEntry(**g) for g in self.grid]

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls(**json.load(f))


# -- synth ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    kw = {}
    if args.config:
        kw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        kw["seed"] = args.seed
    spec = corpus.SynthSpec(**kw)
    paths = corpus.make_corpus(spec, args.n, args.out, (args.min_len, args.max_len))
    for name, p in paths.items():
        print(f"{name}\t{p}")
    return 0


# -- train ----------------------------------------------------------------------------


def _train_config(args) -> tuple[trainer.TrainConfig, dict]:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    model_kw = raw.pop("model", {})
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.chunk_ms is not None:
        raw["chunk"] = _frames(args.chunk_ms, "--chunk-ms")
    if args.left_ms is not None:
        raw["left"] = _frames(args.left_ms, "--left-ms", positive=False)
    if args.right_ms is not None:
        raw["right"] = _frames(args.right_ms, "--right-ms")
    if args.jitter_ms is not None:
        raw["jitter"] = _frames(args.jitter_ms, "--jitter-ms", positive=False)
    if args.modes is not None:
        raw["modes"] = [m for m in args.modes.split(",") if m]
    for key in ("alpha", "epochs", "precision", "batch_size"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    return trainer.TrainConfig(**raw), model_kw


def cmd_train(args) -> int:
    cfg, model_kw = _train_config(args)
    corpus_dir = Path(args.corpus)
    out = Path(args.out)
    tensor.set_precision(cfg.precision)
    train_set = _load_examples(corpus_dir / "train.manifest")
    dev_set = _load_examples(corpus_dir / "dev.manifest") if (corpus_dir / "dev.manifest").exists() else []
    if not train_set:
        raise UsageError("training manifest is empty")
    d_mel = train_set[0].feats.shape[1]
    vocab = model_kw.pop("vocab", None) or max(max(ex.label) for ex in train_set)
    model_config = ModelConfig.small(d_mel=d_mel, vocab=vocab, n_future=cfg.right, **model_kw)
    model = Model.init(model_config, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    mode = "w"
    if args.resume and Path(str(out / "last") + ".state").exists():
        state = trainer.load_state(out / "last", model, cfg)
        mode = "a"
    with open(out / "train_config.json", "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
    with open(out / "metrics.jsonl", mode) as log:
        def write(rec):
            log.write(json.dumps(rec) + "\n")
            log.flush()

        state = trainer.train(model, train_set, dev_set, cfg, state=state, log=write, ckpt_dir=out)
    model.save(out / "model.ckpt")
    _print_json({"model": str(out / "model.ckpt"), "steps": state.step, "epochs": state.epoch,
                 "skipped_batches": state.skipped_batches})
    return 0


# -- eval -----------------------------------------------------------------------------


def evaluate_entry(model: Model, examples, entry: GridEntry) -> tuple[dict, list]:
    """CER and mean compute per chunk (or per utterance for 'full')."""
    hyps, times = [], []
    if entry.mode == "full":
        for ex in examples:
            t0 = time.perf_counter()
            with tensor.no_grad():
                lp = forward_full(model, [ex.feats.astype(tensor.get_dtype())])[0].data
            times.append(1000 * (time.perf_counter() - t0))
            hyps.append(ctc.greedy_decode(lp))
    else:
        config = entry.stream_config()
        for ex in examples:
            # examples are already normalised; the session must not do it again
            session = StreamingSession(model, config, normalize=False)
            session.feed_frames(ex.feats)
            _, latency = session.finalize()
            times.extend(c.compute_ms for c in latency.chunks)
            hyps.append(session.hypothesis())
    refs = [ex.label for ex in examples]
    row = {
        "mode": entry.mode,
        "chunk_ms": None if entry.mode == "full" else entry.chunk_ms,
        "left_ms": None if entry.mode == "full" else entry.left_ms,
        "right_ms": None if entry.mode in ("full", "none") else entry.right_ms,
        "cer": ctc.corpus_cer(zip(hyps, refs)),
        "compute_ms": float(np.mean(times)) if times else 0.0,
        "compute_unit": "utterance" if entry.mode == "full" else "chunk",
    }
    return row, hyps


def format_table(rows) -> str:
    cols = [("mode", "mode"), ("chunk_ms", "chunk ms"), ("left_ms", "left ms"), ("right_ms", "right ms"),
            ("cer", "CER %"), ("compute_ms", "ms/chunk")]

    def cell(row, key):
        v = row[key]
        if v is None:
            return "-"
        if key == "cer":
            return f"{100 * v:.2f}"
        if key == "compute_ms":
            return f"{v:.2f}" + ("*" if row["compute_unit"] == "utterance" else "")
        return str(v)

    table = [[h for _, h in cols]] + [[cell(r, k) for k, _ in cols] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(cols))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in table]
    if any(r["compute_unit"] == "utterance" for r in rows):
        lines.append("* per utterance (full-context pass)")
    return "\n".join(lines)


def _default_grid(args) -> list:
    chunk, left, right = args.chunk_ms or 400, args.left_ms if args.left_ms is not None else 400, args.right_ms or 400
    modes = [args.mode] if args.mode else ["full", "real", "none", "sim"]
    return [GridEntry(m, chunk, left, right) for m in modes]


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    grid = ExperimentConfig.load(args.grid).grid if args.grid else _default_grid(args)
    if not grid:
        raise UsageError("evaluation grid is empty")
    examples = _load_examples(args.manifest)
    rows, decoded = [], {}
    for entry in grid:
        row, hyps = evaluate_entry(model, examples, entry)
        rows.append(row)
        decoded[entry.mode if entry.mode == "full" else f"{entry.mode}_{entry.chunk_ms}"] = hyps
    report = {"model": str(args.model), "manifest": str(args.manifest), "utterances": len(examples), "rows": rows}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(report, indent=2) + "\n")
        (out / "table.txt").write_text(format_table(rows) + "\n")
        for name, hyps in decoded.items():
            with open(out / f"hyp_{name}.txt", "w") as f:
                for ex, h in zip(examples, hyps):
                    f.write(" ".join([ex.utt_id] + [str(t) for t in h]) + "\n")
            scoring = ctc.scoring_report([ex.utt_id for ex in examples], hyps, [ex.label for ex in examples])
            (out / f"score_{name}.json").write_text(json.dumps(scoring, indent=2) + "\n")
    _print_json(report)
    print(format_table(rows))
    return 0


# -- stream ---------------------------------------------------------------------------


def read_input(path, fmt: str, d_mel: int, sample_rate: int = 16000) -> np.ndarray:
    """Raw (un-normalised) feature frames from a feature file or 16-bit PCM."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"input not found: {path}")
    if fmt == "feat":
        frames = load_features(path)
    else:
        raw = path.read_bytes()
        if len(raw) % 2:
            raise FormatError(f"{path}: odd byte count for 16-bit PCM")
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
        frames = log_mel(frame_signal(Waveform(samples, sample_rate)), n_mels=d_mel, sample_rate=sample_rate).frames
    if frames.shape[1] != d_mel:
        raise FormatError(f"{path}: features have dimension {frames.shape[1]}, model expects {d_mel}")
    return frames


def _stream_config(args, model) -> StreamConfig:
    right_ms = args.right_ms if args.right_ms is not None else model.config.simu.n_future * FRAME_MS
    return StreamConfig.from_ms(args.chunk_ms or 400, args.left_ms if args.left_ms is not None else 400,
                                right_ms, args.mode or "sim")


def cmd_stream(args) -> int:
    model = _load_model(args.model)
    config = _stream_config(args, model)
    frames = read_input(args.input, args.format, model.config.encoder.d_in, args.sample_rate)
    session = StreamingSession(model, config)
    step = max(1, _frames(args.step_ms, "--step-ms"))
    seen = 0

    def report():
        nonlocal seen
        for rec in session.latency.chunks[seen:]:
            _print_json({**rec.to_json(), "partial": session.hypothesis()})
        seen = len(session.latency.chunks)

    for i in range(0, len(frames), step):
        session.feed_frames(frames[i:i + step])
        report()
    session.finalize()
    report()
    _print_json({"hypothesis": session.hypothesis(), "config": config.describe(), "latency": session.latency.summary()})
    return 0


# -- viz ------------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray, lo: float, hi: float) -> None:
    """Binary 8-bit PGM, rows top to bottom; values mapped linearly from [lo, hi]."""
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.clip(np.round((image - lo) * scale), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def simulated_spectrogram(model: Model, feats: np.ndarray, chunk: int):
    """Chunk-wise simulated futures stitched in time order: (K * N, d)."""
    with tensor.no_grad():
        sim, Ks = simulate_batch(model, [feats.astype(tensor.get_dtype())], chunk)
    data = sim.data[0, : Ks[0]]
    return data.reshape(-1, data.shape[-1])


def cmd_viz(args) -> int:
    model = _load_model(args.model)
    chunk = _frames(args.chunk_ms or 400, "--chunk-ms")
    n = model.config.simu.n_future
    if args.manifest:
        entries = {e.utt_id: e for e in read_manifest(args.manifest)}
        utt = args.utt or next(iter(entries), None)
        if utt not in entries:
            raise UsageError(f"utterance {utt!r} not in {args.manifest}")
        raw = load_features(entries[utt].path)
    elif args.input:
        raw = read_input(args.input, args.format, model.config.encoder.d_in, args.sample_rate)
    else:
        raise UsageError("give --manifest (and optionally --utt) or --input")
    feats = OnlineMVN(raw.shape[1])(raw)
    sim = simulated_spectrogram(model, feats, chunk)
    plan = chunking.plan_chunks(feats.shape[0], chunk, 0, n, ContextMode.SIMULATED)
    target, mask = trainer.simulation_targets([trainer.Example("x", feats, [1])], [plan], n)
    target, mask = target[0].reshape(-1, feats.shape[1]), mask[0].reshape(-1)
    count = max(int(mask.sum()), 1) * feats.shape[1]
    l1_sim = float(np.abs(sim - target)[mask].sum() / count)
    l1_zero = float(np.abs(target)[mask].sum() / count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo = float(min(feats.min(), sim.min()))
    hi = float(max(feats.max(), sim.max()))
    # images: frequency on the vertical axis, low bins at the bottom
    write_pgm(out / "real.pgm", feats.T[::-1], lo, hi)
    write_pgm(out / "sim.pgm", sim.T[::-1], lo, hi)
    np.savetxt(out / "real.csv", feats, delimiter=",", fmt="%.6f")
    np.savetxt(out / "sim.csv", sim, delimiter=",", fmt="%.6f")
    _print_json({"frames": int(feats.shape[0]), "simulated_frames": int(sim.shape[0]), "l1_sim": l1_sim,
                 "l1_zero": l1_zero, "gray_range": [lo, hi], "out": str(out)})
    return 0


# -- argument parsing -------------------------------------------------------------


def _context_flags(p, train=False):
    p.add_argument("--chunk-ms", type=int)
    p.add_argument("--left-ms", type=int)
    p.add_argument("--right-ms", type=int)
    if train:
        p.add_argument("--jitter-ms", type=int)
        p.add_argument("--modes", help="comma-separated training modes, e.g. real,none,sim")
    else:
        p.add_argument("--mode", choices=["real", "none", "sim", "full"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunksim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="SynthSpec JSON")
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="joint training on a corpus directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TrainConfig JSON; an optional 'model' key holds encoder sizes")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--precision", type=int, choices=[32, 64])
    p.add_argument("--resume", action="store_true")
    _context_flags(p, train=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CER table over context configurations")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", help="JSON with a 'grid' list of {mode, chunk_ms, left_ms, right_ms}")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    _context_flags(p)
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("stream", cmd_stream, "stream one input through a session"),
                              ("viz", cmd_viz, "real vs simulated spectrogram images")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--model", required=True)
        p.add_argument("--input")
        p.add_argument("--format", choices=["feat", "pcm16"], default="feat")
        p.add_argument("--sample-rate", type=int, default=16000)
        p.add_argument("--seed", type=int)
        _context_flags(p)
        p.set_defaults(func=func)
    sub.choices["stream"].add_argument("--step-ms", type=int, default=10, help="audio fed per call")
    sub.choices["viz"].add_argument("--manifest")
    sub.choices["viz"].add_argument("--utt")
    sub.choices["viz"].add_argument("--out", default="viz")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "stream" and args.input is None:
        print("chunksim stream: error: --input is required", file=sys.stderr)
        return 2
    if getattr(args, "mode", None) == "full" and args.command in ("stream", "viz"):
        print(f"chunksim {args.command}: error: mode 'full' is not a streaming mode", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"chunksim {args.command}: error: {reason}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
