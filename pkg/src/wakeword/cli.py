"""Command-line entry point: ``wakeword <subcommand> [flags]``.

Every subcommand works inside ``--run-dir``: relative paths are resolved
against it, outputs are written there, and the resolved configuration is
saved next to them.  Settings come from built-in defaults, then an optional
``--config`` key=value file, then flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .am import StreamingScorer, TdnnfModel
from .audio import SAMPLE_RATE, read_wav
from .corpus import AugmentPolicy, Entry, Manifest, augment, load_manifest, subsegment_negatives
from .decoder import FRAME_SECONDS, OnlineDecoder
from .evaluation import (decode_manifest, det_sweep, evaluate, monotone_envelope, score_manifest, summary,
                         write_det_csv)
from .features import FeatureCache, MfccStream, write_archive
from .graphs import build_decoding_graph, build_denominator_graph, write_symbol_tables
from .toy import synth_toy
from .trainer import (TrainConfig, TrainingGraphs, _parse_value, align, read_alignments, train, train_refine,
                      write_alignments)

log = logging.getLogger("wakeword")


@dataclass(frozen=True)
class DecodeConfig:
    positive_cost: float = 0.0
    beam: float = 16.0
    chunk_frames: int = 20
    max_active: int = 2000
    continuous: bool = False

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


CONFIG_CLASSES = (TrainConfig, DecodeConfig)


class CliError(Exception):
    pass


def read_config_file(path: Path) -> dict[str, str]:
    known = {f.name for cls in CONFIG_CLASSES for f in fields(cls)}
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in known:
            raise CliError(f"{path}:{lineno}: unknown key {k!r}")
        out[k] = v
    return out


def resolve(cls, file_values: dict[str, str], args: argparse.Namespace):
    """defaults < config file < flags."""
    kw = {}
    for f in fields(cls):
        if f.name in file_values:
            kw[f.name] = _parse_value(str(f.type), file_values[f.name])
        flag = getattr(args, f.name, None)
        if flag is not None:
            kw[f.name] = flag
    return cls(**kw)


def parse_costs(text: str) -> list[float]:
    """``start:step:stop`` with stop included, or a comma-separated list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise CliError(f"bad cost grid {text!r}; expected start:step:stop")
        start, step, stop = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise CliError(f"bad cost grid {text!r}")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return sorted(float(c) for c in text.split(",") if c.strip())


class Run:
    def __init__(self, args: argparse.Namespace):
        self.dir = Path(args.run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.file_values = read_config_file(self.path(args.config)) if args.config else {}

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.dir / p

    def manifest(self, p: str) -> Manifest:
        return load_manifest(self.path(p))

    def save_config(self, name: str, *configs) -> None:
        text = "".join(c.to_text() for c in configs)
        (self.dir / name).write_text(text, encoding="utf-8")


def _absolute(m: Manifest) -> Manifest:
    return m.with_entries([Entry(e.utt_id, str(m.audio_file(e).resolve()), e.label, e.offset_s, e.duration_s)
                           for e in m.entries])


# -- subcommands ----------------------------------------------------------------


def cmd_synth_toy(args, run: Run) -> int:
    out = run.path(args.out)
    m = synth_toy(out, args.n_pos, args.n_neg, args.seed, prefix=args.prefix)
    (run.dir / "synth-toy.conf").write_text(
        f"n_pos={args.n_pos}\nn_neg={args.n_neg}\nseed={args.seed}\nprefix={args.prefix}\n", encoding="utf-8")
    print(f"{out / 'manifest.txt'}\t{len(m.positives)} positives\t{len(m.negatives)} negatives")
    return 0


def cmd_prepare(args, run: Run) -> int:
    cfg = resolve(TrainConfig, run.file_values, args)
    m = run.manifest(args.manifest)
    out = run.path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.noise_manifest:
        policy = AugmentPolicy(seed=args.seed)
        m = augment(m, run.manifest(args.noise_manifest), policy, out / "augmented")
    if args.subsegment:
        m = subsegment_negatives(m, args.seed, args.overlap)
    m = _absolute(m)
    m.save(out / "manifest.txt")
    if args.features:
        cache = FeatureCache()
        write_archive(out / "feats.ark", ((e.utt_id, cache.get(m, e)) for e in m.entries))
    cfg = cfg.updated(num_wake_words=max(cfg.num_wake_words, m.num_wake_words))
    graphs = TrainingGraphs.build(cfg, len(m.positives), len(m.negatives))
    graphs.phone_lm.write(out / "phone_lm.fst")
    build_denominator_graph(graphs.phone_lm, graphs.topo).write(out / "den.fst")
    write_symbol_tables(graphs.topo, out)
    (run.dir / "prepare.conf").write_text(
        f"manifest={args.manifest}\nsubsegment={args.subsegment}\noverlap={args.overlap}\nseed={args.seed}\n"
        f"noise_manifest={args.noise_manifest or ''}\n" + cfg.to_text(), encoding="utf-8")
    print(f"{out / 'manifest.txt'}\t{len(m)} entries\t{m.negative_hours():.3f} negative hours")
    return 0


def _train_config(args, run: Run, m: Manifest) -> TrainConfig:
    cfg = resolve(TrainConfig, run.file_values, args)
    return cfg.updated(num_wake_words=max(cfg.num_wake_words, m.num_wake_words))


def cmd_train(args, run: Run) -> int:
    tr = run.manifest(args.train)
    cfg = _train_config(args, run, tr)
    dev = load_manifest(run.path(args.dev), cfg.num_wake_words)
    best = train(cfg, tr, dev, run.dir, resume=not args.no_resume)
    print(best)
    return 0


def cmd_align(args, run: Run) -> int:
    m = run.manifest(args.manifest)
    cfg = _train_config(args, run, m)
    ali = align(run.path(args.model), m, cfg)
    write_alignments(ali, run.path(args.out))
    run.save_config("align.conf", cfg)
    print(run.path(args.out))
    return 0


def cmd_refine(args, run: Run) -> int:
    tr = run.manifest(args.train)
    cfg = _train_config(args, run, tr)
    dev = load_manifest(run.path(args.dev), cfg.num_wake_words)
    ali = read_alignments(run.path(args.alignments))
    out = run.path(args.out)
    best = train_refine(cfg, tr, dev, ali, out, run.path(args.model))
    print(best)
    return 0


def _load_model(run: Run, p: str) -> TdnnfModel:
    return TdnnfModel.load(run.path(p))[0]


def _topology(model: TdnnfModel, cfg: TrainConfig):
    graphs = TrainingGraphs.build(cfg, 1, 1)
    if graphs.topo.num_pdfs != model.cfg.num_pdfs:
        raise CliError(f"model has {model.cfg.num_pdfs} outputs but the topology has {graphs.topo.num_pdfs}; "
                       "check num_wake_words and the state counts")
    return graphs.topo


def _pcm_blocks(source: str, run: Run, block: int = 4800):
    """16-bit mono PCM blocks from a WAV file, or raw little-endian PCM on stdin for ``-``."""
    if source == "-":
        stream = sys.stdin.buffer
        head = stream.read(44)
        if head[:4] == b"RIFF":
            if int.from_bytes(head[24:28], "little") != SAMPLE_RATE:
                raise CliError("standard input is not 16 kHz audio")
            pending = b""
        else:
            pending = head
        while True:
            data = pending + stream.read(2 * block)
            pending = b""
            if len(data) % 2:
                pending, data = data[-1:], data[:-1]
            if not data:
                return
            yield np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    else:
        x, rate = read_wav(run.path(source))
        if rate != SAMPLE_RATE:
            raise CliError(f"{source}: expected {SAMPLE_RATE} Hz audio, got {rate}")
        for i in range(0, len(x), block):
            yield x[i:i + block]


def cmd_decode(args, run: Run) -> int:
    tcfg = resolve(TrainConfig, run.file_values, args)
    dcfg = resolve(DecodeConfig, run.file_values, args)
    run.save_config("decode.conf", dcfg, tcfg)
    model = _load_model(run, args.model)
    topo = _topology(model, tcfg)
    inv = topo.inventory
    wake = [inv.wake_phone(k) for k in range(inv.num_wake)]
    dec = OnlineDecoder(build_decoding_graph(topo, dcfg.positive_cost), wake, dcfg.beam, dcfg.chunk_frames,
                        dcfg.max_active, dcfg.continuous)
    mfcc = MfccStream()
    scorer = StreamingScorer(model)
    pending = np.zeros((0, model.cfg.num_pdfs))
    fired = 0

    def report(det) -> None:
        nonlocal fired
        fired += 1
        print(f"DETECTED\t{inv.name(det.word)}\t{det.frame * FRAME_SECONDS:.2f}", flush=True)

    for block in _pcm_blocks(args.input, run):
        pending = np.concatenate([pending, scorer.accept(mfcc.accept(block))])
        while len(pending) >= dcfg.chunk_frames:
            det = dec.process_chunk(pending[: dcfg.chunk_frames])
            pending = pending[dcfg.chunk_frames:]
            if det is not None:
                report(det)
                if not dcfg.continuous:
                    return 0
    rows = np.concatenate([pending, scorer.flush()])
    for i in range(0, len(rows), dcfg.chunk_frames):
        det = dec.process_chunk(rows[i:i + dcfg.chunk_frames])
        if det is not None:
            report(det)
            if not dcfg.continuous:
                return 0
    det = dec.finish()
    if det is not None:
        report(det)
    if not fired:
        print("END\tno-detection", flush=True)
    return 0


def cmd_eval(args, run: Run) -> int:
    tcfg = resolve(TrainConfig, run.file_values, args)
    dcfg = resolve(DecodeConfig, run.file_values, args)
    run.save_config("eval.conf", dcfg, tcfg)
    model = _load_model(run, args.model)
    m = load_manifest(run.path(args.manifest), tcfg.num_wake_words)
    topo = _topology(model, tcfg)
    dets = decode_manifest(score_manifest(model, m), topo, dcfg.positive_cost, dcfg.beam, dcfg.chunk_frames)
    frr, fah = evaluate(dets, m)
    text = f"positive_cost={dcfg.positive_cost}\nfrr_percent={frr:.4f}\nfah_per_hour={fah:.4f}\n"
    (run.dir / "eval.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_sweep(args, run: Run) -> int:
    tcfg = resolve(TrainConfig, run.file_values, args)
    dcfg = resolve(DecodeConfig, run.file_values, args)
    costs = parse_costs(args.costs)
    (run.dir / "sweep.conf").write_text(f"costs={args.costs}\n" + dcfg.to_text() + tcfg.to_text(),
                                        encoding="utf-8")
    model = _load_model(run, args.model)
    m = load_manifest(run.path(args.manifest), tcfg.num_wake_words)
    topo = _topology(model, tcfg)
    points = det_sweep(score_manifest(model, m), topo, m, costs, dcfg.beam, dcfg.chunk_frames)
    write_det_csv(points, run.path(args.out))
    write_det_csv(monotone_envelope(points), run.path(args.out).with_suffix(".envelope.csv"))
    text = summary(points)
    (run.dir / "summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# -- argument parsing -------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (overrides --config)")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = str(f.type)
        if "bool" in kind:
            g.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        elif "str" in kind:
            g.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
        else:
            g.add_argument(flag, dest=f.name, default=None, type=float if "float" in kind else int,
                           metavar=f.name.upper())


def _decode_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("decoder config (overrides --config)")
    g.add_argument("--positive-cost", dest="positive_cost", type=float, default=None)
    g.add_argument("--beam", type=float, default=None)
    g.add_argument("--chunk-frames", dest="chunk_frames", type=int, default=None)
    g.add_argument("--max-active", dest="max_active", type=int, default=None)
    g.add_argument("--continuous", default=None, action=argparse.BooleanOptionalAction,
                   help="keep decoding after a detection")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", default=".", help="working directory for inputs and outputs")
    common.add_argument("--config", help="key=value config file (relative to --run-dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wakeword", description="Alignment-free LF-MMI wake-word toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-toy", parents=[common], help="write a synthetic tone-melody corpus")
    p.add_argument("--n-pos", type=int, default=500)
    p.add_argument("--n-neg", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="toy")
    p.add_argument("--prefix", default="")
    p.set_defaults(func=cmd_synth_toy)

    p = sub.add_parser("prepare", parents=[common], help="augment, sub-segment, extract features, build graphs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="data")
    p.add_argument("--subsegment", default=True, action=argparse.BooleanOptionalAction)
    p.add_argument("--overlap", type=float, default=0.3)
    p.add_argument("--noise-manifest", help="noise sources; enables augmentation")
    p.add_argument("--features", default=True, action=argparse.BooleanOptionalAction,
                   help="write an MFCC archive")
    p.add_argument("--seed", type=int, default=0)
    _train_flags_subset(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="alignment-free LF-MMI training")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--no-resume", action="store_true", help="ignore last.ckpt in the run directory")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("align", parents=[common], help="Viterbi alignments through numerator graphs")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="alignments.txt")
    _train_flags(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("refine", parents=[common], help="regular LF-MMI on top of alignments")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--alignments", required=True)
    p.add_argument("--out", default="refine")
    _train_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("decode", parents=[common], help="stream audio through the detector")
    p.add_argument("--model", required=True)
    p.add_argument("--input", default="-", help="WAV file, or - for 16 kHz PCM on standard input")
    _decode_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="FRR and FAH at one operating point")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    _decode_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="DET curve over positive-path costs")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--costs", default="-2:0.5:6", help="start:step:stop (inclusive) or a comma list")
    p.add_argument("--out", default="det.csv")
    _decode_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _train_flags_subset(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("graph config (overrides --config)")
    g.add_argument("--num-wake-words", dest="num_wake_words", type=int, default=None)
    g.add_argument("--word-states", dest="word_states", type=int, default=None)
    g.add_argument("--sil-states", dest="sil_states", type=int, default=None)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        return args.func(args, run)
    except (KeyboardInterrupt, BrokenPipeError):
        return 1
    except Exception as exc:
        if args.verbose:
            log.exception("%s failed", args.command)
        print(f"wakeword {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
