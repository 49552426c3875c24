"""Command-line entry point: ``fusionformer {train,generate,evaluate,inspect-weights,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

from .data import (
    DEFAULT_MAX_HISTORY,
    Vocab,
    VocabularyError,
    build_context,
    build_sample,
    load_corpus,
    save_corpus,
    synth_corpus,
)
from .decoding import DEFAULT_LENGTH_PENALTY, beam_search
from .fusion import FUSION_METHODS, WEIGHTING_METHODS
from .metrics import evaluate
from .model import ModelConfig, load_checkpoint
from .training import TrainConfig, train

logger = logging.getLogger("fusionformer")

THREADS_ENV = "FUSIONFORMER_THREADS"
BUNDLED_CORPUS = "synthetic_200.jsonl"


class UsageError(Exception):
    """Bad configuration or inputs; maps to exit code 2."""


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("fusionformer") / "resources" / BUNDLED_CORPUS))


@dataclass
class RunConfig:
    """Every setting of a run; JSON config keys use these field names."""

    corpus: Optional[str] = None
    vocab: Optional[str] = None
    out_dir: str = "run"
    # model
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_positions: int = 128
    dropout: float = 0.1
    fusion_method: str = "sw"
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    init_std: float = 0.02
    # training
    epochs: int = 5
    batch_size: int = 256
    seed: int = 0
    lr: float = 5e-4
    warmup_proportion: float = 0.002
    fusion_lr_multiplier: float = 5.0
    grad_clip: float = 1.0
    max_history: int = DEFAULT_MAX_HISTORY
    # decoding
    beam_size: int = 3
    length_penalty_exponent: float = DEFAULT_LENGTH_PENALTY
    max_len: int = 20

    def validate(self) -> None:
        try:
            self.model_config(vocab_size=1)
            self.train_config()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        for name in ("max_history", "beam_size", "max_len"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, n_layers=self.n_layers, d_model=self.d_model, n_heads=self.n_heads,
            max_positions=self.max_positions, dropout=self.dropout, fusion_method=self.fusion_method,
            alpha=self.alpha, beta=self.beta, gamma=self.gamma, init_std=self.init_std,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed, lr=self.lr,
            warmup_proportion=self.warmup_proportion, fusion_lr_multiplier=self.fusion_lr_multiplier,
            grad_clip=self.grad_clip,
        )

    @classmethod
    def load(cls, path: Optional[str], overrides: dict) -> "RunConfig":
        values = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    values = json.load(fh)
            except FileNotFoundError:
                raise UsageError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
            if not isinstance(values, dict):
                raise UsageError(f"config file {path} must hold a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**values)
        cfg.validate()
        return cfg


# -- commands ---------------------------------------------------------------------
def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_corpus_checked(path) -> list:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"corpus file not found: {p}")
    try:
        samples = load_corpus(p)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not samples:
        raise UsageError(f"corpus {p} contains no samples")
    return samples


def cmd_train(cfg: RunConfig) -> int:
    corpus_path = cfg.corpus or bundled_corpus_path()
    samples = _load_corpus_checked(corpus_path)
    try:
        vocab = Vocab.load(cfg.vocab) if cfg.vocab else Vocab.from_corpus(samples)
        items = [build_sample(s, vocab, cfg.max_history, cfg.max_positions) for s in samples]
    except FileNotFoundError:
        raise UsageError(f"vocab file not found: {cfg.vocab}") from None
    except (ValueError, VocabularyError) as exc:
        raise UsageError(f"corpus {corpus_path}: {exc}") from None

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(
        items, cfg.model_config(len(vocab)), cfg.train_config(),
        log_path=out / "loss.csv", checkpoint_path=out / "model.npz", vocab_tokens=vocab.itos,
        checkpoint_extra={"run_config": asdict(cfg)},
    )
    vocab.save(out / "vocab.txt")
    _atomic_write(out / "config.json", json.dumps(asdict(cfg), indent=2))
    last = result.epoch_losses[-1]
    print(f"trained {cfg.epochs} epochs on {len(items)} samples; final loss {last['total']:.4f}")
    print(f"checkpoint: {out / 'model.npz'}")
    return 0


def _load_checkpoint_checked(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_generate(args) -> int:
    model, meta = _load_checkpoint_checked(args.checkpoint)
    if meta.get("vocab") is None:
        raise UsageError(f"checkpoint {args.checkpoint} carries no vocabulary")
    vocab = Vocab.from_itos(meta["vocab"])
    if len(vocab) != model.config.vocab_size:
        raise UsageError(
            f"checkpoint vocabulary has {len(vocab)} tokens but the model expects {model.config.vocab_size}"
        )
    run = meta.get("extra", {}).get("run_config", {})

    def setting(flag, key, default):
        return flag if flag is not None else run.get(key, default)

    beam = setting(args.beam_size, "beam_size", 3)
    penalty = setting(args.length_penalty, "length_penalty_exponent", DEFAULT_LENGTH_PENALTY)
    max_len = setting(args.max_len, "max_len", 20)
    max_history = setting(args.max_history, "max_history", DEFAULT_MAX_HISTORY)
    if beam < 1 or max_len < 1 or max_history < 1:
        raise UsageError("beam-size, max-len and max-history must be >= 1")

    samples = _load_corpus_checked(args.corpus)
    try:
        contexts = [build_context(s.persona, s.history, vocab, max_history, model.config.max_positions)
                    for s in samples]
    except (ValueError, VocabularyError) as exc:
        raise UsageError(f"corpus {args.corpus} does not match the checkpoint: {exc}") from None

    lines = []
    for s, (p, h, _) in zip(samples, contexts):
        hyp = beam_search(model, p, h, beam, max_len, penalty, return_hypothesis=True)
        lines.append(json.dumps({
            "persona": s.persona, "history": s.history,
            "reply": vocab.detokenize(hyp.tokens), "score": hyp.score(penalty),
        }))
    _atomic_write(Path(args.out), "".join(line + "\n" for line in lines))
    print(f"wrote {len(lines)} replies to {args.out}")
    return 0


def _read_replies(path) -> List[str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    replies = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.lstrip().startswith("{"):
            try:
                replies.append(json.loads(line)["reply"])
            except (json.JSONDecodeError, KeyError):
                raise UsageError(f"{p}:{lineno}: expected a JSON object with a 'reply' key") from None
        else:
            replies.append(line.strip())
    return replies


def cmd_evaluate(args) -> int:
    refs = _read_replies(args.references)
    hyps = _read_replies(args.hypotheses)
    if len(refs) != len(hyps):
        raise UsageError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise UsageError("no sentences to evaluate")
    report = evaluate(refs, hyps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out, out.with_suffix(".csv"))
    print(json.dumps(report.to_dict()))
    return 0


def fusion_weight_rows(model) -> List[tuple]:
    weights = model.fusion_weights()
    return [(i, *map(float, row)) for i, row in enumerate(weights)]


def cmd_inspect_weights(args) -> int:
    model, _ = _load_checkpoint_checked(args.checkpoint)
    method = model.config.fusion_method
    if method not in WEIGHTING_METHODS:
        raise UsageError(
            f"inspect-weights applies to source-weighting fusion ({', '.join(WEIGHTING_METHODS)}); "
            f"this checkpoint uses {method!r}, which has no per-source weights"
        )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("layer", "w_current", "w_persona", "w_history"))
    for layer, wc, wp, wh in fusion_weight_rows(model):
        writer.writerow((layer, repr(wc), repr(wp), repr(wh)))
    _atomic_write(Path(args.out), buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def cmd_synth(args) -> int:
    if args.n_samples < 1:
        raise UsageError(f"n-samples must be >= 1, got {args.n_samples}")
    try:
        samples = synth_corpus(args.seed, args.n_samples, args.vocab_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(samples, out)
    if args.vocab_out:
        Vocab.from_corpus(samples).save(args.vocab_out)
    print(f"wrote {len(samples)} dialogues to {out}")
    return 0


# -- argument parsing ---------------------------------------------------------------
def _add_run_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = type(f.default) if f.default is not None else str
        kwargs = {"dest": f.name, "default": None, "type": kind}
        if f.name == "fusion_method":
            kwargs["choices"] = FUSION_METHODS
        p.add_argument(flag, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; writes model.npz, loss.csv, vocab.txt")
    p.add_argument("config", nargs="?", default=None, help="JSON config file (all keys optional)")
    _add_run_flags(p)

    p = sub.add_parser("generate", help="generate one reply per corpus sample (JSONL)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam-size", type=int, default=None)
    p.add_argument("--length-penalty", type=float, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--max-history", type=int, default=None)

    p = sub.add_parser("evaluate", help="BLEU/NIST-4/Entropy-4/Distinct-2/length report")
    p.add_argument("--references", required=True, help="corpus JSONL or one reply per line")
    p.add_argument("--hypotheses", required=True, help="generate output JSONL or one reply per line")
    p.add_argument("--out", required=True, help="JSON report path; a .csv is written alongside")

    p = sub.add_parser("inspect-weights", help="export normalized per-layer fusion weights (sw/dw)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="write a synthetic persona-dialogue corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--vocab-out", default=None)
    return parser


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            if args.command == "train":
                overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
                return cmd_train(RunConfig.load(args.config, overrides))
            handler = {
                "generate": cmd_generate,
                "evaluate": cmd_evaluate,
                "inspect-weights": cmd_inspect_weights,
                "synth": cmd_synth,
            }[args.command]
            return handler(args)
    except UsageError as exc:
        print(f"fusionformer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.debug("unhandled error", exc_info=True)
        print(f"fusionformer {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
