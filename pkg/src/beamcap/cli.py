"""``beamcap`` command line: gen, train, decode, score.

Exit codes: 0 ok, 2 usage or I/O, 3 training diverged, 4 model/feature error,
5 bad scoring input. Errors print one line ``error: <code>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import corpus, decoder, metrics
from .beam import BeamConfig, beam_search

EXIT_USAGE, EXIT_DIVERGED, EXIT_MODEL, EXIT_SCORE = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, exit_code: int, code: str, message: str):
        super().__init__(message)
        self.exit_code = exit_code
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


DEFAULTS = {
    "gen": {
        "seed": 0, "items": 8, "vocab": 20, "pixels": 4, "dim": 8, "max_len": 50,
        "min_count": 1, "world_seed": 0, "out": None,
    },
    "train": {
        "data": None, "wordmap": None, "out": None, "loss_log": None, "seed": 0,
        "epochs": 100, "lr": 4e-4, "lambda_ds": 1.0, "clip": 5.0,
        "embed": 16, "hidden": 16, "attn": 16,
    },
    "decode": {"model": None, "features": None, "data": None, "beam": 4, "max_len": 50},
    "score": {"input": None},
}

REQUIRED = {"gen": ["out"], "train": ["data", "out"], "decode": ["model"], "score": ["input"]}
POSITIVE = {
    "gen": ["items", "vocab", "pixels", "dim", "max_len", "min_count"],
    "train": ["epochs", "embed", "hidden", "attn"],
    "decode": ["beam", "max_len"],
    "score": [],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="beamcap", description="Attention LSTM captioning with beam search.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option values; explicit flags win")
        return p

    p = command("gen", "write a synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--vocab", type=int, help="content words (excluding reserved tokens)")
    p.add_argument("--pixels", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--max-len", type=int, help="longest caption in tokens")
    p.add_argument("--min-count", type=int)
    p.add_argument("--world-seed", type=int, help="codebook seed shared across splits")
    p.add_argument("--out")

    p = command("train", "train the decoder with teacher forcing")
    p.add_argument("--data", help="dataset JSONL")
    p.add_argument("--wordmap", help="defaults to wordmap.json next to the dataset")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--loss-log", help="CSV loss trace path")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-ds", type=float)
    p.add_argument("--clip", type=float, help="absolute gradient clip; 0 disables")
    p.add_argument("--embed", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--attn", type=int)

    p = command("decode", "caption feature files with beam search")
    p.add_argument("--model")
    p.add_argument("--features", nargs="+")
    p.add_argument("--data", help="dataset JSONL whose feature files to caption")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)

    p = command("score", "score candidate captions against references")
    p.add_argument("--input")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[args.command]
    from_file = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise CliError(EXIT_USAGE, "io", f"cannot read config {args.config}: {exc.strerror}")
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_USAGE, "usage", f"config {args.config} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise CliError(EXIT_USAGE, "usage", f"config {args.config} must hold a JSON object")
        for key, value in raw.items():
            name = key.replace("-", "_")
            if name not in defaults:
                raise CliError(EXIT_USAGE, "usage", f"unknown config key {key!r} for {args.command}")
            from_file[name] = value
    opts = {}
    for name, default in defaults.items():
        flag = getattr(args, name)
        opts[name] = flag if flag is not None else from_file.get(name, default)
    for name in REQUIRED[args.command]:
        if opts[name] is None:
            raise CliError(EXIT_USAGE, "usage", f"--{name.replace('_', '-')} is required")
    for name in POSITIVE[args.command]:
        if not isinstance(opts[name], int) or opts[name] < 1:
            raise CliError(EXIT_USAGE, "usage", f"--{name.replace('_', '-')} must be a positive integer")
    return opts


def _write(path: str, data: bytes | str) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        with open(path, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
    except OSError as exc:
        raise CliError(EXIT_USAGE, "io", f"cannot write {path}: {exc.strerror}")


def run_gen(opts: dict, out=None) -> int:
    out = out or sys.stdout
    if opts["vocab"] < 5:
        raise CliError(EXIT_USAGE, "usage", "--vocab must be at least 5")
    records = corpus.gen_synthetic(opts["seed"], opts["items"], opts["vocab"], opts["pixels"],
                                   opts["dim"], opts["max_len"], world_seed=opts["world_seed"])
    wm = corpus.build_wordmap([ref for rec in records for ref in rec.refs], opts["min_count"])
    try:
        path = corpus.write_dataset(records, opts["out"])
    except OSError as exc:
        raise CliError(EXIT_USAGE, "io", f"cannot write dataset under {opts['out']}: {exc.strerror}")
    _write(os.path.join(opts["out"], "wordmap.json"), wm.to_json() + "\n")
    manifest = {
        "command": "gen", "seed": opts["seed"], "world_seed": opts["world_seed"],
        "records": len(records), "vocab": opts["vocab"], "wordmap_size": len(wm),
        "pixels": opts["pixels"], "dim": opts["dim"], "dataset": path,
    }
    print(json.dumps(manifest), file=out)
    return 0


def _read_wordmap(path: str) -> corpus.WordMap:
    try:
        with open(path, encoding="utf-8") as fh:
            return corpus.WordMap.from_json(fh.read())
    except OSError as exc:
        raise CliError(EXIT_USAGE, "io", f"cannot read wordmap {path}: {exc.strerror}")
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "io", f"bad wordmap {path}: {exc}")


def run_train(opts: dict, out=None) -> int:
    out = out or sys.stdout
    data = opts["data"]
    try:
        records = corpus.read_dataset(data)
    except OSError as exc:
        raise CliError(EXIT_USAGE, "io", f"cannot read {exc.filename or data}: {exc.strerror}")
    except corpus.FeatureFormatError as exc:
        raise CliError(EXIT_MODEL, "features", str(exc))
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_USAGE, "io", f"bad dataset {data}: {exc}")
    if not records:
        raise CliError(EXIT_USAGE, "usage", f"dataset {data} is empty")
    wm_path = opts["wordmap"] or os.path.join(os.path.dirname(os.path.abspath(data)), "wordmap.json")
    wm = _read_wordmap(wm_path)
    dims = {rec.grid().dim for rec in records}
    if len(dims) != 1:
        raise CliError(EXIT_MODEL, "features", f"feature grids disagree on dimension: {sorted(dims)}")
    try:
        cfg = decoder.TrainConfig(lambda_ds=opts["lambda_ds"], learning_rate=opts["lr"],
                                  epochs=opts["epochs"], seed=opts["seed"],
                                  grad_clip=opts["clip"] or None)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "usage", str(exc))
    params = decoder.init_params(len(wm), opts["embed"], dims.pop(), opts["hidden"], opts["attn"],
                                 seed=opts["seed"])
    try:
        result = decoder.train(records, wm, params, cfg)
    except decoder.NonFiniteLoss as exc:
        raise CliError(EXIT_DIVERGED, "diverged", str(exc))
    _write(opts["out"], decoder.checkpoint_save(result.params, cfg, wm))
    if opts["loss_log"]:
        rows = ["epoch,mean_loss,cross_entropy,ds_penalty"]
        rows += [f"{s.epoch},{s.mean_loss!r},{s.cross_entropy!r},{s.ds_penalty!r}" for s in result.trace]
        _write(opts["loss_log"], "\n".join(rows) + "\n")
    summary = {
        "command": "train", "seed": cfg.seed, "epochs": cfg.epochs,
        "final_loss": result.trace[-1].mean_loss,
        "token_cross_entropy": decoder.token_cross_entropy(records, wm, result.params),
        "checkpoint": opts["out"],
    }
    print(json.dumps(summary), file=out)
    return 0


def _load_checkpoint(path: str):
    try:
        with open(path, "rb") as fh:
            return decoder.checkpoint_load(fh.read())
    except OSError as exc:
        raise CliError(EXIT_MODEL, "model", f"cannot read checkpoint {path}: {exc.strerror}")
    except decoder.CheckpointError as exc:
        raise CliError(EXIT_MODEL, "model", f"{path}: {exc}")


def _decode_inputs(opts: dict) -> list[tuple[str, str]]:
    inputs = []
    if opts["data"]:
        base = os.path.dirname(os.path.abspath(opts["data"]))
        try:
            with open(opts["data"], encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        obj = json.loads(line)
                        inputs.append((obj["id"], os.path.join(base, obj["features"])))
        except OSError as exc:
            raise CliError(EXIT_MODEL, "features", f"cannot read {opts['data']}: {exc.strerror}")
        except (ValueError, KeyError) as exc:
            raise CliError(EXIT_MODEL, "features", f"bad dataset {opts['data']}: {exc}")
    for path in opts["features"] or []:
        inputs.append((os.path.splitext(os.path.basename(path))[0], path))
    if not inputs:
        raise CliError(EXIT_USAGE, "usage", "give --features or --data")
    return inputs


def run_decode(opts: dict, out=None) -> int:
    out = out or sys.stdout
    params, _, wm = _load_checkpoint(opts["model"])
    inputs = _decode_inputs(opts)
    grids = []
    for item_id, path in inputs:
        try:
            grid = corpus.read_feature_file(path)
        except OSError as exc:
            raise CliError(EXIT_MODEL, "features", f"cannot read feature file {path}: {exc.strerror}")
        except corpus.FeatureFormatError as exc:
            raise CliError(EXIT_MODEL, "features", f"{path}: {exc}")
        if grid.dim != params.dims[2]:
            raise CliError(EXIT_MODEL, "features",
                           f"{path}: feature dim {grid.dim} does not match model dim {params.dims[2]}")
        grids.append((item_id, grid))
    scorer = decoder.DecoderScorer(params)
    cfg = BeamConfig(k=opts["beam"], max_len=opts["max_len"])
    for item_id, grid in grids:
        best, _ = beam_search(scorer, grid, cfg)
        caption = corpus.detokenize(wm.decode_ids(best.tokens))
        line = {"id": item_id, "caption": caption, "log_prob": best.score, "beam": opts["beam"]}
        print(json.dumps(line, ensure_ascii=False), file=out)
    return 0


def read_score_file(path: str) -> list[metrics.ScoringInstance]:
    instances = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_SCORE, "score", f"cannot read {path}: {exc.strerror}")
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                cand, refs = obj["candidate"], obj["refs"]
                if not isinstance(cand, str) or not isinstance(refs, list) or not refs \
                        or not all(isinstance(r, str) for r in refs):
                    raise ValueError("need a string candidate and a non-empty list of string refs")
                obj["id"]
            except (ValueError, KeyError, TypeError) as exc:
                raise CliError(EXIT_SCORE, "score", f"{path} line {lineno}: {exc}")
            instances.append(metrics.ScoringInstance(corpus.tokenize(cand), [corpus.tokenize(r) for r in refs]))
    if not instances:
        raise CliError(EXIT_SCORE, "score", f"{path} has no instances")
    return instances


def format_report(report: dict[str, float], count: int) -> str:
    """JSON object with every score on the x100 scale at 4 decimals."""
    parts = [f'"{key}": {100 * value:.4f}' for key, value in report.items()]
    parts.append(f'"count": {count}')
    return "{" + ", ".join(parts) + "}"


def run_score(opts: dict, out=None) -> int:
    out = out or sys.stdout
    instances = read_score_file(opts["input"])
    print(format_report(metrics.corpus_score(instances), len(instances)), file=out)
    return 0


COMMANDS = {"gen": run_gen, "train": run_train, "decode": run_decode, "score": run_score}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](resolve(args))
    except CliError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {exc.code}: {message}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
