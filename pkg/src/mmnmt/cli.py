"""Command-line entry point: preprocess, train, translate, multisource, score.

``generate-multisource`` is accepted as another name for ``multisource``.

Every option can also come from a flat ``key=value`` file given with
``--config`` (keys are option names with dashes or underscores); explicit
flags win. Each run writes a manifest in the same format, so
``--config <manifest>`` replays it.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .data import DataError, ParallelExample, Vocabulary
from .generator import multisource_file, translate_file
from .metrics import corpus_bleu
from .model import Dims, load_checkpoint
from .tensor import NumericError
from .trainer import PRESETS, TrainConfig, TrainingAborted, init_params, train_loop

log = logging.getLogger("mmnmt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_manifest(path, values: dict) -> None:
    lines = []
    for key in sorted(values):
        v = values[key]
        if v is None:
            continue
        if isinstance(v, (list, tuple)):
            v = ",".join(map(str, v))
        lines.append(f"{key}={v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _add_decode_opts(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True, help="directory holding src.vocab / tgt.vocab")
    p.add_argument("--features", help="region-feature file aligned with the input lines")
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--greedy", action="store_true", help="same as --beam 1")
    p.add_argument("--max-len", type=int, default=80)
    p.add_argument("--output", required=True)
    p.add_argument("--meta", help="write per-line log-prob / UNK / finished flags as TSV")


_CHOICES = {"optimizer": ("adam", "adadelta"), "init": ("xavier", "gaussian")}
_HELP = {"beam": "beam for validation decoding", "clip": "global grad-norm clip, <= 0 disables",
         "max_updates": "stop after this many updates, 0 = no limit"}


def _add_train_config_opts(p):
    """One flag per TrainConfig field; unset flags fall back to the preset."""
    for f in fields(TrainConfig):
        kind = type(f.default)
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       type=_bool if kind is bool else kind, choices=_CHOICES.get(f.name),
                       help=_HELP.get(f.name))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmnmt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="tokenize, filter and build vocabularies")
    p.add_argument("--config")
    p.add_argument("--train-src", required=True)
    p.add_argument("--train-tgt", required=True)
    p.add_argument("--valid-src")
    p.add_argument("--valid-tgt")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--src-cap", type=int, default=D.TASK1_SRC_CAP)
    p.add_argument("--tgt-cap", type=int, default=D.TASK1_TGT_CAP)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--max-ratio", type=float, default=3.0)
    p.add_argument("--no-filter", action="store_true")

    p = sub.add_parser("train", help="train a model on preprocessed data")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("monomodal", "multimodal"), default="monomodal")
    p.add_argument("--preset", choices=sorted(PRESETS), help="defaults to the mode's preset")
    p.add_argument("--train-features")
    p.add_argument("--valid-features")
    p.add_argument("--embed", type=int, default=620)
    p.add_argument("--hidden", type=int, default=1000)
    p.add_argument("--att", type=int, default=1000)
    _add_train_config_opts(p)
    p.add_argument("--plot", action="store_true", help="also render train.png from the log")

    p = sub.add_parser("translate", help="decode one sentence per input line")
    p.add_argument("--config")
    p.add_argument("--input", required=True)
    _add_decode_opts(p)

    p = sub.add_parser("multisource", aliases=["generate-multisource"],
                       help="one description per image from several sources")
    p.add_argument("--config")
    p.add_argument("--input", action="append", required=True,
                   help="aligned source-description file; repeat once per description")
    p.add_argument("--length-norm", action="store_true",
                   help="rank candidates by per-token log-probability")
    _add_decode_opts(p)

    p = sub.add_parser("score", help="corpus BLEU of a hypothesis file")
    p.add_argument("--config")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", action="append", required=True, help="reference file; repeatable")
    p.add_argument("--smooth", action="store_true", help="add-one smoothing of precisions")
    p.add_argument("--ref-len", choices=("shortest", "closest"), default="shortest")
    p.add_argument("--output", help="also write the report (and its manifest) here")
    p.add_argument("--plot", help="render BLEU-n bars to this image file")
    return parser


_BOOL_KEYS = {"no_filter", "greedy", "length_norm", "smooth"}
_LIST_KEYS = {"input", "ref"}
# report-only manifest entries, skipped on replay
_STAT_KEYS = {"train_pairs", "kept", "dropped", "dropped_too_short", "dropped_too_long",
              "dropped_ratio", "src_vocab_size", "tgt_vocab_size", "valid_pairs"}


def _scan(argv: Sequence[str]) -> tuple[Optional[str], Optional[str]]:
    command = next((a for a in argv if a in COMMANDS), None)
    config = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
    return command, config


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command, config = _scan(argv)
    if command is not None and config is not None:
        cfg = read_config(config)
        cfg.pop("command", None)
        sub = parser._subparsers._group_actions[0].choices[command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known - _STAT_KEYS
        if unknown:
            raise ConfigError(f"{config}: unknown keys {sorted(unknown)}")
        defaults = {}
        for k, v in cfg.items():
            if k in _STAT_KEYS:
                continue
            if k in _LIST_KEYS:
                defaults[k] = [x for x in v.split(",") if x]
            elif k in _BOOL_KEYS or (k == "plot" and command == "train"):
                defaults[k] = _bool(v)
            else:
                defaults[k] = v
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        # append actions extend list defaults; explicit flags should replace them
        for k in _LIST_KEYS & set(defaults):
            flagged = _explicit_list(argv, k)
            if flagged:
                setattr(args, k, flagged)
        return args
    return parser.parse_args(argv)


def _explicit_list(argv, key) -> list:
    flag = "--" + key.replace("_", "-")
    out = []
    for i, tok in enumerate(argv):
        if tok == flag and i + 1 < len(argv):
            out.append(argv[i + 1])
        elif tok.startswith(flag + "="):
            out.append(tok.split("=", 1)[1])
    return out


def _manifest_values(args) -> dict:
    vals = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    return vals


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"input file not found: {p}")


def cmd_preprocess(args) -> int:
    _require_files(args.train_src, args.train_tgt, args.valid_src, args.valid_tgt)
    if (args.valid_src is None) != (args.valid_tgt is None):
        raise ConfigError("--valid-src and --valid-tgt go together")
    pairs = D.read_parallel(args.train_src, args.train_tgt)
    if not pairs:
        raise DataError("training corpus is empty")
    kept_idx, drop_short, drop_long, drop_ratio = [], 0, 0, 0
    for i, (s, t) in enumerate(pairs):
        if args.no_filter or D.keep_pair(len(s), len(t), args.min_len, args.max_len, args.max_ratio):
            kept_idx.append(i)
        elif min(len(s), len(t)) < args.min_len:
            drop_short += 1
        elif max(len(s), len(t)) > args.max_len:
            drop_long += 1
        else:
            drop_ratio += 1
    if not kept_idx:
        raise DataError("no training pairs survive filtering")
    kept = [pairs[i] for i in kept_idx]
    src_vocab = D.build_vocab([s for s, _ in kept], args.src_cap)
    tgt_vocab = D.build_vocab([t for _, t in kept], args.tgt_cap)
    valid = D.read_parallel(args.valid_src, args.valid_tgt) if args.valid_src else None
    if valid is not None and not valid:
        raise DataError("validation corpus is empty")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src_vocab.save(out / "src.vocab")
    tgt_vocab.save(out / "tgt.vocab")
    D.write_ids(out / "train.src.ids", [src_vocab.encode(s) for s, _ in kept])
    D.write_ids(out / "train.tgt.ids", [tgt_vocab.encode(t) for _, t in kept])
    (out / "train.kept").write_text("".join(f"{i}\n" for i in kept_idx), encoding="utf-8")
    if valid is not None:
        D.write_ids(out / "valid.src.ids", [src_vocab.encode(s) for s, _ in valid])
        D.write_ids(out / "valid.tgt.ids", [tgt_vocab.encode(t) for _, t in valid])
    stats = {"train_pairs": len(pairs), "kept": len(kept), "dropped": len(pairs) - len(kept),
             "dropped_too_short": drop_short, "dropped_too_long": drop_long,
             "dropped_ratio": drop_ratio, "src_vocab_size": len(src_vocab),
             "tgt_vocab_size": len(tgt_vocab),
             "valid_pairs": len(valid) if valid is not None else 0}
    write_manifest(out / "preprocess.manifest", {"command": "preprocess", **_manifest_values(args), **stats})
    for k, v in stats.items():
        print(f"{k}={v}")
    return EXIT_OK


def _load_split(data_dir: Path, split: str, feats: Optional[np.ndarray], n_regions: Optional[int]):
    src = D.read_ids(data_dir / f"{split}.src.ids")
    tgt = D.read_ids(data_dir / f"{split}.tgt.ids")
    if len(src) != len(tgt):
        raise DataError(f"{split}: {len(src)} source vs {len(tgt)} target lines")
    if feats is not None and feats.shape[0] != len(src):
        raise DataError(f"{split}: {feats.shape[0]} feature sets for {len(src)} pairs")
    return [ParallelExample(s, t, None if feats is None else feats[i]) for i, (s, t) in enumerate(zip(src, tgt))]


def cmd_train(args) -> int:
    data_dir = Path(args.data_dir)
    multimodal = args.mode == "multimodal"
    if multimodal and not args.train_features:
        raise ConfigError("multimodal training needs --train-features")
    has_valid = (data_dir / "valid.src.ids").is_file()
    if multimodal and has_valid and not args.valid_features:
        raise ConfigError("multimodal training with a validation split needs --valid-features")
    _require_files(data_dir / "src.vocab", data_dir / "tgt.vocab", data_dir / "train.src.ids",
                   args.train_features, args.valid_features)

    preset = args.preset or args.mode
    overrides = {k: getattr(args, k) for k in TrainConfig.field_names()
                 if getattr(args, k, None) is not None}
    try:
        config = TrainConfig.preset(preset, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    src_vocab = Vocabulary.load(data_dir / "src.vocab")
    tgt_vocab = Vocabulary.load(data_dir / "tgt.vocab")
    train_feats = valid_feats = None
    img_dim, n_regions = 1, D.N_REGIONS
    if multimodal:
        raw = D.read_features(args.train_features, n_regions=None)
        kept = [int(x) for x in D.read_lines(data_dir / "train.kept")]
        if kept and max(kept) >= raw.shape[0]:
            raise DataError(f"{args.train_features}: {raw.shape[0]} feature sets, corpus needs {max(kept) + 1}")
        train_feats = raw[kept]
        n_regions, img_dim = raw.shape[1], raw.shape[2]
        if has_valid:
            valid_feats = D.read_features(args.valid_features, n_regions=n_regions)
    train_set = _load_split(data_dir, "train", train_feats, n_regions)
    valid_set = _load_split(data_dir, "valid", valid_feats, n_regions) if has_valid else train_set

    dims = Dims(len(src_vocab), len(tgt_vocab), args.embed, args.hidden, args.att, img_dim, n_regions)
    params = init_params(config, dims, multimodal)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    effective = {**_manifest_values(args), **vars(config)}
    write_manifest(out / "train.manifest", effective)
    result = train_loop(config, train_set, valid_set, params, multimodal,
                        log_path=out / "train.log", checkpoint_path=out / "model.ckpt")
    if args.plot:
        from .plotting import plot_training
        plot_training(result.history, out / "train.png")
    print(f"updates={result.state.update} best_update={result.state.best_update} "
          f"best_val_bleu={result.best_bleu:.4f} stopped_early={int(result.stopped_early)}")
    return EXIT_OK


def _load_for_decoding(args):
    _require_files(args.checkpoint, args.features)
    params, _ = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data_dir)
    src_vocab = Vocabulary.load(data_dir / "src.vocab")
    tgt_vocab = Vocabulary.load(data_dir / "tgt.vocab")
    if params.multimodal and not args.features:
        raise ConfigError("this checkpoint is multimodal; pass --features")
    beam = 1 if args.greedy else args.beam
    if beam < 1:
        raise ConfigError("--beam must be >= 1")
    return params, src_vocab, tgt_vocab, beam


def cmd_translate(args) -> int:
    _require_files(args.input)
    params, sv, tv, beam = _load_for_decoding(args)
    translate_file(params, sv, tv, args.input, args.output, args.features, params.multimodal,
                   beam, args.max_len, args.meta)
    write_manifest(str(args.output) + ".manifest", {"command": "translate", **_manifest_values(args)})
    return EXIT_OK


def cmd_multisource(args) -> int:
    _require_files(*args.input)
    params, sv, tv, beam = _load_for_decoding(args)
    multisource_file(params, sv, tv, args.input, args.output, args.features, params.multimodal,
                     beam, args.max_len, args.length_norm, args.meta)
    write_manifest(str(args.output) + ".manifest", {"command": "multisource", **_manifest_values(args)})
    return EXIT_OK


def cmd_score(args) -> int:
    _require_files(args.hyp, *args.ref)
    hyps = [line.split() for line in D.read_lines(args.hyp)]
    ref_cols = [[line.split() for line in D.read_lines(r)] for r in args.ref]
    if any(len(c) != len(hyps) for c in ref_cols):
        raise DataError("reference files are not aligned with the hypothesis file")
    if not hyps:
        raise DataError("hypothesis file is empty")
    report = corpus_bleu(hyps, [list(rs) for rs in zip(*ref_cols)], smooth=args.smooth,
                         ref_len_rule=args.ref_len)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
        write_manifest(str(args.output) + ".manifest", {"command": "score", **_manifest_values(args)})
    if args.plot:
        from .plotting import plot_bleu
        plot_bleu(report, args.plot)
    return EXIT_OK


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "translate": cmd_translate,
            "multisource": cmd_multisource, "generate-multisource": cmd_multisource, "score": cmd_score}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"mmnmt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"mmnmt: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingAborted as exc:
        print(f"mmnmt: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.__cause__, NumericError) else EXIT_DATA
    except (DataError, OSError, ValueError, IndexError) as exc:
        print(f"mmnmt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
