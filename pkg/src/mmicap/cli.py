"""Command-line pipeline: gen-data, build-vocab, train-lm, train, decode, evaluate, sweep, filter-check.

Configuration is resolved as defaults < config file (flat YAML mapping) <
command-line flags. ``--print-config`` prints the resolved configuration and
exits.
"""

import argparse
import json
import sys
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import corpus, decoding, metrics, synth, training
from .nounphrase import validate_sentence


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    # paths; empty means "inside data_dir"
    data_dir: str = "data"
    vocab_path: str = ""
    model_path: str = ""
    lm_path: str = ""
    decoded_path: str = ""
    report_path: str = ""
    sweep_path: str = ""
    log_path: str = ""
    init_from: str = ""
    # synthetic data
    grid_h: int = 7
    grid_w: int = 14
    depth: int = 32
    n_train: int = 2000
    n_eval: int = 100
    sentences_per_image: int = 5
    refs_per_eval_image: int = 15
    generic_rate: float = 0.3
    feedback_type: str = "GOOD"
    # vocabulary
    min_count: int = 5
    # training
    model_kind: str = "topdown"
    learning_rate: float = 1e-3
    epochs: int = 30
    lm_epochs: int = 10
    images_per_batch: int = 32
    batch_sentences_per_image: int = 3
    dropout: float = 0.5
    freeze_encoder_epochs: int = 10
    eval_every: int = 5
    hidden: int = 64
    embed: int = 64
    feat: int = 64
    att: int = 64
    # decoding
    beam_width: int = 10
    beta: float = 0.4
    beta_zero_after: int = 0  # 0 -> per feedback type
    max_length: int = 24
    filter_enabled: bool = True
    use_mmi: bool = True
    split: str = "eval"
    # sweep
    beta_grid: str = "0,0.2,0.4,0.6"
    beam_grid: str = "1,3,10"

    def path(self, key, default_name):
        value = getattr(self, key)
        return Path(value) if value else Path(self.data_dir) / default_name


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value):
    kind = _FIELD_TYPES[key]
    if isinstance(value, (dict, list)):
        raise ConfigError(f"config key {key!r} must be a scalar (flat document)")
    try:
        if kind == "bool" or kind is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind == "int" or kind is int:
            return int(value)
        if kind == "float" or kind is float:
            return float(value)
        return "" if value is None else str(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {kind}") from None


def load_config(path=None, overrides=None):
    """Resolve defaults < file < overrides; unknown keys are rejected."""
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: malformed config ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: config must be a key-value mapping")
        for key, value in doc.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{p}: unknown config key {key!r}")
            values[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    cfg = replace(RunConfig(), **values)
    if cfg.feedback_type not in corpus.FEEDBACK_TYPES:
        raise ConfigError(f"feedback_type must be one of {corpus.FEEDBACK_TYPES}")
    if cfg.model_kind not in ("topdown", "fc"):
        raise ConfigError("model_kind must be 'topdown' or 'fc'")
    if cfg.split not in ("eval", "train"):
        raise ConfigError("split must be 'eval' or 'train'")
    return cfg


def derive_seed(seed, subsystem):
    """Deterministic per-subsystem seed from the single top-level seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(subsystem.encode())])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _synth_config(cfg):
    return synth.SynthConfig(
        grid_h=cfg.grid_h, grid_w=cfg.grid_w, depth=cfg.depth, n_train=cfg.n_train,
        n_eval=cfg.n_eval, sentences_per_image=cfg.sentences_per_image,
        refs_per_eval_image=cfg.refs_per_eval_image, generic_rate=cfg.generic_rate,
        feedback_type=cfg.feedback_type)


def _train_config(cfg, subsystem, epochs):
    return training.TrainConfig(
        learning_rate=cfg.learning_rate, epochs=epochs, images_per_batch=cfg.images_per_batch,
        sentences_per_image=cfg.batch_sentences_per_image, dropout=cfg.dropout,
        freeze_encoder_epochs=cfg.freeze_encoder_epochs, eval_every=cfg.eval_every,
        hidden=cfg.hidden, embed=cfg.embed, feat=cfg.feat, att=cfg.att,
        seed=derive_seed(cfg.seed, subsystem))


def _decoding_config(cfg):
    return decoding.DecodingConfig(
        beam_width=cfg.beam_width, beta=cfg.beta,
        beta_zero_after=cfg.beta_zero_after or None, max_length=cfg.max_length,
        filter_enabled=cfg.filter_enabled, feedback_type=cfg.feedback_type,
        use_mmi=cfg.use_mmi)


def _load_split(cfg, split):
    return corpus.load_corpus(_require(Path(cfg.data_dir) / f"{split}.jsonl", f"{split} corpus"))


def _load_vocab(cfg):
    return corpus.Vocabulary.load(_require(cfg.path("vocab_path", "vocab.json"), "vocabulary"))


def _load_models(cfg, vocab, need_lm):
    cap = training.load_checkpoint(_require(cfg.path("model_path", "model.ckpt"), "model checkpoint"),
                                   vocab_hash=vocab.hash())
    lm = None
    lm_path = cfg.path("lm_path", "lm.ckpt")
    if need_lm or lm_path.exists():
        lm = training.load_checkpoint(_require(lm_path, "language model checkpoint"),
                                      vocab_hash=vocab.hash())
    return cap, lm


def _grid(text, cast):
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg, args):
    out = Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = _synth_config(cfg)
    train, evals, lexicon = synth.generate_synthetic_corpus(sc, seed=derive_seed(cfg.seed, "data"))
    shape = (sc.grid_h, sc.grid_w, sc.depth)
    corpus.save_corpus(train, out / "train.jsonl", grid_shape=shape)
    corpus.save_corpus(evals, out / "eval.jsonl", grid_shape=shape)
    (out / "lexicon.json").write_text(json.dumps(lexicon, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(train)} training and {len(evals)} evaluation images to {out}")


def cmd_build_vocab(cfg, args):
    train = _load_split(cfg, "train")
    lexicon = json.loads(_require(Path(cfg.data_dir) / "lexicon.json", "lexicon").read_text())
    vocab = corpus.build_vocabulary([s for ex in train for s in ex.sentences], lexicon,
                                    min_count_exclusive=cfg.min_count)
    path = cfg.path("vocab_path", "vocab.json")
    vocab.save(path)
    print(f"vocabulary of {len(vocab)} tokens -> {path}")


def cmd_train_lm(cfg, args):
    vocab = _load_vocab(cfg)
    train = _load_split(cfg, "train")
    tc = _train_config(cfg, "lm", cfg.lm_epochs)
    best, rows = training.train_lm([s for ex in train for s in ex.sentences], vocab, tc,
                                   log=lambda r: print(json.dumps(r), file=sys.stderr))
    path = cfg.path("lm_path", "lm.ckpt")
    training.save_checkpoint(best, path)
    print(f"language model (epoch {best.epoch}, held-out perplexity {best.metric:.4f}) -> {path}")


def cmd_train(cfg, args):
    vocab = _load_vocab(cfg)
    train = _load_split(cfg, "train")
    evals = _load_split(cfg, "eval")
    init = None
    if cfg.init_from:
        init = training.load_checkpoint(_require(cfg.init_from, "transfer checkpoint"))
    tc = _train_config(cfg, "captioner", cfg.epochs)
    best, rows = training.train_captioner(
        train, evals, vocab, tc, kind=cfg.model_kind, init=init, threads=cfg.threads,
        log=lambda r: print(json.dumps(r), file=sys.stderr),
        allow_vocab_mismatch=getattr(args, "transfer_any_vocab", False))
    path = cfg.path("model_path", "model.ckpt")
    training.save_checkpoint(best, path)
    training.write_epoch_log(rows, cfg.path("log_path", "epoch_log.csv"))
    print(f"{cfg.model_kind} captioner (epoch {best.epoch}, CIDEr-D {best.metric:.4f}) -> {path}")


def cmd_decode(cfg, args):
    vocab = _load_vocab(cfg)
    dc = _decoding_config(cfg)
    cap, lm = _load_models(cfg, vocab, need_lm=dc.effective_beta > 0)
    examples = _load_split(cfg, cfg.split)
    results = decoding.decode_corpus(examples, cap.model, lm.model if lm else None, dc, vocab,
                                     threads=cfg.threads)
    path = cfg.path("decoded_path", "decoded.jsonl")
    decoding.write_decoded(results, path)
    print(f"decoded {len(results)} images -> {path}")


def cmd_evaluate(cfg, args):
    vocab = _load_vocab(cfg)
    evals = _load_split(cfg, "eval")
    if args.fs_baseline:
        report = metrics.fs_baseline(evals, vocab, seed=derive_seed(cfg.seed, "fs"))
    else:
        decoded = decoding.read_decoded(_require(cfg.path("decoded_path", "decoded.jsonl"),
                                                 "decoded sentences"))
        by_id = {i: toks for i, toks, _ in decoded}
        missing = [ex.image_id for ex in evals if ex.image_id not in by_id]
        if missing:
            raise metrics.MetricsError(f"decoded file lacks image {missing[0]}")
        report = metrics.evaluate([by_id[ex.image_id] for ex in evals],
                                  [ex.sentences for ex in evals], vocab)
    path = cfg.path("report_path", "report.json")
    Path(path).write_text(report.to_json() + "\n")
    print(report.to_json())


def cmd_sweep(cfg, args):
    vocab = _load_vocab(cfg)
    betas, beams = _grid(cfg.beta_grid, float), _grid(cfg.beam_grid, int)
    cap, lm = _load_models(cfg, vocab, need_lm=any(b > 0 for b in betas) and cfg.use_mmi)
    evals = _load_split(cfg, "eval")
    rows = metrics.sweep(cap.model, lm.model if lm else None, evals, vocab, betas, beams,
                         _decoding_config(cfg), threads=cfg.threads)
    path = cfg.path("sweep_path", "sweep.csv")
    metrics.write_sweep_csv(rows, path)
    print(f"{len(rows)} sweep cells -> {path}")


def cmd_filter_check(cfg, args):
    if cfg.vocab_path and Path(cfg.vocab_path).exists():
        lexicon = corpus.Vocabulary.load(cfg.vocab_path).pos
    else:
        lexicon = json.loads(_require(Path(cfg.data_dir) / "lexicon.json", "lexicon").read_text())
    source = sys.stdin if args.input == "-" else open(_require(args.input, "input file"))
    out = sys.stdout if not args.output else open(args.output, "w")
    try:
        for line in source:
            line = line.strip()
            if not line:
                continue
            tokens = corpus.preprocess_sentence(line)
            v = validate_sentence(tokens, cfg.feedback_type, lexicon)
            verdict = "valid" if v.valid else "invalid"
            out.write(f"{' '.join(tokens)}\t{cfg.feedback_type}\t{verdict}\t{v.violated_rule}\n")
    finally:
        if source is not sys.stdin:
            source.close()
        if out is not sys.stdout:
            out.close()


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic corpus",
                 ["data_dir", "grid_h", "grid_w", "depth", "n_train", "n_eval",
                  "sentences_per_image", "refs_per_eval_image", "generic_rate", "feedback_type"]),
    "build-vocab": (cmd_build_vocab, "build the vocabulary from the training split",
                    ["data_dir", "vocab_path", "min_count"]),
    "train-lm": (cmd_train_lm, "train the auxiliary language model",
                 ["data_dir", "vocab_path", "lm_path", "learning_rate", "lm_epochs",
                  "images_per_batch", "batch_sentences_per_image", "dropout", "hidden", "embed"]),
    "train": (cmd_train, "train a captioner (top-down attention or FC baseline)",
              ["data_dir", "vocab_path", "model_path", "log_path", "init_from", "model_kind",
               "learning_rate", "epochs", "images_per_batch", "batch_sentences_per_image",
               "dropout", "freeze_encoder_epochs", "eval_every", "hidden", "embed", "feat", "att"]),
    "decode": (cmd_decode, "decode a split with beam search",
               ["data_dir", "vocab_path", "model_path", "lm_path", "decoded_path", "split",
                "beam_width", "beta", "beta_zero_after", "max_length", "filter_enabled", "use_mmi",
                "feedback_type"]),
    "evaluate": (cmd_evaluate, "score decoded sentences against the eval references",
                 ["data_dir", "vocab_path", "decoded_path", "report_path"]),
    "sweep": (cmd_sweep, "decode and score over a beta x beam grid",
              ["data_dir", "vocab_path", "model_path", "lm_path", "sweep_path", "beta_grid",
               "beam_grid", "max_length", "filter_enabled", "use_mmi", "feedback_type",
               "beta_zero_after"]),
    "filter-check": (cmd_filter_check, "classify sentences with the noun-phrase rules",
                     ["data_dir", "vocab_path", "feedback_type"]),
}


def _flag_type(key):
    kind = _FIELD_TYPES[key]
    if kind in ("bool", bool):
        return str
    return {"int": int, "float": float}.get(kind, kind if callable(kind) else str)


def build_parser():
    parser = argparse.ArgumentParser(prog="mmicap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = RunConfig()
    for name, (_, helptext, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                       help=f"top-level seed (default {defaults.seed})")
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                       help="worker threads for decoding (default 1)")
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved configuration and exit")
        for key in keys:
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, type=_flag_type(key), default=argparse.SUPPRESS,
                           help=f"(default {getattr(defaults, key)!r})")
        if name == "evaluate":
            p.add_argument("--fs-baseline", action="store_true",
                           help="score the leave-one-out reference baseline instead")
        if name == "train":
            p.add_argument("--transfer-any-vocab", action="store_true",
                           help="allow --init-from a checkpoint with another vocabulary")
        if name == "filter-check":
            p.add_argument("--input", default="-", help="sentences, one per line ('-' = stdin)")
            p.add_argument("--output", default="", help="TSV output (default stdout)")
    return parser


_NON_CONFIG = {"command", "config", "print_config", "fs_baseline", "input", "output",
               "transfer_any_vocab"}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    try:
        cfg = load_config(args.config, overrides)
        if args.print_config:
            print(json.dumps(asdict(cfg), indent=1, sort_keys=True))
            return 0
        COMMANDS[args.command][0](cfg, args)
    except (ConfigError, FileNotFoundError, corpus.CorpusError, training.TrainingError,
            decoding.DecodingError, metrics.MetricsError, synth.SynthConfigError) as exc:
        print(f"mmicap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
