"""Command-line interface.

Subcommands cover the full pipeline: gen-data, convert, train-tokenizer,
encode, decode, train-lm, generate, eval-recon, retrieval-eval,
codebook-stats, sweep.  A JSON config file (sections: data, tokenizer,
quantizer, lm, metrics, seed; unknown keys rejected) carries the
hyperparameters; flags override config values.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.  Failures print one machine-parsable JSON line to stderr.
``MOTIONBOOK_THREADS`` caps BLAS/OpenMP worker threads when set before
numpy is first imported.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_CONFIG_SCHEMA = {
    "data": {"count", "seed", "fps", "length_range", "format", "families",
             "amplitude_range", "frequency_range", "split_ratios"},
    "tokenizer": {"format", "alpha", "channels", "res_blocks", "partition",
                  "recon_weight", "velocity_weight", "window", "batch_size",
                  "epochs", "lr"},
    "quantizer": {"family", "codebook_size", "vq_dim", "rvq_depth",
                  "commitment_weight", "entropy_weight", "diversity_weight",
                  "temperature", "ema_decay", "dead_code_batches"},
    "lm": {"layers", "heads", "width", "context", "lr", "batch_size", "epochs"},
    "metrics": set(),
    "seed": None,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config(path):
    from .exceptions import InvalidConfig

    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{path}: config must be a JSON object")
    for section, value in doc.items():
        if section not in _CONFIG_SCHEMA:
            raise InvalidConfig(f"{path}: unknown config section {section!r}")
        allowed = _CONFIG_SCHEMA[section]
        if allowed is None:
            if not isinstance(value, int):
                raise InvalidConfig(f"{path}: seed must be an integer")
            continue
        if not isinstance(value, dict):
            raise InvalidConfig(f"{path}: section {section!r} must be an object")
        for key in value:
            if key not in allowed:
                raise InvalidConfig(f"{path}: unknown key {section}.{key}")
    return doc


def _seed_of(args, config, default=0):
    if getattr(args, "seed", None) is not None:
        return args.seed
    return config.get("seed", default)


def _tokenizer_kwargs(config):
    kwargs = {}
    kwargs.update(config.get("tokenizer", {}))
    kwargs.update(config.get("quantizer", {}))
    for key in ("channels", "length_range"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return kwargs


def _require(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} {path} does not exist")
    return Path(path)


def _emit(doc, out=None):
    text = json.dumps(doc, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text)
    print(text)


# -- subcommand implementations ---------------------------------------------------

def _cmd_gen_data(args):
    from .data import SyntheticConfig, gen_synthetic

    config = _load_config(args.config)
    kwargs = dict(config.get("data", {}))
    for key in ("length_range", "families", "amplitude_range", "frequency_range",
                "split_ratios"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    if args.count is not None:
        kwargs["count"] = args.count
    kwargs["seed"] = _seed_of(args, config, kwargs.get("seed", 0))
    cfg = SyntheticConfig(**kwargs)
    entries = gen_synthetic(cfg, args.out)
    splits = {}
    for e in entries:
        splits[e.split] = splits.get(e.split, 0) + 1
    _emit({"count": len(entries), "out": str(args.out), "splits": splits})
    return 0


def _cmd_convert(args):
    from .data import read_motion, write_motion
    from .features import decode_format, encode_format, normalize_format

    src = read_motion(_require(args.input, "input file"))
    target = normalize_format(args.to)
    initial_xz = tuple(float(v) for v in args.initial_xz.split(","))
    stream = decode_format(src, initial_xz=initial_xz)
    out = encode_format(stream, target)
    write_motion(args.out, out)
    _emit({"input": str(args.input), "out": str(args.out), "format": target,
           "frames": out.frame_count})
    return 0


def _split_sequences(corpus, split):
    from .data import load_corpus

    _, train = load_corpus(corpus, "train" if split is None else split)
    return train


def _cmd_train_tokenizer(args):
    from .data import load_corpus
    from .exceptions import EmptyManifest
    from .tokenizer import MotionTokenizer

    config = _load_config(args.config)
    kwargs = _tokenizer_kwargs(config)
    kwargs["seed"] = _seed_of(args, config, kwargs.get("seed", 0))
    if args.epochs is not None:
        kwargs["epochs"] = args.epochs
    corpus = _require(args.corpus, "corpus")
    _, train = load_corpus(corpus, "train")
    try:
        _, val = load_corpus(corpus, "val")
    except EmptyManifest:
        val = []
    tok = MotionTokenizer(**kwargs)
    tok.fit(train, val)
    tok.save(args.out)
    report_path = str(args.out) + "_report.csv"
    Path(report_path).write_text(tok.report_csv())
    last = tok.report_[-1]
    _emit({"checkpoint": str(args.out), "report": report_path,
           "epochs": len(tok.report_), "final": {k: last[k] for k in
           ("recon", "velocity", "utilization", "perplexity", "val_mpjpe")}})
    return 0


def _cmd_encode(args):
    from .data import load_corpus
    from .tokenizer import MotionTokenizer, write_tokens

    tok = MotionTokenizer.load(_require(args.tokenizer, "tokenizer checkpoint"))
    entries, sequences = load_corpus(_require(args.corpus, "corpus"), args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for entry, seq in zip(entries, sequences):
        grid = tok.encode_grid(seq)
        name = Path(entry.path).stem + ".motk"
        write_tokens(out_dir / name, grid, tok.codebook_size)
        manifest.append({"caption": entry.caption, "motion_token_file": name})
    (out_dir / "lm_corpus.json").write_text(json.dumps(manifest, indent=1))
    _emit({"out": str(out_dir), "count": len(manifest),
           "lm_corpus": str(out_dir / "lm_corpus.json")})
    return 0


def _cmd_decode(args):
    from .data import write_motion
    from .tokenizer import MotionTokenizer, read_tokens
    from .exceptions import VocabMismatch

    tok = MotionTokenizer.load(_require(args.tokenizer, "tokenizer checkpoint"))
    src = _require(args.tokens, "token input")
    targets = sorted(src.glob("*.motk")) if src.is_dir() else [src]
    out = Path(args.out)
    if src.is_dir():
        out.mkdir(parents=True, exist_ok=True)
    decoded = []
    for path in targets:
        codes, k = read_tokens(path)
        if k != tok.codebook_size:
            raise VocabMismatch(f"{path}: token file K={k}, tokenizer K={tok.codebook_size}")
        seq = tok.inverse_transform(codes)
        dest = (out / (path.stem + ".motb")) if src.is_dir() else out
        write_motion(dest, seq)
        decoded.append({"tokens": str(path), "out": str(dest), "frames": seq.frame_count})
    _emit({"decoded": decoded})
    return 0


def _load_lm_corpus(path, tokenizer_k):
    from .exceptions import EmptyManifest, VocabMismatch
    from .tokenizer import read_tokens

    path = _require(path, "LM corpus")
    doc = json.loads(path.read_text())
    if not doc:
        raise EmptyManifest(f"{path}: empty LM corpus")
    base = path.parent
    items = []
    for row in doc:
        codes, k = read_tokens(base / row["motion_token_file"])
        if tokenizer_k is not None and k != tokenizer_k:
            raise VocabMismatch(f"{row['motion_token_file']}: K={k} != {tokenizer_k}")
        items.append((row["caption"], codes.reshape(-1), k))
    return items


def _cmd_train_lm(args):
    from .lm import MotionLanguageModel, apply_template, build_example, load_templates

    config = _load_config(args.config)
    kwargs = dict(config.get("lm", {}))
    seed = _seed_of(args, config, kwargs.get("seed", 0))
    kwargs["seed"] = seed
    if args.epochs is not None:
        kwargs["epochs"] = args.epochs
    items = _load_lm_corpus(args.corpus, None)
    k = items[0][2]
    if args.init:
        lm = MotionLanguageModel.load(args.init)
    else:
        kwargs.setdefault("motion_codes", k)
        lm = MotionLanguageModel(**kwargs)
    rng_templates = __import__("numpy").random.default_rng(seed + 17)
    examples = []
    templates = load_templates(args.templates) if args.stage == "instruct" else None
    for caption, codes, _ in items:
        if templates is not None:
            caption = apply_template(
                templates[int(rng_templates.integers(len(templates)))], caption)
        examples.append(build_example(lm.vocab, caption, codes))
    lm.fit(examples)
    lm.save(args.out)
    _emit({"checkpoint": str(args.out), "examples": len(examples),
           "stage": args.stage, "final_loss": lm.loss_curve_[-1]})
    return 0


def _cmd_generate(args):
    import numpy as np

    from .exceptions import VocabMismatch
    from .lm import MotionLanguageModel
    from .tokenizer import MotionTokenizer, write_tokens

    lm = MotionLanguageModel.load(_require(args.lm, "LM checkpoint"))
    tok = MotionTokenizer.load(_require(args.tokenizer, "tokenizer checkpoint"))
    if lm.motion_codes != tok.codebook_size:
        raise VocabMismatch(f"LM K={lm.motion_codes}, tokenizer K={tok.codebook_size}")
    prompts = list(args.desc or [])
    if args.captions_file:
        text = _require(args.captions_file, "captions file").read_text()
        prompts.extend(line.strip() for line in text.splitlines() if line.strip())
    if not prompts:
        raise _UsageError("need at least one --desc or a --captions-file")
    out = Path(args.out)
    single = len(prompts) == 1 and not out.is_dir() and out.suffix == ".motk"
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    p = tok.parts_per_step_
    written = []
    for i, desc in enumerate(prompts):
        codes = lm.generate(desc, temperature=args.temperature, top_k=args.top_k,
                            max_len=args.max_len, seed=seed + i)
        # pad/truncate to a whole number of timesteps for detokenization
        if codes.size < p:
            fill = codes[-1] if codes.size else 0
            codes = np.concatenate([codes, np.full(p - codes.size, fill, dtype=np.int64)])
        codes = codes[: (codes.size // p) * p].reshape(-1, p)
        dest = out if single else out / f"gen_{i:05d}.motk"
        write_tokens(dest, codes, tok.codebook_size)
        written.append({"desc": desc, "out": str(dest), "tokens": int(codes.size)})
    _emit({"generated": written})
    return 0


def _pooled(sequences):
    import numpy as np

    from .metrics import pooled_feature_embedding

    return np.stack([pooled_feature_embedding(m.data) for m in sequences])


def _cmd_eval_recon(args):
    import numpy as np

    from .data import load_corpus, read_motion
    from .metrics import fid, fit_gaussian, mpjpe
    from .features import to_joint_positions
    from .tokenizer import MotionTokenizer

    tok = MotionTokenizer.load(_require(args.tokenizer, "tokenizer checkpoint"))
    _, reference = load_corpus(_require(args.corpus, "corpus"), args.split)
    if args.generated:
        gen_dir = _require(args.generated, "generated directory")
        generated = [read_motion(p) for p in sorted(gen_dir.glob("*.motb"))]
        if not generated:
            raise FileNotFoundError(f"no .motb files in {gen_dir}")
        score = fid(fit_gaussian(_pooled(generated)), fit_gaussian(_pooled(reference)))
        _emit({"fid": score, "count_generated": len(generated),
               "count_reference": len(reference)}, args.out)
        return 0
    errors = []
    recons = []
    for seq in reference:
        recon = tok.reconstruct(seq)
        clip = seq.data[: recon.frame_count]
        from .features import MotionSequence
        clipped = MotionSequence(format=seq.format, fps=seq.fps, data=clip)
        errors.append(mpjpe(to_joint_positions(recon), to_joint_positions(clipped)))
        recons.append(recon)
    score = fid(fit_gaussian(_pooled(recons)), fit_gaussian(_pooled(reference)))
    _emit({"mpjpe_mm": float(np.mean(errors)), "fid": score,
           "count": len(reference)}, args.out)
    return 0


def _cmd_retrieval_eval(args):
    from .metrics import batch_embeddings, read_embeddings, retrieval_metrics

    motion = read_embeddings(_require(args.motion, "motion embeddings"))
    text = read_embeddings(_require(args.text, "text embeddings"))
    result = retrieval_metrics(batch_embeddings(motion, text))
    _emit(result, args.out)
    return 0


def _cmd_codebook_stats(args):
    from .data import load_corpus
    from .quantizers import codebook_stats
    from .tokenizer import MotionTokenizer

    tok = MotionTokenizer.load(_require(args.tokenizer, "tokenizer checkpoint"))
    _, sequences = load_corpus(_require(args.corpus, "corpus"), args.split)
    hist = tok.corpus_usage(sequences)
    lines = ["code_index,count"] + [f"{i},{int(c)}" for i, c in enumerate(hist)]
    Path(args.out).write_text("\n".join(lines) + "\n")
    stats = codebook_stats(hist)
    _emit({"histogram": str(args.out), **stats})
    return 0


def _cmd_sweep(args):
    from .data import load_corpus
    from .exceptions import EmptyManifest
    from .tokenizer import sweep_csv, utilization_sweep

    config = _load_config(args.config)
    kwargs = _tokenizer_kwargs(config)
    kwargs.pop("family", None)
    kwargs.pop("codebook_size", None)
    seed = _seed_of(args, config, 0)
    if args.budget_epochs is not None:
        kwargs["epochs"] = args.budget_epochs
    corpus = _require(args.corpus, "corpus")
    _, train = load_corpus(corpus, "train")
    try:
        _, val = load_corpus(corpus, "val")
    except EmptyManifest:
        val = []
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    k_list = [int(v) for v in args.k_list.split(",")]
    rows = utilization_sweep(train, val, families, k_list, seed=seed, **kwargs)
    Path(args.out).write_text(sweep_csv(rows))
    _emit({"out": str(args.out), "rows": rows})
    return 0


# -- parser ----------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="motionbook",
                     description="Motion features, tokenizers, and a toy motion LM.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        return p

    p = add("gen-data", _cmd_gen_data, "generate a synthetic motion corpus")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--count", type=int, default=None, help="override sample count")

    p = add("convert", _cmd_convert, "convert a MOTB file between feature formats")
    p.add_argument("--input", required=True, help="input .motb file")
    p.add_argument("--to", required=True, help="target format name")
    p.add_argument("--out", required=True, help="output .motb file")
    p.add_argument("--initial-xz", default="0,0", help="root XZ start for decoding (x,z)")

    p = add("train-tokenizer", _cmd_train_tokenizer, "train a motion tokenizer")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest")
    p.add_argument("--out", required=True, help="checkpoint prefix")
    p.add_argument("--epochs", type=int, default=None, help="override training epochs")

    p = add("encode", _cmd_encode, "tokenize a corpus into MOTK files")
    p.add_argument("--tokenizer", required=True, help="tokenizer checkpoint prefix")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest")
    p.add_argument("--split", default=None, help="restrict to one split")
    p.add_argument("--out", required=True, help="output directory")

    p = add("decode", _cmd_decode, "decode MOTK tokens back to MOTB motion")
    p.add_argument("--tokenizer", required=True, help="tokenizer checkpoint prefix")
    p.add_argument("--tokens", required=True, help=".motk file or directory")
    p.add_argument("--out", required=True, help="output .motb file or directory")

    p = add("train-lm", _cmd_train_lm, "train the motion language model")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--corpus", required=True, help="lm_corpus.json from encode")
    p.add_argument("--out", required=True, help="checkpoint prefix")
    p.add_argument("--init", default=None, help="continue from this checkpoint")
    p.add_argument("--stage", choices=("pretrain", "instruct"), default="pretrain")
    p.add_argument("--templates", default=None, help="instruction templates file")
    p.add_argument("--epochs", type=int, default=None, help="override training epochs")

    p = add("generate", _cmd_generate, "generate motion tokens from a description")
    p.add_argument("--lm", required=True, help="LM checkpoint prefix")
    p.add_argument("--tokenizer", required=True, help="tokenizer checkpoint prefix")
    p.add_argument("--desc", action="append", help="text prompt (repeatable)")
    p.add_argument("--captions-file", default=None, help="file with one prompt per line")
    p.add_argument("--out", required=True, help=".motk file (single prompt) or directory")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--max-len", type=int, default=512)

    p = add("eval-recon", _cmd_eval_recon, "reconstruction or generated-set metrics")
    p.add_argument("--tokenizer", required=True, help="tokenizer checkpoint prefix")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest")
    p.add_argument("--split", default="test", help="reference split")
    p.add_argument("--generated", default=None, help="directory of generated .motb files")
    p.add_argument("--out", default=None, help="write the JSON report here too")

    p = add("retrieval-eval", _cmd_retrieval_eval, "R-precision/MMDist from MEMB files")
    p.add_argument("--motion", required=True, help="motion embeddings (.memb)")
    p.add_argument("--text", required=True, help="text embeddings (.memb)")
    p.add_argument("--out", default=None, help="write the JSON report here too")

    p = add("codebook-stats", _cmd_codebook_stats, "usage histogram over a corpus")
    p.add_argument("--tokenizer", required=True, help="tokenizer checkpoint prefix")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest")
    p.add_argument("--split", default="train", help="split to encode")
    p.add_argument("--out", required=True, help="output histogram CSV")

    p = add("sweep", _cmd_sweep, "codebook-size utilization sweep")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--families", default="2d-lfq,1d-vq", help="comma-separated families")
    p.add_argument("--k-list", default="256,1024,4096,16384", help="codebook sizes")
    p.add_argument("--budget-epochs", type=int, default=None, help="epochs per run")

    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit": code}) + "\n")
    return code


def main(argv=None) -> int:
    threads = os.environ.get("MOTIONBOOK_THREADS")
    if threads and "numpy" not in sys.modules:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as exc:
        return _fail("UsageError", str(exc), 1)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - single mapping point for exit codes
        from . import exceptions as E

        if isinstance(exc, E.InvalidConfig):
            return _fail(type(exc).__name__, str(exc), 1)
        if isinstance(exc, E.NumericalError):
            return _fail(type(exc).__name__, str(exc), 3)
        if isinstance(exc, (E.MotionBookError, FileNotFoundError, OSError, KeyError,
                            json.JSONDecodeError)):
            return _fail(type(exc).__name__, str(exc), 2)
        raise


if __name__ == "__main__":
    sys.exit(main())
