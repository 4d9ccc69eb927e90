"""``nmprune`` command line: pretrain, prune, learn, transfer, eval, pack, unpack, bench.

Settings come from built-in defaults, then ``--config`` (key=value text),
then explicit flags. Every run writes ``manifest.txt`` to ``--out``; feeding
it back through ``--config`` repeats the run.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure
(including divergence).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .coding import FormatError, decode_masks, encode_dense_masks, encode_masks, payload_bits, read_mask_file
from .data import Corpus, batch_iterator, sequential_batches, synthetic_text
from .masks import PatternError, parse_pattern
from .models import ToyModelSpec, build_model, load_model, pretrain_dense, save_model
from .optim import DivergenceError
from .pruners import calibrate, import_external_masks, prune_model
from .trainer import (ConfigError, TrainConfig, evaluate_loss, format_config, format_sensitivity, layer_sensitivity,
                      parse_config_text, resolve_skip, train_masks, transfer_masks)

log = logging.getLogger("nmprune")

COMMANDS = ("pretrain", "prune", "learn", "transfer", "eval", "pack", "unpack", "bench")

# settings that are not mask-training hyperparameters
RUN_DEFAULTS = {
    "model": "",
    "corpus": "",
    "corpus_bytes": 200_000,
    "domain": "A",
    "val_fraction": 0.1,
    "kind": "transformer_lm",
    "embed_dim": 32,
    "num_layers": 2,
    "num_heads": 4,
    "context_length": 32,
    "mlp_ratio": 4,
    "pretrain_steps": 1500,
    "pretrain_lr": 3e-3,
    "eval_batches": 16,
    "method": "magnitude",
    "calib_samples": 128,
    "prior": "none",
    "masks": "",
    "skip_layers": "",
    "sizes": "1024,2048",
    "repeats": 3,
    "bench_batch": 256,
    "dtype": "float32",
}
TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}
META_KEYS = ("command", "version")


class CliError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--steps", type=int, help="training steps (pretrain steps for 'pretrain')")
    common.add_argument("--prior", help="none | magnitude | wanda | <mask file>")
    common.add_argument("--alpha", type=float, help="prior strength")
    common.add_argument("--lambda", dest="lambda_reg", type=float, help="weight regularization strength")
    common.add_argument("--skip-layers", dest="skip_layers",
                        help="learn: layers kept dense; eval: none|all|first:k|last:k|sweep|names")
    common.add_argument("--pattern", help="n:m sparsity pattern")
    common.add_argument("--model", help="model file written by 'pretrain'")
    common.add_argument("--corpus", help="training text (default: built-in synthetic corpus)")
    common.add_argument("--masks", help="mask file (archive or dense bit file)")
    common.add_argument("--method", choices=["magnitude", "wanda"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="nmprune", description="Learnable N:M sparsity masks for small models.")
    p.add_argument("--version", action="version", version=f"nmprune {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "pretrain": "build and pretrain the dense toy model",
        "prune": "one-shot magnitude / activation-weighted masks",
        "learn": "learn masks with Gumbel-softmax sampling",
        "transfer": "continue learning from base masks on a new corpus",
        "eval": "dense vs masked validation perplexity",
        "pack": "encode a dense bit mask file into a compressed archive",
        "unpack": "decode a compressed archive into a dense bit mask file",
        "bench": "dense vs 2:4 kernel timing and footprint",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into one validated flat dict."""
    settings = {**RUN_DEFAULTS, **TRAIN_DEFAULTS}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config: file not found: {path}")
        for key, raw in parse_config_text(path.read_text()).items():
            if key in META_KEYS:
                continue
            if key not in settings:
                raise CliError(f"{key}: unknown configuration key (in {path})")
            settings[key] = _coerce(key, raw, settings[key])
    flags = {
        "seed": args.seed,
        "lambda_reg": args.lambda_reg,
        "prior_strength": args.alpha,
        "prior": args.prior,
        "skip_layers": args.skip_layers,
        "model": args.model,
        "corpus": args.corpus,
        "masks": args.masks,
        "method": args.method,
    }
    if args.steps is not None:
        flags["pretrain_steps" if args.command == "pretrain" else "steps"] = args.steps
    if args.pattern is not None:
        try:
            flags["n"], flags["m"] = parse_pattern(args.pattern)
        except PatternError as e:
            raise CliError(f"pattern: {e}") from None
    settings.update({k: v for k, v in flags.items() if v is not None})
    if args.command == "learn" or args.command == "transfer":
        settings["layers_to_skip"] = _split(settings["skip_layers"]) or tuple(settings["layers_to_skip"])
    for key in ("corpus_bytes", "pretrain_steps", "eval_batches", "calib_samples", "repeats", "bench_batch"):
        if settings[key] <= 0:
            raise CliError(f"{key}: must be positive")
    if settings["dtype"] not in ("float32", "float64"):
        raise CliError("dtype: must be float32 or float64")
    if settings["method"] not in ("magnitude", "wanda"):
        raise CliError(f"method: unknown one-shot method {settings['method']!r}")
    return settings


def _coerce(key, raw, default):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(float(raw)) if float(raw).is_integer() else int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return _split(raw)
    except ValueError:
        raise CliError(f"{key}: cannot parse {raw!r}") from None
    return raw


def _split(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(text)
    return tuple(p.strip() for p in str(text).split(",") if p.strip())


def train_config(settings: dict) -> TrainConfig:
    return TrainConfig.from_mapping({k: settings[k] for k in TRAIN_DEFAULTS})


def model_spec(settings: dict) -> ToyModelSpec:
    if settings["kind"] != "transformer_lm":
        raise CliError(f"kind: the command line drives the transformer_lm model only, got {settings['kind']!r}")
    spec = ToyModelSpec(kind="transformer_lm", embed_dim=settings["embed_dim"], num_layers=settings["num_layers"],
                        num_heads=settings["num_heads"], context_length=settings["context_length"],
                        mlp_ratio=settings["mlp_ratio"], m=settings["m"])
    try:
        spec.validate()
    except ValueError as e:
        raise CliError(f"model: {e}") from None
    return spec


def _sub_seed(seed: int, component: int) -> int:
    return int(np.random.SeedSequence([seed, component]).generate_state(1)[0])


def load_corpus(settings: dict) -> Corpus:
    if settings["corpus"]:
        path = Path(settings["corpus"])
        if not path.is_file():
            raise CliError(f"corpus: file not found: {path}")
        raw = path.read_bytes()
    else:
        raw = synthetic_text(settings["corpus_bytes"], seed=0, domain=settings["domain"])
    try:
        return Corpus.from_bytes(raw, settings["val_fraction"])
    except ValueError as e:
        raise CliError(f"corpus: {e}") from None


def _load_model_file(settings: dict):
    if not settings["model"]:
        raise CliError("model: required (run 'nmprune pretrain' first)")
    path = Path(settings["model"])
    if not path.is_file():
        raise CliError(f"model: file not found: {path}")
    return load_model(path.read_bytes())


def _read_masks(settings: dict, model=None):
    if not settings["masks"]:
        raise CliError("masks: required")
    path = Path(settings["masks"])
    if not path.is_file():
        raise CliError(f"masks: file not found: {path}")
    shapes = {k: model.shape_of(k) for k in model.prunable} if model is not None else None
    return import_external_masks(path, shapes=shapes)


def _eval_batches(model, corpus: Corpus, settings: dict):
    return sequential_batches(corpus.val, 16, model.spec.context_length, settings["eval_batches"])


def _train_source(model, corpus: Corpus, settings: dict, batch_size: int):
    return batch_iterator(corpus.train, batch_size, model.spec.context_length, _sub_seed(settings["seed"], 3))


def _report(out: Path, records: list[dict]) -> str:
    text = "".join(" ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()) + "\n"
                   for r in records)
    (out / "report.txt").write_text(text)
    return text


def write_manifest(out: Path, command: str, settings: dict) -> None:
    head = {"command": command, "version": __version__}
    (out / "manifest.txt").write_text(format_config({**head, **settings}))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(settings: dict, out: Path) -> str:
    spec = model_spec(settings)
    corpus = load_corpus(settings)
    model = build_model(spec, seed=_sub_seed(settings["seed"], 0), dtype=np.dtype(settings["dtype"]))
    history: list = []
    source = batch_iterator(corpus.train, settings["batch_size"], spec.context_length, _sub_seed(settings["seed"], 3))
    model = pretrain_dense(model, source, settings["pretrain_steps"], lr=settings["pretrain_lr"], history=history)
    (out / "model.nmmd").write_bytes(save_model(model))
    (out / "pretrain_loss.txt").write_text("".join(f"step={i} loss={v!r}\n" for i, v in enumerate(history)))
    val = evaluate_loss(model, None, _eval_batches(model, corpus, settings))
    return _report(out, [{"model": "dense", "val_loss": val, "ppl": float(np.exp(val)), "digest": model.digest()}])


def cmd_prune(settings: dict, out: Path) -> str:
    model = _load_model_file(settings)
    corpus = load_corpus(settings)
    n, m = settings["n"], settings["m"]
    stats = None
    if settings["method"] == "wanda":
        calib = sequential_batches(corpus.train, 16, model.spec.context_length)
        stats = calibrate(model, calib, settings["calib_samples"])
    masks = prune_model(model, settings["method"], n, m, stats, resolve_skip(model, _split(settings["skip_layers"])))
    (out / "masks.nmmk").write_bytes(encode_masks(masks, n, m))
    evb = _eval_batches(model, corpus, settings)
    dense, masked = evaluate_loss(model, None, evb), evaluate_loss(model, masks, evb)
    return _report(out, [
        {"model": "dense", "val_loss": dense, "ppl": float(np.exp(dense))},
        {"model": settings["method"], "val_loss": masked, "ppl": float(np.exp(masked))},
    ])


def _prior_masks(settings: dict, model, corpus: Corpus):
    prior = settings["prior"]
    if prior in ("", "none"):
        return None
    n, m = settings["n"], settings["m"]
    if prior == "magnitude":
        return prune_model(model, "magnitude", n, m)
    if prior == "wanda":
        calib = sequential_batches(corpus.train, 16, model.spec.context_length)
        return prune_model(model, "wanda", n, m, calibrate(model, calib, settings["calib_samples"]))
    path = Path(prior)
    if not path.is_file():
        raise CliError(f"prior: expected none, magnitude, wanda or a mask file; {prior!r} not found")
    return import_external_masks(path, shapes={k: model.shape_of(k) for k in model.prunable}, pattern=(n, m))


def _finish_learning(out: Path, model, corpus, settings, masks, metrics, ck, label: str) -> str:
    cfg = settings
    (out / "masks.nmmk").write_bytes(encode_masks(masks, cfg["n"], cfg["m"]))
    (out / "metrics.txt").write_text(metrics.to_text())
    ck.save(out / "checkpoint.nmck")
    evb = _eval_batches(model, corpus, settings)
    dense, masked = evaluate_loss(model, None, evb), evaluate_loss(model, masks, evb)
    return _report(out, [
        {"model": "dense", "val_loss": dense, "ppl": float(np.exp(dense))},
        {"model": label, "val_loss": masked, "ppl": float(np.exp(masked))},
    ])


def _run_training(out: Path, fn):
    try:
        return fn()
    except DivergenceError as e:
        if e.checkpoint is not None:
            e.checkpoint.save(out / "checkpoint.nmck")
        raise


def cmd_learn(settings: dict, out: Path) -> str:
    model = _load_model_file(settings)
    corpus = load_corpus(settings)
    config = train_config(settings)
    prior = _prior_masks(settings, model, corpus)
    source = _train_source(model, corpus, settings, config.batch_size)
    masks, metrics, ck = _run_training(out, lambda: train_masks(model, source, config, prior=prior))
    return _finish_learning(out, model, corpus, settings, masks, metrics, ck, "learned")


def cmd_transfer(settings: dict, out: Path) -> str:
    model = _load_model_file(settings)
    corpus = load_corpus(settings)
    config = train_config(settings)
    base = _read_masks(settings, model)
    source = _train_source(model, corpus, settings, config.batch_size)
    masks, metrics, ck = _run_training(out, lambda: transfer_masks(model, base, source, config))
    return _finish_learning(out, model, corpus, settings, masks, metrics, ck, "transfer")


def cmd_eval(settings: dict, out: Path) -> str:
    model = _load_model_file(settings)
    corpus = load_corpus(settings)
    evb = _eval_batches(model, corpus, settings)
    dense = evaluate_loss(model, None, evb)
    rows = [{"model": "dense", "val_loss": dense, "ppl": float(np.exp(dense))}]
    if settings["masks"]:
        masks = _read_masks(settings, model)
        masked = evaluate_loss(model, masks, evb)
        rows.append({"model": "masked", "val_loss": masked, "ppl": float(np.exp(masked))})
        if settings["skip_layers"]:
            sens = layer_sensitivity(model, masks, evb, settings["skip_layers"])
            (out / "sensitivity.txt").write_text(format_sensitivity(sens))
            rows += [{"model": f"skip[{r['strategy']}]", "val_loss": r["loss"], "ppl": r["ppl"]} for r in sens]
    return _report(out, rows)


def cmd_pack(settings: dict, out: Path) -> str:
    masks = _read_masks(settings)
    if not masks:
        raise CliError("masks: file holds no masks")
    n, m = masks[0].n, masks[0].m
    data = encode_masks(masks, n, m)
    (out / "masks.nmmk").write_bytes(data)
    bits, params = payload_bits(data)
    return _report(out, [{"tensors": len(masks), "params": params, "payload_bits": bits, "file_bytes": len(data),
                          "bits_per_param": bits / params if params else 0.0}])


def cmd_unpack(settings: dict, out: Path) -> str:
    path = Path(settings["masks"]) if settings["masks"] else None
    if path is None or not path.is_file():
        raise CliError(f"masks: archive required, got {settings['masks']!r}")
    data = path.read_bytes()
    masks = decode_masks(data)
    if not masks:
        raise CliError("masks: archive holds no masks")
    dense = encode_dense_masks(masks, masks[0].n, masks[0].m)
    (out / "masks.nmmb").write_bytes(dense)
    bits, params = payload_bits(data)
    return _report(out, [{"tensors": len(masks), "params": params, "payload_bits": bits,
                          "bits_per_param": bits / params if params else 0.0}])


def cmd_bench(settings: dict, out: Path) -> str:
    from .sparse import benchmark

    try:
        sizes = [int(s) for s in _split(settings["sizes"])]
    except ValueError:
        raise CliError(f"sizes: expected comma-separated integers, got {settings['sizes']!r}") from None
    if (settings["n"], settings["m"]) != (2, 4):
        raise CliError("pattern: the sparse kernel supports 2:4 only")
    reports = benchmark(sizes, settings["repeats"], settings["bench_batch"], np.dtype(settings["dtype"]),
                        seed=_sub_seed(settings["seed"], 4))
    text = "".join(r.to_text() + "\n" for r in reports)
    (out / "report.txt").write_text(text)
    return text


HANDLERS = {
    "pretrain": cmd_pretrain,
    "prune": cmd_prune,
    "learn": cmd_learn,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "pack": cmd_pack,
    "unpack": cmd_unpack,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        settings = resolve_settings(args)
        train_config(settings)
        out = Path(args.out or f"runs/{args.command}")
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, args.command, settings)
        sys.stdout.write(HANDLERS[args.command](settings, out))
        return 0
    except (ConfigError, PatternError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
