"""Command-line surface wiring the pipeline end to end.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 compatibility
error, 5 bad input image.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint as ckptmod
from . import data as datamod
from . import imageio
from . import metrics as metricsmod
from . import sampler as samplermod
from . import text as textmod
from . import trainer as trainermod
from . import vq
from .model import ModelConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_COMPAT = 4
EXIT_INPUT = 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, indent=2)


def parse_mix(spec):
    """"edit=0.55,canny=0.15,depth=0.15,seg=0.15" -> dict."""
    if spec is None:
        return dict(datamod.DEFAULT_MIX)
    mix = {}
    try:
        for part in spec.split(","):
            key, val = part.split("=")
            mix[key.strip()] = float(val)
    except ValueError:
        raise CliError(f"cannot parse mix spec {spec!r}", EXIT_USAGE)
    return mix


_RUN_CONFIG_SECTIONS = {"model", "train", "sample", "mix"}


def load_run_config(path):
    """Typed run-config JSON; unknown sections or keys are rejected."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read config {path}: {e}", EXIT_USAGE)
    unknown = set(doc) - _RUN_CONFIG_SECTIONS
    if unknown:
        raise CliError(f"unknown config sections {sorted(unknown)}", EXIT_USAGE)
    try:
        model = ModelConfig.from_dict(doc.get("model", {})) \
            if doc.get("model") else ModelConfig()
        train = trainermod.TrainConfig.from_dict(doc.get("train", {}))
        sample = samplermod.SampleConfig(**doc.get("sample", {}))
    except (TypeError, ValueError) as e:
        raise CliError(f"bad config {path}: {e}", EXIT_USAGE)
    mix = doc.get("mix", dict(datamod.DEFAULT_MIX))
    return {"model": model, "train": train, "sample": sample, "mix": mix}


def cmd_gen_data(args):
    mix = parse_mix(args.mix)
    try:
        examples = datamod.sample_corpus(args.count, mix, args.seed)
    except datamod.ConfigError as e:
        raise CliError(str(e), EXIT_USAGE)
    os.makedirs(args.out, exist_ok=True)
    imageio.write_corpus(os.path.join(args.out, "corpus.bin"), examples)
    counts = {}
    for ex in examples:
        counts[ex.kind] = counts.get(ex.kind, 0) + 1
    manifest = {"count": args.count, "seed": args.seed, "mix": mix,
                "counts_per_task": counts}
    with open(os.path.join(args.out, "manifest.json"), "w") as f:
        f.write(_canonical(manifest) + "\n")
    print(f"wrote {args.count} examples to {args.out}")
    return EXIT_OK


def _load_corpus(data_dir):
    path = os.path.join(data_dir, "corpus.bin")
    if not os.path.exists(path):
        raise CliError(f"no corpus at {path}", EXIT_DATA)
    try:
        return imageio.read_corpus(path)
    except imageio.FormatError as e:
        raise CliError(str(e), EXIT_DATA)


def cmd_fit_tokenizer(args):
    if args.k < 2:
        raise CliError("codebook size must be at least 2", EXIT_USAGE)
    examples = _load_corpus(args.data)
    patches = []
    for ex in examples:
        for img in (ex.condition, ex.target):
            patches.append(vq.encode_patches(img, datamod.PATCH).reshape(
                -1, datamod.PATCH * datamod.PATCH * 3))
    samples = np.concatenate(patches) if patches else np.empty((0, 48))
    try:
        codebook, distortions = vq.build_codebook(
            samples, args.k, datamod.PATCH, iters=args.iters, seed=args.seed)
    except vq.InsufficientDataError as e:
        raise CliError(str(e), EXIT_DATA)
    ckptmod.save_checkpoint(args.out, codebook=codebook)
    print(f"final distortion: {distortions[-1]:.12g}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_run_config(args.config)
    examples = _load_corpus(args.data)
    loaded = ckptmod.load_checkpoint(args.codebook)
    if "codebook" not in loaded:
        raise CliError(f"{args.codebook} has no codebook section", EXIT_COMPAT)
    codebook = loaded["codebook"]
    if codebook.k != cfg["model"].k_img:
        raise CliError(
            f"codebook size {codebook.k} does not match model config "
            f"{cfg['model'].k_img}", EXIT_COMPAT)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train-log.ndjson")
    trainermod.train(examples, codebook, cfg["model"], cfg["train"],
                     out_dir=args.out, log_file=log_path,
                     resume_from=args.resume)
    print(f"training complete; checkpoints in {args.out}")
    return EXIT_OK


def _load_full_checkpoint(path):
    try:
        loaded = ckptmod.load_checkpoint(path)
    except ckptmod.CompatibilityError as e:
        raise CliError(str(e), EXIT_COMPAT)
    except (OSError, ckptmod.CheckpointError) as e:
        raise CliError(str(e), EXIT_DATA)
    for key in ("params", "model_config", "codebook", "vocabulary"):
        if key not in loaded:
            raise CliError(f"{path} missing section {key!r}", EXIT_COMPAT)
    vocab = textmod.Vocabulary(loaded["vocabulary"])
    if ckptmod.vocab_hash(vocab.words) != \
            ckptmod.vocab_hash(textmod.build_vocabulary().words):
        raise CliError("checkpoint vocabulary differs from this build",
                       EXIT_COMPAT)
    return loaded, vocab


def cmd_generate(args):
    loaded, vocab = _load_full_checkpoint(args.ckpt)
    cfg = loaded["model_config"]
    try:
        condition = imageio.ppm_read(args.image)
    except (OSError, imageio.FormatError) as e:
        raise CliError(str(e), EXIT_INPUT)
    if condition.shape != (datamod.CANVAS, datamod.CANVAS, 3):
        raise CliError(
            f"condition image must be {datamod.CANVAS}x{datamod.CANVAS}, "
            f"got {condition.shape[1]}x{condition.shape[0]}", EXIT_INPUT)
    if args.kind == "edit":
        instruction = args.instruction
    else:
        instruction = textmod.render_instruction(
            args.kind, {"desc": args.instruction})
    scfg = samplermod.SampleConfig(eta=args.eta, temperature=args.temperature,
                                   top_k=args.top_k, seed=args.seed)
    img, _ = samplermod.generate(loaded["params"], cfg, loaded["codebook"],
                                 vocab, condition, instruction, scfg)
    imageio.ppm_write(args.out, img)
    print(f"eta={args.eta} seed={args.seed} -> {args.out}")
    return EXIT_OK


AGGREGATE_COLUMNS = ["PSNR_bg", "MSE_bg", "SSIM_bg", "PSNR_full", "MSE_full",
                     "edit_success_rate", "edge_SSIM", "seg_mIoU",
                     "depth_RMSE_proxy"]


def cmd_eval(args):
    loaded, vocab = _load_full_checkpoint(args.ckpt)
    cfg = loaded["model_config"]
    examples = _load_corpus(args.data)
    scfg = samplermod.SampleConfig()
    if args.config:
        scfg = load_run_config(args.config)["sample"]
    report = metricsmod.evaluate(loaded["params"], cfg, loaded["codebook"],
                                 vocab, examples, scfg)
    with open(args.report, "w") as f:
        f.write(metricsmod.report_to_json(report) + "\n")
    summary = []
    for col in AGGREGATE_COLUMNS:
        val = None
        for cell in report["per_task"].values():
            if isinstance(cell, dict) and col in cell and "mean" in cell[col]:
                val = cell[col]["mean"]
        summary.append(f"{col}={val:.4f}" if val is not None else f"{col}=absent")
    print(" ".join(summary))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="aredit",
        description="Desk-scale conditional autoregressive image editor")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", default=None,
                   help="task mix, e.g. edit=0.55,canny=0.15,depth=0.15,seg=0.15")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-tokenizer", help="fit the patch codebook")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_tokenizer)

    p = sub.add_parser("train", help="train the conditional generator")
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="edit or translate one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--kind", choices=("edit", "canny", "depth", "seg"),
                   default="edit")
    p.add_argument("--eta", type=float, default=3.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0, dest="top_k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="run the metric report on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
