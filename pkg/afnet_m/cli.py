"""
Command-line entry point.

    python -m afnet_m synth --subjects 60 --out data/scans
    python -m afnet_m preprocess --scans data/scans --out data/toy --config configs/toy.cfg
    python -m afnet_m protocol --data data/toy --out runs/protocol --config configs/toy.cfg --k 10
    python -m afnet_m ablate --axis fusion_strategy --data data/toy --out runs/fusion --config configs/toy.cfg
    python -m afnet_m params --config configs/full.cfg

Config precedence: `--set key=value`, `--seed` and `--epochs` > `--config` file > defaults.
Every command that writes outputs also writes one `manifest.json` that `replay_manifest` re-runs.
"""
import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd
from termcolor import cprint

from . import __version__
from .config import ConfigValues, dump_config, load_config, parse_overrides
from .errors import AFNetError, DataError

MANIFEST = "manifest.json"
CONFIG_FLAGS = ("--config", "--set", "--seed", "--epochs")


@dataclass
class RunManifest:
    command: str
    argv: list
    replay_argv: list
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = __version__
    started: str = ""
    finished: str = ""

    def write(self, out_dir):
        self.finished = _now()
        path = Path(out_dir) / MANIFEST
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        if not path.exists():
            raise DataError(f"File {path} does not exist")
        return cls(**json.loads(path.read_text()))


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def _strip_flags(argv, flags):
    """Drop `--flag value` and `--flag=value` tokens for the given flags."""
    out, skip = [], False
    for token in argv:
        if skip:
            skip = False
            continue
        name = token.split("=", 1)[0]
        if name in flags:
            skip = "=" not in token
            continue
        out.append(token)
    return out


def _replace_flag(argv, flag, value):
    return _strip_flags(argv, (flag,)) + [flag, str(value)]


def build_parser():
    parser = argparse.ArgumentParser(prog="afnet_m", description="AFNet-M multimodal 2D+3D expression recognition")
    parser.add_argument("--version", action="version", version=f"afnet_m {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def with_config(p):
        p.add_argument("--config", type=Path, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="seed for the model and training")
        p.add_argument("--epochs", type=int)
        p.add_argument("--verbose", action="store_true")
        return p

    p = sub.add_parser("synth", help="write synthetic expressive scans")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--intensities", type=_int_list, default=(4,))
    p.add_argument("--first-subject", type=int, default=0)

    p = with_config(sub.add_parser("preprocess", help="scans -> texture/depth images and masks"))
    p.add_argument("--scans", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, help="image side; defaults to the config's input_size")
    p.add_argument("--ppm", action="store_true", help="also export texture and depth as .ppm images")

    p = with_config(sub.add_parser("train", help="train one model on a whole dataset"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--intensities", type=_int_list)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--intensities", type=_int_list)

    p = with_config(sub.add_parser("protocol", help="repeated subject-disjoint k-fold cross-validation"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--intensities", type=_int_list)

    p = with_config(sub.add_parser("ablate", help="run the protocol over one ablation axis"))
    p.add_argument("--axis", required=True, help="fusion_strategy | ma_and_modality | fusion_positions")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--intensities", type=_int_list)

    p = sub.add_parser("cam", help="Grad-CAM heat map for one sample")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sample", default="0", help="sample key or index")
    p.add_argument("--layer", default="texture.layer4")
    p.add_argument("--target", type=int, help="class index; the predicted class when omitted")

    p = with_config(sub.add_parser("params", help="per-component parameter counts"))
    p.add_argument("--out", type=Path)
    return parser


def resolve_config(args):
    overrides = parse_overrides(args.set)
    flags = ConfigValues()
    if args.seed is not None:
        flags.set("seed", str(args.seed), where="--seed")
    if args.epochs is not None:
        flags.set("epochs", str(args.epochs), where="--epochs")
    return load_config(args.config, overrides.update(flags))


def configure_logger(out_dir, command, model_config=None, train_config=None):
    from ml_logger import logger

    logger.configure(root=str(Path(out_dir).resolve()), prefix=command)
    if model_config is not None:
        logger.log_params(ModelConfig=model_config.to_dict(), TrainConfig=train_config.to_dict())
    return logger


def _manifest(command, argv, args, model_config=None, train_config=None):
    config = {}
    replay = list(argv)
    if model_config is not None:
        text = dump_config(model_config, train_config)
        config = {k: v for k, v in (line.split("=", 1) for line in text.splitlines())}
        # the resolved key/values replace whatever file and flags produced them
        replay = _strip_flags(replay, CONFIG_FLAGS)
        for key, value in config.items():
            replay += ["--set", f"{key}={value}"]
    seeds = {}
    if model_config is not None:
        seeds = dict(model=model_config.seed, train=train_config.seed)
    inputs = {k: str(v) for k, v in vars(args).items() if k in ("data", "scans", "checkpoint", "config") and v}
    return RunManifest(command=command, argv=list(argv), replay_argv=replay, config=config, seeds=seeds,
                       inputs=inputs, started=_now())


def cmd_synth(args, manifest):
    from .scan import synth_dataset

    paths = synth_dataset(args.out, args.subjects, intensities=args.intensities, first_subject=args.first_subject)
    manifest.outputs = [str(p) for p in paths]
    cprint(f"wrote {len(paths)} scans to {args.out}", "green")


def cmd_preprocess(args, manifest, model_config, train_config):
    from ml_logger import logger
    from tqdm import tqdm

    from .preprocess import preprocess_directory, to_uint8

    size = args.size or model_config.input_size
    samples = preprocess_directory(args.scans, args.out, size, progress=tqdm if args.verbose else None)
    if args.ppm:
        for s in samples:
            logger.save_image(to_uint8(s.texture), key=f"../ppm/{s.key}_texture.ppm")
            logger.save_image(to_uint8(s.depth), key=f"../ppm/{s.key}_depth.ppm")
    manifest.outputs = [str(args.out / "index.json")]
    cprint(f"preprocessed {len(samples)} scans at S={size} into {args.out}", "green")


def _dataset(args, model_config):
    from .preprocess import load_dataset

    return load_dataset(args.data, model_config, intensities=args.intensities)


def cmd_train(args, manifest, model_config, train_config):
    from .harness import train
    from .model import save_checkpoint

    samples = _dataset(args, model_config)
    model, log = train(model_config, train_config, samples, verbose=args.verbose)
    checkpoint = save_checkpoint(model, args.out / "checkpoint", extra=dict(train=train_config.to_dict()))
    log.to_frame().to_csv(args.out / "runlog.csv", index=False)
    manifest.outputs = [str(checkpoint), str(args.out / "runlog.csv")]
    cprint(f"final train loss {log.losses[-1]:.4f}, checkpoint at {checkpoint}", "green")


def _write_confusion(confusion, out_dir, stem):
    tensor = confusion.save(out_dir / f"{stem}.aftn")
    figure = confusion.plot(out_dir / f"{stem}.png", title=stem)
    return [str(tensor), str(figure)]


def cmd_eval(args, manifest):
    from .harness import evaluate
    from .model import load_checkpoint
    from .reports import write_table

    model, _ = load_checkpoint(args.checkpoint)
    samples = _dataset(args, model.config)
    accuracy, confusion = evaluate(model, samples)
    row = dict(name="eval", mean_accuracy=accuracy, std_accuracy=0.0, samples=confusion.total)
    row.update(zip(confusion.to_frame().index, confusion.per_class_accuracy()))
    outputs = list(write_table([row], args.out, "eval"))
    manifest.outputs = [str(p) for p in outputs] + _write_confusion(confusion, args.out, "confusion")
    manifest.seeds = dict(model=model.config.seed)
    print(confusion.to_frame().to_string())
    cprint(f"accuracy {accuracy * 100:.2f}% on {confusion.total} samples", "green")


def cmd_protocol(args, manifest, model_config, train_config):
    from .harness import run_protocol
    from .reports import write_table

    samples = _dataset(args, model_config)
    result = run_protocol(model_config, train_config, samples, repeats=args.repeats, k=args.k, verbose=args.verbose)
    row = result.row("protocol", model_config)
    outputs = list(write_table([row], args.out, "protocol", title=f"{args.repeats}x{args.k}-fold cross-validation"))
    folds_path = args.out / "folds.csv"
    pd.DataFrame(dict(fold=range(len(result.fold_accuracies)), accuracy=result.fold_accuracies)).to_csv(
        folds_path, index=False)
    manifest.outputs = [str(p) for p in outputs] + [str(folds_path)] \
                       + _write_confusion(result.confusion, args.out, "confusion")
    cprint(f"accuracy {result.mean_accuracy * 100:.2f} +/- {result.std_accuracy * 100:.2f}", "green")


def cmd_ablate(args, manifest, model_config, train_config):
    from .harness import ablate, ablation_configs
    from .preprocess import load_dataset
    from .reports import write_table

    ablation_configs(args.axis, model_config)
    samples = load_dataset(args.data, None, intensities=args.intensities)
    rows = ablate(samples, args.axis, model_config, train_config, repeats=args.repeats, k=args.k,
                  verbose=args.verbose)
    outputs = write_table(rows, args.out, f"ablate_{args.axis}", title=f"ablation: {args.axis}")
    manifest.outputs = [str(p) for p in outputs]
    print(Path(outputs[1]).read_text())


def cmd_cam(args, manifest):
    from ml_logger import logger

    from .gradcam import gradcam, heatmap_rgb
    from .harness import predict
    from .model import load_checkpoint
    from .tensor import save_tensor

    model, _ = load_checkpoint(args.checkpoint)
    samples = _dataset(argparse.Namespace(data=args.data, intensities=None), model.config)
    by_key = {s.key: s for s in samples}
    if args.sample in by_key:
        sample = by_key[args.sample]
    else:
        try:
            sample = samples[int(args.sample)]
        except (ValueError, IndexError):
            raise DataError(f"no sample with key or index {args.sample!r}") from None
    target = args.target if args.target is not None else int(predict(model, [sample])[0])
    heat = gradcam(model, sample, target, args.layer)
    stem = f"cam_{sample.key or args.sample}_{args.layer}_{target}"
    tensor_path = save_tensor(args.out / f"{stem}.aftn", heat)
    backdrop = sample.depth if args.layer.startswith("depth") else sample.texture
    image_path = args.out / f"{stem}.png"
    logger.save_image(heatmap_rgb(heat, backdrop), key=f"../{stem}.png")
    manifest.outputs = [str(tensor_path), str(image_path)]
    manifest.seeds = dict(model=model.config.seed)
    cprint(f"heat map for class {target} at {args.layer}: {image_path}", "green")


def cmd_params(args, manifest, model_config, train_config):
    from .model import count_params

    counts = count_params(model_config)
    print(counts.table())
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(dict(component=list(counts.components), parameters=list(counts.components.values())))
        frame.to_csv(args.out / "params.csv", index=False)
        manifest.outputs = [str(args.out / "params.csv")]


CONFIGURED = dict(preprocess=cmd_preprocess, train=cmd_train, protocol=cmd_protocol, ablate=cmd_ablate,
                  params=cmd_params)
PLAIN = dict(synth=cmd_synth, eval=cmd_eval, cam=cmd_cam)


def dispatch(argv=None):
    """Run one command; returns the process exit code (0 ok, 1 failure, 2 usage error)."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0

    try:
        model_config = train_config = None
        if args.command in CONFIGURED:
            model_config, train_config = resolve_config(args)
        manifest = _manifest(args.command, argv, args, model_config, train_config)
        out = getattr(args, "out", None)
        if out is not None and args.command != "synth":
            configure_logger(out, args.command, model_config, train_config)
        if args.command in CONFIGURED:
            CONFIGURED[args.command](args, manifest, model_config, train_config)
        else:
            PLAIN[args.command](args, manifest)
        if out is not None:
            manifest.write(out)
    except (AFNetError, OSError) as e:
        message = str(e).splitlines()[0] if str(e) else type(e).__name__
        cprint(f"afnet_m {args.command}: {type(e).__name__}: {message}", "red", file=sys.stderr)
        return 1
    return 0


def replay_manifest(path, out=None):
    """Re-run the command recorded in a manifest; `out` redirects its outputs elsewhere."""
    manifest = RunManifest.read(path)
    argv = list(manifest.replay_argv)
    if out is not None:
        argv = _replace_flag(argv, "--out", out)
    return dispatch(argv)


def main():
    sys.exit(dispatch())
