"""Operator entry point: train, eval, decompose, analyze, gen-data.

Every command resolves its inputs, writes its outputs under --out, and
drops a run manifest (JSON) alongside them. Failures exit nonzero with a
single machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import sys
from pathlib import Path

import torch

from . import __version__
from .codec import CodecConfig, IdentityScaleCodec, count_parameters
from .data import (ImageDataset, ingest_dataset, make_blob_images,
                   make_quantization_ladder, save_images)
from .loop import run
from .metrics import (entropy_vs_tokens, eval_table, mse_vs_tokens,
                      write_entropy_csv, write_eval_csv, write_mse_vs_tokens_csv)
from .training import TrainConfig, load_checkpoint, restore_model, train


class CliError(RuntimeError):
    pass


# -- flat key-value config files ----------------------------------------------

def _parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_flat_config(path: Path) -> dict[str, object]:
    """Flat `key = value` lines (a TOML-compatible subset); # comments allowed."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = _parse_value(val)
    return values


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"codec"}
_CODEC_KEYS = {f.name for f in dataclasses.fields(CodecConfig)}


def build_train_config(values: dict[str, object]) -> TrainConfig:
    codec_kwargs, kwargs = {}, {}
    for key, val in values.items():
        if key.startswith("codec."):
            sub = key.removeprefix("codec.")
            if sub not in _CODEC_KEYS:
                raise CliError(f"unknown config key: {key}")
            codec_kwargs[sub] = val
        elif key in _TRAIN_KEYS:
            kwargs[key] = val
        else:
            raise CliError(f"unknown config key: {key}")
    return TrainConfig(codec=CodecConfig(**codec_kwargs), **kwargs)


# -- run manifest ---------------------------------------------------------------

def _write_manifest(out_dir: Path, command: str, config: dict, seed: int | None,
                    started: str, outputs: list[Path], extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _load_model(checkpoint_path: str):
    ckpt = load_checkpoint(checkpoint_path)
    model = restore_model(ckpt)
    model.eval()
    return ckpt, model


def _dataset_for(args, image_size: int) -> ImageDataset:
    return ingest_dataset(args.data_dir, image_size)


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    started = _now()
    values = parse_flat_config(Path(args.config)) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        values[key.strip()] = _parse_value(val)
    for flag in ("variant", "seed", "total_steps", "data_root", "n_min", "n_cap"):
        v = getattr(args, flag)
        if v is not None:
            values[flag] = v
    config = build_train_config(values)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = train(config, out_dir=out_dir)
    final = out_dir / f"checkpoint_{ckpt.global_step:07d}.vtck"
    _write_manifest(out_dir, "train", dataclasses.asdict(config), config.seed, started,
                    [final, out_dir / "training_log.csv"])
    print(final)
    return 0


def cmd_eval(args) -> int:
    started = _now()
    ckpt, model = _load_model(args.checkpoint)
    dataset = _dataset_for(args, ckpt.config.image_size)
    n_list = [int(n) for n in args.n_list.split(",")]
    rows = eval_table(model, dataset.images, dataset.image_ids, n_list)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "eval_table.csv"
    write_eval_csv(rows, csv_path)
    _write_manifest(out_dir, "eval", dataclasses.asdict(ckpt.config), ckpt.config.seed,
                    started, [csv_path],
                    extra={"parameter_count": count_parameters(model),
                           "n_list": n_list, "n_images": len(dataset)})
    print(csv_path)
    return 0


def _to_png(t: torch.Tensor, path: Path) -> None:
    from PIL import Image
    arr = (t.clamp(0, 1) * 255).round().to(torch.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0].numpy(), mode="L").save(path)
    else:
        Image.fromarray(arr.permute(1, 2, 0).numpy()).save(path)


def cmd_decompose(args) -> int:
    started = _now()
    ckpt, model = _load_model(args.checkpoint)
    from .data import _decode, _resize
    chw = torch.from_numpy(_decode(Path(args.image))).permute(2, 0, 1).to(torch.float32)
    x = _resize(chw, ckpt.config.image_size).unsqueeze(0)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        trace = run(model, x, args.n_tokens)
    outputs: list[Path] = []
    for n in range(1, args.n_tokens + 1):
        p = out_dir / f"reconstruction_{n}.png"
        _to_png(trace.cumulative[n - 1][0], p)
        outputs.append(p)
        if trace.masked:
            p = out_dir / f"mask_{n}.png"
            _to_png(trace.masks[n - 1][0], p)
            outputs.append(p)
    if not trace.masked and args.want_masks:
        print("notice: vanilla checkpoint produces no masks; mask outputs omitted")
    final = out_dir / "final_reconstruction.png"
    _to_png(trace.cumulative[-1][0], final)
    source = out_dir / "source.png"
    _to_png(x[0], source)
    outputs += [final, source]
    _write_manifest(out_dir, "decompose", dataclasses.asdict(ckpt.config), ckpt.config.seed,
                    started, outputs, extra={"n_tokens": args.n_tokens, "image": args.image})
    print(out_dir)
    return 0


def cmd_analyze(args) -> int:
    started = _now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "mse-vs-tokens":
        models = {}
        config_dump = {}
        seed = None
        if args.checkpoint:
            ckpt, model = _load_model(args.checkpoint)
            models["model"] = model
            config_dump = dataclasses.asdict(ckpt.config)
            seed = ckpt.config.seed
            image_size = ckpt.config.image_size
        else:
            image_size = args.image_size
        if args.baseline:
            _, baseline = _load_model(args.baseline)
            models["baseline"] = baseline
        if args.stub_alpha is not None:
            models["stub"] = IdentityScaleCodec(args.stub_alpha)
        if not models:
            raise CliError("mse-vs-tokens needs --checkpoint, --baseline, or --stub-alpha")
        dataset = _dataset_for(args, image_size)
        rows = mse_vs_tokens(models, dataset.images, dataset.image_ids, args.n_eval_max)
        csv_path = out_dir / "mse_vs_tokens.csv"
        write_mse_vs_tokens_csv(rows, csv_path)
        outputs = [csv_path]
        if args.plot:
            outputs.append(_plot_mse_vs_tokens(rows, out_dir))
        _write_manifest(out_dir, "analyze mse-vs-tokens", config_dump, seed, started,
                        outputs, extra={"n_eval_max": args.n_eval_max})
    else:  # entropy-vs-tokens
        if args.tau is None:
            raise CliError("entropy-vs-tokens requires --tau")
        ckpt, model = _load_model(args.checkpoint)
        dataset = _dataset_for(args, ckpt.config.image_size)
        rows, corr = entropy_vs_tokens(model, dataset.images, dataset.image_ids,
                                       args.tau, args.n_cap)
        csv_path = out_dir / "entropy_vs_tokens.csv"
        write_entropy_csv(rows, csv_path)
        outputs = [csv_path]
        if args.plot:
            outputs.append(_plot_entropy_vs_tokens(rows, out_dir))
        _write_manifest(out_dir, "analyze entropy-vs-tokens",
                        dataclasses.asdict(ckpt.config), ckpt.config.seed, started, outputs,
                        extra={"tau": args.tau, "n_cap": args.n_cap,
                               "spearman": corr if corr is not None else "undefined"})
    print(out_dir)
    return 0


def _plot_mse_vs_tokens(rows, out_dir: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    by_model: dict[str, dict[int, list[float]]] = {}
    for model_name, n, _, value in rows:
        by_model.setdefault(model_name, {}).setdefault(n, []).append(value)
    fig, ax = plt.subplots()
    for model_name, per_n in by_model.items():
        ns = sorted(per_n)
        ax.plot(ns, [sum(per_n[n]) / len(per_n[n]) for n in ns], marker="o", label=model_name)
    ax.set_xlabel("tokens")
    ax.set_ylabel("mean MSE")
    ax.set_yscale("log")
    ax.legend()
    path = out_dir / "mse_vs_tokens.png"
    fig.savefig(path)
    plt.close(fig)
    return path


def _plot_entropy_vs_tokens(rows, out_dir: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots()
    ax.scatter([r.entropy_bits for r in rows], [r.tokens_to_threshold for r in rows], s=12)
    ax.set_xlabel("image entropy (bits)")
    ax.set_ylabel("tokens to threshold")
    path = out_dir / "entropy_vs_tokens.png"
    fig.savefig(path)
    plt.close(fig)
    return path


def cmd_gen_data(args) -> int:
    started = _now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "blobs":
        images = make_blob_images(args.n_images, args.image_size, args.seed)
        paths = save_images(images, out_dir, prefix="blob")
    else:
        images, ids, _ = make_quantization_ladder(args.n_images, args.image_size, args.seed)
        paths = []
        for i, image_id in enumerate(ids):
            paths += save_images(images[i:i + 1], out_dir, prefix=image_id)
    _write_manifest(out_dir, "gen-data", {"kind": args.kind, "n_images": args.n_images,
                                          "image_size": args.image_size}, args.seed,
                    started, paths[:8] + ([] if len(paths) <= 8 else [Path("...")]))
    print(out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vartok",
                                     description="Variable-length token autoencoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a codec from a flat config file")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--variant", choices=("vanilla", "masked"))
    p.add_argument("--seed", type=int)
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--n-min", dest="n_min", type=int)
    p.add_argument("--n-cap", dest="n_cap", type=int)
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-image MSE/SSIM table at several token counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--n-list", default="1,2,3,4,5", help="comma-separated token counts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decompose", help="per-step reconstructions (and masks) for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--n-tokens", dest="n_tokens", type=int, default=5)
    p.add_argument("--want-masks", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("analyze", help="trend analyses emitting plot-ready CSV")
    p.add_argument("kind", choices=("mse-vs-tokens", "entropy-vs-tokens"))
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="second checkpoint for comparison")
    p.add_argument("--stub-alpha", dest="stub_alpha", type=float,
                   help="include the analytic alpha-identity stub codec")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--image-size", dest="image_size", type=int, default=32)
    p.add_argument("--n-eval-max", dest="n_eval_max", type=int, default=8)
    p.add_argument("--tau", type=float)
    p.add_argument("--n-cap", dest="n_cap", type=int, default=8)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gen-data", help="bundled synthetic datasets (no downloads)")
    p.add_argument("kind", choices=("blobs", "ladder"))
    p.add_argument("--n-images", dest="n_images", type=int, default=64)
    p.add_argument("--image-size", dest="image_size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
