"""``pae`` command line: dataset generation, training, encoding, diagnosis, t-SNE, evaluation.

Exit codes: 0 success, 2 usage or invalid configuration, 3 I/O failure,
4 state mismatch (checkpoint does not fit the data, foreign checkpoint file).
Every successful command writes ``run_<command>.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .corruption import corrupt_each
from .datagen import BreakLocation, Dataset, generate_dataset, read_dataset, write_dataset
from .diagnosis import end_to_end_baseline, two_stage_report
from .errors import ConfigError, ContractError, MetricError, ParameterError, ShapeError
from .manifold import EmbeddingConfig, knn_purity, tsne_embed, write_coords_csv, write_kl_csv
from .model import ModelConfig, encode_array, load_checkpoint, params_checksum, reconstruction_metrics
from .training import TrainConfig, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_STATE = 0, 2, 3, 4


class UsageError(Exception):
    """Flags are individually valid but do not fit together."""


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    def write(self, path: Path) -> Path:
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise ContractError(f"run manifest lists missing outputs: {missing[:3]}")
        return _atomic_write(path, json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _atomic_write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# shared helpers


def _check_model_fits(cfg: ModelConfig, ds: Dataset) -> None:
    c, t = ds.transients[0].channels.shape
    if (cfg.channels, cfg.samples) != (c, t):
        raise ContractError(
            f"checkpoint expects {cfg.channels}x{cfg.samples} windows, dataset has {c}x{t}"
        )


def _corrupted(ds: Dataset, cfg_patch_len: int, snr: float, mask: float, seed: int):
    x = ds.normalized()
    return x, *corrupt_each(x, snr, mask, cfg_patch_len, seed)


def read_latents_csv(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "id" or header[-2:] != ["break_location", "break_size_cm"]:
        raise ContractError(f"{path}: not a latents file")
    ids = [r[0] for r in body]
    z = np.array([[float(v) for v in r[1:-2]] for r in body])
    loc = np.array([BreakLocation(r[-2]).index for r in body], dtype=int)
    size = np.array([float(r[-1]) for r in body])
    return ids, z, loc, size


def _split_indices(ds: Dataset, ids: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``ids`` that belong to the dataset's train and test splits."""
    split = dict(zip(ds.ids(), ds.split))
    unknown = [i for i in ids if i not in split]
    if unknown:
        raise ContractError(f"ids not in dataset: {unknown[:3]}")
    tr = np.array([k for k, i in enumerate(ids) if split[i] == "train"], dtype=int)
    te = np.array([k for k, i in enumerate(ids) if split[i] == "test"], dtype=int)
    return tr, te


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> list[Path]:
    ds = generate_dataset(args.count, args.seed)
    files = write_dataset(ds, args.out)
    n_train = len(ds.indices("train"))
    n_cold = int(np.sum(ds.locations() == 0))
    print(f"wrote {len(ds)} transients to {args.out}: {n_cold} cold-leg, {len(ds) - n_cold} hot-leg; "
          f"{n_train} train / {len(ds) - n_train} test")
    return files


def cmd_train(args) -> list[Path]:
    if args.dump_default:
        print(json.dumps(TrainConfig().to_dict(), indent=2))
        return []
    if not args.config:
        raise UsageError("train needs --config (or --dump-default)")
    try:
        config = load_config(args.config)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"not valid JSON ({exc})") from None
    ds = read_dataset(config.dataset_dir)
    _check_model_fits(config.model, ds)
    x_train = ds.normalized(ds.indices("train"))
    result = train(config, x_train, out_dir=config.out_dir)
    out = Path(config.out_dir)
    print(f"trained {result.state.t} steps; final loss {result.log.losses[-1]:.5f}; "
          f"checkpoint {out / 'final.pae'}")
    args._config_snapshot = config.to_dict()
    return [*result.checkpoints, out / "train_log.csv"]


def cmd_encode(args) -> list[Path]:
    params, cfg = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    _check_model_fits(cfg, ds)
    _, x_corr, masks = _corrupted(ds, cfg.patch_len, args.snr, args.mask, args.seed)
    z = encode_array(x_corr, masks, params, cfg)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *[f"z{k}" for k in range(z.shape[1])], "break_location", "break_size_cm"])
        for tr, row in zip(ds.transients, z):
            w.writerow([tr.id, *(repr(float(v)) for v in row), tr.break_location.value, repr(tr.break_size_cm)])
    print(f"encoded {len(ds)} transients ({z.shape[1]}-d latents) to {path}")
    return [path]


def cmd_diagnose(args) -> list[Path]:
    modes = ("two_stage", "end_to_end") if args.mode == "both" else (args.mode,)
    if "two_stage" in modes and not args.latents:
        raise UsageError(f"--mode {args.mode} needs --latents")
    if "end_to_end" in modes and not args.raw:
        raise UsageError(f"--mode {args.mode} needs --raw")
    if args.mode == "two_stage" and args.raw:
        raise UsageError("--raw is only used by --mode end_to_end or both")
    if args.mode == "end_to_end" and args.latents:
        raise UsageError("--latents is only used by --mode two_stage or both")
    if "two_stage" in modes and not (args.dataset or args.raw):
        raise UsageError(f"--mode {args.mode} needs --dataset to look up the train/test split")
    corruption = {"snr_db": args.snr, "mask_ratio": args.mask}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, files = {}, []
    if "two_stage" in modes:
        split_ds = read_dataset(args.dataset or args.raw)
        ids, z, loc, size = read_latents_csv(args.latents)
        tr, te = _split_indices(split_ds, ids)
        reports["two_stage"] = two_stage_report(
            z[tr], loc[tr], size[tr], z[te], loc[te], size[te], corruption, args.seed, args.iterations, args.alpha
        )
    if "end_to_end" in modes:
        ds = read_dataset(args.raw)
        _, x_corr, _ = _corrupted(ds, args.patch_len, args.snr, args.mask, args.corruption_seed)
        tr, te = ds.indices("train"), ds.indices("test")
        loc, size = ds.locations(), ds.sizes()
        reports["end_to_end"] = end_to_end_baseline(
            x_corr[tr], loc[tr], size[tr], x_corr[te], loc[te], size[te], corruption, args.seed,
            args.iterations, args.alpha,
        )
    for mode, rep in reports.items():
        files.append(rep.write(out_dir / f"report_{mode}.json"))
    print(f"{'mode':<12}{'cold_prec':>10}{'hot_prec':>10}{'macro_f1':>10}{'rmse_cm':>10}")
    for mode, rep in reports.items():
        print(f"{mode:<12}{rep.cold_precision:>10.4f}{rep.hot_precision:>10.4f}"
              f"{rep.macro_f1:>10.4f}{rep.rmse_cm:>10.4f}")
    return files


def cmd_tsne(args) -> list[Path]:
    ds = read_dataset(args.dataset)
    if args.input == "latent":
        if not args.latents:
            raise UsageError("--input latent needs --latents")
        ids, x, _, _ = read_latents_csv(args.latents)
        order = {i: k for k, i in enumerate(ds.ids())}
        rows = [order[i] for i in ids]
    else:
        if args.latents:
            raise UsageError("--latents is only used with --input latent")
        clean, x_corr, _ = _corrupted(ds, args.patch_len, args.snr, args.mask, args.corruption_seed)
        x = clean if args.input == "clean" else x_corr
        x = x.reshape(len(x), -1)
        ids, rows = ds.ids(), list(range(len(ds)))
    cfg = EmbeddingConfig(perplexity=args.perplexity, iterations=args.iterations, seed=args.seed)
    result = tsne_embed(x, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    loc = [ds.transients[r].break_location.value for r in rows]
    size = [ds.transients[r].break_size_cm for r in rows]
    coords = write_coords_csv(out_dir / f"coords_{args.input}.csv", ids, result.coords, loc, size, args.input)
    kl = write_kl_csv(out_dir / f"kl_{args.input}.csv", result.kl_trace)
    purity = knn_purity(result.coords, ds.locations(rows), k=10)
    print(f"t-SNE of {len(ids)} {args.input} windows: final KL {result.kl_trace[-1]:.4f}, "
          f"10-NN location purity {purity:.3f}")
    return [coords, kl]


def cmd_eval(args) -> list[Path]:
    params, cfg = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    _check_model_fits(cfg, ds)
    clean, x_corr, masks = _corrupted(ds, cfg.patch_len, args.snr, args.mask, args.seed)
    idx = ds.indices(args.split) if args.split != "all" else np.arange(len(ds))
    metrics = reconstruction_metrics(clean[idx], x_corr[idx], masks[idx], params, cfg)
    metrics.update(
        {"split": args.split, "snr_db": args.snr, "mask_ratio": args.mask, "seed": args.seed,
         "checkpoint_sha256": params_checksum(params)}
    )
    path = _atomic_write(Path(args.out), json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"recon MSE {metrics['recon_mse']:.5f} vs corrupted {metrics['corrupted_mse']:.5f}"
          + (f"; masked {metrics['masked_mse']:.5f} vs zero-fill {metrics['zero_fill_mse']:.5f}"
             if "masked_mse" in metrics else ""))
    return [path]


# ---------------------------------------------------------------------------
# parser


def _add_corruption(p, default_mask: float = 0.1) -> None:
    p.add_argument("--snr", type=float, default=35.0, help="noise level in dB (default 35)")
    p.add_argument("--mask", type=float, default=default_mask, help="fraction of patches zeroed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pae", description="Padded auto-encoder experiments on synthetic LOCA transients.")
    parser.add_argument("--version", action="version", version=f"pae {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads; 1 gives bit-reproducible runs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic transient dataset")
    p.add_argument("--count", type=int, default=346)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data, out_kind="dir")

    p = sub.add_parser("train", help="train the auto-encoder from a JSON config")
    p.add_argument("--config")
    p.add_argument("--dump-default", action="store_true", help="print the default config and exit")
    p.set_defaults(func=cmd_train, out_kind="config")

    p = sub.add_parser("encode", help="write latents of corrupted windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    _add_corruption(p)
    p.add_argument("--seed", type=int, default=0, help="corruption seed")
    p.add_argument("--out", required=True, help="latents CSV path")
    p.set_defaults(func=cmd_encode, out_kind="file")

    p = sub.add_parser("diagnose", help="train and evaluate break location/size heads")
    p.add_argument("--latents", help="latents CSV (two_stage)")
    p.add_argument("--raw", help="dataset directory whose corrupted windows feed end_to_end")
    p.add_argument("--dataset", help="dataset directory for the split (defaults to --raw)")
    p.add_argument("--mode", choices=("two_stage", "end_to_end", "both"), default="two_stage")
    _add_corruption(p)
    p.add_argument("--corruption-seed", type=int, default=0,
                   help="corruption seed for --raw (use the encode --seed)")
    p.add_argument("--patch-len", type=int, default=ModelConfig().patch_len)
    p.add_argument("--seed", type=int, default=0, help="head initialisation and dropout seed")
    p.add_argument("--iterations", type=int, default=256)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output directory for report JSON")
    p.set_defaults(func=cmd_diagnose, out_kind="dir")

    p = sub.add_parser("tsne", help="2-D t-SNE of clean, corrupted or latent representations")
    p.add_argument("--input", choices=("clean", "corrupted", "latent"), required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--latents", help="latents CSV for --input latent")
    _add_corruption(p)
    p.add_argument("--corruption-seed", type=int, default=0)
    p.add_argument("--patch-len", type=int, default=ModelConfig().patch_len)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_tsne, out_kind="dir")

    p = sub.add_parser("eval", help="reconstruction errors of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    _add_corruption(p, default_mask=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_eval, out_kind="file")
    return parser


def _manifest_path(args) -> Path:
    name = f"run_{args.command.replace('-', '_')}.json"
    if args.out_kind == "dir":
        return Path(args.out) / name
    if args.out_kind == "file":
        return Path(args.out).parent / name
    return Path(args._config_snapshot["out_dir"]) / name


def _seeds(args) -> dict:
    seeds = {k: v for k, v in vars(args).items() if k.endswith("seed") and isinstance(v, int)}
    if getattr(args, "_config_snapshot", None):
        seeds["train_seed"] = args._config_snapshot["seed"]
    return seeds


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for bad flags
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    started = _now()
    try:
        with _thread_limit(args.threads):
            outputs = args.func(args)
        if args.command == "train" and args.dump_default:
            return EXIT_OK
        snapshot = getattr(args, "_config_snapshot", None) or {
            k: v for k, v in vars(args).items() if not k.startswith("_") and k not in ("func", "out_kind")
        }
        manifest = RunManifest(
            command=args.command,
            config=snapshot,
            seeds=_seeds(args),
            started=started,
            finished=_now(),
            outputs=[str(p) for p in outputs],
        )
        manifest.write(_manifest_path(args))
    except (UsageError, ParameterError) as exc:  # includes ConfigError
        print(f"pae {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, ShapeError, MetricError) as exc:
        print(f"pae {args.command}: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (OSError, ValueError, KeyError) as exc:
        # unreadable or malformed files (missing paths, bad CSV/JSON)
        print(f"pae {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
