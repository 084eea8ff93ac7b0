"""``xmodal-vit`` command line: gradcheck, synth, train, eval, attnmap, embed-dump.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint, pnm
from .data import (DataError, SyntheticGenConfig, class_counts, generate_synthetic, load_manifest, stack_images,
                   subject_kfold, write_dataset)
from .training import EpochReport, NumericalError, TrainConfig, class_tokens, evaluate, predict_logits
from .vit import ConfigError, ModelConfig, forward, strip_sam

log = logging.getLogger("xmodal_vit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# flat key=value configuration
# ---------------------------------------------------------------------------

def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _modes(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(text)
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _opt_int(text):
    if text is None or str(text).strip().lower() in ("", "none", "0"):
        return None
    return int(text)


# key -> (parser, default). image_size and seed are shared between the model,
# the trainer and the generator.
SCHEMA = {
    # model
    "image_size": (int, 64), "patch_size": (int, 8), "embed_dim": (int, 96), "num_heads": (int, 6),
    "depth": (int, 2), "mlp_ratio": (int, 4), "sam_dim": (_opt_int, None), "align_layers": (_ints, (-1,)),
    "paper_faithful": (_bool, True),
    # training
    "lr0": (float, 0.01), "momentum": (float, 0.9), "weight_decay": (float, 5e-5), "batch_size": (int, 16),
    "max_epochs": (int, 10), "lam": (float, 0.3), "mode": (str, "cga_sam"), "seed": (int, 0),
    "augment": (_bool, True), "dtype": (str, "float32"),
    # generator
    "samples_per_class": (int, 200), "n_subjects": (int, 40), "nbi_contrast": (float, SyntheticGenConfig.nbi_contrast),
    "wl_attenuation": (float, SyntheticGenConfig.wl_attenuation), "wl_noise": (float, SyntheticGenConfig.wl_noise),
    "texture_period": (float, SyntheticGenConfig.texture_period), "with_bbox": (_bool, False),
    # experiment and paths
    "folds": (int, 5), "n_seeds": (int, 1), "modes": (_modes, ("mode",)), "data": (str, ""), "out": (str, "run"),
    "save_checkpoints": (_bool, True),
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(file_values: Optional[Dict[str, str]] = None, overrides: Sequence[str] = (),
                   seed: Optional[int] = None) -> Dict[str, object]:
    """Merge defaults, config file and ``--set`` overrides; unknown keys are rejected."""
    raw: Dict[str, object] = {}
    raw.update(file_values or {})
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    if seed is not None:
        raw["seed"] = seed
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = parse(raw[key])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key}: {exc}") from None
        else:
            cfg[key] = default
    if cfg["modes"] == ("mode",):
        cfg["modes"] = (cfg["mode"],)
    return cfg


def format_config(cfg: Dict[str, object]) -> List[str]:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return "none" if v is None else str(v)
    return [f"{k}={fmt(v)}" for k, v in cfg.items()]


def model_config(cfg) -> ModelConfig:
    return ModelConfig(image_size=cfg["image_size"], patch_size=cfg["patch_size"], embed_dim=cfg["embed_dim"],
                       num_heads=cfg["num_heads"], depth=cfg["depth"], mlp_ratio=cfg["mlp_ratio"],
                       sam_dim=cfg["sam_dim"], align_layers=cfg["align_layers"],
                       paper_faithful=cfg["paper_faithful"])


def train_config(cfg, seed: Optional[int] = None, mode: Optional[str] = None) -> TrainConfig:
    return TrainConfig(lr0=cfg["lr0"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                       batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"], lam=cfg["lam"],
                       mode=mode or cfg["mode"], seed=cfg["seed"] if seed is None else seed,
                       augment=cfg["augment"], dtype=cfg["dtype"])


def gen_config(cfg) -> SyntheticGenConfig:
    return SyntheticGenConfig(image_size=cfg["image_size"], samples_per_class=cfg["samples_per_class"],
                              n_subjects=cfg["n_subjects"], seed=cfg["seed"], nbi_contrast=cfg["nbi_contrast"],
                              wl_attenuation=cfg["wl_attenuation"], wl_noise=cfg["wl_noise"],
                              texture_period=cfg["texture_period"], with_bbox=cfg["with_bbox"])


def _dataset(cfg):
    if cfg["data"]:
        return load_manifest(cfg["data"])
    log.info("no data= given; generating the synthetic dataset in memory")
    return generate_synthetic(gen_config(cfg))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gradcheck(cfg, args) -> int:
    from .gradcheck import check_model, check_ops

    results = []
    if args.scope in ("ops", "all"):
        results.append(check_ops(trials=args.trials, seed=cfg["seed"]))
    if args.scope in ("model", "all"):
        results.append(check_model(n_coords=args.coords, seed=cfg["seed"]))
    failures = []
    for rep in results:
        for line in rep.lines():
            print(line)
        failures += rep.failures
    if failures:
        print("gradcheck FAILED: " + ", ".join(failures))
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def cmd_synth(cfg, args) -> int:
    out = Path(args.out or cfg["out"])
    samples = generate_synthetic(gen_config(cfg))
    manifest = write_dataset(samples, out)
    counts = class_counts(samples)
    n_subj = len({s.subject_id for s in samples})
    print(f"wrote {len(samples)} pairs to {manifest}")
    print(f"class 0 (hyperplastic): {counts[0]}  class 1 (adenomatous): {counts[1]}  subjects: {n_subj}")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    from .experiment import estimator_for, merge, prepare, run_experiment

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    mcfg = model_config(cfg)
    samples = _dataset(cfg)
    reports = []
    for s in range(cfg["n_seeds"]):
        seed = cfg["seed"] + s
        split = subject_kfold(samples, cfg["folds"], seed)
        tcfg = train_config(cfg, seed=seed)
        logs: Dict[tuple, object] = {}

        def on_epoch(mode, fold, rep: EpochReport, seed=seed, logs=logs):
            key = (mode, fold)
            if key not in logs:
                fh = open(out / f"epochs_{mode}_seed{seed}_fold{fold + 1}.csv", "w", newline="")
                logs[key] = (fh, csv.writer(fh, lineterminator="\n"))
                logs[key][1].writerow(EpochReport.csv_header())
            fh, writer = logs[key]
            writer.writerow(rep.csv_row())
            fh.flush()

        def on_fold(res, est, seed=seed):
            if cfg["save_checkpoints"]:
                stem = out / f"model_{res.mode}_seed{seed}_fold{res.fold + 1}"
                est.save(f"{stem}.ckpt")
                est.save(f"{stem}.pruned.ckpt", prune=True)
            print(f"seed {seed} fold {res.fold + 1} {res.mode}: best val acc {res.best_accuracy:.4f} "
                  f"(epoch {res.best_epoch + 1})", flush=True)

        try:
            reports.append(run_experiment(tcfg, mcfg, samples, split, cfg["modes"], on_epoch, on_fold))
        finally:
            for fh, _ in logs.values():
                fh.close()
    report = merge(reports)
    (out / "report.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


def _load_eval_set(cfg, image_size: int):
    from .experiment import prepare

    samples = prepare(_dataset(cfg), image_size)
    if not samples:
        raise DataError("evaluation set is empty")
    return samples


def cmd_eval(cfg, args) -> int:
    ckpt_cfg, params = checkpoint.load(args.checkpoint)
    samples = _load_eval_set(cfg, ckpt_cfg.image_size)
    acc = evaluate(strip_sam(params), ckpt_cfg, stack_images(samples, "wl"), [s.label for s in samples])
    print(f"accuracy {acc:.6f} ({len(samples)} WL images)")
    return EXIT_OK


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 255] uint8; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def upsample_map(row: np.ndarray, height: int, width: int) -> np.ndarray:
    """Patch-grid values -> H x W by nearest-neighbour replication."""
    g = int(round(np.sqrt(row.size)))
    if g * g != row.size:
        raise ValueError(f"{row.size} patches do not form a square grid")
    grid = row.reshape(g, g)
    return np.repeat(np.repeat(grid, height // g, axis=0), width // g, axis=1)


def class_attention(params, cfg: ModelConfig, image: np.ndarray) -> np.ndarray:
    """Last-layer class-token -> patch attention averaged over heads, length N."""
    out = forward(strip_sam(params), cfg, image[None], capture_attn=True)
    attn = out.attn[-1]  # [1, h, N+1, N+1]
    return attn[0, :, 0, 1:].mean(axis=0)


def _image_for(cfg: ModelConfig, path) -> np.ndarray:
    from .data import resize_bilinear

    img = pnm.read_ppm(path)
    if img.shape[:2] != (cfg.image_size, cfg.image_size):
        img = resize_bilinear(img, cfg.image_size, cfg.image_size)
    return img.astype(np.float32)


def cmd_attnmap(cfg, args) -> int:
    from .alignment import response_maps

    ckpt_cfg, params = checkpoint.load(args.checkpoint)
    has_sam = any(k.startswith("sam.") for k in params)
    if args.response_map and not has_sam:
        raise UsageError("checkpoint is pruned: it has no alignment projections, so no response map")
    img = _image_for(ckpt_cfg, args.image).astype(params["head.weight"].dtype)
    s = ckpt_cfg.image_size
    pnm.write_pgm(args.out, normalize_map(upsample_map(class_attention(params, ckpt_cfg, img), s, s)))
    print(f"wrote attention map {args.out} ({s}x{s})")
    if args.response_map:
        out = forward(params, ckpt_cfg, img[None])
        rmap = response_maps(params, ckpt_cfg, out)[0]
        pnm.write_pgm(args.response_map, normalize_map(upsample_map(rmap.values, s, s)))
        print(f"wrote response map {args.response_map} ({s}x{s})")
    return EXIT_OK


def cmd_embed_dump(cfg, args) -> int:
    ckpt_cfg, params = checkpoint.load(args.checkpoint)
    samples = _load_eval_set(cfg, ckpt_cfg.image_size)
    images = stack_images(samples, "wl").astype(params["head.weight"].dtype)
    inf = strip_sam(params)
    tokens = class_tokens(inf, ckpt_cfg, images)
    preds = predict_logits(inf, ckpt_cfg, images).argmax(axis=1)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "label", "prediction"] + [f"c{i}" for i in range(tokens.shape[1])])
        for s, p, row in zip(samples, preds, tokens):
            writer.writerow([s.sample_id, s.label, int(p)] + [repr(float(x)) for x in row])
    print(f"wrote {len(samples)} rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key=value file; unknown keys are rejected")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="xmodal-vit", description="Cross-modal (WL/NBI) ViT polyp classifier.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--scope", choices=("ops", "model", "all"), default="all")
    g.add_argument("--trials", type=int, default=100, help="random trials per op")
    g.add_argument("--coords", type=int, default=20, help="parameter coordinates for the model check")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", parents=[common], help="write the synthetic paired dataset")
    s.add_argument("--out", help="output directory (default: config 'out')")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="k-fold training; checkpoints and CSV reports")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="WL accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attnmap", parents=[common], help="last-layer class attention as an 8-bit PGM")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--image", required=True, help="WL image (PPM)")
    a.add_argument("--out", required=True, help="output PGM")
    a.add_argument("--response-map", metavar="PGM", help="also export the alignment response map")
    a.set_defaults(func=cmd_attnmap)

    d = sub.add_parser("embed-dump", parents=[common], help="CSV of WL class tokens")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_embed_dump)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or a usage error (1)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        file_values = {}
        if args.config:
            try:
                text = Path(args.config).read_text()
            except OSError as exc:
                raise UsageError(f"cannot read config: {exc}") from None
            file_values = parse_config_text(text, args.config)
        cfg = resolve_config(file_values, args.overrides, args.seed)
        for line in format_config(cfg):
            log.info("config %s", line)
        return args.func(cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"xmodal-vit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"xmodal-vit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, pnm.PNMError, checkpoint.CheckpointError, OSError) as exc:
        print(f"xmodal-vit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining ValueErrors come from config values (mode, epochs, ...) or image checks
        print(f"xmodal-vit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
