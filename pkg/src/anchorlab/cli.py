"""Command-line entry point: ``anchorlab <command> [options]``.

Every command accepts ``--config FILE`` (toml, yaml or json) and repeated
``--set key=value`` overrides; explicit flags win over both. The fully
resolved configuration is written next to the command's outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml

from . import metrics
from .adapters import config_hash, encode
from .anchoring import LossWeights, TrainingConfig
from .data import (
    DatasetConfig, ImageSet, build_dataset, load_files, load_folder, load_manifest, load_split, manifest_domain,
    save_png, write_json_atomic,
)
from .domain import DomainKind
from .errors import AnchorError, ConfigError, OverwriteRefused, StorageError
from .prior import PretrainConfig, dump_feature_channels, pretrain_generator, sample_latent, write_sample_grid
from .registry import add_domain, init_registry, list_domains, load_adapter, open_registry
from .translation import (
    MixSpec, anchor_features, multimodal_sample, retrieval_diagnostic, sample_multidomain, translate,
)
from .viz import save_grid

log = logging.getLogger("anchorlab")

REGISTRY_ENV = "ANCHORLAB_REGISTRY"
EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


class UsageError(ConfigError):
    """Bad invocation; the command's usage text is printed with the message."""


# ---------------------------------------------------------------------------
# configuration


def read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    text = path.read_text()
    try:
        if path.suffix == ".toml":
            import tomli

            data = tomli.loads(text)
        elif path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except Exception as exc:  # noqa: BLE001 - any parse failure is a config error
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return data


def apply_overrides(cfg: dict, pairs) -> dict:
    """``a.b=value`` pairs; values are parsed as yaml scalars."""
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key!r}: {p!r} is not a table")
        node[leaf] = yaml.safe_load(raw)
    return cfg


def merge_flags(cfg: dict, **flags) -> dict:
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return cfg


def resolved(args) -> dict:
    return apply_overrides(read_config(args.config), args.set)


def write_resolved(path, command: str, cfg: dict, seed=None) -> str:
    record = {"command": command, "config": cfg, "seed": seed}
    write_json_atomic(path, record)
    return str(path)


def registry_path(args) -> Path:
    path = args.registry or os.environ.get(REGISTRY_ENV)
    if not path:
        raise UsageError(f"no registry given; pass --registry or set {REGISTRY_ENV}")
    return Path(path)


def set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _csv(text):
    return [t for t in (s.strip() for s in text.split(",")) if t] if text else []


# ---------------------------------------------------------------------------
# image I/O


def read_inputs(path, kind: DomainKind, resolution: int) -> ImageSet:
    path = Path(path)
    if path.is_dir():
        return load_folder(path, "input", kind, resolution)
    if not path.exists():
        raise StorageError(f"input {path} does not exist")
    return load_files([path], kind, "input", resolution)


def write_outputs(images, kind: DomainKind, out, names) -> list[str]:
    """A single image goes to ``out`` itself unless ``out`` is a directory."""
    out = Path(out)
    written = []
    if len(images) == 1 and out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_png(out, images[0].numpy(), kind)
        return [str(out)]
    out.mkdir(parents=True, exist_ok=True)
    for img, name in zip(images, names):
        p = out / f"{Path(name).stem}.png"
        save_png(p, img.numpy(), kind)
        written.append(str(p))
    return written


def _side_car(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".config.json") if out.suffix else out / "resolved_config.json"


def _load_training_images(path, kind: DomainKind, resolution: int, domain_id: str) -> ImageSet:
    """A folder of images; a dataset domain folder (with train/) or a dataset root also work."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return load_split(load_manifest(path), domain_id, "train", resolution)
    if (path / "train").is_dir():
        path = path / "train"
    return load_folder(path, domain_id, kind, resolution)


def _infer_kind(path, domain_id: str) -> DomainKind | None:
    path = Path(path)
    for root in (path, path.parent, path.parent.parent):
        if (root / "manifest.json").exists():
            try:
                manifest = load_manifest(root)
                name = domain_id if root == path else path.relative_to(root).parts[0]
                return DomainKind.from_dict(manifest_domain(manifest, name)["kind"])
            except (AnchorError, ValueError):
                return None
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolved(args)
    merge_flags(cfg, root=args.out, seed=args.seed, train_per_domain=args.train_per_domain,
                eval_count=args.eval_count, workers=args.workers)
    if args.domains:
        # "id=render" names a domain; a bare render kind is its own id
        cfg["domains"] = [dict(zip(("domain_id", "render"), d.split("=", 1))) if "=" in d else d
                          for d in _csv(args.domains)]
    if args.resolution:
        gen = cfg.setdefault("generation", {})
        gen["height"] = gen["width"] = args.resolution
    if not cfg.get("root"):
        raise UsageError("no output directory; pass --out or set root in the config")
    config = DatasetConfig.from_dict(cfg)
    manifest = build_dataset(config)
    root = Path(config.root)
    full = {**asdict(config), "domains": [asdict(d) for d in config.domains]}
    write_resolved(root / "resolved_config.json", "gen-data", full, config.seed)
    print(root / "manifest.json")
    return EXIT_OK if manifest else EXIT_IO


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise OverwriteRefused(f"{out} already exists and is not empty")
    cfg = resolved(args)
    merge_flags(cfg, steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    gen = cfg.setdefault("generator", {})
    merge_flags(gen, backbone=args.backbone, resolution=args.resolution)
    config = PretrainConfig.from_dict(cfg)
    if config.steps < 1:
        raise ConfigError(f"steps must be >= 1, got {config.steps}")
    set_determinism(config.seed)
    rgb = _load_training_images(args.data, DomainKind.continuous(3), config.generator.resolution, args.domain)
    # snapshots are staged outside the registry, which must be empty at creation
    with tempfile.TemporaryDirectory(prefix=".pretrain-", dir=out.parent if out.parent.exists() else None) as stage:
        prior = pretrain_generator(rgb.images, config, snapshot_dir=Path(stage) / "snapshots")
        data_dir = Path(rgb.files[0]).parent if rgb.files else Path(args.data)
        registry = init_registry(out, prior, pretraining_data=data_dir)
        run = out / "runs" / "pretrain"
        run.mkdir(parents=True)
        if (Path(stage) / "snapshots").exists():
            shutil.move(str(Path(stage) / "snapshots"), str(run / "snapshots"))
    write_sample_grid(prior, run / "samples.png", seed=config.seed)
    write_resolved(run / "resolved_config.json", "pretrain", asdict(config), config.seed)
    print(registry.manifest_path)
    return EXIT_OK


def cmd_train_domain(args) -> int:
    registry = open_registry(registry_path(args))
    cfg = resolved(args)
    merge_flags(cfg, steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                snapshot_every=args.snapshot_every)
    if args.no_adversarial:
        cfg["adversarial_enabled"] = False
    if any(v is not None for v in (args.lambda_rec, args.lambda_latent, args.lambda_adv)):
        base = cfg.get("weights") or {}
        cfg["weights"] = merge_flags(dict(base), rec=args.lambda_rec, latent=args.lambda_latent, adv=args.lambda_adv)
    config = TrainingConfig.from_dict(cfg)
    config.validate()

    kind = DomainKind.parse(args.kind) if args.kind else _infer_kind(args.data, args.domain)
    if kind is None:
        raise UsageError("cannot infer the domain kind; pass --kind")
    if config.weights is None:
        config.weights = LossWeights.default_for(kind)
    set_determinism(config.seed)
    prior = registry.prior()
    resolution = prior.config.resolution
    dataset = _load_training_images(args.data, kind, resolution, args.domain)
    real_rgb = None
    if config.adversarial_enabled:
        if not registry.pretraining_data:
            raise ConfigError("registry has no pretraining data for the adversarial term; use --no-adversarial")
        real_rgb = load_folder(registry.pretraining_data, "rgb", DomainKind.continuous(3), resolution).images
    entry, report = add_domain(registry, dataset, kind, config, domain_id=args.domain, real_rgb=real_rgb)
    run = registry.path / "runs" / args.domain
    full = config.to_dict()
    full["kind"] = kind.to_dict()
    write_resolved(run / "resolved_config.json", "train-domain", full, config.seed)
    print(json.dumps(entry, sort_keys=True))
    return EXIT_OK


def cmd_translate(args) -> int:
    registry = open_registry(registry_path(args))
    prior = registry.prior()
    src, dst = load_adapter(registry, args.src), load_adapter(registry, args.dst)
    inputs = read_inputs(args.inp, src.kind, prior.config.resolution)
    outs = torch.cat([translate(inputs.images[i:i + 50], src, dst, prior)
                      for i in range(0, len(inputs), 50)])
    names = [Path(f).name for f in inputs.files]
    written = write_outputs(outs, dst.kind, args.out, names)
    if args.grid:
        cells = [c for pair in zip(inputs.images, outs) for c in pair]
        out = Path(args.out)
        grid = out.with_name(out.stem + "_grid.png") if out.suffix else out / "grid.png"
        save_grid(cells, grid, ncols=2)
        written.append(str(grid))
    write_resolved(_side_car(args.out), "translate",
                   {"registry": str(registry.path), "from": args.src, "to": args.dst, "input": str(args.inp)})
    for w in written:
        print(w)
    return EXIT_OK


def cmd_sample(args) -> int:
    registry = open_registry(registry_path(args))
    prior = registry.prior()
    adapters = [load_adapter(registry, d) for d in _csv(args.domains)]
    sample = sample_multidomain(prior, adapters, args.seed, args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rgb_kind = DomainKind.continuous(3)
    for i in range(args.n):
        save_png(out / f"native_rgb_{args.seed}_{i}.png", sample.native_rgb[i].numpy(), rgb_kind)
        for a in adapters:
            save_png(out / f"{a.domain_id}_{args.seed}_{i}.png", sample.outputs[a.domain_id][i].numpy(), a.kind)
    write_resolved(out / "resolved_config.json", "sample",
                   {"registry": str(registry.path), "domains": _csv(args.domains), "n": args.n}, args.seed)
    print(out)
    return EXIT_OK


def cmd_mix(args) -> int:
    registry = open_registry(registry_path(args))
    prior = registry.prior()
    src = load_adapter(registry, args.src)
    dst = load_adapter(registry, args.dst) if args.dst else None
    mix = MixSpec.parse(args.slots, args.seed)
    x = read_inputs(args.inp, src.kind, prior.config.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind = dst.kind if dst else DomainKind.continuous(3)
    for v in range(args.variants):
        spec = MixSpec(mix.start, mix.end, mix.seed + v)
        y = multimodal_sample(x.images, src, dst, prior, spec)
        if dst is None:
            y = y.clamp(-1, 1)
        for i, name in enumerate(x.files):
            save_png(out / f"{Path(name).stem}_mix{v}.png", y[i].numpy(), kind)
    write_resolved(out / "resolved_config.json", "mix",
                   {"registry": str(registry.path), "from": args.src, "to": args.dst, "slots": args.slots,
                    "variants": args.variants}, args.seed)
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    registry = open_registry(registry_path(args))
    prior = registry.prior()
    src, dst = load_adapter(registry, args.src), load_adapter(registry, args.dst)
    manifest = load_manifest(args.pairs)
    res = prior.config.resolution
    xs = load_split(manifest, args.data_from or args.src, args.split, res)
    ys = load_split(manifest, args.data_to or args.dst, args.split, res)
    if args.n:
        xs, ys = xs.subset(range(min(args.n, len(xs)))), ys.subset(range(min(args.n, len(ys))))
    n = len(xs)
    preds = torch.cat([translate(xs.images[i:i + 50], src, dst, prior) for i in range(0, n, 50)])
    # shuffled-input baseline: each target scored against another scene's translation
    perm = torch.from_numpy(np.random.default_rng(args.seed).permutation(n))
    shuffled = preds[perm]

    extractor = _extractor(args.extractor, res)
    rows = []
    if dst.kind.is_categorical:
        rows.append({"metric": f"iou {args.src}->{args.dst}", "value": metrics.mean_iou(preds, ys.images, dst.kind.channels), "n": n})
        rows.append({"metric": "iou shuffled baseline", "value": metrics.mean_iou(shuffled, ys.images, dst.kind.channels), "n": n})
    else:
        corr = metrics.correspondence(preds, ys.images, dst.kind, extractor)
        rows.append({"metric": f"mse {args.src}->{args.dst}", "value": corr["mse"], "n": n})
        rows.append({"metric": f"perceptual-proxy {args.src}->{args.dst}", "value": corr["perceptual"], "n": n})
    rows.append({"metric": "retrieval accuracy", "value": retrieval_diagnostic(xs.images, ys.images, src, dst, prior), "n": n})

    # distribution distances of the prior-native RGB rendering against real RGB eval images
    rgb_id = args.rgb_domain
    if any(d["domain_id"] == rgb_id for d in manifest["domains"]):
        real = load_split(manifest, rgb_id, args.split, res).images
        native = torch.cat([prior.to_rgb_head(anchor_features(xs.images[i:i + 50], src, prior))
                            for i in range(0, n, 50)]).clamp(-1, 1)
        ea, eb = metrics.embed(extractor, native), metrics.embed(extractor, real)
        fid = metrics.fid_proxy(metrics.GaussianStats.from_embeddings(ea), metrics.GaussianStats.from_embeddings(eb))
        rows.append({"metric": "fid-proxy native-rgb", "value": fid, "n": n})
        rows.append({"metric": "kid-proxy native-rgb x1e3", "value": 1e3 * metrics.kid_proxy(ea, eb), "n": n})

    chash = config_hash({"src": src.config_hash, "dst": dst.config_hash, "prior": registry.fingerprint,
                         "split": args.split, "n": n, "seed": args.seed})
    text = metrics.format_report(rows, chash, title=f"{args.src} -> {args.dst}")
    as_json = metrics.report_json(rows, chash)
    if args.report:
        report = Path(args.report)
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(as_json + "\n" if args.json else text)
        write_resolved(_side_car(report), "evaluate",
                       {"registry": str(registry.path), "pairs": str(args.pairs), "from": args.src, "to": args.dst,
                        "split": args.split, "n": n}, args.seed)
    print(as_json if args.json else text, end="" if not args.json else "\n")
    return EXIT_OK


def _extractor(path, resolution: int):
    if path and Path(path).exists():
        return metrics.load_extractor(path)
    net = metrics.train_extractor(resolution=resolution)
    if path:
        metrics.save_extractor(net, path)
    return net


def cmd_inspect_features(args) -> int:
    registry = open_registry(registry_path(args))
    prior = registry.prior()
    if args.inp:
        if not args.src:
            raise UsageError("--in needs --from")
        adapter = load_adapter(registry, args.src)
        x = read_inputs(args.inp, adapter.kind, prior.config.resolution)
        with torch.no_grad():
            code = encode(adapter, x.images[:1])
    else:
        code = sample_latent(prior, args.seed, 1)
    channels = [int(c) for c in _csv(args.channels)] or list(range(min(16, prior.feature_shape[0])))
    dump_feature_channels(prior, code, channels, path=args.out)
    write_resolved(_side_car(args.out), "inspect-features",
                   {"registry": str(registry.path), "channels": channels, "from": args.src}, args.seed)
    print(args.out)
    return EXIT_OK


def cmd_list_domains(args) -> int:
    registry = open_registry(registry_path(args))
    entries = list_domains(registry)
    if args.json:
        print(json.dumps({"prior": registry.manifest["prior"], "domains": entries}, indent=2, sort_keys=True))
    else:
        for e in entries:
            kind = DomainKind.from_dict(e["kind"])
            spec = f"{kind.value_model}:{kind.channels}"
            print(f"{e['domain_id']:<16} {spec:<14} {e['content_hash'][:12]}  {e['created_at']}")
        if not entries:
            print("(no domains)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchorlab", description="Latent-space anchoring toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="toml, yaml or json config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.set_defaults(fn=fn)
        return p

    def with_registry(p):
        p.add_argument("--registry", help=f"registry directory (default: ${REGISTRY_ENV})")
        return p

    p = add("gen-data", cmd_gen_data, "render a synthetic multi-domain dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--domains", help="comma-separated render kinds or id=kind pairs, e.g. rgb,seg=segmentation")
    p.add_argument("--train-per-domain", type=int)
    p.add_argument("--eval-count", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--workers", type=int)

    p = add("pretrain", cmd_pretrain, "train the generator prior and start a registry")
    p.add_argument("--data", required=True, help="image folder or dataset root")
    p.add_argument("--domain", default="rgb", help="dataset domain holding the RGB images")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone", choices=["style", "plain"])
    p.add_argument("--resolution", type=int)

    p = with_registry(add("train-domain", cmd_train_domain, "anchor a new domain against the prior"))
    p.add_argument("--domain", required=True)
    p.add_argument("--kind", help="continuous:C or categorical:K")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--snapshot-every", type=int)
    p.add_argument("--lambda-rec", type=float)
    p.add_argument("--lambda-latent", type=float)
    p.add_argument("--lambda-adv", type=float)
    p.add_argument("--no-adversarial", action="store_true")

    p = with_registry(add("translate", cmd_translate, "translate images between two registered domains"))
    p.add_argument("--from", dest="src", required=True)
    p.add_argument("--to", dest="dst", required=True)
    p.add_argument("--in", dest="inp", required=True, help="image file or folder")
    p.add_argument("--out", required=True, help="output file (single input) or folder")
    p.add_argument("--grid", action="store_true", help="also write an input/output panel")

    p = with_registry(add("sample", cmd_sample, "decode seeded latents into several domains"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domains", default="")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", default="samples")

    p = with_registry(add("mix", cmd_mix, "resample late latent slots of an encoded image"))
    p.add_argument("--from", dest="src", required=True)
    p.add_argument("--to", dest="dst")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--slots", required=True, help="start:end slot range to replace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variants", type=int, default=4)
    p.add_argument("--out", default="mixed")

    p = with_registry(add("evaluate", cmd_evaluate, "paired translation metrics on a dataset split"))
    p.add_argument("--pairs", required=True, help="dataset root or manifest with paired eval split")
    p.add_argument("--from", dest="src", required=True)
    p.add_argument("--to", dest="dst", required=True)
    p.add_argument("--data-from", help="dataset domain id of the source images (default: --from)")
    p.add_argument("--data-to", help="dataset domain id of the targets (default: --to)")
    p.add_argument("--split", default="eval")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rgb-domain", default="rgb")
    p.add_argument("--extractor", help="extractor checkpoint; trained and saved here if missing")
    p.add_argument("--report", help="write the report to this file")
    p.add_argument("--json", action="store_true")

    p = with_registry(add("inspect-features", cmd_inspect_features, "dump pre-ToRGB feature channels"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from", dest="src")
    p.add_argument("--in", dest="inp")
    p.add_argument("--channels", default="")
    p.add_argument("--out", default="features.png")

    p = with_registry(add("list-domains", cmd_list_domains, "list registered domains"))
    p.add_argument("--json", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except AnchorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
