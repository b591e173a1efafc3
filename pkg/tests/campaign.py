"""The desk-scale campaign behind the acceptance tests.

Building it from scratch takes roughly an hour on one CPU core, so the result
is cached under ``$ANCHORLAB_CAMPAIGN_DIR`` (default ``~/.cache/anchorlab``)
in a folder keyed by the hash of ``DESK``. Run this file directly to build the
cache ahead of a test session.
"""

import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict
from pathlib import Path

import torch

from anchorlab.adapters import AdapterConfig, EncoderConfig, RegressorConfig
from anchorlab.anchoring import LossWeights, TrainingConfig, evaluate_losses, train_domain
from anchorlab.data import DatasetConfig, DomainSpec, GenerationConfig, build_dataset, load_manifest, load_split
from anchorlab.prior import GeneratorConfig, PretrainConfig, pretrain_generator, weights_fingerprint
from anchorlab.registry import add_domain, file_hash, init_registry, load_adapter, open_registry
from anchorlab.translation import translate

log = logging.getLogger("campaign")

DESK = {
    "resolution": 32,
    "train_per_domain": 2000,
    "eval_count": 100,
    "kind_hue_spread": 0.2,
    "prior": {"steps": 10000, "batch_size": 16, "lr": 2e-4, "style_mixing": 0.9, "seed": 0},
    "anchor": {"steps": 5000, "batch_size": 4, "lr": 1e-4, "seed": 0},
    "regressor": {"width": 0.25, "norm": "none"},
    "fixed_inputs": 20,
}


def pretrain_config() -> PretrainConfig:
    pc = DESK["prior"]
    return PretrainConfig(generator=GeneratorConfig(resolution=DESK["resolution"]), steps=pc["steps"],
                          batch_size=pc["batch_size"], lr=pc["lr"], style_mixing=pc["style_mixing"], seed=pc["seed"],
                          snapshot_every=0, log_every=1000)


def key() -> str:
    # resolved configs, so a change of package defaults invalidates the cache
    text = json.dumps([DESK, asdict(pretrain_config()), training_config().to_dict()], sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def location() -> Path:
    base = Path(os.environ.get("ANCHORLAB_CAMPAIGN_DIR", Path.home() / ".cache" / "anchorlab"))
    return base / f"desk-{key()}"


def training_config(**overrides) -> TrainingConfig:
    a = DESK["anchor"]
    adapter = AdapterConfig(encoder=EncoderConfig(resolution=DESK["resolution"]),
                            regressor=RegressorConfig(**DESK["regressor"]))
    return TrainingConfig(steps=a["steps"], batch_size=a["batch_size"], lr=a["lr"], seed=a["seed"],
                          adapter=adapter, snapshot_every=0, log_every=250, **overrides)


def build(root: Path):
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    work = root.with_name(root.name + ".partial")
    shutil.rmtree(work, ignore_errors=True)
    work.mkdir(parents=True)
    res = DESK["resolution"]
    data_cfg = DatasetConfig(
        root=str(work / "data"),
        domains=[DomainSpec("rgb", "rgb"), DomainSpec("seg", "segmentation"), DomainSpec("edge", "edge")],
        train_per_domain=DESK["train_per_domain"], eval_count=DESK["eval_count"],
        generation=GenerationConfig(height=res, width=res, kind_hue_spread=DESK["kind_hue_spread"]),
    )
    build_dataset(data_cfg)
    manifest = load_manifest(work / "data")
    train = {d: load_split(manifest, d, "train") for d in ("rgb", "seg", "edge")}

    prior = pretrain_generator(train["rgb"].images, pretrain_config())
    record = {"prior_fingerprint": weights_fingerprint(prior)}

    reg = init_registry(work / "registry", prior, pretraining_data=str(work / "data"))
    reports = {}
    for d in ("rgb", "seg"):
        _, reports[d] = add_domain(reg, train[d], train[d].kind, training_config(), real_rgb=train["rgb"].images)
    record["hashes_before_edge"] = reg.checkpoint_hashes()
    fixed = load_split(manifest, "rgb", "eval").images[: DESK["fixed_inputs"]]
    torch.save(translate(fixed, load_adapter(reg, "rgb"), load_adapter(reg, "seg"), reg.prior()),
               work / "before_edge.pt")
    _, reports["edge"] = add_domain(reg, train["edge"], train["edge"].kind, training_config(),
                                    real_rgb=train["rgb"].images)
    record["seg_rec_curve"] = reports["seg"].rec

    # ablations on the segmentation domain, same seed and schedule as the default run
    seg_eval = load_split(manifest, "seg", "eval")
    frozen = reg.prior()
    record["ablation"] = {"default": evaluate_losses(load_adapter(reg, "seg"), frozen, seg_eval)}
    default_w = LossWeights.default_for(train["seg"].kind)
    for name, weights in (("no_rec", LossWeights(rec=0.0, latent=default_w.latent, adv=default_w.adv)),
                          ("no_latent", LossWeights(rec=default_w.rec, latent=0.0, adv=default_w.adv))):
        adapter, _ = train_domain(train["seg"], frozen, train["seg"].kind, training_config(weights=weights),
                                  real_rgb=train["rgb"].images)
        record["ablation"][name] = evaluate_losses(adapter, frozen, seg_eval)
    (work / "record.json").write_text(json.dumps(record, indent=2))
    os.replace(work, root)


def ensure() -> Path:
    root = location()
    if not (root / "record.json").exists():
        build(root)
    return root


class Campaign:
    def __init__(self, root: Path):
        self.root = root
        self.record = json.loads((root / "record.json").read_text())
        self.manifest = load_manifest(root / "data")
        self.registry = open_registry(root / "registry")
        self.prior = self.registry.prior()

    def adapter(self, domain_id):
        return load_adapter(self.registry, domain_id)

    def split(self, domain_id, split="eval"):
        return load_split(self.manifest, domain_id, split)

    def fixed_inputs(self):
        return self.split("rgb").images[: DESK["fixed_inputs"]]

    def checkpoint_hash(self, domain_id):
        return file_hash(self.registry.path / self.registry.entry(domain_id)["path"])


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    print(ensure())
