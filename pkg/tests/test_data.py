import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from anchorlab.data import (
    SHAPE_KINDS, DatasetConfig, DomainSpec, GenerationConfig, SceneSpec, Shape, _ownership, build_dataset,
    generate_scene, load_folder, load_manifest, load_split, render_domain,
)
from anchorlab.domain import DomainKind
from anchorlab.errors import ConfigError, DataError, DomainError, StorageError

SMALL = GenerationConfig(height=32, width=32)


def test_scene_is_deterministic():
    assert generate_scene(7, SMALL) == generate_scene(7, SMALL)


def test_neighbouring_seeds_differ():
    for s in range(100):
        assert generate_scene(s, SMALL).shapes != generate_scene(s + 1, SMALL).shapes


def test_zero_max_shapes_rejected():
    with pytest.raises(ConfigError):
        generate_scene(0, GenerationConfig(min_shapes=0, max_shapes=0))


@pytest.mark.parametrize("bad", [dict(height=0), dict(width=-3), dict(supersample=4), dict(scale_range=(0.01, 0.2))])
def test_invalid_generation_config(bad):
    with pytest.raises(ConfigError):
        generate_scene(0, GenerationConfig(**bad))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**9))
def test_scene_invariants(seed):
    scene = generate_scene(seed, SMALL)
    assert 1 <= len(scene.shapes) <= 4
    for s in scene.shapes:
        assert 0 <= s.center[0] <= 1 and 0 <= s.center[1] <= 1
        assert 0.05 <= s.scale <= 0.4
        assert s.kind in SHAPE_KINDS


def test_kind_hue_bands():
    import colorsys

    cfg = GenerationConfig(height=32, width=32, kind_hue_spread=0.2)
    for seed in range(50):
        banded, free = generate_scene(seed, cfg), generate_scene(seed, SMALL)
        # same draws, only the colour changes
        assert [(s.kind, s.center, s.scale) for s in banded.shapes] == [(s.kind, s.center, s.scale) for s in free.shapes]
        for s in banded.shapes:
            hue = colorsys.rgb_to_hsv(*s.color)[0]
            centre = SHAPE_KINDS.index(s.kind) / len(SHAPE_KINDS)
            assert min(abs(hue - centre), 1 - abs(hue - centre)) <= 0.1 + 1e-9
    for bad in (0.0, 1.5):
        with pytest.raises(ConfigError):
            generate_scene(0, GenerationConfig(kind_hue_spread=bad))


def _single(kind, center=(0.5, 0.5), scale=0.3, color=(0.9, 0.2, 0.1)):
    return SceneSpec(0, (32, 32), (Shape(kind, center, scale, 0.3, color),))


def test_single_ellipse_segmentation_classes():
    seg = render_domain(_single("ellipse"), "segmentation", SMALL)
    assert set(np.unique(seg.pixels)) == {0, 1 + SHAPE_KINDS.index("ellipse")}


def test_rgb_and_segmentation_are_pixel_aligned():
    scene = generate_scene(11, SMALL)
    rgb = render_domain(scene, "rgb", SMALL).pixels
    owner = _ownership(scene, SMALL.supersample)
    interior = (owner == owner[..., :1]).all(-1) & (owner[..., 0] >= 0)
    seg = render_domain(scene, "segmentation", SMALL).pixels
    assert interior.any()
    for y, x in zip(*np.nonzero(interior)):
        shape = scene.shapes[owner[y, x, 0]]
        assert seg[y, x] == 1 + SHAPE_KINDS.index(shape.kind)
        np.testing.assert_allclose((rgb[:, y, x] + 1) / 2, shape.color, atol=1e-6)


def test_empty_scene_has_no_edges():
    empty = SceneSpec(0, (16, 16), ())
    edge = render_domain(empty, "edge", SMALL)
    # zero edge strength is stored as the low end of the continuous range
    assert (edge.pixels == -1).all()


def test_render_ranges():
    scene = generate_scene(3, SMALL)
    for kind in ("rgb", "edge", "keypoint"):
        px = render_domain(scene, kind, SMALL).pixels
        assert px.min() >= -1 and px.max() <= 1
    seg = render_domain(scene, "segmentation", SMALL).pixels
    assert seg.dtype == np.int64 and seg.min() >= 0 and seg.max() <= 3


def test_keypoint_peaks_at_centres():
    scene = _single("rectangle", center=(0.5, 0.5))
    kp = render_domain(scene, "keypoint", SMALL).pixels[0]
    y, x = np.unravel_index(kp.argmax(), kp.shape)
    assert abs(y + 0.5 - 16) <= 1 and abs(x + 0.5 - 16) <= 1


def test_unsupported_domain():
    with pytest.raises(DomainError):
        render_domain(generate_scene(0, SMALL), "depth", SMALL)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_build_dataset_counts_and_determinism(tmp_path):
    cfg = DatasetConfig(root=str(tmp_path / "a"), generation=GenerationConfig(height=16, width=16))
    manifest = build_dataset(cfg)
    assert len(manifest["domains"]) == 2
    assert sum(len(d["splits"]["train"]) for d in manifest["domains"]) == 400
    assert sum(len(d["splits"]["eval"]) for d in manifest["domains"]) == 100
    assert len(manifest["pairing"]) == 50
    first = _tree_digest(tmp_path / "a")
    build_dataset(cfg)
    assert _tree_digest(tmp_path / "a") == first


def test_train_splits_are_unpaired(tiny_dataset):
    seeds = {}
    for d in tiny_dataset["domains"]:
        seeds[d["domain_id"]] = {int(Path(f).stem) for f in d["splits"]["train"]}
    ids = list(seeds)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            assert not seeds[a] & seeds[b]
    eval_seeds = {row["seed"] for row in tiny_dataset["pairing"]}
    for row in tiny_dataset["pairing"]:
        assert set(row["files"]) == set(ids)
    assert not eval_seeds & set().union(*seeds.values())


def test_overlapping_train_ranges_rejected(tmp_path):
    cfg = DatasetConfig(root=str(tmp_path), train_ranges={"rgb": (100, 200), "seg": (150, 250)})
    with pytest.raises(ConfigError):
        build_dataset(cfg)


def test_train_range_may_not_touch_eval(tmp_path):
    cfg = DatasetConfig(root=str(tmp_path), eval_count=50, train_ranges={"rgb": (10, 20), "seg": (100, 110)})
    with pytest.raises(ConfigError):
        build_dataset(cfg)


def test_unwritable_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StorageError):
        build_dataset(DatasetConfig(root=str(blocker / "sub")))


def test_eval_split_matches_rerender(tiny_dataset):
    gen = GenerationConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in tiny_dataset["generation"].items()})
    seg = load_split(tiny_dataset, "seg", "eval")
    for seed, img in zip([r["seed"] for r in tiny_dataset["pairing"]], seg.images):
        expected = render_domain(generate_scene(seed, gen), "segmentation", gen).pixels
        assert np.array_equal(img.numpy(), expected)


def test_manifest_format(tiny_dataset):
    assert tiny_dataset["format"] == "anchor-data/1"
    json.dumps({k: v for k, v in tiny_dataset.items()})


# ---------------------------------------------------------------------------
# folder ingestion


def _write_images(folder: Path, n: int, size=20):
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(folder / f"{i:02d}.png")


def test_load_folder_length_and_range(tmp_path):
    _write_images(tmp_path / "imgs", 10)
    ds = load_folder(tmp_path / "imgs", "rgb", DomainKind.continuous(3), resolution=16)
    assert len(ds) == 10
    assert ds.images.shape == (10, 3, 16, 16)
    assert ds.images.min() >= -1 and ds.images.max() <= 1


def test_load_folder_shuffle_is_seeded(tmp_path):
    _write_images(tmp_path / "imgs", 10)
    kind = DomainKind.continuous(3)
    a = load_folder(tmp_path / "imgs", "rgb", kind, 16, shuffle_seed=3)
    b = load_folder(tmp_path / "imgs", "rgb", kind, 16, shuffle_seed=3)
    plain = load_folder(tmp_path / "imgs", "rgb", kind, 16)
    assert a.files == b.files
    assert a.files != plain.files
    assert torch.equal(a.images, b.images)


def test_categorical_index_out_of_range(tmp_path):
    folder = tmp_path / "seg"
    folder.mkdir()
    Image.fromarray(np.full((8, 8), 7, dtype=np.uint8)).save(folder / "a.png")
    with pytest.raises(DataError):
        load_folder(folder, "seg", DomainKind.categorical(4), resolution=8)


def test_empty_folder(tmp_path):
    (tmp_path / "none").mkdir()
    with pytest.raises(DataError):
        load_folder(tmp_path / "none", "rgb", DomainKind.continuous(3))


def test_undecodable_files_skipped(tmp_path, caplog):
    _write_images(tmp_path / "imgs", 3)
    (tmp_path / "imgs" / "broken.png").write_bytes(b"not an image")
    ds = load_folder(tmp_path / "imgs", "rgb", DomainKind.continuous(3), 16)
    assert len(ds) == 3
    assert "broken.png" in caplog.text


def test_all_undecodable(tmp_path):
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "x.png").write_bytes(b"junk")
    with pytest.raises(DataError):
        load_folder(tmp_path / "bad", "rgb", DomainKind.continuous(3))


def test_load_manifest_rejects_other_formats(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other/1"}))
    with pytest.raises(DataError):
        load_manifest(tmp_path)
