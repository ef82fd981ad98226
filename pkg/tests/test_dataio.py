import json
from dataclasses import replace

import numpy as np
import pytest

from textrefiner.dataio import (
    BlobSizeError,
    BundleValidationError,
    MissingBlobError,
    SplitError,
    SynthConfigError,
    SynthSpec,
    class_attribute_subsets,
    generate,
    load_bundle,
    save_bundle,
    split_views,
)

SMALL = SynthSpec(d=16, n_tokens=6, n_base=4, n_novel=3, samples_per_class=8, pool=8, attrs_per_class=2, distractors=2, seed=3)


@pytest.fixture(scope="module")
def bundle():
    return generate(SMALL)


def test_shapes(bundle):
    assert bundle.class_embeddings.shape == (7, 16)
    assert bundle.tokens.shape == (56, 6, 16)
    assert bundle.attn.shape == (56, 6)
    assert bundle.globals_.shape == (56, 16)
    assert np.bincount(bundle.labels).tolist() == [8] * 7


def test_invariants(bundle):
    np.testing.assert_allclose(np.linalg.norm(bundle.class_embeddings, axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(bundle.attn.sum(axis=1), 1.0, atol=1e-6)
    assert (bundle.attn >= 0).all()


def test_generation_is_deterministic(bundle):
    again = generate(SMALL)
    for name in ("class_embeddings", "labels", "globals_", "tokens", "attn"):
        assert getattr(bundle, name).tobytes() == getattr(again, name).tobytes()


def test_seed_changes_data(bundle):
    other = generate(replace(SMALL, seed=4))
    assert bundle.tokens.tobytes() != other.tokens.tobytes()


def test_round_trip_exact(bundle, tmp_path):
    loaded = load_bundle(save_bundle(bundle, tmp_path / "b"))
    for name in ("class_embeddings", "labels", "globals_", "tokens", "attn"):
        assert getattr(bundle, name).tobytes() == getattr(loaded, name).tobytes(), name
    assert loaded.manifest() == bundle.manifest()


def test_save_twice_byte_identical(bundle, tmp_path):
    a, b = save_bundle(bundle, tmp_path / "a"), save_bundle(bundle, tmp_path / "b")
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_truncated_blob(bundle, tmp_path):
    out = save_bundle(bundle, tmp_path / "b")
    raw = (out / "tokens.bin").read_bytes()
    (out / "tokens.bin").write_bytes(raw[:-4])
    with pytest.raises(BlobSizeError) as err:
        load_bundle(out)
    assert err.value.blob == "tokens.bin"
    assert err.value.expected == len(raw)
    assert err.value.actual == len(raw) - 4


def test_missing_blob(bundle, tmp_path):
    out = save_bundle(bundle, tmp_path / "b")
    (out / "attn.bin").unlink()
    with pytest.raises(MissingBlobError):
        load_bundle(out)


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingBlobError):
        load_bundle(tmp_path)


def test_bad_manifest_version(bundle, tmp_path):
    out = save_bundle(bundle, tmp_path / "b")
    man = json.loads((out / "manifest.json").read_text())
    man["format_version"] = 99
    (out / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(BundleValidationError):
        load_bundle(out)


def test_bad_attention_row_names_sample(bundle, tmp_path):
    out = save_bundle(bundle, tmp_path / "b")
    attn = np.frombuffer((out / "attn.bin").read_bytes(), dtype="<f4").copy().reshape(56, 6)
    attn[5, 0] += 0.5
    (out / "attn.bin").write_bytes(attn.tobytes())
    with pytest.raises(BundleValidationError) as err:
        load_bundle(out)
    assert err.value.sample == 5


def test_attribute_sharing():
    spec = SynthSpec()
    subsets = class_attribute_subsets(spec)
    base, novel = subsets[: spec.n_base], subsets[spec.n_base :]
    seen = set().union(*map(set, base))
    assert len(set(subsets)) == len(subsets)
    for s in novel:
        assert set(s) <= seen
        assert s not in base


def test_noiseless_separability_oracle():
    spec = replace(SMALL, noise=0.0)
    b = generate(spec)
    # without noise each class repeats one sample exactly
    for c in range(b.n_classes):
        rows = b.tokens[b.labels == c]
        assert (rows == rows[0]).all()
        g = b.globals_[b.labels == c]
        assert (g == g[0]).all()
    # nearest class centroid of globals recovers every label
    cents = np.stack([b.globals_[b.labels == c].mean(axis=0) for c in range(b.n_classes)])
    pred = np.argmax(b.globals_ @ cents.T, axis=1)
    assert (pred == b.labels).all()


def test_attention_favours_attribute_tokens(bundle):
    assert np.isclose(bundle.attn.max(axis=1) / bundle.attn.min(axis=1), 3.0, rtol=1e-5).all()


def test_split_sizes():
    b = generate(SynthSpec())
    train, test, novel = split_views(b)
    assert len(train) == 8 * 24 and len(test) == 8 * 8 and len(novel) == 8 * 32
    assert set(train.labels.tolist()) == set(range(8))
    assert set(novel.labels.tolist()) == set(range(8))
    assert not set(train.indices) & set(test.indices)
    for c in range(8):
        idx = np.flatnonzero(b.labels == c)
        assert train.indices[train.labels == c].tolist() == idx[:24].tolist()


def test_split_too_small():
    b = generate(replace(SMALL, samples_per_class=1))
    with pytest.raises(SplitError):
        split_views(b)


@pytest.mark.parametrize(
    "change",
    [dict(d=0), dict(noise=-1.0), dict(distractors=6), dict(attrs_per_class=9), dict(pool=3, attrs_per_class=3, n_base=4)],
)
def test_bad_spec(change):
    with pytest.raises(SynthConfigError):
        generate(replace(SMALL, **change))
