import json
import math

import numpy as np
import pytest

from covermap.errors import ConfigError, DegenerateInput
from covermap.raster import LabelMask, RasterF32
from covermap.stats import SampleRecord, dataset_statistics, extract_samples, sample_entropy


def _random_mask(rng, size=64, classes=7):
    bands = rng.random((size, size, classes)) < rng.uniform(0.02, 0.3, classes)
    return LabelMask.from_classes(bands)


def _recount(masks):
    """Per-pixel brute force over a list of masks."""
    pixels = multi = unl = 0
    counts = None
    ents, ncls = [], []
    for m in masks:
        c = np.zeros(m.classes, int)
        for y in range(m.height):
            for x in range(m.width):
                labs = [k for k in range(m.classes) if m.data[y, x, k]]
                pixels += 1
                multi += len(labs) >= 2
                unl += not labs
                for k in labs:
                    c[k] += 1
        counts = c if counts is None else counts + c
        ncls.append(int((c > 0).sum()))
        if c.sum():
            f = c[c > 0] / c.sum()
            ents.append(-sum(v * math.log(v) for v in f))
    return pixels, multi, unl, counts, ents, ncls


def test_statistics_match_brute_force():
    rng = np.random.default_rng(0)
    masks = [_random_mask(rng) for _ in range(4)]
    masks.append(LabelMask.from_classes(np.zeros((64, 64, 7), bool)))  # nothing labelled
    st = dataset_statistics(masks)
    pixels, multi, unl, counts, ents, ncls = _recount(masks)
    assert st.nb_samples == 5
    assert st.share_multilabel == multi / pixels
    assert st.unlabelled_freq == unl / pixels
    assert st.class_pixel_freq.tolist() == (counts / pixels).tolist()
    assert st.entropy_mean == pytest.approx(np.mean(ents), abs=1e-12)
    assert st.nb_class_mean == np.mean(ncls)


def test_entropy_edge_cases():
    one = np.zeros((4, 4, 7), bool)
    one[..., 2] = True
    assert sample_entropy(LabelMask.from_classes(one)) == 0.0
    lab = np.arange(49).reshape(7, 7) % 7
    assert abs(sample_entropy(LabelMask.from_label_image(lab, 7)) - math.log(7)) < 1e-9
    with pytest.raises(DegenerateInput):
        sample_entropy(LabelMask.from_classes(np.zeros((2, 2, 7), bool)))


def test_outputs_json_and_csv():
    rng = np.random.default_rng(1)
    st = dataset_statistics([_random_mask(rng, 16)], class_names=list("abcdefg"))
    d = json.loads(st.to_json())
    assert set(d) == {"share_multilabel", "entropy", "entropy_normalized", "nb_class",
                      "nb_samples", "per_class_frequency"}
    assert list(d["per_class_frequency"]) == list("abcdefg") + ["unlabelled"]
    lines = st.to_csv().splitlines()
    assert lines[0] == "stat,value" and lines[-1].startswith("frequency:unlabelled,")


def test_empty_dataset():
    with pytest.raises(DegenerateInput):
        dataset_statistics([])


def test_extract_samples_grid():
    mask = LabelMask.from_label_image(np.zeros((100, 130), int), 3)
    img = RasterF32(np.zeros((100, 130, 2), np.float32))
    s = extract_samples(img, mask, 48)
    # columns 0, 48, 82 and rows 0, 48, 52: last ones anchored on the edge
    assert [r.id for r in s] == ["0_0", "48_0", "82_0", "0_48", "48_48", "82_48", "0_52", "48_52", "82_52"]
    assert all(isinstance(r, SampleRecord) and r.mask.shape == (48, 48, 4) for r in s)
    with pytest.raises(ConfigError):
        extract_samples(img, mask, 200)
