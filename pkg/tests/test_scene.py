import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splatmask.scene import (
    REGIONS,
    ColorTensor,
    GaussianPrimitive,
    Scene,
    SceneError,
    SceneParseError,
    SchemaVersionError,
    check_epsilon_range,
    dumps_scene,
    load_scene,
    loads_scene,
    parse_regions,
    save_scene,
    select_region,
    synth_scene,
)


def test_single_blob_primitive():
    s = synth_scene(1, 1, "blob")
    assert s.n == 1
    assert abs(np.linalg.norm(s.rotations[0]) - 1.0) < 1e-12


def test_head_like_has_every_region():
    s = synth_scene(7, 500, "head_like")
    assert set(s.regions) == set(REGIONS)


def test_synth_is_deterministic():
    assert dumps_scene(synth_scene(7, 500, "head_like")) == dumps_scene(synth_scene(7, 500, "head_like"))
    assert dumps_scene(synth_scene(7, 50, "head_like")) != dumps_scene(synth_scene(8, 50, "head_like"))


@pytest.mark.parametrize("n", [0, -3])
def test_synth_rejects_empty(n):
    with pytest.raises(ValueError):
        synth_scene(1, n, "blob")


def test_synth_rejects_unknown_layout():
    with pytest.raises(ValueError):
        synth_scene(1, 5, "torus")


@pytest.mark.parametrize("layout,n,bands", [("blob", 10, 1), ("head_like", 40, 2), ("head_like", 3, 1)])
def test_file_round_trip(tmp_path, layout, n, bands):
    s = synth_scene(1, n, layout, sh_bands=bands)
    p = tmp_path / "s.json"
    save_scene(s, p)
    back = load_scene(p)
    assert back.equals(s)
    assert back.sh_rest.shape == (n, bands * bands - 1, 3)


def _scene_text(**edits):
    d = json.loads(dumps_scene(synth_scene(1, 3, "blob")))
    for key, value in edits.items():
        if key.startswith("p1_"):
            d["primitives"][1][key[3:]] = value
        else:
            d[key] = value
    return json.dumps(d)


def test_load_rejects_bad_opacity():
    with pytest.raises(SceneError, match="primitive 1"):
        loads_scene(_scene_text(p1_opacity=1.5))


def test_load_rejects_empty_primitive_list():
    with pytest.raises(SceneError):
        loads_scene(_scene_text(primitives=[], count=0))


def test_load_rejects_unknown_schema():
    with pytest.raises(SchemaVersionError):
        loads_scene(_scene_text(schema_version=99))


def test_parse_error_carries_line_and_field():
    text = dumps_scene(synth_scene(1, 3, "blob")).replace('"scale": [', '"scale": ["x", ', 1)
    with pytest.raises(SceneParseError, match=r"line 7, primitive 0: field 'scale'"):
        loads_scene(text)
    with pytest.raises(SceneParseError, match="line"):
        loads_scene("{ not json")


def test_scene_arrays_are_read_only():
    s = synth_scene(1, 4, "blob")
    with pytest.raises(ValueError):
        s.sh_dc[0, 0] = 1.0


def test_scene_validation():
    s = synth_scene(1, 4, "blob")
    with pytest.raises(SceneError, match="primitive 2"):
        s.replace(scales=np.where(np.arange(4)[:, None] == 2, 0.0, s.scales))
    q = s.rotations.copy()
    q[0] *= 1.01
    with pytest.raises(SceneError, match="unit quaternion"):
        s.replace(rotations=q)


def test_from_primitives_and_primitive_view():
    p = GaussianPrimitive((0, 0, 0), (1, 0, 0, 0), (1, 1, 1), 0.5, (0, 0, 0), region="nose")
    s = Scene.from_primitives([p, p])
    assert s.primitive(1) == GaussianPrimitive((0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0),
                                               0.5, (0.0, 0.0, 0.0), (), "nose")
    with pytest.raises(SceneError):
        Scene.from_primitives([])


def test_select_region_examples():
    head = synth_scene(7, 500, "head_like")
    efn = select_region(head, {"eyes", "forehead", "nose"})
    assert all(head.regions[i] in ("eyes", "forehead", "nose") for i in efn)
    assert len(efn) == sum(r in ("eyes", "forehead", "nose") for r in head.regions)
    assert np.array_equal(select_region(head, "EFN"), efn)
    assert np.array_equal(select_region(head, set(REGIONS)), np.arange(head.n))
    assert np.array_equal(select_region(head, "all"), np.arange(head.n))
    assert select_region(synth_scene(1, 10, "blob"), {"lips"}).size == 0


def test_parse_regions():
    assert parse_regions("EFN") == {"eyes", "forehead", "nose"}
    assert parse_regions("eyes, lips") == {"eyes", "lips"}
    assert parse_regions(["all"]) == {"all"}
    with pytest.raises(ValueError):
        parse_regions("ears")
    with pytest.raises(ValueError):
        select_region(synth_scene(1, 3, "blob"), [])


_HEAD = synth_scene(7, 200, "head_like")


@given(st.sets(st.sampled_from(REGIONS), min_size=1), st.sets(st.sampled_from(REGIONS), min_size=1))
def test_select_region_distributes_over_union(a, b):
    union = set(select_region(_HEAD, a | b))
    assert union == set(select_region(_HEAD, a)) | set(select_region(_HEAD, b))


@given(st.integers(0, 2**31), st.integers(1, 30), st.sampled_from(["blob", "head_like"]))
def test_synth_pure_and_valid(seed, n, layout):
    a, b = synth_scene(seed, n, layout), synth_scene(seed, n, layout)
    assert a.equals(b)
    assert np.all(a.scales > 0)
    assert np.all((a.opacities >= 0) & (a.opacities <= 1))
    assert np.allclose(np.linalg.norm(a.rotations, axis=1), 1.0, atol=1e-9, rtol=0)


def test_color_tensor():
    head = synth_scene(7, 200, "head_like")
    ct = ColorTensor.from_scene(head, "L")
    assert ct.values.shape == ct.reference.shape == (len(ct.index_map), 3)
    ct.values[:] += 0.25
    out = ct.apply(head)
    changed = np.flatnonzero(np.any(out.sh_dc != head.sh_dc, axis=1))
    assert np.array_equal(changed, ct.index_map)
    with pytest.raises(ValueError):
        ColorTensor(np.zeros((2, 3)), np.zeros((3, 3)), [0, 1])
    with pytest.raises(ValueError):
        ColorTensor(np.zeros((2, 3)), np.zeros((2, 3)), [1, 1])


def test_epsilon_range_warns():
    s = synth_scene(1, 10, "blob")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert check_epsilon_range(s, 0.1)
    with pytest.warns(UserWarning, match="exceeds"):
        assert not check_epsilon_range(s, 100.0)
