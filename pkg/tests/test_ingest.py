import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from greenscape.errors import (
    InvalidClassMap,
    MalformedFile,
    MissingChannel,
    NegativeDepth,
    NonFiniteDepth,
    UnknownLabel,
)
from greenscape.ingest import (
    ClassMap,
    LabeledScene,
    Mask,
    TerrainPolicy,
    build_sky_mask,
    build_vegetation_mask,
    class_config_from_dict,
    class_config_to_dict,
    load_class_config,
    load_depth_map,
    load_label_map,
    read_mask_png,
    spectral_vegetation_mask,
    write_label_png,
    write_mask_png,
    write_pfm,
)

VEG, ROAD, TERRAIN, SKY = 7, 0, 11, 9


class TestLabelMaps:
    def test_round_trip(self, tmp_path, class_map):
        grid = np.array([[7, 0], [9, 3]], dtype=np.uint8)
        write_label_png(tmp_path / "a.png", grid)
        scene = load_label_map(tmp_path / "a.png", class_map)
        assert scene.image_id == "a"
        assert (scene.width, scene.height) == (2, 2)
        np.testing.assert_array_equal(scene.labels, grid)

    def test_unknown_label_reports_first_offender(self, tmp_path):
        cm = ClassMap(((0, "road"), (3, "building"), (7, "vegetation")))
        write_label_png(tmp_path / "a.png", np.array([[7, 0], [9, 3]]))
        with pytest.raises(UnknownLabel) as err:
            load_label_map(tmp_path / "a.png", cm)
        assert (err.value.label_id, err.value.x, err.value.y) == (9, 0, 1)

    def test_zero_size_and_garbage_files(self, tmp_path, class_map):
        empty = tmp_path / "empty.png"
        empty.write_bytes(b"")
        with pytest.raises(MalformedFile):
            load_label_map(empty, class_map)
        junk = tmp_path / "junk.png"
        junk.write_bytes(b"\x89PNG\r\n\x1a\n" + b"\x00" * 20)
        with pytest.raises(MalformedFile):
            load_label_map(junk, class_map)

    def test_rgb_file_is_not_a_label_map(self, tmp_path, class_map):
        from PIL import Image

        Image.new("RGB", (2, 2)).save(tmp_path / "rgb.png")
        with pytest.raises(MalformedFile):
            load_label_map(tmp_path / "rgb.png", class_map)


class TestClassMap:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(InvalidClassMap):
            ClassMap(((1, "a"), (1, "b")))

    def test_overlapping_sets_rejected(self):
        with pytest.raises(InvalidClassMap):
            ClassMap(((1, "a"),), vegetation_classes={"a"}, sky_classes={"a"})

    def test_unknown_set_member_rejected(self):
        with pytest.raises(InvalidClassMap):
            ClassMap(((1, "a"),), vegetation_classes={"b"})

    def test_whitelist_needs_whitelist_mode(self):
        with pytest.raises(InvalidClassMap):
            TerrainPolicy("include_all", frozenset({"x"}))

    def test_json_round_trip(self, tmp_path, class_map):
        policy = TerrainPolicy("per_image_whitelist", frozenset({"12", "40"}))
        path = tmp_path / "classes.json"
        path.write_text(json.dumps(class_config_to_dict(class_map, policy)))
        cm, pol = load_class_config(path)
        assert cm == class_map
        assert pol == policy

    def test_list_form(self):
        cm, pol = class_config_from_dict(
            {"classes": [{"id": 4, "name": "tree"}], "vegetation": ["tree"]}
        )
        assert cm.entries == ((4, "tree"),)
        assert pol.mode == "include_all"


def _scene(labels, image_id="img"):
    return LabeledScene(image_id, np.array(labels, dtype=np.uint8))


class TestMasks:
    labels = [[VEG, ROAD], [TERRAIN, SKY]]

    def test_include_all(self, class_map):
        m = build_vegetation_mask(_scene(self.labels), class_map, TerrainPolicy("include_all"))
        np.testing.assert_array_equal(m.bits, [[1, 0], [1, 0]])
        assert m.source == "semantic"

    def test_exclude_all(self, class_map):
        m = build_vegetation_mask(_scene(self.labels), class_map, TerrainPolicy("exclude_all"))
        np.testing.assert_array_equal(m.bits, [[1, 0], [0, 0]])

    def test_whitelist(self, class_map):
        scene = _scene(self.labels, "img")
        absent = TerrainPolicy("per_image_whitelist", frozenset({"other"}))
        present = TerrainPolicy("per_image_whitelist", frozenset({"img"}))
        np.testing.assert_array_equal(build_vegetation_mask(scene, class_map, absent).bits, [[1, 0], [0, 0]])
        np.testing.assert_array_equal(build_vegetation_mask(scene, class_map, present).bits, [[1, 0], [1, 0]])

    @pytest.mark.parametrize(
        "labels, expected",
        [
            ([[SKY, SKY], [ROAD, VEG]], [[1, 1], [0, 0]]),
            ([[ROAD, VEG], [TERRAIN, ROAD]], [[0, 0], [0, 0]]),
            ([[SKY, SKY], [SKY, SKY]], [[1, 1], [1, 1]]),
        ],
    )
    def test_sky(self, class_map, labels, expected):
        np.testing.assert_array_equal(build_sky_mask(_scene(labels), class_map).bits, expected)

    def test_masks_are_read_only(self, class_map):
        m = build_sky_mask(_scene(self.labels), class_map)
        with pytest.raises(ValueError):
            m.bits[0, 0] = 0


class TestSpectral:
    @pytest.mark.parametrize(
        "pixel, expected",
        [((0, 255, 0), 1), ((200, 200, 200), 0), ((100, 120, 110), 1), ((100, 115, 110), 0)],
    )
    def test_excess_green(self, pixel, expected):
        scene = LabeledScene("s", np.zeros((1, 1)), rgb=np.array([[pixel]], dtype=np.uint8))
        m = spectral_vegetation_mask(scene, 20)
        assert int(m.bits[0, 0]) == expected
        assert m.source == "spectral"

    def test_needs_rgb(self):
        with pytest.raises(MissingChannel):
            spectral_vegetation_mask(LabeledScene("s", np.zeros((1, 1))), 20)


class TestDepth:
    @pytest.mark.parametrize("little_endian", [True, False])
    def test_round_trip(self, tmp_path, little_endian):
        write_pfm(tmp_path / "d.pfm", np.array([[3.5]]), little_endian)
        np.testing.assert_array_equal(load_depth_map(tmp_path / "d.pfm"), [[3.5]])

    def test_row_order(self, tmp_path):
        grid = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        write_pfm(tmp_path / "d.pfm", grid)
        np.testing.assert_array_equal(load_depth_map(tmp_path / "d.pfm"), grid)

    def test_bottom_to_top_storage(self, tmp_path):
        # first stored row is the bottom image row
        payload = np.array([[1.0], [2.0]], dtype="<f4").tobytes()
        (tmp_path / "d.pfm").write_bytes(b"Pf\n1 2\n-1.0\n" + payload)
        np.testing.assert_array_equal(load_depth_map(tmp_path / "d.pfm"), [[2.0], [1.0]])

    def test_nan(self, tmp_path):
        write_pfm(tmp_path / "d.pfm", np.array([[1.0, np.nan]]))
        with pytest.raises(NonFiniteDepth) as err:
            load_depth_map(tmp_path / "d.pfm")
        assert (err.value.x, err.value.y) == (1, 0)

    def test_negative(self, tmp_path):
        write_pfm(tmp_path / "d.pfm", np.array([[-1.0]]))
        with pytest.raises(NegativeDepth):
            load_depth_map(tmp_path / "d.pfm")

    @pytest.mark.parametrize(
        "payload",
        [b"P6\n1 1\n255\n\x00\x00\x00", b"Pf\n1 x\n-1.0\n", b"Pf\n2 2\n-1.0\n\x00\x00", b"PF\n1 1\n-1.0\n" + b"\x00" * 12],
    )
    def test_malformed(self, tmp_path, payload):
        (tmp_path / "d.pfm").write_bytes(payload)
        with pytest.raises(MalformedFile):
            load_depth_map(tmp_path / "d.pfm")


label_grids = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.sampled_from([0, 3, 7, 9, 11]))


@settings(max_examples=60, deadline=None)
@given(label_grids)
def test_terrain_inclusion_never_shrinks_the_mask(grid):
    cm = ClassMap(
        ((0, "road"), (3, "building"), (7, "vegetation"), (9, "sky"), (11, "terrain")),
        {"vegetation"},
        {"terrain"},
        {"sky"},
    )
    scene = LabeledScene("x", grid)
    inc = build_vegetation_mask(scene, cm, TerrainPolicy("include_all"))
    exc = build_vegetation_mask(scene, cm, TerrainPolicy("exclude_all"))
    assert inc.popcount() >= exc.popcount()
    assert inc == build_vegetation_mask(scene, cm, TerrainPolicy("include_all"))


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20)), elements=st.integers(0, 1)))
def test_mask_png_round_trip(tmp_path_factory, bits):
    path = tmp_path_factory.mktemp("m") / "mask.png"
    mask = Mask("mask", bits)
    write_mask_png(path, mask)
    assert read_mask_png(path) == mask
