import json

import numpy as np
import pytest

from fedod.params import Rng
from fedod.synthdata import (
    BODY_COLORS,
    BBox,
    MalformedLabelLine,
    IoFailure,
    PartitionSpec,
    SceneSpec,
    SpecInvalid,
    build_partitions,
    default_cross_combos,
    format_label_line,
    generate,
    parse_label_line,
    read_yolo,
    split_sizes,
    write_yolo,
)

CABIN2 = {
    "client1": (("blue", "none"), ("blue", "A"), ("blue", "B")),
    "client2": (("red", "none"), ("red", "C"), ("red", "D")),
}


def scan_body_bounds(sample):
    """Oracle: recover the body rectangle bounds by classifying each pixel
    against the known scene colors (backgrounds vs body/windshield) under a
    grid of brightness scales. The windshield lies strictly inside the body,
    so the object-pixel bounds equal the body rectangle bounds.
    """
    from fedod.synthdata import BACKGROUNDS, WINDSHIELD_COLORS

    img = sample.image.astype(np.float64)
    object_colors = [BODY_COLORS[sample.body_color]]
    if sample.windshield != "none":
        object_colors.append(WINDSHIELD_COLORS[sample.windshield])
    prototypes = np.array(list(BACKGROUNDS) + object_colors)
    n_bg = len(BACKGROUNDS)
    best = None
    for scale in np.linspace(0.4, 1.6, 121):
        d = np.linalg.norm(img[:, :, None, :] - scale * prototypes, axis=3)
        score = d.min(axis=2).mean()
        if best is None or score < best[0]:
            best = (score, d.argmin(axis=2) >= n_bg)
    ys, xs = np.nonzero(best[1])
    assert len(xs) >= 9, "no object pixels found"
    return xs.min(), ys.min(), xs.max() + 1, ys.max() + 1  # exclusive max


class TestGenerate:
    def test_no_windshield_gives_class_zero(self):
        s = generate(SceneSpec(body_color="blue", windshield="none"), Rng(1))
        assert len(s.boxes) == 1
        assert s.boxes[0].class_id == 0

    def test_windshield_gives_class_one(self):
        s = generate(SceneSpec(body_color="red", windshield="C"), Rng(2))
        assert s.boxes[0].class_id == 1

    def test_determinism(self):
        a = generate(SceneSpec(windshield="A"), Rng(7))
        b = generate(SceneSpec(windshield="A"), Rng(7))
        assert np.array_equal(a.image, b.image)
        assert a.boxes == b.boxes

    def test_box_inside_image(self):
        for seed in range(20):
            s = generate(SceneSpec(windshield="B" if seed % 2 else "none"), Rng(seed))
            x0, y0, x1, y1 = s.boxes[0].corners()
            assert 0 <= x0 < x1 <= 1
            assert 0 <= y0 < y1 <= 1

    @pytest.mark.parametrize("seed", range(12))
    def test_bbox_matches_pixel_scan(self, seed):
        color = ("blue", "red")[seed % 2]
        shield = ("none", "A", "C")[seed % 3]
        s = generate(SceneSpec(body_color=color, windshield=shield), Rng(seed))
        size = s.image.shape[0]
        x0, y0, x1, y1 = scan_body_bounds(s)
        box = s.boxes[0]
        bx0 = round(box.cx * size - box.w * size / 2)
        by0 = round(box.cy * size - box.h * size / 2)
        bx1 = round(box.cx * size + box.w * size / 2)
        by1 = round(box.cy * size + box.h * size / 2)
        assert abs(x0 - bx0) <= 1 and abs(y0 - by0) <= 1
        assert abs(x1 - bx1) <= 1 and abs(y1 - by1) <= 1

    def test_pixels_in_unit_range(self):
        s = generate(SceneSpec(brightness_range=(0.4, 1.6)), Rng(3))
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.image.dtype == np.float32

    def test_center_in_one_grid_cell(self):
        # one box per image means the one-center-per-cell rule holds trivially;
        # check the center is strictly inside the unit square so it maps to a cell
        for seed in range(10):
            s = generate(SceneSpec(), Rng(seed))
            assert 0 < s.boxes[0].cx < 1 and 0 < s.boxes[0].cy < 1


class TestSplitSizes:
    def test_paper_split_of_200(self):
        assert split_sizes(200, (0.70, 0.15, 0.15)) == [140, 30, 30]

    def test_leftovers_go_to_largest_remainder(self):
        assert sum(split_sizes(10, (0.70, 0.15, 0.15))) == 10
        assert split_sizes(10, (0.70, 0.15, 0.15)) == [7, 2, 1]

    def test_exhaustive_sums(self):
        for n in range(1, 50):
            assert sum(split_sizes(n, (0.70, 0.15, 0.15))) == n


class TestPartitions:
    def test_default_cross_combos_mirror_two_client_setup(self):
        combos = default_cross_combos(CABIN2)
        assert set(combos) == {("blue", "C"), ("blue", "D"), ("red", "A"), ("red", "B")}

    def test_client_sets_drawn_only_from_allowed(self):
        parts = build_partitions(PartitionSpec(clients=CABIN2, samples_per_client=30))
        for cid, data in parts.clients.items():
            allowed = set(CABIN2[cid])
            for split in (data.train, data.val, data.test):
                for s in split:
                    assert (s.body_color, s.windshield) in allowed

    def test_split_sizes_140_30_30(self):
        parts = build_partitions(PartitionSpec(clients=CABIN2, samples_per_client=200))
        c1 = parts.clients["client1"]
        assert (len(c1.train), len(c1.val), len(c1.test)) == (140, 30, 30)

    def test_cross_only_unseen_combos(self):
        parts = build_partitions(PartitionSpec(clients=CABIN2, samples_per_client=20))
        seen = {c for combos in CABIN2.values() for c in combos}
        assert parts.cross_test
        for s in parts.cross_test:
            assert (s.body_color, s.windshield) not in seen

    def test_identical_clients_flagged_empty_cross(self):
        same = {"a": (("blue", "A"),), "b": (("blue", "A"),)}
        parts = build_partitions(PartitionSpec(clients=same, samples_per_client=5))
        assert parts.cross_empty
        assert parts.cross_test == []

    def test_explicit_cross_combo_in_training_rejected(self):
        with pytest.raises(SpecInvalid):
            build_partitions(
                PartitionSpec(
                    clients=CABIN2, samples_per_client=5, cross_combos=(("blue", "A"),)
                )
            )

    def test_empty_combo_set_rejected(self):
        with pytest.raises(SpecInvalid):
            build_partitions(PartitionSpec(clients={"a": ()}))

    def test_bad_fractions_rejected(self):
        with pytest.raises(SpecInvalid):
            build_partitions(
                PartitionSpec(clients=CABIN2, train_frac=0.5, val_frac=0.1, test_frac=0.1)
            )

    def test_determinism(self):
        spec = PartitionSpec(clients=CABIN2, samples_per_client=12, seed=5)
        a, b = build_partitions(spec), build_partitions(spec)
        for cid in a.clients:
            for sa, sb in zip(a.clients[cid].train, b.clients[cid].train):
                assert np.array_equal(sa.image, sb.image)
                assert sa.boxes == sb.boxes

    def test_swap_sets_partition_cross_by_color(self):
        parts = build_partitions(PartitionSpec(clients=CABIN2, samples_per_client=20))
        swap1 = parts.swap_set("client1")
        swap2 = parts.swap_set("client2")
        assert all(s.body_color == "blue" for s in swap1)
        assert all(s.body_color == "red" for s in swap2)
        assert len(swap1) + len(swap2) == len(parts.cross_test)

    def test_domain_shift_uses_seen_combos(self):
        parts = build_partitions(PartitionSpec(clients=CABIN2, samples_per_client=10))
        seen = {c for combos in CABIN2.values() for c in combos}
        assert parts.domain_shift
        for s in parts.domain_shift:
            assert (s.body_color, s.windshield) in seen


class TestYoloIo:
    def test_format_by_definition(self):
        line = format_label_line(BBox(1, 0.5, 0.5, 0.25, 0.25))
        assert line == "1 0.500000 0.500000 0.250000 0.250000"

    def test_wrong_field_count_rejected(self):
        with pytest.raises(MalformedLabelLine, match="5 fields"):
            parse_label_line("1 0.5 0.5 0.25")

    def test_out_of_range_rejected(self):
        with pytest.raises(MalformedLabelLine):
            parse_label_line("0 0.9 0.5 0.4 0.4")  # sticks out on the right
        with pytest.raises(MalformedLabelLine):
            parse_label_line("0 0.5 0.5 0.0 0.4")  # zero width
        with pytest.raises(MalformedLabelLine):
            parse_label_line("-1 0.5 0.5 0.4 0.4")

    def test_non_numeric_rejected(self):
        with pytest.raises(MalformedLabelLine):
            parse_label_line("0 a b c d")

    def test_round_trip_30_samples(self, tmp_path):
        parts = build_partitions(PartitionSpec(clients=CABIN2, samples_per_client=15))
        samples = parts.clients["client1"].train + parts.clients["client2"].train
        assert len(samples) >= 20
        write_yolo(tmp_path / "ds", samples, split="train", seed=0)
        back = read_yolo(tmp_path / "ds")
        assert len(back) == len(samples)
        for orig, rt in zip(samples, back):
            assert orig.body_color == rt.body_color
            assert orig.windshield == rt.windshield
            for bo, br in zip(orig.boxes, rt.boxes):
                assert bo.class_id == br.class_id
                for f in ("cx", "cy", "w", "h"):
                    assert abs(getattr(bo, f) - getattr(br, f)) <= 1e-6
            assert np.max(np.abs(orig.image - rt.image)) <= 1 / 255 + 1e-7

    def test_manifest_contents(self, tmp_path):
        s = generate(SceneSpec(windshield="A"), Rng(0))
        write_yolo(tmp_path / "d", [s], split="val", spec_echo={"k": 1}, seed=9)
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["schema"] == "fedod-dataset/1"
        assert manifest["split"] == "val"
        assert manifest["seed"] == 9
        assert manifest["count"] == 1
        assert manifest["samples"][0]["windshield"] == "A"

    def test_missing_dir_raises_io_failure(self, tmp_path):
        with pytest.raises(IoFailure):
            read_yolo(tmp_path / "nope")

    def test_write_is_deterministic(self, tmp_path):
        parts = build_partitions(PartitionSpec(clients=CABIN2, samples_per_client=4, seed=3))
        write_yolo(tmp_path / "a", parts.cross_test, split="cross", seed=3)
        write_yolo(tmp_path / "b", parts.cross_test, split="cross", seed=3)
        for rel in ("manifest.json", "images/00000.ppm", "labels/00000.txt"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
