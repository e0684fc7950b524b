import math

import numpy as np
import pytest

from fedod.params import ParamSet, Rng, Tensor
from fedod.synthdata import BBox, PartitionSpec, SceneSpec, build_partitions, generate
from fedod.tinydet import (
    CellPrediction,
    ConfigInvalid,
    DetectorConfig,
    EmptyDataset,
    MultipleObjectsInCell,
    ShapeMismatch,
    backward,
    decode,
    forward,
    infer,
    init_params,
    loss,
    train_local,
    _net_forward,
    _build_targets,
    _loss_and_grad,
)

CFG = DetectorConfig()


def random_image(seed, size=32):
    return np.random.default_rng(seed).random((size, size, 3)).astype(np.float32)


def zero_params(cfg=CFG):
    p = init_params(cfg, Rng(0))
    return ParamSet(Tensor(t.name, t.dims, np.zeros(t.dims, np.float32)) for t in p)


# ------------------------------------------------------------ scalar oracle

def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def bce(logit, target):
    p = sigmoid(logit)
    return -(target * math.log(p) + (1 - target) * math.log(1 - p))


def scalar_loss(pred_grid, truth, cfg):
    """Independent re-implementation of the composite loss, cell by cell."""
    g = cfg.grid_s
    responsible = {}
    for box in truth:
        col = min(int(box.cx * g), g - 1)
        row = min(int(box.cy * g), g - 1)
        responsible[(row, col)] = box
    total = 0.0
    for r in range(g):
        for c in range(g):
            cell = pred_grid[r][c]
            if (r, c) in responsible:
                box = responsible[(r, c)]
                gx, gy = box.cx * g - c, box.cy * g - r
                total += bce(cell.objectness_logit, 1.0)
                total += cfg.lambda_coord * (
                    (sigmoid(cell.tx) - gx) ** 2
                    + (sigmoid(cell.ty) - gy) ** 2
                    + (sigmoid(cell.tw) - box.w) ** 2
                    + (sigmoid(cell.th) - box.h) ** 2
                )
                logits = [float(v) for v in cell.class_logits]
                m = max(logits)
                lse = m + math.log(sum(math.exp(v - m) for v in logits))
                total += lse - logits[box.class_id]
            else:
                total += cfg.lambda_noobj * bce(cell.objectness_logit, 0.0)
    return total


class TestConfig:
    def test_defaults_valid(self):
        CFG.validate()

    def test_rejects_indivisible_grid(self):
        with pytest.raises(ConfigInvalid):
            DetectorConfig(image_size=30, grid_s=4).validate()

    def test_rejects_non_power_of_two_ratio(self):
        with pytest.raises(ConfigInvalid):
            DetectorConfig(image_size=48, grid_s=4).validate()

    def test_rejects_bad_lambdas(self):
        with pytest.raises(ConfigInvalid):
            DetectorConfig(lambda_coord=0.0).validate()

    def test_extra_pools_default(self):
        assert CFG.extra_pools == 1


class TestInit:
    def test_deterministic(self):
        a = init_params(CFG, Rng(42))
        b = init_params(CFG, Rng(42))
        assert a == b

    def test_exactly_six_tensors(self):
        p = init_params(CFG, Rng(0))
        assert len(p) == 6
        assert [t.name for t in p] == [
            "conv1.weight", "conv1.bias",
            "conv2.weight", "conv2.bias",
            "head.weight", "head.bias",
        ]

    def test_biases_zero(self):
        p = init_params(CFG, Rng(0))
        for name in ("conv1.bias", "conv2.bias", "head.bias"):
            assert np.all(p.array(name) == 0.0)

    def test_glorot_range(self):
        p = init_params(CFG, Rng(0))
        r = math.sqrt(6.0 / (27 + 72))
        w = p.array("conv1.weight")
        assert np.all(np.abs(w) <= r)
        assert w.std() > 0.1 * r


class TestForward:
    def test_zero_weights_zero_logits(self):
        grid = forward(zero_params(), random_image(0), CFG)
        for row in grid:
            for cell in row:
                assert cell.objectness_logit == 0.0
                assert cell.tx == cell.ty == cell.tw == cell.th == 0.0
                assert np.all(cell.class_logits == 0.0)

    def test_output_shape(self):
        grid = forward(init_params(CFG, Rng(1)), random_image(1), CFG)
        assert len(grid) == 4 and all(len(row) == 4 for row in grid)
        assert all(len(cell.class_logits) == 2 for row in grid for cell in row)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            forward(init_params(CFG, Rng(1)), np.zeros((16, 16, 3), np.float32), CFG)

    def test_pixel_sensitivity(self):
        # finite-difference style check: nudging one pixel moves some logit
        p = init_params(CFG, Rng(3))
        img = random_image(3)
        base = forward(p, img, CFG)
        img2 = img.copy()
        img2[10, 10, 1] = min(1.0, img2[10, 10, 1] + 0.5)
        bumped = forward(p, img2, CFG)
        diffs = [
            abs(a.objectness_logit - b.objectness_logit)
            for ra, rb in zip(base, bumped)
            for a, b in zip(ra, rb)
        ]
        assert max(diffs) > 0

    def test_deterministic(self):
        p = init_params(CFG, Rng(5))
        img = random_image(5)
        a, b = forward(p, img, CFG), forward(p, img, CFG)
        for ra, rb in zip(a, b):
            for ca, cb in zip(ra, rb):
                assert ca.objectness_logit == cb.objectness_logit
                assert (ca.tx, ca.ty, ca.tw, ca.th) == (cb.tx, cb.ty, cb.tw, cb.th)
                assert np.array_equal(ca.class_logits, cb.class_logits)


class TestDecode:
    def _cell(self, **kw):
        base = dict(objectness_logit=0.0, tx=0.0, ty=0.0, tw=0.0, th=0.0,
                    class_logits=np.zeros(2))
        base.update(kw)
        return CellPrediction(**base)

    def test_sigmoid_midpoint_cell_00(self):
        d = decode(self._cell(), 0, 0, CFG)
        assert d.bbox.cx == pytest.approx(0.125)
        assert d.bbox.cy == pytest.approx(0.125)
        assert d.bbox.w == pytest.approx(0.5)
        assert d.bbox.h == pytest.approx(0.5)

    def test_cell_33(self):
        d = decode(self._cell(), 3, 3, CFG)
        assert d.bbox.cx == pytest.approx(0.875)
        assert d.bbox.cy == pytest.approx(0.875)

    def test_width_limits(self):
        tiny = decode(self._cell(tw=-30.0), 0, 0, CFG)
        assert tiny.bbox.w < 1e-12
        half = decode(self._cell(tw=0.0), 0, 0, CFG)
        assert half.bbox.w == pytest.approx(0.5)

    def test_argmax_tie_lowest_index(self):
        d = decode(self._cell(class_logits=np.array([1.0, 1.0])), 0, 0, CFG)
        assert d.class_id == 0

    def test_confidence_formula(self):
        cell = self._cell(objectness_logit=2.0, class_logits=np.array([3.0, 1.0]))
        d = decode(cell, 0, 0, CFG)
        expected = sigmoid(2.0) * (math.exp(3.0) / (math.exp(3.0) + math.exp(1.0)))
        assert d.confidence == pytest.approx(expected, rel=1e-12)


class TestLoss:
    def test_saturated_no_object_is_zero(self):
        grid = [
            [CellPrediction(-1000.0, 0.0, 0.0, 0.0, 0.0, np.zeros(2)) for _ in range(4)]
            for _ in range(4)
        ]
        value, resp = loss(grid, [], CFG)
        assert value == pytest.approx(0.0, abs=1e-12)
        assert not resp.any()

    def test_perfect_prediction_approaches_zero(self):
        box = BBox(1, 0.375, 0.375, 0.5, 0.5)  # center of cell (1,1)
        g = CFG.grid_s
        gx, gy = box.cx * g - 1, box.cy * g - 1

        def logit(v):
            return math.log(v / (1 - v))

        grid = []
        for r in range(g):
            row = []
            for c in range(g):
                if (r, c) == (1, 1):
                    row.append(CellPrediction(1000.0, logit(gx), logit(gy),
                                              logit(box.w), logit(box.h),
                                              np.array([-1000.0, 1000.0])))
                else:
                    row.append(CellPrediction(-1000.0, 0.0, 0.0, 0.0, 0.0, np.zeros(2)))
            grid.append(row)
        value, resp = loss(grid, [box], CFG)
        assert value == pytest.approx(0.0, abs=1e-9)
        assert resp[1, 1] and resp.sum() == 1

    def test_matches_scalar_oracle_all_zero_logits(self):
        grid = forward(zero_params(), random_image(2), CFG)
        box = BBox(0, 0.5, 0.5, 0.4, 0.4)
        value, _ = loss(grid, [box], CFG)
        assert value == pytest.approx(scalar_loss(grid, [box], CFG), rel=1e-12)

    def test_matches_scalar_oracle_random(self):
        p = init_params(CFG, Rng(11))
        for seed in range(5):
            img = random_image(seed)
            rng = np.random.default_rng(seed)
            boxes = [
                BBox(int(rng.integers(0, 2)), 0.1 + 0.8 * rng.random(),
                     0.1 + 0.8 * rng.random(), 0.15, 0.15)
            ]
            grid = forward(p, img, CFG)
            value, _ = loss(grid, boxes, CFG)
            assert value == pytest.approx(scalar_loss(grid, boxes, CFG), rel=1e-9)

    def test_two_centers_one_cell_rejected(self):
        grid = forward(zero_params(), random_image(0), CFG)
        boxes = [BBox(0, 0.51, 0.51, 0.2, 0.2), BBox(1, 0.55, 0.55, 0.2, 0.2)]
        with pytest.raises(MultipleObjectsInCell):
            loss(grid, boxes, CFG)

    def test_target_decode_consistency(self):
        # targets plugged back into decode's formula reproduce the truth box
        g = CFG.grid_s
        for seed in range(10):
            rng = np.random.default_rng(seed)
            box = BBox(0, 0.1 + 0.8 * rng.random(), 0.1 + 0.8 * rng.random(),
                       0.3, 0.4)
            resp, coords, _ = _build_targets([[box]], CFG)
            rows, cols = np.nonzero(resp[0])
            row, col = int(rows[0]), int(cols[0])
            gx, gy, gw, gh = coords[0, :, row, col]
            assert (col + gx) / g == box.cx
            assert (row + gy) / g == box.cy
            assert gw == box.w and gh == box.h


class TestBackward:
    def test_gradient_schema_matches(self):
        p = init_params(CFG, Rng(0))
        g = backward(p, random_image(0), [BBox(0, 0.5, 0.5, 0.3, 0.3)], CFG)
        assert g.schema_hash == p.schema_hash

    def test_zero_gradient_at_perfect_prediction(self):
        # saturated logits sit on a flat plateau of every loss term
        p = zero_params()
        img = np.zeros((32, 32, 3), np.float32)
        grads = backward(p, img, [], CFG)
        # zero weights + empty truth: only noobj BCE at logit 0; gradient
        # w.r.t. head bias objectness channel is lambda_noobj * sigmoid(0) * cells
        db = grads.array("head.bias")
        assert db[0] == pytest.approx(0.5 * 0.5 * 16, rel=1e-6)
        # with zero inputs, all weight gradients vanish except biases
        assert np.all(grads.array("conv1.weight") == 0.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference_small(self, seed):
        from gradcheck import fd_gradient_check

        cfg = DetectorConfig(image_size=16, grid_s=4, conv1_channels=2,
                             conv2_channels=3)
        p = init_params(cfg, Rng(seed))
        img = np.random.default_rng(seed).random((16, 16, 3)).astype(np.float32)
        boxes = [BBox(seed % 2, 0.4, 0.6, 0.3, 0.3)]
        rel, checked, skipped = fd_gradient_check(p, img, boxes, cfg)
        assert checked > skipped  # most coordinates are comparable
        assert rel < 1e-3


class TestTrainLocal:
    def _dataset(self, n=16, seed=0):
        spec = PartitionSpec(
            clients={"c": (("blue", "none"), ("blue", "A"))},
            samples_per_client=n, seed=seed,
        )
        parts = build_partitions(spec)
        data = parts.clients["c"].train + parts.clients["c"].val + parts.clients["c"].test
        return data[:n]

    def test_zero_learning_rate_identity(self):
        cfg = DetectorConfig(learning_rate=0.0, local_epochs=2)
        p = init_params(cfg, Rng(1))
        out, stats = train_local(p, self._dataset(4), cfg, Rng(2))
        for a, b in zip(p, out):
            assert np.array_equal(a.values, b.values)
        assert len(stats.epoch_losses) == 2

    def test_determinism(self):
        cfg = DetectorConfig(local_epochs=2)
        data = self._dataset(8)
        p = init_params(cfg, Rng(1))
        a, _ = train_local(p, data, cfg, Rng(9))
        b, _ = train_local(p, data, cfg, Rng(9))
        assert a == b

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            train_local(init_params(CFG, Rng(0)), [], CFG, Rng(0))

    def test_loss_decreases_over_15_epochs(self):
        # empirical check on a 16-sample set; seeds 0..9, expect >= 9 passes
        data = self._dataset(16, seed=3)
        good = 0
        for seed in range(10):
            p = init_params(CFG, Rng(seed))
            _, stats = train_local(p, data, CFG, Rng(100 + seed))
            assert len(stats.epoch_losses) == 15
            if stats.epoch_losses[-1] < stats.epoch_losses[0]:
                good += 1
        assert good >= 9

    def test_stats_json_lines(self):
        cfg = DetectorConfig(local_epochs=3)
        _, stats = train_local(init_params(cfg, Rng(0)), self._dataset(4), cfg, Rng(1))
        lines = stats.to_json_lines().strip().split("\n")
        assert len(lines) == 3
        import json

        rec = json.loads(lines[0])
        assert rec["epoch"] == 0 and "mean_loss" in rec


class TestInfer:
    def test_threshold_one_filters_all(self):
        p = init_params(CFG, Rng(2))
        assert infer(p, random_image(2), CFG, conf_threshold=1.0) == []

    def test_duplicate_boxes_suppressed(self):
        # craft params is hard; go through decode-level NMS via a scene the
        # detector hasn't learned: zero weights give 16 identical boxes per
        # cell positions; identical boxes only arise per-cell, so instead
        # check the NMS property on the output directly
        p = init_params(CFG, Rng(4))
        dets = infer(p, random_image(4), CFG, conf_threshold=0.0, nms_iou=0.45)
        from fedod.detmetrics import iou

        for i, a in enumerate(dets):
            for b in dets[i + 1 :]:
                if a.class_id == b.class_id:
                    assert iou(a.bbox, b.bbox) <= 0.45

    def test_confidences_non_increasing(self):
        p = init_params(CFG, Rng(6))
        dets = infer(p, random_image(6), CFG, conf_threshold=0.0)
        confs = [d.confidence for d in dets]
        assert confs == sorted(confs, reverse=True)

    def test_greedy_nms_hand_trace(self):
        # three overlapping same-class boxes, conf 0.9/0.8/0.7 -> one survivor
        from fedod.tinydet import Detection
        from fedod.detmetrics import iou

        def det(conf, cx):
            return Detection(BBox(0, cx, 0.5, 0.4, 0.4), 0, conf)

        cands = [det(0.9, 0.50), det(0.8, 0.52), det(0.7, 0.48)]
        # all pairwise IoU > 0.45
        assert all(
            iou(a.bbox, b.bbox) > 0.45
            for i, a in enumerate(cands) for b in cands[i + 1 :]
        )
        kept = [cands[0]]
        for d in sorted(cands, key=lambda d: -d.confidence)[1:]:
            if all(iou(k.bbox, d.bbox) <= 0.45 for k in kept):
                kept.append(d)
        assert kept == [cands[0]]
