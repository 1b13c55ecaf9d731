import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpit.data.coco import PoseInstance
from dpit.metrics import (
    RECALL_POINTS,
    THRESHOLDS,
    UndefinedOKS,
    coco_report,
    evaluate_ap,
    greedy_match,
    oks,
    pckh,
    pckh_report,
)

K1 = np.array([0.1])


def person(kp, area=100.0, image_id=1, head=None):
    kp = np.asarray(kp, dtype=np.float64).reshape(-1, 3)
    return PoseInstance(kp, [0, 0, 10, 10], area, image_id, head_length=head)


def pred(kp, image_id=1, score=1.0):
    return {"image_id": image_id, "keypoints": np.asarray(kp, dtype=np.float64).ravel().tolist(), "score": score}


def offset_for(o, area, k):
    """Distance giving per-joint similarity ``o``."""
    return math.sqrt(-math.log(o) * 2 * area * k * k)


class TestOKS:
    def test_exact(self):
        gt = np.array([[3.0, 4.0, 2], [1.0, 1.0, 1]])
        assert oks(gt, gt, 50.0, [0.1, 0.2]) == 1.0

    def test_e_inverse(self):
        area, k = 64.0, 0.25
        d = math.sqrt(2 * area * k * k)
        assert oks([[d, 0.0]], [[0.0, 0.0, 2]], area, [k]) == pytest.approx(math.exp(-1), abs=1e-9)

    def test_half_and_half(self):
        area, k = 64.0, 0.25
        d = math.sqrt(2 * area * k * k)
        got = oks([[0.0, 0.0], [5.0, 5.0 + d]], [[0.0, 0.0, 2], [5.0, 5.0, 2]], area, [k, k])
        assert got == pytest.approx((1 + math.exp(-1)) / 2, abs=1e-9)

    def test_invisible_joints_ignored(self):
        assert oks([[0, 0], [99, 99]], [[0, 0, 2], [0, 0, 0]], 10.0, [0.1, 0.1]) == 1.0

    def test_undefined(self):
        with pytest.raises(UndefinedOKS):
            oks([[0, 0]], [[0, 0, 0]], 10.0, [0.1])

    @given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.2, 5.0))
    @settings(max_examples=50, deadline=None)
    def test_translation_and_scale_invariant(self, tx, ty, s):
        r = np.random.default_rng(0)
        gt = np.column_stack([r.uniform(0, 50, (5, 2)), np.full(5, 2)])
        p = gt[:, :2] + r.normal(scale=3, size=(5, 2))
        k = r.uniform(0.05, 0.2, 5)
        base = oks(p, gt, 400.0, k)
        shift = np.array([tx, ty])
        gt2 = gt.copy()
        gt2[:, :2] = gt[:, :2] * s + shift
        assert oks(p * s + shift, gt2, 400.0 * s * s, k) == pytest.approx(base, rel=1e-9)


class TestGreedy:
    def test_higher_confidence_takes_best(self):
        ious = np.array([[0.9, 0.8], [0.95, 0.6]])
        np.testing.assert_array_equal(greedy_match(ious, 0.5), [0, 1])

    def test_tie_lowest_index(self):
        np.testing.assert_array_equal(greedy_match(np.array([[0.7, 0.7]]), 0.5), [0])

    def test_threshold_inclusive(self):
        np.testing.assert_array_equal(greedy_match(np.array([[0.5]]), 0.5), [0])


def oks_point_eight():
    area, k = 100.0, K1
    # aim a hair above 0.8 so the >= comparison at 0.80 is not left to rounding
    d = offset_for(0.8 + 1e-12, area, k[0])
    gt = {1: [person([[10.0, 10.0, 2]], area)]}
    return gt, [pred([[10.0 + d, 10.0, 1]])], k


class TestAP:
    def test_perfect(self, small_set, coco_skel):
        _, ds = small_set
        preds = [pred(i.keypoints, iid, 1.0) for iid, v in ds.instances.items() for i in v]
        r = evaluate_ap(ds.instances, preds, coco_skel.oks_k)
        assert r.ap == r.ar == 1.0

    def test_oks_point_eight(self):
        gt, preds, k = oks_point_eight()
        assert oks([preds[0]["keypoints"][:2]], gt[1][0].keypoints, 100.0, k) == pytest.approx(0.8)
        r = evaluate_ap(gt, preds, k)
        assert r.ap == pytest.approx(0.7, abs=1e-12) and r.ar == pytest.approx(0.7, abs=1e-12)
        assert [t for t, (a, _) in r.per_threshold.items() if a == 1.0] == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8]

    def test_false_positive_ranked_first(self):
        gt = {1: [person([[0, 0, 2]])]}
        preds = [pred([[50, 50, 1]], score=0.9), pred([[0, 0, 1]], score=0.5)]
        r = evaluate_ap(gt, preds, K1, thresholds=[0.5])
        # precision 0.5 at recall 1 for every recall point
        assert r.ap == pytest.approx(0.5) and r.ar == 1.0

    def test_empty_gt_no_predictions(self):
        r = evaluate_ap({1: []}, [], K1)
        assert r.ap == r.ar == 1.0 and r.warnings

    def test_empty_gt_with_predictions(self):
        r = evaluate_ap({1: []}, [pred([[0, 0, 1]])], K1)
        assert r.ap == 0.0 and r.warnings

    def test_gt_without_visible_joints_ignored(self):
        gt = {1: [person([[0, 0, 2]]), person([[20, 20, 0]])]}
        preds = [pred([[0, 0, 1]], score=0.9), pred([[20, 20, 1]], score=0.8)]
        assert evaluate_ap(gt, preds, K1).ap == 1.0

    def test_monotone_in_threshold(self, rng):
        gt, preds = random_scene(rng, n_img=4)
        r = evaluate_ap(gt, preds, K3)
        aps = [r.per_threshold[float(t)][0] for t in THRESHOLDS]
        assert all(a >= b for a, b in zip(aps, aps[1:]))

    def test_report_keys(self, small_set, coco_skel):
        _, ds = small_set
        preds = [pred(i.keypoints, iid, 1.0) for iid, v in ds.instances.items() for i in v]
        rep = coco_report(ds.instances, preds, coco_skel.oks_k)
        assert {"AP", "AP50", "AP75", "APM", "APL", "AR"} <= set(rep)
        assert rep["AP"] == rep["AP50"] == 1.0

    def test_max_dets(self):
        gt = {1: [person([[0, 0, 2]])]}
        preds = [pred([[90, 90, 1]], score=1.0)] * 20 + [pred([[0, 0, 1]], score=0.1)]
        assert evaluate_ap(gt, preds, K1).ar == 0.0


# ------------------------------------------------------------------ brute-force oracle

K3 = np.array([0.08, 0.1, 0.12])


def random_scene(rng, n_img=1, max_n=3):
    gt, preds = {}, []
    for iid in range(n_img):
        people = []
        for _ in range(rng.integers(0, max_n + 1)):
            kp = np.column_stack([rng.uniform(0, 30, (3, 2)), rng.choice([0, 1, 2], 3, p=[0.15, 0.25, 0.6])])
            people.append(person(kp, area=float(rng.uniform(20, 200)), image_id=iid))
        gt[iid] = people
        for _ in range(rng.integers(0, max_n + 1)):
            if people and rng.random() < 0.8:
                base = people[rng.integers(len(people))].keypoints[:, :2]
                kp = base + rng.normal(scale=rng.choice([0.5, 1.5, 3.0]), size=(3, 2))
            else:
                kp = rng.uniform(0, 30, (3, 2))
            preds.append(pred(np.column_stack([kp, np.ones(3)]), iid, float(rng.random())))
    return gt, preds


def exhaustive_match(sim, t):
    """Best assignment over every injective matching, ranked lexicographically in
    confidence order: a match beats no match, higher OKS beats lower, lower GT index
    breaks exact ties."""
    n_d, n_g = sim.shape
    best, best_key = None, None
    for choice in itertools.product(range(-1, n_g), repeat=n_d):
        used = [g for g in choice if g >= 0]
        if len(used) != len(set(used)) or any(g >= 0 and sim[d, g] < t for d, g in enumerate(choice)):
            continue
        key = tuple((1, sim[d, g], -g) if g >= 0 else (0, 0.0, 0) for d, g in enumerate(choice))
        if best_key is None or key > best_key:
            best, best_key = choice, key
    return best


def oracle_ap(gt, preds, k):
    def sim_of(p, g):
        try:
            return oks(p, g.keypoints, g.area, k)
        except UndefinedOKS:
            return 0.0

    per_t = []
    for t in THRESHOLDS:
        ranked, n_pos = [], 0
        for iid, gts in gt.items():
            ign = [not (g.keypoints[:, 2] > 0).any() for g in gts]
            order = [i for i in range(len(gts)) if not ign[i]] + [i for i in range(len(gts)) if ign[i]]
            gts = [gts[i] for i in order]
            ign = [ign[i] for i in order]
            n_pos += ign.count(False)
            dts = sorted((p for p in preds if p["image_id"] == iid), key=lambda p: -p["score"])
            kps = [np.reshape(p["keypoints"], (-1, 3)) for p in dts]
            sim = np.array([[sim_of(p, g) for g in gts] for p in kps]).reshape(len(kps), len(gts))
            # an ignored GT may only absorb a detection when no regular GT qualifies
            m = exhaustive_match(np.where(np.array(ign, bool)[None, :], -np.inf, sim), t)
            free = [g for g in range(len(gts)) if ign[g] and (m is None or g not in m)]
            for d, p in enumerate(dts):
                g = m[d] if m is not None else -1
                if g < 0:
                    cand = [j for j in free if sim[d, j] >= t]
                    if cand:
                        j = max(cand, key=lambda j: (sim[d, j], -j))
                        free.remove(j)
                        continue
                    ranked.append((p["score"], 0))
                else:
                    ranked.append((p["score"], 1))
        ranked.sort(key=lambda x: -x[0])
        if n_pos == 0:
            per_t.append((1.0, 1.0) if not preds else (0.0, 0.0))
            continue
        tp = fp = 0
        curve = []
        for _, hit in ranked:
            tp += hit
            fp += 1 - hit
            curve.append((tp / n_pos, tp / (tp + fp)))
        q = [max((p for r_, p in curve if r_ >= r), default=0.0) for r in RECALL_POINTS]
        per_t.append((math.fsum(q) / len(q), curve[-1][0] if curve else 0.0))
    return math.fsum(a for a, _ in per_t) / len(per_t), math.fsum(r for _, r in per_t) / len(per_t)


class TestOracle:
    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(2024)
        for trial in range(100):
            gt, preds = random_scene(rng)
            if not any(gt.values()) and not preds:
                continue
            r = evaluate_ap(gt, preds, K3)
            ap, ar = oracle_ap(gt, preds, K3)
            assert (r.ap, r.ar) == (ap, ar), trial

    def test_multi_image_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(30):
            gt, preds = random_scene(rng, n_img=3)
            r = evaluate_ap(gt, preds, K3)
            assert (r.ap, r.ar) == oracle_ap(gt, preds, K3), trial


class TestPCKh:
    def gt(self):
        return np.array([[[10.0, 10.0, 2], [20.0, 20.0, 1], [0.0, 0.0, 0]]])

    def test_exact(self):
        r = pckh(self.gt(), self.gt(), [4.0])
        assert r.mean == 1.0
        np.testing.assert_array_equal(r.per_joint[:2], [1.0, 1.0])
        assert np.isnan(r.per_joint[2])

    @pytest.mark.parametrize("off,hit", [(2.0, False), (1.96, True), (2.5, False)])
    def test_strict_threshold(self, off, hit):
        p = self.gt().copy()
        p[0, 0, 0] += off  # head 4 -> radius 2
        assert pckh(p, self.gt(), [4.0]).per_joint[0] == float(hit)

    def test_skip_non_positive_head(self):
        g = np.concatenate([self.gt(), self.gt()])
        r = pckh(g, g, [4.0, 0.0])
        assert r.counted == 1 and r.skipped == 1 and r.warnings

    def test_report_pairs_by_oks(self, coco_skel):
        kp = np.column_stack([np.arange(17.0), np.arange(17.0), np.full(17, 2)])
        gt = {1: [person(kp, 400.0, head=5.0)]}
        rep = pckh_report(gt, [pred(kp)], coco_skel.oks_k)
        assert rep["PCKh@0.5"] == 1.0

    def test_unmatched_counts_as_miss(self, coco_skel):
        kp = np.column_stack([np.arange(17.0), np.arange(17.0), np.full(17, 2)])
        rep = pckh_report({1: [person(kp, 400.0, head=5.0)]}, [], coco_skel.oks_k)
        assert rep["PCKh@0.5"] == 0.0
