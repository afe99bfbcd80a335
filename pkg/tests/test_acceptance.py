"""Acceptance suite: twelve checks covering the oracle-exact components
(compact loss, binarization, gradients, AP) and the directional
desk-scale training claims (adversarial effectiveness, end-to-end
improvement, mask-area sweep, determinism).

Each test prints a single ``ACCEPT nn <name>: PASS`` line on success.
The directional checks train real models on one CPU core; the whole
file takes roughly an hour.  Run with ``-s`` to see the verdict lines:

    python3 -m pytest tests/test_acceptance.py -v -s
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from aofd.ablation import evaluate_model, train_variant
from aofd.detector import AOFDModel, ModelConfig, load_checkpoint, state_hash
from aofd.evaluation import average_precision, evaluate, match_detections, recall_at_fp
from aofd.geometry import Annotation, BoundingBox, Detection
from aofd.losses import (
    COMPACT_KERNEL,
    classification_loss,
    compact_loss,
    segmentation_loss,
)
from aofd.masks import MaskGenerator, binarize_lowest_k, mask_cell_count
from aofd.synth import SceneSpec, make_benchmark, write_dataset
from aofd.training import TrainConfig, Trainer, masked_fg_loss, scenes_to_samples

# ---------------------------------------------------------------------------
# helpers and independent oracles
# ---------------------------------------------------------------------------


VERDICT_LINES: list[str] = []  # echoed in the terminal summary by conftest


def _verdict(number: int, name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    line = f"ACCEPT {number:02d} {name}: {status}{suffix}"
    VERDICT_LINES.append(line)
    print("\n" + line)
    assert ok, f"acceptance check {number} ({name}) failed{suffix}"


def brute_force_compact(mask, mode):
    """Nested-loop zero-padded convolution of (1 - mask) with the kernel."""
    inv = 1.0 - np.asarray(mask, dtype=np.float64)
    h, w = inv.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        acc += inv[ii, jj] * COMPACT_KERNEL[1 + di, 1 + dj]
            total += max(0.0, acc) if mode == "rectified" else acc
    return total


def perimeter_measure(mask):
    """Closed form for interior masks: sum over masked cells of
    1 - (masked 8-neighbours)/8."""
    inv = 1.0 - np.asarray(mask, dtype=np.float64)
    total = 0.0
    for i in range(1, 6):
        for j in range(1, 6):
            if inv[i, j]:
                nbrs = inv[i - 1:i + 2, j - 1:j + 2].sum() - 1
                total += 1 - nbrs / 8
    return total


def cells_to_mask(cells):
    m = np.ones((7, 7))
    for i, j in cells:
        m[i, j] = 0.0
    return m


def block_cells(area):
    """Near-square compact blob of `area` interior cells (row-major fill)."""
    width = min(5, int(np.ceil(np.sqrt(area))))
    return [(1 + n // width, 1 + n % width) for n in range(area)]


def strip_cells(area):
    """Width-1 straight segments on non-adjacent interior rows (<= 15 cells)."""
    slots = [(r, c) for r in (1, 3, 5) for c in range(1, 6)]
    return slots[:area]


def scattered_cells(area):
    """Pairwise non-adjacent interior cells (<= 9 cells)."""
    slots = [(r, c) for r in (1, 3, 5) for c in (1, 3, 5)]
    return slots[:area]


def brute_force_ap(dispositions, scores, num_gt):
    """Threshold-enumeration AP with precision-envelope interpolation."""
    pairs = [(s, d) for s, d in zip(scores, dispositions) if d != "IGNORED"]
    if num_gt == 0:
        return None
    points = [(0.0, 1.0)]
    for t in sorted({s for s, _ in pairs}, reverse=True):
        kept = [d for s, d in pairs if s >= t]
        tp = sum(d == "TP" for d in kept)
        fp = sum(d == "FP" for d in kept)
        if tp + fp:
            points.append((tp / num_gt, tp / (tp + fp)))
    points.sort()
    ap, prev_r = 0.0, 0.0
    for idx, (r, _) in enumerate(points):
        env = max(p for rr, p in points if rr >= r)
        ap += (r - prev_r) * env
        prev_r = r
    return ap


def brute_force_recall_at_fp(dispositions, scores, num_gt, budgets):
    pairs = sorted(
        ((s, d) for s, d in zip(scores, dispositions) if d != "IGNORED"),
        key=lambda x: -x[0])
    out = {}
    for budget in budgets:
        best = 0
        tp = fp = 0
        i = 0
        while i < len(pairs):
            j = i
            while j < len(pairs) and pairs[j][0] == pairs[i][0]:
                tp += pairs[j][1] == "TP"
                fp += pairs[j][1] == "FP"
                j += 1
            if fp <= budget:
                best = max(best, tp)
            i = j
        out[budget] = best / num_gt if num_gt else 0.0
    return out


def random_matching_instance(rng):
    """Random boxes + ignore labels pushed through the matcher."""
    def box():
        x1, y1 = rng.uniform(0, 80, size=2)
        w, h = rng.uniform(4, 30, size=2)
        return BoundingBox(x1, y1, x1 + w, y1 + h)

    gts = [Annotation(box=box(),
                      occlusion_state=rng.choice(["unmasked", "masked", "ignored"]))
           for _ in range(int(rng.integers(0, 11)))]
    dets = sorted((Detection(box=box(), score=float(np.round(rng.uniform(), 2)))
                   for _ in range(int(rng.integers(0, 21)))),
                  key=lambda d: -d.score)
    return dets, gts


def sha256_tree(root: Path) -> str:
    """Hash of every file (path + bytes) under a directory."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# shared trained artifacts for the directional checks
# ---------------------------------------------------------------------------

BENCH_SIZES = (500, 10, 100)
SEG_SIZE = 60
SEEDS = (0, 1, 2)
HEAVY_CFG = TrainConfig(pretrain_steps=800, generator_steps=300,
                        joint_seg_steps=150, joint_combined_steps=2000,
                        seg_tune_epochs=1)
HEAVY_MODEL = ModelConfig(channels=32)
# The detection split holds unoccluded faces only: occlusion robustness must
# come from the masking strategy and from the small occlusion-heavy
# segmentation split, mirroring the scarcity premise of the training recipe.
BENCH_SPEC = SceneSpec(seed=0, category_probs={"none": 1.0})


@pytest.fixture(scope="session")
def benchmark():
    return make_benchmark(BENCH_SPEC, sizes=BENCH_SIZES, seg_size=SEG_SIZE)


@pytest.fixture(scope="session")
def variant_results(benchmark):
    """Masked-subset AP per variant per seed, plus per-run wall times."""
    variants = ("full", "baseline", "no_gen", "no_seg", "frac_1_2", "frac_1_6")
    ap = {v: [] for v in variants}
    seconds = {v: [] for v in variants}
    for variant in variants:
        for seed in SEEDS:
            t0 = time.monotonic()
            model = train_variant(variant, HEAVY_CFG, HEAVY_MODEL,
                                  benchmark["train"], benchmark["seg"], seed=seed)
            reports = evaluate_model(model, benchmark["test"])
            seconds[variant].append(time.monotonic() - t0)
            ap[variant].append(reports["masked_only"].ap)
    return {"ap": ap, "seconds": seconds}


# ---------------------------------------------------------------------------
# the twelve checks
# ---------------------------------------------------------------------------


class TestAcceptance:
    def test_01_compact_loss_oracle(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            if rng.random() < 0.5:
                m = (rng.random((7, 7)) > rng.uniform(0.1, 0.6)).astype(float)
            else:
                m = rng.random((7, 7))
            for mode in ("rectified", "literal"):
                worst = max(worst, abs(compact_loss(m, mode)
                                       - brute_force_compact(m, mode)))
        hand_ok = compact_loss(np.ones((7, 7))) == 0.0
        block = np.ones((7, 7)); block[2:4, 2:4] = 0
        hand_ok &= abs(compact_loss(block) - 2.5) < 1e-12
        iso = np.ones((7, 7))
        for i, j in [(1, 1), (1, 4), (4, 1), (4, 4)]:
            iso[i, j] = 0
        hand_ok &= abs(compact_loss(iso) - 4.0) < 1e-12
        strip = np.ones((7, 7)); strip[3, 1:5] = 0
        hand_ok &= abs(compact_loss(strip) - 3.25) < 1e-12
        elapsed = time.monotonic() - t0
        _verdict(1, "compact-loss oracle equality", worst <= 1e-9 and hand_ok
                 and elapsed < 5.0,
                 f"max |err| {worst:.2e}, hand values ok, {elapsed:.1f}s")

    def test_02_literal_mode_nullity(self):
        rng = np.random.default_rng(1)
        cells = [(i, j) for i in range(1, 6) for j in range(1, 6)]
        ok = True
        for _ in range(200):
            m = np.ones((7, 7))
            for idx in rng.choice(len(cells), size=int(rng.integers(1, 20)),
                                  replace=False):
                m[cells[idx]] = 0.0
            ok &= compact_loss(m, "literal") == 0.0
        _verdict(2, "literal-mode nullity on interior masks", ok,
                 "200 masks, exactly 0")

    def test_03_compactness_ordering(self):
        t0 = time.monotonic()
        ok = True
        pairs = 0
        for area in range(4, 17):
            fams = {"block": cells_to_mask(block_cells(area))}
            if area <= 15:
                fams["strip"] = cells_to_mask(strip_cells(area))
            if area <= 9:
                fams["scattered"] = cells_to_mask(scattered_cells(area))
            for hi, lo in (("scattered", "strip"), ("strip", "block"),
                           ("scattered", "block")):
                if hi not in fams or lo not in fams:
                    continue
                l_hi, l_lo = compact_loss(fams[hi]), compact_loss(fams[lo])
                p_hi, p_lo = perimeter_measure(fams[hi]), perimeter_measure(fams[lo])
                ok &= l_hi >= l_lo - 1e-12
                if p_hi > p_lo + 1e-12:
                    ok &= l_hi > l_lo
                pairs += 1
        elapsed = time.monotonic() - t0
        _verdict(3, "compactness ordering scattered >= strip >= block",
                 ok and elapsed < 5.0, f"{pairs} equal-area pairs, {elapsed:.1f}s")

    def test_04_binarization_oracle(self):
        fractions = {1 / 6: 8, 1 / 4: 12, 1 / 3: 16, 1 / 2: 24}
        ok = all(mask_cell_count(f) == k for f, k in fractions.items())
        rng = np.random.default_rng(2)
        for trial in range(1000):
            if trial % 3 == 2:   # tie-heavy quantized maps
                heat = rng.integers(0, 4, size=(7, 7)).astype(np.float64) / 4
            else:
                heat = rng.random((7, 7))
            frac = [1 / 6, 1 / 4, 1 / 3, 1 / 2][trial % 4]
            k = fractions[frac]
            order = np.argsort(heat.reshape(-1), kind="stable")  # (value, row-major)
            oracle = np.ones(49)
            oracle[order[:k]] = 0.0
            got = binarize_lowest_k(heat, frac)
            ok &= np.array_equal(got, oracle.reshape(7, 7))
            ok &= int((got == 0).sum()) == k
        _verdict(4, "binarize_lowest_k full-sort oracle", ok,
                 "1000 maps incl. tie-heavy, k in {8,12,16,24}")

    def test_05_gradient_checks(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(3)
        h = 1e-6
        tol = 1e-4
        ok = True

        def rel_ok(analytic, fd):
            return abs(analytic - fd) <= tol * max(1.0, abs(fd))

        # compact loss (continuous input, rectified), away from kinks
        checked = 0
        while checked < 50:
            m_np = rng.uniform(0.05, 0.95, size=(7, 7))
            # kink guard: skip points where any convolution response is ~0
            inv = 1.0 - m_np
            conv = np.zeros((7, 7))
            for i in range(7):
                for j in range(7):
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            if 0 <= i + di < 7 and 0 <= j + dj < 7:
                                conv[i, j] += inv[i + di, j + dj] * COMPACT_KERNEL[1 + di, 1 + dj]
            if np.abs(conv).min() < 1e-3:
                continue
            m = torch.tensor(m_np, requires_grad=True)
            compact_loss(m).backward()
            i, j = int(rng.integers(7)), int(rng.integers(7))
            p, q = m_np.copy(), m_np.copy()
            p[i, j] += h
            q[i, j] -= h
            fd = (brute_force_compact(p, "rectified")
                  - brute_force_compact(q, "rectified")) / (2 * h)
            ok &= rel_ok(m.grad[i, j].item(), fd)
            checked += 1

        # segmentation loss wrt logits
        for _ in range(50):
            logits = torch.tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
            target = (rng.random((6, 6)) > 0.5).astype(float)
            gate = (rng.random((6, 6)) > 0.3).astype(float)
            gate.reshape(-1)[0] = 1.0
            segmentation_loss(logits, target, gate).backward()
            c, i, j = int(rng.integers(2)), int(rng.integers(6)), int(rng.integers(6))
            with torch.no_grad():
                lp = logits.detach().clone(); lp[c, i, j] += h
                lq = logits.detach().clone(); lq[c, i, j] -= h
                fd = (float(segmentation_loss(lp, target, gate))
                      - float(segmentation_loss(lq, target, gate))) / (2 * h)
            ok &= rel_ok(logits.grad[c, i, j].item(), fd)

        # classification loss wrt logits
        for _ in range(50):
            n = int(rng.integers(2, 9))
            logits = torch.tensor(rng.normal(size=(n, 2)), requires_grad=True)
            labels = rng.integers(0, 2, size=n)
            classification_loss(logits, labels).backward()
            i, j = int(rng.integers(n)), int(rng.integers(2))
            with torch.no_grad():
                lp = logits.detach().clone(); lp[i, j] += h
                lq = logits.detach().clone(); lq[i, j] -= h
                fd = (float(classification_loss(lp, labels))
                      - float(classification_loss(lq, labels))) / (2 * h)
            ok &= rel_ok(logits.grad[i, j].item(), fd)

        # heat-map generator parameters (sum-of-output reduction)
        gen = MaskGenerator(8).double()
        roi = torch.tensor(rng.normal(size=(1, 8, 7, 7)))
        gen.zero_grad()
        gen(roi).sum().backward()
        params = list(gen.parameters())
        for _ in range(50):
            p = params[int(rng.integers(len(params)))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = p.grad[idx].item()
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                plus = gen(roi).sum().item()
                p[idx] = orig - h
                minus = gen(roi).sum().item()
                p[idx] = orig
            ok &= rel_ok(analytic, (plus - minus) / (2 * h))

        elapsed = time.monotonic() - t0
        _verdict(5, "analytic gradients vs central differences",
                 ok and elapsed < 60.0, f"4 x 50 points, {elapsed:.1f}s")

    def test_06_ap_oracle(self):
        t0 = time.monotonic()
        rng = np.random.default_rng(4)
        budgets = (10, 50, 100)
        worst = 0.0
        ok = True
        for _ in range(500):
            dets, gts = random_matching_instance(rng)
            res = match_detections(dets, gts)
            if res.num_gt == 0:
                with pytest.raises(ValueError):
                    average_precision(res.dispositions, res.scores, res.num_gt)
            else:
                got = average_precision(res.dispositions, res.scores, res.num_gt)
                want = brute_force_ap(res.dispositions, res.scores, res.num_gt)
                worst = max(worst, abs(got - want))
            got_r = recall_at_fp(res.dispositions, res.scores, res.num_gt, budgets)
            want_r = brute_force_recall_at_fp(res.dispositions, res.scores,
                                              res.num_gt, budgets)
            for b in budgets:
                worst = max(worst, abs(got_r[b] - want_r[b]))
        elapsed = time.monotonic() - t0
        _verdict(6, "AP and recall@FP oracle equality",
                 ok and worst <= 1e-9 and elapsed < 30.0,
                 f"500 instances, max |err| {worst:.2e}, {elapsed:.1f}s")

    def test_07_frozen_parameter_contracts(self, tmp_path):
        bench = make_benchmark(SceneSpec(seed=7), sizes=(20, 2, 6), seg_size=6)
        det = scenes_to_samples(bench["train"], with_seg=False)
        seg = scenes_to_samples(bench["seg"], with_seg=True)
        cfg = TrainConfig(seed=0, pretrain_steps=30, generator_steps=20,
                          joint_seg_steps=20, joint_combined_steps=40,
                          seg_tune_epochs=1)
        out = tmp_path / "phases"
        Trainer(AOFDModel(ModelConfig(channels=32), seed=0), cfg, det, seg,
                out_dir=out).run()

        def hashes(phase):
            m = load_checkpoint(out / f"{phase}.ckpt")
            return {"detector": state_hash(m.backbone) + state_hash(m.rpn)
                               + state_hash(m.heads),
                    "generator": state_hash(m.generator),
                    "segmentation": state_hash(m.segmentation)}

        h = {p: hashes(p) for p in ("pretrain_detector", "train_generator",
                                    "joint_seg_overfit", "joint_combined",
                                    "seg_tune")}
        det_frozen = h["pretrain_detector"]["detector"] == h["train_generator"]["detector"]
        gen_frozen = (h["train_generator"]["generator"]
                      == h["joint_seg_overfit"]["generator"]
                      == h["joint_combined"]["generator"]
                      == h["seg_tune"]["generator"])

        # zero segmentation weight => segmentation parameters never move
        cfg0 = TrainConfig(seed=0, pretrain_steps=30, generator_steps=20,
                           joint_seg_steps=20, joint_combined_steps=40,
                           seg_tune_epochs=1, seg_overfit_mu=0.0,
                           combined_seg_mu=0.0)
        model0 = AOFDModel(ModelConfig(channels=32), seed=0)
        seg_before = state_hash(model0.segmentation)
        out0 = tmp_path / "mu0"
        Trainer(model0, cfg0, det, seg, out_dir=out0).run()
        seg_frozen = state_hash(
            load_checkpoint(out0 / "seg_tune.ckpt").segmentation) == seg_before

        _verdict(7, "frozen-parameter contracts via checkpoint hashing",
                 det_frozen and gen_frozen and seg_frozen,
                 f"detector {det_frozen}, generator {gen_frozen}, "
                 f"segmentation@mu=0 {seg_frozen}")

    def test_08_adversarial_effectiveness(self, benchmark):
        t0 = time.monotonic()
        held = scenes_to_samples(benchmark["test"], with_seg=False)
        n_rois = sum(sum(a.occlusion_state != "ignored" for a in s.annotations)
                     for s in benchmark["test"])
        margins = []
        for seed in SEEDS:
            cfg = TrainConfig(seed=seed, pretrain_steps=HEAVY_CFG.pretrain_steps,
                              generator_steps=HEAVY_CFG.generator_steps)
            model = AOFDModel(HEAVY_MODEL, seed=seed)
            trainer = Trainer(model, cfg,
                              scenes_to_samples(benchmark["train"], with_seg=False),
                              scenes_to_samples(benchmark["seg"], with_seg=True))
            trainer.pretrain_detector()
            trainer.train_generator()
            model.eval()
            rng = np.random.default_rng(0)
            gen = masked_fg_loss(model, held, "generated",
                                 cfg.generator_fraction, rng)
            rnd = masked_fg_loss(model, held, "random",
                                 cfg.generator_fraction, rng)
            margins.append(gen - rnd)
        elapsed = time.monotonic() - t0
        median = float(np.median(margins))
        _verdict(8, "generated masks hurt more than random",
                 median > 0 and n_rois >= 200 and elapsed <= 600,
                 f"median margin {median:+.4f} over seeds {margins}, "
                 f"{n_rois} held-out RoIs, {elapsed:.0f}s")

    def test_09_end_to_end_improvement(self, variant_results):
        ap = variant_results["ap"]
        med = {v: float(np.median(a)) for v, a in ap.items()}
        runs_in_budget = all(s <= 1800 for s in variant_results["seconds"]["full"])
        improvement = med["full"] - med["baseline"]
        _verdict(9, "full pipeline beats baseline by >= 3 masked-AP points",
                 improvement >= 0.03 and med["no_gen"] < med["full"]
                 and med["no_seg"] < med["full"] and runs_in_budget,
                 f"masked AP medians: full {med['full']:.4f}, "
                 f"baseline {med['baseline']:.4f} (+{improvement:.4f}), "
                 f"no_gen {med['no_gen']:.4f}, no_seg {med['no_seg']:.4f}")

    def test_10_mask_area_sweep(self, variant_results):
        ap = variant_results["ap"]
        third = float(np.median(ap["full"]))        # default area is one third
        half = float(np.median(ap["frac_1_2"]))
        sixth = float(np.median(ap["frac_1_6"]))
        print(f"\n    mask-area sweep (masked AP medians): "
              f"1/6 {sixth:.4f}, 1/3 {third:.4f}, 1/2 {half:.4f} "
              f"(1/6-vs-1/3 reported, not asserted)")
        _verdict(10, "masking half the cells does not beat one third",
                 half <= third + 1e-12,
                 f"1/2 {half:.4f} vs 1/3 {third:.4f}")

    def test_11_iou_threshold_monotonicity(self):
        rng = np.random.default_rng(5)
        ok = True
        for _ in range(100):
            n = int(rng.integers(1, 8))
            gts, dets = [], []
            for _ in range(n):
                dets_i, gts_i = random_matching_instance(rng)
                dets.append(dets_i)
                gts.append(gts_i)
            r45 = evaluate(dets, gts, iou_threshold=0.45)
            r50 = evaluate(dets, gts, iou_threshold=0.5)
            if r50.ap is not None:
                ok &= r45.ap >= r50.ap
        _verdict(11, "AP at IoU 0.45 >= AP at IoU 0.5", ok,
                 "100 random detection sets, exact comparison")

    def test_12_determinism(self, tmp_path):
        spec = SceneSpec(seed=12)
        cfg = TrainConfig(seed=0, pretrain_steps=60, generator_steps=30,
                          joint_seg_steps=30, joint_combined_steps=80,
                          seg_tune_epochs=1)
        hashes, reports = [], []
        for run in ("a", "b"):
            bench = make_benchmark(spec, sizes=(30, 4, 10), seg_size=8)
            data_dir = tmp_path / run / "data"
            for split, scenes in bench.items():
                write_dataset(scenes, data_dir / split)
            model = AOFDModel(ModelConfig(channels=32), seed=0)
            run_dir = tmp_path / run / "run"
            Trainer(model, cfg,
                    scenes_to_samples(bench["train"], with_seg=False),
                    scenes_to_samples(bench["seg"], with_seg=True),
                    out_dir=run_dir).run()
            model.eval()
            dets = [model.infer(s.image, score_threshold=0.05)
                    for s in bench["test"]]
            gts = [list(s.annotations) for s in bench["test"]]
            reports.append(evaluate(dets, gts, subset_filter="masked_only").to_json())
            hashes.append((sha256_tree(data_dir), sha256_tree(run_dir)))
        data_same = hashes[0][0] == hashes[1][0]
        ckpt_same = hashes[0][1] == hashes[1][1]
        report_same = reports[0] == reports[1]
        _verdict(12, "same-seed runs are hash-identical",
                 data_same and ckpt_same and report_same,
                 f"datasets {data_same}, checkpoints {ckpt_same}, "
                 f"eval reports {report_same}")
