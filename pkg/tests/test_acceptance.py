"""Acceptance gates for the package, one test per criterion.

Each criterion prints a PASS/FAIL line (run with ``pytest -s`` to stream
them). Criteria 4-6 share two real desk-scale training runs (full model
and fusion-only baseline, 2,000 optimizer steps each), so this module
takes roughly twenty minutes end to end; everything else finishes in
seconds.
"""

import json
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from pcma import tensor as T
from pcma.cross_attention import attention, make_qsca, qsca_forward
from pcma.decoder import ABLATION_MODES, NetworkConfig, gf_forward, make_gf
from pcma.flops import attention_flops, ledger_for_forward
from pcma.gradcheck import grad_check
from pcma.group_attention import avga_forward, make_avga
from pcma.layers import CbrParams, cbr, channel_norm, kaiming, make_cbr, token_norm
from pcma.masking import all_ones_mask, cim_step
from pcma.supervision import bce_loss, f_measure, iou_loss, miou, total_loss
from pcma.synthdata import generate, write_dataset
from pcma.tensor import Tensor, precision
from pcma.trainer import TrainConfig, evaluate, train

from test_cross_attention import ref_dense_cross_attention


def report(num: int, ok: bool, detail: str) -> None:
    print(f"[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: exact attention-cost reproduction
# ---------------------------------------------------------------------------


def test_criterion_1_flops_reproduction():
    start = time.monotonic()
    proc = subprocess.run(
        [sys.executable, "-m", "pcma", "flops", "--n", "784", "--c", "256",
         "--ratio", "0.0995"],
        capture_output=True, text=True,
    )
    elapsed = time.monotonic() - start
    payload = json.loads(proc.stdout)
    ok = (
        proc.returncode == 0
        and payload["msa"] == 520_224_768
        and payload["qsca"] == 144_293_888
        and attention_flops(784, 256, 78) == (520_224_768, 144_293_888)
        and elapsed < 1.0
    )
    report(1, ok, f"msa={payload['msa']} qsca={payload['qsca']} in {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 2: gradient integrity (per-op sweep + end-to-end micro network)
# ---------------------------------------------------------------------------


@dataclass
class MicroNet:
    """Four-stage pipeline over a 16x16 input.

    A full-depth /2^(i+1) pyramid needs at least a 32x32 frame, so the
    micro variant halves the stem: stages land at 8, 4, 2, 1 pixels and
    every module still runs at its true depth.
    """

    stem: CbrParams
    downs: list
    unify: list
    audio_w: Tensor
    audio_b: Tensor
    avgas: list
    qscas: list
    gfs: list
    gt: Tensor
    confidence: float = 0.99

    def loss(self, frames: Tensor, audio: Tensor) -> Tensor:
        x = cbr(frames, self.stem)
        raw = [x]
        for down in self.downs:
            x = cbr(x, down)
            raw.append(x)
        pyramid = [cbr(f, u) for f, u in zip(raw, self.unify)]
        audio_base = audio @ self.audio_w + self.audio_b

        mask = all_ones_mask(1, 1, 1)
        audio_stream = audio_base
        deeper = None
        outputs = {}
        for stage in (4, 3, 2, 1):
            aligned, _ = avga_forward(pyramid[stage - 1], audio_base, self.avgas[stage - 1])
            audio_stream, guidance = qsca_forward(
                audio_stream, aligned, mask, self.qscas[stage - 1])
            deeper, logits = gf_forward(aligned, deeper, guidance, self.gfs[stage - 1])
            outputs[stage] = logits
            if stage > 1:
                probs = 1.0 / (1.0 + np.exp(-logits.detach().numpy()))
                margin = np.minimum(np.abs(probs - 0.01), np.abs(probs - 0.99)).min()
                assert margin > 1e-3, "band edge too close for finite differencing"
                mask = cim_step(mask, logits.detach(), self.confidence)
        return total_loss([outputs[i] for i in (1, 2, 3, 4)], self.gt,
                          (1.0, 1.0, 1.0, 1.0)).objective


def build_micro(rng) -> MicroNet:
    c, g, heads, d = 16, 4, 2, 16
    gt = Tensor((rng.random((1, 16, 16)) < 0.4).astype(np.float64))
    return MicroNet(
        stem=make_cbr(rng, 2, 2, 3, 8, stride=2),
        downs=[
            make_cbr(rng, 2, 2, 8, 8, stride=2),
            make_cbr(rng, 2, 2, 8, 16, stride=2),
            make_cbr(rng, 2, 2, 16, 16, stride=2),
        ],
        unify=[make_cbr(rng, 1, 1, w, c) for w in (8, 8, 16, 16)],
        audio_w=kaiming(rng, (d, c), d),
        audio_b=Tensor(np.zeros(c), requires_grad=True),
        avgas=[make_avga(rng, c, g) for _ in range(4)],
        qscas=[make_qsca(rng, c, heads) for _ in range(4)],
        gfs=[make_gf(rng, c) for _ in range(4)],
        gt=gt,
    )


def op_level_checks(rng) -> float:
    x = Tensor(rng.normal(size=(3, 4)) + 2.5)
    y = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    img = Tensor(rng.normal(size=(1, 4, 4, 2)))
    img_w = Tensor(rng.normal(size=(1, 4, 4, 2)))
    kern = Tensor(rng.normal(size=(3, 3, 2, 2)))
    mask = np.array([1.0, 0, 1, 1, 0, 1, 0, 0])
    rows = Tensor(rng.normal(size=(8, 3)))
    gt = Tensor((rng.random((3, 4)) < 0.5).astype(np.float64))
    q = Tensor(rng.normal(size=(3, 8)))
    k = Tensor(rng.normal(size=(5, 8)))
    v = Tensor(rng.normal(size=(5, 8)))
    wo = Tensor(rng.normal(size=(8, 8)))
    qw = Tensor(rng.normal(size=(3, 8)))
    up_w = Tensor(rng.normal(size=(1, 8, 8, 2)))
    scale = Tensor(np.ones(4))
    shift = Tensor(np.zeros(4))
    cn_scale = Tensor(np.ones(2))
    cn_shift = Tensor(np.zeros(2))

    bmm_w = Tensor(rng.normal(size=(2, 3, 2)))
    checks = {
        "matmul": (lambda a, b: T.tsum((a @ b) * qw), [Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(6, 8)))]),
        "bmm": (lambda a, b: T.tsum(T.bmm(a, b) * bmm_w), [Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 4, 2)))]),
        "softmax": (lambda a: T.tsum(T.softmax_lastdim(a) * w), [y]),
        "l2_normalize": (lambda a: T.tsum(T.l2_normalize(a, -1) * w), [x]),
        "conv2d": (lambda a, k: T.tsum(T.conv2d(a, k, 1, 1) * img_w), [img, kern]),
        "gather_scatter": (
            lambda a: T.tsum(T.scatter_rows(T.gather_rows(a, mask)[0] * 2.0, np.nonzero(mask)[0], a)),
            [rows]),
        "upsample": (lambda a: T.tsum(T.upsample_nearest2x(a) * up_w), [img]),
        "bilinear": (lambda a: T.tsum(T.resize_bilinear(a, 8, 8) * up_w), [img]),
        "repeat": (lambda a: T.tsum(T.repeat_lastdim(a, 2) * 0.3), [y]),
        "sigmoid": (lambda a: T.tsum(T.sigmoid(a) * w), [y]),
        "relu": (lambda a: T.tsum(T.relu(a) * w), [x]),
        "exp_log_sqrt": (lambda a: T.tsum(T.log(a) + T.sqrt(a) + T.exp(-a)), [x]),
        "clip": (lambda a: T.tsum(T.clip(a, 2.0, 3.5) * w), [x]),
        "reductions": (lambda a: T.tmean(a * a) + T.tsum(a, axis=0).sum(), [y]),
        "arith": (lambda a, b: T.tsum((a * b + a - b / (a + 4.0)) * w), [x, y]),
        "token_norm": (lambda a, s, b: T.tsum(token_norm(a, s, b) * w), [y, scale, shift]),
        "channel_norm": (lambda a, s, b: T.tsum(channel_norm(a, s, b) * img_w), [img, cn_scale, cn_shift]),
        "attention": (lambda qq, kk, vv: T.tsum(attention(qq, kk, vv, 2, wo) * qw), [q, k, v]),
        "bce": (lambda a: bce_loss(T.sigmoid(a), gt), [y]),
        "iou": (lambda a: iou_loss(T.sigmoid(a), gt), [y]),
    }
    worst = 0.0
    for name, (fn, inputs) in checks.items():
        err = grad_check(fn, inputs)
        assert err < 1e-5, f"{name}: {err}"
        worst = max(worst, err)
    return worst


def test_criterion_2_gradient_integrity():
    # Probes: both network inputs plus one parameter tensor per module
    # family. Finite differences at step 1e-5 cannot resolve coordinates
    # whose true gradient falls below ~1e-5 (the f+/f- cancellation noise
    # is ~1e-10 for a loss of this size), so parameter probes sit on the
    # strong gradient paths; the remaining parameter-side backward rules
    # are covered by the per-operation sweep above.
    start = time.monotonic()
    with precision(np.float64):
        worst_ops = op_level_checks(np.random.default_rng(17))

        rng = np.random.default_rng(20)
        micro = build_micro(rng)
        frames = Tensor(rng.random((1, 16, 16, 3)))
        audio = Tensor(rng.normal(size=(1, 16)))

        probe_params = [
            micro.stem.kernel,
            micro.unify[1].scale,
            micro.audio_w,
            micro.avgas[1].audio_proj,
            micro.avgas[2].consolidate.shift,
            micro.gfs[0].head,
            micro.gfs[1].gate.scale,
        ]

        def end_to_end(frames_p, audio_p, *params_p):
            micro.stem.kernel = params_p[0]
            micro.unify[1].scale = params_p[1]
            micro.audio_w = params_p[2]
            micro.avgas[1].audio_proj = params_p[3]
            micro.avgas[2].consolidate.shift = params_p[4]
            micro.gfs[0].head = params_p[5]
            micro.gfs[1].gate.scale = params_p[6]
            return micro.loss(frames_p, audio_p)

        worst_net = grad_check(end_to_end, [frames, audio, *probe_params])
    elapsed = time.monotonic() - start
    ok = worst_ops < 1e-5 and worst_net < 1e-5 and elapsed < 120.0
    report(2, ok, f"ops max err {worst_ops:.2e}, micro network max err {worst_net:.2e},"
                  f" {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 3: masked attention equals the dense reference
# ---------------------------------------------------------------------------


def test_criterion_3_masked_attention_equivalence():
    start = time.monotonic()
    rng = np.random.default_rng(33)
    worst = 0.0
    with precision(np.float64):
        for case in range(50):
            t = int(rng.integers(1, 3))
            h = int(rng.integers(1, 5))
            w = int(rng.integers(1, 5))
            c, heads = [(8, 2), (16, 4), (32, 8)][case % 3]
            params = make_qsca(rng, c, heads)
            audio = rng.normal(size=(t, c))
            visual = rng.normal(size=(t, h, w, c))
            mask = np.ones((t, h, w), dtype=np.float32)
            a_out, v_out = qsca_forward(Tensor(audio), Tensor(visual), mask, params)
            a_ref, v_ref = ref_dense_cross_attention(audio, visual, mask, params)
            worst = max(
                worst,
                float(np.abs(a_out.numpy() - a_ref).max()),
                float(np.abs(v_out.numpy() - v_ref).max()),
            )
    elapsed = time.monotonic() - start
    ok = worst < 1e-6 and elapsed < 60.0
    report(3, ok, f"50 shapes, worst deviation {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criteria 4-6: desk-scale training runs (full model and baseline)
# ---------------------------------------------------------------------------

DESK_NET = dict(
    channels=64, groups=8, heads=8, confidence=0.99,
    frames=2, height=64, width=64, audio_dim=128,
)
DESK_TRAIN = dict(lr=3e-4, batch_size=4, steps=2000, seed=7)


@dataclass
class DeskRun:
    out: Path
    telemetry: list[str]
    eval_report: dict
    seconds: float


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    scenes = generate(seed=7, count=320, frames=2, height=64, width=64, n_classes=6)
    info = {"seed": 7, "frames": 2, "height": 64, "width": 64, "n_classes": 6}
    write_dataset(root / "train", scenes[:256], info)
    write_dataset(root / "heldout", scenes[256:], info)

    runs = {}
    for mode in ("m5", "m0"):
        cfg = NetworkConfig(**DESK_NET, **ABLATION_MODES[mode])
        out = root / f"run_{mode}"
        start = time.monotonic()
        train(cfg, TrainConfig(**DESK_TRAIN), root / "train", out)
        seconds = time.monotonic() - start
        telemetry = (out / "telemetry.csv").read_text().splitlines()
        ev = evaluate(out / "checkpoint_final", root / "heldout")
        runs[mode] = DeskRun(out=out, telemetry=telemetry, eval_report=ev, seconds=seconds)
    return runs


def test_criterion_4_progression_invariant(desk_runs):
    # the trainer itself asserts per-pixel inclusion every step; reaching
    # 2,000 logged steps means zero violations occurred
    rows = [r.split(",") for r in desk_runs["m5"].telemetry[1:]]
    ok = len(rows) == DESK_TRAIN["steps"]
    ordered = all(float(r[6]) <= float(r[7]) <= float(r[8]) for r in rows)
    report(4, ok and ordered,
           f"{len(rows)} steps, zero inclusion violations, ratio ordering holds: {ordered}")


def test_criterion_5_desk_scale_learning(desk_runs):
    run = desk_runs["m5"]
    ev = run.eval_report
    final_ratio_m1 = float(run.telemetry[-1].split(",")[6])
    ok = (
        ev["miou"] >= 0.70
        and ev["f_measure"] >= 0.75
        and final_ratio_m1 <= 0.35
        and run.seconds < 1800.0
    )
    report(5, ok, f"held-out mIoU {ev['miou']:.4f} (>=0.70), F {ev['f_measure']:.4f}"
                  f" (>=0.75), final M1 remaining {final_ratio_m1:.3f} (<=0.35),"
                  f" {run.seconds / 60:.1f} min")


def test_criterion_6_ablation_ordering(desk_runs):
    m5, m0 = desk_runs["m5"].eval_report, desk_runs["m0"].eval_report
    # an all-ones-mask run (CA without selection) costs the same fixed
    # attention budget every step, so its ledger total is config-determined
    cfg = NetworkConfig(**DESK_NET, **ABLATION_MODES["m2"])
    masks = {
        i: np.ones((cfg.frames, h, w), dtype=np.float32)
        for i, (h, w) in zip((1, 2, 3, 4), cfg.stage_resolutions())
    }
    per_forward = ledger_for_forward(cfg, masks).attention
    unmasked_total = per_forward * DESK_TRAIN["steps"] * DESK_TRAIN["batch_size"]
    masked_total = sum(int(r.split(",")[9]) for r in desk_runs["m5"].telemetry[1:])
    ok = m5["miou"] >= m0["miou"] and masked_total < unmasked_total
    report(6, ok, f"mIoU full {m5['miou']:.4f} >= baseline {m0['miou']:.4f};"
                  f" attention FLOPs {masked_total:.3e} < {unmasked_total:.3e}")


# ---------------------------------------------------------------------------
# criterion 7: metric correctness
# ---------------------------------------------------------------------------


def test_criterion_7_metric_correctness():
    start = time.monotonic()
    cases = {0.25: (1, 3), 0.5: (1, 1), 0.8: (4, 1)}
    exact = True
    for p, (tp, extra) in cases.items():
        size = tp + extra
        pred = np.zeros(2 * size, dtype=np.uint8)
        gt = np.zeros(2 * size, dtype=np.uint8)
        pred[:tp] = 1
        gt[:tp] = 1
        pred[tp:size] = 1
        gt[size:2 * size - tp] = 1
        exact &= f_measure(pred.reshape(1, -1), gt.reshape(1, -1)) == p

    masks = [
        np.array([(k >> b) & 1 for b in range(9)], dtype=np.uint8).reshape(3, 3)
        for k in range(512)
    ]
    unions = np.zeros((512, 512))
    agree = True
    for i, a in enumerate(masks):
        for j, b in enumerate(masks):
            tp = int(np.logical_and(a, b).sum())
            union = int(np.logical_or(a, b).sum())
            iou_ref = 1.0 if union == 0 else tp / union
            pp, gp = int(a.sum()), int(b.sum())
            prec = tp / pp if pp else 0.0
            rec = tp / gp if gp else 0.0
            denom = 0.3 * prec + rec
            fm_ref = 0.0 if denom == 0 else 1.3 * prec * rec / denom
            if miou(a, b) != pytest.approx(iou_ref) or f_measure(a, b) != pytest.approx(fm_ref):
                agree = False
                break
        if not agree:
            break
    elapsed = time.monotonic() - start
    ok = exact and agree and elapsed < 60.0
    report(7, ok, f"f(p=r) exact for 0.25/0.5/0.8: {exact};"
                  f" 512x512 oracle sweep agree: {agree}; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 8: bitwise deterministic training
# ---------------------------------------------------------------------------


def _digest_tree(root: Path) -> dict:
    import hashlib

    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_criterion_8_determinism(tmp_path):
    config = {
        "channels": 16, "groups": 4, "heads": 2, "frames": 1,
        "height": 32, "width": 32, "audio_dim": 16,
        "lr": 1e-3, "batch_size": 2, "steps": 6, "seed": 3,
    }
    (tmp_path / "config.json").write_text(json.dumps(config))
    gen = [sys.executable, "-m", "pcma", "gen-data", "--seed", "3", "--count", "6",
           "--frames", "1", "--height", "32", "--width", "32", "--classes", "3",
           "--audio-dim", "16", "--out", str(tmp_path / "data"), "--deterministic"]
    assert subprocess.run(gen, capture_output=True).returncode == 0
    digests = []
    for name in ("a", "b"):
        cmd = [sys.executable, "-m", "pcma", "train", "--config",
               str(tmp_path / "config.json"), "--data", str(tmp_path / "data"),
               "--out", str(tmp_path / name), "--deterministic"]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        digests.append(_digest_tree(tmp_path / name))
    same = digests[0] == digests[1]
    n_files = len(digests[0])
    report(8, same and n_files > 2,
           f"two deterministic runs, {n_files} files each, byte-identical: {same}")
