"""Optimization loop: Adam, batching, telemetry, checkpoints, evaluation.

Telemetry is one CSV row per step:
``step,loss,l1,l2,l3,l4,ratio_m1,ratio_m2,ratio_m3,flops_qsca_total``
where the losses are the normalized per-stage objectives, the ratios are
the remaining (unmasked) token fractions, and the FLOPs column is the
batch's attention cost from the ledger. The loop itself enforces the
masking progression invariant every step and aborts loudly on a
non-finite loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import Network, NetworkConfig, init_network
from .masking import inclusion_violations
from .supervision import f_measure, miou, total_loss
from .synthdata import Scene, load_dataset
from .tensor import NumericError, Tensor, _sigmoid_stable, no_grad, resize_bilinear

__all__ = ["TrainConfig", "Adam", "train", "evaluate", "predict_scene", "split_config",
           "TELEMETRY_HEADER"]

TELEMETRY_HEADER = "step,loss,l1,l2,l3,l4,ratio_m1,ratio_m2,ratio_m3,flops_qsca_total"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 100
    seed: int = 0
    checkpoint_interval: int = 0  # 0 keeps only the final checkpoint
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("need lr >= 0, batch_size >= 1, steps >= 0")


def split_config(data: dict) -> tuple[NetworkConfig, TrainConfig]:
    """Partition one flat JSON document into the two config dataclasses."""
    net_keys = {f.name for f in fields(NetworkConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - net_keys - train_keys
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    net = NetworkConfig.from_dict({k: v for k, v in data.items() if k in net_keys})
    train_cfg = TrainConfig(**{k: v for k, v in data.items() if k in train_keys})
    return net, train_cfg


class Adam:
    """Adam with bias correction; parameters without a gradient are skipped."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_global_norm(self, max_norm: float) -> float:
        grads = [p.grad for p in self.params.values() if p.grad is not None]
        total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if max_norm > 0 and total > max_norm:
            scale = max_norm / total
            for g in grads:
                g *= scale
        return total

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _scene_tensors(scene: Scene) -> tuple[Tensor, Tensor, Tensor]:
    return (
        Tensor(scene.frames.astype(np.float32)),
        Tensor(scene.audio.astype(np.float32)),
        Tensor(scene.gt.astype(np.float32)),
    )


def _check_progression(masks: dict[int, np.ndarray], step: int) -> None:
    for fine, coarse in ((2, 3), (1, 2)):
        if fine in masks and coarse in masks:
            bad = inclusion_violations(masks[fine], masks[coarse])
            if bad:
                raise AssertionError(
                    f"step {step}: {bad} mask pixels became unconfident again"
                    f" between stages {coarse} and {fine}"
                )


def _fmt(x: float) -> str:
    return repr(float(x))


def train(net_config: NetworkConfig, train_config: TrainConfig, data_dir, out_dir) -> dict:
    """Run the optimization loop; writes telemetry and checkpoints under out_dir."""
    scenes = load_dataset(data_dir)
    if not scenes:
        raise ValueError(f"dataset at {data_dir} is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    params = init_network(net_config, train_config.seed)
    net = Network(net_config, params)
    named = params.named()
    optimizer = Adam(named, lr=train_config.lr)
    order_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(train_config.seed, spawn_key=(1,)))
    )

    telemetry_path = out / "telemetry.csv"
    queue: list[int] = []
    check_progression = net_config.use_mask and net_config.use_progression
    weights = net_config.loss_weights
    last_loss = float("nan")

    with telemetry_path.open("w") as telemetry:
        telemetry.write(TELEMETRY_HEADER + "\n")
        for step in range(1, train_config.steps + 1):
            batch: list[int] = []
            while len(batch) < train_config.batch_size:
                if not queue:
                    queue = list(order_rng.permutation(len(scenes)))
                batch.append(int(queue.pop()))

            optimizer.zero_grad()
            losses = np.zeros(5)
            ratios = np.zeros(3)
            flops_total = 0
            for idx in batch:
                frames, audio, gt = _scene_tensors(scenes[idx])
                result = net.forward(frames, audio)
                report = total_loss(result.outputs, gt, weights)
                if not np.isfinite(report.normalized_total):
                    _dump_diagnostic(out, step, batch, idx, scenes[idx], report)
                    raise NumericError(
                        f"non-finite loss {report.normalized_total} at step {step}, scene {idx}"
                    )
                (report.objective * (1.0 / train_config.batch_size)).backward()
                losses[0] += report.normalized_total
                losses[1:] += report.normalized_stage
                rr = result.remaining_ratios()
                ratios += [rr.get(1, 1.0), rr.get(2, 1.0), rr.get(3, 1.0)]
                flops_total += result.ledger.attention
                if check_progression:
                    _check_progression(result.masks, step)

            losses /= train_config.batch_size
            ratios /= train_config.batch_size
            if not (ratios[0] <= ratios[1] <= ratios[2]):
                raise AssertionError(f"step {step}: remaining ratios not ordered: {ratios}")

            optimizer.clip_global_norm(train_config.grad_clip)
            optimizer.step()
            last_loss = losses[0]

            row = ",".join(
                [str(step)] + [_fmt(x) for x in losses] + [_fmt(x) for x in ratios]
                + [str(int(flops_total))]
            )
            telemetry.write(row + "\n")

            if train_config.checkpoint_interval and step % train_config.checkpoint_interval == 0:
                save_checkpoint(out / f"checkpoint_step_{step:06d}", net_config, params)

    final_dir = out / "checkpoint_final"
    save_checkpoint(final_dir, net_config, params)
    return {
        "steps": train_config.steps,
        "final_loss": last_loss,
        "telemetry": str(telemetry_path),
        "checkpoint": str(final_dir),
    }


def _dump_diagnostic(out: Path, step: int, batch: list[int], scene_index: int,
                     scene: Scene, report) -> None:
    from .container import write_tensor

    payload = {
        "step": step,
        "batch": batch,
        "scene_index": scene_index,
        "bce": report.bce,
        "iou": report.iou,
        "normalized_stage": report.normalized_stage,
        "tensors": ["frames.pcmt", "audio.pcmt", "gt.pcmt"],
    }
    (out / "diagnostic.json").write_text(json.dumps(payload, sort_keys=True, default=str) + "\n")
    write_tensor(out / "frames.pcmt", scene.frames)
    write_tensor(out / "audio.pcmt", scene.audio)
    write_tensor(out / "gt.pcmt", scene.gt)


def predict_scene(net: Network, scene: Scene) -> tuple[np.ndarray, np.ndarray, dict]:
    """Probabilities and binary mask at input resolution, plus mask ratios."""
    frames, audio, _ = _scene_tensors(scene)
    with no_grad():
        result = net.forward(frames, audio)
        _, h, w, _ = scene.frames.shape
        up = resize_bilinear(result.outputs[0], h, w)
    probs = _sigmoid_stable(up.data)[..., 0]
    return probs, (probs >= 0.5).astype(np.uint8), result.remaining_ratios()


def evaluate(checkpoint_dir, data_dir) -> dict:
    """Score a checkpoint over a dataset; per-frame metrics are pooled."""
    config, params = load_checkpoint(checkpoint_dir)
    net = Network(config, params)
    scenes = load_dataset(data_dir)
    if not scenes:
        raise ValueError(f"dataset at {data_dir} is empty")
    iou_scores: list[float] = []
    f_scores: list[float] = []
    stage_losses = np.zeros(4)
    ratio_sums = {1: 0.0, 2: 0.0, 3: 0.0}
    for scene in scenes:
        frames, audio, gt = _scene_tensors(scene)
        t, h, w, _ = scene.frames.shape
        with no_grad():
            result = net.forward(frames, audio)
            report = total_loss(result.outputs, gt, config.loss_weights)
            up = resize_bilinear(result.outputs[0], h, w)
        pred = (_sigmoid_stable(up.data)[..., 0] >= 0.5).astype(np.uint8)
        for ft in range(t):
            iou_scores.append(miou(pred[ft], scene.gt[ft]))
            f_scores.append(f_measure(pred[ft], scene.gt[ft]))
        stage_losses += report.normalized_stage
        ratios = result.remaining_ratios()
        for k in ratio_sums:
            ratio_sums[k] += ratios.get(k, 1.0)
    n = len(scenes)
    return {
        "miou": float(np.mean(iou_scores)),
        "f_measure": float(np.mean(f_scores)),
        "per_stage_losses": [float(x / n) for x in stage_losses],
        "mask_ratios": {f"m{k}": ratio_sums[k] / n for k in (1, 2, 3)},
        "scenes": n,
    }
