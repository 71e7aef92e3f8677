#!/usr/bin/env python3
"""Trains the tiny-CNN float fixture shipped under fixtures/.

The fixture is an ordinary float32 network (conv/BN/relu/pool stacks with a
global-average-pool head) trained on the deterministic synthetic blob
dataset. Regenerate it with:

    cargo run -p psb-cli --release -- gen-data --classes 4 --per-class 500 \
        --size 16 --seed 7 -o /tmp/psb-data --prefix train
    cargo run -p psb-cli --release -- gen-data --classes 4 --per-class 64 \
        --size 16 --seed 8 -o /tmp/psb-data --prefix test
    python3 scripts/train_fixture.py /tmp/psb-data fixtures/tiny_cnn_f32.psbm

The exporter writes the same container format the engine reads (header +
JSON manifest + little-endian f32 blobs); batch-norm layers are exported as
inference-time affine maps (scale/offset per channel) and left unfolded so
folding is exercised downstream.
"""

import json
import struct
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SEED = 1234


def load_idx(path: Path) -> np.ndarray:
    data = path.read_bytes()
    magic = struct.unpack(">I", data[:4])[0]
    if magic == 0x803:
        n, h, w = struct.unpack(">III", data[4:16])
        return np.frombuffer(data[16:], dtype=np.uint8).reshape(n, h, w).astype(np.float32) / 255.0
    if magic == 0x801:
        (n,) = struct.unpack(">I", data[4:8])
        return np.frombuffer(data[8:], dtype=np.uint8).reshape(n).astype(np.int64)
    raise ValueError(f"bad IDX magic 0x{magic:08x} in {path}")


class TinyCnn(nn.Module):
    def __init__(self, classes: int = 4):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 24, 3, padding="same")
        self.bn1 = nn.BatchNorm2d(24)
        self.conv2 = nn.Conv2d(24, 64, 3, padding="same")
        self.bn2 = nn.BatchNorm2d(64)
        self.head = nn.Linear(64, classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.bn1(self.conv1(x))), 2)
        x = F.max_pool2d(F.relu(self.bn2(self.conv2(x))), 2)
        x = x.mean(dim=(2, 3))
        return self.head(x)


def accuracy(model, images, labels):
    model.eval()
    with torch.no_grad():
        logits = model(images)
        return (logits.argmax(1) == labels).float().mean().item()


def bn_affine(bn: nn.BatchNorm2d):
    a = bn.weight.detach().numpy() / np.sqrt(bn.running_var.detach().numpy() + bn.eps)
    b = bn.bias.detach().numpy() - a * bn.running_mean.detach().numpy()
    return a.astype(np.float32), b.astype(np.float32)


class ContainerWriter:
    def __init__(self, input_shape):
        self.input_shape = list(input_shape)
        self.layers = []
        self.tensors = []
        self.blob = bytearray()

    def _push_tensor(self, name, shape, arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        assert list(arr.shape) == list(shape), (arr.shape, shape)
        offset = len(self.blob)
        raw = arr.tobytes()
        self.blob.extend(raw)
        self.tensors.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(shape),
                "offset": offset,
                "byte_len": len(raw),
            }
        )

    def conv2d(self, inputs, weight_oihw, bias, stride=1, padding="same"):
        i = len(self.layers)
        # torch OIHW -> container [kh, kw, c_in, c_out]
        w = np.transpose(weight_oihw, (2, 3, 1, 0))
        self._push_tensor(f"layer{i}.weights", w.shape, w)
        self._push_tensor(f"layer{i}.bias", [bias.shape[0]], bias)
        self.layers.append(
            {
                "kind": "conv2d",
                "inputs": inputs,
                "weights": f"layer{i}.weights",
                "bias": f"layer{i}.bias",
                "kh": int(w.shape[0]),
                "kw": int(w.shape[1]),
                "c_in": int(w.shape[2]),
                "c_out": int(w.shape[3]),
                "stride": stride,
                "padding": padding,
            }
        )

    def batch_norm(self, inputs, scale, offset):
        i = len(self.layers)
        self._push_tensor(f"layer{i}.scale", [scale.shape[0]], scale)
        self._push_tensor(f"layer{i}.offset", [offset.shape[0]], offset)
        self.layers.append(
            {
                "kind": "batch_norm",
                "inputs": inputs,
                "scale": f"layer{i}.scale",
                "offset": f"layer{i}.offset",
            }
        )

    def simple(self, kind, inputs, **extra):
        self.layers.append({"kind": kind, "inputs": inputs, **extra})

    def dense(self, inputs, weight_oi, bias):
        i = len(self.layers)
        self._push_tensor(f"layer{i}.weights", weight_oi.shape, weight_oi)
        self._push_tensor(f"layer{i}.bias", [bias.shape[0]], bias)
        self.layers.append(
            {
                "kind": "dense",
                "inputs": inputs,
                "weights": f"layer{i}.weights",
                "bias": f"layer{i}.bias",
            }
        )

    def write(self, path: Path):
        manifest = {
            "format_version": 1,
            "input_shape": self.input_shape,
            "encoding": None,
            "layers": self.layers,
            "tensors": self.tensors,
        }
        mj = json.dumps(manifest).encode()
        with open(path, "wb") as f:
            f.write(b"PSBM")
            f.write(struct.pack("<I", 1))
            f.write(struct.pack("<Q", len(mj)))
            f.write(mj)
            f.write(bytes(self.blob))


def export(model: TinyCnn, path: Path, size: int):
    w = ContainerWriter([size, size, 1])
    a1, b1 = bn_affine(model.bn1)
    a2, b2 = bn_affine(model.bn2)
    w.conv2d([0], model.conv1.weight.detach().numpy(), model.conv1.bias.detach().numpy())
    w.batch_norm([1], a1, b1)
    w.simple("relu", [2])
    w.simple("max_pool", [3], size=2, stride=2)
    w.conv2d([4], model.conv2.weight.detach().numpy(), model.conv2.bias.detach().numpy())
    w.batch_norm([5], a2, b2)
    w.simple("relu", [6])
    w.simple("max_pool", [7], size=2, stride=2)
    w.simple("global_avg_pool", [8])
    w.dense([9], model.head.weight.detach().numpy(), model.head.bias.detach().numpy())
    w.write(path)


def weight_tensors(model: TinyCnn):
    return [model.conv1.weight, model.conv2.weight, model.head.weight]


def folded_magnitudes(model: TinyCnn):
    """Weight magnitudes after batch-norm folding, matching the downstream
    prune order (folding rescales each output channel by gamma/sigma)."""
    a1, _ = bn_affine(model.bn1)
    a2, _ = bn_affine(model.bn2)
    mags = [
        np.abs(model.conv1.weight.detach().numpy()) * np.abs(a1)[:, None, None, None],
        np.abs(model.conv2.weight.detach().numpy()) * np.abs(a2)[:, None, None, None],
        np.abs(model.head.weight.detach().numpy()),
    ]
    return [torch.from_numpy(m) for m in mags]


def global_keep_masks(model: TinyCnn, keep_fraction: float):
    """Boolean masks marking the globally largest folded magnitudes."""
    mags = folded_magnitudes(model)
    flat = torch.cat([m.flatten() for m in mags])
    k = int(round(len(flat) * keep_fraction))
    threshold = flat.sort(descending=True).values[k - 1]
    return [m >= threshold for m in mags]


def run_epochs(model, opt, train_x, train_y, epochs, batch, l1=None, masks=None, wnoise=None):
    n = train_x.shape[0]
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(n)
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            opt.zero_grad()
            saved = None
            if wnoise is not None:
                # Multiplicative weight noise with straight-through
                # gradients: forward/backward at the perturbed point, step
                # on the clean weights.
                saved = [w.detach().clone() for w in weight_tensors(model)]
                with torch.no_grad():
                    for w in weight_tensors(model):
                        w.mul_(1.0 + wnoise * torch.randn_like(w))
            loss = F.cross_entropy(model(train_x[idx]), train_y[idx])
            if l1 is not None:
                ramp = (epoch + 1) / epochs
                loss = loss + l1 * ramp * sum(w.abs().sum() for w in weight_tensors(model))
            loss.backward()
            if saved is not None:
                with torch.no_grad():
                    for w, clean in zip(weight_tensors(model), saved):
                        w.copy_(clean)
            if masks is not None:
                for w, keep in zip(weight_tensors(model), masks):
                    w.grad *= keep
            opt.step()


def masked_accuracy(model, masks, images, labels):
    saved = [w.detach().clone() for w in weight_tensors(model)]
    with torch.no_grad():
        for w, keep in zip(weight_tensors(model), masks):
            w *= keep
    acc = accuracy(model, images, labels)
    with torch.no_grad():
        for w, orig in zip(weight_tensors(model), saved):
            w.copy_(orig)
    return acc


def fold_scales(model: TinyCnn):
    a1, _ = bn_affine(model.bn1)
    a2, _ = bn_affine(model.bn2)
    head_rows = model.head.weight.shape[0]
    return [
        np.abs(a1)[:, None, None, None],
        np.abs(a2)[:, None, None, None],
        np.ones((head_rows, 1), dtype=np.float32),
    ]


def set_leftovers(model: TinyCnn, masks, eta=0.004):
    """Replaces masked (zeroed) weights with small nonzero values whose
    *folded* magnitude sits near `eta`: large enough to survive encoding,
    small enough that magnitude pruning removes exactly this set without
    noticeably changing the dense network."""
    rng = np.random.RandomState(7)
    for w, keep, a in zip(weight_tensors(model), masks, fold_scales(model)):
        wn = w.detach().numpy().copy()
        sign = rng.choice([-1.0, 1.0], size=wn.shape)
        jitter = 0.75 + 0.5 * rng.rand(*wn.shape)
        raw = sign * eta * jitter / np.maximum(a, 0.2)
        hole = ~keep.numpy()
        wn[hole] = raw[hole]
        with torch.no_grad():
            w.copy_(torch.from_numpy(wn).float())


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    data_dir = Path(sys.argv[1])
    out_path = Path(sys.argv[2])

    torch.manual_seed(SEED)
    np.random.seed(SEED)

    train_x = torch.from_numpy(load_idx(data_dir / "train-images.idx")).unsqueeze(1)
    train_y = torch.from_numpy(load_idx(data_dir / "train-labels.idx"))
    test_x = torch.from_numpy(load_idx(data_dir / "test-images.idx")).unsqueeze(1)
    test_y = torch.from_numpy(load_idx(data_dir / "test-labels.idx"))
    size = train_x.shape[-1]

    model = TinyCnn(classes=int(train_y.max().item()) + 1)
    batch = 64

    # Phase A: plain dense training.
    opt = torch.optim.Adam(model.parameters(), lr=3e-3, weight_decay=1e-4)
    run_epochs(model, opt, train_x, train_y, epochs=50, batch=batch, wnoise=0.06)
    print(f"dense: test {accuracy(model, test_x, test_y):.4f}")

    # Phase B: L1 pressure concentrates the function in few weights so
    # magnitude pruning at high fractions stays benign.
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    run_epochs(model, opt, train_x, train_y, epochs=80, batch=batch, l1=3e-3, wnoise=0.06)
    print(f"after L1: test {accuracy(model, test_x, test_y):.4f}")

    # Phase C: hard-zero the bottom 90% (by folded magnitude) and fine-tune
    # the survivors, so the top-10% carries the function by itself.
    masks = global_keep_masks(model, keep_fraction=0.10)
    with torch.no_grad():
        for w, keep in zip(weight_tensors(model), masks):
            w *= keep
    for name, keep in zip(["conv1", "conv2", "head"], masks):
        print(f"  survivors in {name}: {int(keep.sum())}/{keep.numel()}")
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    run_epochs(model, opt, train_x, train_y, epochs=70, batch=batch, masks=masks, wnoise=0.08)
    # Phase D: robustness to the multiplicative noise the stochastic number
    # system injects at moderate sample budgets.
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    run_epochs(model, opt, train_x, train_y, epochs=80, batch=batch, masks=masks, wnoise=0.11)
    opt = torch.optim.Adam(model.parameters(), lr=2e-4)
    run_epochs(model, opt, train_x, train_y, epochs=40, batch=batch, masks=masks, wnoise=0.09)
    print(f"noise fine-tune: test {accuracy(model, test_x, test_y):.4f}")

    # Re-inject small leftovers so the shipped fixture is a dense network
    # whose global magnitude order still puts exactly this set at the
    # bottom.
    set_leftovers(model, masks, eta=0.004)
    mags = torch.cat([m.flatten() for m in folded_magnitudes(model)])
    hole = torch.cat([(~k).flatten() for k in masks])
    bottom = mags.sort().indices[: int(hole.sum())]
    recovered = hole[bottom].float().mean().item()
    print(f"leftover set occupies the global bottom: {recovered:.4f}")

    test_acc = accuracy(model, test_x, test_y)
    pruned_acc = masked_accuracy(model, masks, test_x, test_y)
    print(f"final float test accuracy: {test_acc:.4f}; 90%-pruned float: {pruned_acc:.4f}")
    if test_acc < 0.95:
        sys.exit("fixture did not reach the 95% float accuracy bar; adjust training")
    if abs(pruned_acc - test_acc) > 0.02:
        sys.exit("pruned accuracy deviates too far; adjust the sparsity phases")
    if recovered < 0.999:
        sys.exit("leftover weights are not the global magnitude bottom; lower eta")

    out_path.parent.mkdir(parents=True, exist_ok=True)
    export(model, out_path, size)
    print(f"wrote {out_path}")


if __name__ == "__main__":
    main()
