"""Trains the fixture CNN on synthetic images and writes it in container form.

Outputs (under the directory given as the first argument, default
`fixtures/`):

  model/      float model container (manifest.json + tensors.bin)
  calib/      256 labelled calibration images
  eval/       1000 labelled evaluation images
  golden/     logits of the first 16 evaluation images computed by torch

The network covers every layer the quantizer handles: batchnorm to fold
(exported as BatchNorm + Scale + Bias), a grouped convolution, a residual
eltwise join whose result passes through ReLU and max pooling, a three-branch
inception block with nested concats, global average pooling, and a fully
connected classifier.
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SIZE = 16
CLASSES = 10


def make_images(rng, count):
    """Oriented colored gratings plus a blob, with noise and random phase."""
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(np.float32) / SIZE
    labels = rng.integers(0, CLASSES, size=count)
    images = np.empty((count, 3, SIZE, SIZE), dtype=np.float32)
    for i, c in enumerate(labels):
        angle = math.pi * (c % 5) / 5 + rng.normal(0, 0.2)
        freq = 2.0 + 1.5 * (c // 5) + rng.normal(0, 0.15)
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.sin(2 * math.pi * freq * (xs * math.cos(angle) + ys * math.sin(angle)) + phase)
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / 0.02)
        color = np.array([math.cos(2 * math.pi * c / CLASSES), math.sin(2 * math.pi * c / CLASSES), 0.5], dtype=np.float32)
        img = 0.6 * wave[None] + color[:, None, None] * blob[None]
        img += rng.normal(0, 1.6, size=img.shape)
        images[i] = img
    return images, labels.astype(np.int64)


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        self.conv2a = nn.Conv2d(16, 16, 3, padding=1, groups=4)
        self.conv2b = nn.Conv2d(16, 16, 3, padding=1, bias=False)
        self.bn2b = nn.BatchNorm2d(16)
        self.inc1 = nn.Conv2d(16, 4, 1)
        self.inc3 = nn.Conv2d(16, 4, 3, padding=1)
        self.fc = nn.Linear(24, CLASSES)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.bn1(self.conv1(x))), 2)
        r = self.bn2b(self.conv2b(F.relu(self.conv2a(x))))
        x = F.max_pool2d(F.relu(x + r), 2)
        a = F.relu(self.inc1(x))
        b = F.relu(self.inc3(x))
        c = F.max_pool2d(x, 3, stride=1, padding=1)
        x = torch.cat([torch.cat([a, b], 1), c], 1)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class Blob:
    def __init__(self):
        self.table = []
        self.chunks = []
        self.offset = 0

    def add(self, name, array):
        data = np.ascontiguousarray(array, dtype="<f4").tobytes()
        self.table.append({"name": name, "dtype": "f32", "shape": list(array.shape), "offset": self.offset, "length": len(data)})
        self.chunks.append(data)
        self.offset += len(data)
        return name


def t(x):
    return x.detach().cpu().numpy().astype(np.float32)


def export(net, out):
    blob = Blob()
    nodes = []

    def node(id, op, inputs, outputs):
        nodes.append({"id": id, "op": op, "inputs": inputs, "outputs": outputs})

    def conv(id, m, x, y):
        op = {"kind": "Convolution", "weight": blob.add(f"{id}.weight", t(m.weight)),
              "stride": m.stride[0], "pad": m.padding[0], "groups": m.groups}
        if m.bias is not None:
            op["bias"] = blob.add(f"{id}.bias", t(m.bias))
        node(id, op, [x], [y])

    def batchnorm(id, m, x, y):
        mean = blob.add(f"{id}.mean", t(m.running_mean))
        var = blob.add(f"{id}.variance", t(m.running_var))
        node(id, {"kind": "BatchNorm", "mean": mean, "variance": var, "epsilon": m.eps}, [x], [f"{id}/norm"])
        node(f"{id}_scale", {"kind": "Scale", "factors": blob.add(f"{id}_scale.factors", t(m.weight))}, [f"{id}/norm"], [f"{id}/scaled"])
        node(f"{id}_bias", {"kind": "Bias", "values": blob.add(f"{id}_bias.values", t(m.bias))}, [f"{id}/scaled"], [y])

    def pool(id, kind, k, s, p, x, y, glob=False):
        node(id, {"kind": kind, "kernel": k, "stride": s, "pad": p, "global": glob}, [x], [y])

    node("data", {"kind": "Input", "shape": [3, SIZE, SIZE]}, [], ["data"])
    conv("conv1", net.conv1, "data", "conv1")
    batchnorm("bn1", net.bn1, "conv1", "bn1")
    node("relu1", {"kind": "ReLU"}, ["bn1"], ["relu1"])
    pool("pool1", "MaxPool", 2, 2, 0, "relu1", "pool1")
    conv("conv2a", net.conv2a, "pool1", "conv2a")
    node("relu2a", {"kind": "ReLU"}, ["conv2a"], ["relu2a"])
    conv("conv2b", net.conv2b, "relu2a", "conv2b")
    batchnorm("bn2b", net.bn2b, "conv2b", "bn2b")
    node("res", {"kind": "EltwiseAdd"}, ["pool1", "bn2b"], ["res"])
    node("relu2", {"kind": "ReLU"}, ["res"], ["relu2"])
    pool("pool2", "MaxPool", 2, 2, 0, "relu2", "pool2")
    conv("inc1", net.inc1, "pool2", "inc1")
    node("inc1_relu", {"kind": "ReLU"}, ["inc1"], ["inc1_relu"])
    conv("inc3", net.inc3, "pool2", "inc3")
    node("inc3_relu", {"kind": "ReLU"}, ["inc3"], ["inc3_relu"])
    pool("incpool", "MaxPool", 3, 1, 1, "pool2", "incpool")
    node("cat_ab", {"kind": "Concat", "axis": 0}, ["inc1_relu", "inc3_relu"], ["cat_ab"])
    node("cat", {"kind": "Concat", "axis": 0}, ["cat_ab", "incpool"], ["cat"])
    pool("gap", "AvgPool", 0, 1, 0, "cat", "gap", glob=True)
    node("fc", {"kind": "InnerProduct", "weight": blob.add("fc.weight", t(net.fc.weight)),
                "bias": blob.add("fc.bias", t(net.fc.bias))}, ["gap"], ["fc"])
    node("prob", {"kind": "Output"}, ["fc"], [])

    out.mkdir(parents=True, exist_ok=True)
    manifest = {"container": "dfpq-model", "version": 1, "nodes": nodes, "tensors": blob.table}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out / "tensors.bin").write_bytes(b"".join(blob.chunks))


def write_dataset(out, images, labels=None):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"container": "dfpq-dataset", "version": 1, "dtype": "f32",
                "shape": list(images.shape[1:]), "count": int(images.shape[0])}
    if labels is not None:
        manifest["labels"] = [int(v) for v in labels]
    (out / "manifest.json").write_text(json.dumps(manifest) + "\n")
    (out / "images.bin").write_bytes(np.ascontiguousarray(images, dtype="<f4").tobytes())


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "fixtures")
    torch.manual_seed(0)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(0)
    train_x, train_y = make_images(rng, 6000)
    calib_x, calib_y = make_images(rng, 256)
    eval_x, eval_y = make_images(rng, 1000)

    net = Net()
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=12)
    x, y = torch.from_numpy(train_x), torch.from_numpy(train_y)
    for epoch in range(12):
        net.train()
        perm = torch.randperm(len(x))
        for i in range(0, len(x), 64):
            idx = perm[i:i + 64]
            loss = F.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        net.eval()
        with torch.no_grad():
            acc = (net(torch.from_numpy(eval_x)).argmax(1).numpy() == eval_y).mean()
        print(f"epoch {epoch + 1}: loss {loss.item():.3f}, eval top-1 {100 * acc:.1f}%")

    net.eval()
    export(net, out / "model")
    write_dataset(out / "calib", calib_x, calib_y)
    write_dataset(out / "eval", eval_x, eval_y)
    with torch.no_grad():
        golden = net(torch.from_numpy(eval_x[:16])).numpy()
    write_dataset(out / "golden", golden)


if __name__ == "__main__":
    main()
