"""Regenerate the model fixtures shipped in src/cnnpipe/fixtures/."""

import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "cnnpipe" / "fixtures"


class Builder:
    def __init__(self, name, c, h, w):
        self.name = name
        self.input = {"channels": c, "height": h, "width": w}
        self.layers = [{"id": 0, "type": "input"}]
        self.edges = []

    def add(self, kind, preds, **kw):
        lid = len(self.layers)
        self.layers.append({"id": lid, "type": kind, **kw})
        for p in preds:
            self.edges.append([p, lid])
        return lid

    def conv(self, pred, cin, cout, k=(3, 3), s=(1, 1), p=None):
        if p is None:
            p = (k[0] // 2, k[1] // 2)
        return self.add("conv", [pred], kernel=list(k), stride=list(s), padding=list(p),
                        in_channels=cin, out_channels=cout)

    def pool(self, pred, k=(2, 2), s=(2, 2), p=(0, 0)):
        return self.add("pool", [pred], kernel=list(k), stride=list(s), padding=list(p))

    def dump(self, fname):
        doc = {"name": self.name, "input": self.input, "layers": self.layers, "edges": self.edges}
        (OUT / fname).write_text(json.dumps(doc, indent=1) + "\n")


def vgg16():
    b = Builder("vgg16", 3, 224, 224)
    prev, c = 0, 3
    for block in ([64, 64], [128, 128], [256] * 3, [512] * 3, [512] * 3):
        for co in block:
            prev = b.conv(prev, c, co)
            c = co
        prev = b.pool(prev)
    b.add("output", [prev])
    b.dump("vgg16.json")


def yolov2():
    # Darknet-19 backbone plus detection head, passthrough branch inlined as a
    # plain 3x3 conv so the model stays a chain: 23 conv + 5 pool.
    b = Builder("yolov2", 3, 448, 448)
    prev, c = 0, 3
    plan = [32, "P", 64, "P", 128, (64, 1), 128, "P", 256, (128, 1), 256, "P",
            512, (256, 1), 512, (256, 1), 512, "P",
            1024, (512, 1), 1024, (512, 1), 1024, 1024, 1024, 1024, (125, 1)]
    for item in plan:
        if item == "P":
            prev = b.pool(prev)
            continue
        co, k = (item, 3) if isinstance(item, int) else item
        prev = b.conv(prev, c, co, k=(k, k))
        c = co
    b.add("output", [prev])
    b.dump("yolov2.json")


def resnet_block():
    b = Builder("resnet_block", 64, 56, 56)
    a = b.conv(0, 64, 64)
    c = b.conv(a, 64, 64)
    s = b.add("add", [0, c])
    b.add("output", [s])
    b.dump("resnet_block.json")


def inception_c():
    # torchvision InceptionC with 128 channels in the 7x7 branches
    b = Builder("inception_c", 768, 17, 17)
    b1 = b.conv(0, 768, 192, k=(1, 1))
    t = b.conv(0, 768, 128, k=(1, 1))
    t = b.conv(t, 128, 128, k=(1, 7))
    b2 = b.conv(t, 128, 192, k=(7, 1))
    t = b.conv(0, 768, 128, k=(1, 1))
    t = b.conv(t, 128, 128, k=(7, 1))
    t = b.conv(t, 128, 128, k=(1, 7))
    t = b.conv(t, 128, 128, k=(7, 1))
    b3 = b.conv(t, 128, 192, k=(1, 7))
    t = b.pool(0, k=(3, 3), s=(1, 1), p=(1, 1))
    b4 = b.conv(t, 768, 192, k=(1, 1))
    cat = b.add("concat", [b1, b2, b3, b4])
    b.add("output", [cat])
    b.dump("inception_c.json")


def unbalanced():
    b = Builder("unbalanced_1x7_7x1", 64, 17, 17)
    a = b.conv(0, 64, 64, k=(1, 7))
    c = b.conv(a, 64, 64, k=(7, 1))
    b.add("output", [c])
    b.dump("unbalanced.json")


def fig8():
    # A=0 input, B=1, C=2, D=3, E=4 (add), F=5, G=6, H=7 (add)
    b = Builder("fig8", 8, 16, 16)
    B = b.conv(0, 8, 8)
    C = b.conv(0, 8, 8)
    D = b.conv(0, 8, 8)
    E = b.add("add", [B, C])
    F = b.conv(D, 8, 8)
    G = b.conv(E, 8, 8)
    b.add("add", [F, G])
    b.dump("fig8.json")


def nas_like():
    # seven cells of four parallel convs joined by an add, then a short tail: 40 layers
    b = Builder("nas_like", 16, 32, 32)
    prev = 0
    for _ in range(7):
        outs = [b.conv(prev, 16, 16, k=k) for k in ((1, 1), (3, 3), (1, 3), (3, 1))]
        prev = b.add("add", outs)
    for _ in range(3):
        prev = b.conv(prev, 16, 16)
    b.add("output", [prev])
    b.dump("nas_like.json")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for f in (vgg16, yolov2, resnet_block, inception_c, unbalanced, fig8, nas_like):
        f()
