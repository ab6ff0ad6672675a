"""Builds the 10-image export fixture and its golden YOLO labels.

Labels are derived here with scipy's 8-connected component labelling so
they do not depend on the Rust implementation under test.
"""
import json
import os

import numpy as np
from PIL import Image
from scipy import ndimage

W, H = 32, 24
HERE = os.path.dirname(os.path.abspath(__file__))


def rect(m, x0, y0, w, h):
    m[y0:y0 + h, x0:x0 + w] = True


def disk(m, cx, cy, r):
    yy, xx = np.mgrid[0:H, 0:W]
    m |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def diagonal(m, x0, y0, n):
    for i in range(n):
        m[y0 + i, x0 + i] = True


def masks():
    out = []
    m = np.zeros((H, W), bool); rect(m, 3, 2, 10, 7); out.append(m)
    m = np.zeros((H, W), bool); rect(m, 0, 0, 4, 4); rect(m, 10, 8, 12, 9); out.append(m)
    m = np.zeros((H, W), bool); disk(m, 20, 12, 6); rect(m, 1, 1, 3, 3); out.append(m)
    m = np.zeros((H, W), bool); diagonal(m, 5, 3, 15); rect(m, 25, 2, 3, 3); out.append(m)
    m = np.zeros((H, W), bool); rect(m, 0, 0, W, H); out.append(m)
    m = np.zeros((H, W), bool); out.append(m)
    m = np.zeros((H, W), bool); rect(m, 31, 23, 1, 1); out.append(m)
    m = np.zeros((H, W), bool); rect(m, 2, 15, 6, 6); rect(m, 14, 3, 7, 8); disk(m, 27, 18, 3); out.append(m)
    m = np.zeros((H, W), bool); disk(m, 8, 10, 7); out.append(m)
    out.append(None)
    return out


def label(m):
    lab, n = ndimage.label(m, structure=np.ones((3, 3), int))
    if n == 0:
        return ""
    sizes = ndimage.sum(m, lab, range(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(lab == best)
    x0, y0 = xs.min(), ys.min()
    w, h = xs.max() - x0 + 1, ys.max() - y0 + 1
    vals = [(x0 + w / 2) / W, (y0 + h / 2) / H, w / W, h / H]
    return "0 " + " ".join(f"{v:.6f}" for v in vals) + "\n"


def main():
    for d in ("images", "masks", "golden"):
        os.makedirs(os.path.join(HERE, d), exist_ok=True)
    splits = ["train", "train", "val", "train", "test", "train", "val", "train", "train", "test"]
    records = []
    for i, m in enumerate(masks()):
        sid = f"f{i:02d}"
        yy, xx = np.mgrid[0:H, 0:W]
        img = np.stack([(xx * 7 + i * 20) % 256, (yy * 9 + i * 5) % 256, np.full((H, W), 60 + i * 15)], -1)
        Image.fromarray(img.astype(np.uint8), "RGB").save(os.path.join(HERE, "images", f"{sid}.png"))
        rec = {"id": sid, "image_path": f"images/{sid}.png", "caption": "smoke over a ridge",
               "source": "synthetic", "split": splits[i]}
        if m is not None:
            Image.fromarray((m * 255).astype(np.uint8), "L").save(os.path.join(HERE, "masks", f"{sid}.png"))
            rec["mask_path"] = f"masks/{sid}.png"
        with open(os.path.join(HERE, "golden", f"{sid}.txt"), "w") as f:
            f.write(label(m) if m is not None else "")
        records.append(rec)
    with open(os.path.join(HERE, "manifest.jsonl"), "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


if __name__ == "__main__":
    main()
